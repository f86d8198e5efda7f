//! Progressive codebook training against a frozen backbone: transport
//! alignment to teacher reflection states, then supervised fine-tuning on
//! refined answers.

use serde::Serialize;
use thiserror::Error;

use crate::backbone::{Backbone, BackboneError, Bound, LogitRows, Pass};
use crate::codebook::{self, BoundCodebook, Codebook, CodebookConfig, CodebookError};
use crate::ndiff::{Graph, Matrix, NdiffError, Var};
use crate::optim::{global_norm, Adam};
use crate::ot::{self, AlignConfig, Marginals, OtError};
use crate::sampling::{self, GumbelConfig, NoiseStream};
use crate::tasks::{self, Record, TaskError};
use crate::vocab::{self, Token, Vocab};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training records")]
    NoRecords,
    #[error("reflection boundary {boundary} out of range for a sequence of {len}")]
    Boundary { boundary: usize, len: usize },
    #[error("non-finite {phase} loss at step {step} on example {id}")]
    NonFinite { phase: &'static str, step: usize, id: String },
    #[error("backbone must be frozen before codebook training")]
    NotFrozen,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub codebook: CodebookConfig,
    pub align_epochs: usize,
    pub align_lr: f64,
    pub sft_epochs: usize,
    pub sft_lr: f64,
    pub batch: usize,
    pub align: AlignConfig,
    pub gumbel: GumbelConfig,
    /// Apply Gumbel noise during fine-tuning as well as alignment.
    pub sft_noise: bool,
    /// Add answer cross-entropy to the alignment phase.
    pub align_token_loss: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            codebook: CodebookConfig::default(),
            align_epochs: 2,
            align_lr: 1e-4,
            sft_epochs: 3,
            sft_lr: 1e-4,
            batch: 4,
            align: AlignConfig::default(),
            gumbel: GumbelConfig::default(),
            sft_noise: false,
            align_token_loss: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.align_lr, self.sft_lr];
        if rates.iter().any(|&r| !(r >= 0.0) || !r.is_finite()) {
            return Err(TrainError::Config(format!("learning rates {rates:?}")));
        }
        if self.batch == 0 {
            return Err(TrainError::Config("batch must be positive".into()));
        }
        if !(self.gumbel.temperature > 0.0) {
            return Err(TrainError::Config("gumbel temperature must be positive".into()));
        }
        self.codebook.validate()?;
        Ok(())
    }
}

/// Teacher states for one example, per hidden state `L..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStates {
    pub query: Vec<Matrix>,
    pub reflection: Vec<Matrix>,
}

/// Run `{x, r}` through the frozen backbone and split every state from
/// `layer` upward at the question/reflection boundary.
pub fn teacher_hiddens(model: &Backbone, question: &[Token], reflection: &[Token], layer: usize) -> Result<TeacherStates> {
    if question.is_empty() || reflection.is_empty() {
        return Err(TrainError::Boundary {
            boundary: question.len(),
            len: question.len() + reflection.len(),
        });
    }
    if !model.is_frozen() {
        return Err(TrainError::NotFrozen);
    }
    let mut seq = question.to_vec();
    seq.extend_from_slice(reflection);
    let states = model.hidden_states(&seq)?;
    if layer == 0 || layer >= states.len() - 1 {
        return Err(BackboneError::LayerOutOfRange {
            layer,
            layers: states.len() - 1,
        }
        .into());
    }
    let q = question.len();
    let m = reflection.len();
    let mut out = TeacherStates {
        query: Vec::new(),
        reflection: Vec::new(),
    };
    for st in &states[layer..] {
        out.query.push(st.slice(ndarray::s![..q, ..]).to_owned());
        out.reflection.push(st.slice(ndarray::s![q..q + m, ..]).to_owned());
    }
    Ok(out)
}

/// Everything about one record that stays fixed while the codebook trains.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub question: Vec<Token>,
    /// Question states at the insertion layer.
    pub query_state: Matrix,
    /// Teacher reflection-side states, `L..=N`.
    pub teacher: Vec<Matrix>,
    /// `=` followed by the answer.
    pub suffix: Vec<Token>,
    /// Answer followed by the end token.
    pub targets: Vec<Token>,
}

pub fn prepare(model: &Backbone, records: &[Record], layer: usize) -> Result<Vec<Prepared>> {
    let v = Vocab::get();
    records
        .iter()
        .map(|rec| {
            let question = v.parse(&rec.question).map_err(TaskError::from)?;
            let reflection = v.parse(&rec.reflection).map_err(TaskError::from)?;
            let answer = v.parse(&rec.answer).map_err(TaskError::from)?;
            let teacher = teacher_hiddens(model, &question, &reflection, layer)?;
            let query_state = teacher.query[0].clone();
            let mut suffix = vec![vocab::EQUALS];
            suffix.extend_from_slice(&answer);
            let mut targets = answer;
            targets.push(vocab::EOS);
            Ok(Prepared {
                id: rec.id.clone(),
                question,
                query_state,
                teacher: teacher.reflection,
                suffix,
                targets,
            })
        })
        .collect()
}

/// Student forward with units chosen by the codebook.
pub struct StudentPass {
    pub pass: Pass,
    pub selected: Vec<usize>,
    pub clamped: bool,
    /// `hard - soft` of the indicator at this point.
    pub offset: Matrix,
}

/// Gradient-stopped quantities of one example's loss, captured where the
/// loss was built. Replaying them turns the loss into a smooth function of
/// the codebook whose derivative is the training gradient.
#[derive(Debug, Clone)]
pub struct Detached {
    pub selected: Vec<usize>,
    pub offset: Matrix,
    pub marginals: Vec<Marginals>,
}

#[allow(clippy::too_many_arguments)]
pub fn student_pass(
    model: &Backbone,
    cb: &Codebook,
    g: &Graph,
    bb: &Bound,
    bc: &BoundCodebook,
    ex: &Prepared,
    noise: Option<(&Matrix, f64)>,
    with_suffix: bool,
    replay: Option<&Detached>,
) -> Result<StudentPass> {
    let h = g.constant(ex.query_state.clone());
    let pooled = codebook::pool_graph(g, h)?;
    let scores = cb.score_graph(g, bc, pooled)?;
    let (soft, clamped) = match noise {
        Some((eps, tau)) => sampling::perturbed_scores(g, scores, eps, tau)?,
        None => (scores, false),
    };
    let (indicator, selected, offset) = match replay {
        Some(d) => (
            sampling::straight_through_replay(g, soft, &d.offset)?,
            d.selected.clone(),
            d.offset.clone(),
        ),
        None => {
            let (ind, idx) = sampling::straight_through_topk(g, soft, cb.config().select)?;
            let offset = &*g.value(ind) - &*g.value(soft);
            (ind, idx, offset)
        }
    };
    let units = sampling::gate_units(g, bc.units, indicator, &selected)?;
    let suffix: &[Token] = if with_suffix { &ex.suffix } else { &[] };
    let pass = model.forward_graph(g, bb, &ex.question, Some((cb.config().layer, units)), suffix, LogitRows::Tail)?;
    Ok(StudentPass {
        pass,
        selected,
        clamped,
        offset,
    })
}

/// Which terms enter a per-example loss.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'a> {
    pub align: Option<&'a AlignConfig>,
    pub tokens: bool,
}

pub struct ExampleLoss {
    pub loss: Var,
    pub detached: Detached,
    pub clamped: bool,
}

/// Per-example objective: transport alignment and/or answer cross-entropy.
#[allow(clippy::too_many_arguments)]
pub fn example_loss(
    model: &Backbone,
    cb: &Codebook,
    g: &Graph,
    bb: &Bound,
    bc: &BoundCodebook,
    ex: &Prepared,
    noise: Option<(&Matrix, f64)>,
    terms: LossTerms,
    replay: Option<&Detached>,
) -> Result<ExampleLoss> {
    if terms.align.is_none() && !terms.tokens {
        return Err(TrainError::Config("empty loss".into()));
    }
    let sp = student_pass(model, cb, g, bb, bc, ex, noise, terms.tokens, replay)?;
    let mut loss = None;
    let mut marginals = Vec::new();
    if let Some(cfg) = terms.align {
        let (l, m) = ot::alignment_loss_given(
            g,
            &sp.pass.unit_states,
            &ex.teacher,
            cfg,
            replay.map(|d| d.marginals.as_slice()),
        )?;
        loss = Some(l);
        marginals = m;
    }
    if terms.tokens {
        let ce = g.cross_entropy(sp.pass.logits, &ex.targets)?;
        loss = Some(match loss {
            Some(l) => g.add(l, ce)?,
            None => ce,
        });
    }
    Ok(ExampleLoss {
        loss: loss.expect("nonempty"),
        detached: Detached {
            selected: sp.selected,
            offset: sp.offset,
            marginals,
        },
        clamped: sp.clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    Align,
    Sft,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Align => "align",
            Phase::Sft => "sft",
        }
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub grad_norm: f64,
    /// Gradient norm reaching the query and unit transforms.
    pub score_grad_norm: f64,
}

pub fn metrics_jsonl(trace: &[StepRecord]) -> String {
    trace
        .iter()
        .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
        .collect()
}

/// Trailing moving average with the given window; entry `i` averages
/// `max(0, i + 1 - window)..=i`.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        sum += x;
        if i >= window {
            sum -= xs[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

struct Runner<'a> {
    model: &'a Backbone,
    cfg: &'a TrainConfig,
    noise: NoiseStream,
    opt: Adam,
}

impl Runner<'_> {
    fn example_loss(&mut self, cb: &Codebook, g: &Graph, bb: &Bound, bc: &BoundCodebook, ex: &Prepared, phase: Phase) -> Result<Var> {
        let use_noise = self.cfg.gumbel.enabled && (phase == Phase::Align || self.cfg.sft_noise);
        let eps = use_noise.then(|| self.noise.next_row(cb.config().units));
        let noise = eps.as_ref().map(|e| (e, self.cfg.gumbel.temperature));
        let terms = match phase {
            Phase::Align => LossTerms {
                align: Some(&self.cfg.align),
                tokens: self.cfg.align_token_loss,
            },
            Phase::Sft => LossTerms {
                align: None,
                tokens: true,
            },
        };
        let out = example_loss(self.model, cb, g, bb, bc, ex, noise, terms, None)?;
        if out.clamped {
            log::info!("score clamped to floor before log on {}", ex.id);
        }
        Ok(out.loss)
    }

    fn run_phase(
        &mut self,
        cb: &mut Codebook,
        data: &[Prepared],
        phase: Phase,
        epochs: usize,
        lr: f64,
        trace: &mut Vec<StepRecord>,
        progress: &mut dyn FnMut(&StepRecord),
    ) -> Result<()> {
        let mut step = 0;
        for epoch in 0..epochs {
            let order = tasks::shuffled(
                &(0..data.len()).collect::<Vec<_>>(),
                self.cfg.seed ^ ((phase as u64 + 1) << 32) ^ epoch as u64,
            );
            for chunk in order.chunks(self.cfg.batch) {
                let mut grads: Vec<Matrix> = cb.shapes().into_iter().map(Matrix::zeros).collect();
                let mut loss_sum = 0.0;
                for &i in chunk {
                    let ex = &data[i];
                    let g = Graph::new();
                    let bb = self.model.bind(&g, false);
                    let bc = cb.bind(&g, true);
                    let loss = self.example_loss(cb, &g, &bb, &bc, ex, phase).map_err(|e| match e {
                        TrainError::Ndiff(NdiffError::NonFinite { .. })
                        | TrainError::Backbone(BackboneError::Ndiff(NdiffError::NonFinite { .. }))
                        | TrainError::Ot(OtError::Ndiff(NdiffError::NonFinite { .. })) => TrainError::NonFinite {
                            phase: phase.name(),
                            step,
                            id: ex.id.clone(),
                        },
                        other => other,
                    })?;
                    let value = g.item(loss);
                    if !value.is_finite() {
                        return Err(TrainError::NonFinite {
                            phase: phase.name(),
                            step,
                            id: ex.id.clone(),
                        });
                    }
                    loss_sum += value;
                    let mut gr = g.backward(loss)?;
                    for (acc, v) in grads.iter_mut().zip(bc.vars()) {
                        *acc += &gr.take(v);
                    }
                }
                let n = chunk.len() as f64;
                for gm in grads.iter_mut() {
                    gm.mapv_inplace(|v| v / n);
                }
                let rec = StepRecord {
                    step,
                    phase,
                    loss: loss_sum / n,
                    grad_norm: global_norm(&grads),
                    score_grad_norm: global_norm(&grads[1..]),
                };
                self.opt.step(cb.params_mut(), &grads, lr);
                cb.clamp_row_norms(codebook::ROW_NORM_CEILING);
                progress(&rec);
                trace.push(rec);
                step += 1;
            }
        }
        Ok(())
    }
}

/// Codebooks and traces from a full run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub after_align: Codebook,
    pub codebook: Codebook,
    pub align_trace: Vec<StepRecord>,
    pub sft_trace: Vec<StepRecord>,
}

/// Alignment phase on its own.
pub fn align_phase(model: &Backbone, cb: &mut Codebook, data: &[Prepared], cfg: &TrainConfig) -> Result<Vec<StepRecord>> {
    run_single(model, cb, data, cfg, Phase::Align)
}

/// Fine-tuning phase on its own.
pub fn sft_phase(model: &Backbone, cb: &mut Codebook, data: &[Prepared], cfg: &TrainConfig) -> Result<Vec<StepRecord>> {
    run_single(model, cb, data, cfg, Phase::Sft)
}

fn run_single(model: &Backbone, cb: &mut Codebook, data: &[Prepared], cfg: &TrainConfig, phase: Phase) -> Result<Vec<StepRecord>> {
    check_inputs(model, data, cfg)?;
    let mut runner = Runner {
        model,
        cfg,
        noise: NoiseStream::new(cfg.gumbel.seed ^ phase as u64),
        opt: Adam::new(cb.shapes()),
    };
    let (epochs, lr) = match phase {
        Phase::Align => (cfg.align_epochs, cfg.align_lr),
        Phase::Sft => (cfg.sft_epochs, cfg.sft_lr),
    };
    let mut trace = Vec::new();
    runner.run_phase(cb, data, phase, epochs, lr, &mut trace, &mut |_| {})?;
    Ok(trace)
}

fn check_inputs(model: &Backbone, data: &[Prepared], cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    cfg.codebook.validate_for(model.layers(), model.width())?;
    if !model.is_frozen() {
        return Err(TrainError::NotFrozen);
    }
    if data.is_empty() {
        return Err(TrainError::NoRecords);
    }
    Ok(())
}

/// Alignment then fine-tuning, each with its own optimizer state.
pub fn train(
    model: &Backbone,
    records: &[Record],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    if records.is_empty() {
        return Err(TrainError::NoRecords);
    }
    cfg.validate()?;
    cfg.codebook.validate_for(model.layers(), model.width())?;
    let data = prepare(model, records, cfg.codebook.layer)?;
    train_prepared(model, &data, cfg, &mut progress)
}

pub fn train_prepared(
    model: &Backbone,
    data: &[Prepared],
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    check_inputs(model, data, cfg)?;
    let mut cb = Codebook::init(cfg.codebook, cfg.seed)?;
    let mut runner = Runner {
        model,
        cfg,
        noise: NoiseStream::new(cfg.gumbel.seed),
        opt: Adam::new(cb.shapes()),
    };
    let mut align_trace = Vec::new();
    runner.run_phase(&mut cb, data, Phase::Align, cfg.align_epochs, cfg.align_lr, &mut align_trace, progress)?;
    let after_align = cb.clone();
    runner.opt = Adam::new(cb.shapes());
    let mut sft_trace = Vec::new();
    runner.run_phase(&mut cb, data, Phase::Sft, cfg.sft_epochs, cfg.sft_lr, &mut sft_trace, progress)?;
    Ok(TrainOutcome {
        after_align,
        codebook: cb,
        align_trace,
        sft_trace,
    })
}
