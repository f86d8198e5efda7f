//! Single-pass inference with codebook units, the nearest-neighbor
//! reflection baseline, selection statistics and latency measurement.

use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::backbone::{argmax, Backbone, BackboneError, DecodeRequest, KvCache};
use crate::codebook::{self, Codebook, CodebookError, Retriever};
use crate::ndiff::Matrix;
use crate::tasks::{self, Record, TaskError, TaskInstance};
use crate::vocab::{self, Token, Vocab};

#[derive(Debug, Error)]
pub enum InferError {
    #[error("no traces")]
    NoTraces,
    #[error("no queries")]
    NoQueries,
    #[error("unit index {index} outside a codebook of {units}")]
    UnitIndex { index: usize, units: usize },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

pub type Result<T> = std::result::Result<T, InferError>;

/// Tokens generated after the cue, enough for the answer and `<eos>`.
pub const MAX_NEW: usize = tasks::SEQ_DIGITS + 2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionRecord {
    /// Ascending unit indices.
    pub indices: Vec<usize>,
    /// Scores of those units.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    /// Pooling, scoring and top-k.
    pub retrieval_s: f64,
    /// Start of the call to the first generated token.
    pub first_token_s: f64,
    /// Whole call.
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceTrace {
    pub id: String,
    pub selection: SelectionRecord,
    pub tokens: Vec<Token>,
    pub retrievals: usize,
    pub timing: Timing,
}

/// Frozen backbone plus a trained codebook with its unit keys precomputed.
pub struct Engine<'a> {
    model: &'a Backbone,
    retriever: Retriever,
    units: Matrix,
    pub max_new: usize,
}

impl<'a> Engine<'a> {
    pub fn new(model: &'a Backbone, cb: &Codebook) -> Result<Self> {
        cb.config().validate_for(model.layers(), model.width())?;
        Ok(Engine {
            model,
            retriever: cb.retriever(),
            units: cb.units().clone(),
            max_new: MAX_NEW,
        })
    }

    pub fn layer(&self) -> usize {
        self.retriever.config().layer
    }

    /// Noiseless selection for a question's layer-`L` states.
    pub fn select(&self, question_state: &Matrix) -> Result<SelectionRecord> {
        let pooled = codebook::pool_query(question_state)?;
        let scores = self.retriever.score(&pooled)?;
        let indices = codebook::select_topk(&scores, self.retriever.config().select)?;
        Ok(SelectionRecord {
            scores: indices.iter().map(|&i| scores[i]).collect(),
            indices,
        })
    }

    /// Answer a question: prefill, one retrieval, unit insertion, `=` cue,
    /// greedy decoding with the cache.
    pub fn answer(&self, id: &str, question: &[Token]) -> Result<(Vec<Token>, InferenceTrace)> {
        let start = Instant::now();
        let mut cache = KvCache::new(self.model.layers());
        let (_, state) = self.model.extend_tokens_tapped(&mut cache, question, self.layer())?;
        let t0 = Instant::now();
        let selection = self.select(&state)?;
        let rows = self.units.select(ndarray::Axis(0), &selection.indices);
        let retrieval = t0.elapsed();
        self.model.extend_units(&mut cache, self.layer(), &rows)?;
        let mut logits = self.model.extend_tokens(&mut cache, &[vocab::EQUALS])?;
        let mut tokens = Vec::new();
        let mut first_token = None;
        for step in 0..self.max_new {
            let next = argmax(&logits);
            first_token.get_or_insert_with(|| start.elapsed());
            if next == vocab::EOS {
                break;
            }
            tokens.push(next);
            if step + 1 == self.max_new {
                break;
            }
            logits = self.model.extend_tokens(&mut cache, &[next])?;
        }
        let total = start.elapsed();
        let trace = InferenceTrace {
            id: id.to_string(),
            selection,
            tokens: tokens.clone(),
            retrievals: 1,
            timing: Timing {
                retrieval_s: retrieval.as_secs_f64(),
                first_token_s: first_token.unwrap_or(total).as_secs_f64(),
                total_s: total.as_secs_f64(),
            },
        };
        Ok((tokens, trace))
    }
}

pub fn traces_jsonl(traces: &[InferenceTrace]) -> String {
    traces
        .iter()
        .map(|t| serde_json::to_string(t).expect("serializable") + "\n")
        .collect()
}

/// Per-unit selection counts over traces.
pub fn selection_histogram(traces: &[InferenceTrace], units: usize) -> Result<Vec<usize>> {
    if traces.is_empty() {
        return Err(InferError::NoTraces);
    }
    let mut counts = vec![0; units];
    for t in traces {
        for &i in &t.selection.indices {
            *counts.get_mut(i).ok_or(InferError::UnitIndex { index: i, units })? += 1;
        }
    }
    Ok(counts)
}

pub fn histogram_csv(counts: &[usize]) -> String {
    let mut out = String::from("unit_index,count\n");
    for (i, c) in counts.iter().enumerate() {
        out.push_str(&format!("{i},{c}\n"));
    }
    out
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub queries: usize,
    pub retrievals: usize,
    pub median_retrieval_s: f64,
    pub median_first_token_s: f64,
    /// Median retrieval time over median first-token latency.
    pub retrieval_fraction: f64,
}

/// Median retrieval and first-token times, after one warm-up call.
pub fn bench_latency(engine: &Engine, queries: &[Vec<Token>]) -> Result<LatencyReport> {
    if queries.is_empty() {
        return Err(InferError::NoQueries);
    }
    engine.answer("warmup", &queries[0])?;
    let mut retrieval = Vec::with_capacity(queries.len());
    let mut first = Vec::with_capacity(queries.len());
    let mut retrievals = 0;
    for (i, q) in queries.iter().enumerate() {
        let (_, t) = engine.answer(&format!("q{i}"), q)?;
        retrieval.push(t.timing.retrieval_s);
        first.push(t.timing.first_token_s);
        retrievals += t.retrievals;
    }
    let r = median(&mut retrieval);
    let f = median(&mut first);
    Ok(LatencyReport {
        queries: queries.len(),
        retrievals,
        median_retrieval_s: r,
        median_first_token_s: f,
        retrieval_fraction: r / f,
    })
}

/// Question embeddings paired with their reflections, searched by cosine.
pub struct RagStore {
    layer: usize,
    min_size: usize,
    keys: Vec<Vec<f64>>,
    reflections: Vec<Vec<Token>>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl RagStore {
    pub fn build(model: &Backbone, records: &[Record], layer: usize, min_size: usize) -> Result<Self> {
        let v = Vocab::get();
        let mut store = RagStore {
            layer,
            min_size,
            keys: Vec::with_capacity(records.len()),
            reflections: Vec::with_capacity(records.len()),
        };
        for rec in records {
            let q = v.parse(&rec.question).map_err(TaskError::from)?;
            store.keys.push(store.embed(model, &q)?);
            store
                .reflections
                .push(v.parse(&rec.reflection).map_err(TaskError::from)?);
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn embed(&self, model: &Backbone, question: &[Token]) -> Result<Vec<f64>> {
        let state = model.forward_prefix(question, self.layer)?;
        Ok(codebook::pool_query(&state)?.row(0).to_vec())
    }

    /// Nearest stored entry and its similarity; ties go to the earlier entry.
    /// `None` while the store holds fewer than its minimum size.
    pub fn nearest(&self, model: &Backbone, question: &[Token]) -> Result<Option<(usize, f64)>> {
        if self.keys.len() < self.min_size.max(1) {
            return Ok(None);
        }
        let q = self.embed(model, question)?;
        let mut best = (0, f64::NEG_INFINITY);
        for (i, k) in self.keys.iter().enumerate() {
            let s = cosine(&q, k);
            if s > best.1 {
                best = (i, s);
            }
        }
        Ok(Some(best))
    }

    /// Retrieved reflection in the hint slot, then a plain decode.
    pub fn answer(&self, model: &Backbone, question: &[Token]) -> Result<Vec<Token>> {
        let hint = self
            .nearest(model, question)?
            .map(|(i, _)| self.reflections[i].as_slice());
        plain_answer(model, question, hint)
    }
}

/// Greedy answer from the hint-slot template, no units.
pub fn plain_answer(model: &Backbone, question: &[Token], hint: Option<&[Token]>) -> Result<Vec<Token>> {
    let prompt = tasks::prompt_tokens(question, hint)?;
    Ok(model
        .decode_with_cache(&DecodeRequest {
            query: &prompt,
            units: None,
            cue: &[vocab::EQUALS],
            max_new: MAX_NEW,
        })?
        .tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Accuracy {
    fn from_hits(hits: impl Iterator<Item = bool>) -> Self {
        let (mut correct, mut total) = (0, 0);
        for h in hits {
            correct += h as usize;
            total += 1;
        }
        Accuracy {
            correct,
            total,
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        }
    }
}

pub fn eval_zero_shot(model: &Backbone, tasks: &[TaskInstance]) -> Result<Accuracy> {
    let hits = tasks
        .iter()
        .map(|t| Ok(tasks::grade(&t.answer, &plain_answer(model, &t.question, None)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Accuracy::from_hits(hits.into_iter()))
}

/// Accuracy with each family's scripted hint in the slot.
pub fn eval_oracle_hint(model: &Backbone, tasks: &[TaskInstance]) -> Result<Accuracy> {
    let hits = tasks
        .iter()
        .map(|t| {
            let h = tasks::oracle_hint(t.family, None)?;
            Ok(tasks::grade(&t.answer, &plain_answer(model, &t.question, Some(&h))?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Accuracy::from_hits(hits.into_iter()))
}

pub fn eval_codebook(engine: &Engine, tasks: &[TaskInstance]) -> Result<(Accuracy, Vec<InferenceTrace>)> {
    let mut traces = Vec::with_capacity(tasks.len());
    let mut hits = Vec::with_capacity(tasks.len());
    for t in tasks {
        let (tokens, trace) = engine.answer(&t.id, &t.question)?;
        hits.push(tasks::grade(&t.answer, &tokens));
        traces.push(trace);
    }
    Ok((Accuracy::from_hits(hits.into_iter()), traces))
}

pub fn eval_rag(model: &Backbone, store: &RagStore, tasks: &[TaskInstance]) -> Result<Accuracy> {
    let hits = tasks
        .iter()
        .map(|t| Ok(tasks::grade(&t.answer, &store.answer(model, &t.question)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Accuracy::from_hits(hits.into_iter()))
}

/// Time spent in a closure.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed())
}
