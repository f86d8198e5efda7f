//! The frozen actor: a small pre-LN causal decoder with learned absolute
//! positions, per-layer hidden-state taps, mid-stack unit insertion and
//! KV-cached greedy decoding.
//!
//! Hidden state `l` is the residual stream after `l` blocks, so state 0 is the
//! embedding and state `N` feeds the final norm. Units inserted "at layer L"
//! are appended to state `L` after the query rows and processed by blocks
//! `L..N`. Rows that follow the units (the answer cue and generated tokens)
//! run through blocks `0..L` over the query alone and join the unit-bearing
//! sequence from block `L` on. Causal masking over that order means query
//! rows never see units while every later row does.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, Container};
use crate::ndiff::{Axis, Graph, Matrix, NdiffError, Var};
use crate::optim::{clip_global_norm, Adam};
use crate::tasks;
use crate::vocab::{self, Token, Vocab};

const MASKED: f64 = -1e30;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
    #[error("insertion layer {layer} must satisfy 0 < L < {layers}")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("unit width {found} does not match model width {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("sequence needs {needed} positions, model has {max}")]
    PositionOverflow { needed: usize, max: usize },
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("held-out format-token accuracy {accuracy:.3} below floor {floor:.3}")]
    BelowFloor { accuracy: f64, floor: f64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, BackboneError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub vocab: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_positions: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab: Vocab::get().len(),
            width: 128,
            layers: 8,
            heads: 4,
            max_positions: 96,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 4 {
            return Err(BackboneError::InvalidConfig(format!(
                "need at least 4 layers, got {}",
                self.layers
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(BackboneError::InvalidConfig(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.vocab == 0 || self.max_positions == 0 {
            return Err(BackboneError::InvalidConfig("empty vocab or positions".into()));
        }
        Ok(())
    }

    fn param_shapes(&self) -> Vec<(usize, usize)> {
        let (c, v) = (self.width, self.vocab);
        let mut shapes = vec![(v, c), (self.max_positions, c)];
        for _ in 0..self.layers {
            shapes.extend([
                (1, c),
                (1, c),
                (c, 3 * c),
                (1, 3 * c),
                (c, c),
                (1, c),
                (1, c),
                (1, c),
                (c, 4 * c),
                (1, 4 * c),
                (4 * c, c),
                (1, c),
            ]);
        }
        shapes.extend([(1, c), (1, c), (c, v)]);
        shapes
    }
}

const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;
const PER_LAYER: usize = 12;
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const W_QKV: usize = 2;
const B_QKV: usize = 3;
const W_O: usize = 4;
const B_O: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const W_UP: usize = 8;
const B_UP: usize = 9;
const W_DOWN: usize = 10;
const B_DOWN: usize = 11;

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    params: Vec<Arc<Matrix>>,
    frozen: bool,
}

/// Backbone parameters registered in one graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Which rows of the final layer get projected to logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitRows {
    /// Every row of the combined sequence.
    All,
    /// Suffix rows, or the last row when the suffix is empty.
    Tail,
}

/// Output of a full graph pass.
pub struct Pass {
    /// Residual stream after each block, `layers + 1` entries.
    pub states: Vec<Var>,
    pub logits: Var,
    /// Unit-slot rows of states `L..=N` (empty without insertion).
    pub unit_states: Vec<Var>,
}

/// Per-layer keys and values of every processed row.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<Option<(Arc<Matrix>, Arc<Matrix>)>>,
    positions: usize,
}

impl KvCache {
    pub fn new(layers: usize) -> Self {
        KvCache {
            layers: vec![None; layers],
            positions: 0,
        }
    }

    /// Positions consumed so far, unit slots included.
    pub fn len(&self) -> usize {
        self.positions
    }

    pub fn is_empty(&self) -> bool {
        self.positions == 0
    }

    /// Rows cached at a given block.
    pub fn rows(&self, layer: usize) -> usize {
        self.layers[layer].as_ref().map_or(0, |(k, _)| k.nrows())
    }
}

/// A greedy generation request. The prompt is `query`, then `units` (if any)
/// inserted at their layer, then the forced `cue` tokens.
#[derive(Debug, Clone, Copy)]
pub struct DecodeRequest<'a> {
    pub query: &'a [Token],
    pub units: Option<(usize, &'a Matrix)>,
    pub cue: &'a [Token],
    pub max_new: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Generated tokens, excluding the end-of-answer token.
    pub tokens: Vec<Token>,
    /// Next-token logits at every generation step.
    pub logits: Vec<Vec<f64>>,
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn causal_mask(new_rows: usize, past: usize) -> Matrix {
    Matrix::from_shape_fn((new_rows, past + new_rows), |(i, j)| {
        if j <= past + i {
            0.0
        } else {
            MASKED
        }
    })
}

impl Backbone {
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.layers as f64).sqrt();
        let normal = |s: f64| Normal::new(0.0, s).expect("positive std");
        let mut params = Vec::new();
        let sample = |shape: (usize, usize), s: f64, rng: &mut ChaCha8Rng| {
            let d = normal(s);
            Matrix::from_shape_simple_fn(shape, || d.sample(rng))
        };
        let shapes = config.param_shapes();
        params.push(sample(shapes[TOK_EMB], std, &mut rng));
        params.push(sample(shapes[POS_EMB], 0.01, &mut rng));
        for l in 0..config.layers {
            let base = 2 + l * PER_LAYER;
            for j in 0..PER_LAYER {
                let shape = shapes[base + j];
                let m = match j {
                    LN1_G | LN2_G => Matrix::ones(shape),
                    W_QKV | W_UP => sample(shape, std, &mut rng),
                    W_O | W_DOWN => sample(shape, resid_std, &mut rng),
                    _ => Matrix::zeros(shape),
                };
                params.push(m);
            }
        }
        let n = shapes.len();
        params.push(Matrix::ones(shapes[n - 3]));
        params.push(Matrix::zeros(shapes[n - 2]));
        params.push(sample(shapes[n - 1], std, &mut rng));
        Ok(Backbone {
            config,
            params: params.into_iter().map(Arc::new).collect(),
            frozen: false,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn params(&self) -> &[Arc<Matrix>] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.iter().copied().collect::<Vec<_>>())
            .collect()
    }

    /// SHA-256 over the parameter payload.
    pub fn checksum(&self) -> String {
        checkpoint::checksum(&self.flat_params())
    }

    /// Register parameters in `g`; frozen models always bind as constants.
    pub fn bind(&self, g: &Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable && !self.frozen {
                    g.param_arc(p.clone())
                } else {
                    g.constant_arc(p.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn lp(&self, b: &Bound, layer: usize, j: usize) -> Var {
        b.vars[2 + layer * PER_LAYER + j]
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer >= self.config.layers {
            return Err(BackboneError::LayerOutOfRange {
                layer,
                layers: self.config.layers,
            });
        }
        Ok(())
    }

    fn embed(&self, g: &Graph, b: &Bound, tokens: &[Token], first_pos: usize) -> Result<Var> {
        let end = first_pos + tokens.len();
        if end > self.config.max_positions {
            return Err(BackboneError::PositionOverflow {
                needed: end,
                max: self.config.max_positions,
            });
        }
        let tok = g.embedding(b.vars[TOK_EMB], tokens)?;
        let positions: Vec<usize> = (first_pos..end).collect();
        let pos = g.embedding(b.vars[POS_EMB], &positions)?;
        Ok(g.add(tok, pos)?)
    }

    /// One pre-LN block over `x` (new rows) given cached keys/values of the
    /// rows before it. Returns the block output and the full keys/values.
    fn block(
        &self,
        g: &Graph,
        b: &Bound,
        layer: usize,
        x: Var,
        past: Option<(Var, Var)>,
        mask: Option<Var>,
    ) -> Result<(Var, Var, Var)> {
        let c = self.config.width;
        let heads = self.config.heads;
        let hd = c / heads;
        let p = |j| self.lp(b, layer, j);

        let h = g.layer_norm(x, p(LN1_G), p(LN1_B))?;
        let qkv = g.matmul(h, p(W_QKV))?;
        let qkv = g.add(qkv, p(B_QKV))?;
        let q = g.slice(qkv, Axis::Cols, 0, c)?;
        let k_new = g.slice(qkv, Axis::Cols, c, c)?;
        let v_new = g.slice(qkv, Axis::Cols, 2 * c, c)?;
        let (k, v) = match past {
            Some((pk, pv)) => (
                g.concat(&[pk, k_new], Axis::Rows)?,
                g.concat(&[pv, v_new], Axis::Rows)?,
            ),
            None => (k_new, v_new),
        };
        let new_rows = g.shape(x).0;
        let total = g.shape(k).0;
        let mask = mask.or_else(|| (new_rows > 1).then(|| g.constant(causal_mask(new_rows, total - new_rows))));
        let kt = g.transpose(k)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for hh in 0..heads {
            let qh = g.slice(q, Axis::Cols, hh * hd, hd)?;
            let kth = g.slice(kt, Axis::Rows, hh * hd, hd)?;
            let vh = g.slice(v, Axis::Cols, hh * hd, hd)?;
            let mut scores = g.scale(g.matmul(qh, kth)?, scale)?;
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let attn = g.softmax(scores)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let o = if heads == 1 {
            outs[0]
        } else {
            g.concat(&outs, Axis::Cols)?
        };
        let o = g.add(g.matmul(o, p(W_O))?, p(B_O))?;
        let x = g.add(x, o)?;

        let h = g.layer_norm(x, p(LN2_G), p(LN2_B))?;
        let up = g.gelu(g.add(g.matmul(h, p(W_UP))?, p(B_UP))?)?;
        let down = g.add(g.matmul(up, p(W_DOWN))?, p(B_DOWN))?;
        let x = g.add(x, down)?;
        Ok((x, k, v))
    }

    fn head(&self, g: &Graph, b: &Bound, x: Var) -> Result<Var> {
        let n = b.vars.len();
        let h = g.layer_norm(x, b.vars[n - 3], b.vars[n - 2])?;
        Ok(g.matmul(h, b.vars[n - 1])?)
    }

    /// Full graph pass over `query`, optional units inserted at a layer, and
    /// `suffix` tokens.
    pub fn forward_graph(
        &self,
        g: &Graph,
        b: &Bound,
        query: &[Token],
        insertion: Option<(usize, Var)>,
        suffix: &[Token],
        rows: LogitRows,
    ) -> Result<Pass> {
        if query.is_empty() {
            return Err(BackboneError::EmptyInput);
        }
        let q = query.len();
        let k = match insertion {
            Some((layer, units)) => {
                self.check_layer(layer)?;
                let (k, w) = g.shape(units);
                if w != self.config.width {
                    return Err(BackboneError::WidthMismatch {
                        expected: self.config.width,
                        found: w,
                    });
                }
                k
            }
            None => 0,
        };
        let xq = self.embed(g, b, query, 0)?;
        let mut x = if suffix.is_empty() {
            xq
        } else {
            let xs = self.embed(g, b, suffix, q + k)?;
            g.concat(&[xq, xs], Axis::Rows)?
        };
        let mut states = vec![x];
        let mut unit_states = Vec::new();
        for layer in 0..self.config.layers {
            if let Some((at, units)) = insertion {
                if layer == at && k > 0 {
                    let head = g.slice(x, Axis::Rows, 0, q)?;
                    x = if suffix.is_empty() {
                        g.concat(&[head, units], Axis::Rows)?
                    } else {
                        let tail = g.slice(x, Axis::Rows, q, suffix.len())?;
                        g.concat(&[head, units, tail], Axis::Rows)?
                    };
                    unit_states.push(units);
                }
            }
            x = self.block(g, b, layer, x, None, None)?.0;
            states.push(x);
            if insertion.is_some_and(|(at, _)| layer >= at) && k > 0 {
                unit_states.push(g.slice(x, Axis::Rows, q, k)?);
            }
        }
        let total = g.shape(x).0;
        let tail = match rows {
            LogitRows::All => x,
            LogitRows::Tail if suffix.is_empty() => g.slice(x, Axis::Rows, total - 1, 1)?,
            LogitRows::Tail => g.slice(x, Axis::Rows, total - suffix.len(), suffix.len())?,
        };
        let logits = self.head(g, b, tail)?;
        Ok(Pass {
            states,
            logits,
            unit_states,
        })
    }

    /// Mean next-token cross-entropy over several sequences packed into one
    /// pass, with attention confined to each sequence. Sequences flagged in
    /// `late` follow `read`: rows past the slot attend to it only from
    /// block `read.layer` upward.
    pub fn packed_lm_loss(
        &self,
        g: &Graph,
        b: &Bound,
        seqs: &[&[Token]],
        late: &[bool],
        read: LateRead,
    ) -> Result<Var> {
        let mut parts = Vec::with_capacity(seqs.len());
        let mut targets = Vec::new();
        let mut spans = Vec::with_capacity(seqs.len());
        let mut offset = 0;
        for seq in seqs {
            if seq.len() < 2 {
                return Err(BackboneError::EmptyInput);
            }
            let n = seq.len() - 1;
            parts.push(self.embed(g, b, &seq[..n], 0)?);
            targets.extend_from_slice(&seq[1..]);
            spans.push((offset, n));
            offset += n;
        }
        let mut mask = Matrix::from_elem((offset, offset), MASKED);
        for &(start, n) in &spans {
            for i in 0..n {
                for j in 0..=i {
                    mask[[start + i, start + j]] = 0.0;
                }
            }
        }
        let mut early = mask.clone();
        let mut any_late = false;
        for (&(start, n), _) in spans.iter().zip(late).filter(|(_, &l)| l) {
            let (lo, hi) = read.slot;
            for i in hi.min(n)..n {
                for j in lo..hi.min(n) {
                    early[[start + i, start + j]] = MASKED;
                }
            }
            any_late = true;
        }
        let mask = g.constant(mask);
        let early = if any_late { g.constant(early) } else { mask };
        let mut x = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, Axis::Rows)?
        };
        for layer in 0..self.config.layers {
            let m = if layer < read.layer { early } else { mask };
            x = self.block(g, b, layer, x, None, Some(m))?.0;
        }
        let logits = self.head(g, b, x)?;
        Ok(g.cross_entropy(logits, &targets)?)
    }

    /// Residual states after every block for a plain token sequence.
    pub fn hidden_states(&self, tokens: &[Token]) -> Result<Vec<Matrix>> {
        let g = Graph::new();
        let b = self.bind(&g, false);
        let pass = self.forward_graph(&g, &b, tokens, None, &[], LogitRows::Tail)?;
        Ok(pass.states.iter().map(|&s| (*g.value(s)).clone()).collect())
    }

    /// State `L` for every query position.
    pub fn forward_prefix(&self, tokens: &[Token], layer: usize) -> Result<Matrix> {
        self.check_layer(layer)?;
        if tokens.is_empty() {
            return Err(BackboneError::EmptyInput);
        }
        let g = Graph::new();
        let b = self.bind(&g, false);
        let mut x = self.embed(&g, &b, tokens, 0)?;
        for l in 0..layer {
            x = self.block(&g, &b, l, x, None, None)?.0;
        }
        Ok((*g.value(x)).clone())
    }

    /// Next-token logits after `{query; units}` (or after `suffix` if given)
    /// and the unit-slot states for layers `L..=N`.
    pub fn forward_with_insertion(
        &self,
        query: &[Token],
        units: &Matrix,
        layer: usize,
        suffix: &[Token],
    ) -> Result<(Vec<f64>, Vec<Matrix>)> {
        let g = Graph::new();
        let b = self.bind(&g, false);
        let insertion = (units.nrows() > 0).then(|| (layer, g.constant(units.clone())));
        if units.nrows() > 0 {
            if units.ncols() != self.config.width {
                return Err(BackboneError::WidthMismatch {
                    expected: self.config.width,
                    found: units.ncols(),
                });
            }
        } else {
            self.check_layer(layer)?;
        }
        let pass = self.forward_graph(&g, &b, query, insertion, suffix, LogitRows::Tail)?;
        let logits = g.value(pass.logits);
        let last = logits.row(logits.nrows() - 1).to_vec();
        let states = pass
            .unit_states
            .iter()
            .map(|&s| (*g.value(s)).clone())
            .collect();
        Ok((last, states))
    }

    /// Append tokens to the cache; returns logits of the last new row.
    pub fn extend_tokens(&self, cache: &mut KvCache, tokens: &[Token]) -> Result<Vec<f64>> {
        Ok(self.extend_inner(cache, tokens, None)?.0)
    }

    /// [`Backbone::extend_tokens`] that also returns the new rows' state at
    /// `tap` (the residual stream after `tap` blocks).
    pub fn extend_tokens_tapped(
        &self,
        cache: &mut KvCache,
        tokens: &[Token],
        tap: usize,
    ) -> Result<(Vec<f64>, Matrix)> {
        self.check_layer(tap)?;
        let (logits, state) = self.extend_inner(cache, tokens, Some(tap))?;
        Ok((logits, state.expect("tapped")))
    }

    fn extend_inner(
        &self,
        cache: &mut KvCache,
        tokens: &[Token],
        tap: Option<usize>,
    ) -> Result<(Vec<f64>, Option<Matrix>)> {
        if tokens.is_empty() {
            return Err(BackboneError::EmptyInput);
        }
        let g = Graph::new();
        let b = self.bind(&g, false);
        let mut x = self.embed(&g, &b, tokens, cache.positions)?;
        let mut tapped = None;
        for layer in 0..self.config.layers {
            if tap == Some(layer) {
                tapped = Some((*g.value(x)).clone());
            }
            x = self.cached_block(&g, &b, cache, layer, x)?;
        }
        cache.positions += tokens.len();
        let n = g.shape(x).0;
        let last = g.slice(x, Axis::Rows, n - 1, 1)?;
        let logits = self.head(&g, &b, last)?;
        Ok((g.value(logits).row(0).to_vec(), tapped))
    }

    /// Append unit rows at `layer`; they occupy the next positions.
    pub fn extend_units(&self, cache: &mut KvCache, layer: usize, units: &Matrix) -> Result<Vec<f64>> {
        self.check_layer(layer)?;
        if units.ncols() != self.config.width {
            return Err(BackboneError::WidthMismatch {
                expected: self.config.width,
                found: units.ncols(),
            });
        }
        if units.nrows() == 0 {
            return Err(BackboneError::EmptyInput);
        }
        let g = Graph::new();
        let b = self.bind(&g, false);
        let mut x = g.constant(units.clone());
        for l in layer..self.config.layers {
            x = self.cached_block(&g, &b, cache, l, x)?;
        }
        cache.positions += units.nrows();
        let n = g.shape(x).0;
        let last = g.slice(x, Axis::Rows, n - 1, 1)?;
        let logits = self.head(&g, &b, last)?;
        Ok(g.value(logits).row(0).to_vec())
    }

    fn cached_block(&self, g: &Graph, b: &Bound, cache: &mut KvCache, layer: usize, x: Var) -> Result<Var> {
        let past = cache.layers[layer]
            .as_ref()
            .map(|(k, v)| (g.constant_arc(k.clone()), g.constant_arc(v.clone())));
        let (out, k, v) = self.block(g, b, layer, x, past, None)?;
        cache.layers[layer] = Some((g.value(k), g.value(v)));
        Ok(out)
    }

    /// Greedy decoding with a KV cache. Units are injected once, before the
    /// cue and the first generated token.
    pub fn decode_with_cache(&self, req: &DecodeRequest) -> Result<Decoded> {
        if req.query.is_empty() {
            return Err(BackboneError::EmptyInput);
        }
        let mut out = Decoded {
            tokens: Vec::new(),
            logits: Vec::new(),
        };
        if req.max_new == 0 {
            return Ok(out);
        }
        let mut cache = KvCache::new(self.config.layers);
        let mut logits = self.extend_tokens(&mut cache, req.query)?;
        if let Some((layer, units)) = req.units {
            if units.nrows() > 0 {
                logits = self.extend_units(&mut cache, layer, units)?;
            }
        }
        if !req.cue.is_empty() {
            logits = self.extend_tokens(&mut cache, req.cue)?;
        }
        for step in 0..req.max_new {
            let next = argmax(&logits);
            out.logits.push(logits);
            if next == vocab::EOS {
                break;
            }
            out.tokens.push(next);
            if step + 1 == req.max_new {
                break;
            }
            logits = self.extend_tokens(&mut cache, &[next])?;
        }
        Ok(out)
    }

    /// Reference decoder: a full forward pass per generated token.
    pub fn decode_uncached(&self, req: &DecodeRequest) -> Result<Decoded> {
        if req.query.is_empty() {
            return Err(BackboneError::EmptyInput);
        }
        let mut out = Decoded {
            tokens: Vec::new(),
            logits: Vec::new(),
        };
        let mut suffix: Vec<Token> = req.cue.to_vec();
        for _ in 0..req.max_new {
            let g = Graph::new();
            let b = self.bind(&g, false);
            let insertion = req
                .units
                .filter(|(_, u)| u.nrows() > 0)
                .map(|(l, u)| (l, g.constant(u.clone())));
            let pass = self.forward_graph(&g, &b, req.query, insertion, &suffix, LogitRows::Tail)?;
            let lv = g.value(pass.logits);
            let logits = lv.row(lv.nrows() - 1).to_vec();
            let next = argmax(&logits);
            out.logits.push(logits);
            if next == vocab::EOS {
                break;
            }
            out.tokens.push(next);
            suffix.push(next);
        }
        Ok(out)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("backbone");
        c.set("vocab", self.config.vocab);
        c.set("width", self.config.width);
        c.set("layers", self.config.layers);
        c.set("heads", self.config.heads);
        c.set("max_positions", self.config.max_positions);
        c.set("frozen", self.frozen);
        c.payload = self.flat_params();
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_section("backbone")?;
        let config = BackboneConfig {
            vocab: c.get("vocab")?,
            width: c.get("width")?,
            layers: c.get("layers")?,
            heads: c.get("heads")?,
            max_positions: c.get("max_positions")?,
        };
        config.validate()?;
        let shapes = config.param_shapes();
        let expected: usize = shapes.iter().map(|(r, c)| r * c).sum();
        if c.payload.len() != expected {
            return Err(CheckpointError::PayloadSize {
                expected,
                found: c.payload.len(),
            }
            .into());
        }
        let mut offset = 0;
        let params = shapes
            .iter()
            .map(|&(r, cols)| {
                let n = r * cols;
                let m = Matrix::from_shape_vec((r, cols), c.payload[offset..offset + n].to_vec())
                    .expect("sized");
                offset += n;
                Arc::new(m)
            })
            .collect();
        Ok(Backbone {
            config,
            params,
            frozen: c.get("frozen")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub model: BackboneConfig,
    pub steps: usize,
    pub batch: usize,
    /// Sequences packed into one forward pass.
    pub pack: usize,
    pub lr: f64,
    pub warmup: usize,
    pub clip: f64,
    pub seed: u64,
    /// Held-out sequences taken from the end of the corpus.
    pub heldout: usize,
    pub accuracy_floor: f64,
    /// Fraction of training sequences that see the hint slot the way
    /// inserted units are seen, from `late_read.layer` upward only.
    pub late_rate: f64,
    pub late_read: LateRead,
}

/// Position span `[slot.0, slot.1)` that later rows read only from block
/// `layer` upward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LateRead {
    pub layer: usize,
    pub slot: (usize, usize),
}

impl Default for LateRead {
    fn default() -> Self {
        LateRead {
            layer: 2,
            slot: (tasks::QUESTION_LEN, tasks::QUESTION_LEN + tasks::HINT_SLOT),
        }
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            model: BackboneConfig::default(),
            steps: 1200,
            batch: 16,
            pack: 4,
            lr: 1e-3,
            warmup: 100,
            clip: 1.0,
            seed: 0,
            heldout: 200,
            accuracy_floor: 0.9,
            late_rate: 0.5,
            late_read: LateRead::default(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    /// Held-out next-token accuracy where the target is a format token.
    pub format_accuracy: f64,
    /// Held-out next-token accuracy on answer digits.
    pub answer_accuracy: f64,
}

fn lr_at(cfg: &PretrainConfig, step: usize) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * (step + 1) as f64 / cfg.warmup as f64;
    }
    let span = (cfg.steps - cfg.warmup).max(1) as f64;
    let t = (step - cfg.warmup) as f64 / span;
    cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Next-token accuracies of `model` on `seqs`: (format tokens, answer digits).
pub fn heldout_accuracy(model: &Backbone, seqs: &[Vec<Token>]) -> Result<(f64, f64)> {
    let (mut fmt_hit, mut fmt_n, mut ans_hit, mut ans_n) = (0usize, 0usize, 0usize, 0usize);
    for seq in seqs {
        let g = Graph::new();
        let b = model.bind(&g, false);
        let input = &seq[..seq.len() - 1];
        let pass = model.forward_graph(&g, &b, input, None, &[], LogitRows::All)?;
        let logits = g.value(pass.logits);
        let eq = seq.iter().position(|&t| t == vocab::EQUALS);
        for (i, &target) in seq[1..].iter().enumerate() {
            let pred = argmax(logits.row(i).as_slice().expect("standard layout"));
            if vocab::is_format_token(target) {
                fmt_n += 1;
                fmt_hit += (pred == target) as usize;
            }
            if eq.is_some_and(|e| i + 1 > e) && vocab::digit_value(target).is_some() {
                ans_n += 1;
                ans_hit += (pred == target) as usize;
            }
        }
    }
    let ratio = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok((ratio(fmt_hit, fmt_n), ratio(ans_hit, ans_n)))
}

/// Train a backbone from scratch on `corpus` with next-token cross-entropy,
/// then freeze it.
pub fn pretrain_backbone(
    corpus: &[Vec<Token>],
    cfg: &PretrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(Backbone, PretrainReport)> {
    if corpus.is_empty() {
        return Err(BackboneError::EmptyInput);
    }
    let heldout = cfg.heldout.min(corpus.len() / 5);
    let (train, eval) = corpus.split_at(corpus.len() - heldout);
    let mut model = Backbone::init(cfg.model, cfg.seed)?;
    if !(0.0..=1.0).contains(&cfg.late_rate) {
        return Err(BackboneError::InvalidConfig(format!("late_rate {} outside [0, 1]", cfg.late_rate)));
    }
    if cfg.late_rate > 0.0 {
        model.check_layer(cfg.late_read.layer)?;
    }
    let mut opt = Adam::new(model.params.iter().map(|p| p.dim()));
    let order = tasks::shuffled(&(0..train.len()).collect::<Vec<_>>(), cfg.seed ^ 0x5eed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1a7e);
    let late: Vec<bool> = (0..train.len()).map(|_| rng.random_bool(cfg.late_rate)).collect();
    let mut cursor = 0;
    let mut report = PretrainReport::default();
    for step in 0..cfg.steps {
        let mut grads: Vec<Matrix> = model.params.iter().map(|p| Matrix::zeros(p.dim())).collect();
        let mut loss_sum = 0.0;
        let picked: Vec<usize> = (0..cfg.batch).map(|i| order[(cursor + i) % order.len()]).collect();
        cursor += cfg.batch;
        for chunk in picked.chunks(cfg.pack.max(1)) {
            let seqs: Vec<&[Token]> = chunk.iter().map(|&i| train[i].as_slice()).collect();
            let flags: Vec<bool> = chunk.iter().map(|&i| late[i]).collect();
            let g = Graph::new();
            let b = model.bind(&g, true);
            let loss = model
                .packed_lm_loss(&g, &b, &seqs, &flags, cfg.late_read)
                .map_err(|e| diverged(e, step))?;
            let w = chunk.len() as f64;
            loss_sum += g.item(loss) * w;
            let mut gr = g.backward(loss)?;
            for (acc, &v) in grads.iter_mut().zip(b.vars()) {
                acc.scaled_add(w, &gr.take(v));
            }
        }
        let loss = loss_sum / cfg.batch as f64;
        if !loss.is_finite() {
            return Err(BackboneError::Diverged { step });
        }
        for gm in grads.iter_mut() {
            gm.mapv_inplace(|v| v / cfg.batch as f64);
        }
        clip_global_norm(&mut grads, cfg.clip);
        opt.step(&mut model.params, &grads, lr_at(cfg, step));
        report.losses.push(loss);
        progress(step, loss);
    }
    let (fmt, ans) = heldout_accuracy(&model, eval)?;
    report.format_accuracy = fmt;
    report.answer_accuracy = ans;
    model.freeze();
    if fmt < cfg.accuracy_floor {
        return Err(BackboneError::BelowFloor {
            accuracy: fmt,
            floor: cfg.accuracy_floor,
        });
    }
    Ok((model, report))
}

fn diverged(e: BackboneError, step: usize) -> BackboneError {
    match e {
        BackboneError::Ndiff(NdiffError::NonFinite { .. }) => BackboneError::Diverged { step },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Backbone {
        let cfg = BackboneConfig {
            vocab: Vocab::get().len(),
            width: 16,
            layers: 4,
            heads: 2,
            max_positions: 40,
        };
        let mut m = Backbone::init(cfg, 3).unwrap();
        m.freeze();
        m
    }

    fn q() -> Vec<Token> {
        Vocab::get().parse("<bos> Q apple the old : 1 2 3 4").unwrap()
    }

    #[test]
    fn prefix_shapes_and_causality() {
        let m = tiny();
        let h = m.forward_prefix(&q(), 2).unwrap();
        assert_eq!(h.dim(), (10, 16));
        let h1 = m.forward_prefix(&q()[..1], 2).unwrap();
        assert_eq!(h1.nrows(), 1);
        let short = m.forward_prefix(&q()[..6], 2).unwrap();
        for i in 0..6 {
            for j in 0..16 {
                assert!((short[[i, j]] - h[[i, j]]).abs() < 1e-12);
            }
        }
        assert_eq!(m.forward_prefix(&q(), 2).unwrap(), h);
        assert!(matches!(
            m.forward_prefix(&q(), 0),
            Err(BackboneError::LayerOutOfRange { .. })
        ));
        assert!(matches!(
            m.forward_prefix(&q(), 4),
            Err(BackboneError::LayerOutOfRange { .. })
        ));
    }

    #[test]
    fn insertion_with_zero_units_matches_plain_forward() {
        let m = tiny();
        let cue = [vocab::EQUALS];
        let (with, states) = m
            .forward_with_insertion(&q(), &Matrix::zeros((0, 16)), 2, &cue)
            .unwrap();
        assert!(states.is_empty());
        let mut full = q();
        full.push(vocab::EQUALS);
        let g = Graph::new();
        let b = m.bind(&g, false);
        let pass = m.forward_graph(&g, &b, &full, None, &[], LogitRows::Tail).unwrap();
        let plain = g.value(pass.logits).row(0).to_vec();
        for (a, b) in with.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn units_change_logits_and_width_is_checked() {
        let m = tiny();
        let cue = [vocab::EQUALS];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = Normal::new(0.0, 1.0).unwrap();
        let units = Matrix::from_shape_simple_fn((2, 16), || d.sample(&mut rng));
        let (a, states) = m.forward_with_insertion(&q(), &units, 2, &cue).unwrap();
        assert_eq!(states.len(), 4 - 2 + 1);
        assert_eq!(states[0], units);
        let (b, _) = m.forward_with_insertion(&q(), &units, 2, &cue).unwrap();
        assert_eq!(a, b);
        let (plain, _) = m
            .forward_with_insertion(&q(), &Matrix::zeros((0, 16)), 2, &cue)
            .unwrap();
        assert!(a.iter().zip(&plain).any(|(x, y)| (x - y).abs() > 1e-9));
        assert!(matches!(
            m.forward_with_insertion(&q(), &Matrix::zeros((2, 15)), 2, &cue),
            Err(BackboneError::WidthMismatch { .. })
        ));
    }

    #[test]
    fn cached_and_uncached_decoding_agree() {
        let m = tiny();
        let units = Matrix::from_shape_fn((3, 16), |(i, j)| ((i * 16 + j) as f64 * 0.37).sin());
        let cue = [vocab::EQUALS];
        for with_units in [false, true] {
            let req = DecodeRequest {
                query: &q(),
                units: with_units.then_some((2, &units)),
                cue: &cue,
                max_new: 6,
            };
            let a = m.decode_with_cache(&req).unwrap();
            let b = m.decode_uncached(&req).unwrap();
            assert_eq!(a.tokens, b.tokens);
            for (ra, rb) in a.logits.iter().zip(&b.logits) {
                for (x, y) in ra.iter().zip(rb) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn late_read_sequences_match_unit_insertion() {
        let m = tiny();
        let read = LateRead::default();
        let (lo, hi) = read.slot;
        let hint = tasks::oracle_hint(0, None).unwrap();
        let mut seq = tasks::prompt_tokens(&q(), Some(&hint)).unwrap();
        seq.extend(Vocab::get().parse("= 4 5 6 0 <eos>").unwrap());
        let n = seq.len() - 1;
        let g = Graph::new();
        let b = m.bind(&g, false);
        let late = g.item(m.packed_lm_loss(&g, &b, &[&seq], &[true], read).unwrap());
        let plain = g.item(m.packed_lm_loss(&g, &b, &[&seq], &[false], read).unwrap());

        let full = m.forward_graph(&g, &b, &seq[..n], None, &[], LogitRows::All).unwrap();
        let slot = g.slice(full.states[read.layer], Axis::Rows, lo, hi - lo).unwrap();
        let ins = m
            .forward_graph(&g, &b, &seq[..lo], Some((read.layer, slot)), &seq[hi..n], LogitRows::Tail)
            .unwrap();
        let head = g.slice(full.logits, Axis::Rows, 0, hi).unwrap();
        let logits = g.concat(&[head, ins.logits], Axis::Rows).unwrap();
        let expected = g.item(g.cross_entropy(logits, &seq[1..]).unwrap());
        let unmasked = g.item(g.cross_entropy(full.logits, &seq[1..]).unwrap());
        assert!((late - expected).abs() < 1e-12, "{late} vs {expected}");
        assert!((plain - unmasked).abs() < 1e-12);
        assert!((late - plain).abs() > 1e-6);
    }

    #[test]
    fn zero_budget_decodes_nothing() {
        let m = tiny();
        let req = DecodeRequest {
            query: &q(),
            units: None,
            cue: &[],
            max_new: 0,
        };
        assert!(m.decode_with_cache(&req).unwrap().tokens.is_empty());
    }

    #[test]
    fn cache_tracks_positions() {
        let m = tiny();
        let mut cache = KvCache::new(4);
        m.extend_tokens(&mut cache, &q()).unwrap();
        assert_eq!(cache.len(), 10);
        m.extend_units(&mut cache, 2, &Matrix::zeros((3, 16))).unwrap();
        assert_eq!(cache.len(), 13);
        assert_eq!(cache.rows(0), 10);
        assert_eq!(cache.rows(3), 13);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny();
        let c = m.to_container();
        let back = Backbone::from_container(&Container::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert!(back.is_frozen());
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny().config;
        assert_eq!(
            Backbone::init(cfg, 5).unwrap().checksum(),
            Backbone::init(cfg, 5).unwrap().checksum()
        );
        assert_ne!(
            Backbone::init(cfg, 5).unwrap().checksum(),
            Backbone::init(cfg, 6).unwrap().checksum()
        );
    }

    #[test]
    fn block_gradcheck() {
        use crate::ndiff::check_gradients_at;
        let m = tiny();
        let units = Matrix::from_shape_fn((2, 16), |(i, j)| ((i * 7 + j) as f64 * 0.31).cos());
        let query = q();
        let report = check_gradients_at(
            |g, v| {
                let b = m.bind(g, false);
                let pass = m
                    .forward_graph(g, &b, &query, Some((2, v[0])), &[vocab::EQUALS, 13], LogitRows::Tail)
                    .map_err(|e| match e {
                        BackboneError::Ndiff(n) => n,
                        other => panic!("{other}"),
                    })?;
                g.cross_entropy(pass.logits, &[13, 14])
            },
            &[units],
            &[(0, 0, 0), (0, 0, 5), (0, 1, 3), (0, 1, 15)],
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
