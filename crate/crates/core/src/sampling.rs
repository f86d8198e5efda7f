//! Differentiable top-k selection: Gumbel perturbation of the scores and a
//! straight-through k-hot indicator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codebook::{select_topk, CodebookError};
use crate::ndiff::{Graph, Matrix, NdiffError, Var};

/// Scores below this are raised to it before taking logs.
pub const SCORE_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelConfig {
    pub enabled: bool,
    pub seed: u64,
    /// Re-softmax temperature; 1 reproduces the plain perturbed softmax.
    pub temperature: f64,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            enabled: true,
            seed: 0,
            temperature: 1.0,
        }
    }
}

/// `-ln(-ln u)`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Seeded stream of standard Gumbel rows.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        NoiseStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Next 1×K draw.
    pub fn next_row(&mut self, k: usize) -> Matrix {
        Matrix::from_shape_simple_fn((1, k), || {
            // open interval: reject exact zero
            let mut u: f64 = self.rng.random();
            while u == 0.0 {
                u = self.rng.random();
            }
            gumbel_from_uniform(u)
        })
    }
}

/// One 1×K Gumbel draw for a seed.
pub fn gumbel_noise(seed: u64, k: usize) -> Matrix {
    NoiseStream::new(seed).next_row(k)
}

/// `softmax((log s + noise) / temperature)`. Returns the node and whether any
/// score had to be raised to [`SCORE_FLOOR`].
pub fn perturbed_scores(
    g: &Graph,
    scores: Var,
    noise: &Matrix,
    temperature: f64,
) -> Result<(Var, bool), NdiffError> {
    if temperature <= 0.0 {
        return Err(NdiffError::InvalidArgument {
            primitive: "perturbed_scores",
            reason: format!("temperature must be positive, got {temperature}"),
        });
    }
    let value = g.value(scores);
    let clamped = value.iter().any(|&v| v < SCORE_FLOOR);
    let s = if clamped {
        let shift = value.mapv(|v| SCORE_FLOOR.max(v) - v);
        g.add(scores, g.constant(shift))?
    } else {
        scores
    };
    let mut z = g.gumbel_noise(g.log(s)?, noise)?;
    if temperature != 1.0 {
        z = g.scale(z, 1.0 / temperature)?;
    }
    Ok((g.softmax(z)?, clamped))
}

/// Value-only counterpart of [`perturbed_scores`] at temperature 1.
pub fn perturbed_values(scores: &[f64], noise: &[f64]) -> Vec<f64> {
    let z: Vec<f64> = scores
        .iter()
        .zip(noise)
        .map(|(&s, &e)| s.max(SCORE_FLOOR).ln() + e)
        .collect();
    crate::codebook::softmax_row(&z)
}

/// Straight-through k-hot indicator. The forward value is exactly the k-hot
/// vector of the top-k entries; the gradient is that of `soft`.
pub fn straight_through_topk(
    g: &Graph,
    soft: Var,
    k: usize,
) -> Result<(Var, Vec<usize>), CodebookError> {
    let value = g.value(soft);
    let row = value.row(0).to_vec();
    let idx = select_topk(&row, k)?;
    let mut hard = Matrix::zeros((1, row.len()));
    for &i in &idx {
        hard[[0, i]] = 1.0;
    }
    // (soft - sg(soft)) is exactly zero in value, so adding the k-hot last
    // keeps the forward bit-exact
    let delta = g.sub(soft, g.stop_gradient(soft)?)?;
    let ind = g.add(delta, g.constant(hard))?;
    Ok((ind, idx))
}

/// Indicator rebuilt as `soft + offset`, where `offset` was `hard - soft`
/// at an earlier point. Same gradient as [`straight_through_topk`], with the
/// gradient-stopped part held fixed so finite differences can see it.
pub fn straight_through_replay(g: &Graph, soft: Var, offset: &Matrix) -> Result<Var, NdiffError> {
    g.add(soft, g.constant(offset.clone()))
}

/// Selected unit rows, each scaled by its indicator entry, in ascending index
/// order (k×C).
pub fn gate_units(g: &Graph, units: Var, indicator: Var, indices: &[usize]) -> Result<Var, NdiffError> {
    let rows = g.gather_rows(units, indices)?;
    let col = g.transpose(indicator)?;
    let weights = g.gather_rows(col, indices)?;
    g.mul(rows, weights)
}

/// Select `k` units from 1×K scores, optionally with Gumbel noise, returning
/// the gated unit rows and their indices.
pub fn select_units(
    g: &Graph,
    units: Var,
    scores: Var,
    k: usize,
    noise: Option<(&Matrix, f64)>,
) -> Result<(Var, Vec<usize>, bool), CodebookError> {
    let (soft, clamped) = match noise {
        Some((eps, tau)) => perturbed_scores(g, scores, eps, tau)?,
        None => (scores, false),
    };
    let (ind, idx) = straight_through_topk(g, soft, k)?;
    let gated = gate_units(g, units, ind, &idx)?;
    Ok((gated, idx, clamped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::check_gradients;

    #[test]
    fn noise_is_seeded_and_centered() {
        assert_eq!(gumbel_noise(3, 8), gumbel_noise(3, 8));
        assert_ne!(gumbel_noise(3, 8), gumbel_noise(4, 8));
        assert_eq!(gumbel_from_uniform(1.0 / std::f64::consts::E), 0.0);
        let mut stream = NoiseStream::new(11);
        let n = 1_000_000;
        let mean = stream.next_row(n).sum() / n as f64;
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "{mean}");
    }

    #[test]
    fn zero_noise_reduces_to_scores() {
        let g = Graph::new();
        let s = g.constant(Matrix::from_shape_vec((1, 4), vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let (p, clamped) = perturbed_scores(&g, s, &Matrix::zeros((1, 4)), 1.0).unwrap();
        assert!(!clamped);
        for (a, b) in g.value(p).iter().zip(g.value(s).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_scores_give_softmax_of_noise() {
        let g = Graph::new();
        let s = g.constant(Matrix::from_elem((1, 3), 1.0 / 3.0));
        let eps = Matrix::from_shape_vec((1, 3), vec![0.3, -1.0, 2.0]).unwrap();
        let (p, _) = perturbed_scores(&g, s, &eps, 1.0).unwrap();
        let direct = crate::codebook::softmax_row(&[0.3, -1.0, 2.0]);
        for (a, b) in g.value(p).iter().zip(direct) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn noise_can_balance_two_scores() {
        let shift = (0.7f64 / 0.3).ln();
        assert!((shift - 0.8473).abs() < 1e-4);
        let p = perturbed_values(&[0.7, 0.3], &[0.0, shift]);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_scores_are_clamped() {
        let g = Graph::new();
        let s = g.constant(Matrix::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap());
        let (p, clamped) = perturbed_scores(&g, s, &Matrix::zeros((1, 2)), 1.0).unwrap();
        assert!(clamped);
        assert!(g.value(p).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn indicator_is_k_hot() {
        let g = Graph::new();
        let soft = g.param(Matrix::from_shape_vec((1, 3), vec![0.1, 0.6, 0.3]).unwrap());
        let (ind, idx) = straight_through_topk(&g, soft, 1).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(g.value(ind).row(0).to_vec(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn straight_through_gradient_matches_soft() {
        let logits = Matrix::from_shape_vec((1, 5), vec![0.2, -0.4, 1.1, 0.0, 0.7]).unwrap();
        let w = Matrix::from_shape_vec((1, 5), vec![1.0, -2.0, 0.5, 3.0, -1.0]).unwrap();
        let g = Graph::new();
        let z = g.param(logits.clone());
        let soft = g.softmax(z).unwrap();
        let (ind, _) = straight_through_topk(&g, soft, 2).unwrap();
        let wv = g.constant(w.clone());
        let through = g.gradient(g.sum(g.mul(ind, wv).unwrap()).unwrap(), &[z]).unwrap();
        let summed = g.gradient(g.sum(ind).unwrap(), &[z]).unwrap();
        assert!(summed[0].iter().all(|v| v.abs() < 1e-15));
        // finite differences of the soft surrogate
        let report = check_gradients(
            |g, v| {
                let s = g.softmax(v[0])?;
                let wv = g.constant(w.clone());
                g.sum(g.mul(s, wv)?)
            },
            &[logits.clone()],
            1e-5,
        )
        .unwrap();
        assert!(report.passed());
        let g2 = Graph::new();
        let z2 = g2.param(logits);
        let s2 = g2.softmax(z2).unwrap();
        let wv2 = g2.constant(w);
        let soft_grad = g2.gradient(g2.sum(g2.mul(s2, wv2).unwrap()).unwrap(), &[z2]).unwrap();
        assert_eq!(through[0], soft_grad[0]);
    }

    #[test]
    fn gating_orders_and_scales_rows() {
        let g = Graph::new();
        let units = g.param(Matrix::from_shape_fn((4, 2), |(i, j)| (i * 2 + j) as f64));
        let soft = g.param(Matrix::from_shape_vec((1, 4), vec![0.1, 0.5, 0.05, 0.35]).unwrap());
        let (ind, idx) = straight_through_topk(&g, soft, 2).unwrap();
        let gated = gate_units(&g, units, ind, &idx).unwrap();
        assert_eq!(idx, vec![1, 3]);
        assert_eq!(
            *g.value(gated),
            Matrix::from_shape_vec((2, 2), vec![2.0, 3.0, 6.0, 7.0]).unwrap()
        );
        let grads = g.gradient(g.sum(gated).unwrap(), &[soft]).unwrap();
        // d/d soft_i of sum(rows_i * I_i) = row sum for selected units, zero otherwise
        assert_eq!(grads[0].row(0).to_vec(), vec![0.0, 5.0, 0.0, 13.0]);
    }
}
