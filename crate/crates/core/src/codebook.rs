//! Reflective-unit codebook: the unit matrix, the query and unit transforms,
//! and the retrieval path from a pooled query to an ordered unit subset.

use std::sync::Arc;

use ndarray::Axis as NdAxis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, Container};
use crate::ndiff::{Axis, Graph, Matrix, NdiffError, Var};

/// Row-norm ceiling enforced on the unit matrix after every update.
pub const ROW_NORM_CEILING: f64 = 1e3;

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("invalid codebook dimensions: {0}")]
    InvalidDims(String),
    #[error("cannot pool an empty query")]
    EmptyQuery,
    #[error("width {found} does not match codebook width {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("cannot select {k} of {units} units")]
    TooMany { k: usize, units: usize },
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, CodebookError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodebookConfig {
    /// Number of stored units.
    pub units: usize,
    pub width: usize,
    /// Units selected per query.
    pub select: usize,
    /// Hidden state the query is pooled from and units are inserted at.
    pub layer: usize,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig {
            units: 512,
            width: 128,
            select: 16,
            layer: 2,
        }
    }
}

impl CodebookConfig {
    pub fn validate(&self) -> Result<()> {
        if self.units == 0 || self.width == 0 {
            return Err(CodebookError::InvalidDims(format!(
                "units {} width {}",
                self.units, self.width
            )));
        }
        if self.select == 0 || self.select > self.units {
            return Err(CodebookError::TooMany {
                k: self.select,
                units: self.units,
            });
        }
        if self.layer == 0 {
            return Err(CodebookError::InvalidDims("insertion layer must be positive".into()));
        }
        Ok(())
    }

    /// Check the insertion layer against a backbone depth.
    pub fn validate_for(&self, layers: usize, width: usize) -> Result<()> {
        self.validate()?;
        if self.layer >= layers {
            return Err(CodebookError::InvalidDims(format!(
                "insertion layer {} must be below depth {layers}",
                self.layer
            )));
        }
        if width != self.width {
            return Err(CodebookError::WidthMismatch {
                expected: self.width,
                found: width,
            });
        }
        Ok(())
    }
}

/// Parameter order: units, then query transform (w1, b1, w2, b2), then unit
/// transform (w1, b1, w2, b2).
pub const PARAMS: usize = 9;
const UNITS: usize = 0;
const QUERY_MAP: usize = 1;
const UNIT_MAP: usize = 5;

#[derive(Debug, Clone)]
pub struct Codebook {
    config: CodebookConfig,
    params: Vec<Arc<Matrix>>,
}

/// Codebook parameters registered in one graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundCodebook {
    pub units: Var,
    query_map: [Var; 4],
    unit_map: [Var; 4],
}

impl BoundCodebook {
    /// From nine vars in parameter order.
    pub fn from_vars(v: &[Var]) -> Self {
        assert_eq!(v.len(), PARAMS, "codebook has {PARAMS} parameters");
        BoundCodebook {
            units: v[UNITS],
            query_map: [v[1], v[2], v[3], v[4]],
            unit_map: [v[5], v[6], v[7], v[8]],
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.units];
        v.extend(self.query_map);
        v.extend(self.unit_map);
        v
    }
}

/// Two-layer perceptron with an identity skip: `x + gelu(x W1 + b1) W2 + b2`.
fn mlp(g: &Graph, x: Var, p: &[Var; 4]) -> std::result::Result<Var, NdiffError> {
    let h = g.gelu(g.add(g.matmul(x, p[0])?, p[1])?)?;
    let y = g.add(g.matmul(h, p[2])?, p[3])?;
    g.add(x, y)
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn mlp_values(x: &Matrix, p: &[Arc<Matrix>]) -> Matrix {
    let mut h = x.dot(&*p[0]) + &*p[1];
    h.mapv_inplace(gelu);
    x + &(h.dot(&*p[2]) + &*p[3])
}

impl Codebook {
    pub fn init(config: CodebookConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.width;
        let mut normal = |shape: (usize, usize), std: f64| {
            let d = Normal::new(0.0, std).expect("positive std");
            Matrix::from_shape_simple_fn(shape, || d.sample(&mut rng))
        };
        let units = normal((config.units, c), 0.02);
        let mut params = vec![units];
        for _ in 0..2 {
            params.push(normal((c, c), 1.0 / (c as f64).sqrt()));
            params.push(Matrix::zeros((1, c)));
            params.push(normal((c, c), 1e-3));
            params.push(Matrix::zeros((1, c)));
        }
        Ok(Codebook {
            config,
            params: params.into_iter().map(Arc::new).collect(),
        })
    }

    /// A codebook over the given units whose transforms are exact identities.
    pub fn with_identity_maps(units: Matrix, select: usize, layer: usize) -> Result<Self> {
        let (k, c) = units.dim();
        let config = CodebookConfig {
            units: k,
            width: c,
            select,
            layer,
        };
        config.validate()?;
        let mut params = vec![units];
        for _ in 0..2 {
            params.extend([
                Matrix::zeros((c, c)),
                Matrix::zeros((1, c)),
                Matrix::zeros((c, c)),
                Matrix::zeros((1, c)),
            ]);
        }
        Ok(Codebook {
            config,
            params: params.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn config(&self) -> &CodebookConfig {
        &self.config
    }

    pub fn units(&self) -> &Matrix {
        &self.params[UNITS]
    }

    pub fn params(&self) -> &[Arc<Matrix>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Arc<Matrix>] {
        &mut self.params
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.params.iter().map(|p| p.dim()).collect()
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> BoundCodebook {
        let v: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param_arc(p.clone())
                } else {
                    g.constant_arc(p.clone())
                }
            })
            .collect();
        BoundCodebook::from_vars(&v)
    }

    /// Query transform applied to a pooled row.
    pub fn query_map(&self, g: &Graph, b: &BoundCodebook, h: Var) -> Result<Var> {
        Ok(mlp(g, h, &b.query_map)?)
    }

    /// Relevance scores over all units as a graph node (1×K).
    pub fn score_graph(&self, g: &Graph, b: &BoundCodebook, h: Var) -> Result<Var> {
        let (_, w) = g.shape(h);
        if w != self.config.width {
            return Err(CodebookError::WidthMismatch {
                expected: self.config.width,
                found: w,
            });
        }
        let q = mlp(g, h, &b.query_map)?;
        let keys = mlp(g, b.units, &b.unit_map)?;
        let logits = g.matmul(q, g.transpose(keys)?)?;
        let logits = g.scale(logits, 1.0 / (self.config.units as f64).sqrt())?;
        Ok(g.softmax(logits)?)
    }

    /// Rows of the unit matrix in the given order.
    pub fn gather(&self, indices: &[usize]) -> Matrix {
        self.params[UNITS].select(NdAxis(0), indices)
    }

    /// Largest row norm of the unit matrix.
    pub fn max_row_norm(&self) -> f64 {
        self.params[UNITS]
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0, f64::max)
    }

    /// Rescale unit rows whose norm exceeds `ceiling`; returns how many moved.
    pub fn clamp_row_norms(&mut self, ceiling: f64) -> usize {
        let p = Arc::make_mut(&mut self.params[UNITS]);
        let mut moved = 0;
        for mut row in p.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > ceiling {
                row.mapv_inplace(|v| v * ceiling / n);
                moved += 1;
            }
        }
        moved
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn checksum(&self) -> String {
        checkpoint::checksum(&self.flat_params())
    }

    /// Freeze for inference: transformed units are computed once.
    pub fn retriever(&self) -> Retriever {
        let keys = mlp_values(&self.params[UNITS], &self.params[UNIT_MAP..UNIT_MAP + 4]);
        Retriever {
            config: self.config,
            keys,
            query_map: self.params[QUERY_MAP..QUERY_MAP + 4].to_vec(),
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("codebook");
        c.set("units", self.config.units);
        c.set("width", self.config.width);
        c.set("select", self.config.select);
        c.set("layer", self.config.layer);
        c.payload = self.flat_params();
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_section("codebook")?;
        let config = CodebookConfig {
            units: c.get("units")?,
            width: c.get("width")?,
            select: c.get("select")?,
            layer: c.get("layer")?,
        };
        config.validate()?;
        let w = config.width;
        let mut shapes = vec![(config.units, w)];
        for _ in 0..2 {
            shapes.extend([(w, w), (1, w), (w, w), (1, w)]);
        }
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
        Ok(Codebook { config, params })
    }
}

/// Inference-side retrieval with precomputed unit keys.
#[derive(Debug, Clone)]
pub struct Retriever {
    config: CodebookConfig,
    keys: Matrix,
    query_map: Vec<Arc<Matrix>>,
}

impl Retriever {
    pub fn config(&self) -> &CodebookConfig {
        &self.config
    }

    /// Noiseless scores for a pooled query row.
    pub fn score(&self, pooled: &Matrix) -> Result<Vec<f64>> {
        if pooled.ncols() != self.config.width {
            return Err(CodebookError::WidthMismatch {
                expected: self.config.width,
                found: pooled.ncols(),
            });
        }
        let q = mlp_values(pooled, &self.query_map);
        let logits = q.dot(&self.keys.t()) / (self.config.units as f64).sqrt();
        Ok(softmax_row(logits.row(0).as_slice().expect("row")))
    }
}

pub fn softmax_row(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Mean over positions (1×C).
pub fn pool_query(hidden: &Matrix) -> Result<Matrix> {
    if hidden.nrows() == 0 {
        return Err(CodebookError::EmptyQuery);
    }
    Ok(hidden.mean_axis(NdAxis(0)).expect("nonempty").insert_axis(NdAxis(0)))
}

/// Graph form of [`pool_query`].
pub fn pool_graph(g: &Graph, hidden: Var) -> Result<Var> {
    if g.shape(hidden).0 == 0 {
        return Err(CodebookError::EmptyQuery);
    }
    Ok(g.mean(hidden, Axis::Rows)?)
}

/// Indices of the `k` largest scores in ascending index order; ties go to the
/// lower index.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(CodebookError::TooMany {
            k,
            units: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut top = order[..k].to_vec();
    top.sort_unstable();
    Ok(top)
}

/// Unit rows in ascending index order, as selected from a score vector.
pub fn select_rows(units: &Matrix, scores: &[f64], k: usize) -> Result<(Vec<usize>, Matrix)> {
    let idx = select_topk(scores, k)?;
    let rows = units.select(NdAxis(0), &idx);
    Ok((idx, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::check_gradients;
    use proptest::prelude::*;

    #[test]
    fn pooling_examples() {
        let v = Matrix::from_shape_vec((1, 2), vec![0.3, -1.0]).unwrap();
        assert_eq!(pool_query(&v).unwrap(), v);
        let pm = Matrix::from_shape_vec((2, 2), vec![1.0, 2.0, -1.0, -2.0]).unwrap();
        assert_eq!(pool_query(&pm).unwrap(), Matrix::zeros((1, 2)));
        let three = Matrix::from_shape_vec((3, 2), vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
        assert_eq!(pool_query(&three).unwrap().row(0).to_vec(), vec![2.0, 2.0]);
        assert!(matches!(
            pool_query(&Matrix::zeros((0, 2))),
            Err(CodebookError::EmptyQuery)
        ));
    }

    #[test]
    fn identity_scores() {
        let units = Matrix::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let cb = Codebook::with_identity_maps(units, 1, 1).unwrap();
        let g = Graph::new();
        let b = cb.bind(&g, false);
        let h = g.constant(Matrix::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap());
        let s = g.value(cb.score_graph(&g, &b, h).unwrap());
        // softmax([1/sqrt 2, 0])
        let a = (1.0f64 / 2f64.sqrt()).exp();
        let expect = [a / (a + 1.0), 1.0 / (a + 1.0)];
        for j in 0..2 {
            assert!((s[[0, j]] - expect[j]).abs() < 1e-15);
        }
        let r = cb.retriever().score(&Matrix::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap());
        for (x, y) in r.unwrap().iter().zip(expect) {
            assert!((x - y).abs() < 1e-15);
        }

        let units = Matrix::from_shape_vec((3, 3), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        let cb = Codebook::with_identity_maps(units, 1, 1).unwrap();
        let s = cb
            .retriever()
            .score(&Matrix::from_shape_vec((1, 3), vec![0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        assert!(s.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn topk_examples() {
        assert_eq!(select_topk(&[0.10, 0.50, 0.05, 0.35], 2).unwrap(), vec![1, 3]);
        assert_eq!(select_topk(&[0.2, 0.3, 0.5], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_topk(&[0.5, 0.5], 1).unwrap(), vec![0]);
        assert!(select_topk(&[0.5, 0.5], 3).is_err());
        let units = Matrix::from_shape_fn((4, 2), |(i, j)| (i * 2 + j) as f64);
        let (idx, rows) = select_rows(&units, &[0.10, 0.50, 0.05, 0.35], 2).unwrap();
        assert_eq!(idx, vec![1, 3]);
        assert_eq!(rows.row(0).to_vec(), units.row(1).to_vec());
        assert_eq!(rows.row(1).to_vec(), units.row(3).to_vec());
    }

    #[test]
    fn init_properties() {
        let cfg = CodebookConfig {
            units: 1024,
            width: 128,
            select: 16,
            layer: 2,
        };
        let a = Codebook::init(cfg, 4).unwrap();
        let b = Codebook::init(cfg, 4).unwrap();
        assert_eq!(a.units().dim(), (1024, 128));
        assert_eq!(a.units(), b.units());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..20 {
            let mut h = Matrix::from_shape_simple_fn((1, 128), || d.sample(&mut rng));
            let n = h.iter().map(|v| v * v).sum::<f64>().sqrt();
            h /= n;
            let g = Graph::new();
            let bound = a.bind(&g, false);
            let x = g.constant(h.clone());
            let y = g.value(a.query_map(&g, &bound, x).unwrap());
            let err = (&*y - &h).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err < 1e-2, "{err}");
        }
        assert!(Codebook::init(CodebookConfig { select: 0, ..cfg }, 1).is_err());
        assert!(Codebook::init(CodebookConfig { select: 2000, ..cfg }, 1).is_err());
        assert!(cfg.validate_for(8, 128).is_ok());
        assert!(cfg.validate_for(2, 128).is_err());
    }

    #[test]
    fn score_gradcheck() {
        let cfg = CodebookConfig {
            units: 6,
            width: 4,
            select: 2,
            layer: 1,
        };
        let mut cb = Codebook::init(cfg, 2).unwrap();
        for p in cb.params_mut().iter_mut().skip(1) {
            // larger maps so the transforms carry curvature
            let m = Arc::make_mut(p);
            m.mapv_inplace(|v| v * 50.0 + 0.01);
        }
        let w = Matrix::from_shape_fn((1, 6), |(_, j)| (j as f64 * 0.7).sin());
        let h = Matrix::from_shape_fn((3, 4), |(i, j)| ((i * 4 + j) as f64).cos());
        let mut point: Vec<Matrix> = cb.params().iter().map(|p| (**p).clone()).collect();
        point.push(h);
        let report = check_gradients(
            |g, v| {
                let b = BoundCodebook::from_vars(&v[..PARAMS]);
                let pooled = g.mean(v[9], Axis::Rows)?;
                let s = cb.score_graph(g, &b, pooled).map_err(|e| match e {
                    CodebookError::Ndiff(n) => n,
                    other => panic!("{other}"),
                })?;
                let wv = g.constant(w.clone());
                g.sum(g.mul(s, wv)?)
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip_and_clamp() {
        let mut cb = Codebook::init(CodebookConfig { units: 8, width: 4, select: 2, layer: 1 }, 3).unwrap();
        let back = Codebook::from_container(&Container::from_bytes(&cb.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.checksum(), cb.checksum());
        Arc::make_mut(&mut cb.params_mut()[0])[[3, 0]] = 5e3;
        assert_eq!(cb.clamp_row_norms(ROW_NORM_CEILING), 1);
        assert!(cb.max_row_norm() <= ROW_NORM_CEILING + 1e-9);
    }

    proptest! {
        #[test]
        fn simplex_and_order(seed in 0u64..1000, k in 1usize..8) {
            let cb = Codebook::init(CodebookConfig { units: 8, width: 4, select: k, layer: 1 }, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let d = Normal::new(0.0, 3.0).unwrap();
            let h = Matrix::from_shape_simple_fn((1, 4), || d.sample(&mut rng));
            let s = cb.retriever().score(&h).unwrap();
            prop_assert!(s.iter().all(|&v| v >= 0.0));
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let idx = select_topk(&s, k).unwrap();
            prop_assert_eq!(idx.len(), k);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn topk_invariant_under_monotone_transform(xs in prop::collection::vec(-5.0f64..5.0, 2..20), k in 1usize..20) {
            let k = k.min(xs.len());
            let a = select_topk(&xs, k).unwrap();
            let mapped: Vec<f64> = xs.iter().map(|v| (2.0 * v).exp() + 3.0).collect();
            prop_assert_eq!(a, select_topk(&mapped, k).unwrap());
            let soft = softmax_row(&xs);
            prop_assert_eq!(select_topk(&xs, k).unwrap(), select_topk(&soft, k).unwrap());
        }
    }
}
