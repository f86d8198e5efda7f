//! Optimal-transport alignment between selected units and teacher reflection
//! states: cosine cost, marginal weights, an unrolled Sinkhorn solver, an
//! exact small-instance solver, and the per-layer and averaged losses.

use thiserror::Error;

use crate::ndiff::{Graph, Matrix, NdiffError, Var};

/// Largest instance (cells) accepted by [`exact_transport`].
pub const EXACT_MAX_CELLS: usize = 16;

#[derive(Debug, Error)]
pub enum OtError {
    #[error("exp(-lambda * cost) underflows to zero at lambda = {lambda}; use a smaller lambda")]
    Underflow { lambda: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("exact solver accepts at most {EXACT_MAX_CELLS} cells, got {0}")]
    TooLarge(usize),
    #[error("marginals must be nonnegative with equal totals")]
    Infeasible,
    #[error("no layers to align")]
    NoLayers,
    #[error("invalid solver settings: {0}")]
    Settings(String),
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
}

pub type Result<T> = std::result::Result<T, OtError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TransportProblem {
    /// Supplier-by-demander cost.
    pub cost: Matrix,
    pub supply: Vec<f64>,
    pub demand: Vec<f64>,
    pub lambda: f64,
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Matrix,
    pub loss: f64,
}

impl TransportPlan {
    /// Largest deviation of row and column sums from the marginals.
    pub fn marginal_violation(&self, supply: &[f64], demand: &[f64]) -> f64 {
        let rows = self.plan.rows().into_iter().zip(supply).map(|(r, s)| (r.sum() - s).abs());
        let cols = self
            .plan
            .columns()
            .into_iter()
            .zip(demand)
            .map(|(c, d)| (c.sum() - d).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }
}

/// Frobenius inner product.
pub fn frobenius(a: &Matrix, b: &Matrix) -> f64 {
    (a * b).sum()
}

fn cosine_value(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// `1 - cos` between every supplier and demander row. Zero-norm rows get cost
/// 1; the flag reports whether that happened.
pub fn cost_matrix(suppliers: &Matrix, demanders: &Matrix) -> Result<(Matrix, bool)> {
    check_pair(suppliers.dim(), demanders.dim())?;
    let mut degenerate = false;
    let d = Matrix::from_shape_fn((suppliers.nrows(), demanders.nrows()), |(i, j)| {
        let a = suppliers.row(i).to_vec();
        let b = demanders.row(j).to_vec();
        match cosine_value(&a, &b) {
            Some(c) => 1.0 - c,
            None => {
                degenerate = true;
                1.0
            }
        }
    });
    if degenerate {
        log::warn!("zero-norm row in transport cost; cosine taken as 0");
    }
    Ok((d, degenerate))
}

fn check_pair(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a.0 == 0 || b.0 == 0 || a.1 != b.1 {
        return Err(OtError::Shape(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Graph form of [`cost_matrix`].
pub fn cost_graph(g: &Graph, suppliers: Var, demanders: Var) -> Result<Var> {
    check_pair(g.shape(suppliers), g.shape(demanders))?;
    let cos = g.cosine(suppliers, demanders)?;
    Ok(g.add_scalar(g.scale(cos, -1.0)?, 1.0)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub supply: Vec<f64>,
    pub demand: Vec<f64>,
    /// A side was all zero and fell back to uniform.
    pub fallback: bool,
}

fn mean_row(m: &Matrix) -> Vec<f64> {
    let n = m.nrows() as f64;
    m.columns().into_iter().map(|c| c.sum() / n).collect()
}

fn clamped_weights(rows: &Matrix, anchor: &[f64]) -> Vec<f64> {
    rows.rows()
        .into_iter()
        .map(|r| r.iter().zip(anchor).map(|(a, b)| a * b).sum::<f64>().max(0.0))
        .collect()
}

fn normalize(w: Vec<f64>) -> (Vec<f64>, bool) {
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        (w.into_iter().map(|v| v / total).collect(), false)
    } else {
        let n = w.len() as f64;
        (vec![1.0 / n; w.len()], true)
    }
}

/// Supplier weight: clamped dot product with the demanders' mean row, and
/// the other way round; both normalized to total 1.
pub fn marginal_weights(suppliers: &Matrix, demanders: &Matrix) -> Result<Marginals> {
    check_pair(suppliers.dim(), demanders.dim())?;
    let (supply, fa) = normalize(clamped_weights(suppliers, &mean_row(demanders)));
    let (demand, fb) = normalize(clamped_weights(demanders, &mean_row(suppliers)));
    if fa || fb {
        log::debug!("all-zero transport marginal; using uniform weights");
    }
    Ok(Marginals {
        supply,
        demand,
        fallback: fa || fb,
    })
}

fn check_problem(cost: (usize, usize), supply: &[f64], demand: &[f64], lambda: f64, iters: usize) -> Result<()> {
    if cost.0 != supply.len() || cost.1 != demand.len() || supply.is_empty() || demand.is_empty() {
        return Err(OtError::Shape(format!(
            "cost {cost:?} with {} supply and {} demand entries",
            supply.len(),
            demand.len()
        )));
    }
    if !(lambda > 0.0) || iters == 0 {
        return Err(OtError::Settings(format!("lambda {lambda}, iters {iters}")));
    }
    Ok(())
}

fn kernel(cost: &Matrix, lambda: f64) -> Result<Matrix> {
    let q = cost.mapv(|d| (-lambda * d).exp());
    let dead_row = q.rows().into_iter().any(|r| r.iter().all(|&v| v == 0.0));
    let dead_col = q.columns().into_iter().any(|c| c.iter().all(|&v| v == 0.0));
    if dead_row || dead_col {
        return Err(OtError::Underflow { lambda });
    }
    Ok(q)
}

/// Alternating scaling from `u = 1`: `v = r / (Q u)`, `u = c / (Qᵀ v)`, then
/// `Γ = diag(v) Q diag(u)`.
pub fn sinkhorn(problem: &TransportProblem) -> Result<TransportPlan> {
    let TransportProblem {
        cost,
        supply,
        demand,
        lambda,
        iters,
    } = problem;
    check_problem(cost.dim(), supply, demand, *lambda, *iters)?;
    let q = kernel(cost, *lambda)?;
    let (m, n) = q.dim();
    let mut u = vec![1.0; n];
    let mut v = vec![0.0; m];
    for _ in 0..*iters {
        for i in 0..m {
            let s: f64 = (0..n).map(|j| q[[i, j]] * u[j]).sum();
            v[i] = supply[i] / s;
        }
        for j in 0..n {
            let s: f64 = (0..m).map(|i| q[[i, j]] * v[i]).sum();
            u[j] = demand[j] / s;
        }
    }
    let plan = Matrix::from_shape_fn((m, n), |(i, j)| v[i] * q[[i, j]] * u[j]);
    if plan.iter().any(|x| !x.is_finite()) {
        return Err(OtError::Underflow { lambda: *lambda });
    }
    let loss = frobenius(&plan, cost);
    Ok(TransportPlan { plan, loss })
}

/// Sinkhorn unrolled in the graph so gradients reach the cost. Marginals are
/// constants.
pub fn sinkhorn_graph(g: &Graph, cost: Var, supply: &[f64], demand: &[f64], lambda: f64, iters: usize) -> Result<Var> {
    check_problem(g.shape(cost), supply, demand, lambda, iters)?;
    kernel(&g.value(cost), lambda)?;
    let q = g.exp(g.scale(cost, -lambda)?)?;
    let qt = g.transpose(q)?;
    let (m, n) = g.shape(cost);
    let r = g.constant(Matrix::from_shape_vec((m, 1), supply.to_vec()).expect("sized"));
    let c = g.constant(Matrix::from_shape_vec((n, 1), demand.to_vec()).expect("sized"));
    let mut u = g.constant(Matrix::ones((n, 1)));
    let mut v = u;
    for _ in 0..iters {
        v = g.mul(r, g.pow(g.matmul(q, u)?, -1.0)?)?;
        u = g.mul(c, g.pow(g.matmul(qt, v)?, -1.0)?)?;
    }
    let ut = g.transpose(u)?;
    Ok(g.mul(g.mul(v, q)?, ut)?)
}

/// `⟨Γ, D⟩_F` as a graph node.
pub fn layer_alignment_loss(g: &Graph, plan: Var, cost: Var) -> Result<Var> {
    if g.shape(plan) != g.shape(cost) {
        return Err(OtError::Shape(format!("{:?} vs {:?}", g.shape(plan), g.shape(cost))));
    }
    Ok(g.sum(g.mul(plan, cost)?)?)
}

/// Exact minimum-cost plan by enumerating basic feasible solutions.
pub fn exact_transport(cost: &Matrix, supply: &[f64], demand: &[f64]) -> Result<TransportPlan> {
    let (m, n) = cost.dim();
    if m * n > EXACT_MAX_CELLS {
        return Err(OtError::TooLarge(m * n));
    }
    check_problem(cost.dim(), supply, demand, 1.0, 1)?;
    let (ts, td): (f64, f64) = (supply.iter().sum(), demand.iter().sum());
    if supply.iter().chain(demand).any(|&x| x < 0.0) || (ts - td).abs() > 1e-9 {
        return Err(OtError::Infeasible);
    }
    let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let basis = m + n - 1;
    let mut best: Option<(f64, Matrix)> = None;
    let mut chosen = Vec::with_capacity(basis);
    enumerate(cells.len(), basis, 0, &mut chosen, &mut |subset| {
        if let Some(x) = solve_basis(subset, &cells, supply, demand, m, n) {
            let mut plan = Matrix::zeros((m, n));
            for (&ci, &val) in subset.iter().zip(&x) {
                plan[cells[ci]] = val;
            }
            let loss = frobenius(&plan, cost);
            if best.as_ref().is_none_or(|(b, _)| loss < *b) {
                best = Some((loss, plan));
            }
        }
    });
    let (loss, plan) = best.ok_or(OtError::Infeasible)?;
    Ok(TransportPlan { plan, loss })
}

fn enumerate(total: usize, size: usize, start: usize, chosen: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
    if chosen.len() == size {
        visit(chosen);
        return;
    }
    for i in start..total {
        if total - i < size - chosen.len() {
            break;
        }
        chosen.push(i);
        enumerate(total, size, i + 1, chosen, visit);
        chosen.pop();
    }
}

/// Unique nonnegative solution on the given cells, if any.
fn solve_basis(
    subset: &[usize],
    cells: &[(usize, usize)],
    supply: &[f64],
    demand: &[f64],
    m: usize,
    n: usize,
) -> Option<Vec<f64>> {
    let rows = m + n;
    let cols = subset.len();
    let mut a = vec![vec![0.0; cols + 1]; rows];
    for (k, &ci) in subset.iter().enumerate() {
        let (i, j) = cells[ci];
        a[i][k] = 1.0;
        a[m + j][k] = 1.0;
    }
    for i in 0..m {
        a[i][cols] = supply[i];
    }
    for j in 0..n {
        a[m + j][cols] = demand[j];
    }
    let mut pivot_row = 0;
    let mut pivots = Vec::with_capacity(cols);
    for col in 0..cols {
        let Some(p) = (pivot_row..rows).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())) else {
            return None;
        };
        if a[p][col].abs() < 1e-12 {
            return None;
        }
        a.swap(pivot_row, p);
        let d = a[pivot_row][col];
        for v in a[pivot_row].iter_mut() {
            *v /= d;
        }
        for r in 0..rows {
            if r != pivot_row && a[r][col] != 0.0 {
                let f = a[r][col];
                for c in 0..=cols {
                    a[r][c] -= f * a[pivot_row][c];
                }
            }
        }
        pivots.push(pivot_row);
        pivot_row += 1;
    }
    // remaining rows must be consistent
    if (pivot_row..rows).any(|r| a[r][cols].abs() > 1e-9) {
        return None;
    }
    let x: Vec<f64> = pivots.iter().map(|&r| a[r][cols]).collect();
    if x.iter().any(|&v| v < -1e-12) {
        return None;
    }
    Some(x.into_iter().map(|v| v.max(0.0)).collect())
}

/// Which hidden states enter the averaged alignment loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSet {
    /// States `L+1..=N`: `N - L` terms.
    AfterInsertion,
    /// States `L..=N`: `N - L + 1` terms.
    FromInsertion,
}

impl LayerSet {
    pub fn name(self) -> &'static str {
        match self {
            LayerSet::AfterInsertion => "after",
            LayerSet::FromInsertion => "from",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "after" => Some(LayerSet::AfterInsertion),
            "from" => Some(LayerSet::FromInsertion),
            _ => None,
        }
    }

    /// Offset into a per-state list that starts at state `L`.
    pub fn first(self) -> usize {
        match self {
            LayerSet::AfterInsertion => 1,
            LayerSet::FromInsertion => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignConfig {
    pub lambda: f64,
    pub iters: usize,
    pub layers: LayerSet,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            lambda: 20.0,
            iters: 10,
            layers: LayerSet::AfterInsertion,
        }
    }
}

/// Per-layer transport loss between student unit states (graph nodes) and
/// teacher reflection states (values).
pub fn layer_loss(g: &Graph, student: Var, teacher: &Matrix, cfg: &AlignConfig) -> Result<Var> {
    let marg = marginal_weights(&g.value(student), teacher)?;
    layer_loss_given(g, student, teacher, &marg, cfg)
}

/// [`layer_loss`] with the marginals supplied instead of computed.
pub fn layer_loss_given(g: &Graph, student: Var, teacher: &Matrix, marg: &Marginals, cfg: &AlignConfig) -> Result<Var> {
    let t = g.constant(teacher.clone());
    let cost = cost_graph(g, student, t)?;
    let plan = sinkhorn_graph(g, cost, &marg.supply, &marg.demand, cfg.lambda, cfg.iters)?;
    layer_alignment_loss(g, plan, cost)
}

/// Mean of per-layer losses. Both lists start at state `L`; `cfg.layers`
/// picks which entries count.
pub fn alignment_loss(g: &Graph, student: &[Var], teacher: &[Matrix], cfg: &AlignConfig) -> Result<Var> {
    Ok(alignment_loss_given(g, student, teacher, cfg, None)?.0)
}

/// [`alignment_loss`] that also returns the marginals used per counted
/// layer. Passing `fixed` reuses earlier marginals instead of recomputing
/// them from the current values.
pub fn alignment_loss_given(
    g: &Graph,
    student: &[Var],
    teacher: &[Matrix],
    cfg: &AlignConfig,
    fixed: Option<&[Marginals]>,
) -> Result<(Var, Vec<Marginals>)> {
    if student.len() != teacher.len() {
        return Err(OtError::Shape(format!(
            "{} student layers vs {} teacher layers",
            student.len(),
            teacher.len()
        )));
    }
    let first = cfg.layers.first();
    if student.len() <= first {
        return Err(OtError::NoLayers);
    }
    let count = student.len() - first;
    if let Some(f) = fixed {
        if f.len() != count {
            return Err(OtError::Shape(format!("{} marginals for {count} layers", f.len())));
        }
    }
    let mut total: Option<Var> = None;
    let mut used = Vec::with_capacity(count);
    for (j, (s, t)) in student[first..].iter().zip(&teacher[first..]).enumerate() {
        let marg = match fixed {
            Some(f) => f[j].clone(),
            None => marginal_weights(&g.value(*s), t)?,
        };
        let l = layer_loss_given(g, *s, t, &marg, cfg)?;
        used.push(marg);
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    Ok((g.scale(total.expect("nonempty"), 1.0 / count as f64)?, used))
}

/// Mean of precomputed per-layer losses.
pub fn mean_loss(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Err(OtError::NoLayers);
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::check_gradients;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(r: usize, c: usize, v: &[f64]) -> Matrix {
        Matrix::from_shape_vec((r, c), v.to_vec()).unwrap()
    }

    fn problem(cost: Matrix, supply: &[f64], demand: &[f64], lambda: f64, iters: usize) -> TransportProblem {
        TransportProblem {
            cost,
            supply: supply.to_vec(),
            demand: demand.to_vec(),
            lambda,
            iters,
        }
    }

    #[test]
    fn cost_examples() {
        let p = m(1, 2, &[0.6, 0.8]);
        assert!(cost_matrix(&p, &p).unwrap().0[[0, 0]].abs() < 1e-15);
        let (d, _) = cost_matrix(&m(1, 2, &[1.0, 0.0]), &m(1, 2, &[0.0, 3.0])).unwrap();
        assert_eq!(d[[0, 0]], 1.0);
        let (d, _) = cost_matrix(&p, &m(1, 2, &[-0.6, -0.8])).unwrap();
        assert!((d[[0, 0]] - 2.0).abs() < 1e-15);
        let (d, degenerate) = cost_matrix(&m(1, 2, &[0.0, 0.0]), &p).unwrap();
        assert!(degenerate);
        assert_eq!(d[[0, 0]], 1.0);
        assert!(cost_matrix(&p, &m(1, 3, &[1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn marginal_examples() {
        // supplier 0 is orthogonal to the demanders' mean
        let s = m(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let d = m(1, 2, &[2.0, 0.0]);
        let mg = marginal_weights(&s, &d).unwrap();
        assert_eq!(mg.supply, vec![0.0, 1.0]);
        let same = m(3, 2, &[0.6, 0.8, 0.6, 0.8, 0.6, 0.8]);
        let mg = marginal_weights(&same, &same).unwrap();
        assert!(mg.supply.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(mg.demand.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let mg = marginal_weights(&m(1, 2, &[1.0, 0.0]), &m(2, 2, &[-1.0, 0.0, -2.0, 0.0])).unwrap();
        assert!(mg.fallback);
        assert_eq!(mg.demand, vec![0.5, 0.5]);
    }

    #[test]
    fn marginal_recomputation() {
        let a = m(2, 3, &[0.3, -0.2, 0.9, 0.5, 0.1, -0.4]);
        let b = m(2, 3, &[0.7, 0.2, 0.1, -0.3, 0.8, 0.6]);
        let mg = marginal_weights(&a, &b).unwrap();
        let mb = [(0.7 - 0.3) / 2.0, (0.2 + 0.8) / 2.0, (0.1 + 0.6) / 2.0];
        let ma = [(0.3 + 0.5) / 2.0, (-0.2 + 0.1) / 2.0, (0.9 - 0.4) / 2.0];
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>().max(0.0);
        let r = [dot(&[0.3, -0.2, 0.9], &mb), dot(&[0.5, 0.1, -0.4], &mb)];
        let c = [dot(&[0.7, 0.2, 0.1], &ma), dot(&[-0.3, 0.8, 0.6], &ma)];
        let (rs, cs) = (r[0] + r[1], c[0] + c[1]);
        for i in 0..2 {
            assert!((mg.supply[i] - r[i] / rs).abs() < 1e-15);
            assert!((mg.demand[i] - c[i] / cs).abs() < 1e-15);
        }
    }

    #[test]
    fn sinkhorn_trivial_cases() {
        let p = sinkhorn(&problem(m(1, 1, &[0.3]), &[1.0], &[1.0], 20.0, 10)).unwrap();
        assert!((p.plan[[0, 0]] - 1.0).abs() < 1e-15);
        assert!((p.loss - 0.3).abs() < 1e-15);
        let p = sinkhorn(&problem(Matrix::from_elem((2, 3), 0.7), &[0.4, 0.6], &[0.2, 0.3, 0.5], 20.0, 50)).unwrap();
        assert!((p.loss - 0.7).abs() < 1e-12);
        assert!(matches!(
            sinkhorn(&problem(m(1, 1, &[2.0]), &[1.0], &[1.0], 1e6, 10)),
            Err(OtError::Underflow { .. })
        ));
    }

    #[test]
    fn layer_loss_arithmetic() {
        let g = Graph::new();
        let plan = g.constant(m(2, 2, &[0.5, 0.0, 0.0, 0.5]));
        let cost = g.constant(m(2, 2, &[0.2, 1.0, 1.0, 0.4]));
        assert!((g.item(layer_alignment_loss(&g, plan, cost).unwrap()) - 0.3).abs() < 1e-15);
        let zero = g.constant(Matrix::zeros((2, 2)));
        assert_eq!(g.item(layer_alignment_loss(&g, zero, cost).unwrap()), 0.0);
        assert_eq!(g.item(layer_alignment_loss(&g, plan, zero).unwrap()), 0.0);
        assert!((mean_loss(&[0.2, 0.4]).unwrap() - 0.3).abs() < 1e-15);
        assert!(mean_loss(&[]).is_err());
    }

    #[test]
    fn graph_sinkhorn_matches_values() {
        let cost = m(2, 3, &[0.1, 0.9, 0.4, 1.3, 0.2, 0.6]);
        let (r, c) = ([0.3, 0.7], [0.5, 0.2, 0.3]);
        let direct = sinkhorn(&problem(cost.clone(), &r, &c, 20.0, 10)).unwrap();
        let g = Graph::new();
        let d = g.constant(cost);
        let plan = sinkhorn_graph(&g, d, &r, &c, 20.0, 10).unwrap();
        for (a, b) in g.value(plan).iter().zip(direct.plan.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_examples() {
        let p = exact_transport(&m(1, 2, &[0.0, 1.0]), &[1.0], &[0.5, 0.5]).unwrap();
        assert_eq!(p.plan.row(0).to_vec(), vec![0.5, 0.5]);
        assert!((p.loss - 0.5).abs() < 1e-15);
        let p = exact_transport(&m(2, 2, &[0.3, 0.1, 0.2, 0.5]), &[1.0, 0.0], &[0.4, 0.6]).unwrap();
        assert_eq!(p.plan.row(1).to_vec(), vec![0.0, 0.0]);
        assert!(exact_transport(&Matrix::zeros((5, 4)), &[0.2; 5], &[0.25; 4]).is_err());
        assert!(exact_transport(&Matrix::zeros((2, 2)), &[0.5, 0.5], &[0.2, 0.2]).is_err());
    }

    #[test]
    fn exact_beats_random_feasible_plans() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cost = Matrix::from_shape_simple_fn((3, 3), || rng.random_range(0.0..2.0));
        let r = normalize((0..3).map(|_| rng.random_range(0.1..1.0)).collect()).0;
        let c = normalize((0..3).map(|_| rng.random_range(0.1..1.0)).collect()).0;
        let best = exact_transport(&cost, &r, &c).unwrap();
        for _ in 0..1000 {
            // scaling a random positive matrix onto the marginals gives a
            // random feasible plan
            let noise = Matrix::from_shape_simple_fn((3, 3), || rng.random_range(0.0..4.0));
            let p = sinkhorn(&problem(noise, &r, &c, 1.0, 2000)).unwrap();
            assert!(p.marginal_violation(&r, &c) < 1e-9);
            assert!(frobenius(&p.plan, &cost) >= best.loss - 1e-9);
        }
    }

    #[test]
    fn unrolled_gradient() {
        let a = Matrix::from_shape_fn((3, 4), |(i, j)| ((i * 4 + j) as f64 * 0.9).sin());
        let b = Matrix::from_shape_fn((2, 4), |(i, j)| ((i * 4 + j) as f64 * 0.4).cos());
        let report = check_gradients(
            |g, v| {
                let cost = cost_graph(g, v[0], v[1]).map_err(|e| match e {
                    OtError::Ndiff(n) => n,
                    other => panic!("{other}"),
                })?;
                let plan = sinkhorn_graph(g, cost, &[0.2, 0.5, 0.3], &[0.6, 0.4], 5.0, 10).unwrap();
                g.sum(g.mul(plan, cost)?)
            },
            &[a, b],
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn averaged_loss_layer_sets() {
        let t0 = m(2, 2, &[1.0, 0.2, 0.3, 1.0]);
        let t1 = m(2, 2, &[0.5, -0.2, 0.1, 0.9]);
        let g = Graph::new();
        let s = [g.constant(t0.clone()), g.constant(t1.clone())];
        let same = alignment_loss(&g, &s, &[t0.clone(), t1.clone()], &AlignConfig::default()).unwrap();
        // identical sequences cost little; entropic spread keeps it above 0
        assert!(g.item(same) < 0.05);
        let cfg = AlignConfig {
            layers: LayerSet::FromInsertion,
            ..Default::default()
        };
        let l0 = g.item(layer_loss(&g, s[0], &t1, &cfg).unwrap());
        let l1 = g.item(layer_loss(&g, s[1], &t0, &cfg).unwrap());
        let both = alignment_loss(&g, &s, &[t1.clone(), t0.clone()], &cfg).unwrap();
        assert!((g.item(both) - (l0 + l1) / 2.0).abs() < 1e-15);
        let after = alignment_loss(&g, &s, &[t1, t0.clone()], &AlignConfig::default()).unwrap();
        assert!((g.item(after) - l1).abs() < 1e-15);
        assert!(matches!(
            alignment_loss(&g, &s[..1], &[t0.clone()], &AlignConfig::default()),
            Err(OtError::NoLayers)
        ));
    }

    proptest! {
        #[test]
        fn permuting_suppliers_permutes_plan(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost = Matrix::from_shape_simple_fn((3, 2), || rng.random_range(0.0..2.0));
            let r = normalize((0..3).map(|_| rng.random_range(0.1..1.0)).collect()).0;
            let c = normalize((0..2).map(|_| rng.random_range(0.1..1.0)).collect()).0;
            let base = sinkhorn(&problem(cost.clone(), &r, &c, 20.0, 50)).unwrap();
            let perm = [2usize, 0, 1];
            let pc = Matrix::from_shape_fn((3, 2), |(i, j)| cost[[perm[i], j]]);
            let pr: Vec<f64> = perm.iter().map(|&i| r[i]).collect();
            let moved = sinkhorn(&problem(pc, &pr, &c, 20.0, 50)).unwrap();
            for i in 0..3 {
                for j in 0..2 {
                    prop_assert!((moved.plan[[i, j]] - base.plan[[perm[i], j]]).abs() < 1e-12);
                }
            }
            prop_assert!((moved.loss - base.loss).abs() < 1e-12);
        }

        #[test]
        fn converged_plans_are_feasible(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (rng.random_range(1..5), rng.random_range(1..5));
            let cost = Matrix::from_shape_simple_fn((a, b), || rng.random_range(0.0..2.0));
            let r = normalize((0..a).map(|_| rng.random_range(0.05..1.0)).collect()).0;
            let c = normalize((0..b).map(|_| rng.random_range(0.05..1.0)).collect()).0;
            // contraction factor at most tanh(lambda * max cost / 2) <= tanh(1.5)
            let lambda = rng.random_range(0.1..1.5);
            let p = sinkhorn(&problem(cost.clone(), &r, &c, lambda, 200)).unwrap();
            prop_assert!(p.plan.iter().all(|&v| v >= 0.0));
            prop_assert!(p.marginal_violation(&r, &c) <= 1e-6);
            // columns are matched exactly by the last half-step at any strength
            let sharp = sinkhorn(&problem(cost, &r, &c, 100.0, 200)).unwrap();
            for (j, col) in sharp.plan.columns().into_iter().enumerate() {
                prop_assert!((col.sum() - c[j]).abs() < 1e-12);
            }
        }
    }
}
