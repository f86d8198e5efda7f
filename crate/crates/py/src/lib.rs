use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use mrlab_core::backbone::{self as bb, BackboneConfig, DecodeRequest};
use mrlab_core::checkpoint::Container;
use mrlab_core::codebook::{self as cbk, CodebookConfig};
use mrlab_core::infer::{self, Engine};
use mrlab_core::ot::{self, TransportProblem};
use mrlab_core::sampling;
use mrlab_core::tasks::{self, DatasetConfig};
use mrlab_core::vocab::{self as vc, Token, Vocab};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect()).map_err(value_err)
}

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn parse(text: &str) -> PyResult<Vec<Token>> {
    Vocab::get().parse(text).map_err(value_err)
}

fn render(tokens: &[Token]) -> PyResult<String> {
    Vocab::get().render(tokens).map_err(value_err)
}

fn read_container(path: PathBuf) -> PyResult<Container> {
    let bytes = std::fs::read(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
    Container::from_bytes(&bytes).map_err(value_err)
}

/// Token ids for a space-separated symbol string.
#[pyfunction]
fn encode(text: &str) -> PyResult<Vec<usize>> {
    parse(text)
}

#[pyfunction]
fn decode(tokens: Vec<usize>) -> PyResult<String> {
    render(&tokens)
}

#[pyfunction]
fn vocab_size() -> usize {
    Vocab::get().len()
}

/// Train/test splits as lists of `(id, family, question, answer)`.
#[pyfunction]
#[pyo3(signature = (families, per_family, seed, digit_pool = 24))]
#[allow(clippy::type_complexity)]
fn generate_tasks(
    families: usize,
    per_family: usize,
    seed: u64,
    digit_pool: usize,
) -> PyResult<(Vec<(String, usize, String, String)>, Vec<(String, usize, String, String)>)> {
    let s = tasks::generate_family_dataset(&DatasetConfig {
        families,
        per_family,
        digit_pool,
        seed,
    })
    .map_err(value_err)?;
    let conv = |ts: &[tasks::TaskInstance]| {
        ts.iter()
            .map(|t| Ok((t.id.clone(), t.family, render(&t.question)?, render(&t.answer)?)))
            .collect::<PyResult<Vec<_>>>()
    };
    Ok((conv(&s.train)?, conv(&s.test)?))
}

#[pyfunction]
#[pyo3(signature = (family, position = None))]
fn oracle_hint(family: usize, position: Option<usize>) -> PyResult<String> {
    render(&tasks::oracle_hint(family, position).map_err(value_err)?)
}

/// Entropic transport plan and its loss `<plan, cost>`.
#[pyfunction]
#[pyo3(signature = (cost, supply, demand, strength = 20.0, iters = 10))]
fn sinkhorn(
    cost: Vec<Vec<f64>>,
    supply: Vec<f64>,
    demand: Vec<f64>,
    strength: f64,
    iters: usize,
) -> PyResult<(Vec<Vec<f64>>, f64)> {
    let p = ot::sinkhorn(&TransportProblem {
        cost: to_matrix(cost)?,
        supply,
        demand,
        lambda: strength,
        iters,
    })
    .map_err(value_err)?;
    Ok((to_rows(&p.plan), p.loss))
}

/// Exact minimum-cost plan for small problems.
#[pyfunction]
fn exact_transport(cost: Vec<Vec<f64>>, supply: Vec<f64>, demand: Vec<f64>) -> PyResult<(Vec<Vec<f64>>, f64)> {
    let cost = to_matrix(cost)?;
    let p = ot::exact_transport(&cost, &supply, &demand).map_err(value_err)?;
    Ok((to_rows(&p.plan), p.loss))
}

/// `1 - cos` between every student row and every teacher row.
#[pyfunction]
fn cost_matrix(student: Vec<Vec<f64>>, teacher: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let (d, _) = ot::cost_matrix(&to_matrix(student)?, &to_matrix(teacher)?).map_err(value_err)?;
    Ok(to_rows(&d))
}

#[pyfunction]
fn gumbel_noise(seed: u64, k: usize) -> Vec<f64> {
    sampling::gumbel_noise(seed, k).row(0).to_vec()
}

#[pyfunction]
fn perturbed_scores(scores: Vec<f64>, noise: Vec<f64>) -> PyResult<Vec<f64>> {
    if scores.len() != noise.len() {
        return Err(PyValueError::new_err("scores and noise differ in length"));
    }
    Ok(sampling::perturbed_values(&scores, &noise))
}

#[pyfunction]
fn select_topk(scores: Vec<f64>, k: usize) -> PyResult<Vec<usize>> {
    cbk::select_topk(&scores, k).map_err(value_err)
}

/// Frozen causal decoder.
#[pyclass(module = "mrlab")]
struct Backbone {
    inner: bb::Backbone,
}

#[pymethods]
impl Backbone {
    #[new]
    #[pyo3(signature = (width = 128, layers = 8, heads = 4, max_positions = 96, seed = 0))]
    fn new(width: usize, layers: usize, heads: usize, max_positions: usize, seed: u64) -> PyResult<Self> {
        let mut inner = bb::Backbone::init(
            BackboneConfig {
                vocab: Vocab::get().len(),
                width,
                layers,
                heads,
                max_positions,
            },
            seed,
        )
        .map_err(value_err)?;
        inner.freeze();
        Ok(Backbone { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = bb::Backbone::from_container(&read_container(path)?).map_err(value_err)?;
        Ok(Backbone { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        std::fs::write(&path, self.inner.to_container().to_bytes()).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn layers(&self) -> usize {
        self.inner.layers()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }

    /// Residual states after `layer` blocks for a symbol string.
    fn hidden(&self, text: &str, layer: usize) -> PyResult<Vec<Vec<f64>>> {
        let states = self.inner.forward_prefix(&parse(text)?, layer).map_err(value_err)?;
        Ok(to_rows(&states))
    }

    /// Greedy continuation of a question, with an optional hint in the slot.
    #[pyo3(signature = (question, hint = None, cached = true))]
    fn answer(&self, question: &str, hint: Option<&str>, cached: bool) -> PyResult<String> {
        let h = hint.map(parse).transpose()?;
        let prompt = tasks::prompt_tokens(&parse(question)?, h.as_deref()).map_err(value_err)?;
        let req = DecodeRequest {
            query: &prompt,
            units: None,
            cue: &[vc::EQUALS],
            max_new: infer::MAX_NEW,
        };
        let out = if cached {
            self.inner.decode_with_cache(&req)
        } else {
            self.inner.decode_uncached(&req)
        }
        .map_err(value_err)?;
        render(&out.tokens)
    }
}

/// Reflection codebook with its query and unit transforms.
#[pyclass(module = "mrlab")]
struct Codebook {
    inner: cbk::Codebook,
}

#[pymethods]
impl Codebook {
    #[new]
    #[pyo3(signature = (units = 512, width = 128, select = 16, layer = 2, seed = 0))]
    fn new(units: usize, width: usize, select: usize, layer: usize, seed: u64) -> PyResult<Self> {
        let inner = cbk::Codebook::init(
            CodebookConfig {
                units,
                width,
                select,
                layer,
            },
            seed,
        )
        .map_err(value_err)?;
        Ok(Codebook { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = cbk::Codebook::from_container(&read_container(path)?).map_err(value_err)?;
        Ok(Codebook { inner })
    }

    #[getter]
    fn units(&self) -> usize {
        self.inner.config().units
    }

    #[getter]
    fn select(&self) -> usize {
        self.inner.config().select
    }

    /// Noiseless scores for a pooled 1×C query.
    fn scores(&self, pooled: Vec<f64>) -> PyResult<Vec<f64>> {
        let q = to_matrix(vec![pooled])?;
        self.inner.retriever().score(&q).map_err(value_err)
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }

    /// Single-pass answer with inserted units: `(answer, selected indices)`.
    fn answer(&self, backbone: &Backbone, question: &str) -> PyResult<(String, Vec<usize>)> {
        let engine = Engine::new(&backbone.inner, &self.inner).map_err(value_err)?;
        let (tokens, trace) = engine.answer("py", &parse(question)?).map_err(value_err)?;
        Ok((render(&tokens)?, trace.selection.indices))
    }
}

#[pymodule]
fn mrlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Backbone>()?;
    m.add_class::<Codebook>()?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(vocab_size, m)?)?;
    m.add_function(wrap_pyfunction!(generate_tasks, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_hint, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(exact_transport, m)?)?;
    m.add_function(wrap_pyfunction!(cost_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(gumbel_noise, m)?)?;
    m.add_function(wrap_pyfunction!(perturbed_scores, m)?)?;
    m.add_function(wrap_pyfunction!(select_topk, m)?)?;
    Ok(())
}
