//! Python bindings for the adapter lab.
//!
//! Matrices cross the boundary as nested lists of floats so no array
//! library is pinned; convert with `numpy.array(...)` / `.tolist()` on the
//! Python side. The surface mirrors the crate's main operations: building
//! problems and adapters, seeding, single optimizer steps, config-driven
//! runs, the built-in check suite, and the spectral, quantization, and
//! batched-serving helpers.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use loralab_core::adapter::{AdapterSpec, OrthoMode};
use loralab_core::config::parse_config;
use loralab_core::init::{init, loftq_alternating, InitSpec, UniformQuantizer};
use loralab_core::matrix::DenseMatrix;
use loralab_core::optim::{OptimizerSpec, RefloraMode, RunState, StopRule};
use loralab_core::problems::{
    make_synthetic_target, FactorizationProblem, Problem as CoreProblem, SigmaProfile,
    SyntheticSpec,
};
use loralab_core::rng::RandomSource;
use loralab_core::runner::{execute, lift_to_svd, stable_body};
use loralab_core::serving::{fastlora_forward, naive_forward, BatchRequest};
use loralab_core::spectral;
use loralab_core::verify::run_checks;
use loralab_core::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Shape(_) | Error::Domain(_) | Error::Rank(_) | Error::Config(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_dense(rows: Vec<Vec<f64>>) -> PyResult<DenseMatrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("rows have unequal lengths"));
    }
    DenseMatrix::from_vec(r, c, rows.into_iter().flatten().collect()).map_err(err)
}

fn to_lists(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|i| (0..m.cols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// A factorized update in one of the supported families.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Adapter {
    inner: AdapterSpec,
}

#[pymethods]
impl Adapter {
    /// Plain factor pair: the update is `X @ Y.T`.
    #[staticmethod]
    fn pair(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<Self> {
        let spec = AdapterSpec::Bm { x: to_dense(x)?, y: to_dense(y)? };
        spec.validate().map_err(err)?;
        Ok(Self { inner: spec })
    }

    /// The same update lifted to orthonormal factors around a small core,
    /// with feasibility handled by penalty (the form the landing optimizer
    /// expects).
    #[staticmethod]
    fn lifted_pair(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<Self> {
        let spec = lift_to_svd(&to_dense(x)?, &to_dense(y)?, OrthoMode::Penalized).map_err(err)?;
        Ok(Self { inner: spec })
    }

    /// The dense update this adapter represents.
    fn materialize(&self) -> PyResult<Vec<Vec<f64>>> {
        let out = self.inner.materialize().map_err(err)?;
        Ok(to_lists(out.as_matrix().map_err(err)?))
    }

    fn stable_rank(&self) -> PyResult<f64> {
        let out = self.inner.materialize().map_err(err)?;
        spectral::stable_rank(out.as_matrix().map_err(err)?).map_err(err)
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn __repr__(&self) -> String {
        let (m, n, layers) = self.inner.output_dims();
        format!(
            "Adapter({}, output {m}x{n}x{layers}, {} trainables)",
            self.inner.name(),
            self.inner.param_count()
        )
    }
}

/// A training objective over factorized updates.
#[pyclass]
struct Problem {
    inner: CoreProblem,
}

#[pymethods]
impl Problem {
    /// Recover the given dense target.
    #[staticmethod]
    fn factorization(target: Vec<Vec<f64>>) -> PyResult<Self> {
        let p = FactorizationProblem::from_target(to_dense(target)?).map_err(err)?;
        Ok(Self { inner: CoreProblem::Factorization(p) })
    }

    /// Random low-rank target with a pinned spectrum: rank `r_a`, condition
    /// number `kappa`, singular values on a linear profile.
    #[staticmethod]
    #[pyo3(signature = (m, n, r_a, kappa, seed = 0))]
    fn synthetic(m: usize, n: usize, r_a: usize, kappa: f64, seed: u64) -> PyResult<Self> {
        let spec = SyntheticSpec {
            m,
            n,
            r_a,
            kappa,
            measurements: 0,
            noise_sigma: 0.0,
            profile: SigmaProfile::Linear,
        };
        let mut rng = RandomSource::named(seed, "python-synthetic");
        let p = make_synthetic_target(&spec, &mut rng).map_err(err)?;
        Ok(Self { inner: CoreProblem::Factorization(p) })
    }

    fn dims(&self) -> (usize, usize) {
        self.inner.dims()
    }

    /// The dense target, for factorization problems.
    fn target(&self) -> PyResult<Vec<Vec<f64>>> {
        match &self.inner {
            CoreProblem::Factorization(p) => Ok(to_lists(p.target())),
            CoreProblem::Sensing(_) => {
                Err(PyValueError::new_err("sensing problems have no dense target"))
            }
        }
    }

    fn loss(&self, adapter: &Adapter) -> PyResult<f64> {
        self.inner.loss(&adapter.inner).map_err(err)
    }

    /// Analytic loss gradients for a plain factor pair, shaped like the
    /// factors.
    fn grad_pair(&self, adapter: &Adapter) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let AdapterSpec::Bm { x, y } = &adapter.inner else {
            return Err(PyValueError::new_err("grad_pair applies to plain factor pairs"));
        };
        let grads = self.inner.grad_factors(&adapter.inner).map_err(err)?;
        let gx = DenseMatrix::from_vec(x.rows(), x.cols(), grads[0].clone()).map_err(err)?;
        let gy = DenseMatrix::from_vec(y.rows(), y.cols(), grads[1].clone()).map_err(err)?;
        Ok((to_lists(&gx), to_lists(&gy)))
    }
}

/// Seeds an adapter for the problem. Kinds: "nystrom" (sketch of the
/// target's column space), "gaussian_small" (both factors small noise),
/// "lora_default" (fan-in noise times an exactly zero factor).
#[pyfunction]
#[pyo3(signature = (problem, rank, kind = "nystrom", seed = 0))]
fn seed_adapter(problem: &Problem, rank: usize, kind: &str, seed: u64) -> PyResult<Adapter> {
    let (m, n) = problem.inner.dims();
    let spec = match kind {
        "nystrom" => InitSpec::Nystrom,
        "gaussian_small" => InitSpec::GaussianSmall {
            sigma_x: InitSpec::DEFAULT_SMALL_SIGMA,
            sigma_y: InitSpec::DEFAULT_SMALL_SIGMA,
        },
        "lora_default" => InitSpec::LoraDefault { scale: InitSpec::default_lora_scale(m) },
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown init kind {other:?}; expected nystrom, gaussian_small, or lora_default"
            )))
        }
    };
    let mut rng = RandomSource::named(seed, "python-init");
    let adapter = init(&spec, &problem.inner, (m, n, rank), &mut rng).map_err(err)?;
    Ok(Adapter { inner: adapter })
}

/// Advances the adapter by one optimizer step and returns the result.
/// Optimizers: "gd", "scaledgd", "reflora", "landing".
#[pyfunction]
#[pyo3(signature = (problem, adapter, optimizer = "scaledgd", eta = 0.25))]
fn step(problem: &Problem, adapter: &Adapter, optimizer: &str, eta: f64) -> PyResult<Adapter> {
    let opt = match optimizer {
        "gd" => OptimizerSpec::Gd { eta },
        "scaledgd" => OptimizerSpec::ScaledGd { eta, gram_floor: 1e-12 },
        "reflora" => OptimizerSpec::RefLora { eta, mode: RefloraMode::Full },
        "landing" => OptimizerSpec::Landing { eta, lambda_land: 1.0 },
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown optimizer {other:?}; expected gd, scaledgd, reflora, or landing"
            )))
        }
    };
    let mut state = RunState::new(adapter.inner.clone(), StopRule { max_iters: 1, loss_tol: 0.0 })
        .map_err(err)?;
    opt.step(&mut state, &problem.inner).map_err(err)?;
    Ok(Adapter { inner: state.adapter().clone() })
}

/// Outcome of a config-driven run.
#[pyclass]
struct RunResult {
    /// Full CSV trace, headers included.
    #[pyo3(get)]
    csv: String,
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    final_loss: f64,
    #[pyo3(get)]
    converged: bool,
}

/// Parses a config document and executes the run it describes.
#[pyfunction]
#[pyo3(signature = (config_text, seed = None))]
fn run(config_text: &str, seed: Option<u64>) -> PyResult<RunResult> {
    let mut cfg = parse_config(config_text).map_err(err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let record = execute(&cfg).map_err(err)?;
    Ok(RunResult {
        csv: record.to_csv(),
        iterations: record.trace.iterations(),
        final_loss: record.trace.final_loss(),
        converged: record.trace.converged,
    })
}

/// The machine-independent part of a CSV trace: every row with the
/// trailing wall-time column stripped. Two runs of the same config and
/// seed agree byte for byte on this.
#[pyfunction]
fn stable_csv(csv: &str) -> String {
    stable_body(csv)
}

/// Runs the built-in check suite; returns (all_passed, rendered_report).
#[pyfunction]
fn verify() -> (bool, String) {
    let report = run_checks();
    (report.all_passed(), report.render())
}

#[pyfunction]
fn singular_values(mat: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(spectral::singular_values(&to_dense(mat)?))
}

#[pyfunction]
fn stable_rank(mat: Vec<Vec<f64>>) -> PyResult<f64> {
    spectral::stable_rank(&to_dense(mat)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (mat, tol = 1e-8))]
fn numerical_rank(mat: Vec<Vec<f64>>, tol: f64) -> PyResult<usize> {
    spectral::numerical_rank(&to_dense(mat)?, tol).map_err(err)
}

/// Alternating quantize-refit: returns (quantized_base, x, y) with the
/// correction `x @ y.T`.
#[pyfunction]
#[pyo3(signature = (w, rank, bits = 4, sweeps = 2))]
fn quantize_refit(
    w: Vec<Vec<f64>>,
    rank: usize,
    bits: u32,
    sweeps: usize,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let w = to_dense(w)?;
    let q = UniformQuantizer::from_absmax(bits, &w).map_err(err)?;
    let (quantized, x, y) = loftq_alternating(&w, rank, &q, sweeps).map_err(err)?;
    Ok((to_lists(&quantized), to_lists(&x), to_lists(&y)))
}

fn build_batch(
    z: Vec<Vec<f64>>,
    factors: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
) -> PyResult<BatchRequest> {
    let z = to_dense(z)?;
    let factors = factors
        .into_iter()
        .map(|(x, y)| Ok((to_dense(x)?, to_dense(y)?)))
        .collect::<PyResult<Vec<_>>>()?;
    BatchRequest::new(z, factors).map_err(err)
}

/// One batched pass over per-user Hadamard-tied adapters: row k of the
/// result is `z_k @ (w + w * (x_k @ y_k.T))` with `*` elementwise.
#[pyfunction]
fn batched_forward(
    w: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    factors: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
) -> PyResult<Vec<Vec<f64>>> {
    let out = fastlora_forward(&to_dense(w)?, &build_batch(z, factors)?).map_err(err)?;
    Ok(to_lists(&out))
}

/// Reference loop over users, one materialized update each; same result as
/// the batched pass.
#[pyfunction]
fn per_user_forward(
    w: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    factors: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
) -> PyResult<Vec<Vec<f64>>> {
    let out = naive_forward(&to_dense(w)?, &build_batch(z, factors)?).map_err(err)?;
    Ok(to_lists(&out))
}

#[pymodule]
fn loralab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Adapter>()?;
    m.add_class::<Problem>()?;
    m.add_class::<RunResult>()?;
    m.add_function(wrap_pyfunction!(seed_adapter, m)?)?;
    m.add_function(wrap_pyfunction!(step, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(stable_csv, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(singular_values, m)?)?;
    m.add_function(wrap_pyfunction!(stable_rank, m)?)?;
    m.add_function(wrap_pyfunction!(numerical_rank, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_refit, m)?)?;
    m.add_function(wrap_pyfunction!(batched_forward, m)?)?;
    m.add_function(wrap_pyfunction!(per_user_forward, m)?)?;
    Ok(())
}
