//! Factor-space optimizers behind one stepping interface.
//!
//! The GD family (plain, alternating, two-rate, freeze-X, Gram-preconditioned,
//! refactored) operates on `Bm` adapters; the Stiefel stepper and the landing
//! stepper operate on `SvdType` adapters in strict and penalized orthogonality
//! mode respectively. `run` drives any of them to a stopping rule while
//! logging per-iteration metrics.

use std::time::Instant;

use crate::adapter::{orthogonality_penalty, AdapterSpec, OrthoMode};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::problems::Problem;
use crate::spectral::{geometric_mean_s, gram_imbalance, gram_inverse, stable_rank, sym_pd_power, TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefloraMode {
    Full,
    ScaleOnly,
}

/// Optimizer selector with its step-size parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerSpec {
    Gd { eta: f64 },
    AltGd { eta_x: f64, eta_y: f64 },
    LoraPlusGd { eta_x: f64, rate_ratio: f64 },
    FreezeX { eta: f64 },
    ScaledGd { eta: f64, gram_floor: f64 },
    RefLora { eta: f64, mode: RefloraMode },
    StiefelRgd { eta_dir: f64, gamma_mag: f64 },
    Landing { eta: f64, lambda_land: f64 },
}

impl OptimizerSpec {
    /// Relative ridge added to Gram matrices before inversion.
    pub const DEFAULT_GRAM_FLOOR: f64 = 1e-12;
    /// Attraction strength of the landing penalty field.
    pub const DEFAULT_LANDING_LAMBDA: f64 = 1.0;

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| -> Result<()> {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be finite and > 0, got {v}")));
            }
            Ok(())
        };
        match self {
            OptimizerSpec::Gd { eta } | OptimizerSpec::FreezeX { eta } => positive("eta", *eta),
            OptimizerSpec::AltGd { eta_x, eta_y } => {
                positive("eta_x", *eta_x)?;
                positive("eta_y", *eta_y)
            }
            OptimizerSpec::LoraPlusGd { eta_x, rate_ratio } => {
                positive("eta_x", *eta_x)?;
                positive("rate_ratio", *rate_ratio)
            }
            OptimizerSpec::ScaledGd { eta, gram_floor } => {
                positive("eta", *eta)?;
                if !(gram_floor.is_finite() && *gram_floor >= 0.0) {
                    return Err(Error::Domain(format!(
                        "gram_floor must be finite and >= 0, got {gram_floor}"
                    )));
                }
                Ok(())
            }
            OptimizerSpec::RefLora { eta, .. } => positive("eta", *eta),
            OptimizerSpec::StiefelRgd { eta_dir, gamma_mag } => {
                positive("eta_dir", *eta_dir)?;
                positive("gamma_mag", *gamma_mag)
            }
            OptimizerSpec::Landing { eta, lambda_land } => {
                positive("eta", *eta)?;
                positive("lambda_land", *lambda_land)
            }
        }
    }

    /// Name as it appears in config files.
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerSpec::Gd { .. } => "gd",
            OptimizerSpec::AltGd { .. } => "altgd",
            OptimizerSpec::LoraPlusGd { .. } => "lora_plus",
            OptimizerSpec::FreezeX { .. } => "freeze_x",
            OptimizerSpec::ScaledGd { .. } => "scaledgd",
            OptimizerSpec::RefLora { .. } => "reflora",
            OptimizerSpec::StiefelRgd { .. } => "stiefel_rgd",
            OptimizerSpec::Landing { .. } => "landing",
        }
    }

    /// Check the optimizer/adapter pairing before any stepping.
    pub fn check_adapter(&self, adapter: &AdapterSpec) -> Result<()> {
        match self {
            OptimizerSpec::StiefelRgd { .. } => match adapter {
                AdapterSpec::SvdType { ortho_mode: OrthoMode::Strict, .. } => Ok(()),
                AdapterSpec::SvdType { .. } => Err(Error::Config(
                    "stiefel_rgd needs an svd_type adapter with strict orthogonality".into(),
                )),
                _ => Err(Error::Config(format!(
                    "stiefel_rgd needs an svd_type adapter, got {}",
                    adapter.name()
                ))),
            },
            OptimizerSpec::Landing { .. } => match adapter {
                AdapterSpec::SvdType { ortho_mode: OrthoMode::Penalized, .. } => Ok(()),
                AdapterSpec::SvdType { .. } => Err(Error::Config(
                    "landing needs an svd_type adapter with penalized orthogonality".into(),
                )),
                _ => Err(Error::Config(format!(
                    "landing needs an svd_type adapter, got {}",
                    adapter.name()
                ))),
            },
            _ => match adapter {
                AdapterSpec::Bm { .. } => Ok(()),
                _ => Err(Error::Config(format!(
                    "{} needs a bm factor pair, got {}",
                    self.name(),
                    adapter.name()
                ))),
            },
        }
    }

    /// Advance the state by one iteration.
    pub fn step(&self, state: &mut RunState, problem: &Problem) -> Result<()> {
        match *self {
            OptimizerSpec::Gd { eta } => step_gd(state, problem, eta),
            OptimizerSpec::AltGd { eta_x, eta_y } => step_altgd(state, problem, eta_x, eta_y),
            OptimizerSpec::LoraPlusGd { eta_x, rate_ratio } => {
                step_altgd_simultaneous(state, problem, eta_x, rate_ratio * eta_x)
            }
            OptimizerSpec::FreezeX { eta } => step_altgd_simultaneous(state, problem, 0.0, eta),
            OptimizerSpec::ScaledGd { eta, gram_floor } => {
                step_scaledgd(state, problem, eta, gram_floor)
            }
            OptimizerSpec::RefLora { eta, mode } => step_reflora(state, problem, eta, mode),
            OptimizerSpec::StiefelRgd { eta_dir, gamma_mag } => {
                step_stiefel_rgd(state, problem, eta_dir, gamma_mag)
            }
            OptimizerSpec::Landing { eta, lambda_land } => {
                step_landing(state, problem, eta, lambda_land)
            }
        }
    }
}

/// Loss threshold and iteration cap for a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub max_iters: usize,
    pub loss_tol: f64,
}

impl StopRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.loss_tol.is_finite() && self.loss_tol >= 0.0) {
            return Err(Error::Domain(format!(
                "loss_tol must be finite and >= 0, got {}",
                self.loss_tol
            )));
        }
        Ok(())
    }
}

/// Mutable iterate: the adapter being optimized plus the iteration counter.
/// Factor shapes are fixed at construction and stay constant across steps.
#[derive(Debug, Clone)]
pub struct RunState {
    adapter: AdapterSpec,
    iteration: usize,
    stop: StopRule,
}

impl RunState {
    pub fn new(adapter: AdapterSpec, stop: StopRule) -> Result<Self> {
        adapter.validate()?;
        stop.validate()?;
        Ok(Self { adapter, iteration: 0, stop })
    }

    pub fn adapter(&self) -> &AdapterSpec {
        &self.adapter
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn stop(&self) -> StopRule {
        self.stop
    }

    pub fn into_adapter(self) -> AdapterSpec {
        self.adapter
    }

    fn commit(&mut self, next: AdapterSpec) -> Result<()> {
        next.validate()?;
        if next.output_dims() != self.adapter.output_dims()
            || next.param_count() != self.adapter.param_count()
        {
            return Err(Error::Shape("step changed the adapter's shape".into()));
        }
        self.adapter = next;
        self.iteration += 1;
        Ok(())
    }
}

fn bm_factors(state: &RunState) -> Result<(&DenseMatrix, &DenseMatrix)> {
    match state.adapter() {
        AdapterSpec::Bm { x, y } => Ok((x, y)),
        other => Err(Error::Config(format!("this stepper needs a bm adapter, got {}", other.name()))),
    }
}

/// Euclidean factor gradients (G_X, G_Y) of the loss at a factor pair.
fn bm_gradients(problem: &Problem, x: &DenseMatrix, y: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    let spec = AdapterSpec::Bm { x: x.clone(), y: y.clone() };
    let mut blocks = problem.grad_factors(&spec)?.into_iter();
    let gx = DenseMatrix::from_vec(x.rows(), x.cols(), blocks.next().unwrap())?;
    let gy = DenseMatrix::from_vec(y.rows(), y.cols(), blocks.next().unwrap())?;
    Ok((gx, gy))
}

/// Plain gradient descent on both factors, gradients taken at (X_t, Y_t).
pub fn step_gd(state: &mut RunState, problem: &Problem, eta: f64) -> Result<()> {
    let (x, y) = bm_factors(state)?;
    let (gx, gy) = bm_gradients(problem, x, y)?;
    let mut x_next = x.clone();
    let mut y_next = y.clone();
    x_next.axpy(-eta, &gx);
    y_next.axpy(-eta, &gy);
    state.commit(AdapterSpec::Bm { x: x_next, y: y_next })
}

/// Alternating descent: X steps first, then Y with its gradient evaluated at
/// the fresh X. `eta_y = 0` degenerates to updating X only.
pub fn step_altgd(state: &mut RunState, problem: &Problem, eta_x: f64, eta_y: f64) -> Result<()> {
    let (x, y) = bm_factors(state)?;
    let (gx, _) = bm_gradients(problem, x, y)?;
    let mut x_next = x.clone();
    x_next.axpy(-eta_x, &gx);
    let mut y_next = y.clone();
    if eta_y != 0.0 {
        let (_, gy) = bm_gradients(problem, &x_next, y)?;
        y_next.axpy(-eta_y, &gy);
    }
    state.commit(AdapterSpec::Bm { x: x_next, y: y_next })
}

/// Simultaneous two-rate descent; rate 0 freezes the corresponding factor.
pub fn step_altgd_simultaneous(
    state: &mut RunState,
    problem: &Problem,
    eta_x: f64,
    eta_y: f64,
) -> Result<()> {
    let (x, y) = bm_factors(state)?;
    let (gx, gy) = bm_gradients(problem, x, y)?;
    let mut x_next = x.clone();
    let mut y_next = y.clone();
    x_next.axpy(-eta_x, &gx);
    y_next.axpy(-eta_y, &gy);
    state.commit(AdapterSpec::Bm { x: x_next, y: y_next })
}

/// Gram-preconditioned descent: X steps along G_X (Y^T Y)^-1 and Y along
/// G_Y (X^T X)^-1, both Grams taken at time t.
///
/// A factor whose gradient is exactly zero is left untouched without forming
/// the paired Gram inverse. A zero factor zeroes the other side's gradient,
/// so this lets one-sided starts (Y_0 = 0) take their first step instead of
/// inverting a zero Gram.
pub fn step_scaledgd(
    state: &mut RunState,
    problem: &Problem,
    eta: f64,
    gram_floor: f64,
) -> Result<()> {
    let (x, y) = bm_factors(state)?;
    let (gx, gy) = bm_gradients(problem, x, y)?;
    let mut x_next = x.clone();
    let mut y_next = y.clone();
    if gx.frob_norm() > 0.0 {
        let inv_py = gram_inverse(&y.gram(), gram_floor)?;
        x_next.axpy(-eta, &gx.matmul(&inv_py));
    }
    if gy.frob_norm() > 0.0 {
        let inv_px = gram_inverse(&x.gram(), gram_floor)?;
        y_next.axpy(-eta, &gy.matmul(&inv_px));
    }
    state.commit(AdapterSpec::Bm { x: x_next, y: y_next })
}

/// The refactoring matrix: geometric mean of (X^T X)^-1 and Y^T Y in full
/// mode, or the scalar ||Y||_F / ||X||_F times identity in scale-only mode.
pub fn reflora_s(x: &DenseMatrix, y: &DenseMatrix, mode: RefloraMode) -> Result<DenseMatrix> {
    match mode {
        RefloraMode::Full => geometric_mean_s(&x.gram(), &y.gram()),
        RefloraMode::ScaleOnly => {
            let (nx, ny) = (x.frob_norm(), y.frob_norm());
            if nx <= 0.0 || ny <= 0.0 {
                return Err(Error::Conditioning("zero factor has no refactoring scale".into()));
            }
            Ok(DenseMatrix::from_diag(&vec![ny / nx; x.cols()]))
        }
    }
}

/// Refactored descent: X steps along G_X S^-1 and Y along G_Y S, which keeps
/// the update horizontal (no gauge drift) under the induced metric.
pub fn step_reflora(
    state: &mut RunState,
    problem: &Problem,
    eta: f64,
    mode: RefloraMode,
) -> Result<()> {
    let (x, y) = bm_factors(state)?;
    let (gx, gy) = bm_gradients(problem, x, y)?;
    let s = reflora_s(x, y, mode)?;
    let s_inv = sym_pd_power(&s, -1.0)?;
    let mut x_next = x.clone();
    let mut y_next = y.clone();
    x_next.axpy(-eta, &gx.matmul(&s_inv));
    y_next.axpy(-eta, &gy.matmul(&s));
    state.commit(AdapterSpec::Bm { x: x_next, y: y_next })
}

fn svd_parts(state: &RunState) -> Result<(&DenseMatrix, &DenseMatrix, &DenseMatrix, bool, OrthoMode)> {
    match state.adapter() {
        AdapterSpec::SvdType { u, sigma, v, sigma_diagonal, ortho_mode } => {
            Ok((u, sigma, v, *sigma_diagonal, *ortho_mode))
        }
        other => {
            Err(Error::Config(format!("this stepper needs an svd_type adapter, got {}", other.name())))
        }
    }
}

fn svd_gradients(
    problem: &Problem,
    u: &DenseMatrix,
    sigma: &DenseMatrix,
    v: &DenseMatrix,
    sigma_diagonal: bool,
    ortho_mode: OrthoMode,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
    let spec = AdapterSpec::SvdType {
        u: u.clone(),
        sigma: sigma.clone(),
        v: v.clone(),
        sigma_diagonal,
        ortho_mode,
    };
    let mut blocks = problem.grad_factors(&spec)?.into_iter();
    let gu = DenseMatrix::from_vec(u.rows(), u.cols(), blocks.next().unwrap())?;
    let gs = DenseMatrix::from_vec(sigma.rows(), sigma.cols(), blocks.next().unwrap())?;
    let gv = DenseMatrix::from_vec(v.rows(), v.cols(), blocks.next().unwrap())?;
    Ok((gu, gs, gv))
}

/// G - U sym(U^T G): the component of G tangent to the orthonormal-columns
/// manifold at U.
pub fn stiefel_tangent(u: &DenseMatrix, g: &DenseMatrix) -> DenseMatrix {
    let utg = u.matmul_tn(g);
    let sym = utg.add(&utg.transpose()).scale(0.5);
    g.sub(&u.matmul(&sym))
}

/// Orthonormalize B = U - eta*E through B (B^T B)^-1/2. For a tangent E at an
/// orthonormal U this is exactly the closed-form polar retraction
/// (U - eta E)(I + eta^2 E^T E)^-1/2, and it also repairs small feasibility
/// drift in the input.
pub fn polar_retract(u: &DenseMatrix, e: &DenseMatrix, eta: f64) -> Result<DenseMatrix> {
    let mut b = u.clone();
    b.axpy(-eta, e);
    let correction = sym_pd_power(&b.gram(), -0.5)?;
    Ok(b.matmul(&correction))
}

fn feasibility_gap(u: &DenseMatrix) -> f64 {
    u.gram().sub(&DenseMatrix::identity(u.cols())).frob_norm()
}

/// Riemannian descent on both direction factors with polar retraction, then a
/// plain gradient step on the middle factor evaluated at the new directions.
pub fn step_stiefel_rgd(
    state: &mut RunState,
    problem: &Problem,
    eta_dir: f64,
    gamma_mag: f64,
) -> Result<()> {
    let (u, sigma, v, sigma_diagonal, ortho_mode) = svd_parts(state)?;
    if ortho_mode != OrthoMode::Strict {
        return Err(Error::Config("stiefel_rgd needs strict orthogonality mode".into()));
    }
    for (name, f) in [("u", u), ("v", v)] {
        let gap = feasibility_gap(f);
        if gap > TOL.stiefel_entry {
            return Err(Error::Feasibility(format!(
                "{name} lost orthonormality before the step: gap {gap:e}"
            )));
        }
    }
    let (gu, _, gv) = svd_gradients(problem, u, sigma, v, sigma_diagonal, ortho_mode)?;
    let e = stiefel_tangent(u, &gu);
    let f = stiefel_tangent(v, &gv);
    let u_next = polar_retract(u, &e, eta_dir)?;
    let v_next = polar_retract(v, &f, eta_dir)?;
    for f in [&u_next, &v_next] {
        let gap = feasibility_gap(f);
        if gap > TOL.stiefel_post {
            return Err(Error::Feasibility(format!("retraction left gap {gap:e}")));
        }
    }
    let (_, gs, _) = svd_gradients(problem, &u_next, sigma, &v_next, sigma_diagonal, ortho_mode)?;
    let mut sigma_next = sigma.clone();
    sigma_next.axpy(-gamma_mag, &gs);
    state.commit(AdapterSpec::SvdType {
        u: u_next,
        sigma: sigma_next,
        v: v_next,
        sigma_diagonal,
        ortho_mode,
    })
}

/// Retraction-free descent: tangent gradient plus the penalty field
/// lambda * U (U^T U - I) pulling iterates toward orthonormality. The middle
/// factor steps as in the Stiefel case, at rate eta.
pub fn step_landing(
    state: &mut RunState,
    problem: &Problem,
    eta: f64,
    lambda_land: f64,
) -> Result<()> {
    let (u, sigma, v, sigma_diagonal, ortho_mode) = svd_parts(state)?;
    if ortho_mode != OrthoMode::Penalized {
        return Err(Error::Config("landing needs penalized orthogonality mode".into()));
    }
    let (gu, _, gv) = svd_gradients(problem, u, sigma, v, sigma_diagonal, ortho_mode)?;
    let land = |f: &DenseMatrix, g: &DenseMatrix| -> DenseMatrix {
        let tangent = stiefel_tangent(f, g);
        let drift = f.matmul(&f.gram().sub(&DenseMatrix::identity(f.cols())));
        let mut next = f.clone();
        next.axpy(-eta, &tangent);
        next.axpy(-eta * lambda_land, &drift);
        next
    };
    let u_next = land(u, &gu);
    let v_next = land(v, &gv);
    let (_, gs, _) = svd_gradients(problem, &u_next, sigma, &v_next, sigma_diagonal, ortho_mode)?;
    let mut sigma_next = sigma.clone();
    sigma_next.axpy(-eta, &gs);
    state.commit(AdapterSpec::SvdType {
        u: u_next,
        sigma: sigma_next,
        v: v_next,
        sigma_diagonal,
        ortho_mode,
    })
}

/// One logged iterate of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRow {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub stable_rank: f64,
    /// ||X^T X - Y^T Y||_F; factor pairs only.
    pub gram_imbalance: Option<f64>,
    /// ||U^T U - I||_F^2 + ||V^T V - I||_F^2; svd_type only.
    pub ortho_penalty: Option<f64>,
    pub wall_ns: u128,
}

/// Everything a run produces: the per-iteration rows, the final adapter, and
/// whether the loss tolerance was reached.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub rows: Vec<IterationRow>,
    pub final_adapter: AdapterSpec,
    pub converged: bool,
}

impl RunTrace {
    /// Iteration count of the last logged row.
    pub fn iterations(&self) -> usize {
        self.rows.last().map_or(0, |r| r.iter)
    }

    pub fn final_loss(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_stable_rank(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.stable_rank)
    }
}

fn metrics_row(
    problem: &Problem,
    adapter: &AdapterSpec,
    iter: usize,
    clock: &Instant,
) -> Result<IterationRow> {
    let materialized = adapter.materialize()?;
    let loss = problem.loss_of(&materialized)?;
    let grad_norm = problem
        .grad_factors(adapter)?
        .iter()
        .flat_map(|b| b.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    let flat = materialized.as_matrix()?;
    let sr = if flat.is_zero() { 0.0 } else { stable_rank(flat)? };
    let gram = match adapter {
        AdapterSpec::Bm { x, y } => Some(gram_imbalance(x, y)?),
        _ => None,
    };
    let ortho = match adapter {
        AdapterSpec::SvdType { u, v, .. } => {
            Some(orthogonality_penalty(u) + orthogonality_penalty(v))
        }
        _ => None,
    };
    Ok(IterationRow {
        iter,
        loss,
        grad_norm,
        stable_rank: sr,
        gram_imbalance: gram,
        ortho_penalty: ortho,
        wall_ns: clock.elapsed().as_nanos(),
    })
}

/// Drive the optimizer until the loss tolerance or the iteration cap is hit.
/// The initial iterate is always logged, so a run of `k` steps yields `k + 1`
/// rows.
pub fn run(
    problem: &Problem,
    adapter: AdapterSpec,
    opt: &OptimizerSpec,
    stop: StopRule,
) -> Result<RunTrace> {
    opt.validate()?;
    opt.check_adapter(&adapter)?;
    let clock = Instant::now();
    let mut state = RunState::new(adapter, stop)?;
    let mut rows = Vec::with_capacity(stop.max_iters.saturating_add(1).min(4096));
    let mut converged = false;
    loop {
        let row = metrics_row(problem, state.adapter(), state.iteration(), &clock)?;
        let loss = row.loss;
        rows.push(row);
        if loss <= stop.loss_tol {
            converged = true;
            break;
        }
        if state.iteration() >= stop.max_iters {
            break;
        }
        opt.step(&mut state, problem)?;
    }
    Ok(RunTrace { rows, final_adapter: state.into_adapter(), converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_synthetic_target, FactorizationProblem, SigmaProfile, SyntheticSpec};
    use crate::rng::RandomSource;
    use crate::spectral::{invert_small, random_orthonormal, well_conditioned_q};

    fn rng() -> RandomSource {
        RandomSource::named(11, "optim-tests")
    }

    fn scalar_problem() -> Problem {
        let target = DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap();
        Problem::Factorization(FactorizationProblem::from_target(target).unwrap())
    }

    fn scalar_pair(x: f64, y: f64) -> AdapterSpec {
        AdapterSpec::Bm {
            x: DenseMatrix::from_vec(1, 1, vec![x]).unwrap(),
            y: DenseMatrix::from_vec(1, 1, vec![y]).unwrap(),
        }
    }

    fn scalar_values(state: &RunState) -> (f64, f64) {
        let AdapterSpec::Bm { x, y } = state.adapter() else { panic!() };
        (x[(0, 0)], y[(0, 0)])
    }

    fn product_of(adapter: &AdapterSpec) -> DenseMatrix {
        adapter.materialize().unwrap().as_matrix().unwrap().clone()
    }

    fn synthetic(m: usize, n: usize, r_a: usize, kappa: f64, rng: &mut RandomSource) -> Problem {
        let spec = SyntheticSpec {
            m,
            n,
            r_a,
            kappa,
            measurements: 0,
            noise_sigma: 0.0,
            profile: SigmaProfile::Linear,
        };
        Problem::Factorization(make_synthetic_target(&spec, rng).unwrap())
    }

    fn stop(max_iters: usize, loss_tol: f64) -> StopRule {
        StopRule { max_iters, loss_tol }
    }

    #[test]
    fn gd_scalar_one_steps_match_closed_forms() {
        let p = scalar_problem();
        for eta in [0.01, 0.1, 0.25] {
            let mut s = RunState::new(scalar_pair(2.0, 2.0), stop(10, 0.0)).unwrap();
            step_gd(&mut s, &p, eta).unwrap();
            let (x, y) = scalar_values(&s);
            assert!((x - (2.0 - 6.0 * eta)).abs() <= 1e-12);
            assert!((y - (2.0 - 6.0 * eta)).abs() <= 1e-12);

            let mut s = RunState::new(scalar_pair(1.0, 4.0), stop(10, 0.0)).unwrap();
            step_gd(&mut s, &p, eta).unwrap();
            let (x, y) = scalar_values(&s);
            assert!((x - (1.0 - 12.0 * eta)).abs() <= 1e-12);
            assert!((y - (4.0 - 3.0 * eta)).abs() <= 1e-12);
            assert_eq!(s.iteration(), 1);
        }
    }

    #[test]
    fn gd_products_differ_across_the_scalar_gauge_orbit() {
        // Both points represent the product 4, but plain GD maps them to
        // different products: the gauge failure case.
        let p = scalar_problem();
        let eta = 0.1;
        let mut a = RunState::new(scalar_pair(2.0, 2.0), stop(1, 0.0)).unwrap();
        let mut b = RunState::new(scalar_pair(1.0, 4.0), stop(1, 0.0)).unwrap();
        step_gd(&mut a, &p, eta).unwrap();
        step_gd(&mut b, &p, eta).unwrap();
        let (ax, ay) = scalar_values(&a);
        let (bx, by) = scalar_values(&b);
        assert!((ax * ay - bx * by).abs() >= 1e-3);
    }

    #[test]
    fn scaledgd_scalar_orbit_closed_form() {
        let p = scalar_problem();
        let eta = 0.1;
        let expected: f64 = 4.0 - 6.0 * eta + 2.25 * eta * eta;
        assert!((expected - 3.4225).abs() <= 1e-15);
        for (x0, y0) in [(4.0, 1.0), (2.0, 2.0), (8.0, 0.5), (0.5, 8.0)] {
            let mut s = RunState::new(scalar_pair(x0, y0), stop(1, 0.0)).unwrap();
            step_scaledgd(&mut s, &p, eta, 0.0).unwrap();
            let (x, y) = scalar_values(&s);
            assert!((x * y - expected).abs() <= 1e-12, "from ({x0},{y0}): {}", x * y);
        }
    }

    #[test]
    fn scaledgd_zero_step_at_exact_factorization() {
        let mut rng = rng();
        let p = synthetic(6, 5, 2, 3.0, &mut rng);
        let Problem::Factorization(f) = &p else { panic!() };
        let (u, sigma, v) = crate::spectral::svd_truncated(f.target(), 2).unwrap();
        let mut x = u;
        let mut y = v;
        for j in 0..2 {
            let c = sigma[j].sqrt();
            for i in 0..x.rows() {
                x[(i, j)] *= c;
            }
            for i in 0..y.rows() {
                y[(i, j)] *= c;
            }
        }
        let adapter = AdapterSpec::Bm { x: x.clone(), y };
        let before = product_of(&adapter);
        let mut s = RunState::new(adapter, stop(1, 0.0)).unwrap();
        step_scaledgd(&mut s, &p, 0.3, OptimizerSpec::DEFAULT_GRAM_FLOOR).unwrap();
        assert!(product_of(s.adapter()).sub(&before).max_abs() <= 1e-9);
    }

    #[test]
    fn reflora_scalar_orbit_closed_form_and_example_losses() {
        let p = scalar_problem();
        for mode in [RefloraMode::Full, RefloraMode::ScaleOnly] {
            for eta in [0.1, 1.0 / 3.0] {
                let expected = (2.0 - 6.0 * eta) * (2.0 - 6.0 * eta);
                for (x0, y0) in [(2.0, 2.0), (1.0, 4.0), (8.0, 0.5)] {
                    let mut s = RunState::new(scalar_pair(x0, y0), stop(1, 0.0)).unwrap();
                    step_reflora(&mut s, &p, eta, mode).unwrap();
                    let (x, y) = scalar_values(&s);
                    assert!(
                        (x * y - expected).abs() <= 1e-12,
                        "mode {mode:?} eta {eta} from ({x0},{y0}): {}",
                        x * y
                    );
                }
            }
        }
        // eta = 0.1 leaves product 1.96, loss 0.4608; eta = 1/3 zeroes the
        // product, so the loss lands at 1/2 exactly.
        let loss_at = |eta: f64| {
            let mut s = RunState::new(scalar_pair(2.0, 2.0), stop(1, 0.0)).unwrap();
            step_reflora(&mut s, &p, eta, RefloraMode::Full).unwrap();
            p.loss(s.adapter()).unwrap()
        };
        assert!((loss_at(0.1) - 0.5 * (1.96 - 1.0) * (1.96 - 1.0)).abs() <= 1e-12);
        assert!((loss_at(1.0 / 3.0) - 0.5).abs() <= 1e-12);
        // ScaledGD at the same eta = 1/3 only reaches product 2.25.
        let mut s = RunState::new(scalar_pair(2.0, 2.0), stop(1, 0.0)).unwrap();
        step_scaledgd(&mut s, &p, 1.0 / 3.0, 0.0).unwrap();
        let (x, y) = scalar_values(&s);
        assert!((x * y - 2.25).abs() <= 1e-12);
        assert!((p.loss(s.adapter()).unwrap() - 0.78125).abs() <= 1e-12);
    }

    fn random_pair(rng: &mut RandomSource, m: usize, n: usize, r: usize) -> (DenseMatrix, DenseMatrix) {
        (rng.gaussian_matrix(m, r, 1.0), rng.gaussian_matrix(n, r, 1.0))
    }

    fn gauge_shift(
        x: &DenseMatrix,
        y: &DenseMatrix,
        q: &DenseMatrix,
    ) -> (DenseMatrix, DenseMatrix) {
        let q_inv_t = invert_small(q).unwrap().transpose();
        (x.matmul(q), y.matmul(&q_inv_t))
    }

    #[test]
    fn scaledgd_and_reflora_steps_are_gauge_equivariant() {
        let mut rng = rng();
        for trial in 0..30 {
            let r = 1 + (trial % 4);
            let (x, y) = random_pair(&mut rng, 7, 6, r);
            let q = well_conditioned_q(&mut rng, r);
            let (xq, yq) = gauge_shift(&x, &y, &q);
            let p = synthetic(7, 6, 2, 2.0, &mut rng);
            for opt in [
                OptimizerSpec::ScaledGd { eta: 0.2, gram_floor: 0.0 },
                OptimizerSpec::RefLora { eta: 0.2, mode: RefloraMode::Full },
            ] {
                let mut plain =
                    RunState::new(AdapterSpec::Bm { x: x.clone(), y: y.clone() }, stop(1, 0.0))
                        .unwrap();
                let mut gauged =
                    RunState::new(AdapterSpec::Bm { x: xq.clone(), y: yq.clone() }, stop(1, 0.0))
                        .unwrap();
                opt.step(&mut plain, &p).unwrap();
                opt.step(&mut gauged, &p).unwrap();
                let d = product_of(plain.adapter()).sub(&product_of(gauged.adapter()));
                assert!(d.frob_norm() <= 1e-9, "{} trial {trial}: {}", opt.name(), d.frob_norm());
            }
        }
    }

    #[test]
    fn reflora_step_is_horizontal() {
        // The metric pairing of the step with any vertical vector
        // (XU, -Y U^T) vanishes.
        let mut rng = rng();
        for trial in 0..30 {
            let r = 1 + (trial % 4);
            let (x, y) = random_pair(&mut rng, 7, 6, r);
            let p = synthetic(7, 6, 2, 2.0, &mut rng);
            let s = reflora_s(&x, &y, RefloraMode::Full).unwrap();
            let s_inv = sym_pd_power(&s, -1.0).unwrap();
            let mut state =
                RunState::new(AdapterSpec::Bm { x: x.clone(), y: y.clone() }, stop(1, 0.0)).unwrap();
            step_reflora(&mut state, &p, 0.2, RefloraMode::Full).unwrap();
            let AdapterSpec::Bm { x: x1, y: y1 } = state.adapter() else { panic!() };
            let dx = x1.sub(&x);
            let dy = y1.sub(&y);
            let u = rng.gaussian_matrix(r, r, 1.0);
            let vert_x = x.matmul(&u);
            let vert_y = y.matmul(&u.transpose()).scale(-1.0);
            let pairing = vert_x.matmul(&s).frob_inner(&dx) + vert_y.matmul(&s_inv).frob_inner(&dy);
            let scale = dx.frob_norm().hypot(dy.frob_norm()) * vert_x.frob_norm().hypot(vert_y.frob_norm());
            assert!(pairing.abs() <= 1e-9 * scale.max(1.0), "trial {trial}: {pairing}");
        }
    }

    #[test]
    fn scaledgd_metric_is_gauge_invariant() {
        let mut rng = rng();
        for trial in 0..30 {
            let r = 1 + (trial % 4);
            let (x, y) = random_pair(&mut rng, 7, 6, r);
            let q = well_conditioned_q(&mut rng, r);
            let (xq, yq) = gauge_shift(&x, &y, &q);
            let q_inv_t = invert_small(&q).unwrap().transpose();
            let (xi_x, xi_y) = random_pair(&mut rng, 7, 6, r);
            let (phi_x, phi_y) = random_pair(&mut rng, 7, 6, r);
            let pairing = |x: &DenseMatrix,
                           y: &DenseMatrix,
                           xi: (&DenseMatrix, &DenseMatrix),
                           phi: (&DenseMatrix, &DenseMatrix)| {
                xi.0.matmul(&y.gram()).frob_inner(phi.0) + xi.1.matmul(&x.gram()).frob_inner(phi.1)
            };
            let base = pairing(&x, &y, (&xi_x, &xi_y), (&phi_x, &phi_y));
            let pushed = pairing(
                &xq,
                &yq,
                (&xi_x.matmul(&q), &xi_y.matmul(&q_inv_t)),
                (&phi_x.matmul(&q), &phi_y.matmul(&q_inv_t)),
            );
            assert!(
                (base - pushed).abs() <= 1e-9 * base.abs().max(1.0),
                "trial {trial}: {base} vs {pushed}"
            );
        }
    }

    #[test]
    fn reflora_equals_gd_from_the_balanced_pair() {
        let mut rng = rng();
        for trial in 0..20 {
            let r = 1 + (trial % 3);
            let (x, y) = random_pair(&mut rng, 6, 5, r);
            let p = synthetic(6, 5, 2, 2.0, &mut rng);
            let s = reflora_s(&x, &y, RefloraMode::Full).unwrap();
            let s_half = sym_pd_power(&s, 0.5).unwrap();
            let s_neg_half = sym_pd_power(&s, -0.5).unwrap();
            let bx = x.matmul(&s_half);
            let by = y.matmul(&s_neg_half);
            // The balanced pair shares the product and has equal Grams.
            assert!(bx.matmul_nt(&by).sub(&x.matmul_nt(&y)).max_abs() <= 1e-9);
            assert!(bx.gram().sub(&by.gram()).frob_norm() <= 1e-8);
            let mut refactored =
                RunState::new(AdapterSpec::Bm { x: x.clone(), y: y.clone() }, stop(1, 0.0)).unwrap();
            step_reflora(&mut refactored, &p, 0.15, RefloraMode::Full).unwrap();
            let mut balanced =
                RunState::new(AdapterSpec::Bm { x: bx, y: by }, stop(1, 0.0)).unwrap();
            step_gd(&mut balanced, &p, 0.15).unwrap();
            let d = product_of(refactored.adapter()).sub(&product_of(balanced.adapter()));
            assert!(d.frob_norm() <= 1e-9, "trial {trial}: {}", d.frob_norm());
        }
    }

    #[test]
    fn altgd_uses_the_fresh_x_for_the_y_step() {
        let p = scalar_problem();
        let (eta_x, eta_y) = (0.1, 0.05);
        let mut s = RunState::new(scalar_pair(2.0, 2.0), stop(1, 0.0)).unwrap();
        step_altgd(&mut s, &p, eta_x, eta_y).unwrap();
        let (x1, y1) = scalar_values(&s);
        let x_expect = 2.0 - eta_x * 6.0;
        // The y gradient is (x1*y - 1) * x1 at the updated x.
        let y_expect = 2.0 - eta_y * (x_expect * 2.0 - 1.0) * x_expect;
        assert!((x1 - x_expect).abs() <= 1e-12);
        assert!((y1 - y_expect).abs() <= 1e-12);
    }

    #[test]
    fn altgd_with_zero_y_rate_only_moves_x() {
        let p = scalar_problem();
        let mut alt = RunState::new(scalar_pair(1.0, 4.0), stop(1, 0.0)).unwrap();
        step_altgd(&mut alt, &p, 0.1, 0.0).unwrap();
        let (x, y) = scalar_values(&alt);
        assert!((x - (1.0 - 1.2)).abs() <= 1e-12);
        assert_eq!(y, 4.0);
    }

    #[test]
    fn freeze_x_and_two_rate_match_their_definitions() {
        let p = scalar_problem();
        let mut frozen = RunState::new(scalar_pair(1.0, 4.0), stop(1, 0.0)).unwrap();
        OptimizerSpec::FreezeX { eta: 0.1 }.step(&mut frozen, &p).unwrap();
        let (x, y) = scalar_values(&frozen);
        assert_eq!(x, 1.0);
        assert!((y - (4.0 - 0.3)).abs() <= 1e-12);

        let mut two_rate = RunState::new(scalar_pair(1.0, 4.0), stop(1, 0.0)).unwrap();
        OptimizerSpec::LoraPlusGd { eta_x: 0.01, rate_ratio: 4.0 }.step(&mut two_rate, &p).unwrap();
        let (x, y) = scalar_values(&two_rate);
        assert!((x - (1.0 - 0.12)).abs() <= 1e-12);
        assert!((y - (4.0 - 0.04 * 3.0)).abs() <= 1e-12);
    }

    fn orthonormal_svd_adapter(
        rng: &mut RandomSource,
        m: usize,
        n: usize,
        r: usize,
        mode: OrthoMode,
    ) -> AdapterSpec {
        AdapterSpec::SvdType {
            u: random_orthonormal(rng, m, r),
            sigma: rng.gaussian_matrix(r, r, 1.0),
            v: random_orthonormal(rng, n, r),
            sigma_diagonal: false,
            ortho_mode: mode,
        }
    }

    #[test]
    fn stiefel_step_keeps_factors_orthonormal() {
        let mut rng = rng();
        for _ in 0..10 {
            let adapter = orthonormal_svd_adapter(&mut rng, 8, 6, 3, OrthoMode::Strict);
            let p = synthetic(8, 6, 3, 4.0, &mut rng);
            let mut s = RunState::new(adapter, stop(1, 0.0)).unwrap();
            step_stiefel_rgd(&mut s, &p, 0.05, 0.05).unwrap();
            let AdapterSpec::SvdType { u, v, .. } = s.adapter() else { panic!() };
            assert!(feasibility_gap(u) <= 1e-10);
            assert!(feasibility_gap(v) <= 1e-10);
        }
    }

    #[test]
    fn stiefel_zero_gradient_is_a_fixed_point() {
        let mut rng = rng();
        let u = random_orthonormal(&mut rng, 7, 3);
        let v = random_orthonormal(&mut rng, 5, 3);
        let sigma = rng.gaussian_matrix(3, 3, 1.0);
        let target = u.matmul(&sigma).matmul_nt(&v);
        let p = Problem::Factorization(FactorizationProblem::from_target(target).unwrap());
        let adapter = AdapterSpec::SvdType {
            u: u.clone(),
            sigma: sigma.clone(),
            v: v.clone(),
            sigma_diagonal: false,
            ortho_mode: OrthoMode::Strict,
        };
        let mut s = RunState::new(adapter, stop(1, 0.0)).unwrap();
        step_stiefel_rgd(&mut s, &p, 0.1, 0.1).unwrap();
        let AdapterSpec::SvdType { u: u1, sigma: s1, v: v1, .. } = s.adapter() else { panic!() };
        assert!(u1.sub(&u).max_abs() <= 1e-12);
        assert!(v1.sub(&v).max_abs() <= 1e-12);
        assert!(s1.sub(&sigma).max_abs() <= 1e-12);
    }

    #[test]
    fn stiefel_retraction_matches_polar_oracle() {
        let mut rng = rng();
        for _ in 0..10 {
            let u = random_orthonormal(&mut rng, 9, 4);
            let g = rng.gaussian_matrix(9, 4, 1.0);
            let e = stiefel_tangent(&u, &g);
            // Tangency: U^T E is skew.
            let ute = u.matmul_tn(&e);
            assert!(ute.add(&ute.transpose()).max_abs() <= 1e-12);
            let eta = 0.3;
            let via_retraction = polar_retract(&u, &e, eta).unwrap();
            let mut b = u.clone();
            b.axpy(-eta, &e);
            let oracle = crate::spectral::polar_factor(&b);
            assert!(via_retraction.sub(&oracle).max_abs() <= 1e-10);
        }
    }

    #[test]
    fn stiefel_theta_steps_at_the_new_directions() {
        let mut rng = rng();
        let adapter = orthonormal_svd_adapter(&mut rng, 8, 6, 3, OrthoMode::Strict);
        let p = synthetic(8, 6, 3, 4.0, &mut rng);
        let AdapterSpec::SvdType { u, sigma, v, .. } = &adapter else { panic!() };
        let (u0, sigma0, v0) = (u.clone(), sigma.clone(), v.clone());
        let mut s = RunState::new(adapter, stop(1, 0.0)).unwrap();
        let (eta, gamma) = (0.05, 0.07);
        step_stiefel_rgd(&mut s, &p, eta, gamma).unwrap();
        let AdapterSpec::SvdType { u: u1, sigma: sigma1, v: v1, .. } = s.adapter() else { panic!() };
        let (_, gs_new, _) =
            svd_gradients(&p, u1, &sigma0, v1, false, OrthoMode::Strict).unwrap();
        let mut expected = sigma0.clone();
        expected.axpy(-gamma, &gs_new);
        assert!(sigma1.sub(&expected).max_abs() <= 1e-12);
        // And it differs from stepping at the old directions.
        let (_, gs_old, _) = svd_gradients(&p, &u0, &sigma0, &v0, false, OrthoMode::Strict).unwrap();
        let mut stale = sigma0.clone();
        stale.axpy(-gamma, &gs_old);
        assert!(sigma1.sub(&stale).max_abs() > 1e-10);
    }

    #[test]
    fn stiefel_rejects_infeasible_entry() {
        let mut rng = rng();
        let AdapterSpec::SvdType { mut u, sigma, v, .. } =
            orthonormal_svd_adapter(&mut rng, 8, 6, 3, OrthoMode::Strict)
        else {
            panic!()
        };
        u[(0, 0)] += 1e-3;
        let adapter =
            AdapterSpec::SvdType { u, sigma, v, sigma_diagonal: false, ortho_mode: OrthoMode::Strict };
        let p = synthetic(8, 6, 3, 4.0, &mut rng);
        let mut s = RunState::new(adapter, stop(1, 0.0)).unwrap();
        let got = step_stiefel_rgd(&mut s, &p, 0.05, 0.05);
        assert!(matches!(got, Err(Error::Feasibility(_))));
    }

    #[test]
    fn landing_zero_gradient_orthonormal_is_fixed() {
        let mut rng = rng();
        let u = random_orthonormal(&mut rng, 7, 3);
        let v = random_orthonormal(&mut rng, 5, 3);
        let sigma = rng.gaussian_matrix(3, 3, 1.0);
        let target = u.matmul(&sigma).matmul_nt(&v);
        let p = Problem::Factorization(FactorizationProblem::from_target(target).unwrap());
        let adapter = AdapterSpec::SvdType {
            u: u.clone(),
            sigma,
            v,
            sigma_diagonal: false,
            ortho_mode: OrthoMode::Penalized,
        };
        let mut s = RunState::new(adapter, stop(1, 0.0)).unwrap();
        step_landing(&mut s, &p, 0.1, 1.0).unwrap();
        let AdapterSpec::SvdType { u: u1, .. } = s.adapter() else { panic!() };
        assert!(u1.sub(&u).max_abs() <= 1e-12);
    }

    #[test]
    fn landing_penalty_field_shrinks_scaled_factors() {
        // U = 2 * orthonormal with zero loss gradient: the step is purely the
        // penalty field and must reduce the feasibility gap.
        let mut rng = rng();
        let q = random_orthonormal(&mut rng, 7, 3);
        let u = q.scale(2.0);
        let v = random_orthonormal(&mut rng, 5, 3);
        let sigma = rng.gaussian_matrix(3, 3, 1.0);
        let target = u.matmul(&sigma).matmul_nt(&v);
        let p = Problem::Factorization(FactorizationProblem::from_target(target).unwrap());
        let before = feasibility_gap(&u);
        let adapter = AdapterSpec::SvdType {
            u: u.clone(),
            sigma,
            v,
            sigma_diagonal: false,
            ortho_mode: OrthoMode::Penalized,
        };
        let mut s = RunState::new(adapter, stop(1, 0.0)).unwrap();
        step_landing(&mut s, &p, 0.02, 1.0).unwrap();
        let AdapterSpec::SvdType { u: u1, .. } = s.adapter() else { panic!() };
        // Direction check: the step is along -U (U^T U - I) exactly.
        let drift = u.matmul(&u.gram().sub(&DenseMatrix::identity(3)));
        let mut expected = u.clone();
        expected.axpy(-0.02, &drift);
        assert!(u1.sub(&expected).max_abs() <= 1e-12);
        assert!(feasibility_gap(u1) < before);
    }

    #[test]
    fn landing_reaches_feasibility_from_a_perturbed_start() {
        let mut rng = rng();
        let mut u = random_orthonormal(&mut rng, 8, 3);
        let mut v = random_orthonormal(&mut rng, 6, 3);
        for f in [&mut u, &mut v] {
            let noise = rng.gaussian_matrix(f.rows(), f.cols(), 1e-2);
            f.axpy(1.0, &noise);
        }
        let adapter = AdapterSpec::SvdType {
            u,
            sigma: rng.gaussian_matrix(3, 3, 0.5),
            v,
            sigma_diagonal: false,
            ortho_mode: OrthoMode::Penalized,
        };
        let p = synthetic(8, 6, 3, 2.0, &mut rng);
        let mut s = RunState::new(adapter, stop(500, 0.0)).unwrap();
        for _ in 0..500 {
            step_landing(&mut s, &p, 0.1, OptimizerSpec::DEFAULT_LANDING_LAMBDA).unwrap();
        }
        let AdapterSpec::SvdType { u, v, .. } = s.adapter() else { panic!() };
        assert!(feasibility_gap(u) <= 1e-6, "gap {}", feasibility_gap(u));
        assert!(feasibility_gap(v) <= 1e-6);
    }

    #[test]
    fn run_with_zero_budget_logs_only_the_initial_row() {
        let mut rng = rng();
        let p = synthetic(6, 5, 2, 2.0, &mut rng);
        let adapter = AdapterSpec::Bm {
            x: rng.gaussian_matrix(6, 2, 0.1),
            y: rng.gaussian_matrix(5, 2, 0.1),
        };
        let trace = run(&p, adapter, &OptimizerSpec::Gd { eta: 0.01 }, stop(0, 0.0)).unwrap();
        assert_eq!(trace.rows.len(), 1);
        assert_eq!(trace.rows[0].iter, 0);
        assert!(!trace.converged);
        assert!(trace.rows[0].gram_imbalance.is_some());
        assert!(trace.rows[0].ortho_penalty.is_none());
    }

    #[test]
    fn run_stops_immediately_on_exact_init() {
        let mut rng = rng();
        let p = synthetic(9, 7, 3, 5.0, &mut rng);
        let a = crate::init::init(&crate::init::InitSpec::SpectralTop, &p, (9, 7, 3), &mut rng)
            .unwrap();
        let trace = run(&p, a, &OptimizerSpec::Gd { eta: 0.01 }, stop(100, 1e-20)).unwrap();
        assert_eq!(trace.rows.len(), 1);
        assert!(trace.converged);
        assert!(trace.final_loss() <= 1e-20);
    }

    #[test]
    fn run_rejects_mismatched_optimizer_and_adapter() {
        let mut rng = rng();
        let p = synthetic(6, 5, 2, 2.0, &mut rng);
        let bm = AdapterSpec::Bm {
            x: rng.gaussian_matrix(6, 2, 0.1),
            y: rng.gaussian_matrix(5, 2, 0.1),
        };
        let svd = orthonormal_svd_adapter(&mut rng, 6, 5, 2, OrthoMode::Strict);
        let got = run(&p, svd.clone(), &OptimizerSpec::Gd { eta: 0.01 }, stop(1, 0.0));
        assert!(matches!(got, Err(Error::Config(_))));
        let got = run(&p, bm, &OptimizerSpec::StiefelRgd { eta_dir: 0.01, gamma_mag: 0.01 }, stop(1, 0.0));
        assert!(matches!(got, Err(Error::Config(_))));
        let got = run(&p, svd, &OptimizerSpec::Landing { eta: 0.01, lambda_land: 1.0 }, stop(1, 0.0));
        assert!(matches!(got, Err(Error::Config(_))));
    }

    #[test]
    fn every_optimizer_descends_monotonically_at_small_steps() {
        let mut rng = rng();
        let p = synthetic(8, 6, 3, 5.0, &mut rng);
        let sigma_top = 5.0;
        let mut bm_adapter = || AdapterSpec::Bm {
            x: rng.gaussian_matrix(8, 3, 0.3),
            y: rng.gaussian_matrix(6, 3, 0.3),
        };
        let eta = 0.1 / (sigma_top * sigma_top);
        let cases: Vec<(OptimizerSpec, AdapterSpec)> = vec![
            (OptimizerSpec::Gd { eta }, bm_adapter()),
            (OptimizerSpec::AltGd { eta_x: eta, eta_y: eta }, bm_adapter()),
            (OptimizerSpec::LoraPlusGd { eta_x: eta, rate_ratio: 2.0 }, bm_adapter()),
            (OptimizerSpec::FreezeX { eta }, bm_adapter()),
            (
                OptimizerSpec::ScaledGd { eta: 0.1, gram_floor: OptimizerSpec::DEFAULT_GRAM_FLOOR },
                bm_adapter(),
            ),
            (OptimizerSpec::RefLora { eta: 0.05, mode: RefloraMode::Full }, bm_adapter()),
            (OptimizerSpec::RefLora { eta: 0.05, mode: RefloraMode::ScaleOnly }, bm_adapter()),
            (
                OptimizerSpec::StiefelRgd { eta_dir: eta, gamma_mag: eta },
                orthonormal_svd_adapter(&mut rng, 8, 6, 3, OrthoMode::Strict),
            ),
            (
                OptimizerSpec::Landing { eta, lambda_land: 1.0 },
                orthonormal_svd_adapter(&mut rng, 8, 6, 3, OrthoMode::Penalized),
            ),
        ];
        for (opt, adapter) in cases {
            let trace = run(&p, adapter, &opt, stop(50, 0.0)).unwrap();
            for w in trace.rows.windows(2) {
                assert!(
                    w[1].loss <= w[0].loss + 1e-12,
                    "{} rose from {} to {} at iter {}",
                    opt.name(),
                    w[0].loss,
                    w[1].loss,
                    w[1].iter
                );
            }
        }
    }

    #[test]
    fn nystrom_beats_small_gaussian_for_scaledgd() {
        let opt = OptimizerSpec::ScaledGd { eta: 0.25, gram_floor: OptimizerSpec::DEFAULT_GRAM_FLOOR };
        let mut wins = 0;
        for seed in 0..5u64 {
            let spec = SyntheticSpec {
                m: 20,
                n: 15,
                r_a: 3,
                kappa: 50.0,
                measurements: 0,
                noise_sigma: 0.0,
                profile: SigmaProfile::Linear,
            };
            let mut prng = RandomSource::named(seed, "trend-problem");
            let p = Problem::Factorization(make_synthetic_target(&spec, &mut prng).unwrap());
            let mut irng = RandomSource::named(seed, "trend-init");
            // Unconverged runs are censored at the budget: tiny balanced
            // random starts can oscillate indefinitely under preconditioned
            // steps, which still counts against them in the pairing.
            let iters = |init: &crate::init::InitSpec, irng: &mut RandomSource| {
                let a = crate::init::init(init, &p, (20, 15, 3), irng).unwrap();
                let t = run(&p, a, &opt, stop(2000, 1e-10)).unwrap();
                (t.converged, t.iterations())
            };
            let (nystrom_ok, nystrom) = iters(&crate::init::InitSpec::Nystrom, &mut irng);
            let (_, gaussian) = iters(
                &crate::init::InitSpec::GaussianSmall { sigma_x: 1e-3, sigma_y: 1e-3 },
                &mut irng,
            );
            assert!(nystrom_ok, "sketched start should always converge");
            if nystrom < gaussian {
                wins += 1;
            }
        }
        assert_eq!(wins, 5, "sketched starts should win every paired seed here");
    }

    #[test]
    fn specs_validate_their_parameter_ranges() {
        for bad in [
            OptimizerSpec::Gd { eta: 0.0 },
            OptimizerSpec::AltGd { eta_x: 0.1, eta_y: -0.1 },
            OptimizerSpec::LoraPlusGd { eta_x: 0.1, rate_ratio: 0.0 },
            OptimizerSpec::ScaledGd { eta: 0.1, gram_floor: -1.0 },
            OptimizerSpec::RefLora { eta: f64::NAN, mode: RefloraMode::Full },
            OptimizerSpec::StiefelRgd { eta_dir: 0.0, gamma_mag: 0.1 },
            OptimizerSpec::Landing { eta: 0.1, lambda_land: 0.0 },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert!(OptimizerSpec::ScaledGd { eta: 0.1, gram_floor: 0.0 }.validate().is_ok());
    }

    #[test]
    fn reflora_errors_on_rank_deficient_grams() {
        let p = scalar_problem();
        let mut s = RunState::new(
            AdapterSpec::Bm {
                x: DenseMatrix::zeros(1, 1),
                y: DenseMatrix::from_vec(1, 1, vec![2.0]).unwrap(),
            },
            stop(1, 0.0),
        )
        .unwrap();
        let got = step_reflora(&mut s, &p, 0.1, RefloraMode::Full);
        assert!(matches!(got, Err(Error::Conditioning(_))));
        let got = step_reflora(&mut s, &p, 0.1, RefloraMode::ScaleOnly);
        assert!(matches!(got, Err(Error::Conditioning(_))));
        // The preconditioned step tolerates a zero factor: the dead side's
        // gradient is zero, so only the live side moves and no zero Gram is
        // ever inverted.
        step_scaledgd(&mut s, &p, 0.1, OptimizerSpec::DEFAULT_GRAM_FLOOR).unwrap();
        let AdapterSpec::Bm { x, y } = s.adapter() else { panic!() };
        assert!(x.frob_norm() > 0.0, "live gradient should revive the zero factor");
        assert_eq!(y[(0, 0)], 2.0, "zero-gradient side stays put");
    }
}
