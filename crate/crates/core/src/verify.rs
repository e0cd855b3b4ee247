//! Built-in check suite behind the `verify` subcommand.
//!
//! Every closed-form value and structural law the crate leans on is
//! re-derived here from scratch and compared against the implementation:
//! scalar landscape constants, one-step update forms, gauge behavior,
//! parameter budgets, rank laws, serving equivalence, quantized refits,
//! and gradient correctness. Groups are independent and failures are
//! collected rather than raised, so a broken build still prints the full
//! table. Nothing here measures wall time; every assertion is
//! machine-independent arithmetic.

use crate::adapter::{materialize_fedpara_krp, sample_specs, AdapterSpec};
use crate::config::parse_config;
use crate::error::Result;
use crate::init::{init, loftq_alternating, InitSpec, UniformQuantizer};
use crate::matrix::{DenseMatrix, Tensor3};
use crate::optim::{step_gd, OptimizerSpec, RefloraMode, RunState, StopRule};
use crate::problems::{
    make_synthetic_target, FactorizationProblem, Problem, SensingProblem, SigmaProfile,
    SyntheticSpec,
};
use crate::rng::RandomSource;
use crate::runner::{execute, stable_body};
use crate::serving::{
    fast_flops_model, fastlora_forward_counted, naive_flops_model, naive_forward_counted,
    BatchRequest, OpCounter,
};
use crate::spectral::{
    invert_small, numerical_rank, singular_values, sym_pd_power, well_conditioned_q,
};

/// One named check group with its verdict and a one-line summary.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Verdicts for every check group, in the order they ran.
#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One line per group plus a tally, ready for stdout.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("{verdict} {:<22} {}\n", c.name, c.detail));
        }
        let passed = self.checks.iter().filter(|c| c.passed).count();
        out.push_str(&format!("{passed}/{} check groups passed\n", self.checks.len()));
        out
    }
}

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, fail: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(fail())
    }
}

fn ok<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| format!("unexpected error: {e}"))
}

fn dense_update(spec: &AdapterSpec) -> std::result::Result<DenseMatrix, String> {
    let out = ok(spec.materialize())?;
    Ok(ok(out.as_matrix())?.clone())
}

/// Runs every check group and collects the verdicts.
pub fn run_checks() -> VerifyReport {
    let groups: Vec<(&'static str, fn() -> Check)> = vec![
        ("scalar-landscape", check_scalar_landscape),
        ("gd-one-step-forms", check_gd_one_step_forms),
        ("preconditioned-products", check_preconditioned_products),
        ("gauge-equivariance", check_gauge_equivariance),
        ("balanced-geometry", check_balanced_geometry),
        ("parameter-budgets", check_parameter_budgets),
        ("khatri-rao-identity", check_khatri_rao_identity),
        ("rank-laws", check_rank_laws),
        ("zero-start-init", check_zero_start_init),
        ("serving-equivalence", check_serving_equivalence),
        ("quantized-refit", check_quantized_refit),
        ("gradient-check", check_gradient_check),
        ("run-determinism", check_run_determinism),
    ];
    let checks = groups
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(detail) => CheckOutcome { name, passed: true, detail },
            Err(detail) => CheckOutcome { name, passed: false, detail },
        })
        .collect();
    VerifyReport { checks }
}

/// Per-axis curvature of the scalar objective `0.5 (xy - a)^2` with the
/// residual in the coupling slot: [[y^2, xy - a], [xy - a, x^2]]. The
/// diagonal holds the exact second derivatives along each factor axis;
/// the off-diagonal records the residual, one `xy` term short of the full
/// mixed derivative `2xy - a`. Landscape comparisons along a gauge orbit
/// quote this form, so it is pinned here as its own quantity.
pub fn scalar_curvature_display(x: f64, y: f64, target: f64) -> [[f64; 2]; 2] {
    let r = x * y - target;
    [[y * y, r], [r, x * x]]
}

/// Largest eigenvalue of a symmetric 2 x 2 matrix.
pub fn top_curvature(h: &[[f64; 2]; 2]) -> f64 {
    let (a, b, d) = (h[0][0], h[0][1], h[1][1]);
    0.5 * (a + d + ((a - d).powi(2) + 4.0 * b * b).sqrt())
}

fn scalar_problem() -> Problem {
    let target = DenseMatrix::from_vec(1, 1, vec![1.0]).expect("1 x 1 target");
    Problem::Factorization(FactorizationProblem::from_target(target).expect("valid scalar problem"))
}

fn scalar_state(x: f64, y: f64) -> Result<RunState> {
    let adapter = AdapterSpec::Bm {
        x: DenseMatrix::from_vec(1, 1, vec![x])?,
        y: DenseMatrix::from_vec(1, 1, vec![y])?,
    };
    RunState::new(adapter, StopRule { max_iters: 1, loss_tol: 0.0 })
}

fn scalar_values(state: &RunState) -> (f64, f64) {
    let AdapterSpec::Bm { x, y } = state.adapter() else {
        unreachable!("scalar states hold factor pairs")
    };
    (x[(0, 0)], y[(0, 0)])
}

fn synthetic_target(m: usize, n: usize, r_a: usize, kappa: f64, rng: &mut RandomSource) -> Result<Problem> {
    let spec = SyntheticSpec {
        m,
        n,
        r_a,
        kappa,
        measurements: 0,
        noise_sigma: 0.0,
        profile: SigmaProfile::Linear,
    };
    Ok(Problem::Factorization(make_synthetic_target(&spec, rng)?))
}

const ETA_GRID: [f64; 4] = [0.05, 0.1, 0.25, 1.0 / 3.0];

fn check_scalar_landscape() -> Check {
    let p = scalar_problem();
    let at = |x: f64, y: f64| -> Result<AdapterSpec> {
        Ok(AdapterSpec::Bm {
            x: DenseMatrix::from_vec(1, 1, vec![x])?,
            y: DenseMatrix::from_vec(1, 1, vec![y])?,
        })
    };
    let loss = ok(p.loss(&ok(at(2.0, 2.0))?))?;
    ensure((loss - 4.5).abs() <= 1e-12, || format!("loss at (2,2) is {loss}, wanted 4.5"))?;
    let grad = ok(p.grad_factors(&ok(at(2.0, 2.0))?))?;
    ensure(
        (grad[0][0] - 6.0).abs() <= 1e-12 && (grad[1][0] - 6.0).abs() <= 1e-12,
        || format!("gradient at (2,2) is ({}, {}), wanted (6, 6)", grad[0][0], grad[1][0]),
    )?;

    let pinned = [
        (2.0, 2.0, [[4.0, 3.0], [3.0, 4.0]], 7.0),
        (1.0, 4.0, [[16.0, 3.0], [3.0, 1.0]], 0.5 * (17.0 + 261f64.sqrt())),
    ];
    for (x, y, entries, top) in pinned {
        let h = scalar_curvature_display(x, y, 1.0);
        for i in 0..2 {
            for j in 0..2 {
                ensure((h[i][j] - entries[i][j]).abs() <= 1e-12, || {
                    format!("curvature entry ({i},{j}) at ({x},{y}) is {}, wanted {}", h[i][j], entries[i][j])
                })?;
            }
        }
        let lam = top_curvature(&h);
        ensure((lam - top).abs() <= 1e-12, || {
            format!("top curvature at ({x},{y}) is {lam}, wanted {top}")
        })?;
        // The diagonal is a true second derivative; difference the analytic
        // gradient to confirm it. The coupling slot is the residual by
        // construction, so only the diagonal admits this cross-check.
        let h_fd = 1e-6;
        let gx = |xx: f64, yy: f64| -> std::result::Result<f64, String> {
            Ok(ok(p.grad_factors(&ok(at(xx, yy))?))?[0][0])
        };
        let gy = |xx: f64, yy: f64| -> std::result::Result<f64, String> {
            Ok(ok(p.grad_factors(&ok(at(xx, yy))?))?[1][0])
        };
        let fxx = (gx(x + h_fd, y)? - gx(x - h_fd, y)?) / (2.0 * h_fd);
        let fyy = (gy(x, y + h_fd)? - gy(x, y - h_fd)?) / (2.0 * h_fd);
        ensure((fxx - h[0][0]).abs() <= 1e-5 * h[0][0].max(1.0), || {
            format!("differenced d2/dx2 at ({x},{y}) is {fxx}, display says {}", h[0][0])
        })?;
        ensure((fyy - h[1][1]).abs() <= 1e-5 * h[1][1].max(1.0), || {
            format!("differenced d2/dy2 at ({x},{y}) is {fyy}, display says {}", h[1][1])
        })?;
    }
    Ok("loss 4.5, gradient (6, 6), curvature tops 7 and 16.5781 at the two orbit points".into())
}

fn check_gd_one_step_forms() -> Check {
    let p = scalar_problem();
    for eta in ETA_GRID {
        let mut s = ok(scalar_state(2.0, 2.0))?;
        ok(step_gd(&mut s, &p, eta))?;
        let (x1, y1) = scalar_values(&s);
        ensure(
            (x1 - (2.0 - 6.0 * eta)).abs() <= 1e-12 && (y1 - (2.0 - 6.0 * eta)).abs() <= 1e-12,
            || format!("step from (2,2) at eta={eta} gave ({x1}, {y1})"),
        )?;
        let mut s = ok(scalar_state(1.0, 4.0))?;
        ok(step_gd(&mut s, &p, eta))?;
        let (x1, y1) = scalar_values(&s);
        ensure(
            (x1 - (1.0 - 12.0 * eta)).abs() <= 1e-12 && (y1 - (4.0 - 3.0 * eta)).abs() <= 1e-12,
            || format!("step from (1,4) at eta={eta} gave ({x1}, {y1})"),
        )?;
    }
    Ok(format!(
        "(2-6eta, 2-6eta) and (1-12eta, 4-3eta) reproduced over {} stepsizes",
        ETA_GRID.len()
    ))
}

fn check_preconditioned_products() -> Check {
    let p = scalar_problem();
    let starts = [(4.0, 1.0), (2.0, 2.0), (1.0, 4.0)];
    for eta in ETA_GRID {
        let scaled_form = 4.0 - 6.0 * eta + 2.25 * eta * eta;
        let balanced_form = (2.0 - 6.0 * eta) * (2.0 - 6.0 * eta);
        for (x0, y0) in starts {
            let mut s = ok(scalar_state(x0, y0))?;
            ok(OptimizerSpec::ScaledGd { eta, gram_floor: 0.0 }.step(&mut s, &p))?;
            let (x1, y1) = scalar_values(&s);
            ensure((x1 * y1 - scaled_form).abs() <= 1e-12, || {
                format!("scaled product from ({x0},{y0}) at eta={eta} is {}, wanted {scaled_form}", x1 * y1)
            })?;
            let mut s = ok(scalar_state(x0, y0))?;
            ok(OptimizerSpec::RefLora { eta, mode: RefloraMode::Full }.step(&mut s, &p))?;
            let (x1, y1) = scalar_values(&s);
            ensure((x1 * y1 - balanced_form).abs() <= 1e-12, || {
                format!("balanced product from ({x0},{y0}) at eta={eta} is {}, wanted {balanced_form}", x1 * y1)
            })?;
        }
    }
    let probe: f64 = 4.0 - 6.0 * 0.1 + 2.25 * 0.01;
    ensure((probe - 3.4225).abs() <= 1e-12, || format!("eta=0.1 scaled product is {probe}"))?;
    let probe: f64 = (2.0 - 0.6) * (2.0 - 0.6);
    ensure((probe - 1.96).abs() <= 1e-12, || format!("eta=0.1 balanced product is {probe}"))?;
    Ok("orbit products 4-6eta+(9/4)eta^2 (3.4225 at 0.1) and (2-6eta)^2 (1.96 at 0.1)".into())
}

/// Worst one-step product discrepancy across a random gauge, over the
/// given number of trials. A gauge-respecting update keeps this at
/// round-off; a gauge-sensitive one (plain factor descent, or a
/// preconditioned step with the Gram inverse dropped) does not.
pub fn worst_gauge_gap(
    opt: &OptimizerSpec,
    trials: usize,
    rng: &mut RandomSource,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let r = 1 + (t % 8);
        let x = rng.gaussian_matrix(9, r, 1.0);
        let y = rng.gaussian_matrix(8, r, 1.0);
        let q = well_conditioned_q(rng, r);
        let q_inv_t = invert_small(&q)?.transpose();
        let xq = x.matmul(&q);
        let yq = y.matmul(&q_inv_t);
        let p = synthetic_target(9, 8, 2, 2.0, rng)?;
        let stop = StopRule { max_iters: 1, loss_tol: 0.0 };
        let mut plain = RunState::new(AdapterSpec::Bm { x, y }, stop)?;
        let mut gauged = RunState::new(AdapterSpec::Bm { x: xq, y: yq }, stop)?;
        opt.step(&mut plain, &p)?;
        opt.step(&mut gauged, &p)?;
        let d = plain
            .adapter()
            .materialize()?
            .sub(&gauged.adapter().materialize()?)?;
        worst = worst.max(d.frob_norm());
    }
    Ok(worst)
}

/// Absolute gap between the one-step products started from (2,2) and
/// (1,4) on the scalar problem: zero for a gauge-respecting update,
/// macroscopic for plain factor descent.
pub fn scalar_gd_product_gap(eta: f64) -> Result<f64> {
    let p = scalar_problem();
    let mut a = scalar_state(2.0, 2.0)?;
    step_gd(&mut a, &p, eta)?;
    let mut b = scalar_state(1.0, 4.0)?;
    step_gd(&mut b, &p, eta)?;
    let (xa, ya) = scalar_values(&a);
    let (xb, yb) = scalar_values(&b);
    Ok((xa * ya - xb * yb).abs())
}

fn check_gauge_equivariance() -> Check {
    let mut rng = RandomSource::named(101, "verify-gauge");
    let scaled = ok(worst_gauge_gap(
        &OptimizerSpec::ScaledGd { eta: 0.2, gram_floor: 0.0 },
        100,
        &mut rng,
    ))?;
    ensure(scaled <= 1e-9, || format!("scaled-step gauge gap {scaled:e} above 1e-9"))?;
    let balanced = ok(worst_gauge_gap(
        &OptimizerSpec::RefLora { eta: 0.2, mode: RefloraMode::Full },
        100,
        &mut rng,
    ))?;
    ensure(balanced <= 1e-9, || format!("balanced-step gauge gap {balanced:e} above 1e-9"))?;
    let plain = ok(scalar_gd_product_gap(0.1))?;
    ensure(plain >= 1e-3, || {
        format!("plain-step orbit gap {plain:e} too small to witness gauge sensitivity")
    })?;
    Ok(format!(
        "scaled gap {scaled:.1e}, balanced gap {balanced:.1e} over 100 gauges; plain orbit gap {plain:.2}"
    ))
}

/// Worst normalized pairing between a balanced step and the vertical
/// directions (XU, -YU^T), over random trials. Horizontal steps keep this
/// at round-off.
pub fn worst_horizontality_gap(trials: usize, rng: &mut RandomSource) -> Result<f64> {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let r = 1 + (t % 4);
        let x = rng.gaussian_matrix(7, r, 1.0);
        let y = rng.gaussian_matrix(6, r, 1.0);
        let p = synthetic_target(7, 6, 2, 2.0, rng)?;
        let s = crate::optim::reflora_s(&x, &y, RefloraMode::Full)?;
        let s_inv = sym_pd_power(&s, -1.0)?;
        let mut state = RunState::new(
            AdapterSpec::Bm { x: x.clone(), y: y.clone() },
            StopRule { max_iters: 1, loss_tol: 0.0 },
        )?;
        crate::optim::step_reflora(&mut state, &p, 0.2, RefloraMode::Full)?;
        let AdapterSpec::Bm { x: x1, y: y1 } = state.adapter() else {
            unreachable!("factor-pair state")
        };
        let dx = x1.sub(&x);
        let dy = y1.sub(&y);
        let u = rng.gaussian_matrix(r, r, 1.0);
        let vert_x = x.matmul(&u);
        let vert_y = y.matmul(&u.transpose()).scale(-1.0);
        let pairing = vert_x.matmul(&s).frob_inner(&dx) + vert_y.matmul(&s_inv).frob_inner(&dy);
        let scale = dx.frob_norm().hypot(dy.frob_norm())
            * vert_x.frob_norm().hypot(vert_y.frob_norm());
        worst = worst.max(pairing.abs() / scale.max(1.0));
    }
    Ok(worst)
}

/// Worst normalized change of the preconditioned inner product under a
/// random gauge push-forward, over random trials. The metric is built
/// from the paired Grams, so the push-forward leaves it unchanged.
pub fn worst_metric_gap(trials: usize, rng: &mut RandomSource) -> Result<f64> {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let r = 1 + (t % 4);
        let x = rng.gaussian_matrix(7, r, 1.0);
        let y = rng.gaussian_matrix(6, r, 1.0);
        let q = well_conditioned_q(rng, r);
        let q_inv_t = invert_small(&q)?.transpose();
        let xq = x.matmul(&q);
        let yq = y.matmul(&q_inv_t);
        let xi = (rng.gaussian_matrix(7, r, 1.0), rng.gaussian_matrix(6, r, 1.0));
        let phi = (rng.gaussian_matrix(7, r, 1.0), rng.gaussian_matrix(6, r, 1.0));
        let pairing = |x: &DenseMatrix,
                       y: &DenseMatrix,
                       xi: (&DenseMatrix, &DenseMatrix),
                       phi: (&DenseMatrix, &DenseMatrix)| {
            xi.0.matmul(&y.gram()).frob_inner(phi.0) + xi.1.matmul(&x.gram()).frob_inner(phi.1)
        };
        let base = pairing(&x, &y, (&xi.0, &xi.1), (&phi.0, &phi.1));
        let pushed = pairing(
            &xq,
            &yq,
            (&xi.0.matmul(&q), &xi.1.matmul(&q_inv_t)),
            (&phi.0.matmul(&q), &phi.1.matmul(&q_inv_t)),
        );
        worst = worst.max((base - pushed).abs() / base.abs().max(1.0));
    }
    Ok(worst)
}

fn check_balanced_geometry() -> Check {
    let mut rng = RandomSource::named(102, "verify-geometry");
    let horiz = ok(worst_horizontality_gap(100, &mut rng))?;
    ensure(horiz <= 1e-9, || format!("horizontality pairing {horiz:e} above 1e-9"))?;
    let metric = ok(worst_metric_gap(100, &mut rng))?;
    ensure(metric <= 1e-9, || format!("metric drift {metric:e} above 1e-9"))?;
    Ok(format!("horizontality {horiz:.1e}, metric drift {metric:.1e} over 100 trials"))
}

fn check_parameter_budgets() -> Check {
    let bm = AdapterSpec::Bm { x: DenseMatrix::zeros(64, 8), y: DenseMatrix::zeros(32, 8) };
    ensure(bm.param_count() == 768, || format!("factor pair counts {}", bm.param_count()))?;
    let fp = AdapterSpec::FedPara {
        x1: DenseMatrix::zeros(64, 8),
        y1: DenseMatrix::zeros(32, 8),
        x2: DenseMatrix::zeros(64, 8),
        y2: DenseMatrix::zeros(32, 8),
    };
    ensure(fp.param_count() == 1536, || format!("doubled pair counts {}", fp.param_count()))?;
    let tt = AdapterSpec::Tt3 {
        g1: DenseMatrix::zeros(64, 4),
        g2: Tensor3::zeros(4, 64, 4),
        g3: DenseMatrix::zeros(4, 12),
    };
    ensure(tt.param_count() == 1328, || format!("tensor-train counts {}", tt.param_count()))?;
    Ok("768, 1536, and 1328 trainables for the three published shapes".into())
}

fn check_khatri_rao_identity() -> Check {
    let mut rng = RandomSource::named(103, "verify-krp");
    for trial in 0..30 {
        let spec = AdapterSpec::FedPara {
            x1: rng.gaussian_matrix(7, 2, 1.0),
            y1: rng.gaussian_matrix(5, 2, 1.0),
            x2: rng.gaussian_matrix(7, 2, 1.0),
            y2: rng.gaussian_matrix(5, 2, 1.0),
        };
        let AdapterSpec::FedPara { x1, y1, x2, y2 } = &spec else { unreachable!() };
        let direct = x1.matmul_nt(y1).hadamard(&x2.matmul_nt(y2));
        let krp = ok(materialize_fedpara_krp(&spec))?;
        let lib = dense_update(&spec)?;
        let scale = direct.max_abs().max(1.0);
        let gap = direct.sub(&krp).max_abs().max(direct.sub(&lib).max_abs());
        ensure(gap <= 1e-12 * scale, || format!("trial {trial}: route gap {gap:e}"))?;
    }
    Ok("hadamard of two pairs equals the column-merged single pair on 30 draws".into())
}

fn check_rank_laws() -> Check {
    let mut rng = RandomSource::named(104, "verify-rank");
    let gm = |rng: &mut RandomSource, rows: usize, cols: usize| rng.gaussian_matrix(rows, cols, 1.0);
    // Identity-masked update: off-diagonal entries vanish exactly.
    let diag_spec = AdapterSpec::Hira {
        w0: DenseMatrix::identity(2),
        x: gm(&mut rng, 2, 2),
        y: gm(&mut rng, 2, 2),
    };
    let masked = dense_update(&diag_spec)?;
    ensure(masked[(0, 1)] == 0.0 && masked[(1, 0)] == 0.0, || {
        "identity-base hadamard update is not diagonal".into()
    })?;

    for trial in 0..50 {
        let a = gm(&mut rng, 8, 2).matmul_nt(&gm(&mut rng, 4, 2));
        let b = gm(&mut rng, 8, 2).matmul_nt(&gm(&mut rng, 4, 2));
        let nr = ok(numerical_rank(&a.hadamard(&b), 1e-8))?;
        ensure(nr <= 4, || format!("trial {trial}: hadamard rank {nr} above 4"))?;

        let fp = AdapterSpec::FedPara {
            x1: gm(&mut rng, 9, 2),
            y1: gm(&mut rng, 7, 2),
            x2: gm(&mut rng, 9, 2),
            y2: gm(&mut rng, 7, 2),
        };
        let fp_rank = ok(numerical_rank(&dense_update(&fp)?, 1e-8))?;
        ensure(fp_rank <= 4, || format!("trial {trial}: doubled-pair rank {fp_rank} above 4"))?;

        let ka = gm(&mut rng, 4, 2).matmul_nt(&gm(&mut rng, 3, 2));
        let kb = gm(&mut rng, 3, 2).matmul_nt(&gm(&mut rng, 4, 2));
        let kron = AdapterSpec::Kron { a: ka.clone(), b: kb.clone() };
        let rk = ok(numerical_rank(&dense_update(&kron)?, 1e-8))?;
        let (ra, rb) = (ok(numerical_rank(&ka, 1e-8))?, ok(numerical_rank(&kb, 1e-8))?);
        ensure(rk == ra * rb, || format!("trial {trial}: kron rank {rk} != {ra} * {rb}"))?;

        let hira = AdapterSpec::Hira {
            w0: gm(&mut rng, 8, 2).matmul_nt(&gm(&mut rng, 6, 2)),
            x: gm(&mut rng, 8, 2),
            y: gm(&mut rng, 6, 2),
        };
        let hr = ok(numerical_rank(&dense_update(&hira)?, 1e-8))?;
        ensure(hr <= 4, || format!("trial {trial}: masked-update rank {hr} above 4"))?;

        let s = 3usize;
        let mask = rng.sparse_mask(9, 9, s);
        let values: Vec<f64> = (0..s).map(|_| rng.next_gaussian()).collect();
        let lrs = AdapterSpec::LowRankSparse { x: gm(&mut rng, 9, 2), y: gm(&mut rng, 9, 2), mask, values };
        let lr = ok(numerical_rank(&dense_update(&lrs)?, 1e-8))?;
        ensure(lr <= 2 + s, || format!("trial {trial}: spiked rank {lr} above {}", 2 + s))?;
    }

    let n = 100usize;
    let p = 4.0 * (n as f64).ln() / n as f64;
    let mut full = 0usize;
    for _ in 0..100 {
        let mut mat = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if rng.bernoulli(p) {
                    mat[(i, j)] = rng.next_gaussian();
                }
            }
        }
        if ok(numerical_rank(&mat, 1e-8))? == n {
            full += 1;
        }
    }
    ensure(full >= 95, || format!("sparse draws full-rank in only {full}/100 trials"))?;
    Ok(format!(
        "four rank bounds over 50 draws each, diagonal identity-base case, sparse full rank {full}/100"
    ))
}

fn check_zero_start_init() -> Check {
    let mut rng = RandomSource::named(105, "verify-init");
    let p = ok(synthetic_target(8, 6, 3, 4.0, &mut rng))?;
    let spec = InitSpec::LoraDefault { scale: InitSpec::default_lora_scale(8) };
    let a = ok(init(&spec, &p, (8, 6, 3), &mut rng))?;
    let AdapterSpec::Bm { y, .. } = &a else {
        return Err("zero-start init did not produce a factor pair".into());
    };
    ensure(y.is_zero(), || "second factor is not exactly zero at init".into())?;
    let at_init = ok(p.loss(&a))?;
    let at_zero = ok(p.loss(&AdapterSpec::Bm {
        x: DenseMatrix::zeros(8, 3),
        y: DenseMatrix::zeros(6, 3),
    }))?;
    ensure(at_init == at_zero, || {
        format!("loss at init {at_init} differs from the zero-update loss {at_zero}")
    })?;
    Ok("second factor starts at exact zero; init loss equals the zero-update loss bitwise".into())
}

fn check_serving_equivalence() -> Check {
    let mut rng = RandomSource::named(106, "verify-serving");
    let (m, n, r) = (24, 16, 4);
    let w = rng.gaussian_matrix(m, n, 1.0);
    for k in [1usize, 2, 8, 64] {
        let z = rng.gaussian_matrix(k, m, 1.0);
        let factors: Vec<(DenseMatrix, DenseMatrix)> = (0..k)
            .map(|_| (rng.gaussian_matrix(m, r, 1.0), rng.gaussian_matrix(n, r, 1.0)))
            .collect();
        let batch = ok(BatchRequest::new(z, factors))?;
        let mut fast_ops = OpCounter::new();
        let fast = ok(fastlora_forward_counted(&w, &batch, &mut fast_ops))?;
        let mut naive_ops = OpCounter::new();
        let naive = ok(naive_forward_counted(&w, &batch, &mut naive_ops))?;
        let gap = fast.sub(&naive).max_abs();
        ensure(gap <= 1e-10 * naive.max_abs().max(1.0), || {
            format!("K={k}: batched and per-user outputs differ by {gap:e}")
        })?;
        ensure(fast_ops.flops() == fast_flops_model(k, m, n, r), || {
            format!("K={k}: batched counter {} off the model", fast_ops.flops())
        })?;
        ensure(naive_ops.flops() == naive_flops_model(k, m, n, r), || {
            format!("K={k}: per-user counter {} off the model", naive_ops.flops())
        })?;
    }
    Ok("batched path matches per-user evaluation at K = 1, 2, 8, 64; counters equal the cost model".into())
}

fn check_quantized_refit() -> Check {
    let mut rng = RandomSource::named(107, "verify-quant");
    let r = 3usize;
    for trial in 0..5 {
        let w = rng.gaussian_matrix(16, 12, 1.0);
        let q = ok(UniformQuantizer::from_absmax(4, &w))?;
        for sweeps in 1..=4usize {
            let (quantized, x, y) = ok(loftq_alternating(&w, r, &q, sweeps))?;
            let residual = w.sub(&quantized);
            let sv = singular_values(&residual);
            let tail: f64 = sv.iter().skip(r).map(|s| s * s).sum();
            let refit = residual.sub(&x.matmul_nt(&y)).frob_norm_sq();
            ensure((refit - tail).abs() <= 1e-10 * tail.max(1.0), || {
                format!("trial {trial}, sweep {sweeps}: refit error {refit:e} vs tail mass {tail:e}")
            })?;
        }
    }
    Ok("refit error equals the tail spectral mass after every sweep (4-bit, rank 3, 5 draws)".into())
}

fn check_gradient_check() -> Check {
    let mut rng = RandomSource::named(108, "verify-grad");
    let mut worst = 0.0f64;
    let mut variants = 0usize;
    for draw in 0..5 {
        let specs = sample_specs(&mut rng);
        if draw == 0 {
            variants = specs.len();
        }
        for (name, spec) in specs {
            // Variant outputs differ in shape, so each gets its own pair
            // of objectives at matching dimensions.
            let (m, n, _) = spec.output_dims();
            let target = rng.gaussian_matrix(m, n, 1.0);
            let fact = Problem::Factorization(
                ok(FactorizationProblem::from_target(target))?,
            );
            let ops: Vec<DenseMatrix> = (0..7).map(|_| rng.gaussian_matrix(m, n, 0.5)).collect();
            let y: Vec<f64> = (0..7).map(|_| rng.next_gaussian()).collect();
            let sens = Problem::Sensing(ok(SensingProblem::new(ops, y, None))?);
            for problem in [&fact, &sens] {
                let analytic = ok(problem.grad_factors(&spec))?;
                let fd = ok(problem.fd_grad_oracle(&spec, 1e-6))?;
                for (a, f) in analytic.iter().zip(&fd) {
                    for (ai, fi) in a.iter().zip(f) {
                        let err = (ai - fi).abs() / ai.abs().max(1.0);
                        worst = worst.max(err);
                        ensure(err <= 1e-5, || {
                            format!("variant {name}, draw {draw}: gradient defect {err:e}")
                        })?;
                    }
                }
            }
        }
    }
    Ok(format!(
        "worst relative defect {worst:.1e} across {variants} variants x 2 objectives x 5 draws"
    ))
}

fn check_run_determinism() -> Check {
    let text = r#"
init = "nystrom"
optimizer = "gd"
seed = 7

[problem]
kind = "factorization"
m = 6
n = 5
r_a = 2
kappa = 2.0

[adapter]
variant = "bm"
rank = 2

[stop]
max_iters = 50
loss_tol = 1e-8
"#;
    let cfg = ok(parse_config(text))?;
    let first = ok(execute(&cfg))?;
    let second = ok(execute(&cfg))?;
    let a = stable_body(&first.to_csv());
    let b = stable_body(&second.to_csv());
    ensure(a == b, || "repeated executions disagree outside the wall-time column".into())?;
    let rows = first.trace.rows.len();
    ensure(rows > 1, || format!("expected a multi-row trace, got {rows} rows"))?;
    Ok(format!("two executions share a byte-identical stable body ({rows} rows)"))
}
