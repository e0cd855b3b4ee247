//! Training testbeds: matrix factorization against a synthetic target and
//! linear matrix sensing, each exposing loss, analytic gradients, and a
//! finite-difference oracle.
//!
//! Losses consume the materialized adapter output. Stack outputs broadcast:
//! every layer is scored against the same target or measurement vector, so
//! tensor variants plug into the identical gradient-check machinery.

use crate::adapter::{AdapterSpec, Materialized};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::RandomSource;
use crate::spectral::{condition_number_r, numerical_rank, random_orthonormal, TOL};

/// Spacing of the synthetic singular-value profile between kappa and 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaProfile {
    Linear,
    Log,
}

/// Knobs for generating synthetic instances of either problem.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub m: usize,
    pub n: usize,
    pub r_a: usize,
    pub kappa: f64,
    pub measurements: usize,
    pub noise_sigma: f64,
    pub profile: SigmaProfile,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::Shape("target dimensions must be positive".into()));
        }
        if self.r_a == 0 || self.r_a > self.m.min(self.n) {
            return Err(Error::Shape(format!(
                "target rank {} outside 1..={}",
                self.r_a,
                self.m.min(self.n)
            )));
        }
        if !(self.kappa >= 1.0) {
            return Err(Error::Domain(format!("kappa {} must be >= 1", self.kappa)));
        }
        if self.r_a == 1 && self.kappa != 1.0 {
            return Err(Error::Domain(
                "a rank-1 target has condition number 1 by definition".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Domain("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Singular values from kappa down to 1, length r_a.
    pub fn sigma_values(&self) -> Vec<f64> {
        if self.r_a == 1 {
            return vec![self.kappa];
        }
        let steps = (self.r_a - 1) as f64;
        (0..self.r_a)
            .map(|s| {
                let t = s as f64 / steps;
                match self.profile {
                    SigmaProfile::Linear => self.kappa - (self.kappa - 1.0) * t,
                    SigmaProfile::Log => self.kappa.powf(1.0 - t),
                }
            })
            .collect()
    }
}

/// Fit a rank-r_A target with known condition number.
#[derive(Debug, Clone)]
pub struct FactorizationProblem {
    target: DenseMatrix,
    r_a: usize,
    kappa: f64,
}

impl FactorizationProblem {
    /// Accepts a target after verifying the declared rank and condition
    /// number against its spectrum.
    pub fn new(target: DenseMatrix, r_a: usize, kappa: f64) -> Result<Self> {
        let rank = numerical_rank(&target, TOL.rank_tol)?;
        if rank != r_a {
            return Err(Error::Rank(format!(
                "target has numerical rank {rank}, declared {r_a}"
            )));
        }
        let cond = condition_number_r(&target, r_a)?;
        if (cond - kappa).abs() > 1e-6 {
            return Err(Error::Domain(format!(
                "target condition number {cond} differs from declared {kappa}"
            )));
        }
        Ok(Self { target, r_a, kappa })
    }

    /// Measures rank and condition number from the matrix itself.
    pub fn from_target(target: DenseMatrix) -> Result<Self> {
        let r_a = numerical_rank(&target, TOL.rank_tol)?;
        if r_a == 0 {
            return Err(Error::Domain("the zero target admits no factorization problem".into()));
        }
        let kappa = condition_number_r(&target, r_a)?;
        Ok(Self { target, r_a, kappa })
    }

    pub fn target(&self) -> &DenseMatrix {
        &self.target
    }

    pub fn r_a(&self) -> usize {
        self.r_a
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }
}

/// Fit linear measurements y_i = Tr(M_i^T W).
#[derive(Debug, Clone)]
pub struct SensingProblem {
    operators: Vec<DenseMatrix>,
    y: Vec<f64>,
    w_pre: Option<DenseMatrix>,
}

impl SensingProblem {
    pub fn new(
        operators: Vec<DenseMatrix>,
        y: Vec<f64>,
        w_pre: Option<DenseMatrix>,
    ) -> Result<Self> {
        if operators.is_empty() {
            return Err(Error::Shape("at least one measurement operator required".into()));
        }
        let dims = operators[0].dims();
        if operators.iter().any(|op| op.dims() != dims) {
            return Err(Error::Shape("measurement operators must share dimensions".into()));
        }
        if y.len() != operators.len() {
            return Err(Error::Shape(format!(
                "{} measurements for {} operators",
                y.len(),
                operators.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite measurement".into()));
        }
        if let Some(w) = &w_pre {
            if w.dims() != dims {
                return Err(Error::Shape(format!(
                    "pre-trained weight is {:?}, operators are {:?}",
                    w.dims(),
                    dims
                )));
            }
        }
        Ok(Self { operators, y, w_pre })
    }

    pub fn operators(&self) -> &[DenseMatrix] {
        &self.operators
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn w_pre(&self) -> Option<&DenseMatrix> {
        self.w_pre.as_ref()
    }

    /// Folds the pre-trained weight into the measurements: y shifts by
    /// -m(W_pre) and the stored weight is cleared. Loss values at any
    /// update are unchanged by linearity.
    pub fn shift_pretrained(mut self) -> Result<Self> {
        let Some(w) = self.w_pre.take() else {
            return Err(Error::Domain("no pre-trained weight to shift".into()));
        };
        let shift = apply_sensing(&self.operators, &w)?;
        for (yi, si) in self.y.iter_mut().zip(&shift) {
            *yi -= si;
        }
        Ok(self)
    }
}

/// [Tr(M_i^T W)]_i.
pub fn apply_sensing(operators: &[DenseMatrix], w: &DenseMatrix) -> Result<Vec<f64>> {
    if let Some(op) = operators.iter().find(|op| op.dims() != w.dims()) {
        return Err(Error::Shape(format!(
            "operator is {:?}, weight is {:?}",
            op.dims(),
            w.dims()
        )));
    }
    Ok(operators.iter().map(|op| op.frob_inner(w)).collect())
}

/// Either testbed behind one loss/gradient interface.
#[derive(Debug, Clone)]
pub enum Problem {
    Factorization(FactorizationProblem),
    Sensing(SensingProblem),
}

impl Problem {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Problem::Factorization(p) => p.target.dims(),
            Problem::Sensing(p) => p.operators[0].dims(),
        }
    }

    fn check_dims(&self, out: &Materialized) -> Result<()> {
        let (m, n, _) = out.dims();
        if (m, n) != self.dims() {
            return Err(Error::Shape(format!(
                "adapter output is {m} x {n}, problem is {} x {}",
                self.dims().0,
                self.dims().1
            )));
        }
        Ok(())
    }

    /// Loss of a materialized output; stacks broadcast layer by layer.
    pub fn loss_of(&self, out: &Materialized) -> Result<f64> {
        self.check_dims(out)?;
        let layers = layer_views(out);
        let mut acc = 0.0;
        for layer in &layers {
            match self {
                Problem::Factorization(p) => {
                    acc += 0.5 * layer.sub(&p.target).frob_norm_sq();
                }
                Problem::Sensing(p) => {
                    let preds = self.predictions(p, layer)?;
                    acc += 0.5
                        * p.y
                            .iter()
                            .zip(&preds)
                            .map(|(yi, pi)| (yi - pi) * (yi - pi))
                            .sum::<f64>();
                }
            }
        }
        Ok(acc)
    }

    fn predictions(&self, p: &SensingProblem, update: &DenseMatrix) -> Result<Vec<f64>> {
        let w = match &p.w_pre {
            Some(base) => base.add(update),
            None => update.clone(),
        };
        apply_sensing(&p.operators, &w)
    }

    pub fn loss(&self, spec: &AdapterSpec) -> Result<f64> {
        self.loss_of(&spec.materialize()?)
    }

    /// Gradient of the loss with respect to the materialized output.
    pub fn output_gradient(&self, out: &Materialized) -> Result<Materialized> {
        self.check_dims(out)?;
        let grads: Result<Vec<DenseMatrix>> = layer_views(out)
            .iter()
            .map(|layer| match self {
                Problem::Factorization(p) => Ok(layer.sub(&p.target)),
                Problem::Sensing(p) => {
                    let preds = self.predictions(p, layer)?;
                    let mut g = DenseMatrix::zeros(layer.rows(), layer.cols());
                    for (op, (pi, yi)) in p.operators.iter().zip(preds.iter().zip(&p.y)) {
                        g.axpy(pi - yi, op);
                    }
                    Ok(g)
                }
            })
            .collect();
        let grads = grads?;
        Ok(match out {
            Materialized::Matrix(_) => Materialized::Matrix(grads.into_iter().next().expect("one layer")),
            Materialized::Stack(_) => {
                Materialized::Stack(crate::matrix::Tensor3::from_slices(&grads)?)
            }
        })
    }

    /// Analytic gradients for every trainable block of the spec.
    pub fn grad_factors(&self, spec: &AdapterSpec) -> Result<Vec<Vec<f64>>> {
        let out = spec.materialize()?;
        spec.vjp(&self.output_gradient(&out)?)
    }

    /// Central-difference gradients, entry by entry.
    pub fn fd_grad_oracle(&self, spec: &AdapterSpec, h: f64) -> Result<Vec<Vec<f64>>> {
        if !(h > 0.0) {
            return Err(Error::Domain("finite-difference step must be positive".into()));
        }
        let mut probe = spec.clone();
        let shapes: Vec<usize> = probe.trainable().iter().map(|b| b.len()).collect();
        let mut grads: Vec<Vec<f64>> = shapes.iter().map(|&len| vec![0.0; len]).collect();
        for (block, &len) in shapes.iter().enumerate() {
            for idx in 0..len {
                let base = probe.trainable()[block][idx];
                probe.trainable_mut()[block][idx] = base + h;
                let up = self.loss(&probe)?;
                probe.trainable_mut()[block][idx] = base - h;
                let down = self.loss(&probe)?;
                probe.trainable_mut()[block][idx] = base;
                grads[block][idx] = (up - down) / (2.0 * h);
            }
        }
        Ok(grads)
    }

    /// Proxy matrix for subspace-aligned initialization: the factorization
    /// target, or for sensing the negative loss gradient at zero update.
    pub fn init_proxy(&self) -> Result<DenseMatrix> {
        match self {
            Problem::Factorization(p) => Ok(p.target.clone()),
            Problem::Sensing(p) => {
                let (m, n) = p.operators[0].dims();
                let zero = Materialized::Matrix(DenseMatrix::zeros(m, n));
                match self.output_gradient(&zero)? {
                    Materialized::Matrix(g) => Ok(g.scale(-1.0)),
                    Materialized::Stack(_) => unreachable!("matrix input gives matrix gradient"),
                }
            }
        }
    }
}

fn layer_views(out: &Materialized) -> Vec<DenseMatrix> {
    match out {
        Materialized::Matrix(m) => vec![m.clone()],
        Materialized::Stack(t) => (0..t.layers()).map(|l| t.slice(l)).collect(),
    }
}

/// A = U0 D V0^T with orthonormal draws and the spec's spectrum.
pub fn make_synthetic_target(
    spec: &SyntheticSpec,
    rng: &mut RandomSource,
) -> Result<FactorizationProblem> {
    spec.validate()?;
    let u0 = random_orthonormal(rng, spec.m, spec.r_a);
    let v0 = random_orthonormal(rng, spec.n, spec.r_a);
    let d = spec.sigma_values();
    let scaled = DenseMatrix::from_fn(spec.m, spec.r_a, |i, s| u0[(i, s)] * d[s]);
    FactorizationProblem::new(scaled.matmul_nt(&v0), spec.r_a, spec.kappa)
}

/// Measurement ensemble with entry variance 1/N, ground-truth update of
/// the spec's rank and spectrum, and optional additive Gaussian noise on y.
/// Returns the problem together with the generating update.
pub fn make_synthetic_sensing(
    spec: &SyntheticSpec,
    rng: &mut RandomSource,
    w_pre: Option<DenseMatrix>,
) -> Result<(SensingProblem, DenseMatrix)> {
    spec.validate()?;
    if spec.measurements == 0 {
        return Err(Error::Shape("at least one measurement required".into()));
    }
    let scale = 1.0 / (spec.measurements as f64).sqrt();
    let operators: Vec<DenseMatrix> = (0..spec.measurements)
        .map(|_| rng.gaussian_matrix(spec.m, spec.n, scale))
        .collect();
    let u0 = random_orthonormal(rng, spec.m, spec.r_a);
    let v0 = random_orthonormal(rng, spec.n, spec.r_a);
    let d = spec.sigma_values();
    let scaled = DenseMatrix::from_fn(spec.m, spec.r_a, |i, s| u0[(i, s)] * d[s]);
    let delta_w = scaled.matmul_nt(&v0);
    let measured = match &w_pre {
        Some(base) => base.add(&delta_w),
        None => delta_w.clone(),
    };
    let mut y = apply_sensing(&operators, &measured)?;
    if spec.noise_sigma > 0.0 {
        for yi in &mut y {
            *yi += spec.noise_sigma * rng.next_gaussian();
        }
    }
    Ok((SensingProblem::new(operators, y, w_pre)?, delta_w))
}
