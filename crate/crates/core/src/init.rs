//! Adapter initialization schemes and the alternating quantize-refit routine.
//!
//! Every scheme returns a ready-to-optimize rank-`r` factor pair
//! ([`AdapterSpec::Bm`]). Subspace-aligned schemes read the problem's proxy
//! matrix: the factorization target, or for sensing the negative gradient of
//! the loss at the zero update.

use crate::adapter::AdapterSpec;
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::problems::Problem;
use crate::rng::RandomSource;
use crate::spectral::{qr_thin, svd_bottom, svd_truncated};

/// Initialization scheme selector.
///
/// `LoraDefault` draws X from N(0, scale^2) and zeroes Y, so the effective
/// weight starts exactly at the pre-trained point. `Nystrom` sketches the
/// proxy's column space (X = A * Phi, Y = 0); `NystromAlt` additionally draws
/// a Gaussian Y. The spectral and QR schemes copy top or bottom proxy
/// directions. `GradientSpectral` applies the top-direction scheme to the
/// negative gradient at the zero update. `LoftQ` quantizes pre-trained
/// weights and returns the low-rank correction of the quantization error.
#[derive(Debug, Clone, PartialEq)]
pub enum InitSpec {
    LoraDefault { scale: f64 },
    GaussianSmall { sigma_x: f64, sigma_y: f64 },
    Nystrom,
    NystromAlt,
    SpectralTop,
    SpectralBottom,
    QrTop,
    GradientSpectral,
    LoftQ { bits: u32, sweeps: usize },
}

impl InitSpec {
    /// Fan-in scale for the default scheme: variance 1/m, so sigma = 1/sqrt(m).
    pub fn default_lora_scale(m: usize) -> f64 {
        1.0 / (m as f64).sqrt()
    }

    /// Small-constant sigma used when the config gives none.
    pub const DEFAULT_SMALL_SIGMA: f64 = 1e-3;

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| -> Result<()> {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be finite and > 0, got {v}")));
            }
            Ok(())
        };
        match self {
            InitSpec::LoraDefault { scale } => positive("scale", *scale),
            InitSpec::GaussianSmall { sigma_x, sigma_y } => {
                positive("sigma_x", *sigma_x)?;
                positive("sigma_y", *sigma_y)
            }
            InitSpec::LoftQ { bits, sweeps } => {
                if !(2..=16).contains(bits) {
                    return Err(Error::Domain(format!("bits must be in 2..=16, got {bits}")));
                }
                if *sweeps == 0 {
                    return Err(Error::Domain("sweeps must be at least 1".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Name as it appears in config files.
    pub fn name(&self) -> &'static str {
        match self {
            InitSpec::LoraDefault { .. } => "lora_default",
            InitSpec::GaussianSmall { .. } => "gaussian_small",
            InitSpec::Nystrom => "nystrom",
            InitSpec::NystromAlt => "nystrom_alt",
            InitSpec::SpectralTop => "spectral_top",
            InitSpec::SpectralBottom => "spectral_bottom",
            InitSpec::QrTop => "qr_top",
            InitSpec::GradientSpectral => "gradient_spectral",
            InitSpec::LoftQ { .. } => "loftq",
        }
    }
}

/// Build the initial factor pair for an m x n adapter of rank r.
///
/// Sketch matrices use entry variance 1/n so the sketch preserves the proxy's
/// column scale. Subspace schemes split singular values evenly across the two
/// factors, X = U_r sqrt(S_r) and Y = V_r sqrt(S_r), keeping the pair
/// balanced at the start.
pub fn init(
    spec: &InitSpec,
    problem: &Problem,
    shape: (usize, usize, usize),
    rng: &mut RandomSource,
) -> Result<AdapterSpec> {
    spec.validate()?;
    let (m, n, r) = shape;
    if m == 0 || n == 0 || r == 0 {
        return Err(Error::Shape(format!("degenerate adapter shape {m}x{n} rank {r}")));
    }
    if r > m.min(n) {
        return Err(Error::Shape(format!("rank {r} exceeds min({m}, {n})")));
    }
    if problem.dims() != (m, n) {
        let (pm, pn) = problem.dims();
        return Err(Error::Shape(format!("problem is {pm}x{pn}, adapter shape says {m}x{n}")));
    }
    let sketch_sigma = 1.0 / (n as f64).sqrt();
    let (x, y) = match spec {
        InitSpec::LoraDefault { scale } => {
            (rng.gaussian_matrix(m, r, *scale), DenseMatrix::zeros(n, r))
        }
        InitSpec::GaussianSmall { sigma_x, sigma_y } => {
            (rng.gaussian_matrix(m, r, *sigma_x), rng.gaussian_matrix(n, r, *sigma_y))
        }
        InitSpec::Nystrom => {
            let phi = rng.gaussian_matrix(n, r, sketch_sigma);
            (problem.init_proxy()?.matmul(&phi), DenseMatrix::zeros(n, r))
        }
        InitSpec::NystromAlt => {
            let phi = rng.gaussian_matrix(n, r, sketch_sigma);
            let psi = rng.gaussian_matrix(n, r, sketch_sigma);
            (problem.init_proxy()?.matmul(&phi), psi)
        }
        InitSpec::SpectralTop => balanced_factors(svd_truncated(&problem.init_proxy()?, r)?),
        InitSpec::SpectralBottom => balanced_factors(svd_bottom(&problem.init_proxy()?, r)?),
        InitSpec::QrTop => {
            let (q, rm) = qr_thin(&problem.init_proxy()?)?;
            (q.col_range(0, r), rm.transpose().col_range(0, r))
        }
        InitSpec::GradientSpectral => {
            balanced_factors(svd_truncated(&negative_gradient_at_zero(problem)?, r)?)
        }
        InitSpec::LoftQ { bits, sweeps } => {
            let w = pretrained_weight(problem)?;
            let q = UniformQuantizer::from_absmax(*bits, &w)?;
            let (_, x, y) = loftq_alternating(&w, r, &q, *sweeps)?;
            (x, y)
        }
    };
    let spec = AdapterSpec::Bm { x, y };
    spec.validate()?;
    Ok(spec)
}

/// Negative gradient of the loss at the zero update, pulled back to matrix
/// space. Equals the factorization target, or sum_i (y_i - <M_i, W_pre>) M_i
/// for sensing.
fn negative_gradient_at_zero(problem: &Problem) -> Result<DenseMatrix> {
    let (m, n) = problem.dims();
    let zero = crate::adapter::Materialized::Matrix(DenseMatrix::zeros(m, n));
    let g = problem.output_gradient(&zero)?;
    Ok(g.as_matrix()?.scale(-1.0))
}

fn pretrained_weight(problem: &Problem) -> Result<DenseMatrix> {
    match problem {
        Problem::Sensing(p) if p.w_pre().is_some() => Ok(p.w_pre().unwrap().clone()),
        _ => Err(Error::Config(
            "loftq initialization needs a sensing problem with pretrained weights".into(),
        )),
    }
}

fn balanced_factors(svd: (DenseMatrix, Vec<f64>, DenseMatrix)) -> (DenseMatrix, DenseMatrix) {
    let (u, sigma, v) = svd;
    let mut x = u;
    let mut y = v;
    for (j, s) in sigma.iter().enumerate() {
        let c = s.max(0.0).sqrt();
        for i in 0..x.rows() {
            x[(i, j)] *= c;
        }
        for i in 0..y.rows() {
            y[(i, j)] *= c;
        }
    }
    (x, y)
}

/// Symmetric per-matrix uniform quantizer. The representable levels are
/// k * scale for integer k in [-(2^(bits-1) - 1), 2^(bits-1) - 1]; with the
/// absmax-derived scale every entry of the reference matrix round-trips to
/// within half a step.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformQuantizer {
    bits: u32,
    scale: f64,
}

impl UniformQuantizer {
    pub fn new(bits: u32, scale: f64) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::Domain(format!("bits must be in 2..=16, got {bits}")));
        }
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::Domain(format!("scale must be finite and >= 0, got {scale}")));
        }
        Ok(Self { bits, scale })
    }

    /// Derive the scale from the largest entry magnitude of `w`.
    pub fn from_absmax(bits: u32, w: &DenseMatrix) -> Result<Self> {
        let max_level = (1u32 << (bits - 1)) - 1;
        Self::new(bits, w.max_abs() / max_level as f64)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Width of one quantization step.
    pub fn step(&self) -> f64 {
        self.scale
    }

    /// Round every entry to the nearest representable level, returned in
    /// dequantized (real-valued) form. Entries beyond the range clamp to the
    /// extreme levels.
    pub fn quantize(&self, w: &DenseMatrix) -> DenseMatrix {
        if self.scale == 0.0 {
            return DenseMatrix::zeros(w.rows(), w.cols());
        }
        let max_level = ((1u32 << (self.bits - 1)) - 1) as f64;
        w.map(|v| (v / self.scale).round().clamp(-max_level, max_level) * self.scale)
    }
}

/// Alternating quantize-refit: quantize the current correction residual, then
/// refit the rank-`r` factors to the new quantization error by truncated SVD.
/// Returns the final quantized weight and factor pair from the same sweep.
pub fn loftq_alternating(
    w: &DenseMatrix,
    r: usize,
    q: &UniformQuantizer,
    sweeps: usize,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
    if sweeps == 0 {
        return Err(Error::Domain("sweeps must be at least 1".into()));
    }
    let k = w.rows().min(w.cols());
    if r == 0 || r > k {
        return Err(Error::Shape(format!("refit rank {r} outside 1..={k}")));
    }
    let mut x = DenseMatrix::zeros(w.rows(), r);
    let mut y = DenseMatrix::zeros(w.cols(), r);
    let mut quantized = q.quantize(w);
    for _ in 0..sweeps {
        quantized = q.quantize(&w.sub(&x.matmul_nt(&y)));
        let residual = w.sub(&quantized);
        let (x_t, y_t) = balanced_factors(svd_truncated(&residual, r)?);
        x = x_t;
        y = y_t;
    }
    Ok((quantized, x, y))
}
