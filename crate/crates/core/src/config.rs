//! Experiment configuration: schema, parsing, defaults, compatibility.
//!
//! Configs are TOML documents with a JSON-compatible shape. The `init` and
//! `optimizer` fields accept either a bare name ("nystrom") or a table with
//! a `kind` key plus that kind's parameters; everything else is a table.
//! Parsing resolves every default, so a resolved config serializes to a
//! canonical full form that round-trips through the parser unchanged.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::InitSpec;
use crate::optim::{OptimizerSpec, RefloraMode, StopRule};
use crate::problems::{SigmaProfile, SyntheticSpec};

/// Which testbed a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Factorization,
    Sensing,
}

impl ProblemKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemKind::Factorization => "factorization",
            ProblemKind::Sensing => "sensing",
        }
    }
}

/// Adapter family a run can drive; the optimizers cover these two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunAdapter {
    Bm,
    SvdType,
}

impl RunAdapter {
    pub fn name(&self) -> &'static str {
        match self {
            RunAdapter::Bm => "bm",
            RunAdapter::SvdType => "svd_type",
        }
    }
}

/// A fully resolved experiment: every default filled and every cross-field
/// rule already checked.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub kind: ProblemKind,
    pub synthetic: SyntheticSpec,
    pub adapter: RunAdapter,
    pub rank: usize,
    pub init: InitSpec,
    pub optimizer: OptimizerSpec,
    pub stop: StopRule,
    pub seed: u64,
    pub output: PathBuf,
}

const DEFAULT_OUTPUT: &str = "run.csv";
const DEFAULT_MAX_ITERS: usize = 1000;
const DEFAULT_LOSS_TOL: f64 = 1e-8;
const DEFAULT_RATE_RATIO: f64 = 16.0;
const DEFAULT_PRECONDITIONED_ETA: f64 = 0.25;
const DEFAULT_MAGNITUDE_ETA: f64 = 0.1;

fn config_err(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{path}: {msg}"))
}

// ---------------------------------------------------------------------------
// Raw serde-facing schema. Unknown keys are rejected everywhere.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output: Option<String>,
    problem: RawProblem,
    adapter: RawAdapter,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    init: Option<RawInit>,
    optimizer: RawOptimizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stop: Option<RawStop>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    kind: String,
    m: usize,
    n: usize,
    r_a: usize,
    kappa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    measurements: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    profile: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAdapter {
    variant: String,
    rank: usize,
    // Optional dimension echo; must agree with the problem when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
enum RawInit {
    Name(String),
    Table(RawInitTable),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitTable {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bits: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sweeps: Option<usize>,
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
enum RawOptimizer {
    Name(String),
    Table(RawOptimizerTable),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizerTable {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eta_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eta_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rate_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gram_floor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eta_dir: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma_mag: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda_land: Option<f64>,
}

// Bare-name-or-table fields deserialize through a Value so a malformed
// table keeps its own error message instead of an unhelpful "no variant
// matched".
macro_rules! name_or_table {
    ($raw:ident, $table:ident) => {
        impl<'de> Deserialize<'de> for $raw {
            fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
            where
                D: serde::Deserializer<'de>,
            {
                let value = toml::Value::deserialize(deserializer)?;
                match value {
                    toml::Value::String(name) => Ok($raw::Name(name)),
                    other => $table::deserialize(other)
                        .map($raw::Table)
                        .map_err(serde::de::Error::custom),
                }
            }
        }
    };
}

name_or_table!(RawInit, RawInitTable);
name_or_table!(RawOptimizer, RawOptimizerTable);

// ---------------------------------------------------------------------------
// Resolution: raw -> ExperimentConfig with defaults and validation.
// ---------------------------------------------------------------------------

/// Parses a TOML config, fills defaults, and validates cross-field rules.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))?;
    resolve(raw)
}

fn resolve(raw: RawConfig) -> Result<ExperimentConfig> {
    let kind = match raw.problem.kind.as_str() {
        "factorization" => ProblemKind::Factorization,
        "sensing" => ProblemKind::Sensing,
        other => {
            return Err(config_err(
                "problem.kind",
                format!("unknown value `{other}`, expected `factorization` or `sensing`"),
            ))
        }
    };
    let profile = match raw.problem.profile.as_deref() {
        None | Some("linear") => SigmaProfile::Linear,
        Some("log") => SigmaProfile::Log,
        Some(other) => {
            return Err(config_err(
                "problem.profile",
                format!("unknown value `{other}`, expected `linear` or `log`"),
            ))
        }
    };
    let measurements = raw.problem.measurements.unwrap_or(0);
    if kind == ProblemKind::Sensing && measurements == 0 {
        return Err(config_err(
            "problem.measurements",
            "sensing needs at least one measurement",
        ));
    }
    if kind == ProblemKind::Factorization && measurements != 0 {
        return Err(config_err(
            "problem.measurements",
            "factorization takes no measurements",
        ));
    }
    let synthetic = SyntheticSpec {
        m: raw.problem.m,
        n: raw.problem.n,
        r_a: raw.problem.r_a,
        kappa: raw.problem.kappa,
        measurements,
        noise_sigma: raw.problem.noise_sigma.unwrap_or(0.0),
        profile,
    };
    synthetic.validate().map_err(|e| config_err("problem", e))?;

    let adapter = match raw.adapter.variant.as_str() {
        "bm" => RunAdapter::Bm,
        "svd_type" => RunAdapter::SvdType,
        other => {
            return Err(config_err(
                "adapter.variant",
                format!("unknown value `{other}`, expected `bm` or `svd_type`"),
            ))
        }
    };
    if let Some(m) = raw.adapter.m {
        if m != synthetic.m {
            return Err(config_err(
                "adapter.m",
                format!("{} disagrees with problem.m = {}", m, synthetic.m),
            ));
        }
    }
    if let Some(n) = raw.adapter.n {
        if n != synthetic.n {
            return Err(config_err(
                "adapter.n",
                format!("{} disagrees with problem.n = {}", n, synthetic.n),
            ));
        }
    }
    let rank = raw.adapter.rank;
    if rank == 0 || rank > synthetic.m.min(synthetic.n) {
        return Err(config_err(
            "adapter.rank",
            format!("{} outside 1..={}", rank, synthetic.m.min(synthetic.n)),
        ));
    }

    let init = resolve_init(raw.init, synthetic.m)?;
    let optimizer = resolve_optimizer(raw.optimizer, synthetic.kappa)?;
    let stop = match raw.stop {
        None => StopRule { max_iters: DEFAULT_MAX_ITERS, loss_tol: DEFAULT_LOSS_TOL },
        Some(s) => StopRule {
            max_iters: s.max_iters.unwrap_or(DEFAULT_MAX_ITERS),
            loss_tol: s.loss_tol.unwrap_or(DEFAULT_LOSS_TOL),
        },
    };
    stop.validate().map_err(|e| config_err("stop", e))?;

    let cfg = ExperimentConfig {
        kind,
        synthetic,
        adapter,
        rank,
        init,
        optimizer,
        stop,
        seed: raw.seed.unwrap_or(0),
        output: PathBuf::from(raw.output.unwrap_or_else(|| DEFAULT_OUTPUT.into())),
    };
    cfg.check_compat()?;
    Ok(cfg)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStop {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    loss_tol: Option<f64>,
}

fn reject_extras(path: &str, kind: &str, extras: &[(&str, bool)]) -> Result<()> {
    for (key, present) in extras {
        if *present {
            return Err(config_err(
                &format!("{path}.{key}"),
                format!("not a parameter of `{kind}`"),
            ));
        }
    }
    Ok(())
}

fn resolve_init(raw: Option<RawInit>, m: usize) -> Result<InitSpec> {
    let table = match raw {
        // LoRA's stock scheme is the default starting point.
        None => {
            return Ok(InitSpec::LoraDefault { scale: InitSpec::default_lora_scale(m) });
        }
        Some(RawInit::Name(name)) => RawInitTable {
            kind: name,
            scale: None,
            sigma_x: None,
            sigma_y: None,
            bits: None,
            sweeps: None,
        },
        Some(RawInit::Table(t)) => t,
    };
    let kind = table.kind.as_str();
    let spec = match kind {
        "lora_default" => {
            reject_extras(
                "init",
                kind,
                &[
                    ("sigma_x", table.sigma_x.is_some()),
                    ("sigma_y", table.sigma_y.is_some()),
                    ("bits", table.bits.is_some()),
                    ("sweeps", table.sweeps.is_some()),
                ],
            )?;
            InitSpec::LoraDefault {
                scale: table.scale.unwrap_or_else(|| InitSpec::default_lora_scale(m)),
            }
        }
        "gaussian_small" => {
            reject_extras(
                "init",
                kind,
                &[
                    ("scale", table.scale.is_some()),
                    ("bits", table.bits.is_some()),
                    ("sweeps", table.sweeps.is_some()),
                ],
            )?;
            InitSpec::GaussianSmall {
                sigma_x: table.sigma_x.unwrap_or(InitSpec::DEFAULT_SMALL_SIGMA),
                sigma_y: table.sigma_y.unwrap_or(InitSpec::DEFAULT_SMALL_SIGMA),
            }
        }
        "loftq" => {
            reject_extras(
                "init",
                kind,
                &[
                    ("scale", table.scale.is_some()),
                    ("sigma_x", table.sigma_x.is_some()),
                    ("sigma_y", table.sigma_y.is_some()),
                ],
            )?;
            InitSpec::LoftQ {
                bits: table.bits.unwrap_or(4),
                sweeps: table.sweeps.unwrap_or(1),
            }
        }
        bare => {
            reject_extras(
                "init",
                bare,
                &[
                    ("scale", table.scale.is_some()),
                    ("sigma_x", table.sigma_x.is_some()),
                    ("sigma_y", table.sigma_y.is_some()),
                    ("bits", table.bits.is_some()),
                    ("sweeps", table.sweeps.is_some()),
                ],
            )?;
            match bare {
                "nystrom" => InitSpec::Nystrom,
                "nystrom_alt" => InitSpec::NystromAlt,
                "spectral_top" => InitSpec::SpectralTop,
                "spectral_bottom" => InitSpec::SpectralBottom,
                "qr_top" => InitSpec::QrTop,
                "gradient_spectral" => InitSpec::GradientSpectral,
                other => {
                    return Err(config_err("init.kind", format!("unknown value `{other}`")))
                }
            }
        }
    };
    spec.validate().map_err(|e| config_err("init", e))?;
    Ok(spec)
}

fn resolve_optimizer(raw: RawOptimizer, kappa: f64) -> Result<OptimizerSpec> {
    let table = match raw {
        RawOptimizer::Name(name) => RawOptimizerTable {
            kind: name,
            eta: None,
            eta_x: None,
            eta_y: None,
            rate_ratio: None,
            gram_floor: None,
            mode: None,
            eta_dir: None,
            gamma_mag: None,
            lambda_land: None,
        },
        RawOptimizer::Table(t) => t,
    };
    // Descent through the product's curvature: sigma_1(A) = kappa by
    // construction, so the GD-family default is 0.1 / kappa^2.
    let gd_eta = 0.1 / (kappa * kappa);
    let kind = table.kind.as_str();
    let extras = |list: &[(&str, bool)]| reject_extras("optimizer", kind, list);
    let spec = match kind {
        "gd" | "freeze_x" => {
            extras(&[
                ("eta_x", table.eta_x.is_some()),
                ("eta_y", table.eta_y.is_some()),
                ("rate_ratio", table.rate_ratio.is_some()),
                ("gram_floor", table.gram_floor.is_some()),
                ("mode", table.mode.is_some()),
                ("eta_dir", table.eta_dir.is_some()),
                ("gamma_mag", table.gamma_mag.is_some()),
                ("lambda_land", table.lambda_land.is_some()),
            ])?;
            let eta = table.eta.unwrap_or(gd_eta);
            if kind == "gd" {
                OptimizerSpec::Gd { eta }
            } else {
                OptimizerSpec::FreezeX { eta }
            }
        }
        "altgd" => {
            extras(&[
                ("eta", table.eta.is_some()),
                ("rate_ratio", table.rate_ratio.is_some()),
                ("gram_floor", table.gram_floor.is_some()),
                ("mode", table.mode.is_some()),
                ("eta_dir", table.eta_dir.is_some()),
                ("gamma_mag", table.gamma_mag.is_some()),
                ("lambda_land", table.lambda_land.is_some()),
            ])?;
            OptimizerSpec::AltGd {
                eta_x: table.eta_x.unwrap_or(gd_eta),
                eta_y: table.eta_y.unwrap_or(gd_eta),
            }
        }
        "lora_plus" => {
            extras(&[
                ("eta", table.eta.is_some()),
                ("eta_y", table.eta_y.is_some()),
                ("gram_floor", table.gram_floor.is_some()),
                ("mode", table.mode.is_some()),
                ("eta_dir", table.eta_dir.is_some()),
                ("gamma_mag", table.gamma_mag.is_some()),
                ("lambda_land", table.lambda_land.is_some()),
            ])?;
            OptimizerSpec::LoraPlusGd {
                eta_x: table.eta_x.unwrap_or(gd_eta),
                rate_ratio: table.rate_ratio.unwrap_or(DEFAULT_RATE_RATIO),
            }
        }
        "scaledgd" => {
            extras(&[
                ("eta_x", table.eta_x.is_some()),
                ("eta_y", table.eta_y.is_some()),
                ("rate_ratio", table.rate_ratio.is_some()),
                ("mode", table.mode.is_some()),
                ("eta_dir", table.eta_dir.is_some()),
                ("gamma_mag", table.gamma_mag.is_some()),
                ("lambda_land", table.lambda_land.is_some()),
            ])?;
            OptimizerSpec::ScaledGd {
                eta: table.eta.unwrap_or(DEFAULT_PRECONDITIONED_ETA),
                gram_floor: table.gram_floor.unwrap_or(OptimizerSpec::DEFAULT_GRAM_FLOOR),
            }
        }
        "reflora" => {
            extras(&[
                ("eta_x", table.eta_x.is_some()),
                ("eta_y", table.eta_y.is_some()),
                ("rate_ratio", table.rate_ratio.is_some()),
                ("gram_floor", table.gram_floor.is_some()),
                ("eta_dir", table.eta_dir.is_some()),
                ("gamma_mag", table.gamma_mag.is_some()),
                ("lambda_land", table.lambda_land.is_some()),
            ])?;
            let mode = match table.mode.as_deref() {
                None | Some("full") => RefloraMode::Full,
                Some("scale_only") => RefloraMode::ScaleOnly,
                Some(other) => {
                    return Err(config_err(
                        "optimizer.mode",
                        format!("unknown value `{other}`, expected `full` or `scale_only`"),
                    ))
                }
            };
            OptimizerSpec::RefLora { eta: table.eta.unwrap_or(DEFAULT_PRECONDITIONED_ETA), mode }
        }
        "stiefel_rgd" => {
            extras(&[
                ("eta", table.eta.is_some()),
                ("eta_x", table.eta_x.is_some()),
                ("eta_y", table.eta_y.is_some()),
                ("rate_ratio", table.rate_ratio.is_some()),
                ("gram_floor", table.gram_floor.is_some()),
                ("mode", table.mode.is_some()),
                ("lambda_land", table.lambda_land.is_some()),
            ])?;
            OptimizerSpec::StiefelRgd {
                eta_dir: table.eta_dir.unwrap_or(gd_eta),
                gamma_mag: table.gamma_mag.unwrap_or(DEFAULT_MAGNITUDE_ETA),
            }
        }
        "landing" => {
            extras(&[
                ("eta_x", table.eta_x.is_some()),
                ("eta_y", table.eta_y.is_some()),
                ("rate_ratio", table.rate_ratio.is_some()),
                ("gram_floor", table.gram_floor.is_some()),
                ("mode", table.mode.is_some()),
                ("eta_dir", table.eta_dir.is_some()),
                ("gamma_mag", table.gamma_mag.is_some()),
            ])?;
            OptimizerSpec::Landing {
                eta: table.eta.unwrap_or(gd_eta),
                lambda_land: table.lambda_land.unwrap_or(OptimizerSpec::DEFAULT_LANDING_LAMBDA),
            }
        }
        other => return Err(config_err("optimizer.kind", format!("unknown value `{other}`"))),
    };
    spec.validate().map_err(|e| config_err("optimizer", e))?;
    Ok(spec)
}

impl ExperimentConfig {
    /// Cross-field rules the type system cannot express.
    fn check_compat(&self) -> Result<()> {
        let needs_svd = matches!(
            self.optimizer,
            OptimizerSpec::StiefelRgd { .. } | OptimizerSpec::Landing { .. }
        );
        match (needs_svd, self.adapter) {
            (true, RunAdapter::Bm) => {
                return Err(config_err(
                    "adapter.variant",
                    format!("optimizer `{}` needs `svd_type`", self.optimizer.name()),
                ))
            }
            (false, RunAdapter::SvdType) => {
                return Err(config_err(
                    "adapter.variant",
                    format!("optimizer `{}` needs `bm`", self.optimizer.name()),
                ))
            }
            _ => {}
        }
        // Zero-factor starts: the refactoring matrix needs both Grams
        // invertible, and the orthogonal parameterization needs both
        // factors orthonormalizable.
        let y_zero = matches!(self.init, InitSpec::LoraDefault { .. } | InitSpec::Nystrom);
        if y_zero {
            if matches!(self.optimizer, OptimizerSpec::RefLora { .. }) {
                return Err(config_err(
                    "init",
                    format!(
                        "`{}` starts with a zero factor, which `reflora` cannot refactor",
                        self.init.name()
                    ),
                ));
            }
            if self.adapter == RunAdapter::SvdType {
                return Err(config_err(
                    "init",
                    format!(
                        "`{}` starts with a zero factor, which has no orthonormal basis",
                        self.init.name()
                    ),
                ));
            }
        }
        if matches!(self.init, InitSpec::LoraDefault { .. })
            && matches!(self.optimizer, OptimizerSpec::ScaledGd { .. })
        {
            return Err(config_err(
                "init",
                "`lora_default` starts X and Y imbalanced by a zero Gram, which `scaledgd` cannot precondition",
            ));
        }
        if matches!(self.init, InitSpec::LoftQ { .. }) && self.kind != ProblemKind::Sensing {
            return Err(config_err(
                "init",
                "`loftq` refits a pre-trained weight, which only sensing problems carry",
            ));
        }
        Ok(())
    }

    fn to_raw(&self) -> RawConfig {
        let init_table = match &self.init {
            InitSpec::LoraDefault { scale } => RawInitTable {
                kind: "lora_default".into(),
                scale: Some(*scale),
                sigma_x: None,
                sigma_y: None,
                bits: None,
                sweeps: None,
            },
            InitSpec::GaussianSmall { sigma_x, sigma_y } => RawInitTable {
                kind: "gaussian_small".into(),
                scale: None,
                sigma_x: Some(*sigma_x),
                sigma_y: Some(*sigma_y),
                bits: None,
                sweeps: None,
            },
            InitSpec::LoftQ { bits, sweeps } => RawInitTable {
                kind: "loftq".into(),
                scale: None,
                sigma_x: None,
                sigma_y: None,
                bits: Some(*bits),
                sweeps: Some(*sweeps),
            },
            bare => RawInitTable {
                kind: bare.name().into(),
                scale: None,
                sigma_x: None,
                sigma_y: None,
                bits: None,
                sweeps: None,
            },
        };
        let mut opt_table = RawOptimizerTable {
            kind: self.optimizer.name().into(),
            eta: None,
            eta_x: None,
            eta_y: None,
            rate_ratio: None,
            gram_floor: None,
            mode: None,
            eta_dir: None,
            gamma_mag: None,
            lambda_land: None,
        };
        match &self.optimizer {
            OptimizerSpec::Gd { eta } | OptimizerSpec::FreezeX { eta } => {
                opt_table.eta = Some(*eta);
            }
            OptimizerSpec::AltGd { eta_x, eta_y } => {
                opt_table.eta_x = Some(*eta_x);
                opt_table.eta_y = Some(*eta_y);
            }
            OptimizerSpec::LoraPlusGd { eta_x, rate_ratio } => {
                opt_table.eta_x = Some(*eta_x);
                opt_table.rate_ratio = Some(*rate_ratio);
            }
            OptimizerSpec::ScaledGd { eta, gram_floor } => {
                opt_table.eta = Some(*eta);
                opt_table.gram_floor = Some(*gram_floor);
            }
            OptimizerSpec::RefLora { eta, mode } => {
                opt_table.eta = Some(*eta);
                opt_table.mode = Some(
                    match mode {
                        RefloraMode::Full => "full",
                        RefloraMode::ScaleOnly => "scale_only",
                    }
                    .into(),
                );
            }
            OptimizerSpec::StiefelRgd { eta_dir, gamma_mag } => {
                opt_table.eta_dir = Some(*eta_dir);
                opt_table.gamma_mag = Some(*gamma_mag);
            }
            OptimizerSpec::Landing { eta, lambda_land } => {
                opt_table.eta = Some(*eta);
                opt_table.lambda_land = Some(*lambda_land);
            }
        }
        RawConfig {
            seed: Some(self.seed),
            output: Some(self.output.display().to_string()),
            problem: RawProblem {
                kind: self.kind.name().into(),
                m: self.synthetic.m,
                n: self.synthetic.n,
                r_a: self.synthetic.r_a,
                kappa: self.synthetic.kappa,
                measurements: Some(self.synthetic.measurements),
                noise_sigma: Some(self.synthetic.noise_sigma),
                profile: Some(
                    match self.synthetic.profile {
                        SigmaProfile::Linear => "linear",
                        SigmaProfile::Log => "log",
                    }
                    .into(),
                ),
            },
            adapter: RawAdapter {
                variant: self.adapter.name().into(),
                rank: self.rank,
                m: Some(self.synthetic.m),
                n: Some(self.synthetic.n),
            },
            init: Some(RawInit::Table(init_table)),
            optimizer: RawOptimizer::Table(opt_table),
            stop: Some(RawStop {
                max_iters: Some(self.stop.max_iters),
                loss_tol: Some(self.stop.loss_tol),
            }),
        }
    }

    /// Canonical full-form TOML; parsing it back yields an identical config
    /// and an identical serialization.
    pub fn to_toml(&self) -> String {
        // Serializing a config we constructed cannot fail.
        toml::to_string(&self.to_raw()).expect("canonical config serializes")
    }

    /// One-line JSON echo of the canonical form, for run headers.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_raw()).expect("canonical config serializes")
    }
}
