//! Experiment execution: problem assembly, initialization, runs, sweeps,
//! and the CSV contract.
//!
//! Every piece of randomness comes from a named stream under the config's
//! seed, so a (config, seed) pair pins the entire run. The only machine-
//! dependent output is the trailing wall-clock column of each CSV row;
//! `stable_body` blanks it for byte-level comparisons.

use std::fs;

use crate::adapter::{AdapterSpec, OrthoMode};
use crate::config::{parse_config, ExperimentConfig, ProblemKind, RunAdapter};
use crate::error::{Error, Result};
use crate::init::{init, InitSpec};
use crate::matrix::DenseMatrix;
use crate::optim::{run, OptimizerSpec, RunTrace};
use crate::problems::{make_synthetic_sensing, make_synthetic_target, Problem};
use crate::rng::RandomSource;
use crate::spectral::qr_thin;

/// Version string echoed into every CSV header.
pub const ARTIFACT_VERSION: &str = concat!("loralab ", env!("CARGO_PKG_VERSION"));

/// Builds the problem instance a config describes, on the config's
/// "problem" stream. LoftQ initialization needs a pre-trained weight, which
/// sensing runs draw from the separate "pretrain" stream.
pub fn build_problem(cfg: &ExperimentConfig) -> Result<Problem> {
    let mut rng = RandomSource::named(cfg.seed, "problem");
    match cfg.kind {
        ProblemKind::Factorization => Ok(Problem::Factorization(make_synthetic_target(
            &cfg.synthetic,
            &mut rng,
        )?)),
        ProblemKind::Sensing => {
            let w_pre = matches!(cfg.init, InitSpec::LoftQ { .. }).then(|| {
                let mut pre = RandomSource::named(cfg.seed, "pretrain");
                pre.gaussian_matrix(cfg.synthetic.m, cfg.synthetic.n, 1.0)
            });
            let (problem, _) = make_synthetic_sensing(&cfg.synthetic, &mut rng, w_pre)?;
            Ok(Problem::Sensing(problem))
        }
    }
}

/// Lifts a factor pair into the orthogonal parameterization: U and V are
/// orthonormal bases of the factor columns and the core is U^T (X Y^T) V.
/// The materialized update is unchanged because both spans contain their
/// factor exactly.
pub fn lift_to_svd(x: &DenseMatrix, y: &DenseMatrix, mode: OrthoMode) -> Result<AdapterSpec> {
    let (u, _) = qr_thin(x)?;
    let (v, _) = qr_thin(y)?;
    let core = u.transpose().matmul(x).matmul(&y.transpose().matmul(&v));
    Ok(AdapterSpec::SvdType { u, sigma: core, v, sigma_diagonal: false, ortho_mode: mode })
}

/// Runs the configured initializer (on the "init" stream) and shapes the
/// result for the configured adapter family.
pub fn build_adapter(cfg: &ExperimentConfig, problem: &Problem) -> Result<AdapterSpec> {
    let mut rng = RandomSource::named(cfg.seed, "init");
    let shape = (cfg.synthetic.m, cfg.synthetic.n, cfg.rank);
    let seeded = init(&cfg.init, problem, shape, &mut rng)?;
    match cfg.adapter {
        RunAdapter::Bm => Ok(seeded),
        RunAdapter::SvdType => {
            let AdapterSpec::Bm { x, y } = &seeded else {
                return Err(Error::Config("initializers produce factor pairs".into()));
            };
            let mode = match cfg.optimizer {
                OptimizerSpec::StiefelRgd { .. } => OrthoMode::Strict,
                OptimizerSpec::Landing { .. } => OrthoMode::Penalized,
                _ => {
                    return Err(Error::Config(
                        "svd_type runs need an orthogonality-aware optimizer".into(),
                    ))
                }
            };
            lift_to_svd(x, y, mode)
        }
    }
}

/// A completed run: version and config echo for the header, plus the trace.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub version: &'static str,
    pub config_json: String,
    pub trace: RunTrace,
}

/// Fixed CSV column order. Metrics a family does not define are emitted as
/// empty fields, never dropped columns.
pub const CSV_COLUMNS: &str = "iter,loss,grad_norm,stable_rank,gram_imbalance,ortho_penalty,wall_ns";

impl RunRecord {
    /// Full CSV: two comment headers, the column line, one row per logged
    /// iterate. wall_ns is deliberately last so the machine-independent
    /// prefix of each row is contiguous.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# {}\n", self.version));
        out.push_str(&format!("# config = {}\n", self.config_json));
        out.push_str(CSV_COLUMNS);
        out.push('\n');
        for row in &self.trace.rows {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{},{},{}\n",
                row.iter,
                row.loss,
                row.grad_norm,
                row.stable_rank,
                opt(row.gram_imbalance),
                opt(row.ortho_penalty),
                row.wall_ns
            ));
        }
        out
    }
}

/// Drops the trailing wall-clock field from every data row. Two runs of the
/// same (config, seed) agree byte-for-byte on this form.
pub fn stable_body(csv: &str) -> String {
    let mut out = String::new();
    for line in csv.lines() {
        if line.starts_with('#') || line.starts_with("iter,") {
            out.push_str(line);
        } else if let Some(cut) = line.rfind(',') {
            out.push_str(&line[..cut]);
        } else {
            out.push_str(line);
        }
        out.push('\n');
    }
    out
}

/// Executes a config without touching the filesystem.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let problem = build_problem(cfg)?;
    let adapter = build_adapter(cfg, &problem)?;
    let trace = run(&problem, adapter, &cfg.optimizer, cfg.stop)?;
    Ok(RunRecord { version: ARTIFACT_VERSION, config_json: cfg.to_json(), trace })
}

/// Executes a config and writes its CSV to the configured output path.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let record = execute(cfg)?;
    if let Some(dir) = cfg.output.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(&cfg.output, record.to_csv())?;
    Ok(record)
}

// ---------------------------------------------------------------------------
// Sweeps. Axis overrides are applied to the config *document*, then each
// point re-parses, so defaults that depend on swept values (step sizes on
// kappa) resolve per point while anything the user wrote stays pinned.
// ---------------------------------------------------------------------------

/// Value lists for the sweepable keys; an empty list leaves the base value.
#[derive(Debug, Clone, Default)]
pub struct SweepAxes {
    pub kappa: Vec<f64>,
    pub rank: Vec<usize>,
    pub init: Vec<String>,
    pub optimizer: Vec<String>,
}

impl SweepAxes {
    /// Parses repeated `key=v1,v2,...` specifications.
    pub fn parse(specs: &[String]) -> Result<Self> {
        let mut axes = SweepAxes::default();
        for spec in specs {
            let Some((key, values)) = spec.split_once('=') else {
                return Err(Error::Config(format!(
                    "axis `{spec}` is not of the form key=v1,v2,..."
                )));
            };
            let values: Vec<&str> = values.split(',').filter(|v| !v.is_empty()).collect();
            if values.is_empty() {
                return Err(Error::Config(format!("axis `{key}` has no values")));
            }
            match key {
                "kappa" => {
                    for v in values {
                        let parsed = v.parse::<f64>().map_err(|_| {
                            Error::Config(format!("axis kappa: `{v}` is not a number"))
                        })?;
                        axes.kappa.push(parsed);
                    }
                }
                "rank" => {
                    for v in values {
                        let parsed = v.parse::<usize>().map_err(|_| {
                            Error::Config(format!("axis rank: `{v}` is not a count"))
                        })?;
                        axes.rank.push(parsed);
                    }
                }
                "init" => axes.init.extend(values.iter().map(|v| v.to_string())),
                "optimizer" => axes.optimizer.extend(values.iter().map(|v| v.to_string())),
                other => {
                    return Err(Error::Config(format!(
                        "axis `{other}` is not sweepable; use kappa, rank, init, or optimizer"
                    )))
                }
            }
        }
        if axes.kappa.is_empty()
            && axes.rank.is_empty()
            && axes.init.is_empty()
            && axes.optimizer.is_empty()
        {
            return Err(Error::Config("sweep needs at least one axis".into()));
        }
        Ok(axes)
    }
}

#[derive(Debug, Clone, Default)]
struct PointPatch {
    kappa: Option<f64>,
    rank: Option<usize>,
    init: Option<String>,
    optimizer: Option<String>,
}

impl PointPatch {
    fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(k) = self.kappa {
            parts.push(format!("kappa={k}"));
        }
        if let Some(r) = self.rank {
            parts.push(format!("rank={r}"));
        }
        if let Some(i) = &self.init {
            parts.push(format!("init={i}"));
        }
        if let Some(o) = &self.optimizer {
            parts.push(format!("optimizer={o}"));
        }
        if parts.is_empty() {
            "base".into()
        } else {
            parts.join(",")
        }
    }

    fn file_tag(&self) -> String {
        self.label().replace('=', "_").replace(',', "-").replace('.', "p")
    }
}

fn cartesian(axes: &SweepAxes) -> Vec<PointPatch> {
    let kappas: Vec<Option<f64>> = if axes.kappa.is_empty() {
        vec![None]
    } else {
        axes.kappa.iter().map(|&k| Some(k)).collect()
    };
    let ranks: Vec<Option<usize>> = if axes.rank.is_empty() {
        vec![None]
    } else {
        axes.rank.iter().map(|&r| Some(r)).collect()
    };
    let inits: Vec<Option<String>> = if axes.init.is_empty() {
        vec![None]
    } else {
        axes.init.iter().map(|i| Some(i.clone())).collect()
    };
    let optimizers: Vec<Option<String>> = if axes.optimizer.is_empty() {
        vec![None]
    } else {
        axes.optimizer.iter().map(|o| Some(o.clone())).collect()
    };
    let mut points = Vec::new();
    for k in &kappas {
        for r in &ranks {
            for i in &inits {
                for o in &optimizers {
                    points.push(PointPatch {
                        kappa: *k,
                        rank: *r,
                        init: i.clone(),
                        optimizer: o.clone(),
                    });
                }
            }
        }
    }
    points
}

// The toml serializer requires scalar keys before table keys at each level.
fn reorder_toplevel(doc: toml::Value) -> toml::Value {
    let toml::Value::Table(map) = doc else { return doc };
    let mut scalars = toml::map::Map::new();
    let mut tables = toml::map::Map::new();
    for (k, v) in map {
        if matches!(v, toml::Value::Table(_)) {
            tables.insert(k, v);
        } else {
            scalars.insert(k, v);
        }
    }
    scalars.extend(tables);
    toml::Value::Table(scalars)
}

fn patched_text(
    base: &toml::Value,
    patch: &PointPatch,
    seed: u64,
    output: Option<&str>,
) -> Result<String> {
    let mut doc = base.clone();
    {
        let table = doc
            .as_table_mut()
            .ok_or_else(|| Error::Config("config root must be a table".into()))?;
        if let Some(k) = patch.kappa {
            let problem = table
                .get_mut("problem")
                .and_then(|p| p.as_table_mut())
                .ok_or_else(|| Error::Config("config has no [problem] table".into()))?;
            problem.insert("kappa".into(), toml::Value::Float(k));
        }
        if let Some(r) = patch.rank {
            let adapter = table
                .get_mut("adapter")
                .and_then(|a| a.as_table_mut())
                .ok_or_else(|| Error::Config("config has no [adapter] table".into()))?;
            adapter.insert("rank".into(), toml::Value::Integer(r as i64));
        }
        if let Some(i) = &patch.init {
            table.insert("init".into(), toml::Value::String(i.clone()));
        }
        if let Some(o) = &patch.optimizer {
            table.insert("optimizer".into(), toml::Value::String(o.clone()));
        }
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
        if let Some(out) = output {
            table.insert("output".into(), toml::Value::String(out.into()));
        }
    }
    toml::to_string(&reorder_toplevel(doc)).map_err(|e| Error::Config(e.to_string()))
}

/// A run that completed inside a sweep.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub label: String,
    pub seed: u64,
    pub record: RunRecord,
}

/// A run that failed inside a sweep; the sweep continues past it.
#[derive(Debug, Clone)]
pub struct SweepFailure {
    pub label: String,
    pub seed: u64,
    pub message: String,
}

/// Per-point aggregate over seeds.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub label: String,
    /// Median over seeds; runs that never reached loss_tol count as their
    /// iteration budget (censored, which biases against them).
    pub median_iters: usize,
    pub final_stable_rank: f64,
}

/// Everything a sweep produces.
#[derive(Debug)]
pub struct SweepOutcome {
    pub runs: Vec<SweepRun>,
    pub failures: Vec<SweepFailure>,
    pub summary: Vec<SummaryRow>,
}

impl SweepOutcome {
    /// Summary CSV: one row per axis point.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("point,median_iters_to_tol,final_stable_rank\n");
        for row in &self.summary {
            out.push_str(&format!(
                "\"{}\",{},{:e}\n",
                row.label, row.median_iters, row.final_stable_rank
            ));
        }
        out
    }
}

fn median_usize(mut v: Vec<usize>) -> usize {
    v.sort_unstable();
    v[v.len() / 2]
}

fn median_f64(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn stem_of(doc: &toml::Value) -> String {
    let output = doc.get("output").and_then(|v| v.as_str()).unwrap_or("run.csv");
    std::path::PathBuf::from(output).with_extension("").display().to_string()
}

/// Output stem of a sweep base document: its `output` path (default
/// `run.csv`) with the extension dropped. Per-run and summary files are
/// named from this stem.
pub fn sweep_output_stem(base_text: &str) -> Result<String> {
    let doc: toml::Value = toml::from_str(base_text).map_err(|e| Error::Config(e.to_string()))?;
    Ok(stem_of(&doc))
}

/// Runs the Cartesian product of the axes over `seeds` seeds per point.
///
/// Overrides apply to the config document and each point re-parses, so
/// swept names pick up their own defaults. Per-run CSVs land next to the
/// base output path, tagged by point and seed. Single-run failures are
/// recorded and the sweep continues.
pub fn sweep(base_text: &str, axes: &SweepAxes, seeds: u64) -> Result<SweepOutcome> {
    if seeds == 0 {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    // The base document is a template: it must be well-formed TOML, but
    // full validation happens per point, after overrides land.
    let base_doc: toml::Value =
        toml::from_str(base_text).map_err(|e| Error::Config(e.to_string()))?;
    let out_stem = stem_of(&base_doc);

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut summary = Vec::new();
    for patch in cartesian(axes) {
        let label = patch.label();
        let mut iters = Vec::new();
        let mut finals = Vec::new();
        for seed in 0..seeds {
            let out_path = format!("{}-{}-s{}.csv", out_stem, patch.file_tag(), seed);
            let attempt = patched_text(&base_doc, &patch, seed, Some(&out_path))
                .and_then(|text| parse_config(&text))
                .and_then(|cfg| run_experiment(&cfg));
            match attempt {
                Ok(record) => {
                    let trace = &record.trace;
                    iters.push(if trace.converged {
                        trace.iterations()
                    } else {
                        trace.iterations().max(1)
                    });
                    finals.push(trace.final_stable_rank());
                    runs.push(SweepRun { label: label.clone(), seed, record });
                }
                Err(e) => failures.push(SweepFailure {
                    label: label.clone(),
                    seed,
                    message: e.to_string(),
                }),
            }
        }
        if !iters.is_empty() {
            summary.push(SummaryRow {
                label,
                median_iters: median_usize(iters),
                final_stable_rank: median_f64(finals),
            });
        }
    }
    Ok(SweepOutcome { runs, failures, summary })
}
