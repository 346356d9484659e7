//! Command implementations behind the `aais` binary: fit a mixture to a named
//! synthetic target, run a resampling training experiment from a TOML config,
//! and export evaluation grids for plotting.
//!
//! All artifacts are deterministic per (inputs, seed), so re-running a
//! command overwrites files with identical bytes. The one exception is the
//! `wall_time_s` field inside `record.jsonl`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use aais_core::aais::{run_aais, AaisConfig, MergeRule};
use aais_core::mixture::ComponentKind;
use aais_core::pde::{PoissonProblem};
use aais_core::pinn::{read_checkpoint, write_checkpoint, Field, MlpParams};
use aais_core::samplers::{sample_within_domain, SamplerSpec};
use aais_core::target::{GaussianBumps, TargetDensity};
use aais_core::train::{resample_train, RunRecord, TrainConfig};
use aais_core::CoreError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("unknown target `{0}`; known targets: {}", GaussianBumps::names().join(", "))]
    UnknownTarget(String),

    #[error("unknown problem preset `{0}`; known presets: {}", PoissonProblem::preset_names().join(", "))]
    UnknownPreset(String),

    #[error("invalid config `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("invalid argument: {0}")]
    BadArgument(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for unknown names, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::UnknownTarget(_) | CliError::UnknownPreset(_) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn parse_kind(kind: &str, dof: f64) -> CliResult<ComponentKind> {
    match kind {
        "gaussian" => Ok(ComponentKind::Gaussian),
        "student-t" => Ok(ComponentKind::student_t(dof)?),
        other => Err(CliError::BadArgument(format!("kind must be `gaussian` or `student-t`, got `{other}`"))),
    }
}

#[derive(Debug, Clone)]
pub struct FitArgs {
    pub target: String,
    pub seed: u64,
    pub out: PathBuf,
    pub kind: String,
    pub dof: f64,
    pub n_search: usize,
    pub samples: usize,
}

/// Fits a mixture to a named synthetic target and writes `mixture.json`,
/// `trace.jsonl`, and `samples.csv` into the output directory.
pub fn cmd_fit(args: &FitArgs) -> CliResult<()> {
    let target = GaussianBumps::by_name(&args.target).map_err(|_| CliError::UnknownTarget(args.target.clone()))?;
    let kind = parse_kind(&args.kind, args.dof)?;
    let cfg = AaisConfig::new(kind, target.dim(), args.n_search)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (mixture, trace) = run_aais(&target, &cfg, &mut rng)?;

    fs::create_dir_all(&args.out)?;
    let mut json = serde_json::to_string_pretty(&mixture.to_json())?;
    json.push('\n');
    fs::write(args.out.join("mixture.json"), json)?;

    let mut trace_file = fs::File::create(args.out.join("trace.jsonl"))?;
    trace.write_jsonl(&mut trace_file)?;

    let points = sample_within_domain(&mixture, target.domain(), args.samples, &mut rng)?;
    write_points_csv(&args.out.join("samples.csv"), &points)?;

    println!(
        "fit {}: {} components, final ESS {:.4} -> {}",
        args.target,
        mixture.len(),
        trace.best_final_ess(),
        args.out.display()
    );
    Ok(())
}

fn write_points_csv(path: &Path, points: &[DVector<f64>]) -> CliResult<()> {
    let dim = points.first().map_or(0, |p| p.len());
    let mut out = String::new();
    let header: Vec<String> = (1..=dim).map(|j| format!("x{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for p in points {
        let row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn default_hidden_layers() -> Vec<usize> {
    vec![20; 7]
}

/// Top-level TOML schema of a `solve` experiment. Unknown keys are rejected.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub experiment: String,
    pub problem: String,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: Vec<usize>,
    #[serde(default)]
    pub train: TrainSection,
    pub sampler: SamplerSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub n_interior: usize,
    pub n_boundary: usize,
    pub n_resample: usize,
    pub max_iterations: usize,
    pub adam_epochs_pretrain: usize,
    pub opt_epochs_pretrain: usize,
    pub adam_epochs: usize,
    pub opt_epochs: usize,
    pub lr_adam: f64,
    pub lr_opt: f64,
    pub interior_weight: f64,
    pub boundary_weight: f64,
    pub test_uniform: usize,
    pub test_gauss_per_peak: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::new(SamplerSpec::Uniform, 0);
        TrainSection {
            n_interior: base.n_interior,
            n_boundary: base.n_boundary,
            n_resample: base.n_resample,
            max_iterations: base.max_iterations,
            adam_epochs_pretrain: base.adam_epochs_pretrain,
            opt_epochs_pretrain: base.opt_epochs_pretrain,
            adam_epochs: base.adam_epochs,
            opt_epochs: base.opt_epochs,
            lr_adam: base.lr_adam,
            lr_opt: base.lr_opt,
            interior_weight: base.interior_weight,
            boundary_weight: base.boundary_weight,
            test_uniform: base.test_uniform,
            test_gauss_per_peak: base.test_gauss_per_peak,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    /// `uniform`, `rad`, or `aais`.
    pub kind: String,
    #[serde(default)]
    pub n_search: Option<usize>,
    /// Mixture family for `aais`: `gaussian` or `student-t`.
    #[serde(default)]
    pub mixture: Option<String>,
    #[serde(default)]
    pub dof: Option<f64>,
    #[serde(default)]
    pub n_proposal: Option<usize>,
    #[serde(default)]
    pub n_refine: Option<usize>,
    #[serde(default)]
    pub accept_ess: Option<f64>,
    #[serde(default)]
    pub merge_ess: Option<f64>,
    #[serde(default)]
    pub blend_weight: Option<f64>,
    #[serde(default)]
    pub cycle_limit: Option<usize>,
    #[serde(default)]
    pub delete_fraction: Option<f64>,
    #[serde(default)]
    pub lambda_ladder: Option<Vec<f64>>,
    #[serde(default)]
    pub ess_ladder: Option<Vec<f64>>,
    #[serde(default)]
    pub iter_ladder: Option<Vec<usize>>,
    /// `moment-match` (default) or `paper-literal`.
    #[serde(default)]
    pub merge_rule: Option<String>,
}

impl SamplerSection {
    fn build(&self, dim: usize, config_path: &str) -> CliResult<SamplerSpec> {
        let bad = |message: String| CliError::Config { path: config_path.to_string(), message };
        let n_search = self.n_search.unwrap_or(10_000);
        match self.kind.as_str() {
            "uniform" => Ok(SamplerSpec::Uniform),
            "rad" => Ok(SamplerSpec::Rad { n_search }),
            "aais" => {
                let mixture = self.mixture.as_deref().unwrap_or("student-t");
                let kind = parse_kind(mixture, self.dof.unwrap_or(3.0))?;
                let mut cfg = AaisConfig::new(kind, dim, n_search)?;
                if let Some(v) = self.n_proposal {
                    cfg.n_proposal = v;
                }
                if let Some(v) = self.n_refine {
                    cfg.n_refine = v;
                }
                if let Some(v) = self.accept_ess {
                    cfg.accept_ess = v;
                }
                if let Some(v) = self.merge_ess {
                    cfg.merge_ess = v;
                }
                if let Some(v) = self.blend_weight {
                    cfg.blend_weight = v;
                }
                if let Some(v) = self.cycle_limit {
                    cfg.cycle_limit = v;
                }
                if let Some(v) = self.delete_fraction {
                    cfg.delete_fraction = v;
                }
                if let Some(v) = &self.lambda_ladder {
                    cfg.lambda_ladder = v.clone();
                }
                if let Some(v) = &self.ess_ladder {
                    cfg.ess_ladder = v.clone();
                }
                if let Some(v) = &self.iter_ladder {
                    cfg.iter_ladder = v.clone();
                }
                match self.merge_rule.as_deref() {
                    None | Some("moment-match") => {}
                    Some("paper-literal") => cfg.merge_rule = MergeRule::PaperLiteral,
                    Some(other) => return Err(bad(format!("unknown merge_rule `{other}`"))),
                }
                cfg.validate()?;
                Ok(SamplerSpec::Aais(cfg))
            }
            other => Err(bad(format!("sampler.kind must be uniform, rad, or aais; got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub loss: f64,
    pub e_r: f64,
    pub e_inf: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

/// `summary.json` schema: final per-seed metrics plus their spread.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub problem: String,
    pub sampler: String,
    pub per_seed: Vec<SeedOutcome>,
    pub e_r: Spread,
    pub e_inf: Spread,
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn spread(values: &[f64]) -> Spread {
    Spread {
        median: median(values),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Runs every seed of an experiment config, writing per-seed records and
/// checkpoints under `<out_dir>/<experiment>/<seed>/` plus a top-level
/// `summary.json`.
pub fn cmd_solve(config_path: &Path) -> CliResult<()> {
    let path_str = config_path.display().to_string();
    let text = fs::read_to_string(config_path)
        .map_err(|e| CliError::Config { path: path_str.clone(), message: e.to_string() })?;
    let config: RunConfigFile =
        toml::from_str(&text).map_err(|e| CliError::Config { path: path_str.clone(), message: e.to_string() })?;
    if config.seeds.is_empty() {
        return Err(CliError::Config { path: path_str, message: "seeds must be nonempty".into() });
    }

    let problem =
        PoissonProblem::preset(&config.problem).map_err(|_| CliError::UnknownPreset(config.problem.clone()))?;
    let mut net_sizes = Vec::with_capacity(config.hidden_layers.len() + 2);
    net_sizes.push(problem.dim());
    net_sizes.extend_from_slice(&config.hidden_layers);
    net_sizes.push(1);

    let experiment_dir = config.out_dir.join(&config.experiment);
    fs::create_dir_all(&experiment_dir)?;

    let outcomes: Vec<CliResult<SeedOutcome>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let sampler = config.sampler.build(problem.dim(), &path_str)?;
            let mut train_cfg = TrainConfig::new(sampler, seed);
            let t = &config.train;
            train_cfg.n_interior = t.n_interior;
            train_cfg.n_boundary = t.n_boundary;
            train_cfg.n_resample = t.n_resample;
            train_cfg.max_iterations = t.max_iterations;
            train_cfg.adam_epochs_pretrain = t.adam_epochs_pretrain;
            train_cfg.opt_epochs_pretrain = t.opt_epochs_pretrain;
            train_cfg.adam_epochs = t.adam_epochs;
            train_cfg.opt_epochs = t.opt_epochs;
            train_cfg.lr_adam = t.lr_adam;
            train_cfg.lr_opt = t.lr_opt;
            train_cfg.interior_weight = t.interior_weight;
            train_cfg.boundary_weight = t.boundary_weight;
            train_cfg.test_uniform = t.test_uniform;
            train_cfg.test_gauss_per_peak = t.test_gauss_per_peak;

            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (params, record) = resample_train(&problem, &net_sizes, &train_cfg, &mut rng)?;

            let seed_dir = experiment_dir.join(seed.to_string());
            fs::create_dir_all(&seed_dir)?;
            let mut record_file = fs::File::create(seed_dir.join("record.jsonl"))?;
            record.write_jsonl(&mut record_file)?;
            record_file.flush()?;
            write_checkpoint(&params, &seed_dir.join("checkpoint.json"))?;

            let last = record.final_entry().expect("record has at least the pretrain entry");
            Ok(SeedOutcome { seed, loss: last.loss, e_r: last.e_r, e_inf: last.e_inf })
        })
        .collect();
    let per_seed = outcomes.into_iter().collect::<CliResult<Vec<_>>>()?;

    let e_r: Vec<f64> = per_seed.iter().map(|o| o.e_r).collect();
    let e_inf: Vec<f64> = per_seed.iter().map(|o| o.e_inf).collect();
    let summary = Summary {
        experiment: config.experiment.clone(),
        problem: config.problem.clone(),
        sampler: config.sampler.kind.clone(),
        per_seed,
        e_r: spread(&e_r),
        e_inf: spread(&e_inf),
    };
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    fs::write(experiment_dir.join("summary.json"), json)?;

    println!(
        "solve {}: {} seeds, median e_r {:.4e} -> {}",
        config.experiment,
        summary.per_seed.len(),
        summary.e_r.median,
        experiment_dir.display()
    );
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExportGridArgs {
    /// Checkpoint header path, or the literal `exact` for the closed-form
    /// solution.
    pub ckpt: String,
    pub problem: String,
    pub resolution: usize,
    pub plane: String,
    pub out: PathBuf,
}

fn parse_plane(plane: &str, dim: usize) -> CliResult<(usize, usize)> {
    let bad = || CliError::BadArgument(format!("plane must look like `x1x2`, got `{plane}`"));
    let rest = plane.strip_prefix('x').ok_or_else(bad)?;
    let (first, second) = rest.split_once('x').ok_or_else(bad)?;
    let i: usize = first.parse().map_err(|_| bad())?;
    let j: usize = second.parse().map_err(|_| bad())?;
    if i == 0 || j == 0 || i == j || i > dim || j > dim {
        return Err(CliError::BadArgument(format!(
            "plane axes must be distinct and within 1..={dim}, got `{plane}`"
        )));
    }
    Ok((i - 1, j - 1))
}

/// Evaluates a checkpoint (or the exact solution) on a uniform grid over a
/// 2D slice and writes `(x_i, x_j, u, u_exact, abs_err, residual)` rows,
/// with the remaining coordinates fixed at 0.
pub fn cmd_export_grid(args: &ExportGridArgs) -> CliResult<()> {
    let problem =
        PoissonProblem::preset(&args.problem).map_err(|_| CliError::UnknownPreset(args.problem.clone()))?;
    if args.resolution < 2 {
        return Err(CliError::BadArgument("resolution must be at least 2".into()));
    }
    let (ai, aj) = parse_plane(&args.plane, problem.dim())?;

    let mlp: Option<MlpParams> = if args.ckpt == "exact" {
        None
    } else {
        let params = read_checkpoint(Path::new(&args.ckpt))?;
        if params.input_dim() != problem.dim() {
            return Err(CliError::BadArgument(format!(
                "checkpoint has input dimension {}, problem `{}` needs {}",
                params.input_dim(),
                args.problem,
                problem.dim()
            )));
        }
        Some(params)
    };
    let exact_field = problem.exact_field();
    let field: &dyn Field = match &mlp {
        Some(p) => p,
        None => &exact_field,
    };

    let res = args.resolution;
    let lower = problem.domain().lower();
    let upper = problem.domain().upper();
    let coord = |axis: usize, k: usize| lower[axis] + (upper[axis] - lower[axis]) * k as f64 / (res - 1) as f64;

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut out = String::with_capacity(res * res * 48);
    out.push_str(&format!("x{},x{},u,u_exact,abs_err,residual\n", ai + 1, aj + 1));
    let mut x = DVector::zeros(problem.dim());
    for ki in 0..res {
        for kj in 0..res {
            x.fill(0.0);
            x[ai] = coord(ai, ki);
            x[aj] = coord(aj, kj);
            let u = field.value(&x);
            let u_exact = problem.exact_solution(&x);
            let r = problem.interior_operator(field, &x);
            out.push_str(&format!("{},{},{},{},{},{}\n", x[ai], x[aj], u, u_exact, (u - u_exact).abs(), r * r));
        }
    }
    fs::write(&args.out, out)?;
    println!("export-grid {}: {} rows -> {}", args.problem, res * res, args.out.display());
    Ok(())
}
