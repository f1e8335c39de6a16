//! Command-line front end.
//!
//! Every command writes one JSON document (or, for `simulate`, optionally a
//! CSV table). Settings resolve as: command-line flag, then the `--config`
//! file, then the built-in default.

pub mod ingest;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{CovcapError, Result};
use crate::inference::{bootstrap_beta, BootstrapConfig, BootstrapResult};
use crate::shrinkage::ShrinkageParams;
use crate::simgen::{run_table1, run_table2, SimMetrics};
use crate::solver::{fit_components, ComponentSet, DeflationMetric, Estimator, FitConfig};

pub use ingest::{ingest, write_study};

#[derive(Debug, Parser)]
#[command(name = "covcap", version, about = "Covariate-assisted principal regression with shared shrinkage")]
pub struct Cli {
    /// JSON file with default settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "COVCAP_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one or more components.
    Fit(FitArgs),
    /// Fit several components and report their deviation from diagonality.
    Components(FitArgs),
    /// Percentile bootstrap intervals for the coefficients of one component.
    Bootstrap(BootstrapArgs),
    /// Run a simulation table.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// CSV with header `id,x1,...`; an intercept is added.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Directory holding one headerless `<id>.csv` series per subject.
    #[arg(long)]
    pub series_dir: Option<PathBuf>,
    /// Keep every n-th row of each series.
    #[arg(long)]
    pub thin: Option<usize>,
    /// Do not subtract column means from each series.
    #[arg(long)]
    pub no_center: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SolverArgs {
    #[arg(long)]
    pub estimator: Option<Estimator>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of starting directions (default min(p, 20)).
    #[arg(long)]
    pub inits: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Relative objective change that ends the iteration.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub deflation: Option<DeflationMetric>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Which component to bootstrap (1-based); earlier ones are fitted first.
    #[arg(long)]
    pub component: Option<usize>,
    /// Bootstrap replicates.
    #[arg(long = "B")]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
    /// Re-estimate the direction in every replicate.
    #[arg(long)]
    pub refit_gamma: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Known directions, several dimensions.
    Table1,
    /// Estimated directions at a fixed dimension.
    Table2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Dimensions, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub p: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub t: Option<Vec<usize>>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Bootstrap replicates per fit for coverage (table2 only; 0 disables).
    #[arg(long = "B")]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
    /// Output format; inferred from the `--out` extension when omitted.
    #[arg(long)]
    pub format: Option<OutputFormat>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Settings read from `--config`. Every field is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub threads: Option<usize>,
    pub covariates: Option<PathBuf>,
    pub series_dir: Option<PathBuf>,
    pub thin: Option<usize>,
    pub center: Option<bool>,
    pub estimator: Option<Estimator>,
    pub seed: Option<u64>,
    pub inits: Option<usize>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub deflation: Option<DeflationMetric>,
    pub components: Option<usize>,
    pub component: Option<usize>,
    #[serde(rename = "B")]
    pub replicates_boot: Option<usize>,
    pub level: Option<f64>,
    pub refit_gamma: Option<bool>,
    pub preset: Option<Preset>,
    pub p: Option<Vec<usize>>,
    pub n: Option<Vec<usize>>,
    pub t: Option<Vec<usize>>,
    pub replicates: Option<usize>,
    pub format: Option<OutputFormat>,
    pub out: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CovcapError::Input {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CovcapError::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DataConfig {
    pub covariates: PathBuf,
    pub series_dir: PathBuf,
    pub thin: usize,
    pub center: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateConfig {
    pub preset: Preset,
    pub p: Vec<usize>,
    pub sizes: Vec<(usize, usize)>,
    pub replicates: usize,
    pub bootstrap: Option<BootstrapConfig>,
    pub format: OutputFormat,
}

/// Fully resolved settings of one invocation; echoed into the output.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    pub fit: FitConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub component: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    pub threads: usize,
    pub out: Option<PathBuf>,
}

fn resolve_data(args: &DataArgs, file: &FileConfig) -> Result<DataConfig> {
    let covariates = args
        .covariates
        .clone()
        .or_else(|| file.covariates.clone())
        .ok_or_else(|| CovcapError::InvalidConfig("--covariates is required".into()))?;
    let series_dir = args
        .series_dir
        .clone()
        .or_else(|| file.series_dir.clone())
        .ok_or_else(|| CovcapError::InvalidConfig("--series-dir is required".into()))?;
    let thin = args.thin.or(file.thin).unwrap_or(1);
    if thin == 0 {
        return Err(CovcapError::InvalidConfig("--thin must be at least 1".into()));
    }
    let center = if args.no_center { false } else { file.center.unwrap_or(true) };
    Ok(DataConfig {
        covariates,
        series_dir,
        thin,
        center,
    })
}

fn resolve_fit(args: &SolverArgs, file: &FileConfig) -> Result<FitConfig> {
    let defaults = FitConfig::default();
    let cfg = FitConfig {
        estimator: args.estimator.or(file.estimator).unwrap_or(defaults.estimator),
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
        n_inits: args.inits.or(file.inits),
        max_outer_iters: args.max_iter.or(file.max_iter).unwrap_or(defaults.max_outer_iters),
        objective_rel_tol: args.tol.or(file.tol).unwrap_or(defaults.objective_rel_tol),
        deflation: args.deflation.or(file.deflation).unwrap_or_default(),
        ..defaults
    };
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_bootstrap(replicates: Option<usize>, level: Option<f64>, seed: u64, refit: bool, file: &FileConfig) -> BootstrapConfig {
    let defaults = BootstrapConfig::default();
    BootstrapConfig {
        replicates: replicates.or(file.replicates_boot).unwrap_or(defaults.replicates),
        level: level.or(file.level).unwrap_or(defaults.level),
        seed,
        refit_gamma: refit || file.refit_gamma.unwrap_or(false),
    }
}

fn resolve_format(explicit: Option<OutputFormat>, out: Option<&Path>) -> OutputFormat {
    explicit.unwrap_or_else(|| match out.and_then(|p| p.extension()).and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => OutputFormat::Csv,
        _ => OutputFormat::Json,
    })
}

impl RunConfig {
    pub fn resolve(cli: &Cli) -> Result<Self> {
        let file = match &cli.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let threads = cli.threads.or(file.threads).unwrap_or(0);
        let blank = |command| RunConfig {
            command,
            data: None,
            fit: FitConfig::default(),
            components: None,
            component: None,
            bootstrap: None,
            simulate: None,
            threads,
            out: None,
        };
        let config = match &cli.command {
            Command::Fit(args) | Command::Components(args) => {
                let (command, default_k) = match cli.command {
                    Command::Fit(_) => ("fit", 1),
                    _ => ("components", 2),
                };
                RunConfig {
                    data: Some(resolve_data(&args.data, &file)?),
                    fit: resolve_fit(&args.solver, &file)?,
                    components: Some(args.components.or(file.components).unwrap_or(default_k)),
                    out: args.out.clone().or_else(|| file.out.clone()),
                    ..blank(command)
                }
            }
            Command::Bootstrap(args) => {
                let fit = resolve_fit(&args.solver, &file)?;
                let boot = resolve_bootstrap(args.replicates, args.level, fit.seed, args.refit_gamma, &file);
                boot.validate()?;
                let component = args.component.or(file.component).unwrap_or(1);
                if component == 0 {
                    return Err(CovcapError::InvalidConfig("--component is 1-based".into()));
                }
                if boot.refit_gamma && component != 1 {
                    return Err(CovcapError::InvalidConfig(
                        "--refit-gamma is only available for the first component".into(),
                    ));
                }
                RunConfig {
                    data: Some(resolve_data(&args.data, &file)?),
                    fit,
                    component: Some(component),
                    bootstrap: Some(boot),
                    out: args.out.clone().or_else(|| file.out.clone()),
                    ..blank("bootstrap")
                }
            }
            Command::Simulate(args) => {
                let fit = resolve_fit(&args.solver, &file)?;
                let preset = args
                    .preset
                    .or(file.preset)
                    .ok_or_else(|| CovcapError::InvalidConfig("--preset is required".into()))?;
                let pick = |flag: &Option<Vec<usize>>, from_file: &Option<Vec<usize>>, default: &[usize]| {
                    flag.clone().or_else(|| from_file.clone()).unwrap_or_else(|| default.to_vec())
                };
                let (ps, ns, ts) = match preset {
                    Preset::Table1 => (
                        pick(&args.p, &file.p, &[20, 50, 100]),
                        pick(&args.n, &file.n, &[50]),
                        pick(&args.t, &file.t, &[50]),
                    ),
                    Preset::Table2 => (
                        pick(&args.p, &file.p, &[100]),
                        pick(&args.n, &file.n, &[100]),
                        pick(&args.t, &file.t, &[100]),
                    ),
                };
                if ps.is_empty() || ns.is_empty() || ts.is_empty() {
                    return Err(CovcapError::InvalidConfig("--p, --n and --t need at least one value".into()));
                }
                if preset == Preset::Table2 && ps.len() != 1 {
                    return Err(CovcapError::InvalidConfig("table2 takes a single --p".into()));
                }
                let sizes: Vec<(usize, usize)> = ns.iter().flat_map(|&n| ts.iter().map(move |&t| (n, t))).collect();
                if preset == Preset::Table1 && sizes.len() != 1 {
                    return Err(CovcapError::InvalidConfig("table1 takes a single --n and --t".into()));
                }
                let replicates = args.replicates.or(file.replicates).unwrap_or(100);
                if replicates == 0 {
                    return Err(CovcapError::InvalidConfig("--replicates must be positive".into()));
                }
                let b = args.bootstrap.or(file.replicates_boot).unwrap_or(0);
                let bootstrap = if b == 0 {
                    None
                } else if preset == Preset::Table1 {
                    return Err(CovcapError::InvalidConfig("bootstrap coverage is only computed for table2".into()));
                } else {
                    let boot = resolve_bootstrap(Some(b), args.level, fit.seed, false, &file);
                    boot.validate()?;
                    Some(boot)
                };
                let out = args.out.clone().or_else(|| file.out.clone());
                let format = resolve_format(args.format.or(file.format), out.as_deref());
                RunConfig {
                    fit,
                    simulate: Some(SimulateConfig {
                        preset,
                        p: ps,
                        sizes,
                        replicates,
                        bootstrap,
                        format,
                    }),
                    out,
                    ..blank("simulate")
                }
            }
        };
        Ok(config)
    }

    fn data(&self) -> &DataConfig {
        self.data.as_ref().expect("command reads data")
    }
}

#[derive(Debug, Serialize)]
pub struct ComponentMetrics {
    pub estimator: &'static str,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub init_index: usize,
    pub n_inits: usize,
    pub failed_inits: usize,
    pub shrinkage: Option<ShrinkageParams>,
}

#[derive(Debug, Serialize)]
pub struct IntervalReport {
    pub component: usize,
    pub level: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub replicates: usize,
    pub failed: usize,
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
pub enum Metrics {
    Fit(Vec<ComponentMetrics>),
    Simulation(Vec<SimMetrics>),
}

/// The JSON document every command produces.
#[derive(Debug, Serialize)]
pub struct Report {
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub objective_trace: Vec<Vec<f64>>,
    pub dfd: Vec<f64>,
    pub ci: Option<IntervalReport>,
    pub metrics: Metrics,
    pub seed: u64,
    pub config_echo: RunConfig,
    pub timestamp: u64,
}

impl Report {
    fn new(config: RunConfig, metrics: Metrics) -> Self {
        Report {
            gamma: Vec::new(),
            beta: Vec::new(),
            objective_trace: Vec::new(),
            dfd: Vec::new(),
            ci: None,
            metrics,
            seed: config.fit.seed,
            config_echo: config,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }

    fn with_components(mut self, set: &ComponentSet) -> Self {
        self.gamma = set.components.iter().map(|c| c.gamma.iter().copied().collect()).collect();
        self.beta = set.components.iter().map(|c| c.beta.iter().copied().collect()).collect();
        self.objective_trace = set.components.iter().map(|c| c.objective_trace.clone()).collect();
        self.dfd = set.dfd.clone();
        self
    }
}

fn component_metrics(set: &ComponentSet) -> Metrics {
    Metrics::Fit(
        set.components
            .iter()
            .map(|c| ComponentMetrics {
                estimator: c.estimator.label(),
                objective: c.objective,
                iterations: c.iterations,
                converged: c.converged,
                init_index: c.init_index,
                n_inits: c.n_inits,
                failed_inits: c.failed_inits,
                shrinkage: c.shrinkage.clone(),
            })
            .collect(),
    )
}

fn load(config: &RunConfig) -> Result<crate::data::Study> {
    let data = config.data();
    ingest(&data.covariates, &data.series_dir, data.thin, data.center)
}

pub fn cmd_fit(config: RunConfig) -> Result<Report> {
    let study = load(&config)?;
    let k = config.components.unwrap_or(1);
    let set = fit_components(&study, k, &config.fit)?;
    let metrics = component_metrics(&set);
    Ok(Report::new(config, metrics).with_components(&set))
}

pub fn cmd_bootstrap(config: RunConfig) -> Result<Report> {
    let study = load(&config)?;
    let j = config.component.unwrap_or(1);
    let boot = config.bootstrap.clone().unwrap_or_default();
    let set = fit_components(&study, j, &config.fit)?;
    let fit = &set.components[j - 1];
    let result: BootstrapResult = bootstrap_beta(&study, fit, &boot, &config.fit)?;
    let ci = IntervalReport {
        component: j,
        level: result.level,
        lower: result.ci_lower.iter().copied().collect(),
        upper: result.ci_upper.iter().copied().collect(),
        replicates: result.requested,
        failed: result.failed,
    };
    let metrics = component_metrics(&set);
    let mut report = Report::new(config, metrics).with_components(&set);
    report.ci = Some(ci);
    Ok(report)
}

pub fn cmd_simulate(config: RunConfig) -> Result<Report> {
    let sim = config.simulate.clone().expect("simulate settings");
    let metrics = match sim.preset {
        Preset::Table1 => {
            let (n, t) = sim.sizes[0];
            run_table1(&sim.p, n, t, sim.replicates, config.fit.seed, &config.fit)?
        }
        Preset::Table2 => run_table2(
            sim.p[0],
            &sim.sizes,
            sim.replicates,
            sim.bootstrap.as_ref(),
            config.fit.seed,
            &config.fit,
        )?,
    };
    Ok(Report::new(config, Metrics::Simulation(metrics)))
}

#[derive(Serialize)]
struct Table1Row<'a> {
    p: usize,
    dim: usize,
    method: &'a str,
    bias_eigen: f64,
    mse_eigen: f64,
    bias_beta1: f64,
    mse_beta1: f64,
}

#[derive(Serialize)]
struct Table2Row<'a> {
    p: usize,
    n: usize,
    t: usize,
    dim: usize,
    method: &'a str,
    bias_beta1: f64,
    mse_beta1: f64,
    coverage: Option<f64>,
    similarity: f64,
    similarity_se: f64,
    bias_eigen: f64,
    mse_eigen: f64,
}

/// Writes simulation metrics as a CSV table.
pub fn write_metrics_csv<W: Write>(preset: Preset, metrics: &[SimMetrics], out: W) -> Result<()> {
    let to_err = |e: csv::Error| CovcapError::Io(std::io::Error::other(e));
    let mut writer = csv::Writer::from_writer(out);
    for m in metrics {
        match preset {
            Preset::Table1 => writer.serialize(Table1Row {
                p: m.p,
                dim: m.dim,
                method: &m.method,
                bias_eigen: m.bias_eigen,
                mse_eigen: m.mse_eigen,
                bias_beta1: m.bias_beta1,
                mse_beta1: m.mse_beta1,
            }),
            Preset::Table2 => writer.serialize(Table2Row {
                p: m.p,
                n: m.n,
                t: m.t,
                dim: m.dim,
                method: &m.method,
                bias_beta1: m.bias_beta1,
                mse_beta1: m.mse_beta1,
                coverage: m.coverage,
                similarity: m.similarity,
                similarity_se: m.similarity_se,
                bias_eigen: m.bias_eigen,
                mse_eigen: m.mse_eigen,
            }),
        }
        .map_err(to_err)?;
    }
    writer.flush()?;
    Ok(())
}

fn emit(report: &Report, out: Option<&Path>) -> Result<()> {
    let csv_preset = report
        .config_echo
        .simulate
        .as_ref()
        .filter(|s| s.format == OutputFormat::Csv)
        .map(|s| s.preset);
    let mut sink: Box<dyn Write> = match out {
        Some(path) => Box::new(std::io::BufWriter::new(std::fs::File::create(path)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    match (csv_preset, &report.metrics) {
        (Some(preset), Metrics::Simulation(rows)) => write_metrics_csv(preset, rows, &mut sink)?,
        _ => {
            serde_json::to_writer_pretty(&mut sink, report)
                .map_err(|e| CovcapError::Io(std::io::Error::other(e)))?;
            writeln!(sink)?;
        }
    }
    sink.flush()?;
    Ok(())
}

fn configure_threads(threads: usize) {
    if threads > 0 {
        // Fails only if a pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

/// Executes a parsed command line and writes its output.
pub fn run(cli: &Cli) -> Result<()> {
    let config = RunConfig::resolve(cli)?;
    configure_threads(config.threads);
    let out = config.out.clone();
    let report = match cli.command {
        Command::Fit(_) | Command::Components(_) => cmd_fit(config)?,
        Command::Bootstrap(_) => cmd_bootstrap(config)?,
        Command::Simulate(_) => cmd_simulate(config)?,
    };
    emit(&report, out.as_deref())
}
