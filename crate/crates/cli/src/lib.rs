//! Command-line front end: config layering, presets, run directories.
//!
//! Exit codes: 0 on success, 1 when `--assert-safe` is set and the run
//! found the queried behavior unsafe, 2 on any configuration, argument or
//! runtime error.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use toml::{Table, Value};

pub mod commands;
pub mod config;
pub mod rundir;

pub use config::RunConfig;

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "PERCEPT_REACH_WORKERS";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Argument(String),
    Io(String),
    Core(percept_reach::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Argument(m) => write!(f, "argument error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<percept_reach::Error> for CliError {
    fn from(e: percept_reach::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "percept-reach", version, about = "Reachability verification of perception-based closed loops")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in case study: taxiing or rover.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Rung of the taxiing coverage ladder.
    #[arg(long, global = true, default_value_t = 0)]
    pub coverage_index: usize,
    /// Rover controller: mpc or mlp.
    #[arg(long, global = true, default_value = "mpc")]
    pub controller: String,
    /// Full-size preset grids instead of the desk-scale ones.
    #[arg(long, global = true)]
    pub full: bool,
    /// File holding the [model] section.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// File holding the [failure] section.
    #[arg(long, global = true)]
    pub failure: Option<PathBuf>,
    /// File holding the [grid] section.
    #[arg(long, global = true)]
    pub grid: Option<PathBuf>,
    /// Precomputed control-bounds field for table or network controllers.
    #[arg(long, global = true)]
    pub bounds: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to $PERCEPT_REACH_WORKERS, then all cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Exit with code 1 when the run finds the queried behavior unsafe.
    #[arg(long, global = true)]
    pub assert_safe: bool,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub t0: Option<f64>,
    /// Final time.
    #[arg(long = "T", global = true, allow_hyphen_values = true)]
    pub t_final: Option<f64>,
    #[arg(long, global = true)]
    pub cfl: Option<f64>,
    /// Query state, comma separated.
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub dark_time_max: Option<f64>,
    #[arg(long, global = true)]
    pub dark_time_steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the value field.
    Solve,
    /// Build a control-bounds field for a table or network controller.
    Bounds,
    /// Sweep tan-controller gains and record V(x0, t0).
    Sweep(SweepArgs),
    /// Synthesize the dark-time budget.
    Budget,
    /// Worst-case rollout from x0.
    Rollout(RolloutArgs),
    /// Monte Carlo safety estimate from x0.
    Mc(McArgs),
    /// Worst-case rollouts under the light policy.
    PolicyCheck(PolicyArgs),
    /// Export a 2D slice of a binary field as CSV.
    ExportSlice(ExportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Range of gain a as lo,hi.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub a_range: Option<Vec<f64>>,
    /// Range of gain b as lo,hi.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub b_range: Option<Vec<f64>>,
    #[arg(long)]
    pub a_count: Option<usize>,
    #[arg(long)]
    pub b_count: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct RolloutArgs {
    /// Reuse a solved value field instead of solving.
    #[arg(long)]
    pub value: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct McArgs {
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct PolicyArgs {
    /// Number of starts to check.
    #[arg(long)]
    pub count: Option<usize>,
    /// Lights-on margin in seconds.
    #[arg(long)]
    pub margin: Option<f64>,
    /// Rollout duration in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    /// Binary field: value field, scalar field, dark budget or control bounds.
    #[arg(long)]
    pub field: PathBuf,
    /// Time of the value-field slice; defaults to t0.
    #[arg(long, allow_hyphen_values = true)]
    pub time: Option<f64>,
    /// The two axes spanning the slice, as i,j or names.
    #[arg(long, value_delimiter = ',')]
    pub axes: Option<Vec<String>>,
    /// Held axis; pairs with --at in order.
    #[arg(long)]
    pub dim: Vec<String>,
    /// Held value for the matching --dim.
    #[arg(long, allow_hyphen_values = true)]
    pub at: Vec<f64>,
    /// For control bounds: lower or upper.
    #[arg(long, default_value = "lower")]
    pub bound: String,
    /// For control bounds: control component.
    #[arg(long, default_value_t = 0)]
    pub control: usize,
    /// Output file name inside the run directory.
    #[arg(long, default_value = "slice.csv")]
    pub name: String,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Bounds => "bounds",
            Command::Sweep(_) => "sweep",
            Command::Budget => "budget",
            Command::Rollout(_) => "rollout",
            Command::Mc(_) => "mc",
            Command::PolicyCheck(_) => "policy-check",
            Command::ExportSlice(_) => "export-slice",
        }
    }
}

fn set(table: &mut Table, path: &[&str], value: Value) {
    let (last, parents) = path.split_last().expect("non-empty key path");
    let mut t = table;
    for p in parents {
        let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        if !entry.is_table() {
            *entry = Value::Table(Table::new());
        }
        t = entry.as_table_mut().expect("table");
    }
    t.insert(last.to_string(), value);
}

/// A section file holds the section's keys at top level, or the section
/// itself as a table.
fn section_file(path: &Path, section: &str) -> Result<Value, CliError> {
    let t = config::read_toml(path)?;
    if t.len() == 1 && matches!(t.get(section), Some(Value::Table(_))) {
        return Ok(t[section].clone());
    }
    Ok(Value::Table(t))
}

fn floats(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|x| Value::Float(*x)).collect())
}

/// Preset, then config file, then section files, then flags.
pub fn assemble_config(common: &Common, command: &Command) -> Result<RunConfig, CliError> {
    let mut table = match common.preset.as_deref() {
        None => Table::new(),
        Some("taxiing") => config::to_table(&config::preset_taxiing(common.coverage_index, common.full)?),
        Some("rover") => config::to_table(&config::preset_rover(&common.controller, common.full)?),
        Some(other) => return Err(CliError::Config(format!("--preset: expected taxiing or rover, got {other:?}"))),
    };
    if let Some(path) = &common.config {
        config::merge(&mut table, config::read_toml(path)?);
    }
    for (path, section) in [(&common.grid, "grid"), (&common.model, "model"), (&common.failure, "failure")] {
        if let Some(path) = path {
            // a section file replaces the section wholesale
            table.insert(section.to_string(), section_file(path, section)?);
        }
    }
    if let Some(s) = common.seed {
        set(&mut table, &["seed"], Value::Integer(s as i64));
    }
    if let Some(w) = common.workers {
        set(&mut table, &["workers"], Value::Integer(w as i64));
    }
    if let Some(t) = common.t0 {
        set(&mut table, &["solve", "t0"], Value::Float(t));
    }
    if let Some(t) = common.t_final {
        set(&mut table, &["solve", "t_final"], Value::Float(t));
    }
    if let Some(c) = common.cfl {
        set(&mut table, &["solve", "cfl"], Value::Float(c));
    }
    if let Some(x) = &common.x0 {
        set(&mut table, &["query", "x0"], floats(x));
    }
    if let Some(m) = common.dark_time_max {
        set(&mut table, &["dark", "max"], Value::Float(m));
    }
    if let Some(k) = common.dark_time_steps {
        set(&mut table, &["dark", "samples"], Value::Integer(k as i64));
    }
    if let Some(p) = &common.bounds {
        set(&mut table, &["bounds", "path"], Value::String(p.display().to_string()));
    }
    match command {
        Command::Sweep(a) => {
            let any = a.a_range.is_some() || a.b_range.is_some() || a.a_count.is_some() || a.b_count.is_some();
            if any && !table.contains_key("sweep") {
                let d = config::to_table(&RunConfig { sweep: Some(Default::default()), ..Default::default() });
                config::merge(&mut table, d);
            }
            if let Some(r) = &a.a_range {
                set(&mut table, &["sweep", "a"], floats(r));
            }
            if let Some(r) = &a.b_range {
                set(&mut table, &["sweep", "b"], floats(r));
            }
            if let Some(n) = a.a_count {
                set(&mut table, &["sweep", "a_count"], Value::Integer(n as i64));
            }
            if let Some(n) = a.b_count {
                set(&mut table, &["sweep", "b_count"], Value::Integer(n as i64));
            }
        }
        Command::Mc(a) => {
            if (a.samples.is_some() || a.dt.is_some()) && !table.contains_key("mc") {
                let d = config::to_table(&RunConfig { mc: Some(Default::default()), ..Default::default() });
                config::merge(&mut table, d);
            }
            if let Some(n) = a.samples {
                set(&mut table, &["mc", "samples"], Value::Integer(n as i64));
            }
            if let Some(dt) = a.dt {
                set(&mut table, &["mc", "dt"], Value::Float(dt));
            }
        }
        Command::PolicyCheck(a) => {
            if let Some(n) = a.count {
                set(&mut table, &["policy", "count"], Value::Integer(n as i64));
            }
            if let Some(m) = a.margin {
                set(&mut table, &["policy", "margin"], Value::Float(m));
            }
            if let Some(d) = a.duration {
                set(&mut table, &["policy", "duration"], Value::Float(d));
            }
        }
        _ => {}
    }
    config::from_table(table)
}

fn worker_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if let Some(w) = flag {
        return Ok(Some(w));
    }
    match std::env::var(WORKERS_ENV) {
        Ok(s) if !s.trim().is_empty() => s
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{WORKERS_ENV}: expected a worker count, got {s:?}"))),
        _ => Ok(None),
    }
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &argv) {
        Ok(unsafe_found) => i32::from(unsafe_found && cli.common.assert_safe),
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Returns whether the run found the queried behavior unsafe.
fn execute(cli: &Cli, argv: &[String]) -> Result<bool, CliError> {
    let cfg = match &cli.command {
        Command::ExportSlice(_) => None,
        cmd => Some(assemble_config(&cli.common, cmd)?),
    };
    let workers = worker_count(cli.common.workers.or(cfg.as_ref().and_then(|c| c.workers)))?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(CliError::Config("workers: must be at least 1".into()));
        }
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(|e| CliError::Config(format!("workers: {e}")))?;
    pool.install(|| commands::dispatch(&cli.command, cfg, &cli.common, argv))
}
