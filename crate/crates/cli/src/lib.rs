//! `probit` command-line driver: single runs, parameter sweeps and the
//! oracle suite.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use probit_core::aggregator::write_receipts_csv;
use probit_core::config::ExperimentConfig;
use probit_core::engine::run_training;
use probit_core::verify::{run_suites, write_reports_csv, RangePolicy, Suite, SuiteOptions};
use probit_core::ProbitError;

pub const OUT_DIR_ENV: &str = "PROBIT_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "probit", version, about = "Federated learning with one-bit private, robust aggregation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train once and write metrics, receipts, the final model and a manifest.
    Run {
        /// TOML experiment config, or a manifest.json from an earlier run.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: config `output`, then $PROBIT_OUT_DIR, then ./results).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run oracle checks and print one CSV report line per check.
    Verify {
        /// Comma-separated: unbiasedness, variance, byzantine, dp, decay, all.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        suite: Vec<String>,
        /// Trials per check (default: each check's own setting).
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Audit privacy with b set to the update bound, without the margin.
        #[arg(long)]
        no_dp_margin: bool,
        /// Also write the reports to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per value of one parameter and collect final accuracies.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, resolved as for `run`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    #[value(name = "M")]
    M,
    Beta,
    Epsilon,
}

/// A failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or configuration: exit 2.
    Usage(anyhow::Error),
    /// Anything that went wrong while working: exit 1.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl From<ProbitError> for Failure {
    fn from(e: ProbitError) -> Self {
        match e {
            ProbitError::Config(_) | ProbitError::Parse(_) => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub git_describe: String,
    pub seed: u64,
    /// Naive composition `rounds * epsilon`; each round is certified separately.
    pub privacy_total_epsilon: Option<f64>,
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Reads a TOML config or a JSON manifest.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Usage)?;
    if path.extension().is_some_and(|e| e == "json") {
        let manifest: Manifest = serde_json::from_str(&text)
            .with_context(|| format!("{}: invalid manifest", path.display()))
            .map_err(Failure::Usage)?;
        manifest.config.validate()?;
        return Ok(manifest.config);
    }
    ExperimentConfig::from_toml(&text).map_err(|e| Failure::Usage(anyhow::anyhow!("{}: {e}", path.display())))
}

fn out_dir(flag: Option<PathBuf>, config: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| config.output.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn create(path: &Path) -> Result<io::BufWriter<fs::File>, Failure> {
    let f = fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(Failure::Runtime)?;
    Ok(io::BufWriter::new(f))
}

pub fn cmd_run(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<PathBuf, Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = out_dir(out, &cfg);
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::Runtime)?;
    let outcome = run_training(&cfg)?;

    outcome.log.write_csv(create(&dir.join("metrics.csv"))?)?;
    if !outcome.receipts.is_empty() {
        write_receipts_csv(&outcome.receipts, create(&dir.join("receipts.csv"))?)?;
    }
    let mut model = create(&dir.join("final_model.csv"))?;
    writeln!(model, "index,value").map_err(runtime)?;
    for (i, w) in outcome.final_model.iter().enumerate() {
        writeln!(model, "{i},{w}").map_err(runtime)?;
    }
    model.flush().map_err(runtime)?;

    let manifest = Manifest {
        seed: cfg.seed,
        privacy_total_epsilon: cfg
            .privacy
            .enabled
            .then_some(cfg.schedule.rounds as f64 * cfg.privacy.epsilon),
        git_describe: git_describe(),
        config: cfg,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(runtime)?;
    fs::write(dir.join("manifest.json"), json + "\n").map_err(runtime)?;
    Ok(dir)
}

/// Expands suite names; `all` selects every suite.
pub fn parse_suites(names: &[String]) -> Result<Vec<Suite>, Failure> {
    if names.is_empty() {
        return Err(Failure::Usage(anyhow::anyhow!("--suite needs at least one name")));
    }
    let mut suites = Vec::new();
    for n in names {
        let picked = if n == "all" {
            Suite::ALL.to_vec()
        } else {
            vec![n.parse::<Suite>()?]
        };
        for s in picked {
            if !suites.contains(&s) {
                suites.push(s);
            }
        }
    }
    Ok(suites)
}

/// Returns whether every check passed.
pub fn cmd_verify(
    names: &[String],
    trials: Option<usize>,
    seed: u64,
    no_dp_margin: bool,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<bool, Failure> {
    let suites = parse_suites(names)?;
    if trials.is_some_and(|t| t < 2) {
        return Err(Failure::Usage(anyhow::anyhow!("--trials must be at least 2")));
    }
    let opts = SuiteOptions {
        seed,
        trials,
        dp_policy: if no_dp_margin {
            RangePolicy::NoMargin
        } else {
            RangePolicy::Calibrated
        },
    };
    let reports = run_suites(&suites, &opts)?;
    write_reports_csv(&reports, &mut *stdout)?;
    if let Some(path) = out {
        write_reports_csv(&reports, create(path)?)?;
    }
    Ok(reports.iter().all(|r| r.pass))
}

pub const SWEEP_HEADER: &str = "axis,value,scheme,seed,final_test_acc,final_train_loss";

pub fn cmd_sweep(
    config: &Path,
    axis: Axis,
    values: &[f64],
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<PathBuf, Failure> {
    let mut base = load_config(config)?;
    if let Some(s) = seed {
        base.seed = s;
    }
    let dir = out_dir(out, &base);
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::Runtime)?;
    let mut rows = vec![SWEEP_HEADER.to_string()];
    let name = match axis {
        Axis::M => "M",
        Axis::Beta => "beta",
        Axis::Epsilon => "epsilon",
    };
    for &v in values {
        let mut cfg = base.clone();
        match axis {
            Axis::M => {
                if !(v >= 1.0 && v.fract() == 0.0) {
                    return Err(Failure::Usage(anyhow::anyhow!("client count {v} is not a positive integer")));
                }
                cfg.topology.clients = v as usize;
            }
            Axis::Beta => cfg.topology.beta = v,
            Axis::Epsilon => {
                cfg.privacy.enabled = true;
                cfg.privacy.epsilon = v;
            }
        }
        cfg.validate()
            .map_err(|e| Failure::Usage(anyhow::anyhow!("{name} = {v}: {e}")))?;
        let last = run_training(&cfg)?.log.last().clone();
        rows.push(format!(
            "{name},{v},{},{},{},{}",
            cfg.scheme, cfg.seed, last.test_acc, last.train_loss
        ));
    }
    let path = dir.join(format!("sweep_{name}.csv"));
    fs::write(&path, rows.join("\n") + "\n").map_err(runtime)?;
    Ok(path)
}

/// Executes a parsed command line and maps the outcome to an exit code.
pub fn execute(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Cmd::Run { config, seed, out } => cmd_run(&config, seed, out).map(|dir| {
            eprintln!("wrote {}", dir.display());
            true
        }),
        Cmd::Verify {
            suite,
            trials,
            seed,
            no_dp_margin,
            out,
        } => cmd_verify(&suite, trials, seed, no_dp_margin, out.as_deref(), &mut io::stdout().lock()),
        Cmd::Sweep {
            config,
            axis,
            values,
            seed,
            out,
        } => cmd_sweep(&config, axis, &values, seed, out).map(|path| {
            eprintln!("wrote {}", path.display());
            true
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some checks failed");
            ExitCode::from(1)
        }
        Err(f) => {
            let (Failure::Usage(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}
