use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ergoswarm::scenario::{self, comparison_table, describe, preset, Mode, RunLog, ScenarioConfig, Table, PRESETS};
use ergoswarm::Error;
use log::{info, warn};

#[derive(Parser)]
#[command(name = "ergoswarm", version, about = "Decentralized ergodic coverage scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its log, summary and resolved config.
    Run {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run decentralized and centralized with the same seed and compare.
    Compare {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// List the built-in presets.
    Presets,
    /// Check a configuration without running it.
    Validate {
        #[command(flatten)]
        source: Source,
    },
    /// Turn a run directory into plot-ready CSV files.
    Export {
        /// Directory written by `run`.
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Source {
    /// TOML or JSON scenario file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long = "rounds-per-step")]
    rounds_per_step: Option<usize>,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    error: Error,
}

impl Failure {
    fn parse(error: Error) -> Self {
        Failure { code: 2, error }
    }
    fn invalid(error: Error) -> Self {
        Failure { code: 3, error }
    }
    fn runtime(error: Error) -> Self {
        Failure { code: 4, error }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::runtime(e.into())
    }
}

type CliResult<T> = Result<T, Failure>;

fn load(source: &Source) -> CliResult<ScenarioConfig> {
    let mut config = match (&source.config, &source.preset) {
        (Some(path), _) => ScenarioConfig::load(path).map_err(|e| match e {
            Error::Io(msg) => Failure::parse(Error::Io(format!("{}: {msg}", path.display()))),
            other => Failure::parse(other),
        })?,
        (None, Some(name)) => preset(name).map_err(Failure::parse)?,
        (None, None) => unreachable!("clap requires a source"),
    };
    if let Some(seed) = source.seed {
        config.seed = seed;
    }
    if let Some(mode) = source.mode {
        config.mode = mode;
    }
    if let Some(r) = source.rounds_per_step {
        config.rounds_per_step = r;
    }
    config.validate().map_err(Failure::invalid)?;
    Ok(config)
}

fn execute(config: &ScenarioConfig, mode: Mode) -> CliResult<RunLog> {
    info!("running `{}` ({mode}) for {} s", config.name, config.duration);
    let log = match mode {
        Mode::Decentralized => scenario::run_decentralized(config),
        Mode::Centralized => scenario::run_centralized(config),
    };
    log.map_err(|e| match e {
        e @ (Error::InvalidConfig(_) | Error::InvalidNetwork(_)) => Failure::invalid(e),
        e => Failure::runtime(e),
    })
}

fn write_dir(log: &RunLog, dir: &Path) -> CliResult<()> {
    for path in log.write_dir(dir).map_err(Failure::runtime)? {
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn write_table(table: &Table, path: &Path) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    table.write_csv(&mut w).map_err(Failure::runtime)?;
    w.flush()?;
    info!("wrote {}", path.display());
    Ok(())
}

fn final_metric(log: &RunLog) -> f64 {
    log.records.last().map_or(f64::NAN, |r| r.collective_metric)
}

fn run(source: &Source, out: &Path) -> CliResult<()> {
    let config = load(source)?;
    let log = execute(&config, config.mode)?;
    write_dir(&log, out)?;
    println!("{}: collective metric {:.6} -> {:.6}", config.name, log.records[0].collective_metric, final_metric(&log));
    Ok(())
}

fn compare(source: &Source, out: &Path) -> CliResult<()> {
    let config = load(source)?;
    let dec = execute(&config, Mode::Decentralized)?;
    let cen = execute(&config, Mode::Centralized)?;
    write_dir(&dec, &out.join("dec"))?;
    write_dir(&cen, &out.join("cen"))?;
    let table = comparison_table(&dec, &cen).map_err(Failure::runtime)?;
    write_table(&table, &out.join("comparison.csv"))?;
    let ratio = table.rows.last().map_or(f64::NAN, |r| r[3]);
    println!("E_dec {:.6}, E_cen {:.6}, ratio {ratio:.4}", final_metric(&dec), final_metric(&cen));
    Ok(())
}

/// `trajectories.csv` (t, agent, state...) and `insertions.csv`.
fn export(run: &Path, out: &Path) -> CliResult<()> {
    let open = |name: &str| -> CliResult<BufReader<File>> {
        let path = run.join(name);
        File::open(&path)
            .map(BufReader::new)
            .map_err(|e| Failure::parse(Error::Io(format!("{}: {e}", path.display()))))
    };
    let records = RunLog::read_records(open(scenario::LOG_FILE)?).map_err(Failure::parse)?;
    std::fs::create_dir_all(out)?;

    let width = records.first().and_then(|r| r.states.first()).map_or(0, Vec::len);
    let mut columns = vec!["t".to_string(), "agent".to_string()];
    columns.extend((1..=width).map(|i| format!("x{i}")));
    let mut traj = Table { columns, rows: Vec::new() };
    let mut ins = Table {
        columns: ["t", "agent", "tau", "lambda", "predicted_delta", "delta_e"].map(String::from).to_vec(),
        rows: Vec::new(),
    };
    for r in &records {
        for (j, s) in r.states.iter().enumerate() {
            let mut row = vec![r.t, j as f64];
            row.extend(s);
            row.resize(width + 2, f64::NAN);
            traj.rows.push(row);
        }
        for (j, i) in r.insertions.iter().enumerate() {
            if let Some(i) = i {
                ins.rows.push(vec![r.t, j as f64, i.tau, i.lambda, i.predicted_delta, i.cost_after - i.cost_before]);
            }
        }
    }
    write_table(&traj, &out.join("trajectories.csv"))?;
    write_table(&ins, &out.join("insertions.csv"))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ERGOSWARM_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { source, out } => run(source, out),
        Command::Compare { source, out } => compare(source, out),
        Command::Presets => {
            for name in PRESETS {
                println!("{name:<14}{}", describe(name).unwrap_or_default());
            }
            Ok(())
        }
        Command::Validate { source } => load(source).map(|c| {
            if c.obstacles.is_empty() && c.target.is_localization() {
                warn!("localization scenario without obstacles");
            }
            println!("ok: {} ({} agents, {} steps)", c.name, c.agent_count(), c.steps());
        }),
        Command::Export { run, out } => export(run, out.as_deref().unwrap_or(run)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
