use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ahsse_core::bath::{covariance_matrix, kernel_table, write_kernel_table, Branch};
use ahsse_core::config::SimulationConfig;
use ahsse_core::ensemble::{kl_pair, run_config, run_qme, write_results};
use ahsse_core::noise::validate_covariance;
use ahsse_core::{Error, Result};
use clap::{Parser, Subcommand};

/// Stochastic Schrödinger equation ensembles and master equations for
/// Anderson-Holstein impurities.
#[derive(Parser, Debug)]
#[command(name = "ahsse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the ensemble (and QME, if configured) described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config entry, e.g. `--set physics.lambda=0.01`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory (defaults to `output.directory`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a built-in experiment: example1, example2, example3 or sse_vs_qme.
    Preset {
        name: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the resolved config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Tabulate the bath kernels c±(τ) on the config's time grid.
    Kernels {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample noise paths and compare their covariance with the kernel.
    NoiseValidate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrate the master equation of the config's `qme` section.
    Qme {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output_dir(config: &SimulationConfig, out: Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| config.output.directory.clone());
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let wrap = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(wrap)?);
    f(&mut w).and_then(|_| w.flush()).map_err(wrap)
}

/// Prints to stdout, ignoring a closed pipe.
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn report_written(paths: &[PathBuf]) {
    for p in paths {
        out!("wrote {}", p.display());
    }
}

fn run_and_write(config: &SimulationConfig, out: Option<PathBuf>) -> Result<()> {
    let result = run_config(config)?;
    let dir = output_dir(config, out)?;
    let written = write_results(&result, &dir)?;
    let m = &result.metadata;
    out!(
        "{}: {} trajectories completed, {} aborted, {:.1} s on {} thread(s)",
        config.name, m.completed, m.aborted, m.wall_clock_seconds, m.threads
    );
    report_written(&written);
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, overrides, out } => {
            let config = SimulationConfig::load(&config)?.with_overrides(&overrides)?;
            run_and_write(&config, out)
        }
        Command::Preset {
            name,
            overrides,
            out,
            print_config,
        } => {
            let config = SimulationConfig::preset(&name)?.with_overrides(&overrides)?;
            if print_config {
                out!("{}", config.echo_json()?);
                return Ok(());
            }
            run_and_write(&config, out)
        }
        Command::Kernels { config, out } => {
            let config = SimulationConfig::load(&config)?;
            let bath = config.bath()?;
            let taus: Vec<f64> = config.times()?.into_iter().step_by(config.time.sample_stride).collect();
            let rows = kernel_table(&bath, &taus)?;
            let dir = output_dir(&config, out)?;
            let path = dir.join("kernels.csv");
            write_file(&path, |w| write_kernel_table(&rows, w))?;
            report_written(&[path]);
            Ok(())
        }
        Command::NoiseValidate { config, out } => {
            let config = SimulationConfig::load(&config)?;
            let bath = config.bath()?;
            let times = config.times()?;
            let (plus, minus) = kl_pair(&bath, &times)?;
            let samples = config.noise_validation.samples;
            let seed = config.ensemble.master_seed;
            let report_plus = validate_covariance(&plus, &covariance_matrix(Branch::Plus, &times, &bath)?, samples, seed)?;
            let report_minus =
                validate_covariance(&minus, &covariance_matrix(Branch::Minus, &times, &bath)?, samples, seed)?;
            let json = serde_json::to_string_pretty(&serde_json::json!({
                "plus": report_plus,
                "minus": report_minus,
            }))?;
            out!("{json}");
            let dir = output_dir(&config, out)?;
            let path = dir.join("noise_validation.json");
            write_file(&path, |w| writeln!(w, "{json}"))?;
            report_written(&[path]);
            Ok(())
        }
        Command::Qme { config, out } => {
            let config = SimulationConfig::load(&config)?;
            let series = run_qme(&config)?;
            let dir = output_dir(&config, out)?;
            let path = dir.join("qme.csv");
            write_file(&path, |w| series.write_csv(w))?;
            let echo = config.echo_json()?;
            let cpath = dir.join("config.json");
            write_file(&cpath, |w| writeln!(w, "{echo}"))?;
            report_written(&[path, cpath]);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
