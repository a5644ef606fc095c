//! Subcommands of the `mekf` binary.
//!
//! Every command loads and validates the whole experiment document before
//! computing anything, and writes its output files only after the
//! computation succeeded.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mekf_core::config::DmeConfig;
use mekf_core::data::{gen_drifting_series, write_csv_to};
use mekf_core::dme::DmeThresholds;
use mekf_core::harness::{
    calibrate, prepare_data, render_report, replicate_generator, run_cell, run_matrix,
    train_model, BenchReport, OnlineOptions, Replicate, RunResult,
};
use mekf_core::model::Model;
use mekf_core::{config::CellConfig, DatasetConfig, Error, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "mekf", version, about = "Online adaptation experiments")]
pub struct Cli {
    /// Print the default experiment document and exit.
    #[arg(long)]
    pub print_defaults: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment document (JSON); defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Overrides `output.dir`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Replicate seed; defaults to the first of `run.seeds`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset as CSV.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output file; defaults to `<out_dir>/dataset.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the offline model; writes `model.json` and `loss_trace.csv`.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Place the DME thresholds on the validation trials; writes
    /// `calibration.json` and `validation_errors.csv`.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Trained model; trains from scratch when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run one adaptation stream over the test trials; writes
    /// `prediction_log.csv` and `adapt_result.json`.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Thresholds from `mekf calibrate`, used instead of recalibrating.
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Run the experiment matrix; writes `results.json`, `report.txt`, and
    /// `timing.json`.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated cell names to run.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<String>>,
        /// Worker cap (overrides `run.jobs`).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Render the comparison tables of a results document.
    Report {
        #[arg(long)]
        results: PathBuf,
        /// Also write the tables to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit status 2 for configuration problems, 1 for anything else.
pub fn exit_code(err: &Error) -> u8 {
    if err.is_config() {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli) -> ExitCode {
    let result = if cli.print_defaults {
        let mut out = std::io::stdout().lock();
        // A closed pipe (e.g. `| head`) is not an error here.
        let _ = writeln!(out, "{}", ExperimentConfig::default().to_json());
        Ok(())
    } else {
        match cli.command {
            Some(cmd) => dispatch(cmd),
            None => {
                eprintln!("error: no subcommand given (try --help)");
                return ExitCode::from(2);
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> mekf_core::Result<()> {
    match cmd {
        Command::Generate { common, out } => {
            let (cfg, ctx) = load(&common)?;
            cmd_generate(&cfg, ctx.seed, out.unwrap_or_else(|| ctx.dir.join("dataset.csv")))
        }
        Command::Train { common } => {
            let (cfg, ctx) = load(&common)?;
            cmd_train(&cfg, &ctx)
        }
        Command::Calibrate { common, model } => {
            let (cfg, ctx) = load(&common)?;
            cmd_calibrate(&cfg, &ctx, model.as_deref())
        }
        Command::Adapt {
            common,
            model,
            calibration,
        } => {
            let (cfg, ctx) = load(&common)?;
            cmd_adapt(&cfg, &ctx, model.as_deref(), calibration.as_deref())
        }
        Command::Bench { common, only, jobs } => {
            let (mut cfg, ctx) = load(&common)?;
            if jobs.is_some() {
                cfg.run.jobs = jobs;
                cfg.validate()?;
            }
            cmd_bench(&cfg, &ctx, only.as_deref())
        }
        Command::Report { results, out } => cmd_report(&results, out.as_deref()),
    }
}

/// Resolved output directory and replicate seed.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub dir: PathBuf,
    pub seed: u64,
}

pub fn load_config(path: Option<&Path>) -> mekf_core::Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text)
        }
    }
}

fn load(common: &Common) -> mekf_core::Result<(ExperimentConfig, RunContext)> {
    let cfg = load_config(common.config.as_deref())?;
    let ctx = RunContext {
        dir: common.out_dir.clone().unwrap_or_else(|| cfg.output.dir.clone()),
        seed: common.seed.unwrap_or(cfg.run.seeds[0]),
    };
    Ok((cfg, ctx))
}

/// Writes every `(path, contents)` pair, creating parent directories.
fn write_all(files: &[(PathBuf, Vec<u8>)]) -> mekf_core::Result<()> {
    for (path, bytes) in files {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, bytes)?;
    }
    Ok(())
}

fn json_bytes<T: Serialize>(value: &T) -> mekf_core::Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text.into_bytes())
}

pub fn cmd_generate(cfg: &ExperimentConfig, seed: u64, out: PathBuf) -> mekf_core::Result<()> {
    let DatasetConfig::Synthetic { generator } = &cfg.dataset else {
        return Err(Error::config("dataset.kind", "generate needs a synthetic dataset"));
    };
    let data = gen_drifting_series(&replicate_generator(generator, seed))?;
    let mut buf = Vec::new();
    write_csv_to(&data, &mut buf)?;
    write_all(&[(out.clone(), buf)])?;
    let rows: usize = data.iter().map(|t| t.len()).sum();
    println!("wrote {} ({} trials, {rows} rows)", out.display(), data.len());
    Ok(())
}

pub fn cmd_train(cfg: &ExperimentConfig, ctx: &RunContext) -> mekf_core::Result<()> {
    let data = prepare_data(cfg, ctx.seed)?;
    let outcome = train_model(cfg, ctx.seed, &data.train)?;
    let mut trace = String::from("epoch,loss\n");
    for (i, l) in outcome.loss_trace.iter().enumerate() {
        trace.push_str(&format!("{},{l}\n", i + 1));
    }
    let model_path = ctx.dir.join("model.json");
    let mut model_json = outcome.model.to_json()?;
    model_json.push('\n');
    write_all(&[
        (model_path.clone(), model_json.into_bytes()),
        (ctx.dir.join("loss_trace.csv"), trace.into_bytes()),
    ])?;
    println!(
        "wrote {} (final loss {:.6})",
        model_path.display(),
        outcome.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn replicate(cfg: &ExperimentConfig, ctx: &RunContext, model: Option<&Path>) -> mekf_core::Result<Replicate> {
    let data = prepare_data(cfg, ctx.seed)?;
    let model = match model {
        Some(p) => Model::from_json(&fs::read_to_string(p)?)?,
        None => train_model(cfg, ctx.seed, &data.train)?.model,
    };
    Replicate::with_model(cfg, ctx.seed, data, model)
}

/// Contents of `calibration.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub adapter: String,
    pub pass: String,
    pub q1: f64,
    pub q2: f64,
    pub thresholds: DmeThresholds,
    pub validation_steps: usize,
}

pub fn cmd_calibrate(cfg: &ExperimentConfig, ctx: &RunContext, model: Option<&Path>) -> mekf_core::Result<()> {
    let dme = match &cfg.dme {
        d @ DmeConfig::Proposed { .. } => d.clone(),
        _ => DmeConfig::proposed(),
    };
    let rep = replicate(cfg, ctx, model)?;
    let options = OnlineOptions {
        carry_state: cfg.run.carry_state,
    };
    let cal = calibrate(&rep, &cfg.adapter, &dme, &options)?.expect("proposed criterion");
    let file = CalibrationFile {
        adapter: cfg.adapter.key().into(),
        pass: serde_json::to_value(cal.pass)?.as_str().unwrap_or_default().to_string(),
        q1: cal.q1,
        q2: cal.q2,
        thresholds: cal.thresholds,
        validation_steps: cal.errors.len(),
    };
    let mut errors = String::from("j\n");
    for e in &cal.errors {
        errors.push_str(&format!("{e}\n"));
    }
    let path = ctx.dir.join("calibration.json");
    write_all(&[
        (path.clone(), json_bytes(&file)?),
        (ctx.dir.join("validation_errors.csv"), errors.into_bytes()),
    ])?;
    println!(
        "wrote {} (xi1 = {}, xi2 = {})",
        path.display(),
        cal.thresholds.xi1,
        cal.thresholds.xi2
    );
    Ok(())
}

pub fn cmd_adapt(
    cfg: &ExperimentConfig,
    ctx: &RunContext,
    model: Option<&Path>,
    calibration: Option<&Path>,
) -> mekf_core::Result<()> {
    let mut dme = cfg.dme.clone();
    if let Some(p) = calibration {
        let file: CalibrationFile = serde_json::from_str(&fs::read_to_string(p)?)?;
        dme = DmeConfig::Proposed {
            q1: file.q1,
            q2: file.q2,
            xi1: Some(file.thresholds.xi1),
            xi2: file.thresholds.xi2.is_finite().then_some(file.thresholds.xi2),
            no_anomaly: file.thresholds.xi2.is_infinite(),
            calibration: Default::default(),
        };
    }
    let rep = replicate(cfg, ctx, model)?;
    let cell = CellConfig {
        name: format!("{}+{}", cfg.adapter.key(), dme.label()),
        adapter: cfg.adapter.clone(),
        dme,
    };
    let options = OnlineOptions {
        carry_state: cfg.run.carry_state,
    };
    let (result, log) = run_cell(&rep, &cell, &options)?;
    let mut csv = Vec::new();
    log.write_csv_to(&mut csv)?;
    write_all(&[
        (ctx.dir.join("prediction_log.csv"), csv),
        (ctx.dir.join("adapt_result.json"), json_bytes(&result)?),
    ])?;
    print_result(&result);
    Ok(())
}

fn print_result(r: &RunResult) {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
    println!(
        "{}: mse {} (squared {}), accuracy {}, steps {}, kappa 0/1/2 = {:?}",
        r.cell,
        fmt(r.mse),
        fmt(r.mse_squared),
        fmt(r.accuracy),
        r.steps,
        r.kappa_counts
    );
}

pub fn cmd_bench(cfg: &ExperimentConfig, ctx: &RunContext, only: Option<&[String]>) -> mekf_core::Result<()> {
    let (report, timing) = run_matrix(cfg, only)?;
    let text = render_report(&report);
    write_all(&[
        (ctx.dir.join("results.json"), json_bytes(&report)?),
        (ctx.dir.join("report.txt"), text.clone().into_bytes()),
        (ctx.dir.join("timing.json"), json_bytes(&timing)?),
    ])?;
    print!("{text}");
    Ok(())
}

pub fn cmd_report(results: &Path, out: Option<&Path>) -> mekf_core::Result<()> {
    let report: BenchReport = serde_json::from_str(&fs::read_to_string(results)?)?;
    let text = render_report(&report);
    if let Some(out) = out {
        write_all(&[(out.to_path_buf(), text.clone().into_bytes())])?;
    }
    print!("{text}");
    Ok(())
}
