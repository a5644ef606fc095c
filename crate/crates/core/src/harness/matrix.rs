use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    accuracy, mse, mse_squared, offline_train, run_online_adaptation, OnlineOptions, PredictionLog,
    TrainOutcome,
};
use crate::config::{CalibrationPass, CellConfig, DatasetConfig, DmeConfig, ExperimentConfig};
use crate::data::{gen_drifting_series, read_csv, split, windowize, DriftConfig, Sample, Trajectory};
use crate::dme::{calibrate_thresholds, DmeThresholds, EpochCriterion, RandomCriterion};
use crate::error::{Error, Result};
use crate::model::{AdaptableMask, Model, Predictor};
use crate::optimizers::Adapter;
use crate::seed::derive_seed;

const SPLIT_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const TRAIN_STREAM: u64 = 3;

/// Everything a replicate shares across matrix cells: its data split and
/// the offline-trained model.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub seed: u64,
    pub model: Model,
    pub mask: AdaptableMask,
    pub loss_trace: Vec<f64>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Generator settings of a replicate: the configured generator seed mixed
/// with the replicate seed.
pub fn replicate_generator(generator: &DriftConfig, seed: u64) -> DriftConfig {
    DriftConfig {
        seed: derive_seed(generator.seed, seed),
        ..generator.clone()
    }
}

pub fn load_dataset(config: &ExperimentConfig, seed: u64) -> Result<Vec<Trajectory>> {
    let data = match &config.dataset {
        DatasetConfig::Synthetic { generator } => gen_drifting_series(&replicate_generator(generator, seed))?,
        DatasetConfig::Csv { path } => read_csv(path)?,
    };
    let d = config.model.architecture.input_dim();
    if let Some(bad) = data.iter().find(|t| t.dim() != d) {
        return Err(Error::Dimension {
            what: "dataset measurement",
            expected: d,
            found: bad.dim(),
        });
    }
    Ok(data)
}

fn samples_of(trajs: &[Trajectory], n: usize, m: usize) -> Vec<Sample> {
    trajs.iter().flat_map(|t| windowize(t, n, m)).collect()
}

/// Windowed samples of one replicate's train/validation/test trials.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Loads (or generates) the data for one seed and splits it by trial.
pub fn prepare_data(config: &ExperimentConfig, seed: u64) -> Result<DataSplit> {
    let data = load_dataset(config, seed)?;
    let parts = split(&data, config.split.ratios, derive_seed(seed, SPLIT_STREAM))?;
    let (n, m) = config.window();
    let out = DataSplit {
        train: samples_of(&parts.train, n, m),
        val: samples_of(&parts.val, n, m),
        test: samples_of(&parts.test, n, m),
    };
    if out.train.is_empty() || out.test.is_empty() {
        return Err(Error::Argument(format!(
            "trials too short for n = {n}, m = {m}: train or test split yields no windows"
        )));
    }
    Ok(out)
}

/// Seeded initialization followed by offline training.
pub fn train_model(config: &ExperimentConfig, seed: u64, train: &[Sample]) -> Result<TrainOutcome> {
    let init = Model::init(config.model.architecture.clone(), derive_seed(seed, INIT_STREAM))?;
    offline_train(&init, train, &config.train, derive_seed(seed, TRAIN_STREAM))
}

impl Replicate {
    /// Wraps an existing model; its architecture must match the config.
    pub fn with_model(config: &ExperimentConfig, seed: u64, data: DataSplit, model: Model) -> Result<Self> {
        if model.architecture != config.model.architecture {
            return Err(Error::config(
                "model.architecture",
                "does not match the architecture of the loaded model",
            ));
        }
        let mask = config.model.mask.resolve(&config.model.architecture)?;
        Ok(Self {
            seed,
            model,
            mask,
            loss_trace: Vec::new(),
            train: data.train,
            val: data.val,
            test: data.test,
        })
    }
}

/// Loads data, splits by trial, and trains the offline model for one seed.
pub fn prepare_replicate(config: &ExperimentConfig, seed: u64) -> Result<Replicate> {
    let data = prepare_data(config, seed)?;
    let outcome = train_model(config, seed, &data.train)?;
    let mut rep = Replicate::with_model(config, seed, data, outcome.model)?;
    rep.loss_trace = outcome.loss_trace;
    Ok(rep)
}

/// Thresholds and the validation errors they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub q1: f64,
    pub q2: f64,
    pub pass: CalibrationPass,
    pub thresholds: DmeThresholds,
    /// Empty when the thresholds were fixed in the config.
    pub errors: Vec<f64>,
}

/// Places the DME thresholds for `adapter` on the replicate's validation
/// trials. Returns `None` for criteria that need no thresholds.
pub fn calibrate(
    rep: &Replicate,
    adapter: &Adapter,
    dme: &DmeConfig,
    options: &OnlineOptions,
) -> Result<Option<Calibration>> {
    let DmeConfig::Proposed {
        q1,
        q2,
        xi1,
        xi2,
        no_anomaly,
        calibration,
    } = dme
    else {
        return Ok(None);
    };
    let upper = |xi2: f64| if *no_anomaly { f64::INFINITY } else { xi2 };
    if let Some(xi1) = xi1 {
        let thresholds = DmeThresholds::new(*xi1, upper(xi2.unwrap_or(f64::INFINITY)))?;
        return Ok(Some(Calibration {
            q1: *q1,
            q2: *q2,
            pass: *calibration,
            thresholds,
            errors: Vec::new(),
        }));
    }
    if rep.val.is_empty() {
        return Err(Error::Argument("validation split yields no windows to calibrate on".into()));
    }
    let pass_adapter = match calibration {
        CalibrationPass::Adapted => adapter.clone(),
        CalibrationPass::Frozen => Adapter::None,
    };
    let log = run_online_adaptation(
        &rep.model,
        &rep.mask,
        &rep.val,
        &pass_adapter,
        &mut EpochCriterion::single(),
        options,
    )?;
    let errors = log.errors();
    let fitted = calibrate_thresholds(&errors, *q1, *q2)?;
    Ok(Some(Calibration {
        q1: *q1,
        q2: *q2,
        pass: *calibration,
        thresholds: DmeThresholds::new(fitted.xi1, upper(fitted.xi2))?,
        errors,
    }))
}

fn criterion_for(dme: &DmeConfig, calibration: Option<&Calibration>, seed: u64) -> Result<EpochCriterion> {
    Ok(match dme {
        DmeConfig::None => EpochCriterion::single(),
        DmeConfig::Fixed { k } => EpochCriterion::Fixed(*k),
        DmeConfig::Random { p, seed: base } => EpochCriterion::Random(RandomCriterion::new(*p, derive_seed(*base, seed))?),
        DmeConfig::Proposed { .. } => EpochCriterion::Proposed(
            calibration
                .map(|c| c.thresholds)
                .ok_or_else(|| Error::Argument("proposed criterion needs thresholds".into()))?,
        ),
    })
}

/// Wall-clock statistics of one run. Kept out of the results document so
/// reruns stay byte-identical.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub cell: String,
    pub seed: u64,
    pub steps: usize,
    pub mean_seconds: f64,
    pub max_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub cell: String,
    pub adapter: String,
    pub dme: String,
    pub seed: u64,
    /// Mean over steps of `(1/m)‖Y - Ŷ‖₂` (unsquared norm).
    pub mse: Option<f64>,
    /// Mean over steps of `(1/m)‖Y - Ŷ‖₂²`.
    pub mse_squared: Option<f64>,
    /// Standard deviation of the per-trial `mse` (population form).
    pub mse_std: Option<f64>,
    pub accuracy: Option<f64>,
    /// Standard deviation of the per-trial accuracy (population form).
    pub accuracy_std: Option<f64>,
    pub steps: usize,
    /// Number of steps with `κ = 0, 1, 2` among adapted steps.
    pub kappa_counts: [usize; 3],
    pub thresholds: Option<DmeThresholds>,
    pub error: Option<String>,
    #[serde(skip)]
    pub timing: TimingRecord,
}

impl RunResult {
    fn failed(cell: &CellConfig, seed: u64, err: &Error) -> Self {
        Self {
            cell: cell.name.clone(),
            adapter: cell.adapter.key().into(),
            dme: cell.dme.label(),
            seed,
            mse: None,
            mse_squared: None,
            mse_std: None,
            accuracy: None,
            accuracy_std: None,
            steps: 0,
            kappa_counts: [0; 3],
            thresholds: None,
            error: Some(err.to_string()),
            timing: TimingRecord {
                cell: cell.name.clone(),
                seed,
                ..TimingRecord::default()
            },
        }
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs one cell on one replicate's test stream and keeps the log.
pub fn run_cell(
    rep: &Replicate,
    cell: &CellConfig,
    options: &OnlineOptions,
) -> Result<(RunResult, PredictionLog)> {
    let calibration = calibrate(rep, &cell.adapter, &cell.dme, options)?;
    let mut criterion = criterion_for(&cell.dme, calibration.as_ref(), rep.seed)?;
    let log = run_online_adaptation(&rep.model, &rep.mask, &rep.test, &cell.adapter, &mut criterion, options)?;

    let trials = log.by_trial();
    let per_trial_mse = trials.iter().map(mse).collect::<Result<Vec<_>>>()?;
    let has_accuracy = rep.model.architecture.num_classes() > 0 && log.records.iter().all(|r| r.intent_label.is_some());
    let (acc, acc_std) = if has_accuracy {
        let per_trial = trials.iter().map(accuracy).collect::<Result<Vec<_>>>()?;
        (Some(accuracy(&log)?), Some(mean_std(&per_trial).1))
    } else {
        (None, None)
    };
    let mut kappa_counts = [0; 3];
    for r in log.records.iter().filter(|r| r.j.is_some()) {
        kappa_counts[r.kappa.min(2)] += 1;
    }
    let seconds: Vec<f64> = log.records.iter().filter(|r| r.j.is_some()).map(|r| r.seconds).collect();
    let total: f64 = seconds.iter().sum();
    let timing = TimingRecord {
        cell: cell.name.clone(),
        seed: rep.seed,
        steps: seconds.len(),
        mean_seconds: if seconds.is_empty() { 0.0 } else { total / seconds.len() as f64 },
        max_seconds: seconds.iter().copied().fold(0.0, f64::max),
        total_seconds: total,
    };
    let result = RunResult {
        cell: cell.name.clone(),
        adapter: cell.adapter.key().into(),
        dme: cell.dme.label(),
        seed: rep.seed,
        mse: Some(mse(&log)?),
        mse_squared: Some(mse_squared(&log)?),
        mse_std: Some(mean_std(&per_trial_mse).1),
        accuracy: acc,
        accuracy_std: acc_std,
        steps: log.records.len(),
        kappa_counts,
        thresholds: calibration.map(|c| c.thresholds),
        error: None,
        timing,
    };
    Ok((result, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub adapter: String,
    pub dme: String,
    pub runs: usize,
    pub failures: usize,
    pub mse_mean: Option<f64>,
    /// Across seeds (population form).
    pub mse_std: Option<f64>,
    pub mse_median: Option<f64>,
    pub mse_squared_mean: Option<f64>,
    pub mse_squared_median: Option<f64>,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
}

impl CellSummary {
    fn from_runs(cell: &CellConfig, runs: &[&RunResult]) -> Self {
        let ok: Vec<&&RunResult> = runs.iter().filter(|r| r.error.is_none()).collect();
        let pick = |f: fn(&RunResult) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|r| f(r)).collect() };
        let mses = pick(|r| r.mse);
        let sq = pick(|r| r.mse_squared);
        let acc = pick(|r| r.accuracy);
        let stat = |v: &[f64], f: fn(&[f64]) -> f64| (!v.is_empty()).then(|| f(v));
        Self {
            cell: cell.name.clone(),
            adapter: cell.adapter.key().into(),
            dme: cell.dme.label(),
            runs: runs.len(),
            failures: runs.len() - ok.len(),
            mse_mean: stat(&mses, |v| mean_std(v).0),
            mse_std: stat(&mses, |v| mean_std(v).1),
            mse_median: stat(&mses, median),
            mse_squared_mean: stat(&sq, |v| mean_std(v).0),
            mse_squared_median: stat(&sq, median),
            accuracy_mean: stat(&acc, |v| mean_std(v).0),
            accuracy_std: stat(&acc, |v| mean_std(v).1),
        }
    }
}

/// The results document written by `mekf bench`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config_digest: String,
    /// Synthetic benchmarks are in abstract units.
    pub units: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellSummary>,
    pub runs: Vec<RunResult>,
}

/// Runs every selected cell on every seed. Cells and seeds execute in
/// parallel; results come back in config order, so the report does not
/// depend on scheduling.
pub fn run_matrix(config: &ExperimentConfig, only: Option<&[String]>) -> Result<(BenchReport, Vec<TimingRecord>)> {
    config.validate()?;
    let cells: Vec<&CellConfig> = match only {
        None => config.matrix.cells.iter().collect(),
        Some(names) => {
            if let Some(missing) = names.iter().find(|n| !config.matrix.cells.iter().any(|c| &c.name == *n)) {
                return Err(Error::config("only", format!("no matrix cell named `{missing}`")));
            }
            config.matrix.cells.iter().filter(|c| names.contains(&c.name)).collect()
        }
    };
    let options = OnlineOptions {
        carry_state: config.run.carry_state,
    };
    let work = || {
        let replicates: Vec<Result<Replicate>> =
            config.run.seeds.par_iter().map(|&s| prepare_replicate(config, s)).collect();
        let jobs: Vec<(&CellConfig, usize)> = cells
            .iter()
            .flat_map(|&c| (0..replicates.len()).map(move |i| (c, i)))
            .collect();
        jobs.par_iter()
            .map(|&(cell, i)| {
                let seed = config.run.seeds[i];
                match &replicates[i] {
                    Err(e) => RunResult::failed(cell, seed, e),
                    Ok(rep) => match run_cell(rep, cell, &options) {
                        Ok((r, _)) => r,
                        Err(e) => RunResult::failed(cell, seed, &e),
                    },
                }
            })
            .collect::<Vec<RunResult>>()
    };
    let runs = match config.run.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Argument(e.to_string()))?
            .install(work),
        None => work(),
    };
    let summaries = cells
        .iter()
        .map(|c| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.cell == c.name).collect();
            CellSummary::from_runs(c, &mine)
        })
        .collect();
    let timing = runs.iter().map(|r| r.timing.clone()).collect();
    Ok((
        BenchReport {
            config_digest: config.digest(),
            units: "abstract".into(),
            seeds: config.run.seeds.clone(),
            cells: summaries,
            runs,
        },
        timing,
    ))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6}"))
}

/// Plain-text tables: every cell, then the optimizer, extension, and
/// criterion comparisons for whichever of their cells were run.
pub fn render_report(report: &BenchReport) -> String {
    let find = |name: &str| report.cells.iter().find(|c| c.cell == name);
    let mut out = String::new();
    let _ = writeln!(out, "config {}", report.config_digest);
    let _ = writeln!(out, "seeds {:?}, units {}", report.seeds, report.units);
    let _ = writeln!(out, "mse is the mean of (1/m)*||Y - Yhat||_2; mse_sq squares the norm\n");

    let _ = writeln!(
        out,
        "{:<20} {:>4} {:>4} {:>12} {:>12} {:>12} {:>12} {:>10} {:>10}",
        "cell", "runs", "fail", "mse_mean", "mse_std", "mse_median", "mse_sq_mean", "acc_mean", "acc_std"
    );
    for c in &report.cells {
        let _ = writeln!(
            out,
            "{:<20} {:>4} {:>4} {:>12} {:>12} {:>12} {:>12} {:>10} {:>10}",
            c.cell,
            c.runs,
            c.failures,
            fmt_opt(c.mse_mean),
            fmt_opt(c.mse_std),
            fmt_opt(c.mse_median),
            fmt_opt(c.mse_squared_mean),
            fmt_opt(c.accuracy_mean),
            fmt_opt(c.accuracy_std)
        );
    }

    let optimizers: Vec<&str> = ["none", "sgd", "momentum", "adam", "amsgrad", "rls", "mekf", "mekf_ema"]
        .into_iter()
        .filter(|k| find(k).is_some())
        .collect();
    if !optimizers.is_empty() {
        let _ = writeln!(out, "\nOptimizers (median mse across seeds)");
        let _ = writeln!(out, "{:<12} {:>12} {:>12} {:>10} {:>10}", "adapter", "w/o dme", "w/ dme", "acc", "acc dme");
        for k in optimizers {
            let plain = find(k);
            let dme = find(&format!("{k}+dme"));
            let _ = writeln!(
                out,
                "{:<12} {:>12} {:>12} {:>10} {:>10}",
                k,
                fmt_opt(plain.and_then(|c| c.mse_median)),
                fmt_opt(dme.and_then(|c| c.mse_median)),
                fmt_opt(plain.and_then(|c| c.accuracy_mean)),
                fmt_opt(dme.and_then(|c| c.accuracy_mean))
            );
        }
    }

    let table = |out: &mut String, title: &str, rows: &[(&str, &str)]| {
        let present: Vec<_> = rows.iter().filter_map(|(label, cell)| find(cell).map(|c| (label, c))).collect();
        if present.is_empty() {
            return;
        }
        let _ = writeln!(out, "\n{title}");
        let _ = writeln!(out, "{:<18} {:>12} {:>12} {:>10}", "variant", "mse_median", "mse_mean", "acc");
        for (label, c) in present {
            let _ = writeln!(
                out,
                "{:<18} {:>12} {:>12} {:>10}",
                label,
                fmt_opt(c.mse_median),
                fmt_opt(c.mse_mean),
                fmt_opt(c.accuracy_mean)
            );
        }
    };
    table(
        &mut out,
        "Extensions",
        &[
            ("mekf", "mekf"),
            ("+ema_v", "mekf+ema_v"),
            ("+ema_p", "mekf+ema_p"),
            ("+dme", "mekf+dme"),
            ("+ema_v+ema_p", "mekf_ema"),
            ("+ema_v+ema_p+dme", "mekf_ema+dme"),
        ],
    );
    table(
        &mut out,
        "Epoch criteria (mekf_ema)",
        &[
            ("none", "mekf_ema"),
            ("fixed(2)", "mekf_ema+fixed2"),
            ("random", "mekf_ema+random"),
            ("proposed", "mekf_ema+dme"),
        ],
    );
    let failed: Vec<&RunResult> = report.runs.iter().filter(|r| r.error.is_some()).collect();
    if !failed.is_empty() {
        let _ = writeln!(out, "\nFailures");
        for r in failed {
            let _ = writeln!(out, "{} seed {}: {}", r.cell, r.seed, r.error.as_deref().unwrap_or(""));
        }
    }
    out
}
