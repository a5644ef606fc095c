//! Online adaptation loop, offline pretraining, metrics, and experiment
//! matrices.

mod matrix;
mod train;

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::dme::{dme_adapt, EpochCriterion};
use crate::error::{Error, Result};
use crate::model::{classify_intent, rollout, AdaptableMask, Model, OutputWindow, Predictor};
use crate::optimizers::{AdaptContext, Adapter, AdapterState};

pub use matrix::{
    calibrate, load_dataset, prepare_data, prepare_replicate, render_report, replicate_generator,
    run_cell, run_matrix, train_model, BenchReport, Calibration, CellSummary, DataSplit, Replicate,
    RunResult, TimingRecord,
};
pub use train::{offline_train, TrainOutcome};

/// One stream step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub trial: String,
    pub t: usize,
    /// `Ŷ_t` from the parameters that include step t's adaptation.
    pub prediction: OutputWindow,
    /// `Y_t`, first `d_out` components.
    pub target: OutputWindow,
    /// `y_t` (first `d_out` components of the newest measurement).
    pub y: Vec<f64>,
    /// `ŷ_t` predicted at the previous step; absent at the first step of a
    /// trial.
    pub y_hat: Option<Vec<f64>>,
    pub j: Option<f64>,
    pub kappa: usize,
    pub intent_pred: Option<usize>,
    pub intent_label: Option<usize>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionLog {
    pub records: Vec<StepRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct OnlineOptions {
    pub carry_state: bool,
}

/// Adapt-then-predict loop over a sample stream. Samples must be
/// chronological within each trial; a new trial (or a gap in `t`) starts a
/// segment in which the first step only predicts. Adapter state resets
/// at every trial boundary unless `carry_state` is set.
pub fn run_online_adaptation(
    model: &Model,
    mask: &AdaptableMask,
    stream: &[Sample],
    adapter: &Adapter,
    criterion: &mut EpochCriterion,
    options: &OnlineOptions,
) -> Result<PredictionLog> {
    let arch = &model.architecture;
    let base = model.params.values();
    let ctx = AdaptContext::new(arch, base, mask);
    let d_out = arch.output_dim();
    let has_head = arch.num_classes() > 0;
    let fresh = || adapter.init_state(&mask.gather(base));

    let mut state: AdapterState = fresh();
    let mut records = Vec::with_capacity(stream.len());
    for (i, sample) in stream.iter().enumerate() {
        let prev = i.checked_sub(1).map(|p| &stream[p]);
        let continues = prev.is_some_and(|p| p.trial == sample.trial && p.t + 1 == sample.t);
        let new_trial = prev.is_none_or(|p| p.trial != sample.trial);
        if new_trial && !options.carry_state && i > 0 {
            state = fresh();
        }
        let y = sample.x.newest()[..d_out].to_vec();

        let mut kappa = 0;
        let mut j = None;
        let mut y_hat = None;
        let started = Instant::now();
        if let (true, Some(prev)) = (continues, prev) {
            let out = dme_adapt(adapter, &state, &ctx, &prev.x, &y, criterion).map_err(|e| {
                Error::RunAborted {
                    trial: sample.trial.clone(),
                    step: sample.t,
                    theta: state.theta.iter().copied().collect(),
                    source: Box::new(e),
                }
            })?;
            y_hat = Some(out.y_hat);
            kappa = out.epochs;
            j = Some(out.error);
            state = out.state;
        }
        let seconds = started.elapsed().as_secs_f64();

        let theta = ctx.compose(&state.theta);
        let prediction = rollout(arch, &theta, &sample.x, sample.y.len())?;
        let intent_pred = if has_head {
            Some(classify_intent(arch, &theta, &sample.x)?.argmax())
        } else {
            None
        };
        records.push(StepRecord {
            trial: sample.trial.clone(),
            t: sample.t,
            prediction,
            target: sample.y.project(d_out),
            y,
            y_hat,
            j,
            kappa,
            intent_pred,
            intent_label: sample.intent,
            seconds,
        });
    }
    Ok(PredictionLog { records })
}

impl StepRecord {
    /// `‖Y_t - Ŷ_t‖₂` over all horizon steps and components.
    fn window_error_sq(&self) -> f64 {
        self.target
            .flatten()
            .iter()
            .zip(self.prediction.flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    fn horizon(&self) -> f64 {
        self.target.len() as f64
    }
}

/// `(1/T) Σ_t (1/m) ‖Y_t - Ŷ_t‖₂`, the norm taken unsquared.
pub fn mse(log: &PredictionLog) -> Result<f64> {
    mean_over(log, |r| r.window_error_sq().sqrt() / r.horizon())
}

/// `(1/T) Σ_t (1/m) ‖Y_t - Ŷ_t‖₂²`.
pub fn mse_squared(log: &PredictionLog) -> Result<f64> {
    mean_over(log, |r| r.window_error_sq() / r.horizon())
}

fn mean_over(log: &PredictionLog, f: impl Fn(&StepRecord) -> f64) -> Result<f64> {
    if log.records.is_empty() {
        return Err(Error::Argument("empty prediction log".into()));
    }
    Ok(log.records.iter().map(f).sum::<f64>() / log.records.len() as f64)
}

/// Fraction of steps whose predicted intent equals the label.
pub fn accuracy(log: &PredictionLog) -> Result<f64> {
    if log.records.is_empty() {
        return Err(Error::Argument("empty prediction log".into()));
    }
    let mut hits = 0usize;
    for r in &log.records {
        match (r.intent_pred, r.intent_label) {
            (Some(p), Some(l)) => hits += usize::from(p == l),
            (_, None) => return Err(Error::Unsupported("log has no intent labels".into())),
            (None, _) => return Err(Error::Unsupported("model has no classifier head".into())),
        }
    }
    Ok(hits as f64 / log.records.len() as f64)
}

impl PredictionLog {
    /// Records grouped by trial, in order of first appearance.
    pub fn by_trial(&self) -> Vec<PredictionLog> {
        let mut out: Vec<PredictionLog> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some(last) if last.records[0].trial == r.trial => last.records.push(r.clone()),
                _ => out.push(PredictionLog {
                    records: vec![r.clone()],
                }),
            }
        }
        out
    }

    /// `j_t` of every adapted step.
    pub fn errors(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.j).collect()
    }

    /// Writes `t,j,kappa,y_{k}_{c}…,yhat_{k}_{c}…,trial[,intent_pred,intent]`.
    /// `y`/`yhat` are `Y_t`/`Ŷ_t` flattened by horizon step `k` (1-based)
    /// and component `c`. `j` is empty where no adaptation happened.
    pub fn write_csv_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let Some(first) = self.records.first() else {
            w.write_record(["t", "j", "kappa", "trial"])?;
            w.flush()?;
            return Ok(());
        };
        let m = first.target.len();
        let d = first.target.steps.first().map_or(0, Vec::len);
        let with_intent = first.intent_pred.is_some();
        let mut header = vec!["t".to_string(), "j".into(), "kappa".into()];
        for prefix in ["y", "yhat"] {
            for k in 1..=m {
                header.extend((0..d).map(|c| format!("{prefix}_{k}_{c}")));
            }
        }
        header.push("trial".into());
        if with_intent {
            header.push("intent_pred".into());
            header.push("intent".into());
        }
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.t.to_string(),
                r.j.map_or(String::new(), |j| j.to_string()),
                r.kappa.to_string(),
            ];
            row.extend(r.target.flatten().iter().map(f64::to_string));
            row.extend(r.prediction.flatten().iter().map(f64::to_string));
            row.push(r.trial.clone());
            if with_intent {
                row.push(r.intent_pred.map_or(String::new(), |v| v.to_string()));
                row.push(r.intent_label.map_or(String::new(), |v| v.to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
