//! Dynamic multi-epoch updates.
//!
//! Each incoming sample is reused `κ_t` times, where `κ_t` is picked from the
//! pre-update one-step error `j_t = ‖y_t - ŷ_t‖₂`:
//!
//! | error               | κ | sample kind |
//! |---------------------|---|-------------|
//! | `j < ξ1`            | 1 | easy        |
//! | `ξ1 <= j < ξ2`      | 2 | hard        |
//! | `j >= ξ2`           | 0 | anomaly     |
//!
//! Every inner epoch is a full adapter step, so `P`, `V`, and moment
//! buffers advance along with θ.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{InputWindow, Predictor};
use crate::optimizers::{adapt, AdaptContext, Adapter, AdapterState, Innovation};

/// Easy/hard and hard/anomaly boundaries. `xi2` may be `+∞` (serialized as
/// `null`), in which case no sample is ever skipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmeThresholds {
    pub xi1: f64,
    #[serde(serialize_with = "ser_inf", deserialize_with = "de_inf")]
    pub xi2: f64,
}

fn ser_inf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_none()
    } else {
        s.serialize_f64(*v)
    }
}

fn de_inf<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

impl DmeThresholds {
    pub fn new(xi1: f64, xi2: f64) -> Result<Self> {
        if !(xi1 >= 0.0 && xi1.is_finite()) {
            return Err(Error::config("dme.xi1", "must be finite and >= 0"));
        }
        if !(xi2 >= xi1) {
            return Err(Error::config("dme.xi2", "must be >= xi1"));
        }
        Ok(Self { xi1, xi2 })
    }

    pub fn epochs(&self, error: f64) -> usize {
        if error < self.xi1 {
            1
        } else if error < self.xi2 {
            2
        } else {
            0
        }
    }
}

/// Random epoch counts with fixed probabilities for κ = 1, 2, 0.
#[derive(Debug, Clone)]
pub struct RandomCriterion {
    probabilities: [f64; 3],
    rng: ChaCha8Rng,
}

impl RandomCriterion {
    /// `probabilities` are `[p_easy, p_hard, p_anomaly]`.
    pub fn new(probabilities: [f64; 3], seed: u64) -> Result<Self> {
        if probabilities.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::config("dme.p", "probabilities must be >= 0"));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config("dme.p", format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self {
            probabilities,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn draw(&mut self) -> usize {
        let u: f64 = self.rng.random();
        let [easy, hard, _] = self.probabilities;
        if u < easy {
            1
        } else if u < easy + hard {
            2
        } else {
            0
        }
    }
}

#[derive(Debug, Clone)]
pub enum EpochCriterion {
    Proposed(DmeThresholds),
    Fixed(usize),
    Random(RandomCriterion),
}

impl EpochCriterion {
    /// Single-epoch updates.
    pub fn single() -> Self {
        EpochCriterion::Fixed(1)
    }
}

/// Number of epochs for a sample with one-step error `error`. The random
/// variant ignores the error and advances its generator.
pub fn epochs_for_sample(error: f64, criterion: &mut EpochCriterion) -> usize {
    match criterion {
        EpochCriterion::Proposed(t) => t.epochs(error),
        EpochCriterion::Fixed(k) => *k,
        EpochCriterion::Random(r) => r.draw(),
    }
}

#[derive(Debug, Clone)]
pub struct DmeOutcome {
    pub state: AdapterState,
    pub epochs: usize,
    /// Prediction of the incoming state and its error `j_t`.
    pub y_hat: Vec<f64>,
    pub error: f64,
}

/// Adapts on `(x_prev, y)` `κ_t` times. `j_t` comes from the prediction of
/// the incoming state; each inner epoch recomputes `ŷ` from the latest
/// parameters.
pub fn dme_adapt<P: Predictor + ?Sized>(
    adapter: &Adapter,
    state: &AdapterState,
    ctx: &AdaptContext<'_, P>,
    x_prev: &InputWindow,
    y: &[f64],
    criterion: &mut EpochCriterion,
) -> Result<DmeOutcome> {
    let y_hat = ctx.predict(state, x_prev)?;
    let error = Innovation::new(y, &y_hat)?.error;
    let epochs = epochs_for_sample(error, criterion);
    let mut current = state.clone();
    for _ in 0..epochs {
        current = adapt(adapter, &current, ctx, x_prev, y)?;
    }
    Ok(DmeOutcome {
        state: current,
        epochs,
        y_hat,
        error,
    })
}

/// Nearest-rank quantile: the `⌈q·N⌉`-th smallest value (at least the
/// first).
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len() as f64;
    // Guard against q·N landing a hair above an integer through rounding.
    let rank = (q * n - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Thresholds from the errors of a single-epoch validation pass.
pub fn calibrate_thresholds(errors: &[f64], q1: f64, q2: f64) -> Result<DmeThresholds> {
    if errors.is_empty() {
        return Err(Error::Argument("no validation errors to calibrate from".into()));
    }
    if !(0.0..=1.0).contains(&q1) || !(0.0..=1.0).contains(&q2) || q1 > q2 {
        return Err(Error::Argument(format!(
            "quantile levels must satisfy 0 <= q1 <= q2 <= 1 (got {q1}, {q2})"
        )));
    }
    if errors.iter().any(|e| !(*e >= 0.0)) {
        return Err(Error::Argument("validation errors must be non-negative numbers".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    DmeThresholds::new(nearest_rank(&sorted, q1), nearest_rank(&sorted, q2))
}
