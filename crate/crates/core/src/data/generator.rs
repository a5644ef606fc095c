use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Trajectory;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// One linear regime `x_{t+1} = A x_t + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regime {
    pub name: String,
    /// Row-major `d × d`.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub intent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// `sequence[0]` is active from t = 0 and `sequence[i + 1]` from
    /// `times[i]` on.
    Switches { times: Vec<usize>, sequence: Vec<usize> },
    /// Leaves the current regime with probability `rate` per step, jumping to
    /// a uniformly chosen other regime.
    Markov { rate: f64, start: Option<usize> },
}

/// Additive change to every regime's `A` from step `at` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefShift {
    pub at: usize,
    pub delta: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    pub regimes: Vec<Regime>,
    pub schedule: Schedule,
    #[serde(default)]
    pub shift: Option<CoefShift>,
    /// Per-trial scale on the shift: each trial draws a factor uniformly in
    /// `[1 - jitter, 1 + jitter]`.
    #[serde(default)]
    pub shift_jitter: f64,
    pub noise_std: f64,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub x0_std: f64,
    pub length: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self::drift_linear()
    }
}

impl DriftConfig {
    /// Position/velocity spring-damper driven by a constant, accelerating, or
    /// decelerating input. Halfway through each trial the spring stiffness
    /// jumps from 1 to about 4 (scaled per trial by `shift_jitter`).
    pub fn drift_linear() -> Self {
        let dt = 0.1;
        let (k, c) = (1.0, 0.5);
        let a = vec![vec![1.0, dt], vec![-k * dt, 1.0 - c * dt]];
        let regime = |name: &str, accel: f64, intent| Regime {
            name: name.into(),
            a: a.clone(),
            b: vec![0.0, dt * accel],
            intent,
        };
        let length = 200;
        Self {
            regimes: vec![
                regime("constant", 0.0, 0),
                regime("accelerate", 1.0, 1),
                regime("decelerate", -1.0, 2),
            ],
            schedule: Schedule::Markov {
                rate: 0.03,
                start: None,
            },
            shift: Some(CoefShift {
                at: length / 2,
                delta: vec![vec![0.0, 0.0], vec![-0.3, 0.0]],
            }),
            shift_jitter: 0.5,
            noise_std: 0.01,
            x0: vec![0.0, 0.0],
            x0_std: 0.5,
            length,
            trials: 40,
            seed: 7,
        }
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::config("generator.x0", "must be non-empty"));
        }
        if self.regimes.is_empty() {
            return Err(Error::config("generator.regimes", "need at least one regime"));
        }
        let square = |m: &[Vec<f64>]| m.len() == d && m.iter().all(|r| r.len() == d);
        for (i, r) in self.regimes.iter().enumerate() {
            if !square(&r.a) || r.b.len() != d {
                return Err(Error::config(
                    format!("generator.regimes[{i}]"),
                    format!("a must be {d}x{d} and b length {d}"),
                ));
            }
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::config("generator.noise_std", "must be finite and >= 0"));
        }
        if !(self.x0_std >= 0.0) || !self.x0_std.is_finite() {
            return Err(Error::config("generator.x0_std", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.shift_jitter) {
            return Err(Error::config("generator.shift_jitter", "must lie in [0, 1]"));
        }
        if self.length < 2 {
            return Err(Error::config("generator.length", "must be at least 2"));
        }
        if self.trials == 0 {
            return Err(Error::config("generator.trials", "must be positive"));
        }
        if let Some(shift) = &self.shift {
            if !square(&shift.delta) {
                return Err(Error::config("generator.shift.delta", format!("must be {d}x{d}")));
            }
        }
        let nr = self.regimes.len();
        match &self.schedule {
            Schedule::Switches { times, sequence } => {
                if sequence.len() != times.len() + 1 {
                    return Err(Error::config(
                        "generator.schedule.sequence",
                        "must have one more entry than times",
                    ));
                }
                if sequence.iter().any(|&r| r >= nr) {
                    return Err(Error::config("generator.schedule.sequence", "regime index out of range"));
                }
                if times.windows(2).any(|w| w[0] >= w[1]) || times.first() == Some(&0) {
                    return Err(Error::config(
                        "generator.schedule.times",
                        "must be positive and strictly increasing",
                    ));
                }
            }
            Schedule::Markov { rate, start } => {
                if !(0.0..=1.0).contains(rate) {
                    return Err(Error::config("generator.schedule.rate", "must lie in [0, 1]"));
                }
                if start.is_some_and(|s| s >= nr) {
                    return Err(Error::config("generator.schedule.start", "regime index out of range"));
                }
            }
        }
        Ok(())
    }
}

/// Generates `config.trials` trajectories. The regime active at step `t`
/// drives the transition `x_t → x_{t+1}` and sets the intent label of `t`.
pub fn gen_drifting_series(config: &DriftConfig) -> Result<Vec<Trajectory>> {
    config.validate()?;
    (0..config.trials)
        .map(|i| gen_trial(config, i))
        .collect()
}

fn gen_trial(config: &DriftConfig, index: usize) -> Result<Trajectory> {
    let d = config.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, index as u64));
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::Argument(e.to_string()))?;
    let start = Normal::new(0.0, config.x0_std).map_err(|e| Error::Argument(e.to_string()))?;
    let scale = if config.shift_jitter > 0.0 {
        rng.random_range(1.0 - config.shift_jitter..=1.0 + config.shift_jitter)
    } else {
        1.0
    };

    let trace = regime_trace(config, &mut rng);
    let mut x: Vec<f64> = config.x0.iter().map(|v| v + start.sample(&mut rng)).collect();
    let mut steps = Vec::with_capacity(config.length);
    for t in 0..config.length {
        steps.push(x.clone());
        if t + 1 == config.length {
            break;
        }
        let regime = &config.regimes[trace[t]];
        let shift = config.shift.as_ref().filter(|s| t >= s.at);
        let mut next = regime.b.clone();
        for (r, out) in next.iter_mut().enumerate() {
            for c in 0..d {
                let mut a = regime.a[r][c];
                if let Some(s) = shift {
                    a += scale * s.delta[r][c];
                }
                *out += a * x[c];
            }
            if config.noise_std > 0.0 {
                *out += noise.sample(&mut rng);
            }
        }
        x = next;
    }
    if steps.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Argument(format!(
            "generator diverged in trial {index}; check regime stability"
        )));
    }
    Ok(Trajectory {
        id: format!("trial{index:03}"),
        steps,
        intent_labels: Some(trace.iter().map(|&r| config.regimes[r].intent).collect()),
        regime_trace: Some(trace),
    })
}

fn regime_trace(config: &DriftConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let nr = config.regimes.len();
    match &config.schedule {
        Schedule::Switches { times, sequence } => (0..config.length)
            .map(|t| sequence[times.partition_point(|&s| s <= t)])
            .collect(),
        Schedule::Markov { rate, start } => {
            let mut current = start.unwrap_or_else(|| rng.random_range(0..nr));
            let mut trace = Vec::with_capacity(config.length);
            for _ in 0..config.length {
                trace.push(current);
                if nr > 1 && rng.random::<f64>() < *rate {
                    let hop = rng.random_range(1..nr);
                    current = (current + hop) % nr;
                }
            }
            trace
        }
    }
}
