//! Trajectories, sliding-window samples, and trial-level splits.

mod csv_io;
mod generator;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InputWindow, OutputWindow};

pub use csv_io::{read_csv, read_csv_from, write_csv, write_csv_to};
pub use generator::{gen_drifting_series, CoefShift, DriftConfig, Regime, Schedule};

/// One recorded or generated trial at uniform time steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub steps: Vec<Vec<f64>>,
    pub intent_labels: Option<Vec<usize>>,
    /// Active generator regime per step (synthetic data only).
    pub regime_trace: Option<Vec<usize>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.steps.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if let Some(bad) = self.steps.iter().position(|s| s.len() != d) {
            return Err(Error::Argument(format!(
                "trial {}: step {bad} has dimension {} (expected {d})",
                self.id,
                self.steps[bad].len()
            )));
        }
        if let Some(labels) = &self.intent_labels {
            if labels.len() != self.steps.len() {
                return Err(Error::Dimension {
                    what: "intent labels",
                    expected: self.steps.len(),
                    found: labels.len(),
                });
            }
        }
        Ok(())
    }
}

/// One `(X_t, Y_t)` pair anchored at time `t` of a trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `x_t, x_{t-1}, …, x_{t-n+1}`.
    pub x: InputWindow,
    /// `x_{t+1}, …, x_{t+m}` (full measurement vectors).
    pub y: OutputWindow,
    pub intent: Option<usize>,
    pub t: usize,
    pub trial: String,
}

/// Every window of `n` past and `m` future steps, stride 1. Produces
/// `len - n - m + 1` samples when positive.
pub fn windowize(traj: &Trajectory, n: usize, m: usize) -> Vec<Sample> {
    if n == 0 || m == 0 || traj.len() < n + m {
        return Vec::new();
    }
    (n - 1..traj.len() - m)
        .map(|t| Sample {
            x: InputWindow::new((0..n).map(|k| traj.steps[t - k].clone()).collect()),
            y: OutputWindow::new(traj.steps[t + 1..=t + m].to_vec()),
            intent: traj.intent_labels.as_ref().map(|l| l[t]),
            t,
            trial: traj.id.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

/// Shuffles whole trials and cuts them into train/validation/test.
///
/// Train and validation receive `floor(ratio·N)` trials; the remainder goes
/// to test. Trials keep their original relative order inside a partition.
pub fn split(dataset: &[Trajectory], ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("split.ratios", "must be non-negative and sum to 1"));
    }
    let total = dataset.len();
    if total < 3 {
        return Err(Error::Argument(format!(
            "need at least 3 trials to split, got {total}"
        )));
    }
    let n_train = (ratios[0] * total as f64 + 1e-9).floor() as usize;
    let n_val = (ratios[1] * total as f64 + 1e-9).floor() as usize;
    let n_val = n_val.min(total - n_train);

    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |range: std::ops::Range<usize>| {
        let mut idx = order[range].to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| dataset[i].clone()).collect::<Vec<_>>()
    };
    Ok(Split {
        train: pick(0..n_train),
        val: pick(n_train..n_train + n_val),
        test: pick(n_train + n_val..total),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(id: &str, len: usize) -> Trajectory {
        Trajectory {
            id: id.into(),
            steps: (0..len).map(|t| vec![t as f64, -(t as f64)]).collect(),
            intent_labels: Some((0..len).map(|t| t % 3).collect()),
            regime_trace: None,
        }
    }

    fn trials(count: usize) -> Vec<Trajectory> {
        (0..count).map(|i| ramp(&format!("trial{i}"), 5)).collect()
    }

    #[test]
    fn window_counts() {
        assert_eq!(windowize(&ramp("a", 30), 20, 10).len(), 1);
        assert_eq!(windowize(&ramp("a", 29), 20, 10).len(), 0);
        assert_eq!(windowize(&ramp("a", 100), 20, 10).len(), 71);
    }

    #[test]
    fn window_layout_is_most_recent_first() {
        let s = &windowize(&ramp("a", 10), 3, 2)[0];
        assert_eq!(s.t, 2);
        assert_eq!(s.x.steps[0][0], 2.0);
        assert_eq!(s.x.steps[2][0], 0.0);
        assert_eq!(s.y.steps[0][0], 3.0);
        assert_eq!(s.y.steps[1][0], 4.0);
        assert_eq!(s.intent, Some(2));
    }

    #[test]
    fn split_counts() {
        let s = split(&trials(543), [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (434, 54, 55));
        let s = split(&trials(10), [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn split_is_seeded() {
        let a = split(&trials(50), [0.8, 0.1, 0.1], 4).unwrap();
        let b = split(&trials(50), [0.8, 0.1, 0.1], 4).unwrap();
        let c = split(&trials(50), [0.8, 0.1, 0.1], 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.test, c.test);
    }

    #[test]
    fn split_rejects_too_few_trials() {
        assert!(split(&trials(2), [0.8, 0.1, 0.1], 0).is_err());
        assert!(split(&trials(10), [0.8, 0.1, 0.2], 0).is_err());
    }

    proptest! {
        #[test]
        fn windows_tile_the_trajectory(len in 1usize..60, n in 1usize..8, m in 1usize..6) {
            let traj = ramp("p", len);
            let samples = windowize(&traj, n, m);
            prop_assert_eq!(samples.len(), (len + 1).saturating_sub(n + m));
            for (i, s) in samples.iter().enumerate() {
                prop_assert_eq!(s.t, n - 1 + i);
                for k in 0..n {
                    prop_assert_eq!(&s.x.steps[k], &traj.steps[s.t - k]);
                }
                for k in 0..m {
                    prop_assert_eq!(&s.y.steps[k], &traj.steps[s.t + 1 + k]);
                }
            }
        }

        #[test]
        fn split_partitions_trials(count in 3usize..80, seed in any::<u64>()) {
            let data = trials(count);
            let s = split(&data, [0.8, 0.1, 0.1], seed).unwrap();
            let mut ids: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test)
                .map(|t| t.id.clone()).collect();
            prop_assert_eq!(ids.len(), count);
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), count);
        }
    }
}
