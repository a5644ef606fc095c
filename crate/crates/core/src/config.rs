//! The experiment document shared by every command.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DriftConfig;
use crate::error::{Error, Result};
use crate::model::{AdaptableMask, Architecture, LinearModel, Predictor};
use crate::optimizers::{Adapter, MekfHyper};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic { generator: DriftConfig },
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "d_ratios")]
    pub ratios: [f64; 3],
}

fn d_ratios() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { ratios: d_ratios() }
    }
}

/// Which parameters the online adapter may touch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSpec {
    /// Encoder blocks for the recurrent model, everything otherwise.
    #[default]
    Default,
    All,
    Blocks { names: Vec<String> },
    Indices { indices: Vec<usize> },
}

impl MaskSpec {
    pub fn resolve(&self, arch: &Architecture) -> Result<AdaptableMask> {
        let bad = |e: Error| Error::config("model.mask", e.to_string());
        match self {
            MaskSpec::Default => Ok(arch.default_mask()),
            MaskSpec::All => Ok(AdaptableMask::all(arch.num_params())),
            MaskSpec::Blocks { names } => {
                let names: Vec<&str> = names.iter().map(String::as_str).collect();
                AdaptableMask::from_blocks(&arch.layout(), &names).map_err(bad)
            }
            MaskSpec::Indices { indices } => {
                AdaptableMask::new(indices.clone(), arch.num_params()).map_err(bad)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Rollout horizon.
    pub m: usize,
    #[serde(default)]
    pub mask: MaskSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// Weight of the intent cross-entropy term (classifier head only).
    #[serde(default = "d_ce_weight")]
    pub ce_weight: f64,
}

fn d_epochs() -> usize {
    20
}
fn d_batch() -> usize {
    128
}
fn d_lr() -> f64 {
    0.01
}
fn d_ce_weight() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: d_epochs(),
            batch: d_batch(),
            lr: d_lr(),
            ce_weight: d_ce_weight(),
        }
    }
}

/// Source of the errors used to place the DME thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationPass {
    /// Single-epoch run of the configured adapter over the validation trials.
    #[default]
    Adapted,
    /// Frozen offline model over the validation trials.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DmeConfig {
    /// One epoch per sample.
    #[default]
    None,
    Proposed {
        #[serde(default = "d_q1")]
        q1: f64,
        #[serde(default = "d_q2")]
        q2: f64,
        /// Fixed thresholds; calibration is skipped when `xi1` is given. A
        /// missing `xi2` (or `no_anomaly`) means no sample is ever dropped.
        #[serde(default)]
        xi1: Option<f64>,
        #[serde(default)]
        xi2: Option<f64>,
        #[serde(default)]
        no_anomaly: bool,
        #[serde(default)]
        calibration: CalibrationPass,
    },
    Fixed {
        k: usize,
    },
    Random {
        #[serde(default = "d_random_p")]
        p: [f64; 3],
        #[serde(default)]
        seed: u64,
    },
}

fn d_q1() -> f64 {
    0.5
}
fn d_q2() -> f64 {
    0.999
}
fn d_random_p() -> [f64; 3] {
    [0.5, 0.499, 0.001]
}

impl DmeConfig {
    pub fn proposed() -> Self {
        DmeConfig::Proposed {
            q1: d_q1(),
            q2: d_q2(),
            xi1: None,
            xi2: None,
            no_anomaly: false,
            calibration: CalibrationPass::Adapted,
        }
    }

    /// Short tag used in cell names.
    pub fn label(&self) -> String {
        match self {
            DmeConfig::None => "none".into(),
            DmeConfig::Proposed { .. } => "dme".into(),
            DmeConfig::Fixed { k } => format!("fixed{k}"),
            DmeConfig::Random { .. } => "random".into(),
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        match self {
            DmeConfig::None => Ok(()),
            DmeConfig::Proposed { q1, q2, xi1, xi2, .. } => {
                if !(0.0..=1.0).contains(q1) {
                    return Err(Error::config(format!("{field}.q1"), "must lie in [0, 1]"));
                }
                if !(0.0..=1.0).contains(q2) || q2 < q1 {
                    return Err(Error::config(format!("{field}.q2"), "must lie in [q1, 1]"));
                }
                if let Some(x1) = xi1 {
                    if !(*x1 >= 0.0 && x1.is_finite()) {
                        return Err(Error::config(format!("{field}.xi1"), "must be finite and >= 0"));
                    }
                    if xi2.is_some_and(|x2| !(x2 >= *x1)) {
                        return Err(Error::config(format!("{field}.xi2"), "must be >= xi1"));
                    }
                }
                Ok(())
            }
            DmeConfig::Fixed { k } => {
                if *k > 16 {
                    return Err(Error::config(format!("{field}.k"), "must be at most 16"));
                }
                Ok(())
            }
            DmeConfig::Random { p, .. } => {
                let total: f64 = p.iter().sum();
                if p.iter().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                    return Err(Error::config(
                        format!("{field}.p"),
                        "must be three non-negative probabilities summing to 1",
                    ));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// One full replicate (data, split, training, runs) per seed.
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    /// Keep adapter state across trial boundaries instead of resetting.
    #[serde(default)]
    pub carry_state: bool,
    /// Worker cap for matrix runs; `None` uses every core.
    #[serde(default)]
    pub jobs: Option<usize>,
}

fn d_seeds() -> Vec<u64> {
    (0..10).collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: d_seeds(),
            carry_state: false,
            jobs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub name: String,
    pub adapter: Adapter,
    #[serde(default)]
    pub dme: DmeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub cells: Vec<CellConfig>,
}

impl Default for MatrixConfig {
    /// Every baseline with and without DME, the EMA ablations, and the
    /// epoch-criterion comparison on `mekf_ema`.
    fn default() -> Self {
        let mut cells = Vec::new();
        for key in ["none", "sgd", "momentum", "adam", "amsgrad", "mekf", "mekf_ema"] {
            let adapter = Adapter::from_key(key).expect("built-in key");
            cells.push(CellConfig {
                name: key.into(),
                adapter: adapter.clone(),
                dme: DmeConfig::None,
            });
            if key != "none" {
                cells.push(CellConfig {
                    name: format!("{key}+dme"),
                    adapter,
                    dme: DmeConfig::proposed(),
                });
            }
        }
        let ema = MekfHyper::default();
        cells.push(CellConfig {
            name: "mekf+ema_v".into(),
            adapter: Adapter::MekfEma(MekfHyper { mu_p: 0.0, ..ema.clone() }),
            dme: DmeConfig::None,
        });
        cells.push(CellConfig {
            name: "mekf+ema_p".into(),
            adapter: Adapter::MekfEma(MekfHyper { mu_v: 0.0, ..ema.clone() }),
            dme: DmeConfig::None,
        });
        cells.push(CellConfig {
            name: "mekf_ema+fixed2".into(),
            adapter: Adapter::MekfEma(ema.clone()),
            dme: DmeConfig::Fixed { k: 2 },
        });
        cells.push(CellConfig {
            name: "mekf_ema+random".into(),
            adapter: Adapter::MekfEma(ema),
            dme: DmeConfig::Random {
                p: d_random_p(),
                seed: 0,
            },
        });
        Self { cells }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "d_out_dir")]
    pub dir: PathBuf,
}

fn d_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: d_out_dir() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Adapter for the single-stream commands (`calibrate`, `adapt`).
    #[serde(default = "d_adapter")]
    pub adapter: Adapter,
    #[serde(default)]
    pub dme: DmeConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub matrix: MatrixConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn d_adapter() -> Adapter {
    Adapter::Mekf(MekfHyper::default())
}

impl Default for ExperimentConfig {
    /// The drift-linear benchmark.
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::Synthetic {
                generator: DriftConfig::drift_linear(),
            },
            split: SplitConfig::default(),
            model: ModelConfig {
                architecture: Architecture::Linear(LinearModel::new(1, 2, 2, true)),
                m: 5,
                mask: MaskSpec::Default,
            },
            train: TrainConfig::default(),
            adapter: d_adapter(),
            dme: DmeConfig::None,
            run: RunConfig::default(),
            matrix: MatrixConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn window(&self) -> (usize, usize) {
        (self.model.architecture.window_len(), self.model.m)
    }

    /// Checks every range constraint, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let arch = &self.model.architecture;
        arch.validate()?;
        let (n, m) = self.window();
        if m == 0 {
            return Err(Error::config("model.m", "must be at least 1"));
        }
        if let DatasetConfig::Synthetic { generator } = &self.dataset {
            generator.validate().map_err(|e| match e {
                Error::Config { field, message } => Error::config(format!("dataset.{field}"), message),
                other => other,
            })?;
            if generator.length <= n + m {
                return Err(Error::config(
                    "dataset.generator.length",
                    format!("must exceed n + m = {}", n + m),
                ));
            }
            if generator.dim() != arch.input_dim() {
                return Err(Error::config(
                    "model.architecture.d_in",
                    format!("generator produces {} features", generator.dim()),
                ));
            }
            if generator.trials < 3 {
                return Err(Error::config("dataset.generator.trials", "need at least 3 to split"));
            }
            let classes = arch.num_classes();
            if classes > 0 && generator.regimes.iter().any(|r| r.intent >= classes) {
                return Err(Error::config(
                    "dataset.generator.regimes",
                    format!("intent labels must be below the model's {classes} classes"),
                ));
            }
        }
        let r = self.split.ratios;
        if r.iter().any(|v| !(*v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split.ratios", "must be non-negative and sum to 1"));
        }
        if r[0] <= 0.0 {
            return Err(Error::config("split.ratios", "training share must be positive"));
        }
        self.model.mask.resolve(arch)?;
        if self.train.batch == 0 {
            return Err(Error::config("train.batch", "must be positive"));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be > 0"));
        }
        if !(self.train.ce_weight >= 0.0 && self.train.ce_weight.is_finite()) {
            return Err(Error::config("train.ce_weight", "must be >= 0"));
        }
        self.adapter.validate("adapter")?;
        self.dme.validate("dme")?;
        if self.run.seeds.is_empty() {
            return Err(Error::config("run.seeds", "need at least one seed"));
        }
        if self.run.jobs == Some(0) {
            return Err(Error::config("run.jobs", "must be positive"));
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, cell) in self.matrix.cells.iter().enumerate() {
            let field = format!("matrix.cells[{i}]");
            if cell.name.is_empty() || !names.insert(cell.name.as_str()) {
                return Err(Error::config(format!("{field}.name"), "must be unique and non-empty"));
            }
            cell.adapter.validate(&format!("{field}.adapter"))?;
            cell.dme.validate(&format!("{field}.dme"))?;
            if matches!(cell.adapter, Adapter::Rls(_)) && !arch.is_linear_in_params() {
                return Err(Error::config(
                    format!("{field}.adapter"),
                    "rls needs a model linear in its parameters",
                ));
            }
        }
        if matches!(self.adapter, Adapter::Rls(_)) && !arch.is_linear_in_params() {
            return Err(Error::config("adapter", "rls needs a model linear in its parameters"));
        }
        Ok(())
    }
}
