//! Experiment configuration and the seed bundle.
//!
//! Configs are JSON. A single master seed fans out into named sub-seeds so
//! each pipeline stage can be reproduced on its own.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackKind, AttackSpec};
use crate::error::{Error, Result};
use crate::spline::GridSpec;
use crate::watermark::{DetectorSettings, DEFAULT_AMPLITUDE_FACTOR};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetSpec {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// 2x2 average pooling (28x28 -> 14x14).
        #[serde(default)]
        pool: bool,
        train: usize,
        test: usize,
    },
    Feynman {
        formula: String,
        train: usize,
        test: usize,
    },
}

impl DatasetSpec {
    pub fn task(&self) -> Task {
        match self {
            DatasetSpec::Idx { .. } => Task::Classification,
            DatasetSpec::Feynman { .. } => Task::Regression,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub lr_main: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WatermarkConfig {
    /// Inclusive DCT index range; defaults to `[N/4, N/2]`.
    #[serde(default)]
    pub band: Option<(usize, usize)>,
    /// Fixed amplitude; when absent it is calibrated from the clean model.
    #[serde(default)]
    pub amplitude: Option<f64>,
    #[serde(default = "default_amplitude_factor")]
    pub amplitude_factor: f64,
    pub lr_wm: f64,
    #[serde(default = "default_calibration_samples")]
    pub calibration_samples: usize,
}

fn default_amplitude_factor() -> f64 {
    DEFAULT_AMPLITUDE_FACTOR
}

fn default_calibration_samples() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub n_shuffles: usize,
    /// Training rows whose activations build the detector set.
    pub samples: usize,
}

/// Attack entry of a config; the seed comes from the seed bundle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub lr: f64,
    pub epochs: usize,
    #[serde(default)]
    pub prune_ratio: Option<f64>,
}

impl AttackConfig {
    pub fn to_spec(&self, seed: u64) -> AttackSpec {
        AttackSpec {
            kind: self.kind,
            lr: self.lr,
            epochs: self.epochs,
            prune_ratio: self.prune_ratio,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub task: Task,
    pub dataset: DatasetSpec,
    pub kan_widths: Vec<usize>,
    /// Widths for the MLP baseline; defaults to `kan_widths`.
    #[serde(default)]
    pub mlp_widths: Option<Vec<usize>>,
    #[serde(default)]
    pub grid: GridSpec,
    pub training: TrainingConfig,
    pub watermark: WatermarkConfig,
    pub detector: DetectorConfig,
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.5
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn mlp_widths(&self) -> &[usize] {
        self.mlp_widths.as_deref().unwrap_or(&self.kan_widths)
    }

    pub fn seeds(&self) -> SeedBundle {
        SeedBundle::from_master(self.seed)
    }

    /// Hex SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.format_version != CONFIG_FORMAT_VERSION {
            return bad(format!(
                "config format_version {} (supported: {CONFIG_FORMAT_VERSION})",
                self.format_version
            ));
        }
        if self.task != self.dataset.task() {
            return bad(format!("task {:?} does not match the dataset source", self.task));
        }
        for (name, widths) in [
            ("kan_widths", &self.kan_widths[..]),
            ("mlp_widths", self.mlp_widths()),
        ] {
            if widths.len() < 2 || widths.contains(&0) {
                return bad(format!("{name} {widths:?} needs at least two positive widths"));
            }
        }
        if self.kan_widths[0] != self.mlp_widths()[0] || self.kan_widths.last() != self.mlp_widths().last() {
            return bad("kan_widths and mlp_widths must share input and output widths".into());
        }
        let out = *self.kan_widths.last().unwrap();
        match (&self.dataset, self.task) {
            (DatasetSpec::Idx { train, .. }, _) | (DatasetSpec::Feynman { train, .. }, _) if *train == 0 => {
                return bad("dataset.train must be positive".into())
            }
            (DatasetSpec::Idx { test, .. }, _) | (DatasetSpec::Feynman { test, .. }, _) if *test == 0 => {
                return bad("dataset.test must be positive".into())
            }
            (_, Task::Regression) if out != 1 => return bad("regression models need one output".into()),
            (_, Task::Classification) if out < 2 => {
                return bad("classification models need at least two outputs".into())
            }
            _ => {}
        }
        let pos = |v: f64| v > 0.0 && v.is_finite();
        let t = &self.training;
        if t.epochs == 0 || t.batch_size == 0 || !pos(t.lr_main) {
            return bad("training needs positive epochs, batch_size and lr_main".into());
        }
        let w = &self.watermark;
        if !(w.lr_wm >= 0.0 && w.lr_wm.is_finite()) || w.calibration_samples == 0 {
            return bad("watermark.lr_wm must be non-negative and calibration_samples positive".into());
        }
        if !(w.amplitude_factor >= 0.0 && w.amplitude_factor.is_finite()) {
            return bad("watermark.amplitude_factor must be non-negative".into());
        }
        if let Some(a) = w.amplitude {
            if !(a >= 0.0 && a.is_finite()) {
                return bad(format!("watermark.amplitude {a} must be non-negative"));
            }
        }
        let n0 = self.kan_widths[1];
        if let Some((lo, hi)) = w.band {
            if lo > hi || hi >= n0 {
                return bad(format!(
                    "watermark.band [{lo}, {hi}] invalid for layer-0 width {n0}"
                ));
            }
        }
        let d = &self.detector;
        if d.epochs == 0 || d.batch_size == 0 || d.samples == 0 || !pos(d.lr) || d.hidden.contains(&0) {
            return bad("detector needs positive epochs, batch_size, samples, lr and widths".into());
        }
        for a in &self.attacks {
            a.to_spec(0).validate()?;
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        self.grid_check()
    }

    fn grid_check(&self) -> Result<()> {
        let g = self.grid;
        crate::spline::build_grid(g.degree, g.intervals, g.t_min, g.t_max)
            .map(|_| ())
            .map_err(|e| Error::Config(format!("grid: {e}")))
    }

    pub fn detector_settings(&self, seed: u64) -> DetectorSettings {
        DetectorSettings {
            hidden: self.detector.hidden.clone(),
            epochs: self.detector.epochs,
            lr: self.detector.lr,
            batch_size: self.detector.batch_size,
            seed,
        }
    }
}

/// Named sub-seeds derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedBundle {
    pub master: u64,
    pub init: u64,
    pub data: u64,
    pub shuffle: u64,
    pub signal_key: u64,
    pub detector: u64,
    pub attack: u64,
}

/// First 8 bytes (little-endian) of `SHA-256(master_le || label)`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

impl SeedBundle {
    pub fn from_master(master: u64) -> Self {
        SeedBundle {
            master,
            init: derive_seed(master, "init"),
            data: derive_seed(master, "data"),
            shuffle: derive_seed(master, "shuffle"),
            signal_key: derive_seed(master, "signal_key"),
            detector: derive_seed(master, "detector"),
            attack: derive_seed(master, "attack"),
        }
    }
}
