//! Watermark-removal attacks: fine-tuning, pruning, retraining a pruned model,
//! and the KAN/MLP pruning sweep.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kan::KanModel;
use crate::mlp::MlpModel;
use crate::numeric::{Mat, OptimizerState};
use crate::train::{evaluate_kan, evaluate_mlp, train_kan, Evaluation, TrainSettings};

pub const FINETUNE_EPOCHS: usize = 8;
pub const SMALL_LR: f64 = 0.001;
pub const LARGE_LR: f64 = 0.01;
pub const PRUNE_RATIO: f64 = 0.6;
pub const RETRAIN_LR: f64 = 0.001;
pub const RETRAIN_EPOCHS: usize = 8;
pub const ATTACK_BATCH: usize = 64;
/// Leading training samples used to rank edges when an attack prunes.
pub const PRUNE_CALIBRATION: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Finetune,
    Prune,
    RetrainAfterPrune,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Finetune => "finetune",
            AttackKind::Prune => "prune",
            AttackKind::RetrainAfterPrune => "retrain_after_prune",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(AttackKind::Finetune),
            "prune" => Ok(AttackKind::Prune),
            "retrain" | "retrain_after_prune" => Ok(AttackKind::RetrainAfterPrune),
            other => Err(Error::Config(format!("unknown attack kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub lr: f64,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune_ratio: Option<f64>,
    pub seed: u64,
}

impl AttackSpec {
    pub fn finetune(lr: f64, seed: u64) -> Self {
        AttackSpec {
            kind: AttackKind::Finetune,
            lr,
            epochs: FINETUNE_EPOCHS,
            prune_ratio: None,
            seed,
        }
    }

    pub fn prune(ratio: f64, seed: u64) -> Self {
        AttackSpec {
            kind: AttackKind::Prune,
            lr: 0.0,
            epochs: 0,
            prune_ratio: Some(ratio),
            seed,
        }
    }

    pub fn retrain_after_prune(ratio: f64, lr: f64, epochs: usize, seed: u64) -> Self {
        AttackSpec {
            kind: AttackKind::RetrainAfterPrune,
            lr,
            epochs,
            prune_ratio: Some(ratio),
            seed,
        }
    }

    /// Preset for a kind: fine-tune at the small rate, prune at 0.6, retrain at 0.6 / 0.001.
    pub fn preset(kind: AttackKind, seed: u64) -> Self {
        match kind {
            AttackKind::Finetune => Self::finetune(SMALL_LR, seed),
            AttackKind::Prune => Self::prune(PRUNE_RATIO, seed),
            AttackKind::RetrainAfterPrune => {
                Self::retrain_after_prune(PRUNE_RATIO, RETRAIN_LR, RETRAIN_EPOCHS, seed)
            }
        }
    }

    /// Short tag naming the kind and its hyperparameters, e.g. `finetune-lr0.01-e8`.
    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::Finetune => format!("finetune-lr{}-e{}", self.lr, self.epochs),
            AttackKind::Prune => format!("prune-r{}", self.prune_ratio.unwrap_or(0.0)),
            AttackKind::RetrainAfterPrune => {
                format!(
                    "retrain-r{}-lr{}-e{}",
                    self.prune_ratio.unwrap_or(0.0),
                    self.lr,
                    self.epochs
                )
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.prune_ratio) {
            (AttackKind::Finetune, Some(_)) => {
                return Err(Error::Config("fine-tuning takes no prune ratio".into()))
            }
            (AttackKind::Prune | AttackKind::RetrainAfterPrune, None) => {
                return Err(Error::Config("pruning attacks need a prune ratio".into()))
            }
            (_, Some(r)) if !(0.0..=1.0).contains(&r) => {
                return Err(Error::Config(format!("prune ratio {r} outside [0, 1]")))
            }
            _ => {}
        }
        let trains = self.kind != AttackKind::Prune && self.epochs > 0;
        if trains && !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "attack learning rate {} must be positive",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Continued main-task training with a fresh optimizer.
pub fn finetune(mut model: KanModel, data: &Dataset, epochs: usize, lr: f64, seed: u64) -> Result<KanModel> {
    if data.is_empty() {
        return Err(Error::Data("fine-tuning needs training data".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate {lr} must be positive"
        )));
    }
    let settings = TrainSettings {
        epochs,
        batch_size: ATTACK_BATCH,
        lr,
        shuffle_seed: seed,
    };
    let mut opt = OptimizerState::adam(lr);
    train_kan(&mut model, data, &settings, &mut opt)?;
    Ok(model)
}

pub fn prune_attack(model: &KanModel, ratio: f64, calibration: &Mat) -> Result<KanModel> {
    model.prune(ratio, calibration)
}

/// Prunes, lifts the masks so pruned edges restart from zero, then retrains.
pub fn retrain_after_prune(
    model: &KanModel,
    ratio: f64,
    lr: f64,
    epochs: usize,
    data: &Dataset,
    seed: u64,
) -> Result<KanModel> {
    let mut pruned = prune_attack(model, ratio, &data.head(PRUNE_CALIBRATION).inputs)?;
    pruned.lift_masks();
    if epochs == 0 {
        return Ok(pruned);
    }
    finetune(pruned, data, epochs, lr, seed)
}

/// Runs an attack; pruning is calibrated on the head of the attacker's data.
pub fn run_attack(model: &KanModel, spec: &AttackSpec, data: &Dataset) -> Result<KanModel> {
    spec.validate()?;
    let ratio = spec.prune_ratio.unwrap_or(0.0);
    match spec.kind {
        AttackKind::Finetune if spec.epochs == 0 => Ok(model.clone()),
        AttackKind::Finetune => finetune(model.clone(), data, spec.epochs, spec.lr, spec.seed),
        AttackKind::Prune => prune_attack(model, ratio, &data.head(PRUNE_CALIBRATION).inputs),
        AttackKind::RetrainAfterPrune => {
            retrain_after_prune(model, ratio, spec.lr, spec.epochs, data, spec.seed)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub kan: Evaluation,
    pub mlp: Evaluation,
}

/// Ratios `0, step, 2*step, ..., 1`.
pub fn sweep_ratios(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sweep step {step} outside (0, 1]"
        )));
    }
    let n = (1.0 / step).round() as usize;
    Ok((0..=n).map(|k| (k as f64 * step).min(1.0)).collect())
}

/// Evaluates both models pruned to each ratio. Every ratio starts from the
/// unpruned model.
pub fn prune_sweep(
    kan: &KanModel,
    mlp: &MlpModel,
    calibration: &Mat,
    test: &Dataset,
    step: f64,
) -> Result<Vec<SweepRow>> {
    sweep_ratios(step)?
        .into_iter()
        .map(|ratio| {
            Ok(SweepRow {
                ratio,
                kan: evaluate_kan(&kan.prune(ratio, calibration)?, test)?,
                mlp: evaluate_mlp(&mlp.prune(ratio)?, test)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{feynman_formula, gen_feynman};
    use crate::spline::GridSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (KanModel, MlpModel, Dataset) {
        let data = gen_feynman(feynman_formula("I.12.11").unwrap(), 120, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let kan = KanModel::init(&[2, 4, 1], GridSpec::default(), &mut rng).unwrap();
        let mlp = MlpModel::init(&[2, 4, 1], &mut rng).unwrap();
        (kan, mlp, data)
    }

    #[test]
    fn attack_settings_validation() {
        assert!(AttackSpec::preset(AttackKind::Finetune, 0).validate().is_ok());
        assert!(AttackSpec::preset(AttackKind::Prune, 0).validate().is_ok());
        let r = AttackSpec::preset(AttackKind::RetrainAfterPrune, 0);
        assert_eq!((r.prune_ratio, r.lr, r.epochs), (Some(0.6), 0.001, 8));
        assert!(r.validate().is_ok());
        let mut bad = AttackSpec::finetune(0.0, 0);
        assert!(bad.validate().is_err());
        bad.lr = 0.01;
        bad.prune_ratio = Some(0.5);
        assert!(bad.validate().is_err());
        assert!(AttackSpec::prune(1.5, 0).validate().is_err());
        assert!("shrink".parse::<AttackKind>().is_err());
        assert_eq!(
            "retrain".parse::<AttackKind>().unwrap(),
            AttackKind::RetrainAfterPrune
        );
        assert_eq!(r.label(), "retrain-r0.6-lr0.001-e8");
        assert_eq!(AttackSpec::finetune(LARGE_LR, 0).label(), "finetune-lr0.01-e8");
    }

    #[test]
    fn trivial_attacks() {
        let (kan, _, data) = fixture();
        assert_eq!(finetune(kan.clone(), &data, 0, 0.01, 1).unwrap(), kan);
        assert_eq!(prune_attack(&kan, 0.0, &data.inputs).unwrap(), kan);
        let mut expected = prune_attack(&kan, 0.6, &data.inputs).unwrap();
        expected.lift_masks();
        assert_eq!(
            retrain_after_prune(&kan, 0.6, 0.001, 0, &data, 1).unwrap(),
            expected
        );
        let empty = data.select(&[], crate::data::Split::Train);
        assert!(finetune(kan, &empty, 1, 0.01, 1).is_err());
    }

    #[test]
    fn tiny_learning_rate_barely_moves() {
        let (kan, _, data) = fixture();
        let tuned = finetune(kan.clone(), &data, 8, 1e-12, 3).unwrap();
        assert_eq!(tuned.widths(), kan.widths());
        for (a, b) in tuned.layers().iter().zip(kan.layers()) {
            for (x, y) in a
                .coeffs
                .iter()
                .zip(&b.coeffs)
                .chain(a.w_b.iter().zip(&b.w_b))
                .chain(a.w_s.iter().zip(&b.w_s))
            {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn retrain_revives_pruned_edges() {
        let (kan, _, data) = fixture();
        let out = retrain_after_prune(&kan, 0.6, 0.01, 2, &data, 4).unwrap();
        assert_eq!(out.masked_count(), 0);
        assert_eq!(out.widths(), kan.widths());
        let pruned = prune_attack(&kan, 0.6, &data.inputs).unwrap();
        let revived = out
            .layers()
            .iter()
            .zip(pruned.layers())
            .any(|(a, b)| b.mask.iter().zip(&a.w_b).any(|(&m, &w)| !m && w != 0.0));
        assert!(revived);
    }

    #[test]
    fn sweep_rows_independent() {
        let (kan, mlp, data) = fixture();
        let rows = prune_sweep(&kan, &mlp, &data.inputs, &data, 0.1).unwrap();
        assert_eq!(rows.len(), 11);
        assert!((rows[10].ratio - 1.0).abs() < 1e-15);
        assert_eq!(rows[0].kan, evaluate_kan(&kan, &data).unwrap());
        assert_eq!(rows[0].mlp, evaluate_mlp(&mlp, &data).unwrap());
        for row in rows.iter().rev() {
            let k = evaluate_kan(&kan.prune(row.ratio, &data.inputs).unwrap(), &data).unwrap();
            assert_eq!(k, row.kan);
        }
        assert!(sweep_ratios(0.0).is_err());
    }
}
