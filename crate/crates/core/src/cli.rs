//! Experiment pipeline stages behind the `kanwm` subcommands.
//!
//! Every command reads an [`ExperimentConfig`], writes its artifacts into an
//! output directory and appends a row to `<out>/report.json`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{prune_sweep, run_attack, AttackSpec};
use crate::checkpoint::{Checkpoint, Provenance, Stage};
use crate::config::{DatasetSpec, ExperimentConfig, SeedBundle};
use crate::data::{feynman_formula, gen_feynman, load_idx, split_counts, Dataset};
use crate::error::{shape_err, Error, Result};
use crate::kan::KanModel;
use crate::mlp::MlpModel;
use crate::numeric::OptimizerState;
use crate::report::{MetricsReport, ReportRow, SweepReport, REPORT_FORMAT_VERSION};
use crate::train::{evaluate_kan, evaluate_mlp, train_kan, train_mlp, TrainSettings};
use crate::watermark::{
    build_detector_dataset, calibrate_amplitude, default_band, embed, gen_signal, train_detector, verify,
    EmbedSettings, PerturbationSignal, VerificationResult,
};

pub const REPORT_FILE: &str = "report.json";
pub const WATERMARKED_FILE: &str = "watermarked.json";
pub const DETECTOR_FILE: &str = "detector.json";
pub const SWEEP_FILE: &str = "prune_sweep.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModelKind {
    Kan,
    Mlp,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Kan => "kan",
            ModelKind::Mlp => "mlp",
        }
    }
}

pub fn clean_file(kind: ModelKind) -> String {
    format!("clean_{}.json", kind.name())
}

pub fn attacked_file(spec: &AttackSpec) -> String {
    format!("attacked_{}.json", spec.label())
}

#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Loads or generates the configured dataset and splits it with the data seed.
pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let seeds = cfg.seeds();
    let (full, train, test) = match &cfg.dataset {
        DatasetSpec::Idx {
            images,
            labels,
            pool,
            train,
            test,
        } => {
            let ds = load_idx(images, labels)?;
            (if *pool { ds.avg_pool2()? } else { ds }, *train, *test)
        }
        DatasetSpec::Feynman { formula, train, test } => {
            let f = feynman_formula(formula).map_err(|e| Error::Config(e.to_string()))?;
            (gen_feynman(f, train + test, seeds.data)?, *train, *test)
        }
    };
    if full.dim() != cfg.kan_widths[0] {
        return Err(shape_err!(
            "dataset has {} features but the model expects {}",
            full.dim(),
            cfg.kan_widths[0]
        ));
    }
    let s = split_counts(&full, [train, test, 0], seeds.data)?;
    if s.test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    Ok(ExperimentData {
        train: s.train,
        test: s.test,
    })
}

pub fn init_kan(cfg: &ExperimentConfig, seeds: &SeedBundle) -> Result<KanModel> {
    KanModel::init(
        &cfg.kan_widths,
        cfg.grid,
        &mut ChaCha8Rng::seed_from_u64(seeds.init),
    )
}

pub fn init_mlp(cfg: &ExperimentConfig, seeds: &SeedBundle) -> Result<MlpModel> {
    MlpModel::init(cfg.mlp_widths(), &mut ChaCha8Rng::seed_from_u64(seeds.init))
}

fn train_settings(cfg: &ExperimentConfig, seeds: &SeedBundle) -> TrainSettings {
    TrainSettings {
        epochs: cfg.training.epochs,
        batch_size: cfg.training.batch_size,
        lr: cfg.training.lr_main,
        shuffle_seed: seeds.shuffle,
    }
}

pub fn train_clean_kan(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<KanModel> {
    let seeds = cfg.seeds();
    let mut model = init_kan(cfg, &seeds)?;
    let settings = train_settings(cfg, &seeds);
    train_kan(
        &mut model,
        &data.train,
        &settings,
        &mut OptimizerState::adam(settings.lr),
    )?;
    Ok(model)
}

pub fn train_clean_mlp(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<MlpModel> {
    let seeds = cfg.seeds();
    let mut model = init_mlp(cfg, &seeds)?;
    let settings = train_settings(cfg, &seeds);
    train_mlp(
        &mut model,
        &data.train,
        &settings,
        &mut OptimizerState::adam(settings.lr),
    )?;
    Ok(model)
}

/// Keyed signal sized to layer 0; the amplitude is calibrated on the clean
/// model unless the config fixes it.
pub fn make_signal(
    cfg: &ExperimentConfig,
    clean: &KanModel,
    data: &ExperimentData,
) -> Result<PerturbationSignal> {
    let n = clean.layers()[0].out_dim();
    let band = cfg.watermark.band.unwrap_or_else(|| default_band(n));
    let amplitude = match cfg.watermark.amplitude {
        Some(a) => a,
        None => {
            let calib = data.train.head(cfg.watermark.calibration_samples);
            calibrate_amplitude(clean, &calib.inputs, band, cfg.watermark.amplitude_factor)?
        }
    };
    gen_signal(cfg.seeds().signal_key, n, band, amplitude)
}

#[derive(Debug, Clone)]
pub struct Embedded {
    pub model: KanModel,
    pub signal: PerturbationSignal,
    pub detector: MlpModel,
}

/// Watermarked training from the clean model's initialization and batch
/// order, followed by detector training on the (watermarked, clean) pair.
pub fn embed_and_train_detector(
    cfg: &ExperimentConfig,
    clean: &KanModel,
    clean_seeds: &SeedBundle,
    data: &ExperimentData,
) -> Result<Embedded> {
    if clean.widths() != cfg.kan_widths {
        return Err(shape_err!(
            "clean model widths {:?} differ from configured {:?}",
            clean.widths(),
            cfg.kan_widths
        ));
    }
    let seeds = cfg.seeds();
    let signal = make_signal(cfg, clean, data)?;
    let settings = EmbedSettings {
        epochs: cfg.training.epochs,
        batch_size: cfg.training.batch_size,
        lr_main: cfg.training.lr_main,
        lr_wm: cfg.watermark.lr_wm,
        shuffle_seed: clean_seeds.shuffle,
    };
    let model = embed(init_kan(cfg, clean_seeds)?, &signal, &data.train, &settings)?.model;
    let samples = data.train.head(cfg.detector.samples);
    let ds = build_detector_dataset(
        &model,
        clean,
        &samples.inputs,
        cfg.detector.n_shuffles,
        seeds.detector,
    )?;
    let detector = train_detector(&ds, &cfg.detector_settings(seeds.detector))?;
    Ok(Embedded {
        model,
        signal,
        detector,
    })
}

fn provenance(cfg: &ExperimentConfig, seeds: SeedBundle, stage: Stage) -> Provenance {
    Provenance {
        config_hash: cfg.hash(),
        seeds,
        stage,
        attack: None,
        signal: None,
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn row(cfg: &ExperimentConfig, stage: impl Into<String>, model: &str) -> ReportRow {
    ReportRow::new(stage, model, cfg.task, &cfg.hash(), cfg.seeds())
}

/// Trains a clean model and writes `clean_<kind>.json`.
pub fn cmd_train_clean(cfg: &ExperimentConfig, kind: ModelKind, out: &Path) -> Result<PathBuf> {
    ensure_dir(out)?;
    let data = load_data(cfg)?;
    let prov = provenance(cfg, cfg.seeds(), Stage::Clean);
    let (ck, eval) = match kind {
        ModelKind::Kan => {
            let m = train_clean_kan(cfg, &data)?;
            (Checkpoint::from_kan(&m, prov), evaluate_kan(&m, &data.test)?)
        }
        ModelKind::Mlp => {
            let m = train_clean_mlp(cfg, &data)?;
            (Checkpoint::from_mlp(&m, prov), evaluate_mlp(&m, &data.test)?)
        }
    };
    let path = out.join(clean_file(kind));
    ck.save(&path)?;
    let mut r = row(cfg, "clean", kind.name());
    r.main_metric = Some(eval.metric);
    MetricsReport::append(&out.join(REPORT_FILE), r)?;
    Ok(path)
}

/// Embeds the watermark and trains the detector; writes both checkpoints.
pub fn cmd_embed(cfg: &ExperimentConfig, clean_path: &Path, out: &Path) -> Result<(PathBuf, PathBuf)> {
    ensure_dir(out)?;
    let clean_ck = Checkpoint::load(clean_path)?;
    let clean = clean_ck.to_kan()?;
    let data = load_data(cfg)?;
    let e = embed_and_train_detector(cfg, &clean, &clean_ck.provenance.seeds, &data)?;

    let mut prov = provenance(cfg, cfg.seeds(), Stage::Watermarked);
    prov.signal = Some(e.signal.clone());
    let wm_path = out.join(WATERMARKED_FILE);
    Checkpoint::from_kan(&e.model, prov).save(&wm_path)?;
    let det_path = out.join(DETECTOR_FILE);
    Checkpoint::from_mlp(&e.detector, provenance(cfg, cfg.seeds(), Stage::Detector)).save(&det_path)?;

    let v = verify(&e.model, &e.detector, &data.test.inputs, cfg.threshold)?;
    let mut r = row(cfg, "watermarked", "kan");
    r.main_metric = Some(evaluate_kan(&e.model, &data.test)?.metric);
    r.wm_detection_rate = Some(100.0 * v.detection_rate);
    r.decision = Some(v.decision);
    MetricsReport::append(&out.join(REPORT_FILE), r)?;
    Ok((wm_path, det_path))
}

/// Runs one attack against a watermarked checkpoint; writes `attacked_<label>.json`.
pub fn cmd_attack(cfg: &ExperimentConfig, wm_path: &Path, spec: &AttackSpec, out: &Path) -> Result<PathBuf> {
    spec.validate()?;
    ensure_dir(out)?;
    let model = Checkpoint::load(wm_path)?.to_kan()?;
    let data = load_data(cfg)?;
    let attacked = run_attack(&model, spec, &data.train)?;
    let mut prov = provenance(cfg, cfg.seeds(), Stage::Attacked);
    prov.attack = Some(*spec);
    let path = out.join(attacked_file(spec));
    Checkpoint::from_kan(&attacked, prov).save(&path)?;
    let mut r = row(cfg, format!("attacked:{}", spec.label()), "kan");
    r.main_metric = Some(evaluate_kan(&attacked, &data.test)?.metric);
    MetricsReport::append(&out.join(REPORT_FILE), r)?;
    Ok(path)
}

/// Verifies a suspect model on the held-out test split.
pub fn cmd_verify(
    cfg: &ExperimentConfig,
    detector_path: &Path,
    suspect_path: &Path,
    threshold: f64,
    out: &Path,
) -> Result<VerificationResult> {
    ensure_dir(out)?;
    let detector = Checkpoint::load(detector_path)?.to_mlp()?;
    let suspect = Checkpoint::load(suspect_path)?.to_kan()?;
    let data = load_data(cfg)?;
    let v = verify(&suspect, &detector, &data.test.inputs, threshold)?;
    let mut r = row(cfg, "verify", "kan");
    r.main_metric = Some(evaluate_kan(&suspect, &data.test)?.metric);
    r.wm_detection_rate = Some(100.0 * v.detection_rate);
    r.decision = Some(v.decision);
    MetricsReport::append(&out.join(REPORT_FILE), r)?;
    Ok(v)
}

/// Trains matched KAN and MLP models and tabulates accuracy against pruning ratio.
pub fn cmd_prune_sweep(cfg: &ExperimentConfig, step: f64, out: &Path) -> Result<SweepReport> {
    ensure_dir(out)?;
    let data = load_data(cfg)?;
    let kan = train_clean_kan(cfg, &data)?;
    let mlp = train_clean_mlp(cfg, &data)?;
    let calib = data.train.head(cfg.watermark.calibration_samples);
    let report = SweepReport {
        format_version: REPORT_FORMAT_VERSION,
        metric_name: crate::report::metric_name(cfg.task).to_string(),
        config_hash: cfg.hash(),
        seeds: cfg.seeds(),
        rows: prune_sweep(&kan, &mlp, &calib.inputs, &data.test, step)?,
    };
    let path = out.join(SWEEP_FILE);
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

pub fn cmd_report(out: &Path) -> Result<String> {
    let mut text = MetricsReport::load(&out.join(REPORT_FILE))?.render();
    let sweep = out.join(SWEEP_FILE);
    if sweep.exists() {
        let raw = fs::read_to_string(&sweep).map_err(|e| Error::io(&sweep, e))?;
        let report: SweepReport =
            serde_json::from_str(&raw).map_err(|e| Error::Data(format!("{}: {e}", sweep.display())))?;
        text.push('\n');
        text.push_str(&report.render());
    }
    Ok(text)
}
