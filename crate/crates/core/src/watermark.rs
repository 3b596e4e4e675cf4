//! Activation watermarking for KAN models.
//!
//! The owner draws a keyed sparse spectrum `P` over a mid-frequency band of the
//! layer-0 output vector. Embedding alternates a normal main-task step with a
//! step that pulls the layer-0 outputs `O` toward `idct(dct(O) + P)`, updating
//! layer-0 parameters only. A small MLP detector is then trained to tell
//! layer-0 outputs of the watermarked model from those of a clean model, with
//! shuffled copies of every vector as augmentation. A suspect model is
//! verified by the fraction of held-out samples the detector flags.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, Dataset};
use crate::error::{shape_err, Error, Result};
use crate::kan::KanModel;
use crate::mlp::{MlpModel, Targets};
use crate::numeric::{argmax_rows, mse_loss, Mat, OptimizerState};
use crate::train::{batch_targets, kan_main_step, TrainSettings};
use crate::transform::{dct, idct, Spectrum};

/// Amplitude as a multiple of the RMS in-band DCT coefficient of clean outputs.
pub const DEFAULT_AMPLITUDE_FACTOR: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSignal {
    pub key: u64,
    pub band: (usize, usize),
    pub amplitude: f64,
    pub values: Vec<f64>,
}

impl PerturbationSignal {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `[floor(n/4), floor(n/2)]`
pub fn default_band(n: usize) -> (usize, usize) {
    (n / 4, n / 2)
}

/// Keyed signal: `amplitude * (+-1)` on the band, zero elsewhere.
pub fn gen_signal(key: u64, n: usize, band: (usize, usize), amplitude: f64) -> Result<PerturbationSignal> {
    let (lo, hi) = band;
    if n == 0 || lo > hi || hi >= n {
        return Err(Error::InvalidArgument(format!(
            "band [{lo}, {hi}] invalid for signal length {n}"
        )));
    }
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(Error::InvalidArgument(format!("invalid amplitude {amplitude}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let mut values = vec![0.0; n];
    for v in &mut values[lo..=hi] {
        *v = if rng.random_bool(0.5) {
            amplitude
        } else {
            -amplitude
        };
    }
    Ok(PerturbationSignal {
        key,
        band,
        amplitude,
        values,
    })
}

/// `factor` times the RMS of the in-band DCT coefficients of the model's
/// layer-0 outputs on a calibration batch.
pub fn calibrate_amplitude(
    model: &KanModel,
    calibration: &Mat,
    band: (usize, usize),
    factor: f64,
) -> Result<f64> {
    let outs = model.layer0_outputs(calibration)?.values;
    let (lo, hi) = band;
    if hi >= outs.cols() || lo > hi {
        return Err(Error::InvalidArgument(format!(
            "band [{lo}, {hi}] invalid for layer-0 width {}",
            outs.cols()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in 0..outs.rows() {
        let spec = dct(outs.row(r))?;
        for &c in &spec.as_slice()[lo..=hi] {
            sum += c * c;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("empty calibration batch".into()));
    }
    Ok(factor * (sum / count as f64).sqrt())
}

/// Row-wise `idct(dct(O) + P)`, computed as `O + idct(P)` so that a zero
/// signal reproduces `O` exactly.
pub fn signal_targets(outputs: &Mat, signal: &PerturbationSignal) -> Result<Mat> {
    if outputs.cols() != signal.len() {
        return Err(shape_err!(
            "signal length {} vs layer-0 width {}",
            signal.len(),
            outputs.cols()
        ));
    }
    let delta = idct(&Spectrum(signal.values.clone()))?;
    let mut out = outputs.clone();
    for r in 0..out.rows() {
        for (o, d) in out.row_mut(r).iter_mut().zip(&delta) {
            *o += d;
        }
    }
    Ok(out)
}

/// One layer-0 update toward a fixed target for the layer-0 outputs.
/// Returns the pre-update MSE. Deeper layers are not touched.
pub fn layer0_step_towards(
    model: &mut KanModel,
    x: &Mat,
    target: &Mat,
    optimizer: &mut OptimizerState,
) -> Result<f64> {
    let layer0 = &model.layers()[0];
    let (out, cache) = layer0.forward_cached(x)?;
    let (loss, g) = mse_loss(&out, target)?;
    let (grads, _) = layer0.backward(&cache, &g, false)?;
    let layer0 = &mut model.layers_mut()[0];
    optimizer.step(&mut layer0.params_mut(), &[&grads.coeffs, &grads.w_b, &grads.w_s])?;
    Ok(loss)
}

/// Signal phase of one batch: recompute `O`, form `O_s` from it and step
/// layer 0 toward `O_s`.
pub fn signal_step(
    model: &mut KanModel,
    x: &Mat,
    signal: &PerturbationSignal,
    optimizer: &mut OptimizerState,
) -> Result<f64> {
    let outputs = model.layer0_outputs(x)?.values;
    let target = signal_targets(&outputs, signal)?;
    layer0_step_towards(model, x, &target, optimizer)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_wm: f64,
    pub shuffle_seed: u64,
}

#[derive(Debug, Clone)]
pub struct EmbedOutcome {
    pub model: KanModel,
    /// Mean signal loss per epoch.
    pub signal_losses: Vec<f64>,
    /// Mean main-task loss per epoch.
    pub main_losses: Vec<f64>,
}

/// Two-phase training: per batch a main-task step on every parameter, then a
/// signal step on layer 0. The two phases keep separate optimizer state.
pub fn embed(
    mut model: KanModel,
    signal: &PerturbationSignal,
    train: &Dataset,
    settings: &EmbedSettings,
) -> Result<EmbedOutcome> {
    let width = model.layers()[0].out_dim();
    if signal.len() != width {
        return Err(shape_err!(
            "signal length {} does not match layer-0 width {width}",
            signal.len()
        ));
    }
    if settings.epochs == 0 {
        return Err(Error::InvalidArgument(
            "embedding needs at least one epoch".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut main_opt = OptimizerState::adam(settings.lr_main);
    let mut wm_opt = OptimizerState::adam(settings.lr_wm);
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut signal_losses = Vec::with_capacity(settings.epochs);
    let mut main_losses = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        let (mut main_total, mut sig_total) = (0.0, 0.0);
        let batches = epoch_batches(train.len(), settings.batch_size, settings.shuffle_seed, epoch);
        for idx in &batches {
            let x = train.inputs.select_rows(idx);
            let t = batch_targets(&train.targets, idx, &mut labels, &mut values);
            main_total += kan_main_step(&mut model, &x, t, &mut main_opt)? * idx.len() as f64;
            sig_total += signal_step(&mut model, &x, signal, &mut wm_opt)? * idx.len() as f64;
        }
        main_losses.push(main_total / train.len() as f64);
        signal_losses.push(sig_total / train.len() as f64);
    }
    Ok(EmbedOutcome {
        model,
        signal_losses,
        main_losses,
    })
}

/// Clean-model training with the same batch schedule as [`embed`] but no
/// signal phase.
pub fn train_plain(mut model: KanModel, train: &Dataset, settings: &EmbedSettings) -> Result<KanModel> {
    let ts = TrainSettings {
        epochs: settings.epochs,
        batch_size: settings.batch_size,
        lr: settings.lr_main,
        shuffle_seed: settings.shuffle_seed,
    };
    let mut opt = OptimizerState::adam(ts.lr);
    crate::train::train_kan(&mut model, train, &ts, &mut opt)?;
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Watermarked,
    WatermarkedShuffled,
    Clean,
    CleanShuffled,
}

impl Provenance {
    pub fn label(self) -> usize {
        match self {
            Provenance::Watermarked | Provenance::WatermarkedShuffled => 1,
            Provenance::Clean | Provenance::CleanShuffled => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorDataset {
    pub inputs: Mat,
    pub labels: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

impl DetectorDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Layer-0 outputs of both models on `data`, each row followed by
/// `n_shuffles` random permutations of itself.
pub fn build_detector_dataset(
    model_wm: &KanModel,
    model_clean: &KanModel,
    data: &Mat,
    n_shuffles: usize,
    seed: u64,
) -> Result<DetectorDataset> {
    if data.rows() == 0 {
        return Err(Error::Data("no samples for the detector dataset".into()));
    }
    let width = model_wm.layers()[0].out_dim();
    if model_clean.layers()[0].out_dim() != width {
        return Err(shape_err!(
            "layer-0 widths differ: watermarked {width}, clean {}",
            model_clean.layers()[0].out_dim()
        ));
    }
    let o_wm = model_wm.layer0_outputs(data)?.values;
    let o_clean = model_clean.layer0_outputs(data)?.values;
    let per_sample = 1 + n_shuffles;
    let rows = 2 * data.rows() * per_sample;
    let mut inputs = Vec::with_capacity(rows * width);
    let mut provenance = Vec::with_capacity(rows);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..width).collect();
    for (source, plain, shuffled) in [
        (&o_wm, Provenance::Watermarked, Provenance::WatermarkedShuffled),
        (&o_clean, Provenance::Clean, Provenance::CleanShuffled),
    ] {
        for r in 0..source.rows() {
            let row = source.row(r);
            inputs.extend_from_slice(row);
            provenance.push(plain);
            for _ in 0..n_shuffles {
                perm.shuffle(&mut rng);
                inputs.extend(perm.iter().map(|&p| row[p]));
                provenance.push(shuffled);
            }
        }
    }
    Ok(DetectorDataset {
        inputs: Mat::from_vec(rows, width, inputs)?,
        labels: provenance.iter().map(|p| p.label()).collect(),
        provenance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSettings {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        DetectorSettings {
            hidden: vec![64, 32],
            epochs: 50,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Initial detector for a layer-0 width; [`train_detector`] starts from this.
pub fn init_detector(width: usize, settings: &DetectorSettings) -> Result<MlpModel> {
    let mut widths = vec![width];
    widths.extend_from_slice(&settings.hidden);
    widths.push(2);
    MlpModel::init(&widths, &mut ChaCha8Rng::seed_from_u64(settings.seed))
}

/// Trains the binary detector with cross-entropy.
pub fn train_detector(dataset: &DetectorDataset, settings: &DetectorSettings) -> Result<MlpModel> {
    if dataset.is_empty() {
        return Err(Error::Data("empty detector dataset".into()));
    }
    let positives = dataset.labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == dataset.len() {
        return Err(Error::InvalidArgument(
            "detector dataset must contain both classes".into(),
        ));
    }
    let mut model = init_detector(dataset.inputs.cols(), settings)?;
    let mut opt = OptimizerState::adam(settings.lr);
    let mut labels = Vec::new();
    for epoch in 0..settings.epochs {
        for idx in epoch_batches(dataset.len(), settings.batch_size, settings.seed, epoch) {
            let x = dataset.inputs.select_rows(&idx);
            labels.clear();
            labels.extend(idx.iter().map(|&i| dataset.labels[i]));
            model.train_step(&x, Targets::Classes(&labels), &mut opt)?;
        }
    }
    Ok(model)
}

/// Fraction of rows the detector classifies as watermarked.
pub fn detection_rate(detector: &MlpModel, activations: &Mat) -> Result<f64> {
    if activations.rows() == 0 {
        return Err(Error::Data("no activations to classify".into()));
    }
    let pred = argmax_rows(&detector.forward(activations)?);
    Ok(pred.iter().filter(|&&p| p == 1).count() as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub detection_rate: f64,
    pub threshold: f64,
    pub decision: bool,
}

/// Feeds the suspect's layer-0 outputs on `test` to the detector.
pub fn verify(
    suspect: &KanModel,
    detector: &MlpModel,
    test: &Mat,
    threshold: f64,
) -> Result<VerificationResult> {
    let width = suspect.layers()[0].out_dim();
    if detector.in_dim() != width {
        return Err(shape_err!(
            "detector expects {} activations, suspect layer 0 produces {width}",
            detector.in_dim()
        ));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    let acts = suspect.layer0_outputs(test)?.values;
    let rate = detection_rate(detector, &acts)?;
    Ok(VerificationResult {
        detection_rate: rate,
        threshold,
        decision: rate >= threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{feynman_formula, gen_feynman};
    use crate::mlp::Dense;
    use crate::spline::GridSpec;

    fn small_model(seed: u64, widths: &[usize]) -> KanModel {
        KanModel::init(widths, GridSpec::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn signal_generation() {
        let a = gen_signal(17, 16, (2, 5), 0.4).unwrap();
        assert_eq!(a, gen_signal(17, 16, (2, 5), 0.4).unwrap());
        assert_eq!(a.values.iter().filter(|&&v| v != 0.0).count(), 4);
        assert!(a.values[2..=5].iter().all(|&v| v.abs() == 0.4));
        assert!(a.values[..2].iter().chain(&a.values[6..]).all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let (k1, k2): (u64, u64) = (rng.random(), rng.random());
            if k1 == k2 {
                continue;
            }
            let s1 = gen_signal(k1, 32, (8, 16), 1.0).unwrap();
            let s2 = gen_signal(k2, 32, (8, 16), 1.0).unwrap();
            assert_ne!(s1.values, s2.values);
        }

        assert!(gen_signal(1, 8, (5, 4), 1.0).is_err());
        assert!(gen_signal(1, 8, (2, 8), 1.0).is_err());
        assert!(gen_signal(1, 8, (2, 4), -1.0).is_err());
        assert_eq!(default_band(32), (8, 16));
    }

    fn regression_data(n: usize) -> Dataset {
        gen_feynman(feynman_formula("I.12.11").unwrap(), n, 5).unwrap()
    }

    #[test]
    fn zero_amplitude_embed_equals_plain_training() {
        let data = regression_data(200);
        let model = small_model(1, &[2, 6, 1]);
        let signal = gen_signal(3, 6, default_band(6), 0.0).unwrap();
        let settings = EmbedSettings {
            epochs: 2,
            batch_size: 32,
            lr_main: 0.01,
            lr_wm: 0.01,
            shuffle_seed: 4,
        };
        let out = embed(model.clone(), &signal, &data, &settings).unwrap();
        assert!(out.signal_losses.iter().all(|&l| l == 0.0));
        let plain = train_plain(model, &data, &settings).unwrap();
        assert_eq!(out.model, plain);
    }

    #[test]
    fn signal_step_touches_layer0_only() {
        let data = regression_data(64);
        let mut model = small_model(2, &[2, 6, 3, 1]);
        let before = model.clone();
        let signal = gen_signal(3, 6, default_band(6), 0.5).unwrap();
        let mut opt = OptimizerState::adam(0.01);
        signal_step(&mut model, &data.inputs, &signal, &mut opt).unwrap();
        assert_ne!(model.layers()[0], before.layers()[0]);
        for (a, b) in model.layers()[1..].iter().zip(&before.layers()[1..]) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn signal_loss_shrinks_on_frozen_target() {
        let data = regression_data(128);
        let mut model = small_model(3, &[2, 8, 1]);
        let band = default_band(8);
        let amp = calibrate_amplitude(&model, &data.inputs, band, DEFAULT_AMPLITUDE_FACTOR).unwrap();
        assert!(amp > 0.0);
        let signal = gen_signal(11, 8, band, amp).unwrap();
        let outputs = model.layer0_outputs(&data.inputs).unwrap().values;
        let target = signal_targets(&outputs, &signal).unwrap();
        let mut opt = OptimizerState::adam(1e-3);
        let first = layer0_step_towards(&mut model, &data.inputs, &target, &mut opt).unwrap();
        let mut last = first;
        for _ in 1..200 {
            last = layer0_step_towards(&mut model, &data.inputs, &target, &mut opt).unwrap();
        }
        assert!(last <= 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn targets_match_row_wise_perturbation() {
        let data = regression_data(16);
        let model = small_model(6, &[2, 9, 1]);
        let signal = gen_signal(2, 9, default_band(9), 0.7).unwrap();
        let outputs = model.layer0_outputs(&data.inputs).unwrap().values;
        let targets = signal_targets(&outputs, &signal).unwrap();
        for r in 0..outputs.rows() {
            let direct = crate::transform::perturb(outputs.row(r), &signal.values).unwrap();
            for (a, b) in targets.row(r).iter().zip(&direct) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn moving_target_loss_is_constant() {
        // O_s - O = idct(P) for every row, so the moving-target loss is ||P||^2 / N
        let data = regression_data(32);
        let mut model = small_model(4, &[2, 5, 1]);
        let signal = gen_signal(5, 5, (1, 2), 0.2).unwrap();
        let mut opt = OptimizerState::adam(1e-2);
        let expected = 2.0 * 0.2 * 0.2 / 5.0;
        for _ in 0..5 {
            let l = signal_step(&mut model, &data.inputs, &signal, &mut opt).unwrap();
            assert!((l - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_rejects_width_mismatch() {
        let data = regression_data(16);
        let model = small_model(1, &[2, 6, 1]);
        let signal = gen_signal(3, 5, (1, 2), 0.1).unwrap();
        let settings = EmbedSettings {
            epochs: 1,
            batch_size: 8,
            lr_main: 0.01,
            lr_wm: 0.01,
            shuffle_seed: 0,
        };
        assert!(matches!(
            embed(model, &signal, &data, &settings),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn detector_dataset_construction() {
        let data = regression_data(7);
        let wm = small_model(1, &[2, 6, 1]);
        let clean = small_model(2, &[2, 6, 1]);
        let ds = build_detector_dataset(&wm, &clean, &data.inputs, 10, 3).unwrap();
        assert_eq!(ds.len(), 2 * 7 * 11);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 1).count(), 7 * 11);
        for (p, &l) in ds.provenance.iter().zip(&ds.labels) {
            assert_eq!(p.label(), l);
        }
        for block in 0..14 {
            let base = block * 11;
            let mut orig = ds.inputs.row(base).to_vec();
            orig.sort_by(f64::total_cmp);
            for s in 1..11 {
                let mut v = ds.inputs.row(base + s).to_vec();
                v.sort_by(f64::total_cmp);
                assert_eq!(v, orig);
            }
        }
        assert_eq!(
            ds,
            build_detector_dataset(&wm, &clean, &data.inputs, 10, 3).unwrap()
        );

        let other = small_model(2, &[2, 4, 1]);
        assert!(build_detector_dataset(&wm, &other, &data.inputs, 10, 3).is_err());
    }

    fn offset_dataset(n: usize) -> DetectorDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut provenance = Vec::new();
        for k in 0..n {
            let label = k % 2;
            let off = if label == 1 { 5.0 } else { 0.0 };
            rows.push(
                (0..6)
                    .map(|_| rng.random_range(-1.0..1.0) + off)
                    .collect::<Vec<f64>>(),
            );
            labels.push(label);
            provenance.push(if label == 1 {
                Provenance::Watermarked
            } else {
                Provenance::Clean
            });
        }
        DetectorDataset {
            inputs: Mat::from_rows(&rows).unwrap(),
            labels,
            provenance,
        }
    }

    #[test]
    fn detector_learns_offset_classes() {
        let ds = offset_dataset(400);
        let settings = DetectorSettings {
            epochs: 50,
            ..DetectorSettings::default()
        };
        let det = train_detector(&ds, &settings).unwrap();
        let pred = argmax_rows(&det.forward(&ds.inputs).unwrap());
        let acc = pred.iter().zip(&ds.labels).filter(|(p, l)| p == l).count() as f64 / 400.0;
        assert!(acc >= 0.99, "accuracy {acc}");
    }

    #[test]
    fn detector_zero_lr_is_initialization() {
        let ds = offset_dataset(40);
        let settings = DetectorSettings {
            epochs: 3,
            lr: 0.0,
            ..DetectorSettings::default()
        };
        assert_eq!(
            train_detector(&ds, &settings).unwrap(),
            init_detector(6, &settings).unwrap()
        );

        let mut single = ds.clone();
        single.labels.fill(0);
        assert!(train_detector(&single, &settings).is_err());
    }

    #[test]
    fn verify_with_degenerate_detector() {
        let data = regression_data(20);
        let model = small_model(1, &[2, 6, 1]);
        let always = MlpModel::new(vec![Dense {
            weight: Mat::zeros(2, 6),
            bias: vec![0.0, 1.0],
        }])
        .unwrap();
        let r = verify(&model, &always, &data.inputs, 0.5).unwrap();
        assert_eq!(r.detection_rate, 1.0);
        assert!(r.decision);

        let never = MlpModel::new(vec![Dense {
            weight: Mat::zeros(2, 6),
            bias: vec![1.0, 0.0],
        }])
        .unwrap();
        let r = verify(&model, &never, &data.inputs, 0.0).unwrap();
        assert_eq!(r.detection_rate, 0.0);
        assert!(r.decision);
        assert!(!verify(&model, &never, &data.inputs, 0.5).unwrap().decision);

        let wrong = MlpModel::new(vec![Dense {
            weight: Mat::zeros(2, 5),
            bias: vec![0.0, 1.0],
        }])
        .unwrap();
        assert!(matches!(
            verify(&model, &wrong, &data.inputs, 0.5),
            Err(Error::Shape(_))
        ));
    }
}
