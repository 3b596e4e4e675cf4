//! Main-task training and evaluation loops for KAN and MLP models.

use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, Dataset, TargetData};
use crate::error::{Error, Result};
use crate::kan::KanModel;
use crate::mlp::{MlpModel, Targets};
use crate::numeric::{argmax_rows, Mat, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seeds the per-epoch batch order.
    pub shuffle_seed: u64,
}

/// Loss on a dataset plus the task metric: accuracy in percent for
/// classification, RMSE for regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub metric: f64,
}

pub(crate) fn batch_targets<'a>(
    targets: &TargetData,
    idx: &[usize],
    labels: &'a mut Vec<usize>,
    values: &'a mut Vec<f64>,
) -> Targets<'a> {
    match targets {
        TargetData::Classes { labels: all, .. } => {
            labels.clear();
            labels.extend(idx.iter().map(|&i| all[i]));
            Targets::Classes(labels)
        }
        TargetData::Values(all) => {
            values.clear();
            values.extend(idx.iter().map(|&i| all[i]));
            Targets::Values(values)
        }
    }
}

/// One optimizer step of the main task over all parameters. Returns the
/// pre-update loss.
pub fn kan_main_step(
    model: &mut KanModel,
    x: &Mat,
    targets: Targets<'_>,
    optimizer: &mut OptimizerState,
) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let (out, cache) = model.forward_cached(x)?;
    let (loss, g) = targets.loss(&out)?;
    let grads = model.backward(&cache, &g)?;
    let gs = grads.slices();
    optimizer.step(&mut model.params_mut(), &gs)?;
    Ok(loss)
}

/// Runs `settings.epochs` epochs of main-task training; returns mean loss per epoch.
pub fn train_kan(
    model: &mut KanModel,
    data: &Dataset,
    settings: &TrainSettings,
    optimizer: &mut OptimizerState,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut losses = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(data.len(), settings.batch_size, settings.shuffle_seed, epoch);
        for idx in &batches {
            let x = data.inputs.select_rows(idx);
            let t = batch_targets(&data.targets, idx, &mut labels, &mut values);
            total += kan_main_step(model, &x, t, optimizer)? * idx.len() as f64;
        }
        losses.push(total / data.len() as f64);
    }
    Ok(losses)
}

pub fn train_mlp(
    model: &mut MlpModel,
    data: &Dataset,
    settings: &TrainSettings,
    optimizer: &mut OptimizerState,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut losses = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        let mut total = 0.0;
        for idx in epoch_batches(data.len(), settings.batch_size, settings.shuffle_seed, epoch) {
            let x = data.inputs.select_rows(&idx);
            let t = batch_targets(&data.targets, &idx, &mut labels, &mut values);
            total += model.train_step(&x, t, optimizer)? * idx.len() as f64;
        }
        losses.push(total / data.len() as f64);
    }
    Ok(losses)
}

/// Scores model outputs against dataset targets.
pub fn score(output: &Mat, targets: &TargetData) -> Result<Evaluation> {
    let (loss, _) = targets.as_targets().loss(output)?;
    let metric = match targets {
        TargetData::Classes { labels, .. } => {
            let pred = argmax_rows(output);
            let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
            100.0 * hits as f64 / labels.len().max(1) as f64
        }
        TargetData::Values(_) => loss.sqrt(),
    };
    Ok(Evaluation { loss, metric })
}

const EVAL_CHUNK: usize = 512;

fn chunked_predict(rows: usize, mut f: impl FnMut(&[usize]) -> Result<Mat>) -> Result<Mat> {
    let mut data = Vec::new();
    let mut cols = 0;
    let idx: Vec<usize> = (0..rows).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let out = f(chunk)?;
        cols = out.cols();
        data.extend_from_slice(out.as_slice());
    }
    Mat::from_vec(rows, cols, data)
}

pub fn predict_kan(model: &KanModel, x: &Mat) -> Result<Mat> {
    chunked_predict(x.rows(), |idx| model.predict(&x.select_rows(idx)))
}

pub fn evaluate_kan(model: &KanModel, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    score(&predict_kan(model, &data.inputs)?, &data.targets)
}

pub fn evaluate_mlp(model: &MlpModel, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let out = chunked_predict(data.len(), |idx| model.forward(&data.inputs.select_rows(idx)))?;
    score(&out, &data.targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{feynman_formula, gen_feynman, Split};
    use crate::spline::GridSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn score_metrics() {
        let out = Mat::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let t = TargetData::Classes {
            labels: vec![1, 0, 0],
            classes: 2,
        };
        let e = score(&out, &t).unwrap();
        assert!((e.metric - 200.0 / 3.0).abs() < 1e-12);

        let out = Mat::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let e = score(&out, &TargetData::Values(vec![0.0, 3.0])).unwrap();
        assert!((e.loss - 0.5).abs() < 1e-15);
        assert!((e.metric - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn kan_regression_learns() {
        let f = feynman_formula("I.12.11").unwrap();
        let data = gen_feynman(f, 600, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = KanModel::init(&[2, 5, 1], GridSpec::default(), &mut rng).unwrap();
        let before = evaluate_kan(&model, &data).unwrap();
        let settings = TrainSettings {
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            shuffle_seed: 3,
        };
        let mut opt = OptimizerState::adam(settings.lr);
        let losses = train_kan(&mut model, &data, &settings, &mut opt).unwrap();
        assert_eq!(losses.len(), 30);
        let after = evaluate_kan(&model, &data).unwrap();
        assert!(after.metric < 0.3 * before.metric, "{before:?} -> {after:?}");

        let empty = data.select(&[], Split::Train);
        assert!(train_kan(&mut model, &empty, &settings, &mut opt).is_err());
    }

    #[test]
    fn chunked_prediction_matches_whole_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = KanModel::init(&[3, 4, 2], GridSpec::default(), &mut rng).unwrap();
        let x = Mat::from_vec(
            1100,
            3,
            (0..3300).map(|k| ((k * 37) % 200) as f64 / 100.0 - 1.0).collect(),
        )
        .unwrap();
        assert_eq!(predict_kan(&model, &x).unwrap(), model.predict(&x).unwrap());
    }
}
