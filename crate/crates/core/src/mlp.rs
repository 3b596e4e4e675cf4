//! Fully connected ReLU networks: the pruning-study baseline and the
//! watermark detector.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::numeric::{cross_entropy_loss, mse_loss, Mat, OptimizerState};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[out x in]`
    pub weight: Mat,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Dense>,
}

/// What a training step optimizes.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Classes(&'a [usize]),
    Values(&'a [f64]),
}

impl Targets<'_> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loss and gradient of the model output against these targets.
    pub fn loss(&self, output: &Mat) -> Result<(f64, Mat)> {
        match *self {
            Targets::Classes(labels) => cross_entropy_loss(output, labels),
            Targets::Values(values) => {
                if output.cols() != 1 {
                    return Err(shape_err!(
                        "regression expects a single output column, got {}",
                        output.cols()
                    ));
                }
                let target = Mat::from_vec(values.len(), 1, values.to_vec())?;
                mse_loss(output, &target)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Mat>,
    pre: Vec<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Mat>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpModel {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("an MLP needs at least one layer".into()));
        }
        for (l, d) in layers.iter().enumerate() {
            if d.bias.len() != d.weight.rows() {
                return Err(shape_err!(
                    "layer {l}: bias length {} vs {} outputs",
                    d.bias.len(),
                    d.weight.rows()
                ));
            }
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].weight.rows() != pair[1].weight.cols() {
                return Err(shape_err!(
                    "layer {l} outputs {} values but layer {} expects {}",
                    pair[0].weight.rows(),
                    l + 1,
                    pair[1].weight.cols()
                ));
            }
        }
        Ok(MlpModel { layers })
    }

    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid MLP widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("valid normal");
                let data = (0..w[0] * w[1]).map(|_| normal.sample(rng)).collect();
                Dense {
                    weight: Mat::from_vec(w[1], w[0], data).expect("sized"),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].weight.cols()];
        w.extend(self.layers.iter().map(|d| d.weight.rows()));
        w
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.rows()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|d| d.weight.as_slice().len()).sum()
    }

    fn affine(d: &Dense, x: &Mat) -> Mat {
        let (out, inp) = d.weight.shape();
        let mut y = Mat::zeros(x.rows(), out);
        for b in 0..x.rows() {
            let xr = x.row(b);
            let yr = y.row_mut(b);
            for (o, yo) in yr.iter_mut().enumerate() {
                let w = &d.weight.as_slice()[o * inp..(o + 1) * inp];
                let mut s = d.bias[o];
                for k in 0..inp {
                    s += w[k] * xr[k];
                }
                *yo = s;
            }
        }
        y
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.cols() != self.in_dim() {
            return Err(shape_err!(
                "MLP expects {} input columns, got {}",
                self.in_dim(),
                x.cols()
            ));
        }
        Ok(())
    }

    /// Affine + ReLU on hidden layers; the last affine output is returned raw.
    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (l, d) in self.layers.iter().enumerate() {
            h = Self::affine(d, &h);
            if l < last {
                relu_in_place(&mut h);
            }
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Mat) -> Result<(Mat, MlpCache)> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        for (l, d) in self.layers.iter().enumerate() {
            let z = Self::affine(d, &h);
            cache.inputs.push(h);
            h = z.clone();
            if l < last {
                relu_in_place(&mut h);
            }
            cache.pre.push(z);
        }
        Ok((h, cache))
    }

    pub fn backward(&self, cache: &MlpCache, upstream: &Mat) -> Result<MlpGrads> {
        if cache.inputs.len() != self.layers.len() {
            return Err(shape_err!("stale MLP cache"));
        }
        let batch = cache.inputs[0].rows();
        if upstream.shape() != (batch, self.out_dim()) {
            return Err(shape_err!(
                "upstream gradient {:?} vs output {}x{}",
                upstream.shape(),
                batch,
                self.out_dim()
            ));
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut g = upstream.clone();
        for l in (0..n).rev() {
            let d = &self.layers[l];
            if l < n - 1 {
                let z = &cache.pre[l];
                for (gv, &zv) in g.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    if zv <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let x = &cache.inputs[l];
            let (out, inp) = d.weight.shape();
            let mut gw = Mat::zeros(out, inp);
            let mut gb = vec![0.0; out];
            let mut gx = Mat::zeros(batch, inp);
            for b in 0..batch {
                let gr = g.row(b);
                let xr = x.row(b);
                for o in 0..out {
                    let go = gr[o];
                    if go == 0.0 {
                        continue;
                    }
                    gb[o] += go;
                    let w = &d.weight.as_slice()[o * inp..(o + 1) * inp];
                    let gwr = &mut gw.as_mut_slice()[o * inp..(o + 1) * inp];
                    let gxr = &mut gx.as_mut_slice()[b * inp..(b + 1) * inp];
                    for k in 0..inp {
                        gwr[k] += go * xr[k];
                        gxr[k] += go * w[k];
                    }
                }
            }
            weights.push(gw);
            biases.push(gb);
            g = gx;
        }
        weights.reverse();
        biases.reverse();
        Ok(MlpGrads { weights, biases })
    }

    /// One optimizer step on cross-entropy (classes) or MSE (values).
    /// Returns the loss measured before the update.
    pub fn train_step(
        &mut self,
        batch: &Mat,
        targets: Targets<'_>,
        optimizer: &mut OptimizerState,
    ) -> Result<f64> {
        if batch.rows() == 0 {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        if targets.len() != batch.rows() {
            return Err(shape_err!(
                "{} targets for a batch of {}",
                targets.len(),
                batch.rows()
            ));
        }
        let (out, cache) = self.forward_cached(batch)?;
        let (loss, g) = targets.loss(&out)?;
        let grads = self.backward(&cache, &g)?;
        let mut params: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len());
        for d in &mut self.layers {
            params.push(d.weight.as_mut_slice());
            params.push(&mut d.bias);
        }
        let gs: Vec<&[f64]> = grads
            .weights
            .iter()
            .zip(&grads.biases)
            .flat_map(|(w, b)| [w.as_slice(), &b[..]])
            .collect();
        optimizer.step(&mut params, &gs)?;
        Ok(loss)
    }

    /// Global magnitude pruning: zeroes the `floor(ratio * W)` smallest-|w|
    /// weights across all layers. Biases are untouched; ties go to traversal order.
    pub fn prune(&self, ratio: f64) -> Result<MlpModel> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::InvalidArgument(format!(
                "prune ratio {ratio} outside [0, 1]"
            )));
        }
        let count = (ratio * self.weight_count() as f64).floor() as usize;
        let mut pruned = self.clone();
        if count == 0 {
            return Ok(pruned);
        }
        let mut ranked: Vec<(f64, usize, usize)> = Vec::with_capacity(self.weight_count());
        for (l, d) in self.layers.iter().enumerate() {
            for (k, w) in d.weight.as_slice().iter().enumerate() {
                ranked.push((w.abs(), l, k));
            }
        }
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for &(_, l, k) in &ranked[..count] {
            pruned.layers[l].weight.as_mut_slice()[k] = 0.0;
        }
        Ok(pruned)
    }
}

fn relu_in_place(m: &mut Mat) {
    for v in m.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}
