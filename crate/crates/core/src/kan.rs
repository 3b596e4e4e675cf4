//! Kolmogorov-Arnold network layers with exact hand-derived gradients.
//!
//! Every edge `(j, i)` of a layer carries its own activation
//! `phi(x) = w_b * silu(x) + w_s * sum_m c_m B_m(x)` over the layer's shared
//! spline grid; node `j` sums its incoming edges. A pruned edge has mask 0 and
//! contributes nothing to the forward pass or the gradients.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::numeric::{silu, silu_grad, Mat};
use crate::spline::{GridSpec, SplineGrid, MAX_DEGREE};

/// Standard deviation of the initial spline coefficients.
pub const COEFF_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct KanLayer {
    in_dim: usize,
    out_dim: usize,
    grid: SplineGrid,
    /// `[out_dim][in_dim][basis_count]`, row-major.
    pub coeffs: Vec<f64>,
    /// `[out_dim][in_dim]`
    pub w_b: Vec<f64>,
    /// `[out_dim][in_dim]`
    pub w_s: Vec<f64>,
    /// `[out_dim][in_dim]`, `true` keeps the edge.
    pub mask: Vec<bool>,
}

/// Per-layer intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    input: Mat,
    silu: Vec<f64>,
    silu_grad: Vec<f64>,
    first: Vec<u32>,
    basis: Vec<f64>,
    dbasis: Vec<f64>,
    in_domain: Vec<bool>,
}

impl LayerCache {
    pub fn input(&self) -> &Mat {
        &self.input
    }

    pub fn batch(&self) -> usize {
        self.input.rows()
    }
}

/// Gradients for one layer, shaped like the layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub coeffs: Vec<f64>,
    pub w_b: Vec<f64>,
    pub w_s: Vec<f64>,
}

impl LayerGrads {
    fn zeros_like(layer: &KanLayer) -> Self {
        LayerGrads {
            coeffs: vec![0.0; layer.coeffs.len()],
            w_b: vec![0.0; layer.w_b.len()],
            w_s: vec![0.0; layer.w_s.len()],
        }
    }
}

impl KanLayer {
    /// Layer with every parameter zero and every edge kept.
    pub fn zeros(in_dim: usize, out_dim: usize, grid: SplineGrid) -> Self {
        let edges = in_dim * out_dim;
        KanLayer {
            in_dim,
            out_dim,
            coeffs: vec![0.0; edges * grid.basis_count()],
            grid,
            w_b: vec![0.0; edges],
            w_s: vec![0.0; edges],
            mask: vec![true; edges],
        }
    }

    /// Seeded initialization: spline coefficients from N(0, 0.1^2), and
    /// `w_b = w_s = 1 / in_dim` so node sums start inside the next layer's grid.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, grid: SplineGrid, rng: &mut R) -> Self {
        let mut layer = Self::zeros(in_dim, out_dim, grid);
        let normal = Normal::new(0.0, COEFF_INIT_STD).expect("valid normal");
        for c in layer.coeffs.iter_mut() {
            *c = normal.sample(rng);
        }
        let scale = 1.0 / in_dim as f64;
        layer.w_b.fill(scale);
        layer.w_s.fill(scale);
        layer
    }

    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        grid: SplineGrid,
        coeffs: Vec<f64>,
        w_b: Vec<f64>,
        w_s: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let edges = in_dim * out_dim;
        if coeffs.len() != edges * grid.basis_count()
            || w_b.len() != edges
            || w_s.len() != edges
            || mask.len() != edges
        {
            return Err(shape_err!(
                "layer {in_dim}->{out_dim} parameter tensors have inconsistent sizes"
            ));
        }
        if coeffs.iter().chain(&w_b).chain(&w_s).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite layer parameter".into()));
        }
        Ok(KanLayer {
            in_dim,
            out_dim,
            grid,
            coeffs,
            w_b,
            w_s,
            mask,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn grid(&self) -> &SplineGrid {
        &self.grid
    }

    pub fn edge_count(&self) -> usize {
        self.in_dim * self.out_dim
    }

    #[inline]
    fn edge(&self, j: usize, i: usize) -> usize {
        j * self.in_dim + i
    }

    fn coeff_range(&self, e: usize) -> std::ops::Range<usize> {
        let nb = self.grid.basis_count();
        e * nb..(e + 1) * nb
    }

    /// `phi_{j,i}(x)` including the prune mask.
    pub fn edge_activation(&self, j: usize, i: usize, x: f64) -> Result<f64> {
        if j >= self.out_dim || i >= self.in_dim {
            return Err(Error::Index(format!(
                "edge ({j}, {i}) outside {}x{} layer",
                self.out_dim, self.in_dim
            )));
        }
        let e = self.edge(j, i);
        if !self.mask[e] {
            return Ok(0.0);
        }
        let mut local = [0.0; MAX_DEGREE + 1];
        let first = self.grid.local_basis(x, &mut local, None);
        let c = &self.coeffs[self.coeff_range(e)];
        let spline: f64 = (0..self.grid.support_width())
            .map(|r| c[first + r] * local[r])
            .sum();
        Ok(self.w_b[e] * silu(x) + self.w_s[e] * spline)
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.cols() != self.in_dim {
            return Err(shape_err!(
                "layer expects {} input columns, got {}",
                self.in_dim,
                x.cols()
            ));
        }
        Ok(())
    }

    /// Forward pass over a batch, `[batch x in_dim] -> [batch x out_dim]`.
    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        self.check_input(x)?;
        let w = self.grid.support_width();
        let nb = self.grid.basis_count();
        let mut out = Mat::zeros(x.rows(), self.out_dim);
        let mut silu_row = vec![0.0; self.in_dim];
        let mut first_row = vec![0usize; self.in_dim];
        let mut basis_row = vec![0.0; self.in_dim * w];
        for b in 0..x.rows() {
            let xr = x.row(b);
            for i in 0..self.in_dim {
                silu_row[i] = silu(xr[i]);
                first_row[i] = self
                    .grid
                    .local_basis(xr[i], &mut basis_row[i * w..(i + 1) * w], None);
            }
            let yr = out.row_mut(b);
            for (j, y) in yr.iter_mut().enumerate() {
                *y = self.node_sum(j, &silu_row, &first_row, &basis_row, w, nb);
            }
        }
        Ok(out)
    }

    #[inline]
    fn node_sum(
        &self,
        j: usize,
        silu_row: &[f64],
        first_row: &[usize],
        basis_row: &[f64],
        w: usize,
        nb: usize,
    ) -> f64 {
        let mut acc = 0.0;
        let base = j * self.in_dim;
        for i in 0..self.in_dim {
            let e = base + i;
            if !self.mask[e] {
                continue;
            }
            let c = &self.coeffs[e * nb + first_row[i]..e * nb + first_row[i] + w];
            let v = &basis_row[i * w..(i + 1) * w];
            let mut spline = 0.0;
            for r in 0..w {
                spline += c[r] * v[r];
            }
            acc += self.w_b[e] * silu_row[i] + self.w_s[e] * spline;
        }
        acc
    }

    /// Forward pass that also records what [`KanLayer::backward`] needs.
    pub fn forward_cached(&self, x: &Mat) -> Result<(Mat, LayerCache)> {
        self.check_input(x)?;
        let w = self.grid.support_width();
        let nb = self.grid.basis_count();
        let n = x.rows() * self.in_dim;
        let (t_min, t_max) = self.grid.domain();
        let mut cache = LayerCache {
            input: x.clone(),
            silu: vec![0.0; n],
            silu_grad: vec![0.0; n],
            first: vec![0; n],
            basis: vec![0.0; n * w],
            dbasis: vec![0.0; n * w],
            in_domain: vec![false; n],
        };
        let mut first_row = vec![0usize; self.in_dim];
        let mut out = Mat::zeros(x.rows(), self.out_dim);
        for b in 0..x.rows() {
            let xr = x.row(b);
            let row = b * self.in_dim;
            for i in 0..self.in_dim {
                let k = row + i;
                let xi = xr[i];
                cache.silu[k] = silu(xi);
                cache.silu_grad[k] = silu_grad(xi);
                cache.in_domain[k] = (t_min..=t_max).contains(&xi);
                let (vals, ders) = (
                    &mut cache.basis[k * w..(k + 1) * w],
                    &mut cache.dbasis[k * w..(k + 1) * w],
                );
                let f = self.grid.local_basis(xi, vals, Some(ders));
                cache.first[k] = f as u32;
                first_row[i] = f;
            }
            let silu_row = &cache.silu[row..row + self.in_dim];
            let basis_row = &cache.basis[row * w..(row + self.in_dim) * w];
            for j in 0..self.out_dim {
                let y = self.node_sum(j, silu_row, &first_row, basis_row, w, nb);
                out.set(b, j, y);
            }
        }
        Ok((out, cache))
    }

    /// Backward pass. Returns parameter gradients and, when `want_input` is
    /// set, the gradient with respect to the layer input.
    pub fn backward(
        &self,
        cache: &LayerCache,
        upstream: &Mat,
        want_input: bool,
    ) -> Result<(LayerGrads, Option<Mat>)> {
        if cache.input.cols() != self.in_dim || cache.silu.len() != cache.batch() * self.in_dim {
            return Err(shape_err!("stale cache: layer input width changed"));
        }
        if upstream.shape() != (cache.batch(), self.out_dim) {
            return Err(shape_err!(
                "upstream gradient {:?} does not match cached batch {}x{}",
                upstream.shape(),
                cache.batch(),
                self.out_dim
            ));
        }
        let w = self.grid.support_width();
        let nb = self.grid.basis_count();
        let mut grads = LayerGrads::zeros_like(self);
        let mut gx = want_input.then(|| Mat::zeros(cache.batch(), self.in_dim));
        for b in 0..cache.batch() {
            let row = b * self.in_dim;
            for j in 0..self.out_dim {
                let g = upstream.get(b, j);
                if g == 0.0 {
                    continue;
                }
                let base = j * self.in_dim;
                for i in 0..self.in_dim {
                    let e = base + i;
                    if !self.mask[e] {
                        continue;
                    }
                    let k = row + i;
                    let f = cache.first[k] as usize;
                    let v = &cache.basis[k * w..(k + 1) * w];
                    let c = &self.coeffs[e * nb + f..e * nb + f + w];
                    let gc = &mut grads.coeffs[e * nb + f..e * nb + f + w];
                    let gws = g * self.w_s[e];
                    let mut spline = 0.0;
                    for r in 0..w {
                        spline += c[r] * v[r];
                        gc[r] += gws * v[r];
                    }
                    grads.w_b[e] += g * cache.silu[k];
                    grads.w_s[e] += g * spline;
                    if let Some(gx) = gx.as_mut() {
                        let mut dspline = 0.0;
                        if cache.in_domain[k] {
                            let d = &cache.dbasis[k * w..(k + 1) * w];
                            for r in 0..w {
                                dspline += c[r] * d[r];
                            }
                        }
                        let dphi = self.w_b[e] * cache.silu_grad[k] + self.w_s[e] * dspline;
                        gx.as_mut_slice()[k] += g * dphi;
                    }
                }
            }
        }
        Ok((grads, gx))
    }

    /// Zeroes all parameters of an edge and clears its mask.
    pub fn prune_edge(&mut self, j: usize, i: usize) {
        let e = self.edge(j, i);
        self.mask[e] = false;
        self.w_b[e] = 0.0;
        self.w_s[e] = 0.0;
        let r = self.coeff_range(e);
        self.coeffs[r].fill(0.0);
    }

    pub fn lift_masks(&mut self) {
        self.mask.fill(true);
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }

    /// Mutable parameter slices in the fixed order `coeffs, w_b, w_s`.
    pub fn params_mut(&mut self) -> [&mut [f64]; 3] {
        [&mut self.coeffs, &mut self.w_b, &mut self.w_s]
    }
}

/// A stack of KAN layers whose widths chain.
#[derive(Debug, Clone, PartialEq)]
pub struct KanModel {
    layers: Vec<KanLayer>,
}

/// Output of layer 0 for each sample of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    pub values: Mat,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::batch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KanGrads {
    pub layers: Vec<LayerGrads>,
}

impl KanGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|g| [&g.coeffs[..], &g.w_b[..], &g.w_s[..]])
            .collect()
    }
}

impl KanModel {
    pub fn new(layers: Vec<KanLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a KAN needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(shape_err!(
                    "layer {l} outputs {} values but layer {} expects {}",
                    pair[0].out_dim,
                    l + 1,
                    pair[1].in_dim
                ));
            }
        }
        Ok(KanModel { layers })
    }

    /// Randomly initialized model with the given widths `[n_0, ..., n_L]`.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], grid: GridSpec, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid KAN widths {widths:?}")));
        }
        let grid = SplineGrid::try_from(grid)?;
        let layers = widths
            .windows(2)
            .map(|w| KanLayer::init(w[0], w[1], grid.clone(), rng))
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[KanLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [KanLayer] {
        &mut self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].in_dim];
        w.extend(self.layers.iter().map(|l| l.out_dim));
        w
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn edge_count(&self) -> usize {
        self.layers.iter().map(KanLayer::edge_count).sum()
    }

    pub fn masked_count(&self) -> usize {
        self.layers.iter().map(KanLayer::masked_count).sum()
    }

    /// Final output and the layer-0 node outputs.
    pub fn forward(&self, x: &Mat) -> Result<(Mat, ActivationBatch)> {
        let layer0 = self.layers[0].forward(x)?;
        let mut h = layer0.clone();
        for layer in &self.layers[1..] {
            h = layer.forward(&h)?;
        }
        Ok((h, ActivationBatch { values: layer0 }))
    }

    pub fn predict(&self, x: &Mat) -> Result<Mat> {
        let mut h = self.layers[0].forward(x)?;
        for layer in &self.layers[1..] {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn layer0_outputs(&self, x: &Mat) -> Result<ActivationBatch> {
        Ok(ActivationBatch {
            values: self.layers[0].forward(x)?,
        })
    }

    pub fn forward_cached(&self, x: &Mat) -> Result<(Mat, ForwardCache)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (out, cache) = layer.forward_cached(&h)?;
            caches.push(cache);
            h = out;
        }
        Ok((h, ForwardCache { layers: caches }))
    }

    /// Gradients of a scalar loss given `dL/d(output)`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Mat) -> Result<KanGrads> {
        if cache.layers.len() != self.layers.len() {
            return Err(shape_err!(
                "stale cache: {} cached layers for a {}-layer model",
                cache.layers.len(),
                self.layers.len()
            ));
        }
        for (layer, c) in self.layers.iter().zip(&cache.layers) {
            if c.input.cols() != layer.in_dim {
                return Err(shape_err!("stale cache: layer widths changed"));
            }
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (lg, gx) = layer.backward(&cache.layers[l], &g, l > 0)?;
            grads.push(lg);
            if let Some(gx) = gx {
                g = gx;
            }
        }
        grads.reverse();
        Ok(KanGrads { layers: grads })
    }

    /// All parameter slices, layer by layer, in `coeffs, w_b, w_s` order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Mean `|phi_{j,i}(x_i)|` over a calibration batch for every edge of one layer.
    ///
    /// The calibration batch is fed through the model so deeper layers see
    /// the activations they would receive in practice.
    pub fn edge_importance(&self, layer_index: usize, calibration: &Mat) -> Result<Mat> {
        if calibration.rows() == 0 {
            return Err(Error::InvalidArgument("empty calibration batch".into()));
        }
        if layer_index >= self.layers.len() {
            return Err(Error::Index(format!(
                "layer {layer_index} of a {}-layer model",
                self.layers.len()
            )));
        }
        let mut h = calibration.clone();
        for layer in &self.layers[..layer_index] {
            h = layer.forward(&h)?;
        }
        layer_importance(&self.layers[layer_index], &h)
    }

    /// Masks the `floor(ratio * edges)` least important edges across all
    /// layers. Ties go to the lexicographically smallest `(layer, j, i)`.
    pub fn prune(&self, ratio: f64, calibration: &Mat) -> Result<KanModel> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::InvalidArgument(format!(
                "prune ratio {ratio} outside [0, 1]"
            )));
        }
        let total = self.edge_count();
        let count = (ratio * total as f64).floor() as usize;
        let mut pruned = self.clone();
        if count == 0 {
            return Ok(pruned);
        }
        let mut ranked = Vec::with_capacity(total);
        let mut h = calibration.clone();
        if h.rows() == 0 {
            return Err(Error::InvalidArgument("empty calibration batch".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let imp = layer_importance(layer, &h)?;
            for j in 0..layer.out_dim {
                for i in 0..layer.in_dim {
                    ranked.push((imp.get(j, i), l, j, i));
                }
            }
            h = layer.forward(&h)?;
        }
        ranked.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        for &(_, l, j, i) in &ranked[..count] {
            pruned.layers[l].prune_edge(j, i);
        }
        Ok(pruned)
    }

    pub fn lift_masks(&mut self) {
        for layer in &mut self.layers {
            layer.lift_masks();
        }
    }
}

fn layer_importance(layer: &KanLayer, x: &Mat) -> Result<Mat> {
    layer.check_input(x)?;
    let w = layer.grid.support_width();
    let nb = layer.grid.basis_count();
    let mut acc = Mat::zeros(layer.out_dim, layer.in_dim);
    let mut local = vec![0.0; w];
    for b in 0..x.rows() {
        for i in 0..layer.in_dim {
            let xi = x.get(b, i);
            let s = silu(xi);
            let f = layer.grid.local_basis(xi, &mut local, None);
            for j in 0..layer.out_dim {
                let e = layer.edge(j, i);
                if !layer.mask[e] {
                    continue;
                }
                let c = &layer.coeffs[e * nb + f..e * nb + f + w];
                let spline: f64 = c.iter().zip(&local).map(|(a, b)| a * b).sum();
                let v = layer.w_b[e] * s + layer.w_s[e] * spline;
                let cur = acc.get(j, i);
                acc.set(j, i, cur + v.abs());
            }
        }
    }
    let inv = 1.0 / x.rows() as f64;
    for v in acc.as_mut_slice() {
        *v *= inv;
    }
    Ok(acc)
}
