//! Dense feed-forward networks with hand-written backpropagation and Adam.
//!
//! Everything is `f64` and row-major. A network is a chain of affine layers
//! with rectified hidden activations; the output activation is identity for
//! Q-networks and rectified for the shared trunk of a multi-head ensemble.
//!
//! Batched data is a [`Matrix`] with one sample per row.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, SimRng};

/// Row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::shape(format!("non-finite matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    /// Stack equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer. `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.out_dim(), self.in_dim())
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.weight.same_shape(&other.weight) && self.bias.len() == other.bias.len()
    }

    /// `out[b] = W x[b] + bias`
    fn affine(&self, input: &Matrix) -> Matrix {
        let (in_dim, out_dim) = (self.in_dim(), self.out_dim());
        let mut out = Matrix::zeros(input.rows, out_dim);
        for b in 0..input.rows {
            let x = input.row(b);
            let o = out.row_mut(b);
            for (j, slot) in o.iter_mut().enumerate() {
                let w = &self.weight.data[j * in_dim..(j + 1) * in_dim];
                let mut acc = 0.0;
                for (wi, xi) in w.iter().zip(x) {
                    acc += wi * xi;
                }
                *slot = acc + self.bias[j];
            }
        }
        out
    }
}

/// Parameters of a dense network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Dense>,
    output: Activation,
}

impl MlpParams {
    pub fn new(layers: Vec<Dense>, output: Activation) -> Result<Self> {
        let params = Self { layers, output };
        params.check()?;
        Ok(params)
    }

    /// Invariant checker: at least one layer, chained dimensions, finite values.
    pub fn check(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::shape("network has no layers"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::shape(format!(
                    "layer {i}: bias length {} != out dim {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if !layer.weight.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::shape(format!("layer {i}: non-finite parameter")));
            }
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data.len() + l.bias.len())
            .sum()
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            Activation::Relu
        }
    }

    /// Visit every parameter mutably, weights before biases, layer by layer.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for layer in &mut self.layers {
            layer.weight.data.iter_mut().for_each(&mut f);
            layer.bias.iter_mut().for_each(&mut f);
        }
    }
}

/// Gradients with exactly the shape of the `MlpParams` they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn check_against(&self, params: &MlpParams) -> Result<()> {
        if self.layers.len() != params.layers.len()
            || self
                .layers
                .iter()
                .zip(&params.layers)
                .any(|(g, p)| !g.same_shape(p))
        {
            return Err(Error::shape("gradient shapes do not mirror parameters"));
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_mut(|g| *g *= factor);
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.data.iter().chain(&l.bias).all(|&g| g == 0.0))
    }

    /// Flattened in the same order as [`MlpParams::for_each_param_mut`].
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data.iter().chain(&l.bias).copied())
            .collect()
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for layer in &mut self.layers {
            layer.weight.data.iter_mut().for_each(&mut f);
            layer.bias.iter_mut().for_each(&mut f);
        }
    }
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
}

impl ForwardCache {
    pub fn num_layers(&self) -> usize {
        self.pre.len()
    }

    pub fn output(&self) -> &Matrix {
        &self.post[self.post.len() - 1]
    }

    pub fn pre_activations(&self, layer: usize) -> &Matrix {
        &self.pre[layer]
    }

    pub fn post_activations(&self, layer: usize) -> &Matrix {
        &self.post[layer]
    }
}

/// Initialize a network with identity output; weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
pub fn mlp_init(layer_sizes: &[usize], seed: u64) -> Result<MlpParams> {
    mlp_init_with(layer_sizes, Activation::Identity, &mut rng::seeded(seed))
}

pub fn mlp_init_with(
    layer_sizes: &[usize],
    output: Activation,
    rng: &mut SimRng,
) -> Result<MlpParams> {
    if layer_sizes.len() < 2 {
        return Err(Error::config(format!(
            "need at least two layer sizes, got {}",
            layer_sizes.len()
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::config("layer sizes must be >= 1"));
    }
    let layers = layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            Dense {
                weight: Matrix {
                    rows: fan_out,
                    cols: fan_in,
                    data,
                },
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    MlpParams::new(layers, output)
}

fn check_input(params: &MlpParams, inputs: &Matrix) -> Result<()> {
    if inputs.cols != params.input_dim() {
        return Err(Error::shape(format!(
            "input has {} columns, network expects {}",
            inputs.cols,
            params.input_dim()
        )));
    }
    Ok(())
}

pub fn mlp_forward(params: &MlpParams, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
    check_input(params, inputs)?;
    let n = params.layers.len();
    let mut pre = Vec::with_capacity(n);
    let mut post: Vec<Matrix> = Vec::with_capacity(n);
    for (l, layer) in params.layers.iter().enumerate() {
        let z = layer.affine(post.last().unwrap_or(inputs));
        let act = params.activation_of(l);
        let mut h = z.clone();
        h.data.iter_mut().for_each(|v| *v = act.apply(*v));
        pre.push(z);
        post.push(h);
    }
    let out = post[n - 1].clone();
    if !out.is_finite() {
        return Err(Error::shape("network produced non-finite output"));
    }
    Ok((
        out,
        ForwardCache {
            input: inputs.clone(),
            pre,
            post,
        },
    ))
}

/// Forward pass without keeping intermediates.
pub fn mlp_predict(params: &MlpParams, inputs: &Matrix) -> Result<Matrix> {
    check_input(params, inputs)?;
    let mut h = params.layers[0].affine(inputs);
    let n = params.layers.len();
    for l in 0..n {
        let act = params.activation_of(l);
        h.data.iter_mut().for_each(|v| *v = act.apply(*v));
        if l + 1 < n {
            h = params.layers[l + 1].affine(&h);
        }
    }
    Ok(h)
}

/// Parameter gradients of a loss whose gradient w.r.t. the outputs is `output_grads`.
pub fn mlp_backward(
    params: &MlpParams,
    cache: &ForwardCache,
    output_grads: &Matrix,
) -> Result<Gradients> {
    mlp_backward_with_input(params, cache, output_grads).map(|(g, _)| g)
}

/// Like [`mlp_backward`], also returning the gradient w.r.t. the network input.
pub fn mlp_backward_with_input(
    params: &MlpParams,
    cache: &ForwardCache,
    output_grads: &Matrix,
) -> Result<(Gradients, Matrix)> {
    let n = params.layers.len();
    if cache.pre.len() != n {
        return Err(Error::shape(format!(
            "cache has {} layers, network has {n}",
            cache.pre.len()
        )));
    }
    for (l, layer) in params.layers.iter().enumerate() {
        if cache.pre[l].cols != layer.out_dim() || cache.pre[l].rows != cache.input.rows {
            return Err(Error::shape(format!("cache layer {l} does not match network")));
        }
    }
    if cache.input.cols != params.input_dim() {
        return Err(Error::shape("cache input does not match network"));
    }
    if !output_grads.same_shape(&cache.post[n - 1]) {
        return Err(Error::shape(format!(
            "output grads are {}x{}, outputs are {}x{}",
            output_grads.rows,
            output_grads.cols,
            cache.post[n - 1].rows,
            cache.post[n - 1].cols
        )));
    }

    let batch = cache.input.rows;
    let mut grads = Gradients::zeros_like(params);
    let mut upstream = output_grads.clone();
    for l in (0..n).rev() {
        let layer = &params.layers[l];
        let (in_dim, out_dim) = (layer.in_dim(), layer.out_dim());
        let act = params.activation_of(l);
        // dL/dz
        let mut dz = upstream;
        for (g, &z) in dz.data.iter_mut().zip(&cache.pre[l].data) {
            *g *= act.derivative(z);
        }
        let input = if l == 0 { &cache.input } else { &cache.post[l - 1] };
        let gl = &mut grads.layers[l];
        for b in 0..batch {
            let x = input.row(b);
            let d = dz.row(b);
            for (j, &dj) in d.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                gl.bias[j] += dj;
                let w = &mut gl.weight.data[j * in_dim..(j + 1) * in_dim];
                for (wi, xi) in w.iter_mut().zip(x) {
                    *wi += dj * xi;
                }
            }
        }
        let mut dx = Matrix::zeros(batch, in_dim);
        for b in 0..batch {
            let d = &dz.data[b * out_dim..(b + 1) * out_dim];
            let out = &mut dx.data[b * in_dim..(b + 1) * in_dim];
            for (j, &dj) in d.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                let w = &layer.weight.data[j * in_dim..(j + 1) * in_dim];
                for (o, wi) in out.iter_mut().zip(w) {
                    *o += dj * wi;
                }
            }
        }
        upstream = dx;
    }
    Ok((grads, upstream))
}

pub const DEFAULT_LEARNING_RATE: f64 = 0.001;

/// Adam moments and hyperparameters for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Gradients,
    second: Gradients,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &MlpParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            first: Gradients::zeros_like(params),
            second: Gradients::zeros_like(params),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &Gradients {
        &self.first
    }

    pub fn second_moments(&self) -> &Gradients {
        &self.second
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut MlpParams,
    grads: &Gradients,
    state: &mut AdamState,
    alpha: f64,
) -> Result<()> {
    grads.check_against(params)?;
    state.first.check_against(params)?;
    state.second.check_against(params)?;

    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let layers = params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.first.layers.iter_mut().zip(state.second.layers.iter_mut()));
    for ((p, g), (m, v)) in layers {
        let pw = p.weight.data.iter_mut().chain(p.bias.iter_mut());
        let gw = g.weight.data.iter().chain(&g.bias);
        let mw = m.weight.data.iter_mut().chain(m.bias.iter_mut());
        let vw = v.weight.data.iter_mut().chain(v.bias.iter_mut());
        for (((theta, &gi), mi), vi) in pw.zip(gw).zip(mw).zip(vw) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *theta -= alpha * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Result of comparing backprop against central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub fixtures: usize,
    pub parameters_checked: usize,
    pub max_relative_error: f64,
}

/// Step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;

/// Relative-error floor; differences between gradients smaller than this in
/// magnitude are measured absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

fn mse_loss(out: &Matrix, target: &Matrix) -> f64 {
    let n = out.data.len() as f64;
    out.data
        .iter()
        .zip(&target.data)
        .map(|(y, t)| (y - t) * (y - t))
        .sum::<f64>()
        / n
}

/// Finite-difference audit of `mlp_backward` on random nets (<= 3 layers,
/// <= 16 units) under a mean-squared-error loss.
pub fn gradient_check(fixtures: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng::stream(seed, "gradcheck");
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..fixtures {
        let depth = rng.random_range(1..=3);
        let mut sizes = vec![rng.random_range(1..=8usize)];
        for _ in 0..depth {
            sizes.push(rng.random_range(1..=16usize));
        }
        let mut params = mlp_init_with(&sizes, Activation::Identity, &mut rng)?;
        params.for_each_param_mut(|p| *p += rng.random_range(-0.1..0.1));
        let batch = rng.random_range(1..=4);
        let input = random_matrix(&mut rng, batch, sizes[0]);
        let target = random_matrix(&mut rng, batch, *sizes.last().unwrap());

        let (out, cache) = mlp_forward(&params, &input)?;
        let n = out.data.len() as f64;
        let mut dout = out.clone();
        for (d, t) in dout.data.iter_mut().zip(&target.data) {
            *d = 2.0 * (*d - t) / n;
        }
        let analytic = mlp_backward(&params, &cache, &dout)?.flatten();

        let total = params.num_params();
        for idx in 0..total {
            let loss_at = |delta: f64| -> Result<f64> {
                let mut p = params.clone();
                let mut k = 0;
                p.for_each_param_mut(|v| {
                    if k == idx {
                        *v += delta;
                    }
                    k += 1;
                });
                Ok(mse_loss(&mlp_predict(&p, &input)?, &target))
            };
            let numeric = (loss_at(FD_STEP)? - loss_at(-FD_STEP)?) / (2.0 * FD_STEP);
            max_rel = max_rel.max(relative_error(analytic[idx], numeric));
        }
        checked += total;
    }
    Ok(GradCheckReport {
        fixtures,
        parameters_checked: checked,
        max_relative_error: max_rel,
    })
}

fn random_matrix(rng: &mut SimRng, rows: usize, cols: usize) -> Matrix {
    Matrix {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_net(w: f64, b: f64) -> MlpParams {
        MlpParams::new(
            vec![Dense {
                weight: Matrix::from_vec(1, 1, vec![w]).unwrap(),
                bias: vec![b],
            }],
            Activation::Identity,
        )
        .unwrap()
    }

    #[test]
    fn init_matches_cartpole_shape() {
        let p = mlp_init(&[4, 64, 32, 3], 7).unwrap();
        let shapes: Vec<_> = p.layers().iter().map(|l| (l.out_dim(), l.in_dim())).collect();
        assert_eq!(shapes, vec![(64, 4), (32, 64), (3, 32)]);
        assert!(p.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        for l in p.layers() {
            let limit = 1.0 / (l.in_dim() as f64).sqrt();
            assert!(l.weight.as_slice().iter().all(|w| w.abs() <= limit));
        }
    }

    #[test]
    fn smallest_net() {
        let p = mlp_init(&[1, 1], 123).unwrap();
        assert_eq!(p.num_params(), 2);
        assert_eq!(p.layers()[0].bias, vec![0.0]);
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(mlp_init(&[3, 5, 2], 9).unwrap(), mlp_init(&[3, 5, 2], 9).unwrap());
        assert_ne!(mlp_init(&[3, 5, 2], 9).unwrap(), mlp_init(&[3, 5, 2], 10).unwrap());
    }

    #[test]
    fn init_rejects_short_sizes() {
        assert!(matches!(mlp_init(&[4], 0), Err(Error::Config(_))));
        assert!(matches!(mlp_init(&[], 0), Err(Error::Config(_))));
        assert!(matches!(mlp_init(&[4, 0, 2], 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut p = mlp_init(&[3, 8, 2], 1).unwrap();
        p.for_each_param_mut(|v| *v = 0.0);
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]]).unwrap();
        let (y, _) = mlp_forward(&p, &x).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_affine_layer() {
        let p = scalar_net(2.0, 1.0);
        let (y, _) = mlp_forward(&p, &Matrix::from_rows(&[[3.0]]).unwrap()).unwrap();
        assert_eq!(y.as_slice(), &[7.0]);
    }

    #[test]
    fn rectifier_clamps_negative_preactivation() {
        let hidden = Dense {
            weight: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            bias: vec![-6.0],
        };
        let out = Dense {
            weight: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            bias: vec![0.0],
        };
        let p = MlpParams::new(vec![hidden, out], Activation::Identity).unwrap();
        let (_, cache) = mlp_forward(&p, &Matrix::from_rows(&[[1.0]]).unwrap()).unwrap();
        assert_eq!(cache.pre_activations(0).as_slice(), &[-5.0]);
        assert_eq!(cache.post_activations(0).as_slice(), &[0.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = mlp_init(&[4, 3], 0).unwrap();
        let x = Matrix::zeros(2, 5);
        assert!(matches!(mlp_forward(&p, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn predict_agrees_with_forward() {
        let p = mlp_init(&[4, 16, 8, 3], 2).unwrap();
        let x = random_matrix(&mut rng::seeded(5), 6, 4);
        assert_eq!(mlp_forward(&p, &x).unwrap().0, mlp_predict(&p, &x).unwrap());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = mlp_init(&[4, 16, 8, 3], 2).unwrap();
        let x = random_matrix(&mut rng::seeded(5), 6, 4);
        let (y, cache) = mlp_forward(&p, &x).unwrap();
        let g = mlp_backward(&p, &cache, &Matrix::zeros(y.rows(), y.cols())).unwrap();
        assert!(g.is_zero());
        g.check_against(&p).unwrap();
    }

    #[test]
    fn single_layer_chain_rule() {
        let p = scalar_net(0.3, -0.2);
        let x = Matrix::from_rows(&[[1.5]]).unwrap();
        let (_, cache) = mlp_forward(&p, &x).unwrap();
        let delta = 0.7;
        let g = mlp_backward(&p, &cache, &Matrix::from_rows(&[[delta]]).unwrap()).unwrap();
        assert_eq!(g.layers[0].weight.as_slice(), &[delta * 1.5]);
        assert_eq!(g.layers[0].bias, vec![delta]);
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let p = mlp_init(&[4, 8, 3], 2).unwrap();
        let q = mlp_init(&[4, 3], 2).unwrap();
        let x = Matrix::zeros(1, 4);
        let (y, cache) = mlp_forward(&q, &x).unwrap();
        assert!(matches!(mlp_backward(&p, &cache, &y), Err(Error::Shape(_))));
        let (_, cache) = mlp_forward(&p, &x).unwrap();
        assert!(matches!(
            mlp_backward(&p, &cache, &Matrix::zeros(2, 3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn backward_leaves_inputs_untouched() {
        let p = mlp_init(&[2, 4, 2], 3).unwrap();
        let x = Matrix::from_rows(&[[0.2, -0.4]]).unwrap();
        let before = x.clone();
        let (y, cache) = mlp_forward(&p, &x).unwrap();
        mlp_backward(&p, &cache, &y).unwrap();
        assert_eq!(x, before);
        assert_eq!(cache.input, before);
    }

    #[test]
    fn two_hidden_layer_finite_differences() {
        let report = gradient_check(5, 11).unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = mlp_init(&[3, 4, 2], 8).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let zero = Gradients::zeros_like(&p);
        adam_step(&mut p, &zero, &mut s, DEFAULT_LEARNING_RATE).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        for g in [0.5, -3.0, 1e-3] {
            let mut p = scalar_net(1.0, 0.0);
            let mut s = AdamState::new(&p);
            let mut grads = Gradients::zeros_like(&p);
            grads.layers[0].weight.as_mut_slice()[0] = g;
            let alpha = 0.001;
            adam_step(&mut p, &grads, &mut s, alpha).unwrap();
            let expected = 1.0 - alpha * g / (g.abs() + s.eps);
            let got = p.layers()[0].weight.as_slice()[0];
            assert!((got - expected).abs() < 1e-15, "g={g}: {got} vs {expected}");
        }
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = mlp_init(&[3, 4, 2], 8).unwrap();
        let other = mlp_init(&[3, 2], 8).unwrap();
        let mut s = AdamState::new(&p);
        let g = Gradients::zeros_like(&other);
        assert!(matches!(adam_step(&mut p, &g, &mut s, 0.001), Err(Error::Shape(_))));
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn adam_moments_track_shapes() {
        let mut p = mlp_init(&[3, 4, 2], 8).unwrap();
        let mut s = AdamState::new(&p);
        let x = random_matrix(&mut rng::seeded(1), 3, 3);
        for _ in 0..3 {
            let (y, cache) = mlp_forward(&p, &x).unwrap();
            let g = mlp_backward(&p, &cache, &y).unwrap();
            adam_step(&mut p, &g, &mut s, 0.01).unwrap();
        }
        p.check().unwrap();
        s.first_moments().check_against(&p).unwrap();
        assert!(s.second_moments().flatten().iter().all(|&v| v >= 0.0));
        assert_eq!(s.step_count(), 3);
    }

    #[test]
    fn matrix_validation() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 1, vec![f64::NAN]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }
}
