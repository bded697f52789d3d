//! Sequential feed-forward networks with hand-written backpropagation.
//!
//! Batches are row-major `Array2` values, one example per row. Parameter
//! order (used by flat gradient vectors and the optimizer) is the layer
//! order, depth first into residual blocks; a dense layer contributes `W`
//! row-major followed by `b`, a batch-norm layer its gain then its shift.

mod adam;
pub mod gradcheck;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{standard_normal, stream, StreamDomain};
use crate::scalar::Scalar;

pub use adam::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Shape-only description of a layer, stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Relu,
    BatchNorm { width: usize },
    Residual(Vec<LayerSpec>),
}

#[derive(Debug, Clone)]
pub struct Dense<T: Scalar> {
    pub w: Array2<T>,
    pub b: Array1<T>,
    input: Option<Array2<T>>,
    delta: Option<Array2<T>>,
    tangent_in: Option<Array2<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self::from_parts(Array2::zeros((output, input)), Array1::zeros(output))
    }

    pub fn from_parts(w: Array2<T>, b: Array1<T>) -> Self {
        assert_eq!(w.nrows(), b.len(), "dense bias length");
        Self {
            w,
            b,
            input: None,
            delta: None,
            tangent_in: None,
        }
    }

    pub fn input_width(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.w.nrows()
    }

    fn apply(&self, x: &ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm<T: Scalar> {
    pub gain: Array1<T>,
    pub shift: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub momentum: T,
    pub eps: T,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T: Scalar> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
    mode: Mode,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(width: usize) -> Self {
        Self {
            gain: Array1::ones(width),
            shift: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum: T::of(0.1),
            eps: T::of(1e-5),
            cache: None,
        }
    }

    pub fn width(&self) -> usize {
        self.gain.len()
    }

    fn eval_apply(&self, x: &ArrayView2<T>) -> Array2<T> {
        let inv_std = self.running_var.mapv(|v| T::one() / (v + self.eps).sqrt());
        let mut y = x - &self.running_mean;
        y *= &(&inv_std * &self.gain);
        y += &self.shift;
        y
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T: Scalar> {
    Dense(Dense<T>),
    Relu { mask: Option<Array2<bool>> },
    BatchNorm(BatchNorm<T>),
    /// `y = x + F(x)`.
    Residual(Network<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn relu() -> Self {
        Layer::Relu { mask: None }
    }

    fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense(d) => LayerSpec::Dense {
                input: d.input_width(),
                output: d.output_width(),
            },
            Layer::Relu { .. } => LayerSpec::Relu,
            Layer::BatchNorm(bn) => LayerSpec::BatchNorm { width: bn.width() },
            Layer::Residual(net) => LayerSpec::Residual(net.spec()),
        }
    }

    fn from_spec(spec: &LayerSpec) -> Self {
        match spec {
            LayerSpec::Dense { input, output } => Layer::Dense(Dense::zeros(*input, *output)),
            LayerSpec::Relu => Layer::relu(),
            LayerSpec::BatchNorm { width } => Layer::BatchNorm(BatchNorm::new(*width)),
            LayerSpec::Residual(inner) => Layer::Residual(Network::from_spec(inner)),
        }
    }
}

/// An ordered stack of layers.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar = f64> {
    layers: Vec<Layer<T>>,
    cached: bool,
}

impl<T: Scalar> Network<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        let net = Self {
            layers,
            cached: false,
        };
        net.check_composition()?;
        Ok(net)
    }

    /// Network with the given shape and all-zero parameters.
    pub fn from_spec(spec: &[LayerSpec]) -> Self {
        Self {
            layers: spec.iter().map(Layer::from_spec).collect(),
            cached: false,
        }
    }

    pub fn spec(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    fn check_composition(&self) -> Result<()> {
        let mut width: Option<usize> = None;
        for (k, layer) in self.layers.iter().enumerate() {
            let (input, output) = match layer {
                Layer::Dense(d) => (Some(d.input_width()), Some(d.output_width())),
                Layer::Relu { .. } => (None, None),
                Layer::BatchNorm(bn) => (Some(bn.width()), Some(bn.width())),
                Layer::Residual(inner) => {
                    inner.check_composition()?;
                    let (i, o) = (inner.input_width(), inner.output_width());
                    if i != o {
                        return Err(Error::shape(
                            format!("residual block {k} with equal widths"),
                            format!("{i:?} -> {o:?}"),
                        ));
                    }
                    (i, o)
                }
            };
            if let (Some(w), Some(i)) = (width, input) {
                if w != i {
                    return Err(Error::shape(
                        format!("layer {k} input width {w}"),
                        format!("{i}"),
                    ));
                }
            }
            if output.is_some() {
                width = output;
            }
        }
        Ok(())
    }

    pub fn input_width(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Dense(d) => Some(d.input_width()),
            Layer::BatchNorm(bn) => Some(bn.width()),
            Layer::Residual(inner) => inner.input_width(),
            Layer::Relu { .. } => None,
        })
    }

    pub fn output_width(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Dense(d) => Some(d.output_width()),
            Layer::BatchNorm(bn) => Some(bn.width()),
            Layer::Residual(inner) => inner.output_width(),
            Layer::Relu { .. } => None,
        })
    }

    fn check_input(&self, x: &ArrayView2<T>) -> Result<()> {
        if let Some(w) = self.input_width() {
            if x.ncols() != w {
                return Err(Error::shape(format!("{w} input columns"), x.ncols()));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => d.w.len() + d.b.len(),
                Layer::BatchNorm(bn) => 2 * bn.width(),
                Layer::Residual(inner) => inner.param_count(),
                Layer::Relu { .. } => 0,
            })
            .sum()
    }

    /// He-normal weights for dense layers followed by a ReLU, LeCun-normal
    /// otherwise; zero biases; batch-norm reset to identity.
    pub fn init(&mut self, seed: u64) {
        let mut rng = stream(seed, StreamDomain::Training);
        self.init_with(&mut rng);
    }

    fn init_with<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let n = self.layers.len();
        for k in 0..n {
            let feeds_relu = matches!(self.layers.get(k + 1), Some(Layer::Relu { .. }));
            match &mut self.layers[k] {
                Layer::Dense(d) => {
                    let fan_in = d.input_width() as f64;
                    let scale = if feeds_relu { (2.0 / fan_in).sqrt() } else { (1.0 / fan_in).sqrt() };
                    d.w.iter_mut()
                        .for_each(|w| *w = T::of(scale * standard_normal(rng)));
                    d.b.fill(T::zero());
                }
                Layer::BatchNorm(bn) => *bn = BatchNorm::new(bn.width()),
                Layer::Residual(inner) => inner.init_with(rng),
                Layer::Relu { .. } => {}
            }
        }
    }

    /// Forward pass that caches what [`Network::backward`] needs. In
    /// `Train` mode batch-norm layers normalize with batch statistics and
    /// update their running statistics.
    pub fn forward(&mut self, x: &Array2<T>, mode: Mode) -> Result<Array2<T>> {
        self.check_input(&x.view())?;
        self.forward_inner(x.clone(), mode)
    }

    fn forward_inner(&mut self, mut x: Array2<T>, mode: Mode) -> Result<Array2<T>> {
        for layer in &mut self.layers {
            x = match layer {
                Layer::Dense(d) => {
                    let y = d.apply(&x.view());
                    d.input = Some(x);
                    d.delta = None;
                    y
                }
                Layer::Relu { mask } => {
                    *mask = Some(x.mapv(|v| v > T::zero()));
                    x.mapv_into(|v| if v > T::zero() { v } else { T::zero() })
                }
                Layer::BatchNorm(bn) => match mode {
                    Mode::Eval => {
                        let inv_std = bn.running_var.mapv(|v| T::one() / (v + bn.eps).sqrt());
                        let xhat = (&x - &bn.running_mean) * &inv_std;
                        let y = &xhat * &bn.gain + &bn.shift;
                        bn.cache = Some(BnCache {
                            xhat,
                            inv_std,
                            mode,
                        });
                        y
                    }
                    Mode::Train => {
                        let n = x.nrows();
                        if n < 2 {
                            return Err(Error::State(
                                "batch norm in train mode needs at least 2 rows".into(),
                            ));
                        }
                        let nf = T::of(n as f64);
                        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
                        let centered = &x - &mean;
                        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / nf;
                        let inv_std = var.mapv(|v| T::one() / (v + bn.eps).sqrt());
                        let xhat = centered * &inv_std;
                        let y = &xhat * &bn.gain + &bn.shift;
                        let m = bn.momentum;
                        let unbiased = &var * (nf / T::of((n - 1) as f64));
                        bn.running_mean = &bn.running_mean * (T::one() - m) + &mean * m;
                        bn.running_var = &bn.running_var * (T::one() - m) + &unbiased * m;
                        bn.cache = Some(BnCache {
                            xhat,
                            inv_std,
                            mode,
                        });
                        y
                    }
                },
                Layer::Residual(inner) => {
                    let fx = inner.forward_inner(x.clone(), mode)?;
                    x + fx
                }
            };
        }
        self.cached = true;
        Ok(x)
    }

    /// Eval-mode forward pass without caching.
    pub fn infer(&self, x: &ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(x)?;
        Ok(self.infer_inner(x.to_owned()))
    }

    fn infer_inner(&self, mut x: Array2<T>) -> Array2<T> {
        for layer in &self.layers {
            x = Self::infer_layer(layer, x);
        }
        x
    }

    fn infer_layer(layer: &Layer<T>, x: Array2<T>) -> Array2<T> {
        match layer {
            Layer::Dense(d) => d.apply(&x.view()),
            Layer::Relu { .. } => x.mapv_into(|v| if v > T::zero() { v } else { T::zero() }),
            Layer::BatchNorm(bn) => bn.eval_apply(&x.view()),
            Layer::Residual(inner) => {
                let fx = inner.infer_inner(x.clone());
                x + fx
            }
        }
    }

    /// Eval-mode outputs of every top-level layer.
    pub fn trace(&self, x: &ArrayView2<T>) -> Result<Vec<Array2<T>>> {
        self.check_input(x)?;
        let mut out = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_owned();
        for layer in &self.layers {
            cur = Self::infer_layer(layer, cur);
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Backpropagates `grad_out` (d loss / d output) through the cached
    /// forward pass. Returns the flat parameter gradient and the input
    /// gradient.
    pub fn backward(&mut self, grad_out: &Array2<T>) -> Result<(Vec<T>, Array2<T>)> {
        let mut grads = vec![T::zero(); self.param_count()];
        let dx = self.backward_into(grad_out.clone(), &mut grads, true)?;
        Ok((grads, dx))
    }

    /// [`Network::backward`] without the input gradient, which saves the
    /// first layer's product when the input is not trainable.
    pub fn backward_params(&mut self, grad_out: &Array2<T>) -> Result<Vec<T>> {
        let mut grads = vec![T::zero(); self.param_count()];
        self.backward_into(grad_out.clone(), &mut grads, false)?;
        Ok(grads)
    }

    /// Like [`Network::backward`] but adds into `grads`.
    pub fn backward_accumulate(&mut self, grad_out: &Array2<T>, grads: &mut [T]) -> Result<Array2<T>> {
        if grads.len() != self.param_count() {
            return Err(Error::shape(self.param_count(), grads.len()));
        }
        self.backward_into(grad_out.clone(), grads, true)
    }

    fn backward_into(&mut self, mut g: Array2<T>, grads: &mut [T], need_dx: bool) -> Result<Array2<T>> {
        if !self.cached {
            return Err(Error::State("backward called without a forward cache".into()));
        }
        let mut end = grads.len();
        for (pos, layer) in self.layers.iter_mut().enumerate().rev() {
            g = match layer {
                Layer::Dense(d) => {
                    let x = d.input.as_ref().ok_or_else(missing_cache)?;
                    if g.nrows() != x.nrows() || g.ncols() != d.output_width() {
                        return Err(Error::shape(
                            format!("({}, {})", x.nrows(), d.output_width()),
                            format!("{:?}", g.dim()),
                        ));
                    }
                    let (nw, nb) = (d.w.len(), d.b.len());
                    let start = end - nw - nb;
                    let mut gw = ArrayViewMut2::from_shape(d.w.raw_dim(), &mut grads[start..start + nw])
                        .expect("contiguous block");
                    general_mat_mul(T::one(), &g.t(), x, T::one(), &mut gw);
                    let gb = g.sum_axis(Axis(0));
                    for (acc, v) in grads[start + nw..end].iter_mut().zip(gb.iter()) {
                        *acc += *v;
                    }
                    end = start;
                    let dx = if pos == 0 && !need_dx {
                        Array2::zeros((g.nrows(), 0))
                    } else {
                        g.dot(&d.w)
                    };
                    d.delta = Some(g);
                    dx
                }
                Layer::Relu { mask } => {
                    let mask = mask.as_ref().ok_or_else(missing_cache)?;
                    ndarray::Zip::from(&mut g).and(mask).for_each(|v, &m| {
                        if !m {
                            *v = T::zero();
                        }
                    });
                    g
                }
                Layer::BatchNorm(bn) => {
                    let cache = bn.cache.as_ref().ok_or_else(missing_cache)?;
                    let n = bn.width();
                    let start = end - 2 * n;
                    let dgain = (&g * &cache.xhat).sum_axis(Axis(0));
                    let dshift = g.sum_axis(Axis(0));
                    for i in 0..n {
                        grads[start + i] += dgain[i];
                        grads[start + n + i] += dshift[i];
                    }
                    end = start;
                    let dxhat = &g * &bn.gain;
                    match cache.mode {
                        Mode::Eval => dxhat * &cache.inv_std,
                        Mode::Train => {
                            let rows = T::of(g.nrows() as f64);
                            let s1 = dxhat.sum_axis(Axis(0));
                            let s2 = (&dxhat * &cache.xhat).sum_axis(Axis(0));
                            let mut dx = dxhat * rows - &s1 - &(&cache.xhat * &s2);
                            dx *= &(&cache.inv_std / rows);
                            dx
                        }
                    }
                }
                Layer::Residual(inner) => {
                    let count = inner.param_count();
                    let start = end - count;
                    let dfx = inner.backward_into(g.clone(), &mut grads[start..end], true)?;
                    end = start;
                    g + dfx
                }
            };
        }
        Ok(g)
    }

    /// Gradient of each row's scalar output with respect to that row's
    /// input. The network must end in a width-1 layer and contain no
    /// batch-norm. Leaves the caches needed by
    /// [`Network::input_gradient_param_grads`].
    pub fn input_gradient(&mut self, x: &Array2<T>) -> Result<Array2<T>> {
        self.require_piecewise_linear()?;
        if self.output_width() != Some(1) {
            return Err(Error::State("input gradient needs a scalar-output network".into()));
        }
        self.forward(x, Mode::Train)?;
        let ones = Array2::from_elem((x.nrows(), 1), T::one());
        let mut scratch = vec![T::zero(); self.param_count()];
        self.backward_into(ones, &mut scratch, true)
    }

    /// Parameter gradient of `Σ_i r_iᵀ ∇ₓ D(x_i)` for the rows `x_i` of the
    /// last [`Network::input_gradient`] call. ReLU masks are locally
    /// constant, so only dense weights contribute: each gets
    /// `δ_outᵀ ρ_in`, with `δ` the backpropagated deltas of the input
    /// gradient pass and `ρ` the forward tangent of `r`.
    pub fn input_gradient_param_grads(&mut self, r: &Array2<T>) -> Result<Vec<T>> {
        self.require_piecewise_linear()?;
        let mut grads = vec![T::zero(); self.param_count()];
        self.tangent_forward(r.clone())?;
        self.collect_second_order(&mut grads)?;
        Ok(grads)
    }

    fn require_piecewise_linear(&self) -> Result<()> {
        for layer in &self.layers {
            match layer {
                Layer::BatchNorm(_) => {
                    return Err(Error::State(
                        "input-gradient derivatives are not supported through batch norm".into(),
                    ))
                }
                Layer::Residual(inner) => inner.require_piecewise_linear()?,
                _ => {}
            }
        }
        Ok(())
    }

    fn tangent_forward(&mut self, mut rho: Array2<T>) -> Result<Array2<T>> {
        for layer in &mut self.layers {
            rho = match layer {
                Layer::Dense(d) => {
                    let out = rho.dot(&d.w.t());
                    d.tangent_in = Some(rho);
                    out
                }
                Layer::Relu { mask } => {
                    let mask = mask.as_ref().ok_or_else(missing_cache)?;
                    ndarray::Zip::from(&mut rho).and(mask).for_each(|v, &m| {
                        if !m {
                            *v = T::zero();
                        }
                    });
                    rho
                }
                Layer::Residual(inner) => {
                    let f = inner.tangent_forward(rho.clone())?;
                    rho + f
                }
                Layer::BatchNorm(_) => unreachable!("checked by require_piecewise_linear"),
            };
        }
        Ok(rho)
    }

    fn collect_second_order(&self, grads: &mut [T]) -> Result<()> {
        let mut start = 0;
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    let delta = d.delta.as_ref().ok_or_else(missing_cache)?;
                    let rho = d.tangent_in.as_ref().ok_or_else(missing_cache)?;
                    let mut gw = ArrayViewMut2::from_shape(d.w.raw_dim(), &mut grads[start..start + d.w.len()])
                        .expect("contiguous block");
                    general_mat_mul(T::one(), &delta.t(), rho, T::one(), &mut gw);
                    start += d.w.len() + d.b.len();
                }
                Layer::Residual(inner) => {
                    let count = inner.param_count();
                    inner.collect_second_order(&mut grads[start..start + count])?;
                    start += count;
                }
                Layer::BatchNorm(bn) => start += 2 * bn.width(),
                Layer::Relu { .. } => {}
            }
        }
        Ok(())
    }

    /// Visits every trainable parameter block in canonical order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&[T])) {
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    f(d.w.as_slice().expect("standard layout"));
                    f(d.b.as_slice().expect("standard layout"));
                }
                Layer::BatchNorm(bn) => {
                    f(bn.gain.as_slice().expect("standard layout"));
                    f(bn.shift.as_slice().expect("standard layout"));
                }
                Layer::Residual(inner) => inner.visit_params(f),
                Layer::Relu { .. } => {}
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    f(d.w.as_slice_mut().expect("standard layout"));
                    f(d.b.as_slice_mut().expect("standard layout"));
                }
                Layer::BatchNorm(bn) => {
                    f(bn.gain.as_slice_mut().expect("standard layout"));
                    f(bn.shift.as_slice_mut().expect("standard layout"));
                }
                Layer::Residual(inner) => inner.visit_params_mut(f),
                Layer::Relu { .. } => {}
            }
        }
    }

    /// Visits the non-trainable batch-norm statistics (running mean, then
    /// running variance) in canonical order.
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&[T])) {
        for layer in &self.layers {
            match layer {
                Layer::BatchNorm(bn) => {
                    f(bn.running_mean.as_slice().expect("standard layout"));
                    f(bn.running_var.as_slice().expect("standard layout"));
                }
                Layer::Residual(inner) => inner.visit_buffers(f),
                _ => {}
            }
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        for layer in &mut self.layers {
            match layer {
                Layer::BatchNorm(bn) => {
                    f(bn.running_mean.as_slice_mut().expect("standard layout"));
                    f(bn.running_var.as_slice_mut().expect("standard layout"));
                }
                Layer::Residual(inner) => inner.visit_buffers_mut(f),
                _ => {}
            }
        }
    }

    pub fn params_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |s| out.extend_from_slice(s));
        out
    }

    pub fn set_params_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(self.param_count(), flat.len()));
        }
        let mut at = 0;
        self.visit_params_mut(&mut |s| {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        });
        Ok(())
    }

    pub fn buffers_flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit_buffers(&mut |s| out.extend_from_slice(s));
        out
    }

    pub fn set_buffers_flat(&mut self, flat: &[T]) -> Result<()> {
        let mut count = 0;
        self.visit_buffers(&mut |s| count += s.len());
        if flat.len() != count {
            return Err(Error::shape(count, flat.len()));
        }
        let mut at = 0;
        self.visit_buffers_mut(&mut |s| {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        });
        Ok(())
    }

    /// Copy converted to another scalar type, without caches.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let mut out = Network::<U>::from_spec(&self.spec());
        let conv = |v: Vec<T>| v.into_iter().map(|x| U::of(x.to_f64_lossy())).collect::<Vec<U>>();
        out.set_params_flat(&conv(self.params_flat()))
            .expect("same spec");
        out.set_buffers_flat(&conv(self.buffers_flat()))
            .expect("same spec");
        out
    }

    /// Drops cached activations.
    pub fn clear_cache(&mut self) {
        self.cached = false;
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    d.input = None;
                    d.delta = None;
                    d.tangent_in = None;
                }
                Layer::Relu { mask } => *mask = None,
                Layer::BatchNorm(bn) => bn.cache = None,
                Layer::Residual(inner) => inner.clear_cache(),
            }
        }
    }
}

fn missing_cache() -> Error {
    Error::State("layer has no forward cache".into())
}

/// Zero-initialized `Dense(in→out)` layer.
pub fn dense<T: Scalar>(input: usize, output: usize) -> Layer<T> {
    Layer::Dense(Dense::zeros(input, output))
}

/// Residual block `Dense(w→w) → ReLU → Dense(w→w)` with skip connection.
pub fn residual_block<T: Scalar>(width: usize) -> Layer<T> {
    Layer::Residual(Network {
        layers: vec![dense(width, width), Layer::relu(), dense(width, width)],
        cached: false,
    })
}
