//! Stacked LSTM with a dense multi-horizon head, forward pass and
//! backpropagation through time over a flat parameter vector.
//!
//! Per layer the parameters are `W` (`4H x (in + H)`, gate rows ordered
//! input, forget, cell, output) and `b` (`4H`); the head maps the last
//! hidden state of the top layer to the horizon.

use std::fmt::Debug;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, LinalgScalar, ScalarOperand};
use num_traits::Float;
use rand::Rng;

pub trait Scalar: Float + LinalgScalar + ScalarOperand + std::ops::AddAssign + Debug + Send + Sync + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

fn cast<T: Scalar>(x: f64) -> T {
    T::from(x).expect("representable")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub hidden: usize,
    pub layers: usize,
    pub outputs: usize,
}

impl Shape {
    fn in_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            1
        } else {
            self.hidden
        }
    }

    fn layer_len(&self, layer: usize) -> usize {
        4 * self.hidden * (self.in_dim(layer) + self.hidden) + 4 * self.hidden
    }

    fn layer_offset(&self, layer: usize) -> usize {
        (0..layer).map(|l| self.layer_len(l)).sum()
    }

    fn head_offset(&self) -> usize {
        self.layer_offset(self.layers)
    }

    pub fn len(&self) -> usize {
        self.head_offset() + self.outputs * self.hidden + self.outputs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn w<'a, T: Scalar>(&self, theta: &'a [T], layer: usize) -> ArrayView2<'a, T> {
        let off = self.layer_offset(layer);
        let (r, c) = (4 * self.hidden, self.in_dim(layer) + self.hidden);
        ArrayView2::from_shape((r, c), &theta[off..off + r * c]).expect("layout")
    }

    fn b<'a, T: Scalar>(&self, theta: &'a [T], layer: usize) -> ArrayView1<'a, T> {
        let off = self.layer_offset(layer) + 4 * self.hidden * (self.in_dim(layer) + self.hidden);
        ArrayView1::from(&theta[off..off + 4 * self.hidden])
    }

    fn w_mut<'a, T: Scalar>(&self, theta: &'a mut [T], layer: usize) -> (ArrayViewMut2<'a, T>, ArrayViewMut1<'a, T>) {
        let off = self.layer_offset(layer);
        let (r, c) = (4 * self.hidden, self.in_dim(layer) + self.hidden);
        let (w, rest) = theta[off..].split_at_mut(r * c);
        (
            ArrayViewMut2::from_shape((r, c), w).expect("layout"),
            ArrayViewMut1::from(&mut rest[..r]),
        )
    }

    fn head<'a, T: Scalar>(&self, theta: &'a [T]) -> (ArrayView2<'a, T>, ArrayView1<'a, T>) {
        let off = self.head_offset();
        let n = self.outputs * self.hidden;
        (
            ArrayView2::from_shape((self.outputs, self.hidden), &theta[off..off + n]).expect("layout"),
            ArrayView1::from(&theta[off + n..off + n + self.outputs]),
        )
    }

    fn head_mut<'a, T: Scalar>(&self, theta: &'a mut [T]) -> (ArrayViewMut2<'a, T>, ArrayViewMut1<'a, T>) {
        let off = self.head_offset();
        let n = self.outputs * self.hidden;
        let (w, b) = theta[off..].split_at_mut(n);
        (
            ArrayViewMut2::from_shape((self.outputs, self.hidden), w).expect("layout"),
            ArrayViewMut1::from(&mut b[..self.outputs]),
        )
    }

    /// Uniform(-1/sqrt(H), 1/sqrt(H)) weights, forget-gate bias 1.
    pub fn init<T: Scalar>(&self, rng: &mut impl Rng) -> Vec<T> {
        let k = 1.0 / (self.hidden as f64).sqrt();
        let mut theta: Vec<T> = (0..self.len()).map(|_| cast(rng.random_range(-k..k))).collect();
        let h = self.hidden;
        for l in 0..self.layers {
            let (_, mut b) = self.w_mut(&mut theta, l);
            for j in 0..4 * h {
                b[j] = if (h..2 * h).contains(&j) { T::one() } else { T::zero() };
            }
        }
        let (_, mut b) = self.head_mut(&mut theta);
        b.fill(T::zero());
        theta
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

struct LayerCache<T> {
    /// `[x_t, h_{t-1}]` per step.
    xh: Vec<Array2<T>>,
    /// Activated gates `[i, f, g, o]` per step.
    gates: Vec<Array2<T>>,
    /// Cell state before each step (`c[0]` is zero).
    c: Vec<Array2<T>>,
    tanh_c: Vec<Array2<T>>,
}

pub struct Cache<T> {
    layers: Vec<LayerCache<T>>,
    last_h: Array2<T>,
}

/// Runs the network on `x` (`batch x steps`). Returns `batch x outputs`
/// and, if `keep` is set, the activations needed for [`backward`].
pub fn forward<T: Scalar>(shape: &Shape, theta: &[T], x: ArrayView2<T>, keep: bool) -> (Array2<T>, Option<Cache<T>>) {
    let (batch, steps) = x.dim();
    let h_dim = shape.hidden;
    let mut inputs: Vec<Array2<T>> = (0..steps).map(|t| x.slice(ndarray::s![.., t..t + 1]).to_owned()).collect();
    let mut caches = Vec::new();
    let mut h = Array2::zeros((batch, h_dim));
    for l in 0..shape.layers {
        let in_dim = shape.in_dim(l);
        let w = shape.w(theta, l);
        let b = shape.b(theta, l);
        h = Array2::zeros((batch, h_dim));
        let mut c = Array2::<T>::zeros((batch, h_dim));
        let mut cache = LayerCache {
            xh: Vec::with_capacity(steps),
            gates: Vec::with_capacity(steps),
            c: Vec::with_capacity(steps + 1),
            tanh_c: Vec::with_capacity(steps),
        };
        let mut outputs = Vec::with_capacity(steps);
        for x_t in &inputs {
            let mut xh = Array2::zeros((batch, in_dim + h_dim));
            xh.slice_mut(ndarray::s![.., ..in_dim]).assign(x_t);
            xh.slice_mut(ndarray::s![.., in_dim..]).assign(&h);
            let mut z = Array2::zeros((batch, 4 * h_dim));
            general_mat_mul(T::one(), &xh, &w.t(), T::zero(), &mut z);
            z += &b;
            let mut c_next = Array2::zeros((batch, h_dim));
            let mut tc = Array2::zeros((batch, h_dim));
            let mut h_next = Array2::zeros((batch, h_dim));
            {
                let zs = z.as_slice_mut().expect("standard layout");
                let cs = c.as_slice().expect("standard layout");
                let cn = c_next.as_slice_mut().expect("standard layout");
                let tcs = tc.as_slice_mut().expect("standard layout");
                let hs = h_next.as_slice_mut().expect("standard layout");
                for r in 0..batch {
                    let g = &mut zs[r * 4 * h_dim..(r + 1) * 4 * h_dim];
                    for j in 0..h_dim {
                        let i = sigmoid(g[j]);
                        let f = sigmoid(g[h_dim + j]);
                        let cc = g[2 * h_dim + j].tanh();
                        let o = sigmoid(g[3 * h_dim + j]);
                        g[j] = i;
                        g[h_dim + j] = f;
                        g[2 * h_dim + j] = cc;
                        g[3 * h_dim + j] = o;
                        let k = r * h_dim + j;
                        cn[k] = f * cs[k] + i * cc;
                        tcs[k] = cn[k].tanh();
                        hs[k] = o * tcs[k];
                    }
                }
            }
            if keep {
                cache.xh.push(xh);
                cache.gates.push(z);
                cache.c.push(std::mem::replace(&mut c, c_next));
                cache.tanh_c.push(tc);
            } else {
                c = c_next;
            }
            h = h_next;
            if l + 1 < shape.layers {
                outputs.push(h.clone());
            }
        }
        if keep {
            cache.c.push(c);
            caches.push(cache);
        }
        if l + 1 < shape.layers {
            inputs = outputs;
        }
    }
    let (w_o, b_o) = shape.head(theta);
    let mut y = Array2::zeros((batch, shape.outputs));
    general_mat_mul(T::one(), &h, &w_o.t(), T::zero(), &mut y);
    y += &b_o;
    let cache = keep.then(|| Cache { layers: caches, last_h: h });
    (y, cache)
}

/// Gradient of the loss w.r.t. `theta` given `d_out = dL/dy`.
pub fn backward<T: Scalar>(shape: &Shape, theta: &[T], cache: &Cache<T>, d_out: ArrayView2<T>) -> Vec<T> {
    let mut grad = vec![T::zero(); shape.len()];
    let batch = d_out.nrows();
    let h_dim = shape.hidden;
    {
        let (mut gw, mut gb) = shape.head_mut(&mut grad);
        general_mat_mul(T::one(), &d_out.t(), &cache.last_h, T::one(), &mut gw);
        gb += &d_out.sum_axis(Axis(0));
    }
    let (w_o, _) = shape.head(theta);
    let mut dh_top = Array2::zeros((batch, h_dim));
    general_mat_mul(T::one(), &d_out, &w_o, T::zero(), &mut dh_top);

    let steps = cache.layers[0].xh.len();
    let mut external: Vec<Option<Array2<T>>> = (0..steps).map(|_| None).collect();
    external[steps - 1] = Some(dh_top);

    for l in (0..shape.layers).rev() {
        let lc = &cache.layers[l];
        let in_dim = shape.in_dim(l);
        let w = shape.w(theta, l).to_owned();
        let mut dh_rec = Array2::<T>::zeros((batch, h_dim));
        let mut dc_rec = Array2::<T>::zeros((batch, h_dim));
        let mut below: Vec<Option<Array2<T>>> = (0..steps).map(|_| None).collect();
        let mut dz = Array2::<T>::zeros((batch, 4 * h_dim));
        let mut dxh = Array2::<T>::zeros((batch, in_dim + h_dim));
        let (mut gw, mut gb) = shape.w_mut(&mut grad, l);
        for t in (0..steps).rev() {
            if let Some(e) = &external[t] {
                dh_rec += e;
            }
            {
                let gs = lc.gates[t].as_slice().expect("standard layout");
                let cp = lc.c[t].as_slice().expect("standard layout");
                let tcs = lc.tanh_c[t].as_slice().expect("standard layout");
                let dh = dh_rec.as_slice().expect("standard layout");
                let dc = dc_rec.as_slice_mut().expect("standard layout");
                let dzs = dz.as_slice_mut().expect("standard layout");
                for r in 0..batch {
                    let g = &gs[r * 4 * h_dim..(r + 1) * 4 * h_dim];
                    let d = &mut dzs[r * 4 * h_dim..(r + 1) * 4 * h_dim];
                    for j in 0..h_dim {
                        let k = r * h_dim + j;
                        let (i, f, cc, o) = (g[j], g[h_dim + j], g[2 * h_dim + j], g[3 * h_dim + j]);
                        let tc = tcs[k];
                        let d_o = dh[k] * tc;
                        let d_c = dc[k] + dh[k] * o * (T::one() - tc * tc);
                        d[j] = d_c * cc * i * (T::one() - i);
                        d[h_dim + j] = d_c * cp[k] * f * (T::one() - f);
                        d[2 * h_dim + j] = d_c * i * (T::one() - cc * cc);
                        d[3 * h_dim + j] = d_o * o * (T::one() - o);
                        dc[k] = d_c * f;
                    }
                }
            }
            general_mat_mul(T::one(), &dz.t(), &lc.xh[t], T::one(), &mut gw);
            gb += &dz.sum_axis(Axis(0));
            general_mat_mul(T::one(), &dz, &w, T::zero(), &mut dxh);
            dh_rec.assign(&dxh.slice(ndarray::s![.., in_dim..]));
            if l > 0 {
                below[t] = Some(dxh.slice(ndarray::s![.., ..in_dim]).to_owned());
            }
        }
        external = below;
    }
    grad
}

/// Mean squared error over all outputs and its gradient.
pub fn mse_loss_and_grad<T: Scalar>(shape: &Shape, theta: &[T], x: ArrayView2<T>, y: ArrayView2<T>) -> (T, Vec<T>) {
    let (pred, cache) = forward(shape, theta, x, true);
    let n = cast::<T>(y.len() as f64);
    let diff = &pred - &y;
    let loss = diff.iter().fold(T::zero(), |a, &d| a + d * d) / n;
    let d_out = diff * (cast::<T>(2.0) / n);
    (loss, backward(shape, theta, &cache.expect("kept"), d_out.view()))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
    beta1: T,
    beta2: T,
    eps: T,
}

impl<T: Scalar> Adam<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
            beta1: cast(0.9),
            beta2: cast(0.999),
            eps: cast(1e-8),
        }
    }

    pub fn update(&mut self, theta: &mut [T], grad: &[T], lr: T) {
        self.step += 1;
        let c1 = T::one() - self.beta1.powi(self.step);
        let c2 = T::one() - self.beta2.powi(self.step);
        for (((p, &g), m), v) in theta.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (T::one() - self.beta1) * g;
            *v = self.beta2 * *v + (T::one() - self.beta2) * g * g;
            *p = *p - lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(grad: &mut [T], max_norm: T) -> T {
    let norm = grad.iter().fold(T::zero(), |a, &g| a + g * g).sqrt();
    if norm > max_norm && norm > T::zero() {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g = *g * s);
    }
    norm
}
