//! Minimal CPU neural-network toolkit: NCHW tensors, layers with hand-written
//! backward passes, optimizers, and a weight container.
//!
//! Layers are generic over [`Real`] so that the same code runs in `f32` for
//! training and inference and in `f64` for finite-difference gradient checks.

mod layers;
mod weights;

pub use layers::{BatchNorm2d, Concat, Conv2d, Dense, MaxPool2, Relu, Upsample2};
pub use weights::{read_weights, write_weights, NamedTensor, WeightManifest};

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

pub trait Real: Float + Default + Debug + Send + Sync + Sum + 'static {
    /// `c = op(a) · op(b) (+ c when accumulate)`, row-major. `op(a)` is
    /// `m × k`, `op(b)` is `k × n`, `c` is `m × n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    #[inline]
    fn of(v: f64) -> Self {
        Self::from(v).expect("representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // Logical (rows × cols) view of a row-major buffer, which is stored
    // transposed when `trans` is set.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_trans);
                let (rsb, csb) = strides(k, n, b_trans);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserted lengths cover every element addressed by
                // the (row, column) strides above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape");
        Tensor { shape, data }
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.plane()
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.sample_len();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.sample_len();
        &mut self.data[n * s..(n + 1) * s]
    }
}

/// Trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>) -> Self {
        let n = value.len();
        debug_assert_eq!(shape.iter().product::<usize>(), n);
        Param {
            shape,
            value,
            grad: vec![T::zero(); n],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Visitor over a model's trainable parameters, in a fixed order.
pub trait HasParams<T: Real> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.len());
        n
    }
}

/// Mini-batch SGD with optional classical momentum.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut impl HasParams<T>) {
        let lr = T::of(self.lr);
        let mu = T::of(self.momentum);
        let use_momentum = self.momentum != 0.0;
        let velocity = &mut self.velocity;
        let mut slot = 0;
        model.visit_params(&mut |_, p| {
            if use_momentum {
                if velocity.len() <= slot {
                    velocity.push(vec![T::zero(); p.value.len()]);
                }
                let v = &mut velocity[slot];
                for ((w, g), v) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                    *v = mu * *v + *g;
                    *w = *w - lr * *v;
                }
            } else {
                for (w, g) in p.value.iter_mut().zip(&p.grad) {
                    *w = *w - lr * *g;
                }
            }
            slot += 1;
        });
    }
}

/// Adam optimizer.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut impl HasParams<T>) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let step = T::of(self.lr * c2.sqrt() / c1);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let eps = T::of(self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut slot = 0;
        model.visit_params(&mut |_, p| {
            if ms.len() <= slot {
                ms.push(vec![T::zero(); p.value.len()]);
                vs.push(vec![T::zero(); p.value.len()]);
            }
            let (m, v) = (&mut ms[slot], &mut vs[slot]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1t * m[i] + one_b1 * g;
                v[i] = b2t * v[i] + one_b2 * g * g;
                p.value[i] = p.value[i] - step * m[i] / (v[i].sqrt() + eps);
            }
            slot += 1;
        });
    }
}

/// Mean softmax cross-entropy over a batch of logits `[n, m, 1, 1]`.
/// Returns the loss and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> (f64, Tensor<T>) {
    let n = logits.batch();
    let m = logits.channels();
    assert_eq!(labels.len(), n);
    let mut grad = Tensor::zeros(logits.shape);
    let mut loss = 0.0;
    let inv_n = T::of(1.0 / n as f64);
    for (s, &label) in labels.iter().enumerate() {
        let z = logits.sample(s);
        let p = softmax(z);
        loss -= p[label].f64().max(1e-300).ln();
        let g = grad.sample_mut(s);
        for c in 0..m {
            let t = if c == label { T::one() } else { T::zero() };
            g[c] = (p[c] - t) * inv_n;
        }
    }
    (loss / n as f64, grad)
}

pub fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Mean pixelwise binary cross-entropy on logits with a positive-class weight.
pub fn weighted_bce_with_logits<T: Real>(
    logits: &Tensor<T>,
    targets: &[T],
    pos_weight: f64,
) -> (f64, Tensor<T>) {
    assert_eq!(logits.data.len(), targets.len());
    let n = targets.len() as f64;
    let mut grad = Tensor::zeros(logits.shape);
    let mut loss = 0.0;
    let pw = T::of(pos_weight);
    let inv_n = T::of(1.0 / n);
    for ((&z, &y), g) in logits.data.iter().zip(targets).zip(grad.data.iter_mut()) {
        let w = if y > T::of(0.5) { pw } else { T::one() };
        // log(1 + exp(-|z|)) + max(z, 0) - z*y is the stable BCE form.
        let zf = z.f64();
        let yf = y.f64();
        let l = zf.max(0.0) - zf * yf + (-zf.abs()).exp().ln_1p();
        loss += w.f64() * l;
        *g = w * (sigmoid(z) - y) * inv_n;
    }
    (loss / n, grad)
}
