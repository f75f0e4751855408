use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Param, Real, Tensor};

/// Same-padded 2-D convolution with an odd square kernel, stride 1.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let hw = h * w;
    let r = (k / 2) as isize;
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - r;
                let dx = kx as isize - r;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *o = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx_out: &mut [T]) {
    let hw = h * w;
    let r = (k / 2) as isize;
    for ci in 0..c {
        let dst = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - r;
                let dx = kx as isize - r;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            drow[sx as usize] = drow[sx as usize] + src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Conv2d<T> {
    pub fn new(in_c: usize, out_c: usize, k: usize, rng: &mut impl Rng) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let fan_in = in_c * k * k;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let w: Vec<T> = (0..out_c * fan_in).map(|_| T::of(normal.sample(rng))).collect();
        Conv2d {
            in_c,
            out_c,
            k,
            weight: Param::new(vec![out_c, in_c, k, k], w),
            bias: Param::new(vec![out_c], vec![T::zero(); out_c]),
            input: None,
        }
    }

    fn run(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.in_c, "conv input channels");
        let [n, _, h, w] = x.shape;
        let hw = h * w;
        let ckk = self.in_c * self.k * self.k;
        let mut out = Tensor::zeros([n, self.out_c, h, w]);
        let mut cols = if self.k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
        for s in 0..n {
            let xs = x.sample(s);
            let b: &[T] = if self.k == 1 {
                xs
            } else {
                im2col(xs, self.in_c, h, w, self.k, &mut cols);
                &cols
            };
            let o = out.sample_mut(s);
            for (co, row) in o.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = self.bias.value[co]);
            }
            T::gemm(self.out_c, ckk, hw, &self.weight.value, false, b, false, o, true);
        }
        out
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let out = self.run(x);
        self.input = Some(x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("conv backward without forward");
        let [n, _, h, w] = x.shape;
        let hw = h * w;
        let ckk = self.in_c * self.k * self.k;
        let mut dx = Tensor::zeros(x.shape);
        let mut cols = vec![T::zero(); ckk * hw];
        let mut dcols = vec![T::zero(); ckk * hw];
        for s in 0..n {
            let g = dy.sample(s);
            for (co, row) in g.chunks(hw).enumerate() {
                let sum: T = row.iter().copied().sum();
                self.bias.grad[co] = self.bias.grad[co] + sum;
            }
            let xs = x.sample(s);
            let b: &[T] = if self.k == 1 {
                xs
            } else {
                im2col(xs, self.in_c, h, w, self.k, &mut cols);
                &cols
            };
            T::gemm(self.out_c, hw, ckk, g, false, b, true, &mut self.weight.grad, true);
            if self.k == 1 {
                T::gemm(ckk, self.out_c, hw, &self.weight.value, true, g, false, dx.sample_mut(s), false);
            } else {
                T::gemm(ckk, self.out_c, hw, &self.weight.value, true, g, false, &mut dcols, false);
                col2im(&dcols, self.in_c, h, w, self.k, dx.sample_mut(s));
            }
        }
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        y.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
        y
    }

    pub fn forward_train<T: Real>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.mask = x.data.iter().map(|&v| v > T::zero()).collect();
        Self::forward(x)
    }

    pub fn backward<T: Real>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.mask.len(), dy.data.len(), "relu backward without forward");
        let mut dx = dy.clone();
        for (g, &m) in dx.data.iter_mut().zip(&self.mask) {
            if !m {
                *g = T::zero();
            }
        }
        dx
    }
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    in_shape: [usize; 4],
    argmax: Vec<usize>,
}

impl MaxPool2 {
    fn run<T: Real>(x: &Tensor<T>, mut argmax: Option<&mut Vec<usize>>) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        if let Some(a) = argmax.as_deref_mut() {
            a.clear();
            a.reserve(out.data.len());
        }
        let mut o = 0;
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xx + dx;
                        if x.data[i] > x.data[best] {
                            best = i;
                        }
                    }
                    out.data[o] = x.data[best];
                    if let Some(a) = argmax.as_deref_mut() {
                        a.push(best);
                    }
                    o += 1;
                }
            }
        }
        out
    }

    pub fn forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
        Self::run(x, None)
    }

    pub fn forward_train<T: Real>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.in_shape = x.shape;
        Self::run(x, Some(&mut self.argmax))
    }

    pub fn backward<T: Real>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.argmax.len(), dy.data.len(), "pool backward without forward");
        let mut dx = Tensor::zeros(self.in_shape);
        for (&i, &g) in self.argmax.iter().zip(&dy.data) {
            dx.data[i] = dx.data[i] + g;
        }
        dx
    }
}

/// Per-channel batch normalization over (batch, height, width).
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: Param::new(vec![channels], vec![T::one(); channels]),
            beta: Param::new(vec![channels], vec![T::zero(); channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.channels, "batch norm channels");
        let mut y = x.clone();
        let plane = x.plane();
        let eps = T::of(self.eps);
        for (idx, chunk) in y.data.chunks_mut(plane).enumerate() {
            let c = idx % self.channels;
            let scale = self.gamma.value[c] / (self.running_var[c] + eps).sqrt();
            let shift = self.beta.value[c] - self.running_mean[c] * scale;
            chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
        }
        y
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.channels, "batch norm channels");
        let plane = x.plane();
        let count = x.batch() * plane;
        let cnt = T::of(count as f64);
        let mut mean = vec![T::zero(); self.channels];
        let mut var = vec![T::zero(); self.channels];
        for (idx, chunk) in x.data.chunks(plane).enumerate() {
            let c = idx % self.channels;
            mean[c] = mean[c] + chunk.iter().copied().sum::<T>();
        }
        mean.iter_mut().for_each(|m| *m = *m / cnt);
        for (idx, chunk) in x.data.chunks(plane).enumerate() {
            let c = idx % self.channels;
            var[c] = var[c] + chunk.iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<T>();
        }
        var.iter_mut().for_each(|v| *v = *v / cnt);
        let eps = T::of(self.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for (idx, (hc, yc)) in xhat
            .data
            .chunks_mut(plane)
            .zip(y.data.chunks_mut(plane))
            .enumerate()
        {
            let c = idx % self.channels;
            for (h, o) in hc.iter_mut().zip(yc.iter_mut()) {
                *h = (*h - mean[c]) * inv_std[c];
                *o = self.gamma.value[c] * *h + self.beta.value[c];
            }
        }
        let m = T::of(self.momentum);
        let unbias = if count > 1 {
            T::of(count as f64 / (count - 1) as f64)
        } else {
            T::one()
        };
        for c in 0..self.channels {
            self.running_mean[c] = (T::one() - m) * self.running_mean[c] + m * mean[c];
            self.running_var[c] = (T::one() - m) * self.running_var[c] + m * var[c] * unbias;
        }
        self.cache = Some((xhat, inv_std));
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (xhat, inv_std) = self.cache.take().expect("batch norm backward without forward");
        let plane = dy.plane();
        let count = T::of((dy.batch() * plane) as f64);
        let mut sum_dy = vec![T::zero(); self.channels];
        let mut sum_dy_xhat = vec![T::zero(); self.channels];
        for (idx, (g, h)) in dy.data.chunks(plane).zip(xhat.data.chunks(plane)).enumerate() {
            let c = idx % self.channels;
            for (&gv, &hv) in g.iter().zip(h) {
                sum_dy[c] = sum_dy[c] + gv;
                sum_dy_xhat[c] = sum_dy_xhat[c] + gv * hv;
            }
        }
        for c in 0..self.channels {
            self.gamma.grad[c] = self.gamma.grad[c] + sum_dy_xhat[c];
            self.beta.grad[c] = self.beta.grad[c] + sum_dy[c];
        }
        let mut dx = dy.clone();
        for (idx, (d, h)) in dx.data.chunks_mut(plane).zip(xhat.data.chunks(plane)).enumerate() {
            let c = idx % self.channels;
            let k = self.gamma.value[c] * inv_std[c] / count;
            for (dv, &hv) in d.iter_mut().zip(h) {
                *dv = k * (count * *dv - sum_dy[c] - hv * sum_dy_xhat[c]);
            }
        }
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

/// Fully connected layer on `[n, features, 1, 1]` tensors (any trailing
/// spatial shape is flattened).
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("valid std");
        let w: Vec<T> = (0..inputs * outputs).map(|_| T::of(normal.sample(rng))).collect();
        Dense {
            inputs,
            outputs,
            weight: Param::new(vec![outputs, inputs], w),
            bias: Param::new(vec![outputs], vec![T::zero(); outputs]),
            input: None,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        assert_eq!(x.sample_len(), self.inputs, "dense input size");
        let mut out = Tensor::zeros([n, self.outputs, 1, 1]);
        for row in out.data.chunks_mut(self.outputs) {
            row.copy_from_slice(&self.bias.value);
        }
        T::gemm(n, self.inputs, self.outputs, &x.data, false, &self.weight.value, true, &mut out.data, true);
        out
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let out = self.forward(x);
        self.input = Some(x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("dense backward without forward");
        let n = x.batch();
        for row in dy.data.chunks(self.outputs) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g = *g + d;
            }
        }
        T::gemm(self.outputs, n, self.inputs, &dy.data, true, &x.data, false, &mut self.weight.grad, true);
        let mut dx = Tensor::zeros(x.shape);
        T::gemm(n, self.outputs, self.inputs, &dy.data, false, &self.weight.value, false, &mut dx.data, false);
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Nearest-neighbour 2× upsampling to an explicit target size (so that odd
/// skip-connection sizes line up).
#[derive(Debug, Clone, Default)]
pub struct Upsample2 {
    in_shape: [usize; 4],
}

impl Upsample2 {
    pub fn forward<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
        let [n, c, h, w] = x.shape;
        let mut out = Tensor::zeros([n, c, out_h, out_w]);
        for plane in 0..n * c {
            let src = &x.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out.data[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for y in 0..out_h {
                let sy = (y / 2).min(h - 1);
                for xx in 0..out_w {
                    dst[y * out_w + xx] = src[sy * w + (xx / 2).min(w - 1)];
                }
            }
        }
        out
    }

    pub fn forward_train<T: Real>(&mut self, x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
        self.in_shape = x.shape;
        Self::forward(x, out_h, out_w)
    }

    pub fn backward<T: Real>(&self, dy: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = self.in_shape;
        let [_, _, oh, ow] = dy.shape;
        let mut dx = Tensor::zeros(self.in_shape);
        for plane in 0..n * c {
            let src = &dy.data[plane * oh * ow..(plane + 1) * oh * ow];
            let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
            for y in 0..oh {
                let sy = (y / 2).min(h - 1);
                for xx in 0..ow {
                    let i = sy * w + (xx / 2).min(w - 1);
                    dst[i] = dst[i] + src[y * ow + xx];
                }
            }
        }
        dx
    }
}

/// Channel concatenation of two tensors with equal batch and spatial size.
pub struct Concat;

impl Concat {
    pub fn forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        assert_eq!(a.batch(), b.batch());
        assert_eq!(a.shape[2..], b.shape[2..], "concat spatial size");
        let [n, ca, h, w] = a.shape;
        let cb = b.channels();
        let mut out = Tensor::zeros([n, ca + cb, h, w]);
        for s in 0..n {
            let o = out.sample_mut(s);
            o[..a.sample_len()].copy_from_slice(a.sample(s));
            o[a.sample_len()..].copy_from_slice(b.sample(s));
        }
        out
    }

    pub fn backward<T: Real>(dy: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
        let [n, c, h, w] = dy.shape;
        let mut da = Tensor::zeros([n, ca, h, w]);
        let mut db = Tensor::zeros([n, c - ca, h, w]);
        let split = ca * h * w;
        for s in 0..n {
            let g = dy.sample(s);
            da.sample_mut(s).copy_from_slice(&g[..split]);
            db.sample_mut(s).copy_from_slice(&g[split..]);
        }
        (da, db)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn naive_conv(x: &Tensor<f64>, conv: &Conv2d<f64>) -> Tensor<f64> {
        let [n, c, h, w] = x.shape;
        let k = conv.k as isize;
        let r = k / 2;
        let mut out = Tensor::zeros([n, conv.out_c, h, w]);
        for s in 0..n {
            for o in 0..conv.out_c {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = conv.bias.value[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (sy, sx) = (y + ky - r, xx + kx - r);
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let wi = ((o * c + ci) * conv.k + ky as usize) * conv.k + kx as usize;
                                    let xi = ((s * c + ci) * h + sy as usize) * w + sx as usize;
                                    acc += conv.weight.value[wi] * x.data[xi];
                                }
                            }
                        }
                        out.data[((s * conv.out_c + o) * h + y as usize) * w + xx as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for k in [1, 3] {
            let mut conv = Conv2d::<f64>::new(2, 3, k, &mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3];
            let data: Vec<f64> = (0..2 * 2 * 5 * 4).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let x = Tensor::from_vec([2, 2, 5, 4], data);
            let got = conv.forward(&x);
            let want = naive_conv(&x, &conv);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pool_floors_odd_sizes() {
        let x = Tensor::from_vec([1, 1, 3, 3], (0..9).map(|v| v as f64).collect());
        let y = MaxPool2::forward(&x);
        assert_eq!(y.shape, [1, 1, 1, 1]);
        assert_eq!(y.data, vec![4.0]);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        bn.running_mean = vec![2.0];
        bn.running_var = vec![4.0];
        let x = Tensor::from_vec([1, 1, 1, 2], vec![2.0, 6.0]);
        let y = bn.forward(&x);
        assert!(y.data[0].abs() < 1e-9);
        assert!((y.data[1] - 4.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        let x = Tensor::from_vec([2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]);
        let y = bn.forward_train(&x);
        let mean: f64 = y.data.iter().sum::<f64>() / 4.0;
        let var: f64 = y.data.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn upsample_to_odd_size() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0f64, 2.0]);
        let y = Upsample2::forward(&x, 3, 5);
        assert_eq!(y.data[..5], [1.0, 1.0, 2.0, 2.0, 2.0]);
    }
}
