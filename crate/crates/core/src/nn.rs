//! Minimal differentiable layers over contiguous `[N, C, H, W]` arrays with
//! hand-written backward passes. Double precision throughout.

use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(shape.len(), data.len(), "tensor data does not match shape");
        Self { shape, data }
    }
}

/// A trainable array with its gradient and Adam moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn uniform<R: Rng + ?Sized>(n: usize, bound: f64, rng: &mut R) -> Self {
        Self::new((0..n).map(|_| rng.gen_range(-bound..bound)).collect())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.clear();
        self.grad.resize(self.value.len(), 0.0);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [&mut Param]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in params.iter_mut() {
            let Param { value, grad, m, v } = &mut **p;
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                value[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// `y += a * x`, elementwise. Uses AVX2 when the CPU has it; the result is
/// identical either way since each element is one multiply and one add.
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    assert_eq!(y.len(), x.len());
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at run time.
            unsafe { axpy_avx2(y, a, x) };
            return;
        }
    }
    axpy_plain(y, a, x);
}

#[inline(always)]
fn axpy_plain(y: &mut [f64], a: f64, x: &[f64]) {
    for (v, s) in y.iter_mut().zip(x) {
        *v += a * s;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn axpy_avx2(y: &mut [f64], a: f64, x: &[f64]) {
    axpy_plain(y, a, x);
}

/// `c = a * b + beta * c` for row-major `c` of shape `m x n`; `a` and `b`
/// are addressed through explicit strides so transposes are free.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (usize, usize), b: &[f64], b_strides: (usize, usize), beta: f64, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    if m > 0 && k > 0 && n > 0 {
        assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
        assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    }
    // SAFETY: the assertions above keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Conv2d {
    /// Fan-in scaled uniform initialization.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Param::uniform(out_channels * fan_in, bound, rng);
        let bias = bias.then(|| Param::uniform(out_channels, bound, rng));
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
        }
    }

    pub fn zero_init(&mut self) {
        self.weight.value.fill(0.0);
        if let Some(b) = &mut self.bias {
            b.value.fill(0.0);
        }
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        let out = |x: usize| (x + 2 * self.padding - self.kernel) / self.stride + 1;
        Shape::new(input.n, self.out_channels, out(input.h), out(input.w))
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Output columns `lo..hi` whose input column `ox * stride - padding + kj`
    /// falls inside a row of width `in_w`.
    fn valid_span(&self, kj: usize, in_w: usize, out_w: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = p.saturating_sub(kj).div_ceil(s).min(out_w);
        let hi = if in_w + p > kj { ((in_w + p - kj - 1) / s + 1).min(out_w) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Unfolds one sample into columns `offset..offset + positions` of the
    /// row-major `col` matrix whose rows are `width` long.
    fn im2col(&self, x: &[f64], input: Shape, out: Shape, col: &mut [f64], width: usize, offset: usize) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let positions = out.h * out.w;
        for c in 0..self.in_channels {
            let plane = &x[c * input.h * input.w..(c + 1) * input.h * input.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut col[row * width + offset..row * width + offset + positions];
                    let (lo, hi) = self.valid_span(kj, input.w, out.w);
                    for oy in 0..out.h {
                        let iy = (oy * s) as isize - p + ki as isize;
                        let line = &mut dst[oy * out.w..(oy + 1) * out.w];
                        if iy < 0 || iy >= input.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * input.w..(iy as usize + 1) * input.w];
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        let first = lo * s + kj - self.padding;
                        if s == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, x) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                *v = *x;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], input: Shape, out: Shape, dx: &mut [f64], width: usize, offset: usize) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let positions = out.h * out.w;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * input.h * input.w..(c + 1) * input.h * input.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &col[row * width + offset..row * width + offset + positions];
                    let (lo, hi) = self.valid_span(kj, input.w, out.w);
                    for oy in 0..out.h {
                        let iy = (oy * s) as isize - p + ki as isize;
                        if iy < 0 || iy >= input.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * input.w..(iy as usize + 1) * input.w];
                        let line = &src[oy * out.w..(oy + 1) * out.w];
                        let first = lo * s + kj - self.padding;
                        for (d, v) in dst[first..].iter_mut().step_by(s).zip(&line[lo..hi]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }

    /// Forward pass over the whole batch as one matrix product. When `cache`
    /// is given it receives the unfolded input, which `backward` needs.
    pub fn forward(&self, x: &Tensor, cache: Option<&mut Vec<f64>>) -> Tensor {
        assert_eq!(x.shape.c, self.in_channels, "conv input channels");
        if self.stride == 1 {
            return self.forward_direct(x, cache);
        }
        let out_shape = self.output_shape(x.shape);
        let (rows, positions) = (self.col_rows(), out_shape.h * out_shape.w);
        let width = positions * x.shape.n;
        let mut scratch = Vec::new();
        let cols = cache.unwrap_or(&mut scratch);
        // Every entry is overwritten below, so stale contents are harmless.
        cols.resize(rows * width, 0.0);
        for n in 0..x.shape.n {
            let xs = &x.data[n * x.shape.sample_len()..(n + 1) * x.shape.sample_len()];
            self.im2col(xs, x.shape, out_shape, cols, width, n * positions);
        }
        // Position-major product (cols^T W^T), then scattered into NCHW.
        let o = self.out_channels;
        let mut y = vec![0.0; width * o];
        gemm(width, rows, o, cols, (1, width), &self.weight.value, (1, rows), 0.0, &mut y);
        let mut out = Tensor::zeros(out_shape);
        for (n, sample) in out.data.chunks_exact_mut(o * positions).enumerate() {
            let block = &y[n * positions * o..(n + 1) * positions * o];
            for (c, plane) in sample.chunks_exact_mut(positions).enumerate() {
                let b = self.bias.as_ref().map_or(0.0, |b| b.value[c]);
                for (p, v) in plane.iter_mut().enumerate() {
                    *v = block[p * o + c] + b;
                }
            }
        }
        out
    }

    fn padded_dims(&self, input: Shape) -> (usize, usize) {
        (input.h + 2 * self.padding, input.w + 2 * self.padding)
    }

    /// Zero-padded copy of `x`, one `(h + 2p) x (w + 2p)` plane per channel.
    fn pad(&self, x: &Tensor, dst: &mut Vec<f64>) {
        let (ph, pw) = self.padded_dims(x.shape);
        let p = self.padding;
        dst.clear();
        dst.resize(x.shape.n * x.shape.c * ph * pw, 0.0);
        for (plane, src) in dst.chunks_exact_mut(ph * pw).zip(x.data.chunks_exact(x.shape.h * x.shape.w)) {
            for (row, line) in src.chunks_exact(x.shape.w).enumerate() {
                let start = (row + p) * pw + p;
                plane[start..start + x.shape.w].copy_from_slice(line);
            }
        }
    }

    /// Stride-1 convolution straight from the padded planes. Outputs are
    /// accumulated on a grid as wide as the padded input, so every kernel tap
    /// is one contiguous multiply-add over the flattened plane; the extra
    /// columns are dropped at the end. Small channel counts keep everything in
    /// cache, which beats unfolding.
    fn forward_direct(&self, x: &Tensor, cache: Option<&mut Vec<f64>>) -> Tensor {
        let out_shape = self.output_shape(x.shape);
        let (ph, pw) = self.padded_dims(x.shape);
        let (k, c_in, ow) = (self.kernel, self.in_channels, out_shape.w);
        let len = (out_shape.h - 1) * pw + ow;
        let mut scratch = Vec::new();
        let padded = cache.unwrap_or(&mut scratch);
        self.pad(x, padded);
        let mut out = Tensor::zeros(out_shape);
        let positions = out_shape.h * ow;
        let mut acc = vec![0.0; len];
        for (n, sample) in out.data.chunks_exact_mut(self.out_channels * positions).enumerate() {
            let xs = &padded[n * c_in * ph * pw..(n + 1) * c_in * ph * pw];
            for (o, plane) in sample.chunks_exact_mut(positions).enumerate() {
                acc.fill(self.bias.as_ref().map_or(0.0, |b| b.value[o]));
                let weights = &self.weight.value[o * c_in * k * k..(o + 1) * c_in * k * k];
                for (xc, wc) in xs.chunks_exact(ph * pw).zip(weights.chunks_exact(k * k)) {
                    for ki in 0..k {
                        for kj in 0..k {
                            let w = wc[ki * k + kj];
                            let off = ki * pw + kj;
                            axpy(&mut acc, w, &xc[off..off + len]);
                        }
                    }
                }
                for (row, line) in plane.chunks_exact_mut(ow).enumerate() {
                    line.copy_from_slice(&acc[row * pw..row * pw + ow]);
                }
            }
        }
        out
    }

    fn backward_direct(&mut self, input: Shape, padded: &[f64], dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let out_shape = self.output_shape(input);
        assert_eq!(dy.shape, out_shape, "conv output gradient shape");
        let (ph, pw) = self.padded_dims(input);
        let (k, c_in, ow) = (self.kernel, self.in_channels, out_shape.w);
        assert_eq!(padded.len(), input.n * c_in * ph * pw, "conv cache size");
        let len = (out_shape.h - 1) * pw + ow;
        if self.weight.grad.len() != self.weight.len() {
            self.weight.zero_grad();
        }
        if let Some(b) = &mut self.bias {
            if b.grad.len() != b.len() {
                b.zero_grad();
            }
        }
        let positions = out_shape.h * ow;
        let mut dpad = if need_dx { vec![0.0; padded.len()] } else { Vec::new() };
        // Output gradient on the wide grid, zero in the extra columns.
        let mut g = vec![0.0; len];
        for (n, sample) in dy.data.chunks_exact(self.out_channels * positions).enumerate() {
            let base = n * c_in * ph * pw;
            let xs = &padded[base..base + c_in * ph * pw];
            for (o, plane) in sample.chunks_exact(positions).enumerate() {
                for (row, line) in plane.chunks_exact(ow).enumerate() {
                    g[row * pw..row * pw + ow].copy_from_slice(line);
                }
                if let Some(b) = &mut self.bias {
                    b.grad[o] += plane.iter().sum::<f64>();
                }
                let span = o * c_in * k * k..(o + 1) * c_in * k * k;
                for (c, xc) in xs.chunks_exact(ph * pw).enumerate() {
                    for ki in 0..k {
                        for kj in 0..k {
                            let idx = span.start + (c * k + ki) * k + kj;
                            let off = ki * pw + kj;
                            let dot: f64 = g.iter().zip(&xc[off..off + len]).map(|(a, b)| a * b).sum();
                            self.weight.grad[idx] += dot;
                            if need_dx {
                                let w = self.weight.value[idx];
                                let start = base + c * ph * pw + off;
                                axpy(&mut dpad[start..start + len], w, &g);
                            }
                        }
                    }
                }
            }
        }
        if !need_dx {
            return None;
        }
        let p = self.padding;
        let mut dx = Tensor::zeros(input);
        for (plane, src) in dx.data.chunks_exact_mut(input.h * input.w).zip(dpad.chunks_exact(ph * pw)) {
            for (row, line) in plane.chunks_exact_mut(input.w).enumerate() {
                let start = (row + p) * pw + p;
                line.copy_from_slice(&src[start..start + input.w]);
            }
        }
        Some(dx)
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// requested.
    pub fn backward(&mut self, input: Shape, cols: &[f64], dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        if self.stride == 1 {
            return self.backward_direct(input, cols, dy, need_dx);
        }
        let out_shape = self.output_shape(input);
        assert_eq!(dy.shape, out_shape, "conv output gradient shape");
        let (rows, positions) = (self.col_rows(), out_shape.h * out_shape.w);
        let width = positions * input.n;
        let o = self.out_channels;
        assert_eq!(cols.len(), rows * width, "conv cache size");
        if self.weight.grad.len() != self.weight.len() {
            self.weight.zero_grad();
        }
        // NCHW gradient gathered into channel-major order.
        let mut g = vec![0.0; o * width];
        for n in 0..input.n {
            for c in 0..o {
                let src = (n * o + c) * positions;
                let dst = c * width + n * positions;
                g[dst..dst + positions].copy_from_slice(&dy.data[src..src + positions]);
            }
        }
        // dW^T = cols G^T, added transposed.
        let mut dwt = vec![0.0; rows * o];
        gemm(rows, width, o, cols, (width, 1), &g, (1, width), 0.0, &mut dwt);
        for (r, line) in dwt.chunks_exact(o).enumerate() {
            for (c, v) in line.iter().enumerate() {
                self.weight.grad[c * rows + r] += v;
            }
        }
        if let Some(b) = &mut self.bias {
            if b.grad.len() != b.len() {
                b.zero_grad();
            }
            for (c, channel) in g.chunks_exact(width).enumerate() {
                b.grad[c] += channel.iter().sum::<f64>();
            }
        }
        if !need_dx {
            return None;
        }
        // dcols = W^T G
        let mut dcol = vec![0.0; rows * width];
        gemm(rows, o, width, &self.weight.value, (1, rows), &g, (width, 1), 0.0, &mut dcol);
        let mut dx = Tensor::zeros(input);
        let len = input.sample_len();
        for n in 0..input.n {
            self.col2im(&dcol, input, out_shape, &mut dx.data[n * len..(n + 1) * len], width, n * positions);
        }
        Some(dx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: Param::uniform(inputs * outputs, bound, rng),
            bias: Param::uniform(outputs, bound, rng),
        }
    }

    pub fn zero_init(&mut self) {
        self.weight.value.fill(0.0);
        self.bias.value.fill(0.0);
    }

    pub fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        assert_eq!(x.len(), n * self.inputs, "linear input size");
        let mut y = vec![0.0; n * self.outputs];
        for row in y.chunks_exact_mut(self.outputs) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(n, self.inputs, self.outputs, x, (self.inputs, 1), &self.weight.value, (1, self.inputs), 1.0, &mut y);
        y
    }

    pub fn backward(&mut self, x: &[f64], dy: &[f64], n: usize, need_dx: bool) -> Option<Vec<f64>> {
        if self.weight.grad.len() != self.weight.len() {
            self.weight.zero_grad();
        }
        if self.bias.grad.len() != self.bias.len() {
            self.bias.zero_grad();
        }
        gemm(self.outputs, n, self.inputs, dy, (1, self.outputs), x, (self.inputs, 1), 1.0, &mut self.weight.grad);
        for row in dy.chunks_exact(self.outputs) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        need_dx.then(|| {
            let mut dx = vec![0.0; n * self.inputs];
            gemm(n, self.outputs, self.inputs, dy, (self.outputs, 1), &self.weight.value, (self.inputs, 1), 0.0, &mut dx);
            dx
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, Default)]
pub struct BatchNormCache {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, x: &Tensor, cache: &mut BatchNormCache) -> Tensor {
        let s = x.shape;
        assert_eq!(s.c, self.channels, "batch norm channels");
        let plane = s.h * s.w;
        let count = (s.n * plane) as f64;
        let mut y = Tensor::zeros(s);
        cache.x_hat.clear();
        cache.x_hat.resize(s.len(), 0.0);
        cache.inv_std.clear();
        for c in 0..s.c {
            let planes = || (0..s.n).map(move |n| (n * s.c + c) * plane);
            let mean = planes().map(|o| x.data[o..o + plane].iter().sum::<f64>()).sum::<f64>() / count;
            let var = planes()
                .map(|o| x.data[o..o + plane].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                .sum::<f64>()
                / count;
            let inv_std = 1.0 / (var + self.eps).sqrt();
            cache.inv_std.push(inv_std);
            for o in planes() {
                for i in o..o + plane {
                    let xh = (x.data[i] - mean) * inv_std;
                    cache.x_hat[i] = xh;
                    y.data[i] = self.gamma.value[c] * xh + self.beta.value[c];
                }
            }
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean;
            self.running_var[c] = (1.0 - self.momentum) * self.running_var[c] + self.momentum * unbiased;
        }
        y
    }

    /// Normalizes with the frozen running statistics.
    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let s = x.shape;
        let plane = s.h * s.w;
        let mut y = x.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let scale = self.gamma.value[c] / (self.running_var[c] + self.eps).sqrt();
                let shift = self.beta.value[c] - self.running_mean[c] * scale;
                let o = (n * s.c + c) * plane;
                for v in &mut y.data[o..o + plane] {
                    *v = *v * scale + shift;
                }
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dy: &Tensor) -> Tensor {
        let s = dy.shape;
        let plane = s.h * s.w;
        let count = (s.n * plane) as f64;
        if self.gamma.grad.len() != self.channels {
            self.gamma.zero_grad();
            self.beta.zero_grad();
        }
        let mut dx = Tensor::zeros(s);
        for c in 0..s.c {
            let offsets: Vec<usize> = (0..s.n).map(|n| (n * s.c + c) * plane).collect();
            let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
            for &o in &offsets {
                for i in o..o + plane {
                    sum_dy += dy.data[i];
                    sum_dy_xh += dy.data[i] * cache.x_hat[i];
                }
            }
            self.gamma.grad[c] += sum_dy_xh;
            self.beta.grad[c] += sum_dy;
            let k = self.gamma.value[c] * cache.inv_std[c] / count;
            for &o in &offsets {
                for i in o..o + plane {
                    dx.data[i] = k * (count * dy.data[i] - sum_dy - cache.x_hat[i] * sum_dy_xh);
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

pub fn leaky_relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v }).collect()
}

pub fn leaky_relu_in_place(x: &mut [f64]) {
    for v in x {
        if *v <= 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Multiplies `grad` by the activation slope at each pre-activation value.
pub fn leaky_relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dispatched_axpy_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in [0, 1, 3, 4, 7, 64, 1001] {
            let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y0: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (mut a, mut b) = (y0.clone(), y0);
            axpy(&mut a, 0.37, &x);
            axpy_plain(&mut b, 0.37, &x);
            assert_eq!(a, b);
        }
    }

    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let out = conv.output_shape(x.shape);
        let mut y = Tensor::zeros(out);
        let k = conv.kernel;
        for n in 0..out.n {
            for o in 0..out.c {
                for oy in 0..out.h {
                    for ox in 0..out.w {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[o]);
                        for c in 0..conv.in_channels {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * conv.stride + ki) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kj) as isize - conv.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= x.shape.h as isize || ix >= x.shape.w as isize {
                                        continue;
                                    }
                                    let xv = x.data[((n * x.shape.c + c) * x.shape.h + iy as usize) * x.shape.w + ix as usize];
                                    acc += conv.weight.value[((o * conv.in_channels + c) * k + ki) * k + kj] * xv;
                                }
                            }
                        }
                        y.data[((n * out.c + o) * out.h + oy) * out.w + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (k, s, p) in [(3, 1, 1), (4, 2, 1), (1, 1, 0)] {
            let conv = Conv2d::new(3, 5, k, s, p, true, &mut rng);
            let x = random_tensor(Shape::new(2, 3, 8, 8), &mut rng);
            let fast = conv.forward(&x, None);
            let mut cache = Vec::new();
            let cached = conv.forward(&x, Some(&mut cache));
            let slow = naive_conv(&conv, &x);
            assert_eq!(fast.shape, slow.shape);
            assert_eq!(fast, cached);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strided_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new(5, 8, 4, 2, 1, false, &mut rng);
        let s = conv.output_shape(Shape::new(3, 5, 16, 16));
        assert_eq!((s.h, s.w), (8, 8));
        assert_eq!(conv.output_shape(Shape::new(3, 5, 8, 8)).h, 4);
    }

    /// Scalar loss sum(y * r) has gradient r with respect to y.
    fn check_conv_grads(k: usize, s: usize, p: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::new(2, 3, k, s, p, true, &mut rng);
        let x = random_tensor(Shape::new(2, 2, 6, 6), &mut rng);
        let mut cols = Vec::new();
        let y = conv.forward(&x, Some(&mut cols));
        let r = random_tensor(y.shape, &mut rng);
        let dx = conv.backward(x.shape, &cols, &r, true).unwrap();
        let loss = |conv: &Conv2d, x: &Tensor| conv.forward(x, None).data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>();
        let h = 1e-6;
        for i in 0..conv.weight.len() {
            let mut c = conv.clone();
            c.weight.value[i] += h;
            let up = loss(&c, &x);
            c.weight.value[i] -= 2.0 * h;
            let fd = (up - loss(&c, &x)) / (2.0 * h);
            assert!((fd - conv.weight.grad[i]).abs() < 1e-7);
        }
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let up = loss(&conv, &xp);
            xp.data[i] -= 2.0 * h;
            let fd = (up - loss(&conv, &xp)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        check_conv_grads(3, 1, 1);
        check_conv_grads(4, 2, 1);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin = Linear::new(4, 3, &mut rng);
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dx = lin.backward(&x, &r, 2, true).unwrap();
        let loss = |l: &Linear, x: &[f64]| l.forward(x, 2).iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
        let h = 1e-6;
        for i in 0..lin.weight.len() {
            let mut l = lin.clone();
            l.weight.value[i] += h;
            let up = loss(&l, &x);
            l.weight.value[i] -= 2.0 * h;
            assert!(((up - loss(&l, &x)) / (2.0 * h) - lin.weight.grad[i]).abs() < 1e-8);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let up = loss(&lin, &xp);
            xp[i] -= 2.0 * h;
            assert!(((up - loss(&lin, &xp)) / (2.0 * h) - dx[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bn = BatchNorm2d::new(2);
        bn.gamma.value = vec![1.3, 0.7];
        bn.beta.value = vec![0.1, -0.2];
        let x = random_tensor(Shape::new(3, 2, 2, 2), &mut rng);
        let r = random_tensor(x.shape, &mut rng);
        let mut cache = BatchNormCache::default();
        bn.forward_train(&x, &mut cache);
        let dx = bn.backward(&cache, &r);
        let loss = |bn: &BatchNorm2d, x: &Tensor| {
            let mut b = bn.clone();
            b.forward_train(x, &mut BatchNormCache::default()).data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let up = loss(&bn, &xp);
            xp.data[i] -= 2.0 * h;
            assert!(((up - loss(&bn, &xp)) / (2.0 * h) - dx.data[i]).abs() < 1e-6);
        }
        for c in 0..2 {
            let mut b = bn.clone();
            b.gamma.value[c] += h;
            let up = loss(&b, &x);
            b.gamma.value[c] -= 2.0 * h;
            assert!(((up - loss(&b, &x)) / (2.0 * h) - bn.gamma.grad[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_statistics() {
        let mut bn = BatchNorm2d::new(1);
        let x = Tensor::from_vec(Shape::new(2, 1, 1, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let y = bn.forward_train(&x, &mut BatchNormCache::default());
        let mean: f64 = y.data.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
        // Unbiased variance of 1..4 is 5/3.
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        let before = bn.clone();
        let _ = bn.forward_eval(&x);
        assert_eq!(bn, before);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = Param::new(vec![1.0, -1.0]);
        p.grad = vec![0.5, -3.0];
        let mut adam = Adam::new(0.001);
        adam.update(&mut [&mut p]);
        assert!((p.value[0] - 0.999).abs() < 1e-9);
        assert!((p.value[1] + 0.999).abs() < 1e-9);
    }
}
