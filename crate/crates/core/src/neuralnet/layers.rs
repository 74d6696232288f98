//! Layers with hand-written forward and backward passes. Activations are
//! flat row-major `f64` buffers; shapes travel alongside as plain integers.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// A learnable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new<R: Rng>(name: &str, shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let value = if bound > 0.0 {
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        } else {
            vec![0.0; n]
        };
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value,
            grad: vec![0.0; n],
        }
    }

    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
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

/// `C = alpha * op(A) * op(B) + beta * C`; `op(A)` is m x k, `op(B)` k x n,
/// all matrices row-major. `ta`/`tb` mean the stored matrix is the transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert!(
        a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
        "gemm operand too small"
    );
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` wherever the forward output was not positive.
pub fn relu_backward(out: &[f64], grad: &mut [f64]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng>(name: &str, input: usize, output: usize, bound: f64, rng: &mut R) -> Self {
        Self {
            w: Param::new(&format!("{name}.w"), &[output, input], bound, rng),
            b: Param::zeros(&format!("{name}.b"), &[output]),
            input,
            output,
        }
    }

    /// He-uniform weights, zero bias.
    pub fn he<R: Rng>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self::new(name, input, output, (6.0 / input as f64).sqrt(), rng)
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.output];
        for r in 0..rows {
            y[r * self.output..(r + 1) * self.output].copy_from_slice(&self.b.value);
        }
        gemm(
            false,
            true,
            rows,
            self.output,
            self.input,
            1.0,
            x,
            &self.w.value,
            1.0,
            &mut y,
        );
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &[f64], dy: &[f64], rows: usize) -> Vec<f64> {
        gemm(
            true,
            false,
            self.output,
            self.input,
            rows,
            1.0,
            dy,
            x,
            1.0,
            &mut self.w.grad,
        );
        for r in 0..rows {
            for (g, d) in self
                .b
                .grad
                .iter_mut()
                .zip(&dy[r * self.output..(r + 1) * self.output])
            {
                *g += d;
            }
        }
        let mut dx = vec![0.0; rows * self.input];
        gemm(
            false,
            false,
            rows,
            self.input,
            self.output,
            1.0,
            dy,
            &self.w.value,
            0.0,
            &mut dx,
        );
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }
}

/// Spatial shape of a batch of images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn size(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Zero-padded 2-D convolution without bias (a batchnorm always follows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub w: Param,
    pub input: Dims,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        name: &str,
        input: Dims,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = input.channels * kernel * kernel;
        Self {
            w: Param::new(
                &format!("{name}.w"),
                &[out_channels, input.channels, kernel, kernel],
                (6.0 / fan_in as f64).sqrt(),
                rng,
            ),
            input,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn output(&self) -> Dims {
        let o = |n: usize| (n + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1;
        Dims {
            channels: self.out_channels,
            height: o(self.input.height),
            width: o(self.input.width),
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (d, o, k) = (self.input, self.output(), self.kernel);
        let plane = o.height * o.width;
        for c in 0..d.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((c * k + ki) * k + kj) * plane..][..plane];
                    for oy in 0..o.height {
                        let y = (oy * self.stride + ki) as isize - self.pad as isize;
                        let dst = &mut row[oy * o.width..(oy + 1) * o.width];
                        if y < 0 || y >= d.height as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * d.height + y as usize) * d.width..][..d.width];
                        for (ox, v) in dst.iter_mut().enumerate() {
                            let xx = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if xx >= 0 && xx < d.width as isize {
                                src[xx as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (d, o, k) = (self.input, self.output(), self.kernel);
        let plane = o.height * o.width;
        for c in 0..d.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((c * k + ki) * k + kj) * plane..][..plane];
                    for oy in 0..o.height {
                        let y = (oy * self.stride + ki) as isize - self.pad as isize;
                        if y < 0 || y >= d.height as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * d.height + y as usize) * d.width..][..d.width];
                        for ox in 0..o.width {
                            let xx = (ox * self.stride + kj) as isize - self.pad as isize;
                            if xx >= 0 && xx < d.width as isize {
                                dst[xx as usize] += row[oy * o.width + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (d, o) = (self.input, self.output());
        let ckk = d.channels * self.kernel * self.kernel;
        let plane = o.height * o.width;
        let mut cols = vec![0.0; ckk * plane];
        let mut y = vec![0.0; n * o.size()];
        for i in 0..n {
            self.im2col(&x[i * d.size()..(i + 1) * d.size()], &mut cols);
            gemm(
                false,
                false,
                self.out_channels,
                plane,
                ckk,
                1.0,
                &self.w.value,
                &cols,
                0.0,
                &mut y[i * o.size()..(i + 1) * o.size()],
            );
        }
        y
    }

    /// Accumulates the weight gradient; returns the input gradient when asked.
    pub fn backward(&mut self, x: &[f64], dy: &[f64], n: usize, want_dx: bool) -> Option<Vec<f64>> {
        let (d, o) = (self.input, self.output());
        let ckk = d.channels * self.kernel * self.kernel;
        let plane = o.height * o.width;
        let mut cols = vec![0.0; ckk * plane];
        let mut dcols = vec![0.0; ckk * plane];
        let mut dx = if want_dx {
            vec![0.0; n * d.size()]
        } else {
            Vec::new()
        };
        for i in 0..n {
            let xi = &x[i * d.size()..(i + 1) * d.size()];
            let dyi = &dy[i * o.size()..(i + 1) * o.size()];
            self.im2col(xi, &mut cols);
            gemm(
                false,
                true,
                self.out_channels,
                ckk,
                plane,
                1.0,
                dyi,
                &cols,
                1.0,
                &mut self.w.grad,
            );
            if want_dx {
                gemm(
                    true,
                    false,
                    ckk,
                    plane,
                    self.out_channels,
                    1.0,
                    &self.w.value,
                    dyi,
                    0.0,
                    &mut dcols,
                );
                self.col2im(&dcols, &mut dx[i * d.size()..(i + 1) * d.size()]);
            }
        }
        want_dx.then_some(dx)
    }
}

/// Per-channel batch normalization over (batch, height, width).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BatchNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        let mut gamma = Param::zeros(&format!("{name}.gamma"), &[channels]);
        gamma.value.fill(1.0);
        Self {
            gamma,
            beta: Param::zeros(&format!("{name}.beta"), &[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Training mode: batch statistics, running averages updated.
    pub fn forward_train(&mut self, x: &mut [f64], n: usize, plane: usize) -> BatchNormCache {
        let c = self.channels();
        let m = (n * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let s = &x[(i * c + ch) * plane..][..plane];
                mean[ch] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for i in 0..n {
            for ch in 0..c {
                let s = &x[(i * c + ch) * plane..][..plane];
                var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for k in off..off + plane {
                    xhat[k] = (x[k] - mean[ch]) * inv_std[ch];
                    x[k] = self.gamma.value[ch] * xhat[k] + self.beta.value[ch];
                }
            }
        }
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for ch in 0..c {
            self.running_mean[ch] =
                (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
            self.running_var[ch] =
                (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var[ch] * unbias;
        }
        BatchNormCache { xhat, inv_std }
    }

    pub fn forward_eval(&self, x: &mut [f64], n: usize, plane: usize) {
        let c = self.channels();
        for i in 0..n {
            for ch in 0..c {
                let scale = self.gamma.value[ch] / (self.running_var[ch] + self.eps).sqrt();
                let shift = self.beta.value[ch] - self.running_mean[ch] * scale;
                x[(i * c + ch) * plane..][..plane]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
    }

    pub fn backward(
        &mut self,
        cache: &BatchNormCache,
        dy: &[f64],
        n: usize,
        plane: usize,
    ) -> Vec<f64> {
        let c = self.channels();
        let m = (n * plane) as f64;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for k in off..off + plane {
                    sum_dy[ch] += dy[k];
                    sum_dy_xhat[ch] += dy[k] * cache.xhat[k];
                }
            }
        }
        for ch in 0..c {
            self.beta.grad[ch] += sum_dy[ch];
            self.gamma.grad[ch] += sum_dy_xhat[ch];
        }
        let mut dx = vec![0.0; dy.len()];
        for i in 0..n {
            for ch in 0..c {
                let k0 = self.gamma.value[ch] * cache.inv_std[ch] / m;
                let off = (i * c + ch) * plane;
                for k in off..off + plane {
                    dx[k] = k0 * (m * dy[k] - sum_dy[ch] - cache.xhat[k] * sum_dy_xhat[ch]);
                }
            }
        }
        dx
    }
}

/// 2x2 max pooling, stride 2; a partial window at an odd edge still yields an output.
pub fn maxpool_dims(d: Dims) -> Dims {
    Dims {
        channels: d.channels,
        height: d.height.div_ceil(2),
        width: d.width.div_ceil(2),
    }
}

/// Returns pooled values and, per output, the flat input index of its maximum.
pub fn maxpool_forward(x: &[f64], n: usize, d: Dims) -> (Vec<f64>, Vec<u32>) {
    let o = maxpool_dims(d);
    let mut y = vec![0.0; n * o.size()];
    let mut arg = vec![0u32; n * o.size()];
    for plane in 0..n * d.channels {
        let xin = plane * d.height * d.width;
        let yout = plane * o.height * o.width;
        for oy in 0..o.height {
            for ox in 0..o.width {
                let mut best = (f64::NEG_INFINITY, 0usize);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (yy, xx) = (2 * oy + dy, 2 * ox + dx);
                        if yy < d.height && xx < d.width {
                            let idx = xin + yy * d.width + xx;
                            if x[idx] > best.0 {
                                best = (x[idx], idx);
                            }
                        }
                    }
                }
                y[yout + oy * o.width + ox] = best.0;
                arg[yout + oy * o.width + ox] = best.1 as u32;
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward(dy: &[f64], arg: &[u32], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (g, &i) in dy.iter().zip(arg) {
        dx[i as usize] += g;
    }
    dx
}

/// One GRU layer. Gate weights are kept as the nine separate tensors of the
/// textbook formulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gru {
    pub w_xr: Param,
    pub w_hr: Param,
    pub w_xz: Param,
    pub w_hz: Param,
    pub w_xh: Param,
    pub w_hh: Param,
    pub b_r: Param,
    pub b_z: Param,
    pub b_h: Param,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Default)]
pub struct GruStep {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub c: Vec<f64>,
}

impl Gru {
    pub fn new<R: Rng>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        let p = |n: &str, cols: usize, rng: &mut R| {
            Param::new(&format!("{name}.{n}"), &[hidden, cols], k, rng)
        };
        Self {
            w_xr: p("w_xr", input, rng),
            w_hr: p("w_hr", hidden, rng),
            w_xz: p("w_xz", input, rng),
            w_hz: p("w_hz", hidden, rng),
            w_xh: p("w_xh", input, rng),
            w_hh: p("w_hh", hidden, rng),
            b_r: Param::new(&format!("{name}.b_r"), &[hidden], k, rng),
            b_z: Param::new(&format!("{name}.b_z"), &[hidden], k, rng),
            b_h: Param::new(&format!("{name}.b_h"), &[hidden], k, rng),
            input,
            hidden,
        }
    }

    fn affine(
        &self,
        wx: &Param,
        x: &[f64],
        wh: &Param,
        h: &[f64],
        b: &Param,
        rows: usize,
    ) -> Vec<f64> {
        let hd = self.hidden;
        let mut a = vec![0.0; rows * hd];
        for r in 0..rows {
            a[r * hd..(r + 1) * hd].copy_from_slice(&b.value);
        }
        gemm(
            false, true, rows, hd, self.input, 1.0, x, &wx.value, 1.0, &mut a,
        );
        gemm(false, true, rows, hd, hd, 1.0, h, &wh.value, 1.0, &mut a);
        a
    }

    /// One step; returns the new hidden state and the values backward needs.
    pub fn step(&self, x: &[f64], h: &[f64], rows: usize) -> (Vec<f64>, GruStep) {
        let mut r = self.affine(&self.w_xr, x, &self.w_hr, h, &self.b_r, rows);
        r.iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut z = self.affine(&self.w_xz, x, &self.w_hz, h, &self.b_z, rows);
        z.iter_mut().for_each(|v| *v = sigmoid(*v));
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let mut c = self.affine(&self.w_xh, x, &self.w_hh, &rh, &self.b_h, rows);
        c.iter_mut().for_each(|v| *v = v.tanh());
        let out: Vec<f64> = (0..h.len())
            .map(|i| z[i] * h[i] + (1.0 - z[i]) * c[i])
            .collect();
        (
            out,
            GruStep {
                x: x.to_vec(),
                h_prev: h.to_vec(),
                r,
                z,
                c,
            },
        )
    }

    /// Backward through one step given the gradient of its output.
    /// Returns (dx, dh_prev).
    pub fn step_backward(
        &mut self,
        s: &GruStep,
        dout: &[f64],
        rows: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let (hd, inp) = (self.hidden, self.input);
        let n = rows * hd;
        let mut dh = vec![0.0; n];
        let mut da_z = vec![0.0; n];
        let mut da_h = vec![0.0; n];
        for i in 0..n {
            let (z, c, h) = (s.z[i], s.c[i], s.h_prev[i]);
            dh[i] = dout[i] * z;
            da_z[i] = dout[i] * (h - c) * z * (1.0 - z);
            da_h[i] = dout[i] * (1.0 - z) * (1.0 - c * c);
        }
        let rh: Vec<f64> = s.r.iter().zip(&s.h_prev).map(|(a, b)| a * b).collect();
        gemm(
            true,
            false,
            hd,
            inp,
            rows,
            1.0,
            &da_h,
            &s.x,
            1.0,
            &mut self.w_xh.grad,
        );
        gemm(
            true,
            false,
            hd,
            hd,
            rows,
            1.0,
            &da_h,
            &rh,
            1.0,
            &mut self.w_hh.grad,
        );
        let mut drh = vec![0.0; n];
        gemm(
            false,
            false,
            rows,
            hd,
            hd,
            1.0,
            &da_h,
            &self.w_hh.value,
            0.0,
            &mut drh,
        );
        let mut da_r = vec![0.0; n];
        for i in 0..n {
            let r = s.r[i];
            da_r[i] = drh[i] * s.h_prev[i] * r * (1.0 - r);
            dh[i] += drh[i] * r;
        }
        gemm(
            true,
            false,
            hd,
            inp,
            rows,
            1.0,
            &da_z,
            &s.x,
            1.0,
            &mut self.w_xz.grad,
        );
        gemm(
            true,
            false,
            hd,
            hd,
            rows,
            1.0,
            &da_z,
            &s.h_prev,
            1.0,
            &mut self.w_hz.grad,
        );
        gemm(
            true,
            false,
            hd,
            inp,
            rows,
            1.0,
            &da_r,
            &s.x,
            1.0,
            &mut self.w_xr.grad,
        );
        gemm(
            true,
            false,
            hd,
            hd,
            rows,
            1.0,
            &da_r,
            &s.h_prev,
            1.0,
            &mut self.w_hr.grad,
        );
        for row in 0..rows {
            for j in 0..hd {
                let k = row * hd + j;
                self.b_r.grad[j] += da_r[k];
                self.b_z.grad[j] += da_z[k];
                self.b_h.grad[j] += da_h[k];
            }
        }
        let mut dx = vec![0.0; rows * inp];
        gemm(
            false,
            false,
            rows,
            inp,
            hd,
            1.0,
            &da_r,
            &self.w_xr.value,
            1.0,
            &mut dx,
        );
        gemm(
            false,
            false,
            rows,
            inp,
            hd,
            1.0,
            &da_z,
            &self.w_xz.value,
            1.0,
            &mut dx,
        );
        gemm(
            false,
            false,
            rows,
            inp,
            hd,
            1.0,
            &da_h,
            &self.w_xh.value,
            1.0,
            &mut dx,
        );
        gemm(
            false,
            false,
            rows,
            hd,
            hd,
            1.0,
            &da_r,
            &self.w_hr.value,
            1.0,
            &mut dh,
        );
        gemm(
            false,
            false,
            rows,
            hd,
            hd,
            1.0,
            &da_z,
            &self.w_hz.value,
            1.0,
            &mut dh,
        );
        (dx, dh)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w_xr,
            &mut self.w_hr,
            &mut self.w_xz,
            &mut self.w_hz,
            &mut self.w_xh,
            &mut self.w_hh,
            &mut self.b_r,
            &mut self.b_z,
            &mut self.b_h,
        ]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.w_xr, &self.w_hr, &self.w_xz, &self.w_hz, &self.w_xh, &self.w_hh, &self.b_r,
            &self.b_z, &self.b_h,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn randv(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn gemm_matches_triple_loop() {
        let mut r = rng();
        let (m, n, k) = (3, 4, 5);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = randv(m * k, &mut r);
            let b = randv(k * n, &mut r);
            let mut c = vec![0.0; m * n];
            gemm(ta, tb, m, n, k, 1.0, &a, &b, 0.0, &mut c);
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        let av = if ta { a[p * m + i] } else { a[i * k + p] };
                        let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                        s += av * bv;
                    }
                    assert!((c[i * n + j] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn relu_examples() {
        let mut v = vec![-1.0, 2.0];
        relu_inplace(&mut v);
        assert_eq!(v, vec![0.0, 2.0]);
    }

    #[test]
    fn constant_maxpool() {
        let d = Dims {
            channels: 2,
            height: 5,
            width: 3,
        };
        let (y, _) = maxpool_forward(&vec![0.7; d.size()], 1, d);
        assert_eq!(y.len(), 2 * 3 * 2);
        assert!(y.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut r = rng();
        let d = Dims {
            channels: 3,
            height: 7,
            width: 6,
        };
        for (k, s) in [(3, 1), (3, 2), (5, 2), (1, 1)] {
            let conv = Conv2d::new("c", d, 4, k, s, &mut r);
            let n = 2;
            let x = randv(n * d.size(), &mut r);
            let y = conv.forward(&x, n);
            let o = conv.output();
            let p = conv.pad as isize;
            for i in 0..n {
                for co in 0..4 {
                    for oy in 0..o.height {
                        for ox in 0..o.width {
                            let mut acc = 0.0;
                            for ci in 0..3 {
                                for ki in 0..k {
                                    for kj in 0..k {
                                        let yy = (oy * s + ki) as isize - p;
                                        let xx = (ox * s + kj) as isize - p;
                                        if yy >= 0
                                            && xx >= 0
                                            && (yy as usize) < d.height
                                            && (xx as usize) < d.width
                                        {
                                            acc += conv.w.value[((co * 3 + ci) * k + ki) * k + kj]
                                                * x[i * d.size()
                                                    + (ci * d.height + yy as usize) * d.width
                                                    + xx as usize];
                                        }
                                    }
                                }
                            }
                            let got = y[i * o.size() + (co * o.height + oy) * o.width + ox];
                            assert!((got - acc).abs() < 1e-10);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gru_zero_weights() {
        let mut r = rng();
        let mut g = Gru::new("g", 3, 4, &mut r);
        for p in g.params_mut() {
            p.value.fill(0.0);
        }
        let x = randv(3, &mut r);
        let (o, _) = g.step(&x, &[0.0; 4], 1);
        assert!(o.iter().all(|&v| v == 0.0));
        let v = [1.0, -2.0, 0.5, 3.0];
        let (o, _) = g.step(&x, &v, 1);
        for (a, b) in o.iter().zip(v) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn gru_matches_scalar_unroll() {
        let mut r = rng();
        let (inp, hd) = (3, 2);
        let g = Gru::new("g", inp, hd, &mut r);
        let xs: Vec<Vec<f64>> = (0..3).map(|_| randv(inp, &mut r)).collect();
        let mut h = vec![0.0; hd];
        let mut h_ref = vec![0.0; hd];
        let w = |p: &Param, i: usize, j: usize, cols: usize| p.value[i * cols + j];
        for x in &xs {
            h = g.step(x, &h, 1).0;
            let mut next = vec![0.0; hd];
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let mut rr = vec![0.0; hd];
            for i in 0..hd {
                let mut ar = g.b_r.value[i];
                for j in 0..inp {
                    ar += w(&g.w_xr, i, j, inp) * x[j];
                }
                for j in 0..hd {
                    ar += w(&g.w_hr, i, j, hd) * h_ref[j];
                }
                rr[i] = sig(ar);
            }
            for i in 0..hd {
                let (mut az, mut ah) = (g.b_z.value[i], g.b_h.value[i]);
                for j in 0..inp {
                    az += w(&g.w_xz, i, j, inp) * x[j];
                    ah += w(&g.w_xh, i, j, inp) * x[j];
                }
                for j in 0..hd {
                    az += w(&g.w_hz, i, j, hd) * h_ref[j];
                    ah += w(&g.w_hh, i, j, hd) * rr[j] * h_ref[j];
                }
                let z = sig(az);
                next[i] = z * h_ref[i] + (1.0 - z) * ah.tanh();
            }
            h_ref = next;
        }
        for (a, b) in h.iter().zip(&h_ref) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_gates_in_unit_interval() {
        let mut r = rng();
        let g = Gru::new("g", 4, 3, &mut r);
        for scale in [1.0, 10.0, 100.0] {
            let x: Vec<f64> = randv(8, &mut r).iter().map(|v| v * scale).collect();
            let (_, s) = g.step(&x, &[0.3; 6], 2);
            assert!(s.r.iter().chain(&s.z).all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    /// Central-difference check of a scalar function of a buffer.
    fn numeric_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let a = f(&xp);
            xp[i] = x[i] - h;
            let b = f(&xp);
            xp[i] = x[i];
            g[i] = (a - b) / (2.0 * h);
        }
        g
    }

    fn close(a: &[f64], b: &[f64]) {
        for (x, y) in a.iter().zip(b) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-6);
            assert!(rel < 1e-5, "analytic {x} numeric {y}");
        }
    }

    #[test]
    fn conv_input_and_weight_gradients() {
        let mut r = rng();
        let d = Dims {
            channels: 2,
            height: 5,
            width: 4,
        };
        let conv = Conv2d::new("c", d, 3, 3, 2, &mut r);
        let x = randv(2 * d.size(), &mut r);
        let proj = randv(2 * conv.output().size(), &mut r);
        let loss = |c: &Conv2d, x: &[f64]| {
            c.forward(x, 2)
                .iter()
                .zip(&proj)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut c = conv.clone();
        let dx = c.backward(&x, &proj, 2, true).unwrap();
        close(&dx, &numeric_grad(&mut |xx| loss(&conv, xx), &x));
        let w0 = conv.w.value.clone();
        let num = numeric_grad(
            &mut |w| {
                let mut cc = conv.clone();
                cc.w.value = w.to_vec();
                loss(&cc, &x)
            },
            &w0,
        );
        close(&c.w.grad, &num);
    }

    #[test]
    fn batchnorm_gradients() {
        let mut r = rng();
        let (n, c, plane) = (3, 2, 4);
        let mut bn = BatchNorm::new("bn", c);
        bn.gamma.value = vec![1.3, -0.4];
        bn.beta.value = vec![0.2, 0.1];
        let x = randv(n * c * plane, &mut r);
        let proj = randv(n * c * plane, &mut r);
        let loss = |bn: &BatchNorm, x: &[f64]| {
            let mut b = bn.clone();
            let mut y = x.to_vec();
            b.forward_train(&mut y, n, plane);
            y.iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut b = bn.clone();
        let mut y = x.clone();
        let cache = b.forward_train(&mut y, n, plane);
        let dx = b.backward(&cache, &proj, n, plane);
        close(&dx, &numeric_grad(&mut |xx| loss(&bn, xx), &x));
    }

    #[test]
    fn maxpool_gradient_routes_to_argmax() {
        let d = Dims {
            channels: 1,
            height: 3,
            width: 3,
        };
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let (y, arg) = maxpool_forward(&x, 1, d);
        assert_eq!(y, vec![4.0, 5.0, 7.0, 8.0]);
        let dx = maxpool_backward(&[1.0, 2.0, 3.0, 4.0], &arg, 9);
        assert_eq!(dx, vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
    }
}
