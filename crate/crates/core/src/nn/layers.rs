//! Layers with explicit forward caches and hand-derived backward passes.
//!
//! Work is spread over samples with rayon. Parameter gradients are summed
//! over fixed chunks of samples and the chunk partials are added in chunk
//! order, so results do not depend on the thread count.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

use super::tensor::{gemm, Tensor};

/// Samples per partial gradient buffer.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

fn sum_partials(partials: Vec<Vec<f32>>, into: &mut [f32]) {
    for p in partials {
        for (g, v) in into.iter_mut().zip(p) {
            *g += v;
        }
    }
}

fn out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// `cout x (cin * k * k)`
    pub weight: Param,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        // He initialisation over fan-out, the usual choice for ReLU residual nets
        let std = (2.0 / (cout * k * k) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let weight = (0..cout * cin * k * k).map(|_| dist.sample(rng) as f32).collect();
        Conv2d {
            cin,
            cout,
            k,
            stride,
            pad,
            weight: Param::new(weight),
            input: None,
        }
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, ho: usize, wo: usize, col: &mut [f32]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        for ci in 0..self.cin {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p as isize;
                            dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                plane[iy as usize * w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [f32]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        for ci in 0..self.cin {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && (ix as usize) < w {
                                plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let y = self.eval(x);
        if train {
            self.input = Some(x.clone());
        }
        y
    }

    pub fn eval(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let ho = out_size(x.h, self.k, self.stride, self.pad);
        let wo = out_size(x.w, self.k, self.stride, self.pad);
        let mut y = Tensor::zeros(x.n, self.cout, ho, wo);
        let kk = self.col_rows();
        y.data
            .par_chunks_mut(self.cout * ho * wo)
            .enumerate()
            .for_each(|(i, out)| {
                let mut col = vec![0.0; kk * ho * wo];
                self.im2col(x.sample(i), x.h, x.w, ho, wo, &mut col);
                gemm(self.cout, kk, ho * wo, &self.weight.value, false, &col, false, 0.0, out);
            });
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.take().expect("conv backward without a training forward");
        let (ho, wo) = (dy.h, dy.w);
        let kk = self.col_rows();
        let this = &*self;
        let partials: Vec<Vec<f32>> = (0..x.n)
            .collect::<Vec<_>>()
            .par_chunks(GRAD_CHUNK)
            .map(|idx| {
                let mut dw = vec![0.0; this.cout * kk];
                let mut col = vec![0.0; kk * ho * wo];
                for &i in idx {
                    this.im2col(x.sample(i), x.h, x.w, ho, wo, &mut col);
                    gemm(this.cout, ho * wo, kk, dy.sample(i), false, &col, true, 1.0, &mut dw);
                }
                dw
            })
            .collect();
        let mut dx = x.zeros_like();
        dx.data
            .par_chunks_mut(x.sample_len())
            .enumerate()
            .for_each(|(i, dxi)| {
                let mut dcol = vec![0.0; kk * ho * wo];
                gemm(kk, this.cout, ho * wo, &this.weight.value, true, dy.sample(i), false, 0.0, &mut dcol);
                this.col2im(&dcol, x.h, x.w, ho, wo, dxi);
            });
        sum_partials(partials, &mut self.weight.grad);
        dx
    }
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    /// Weight of the current batch in the running statistics.
    pub momentum: f32,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(vec![1.0; c]),
            beta: Param::new(vec![0.0; c]),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            momentum: BN_MOMENTUM,
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Per-channel sums of `f(x)` in a fixed order.
    fn channel_sums(x: &Tensor, f: impl Fn(usize, f32) -> f64 + Sync) -> Vec<f64> {
        (0..x.c)
            .into_par_iter()
            .map(|c| {
                let mut s = 0.0f64;
                for i in 0..x.n {
                    let base = (i * x.c + c) * x.plane();
                    for &v in &x.data[base..base + x.plane()] {
                        s += f(c, v);
                    }
                }
                s
            })
            .collect()
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        if !train {
            return self.eval(x);
        }
        assert_eq!(x.c, self.channels(), "batch norm channels");
        let m = (x.n * x.plane()) as f64;
        let mean = Self::channel_sums(x, |_, v| v as f64);
        let mean: Vec<f64> = mean.iter().map(|s| s / m).collect();
        let var = Self::channel_sums(x, |c, v| (v as f64 - mean[c]).powi(2));
        let var: Vec<f64> = var.iter().map(|s| s / m).collect();
        for c in 0..x.c {
            let unbiased = if m > 1.0 { var[c] * m / (m - 1.0) } else { var[c] };
            let mo = self.momentum;
            self.running_mean[c] = (1.0 - mo) * self.running_mean[c] + mo * mean[c] as f32;
            self.running_var[c] = (1.0 - mo) * self.running_var[c] + mo * unbiased as f32;
        }
        let mean: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
        let var: Vec<f32> = var.iter().map(|&v| v as f32).collect();
        let (xhat, y, inv_std) = self.normalize(x, &mean, &var, true);
        self.cache = Some((xhat.expect("requested"), inv_std));
        y
    }

    pub fn eval(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.channels(), "batch norm channels");
        self.normalize(x, &self.running_mean, &self.running_var, false).1
    }

    fn normalize(&self, x: &Tensor, mean: &[f32], var: &[f32], keep_xhat: bool) -> (Option<Tensor>, Tensor, Vec<f32>) {
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = x.zeros_like();
        let mut y = x.zeros_like();
        let plane = x.plane();
        let (g, b) = (&self.gamma.value, &self.beta.value);
        xhat.data
            .par_chunks_mut(plane)
            .zip(y.data.par_chunks_mut(plane))
            .enumerate()
            .for_each(|(idx, (xh, yo))| {
                let c = idx % x.c;
                let src = &x.data[idx * plane..(idx + 1) * plane];
                for ((h, o), &v) in xh.iter_mut().zip(yo.iter_mut()).zip(src) {
                    *h = (v - mean[c]) * inv_std[c];
                    *o = g[c] * *h + b[c];
                }
            });
        (keep_xhat.then_some(xhat), y, inv_std)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.take().expect("batch norm backward without a training forward");
        let m = (dy.n * dy.plane()) as f64;
        let plane = dy.plane();
        let sums: Vec<(f64, f64)> = (0..dy.c)
            .into_par_iter()
            .map(|c| {
                let (mut s, mut sx) = (0.0f64, 0.0f64);
                for i in 0..dy.n {
                    let base = (i * dy.c + c) * plane;
                    for j in base..base + plane {
                        s += dy.data[j] as f64;
                        sx += (dy.data[j] * xhat.data[j]) as f64;
                    }
                }
                (s, sx)
            })
            .collect();
        for (c, &(s, sx)) in sums.iter().enumerate() {
            self.beta.grad[c] += s as f32;
            self.gamma.grad[c] += sx as f32;
        }
        let mut dx = dy.zeros_like();
        let g = &self.gamma.value;
        dx.data.par_chunks_mut(plane).enumerate().for_each(|(idx, dxo)| {
            let c = idx % dy.c;
            let (s, sx) = sums[c];
            let mean_dy = (s / m) as f32;
            let mean_dyx = (sx / m) as f32;
            let k = g[c] * inv_std[c];
            for (j, o) in dxo.iter_mut().enumerate() {
                let p = idx * plane + j;
                *o = k * (dy.data[p] - mean_dy - xhat.data[p] * mean_dyx);
            }
        });
        dx
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        if train {
            self.mask = Some(x.data.iter().map(|&v| v > 0.0).collect());
        }
        self.eval(x)
    }

    pub fn eval(&self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        y.data.iter_mut().for_each(|v| *v = v.max(0.0));
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("relu backward without a training forward");
        let mut dx = dy.clone();
        dx.data.iter_mut().zip(mask).for_each(|(d, m)| {
            if !m {
                *d = 0.0;
            }
        });
        dx
    }
}

/// 3x3 max pooling, stride 2, padding 1.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaxPool {
    cache: Option<(usize, usize, usize, usize, Vec<u32>)>,
}

impl MaxPool {
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (y, arg) = Self::pool(x);
        if train {
            self.cache = Some((x.n, x.c, x.h, x.w, arg));
        }
        y
    }

    pub fn eval(&self, x: &Tensor) -> Tensor {
        Self::pool(x).0
    }

    fn pool(x: &Tensor) -> (Tensor, Vec<u32>) {
        let (k, s, p) = (3, 2, 1);
        let ho = out_size(x.h, k, s, p);
        let wo = out_size(x.w, k, s, p);
        let mut y = Tensor::zeros(x.n, x.c, ho, wo);
        let mut arg = vec![0u32; y.data.len()];
        for nc in 0..x.n * x.c {
            let src = &x.data[nc * x.plane()..(nc + 1) * x.plane()];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy as usize >= x.h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix as usize >= x.w {
                                continue;
                            }
                            let i = iy as usize * x.w + ix as usize;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = nc * ho * wo + oy * wo + ox;
                    y.data[o] = best;
                    arg[o] = best_i as u32;
                }
            }
        }
        (y, arg)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (n, c, h, w, arg) = self.cache.take().expect("max pool backward without a training forward");
        let mut dx = Tensor::zeros(n, c, h, w);
        let out_plane = dy.plane();
        for nc in 0..n * c {
            for j in 0..out_plane {
                let o = nc * out_plane + j;
                dx.data[nc * h * w + arg[o] as usize] += dy.data[o];
            }
        }
        dx
    }
}

/// Global average pooling to `n x c x 1 x 1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AvgPool {
    shape: Option<(usize, usize, usize, usize)>,
}

impl AvgPool {
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        if train {
            self.shape = Some((x.n, x.c, x.h, x.w));
        }
        self.eval(x)
    }

    pub fn eval(&self, x: &Tensor) -> Tensor {
        let plane = x.plane();
        let data = x
            .data
            .chunks(plane)
            .map(|c| c.iter().sum::<f32>() / plane as f32)
            .collect();
        Tensor::from_vec(x.n, x.c, 1, 1, data)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (n, c, h, w) = self.shape.take().expect("avg pool backward without a training forward");
        let plane = h * w;
        let mut dx = Tensor::zeros(n, c, h, w);
        for (chunk, &g) in dx.data.chunks_mut(plane).zip(&dy.data) {
            chunk.iter_mut().for_each(|v| *v = g / plane as f32);
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub fin: usize,
    pub fout: usize,
    /// `fout x fin`
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(fin: usize, fout: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fin as f32).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        Linear {
            fin,
            fout,
            weight: Param::new((0..fin * fout).map(|_| dist.sample(rng)).collect()),
            bias: Param::new((0..fout).map(|_| dist.sample(rng)).collect()),
            input: None,
        }
    }

    /// Treats each sample of `x` as a flat feature vector.
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        if train {
            self.input = Some(x.clone());
        }
        self.eval(x)
    }

    pub fn eval(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.sample_len(), self.fin, "linear input size");
        let mut y = Tensor::zeros(x.n, self.fout, 1, 1);
        for i in 0..x.n {
            y.data[i * self.fout..(i + 1) * self.fout].copy_from_slice(&self.bias.value);
        }
        gemm(x.n, self.fin, self.fout, &x.data, false, &self.weight.value, true, 1.0, &mut y.data);
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.take().expect("linear backward without a training forward");
        gemm(self.fout, x.n, self.fin, &dy.data, true, &x.data, false, 1.0, &mut self.weight.grad);
        for i in 0..dy.n {
            for (b, &g) in self.bias.grad.iter_mut().zip(&dy.data[i * self.fout..(i + 1) * self.fout]) {
                *b += g;
            }
        }
        let mut dx = x.zeros_like();
        gemm(x.n, self.fout, self.fin, &dy.data, false, &self.weight.value, false, 0.0, &mut dx.data);
        dx
    }
}
