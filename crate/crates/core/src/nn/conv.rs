//! 2-D convolution via im2col + GEMM, with an explicit backward pass.

use super::param::{join, Param, Params};
use super::tensor::Tensor;
use super::gemm;
use rand_chacha::ChaCha8Rng;

pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Kernel, laid out [out_c, in_c * k * k].
    pub weight: Param,
    pub bias: Param,
    cache: Option<Cache>,
}

struct Cache {
    col: Vec<f32>,
    in_dims: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_c * k * k) as f32;
        Conv2d {
            in_c,
            out_c,
            k,
            stride,
            pad,
            weight: Param::randn(&[out_c, in_c * k * k], (2.0 / fan_in).sqrt(), rng),
            bias: Param::zeros(&[out_c]),
            cache: None,
        }
    }

    /// Zero-initialized kernel and bias; contributes nothing until trained.
    pub fn new_zeroed(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            in_c,
            out_c,
            k,
            stride,
            pad,
            weight: Param::zeros(&[out_c, in_c * k * k]),
            bias: Param::zeros(&[out_c]),
            cache: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Widen the input-channel axis with zero-initialized kernel slices.
    /// The original channels keep their weights, so the layer's output on
    /// inputs whose extra channels are arbitrary equals the old layer's
    /// output on the original channels.
    pub fn extend_in_channels(&mut self, extra: usize) {
        if extra == 0 {
            return;
        }
        let kk = self.k * self.k;
        let old_row = self.in_c * kk;
        let new_in = self.in_c + extra;
        let new_row = new_in * kk;
        let mut w = vec![0.0; self.out_c * new_row];
        for o in 0..self.out_c {
            w[o * new_row..o * new_row + old_row]
                .copy_from_slice(&self.weight.w[o * old_row..(o + 1) * old_row]);
        }
        self.weight = Param::from_vec(&[self.out_c, new_row], w);
        self.in_c = new_in;
        self.cache = None;
    }

    fn im2col_sample(&self, x: &[f32], h: usize, w: usize, oh: usize, ow: usize, col: &mut [f32]) {
        let k = self.k;
        let pad = self.pad as isize;
        let stride = self.stride;
        let plane = h * w;
        let ohw = oh * ow;
        for c in 0..self.in_c {
            let xc = &x[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * ohw;
                    for oy in 0..oh {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let iy = iy as usize;
                        if stride == 1 {
                            // contiguous row copy with zero borders
                            let ix0 = kx as isize - pad;
                            let lo = (-ix0).max(0) as usize;
                            let hi = ((w as isize - ix0).min(ow as isize)).max(0) as usize;
                            dst[..lo].fill(0.0);
                            dst[hi..].fill(0.0);
                            if hi > lo {
                                let src0 = (ix0 + lo as isize) as usize;
                                dst[lo..hi].copy_from_slice(&xc[iy * w + src0..iy * w + src0 + (hi - lo)]);
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * stride) as isize + kx as isize - pad;
                                *d = if ix < 0 || ix >= w as isize {
                                    0.0
                                } else {
                                    xc[iy * w + ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_sample(&self, dcol: &[f32], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f32]) {
        let k = self.k;
        let pad = self.pad as isize;
        let stride = self.stride;
        let plane = h * w;
        let ohw = oh * ow;
        for c in 0..self.in_c {
            let xc = &mut dx[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * ohw;
                    for oy in 0..oh {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let src = &dcol[row + oy * ow..row + (oy + 1) * ow];
                        if stride == 1 {
                            let ix0 = kx as isize - pad;
                            let lo = (-ix0).max(0) as usize;
                            let hi = ((w as isize - ix0).min(ow as isize)).max(0) as usize;
                            if hi > lo {
                                let dst0 = (ix0 + lo as isize) as usize;
                                let dst = &mut xc[iy * w + dst0..iy * w + dst0 + (hi - lo)];
                                for (d, s) in dst.iter_mut().zip(&src[lo..hi]) {
                                    *d += s;
                                }
                            }
                        } else {
                            for (ox, s) in src.iter().enumerate() {
                                let ix = (ox * stride) as isize + kx as isize - pad;
                                if ix >= 0 && ix < w as isize {
                                    xc[iy * w + ix as usize] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn run(&self, x: &Tensor, col_store: Option<&mut Vec<f32>>) -> Tensor {
        let (n, c, h, w) = x.dims4().expect("conv input must be 4-D");
        assert_eq!(c, self.in_c, "conv expected {} input channels, got {c}", self.in_c);
        let (oh, ow) = self.out_hw(h, w);
        let ckk = self.in_c * self.k * self.k;
        let ohw = oh * ow;
        let mut y = Tensor::zeros(&[n, self.out_c, oh, ow]);

        let mut local = Vec::new();
        let (cols, keep_all): (&mut Vec<f32>, bool) = match col_store {
            Some(store) => {
                store.resize(n * ckk * ohw, 0.0);
                (store, true)
            }
            None => {
                local.resize(ckk * ohw, 0.0);
                (&mut local, false)
            }
        };

        for i in 0..n {
            let col = if keep_all {
                &mut cols[i * ckk * ohw..(i + 1) * ckk * ohw]
            } else {
                &mut cols[..]
            };
            self.im2col_sample(&x.data()[i * c * h * w..(i + 1) * c * h * w], h, w, oh, ow, col);
            let yi = &mut y.data_mut()[i * self.out_c * ohw..(i + 1) * self.out_c * ohw];
            gemm(
                self.out_c, ckk, ohw,
                1.0, &self.weight.w, ckk as isize, 1,
                col, ohw as isize, 1,
                0.0, yi, ohw as isize, 1,
            );
            for o in 0..self.out_c {
                let b = self.bias.w[o];
                if b != 0.0 {
                    for v in &mut yi[o * ohw..(o + 1) * ohw] {
                        *v += b;
                    }
                }
            }
        }
        y
    }

    /// Inference forward; nothing is cached.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.run(x, None)
    }

    /// Training forward; caches the im2col buffer for `backward`.
    pub fn forward_t(&mut self, x: &Tensor) -> Tensor {
        let mut col = match self.cache.take() {
            Some(c) => c.col,
            None => Vec::new(),
        };
        let y = self.run(x, Some(&mut col));
        let (n, c, h, w) = x.dims4().unwrap();
        let (oh, ow) = self.out_hw(h, w);
        self.cache = Some(Cache {
            col,
            in_dims: (n, c, h, w),
            out_hw: (oh, ow),
        });
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("conv backward without forward_t");
        let (n, c, h, w) = cache.in_dims;
        let (oh, ow) = cache.out_hw;
        let ckk = self.in_c * self.k * self.k;
        let ohw = oh * ow;
        assert_eq!(dy.dims(), &[n, self.out_c, oh, ow]);

        let mut dx = Tensor::zeros(&[n, c, h, w]);
        let mut dcol = vec![0.0f32; ckk * ohw];
        for i in 0..n {
            let dyi = &dy.data()[i * self.out_c * ohw..(i + 1) * self.out_c * ohw];
            let col = &cache.col[i * ckk * ohw..(i + 1) * ckk * ohw];
            // dW += dY · colᵀ
            gemm(
                self.out_c, ohw, ckk,
                1.0, dyi, ohw as isize, 1,
                col, 1, ohw as isize,
                1.0, &mut self.weight.g, ckk as isize, 1,
            );
            // db += row sums of dY
            for o in 0..self.out_c {
                let mut s = 0.0f32;
                for v in &dyi[o * ohw..(o + 1) * ohw] {
                    s += v;
                }
                self.bias.g[o] += s;
            }
            // dcol = Wᵀ · dY, then scatter back to dx
            gemm(
                ckk, self.out_c, ohw,
                1.0, &self.weight.w, 1, ckk as isize,
                dyi, ohw as isize, 1,
                0.0, &mut dcol, ohw as isize, 1,
            );
            self.col2im_sample(&dcol, h, w, oh, ow, &mut dx.data_mut()[i * c * h * w..(i + 1) * c * h * w]);
        }
        self.cache = Some(Cache { col: cache.col, in_dims: cache.in_dims, out_hw: cache.out_hw });
        dx
    }

    /// Drop cached activations (frees training scratch).
    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl Params for Conv2d {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}
