//! GroupNorm (NCHW) and LayerNorm (last axis), with explicit backward.

use super::param::{join, Param, Params};
use super::tensor::Tensor;

const EPS: f32 = 1e-5;

pub struct GroupNorm {
    pub groups: usize,
    pub c: usize,
    pub gamma: Param,
    pub beta: Param,
    cache: Option<GnCache>,
}

struct GnCache {
    xhat: Tensor,
    rstd: Vec<f32>, // per (n, group)
}

impl GroupNorm {
    pub fn new(groups: usize, c: usize) -> Self {
        assert!(c % groups == 0, "channels {c} not divisible by {groups} groups");
        GroupNorm {
            groups,
            c,
            gamma: Param::from_vec(&[c], vec![1.0; c]),
            beta: Param::zeros(&[c]),
            cache: None,
        }
    }

    fn normalize(&self, x: &Tensor) -> (Tensor, Vec<f32>) {
        let (n, c, h, w) = x.dims4().expect("groupnorm input must be 4-D");
        assert_eq!(c, self.c);
        let cg = c / self.groups;
        let gsize = cg * h * w;
        let mut xhat = Tensor::zeros(&[n, c, h, w]);
        let mut rstds = vec![0.0f32; n * self.groups];
        for i in 0..n {
            for g in 0..self.groups {
                let base = i * c * h * w + g * gsize;
                let src = &x.data()[base..base + gsize];
                let mut sum = 0.0f64;
                let mut sumsq = 0.0f64;
                for v in src {
                    let v = *v as f64;
                    sum += v;
                    sumsq += v * v;
                }
                let mean = sum / gsize as f64;
                let var = (sumsq / gsize as f64 - mean * mean).max(0.0);
                let rstd = (1.0 / (var + EPS as f64).sqrt()) as f32;
                let mean = mean as f32;
                rstds[i * self.groups + g] = rstd;
                let dst = &mut xhat.data_mut()[base..base + gsize];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = (*v - mean) * rstd;
                }
            }
        }
        (xhat, rstds)
    }

    fn affine(&self, xhat: &Tensor) -> Tensor {
        let (n, c, h, w) = xhat.dims4().unwrap();
        let plane = h * w;
        let mut y = xhat.clone();
        for i in 0..n {
            for ch in 0..c {
                let (ga, be) = (self.gamma.w[ch], self.beta.w[ch]);
                for v in &mut y.data_mut()[(i * c + ch) * plane..(i * c + ch + 1) * plane] {
                    *v = *v * ga + be;
                }
            }
        }
        y
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (xhat, _) = self.normalize(x);
        self.affine(&xhat)
    }

    pub fn forward_t(&mut self, x: &Tensor) -> Tensor {
        let (xhat, rstd) = self.normalize(x);
        let y = self.affine(&xhat);
        self.cache = Some(GnCache { xhat, rstd });
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let cache = self.cache.as_ref().expect("groupnorm backward without forward_t");
        let xhat = &cache.xhat;
        let (n, c, h, w) = xhat.dims4().unwrap();
        let plane = h * w;
        let cg = c / self.groups;
        let gsize = cg * plane;

        // per-channel param grads
        for i in 0..n {
            for ch in 0..c {
                let o = (i * c + ch) * plane;
                let mut dg = 0.0f32;
                let mut db = 0.0f32;
                for p in 0..plane {
                    dg += dy.data()[o + p] * xhat.data()[o + p];
                    db += dy.data()[o + p];
                }
                self.gamma.g[ch] += dg;
                self.beta.g[ch] += db;
            }
        }

        let mut dx = Tensor::zeros(&[n, c, h, w]);
        for i in 0..n {
            for g in 0..self.groups {
                let base = i * c * h * w + g * gsize;
                let rstd = cache.rstd[i * self.groups + g];
                // channel-major passes avoid per-element index math
                let mut sum_dxhat = 0.0f64;
                let mut sum_dxhat_xhat = 0.0f64;
                for cc in 0..cg {
                    let ga = self.gamma.w[g * cg + cc];
                    let o = base + cc * plane;
                    let (mut s1, mut s2) = (0.0f32, 0.0f32);
                    for p in 0..plane {
                        let dxh = dy.data()[o + p] * ga;
                        s1 += dxh;
                        s2 += dxh * xhat.data()[o + p];
                    }
                    sum_dxhat += s1 as f64;
                    sum_dxhat_xhat += s2 as f64;
                }
                let m1 = (sum_dxhat / gsize as f64) as f32;
                let m2 = (sum_dxhat_xhat / gsize as f64) as f32;
                for cc in 0..cg {
                    let ga = self.gamma.w[g * cg + cc];
                    let o = base + cc * plane;
                    for p in 0..plane {
                        let dxh = dy.data()[o + p] * ga;
                        dx.data_mut()[o + p] = rstd * (dxh - m1 - xhat.data()[o + p] * m2);
                    }
                }
            }
        }
        dx
    }
}

impl Params for GroupNorm {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

/// LayerNorm over the last axis of an [.., d] tensor.
pub struct LayerNorm {
    pub d: usize,
    pub gamma: Param,
    pub beta: Param,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            d,
            gamma: Param::from_vec(&[d], vec![1.0; d]),
            beta: Param::zeros(&[d]),
            cache: None,
        }
    }

    fn normalize(&self, x: &Tensor) -> (Tensor, Vec<f32>) {
        let d = self.d;
        let rows = x.numel() / d;
        let mut xhat = x.clone();
        let mut rstds = vec![0.0f32; rows];
        for r in 0..rows {
            let src = &mut xhat.data_mut()[r * d..(r + 1) * d];
            let mean = src.iter().map(|v| *v as f64).sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + EPS as f64).sqrt();
            rstds[r] = rstd as f32;
            for v in src.iter_mut() {
                *v = ((*v as f64 - mean) * rstd) as f32;
            }
        }
        (xhat, rstds)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (mut xhat, _) = self.normalize(x);
        self.apply_affine(&mut xhat);
        xhat
    }

    pub fn forward_t(&mut self, x: &Tensor) -> Tensor {
        let (xhat, rstd) = self.normalize(x);
        let mut y = xhat.clone();
        self.apply_affine(&mut y);
        self.cache = Some((xhat, rstd));
        y
    }

    fn apply_affine(&self, xhat: &mut Tensor) {
        let d = self.d;
        let rows = xhat.numel() / d;
        for r in 0..rows {
            let row = &mut xhat.data_mut()[r * d..(r + 1) * d];
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.gamma.w[j] + self.beta.w[j];
            }
        }
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (xhat, rstd) = self.cache.as_ref().expect("layernorm backward without forward_t");
        let d = self.d;
        let rows = dy.numel() / d;
        let mut dx = Tensor::zeros(dy.dims());
        for r in 0..rows {
            let xh = &xhat.data()[r * d..(r + 1) * d];
            let dyr = &dy.data()[r * d..(r + 1) * d];
            let mut m1 = 0.0f64;
            let mut m2 = 0.0f64;
            for j in 0..d {
                let dxh = dyr[j] * self.gamma.w[j];
                m1 += dxh as f64;
                m2 += dxh as f64 * xh[j] as f64;
                self.gamma.g[j] += dyr[j] * xh[j];
                self.beta.g[j] += dyr[j];
            }
            let m1 = (m1 / d as f64) as f32;
            let m2 = (m2 / d as f64) as f32;
            let out = &mut dx.data_mut()[r * d..(r + 1) * d];
            for j in 0..d {
                let dxh = dyr[j] * self.gamma.w[j];
                out[j] = rstd[r] * (dxh - m1 - xh[j] * m2);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}
