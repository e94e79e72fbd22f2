//! Multi-head attention. Queries come from an [n, lq, dim] tensor, keys and
//! values from an [n, lk, ctx_dim] context (pass the same tensor for
//! self-attention). Key positions can be masked (token padding).

use super::linear::Linear;
use super::param::{Param, Params};
use super::tensor::Tensor;
use super::gemm;
use rand_chacha::ChaCha8Rng;

pub struct MultiHeadAttention {
    pub dim: usize,
    pub ctx_dim: usize,
    pub heads: usize,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    cache: Option<Cache>,
}

struct Cache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<f32>, // [n, heads, lq, lk]
    lq: usize,
    lk: usize,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, ctx_dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(dim % heads == 0);
        MultiHeadAttention {
            dim,
            ctx_dim,
            heads,
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(ctx_dim, dim, rng),
            wv: Linear::new(ctx_dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
            cache: None,
        }
    }

    /// `key_mask`: one byte per (n, lk) key; nonzero = usable, zero = masked.
    fn attend(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        n: usize,
        lq: usize,
        lk: usize,
        key_mask: Option<&[u8]>,
    ) -> (Tensor, Vec<f32>) {
        let dim = self.dim;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut probs = vec![0.0f32; n * self.heads * lq * lk];
        let mut out = Tensor::zeros(&[n, lq, dim]);
        let mut scores = vec![0.0f32; lq * lk];
        for i in 0..n {
            for h in 0..self.heads {
                let qo = i * lq * dim + h * dh;
                let ko = i * lk * dim + h * dh;
                gemm(
                    lq, dh, lk,
                    scale, &q.data()[qo..], dim as isize, 1,
                    &k.data()[ko..], 1, dim as isize,
                    0.0, &mut scores, lk as isize, 1,
                );
                let pbase = ((i * self.heads) + h) * lq * lk;
                for r in 0..lq {
                    let row = &mut scores[r * lk..(r + 1) * lk];
                    if let Some(m) = key_mask {
                        for (j, s) in row.iter_mut().enumerate() {
                            if m[i * lk + j] == 0 {
                                *s = f32::NEG_INFINITY;
                            }
                        }
                    }
                    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let dst = &mut probs[pbase + r * lk..pbase + (r + 1) * lk];
                    if max == f32::NEG_INFINITY {
                        // every key masked: contribute nothing
                        dst.fill(0.0);
                        continue;
                    }
                    let mut z = 0.0f32;
                    for (d, s) in dst.iter_mut().zip(row.iter()) {
                        let e = (s - max).exp();
                        *d = e;
                        z += e;
                    }
                    for d in dst.iter_mut() {
                        *d /= z;
                    }
                }
                gemm(
                    lq, lk, dh,
                    1.0, &probs[pbase..], lk as isize, 1,
                    &v.data()[ko..], dim as isize, 1,
                    0.0, &mut out.data_mut()[qo..], dim as isize, 1,
                );
            }
        }
        (out, probs)
    }

    pub fn forward(&self, x: &Tensor, ctx: &Tensor, key_mask: Option<&[u8]>) -> Tensor {
        let (n, lq, _) = x.dims3().expect("attention query must be 3-D");
        let (_, lk, _) = ctx.dims3().expect("attention context must be 3-D");
        let q = self.wq.forward(x);
        let k = self.wk.forward(ctx);
        let v = self.wv.forward(ctx);
        let (out, _) = self.attend(&q, &k, &v, n, lq, lk, key_mask);
        self.wo.forward(&out)
    }

    pub fn forward_t(&mut self, x: &Tensor, ctx: &Tensor, key_mask: Option<&[u8]>) -> Tensor {
        let (n, lq, _) = x.dims3().expect("attention query must be 3-D");
        let (_, lk, _) = ctx.dims3().expect("attention context must be 3-D");
        let q = self.wq.forward_t(x);
        let k = self.wk.forward_t(ctx);
        let v = self.wv.forward_t(ctx);
        let (out, probs) = self.attend(&q, &k, &v, n, lq, lk, key_mask);
        let y = self.wo.forward_t(&out);
        self.cache = Some(Cache {
            q,
            k,
            v,
            probs,
            lq,
            lk,
        });
        y
    }

    /// Returns (d_query_input, d_context).
    pub fn backward(&mut self, dy: &Tensor) -> (Tensor, Tensor) {
        let cache = self.cache.take().expect("attention backward without forward_t");
        let (lq, lk) = (cache.lq, cache.lk);
        let dim = self.dim;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let n = cache.q.numel() / (lq * dim);

        let dattn = self.wo.backward(dy);
        let mut dq = Tensor::zeros(cache.q.dims());
        let mut dk = Tensor::zeros(cache.k.dims());
        let mut dv = Tensor::zeros(cache.v.dims());
        let mut dprobs = vec![0.0f32; lq * lk];
        let mut dscores = vec![0.0f32; lq * lk];

        for i in 0..n {
            for h in 0..self.heads {
                let qo = i * lq * dim + h * dh;
                let ko = i * lk * dim + h * dh;
                let pbase = ((i * self.heads) + h) * lq * lk;
                let probs = &cache.probs[pbase..pbase + lq * lk];
                // dprobs = dattn_h · v_hᵀ
                gemm(
                    lq, dh, lk,
                    1.0, &dattn.data()[qo..], dim as isize, 1,
                    &cache.v.data()[ko..], 1, dim as isize,
                    0.0, &mut dprobs, lk as isize, 1,
                );
                // dv_h += probsᵀ · dattn_h
                gemm(
                    lk, lq, dh,
                    1.0, probs, 1, lk as isize,
                    &dattn.data()[qo..], dim as isize, 1,
                    1.0, &mut dv.data_mut()[ko..], dim as isize, 1,
                );
                // softmax backward per row
                for r in 0..lq {
                    let p = &probs[r * lk..(r + 1) * lk];
                    let dp = &dprobs[r * lk..(r + 1) * lk];
                    let dot: f32 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
                    for j in 0..lk {
                        dscores[r * lk + j] = p[j] * (dp[j] - dot);
                    }
                }
                // dq_h += scale * dscores · k_h ; dk_h += scale * dscoresᵀ · q_h
                gemm(
                    lq, lk, dh,
                    scale, &dscores, lk as isize, 1,
                    &cache.k.data()[ko..], dim as isize, 1,
                    1.0, &mut dq.data_mut()[qo..], dim as isize, 1,
                );
                gemm(
                    lk, lq, dh,
                    scale, &dscores, 1, lk as isize,
                    &cache.q.data()[qo..], dim as isize, 1,
                    1.0, &mut dk.data_mut()[ko..], dim as isize, 1,
                );
            }
        }
        let dx = self.wq.backward(&dq);
        let mut dctx = self.wk.backward(&dk);
        dctx.add_assign(&self.wv.backward(&dv));
        (dx, dctx)
    }
}

impl Params for MultiHeadAttention {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.wq.visit_params(&super::join(prefix, "wq"), out);
        self.wk.visit_params(&super::join(prefix, "wk"), out);
        self.wv.visit_params(&super::join(prefix, "wv"), out);
        self.wo.visit_params(&super::join(prefix, "wo"), out);
    }
}
