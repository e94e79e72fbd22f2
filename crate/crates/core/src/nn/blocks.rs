//! Composite blocks shared by the autoencoder and both U-Nets.

use super::attention::MultiHeadAttention;
use super::conv::Conv2d;
use super::linear::{Embedding, Linear};
use super::norm::{GroupNorm, LayerNorm};
use super::ops::{add_channel_bias, channel_bias_grad, silu, silu_backward, timestep_embedding, upsample_nearest2x, upsample_nearest2x_backward};
use super::param::{join, Param, Params};
use super::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

pub const GN_GROUPS: usize = 8;

/// [n,c,h,w] -> [n, h*w, c]
pub fn nchw_to_nlc(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4().unwrap();
    let plane = h * w;
    let mut y = Tensor::zeros(&[n, plane, c]);
    for i in 0..n {
        for ch in 0..c {
            for p in 0..plane {
                y.data_mut()[(i * plane + p) * c + ch] = x.data()[(i * c + ch) * plane + p];
            }
        }
    }
    y
}

/// [n, l, c] -> [n, c, h, w] with l == h*w
pub fn nlc_to_nchw(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, l, c) = x.dims3().unwrap();
    assert_eq!(l, h * w);
    let mut y = Tensor::zeros(&[n, c, h, w]);
    for i in 0..n {
        for ch in 0..c {
            for p in 0..l {
                y.data_mut()[(i * c + ch) * l + p] = x.data()[(i * l + p) * c + ch];
            }
        }
    }
    y
}

/// Two 3×3 convs with GroupNorm/SiLU and a residual connection.
pub struct ConvBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    cache: Option<(Tensor, Tensor)>, // pre-SiLU activations
}

impl ConvBlock {
    pub fn new(in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            gn1: GroupNorm::new(GN_GROUPS, in_c),
            conv1: Conv2d::new(in_c, out_c, 3, 1, 1, rng),
            gn2: GroupNorm::new(GN_GROUPS, out_c),
            conv2: Conv2d::new(out_c, out_c, 3, 1, 1, rng),
            skip: (in_c != out_c).then(|| Conv2d::new(in_c, out_c, 1, 1, 0, rng)),
            cache: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let a = self.gn1.forward(x);
        let h = self.conv1.forward(&silu(&a));
        let b = self.gn2.forward(&h);
        let mut y = self.conv2.forward(&silu(&b));
        match &self.skip {
            Some(s) => y.add_assign(&s.forward(x)),
            None => y.add_assign(x),
        }
        y
    }

    pub fn forward_t(&mut self, x: &Tensor) -> Tensor {
        let a = self.gn1.forward_t(x);
        let h = self.conv1.forward_t(&silu(&a));
        let b = self.gn2.forward_t(&h);
        let mut y = self.conv2.forward_t(&silu(&b));
        match &mut self.skip {
            Some(s) => y.add_assign(&s.forward_t(x)),
            None => y.add_assign(x),
        }
        self.cache = Some((a, b));
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (a, b) = self.cache.take().expect("convblock backward without forward_t");
        let db = self.conv2.backward(dy);
        let dh = self.gn2.backward(&silu_backward(&b, &db));
        let da = self.conv1.backward(&dh);
        let mut dx = self.gn1.backward(&silu_backward(&a, &da));
        match &mut self.skip {
            Some(s) => dx.add_assign(&s.backward(dy)),
            None => dx.add_assign(dy),
        }
        dx
    }
}

impl Params for ConvBlock {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.gn1.visit_params(&join(prefix, "gn1"), out);
        self.conv1.visit_params(&join(prefix, "conv1"), out);
        self.gn2.visit_params(&join(prefix, "gn2"), out);
        self.conv2.visit_params(&join(prefix, "conv2"), out);
        if let Some(s) = &mut self.skip {
            s.visit_params(&join(prefix, "skip"), out);
        }
    }
}

/// ConvBlock with an additive timestep-embedding projection after conv1.
pub struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    cache: Option<(Tensor, Tensor, Tensor)>, // (a, b, temb)
}

impl ResBlock {
    pub fn new(in_c: usize, out_c: usize, time_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            gn1: GroupNorm::new(GN_GROUPS, in_c),
            conv1: Conv2d::new(in_c, out_c, 3, 1, 1, rng),
            time_proj: Linear::new(time_dim, out_c, rng),
            gn2: GroupNorm::new(GN_GROUPS, out_c),
            conv2: Conv2d::new(out_c, out_c, 3, 1, 1, rng),
            skip: (in_c != out_c).then(|| Conv2d::new(in_c, out_c, 1, 1, 0, rng)),
            cache: None,
        }
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Tensor {
        let a = self.gn1.forward(x);
        let mut h = self.conv1.forward(&silu(&a));
        add_channel_bias(&mut h, &self.time_proj.forward(&silu(temb)));
        let b = self.gn2.forward(&h);
        let mut y = self.conv2.forward(&silu(&b));
        match &self.skip {
            Some(s) => y.add_assign(&s.forward(x)),
            None => y.add_assign(x),
        }
        y
    }

    pub fn forward_t(&mut self, x: &Tensor, temb: &Tensor) -> Tensor {
        let a = self.gn1.forward_t(x);
        let mut h = self.conv1.forward_t(&silu(&a));
        add_channel_bias(&mut h, &self.time_proj.forward_t(&silu(temb)));
        let b = self.gn2.forward_t(&h);
        let mut y = self.conv2.forward_t(&silu(&b));
        match &mut self.skip {
            Some(s) => y.add_assign(&s.forward_t(x)),
            None => y.add_assign(x),
        }
        self.cache = Some((a, b, temb.clone()));
        y
    }

    /// Returns (dx, dtemb).
    pub fn backward(&mut self, dy: &Tensor) -> (Tensor, Tensor) {
        let (a, b, temb) = self.cache.take().expect("resblock backward without forward_t");
        let db = self.conv2.backward(dy);
        let dh = self.gn2.backward(&silu_backward(&b, &db));
        let dtv = self.time_proj.backward(&channel_bias_grad(&dh));
        let dtemb = silu_backward(&temb, &dtv);
        let da = self.conv1.backward(&dh);
        let mut dx = self.gn1.backward(&silu_backward(&a, &da));
        match &mut self.skip {
            Some(s) => dx.add_assign(&s.backward(dy)),
            None => dx.add_assign(dy),
        }
        (dx, dtemb)
    }
}

impl Params for ResBlock {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.gn1.visit_params(&join(prefix, "gn1"), out);
        self.conv1.visit_params(&join(prefix, "conv1"), out);
        self.time_proj.visit_params(&join(prefix, "time_proj"), out);
        self.gn2.visit_params(&join(prefix, "gn2"), out);
        self.conv2.visit_params(&join(prefix, "conv2"), out);
        if let Some(s) = &mut self.skip {
            s.visit_params(&join(prefix, "skip"), out);
        }
    }
}

/// Strided 3×3 conv halving the spatial size.
pub struct Downsample {
    conv: Conv2d,
}

impl Downsample {
    pub fn new(in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        Downsample {
            conv: Conv2d::new(in_c, out_c, 3, 2, 1, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.conv.forward(x)
    }

    pub fn forward_t(&mut self, x: &Tensor) -> Tensor {
        self.conv.forward_t(x)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        self.conv.backward(dy)
    }
}

impl Params for Downsample {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv.visit_params(&join(prefix, "conv"), out);
    }
}

/// Nearest-neighbor 2× upsample followed by a 3×3 conv.
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new(in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        Upsample {
            conv: Conv2d::new(in_c, out_c, 3, 1, 1, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.conv.forward(&upsample_nearest2x(x))
    }

    pub fn forward_t(&mut self, x: &Tensor) -> Tensor {
        self.conv.forward_t(&upsample_nearest2x(x))
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        upsample_nearest2x_backward(&self.conv.backward(dy))
    }
}

impl Params for Upsample {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv.visit_params(&join(prefix, "conv"), out);
    }
}

/// GroupNorm → flatten → cross-attention over a text context → residual.
pub struct SpatialCrossAttn {
    gn: GroupNorm,
    attn: MultiHeadAttention,
    hw: (usize, usize),
}

impl SpatialCrossAttn {
    pub fn new(c: usize, ctx_dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        SpatialCrossAttn {
            gn: GroupNorm::new(GN_GROUPS, c),
            attn: MultiHeadAttention::new(c, ctx_dim, heads, rng),
            hw: (0, 0),
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &Tensor, key_mask: Option<&[u8]>) -> Tensor {
        let (_, _, h, w) = x.dims4().unwrap();
        let a = self.gn.forward(x);
        let o = self.attn.forward(&nchw_to_nlc(&a), ctx, key_mask);
        let mut y = nlc_to_nchw(&o, h, w);
        y.add_assign(x);
        y
    }

    pub fn forward_t(&mut self, x: &Tensor, ctx: &Tensor, key_mask: Option<&[u8]>) -> Tensor {
        let (_, _, h, w) = x.dims4().unwrap();
        self.hw = (h, w);
        let a = self.gn.forward_t(x);
        let o = self.attn.forward_t(&nchw_to_nlc(&a), ctx, key_mask);
        let mut y = nlc_to_nchw(&o, h, w);
        y.add_assign(x);
        y
    }

    /// Returns (dx, dctx).
    pub fn backward(&mut self, dy: &Tensor) -> (Tensor, Tensor) {
        let (h, w) = self.hw;
        let (dseq, dctx) = self.attn.backward(&nchw_to_nlc(dy));
        let mut dx = self.gn.backward(&nlc_to_nchw(&dseq, h, w));
        dx.add_assign(dy);
        (dx, dctx)
    }
}

impl Params for SpatialCrossAttn {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.gn.visit_params(&join(prefix, "gn"), out);
        self.attn.visit_params(&join(prefix, "attn"), out);
    }
}

/// Sinusoidal timestep features through a two-layer MLP.
pub struct TimeEmbed {
    pub dim: usize,
    l1: Linear,
    l2: Linear,
    cache: Option<Tensor>,
}

impl TimeEmbed {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        TimeEmbed {
            dim,
            l1: Linear::new(dim, dim, rng),
            l2: Linear::new(dim, dim, rng),
            cache: None,
        }
    }

    pub fn forward(&self, ts: &[usize]) -> Tensor {
        let e = timestep_embedding(ts, self.dim);
        self.l2.forward(&silu(&self.l1.forward(&e)))
    }

    pub fn forward_t(&mut self, ts: &[usize]) -> Tensor {
        let e = timestep_embedding(ts, self.dim);
        let h = self.l1.forward_t(&e);
        let y = self.l2.forward_t(&silu(&h));
        self.cache = Some(h);
        y
    }

    pub fn backward(&mut self, dtemb: &Tensor) {
        let h = self.cache.take().expect("timeembed backward without forward_t");
        let dh = self.l2.backward(dtemb);
        self.l1.backward(&silu_backward(&h, &dh));
    }
}

impl Params for TimeEmbed {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.l1.visit_params(&join(prefix, "l1"), out);
        self.l2.visit_params(&join(prefix, "l2"), out);
    }
}

struct TextBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    cache: Option<Tensor>, // MLP pre-SiLU
}

impl TextBlock {
    fn new(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        TextBlock {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, dim, heads, rng),
            ln2: LayerNorm::new(dim),
            fc1: Linear::new(dim, dim * 2, rng),
            fc2: Linear::new(dim * 2, dim, rng),
            cache: None,
        }
    }

    fn forward(&self, x: &Tensor, mask: &[u8]) -> Tensor {
        let a = self.ln1.forward(x);
        let mut x1 = self.attn.forward(&a, &a, Some(mask));
        x1.add_assign(x);
        let b = self.ln2.forward(&x1);
        let mut y = self.fc2.forward(&silu(&self.fc1.forward(&b)));
        y.add_assign(&x1);
        y
    }

    fn forward_t(&mut self, x: &Tensor, mask: &[u8]) -> Tensor {
        let a = self.ln1.forward_t(x);
        let mut x1 = self.attn.forward_t(&a, &a, Some(mask));
        x1.add_assign(x);
        let b = self.ln2.forward_t(&x1);
        let h = self.fc1.forward_t(&b);
        let mut y = self.fc2.forward_t(&silu(&h));
        y.add_assign(&x1);
        self.cache = Some(h);
        y
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let h = self.cache.take().expect("textblock backward without forward_t");
        let dh = self.fc2.backward(dy);
        let db = self.fc1.backward(&silu_backward(&h, &dh));
        let mut dx1 = self.ln2.backward(&db);
        dx1.add_assign(dy);
        let (dq, dkv) = self.attn.backward(&dx1);
        let mut da = dq;
        da.add_assign(&dkv);
        let mut dx = self.ln1.backward(&da);
        dx.add_assign(&dx1);
        dx
    }
}

impl Params for TextBlock {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.ln1.visit_params(&join(prefix, "ln1"), out);
        self.attn.visit_params(&join(prefix, "attn"), out);
        self.ln2.visit_params(&join(prefix, "ln2"), out);
        self.fc1.visit_params(&join(prefix, "fc1"), out);
        self.fc2.visit_params(&join(prefix, "fc2"), out);
    }
}

/// Token embedding plus learned positions, two self-attention blocks, and a
/// final LayerNorm. Emits the context sequence and a key-padding mask.
pub struct TextEncoder {
    pub dim: usize,
    pub max_len: usize,
    tok: Embedding,
    pos: Param,
    blocks: Vec<TextBlock>,
    ln_f: LayerNorm,
    cache_n: usize,
}

impl TextEncoder {
    pub fn new(vocab: usize, dim: usize, max_len: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        TextEncoder {
            dim,
            max_len,
            tok: Embedding::new(vocab, dim, rng),
            pos: Param::randn(&[max_len, dim], 0.02, rng),
            blocks: (0..2).map(|_| TextBlock::new(dim, heads, rng)).collect(),
            ln_f: LayerNorm::new(dim),
            cache_n: 0,
        }
    }

    pub fn key_mask(ids: &[usize]) -> Vec<u8> {
        ids.iter().map(|&t| (t != 0) as u8).collect()
    }

    fn add_pos(&self, x: &mut Tensor, n: usize) {
        for i in 0..n {
            for (j, v) in x.data_mut()[i * self.max_len * self.dim..(i + 1) * self.max_len * self.dim]
                .iter_mut()
                .enumerate()
            {
                *v += self.pos.w[j];
            }
        }
    }

    /// ids laid out [n * max_len]; returns (context [n, max_len, dim], key mask).
    pub fn forward(&self, ids: &[usize]) -> (Tensor, Vec<u8>) {
        let n = ids.len() / self.max_len;
        let mask = Self::key_mask(ids);
        let mut x = self.tok.forward(ids, n, self.max_len);
        self.add_pos(&mut x, n);
        for b in &self.blocks {
            x = b.forward(&x, &mask);
        }
        (self.ln_f.forward(&x), mask)
    }

    pub fn forward_t(&mut self, ids: &[usize]) -> (Tensor, Vec<u8>) {
        let n = ids.len() / self.max_len;
        self.cache_n = n;
        let mask = Self::key_mask(ids);
        let mut x = self.tok.forward_t(ids, n, self.max_len);
        self.add_pos(&mut x, n);
        for b in &mut self.blocks {
            x = b.forward_t(&x, &mask);
        }
        (self.ln_f.forward_t(&x), mask)
    }

    pub fn backward(&mut self, dctx: &Tensor) {
        let mut dx = self.ln_f.backward(dctx);
        for b in self.blocks.iter_mut().rev() {
            dx = b.backward(&dx);
        }
        for i in 0..self.cache_n {
            for (j, g) in self.pos.g.iter_mut().enumerate() {
                *g += dx.data()[i * self.max_len * self.dim + j];
            }
        }
        self.tok.backward(&dx);
    }
}

impl Params for TextEncoder {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.tok.visit_params(&join(prefix, "tok"), out);
        out.push((join(prefix, "pos"), &mut self.pos));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("block{i}")), out);
        }
        self.ln_f.visit_params(&join(prefix, "ln_f"), out);
    }
}
