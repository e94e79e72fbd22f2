//! Stage-2 semantic-aware image editor: a text-conditioned inpainting
//! diffusion model over rendered images (pixel space, 64×64), plus a
//! trainable copy of its encoder and middle blocks that consumes the
//! palette-encoded semantic map and feeds back through zero convolutions.
//!
//! Channel layout of the denoiser input, fixed across training and
//! sampling: [noisy image (3) ; masked reference (3) ; edit-region mask (1)].

use crate::diffusion_core::{self, sample_loop, EpsModel, NoiseSchedule, SamplerSpec};
use crate::error::{Error, Result};
use crate::nn::ops::{silu, silu_backward};
use crate::nn::{
    join, zero_grads, AdamW, AdamWConfig, Conv2d, Downsample, GroupNorm, Param, Params, ResBlock,
    SpatialCrossAttn, Tensor, TextEncoder, TimeEmbed, Upsample,
};
use crate::rng::{fnv1a64, rng_from_seed};
use crate::semantic_maps::{mask_support, palette_encode, Mask, Palette, SemanticMap};
use crate::synth_dataset::captions::{empty_ids, Vocabulary, MAX_TOKENS};
use crate::synth_dataset::render::Image;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaseEditConfig {
    pub widths: [usize; 3],
    pub head_width: usize,
    pub text_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
}

impl Default for BaseEditConfig {
    fn default() -> Self {
        BaseEditConfig {
            widths: [64, 128, 256],
            head_width: 32,
            text_dim: 128,
            heads: 4,
            vocab_size: Vocabulary::default_vocab().len(),
        }
    }
}

impl BaseEditConfig {
    pub const IN_CHANNELS: usize = 7;

    pub fn arch_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

/// Inpainting conditioning: masked reference, hole mask, caption tokens.
pub struct EditCond {
    /// [n, 3, H, W], reference with the edit region zeroed.
    pub masked_ref: Tensor,
    /// [n, 1, H, W], 1 inside the region to repaint.
    pub hole: Tensor,
    /// n × MAX_TOKENS caption ids.
    pub text_ids: Vec<usize>,
}

struct DecoderGrads {
    g_mid: Tensor,
    g_d2: Tensor,
    g_d1: Tensor,
    g_d0: Tensor,
    dtemb: Tensor,
    dctx: Tensor,
}

/// Zero-conv outputs added to the frozen base's skip connections.
struct ControlAdds {
    d0: Tensor,
    d1: Tensor,
    d2: Tensor,
    mid: Tensor,
}

pub struct BaseEditNet {
    pub cfg: BaseEditConfig,
    text: TextEncoder,
    time: TimeEmbed,
    stem: Conv2d,
    down0: ResBlock,
    down01: Downsample,
    down1: ResBlock,
    attn1: SpatialCrossAttn,
    down12: Downsample,
    down2: ResBlock,
    attn2: SpatialCrossAttn,
    mid1: ResBlock,
    mid_attn: SpatialCrossAttn,
    mid2: ResBlock,
    up2: ResBlock,
    up_attn2: SpatialCrossAttn,
    up21: Upsample,
    up1: ResBlock,
    up_attn1: SpatialCrossAttn,
    up10: Upsample,
    up0: ResBlock,
    head_up: Upsample,
    head_gn: GroupNorm,
    head_conv: Conv2d,
    cache: Option<Tensor>,
}

impl BaseEditNet {
    pub fn new(cfg: BaseEditConfig, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let [w0, w1, w2] = cfg.widths;
        let td = cfg.text_dim;
        BaseEditNet {
            text: TextEncoder::new(cfg.vocab_size, td, MAX_TOKENS, cfg.heads, &mut rng),
            time: TimeEmbed::new(td, &mut rng),
            stem: Conv2d::new(BaseEditConfig::IN_CHANNELS, w0, 3, 2, 1, &mut rng),
            down0: ResBlock::new(w0, w0, td, &mut rng),
            down01: Downsample::new(w0, w1, &mut rng),
            down1: ResBlock::new(w1, w1, td, &mut rng),
            attn1: SpatialCrossAttn::new(w1, td, cfg.heads, &mut rng),
            down12: Downsample::new(w1, w2, &mut rng),
            down2: ResBlock::new(w2, w2, td, &mut rng),
            attn2: SpatialCrossAttn::new(w2, td, cfg.heads, &mut rng),
            mid1: ResBlock::new(w2, w2, td, &mut rng),
            mid_attn: SpatialCrossAttn::new(w2, td, cfg.heads, &mut rng),
            mid2: ResBlock::new(w2, w2, td, &mut rng),
            up2: ResBlock::new(2 * w2, w2, td, &mut rng),
            up_attn2: SpatialCrossAttn::new(w2, td, cfg.heads, &mut rng),
            up21: Upsample::new(w2, w1, &mut rng),
            up1: ResBlock::new(2 * w1, w1, td, &mut rng),
            up_attn1: SpatialCrossAttn::new(w1, td, cfg.heads, &mut rng),
            up10: Upsample::new(w1, w0, &mut rng),
            up0: ResBlock::new(2 * w0, w0, td, &mut rng),
            head_up: Upsample::new(w0, cfg.head_width, &mut rng),
            head_gn: GroupNorm::new(8, cfg.head_width),
            head_conv: Conv2d::new(cfg.head_width, 3, 3, 1, 1, &mut rng),
            cfg,
            cache: None,
        }
    }

    pub fn arch_hash(&self) -> String {
        self.cfg.arch_hash()
    }

    fn gamma(z_t: &Tensor, cond: &EditCond) -> Tensor {
        Tensor::cat_channels(&Tensor::cat_channels(z_t, &cond.masked_ref), &cond.hole)
    }

    fn forward_inner(
        &self,
        gamma: &Tensor,
        ctx: &Tensor,
        kmask: &[u8],
        temb: &Tensor,
        adds: Option<&ControlAdds>,
    ) -> Tensor {
        let zero = |t: &Tensor| Tensor::zeros(t.dims());
        let h = self.stem.forward(gamma);
        let mut d0 = self.down0.forward(&h, temb);
        let h = self.down01.forward(&d0);
        let mut d1 = self.attn1.forward(&self.down1.forward(&h, temb), ctx, Some(kmask));
        let h = self.down12.forward(&d1);
        let mut d2 = self.attn2.forward(&self.down2.forward(&h, temb), ctx, Some(kmask));
        let h = self.mid1.forward(&d2, temb);
        let h = self.mid_attn.forward(&h, ctx, Some(kmask));
        let mut mid = self.mid2.forward(&h, temb);
        if let Some(a) = adds {
            let _ = zero;
            d0.add_assign(&a.d0);
            d1.add_assign(&a.d1);
            d2.add_assign(&a.d2);
            mid.add_assign(&a.mid);
        }
        let h = self.up2.forward(&Tensor::cat_channels(&mid, &d2), temb);
        let h = self.up_attn2.forward(&h, ctx, Some(kmask));
        let h = self.up21.forward(&h);
        let h = self.up1.forward(&Tensor::cat_channels(&h, &d1), temb);
        let h = self.up_attn1.forward(&h, ctx, Some(kmask));
        let h = self.up10.forward(&h);
        let h = self.up0.forward(&Tensor::cat_channels(&h, &d0), temb);
        let h = self.head_up.forward(&h);
        self.head_conv.forward(&silu(&self.head_gn.forward(&h)))
    }

    /// Inference forward of the frozen base alone.
    pub fn predict(&self, z_t: &Tensor, cond: &EditCond, ts: &[usize]) -> Tensor {
        let (ctx, kmask) = self.text.forward(&cond.text_ids);
        let temb = self.time.forward(ts);
        self.forward_inner(&Self::gamma(z_t, cond), &ctx, &kmask, &temb, None)
    }

    /// Inference forward with the control branch attached.
    pub fn predict_controlled(
        &self,
        branch: &ControlBranch,
        z_t: &Tensor,
        cond: &EditCond,
        c_m: &Tensor,
        ts: &[usize],
    ) -> Tensor {
        let (ctx, kmask) = self.text.forward(&cond.text_ids);
        let temb = self.time.forward(ts);
        let gamma = Self::gamma(z_t, cond);
        let adds = branch.forward(&gamma, c_m, &ctx, &kmask, &temb);
        self.forward_inner(&gamma, &ctx, &kmask, &temb, Some(&adds))
    }

    fn forward_train_inner(
        &mut self,
        gamma: &Tensor,
        ctx: &Tensor,
        kmask: &[u8],
        temb: &Tensor,
        adds: Option<&ControlAdds>,
    ) -> Tensor {
        let h = self.stem.forward_t(gamma);
        let mut d0 = self.down0.forward_t(&h, temb);
        let h = self.down01.forward_t(&d0);
        let mut d1 = self.attn1.forward_t(&self.down1.forward_t(&h, temb), ctx, Some(kmask));
        let h = self.down12.forward_t(&d1);
        let mut d2 = self.attn2.forward_t(&self.down2.forward_t(&h, temb), ctx, Some(kmask));
        let h = self.mid1.forward_t(&d2, temb);
        let h = self.mid_attn.forward_t(&h, ctx, Some(kmask));
        let mut mid = self.mid2.forward_t(&h, temb);
        if let Some(a) = adds {
            d0.add_assign(&a.d0);
            d1.add_assign(&a.d1);
            d2.add_assign(&a.d2);
            mid.add_assign(&a.mid);
        }
        let h = self.up2.forward_t(&Tensor::cat_channels(&mid, &d2), temb);
        let h = self.up_attn2.forward_t(&h, ctx, Some(kmask));
        let h = self.up21.forward_t(&h);
        let h = self.up1.forward_t(&Tensor::cat_channels(&h, &d1), temb);
        let h = self.up_attn1.forward_t(&h, ctx, Some(kmask));
        let h = self.up10.forward_t(&h);
        let h = self.up0.forward_t(&Tensor::cat_channels(&h, &d0), temb);
        let h = self.head_up.forward_t(&h);
        let a = self.head_gn.forward_t(&h);
        let y = self.head_conv.forward_t(&silu(&a));
        self.cache = Some(a);
        y
    }

    /// Backward through the decoder half; stops at the four insertion
    /// points (the skip connections and the middle output).
    fn backward_decoder(&mut self, d_eps: &Tensor) -> DecoderGrads {
        let [w0, w1, w2] = self.cfg.widths;
        let a = self.cache.take().expect("base backward without forward");
        let g = self.head_conv.backward(d_eps);
        let g = self.head_gn.backward(&silu_backward(&a, &g));
        let g = self.head_up.backward(&g);
        let (g, mut dtemb) = self.up0.backward(&g);
        let (g, g_d0) = g.split_channels(w0);
        let g = self.up10.backward(&g);
        let (g, mut dctx) = self.up_attn1.backward(&g);
        let (g, dt) = self.up1.backward(&g);
        dtemb.add_assign(&dt);
        let (g, g_d1) = g.split_channels(w1);
        let g = self.up21.backward(&g);
        let (g, dc) = self.up_attn2.backward(&g);
        dctx.add_assign(&dc);
        let (g, dt) = self.up2.backward(&g);
        dtemb.add_assign(&dt);
        let (g_mid, g_d2) = g.split_channels(w2);
        DecoderGrads {
            g_mid,
            g_d2,
            g_d1,
            g_d0,
            dtemb,
            dctx,
        }
    }

    /// Backward through the encoder half and the embedders (base training).
    fn backward_encoder(&mut self, grads: DecoderGrads) {
        let DecoderGrads {
            g_mid,
            mut g_d2,
            mut g_d1,
            mut g_d0,
            mut dtemb,
            mut dctx,
        } = grads;
        let (g, dt) = self.mid2.backward(&g_mid);
        dtemb.add_assign(&dt);
        let (g, dc) = self.mid_attn.backward(&g);
        dctx.add_assign(&dc);
        let (g, dt) = self.mid1.backward(&g);
        dtemb.add_assign(&dt);
        g_d2.add_assign(&g);
        let (g, dc) = self.attn2.backward(&g_d2);
        dctx.add_assign(&dc);
        let (g, dt) = self.down2.backward(&g);
        dtemb.add_assign(&dt);
        g_d1.add_assign(&self.down12.backward(&g));
        let (g, dc) = self.attn1.backward(&g_d1);
        dctx.add_assign(&dc);
        let (g, dt) = self.down1.backward(&g);
        dtemb.add_assign(&dt);
        g_d0.add_assign(&self.down01.backward(&g));
        let (g, dt) = self.down0.backward(&g_d0);
        dtemb.add_assign(&dt);
        self.stem.backward(&g);
        self.time.backward(&dtemb);
        self.text.backward(&dctx);
    }
}

impl Params for BaseEditNet {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.text.visit_params(&join(prefix, "text"), out);
        self.time.visit_params(&join(prefix, "time"), out);
        self.stem.visit_params(&join(prefix, "stem"), out);
        self.down0.visit_params(&join(prefix, "down0"), out);
        self.down01.visit_params(&join(prefix, "down01"), out);
        self.down1.visit_params(&join(prefix, "down1"), out);
        self.attn1.visit_params(&join(prefix, "attn1"), out);
        self.down12.visit_params(&join(prefix, "down12"), out);
        self.down2.visit_params(&join(prefix, "down2"), out);
        self.attn2.visit_params(&join(prefix, "attn2"), out);
        self.mid1.visit_params(&join(prefix, "mid1"), out);
        self.mid_attn.visit_params(&join(prefix, "mid_attn"), out);
        self.mid2.visit_params(&join(prefix, "mid2"), out);
        self.up2.visit_params(&join(prefix, "up2"), out);
        self.up_attn2.visit_params(&join(prefix, "up_attn2"), out);
        self.up21.visit_params(&join(prefix, "up21"), out);
        self.up1.visit_params(&join(prefix, "up1"), out);
        self.up_attn1.visit_params(&join(prefix, "up_attn1"), out);
        self.up10.visit_params(&join(prefix, "up10"), out);
        self.up0.visit_params(&join(prefix, "up0"), out);
        self.head_up.visit_params(&join(prefix, "head_up"), out);
        self.head_gn.visit_params(&join(prefix, "head_gn"), out);
        self.head_conv.visit_params(&join(prefix, "head_conv"), out);
    }
}

impl EpsModel for BaseEditNet {
    type Cond = EditCond;

    fn predict_train(&mut self, z_t: &Tensor, cond: &EditCond, ts: &[usize]) -> Tensor {
        let (ctx, kmask) = self.text.forward_t(&cond.text_ids);
        let temb = self.time.forward_t(ts);
        let gamma = Self::gamma(z_t, cond);
        self.forward_train_inner(&gamma, &ctx, &kmask, &temb, None)
    }

    fn backward(&mut self, d_eps: &Tensor) {
        let grads = self.backward_decoder(d_eps);
        self.backward_encoder(grads);
    }
}

/// Trainable copy of the base encoder and middle blocks, a 4-conv hint
/// encoder for the palette-encoded map, and zero convolutions on every
/// block output. All zero convs start exactly zero, so the conditioned
/// model equals the frozen base at initialization.
pub struct ControlBranch {
    stem: Conv2d,
    down0: ResBlock,
    down01: Downsample,
    down1: ResBlock,
    attn1: SpatialCrossAttn,
    down12: Downsample,
    down2: ResBlock,
    attn2: SpatialCrossAttn,
    mid1: ResBlock,
    mid_attn: SpatialCrossAttn,
    mid2: ResBlock,
    hint1: Conv2d,
    hint2: Conv2d,
    hint3: Conv2d,
    hint4: Conv2d,
    zc0: Conv2d,
    zc1: Conv2d,
    zc2: Conv2d,
    zc_mid: Conv2d,
    hint_cache: Option<(Tensor, Tensor, Tensor)>,
}

impl ControlBranch {
    fn fresh(cfg: &BaseEditConfig, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let [w0, w1, w2] = cfg.widths;
        let td = cfg.text_dim;
        ControlBranch {
            stem: Conv2d::new(BaseEditConfig::IN_CHANNELS, w0, 3, 2, 1, &mut rng),
            down0: ResBlock::new(w0, w0, td, &mut rng),
            down01: Downsample::new(w0, w1, &mut rng),
            down1: ResBlock::new(w1, w1, td, &mut rng),
            attn1: SpatialCrossAttn::new(w1, td, cfg.heads, &mut rng),
            down12: Downsample::new(w1, w2, &mut rng),
            down2: ResBlock::new(w2, w2, td, &mut rng),
            attn2: SpatialCrossAttn::new(w2, td, cfg.heads, &mut rng),
            mid1: ResBlock::new(w2, w2, td, &mut rng),
            mid_attn: SpatialCrossAttn::new(w2, td, cfg.heads, &mut rng),
            mid2: ResBlock::new(w2, w2, td, &mut rng),
            hint1: Conv2d::new(3, 16, 3, 1, 1, &mut rng),
            hint2: Conv2d::new(16, 32, 3, 2, 1, &mut rng),
            hint3: Conv2d::new(32, w0, 3, 1, 1, &mut rng),
            hint4: Conv2d::new_zeroed(w0, w0, 3, 1, 1),
            zc0: Conv2d::new_zeroed(w0, w0, 1, 1, 0),
            zc1: Conv2d::new_zeroed(w1, w1, 1, 1, 0),
            zc2: Conv2d::new_zeroed(w2, w2, 1, 1, 0),
            zc_mid: Conv2d::new_zeroed(w2, w2, 1, 1, 0),
            hint_cache: None,
        }
    }

    fn copied_pairs<'a>(
        base: &'a mut BaseEditNet,
    ) -> Vec<(String, &'a mut Param)> {
        let mut out = Vec::new();
        base.stem.visit_params("stem", &mut out);
        base.down0.visit_params("down0", &mut out);
        base.down01.visit_params("down01", &mut out);
        base.down1.visit_params("down1", &mut out);
        base.attn1.visit_params("attn1", &mut out);
        base.down12.visit_params("down12", &mut out);
        base.down2.visit_params("down2", &mut out);
        base.attn2.visit_params("attn2", &mut out);
        base.mid1.visit_params("mid1", &mut out);
        base.mid_attn.visit_params("mid_attn", &mut out);
        base.mid2.visit_params("mid2", &mut out);
        out
    }

    fn copy_targets(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.stem.visit_params("stem", &mut out);
        self.down0.visit_params("down0", &mut out);
        self.down01.visit_params("down01", &mut out);
        self.down1.visit_params("down1", &mut out);
        self.attn1.visit_params("attn1", &mut out);
        self.down12.visit_params("down12", &mut out);
        self.down2.visit_params("down2", &mut out);
        self.attn2.visit_params("attn2", &mut out);
        self.mid1.visit_params("mid1", &mut out);
        self.mid_attn.visit_params("mid_attn", &mut out);
        self.mid2.visit_params("mid2", &mut out);
        out
    }

    fn hint_forward(&self, c_m: &Tensor) -> Tensor {
        let h = silu(&self.hint1.forward(c_m));
        let h = silu(&self.hint2.forward(&h));
        let h = silu(&self.hint3.forward(&h));
        self.hint4.forward(&h)
    }

    fn hint_forward_t(&mut self, c_m: &Tensor) -> Tensor {
        let a1 = self.hint1.forward_t(c_m);
        let a2 = self.hint2.forward_t(&silu(&a1));
        let a3 = self.hint3.forward_t(&silu(&a2));
        let y = self.hint4.forward_t(&silu(&a3));
        self.hint_cache = Some((a1, a2, a3));
        y
    }

    fn hint_backward(&mut self, dy: &Tensor) {
        let (a1, a2, a3) = self.hint_cache.take().expect("hint backward without forward");
        let d = self.hint4.backward(dy);
        let d = self.hint3.backward(&silu_backward(&a3, &d));
        let d = self.hint2.backward(&silu_backward(&a2, &d));
        self.hint1.backward(&silu_backward(&a1, &d));
    }

    fn forward(&self, gamma: &Tensor, c_m: &Tensor, ctx: &Tensor, kmask: &[u8], temb: &Tensor) -> ControlAdds {
        let mut h = self.stem.forward(gamma);
        h.add_assign(&self.hint_forward(c_m));
        let d0 = self.down0.forward(&h, temb);
        let h = self.down01.forward(&d0);
        let d1 = self.attn1.forward(&self.down1.forward(&h, temb), ctx, Some(kmask));
        let h = self.down12.forward(&d1);
        let d2 = self.attn2.forward(&self.down2.forward(&h, temb), ctx, Some(kmask));
        let h = self.mid1.forward(&d2, temb);
        let h = self.mid_attn.forward(&h, ctx, Some(kmask));
        let mid = self.mid2.forward(&h, temb);
        ControlAdds {
            d0: self.zc0.forward(&d0),
            d1: self.zc1.forward(&d1),
            d2: self.zc2.forward(&d2),
            mid: self.zc_mid.forward(&mid),
        }
    }

    fn forward_t(&mut self, gamma: &Tensor, c_m: &Tensor, ctx: &Tensor, kmask: &[u8], temb: &Tensor) -> ControlAdds {
        let mut h = self.stem.forward_t(gamma);
        h.add_assign(&self.hint_forward_t(c_m));
        let d0 = self.down0.forward_t(&h, temb);
        let h = self.down01.forward_t(&d0);
        let d1 = self.attn1.forward_t(&self.down1.forward_t(&h, temb), ctx, Some(kmask));
        let h = self.down12.forward_t(&d1);
        let d2 = self.attn2.forward_t(&self.down2.forward_t(&h, temb), ctx, Some(kmask));
        let h = self.mid1.forward_t(&d2, temb);
        let h = self.mid_attn.forward_t(&h, ctx, Some(kmask));
        let mid = self.mid2.forward_t(&h, temb);
        ControlAdds {
            d0: self.zc0.forward_t(&d0),
            d1: self.zc1.forward_t(&d1),
            d2: self.zc2.forward_t(&d2),
            mid: self.zc_mid.forward_t(&mid),
        }
    }

    /// Backward from the insertion-point gradients; text/time gradients
    /// are discarded (those modules belong to the frozen base).
    fn backward(&mut self, grads: &DecoderGrads) {
        let dbmid = self.zc_mid.backward(&grads.g_mid);
        let mut dbd2 = self.zc2.backward(&grads.g_d2);
        let mut dbd1 = self.zc1.backward(&grads.g_d1);
        let mut dbd0 = self.zc0.backward(&grads.g_d0);
        let (g, _) = self.mid2.backward(&dbmid);
        let (g, _) = self.mid_attn.backward(&g);
        let (g, _) = self.mid1.backward(&g);
        dbd2.add_assign(&g);
        let (g, _) = self.attn2.backward(&dbd2);
        let (g, _) = self.down2.backward(&g);
        dbd1.add_assign(&self.down12.backward(&g));
        let (g, _) = self.attn1.backward(&dbd1);
        let (g, _) = self.down1.backward(&g);
        dbd0.add_assign(&self.down01.backward(&g));
        let (g, _) = self.down0.backward(&dbd0);
        self.hint_backward(&g);
        self.stem.backward(&g);
    }
}

impl Params for ControlBranch {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.stem.visit_params(&join(prefix, "stem"), out);
        self.down0.visit_params(&join(prefix, "down0"), out);
        self.down01.visit_params(&join(prefix, "down01"), out);
        self.down1.visit_params(&join(prefix, "down1"), out);
        self.attn1.visit_params(&join(prefix, "attn1"), out);
        self.down12.visit_params(&join(prefix, "down12"), out);
        self.down2.visit_params(&join(prefix, "down2"), out);
        self.attn2.visit_params(&join(prefix, "attn2"), out);
        self.mid1.visit_params(&join(prefix, "mid1"), out);
        self.mid_attn.visit_params(&join(prefix, "mid_attn"), out);
        self.mid2.visit_params(&join(prefix, "mid2"), out);
        self.hint1.visit_params(&join(prefix, "hint1"), out);
        self.hint2.visit_params(&join(prefix, "hint2"), out);
        self.hint3.visit_params(&join(prefix, "hint3"), out);
        self.hint4.visit_params(&join(prefix, "hint4"), out);
        self.zc0.visit_params(&join(prefix, "zc0"), out);
        self.zc1.visit_params(&join(prefix, "zc1"), out);
        self.zc2.visit_params(&join(prefix, "zc2"), out);
        self.zc_mid.visit_params(&join(prefix, "zc_mid"), out);
    }
}

/// Copy the base's encoder and middle blocks into a fresh branch; zero
/// convolutions make the combined model act exactly like the base.
pub fn make_control_branch(base: &mut BaseEditNet, seed: u64) -> ControlBranch {
    let cfg = base.cfg.clone();
    let mut branch = ControlBranch::fresh(&cfg, seed);
    let src = ControlBranch::copied_pairs(base);
    let mut dst = branch.copy_targets();
    assert_eq!(src.len(), dst.len());
    for ((sn, sp), (dn, dp)) in src.iter().zip(dst.iter_mut()) {
        assert_eq!(sn, dn, "copy order drift");
        assert_eq!(sp.dims, dp.dims);
        dp.w.copy_from_slice(&sp.w);
    }
    branch
}

// ---- training ----

/// Rectangular hole covering 10-50% of the canvas.
pub fn random_hole(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Mask {
    let area_frac = rng.random_range(0.10..=0.50);
    let aspect = rng.random_range(0.5..=2.0f64);
    let target = area_frac * (w * h) as f64;
    let hw = ((target * aspect).sqrt().round() as usize).clamp(2, w);
    let hh = ((target / hw as f64).round() as usize).clamp(2, h);
    let x0 = rng.random_range(0..=w - hw);
    let y0 = rng.random_range(0..=h - hh);
    Mask::from_fn(w, h, |x, y| x >= x0 && x < x0 + hw && y >= y0 && y < y0 + hh)
}

fn mask_to_tensor(m: &Mask) -> Tensor {
    Tensor::from_vec(
        &[1, m.height(), m.width()],
        m.data().iter().map(|&v| v as f32).collect(),
    )
}

fn apply_hole(image: &Tensor, hole: &Mask) -> Tensor {
    let dims = image.dims();
    let (h, w) = (dims[1], dims[2]);
    let plane = h * w;
    let mut out = image.clone();
    for c in 0..3 {
        for p in 0..plane {
            if hole.data()[p] != 0 {
                out.data_mut()[c * plane + p] = 0.0;
            }
        }
    }
    out
}

/// A rendered training sample: image tensor, its semantic map, caption.
pub struct EditExample {
    pub image: Tensor,
    pub map: SemanticMap,
    pub caption_ids: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct EditTrainOpts {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
    pub cfg_dropout: f64,
    pub log_every: usize,
}

impl Default for EditTrainOpts {
    fn default() -> Self {
        EditTrainOpts {
            steps: 8000,
            batch: 4,
            lr: 1e-4,
            warmup: 500,
            seed: 3,
            cfg_dropout: 0.1,
            log_every: 50,
        }
    }
}

fn batch_holes(
    examples: &[EditExample],
    picks: &[usize],
    holes: &[Mask],
    cfg_dropout: f64,
    rng: &mut ChaCha8Rng,
) -> (Tensor, EditCond) {
    let dims = examples[picks[0]].image.dims().to_vec();
    let per = examples[picks[0]].image.numel();
    let (h, w) = (dims[1], dims[2]);
    let mut z0 = Tensor::zeros(&[vec![picks.len()], dims].concat());
    let mut masked = z0.clone();
    let mut hole_t = Tensor::zeros(&[picks.len(), 1, h, w]);
    let mut ids = Vec::with_capacity(picks.len() * MAX_TOKENS);
    for (i, &pi) in picks.iter().enumerate() {
        let ex = &examples[pi];
        z0.data_mut()[i * per..(i + 1) * per].copy_from_slice(ex.image.data());
        let m = apply_hole(&ex.image, &holes[i]);
        masked.data_mut()[i * per..(i + 1) * per].copy_from_slice(m.data());
        hole_t.data_mut()[i * h * w..(i + 1) * h * w]
            .copy_from_slice(mask_to_tensor(&holes[i]).data());
        if rng.random_bool(cfg_dropout) {
            ids.extend_from_slice(&empty_ids());
        } else {
            ids.extend_from_slice(&ex.caption_ids);
        }
    }
    (
        z0,
        EditCond {
            masked_ref: masked,
            hole: hole_t,
            text_ids: ids,
        },
    )
}

/// Self-supervised inpainting pretraining of the base model with random
/// rectangular holes.
pub fn train_base(
    model: &mut BaseEditNet,
    examples: &[EditExample],
    schedule: &NoiseSchedule,
    opts: &EditTrainOpts,
) -> Result<Vec<(usize, f32)>> {
    if opts.steps > 0 && examples.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: opts.lr,
        warmup_steps: opts.warmup,
        ..Default::default()
    });
    let mut rng = rng_from_seed(opts.seed);
    let mut curve = Vec::new();
    for step in 0..opts.steps {
        let picks: Vec<usize> = (0..opts.batch).map(|_| rng.random_range(0..examples.len())).collect();
        let dims = examples[picks[0]].image.dims();
        let holes: Vec<Mask> = (0..opts.batch).map(|_| random_hole(dims[2], dims[1], &mut rng)).collect();
        let (z0, cond) = batch_holes(examples, &picks, &holes, opts.cfg_dropout, &mut rng);
        let loss = diffusion_core::training_step(model, &z0, &cond, schedule, &mut opt, &mut rng)?;
        if step % opts.log_every == 0 || step + 1 == opts.steps {
            curve.push((step, loss));
        }
    }
    Ok(curve)
}

/// Train the control branch against the frozen base: holes are the
/// support of a randomly chosen attribute and the branch sees the
/// palette-encoded map.
pub fn train_control(
    base: &mut BaseEditNet,
    branch: &mut ControlBranch,
    examples: &[EditExample],
    palette: &Palette,
    schedule: &NoiseSchedule,
    opts: &EditTrainOpts,
) -> Result<Vec<(usize, f32)>> {
    if opts.steps > 0 && examples.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: opts.lr,
        warmup_steps: opts.warmup,
        ..Default::default()
    });
    let mut rng = rng_from_seed(opts.seed);
    let mut curve = Vec::new();
    for step in 0..opts.steps {
        let picks: Vec<usize> = (0..opts.batch).map(|_| rng.random_range(0..examples.len())).collect();
        let dims = examples[picks[0]].image.dims();
        let holes: Vec<Mask> = picks
            .iter()
            .map(|&pi| class_region_hole(&examples[pi].map, &mut rng))
            .collect();
        let (z0, cond) = batch_holes(examples, &picks, &holes, opts.cfg_dropout, &mut rng);
        let mut c_m = Tensor::zeros(&[picks.len(), 3, dims[1], dims[2]]);
        let per = 3 * dims[1] * dims[2];
        for (i, &pi) in picks.iter().enumerate() {
            c_m.data_mut()[i * per..(i + 1) * per]
                .copy_from_slice(palette_encode(&examples[pi].map, palette).data());
        }

        // draw (t, eps) and take a step on the branch only
        let (n, _, _, _) = z0.dims4()?;
        let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.t_count())).collect();
        let mut eps = Tensor::zeros(z0.dims());
        for v in eps.data_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let z_t = diffusion_core::q_sample(&z0, &ts, &eps, schedule)?;

        let (ctx, kmask) = base.text.forward_t(&cond.text_ids);
        let temb = base.time.forward_t(&ts);
        let gamma = BaseEditNet::gamma(&z_t, &cond);
        let adds = branch.forward_t(&gamma, &c_m, &ctx, &kmask, &temb);
        let eps_hat = base.forward_train_inner(&gamma, &ctx, &kmask, &temb, Some(&adds));
        let loss = diffusion_core::eps_loss(&eps, &eps_hat);
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!("non-finite loss {loss}"),
            });
        }
        let mut d = eps_hat.sub(&eps);
        d.scale(2.0 / eps.numel() as f32);
        zero_grads(base);
        zero_grads(branch);
        let grads = base.backward_decoder(&d);
        branch.backward(&grads);
        let mut params = branch.named_params();
        opt.step(&mut params);
        if step % opts.log_every == 0 || step + 1 == opts.steps {
            curve.push((step, loss));
        }
    }
    Ok(curve)
}

/// Visible support of a randomly chosen non-background class; falls back
/// to a random rectangle when the map is background-only.
fn class_region_hole(map: &SemanticMap, rng: &mut ChaCha8Rng) -> Mask {
    let hist = map.histogram();
    let present: Vec<u8> = (1..map.class_count() as u8).filter(|&c| hist[c as usize] > 0).collect();
    if present.is_empty() {
        return random_hole(map.width(), map.height(), rng);
    }
    let class = present[rng.random_range(0..present.len())];
    mask_support(map, class)
}

// ---- end-to-end image editing ----

pub struct EditImageOut {
    pub image: Image,
    pub edit_region: Mask,
    /// True when the maps were identical and the reference was returned.
    pub noop: bool,
}

/// Repaint the region where the semantic maps differ (dilated by 2),
/// conditioned on the new map; pixels outside the region are copied
/// verbatim from the reference.
#[allow(clippy::too_many_arguments)]
pub fn edit_image(
    base: &BaseEditNet,
    branch: &ControlBranch,
    reference: &Image,
    s_old: &SemanticMap,
    s_new: &SemanticMap,
    caption_ids: &[usize],
    palette: &Palette,
    spec: &SamplerSpec,
    schedule: &NoiseSchedule,
) -> Result<EditImageOut> {
    if s_old.width() != s_new.width() || s_old.height() != s_new.height() {
        return Err(Error::Shape("old/new maps differ in size".into()));
    }
    if reference.width != s_old.width() || reference.height != s_old.height() {
        return Err(Error::Shape("reference image does not match the maps".into()));
    }
    let (w, h) = (s_old.width(), s_old.height());
    let mut diff = Mask::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            if s_old.get(x, y) != s_new.get(x, y) {
                diff.set(x, y, true);
            }
        }
    }
    if diff.is_empty() {
        return Ok(EditImageOut {
            image: reference.clone(),
            edit_region: diff,
            noop: true,
        });
    }
    let region = diff.dilate(2);

    let ref_t = reference.to_tensor();
    let masked = apply_hole(&ref_t, &region);
    let cond = EditCond {
        masked_ref: batch1(&masked),
        hole: batch1(&mask_to_tensor(&region)),
        text_ids: caption_ids.to_vec(),
    };
    let uncond = EditCond {
        masked_ref: cond.masked_ref.clone(),
        hole: cond.hole.clone(),
        text_ids: empty_ids(),
    };
    let c_m = batch1(&palette_encode(s_new, palette));
    let mut model_fn = |z: &Tensor, c: &EditCond, t: usize| -> Result<Tensor> {
        Ok(base.predict_controlled(branch, z, c, &c_m, &[t]))
    };
    let z0 = sample_loop(&mut model_fn, &cond, &uncond, spec, schedule, &[1, 3, h, w])?;
    let generated = Image::from_tensor(&z0.reshape(&[3, h, w]));

    // composite: generated inside the region, reference outside, bit-exact
    let mut rgb = reference.rgb.clone();
    for p in 0..w * h {
        if region.data()[p] != 0 {
            rgb[p * 3..p * 3 + 3].copy_from_slice(&generated.rgb[p * 3..p * 3 + 3]);
        }
    }
    Ok(EditImageOut {
        image: Image {
            width: w,
            height: h,
            rgb,
        },
        edit_region: region,
        noop: false,
    })
}

fn batch1(t: &Tensor) -> Tensor {
    let mut dims = vec![1];
    dims.extend_from_slice(t.dims());
    t.clone().reshape(&dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param_fingerprint;
    use crate::semantic_maps::CLASS_COUNT;
    use crate::synth_dataset::captions::tokenize;

    fn tiny_cfg() -> BaseEditConfig {
        BaseEditConfig {
            widths: [16, 24, 32],
            head_width: 16,
            text_dim: 16,
            heads: 2,
            vocab_size: Vocabulary::default_vocab().len(),
        }
    }

    fn tiny_examples(n: usize) -> Vec<EditExample> {
        let mut rng = rng_from_seed(55);
        let vocab = Vocabulary::default_vocab();
        (0..n)
            .map(|i| {
                let mut labels = vec![0u8; 32 * 32];
                for (p, l) in labels.iter_mut().enumerate() {
                    if (p / 32 + i) % 5 == 0 {
                        *l = 1;
                    }
                    if p % 7 == 0 {
                        *l = 2;
                    }
                }
                EditExample {
                    image: Tensor::randn(&[3, 32, 32], &mut rng),
                    map: SemanticMap::new(32, 32, labels, CLASS_COUNT).unwrap(),
                    caption_ids: tokenize("long hair medium face", &vocab).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn zero_conv_init_equivalence() {
        let mut base = BaseEditNet::new(tiny_cfg(), 4);
        let branch = make_control_branch(&mut base, 9);
        let mut rng = rng_from_seed(6);
        let vocab = Vocabulary::default_vocab();
        let cond = EditCond {
            masked_ref: Tensor::randn(&[1, 3, 32, 32], &mut rng),
            hole: Tensor::randn(&[1, 1, 32, 32], &mut rng),
            text_ids: tokenize("wavy hair", &vocab).unwrap(),
        };
        for i in 0..5 {
            let z = Tensor::randn(&[1, 3, 32, 32], &mut rng);
            let c_m = Tensor::randn(&[1, 3, 32, 32], &mut rng);
            let plain = base.predict(&z, &cond, &[100 + i]);
            let ctl = base.predict_controlled(&branch, &z, &cond, &c_m, &[100 + i]);
            assert!(ctl.max_abs_diff(&plain) <= 1e-6);
        }
    }

    #[test]
    fn branch_copies_base_blocks() {
        let mut base = BaseEditNet::new(tiny_cfg(), 4);
        let mut branch = make_control_branch(&mut base, 9);
        let src = ControlBranch::copied_pairs(&mut base);
        let mut dst = branch.copy_targets();
        for ((_, sp), (_, dp)) in src.iter().zip(dst.iter_mut()) {
            assert_eq!(sp.w, dp.w);
        }
    }

    #[test]
    fn train_control_freezes_base_and_moves_zero_convs() {
        let mut base = BaseEditNet::new(tiny_cfg(), 4);
        let mut branch = make_control_branch(&mut base, 9);
        let examples = tiny_examples(4);
        let schedule = crate::diffusion_core::make_schedule(40, 1e-3, 0.02).unwrap();
        let pal = Palette::default_palette();
        let before = param_fingerprint(&mut base);
        let zc_before = crate::rng::hash_f32s(&branch.zc_mid.weight.w);
        let opts = EditTrainOpts {
            steps: 4,
            batch: 2,
            lr: 1e-3,
            warmup: 0,
            cfg_dropout: 0.0,
            ..Default::default()
        };
        let curve = train_control(&mut base, &mut branch, &examples, &pal, &schedule, &opts).unwrap();
        assert!(!curve.is_empty());
        assert_eq!(param_fingerprint(&mut base), before, "base moved");
        assert_ne!(crate::rng::hash_f32s(&branch.zc_mid.weight.w), zc_before, "zero conv stayed zero");
    }

    #[test]
    fn base_training_step_runs_and_is_deterministic() {
        let schedule = crate::diffusion_core::make_schedule(40, 1e-3, 0.02).unwrap();
        let opts = EditTrainOpts {
            steps: 4,
            batch: 2,
            lr: 1e-4,
            warmup: 0,
            cfg_dropout: 0.5,
            log_every: 1,
            ..Default::default()
        };
        let run = || {
            let mut base = BaseEditNet::new(tiny_cfg(), 4);
            train_base(&mut base, &tiny_examples(3), &schedule, &opts).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().all(|(_, l)| l.is_finite()));
    }

    #[test]
    fn random_holes_are_in_bounds() {
        let mut rng = rng_from_seed(3);
        for _ in 0..50 {
            let m = random_hole(32, 32, &mut rng);
            let frac = m.count_ones() as f64 / (32.0 * 32.0);
            assert!(frac > 0.05 && frac < 0.6, "hole fraction {frac}");
        }
    }

    #[test]
    fn edit_image_noop_and_composite() {
        let mut base = BaseEditNet::new(tiny_cfg(), 4);
        let branch = make_control_branch(&mut base, 9);
        let schedule = crate::diffusion_core::make_schedule(20, 1e-3, 0.02).unwrap();
        let spec = SamplerSpec::new(4, 1.5, 11);
        let pal = Palette::default_palette();
        let vocab = Vocabulary::default_vocab();
        let caption = tokenize("medium face", &vocab).unwrap();

        let mut labels = vec![0u8; 32 * 32];
        for l in labels.iter_mut().take(300) {
            *l = 1;
        }
        let s_old = SemanticMap::new(32, 32, labels.clone(), CLASS_COUNT).unwrap();
        let reference = Image {
            width: 32,
            height: 32,
            rgb: (0..32 * 32 * 3).map(|i| (i % 251) as u8).collect(),
        };

        // identical maps → exact reference, noop flag
        let out = edit_image(&base, &branch, &reference, &s_old, &s_old, &caption, &pal, &spec, &schedule).unwrap();
        assert!(out.noop);
        assert_eq!(out.image, reference);

        // a real edit repaints only the dilated diff region
        labels[40] = 2;
        labels[41] = 2;
        let s_new = SemanticMap::new(32, 32, labels, CLASS_COUNT).unwrap();
        let out = edit_image(&base, &branch, &reference, &s_old, &s_new, &caption, &pal, &spec, &schedule).unwrap();
        assert!(!out.noop);
        for p in 0..32 * 32 {
            if out.edit_region.data()[p] == 0 {
                assert_eq!(&out.image.rgb[p * 3..p * 3 + 3], &reference.rgb[p * 3..p * 3 + 3]);
            }
        }
        // deterministic per seed
        let out2 = edit_image(&base, &branch, &reference, &s_old, &s_new, &caption, &pal, &spec, &schedule).unwrap();
        assert_eq!(out.image, out2.image);
    }

    #[test]
    fn zero_conv_gets_gradient_after_one_step() {
        let mut base = BaseEditNet::new(tiny_cfg(), 4);
        let mut branch = make_control_branch(&mut base, 9);
        let examples = tiny_examples(2);
        let schedule = crate::diffusion_core::make_schedule(40, 1e-3, 0.02).unwrap();
        let pal = Palette::default_palette();
        let opts = EditTrainOpts {
            steps: 1,
            batch: 2,
            lr: 1e-3,
            warmup: 0,
            cfg_dropout: 0.0,
            ..Default::default()
        };
        train_control(&mut base, &mut branch, &examples, &pal, &schedule, &opts).unwrap();
        // after exactly one step only the zero convs can move (their
        // upstream gradient is killed by their own zero weights)
        let zc_sum: f32 = branch.zc0.weight.w.iter().map(|v| v.abs()).sum::<f32>()
            + branch.zc_mid.weight.w.iter().map(|v| v.abs()).sum::<f32>();
        assert!(zc_sum > 0.0, "zero convs did not receive gradient");
    }
}
