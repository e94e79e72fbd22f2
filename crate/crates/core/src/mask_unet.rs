//! Stage-1 denoiser: a text- and map-conditioned U-Net over 4-channel
//! latents. The spatial input is the concatenation [z_t ; E(S)], consumed
//! by a first conv whose map channels start as zero-initialized
//! extensions, so at init the map latent is invisible. Includes the
//! conv_in-only insertion fine-tune and end-to-end mask generation.

use crate::autoencoder::MaskAwareAutoencoder;
use crate::diffusion_core::{self, sample_loop, EpsModel, NoiseSchedule, SamplerSpec};
use crate::error::{Error, Result};
use crate::nn::ops::{silu, silu_backward};
use crate::nn::{
    join, zero_grads, AdamW, AdamWConfig, Conv2d, Downsample, GroupNorm, Param, Params, ResBlock,
    SpatialCrossAttn, Tensor, TextEncoder, TimeEmbed, Upsample,
};
use crate::rng::{fnv1a64, rng_from_seed};
use crate::semantic_maps::{
    mask_support, palette_decode, palette_encode, Mask, Palette, SemanticMap, CLASS_COUNT,
    CLASS_NAMES,
};
use crate::synth_dataset::captions::{empty_ids, tokenize, Vocabulary, MAX_TOKENS};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskUNetConfig {
    pub latent_channels: usize,
    pub widths: [usize; 3],
    pub text_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
}

impl Default for MaskUNetConfig {
    fn default() -> Self {
        MaskUNetConfig {
            latent_channels: 4,
            widths: [64, 128, 256],
            text_dim: 128,
            heads: 4,
            vocab_size: Vocabulary::default_vocab().len(),
        }
    }
}

impl MaskUNetConfig {
    pub fn in_channels(&self) -> usize {
        2 * self.latent_channels
    }

    pub fn arch_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

/// Conditioning for one batch: the encoded map latents and token ids.
pub struct MaskCond {
    /// [n, latent_channels, h, w]
    pub map_latent: Tensor,
    /// n × MAX_TOKENS token ids, flattened.
    pub text_ids: Vec<usize>,
}

pub struct MaskUNet {
    pub cfg: MaskUNetConfig,
    text: TextEncoder,
    time: TimeEmbed,
    pub conv_in: Conv2d,
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
    out_gn: GroupNorm,
    out_conv: Conv2d,
    cache: Option<Tensor>, // out_gn pre-SiLU
}

impl MaskUNet {
    pub fn new(cfg: MaskUNetConfig, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let [w0, w1, w2] = cfg.widths;
        let td = cfg.text_dim;
        // first conv is built for the latent alone, then widened with
        // zero-initialized kernels for the map channels
        let mut conv_in = Conv2d::new(cfg.latent_channels, w0, 3, 1, 1, &mut rng);
        conv_in.extend_in_channels(cfg.latent_channels);
        MaskUNet {
            text: TextEncoder::new(cfg.vocab_size, td, MAX_TOKENS, cfg.heads, &mut rng),
            time: TimeEmbed::new(td, &mut rng),
            conv_in,
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
            out_gn: GroupNorm::new(8, w0),
            out_conv: Conv2d::new(w0, cfg.latent_channels, 3, 1, 1, &mut rng),
            cfg,
            cache: None,
        }
    }

    /// Deterministic inference forward on γ = [z_t ; map_latent].
    pub fn predict(&self, z_t: &Tensor, cond: &MaskCond, ts: &[usize]) -> Tensor {
        let (ctx, kmask) = self.text.forward(&cond.text_ids);
        let temb = self.time.forward(ts);
        let gamma = Tensor::cat_channels(z_t, &cond.map_latent);
        let h0 = self.conv_in.forward(&gamma);
        let d0 = self.down0.forward(&h0, &temb);
        let h = self.down01.forward(&d0);
        let d1 = self.attn1.forward(&self.down1.forward(&h, &temb), &ctx, Some(&kmask));
        let h = self.down12.forward(&d1);
        let d2 = self.attn2.forward(&self.down2.forward(&h, &temb), &ctx, Some(&kmask));
        let h = self.mid1.forward(&d2, &temb);
        let h = self.mid_attn.forward(&h, &ctx, Some(&kmask));
        let h = self.mid2.forward(&h, &temb);
        let h = self.up2.forward(&Tensor::cat_channels(&h, &d2), &temb);
        let h = self.up_attn2.forward(&h, &ctx, Some(&kmask));
        let h = self.up21.forward(&h);
        let h = self.up1.forward(&Tensor::cat_channels(&h, &d1), &temb);
        let h = self.up_attn1.forward(&h, &ctx, Some(&kmask));
        let h = self.up10.forward(&h);
        let h = self.up0.forward(&Tensor::cat_channels(&h, &d0), &temb);
        self.out_conv.forward(&silu(&self.out_gn.forward(&h)))
    }

    pub fn arch_hash(&self) -> String {
        self.cfg.arch_hash()
    }
}

impl Params for MaskUNet {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.text.visit_params(&join(prefix, "text"), out);
        self.time.visit_params(&join(prefix, "time"), out);
        self.conv_in.visit_params(&join(prefix, "conv_in"), out);
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
        self.out_gn.visit_params(&join(prefix, "out_gn"), out);
        self.out_conv.visit_params(&join(prefix, "out_conv"), out);
    }
}

impl EpsModel for MaskUNet {
    type Cond = MaskCond;

    fn predict_train(&mut self, z_t: &Tensor, cond: &MaskCond, ts: &[usize]) -> Tensor {
        let (ctx, kmask) = self.text.forward_t(&cond.text_ids);
        let temb = self.time.forward_t(ts);
        let gamma = Tensor::cat_channels(z_t, &cond.map_latent);
        let h0 = self.conv_in.forward_t(&gamma);
        let d0 = self.down0.forward_t(&h0, &temb);
        let h = self.down01.forward_t(&d0);
        let d1 = self.attn1.forward_t(&self.down1.forward_t(&h, &temb), &ctx, Some(&kmask));
        let h = self.down12.forward_t(&d1);
        let d2 = self.attn2.forward_t(&self.down2.forward_t(&h, &temb), &ctx, Some(&kmask));
        let h = self.mid1.forward_t(&d2, &temb);
        let h = self.mid_attn.forward_t(&h, &ctx, Some(&kmask));
        let h = self.mid2.forward_t(&h, &temb);
        let h = self.up2.forward_t(&Tensor::cat_channels(&h, &d2), &temb);
        let h = self.up_attn2.forward_t(&h, &ctx, Some(&kmask));
        let h = self.up21.forward_t(&h);
        let h = self.up1.forward_t(&Tensor::cat_channels(&h, &d1), &temb);
        let h = self.up_attn1.forward_t(&h, &ctx, Some(&kmask));
        let h = self.up10.forward_t(&h);
        let h = self.up0.forward_t(&Tensor::cat_channels(&h, &d0), &temb);
        let a = self.out_gn.forward_t(&h);
        let y = self.out_conv.forward_t(&silu(&a));
        self.cache = Some(a);
        y
    }

    fn backward(&mut self, d_eps: &Tensor) {
        let [w0, w1, w2] = self.cfg.widths;
        let a = self.cache.take().expect("unet backward without forward");
        let g = self.out_conv.backward(d_eps);
        let g = self.out_gn.backward(&silu_backward(&a, &g));

        let (g, mut dtemb) = self.up0.backward(&g);
        let (g, mut dd0) = g.split_channels(w0);
        let g = self.up10.backward(&g);
        let (g, dctx0) = self.up_attn1.backward(&g);
        let mut dctx = dctx0;
        let (g, dt) = self.up1.backward(&g);
        dtemb.add_assign(&dt);
        let (g, mut dd1) = g.split_channels(w1);
        let g = self.up21.backward(&g);
        let (g, dc) = self.up_attn2.backward(&g);
        dctx.add_assign(&dc);
        let (g, dt) = self.up2.backward(&g);
        dtemb.add_assign(&dt);
        let (g, mut dd2) = g.split_channels(w2);

        let (g, dt) = self.mid2.backward(&g);
        dtemb.add_assign(&dt);
        let (g, dc) = self.mid_attn.backward(&g);
        dctx.add_assign(&dc);
        let (g, dt) = self.mid1.backward(&g);
        dtemb.add_assign(&dt);
        dd2.add_assign(&g);

        let (g, dc) = self.attn2.backward(&dd2);
        dctx.add_assign(&dc);
        let (g, dt) = self.down2.backward(&g);
        dtemb.add_assign(&dt);
        let g = self.down12.backward(&g);
        dd1.add_assign(&g);

        let (g, dc) = self.attn1.backward(&dd1);
        dctx.add_assign(&dc);
        let (g, dt) = self.down1.backward(&g);
        dtemb.add_assign(&dt);
        let g = self.down01.backward(&g);
        dd0.add_assign(&g);

        let (g, dt) = self.down0.backward(&dd0);
        dtemb.add_assign(&dt);
        self.conv_in.backward(&g);

        self.time.backward(&dtemb);
        self.text.backward(&dctx);
    }
}

/// New kernel = concat along the input-channel axis of the base kernel
/// and zeros; bias unchanged. The widened conv ignores the extra
/// channels entirely until trained.
pub fn extend_conv_in(conv: &mut Conv2d, extra: usize) {
    conv.extend_in_channels(extra);
}

// ---- training ----

/// One prepared training example: standardized target latent, the
/// conditioning map latent, and edit-text token ids.
pub struct PairExample {
    pub z0: Tensor,
    pub cond_latent: Tensor,
    pub text_ids: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct MaskDiffTrainOpts {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
    pub cfg_dropout: f64,
    pub log_every: usize,
}

impl Default for MaskDiffTrainOpts {
    fn default() -> Self {
        MaskDiffTrainOpts {
            steps: 15_000,
            batch: 16,
            lr: 1e-5,
            warmup: 500,
            seed: 2,
            cfg_dropout: 0.1,
            log_every: 50,
        }
    }
}

fn assemble_batch(
    examples: &[PairExample],
    picks: &[usize],
    cfg_dropout: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Tensor, MaskCond) {
    let per = examples[picks[0]].z0.numel();
    let dims = examples[picks[0]].z0.dims();
    let mut z0 = Tensor::zeros(&[vec![picks.len()], dims.to_vec()].concat());
    let mut lat = z0.clone();
    let mut ids = Vec::with_capacity(picks.len() * MAX_TOKENS);
    for (i, &pi) in picks.iter().enumerate() {
        let ex = &examples[pi];
        z0.data_mut()[i * per..(i + 1) * per].copy_from_slice(ex.z0.data());
        lat.data_mut()[i * per..(i + 1) * per].copy_from_slice(ex.cond_latent.data());
        // classifier-free guidance dropout: replace the text with EMPTY
        if rng.random_bool(cfg_dropout) {
            ids.extend_from_slice(&empty_ids());
        } else {
            ids.extend_from_slice(&ex.text_ids);
        }
    }
    (
        z0,
        MaskCond {
            map_latent: lat,
            text_ids: ids,
        },
    )
}

/// Full-parameter training on leave-one-out pairs.
pub fn train_mask_model(
    model: &mut MaskUNet,
    examples: &[PairExample],
    schedule: &NoiseSchedule,
    opts: &MaskDiffTrainOpts,
) -> Result<Vec<(usize, f32)>> {
    if opts.steps > 0 && examples.is_empty() {
        return Err(Error::Config("empty pair set".into()));
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
        let (z0, cond) = assemble_batch(examples, &picks, opts.cfg_dropout, &mut rng);
        let loss = diffusion_core::training_step(model, &z0, &cond, schedule, &mut opt, &mut rng)?;
        if step % opts.log_every == 0 || step + 1 == opts.steps {
            curve.push((step, loss));
        }
    }
    Ok(curve)
}

/// conv_in-only fine-tune on insertion pairs; every other parameter block
/// stays bit-identical.
pub fn finetune_insertion(
    model: &mut MaskUNet,
    examples: &[PairExample],
    schedule: &NoiseSchedule,
    opts: &MaskDiffTrainOpts,
) -> Result<Vec<(usize, f32)>> {
    if opts.steps > 0 && examples.is_empty() {
        return Err(Error::Config("empty insertion set".into()));
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: opts.lr,
        warmup_steps: opts.warmup,
        ..Default::default()
    });
    let mut rng = rng_from_seed(opts.seed);
    let mut curve = Vec::new();
    use rand_distr::{Distribution, StandardNormal};
    for step in 0..opts.steps {
        let picks: Vec<usize> = (0..opts.batch).map(|_| rng.random_range(0..examples.len())).collect();
        let (z0, cond) = assemble_batch(examples, &picks, opts.cfg_dropout, &mut rng);
        let (n, _, _, _) = z0.dims4()?;
        let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.t_count())).collect();
        let mut eps = Tensor::zeros(z0.dims());
        for v in eps.data_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let z_t = diffusion_core::q_sample(&z0, &ts, &eps, schedule)?;
        let eps_hat = model.predict_train(&z_t, &cond, &ts);
        let loss = diffusion_core::eps_loss(&eps, &eps_hat);
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!("non-finite loss {loss}"),
            });
        }
        let mut d = eps_hat.sub(&eps);
        d.scale(2.0 / eps.numel() as f32);
        zero_grads(model);
        model.backward(&d);
        let mut params = Vec::new();
        model.conv_in.visit_params("conv_in", &mut params);
        opt.step(&mut params);
        if step % opts.log_every == 0 || step + 1 == opts.steps {
            curve.push((step, loss));
        }
    }
    Ok(curve)
}

// ---- end-to-end mask generation ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditMode {
    Edit,
    Insert,
}

#[derive(Clone, Debug)]
pub struct EditTask {
    pub mode: EditMode,
    pub cond_map: SemanticMap,
    pub edit_text: String,
    pub user_mask: Option<Mask>,
    pub mask_aware_decode: bool,
}

/// Fraction of the canvas a "present" class may occupy and still be
/// treated as ignorable for insertion.
pub const INSERT_IGNORABLE_AREA: f64 = 0.01;

/// The edit text must name exactly one class.
pub fn resolve_target_class(edit_text: &str) -> Result<u8> {
    let mut found = None;
    for word in edit_text.split_whitespace() {
        if let Some(c) = CLASS_NAMES.iter().position(|n| *n == word) {
            if c == 0 {
                continue;
            }
            if found.is_some() && found != Some(c as u8) {
                return Err(Error::Vocabulary(format!(
                    "edit text {edit_text:?} names more than one class"
                )));
            }
            found = Some(c as u8);
        }
    }
    found.ok_or_else(|| {
        Error::Vocabulary(format!("edit text {edit_text:?} names no known class"))
    })
}

#[derive(Debug)]
pub struct GeneratedMask {
    pub map: SemanticMap,
    /// The gating mask used for mask-aware decoding (edit mode only).
    pub gate_mask: Option<Mask>,
    pub target_class: u8,
}

/// Standardization of latents shared by training and sampling.
#[derive(Clone, Copy, Debug)]
pub struct LatentStats {
    pub mean: f32,
    pub std: f32,
}

impl LatentStats {
    pub fn standardize(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for v in out.data_mut() {
            *v = (*v - self.mean) / self.std;
        }
        out
    }

    pub fn destandardize(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for v in out.data_mut() {
            *v = *v * self.std + self.mean;
        }
        out
    }
}

/// Mean/std over encoder latents of a data sample.
pub fn latent_stats(ae: &MaskAwareAutoencoder, sample: &[Tensor]) -> LatentStats {
    let mut acc = 0.0f64;
    let mut n = 0usize;
    let mut latents = Vec::new();
    for x in sample {
        let mut dims = vec![1];
        dims.extend_from_slice(x.dims());
        let l = ae.encode(&x.clone().reshape(&dims)).latent;
        acc += l.data().iter().map(|v| *v as f64).sum::<f64>();
        n += l.numel();
        latents.push(l);
    }
    let mean = acc / n as f64;
    let mut var = 0.0f64;
    for l in &latents {
        var += l.data().iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>();
    }
    let std = (var / n as f64).sqrt().max(1e-6);
    LatentStats {
        mean: mean as f32,
        std: std as f32,
    }
}

/// Run the reverse process and decode a new semantic map.
///
/// Edit mode decodes mask-aware by default, gated by the user mask or the
/// target class's support in the conditioning map; insert mode always
/// decodes plain (the plug-and-play policy), and asking for mask-aware
/// decoding there is an error.
#[allow(clippy::too_many_arguments)]
pub fn generate_mask(
    task: &EditTask,
    ae: &MaskAwareAutoencoder,
    unet: &MaskUNet,
    vocab: &Vocabulary,
    palette: &Palette,
    stats: LatentStats,
    spec: &SamplerSpec,
    schedule: &NoiseSchedule,
) -> Result<GeneratedMask> {
    let target = resolve_target_class(&task.edit_text)?;
    if task.mode == EditMode::Insert {
        if task.mask_aware_decode {
            return Err(Error::Policy(
                "insert mode must decode plain: mask-aware decoding is for edits".into(),
            ));
        }
        let support = mask_support(&task.cond_map, target);
        let frac = support.count_ones() as f64
            / (task.cond_map.width() * task.cond_map.height()) as f64;
        if frac > INSERT_IGNORABLE_AREA {
            return Err(Error::Policy(format!(
                "insert target {} already occupies {:.1}% of the map",
                CLASS_NAMES[target as usize],
                frac * 100.0
            )));
        }
    }
    let ids = tokenize(&task.edit_text, vocab)?;
    let x_cond = palette_encode(&task.cond_map, palette);
    let mut dims = vec![1];
    dims.extend_from_slice(x_cond.dims());
    let enc = ae.encode(&x_cond.clone().reshape(&dims));
    let map_latent = stats.standardize(&enc.latent);

    let cond = MaskCond {
        map_latent: map_latent.clone(),
        text_ids: ids,
    };
    let uncond = MaskCond {
        map_latent,
        text_ids: empty_ids(),
    };
    let shape = cond.map_latent.dims().to_vec();
    let mut model_fn = |z: &Tensor, c: &MaskCond, t: usize| -> Result<Tensor> {
        Ok(unet.predict(z, c, &[t]))
    };
    let z0 = sample_loop(&mut model_fn, &cond, &uncond, spec, schedule, &shape)?;
    let latent = stats.destandardize(&z0);

    let (decoded, gate_mask) = match task.mode {
        EditMode::Edit if task.mask_aware_decode => {
            let m = match &task.user_mask {
                Some(user) => user.clone(),
                None => mask_support(&task.cond_map, target),
            };
            (ae.decode_mask_aware(&latent, &enc, &m, true)?, Some(m))
        }
        _ => (ae.decode(&latent), None),
    };
    let (_, c, h, w) = decoded.dims4()?;
    let plane = decoded.clone().reshape(&[c, h, w]);
    let map = palette_decode(&plane, palette)?;
    Ok(GeneratedMask {
        map,
        gate_mask,
        target_class: target,
    })
}

/// Insertion success: the generated map contains the target class with
/// area at least `min_area` pixels.
pub fn insertion_success(map: &SemanticMap, target: u8, min_area: usize) -> bool {
    map.histogram()[target as usize] >= min_area.max(1)
}

/// Median amodal area per class over a corpus of pair samples.
pub fn class_area_medians(areas_by_class: &[Vec<usize>; CLASS_COUNT]) -> [usize; CLASS_COUNT] {
    let mut out = [0usize; CLASS_COUNT];
    for (c, v) in areas_by_class.iter().enumerate() {
        if v.is_empty() {
            continue;
        }
        let mut s = v.clone();
        s.sort_unstable();
        out[c] = s[s.len() / 2];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param_fingerprint;

    fn tiny_cfg() -> MaskUNetConfig {
        MaskUNetConfig {
            latent_channels: 4,
            widths: [16, 24, 32],
            text_dim: 16,
            heads: 2,
            vocab_size: Vocabulary::default_vocab().len(),
        }
    }

    fn rand_examples(n: usize, hw: usize) -> Vec<PairExample> {
        let mut rng = rng_from_seed(77);
        (0..n)
            .map(|_| PairExample {
                z0: Tensor::randn(&[4, hw, hw], &mut rng),
                cond_latent: Tensor::randn(&[4, hw, hw], &mut rng),
                text_ids: tokenize("long wavy hair", &Vocabulary::default_vocab()).unwrap(),
            })
            .collect()
    }

    #[test]
    fn extension_transparency_at_init() {
        // the widened first conv ignores the map channels entirely
        let model = MaskUNet::new(tiny_cfg(), 3);
        let mut rng = rng_from_seed(5);
        let z = Tensor::randn(&[1, 4, 8, 8], &mut rng);
        let ids = tokenize("long hair", &Vocabulary::default_vocab()).unwrap();
        let a = model.predict(
            &z,
            &MaskCond {
                map_latent: Tensor::randn(&[1, 4, 8, 8], &mut rng),
                text_ids: ids.clone(),
            },
            &[500],
        );
        let b = model.predict(
            &z,
            &MaskCond {
                map_latent: Tensor::randn(&[1, 4, 8, 8], &mut rng),
                text_ids: ids.clone(),
            },
            &[500],
        );
        let c = model.predict(
            &z,
            &MaskCond {
                map_latent: Tensor::zeros(&[1, 4, 8, 8]),
                text_ids: ids,
            },
            &[500],
        );
        assert!(a.max_abs_diff(&b) <= 1e-6);
        assert!(a.max_abs_diff(&c) <= 1e-6);
        assert!(a.is_finite());
    }

    #[test]
    fn conv_extension_algebra() {
        let mut rng = rng_from_seed(11);
        let base = Conv2d::new(4, 8, 3, 1, 1, &mut rng);
        let x = Tensor::randn(&[2, 4, 6, 6], &mut rng);
        let junk = Tensor::randn(&[2, 4, 6, 6], &mut rng);
        let want = base.forward(&x);
        let mut ext = Conv2d::new(4, 8, 3, 1, 1, &mut rng_from_seed(11));
        extend_conv_in(&mut ext, 4);
        let got = ext.forward(&Tensor::cat_channels(&x, &junk));
        assert_eq!(got, want);
        // extending by zero channels is the identity
        let before = ext.weight.w.clone();
        extend_conv_in(&mut ext, 0);
        assert_eq!(ext.weight.w, before);
    }

    #[test]
    fn extended_channels_receive_gradient() {
        let mut model = MaskUNet::new(tiny_cfg(), 3);
        let ex = rand_examples(2, 8);
        let schedule = crate::diffusion_core::make_schedule(50, 1e-3, 0.02).unwrap();
        let opts = MaskDiffTrainOpts {
            steps: 1,
            batch: 2,
            lr: 1e-3,
            warmup: 0,
            cfg_dropout: 0.0,
            ..Default::default()
        };
        train_mask_model(&mut model, &ex, &schedule, &opts).unwrap();
        // after one step the map-channel kernels must have moved
        let kk = 9;
        let row = 8 * kk;
        let mut moved = 0.0f32;
        for o in 0..model.cfg.widths[0] {
            for j in 4 * kk..8 * kk {
                moved += model.conv_in.weight.w[o * row + j].abs();
            }
        }
        assert!(moved > 0.0, "map-channel kernels stayed zero");
    }

    #[test]
    fn batch_independence() {
        let model = MaskUNet::new(tiny_cfg(), 9);
        let mut rng = rng_from_seed(30);
        let z = Tensor::randn(&[2, 4, 8, 8], &mut rng);
        let lat = Tensor::randn(&[2, 4, 8, 8], &mut rng);
        let v = Vocabulary::default_vocab();
        let mut ids = tokenize("long hair", &v).unwrap();
        ids.extend(tokenize("round eyeglasses", &v).unwrap());
        let y = model.predict(&z, &MaskCond { map_latent: lat.clone(), text_ids: ids.clone() }, &[3, 700]);
        // swap the two samples: outputs swap identically
        let swap = |t: &Tensor| {
            let per = t.numel() / 2;
            let mut d = t.data().to_vec();
            d.rotate_left(per);
            Tensor::from_vec(t.dims(), d)
        };
        let mut ids_sw = ids[MAX_TOKENS..].to_vec();
        ids_sw.extend_from_slice(&ids[..MAX_TOKENS]);
        let y_sw = model.predict(&swap(&z), &MaskCond { map_latent: swap(&lat), text_ids: ids_sw }, &[700, 3]);
        assert!(swap(&y).max_abs_diff(&y_sw) <= 2e-5);
    }

    #[test]
    fn finetune_touches_only_conv_in() {
        let mut model = MaskUNet::new(tiny_cfg(), 3);
        let ex = rand_examples(3, 8);
        let schedule = crate::diffusion_core::make_schedule(50, 1e-3, 0.02).unwrap();

        // fingerprint everything except conv_in
        let fp_rest = |m: &mut MaskUNet| {
            let mut out = Vec::new();
            m.visit_params("", &mut out);
            let mut h = 0u64;
            for (name, p) in out {
                if !name.starts_with("conv_in") {
                    h ^= crate::rng::hash_f32s(&p.w).wrapping_add(crate::rng::fnv1a64(name.as_bytes()));
                }
            }
            h
        };
        let before_rest = fp_rest(&mut model);
        let before_conv = crate::rng::hash_f32s(&model.conv_in.weight.w);
        let opts = MaskDiffTrainOpts {
            steps: 3,
            batch: 2,
            lr: 1e-3,
            warmup: 0,
            cfg_dropout: 0.0,
            ..Default::default()
        };
        finetune_insertion(&mut model, &ex, &schedule, &opts).unwrap();
        assert_eq!(fp_rest(&mut model), before_rest, "frozen parameters moved");
        assert_ne!(crate::rng::hash_f32s(&model.conv_in.weight.w), before_conv);

        // zero steps are the identity
        let mut model2 = MaskUNet::new(tiny_cfg(), 3);
        let fp = param_fingerprint(&mut model2);
        let opts0 = MaskDiffTrainOpts { steps: 0, ..opts };
        finetune_insertion(&mut model2, &ex, &schedule, &opts0).unwrap();
        assert_eq!(param_fingerprint(&mut model2), fp);
    }

    #[test]
    fn deterministic_rerun_reproduces_loss_curve() {
        let schedule = crate::diffusion_core::make_schedule(50, 1e-3, 0.02).unwrap();
        let opts = MaskDiffTrainOpts {
            steps: 8,
            batch: 2,
            lr: 1e-4,
            warmup: 0,
            cfg_dropout: 0.1,
            log_every: 1,
            ..Default::default()
        };
        let run = || {
            let mut model = MaskUNet::new(tiny_cfg(), 3);
            train_mask_model(&mut model, &rand_examples(4, 8), &schedule, &opts).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn target_class_resolution() {
        assert_eq!(resolve_target_class("long wavy hair").unwrap(), 2);
        assert_eq!(resolve_target_class("round eyeglasses").unwrap(), 6);
        assert!(resolve_target_class("long wavy").is_err());
        assert!(resolve_target_class("hair mouth").is_err());
        // repeating the same class is fine
        assert_eq!(resolve_target_class("hair hair").unwrap(), 2);
    }

    #[test]
    fn insert_policy_is_enforced() {
        let ae = crate::autoencoder::MaskAwareAutoencoder::new(
            crate::autoencoder::AEConfig {
                widths: [8, 16, 16],
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let unet = MaskUNet::new(tiny_cfg(), 2);
        let vocab = Vocabulary::default_vocab();
        let pal = Palette::default_palette();
        let schedule = crate::diffusion_core::make_schedule(20, 1e-3, 0.02).unwrap();
        let spec = SamplerSpec::new(4, 0.0, 9);
        let stats = LatentStats { mean: 0.0, std: 1.0 };

        let mut labels = vec![0u8; 32 * 32];
        labels[0] = 1;
        let map = SemanticMap::new(32, 32, labels, CLASS_COUNT).unwrap();
        let task = EditTask {
            mode: EditMode::Insert,
            cond_map: map.clone(),
            edit_text: "flat hat".into(),
            user_mask: None,
            mask_aware_decode: true,
        };
        let err = generate_mask(&task, &ae, &unet, &vocab, &pal, stats, &spec, &schedule).unwrap_err();
        assert!(matches!(err, Error::Policy(_)));

        // present target class blocks insertion
        let mut labels = vec![0u8; 32 * 32];
        for l in labels.iter_mut().take(200) {
            *l = 7;
        }
        let map_with_hat = SemanticMap::new(32, 32, labels, CLASS_COUNT).unwrap();
        let task = EditTask {
            mode: EditMode::Insert,
            cond_map: map_with_hat,
            edit_text: "flat hat".into(),
            user_mask: None,
            mask_aware_decode: false,
        };
        let err = generate_mask(&task, &ae, &unet, &vocab, &pal, stats, &spec, &schedule).unwrap_err();
        assert!(matches!(err, Error::Policy(_)));

        // valid insert runs end to end and is deterministic per seed
        let task = EditTask {
            mode: EditMode::Insert,
            cond_map: map.clone(),
            edit_text: "flat hat".into(),
            user_mask: None,
            mask_aware_decode: false,
        };
        let a = generate_mask(&task, &ae, &unet, &vocab, &pal, stats, &spec, &schedule).unwrap();
        let b = generate_mask(&task, &ae, &unet, &vocab, &pal, stats, &spec, &schedule).unwrap();
        assert_eq!(a.map, b.map);
        assert_eq!(a.target_class, 7);
        assert!(a.gate_mask.is_none());

        // edit mode derives the gate from the target support
        let task = EditTask {
            mode: EditMode::Edit,
            cond_map: map,
            edit_text: "slim face".into(),
            user_mask: None,
            mask_aware_decode: true,
        };
        let g = generate_mask(&task, &ae, &unet, &vocab, &pal, stats, &spec, &schedule).unwrap();
        let want = mask_support(&task.cond_map, 1);
        assert_eq!(g.gate_mask.unwrap(), want);
    }

    #[test]
    fn latent_stats_standardize_roundtrip() {
        let stats = LatentStats { mean: 0.3, std: 2.5 };
        let mut rng = rng_from_seed(8);
        let t = Tensor::randn(&[1, 4, 4, 4], &mut rng);
        let back = stats.destandardize(&stats.standardize(&t));
        assert!(back.max_abs_diff(&t) < 1e-5);
    }
}
