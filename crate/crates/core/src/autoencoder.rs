//! Latent autoencoder over palette-encoded semantic maps, extended with
//! auxiliary-branch skip modules whose contribution is gated by the
//! complement of the edit mask: at decoder level i,
//! D_i = D_{i-1} + Φ_i(E_i) ⊙ (J − ρ_i(M)). The skip modules' final convs
//! are zero-initialized, so an untrained model decodes exactly like the
//! plain autoencoder.

use crate::error::{Error, Result};
use crate::nn::ops::{silu, silu_backward};
use crate::nn::{join, AdamW, AdamWConfig, Conv2d, ConvBlock, Downsample, GroupNorm, Param, Params, Tensor, Upsample};
use crate::rng::{fnv1a64, rng_from_seed};
use crate::semantic_maps::Mask;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskAwareMode {
    None,
    NonLinear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AEConfig {
    pub in_channels: usize,
    pub latent_channels: usize,
    pub widths: [usize; 3],
    pub mask_aware: MaskAwareMode,
    pub gated: bool,
    pub shared_aux_encoder: bool,
}

impl Default for AEConfig {
    fn default() -> Self {
        AEConfig {
            in_channels: 3,
            latent_channels: 4,
            widths: [32, 64, 128],
            mask_aware: MaskAwareMode::NonLinear,
            gated: true,
            shared_aux_encoder: true,
        }
    }
}

impl AEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|w| w % 8 != 0 || *w == 0) {
            return Err(Error::Config(format!(
                "widths {:?} must be positive multiples of 8",
                self.widths
            )));
        }
        Ok(())
    }

    /// Hash of the parameter-shaping fields only; `gated` and the aux
    /// sharing switch change runtime behavior, not the parameter set.
    pub fn arch_hash(&self) -> String {
        let key = format!(
            "ae:{}:{}:{:?}:{:?}",
            self.in_channels, self.latent_channels, self.widths, self.mask_aware
        );
        format!("{:016x}", fnv1a64(key.as_bytes()))
    }
}

/// Per-level encoder features (full, half, quarter resolution) plus the
/// latent map at canvas/4.
pub struct EncoderTaps {
    pub taps: Vec<Tensor>,
    pub latent: Tensor,
}

pub struct Encoder {
    conv_in: Conv2d,
    blocks: Vec<ConvBlock>,
    downs: Vec<Downsample>,
    out_gn: GroupNorm,
    out_conv: Conv2d,
    cache: Option<Tensor>, // pre-SiLU of the latent head
}

impl Encoder {
    fn new(cfg: &AEConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let [w0, w1, w2] = cfg.widths;
        Encoder {
            conv_in: Conv2d::new(cfg.in_channels, w0, 3, 1, 1, rng),
            blocks: vec![
                ConvBlock::new(w0, w0, rng),
                ConvBlock::new(w1, w1, rng),
                ConvBlock::new(w2, w2, rng),
            ],
            downs: vec![Downsample::new(w0, w1, rng), Downsample::new(w1, w2, rng)],
            out_gn: GroupNorm::new(8, w2),
            out_conv: Conv2d::new(w2, cfg.latent_channels, 3, 1, 1, rng),
            cache: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> EncoderTaps {
        let mut taps = Vec::with_capacity(3);
        let mut h = self.conv_in.forward(x);
        h = self.blocks[0].forward(&h);
        taps.push(h.clone());
        h = self.downs[0].forward(&h);
        h = self.blocks[1].forward(&h);
        taps.push(h.clone());
        h = self.downs[1].forward(&h);
        h = self.blocks[2].forward(&h);
        taps.push(h.clone());
        let latent = self.out_conv.forward(&silu(&self.out_gn.forward(&h)));
        EncoderTaps { taps, latent }
    }

    fn forward_t(&mut self, x: &Tensor) -> EncoderTaps {
        let mut taps = Vec::with_capacity(3);
        let mut h = self.conv_in.forward_t(x);
        h = self.blocks[0].forward_t(&h);
        taps.push(h.clone());
        h = self.downs[0].forward_t(&h);
        h = self.blocks[1].forward_t(&h);
        taps.push(h.clone());
        h = self.downs[1].forward_t(&h);
        h = self.blocks[2].forward_t(&h);
        taps.push(h.clone());
        let a = self.out_gn.forward_t(&h);
        let latent = self.out_conv.forward_t(&silu(&a));
        self.cache = Some(a);
        EncoderTaps { taps, latent }
    }

    /// Backward through the latent head only (taps are not consumed by
    /// the plain reconstruction path).
    fn backward(&mut self, d_latent: &Tensor) {
        let a = self.cache.take().expect("encoder backward without forward_t");
        let d = self.out_conv.backward(d_latent);
        let mut d = self.out_gn.backward(&silu_backward(&a, &d));
        d = self.blocks[2].backward(&d);
        d = self.downs[1].backward(&d);
        d = self.blocks[1].backward(&d);
        d = self.downs[0].backward(&d);
        d = self.blocks[0].backward(&d);
        self.conv_in.backward(&d);
    }
}

impl Params for Encoder {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv_in.visit_params(&join(prefix, "conv_in"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("block{i}")), out);
        }
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.visit_params(&join(prefix, &format!("down{i}")), out);
        }
        self.out_gn.visit_params(&join(prefix, "out_gn"), out);
        self.out_conv.visit_params(&join(prefix, "out_conv"), out);
    }
}

pub struct Decoder {
    in_conv: Conv2d,
    blocks: Vec<ConvBlock>, // quarter, half, full
    ups: Vec<Upsample>,
    out_gn: GroupNorm,
    out_conv: Conv2d,
    cache: Option<Tensor>,
}

impl Decoder {
    fn new(cfg: &AEConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let [w0, w1, w2] = cfg.widths;
        Decoder {
            in_conv: Conv2d::new(cfg.latent_channels, w2, 3, 1, 1, rng),
            blocks: vec![
                ConvBlock::new(w2, w2, rng),
                ConvBlock::new(w1, w1, rng),
                ConvBlock::new(w0, w0, rng),
            ],
            ups: vec![Upsample::new(w2, w1, rng), Upsample::new(w1, w0, rng)],
            out_gn: GroupNorm::new(8, w0),
            out_conv: Conv2d::new(w0, 3, 3, 1, 1, rng),
            cache: None,
        }
    }
}

impl Params for Decoder {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.in_conv.visit_params(&join(prefix, "in_conv"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("block{i}")), out);
        }
        for (i, u) in self.ups.iter_mut().enumerate() {
            u.visit_params(&join(prefix, &format!("up{i}")), out);
        }
        self.out_gn.visit_params(&join(prefix, "out_gn"), out);
        self.out_conv.visit_params(&join(prefix, "out_conv"), out);
    }
}

/// conv3×3 → SiLU → conv3×3 with zero-initialized output weights.
pub struct SkipModule {
    conv1: Conv2d,
    conv2: Conv2d,
    cache: Option<Tensor>,
}

impl SkipModule {
    fn new(c: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        SkipModule {
            conv1: Conv2d::new(c, c, 3, 1, 1, rng),
            conv2: Conv2d::new_zeroed(c, c, 3, 1, 1),
            cache: None,
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        self.conv2.forward(&silu(&self.conv1.forward(x)))
    }

    fn forward_t(&mut self, x: &Tensor) -> Tensor {
        let h = self.conv1.forward_t(x);
        let y = self.conv2.forward_t(&silu(&h));
        self.cache = Some(h);
        y
    }

    fn backward(&mut self, dy: &Tensor) {
        let h = self.cache.take().expect("skip backward without forward_t");
        let d = self.conv2.backward(dy);
        self.conv1.backward(&silu_backward(&h, &d));
    }
}

impl Params for SkipModule {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv1.visit_params(&join(prefix, "conv1"), out);
        self.conv2.visit_params(&join(prefix, "conv2"), out);
    }
}

/// Skip operators per encoder level (full, half, quarter resolution).
pub struct SkipModules {
    pub mods: Vec<SkipModule>,
}

impl Params for SkipModules {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, m) in self.mods.iter_mut().enumerate() {
            m.visit_params(&join(prefix, &format!("level{i}")), out);
        }
    }
}

/// Φ(E) ⊙ (J − ρ(M)) when gated; ρ resizes the mask to Φ(E)'s resolution
/// by nearest neighbor. Ungated mode passes Φ(E) unchanged.
pub fn gated_contribution(phi_e: &Tensor, mask: &Mask, gated: bool) -> Tensor {
    if !gated {
        return phi_e.clone();
    }
    let (n, c, h, w) = phi_e.dims4().expect("skip contribution is 4-D");
    assert_eq!(n, 1, "per-sample gating");
    let m = mask.resize_nearest(w, h);
    let mut out = phi_e.clone();
    let plane = h * w;
    for ch in 0..c {
        for p in 0..plane {
            if m.data()[p] != 0 {
                out.data_mut()[ch * plane + p] = 0.0;
            }
        }
    }
    out
}

pub struct MaskAwareAutoencoder {
    pub cfg: AEConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub skips: Option<SkipModules>,
}

impl MaskAwareAutoencoder {
    pub fn new(cfg: AEConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(seed);
        let encoder = Encoder::new(&cfg, &mut rng);
        let decoder = Decoder::new(&cfg, &mut rng);
        let skips = match cfg.mask_aware {
            MaskAwareMode::None => None,
            MaskAwareMode::NonLinear => Some(SkipModules {
                mods: cfg.widths.iter().map(|&w| SkipModule::new(w, &mut rng)).collect(),
            }),
        };
        Ok(MaskAwareAutoencoder {
            cfg,
            encoder,
            decoder,
            skips,
        })
    }

    pub fn encode(&self, x: &Tensor) -> EncoderTaps {
        self.encoder.forward(x)
    }

    /// Plain decode (no auxiliary branch).
    pub fn decode(&self, latent: &Tensor) -> Tensor {
        let d = &self.decoder;
        let mut h = d.in_conv.forward(latent);
        h = d.blocks[0].forward(&h);
        h = d.ups[0].forward(&h);
        h = d.blocks[1].forward(&h);
        h = d.ups[1].forward(&h);
        h = d.blocks[2].forward(&h);
        d.out_conv.forward(&silu(&d.out_gn.forward(&h)))
    }

    /// Mask-aware decode for a single sample ([1, ...] tensors): the aux
    /// taps come from encoding the unedited map, and their detail passes
    /// through everywhere the mask is clear.
    pub fn decode_mask_aware(
        &self,
        latent: &Tensor,
        aux: &EncoderTaps,
        mask: &Mask,
        gated: bool,
    ) -> Result<Tensor> {
        let skips = self.skips.as_ref().ok_or_else(|| {
            Error::Config("decode_mask_aware needs mask_aware = NonLinear".into())
        })?;
        let (_, _, lh, lw) = latent.dims4()?;
        if mask.width() != lw * 4 || mask.height() != lh * 4 {
            return Err(Error::Shape(format!(
                "mask {}x{} does not match canvas {}x{}",
                mask.width(),
                mask.height(),
                lw * 4,
                lh * 4
            )));
        }
        let d = &self.decoder;
        let mut h = d.in_conv.forward(latent);
        h = d.blocks[0].forward(&h);
        h.add_assign(&gated_contribution(&skips.mods[2].forward(&aux.taps[2]), mask, gated));
        h = d.ups[0].forward(&h);
        h = d.blocks[1].forward(&h);
        h.add_assign(&gated_contribution(&skips.mods[1].forward(&aux.taps[1]), mask, gated));
        h = d.ups[1].forward(&h);
        h = d.blocks[2].forward(&h);
        h.add_assign(&gated_contribution(&skips.mods[0].forward(&aux.taps[0]), mask, gated));
        Ok(d.out_conv.forward(&silu(&d.out_gn.forward(&h))))
    }

    pub fn arch_hash(&self) -> String {
        self.cfg.arch_hash()
    }
}

impl Params for MaskAwareAutoencoder {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.encoder.visit_params(&join(prefix, "enc"), out);
        self.decoder.visit_params(&join(prefix, "dec"), out);
        if let Some(s) = &mut self.skips {
            s.visit_params(&join(prefix, "skip"), out);
        }
    }
}

// ---- perceptual features ----

/// Fixed seed for the frozen random-feature net; never trained.
pub const PERCEPTUAL_SEED: u64 = 0x7065_7263_6e65_7431;

/// Four strided convs with SiLU; weights are deterministic from
/// PERCEPTUAL_SEED and act as a fixed perceptual feature extractor.
pub struct PerceptualNet {
    convs: Vec<Conv2d>,
    cache: Option<Vec<Tensor>>,
}

impl Default for PerceptualNet {
    fn default() -> Self {
        Self::new()
    }
}

impl PerceptualNet {
    pub fn new() -> Self {
        let mut rng = rng_from_seed(PERCEPTUAL_SEED);
        PerceptualNet {
            convs: vec![
                Conv2d::new(3, 16, 3, 2, 1, &mut rng),
                Conv2d::new(16, 32, 3, 2, 1, &mut rng),
                Conv2d::new(32, 64, 3, 2, 1, &mut rng),
                Conv2d::new(64, 64, 3, 2, 1, &mut rng),
            ],
            cache: None,
        }
    }

    pub fn weight_fingerprint(&self) -> u64 {
        let mut all = Vec::new();
        for c in &self.convs {
            all.extend_from_slice(&c.weight.w);
            all.extend_from_slice(&c.bias.w);
        }
        crate::rng::hash_f32s(&all)
    }

    pub fn features(&self, x: &Tensor) -> Vec<Tensor> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            h = silu(&conv.forward(&h));
            out.push(h.clone());
        }
        out
    }

    fn forward_t(&mut self, x: &Tensor) -> Vec<Tensor> {
        let mut h = x.clone();
        let mut pre = Vec::with_capacity(self.convs.len());
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &mut self.convs {
            let a = conv.forward_t(&h);
            h = silu(&a);
            pre.push(a);
            out.push(h.clone());
        }
        self.cache = Some(pre);
        out
    }

    /// Backward from per-level feature grads to the input grad. Parameter
    /// grads accumulate but are never stepped (the net is frozen).
    fn backward(&mut self, d_feats: &[Tensor]) -> Tensor {
        let pre = self.cache.take().expect("perceptual backward without forward_t");
        let mut d: Option<Tensor> = None;
        for i in (0..self.convs.len()).rev() {
            let mut da = match d.take() {
                Some(mut dcur) => {
                    dcur.add_assign(&d_feats[i]);
                    dcur
                }
                None => d_feats[i].clone(),
            };
            da = silu_backward(&pre[i], &da);
            d = Some(self.convs[i].backward(&da));
        }
        d.expect("at least one conv")
    }
}

/// λ1 · mean|S − Ŝ| + λ2 · mean over levels of mean squared feature
/// distance. Inference-only evaluation.
pub fn ae_loss(net: &PerceptualNet, target: &Tensor, out: &Tensor, l1: f32, l2: f32) -> f32 {
    assert_eq!(target.dims(), out.dims());
    let mut abs = 0.0f64;
    for (a, b) in target.data().iter().zip(out.data()) {
        abs += (*a as f64 - *b as f64).abs();
    }
    let l1_term = (abs / target.numel() as f64) as f32;
    let mut perc = 0.0f64;
    if l2 != 0.0 {
        let ft = net.features(target);
        let fo = net.features(out);
        for (a, b) in ft.iter().zip(&fo) {
            perc += crate::diffusion_core::eps_loss(a, b) as f64;
        }
        perc /= ft.len() as f64;
    }
    l1 * l1_term + l2 * perc as f32
}

/// Same objective, but also returns dLoss/dOut for training.
pub fn ae_loss_grad(
    net: &mut PerceptualNet,
    target: &Tensor,
    out: &Tensor,
    l1: f32,
    l2: f32,
) -> (f32, Tensor) {
    assert_eq!(target.dims(), out.dims());
    let n = target.numel() as f32;
    let mut abs = 0.0f64;
    let mut d_out = Tensor::zeros(out.dims());
    for i in 0..out.numel() {
        let diff = out.data()[i] - target.data()[i];
        abs += (diff as f64).abs();
        d_out.data_mut()[i] = l1 * diff.signum() / n;
    }
    let mut loss = l1 * (abs / n as f64) as f32;
    if l2 != 0.0 {
        let ft = net.features(target);
        let fo = net.forward_t(out);
        let levels = fo.len();
        let mut d_feats = Vec::with_capacity(levels);
        for (a, b) in fo.iter().zip(&ft) {
            let mse = crate::diffusion_core::eps_loss(a, b);
            loss += l2 * mse / levels as f32;
            let mut d = a.sub(b);
            d.scale(2.0 * l2 / (levels as f32 * a.numel() as f32));
            d_feats.push(d);
        }
        d_out.add_assign(&net.backward(&d_feats));
    }
    (loss, d_out)
}

// ---- training ----

#[derive(Clone, Debug)]
pub struct AeTrainOpts {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
    pub lambda_l1: f32,
    pub lambda_perc: f32,
    pub log_every: usize,
}

impl Default for AeTrainOpts {
    fn default() -> Self {
        AeTrainOpts {
            steps: 3000,
            batch: 8,
            lr: 1e-3,
            warmup: 100,
            seed: 1,
            lambda_l1: 1.0,
            lambda_perc: 0.1,
            log_every: 50,
        }
    }
}

fn stack(batch: &[&Tensor]) -> Tensor {
    let per = batch[0].numel();
    let mut dims = vec![batch.len()];
    dims.extend_from_slice(batch[0].dims());
    let mut out = Tensor::zeros(&dims);
    for (i, t) in batch.iter().enumerate() {
        assert_eq!(t.numel(), per);
        out.data_mut()[i * per..(i + 1) * per].copy_from_slice(t.data());
    }
    out
}

/// Phase 0: optimize encoder and decoder for reconstruction of
/// palette-encoded full maps. Returns the loss curve.
pub fn train_ae_base(
    model: &mut MaskAwareAutoencoder,
    data: &[Tensor],
    opts: &AeTrainOpts,
) -> Result<Vec<(usize, f32)>> {
    if opts.steps > 0 && data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: opts.lr,
        warmup_steps: opts.warmup,
        ..Default::default()
    });
    let mut percep = PerceptualNet::new();
    let mut rng = rng_from_seed(opts.seed);
    let mut curve = Vec::new();
    for step in 0..opts.steps {
        let refs: Vec<&Tensor> = (0..opts.batch)
            .map(|_| &data[rng.random_range(0..data.len())])
            .collect();
        let x = stack(&refs);
        let taps = model.encoder.forward_t(&x);
        let y = decode_train_plain(&mut model.decoder, &taps.latent);
        let (loss, dy) = ae_loss_grad(&mut percep, &x, &y, opts.lambda_l1, opts.lambda_perc);
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!("non-finite reconstruction loss {loss}"),
            });
        }
        crate::nn::zero_grads(&mut model.encoder);
        crate::nn::zero_grads(&mut model.decoder);
        let d_latent = backward_plain(&mut model.decoder, &dy);
        model.encoder.backward(&d_latent);
        let mut params = Vec::new();
        model.encoder.visit_params("enc", &mut params);
        model.decoder.visit_params("dec", &mut params);
        opt.step(&mut params);
        if step % opts.log_every == 0 || step + 1 == opts.steps {
            curve.push((step, loss));
        }
    }
    Ok(curve)
}

fn decode_train_plain(d: &mut Decoder, latent: &Tensor) -> Tensor {
    let mut h = d.in_conv.forward_t(latent);
    h = d.blocks[0].forward_t(&h);
    h = d.ups[0].forward_t(&h);
    h = d.blocks[1].forward_t(&h);
    h = d.ups[1].forward_t(&h);
    h = d.blocks[2].forward_t(&h);
    let a = d.out_gn.forward_t(&h);
    let y = d.out_conv.forward_t(&silu(&a));
    d.cache = Some(a);
    y
}

fn backward_plain(d: &mut Decoder, dy: &Tensor) -> Tensor {
    let a = d.cache.take().expect("decoder backward without forward");
    let g = d.out_conv.backward(dy);
    let mut g = d.out_gn.backward(&silu_backward(&a, &g));
    g = d.blocks[2].backward(&g);
    g = d.ups[1].backward(&g);
    g = d.blocks[1].backward(&g);
    g = d.ups[0].backward(&g);
    g = d.blocks[0].backward(&g);
    d.in_conv.backward(&g)
}

/// One leave-one-out training sample for the skip modules.
pub struct SkipPair {
    /// palette_encode(S_n), the reconstruction target (and main input).
    pub target: Tensor,
    /// palette_encode(S_k), the auxiliary-branch input.
    pub aux: Tensor,
    pub mask: Mask,
}

/// Phase 1: freeze encoder and decoder, train only the skip modules.
pub fn train_skip_modules(
    model: &mut MaskAwareAutoencoder,
    pairs: &[SkipPair],
    opts: &AeTrainOpts,
) -> Result<Vec<(usize, f32)>> {
    if model.skips.is_none() {
        return Err(Error::Config("model has no skip modules".into()));
    }
    if opts.steps > 0 && pairs.is_empty() {
        return Err(Error::Config("empty pair set".into()));
    }
    let gated = model.cfg.gated;
    let mut opt = AdamW::new(AdamWConfig {
        lr: opts.lr,
        warmup_steps: opts.warmup,
        ..Default::default()
    });
    let mut percep = PerceptualNet::new();
    let mut rng = rng_from_seed(opts.seed);
    let mut curve = Vec::new();
    for step in 0..opts.steps {
        let mut loss_acc = 0.0f32;
        // gradients accumulate across the batch, one sample at a time
        crate::nn::zero_grads(&mut model.decoder);
        if let Some(s) = &mut model.skips {
            crate::nn::zero_grads(s);
        }
        let picks: Vec<usize> = (0..opts.batch).map(|_| rng.random_range(0..pairs.len())).collect();
        for &pi in &picks {
            let pair = &pairs[pi];
            let enc_n = model.encoder.forward(&batch1(&pair.target));
            let enc_k = model.encoder.forward(&batch1(&pair.aux));
            let loss = forward_backward_mask_aware(
                model,
                &mut percep,
                &enc_n.latent,
                &enc_k,
                &pair.mask,
                gated,
                &batch1(&pair.target),
                opts,
            )?;
            loss_acc += loss;
        }
        let loss = loss_acc / opts.batch as f32;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!("non-finite skip loss {loss}"),
            });
        }
        // scale grads by 1/batch and step only the skip parameters
        let s = model.skips.as_mut().expect("checked above");
        let mut params = Vec::new();
        s.visit_params("skip", &mut params);
        for (_, p) in params.iter_mut() {
            for g in &mut p.g {
                *g /= opts.batch as f32;
            }
        }
        opt.step(&mut params);
        if step % opts.log_every == 0 || step + 1 == opts.steps {
            curve.push((step, loss));
        }
    }
    Ok(curve)
}

fn batch1(t: &Tensor) -> Tensor {
    let mut dims = vec![1];
    dims.extend_from_slice(t.dims());
    t.clone().reshape(&dims)
}

/// Training-mode mask-aware decode + backward into the skip modules
/// (decoder grads are computed but discarded by the caller's optimizer).
#[allow(clippy::too_many_arguments)]
fn forward_backward_mask_aware(
    model: &mut MaskAwareAutoencoder,
    percep: &mut PerceptualNet,
    latent: &Tensor,
    aux: &EncoderTaps,
    mask: &Mask,
    gated: bool,
    target: &Tensor,
    opts: &AeTrainOpts,
) -> Result<f32> {
    let d = &mut model.decoder;
    let skips = model.skips.as_mut().expect("skip modules present");
    let (_, _, lh, lw) = latent.dims4()?;
    let gates: Vec<Mask> = (0..3)
        .map(|i| {
            let scale = [4, 2, 1][i];
            mask.resize_nearest(lw * scale, lh * scale)
        })
        .collect();

    let apply = |h: &mut Tensor, phi: &Tensor, gate: &Mask| {
        let (_, c, hh, ww) = h.dims4().unwrap();
        let plane = hh * ww;
        for ch in 0..c {
            for p in 0..plane {
                if !(gated && gate.data()[p] != 0) {
                    h.data_mut()[ch * plane + p] += phi.data()[ch * plane + p];
                }
            }
        }
    };

    let mut h = d.in_conv.forward_t(latent);
    h = d.blocks[0].forward_t(&h);
    let phi2 = skips.mods[2].forward_t(&aux.taps[2]);
    apply(&mut h, &phi2, &gates[2]);
    h = d.ups[0].forward_t(&h);
    h = d.blocks[1].forward_t(&h);
    let phi1 = skips.mods[1].forward_t(&aux.taps[1]);
    apply(&mut h, &phi1, &gates[1]);
    h = d.ups[1].forward_t(&h);
    h = d.blocks[2].forward_t(&h);
    let phi0 = skips.mods[0].forward_t(&aux.taps[0]);
    apply(&mut h, &phi0, &gates[0]);
    let a = d.out_gn.forward_t(&h);
    let y = d.out_conv.forward_t(&silu(&a));

    let (loss, dy) = ae_loss_grad(percep, target, &y, opts.lambda_l1, opts.lambda_perc);

    // backward
    let gate_grad = |dh: &Tensor, gate: &Mask| -> Tensor {
        let mut dphi = dh.clone();
        if gated {
            let (_, c, hh, ww) = dh.dims4().unwrap();
            let plane = hh * ww;
            for ch in 0..c {
                for p in 0..plane {
                    if gate.data()[p] != 0 {
                        dphi.data_mut()[ch * plane + p] = 0.0;
                    }
                }
            }
        }
        dphi
    };

    let g = d.out_conv.backward(&dy);
    let g = d.out_gn.backward(&silu_backward(&a, &g));
    skips.mods[0].backward(&gate_grad(&g, &gates[0]));
    let g = d.blocks[2].backward(&g);
    let g = d.ups[1].backward(&g);
    skips.mods[1].backward(&gate_grad(&g, &gates[1]));
    let g = d.blocks[1].backward(&g);
    let g = d.ups[0].backward(&g);
    skips.mods[2].backward(&gate_grad(&g, &gates[2]));
    let g = d.blocks[0].backward(&g);
    d.in_conv.backward(&g);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param_fingerprint;
    use crate::semantic_maps::{palette_encode, Palette, SemanticMap, CLASS_COUNT};

    fn tiny_model() -> MaskAwareAutoencoder {
        let cfg = AEConfig {
            widths: [8, 16, 16],
            ..Default::default()
        };
        MaskAwareAutoencoder::new(cfg, 5).unwrap()
    }

    fn random_map(seed: u64) -> SemanticMap {
        let mut rng = rng_from_seed(seed);
        let labels = (0..32 * 32).map(|_| rng.random_range(0..CLASS_COUNT as u8)).collect();
        SemanticMap::new(32, 32, labels, CLASS_COUNT).unwrap()
    }

    #[test]
    fn encoder_tap_shapes_follow_halving() {
        let model = tiny_model();
        let x = Tensor::zeros(&[1, 3, 32, 32]);
        let taps = model.encode(&x);
        assert_eq!(taps.taps[0].dims(), &[1, 8, 32, 32]);
        assert_eq!(taps.taps[1].dims(), &[1, 16, 16, 16]);
        assert_eq!(taps.taps[2].dims(), &[1, 16, 8, 8]);
        assert_eq!(taps.latent.dims(), &[1, 4, 8, 8]);
        assert!(taps.latent.is_finite());
        // identical inputs, identical taps
        let again = model.encode(&x);
        assert_eq!(taps.latent, again.latent);
        assert_eq!(taps.taps[1], again.taps[1]);
    }

    #[test]
    fn zero_skip_identity_and_all_ones_mask() {
        let model = tiny_model();
        let mut rng = rng_from_seed(9);
        for i in 0..4 {
            let pal = Palette::default_palette();
            let x = batch1(&palette_encode(&random_map(i), &pal));
            let taps = model.encode(&x);
            let plain = model.decode(&taps.latent);
            // skips are zero-initialized: mask-aware decode is the identity
            let aux = model.encode(&Tensor::randn(&[1, 3, 32, 32], &mut rng));
            let m = Mask::from_fn(32, 32, |xx, yy| (xx + yy + i as usize) % 3 == 0);
            let got = model.decode_mask_aware(&taps.latent, &aux, &m, true).unwrap();
            assert!(got.max_abs_diff(&plain) <= 1e-6);
            let got_ungated = model.decode_mask_aware(&taps.latent, &aux, &m, false).unwrap();
            assert!(got_ungated.max_abs_diff(&plain) <= 1e-6);
        }

        // non-zero skips + all-ones mask: gating kills every contribution
        let mut model = tiny_model();
        let mut rng2 = rng_from_seed(33);
        if let Some(s) = &mut model.skips {
            for m in &mut s.mods {
                for v in &mut m.conv2.weight.w {
                    *v = rng2.random_range(-0.1..0.1);
                }
            }
        }
        let pal = Palette::default_palette();
        let x = batch1(&palette_encode(&random_map(7), &pal));
        let taps = model.encode(&x);
        let plain = model.decode(&taps.latent);
        let ones = Mask::from_fn(32, 32, |_, _| true);
        let got = model.decode_mask_aware(&taps.latent, &taps, &ones, true).unwrap();
        assert_eq!(got, plain);
        // whereas ungated now differs
        let ungated = model.decode_mask_aware(&taps.latent, &taps, &ones, false).unwrap();
        assert!(ungated.max_abs_diff(&plain) > 1e-4);
    }

    #[test]
    fn hand_gating_example() {
        let phi = Tensor::from_vec(&[1, 1, 2, 2], vec![2.0, 3.0, 4.0, 5.0]);
        let m = Mask::from_vec(2, 2, vec![1, 0, 0, 1]).unwrap();
        let contrib = gated_contribution(&phi, &m, true);
        assert_eq!(contrib.data(), &[0.0, 3.0, 4.0, 0.0]);
        let mut d = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]);
        d.add_assign(&contrib);
        assert_eq!(d.data(), &[1.0, 4.0, 5.0, 1.0]);
        // ungated passes everything
        assert_eq!(gated_contribution(&phi, &m, false).data(), phi.data());
    }

    #[test]
    fn ae_loss_properties() {
        let net = PerceptualNet::new();
        let mut rng = rng_from_seed(3);
        let x = Tensor::randn(&[1, 3, 32, 32], &mut rng);
        assert_eq!(ae_loss(&net, &x, &x, 1.0, 0.1), 0.0);
        // λ2 = 0, constant offset 0.5 → λ1 · 0.5
        let mut y = x.clone();
        for v in y.data_mut() {
            *v += 0.5;
        }
        let got = ae_loss(&net, &x, &y, 1.0, 0.0);
        assert!((got - 0.5).abs() < 1e-5);
        // non-negative on random pairs, matches independent re-implementation
        let z = Tensor::randn(&[1, 3, 32, 32], &mut rng);
        let got = ae_loss(&net, &x, &z, 1.0, 0.1);
        assert!(got >= 0.0);
        let oracle = {
            let mut l1 = 0.0f64;
            for i in 0..x.numel() {
                l1 += (x.data()[i] as f64 - z.data()[i] as f64).abs();
            }
            l1 /= x.numel() as f64;
            let ft = net.features(&x);
            let fz = net.features(&z);
            let mut p = 0.0f64;
            for (a, b) in ft.iter().zip(&fz) {
                let mut s = 0.0f64;
                for j in 0..a.numel() {
                    s += ((a.data()[j] - b.data()[j]) as f64).powi(2);
                }
                p += s / a.numel() as f64;
            }
            p /= ft.len() as f64;
            1.0 * l1 + 0.1 * p
        };
        assert!((got as f64 - oracle).abs() < 1e-6, "{got} vs {oracle}");
    }

    #[test]
    fn ae_loss_grad_matches_finite_difference() {
        let mut net = PerceptualNet::new();
        let mut rng = rng_from_seed(4);
        let x = Tensor::randn(&[1, 3, 16, 16], &mut rng);
        let y = Tensor::randn(&[1, 3, 16, 16], &mut rng);
        let (_, dy) = ae_loss_grad(&mut net, &x, &y, 1.0, 0.1);
        let inet = PerceptualNet::new();
        for j in [0usize, 100, 500] {
            let h = 1e-2f32;
            let mut yp = y.clone();
            yp.data_mut()[j] += h;
            let mut ym = y.clone();
            ym.data_mut()[j] -= h;
            let num = (ae_loss(&inet, &x, &yp, 1.0, 0.1) - ae_loss(&inet, &x, &ym, 1.0, 0.1)) / (2.0 * h);
            // L1 sign term is non-smooth but perturbation never crosses zero here
            assert!((dy.data()[j] - num).abs() < 2e-2 * dy.data()[j].abs().max(num.abs()).max(0.05),
                "j={j}: {} vs {num}", dy.data()[j]);
        }
    }

    #[test]
    fn perceptual_features_fixed_and_discriminative() {
        let net = PerceptualNet::new();
        let net2 = PerceptualNet::new();
        assert_eq!(net.weight_fingerprint(), net2.weight_fingerprint());
        let mut rng = rng_from_seed(6);
        let pal = Palette::default_palette();
        for i in 0..20 {
            let a = palette_encode(&random_map(i), &pal);
            let b = palette_encode(&random_map(i + 1000), &pal);
            let fa = net.features(&batch1(&a));
            let fb = net.features(&batch1(&b));
            let dist: f32 = fa
                .iter()
                .zip(&fb)
                .map(|(x, y)| crate::diffusion_core::eps_loss(x, y))
                .sum();
            assert!(dist > 0.0, "features identical for distinct maps at {i}");
        }
        let x = Tensor::randn(&[1, 3, 32, 32], &mut rng);
        assert_eq!(net.features(&x)[3], net2.features(&x)[3]);
    }

    #[test]
    fn skip_training_freezes_encoder_and_decoder() {
        let mut model = tiny_model();
        let pal = Palette::default_palette();
        let pairs: Vec<SkipPair> = (0..4)
            .map(|i| SkipPair {
                target: palette_encode(&random_map(i), &pal),
                aux: palette_encode(&random_map(i + 50), &pal),
                mask: Mask::from_fn(32, 32, |x, y| (x / 4 + y / 4 + i as usize) % 4 == 0),
            })
            .collect();
        let enc_before = param_fingerprint(&mut model.encoder);
        let dec_before = param_fingerprint(&mut model.decoder);
        let skips_before = param_fingerprint(model.skips.as_mut().unwrap());
        let opts = AeTrainOpts {
            steps: 5,
            batch: 2,
            lr: 1e-3,
            warmup: 0,
            ..Default::default()
        };
        let curve = train_skip_modules(&mut model, &pairs, &opts).unwrap();
        assert!(!curve.is_empty());
        assert_eq!(param_fingerprint(&mut model.encoder), enc_before);
        assert_eq!(param_fingerprint(&mut model.decoder), dec_before);
        assert_ne!(param_fingerprint(model.skips.as_mut().unwrap()), skips_before);
    }

    #[test]
    fn zero_step_training_is_identity() {
        let mut model = tiny_model();
        let before = param_fingerprint(&mut model);
        let opts = AeTrainOpts {
            steps: 0,
            ..Default::default()
        };
        train_ae_base(&mut model, &[Tensor::zeros(&[3, 32, 32])], &opts).unwrap();
        assert_eq!(param_fingerprint(&mut model), before);
    }

    #[test]
    fn short_training_reduces_loss() {
        let mut model = tiny_model();
        let pal = Palette::default_palette();
        let data: Vec<Tensor> = (0..8).map(|i| palette_encode(&random_map(i), &pal)).collect();
        let opts = AeTrainOpts {
            steps: 60,
            batch: 4,
            lr: 2e-3,
            warmup: 10,
            log_every: 1,
            ..Default::default()
        };
        let curve = train_ae_base(&mut model, &data, &opts).unwrap();
        let first: f32 = curve[..5].iter().map(|(_, l)| l).sum::<f32>() / 5.0;
        let last: f32 = curve[curve.len() - 5..].iter().map(|(_, l)| l).sum::<f32>() / 5.0;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn mode_none_has_no_skips() {
        let cfg = AEConfig {
            widths: [8, 16, 16],
            mask_aware: MaskAwareMode::None,
            ..Default::default()
        };
        let model = MaskAwareAutoencoder::new(cfg, 3).unwrap();
        assert!(model.skips.is_none());
        let x = Tensor::zeros(&[1, 3, 32, 32]);
        let taps = model.encode(&x);
        let m = Mask::from_fn(32, 32, |_, _| false);
        assert!(model.decode_mask_aware(&taps.latent, &taps, &m, true).is_err());
    }

    #[test]
    fn mask_dimension_mismatch_is_shape_error() {
        let model = tiny_model();
        let x = Tensor::zeros(&[1, 3, 32, 32]);
        let taps = model.encode(&x);
        let m = Mask::from_fn(16, 16, |_, _| false);
        assert!(matches!(
            model.decode_mask_aware(&taps.latent, &taps, &m, true),
            Err(Error::Shape(_))
        ));
    }
}

// bench-only accessors
impl MaskAwareAutoencoder {
    pub fn encoder_forward_t_bench(&mut self, x: &Tensor) -> EncoderTaps {
        self.encoder.forward_t(x)
    }
    pub fn decoder_forward_t_bench(&mut self, taps: &EncoderTaps) -> Tensor {
        decode_train_plain(&mut self.decoder, &taps.latent)
    }
    pub fn decoder_backward_bench(&mut self, dy: &Tensor) -> Tensor {
        backward_plain(&mut self.decoder, dy)
    }
    pub fn encoder_backward_bench(&mut self, d_latent: &Tensor) {
        self.encoder.backward(d_latent)
    }
}
