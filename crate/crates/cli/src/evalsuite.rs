//! Held-out evaluation: reconstruction quality of the autoencoder with
//! and without mask-aware decoding, stage-1 denoising loss and generation
//! behavior, stage-2 conditioning utility and in-region fidelity, and an
//! area-distribution distance between generated and real maps. Every
//! random draw is seeded from the run seed, so reruns are identical.

use crate::commands::{
    eval_edit_records, eval_rng, eval_seed, insertion_prompts, pick_indices, task_from_record,
    train_class_medians,
};
use crate::config::RunConfig;
use musemask_core::autoencoder::MaskAwareAutoencoder;
use musemask_core::diffusion_core::{eps_loss, q_sample, NoiseSchedule, SamplerSpec};
use musemask_core::edit_control::{edit_image, BaseEditNet, ControlBranch, EditCond};
use musemask_core::error::Result;
use musemask_core::mask_unet::{
    generate_mask, insertion_success, EditMode, EditTask, LatentStats, MaskCond, MaskUNet,
};
use musemask_core::metrics::{class_area_w1, diversity_score, mask_accuracy, psnr, EvalReport};
use musemask_core::nn::Tensor;
use musemask_core::semantic_maps::{
    mask_support, palette_decode, palette_encode, Mask, Palette, SemanticMap,
};
use musemask_core::synth_dataset::{classify_render, tokenize, Corpus, Vocabulary};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;

pub struct EvalInputs<'a> {
    pub cfg: &'a RunConfig,
    pub corpus: &'a Corpus,
    pub ae: &'a MaskAwareAutoencoder,
    pub stats: LatentStats,
    pub unet: &'a MaskUNet,
    pub unet_insert: Option<&'a MaskUNet>,
    pub base: Option<&'a BaseEditNet>,
    pub branch: Option<&'a ControlBranch>,
    pub schedule: &'a NoiseSchedule,
}

fn batch1(t: &Tensor) -> Tensor {
    let mut dims = vec![1];
    dims.extend_from_slice(t.dims());
    t.clone().reshape(&dims)
}

pub struct ReconStats {
    pub psnr_plain: f64,
    pub psnr_gated: f64,
    pub acc_plain: f64,
    pub acc_gated: f64,
    pub mae_inside: f64,
    pub mae_outside: f64,
    pub n: usize,
}

/// Reconstruction of held-out S_n, plain vs mask-aware-gated (aux = S_k,
/// gate = the pair's edit mask).
pub fn eval_ae_recon(
    cfg: &RunConfig,
    corpus: &Corpus,
    ae: &MaskAwareAutoencoder,
    limit: usize,
) -> Result<ReconStats> {
    eval_ae_recon_mode(cfg, corpus, ae, limit, true)
}

/// Same reconstruction comparison for a model trained without gating.
pub fn eval_ae_recon_ungated(
    cfg: &RunConfig,
    corpus: &Corpus,
    ae: &MaskAwareAutoencoder,
    limit: usize,
) -> Result<ReconStats> {
    eval_ae_recon_mode(cfg, corpus, ae, limit, false)
}

fn eval_ae_recon_mode(
    cfg: &RunConfig,
    corpus: &Corpus,
    ae: &MaskAwareAutoencoder,
    limit: usize,
    gated: bool,
) -> Result<ReconStats> {
    let palette = Palette::default_palette();
    let records: Vec<_> = corpus.pairs().filter(|r| cfg.is_holdout(r.scene_index())).collect();
    let mut rng = eval_rng(cfg, 0x11);
    let picks = pick_indices(records.len(), limit, &mut rng);
    let mut s = ReconStats {
        psnr_plain: 0.0,
        psnr_gated: 0.0,
        acc_plain: 0.0,
        acc_gated: 0.0,
        mae_inside: 0.0,
        mae_outside: 0.0,
        n: 0,
    };
    let mut inside_n = 0usize;
    let mut outside_n = 0usize;
    let mut inside_sum = 0.0f64;
    let mut outside_sum = 0.0f64;
    for &pi in &picks {
        let p = corpus.load_pair(records[pi])?;
        let x_n = palette_encode(&p.s_n, &palette);
        let enc_n = ae.encode(&batch1(&x_n));
        let plain = ae.decode(&enc_n.latent);
        let enc_k = ae.encode(&batch1(&palette_encode(&p.s_k, &palette)));
        let gated = ae.decode_mask_aware(&enc_n.latent, &enc_k, &p.m_k, gated)?;

        s.psnr_plain += psnr(plain.data(), batch1(&x_n).data(), 2.0).min(80.0);
        s.psnr_gated += psnr(gated.data(), batch1(&x_n).data(), 2.0).min(80.0);
        let dims = [3, p.s_n.height(), p.s_n.width()];
        let plain_map = palette_decode(&plain.clone().reshape(&dims), &palette)?;
        let gated_map = palette_decode(&gated.clone().reshape(&dims), &palette)?;
        s.acc_plain += mask_accuracy(&plain_map, &p.s_n)?;
        s.acc_gated += mask_accuracy(&gated_map, &p.s_n)?;

        let plane = p.s_n.width() * p.s_n.height();
        for c in 0..3 {
            for px in 0..plane {
                let d = (gated.data()[c * plane + px] - x_n.data()[c * plane + px]).abs() as f64;
                if p.m_k.data()[px] != 0 {
                    inside_sum += d;
                    inside_n += 1;
                } else {
                    outside_sum += d;
                    outside_n += 1;
                }
            }
        }
        s.n += 1;
    }
    let n = s.n.max(1) as f64;
    s.psnr_plain /= n;
    s.psnr_gated /= n;
    s.acc_plain /= n;
    s.acc_gated /= n;
    s.mae_inside = inside_sum / inside_n.max(1) as f64;
    s.mae_outside = outside_sum / outside_n.max(1) as f64;
    Ok(s)
}

/// Held-out denoising loss of the stage-1 model: seeded (t, eps) per pair.
pub fn eval_stage1_loss(inp: &EvalInputs, limit: usize) -> Result<(f64, usize)> {
    let cfg = inp.cfg;
    let vocab = Vocabulary::default_vocab();
    let palette = Palette::default_palette();
    let records = eval_edit_records(cfg, inp.corpus);
    let mut rng = eval_rng(cfg, 0x21);
    let picks = pick_indices(records.len(), limit, &mut rng);
    let mut total = 0.0f64;
    let mut n = 0usize;
    for &pi in &picks {
        let p = inp.corpus.load_pair(records[pi])?;
        let z0 = inp
            .stats
            .standardize(&inp.ae.encode(&batch1(&palette_encode(&p.s_n, &palette))).latent);
        let cond_latent = inp
            .stats
            .standardize(&inp.ae.encode(&batch1(&palette_encode(&p.s_k, &palette))).latent);
        let ids = tokenize(&p.edit_text, &vocab)?;
        for draw in 0..2 {
            let mut drng = musemask_core::rng::rng_from_seed(eval_seed(cfg, 0x22, (pi * 2 + draw) as u64));
            let t = drng.random_range(1..=inp.schedule.t_count());
            let mut eps = Tensor::zeros(z0.dims());
            for v in eps.data_mut() {
                *v = StandardNormal.sample(&mut drng);
            }
            let z_t = q_sample(&z0, &[t], &eps, inp.schedule)?;
            let pred = inp.unet.predict(
                &z_t,
                &MaskCond {
                    map_latent: cond_latent.clone(),
                    text_ids: ids.clone(),
                },
                &[t],
            );
            total += eps_loss(&eps, &pred) as f64;
            n += 1;
        }
    }
    Ok((total / n.max(1) as f64, n))
}

pub struct GenStats {
    pub outside_agreement: f64,
    pub generated: Vec<SemanticMap>,
    pub holdout_maps: Vec<SemanticMap>,
    pub n: usize,
}

/// Mask-free edit generation on held-out pairs; agreement with the
/// conditioning map outside the derived gate mask.
pub fn eval_outside_agreement(inp: &EvalInputs, limit: usize) -> Result<GenStats> {
    let cfg = inp.cfg;
    let vocab = Vocabulary::default_vocab();
    let palette = Palette::default_palette();
    let records = eval_edit_records(cfg, inp.corpus);
    let mut rng = eval_rng(cfg, 0x31);
    let picks = pick_indices(records.len(), limit, &mut rng);
    let mut agree_sum = 0.0f64;
    let mut n = 0usize;
    let mut generated = Vec::new();
    let mut holdout_maps = Vec::new();
    for &pi in &picks {
        let (task, s_n) = task_from_record(inp.corpus, records[pi])?;
        let target = musemask_core::mask_unet::resolve_target_class(&task.edit_text)?;
        let support = mask_support(&task.cond_map, target);
        if support.count_ones() < 8 {
            continue; // fully occluded attribute: no usable gate
        }
        let spec = SamplerSpec::new(cfg.sampler.steps, cfg.sampler.guidance, eval_seed(cfg, 0x32, pi as u64));
        let g = generate_mask(&task, inp.ae, inp.unet, &vocab, &palette, inp.stats, &spec, inp.schedule)?;
        let gate = g.gate_mask.as_ref().expect("edit mode carries a gate");
        let mut same = 0usize;
        let mut tot = 0usize;
        for p in 0..s_n.labels().len() {
            if gate.data()[p] == 0 {
                tot += 1;
                if g.map.labels()[p] == task.cond_map.labels()[p] {
                    same += 1;
                }
            }
        }
        if tot > 0 {
            agree_sum += same as f64 / tot as f64;
            n += 1;
        }
        generated.push(g.map);
        holdout_maps.push(s_n);
    }
    Ok(GenStats {
        outside_agreement: agree_sum / n.max(1) as f64,
        generated,
        holdout_maps,
        n,
    })
}

pub struct DiversityStats {
    pub positive_rate: f64,
    pub mean_score: f64,
    pub pairs: usize,
}

/// Seed-pair diversity inside the gate region, over held-out tasks.
pub fn eval_diversity(inp: &EvalInputs, n_pairs: usize) -> Result<DiversityStats> {
    let cfg = inp.cfg;
    let vocab = Vocabulary::default_vocab();
    let palette = Palette::default_palette();
    let records = eval_edit_records(cfg, inp.corpus);
    let mut rng = eval_rng(cfg, 0x41);
    let n_tasks = n_pairs.div_ceil(5).max(1);
    let picks = pick_indices(records.len(), n_tasks, &mut rng);
    let mut positive = 0usize;
    let mut pairs = 0usize;
    let mut score_sum = 0.0f64;
    'outer: for &pi in &picks {
        let (task, _) = task_from_record(inp.corpus, records[pi])?;
        let target = musemask_core::mask_unet::resolve_target_class(&task.edit_text)?;
        let gate = mask_support(&task.cond_map, target);
        if gate.count_ones() < 8 {
            continue;
        }
        for pair_i in 0..5usize {
            if pairs >= n_pairs {
                break 'outer;
            }
            let mut maps = Vec::new();
            for half in 0..2u64 {
                let seed = eval_seed(cfg, 0x42, (pi as u64) << 16 | (pair_i as u64) << 1 | half);
                let spec = SamplerSpec::new(cfg.sampler.steps, cfg.sampler.guidance, seed);
                let g = generate_mask(&task, inp.ae, inp.unet, &vocab, &palette, inp.stats, &spec, inp.schedule)?;
                maps.push(g.map);
            }
            let d = diversity_score(&maps, &gate)?;
            score_sum += d;
            if d > 0.0 {
                positive += 1;
            }
            pairs += 1;
        }
    }
    Ok(DiversityStats {
        positive_rate: positive as f64 / pairs.max(1) as f64,
        mean_score: score_sum / pairs.max(1) as f64,
        pairs,
    })
}

/// Insertion success rate for a given stage-1 model over held-out
/// insertion prompts; the success bar is 25% of the class's median
/// training-mask area.
pub fn eval_insertion(
    inp: &EvalInputs,
    model: &MaskUNet,
    limit: usize,
) -> Result<(f64, usize)> {
    let cfg = inp.cfg;
    let vocab = Vocabulary::default_vocab();
    let palette = Palette::default_palette();
    let prompts = insertion_prompts(cfg, inp.corpus, limit)?;
    let medians = train_class_medians(cfg, inp.corpus)?;
    let mut success = 0usize;
    let mut n = 0usize;
    for (i, (map, text, class)) in prompts.iter().enumerate() {
        let task = EditTask {
            mode: EditMode::Insert,
            cond_map: map.clone(),
            edit_text: text.clone(),
            user_mask: None,
            mask_aware_decode: false,
        };
        let spec = SamplerSpec::new(cfg.sampler.steps, cfg.sampler.guidance, eval_seed(cfg, 0x51, i as u64));
        let g = generate_mask(&task, inp.ae, model, &vocab, &palette, inp.stats, &spec, inp.schedule)?;
        let min_area = medians[*class as usize] / 4;
        if insertion_success(&g.map, *class, min_area) {
            success += 1;
        }
        n += 1;
    }
    Ok((success as f64 / n.max(1) as f64, n))
}

pub struct Stage2Loss {
    pub cond: f64,
    pub uncond: f64,
    pub n: usize,
}

/// Paired held-out denoising loss with and without the control branch,
/// using identical (hole, t, eps) draws.
pub fn eval_stage2_loss(inp: &EvalInputs, limit: usize) -> Result<Stage2Loss> {
    let cfg = inp.cfg;
    let vocab = Vocabulary::default_vocab();
    let palette = Palette::default_palette();
    let records: Vec<_> = inp.corpus.fulls().filter(|r| cfg.is_holdout(r.scene_index())).collect();
    let mut rng = eval_rng(cfg, 0x61);
    let picks = pick_indices(records.len(), limit, &mut rng);
    let mut cond_sum = 0.0f64;
    let mut uncond_sum = 0.0f64;
    let mut n = 0usize;
    for &pi in &picks {
        let full = inp.corpus.load_full(records[pi])?;
        let image = full.image.to_tensor();
        let caption_ids = tokenize(&full.caption, &vocab)?;
        let mut drng = musemask_core::rng::rng_from_seed(eval_seed(cfg, 0x62, pi as u64));
        // hole = support of a random present class
        let hist = full.s_n.histogram();
        let present: Vec<u8> = (1..8u8).filter(|&c| hist[c as usize] > 0).collect();
        if present.is_empty() {
            continue;
        }
        let class = present[drng.random_range(0..present.len())];
        let hole = mask_support(&full.s_n, class);
        let t = drng.random_range(1..=inp.schedule.t_count());
        let mut eps = Tensor::zeros(&[1, 3, full.s_n.height(), full.s_n.width()]);
        for v in eps.data_mut() {
            *v = StandardNormal.sample(&mut drng);
        }
        let z0 = batch1(&image);
        let z_t = q_sample(&z0, &[t], &eps, inp.schedule)?;
        let mut masked = image.clone();
        let plane = full.s_n.width() * full.s_n.height();
        for c in 0..3 {
            for p in 0..plane {
                if hole.data()[p] != 0 {
                    masked.data_mut()[c * plane + p] = 0.0;
                }
            }
        }
        let hole_t = Tensor::from_vec(
            &[1, 1, full.s_n.height(), full.s_n.width()],
            hole.data().iter().map(|&v| v as f32).collect(),
        );
        let cond = EditCond {
            masked_ref: batch1(&masked),
            hole: hole_t,
            text_ids: caption_ids,
        };
        let c_m = batch1(&palette_encode(&full.s_n, &palette));
        let base = inp.base.ok_or_else(|| musemask_core::error::Error::MissingArtifact("edit base model".into()))?;
        let branch = inp.branch.ok_or_else(|| musemask_core::error::Error::MissingArtifact("control branch".into()))?;
        let pred_cond = base.predict_controlled(branch, &z_t, &cond, &c_m, &[t]);
        let pred_uncond = base.predict(&z_t, &cond, &[t]);
        cond_sum += eps_loss(&eps, &pred_cond) as f64;
        uncond_sum += eps_loss(&eps, &pred_uncond) as f64;
        n += 1;
    }
    Ok(Stage2Loss {
        cond: cond_sum / n.max(1) as f64,
        uncond: uncond_sum / n.max(1) as f64,
        n,
    })
}

pub struct ImageEditStats {
    pub inside_agreement: f64,
    pub n: usize,
}

/// Full image edits on held-out pairs (repaint S_n → S_k); classify the
/// repainted region by nearest render base color against the target map.
pub fn eval_image_edits(inp: &EvalInputs, limit: usize) -> Result<ImageEditStats> {
    let cfg = inp.cfg;
    let vocab = Vocabulary::default_vocab();
    let palette = Palette::default_palette();
    let records: Vec<_> = inp
        .corpus
        .pairs()
        .filter(|r| cfg.is_holdout(r.scene_index()))
        .collect();
    let mut rng = eval_rng(cfg, 0x71);
    let picks = pick_indices(records.len(), limit, &mut rng);
    let mut agree_sum = 0.0f64;
    let mut n = 0usize;
    for &pi in &picks {
        let rec = records[pi];
        let p = inp.corpus.load_pair(rec)?;
        let full_rec = inp
            .corpus
            .fulls()
            .find(|r| r.scene_index() == rec.scene_index())
            .expect("pair has a parent scene");
        let full = inp.corpus.load_full(full_rec)?;
        let caption_ids = tokenize(&full.caption, &vocab)?;
        let spec = SamplerSpec::new(
            cfg.sampler.steps,
            cfg.sampler.stage2_guidance,
            eval_seed(cfg, 0x72, pi as u64),
        );
        let base = inp.base.ok_or_else(|| musemask_core::error::Error::MissingArtifact("edit base model".into()))?;
        let branch = inp.branch.ok_or_else(|| musemask_core::error::Error::MissingArtifact("control branch".into()))?;
        let out = edit_image(
            base,
            branch,
            &full.image,
            &p.s_n,
            &p.s_k,
            &caption_ids,
            &palette,
            &spec,
            inp.schedule,
        )?;
        if out.noop {
            continue;
        }
        let classified = classify_render(&out.image);
        let mut same = 0usize;
        let mut tot = 0usize;
        for px in 0..p.s_k.labels().len() {
            if out.edit_region.data()[px] != 0 {
                tot += 1;
                if classified.labels()[px] == p.s_k.labels()[px] {
                    same += 1;
                }
            }
        }
        if tot > 0 {
            agree_sum += same as f64 / tot as f64;
            n += 1;
        }
    }
    Ok(ImageEditStats {
        inside_agreement: agree_sum / n.max(1) as f64,
        n,
    })
}

pub fn run_eval(inp: &EvalInputs) -> Result<EvalReport> {
    let cfg = inp.cfg;
    let recon = eval_ae_recon(cfg, inp.corpus, inp.ae, cfg.eval.n_recon)?;
    let (s1_loss, _) = eval_stage1_loss(inp, cfg.eval.n_loss_pairs)?;
    let gen = eval_outside_agreement(inp, cfg.eval.n_edit_tasks)?;
    let div = eval_diversity(inp, cfg.eval.n_seed_pairs)?;
    let (insert_base, _) = eval_insertion(inp, inp.unet, cfg.eval.n_insert_prompts)?;
    let insert_ft = match inp.unet_insert {
        Some(m) => eval_insertion(inp, m, cfg.eval.n_insert_prompts)?.0,
        None => insert_base,
    };
    let s2 = eval_stage2_loss(inp, cfg.eval.n_loss_pairs)?;
    let edits = eval_image_edits(inp, cfg.eval.n_image_edits)?;
    let w1 = if gen.generated.is_empty() {
        0.0
    } else {
        class_area_w1(&gen.generated, &gen.holdout_maps)?
    };

    let mut metrics = BTreeMap::new();
    metrics.insert("ae_acc_gated".into(), recon.acc_gated);
    metrics.insert("ae_acc_plain".into(), recon.acc_plain);
    metrics.insert("ae_mae_inside".into(), recon.mae_inside);
    metrics.insert("ae_mae_outside".into(), recon.mae_outside);
    metrics.insert("ae_psnr_gated".into(), recon.psnr_gated);
    metrics.insert("ae_psnr_plain".into(), recon.psnr_plain);
    metrics.insert("class_area_w1".into(), w1);
    metrics.insert("stage1_diversity_mean".into(), div.mean_score);
    metrics.insert("stage1_diversity_positive_rate".into(), div.positive_rate);
    metrics.insert("stage1_eps_loss".into(), s1_loss);
    metrics.insert("stage1_insert_success".into(), insert_ft);
    metrics.insert("stage1_insert_success_base".into(), insert_base);
    metrics.insert("stage1_outside_agreement".into(), gen.outside_agreement);
    metrics.insert("stage2_cond_loss".into(), s2.cond);
    metrics.insert("stage2_inside_agreement".into(), edits.inside_agreement);
    metrics.insert("stage2_uncond_loss".into(), s2.uncond);

    let sample_count = inp
        .corpus
        .records
        .iter()
        .filter(|r| cfg.is_holdout(r.scene_index()))
        .count();
    Ok(EvalReport {
        metrics,
        sample_count,
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
    })
}

/// The fixed metric key set of a report (for interface tests).
pub fn report_keys() -> Vec<&'static str> {
    vec![
        "ae_acc_gated",
        "ae_acc_plain",
        "ae_mae_inside",
        "ae_mae_outside",
        "ae_psnr_gated",
        "ae_psnr_plain",
        "class_area_w1",
        "stage1_diversity_mean",
        "stage1_diversity_positive_rate",
        "stage1_eps_loss",
        "stage1_insert_success",
        "stage1_insert_success_base",
        "stage1_outside_agreement",
        "stage2_cond_loss",
        "stage2_inside_agreement",
        "stage2_uncond_loss",
    ]
}

// silence unused import when Mask is only used in signatures upstream
#[allow(dead_code)]
fn _mask_witness(_: &Mask) {}
