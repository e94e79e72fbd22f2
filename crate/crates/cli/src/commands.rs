//! Subcommand implementations. Every command validates its configuration
//! first, loads what it needs (missing inputs fail before any work), and
//! writes its artifacts atomically plus a run log.

use crate::config::{EditRequest, RunConfig};
use crate::runlog::RunLog;
use musemask_core::autoencoder::{self, MaskAwareAutoencoder, SkipPair};
use musemask_core::checkpoint::Checkpoint;
use musemask_core::diffusion_core::{make_schedule, NoiseSchedule, SamplerSpec};
use musemask_core::edit_control::{
    self, edit_image, make_control_branch, BaseEditNet, ControlBranch, EditExample,
    EditTrainOpts,
};
use musemask_core::error::{Error, Result};
use musemask_core::mask_unet::{
    self, generate_mask, EditMode, EditTask, LatentStats, MaskUNet, MaskDiffTrainOpts,
    PairExample,
};
use musemask_core::metrics::EvalReport;
use musemask_core::nn::{param_fingerprint, Params, Tensor};
use musemask_core::rng::{derive_seed, rng_from_seed, stream};
use musemask_core::semantic_maps::{
    self, mask_support, palette_decode, palette_encode, Palette, SemanticMap,
};
use musemask_core::synth_dataset::{
    self, build_dataset, render::write_ppm, tokenize, Corpus, Image, Vocabulary,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

pub const AE_BASE: &str = "ae_base.mkdf";
pub const AE_SKIPS: &str = "ae_skips.mkdf";
pub const MASKDIFF: &str = "maskdiff.mkdf";
pub const MASKDIFF_INSERT: &str = "maskdiff_insert.mkdf";
pub const EDIT_BASE: &str = "edit_base.mkdf";
pub const EDIT_CONTROL: &str = "edit_control.mkdf";

fn corpus_dir(out: &Path) -> PathBuf {
    out.join("corpus")
}

fn schedule_of(cfg: &RunConfig) -> Result<NoiseSchedule> {
    make_schedule(cfg.diffusion.t_count, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
}

fn open_corpus(cfg: &RunConfig, out: &Path) -> Result<Corpus> {
    let _ = cfg;
    Corpus::open(&corpus_dir(out))
}

// ---- gen-data ----

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut scene_cfg = cfg.data.scene.clone();
    scene_cfg.seed = cfg.seed;
    let records = build_dataset(cfg.data.n_scenes, &scene_cfg, &corpus_dir(out), cfg.workers())?;
    RunLog::new("gen-data", &cfg.config_hash(), cfg.seed)
        .note("records", records.len())
        .note("scenes", cfg.data.n_scenes)
        .write(out)?;
    Ok(())
}

// ---- autoencoder phases ----

fn encode_fulls(cfg: &RunConfig, corpus: &Corpus, holdout: bool) -> Result<Vec<Tensor>> {
    let palette = Palette::default_palette();
    let mut xs = Vec::new();
    for r in corpus.fulls() {
        if cfg.is_holdout(r.scene_index()) != holdout {
            continue;
        }
        let full = corpus.load_full(r)?;
        xs.push(palette_encode(&full.s_n, &palette));
    }
    Ok(xs)
}

pub fn cmd_train_ae(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let corpus = open_corpus(cfg, out)?;
    let data = encode_fulls(cfg, &corpus, false)?;
    let mut model = MaskAwareAutoencoder::new(cfg.ae.to_ae_config(), derive_seed(cfg.seed, stream::MODEL_INIT))?;
    let opts = autoencoder::AeTrainOpts {
        steps: cfg.ae.base_steps,
        batch: cfg.ae.base_batch,
        lr: cfg.ae.base_lr,
        warmup: cfg.ae.base_warmup,
        seed: derive_seed(cfg.seed, stream::TRAIN_NOISE),
        lambda_l1: cfg.ae.lambda_l1,
        lambda_perc: cfg.ae.lambda_perc,
        log_every: 50,
    };
    let curve = autoencoder::train_ae_base(&mut model, &data, &opts)?;
    let stats = mask_unet::latent_stats(&model, &data[..data.len().min(256)]);
    let mut meta = base_meta(cfg, model.arch_hash(), "ae_base");
    meta.insert("latent_mean".into(), stats.mean.to_string());
    meta.insert("latent_std".into(), stats.std.to_string());
    Checkpoint::from_model(&mut model, meta).save(&out.join(AE_BASE))?;
    RunLog::new("train-ae", &cfg.config_hash(), cfg.seed)
        .with_curve(curve)
        .note("latent_mean", stats.mean)
        .note("latent_std", stats.std)
        .write(out)?;
    Ok(())
}

fn base_meta(cfg: &RunConfig, arch_hash: String, kind: &str) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("config_hash".into(), cfg.config_hash());
    meta.insert("arch_hash".into(), arch_hash);
    meta.insert("kind".into(), kind.into());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta
}

pub fn load_ae(cfg: &RunConfig, path: &Path) -> Result<(MaskAwareAutoencoder, LatentStats)> {
    let mut model = MaskAwareAutoencoder::new(cfg.ae.to_ae_config(), 0)?;
    let arch = model.arch_hash();
    let ckpt = musemask_core::checkpoint::load_checked(path, &mut model, &arch)?;
    let stats = LatentStats {
        mean: meta_f32(&ckpt.meta, "latent_mean")?,
        std: meta_f32(&ckpt.meta, "latent_std")?,
    };
    Ok((model, stats))
}

fn meta_f32(meta: &BTreeMap<String, String>, key: &str) -> Result<f32> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("checkpoint meta lacks {key}")))
}

fn skip_pairs(cfg: &RunConfig, corpus: &Corpus, holdout: bool) -> Result<Vec<SkipPair>> {
    let palette = Palette::default_palette();
    let mut pairs = Vec::new();
    for r in corpus.pairs() {
        if cfg.is_holdout(r.scene_index()) != holdout {
            continue;
        }
        let p = corpus.load_pair(r)?;
        pairs.push(SkipPair {
            target: palette_encode(&p.s_n, &palette),
            aux: palette_encode(&p.s_k, &palette),
            mask: p.m_k,
        });
    }
    Ok(pairs)
}

pub fn cmd_train_skip(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let corpus = open_corpus(cfg, out)?;
    let (mut model, stats) = load_ae(cfg, &out.join(AE_BASE))?;
    model.cfg.gated = cfg.ae.gated;
    let enc_before = param_fingerprint(&mut model.encoder);
    let dec_before = param_fingerprint(&mut model.decoder);
    let pairs = skip_pairs(cfg, &corpus, false)?;
    let opts = autoencoder::AeTrainOpts {
        steps: cfg.ae.skip_steps,
        batch: cfg.ae.skip_batch,
        lr: cfg.ae.skip_lr,
        warmup: cfg.ae.skip_warmup,
        seed: derive_seed(cfg.seed, stream::TRAIN_NOISE ^ 0xa),
        lambda_l1: cfg.ae.lambda_l1,
        lambda_perc: cfg.ae.lambda_perc,
        log_every: 50,
    };
    let curve = autoencoder::train_skip_modules(&mut model, &pairs, &opts)?;
    if param_fingerprint(&mut model.encoder) != enc_before
        || param_fingerprint(&mut model.decoder) != dec_before
    {
        return Err(Error::Training {
            step: cfg.ae.skip_steps,
            msg: "frozen encoder/decoder parameters changed".into(),
        });
    }
    let mut meta = base_meta(cfg, model.arch_hash(), "ae_skips");
    meta.insert("latent_mean".into(), stats.mean.to_string());
    meta.insert("latent_std".into(), stats.std.to_string());
    meta.insert("gated".into(), cfg.ae.gated.to_string());
    Checkpoint::from_model(&mut model, meta).save(&out.join(AE_SKIPS))?;
    RunLog::new("train-skip", &cfg.config_hash(), cfg.seed)
        .with_curve(curve)
        .note("gated", cfg.ae.gated)
        .write(out)?;
    Ok(())
}

// ---- stage-1 diffusion ----

/// Encode every needed map once (S_n latents shared across a scene's pairs).
struct LatentCache<'a> {
    ae: &'a MaskAwareAutoencoder,
    stats: LatentStats,
    palette: Palette,
    cache: HashMap<String, Tensor>,
}

impl<'a> LatentCache<'a> {
    fn new(ae: &'a MaskAwareAutoencoder, stats: LatentStats) -> Self {
        LatentCache {
            ae,
            stats,
            palette: Palette::default_palette(),
            cache: HashMap::new(),
        }
    }

    fn latent(&mut self, key: &str, map: &SemanticMap) -> Tensor {
        if let Some(t) = self.cache.get(key) {
            return t.clone();
        }
        let x = palette_encode(map, &self.palette);
        let mut dims = vec![1];
        dims.extend_from_slice(x.dims());
        let enc = self.ae.encode(&x.clone().reshape(&dims));
        let l = self.stats.standardize(&enc.latent);
        let dims = l.dims()[1..].to_vec();
        let l = l.reshape(&dims);
        self.cache.insert(key.to_string(), l.clone());
        l
    }
}

fn pair_examples(
    cfg: &RunConfig,
    corpus: &Corpus,
    ae: &MaskAwareAutoencoder,
    stats: LatentStats,
    holdout: bool,
    insertion_classes: bool,
) -> Result<Vec<PairExample>> {
    let vocab = Vocabulary::default_vocab();
    let mut cache = LatentCache::new(ae, stats);
    let mut examples = Vec::new();
    for r in corpus.pairs() {
        if cfg.is_holdout(r.scene_index()) != holdout {
            continue;
        }
        let class = r.class_id.expect("pair record has class");
        if cfg.stage1.insert_classes.contains(&class) != insertion_classes {
            continue;
        }
        let p = corpus.load_pair(r)?;
        examples.push(PairExample {
            z0: cache.latent(&r.map_sn, &p.s_n),
            cond_latent: cache.latent(r.map_sk.as_ref().expect("pair has S_k"), &p.s_k),
            text_ids: tokenize(&p.edit_text, &vocab)?,
        });
    }
    Ok(examples)
}

pub fn cmd_train_maskdiff(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let corpus = open_corpus(cfg, out)?;
    let (ae, stats) = load_ae(cfg, &out.join(AE_BASE))?;
    let examples = pair_examples(cfg, &corpus, &ae, stats, false, false)?;
    let schedule = schedule_of(cfg)?;
    let mut model = MaskUNet::new(cfg.stage1.to_unet_config(), derive_seed(cfg.seed, stream::MODEL_INIT ^ 0x1));
    let opts = MaskDiffTrainOpts {
        steps: cfg.stage1.steps,
        batch: cfg.stage1.batch,
        lr: cfg.stage1.lr,
        warmup: cfg.stage1.warmup,
        seed: derive_seed(cfg.seed, stream::TRAIN_NOISE ^ 0x1),
        cfg_dropout: cfg.stage1.cfg_dropout,
        log_every: 50,
    };
    let curve = mask_unet::train_mask_model(&mut model, &examples, &schedule, &opts)?;
    let meta = base_meta(cfg, model.arch_hash(), "maskdiff");
    Checkpoint::from_model(&mut model, meta).save(&out.join(MASKDIFF))?;
    RunLog::new("train-maskdiff", &cfg.config_hash(), cfg.seed)
        .with_curve(curve)
        .note("examples", examples.len())
        .write(out)?;
    Ok(())
}

pub fn load_maskdiff(cfg: &RunConfig, path: &Path) -> Result<MaskUNet> {
    let mut model = MaskUNet::new(cfg.stage1.to_unet_config(), 0);
    let arch = model.arch_hash();
    musemask_core::checkpoint::load_checked(path, &mut model, &arch)?;
    Ok(model)
}

pub fn cmd_finetune_insert(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let corpus = open_corpus(cfg, out)?;
    let (ae, stats) = load_ae(cfg, &out.join(AE_BASE))?;
    let examples = pair_examples(cfg, &corpus, &ae, stats, false, true)?;
    let schedule = schedule_of(cfg)?;
    let mut model = load_maskdiff(cfg, &out.join(MASKDIFF))?;
    let rest_before = non_conv_in_fingerprint(&mut model);
    let opts = MaskDiffTrainOpts {
        steps: cfg.stage1.insert_steps,
        batch: cfg.stage1.batch,
        lr: cfg.stage1.insert_lr,
        warmup: cfg.stage1.warmup.min(cfg.stage1.insert_steps / 4),
        seed: derive_seed(cfg.seed, stream::TRAIN_NOISE ^ 0x2),
        cfg_dropout: cfg.stage1.cfg_dropout,
        log_every: 50,
    };
    let curve = mask_unet::finetune_insertion(&mut model, &examples, &schedule, &opts)?;
    if non_conv_in_fingerprint(&mut model) != rest_before {
        return Err(Error::Training {
            step: cfg.stage1.insert_steps,
            msg: "frozen parameters changed during insertion fine-tune".into(),
        });
    }
    let meta = base_meta(cfg, model.arch_hash(), "maskdiff_insert");
    Checkpoint::from_model(&mut model, meta).save(&out.join(MASKDIFF_INSERT))?;
    RunLog::new("finetune-insert", &cfg.config_hash(), cfg.seed)
        .with_curve(curve)
        .note("examples", examples.len())
        .write(out)?;
    Ok(())
}

pub fn non_conv_in_fingerprint(model: &mut MaskUNet) -> u64 {
    let mut out = Vec::new();
    model.visit_params("", &mut out);
    let mut h = 0u64;
    for (name, p) in out {
        if !name.starts_with("conv_in") {
            h ^= musemask_core::rng::hash_f32s(&p.w)
                .wrapping_add(musemask_core::rng::fnv1a64(name.as_bytes()));
        }
    }
    h
}

// ---- stage-2 ----

fn edit_examples(cfg: &RunConfig, corpus: &Corpus, holdout: bool) -> Result<Vec<EditExample>> {
    let vocab = Vocabulary::default_vocab();
    let mut out = Vec::new();
    for r in corpus.fulls() {
        if cfg.is_holdout(r.scene_index()) != holdout {
            continue;
        }
        let full = corpus.load_full(r)?;
        out.push(EditExample {
            image: full.image.to_tensor(),
            map: full.s_n,
            caption_ids: tokenize(&full.caption, &vocab)?,
        });
    }
    Ok(out)
}

pub fn cmd_train_base(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let corpus = open_corpus(cfg, out)?;
    let examples = edit_examples(cfg, &corpus, false)?;
    let schedule = schedule_of(cfg)?;
    let mut model = BaseEditNet::new(cfg.stage2.to_base_config(), derive_seed(cfg.seed, stream::MODEL_INIT ^ 0x2));
    let opts = EditTrainOpts {
        steps: cfg.stage2.steps,
        batch: cfg.stage2.batch,
        lr: cfg.stage2.lr,
        warmup: cfg.stage2.warmup,
        seed: derive_seed(cfg.seed, stream::TRAIN_NOISE ^ 0x3),
        cfg_dropout: cfg.stage2.cfg_dropout,
        log_every: 50,
    };
    let curve = edit_control::train_base(&mut model, &examples, &schedule, &opts)?;
    let meta = base_meta(cfg, model.arch_hash(), "edit_base");
    Checkpoint::from_model(&mut model, meta).save(&out.join(EDIT_BASE))?;
    RunLog::new("train-base", &cfg.config_hash(), cfg.seed)
        .with_curve(curve)
        .note("examples", examples.len())
        .write(out)?;
    Ok(())
}

pub fn load_edit_base(cfg: &RunConfig, path: &Path) -> Result<BaseEditNet> {
    let mut model = BaseEditNet::new(cfg.stage2.to_base_config(), 0);
    let arch = model.arch_hash();
    musemask_core::checkpoint::load_checked(path, &mut model, &arch)?;
    Ok(model)
}

pub fn load_control(cfg: &RunConfig, base: &mut BaseEditNet, path: &Path) -> Result<ControlBranch> {
    let mut branch = make_control_branch(base, 0);
    let ckpt = Checkpoint::load(path)?;
    if let Some(stored) = ckpt.meta.get("arch_hash") {
        let want = cfg.stage2.to_base_config().arch_hash();
        if *stored != want {
            return Err(Error::Config(format!(
                "control checkpoint built for architecture {stored}, expected {want}"
            )));
        }
    }
    ckpt.apply_to(&mut branch)?;
    Ok(branch)
}

pub fn cmd_train_control(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let corpus = open_corpus(cfg, out)?;
    let examples = edit_examples(cfg, &corpus, false)?;
    let schedule = schedule_of(cfg)?;
    let mut base = load_edit_base(cfg, &out.join(EDIT_BASE))?;
    let base_before = param_fingerprint(&mut base);
    let mut branch = make_control_branch(&mut base, derive_seed(cfg.seed, stream::MODEL_INIT ^ 0x3));
    let palette = Palette::default_palette();
    let opts = EditTrainOpts {
        steps: cfg.stage2.control_steps,
        batch: cfg.stage2.control_batch,
        lr: cfg.stage2.control_lr,
        warmup: cfg.stage2.warmup,
        seed: derive_seed(cfg.seed, stream::TRAIN_NOISE ^ 0x4),
        cfg_dropout: cfg.stage2.cfg_dropout,
        log_every: 50,
    };
    let curve = edit_control::train_control(&mut base, &mut branch, &examples, &palette, &schedule, &opts)?;
    let base_after = param_fingerprint(&mut base);
    if base_after != base_before {
        return Err(Error::Training {
            step: cfg.stage2.control_steps,
            msg: "frozen base parameters changed during control training".into(),
        });
    }
    let mut meta = base_meta(cfg, cfg.stage2.to_base_config().arch_hash(), "edit_control");
    meta.insert("base_fingerprint_before".into(), format!("{base_before:016x}"));
    meta.insert("base_fingerprint_after".into(), format!("{base_after:016x}"));
    Checkpoint::from_model(&mut branch, meta).save(&out.join(EDIT_CONTROL))?;
    RunLog::new("train-control", &cfg.config_hash(), cfg.seed)
        .with_curve(curve)
        .write(out)?;
    Ok(())
}

// ---- end-to-end edit ----

#[derive(Debug, Serialize)]
pub struct EditOutcome {
    pub map_path: PathBuf,
    pub image_path: PathBuf,
    pub record_path: PathBuf,
    pub noop: bool,
    pub target_class: u8,
}

pub fn cmd_edit(cfg: &RunConfig, out: &Path, request: &EditRequest, name: &str) -> Result<EditOutcome> {
    cfg.validate()?;
    let mode = match request.mode.as_str() {
        "edit" => EditMode::Edit,
        "insert" => EditMode::Insert,
        other => return Err(Error::Config(format!("unknown mode {other:?}"))),
    };
    let vocab = Vocabulary::default_vocab();
    let palette = Palette::default_palette();
    let schedule = schedule_of(cfg)?;
    let steps = request.steps.unwrap_or(cfg.sampler.steps);
    let guidance = request.guidance.unwrap_or(cfg.sampler.guidance);

    // all artifacts must exist before any output is written
    let (ae, stats) = load_ae(cfg, &out.join(AE_SKIPS))?;
    let stage1_path = match mode {
        EditMode::Edit => out.join(MASKDIFF),
        EditMode::Insert => out.join(MASKDIFF_INSERT),
    };
    let unet = load_maskdiff(cfg, &stage1_path)?;
    let mut base = load_edit_base(cfg, &out.join(EDIT_BASE))?;
    let branch = load_control(cfg, &mut base, &out.join(EDIT_CONTROL))?;

    let reference = synth_dataset::read_ppm(Path::new(&request.reference))?;
    let cond_map = semantic_maps::read_map(Path::new(&request.map))?;
    let user_mask = match &request.user_mask_rle {
        Some(runs) => Some(semantic_maps::rle_decode(runs, cond_map.width(), cond_map.height())?),
        None => None,
    };
    let caption_ids = tokenize(&request.caption, &vocab)?;

    let task = EditTask {
        mode,
        cond_map: cond_map.clone(),
        edit_text: request.edit_text.clone(),
        user_mask,
        mask_aware_decode: request
            .mask_aware_decode
            .unwrap_or(mode == EditMode::Edit),
    };
    let stage1_seed = derive_seed(derive_seed(request.seed, stream::SAMPLER), 1);
    let stage2_seed = derive_seed(derive_seed(request.seed, stream::SAMPLER), 2);
    let spec1 = SamplerSpec::new(steps, guidance, stage1_seed);
    let generated = generate_mask(&task, &ae, &unet, &vocab, &palette, stats, &spec1, &schedule)?;

    let spec2 = SamplerSpec::new(steps, request.guidance.unwrap_or(cfg.sampler.stage2_guidance), stage2_seed);
    let edited = edit_image(
        &base,
        &branch,
        &reference,
        &cond_map,
        &generated.map,
        &caption_ids,
        &palette,
        &spec2,
        &schedule,
    )?;

    let dir = out.join("edits");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let map_path = dir.join(format!("{name}_map.pgm"));
    let image_path = dir.join(format!("{name}_img.ppm"));
    let record_path = dir.join(format!("{name}_record.json"));
    semantic_maps::write_map(&generated.map, &map_path)?;
    write_ppm(&edited.image, &image_path)?;
    let record = serde_json::json!({
        "config_hash": cfg.config_hash(),
        "seed": request.seed,
        "stage1_seed": stage1_seed,
        "stage2_seed": stage2_seed,
        "steps": steps,
        "guidance": guidance,
        "mode": request.mode,
        "edit_text": request.edit_text,
        "caption": request.caption,
        "target_class": generated.target_class,
        "noop": edited.noop,
    });
    std::fs::write(&record_path, serde_json::to_string_pretty(&record).expect("record"))
        .map_err(|e| Error::io(&record_path, e))?;
    Ok(EditOutcome {
        map_path,
        image_path,
        record_path,
        noop: edited.noop,
        target_class: generated.target_class,
    })
}

// ---- sample grid ----

/// Stage-1 task file: {"mode","map","edit_text","user_mask_rle"?,"seed","steps","guidance"}.
#[derive(Deserialize)]
pub struct Stage1TaskFile {
    pub mode: String,
    pub map: String,
    pub edit_text: String,
    #[serde(default)]
    pub user_mask_rle: Option<Vec<usize>>,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
}

pub fn cmd_sample_grid(cfg: &RunConfig, out: &Path, task_path: &Path, n_seeds: usize) -> Result<()> {
    cfg.validate()?;
    let text = std::fs::read_to_string(task_path).map_err(|e| Error::io(task_path, e))?;
    let task_file: Stage1TaskFile =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("task file: {e}")))?;
    let mode = match task_file.mode.as_str() {
        "edit" => EditMode::Edit,
        "insert" => EditMode::Insert,
        other => return Err(Error::Config(format!("unknown mode {other:?}"))),
    };
    let (ae, stats) = load_ae(cfg, &out.join(AE_SKIPS))?;
    let unet = load_maskdiff(
        cfg,
        &out.join(if mode == EditMode::Edit { MASKDIFF } else { MASKDIFF_INSERT }),
    )?;
    let vocab = Vocabulary::default_vocab();
    let palette = Palette::default_palette();
    let schedule = schedule_of(cfg)?;
    let cond_map = semantic_maps::read_map(Path::new(&task_file.map))?;
    let user_mask = match &task_file.user_mask_rle {
        Some(runs) => Some(semantic_maps::rle_decode(runs, cond_map.width(), cond_map.height())?),
        None => None,
    };
    let task = EditTask {
        mode,
        cond_map,
        edit_text: task_file.edit_text.clone(),
        user_mask,
        mask_aware_decode: mode == EditMode::Edit,
    };

    let dir = out.join("grid");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (w, h) = (task.cond_map.width(), task.cond_map.height());
    let mut grid = Image {
        width: w * n_seeds,
        height: h,
        rgb: vec![0; w * n_seeds * h * 3],
    };
    for s in 0..n_seeds {
        let seed = derive_seed(derive_seed(task_file.seed, stream::SAMPLER), s as u64);
        let spec = SamplerSpec::new(task_file.steps, task_file.guidance, seed);
        let g = generate_mask(&task, &ae, &unet, &vocab, &palette, stats, &spec, &schedule)?;
        semantic_maps::write_map(&g.map, &dir.join(format!("seed_{s}.pgm")))?;
        for y in 0..h {
            for x in 0..w {
                let color = palette.colors()[g.map.get(x, y) as usize];
                let o = (y * grid.width + s * w + x) * 3;
                grid.rgb[o..o + 3].copy_from_slice(&color);
            }
        }
    }
    write_ppm(&grid, &dir.join("grid.ppm"))?;
    RunLog::new("sample-grid", &cfg.config_hash(), task_file.seed)
        .note("seeds", n_seeds)
        .write(out)?;
    Ok(())
}

// ---- eval ----

pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let corpus = open_corpus(cfg, out)?;
    let (ae, stats) = load_ae(cfg, &out.join(AE_SKIPS))?;
    let unet = load_maskdiff(cfg, &out.join(MASKDIFF))?;
    let unet_insert = load_maskdiff(cfg, &out.join(MASKDIFF_INSERT))?;
    let mut base = load_edit_base(cfg, &out.join(EDIT_BASE))?;
    let branch = load_control(cfg, &mut base, &out.join(EDIT_CONTROL))?;
    let schedule = schedule_of(cfg)?;

    let ev = crate::evalsuite::EvalInputs {
        cfg,
        corpus: &corpus,
        ae: &ae,
        stats,
        unet: &unet,
        unet_insert: Some(&unet_insert),
        base: Some(&base),
        branch: Some(&branch),
        schedule: &schedule,
    };
    let report = crate::evalsuite::run_eval(&ev)?;
    report.validate()?;
    let path = out.join("report.json");
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, report.to_json()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    RunLog::new("eval", &cfg.config_hash(), cfg.seed)
        .note("samples", report.sample_count)
        .write(out)?;
    Ok(report)
}

// small re-exports used by the eval suite and acceptance tests
pub use musemask_core::metrics::mask_accuracy;

/// Decode helper: palette-decode a [1,3,H,W] tensor into a map.
pub fn decode_map(t: &Tensor, palette: &Palette) -> Result<SemanticMap> {
    let dims = t.dims();
    let plane = t.clone().reshape(&[dims[1], dims[2], dims[3]]);
    palette_decode(&plane, palette)
}

/// Ignore-list helper shared with the acceptance suite: held-out pair
/// records usable as mask-free edit tasks (visible support, edit classes).
pub fn eval_edit_records<'a>(cfg: &'a RunConfig, corpus: &'a Corpus) -> Vec<&'a synth_dataset::ManifestRecord> {
    corpus
        .pairs()
        .filter(|r| cfg.is_holdout(r.scene_index()))
        .filter(|r| !cfg.stage1.insert_classes.contains(&r.class_id.expect("pair class")))
        .collect()
}

/// Deterministic per-index eval seeds.
pub fn eval_seed(cfg: &RunConfig, tag: u64, i: u64) -> u64 {
    derive_seed(derive_seed(derive_seed(cfg.seed, stream::EVAL), tag), i)
}

/// Build a mask-free edit task from a held-out pair record.
pub fn task_from_record(
    corpus: &Corpus,
    record: &synth_dataset::ManifestRecord,
) -> Result<(EditTask, SemanticMap)> {
    let p = corpus.load_pair(record)?;
    let task = EditTask {
        mode: EditMode::Edit,
        cond_map: p.s_n.clone(),
        edit_text: p.edit_text.clone(),
        user_mask: None,
        mask_aware_decode: true,
    };
    Ok((task, p.s_n))
}

/// Insertion prompts over held-out scenes lacking the class.
pub fn insertion_prompts(
    cfg: &RunConfig,
    corpus: &Corpus,
    limit: usize,
) -> Result<Vec<(SemanticMap, String, u8)>> {
    let texts: HashMap<u8, &str> = [(6u8, "round eyeglasses"), (7u8, "flat hat")].into();
    let mut out = Vec::new();
    for r in corpus.fulls() {
        if !cfg.is_holdout(r.scene_index()) {
            continue;
        }
        let full = corpus.load_full(r)?;
        for &class in &cfg.stage1.insert_classes {
            if full.s_n.histogram()[class as usize] == 0 {
                if let Some(t) = texts.get(&class) {
                    out.push((full.s_n.clone(), t.to_string(), class));
                }
            }
        }
        if out.len() >= limit {
            break;
        }
    }
    out.truncate(limit);
    Ok(out)
}

/// Median amodal mask area per class over the training pairs.
pub fn train_class_medians(cfg: &RunConfig, corpus: &Corpus) -> Result<[usize; 8]> {
    let mut areas: [Vec<usize>; 8] = Default::default();
    for r in corpus.pairs() {
        if cfg.is_holdout(r.scene_index()) {
            continue;
        }
        let class = r.class_id.expect("pair class");
        let runs = r.mask_mk_rle.as_ref().expect("pair mask");
        // count ones straight from the run lengths (odd runs are ones)
        let ones: usize = runs.iter().skip(1).step_by(2).sum();
        areas[class as usize].push(ones);
    }
    Ok(mask_unet::class_area_medians(&areas))
}

/// Random mask-free gate support check helper for the no-op edit path.
pub fn identical_map_edit_is_noop(
    base: &BaseEditNet,
    branch: &ControlBranch,
    image: &Image,
    map: &SemanticMap,
    caption_ids: &[usize],
    schedule: &NoiseSchedule,
) -> Result<bool> {
    let palette = Palette::default_palette();
    let spec = SamplerSpec::new(4, 0.0, 1);
    let out = edit_image(base, branch, image, map, map, caption_ids, &palette, &spec, schedule)?;
    Ok(out.noop && out.image == *image)
}

/// Convenience used in a few tests: fraction of support pixels.
pub fn support_fraction(map: &SemanticMap, class: u8) -> f64 {
    mask_support(map, class).count_ones() as f64 / (map.width() * map.height()) as f64
}

/// Deterministic mini RNG for eval task subsampling.
pub fn eval_rng(cfg: &RunConfig, tag: u64) -> rand_chacha::ChaCha8Rng {
    rng_from_seed(derive_seed(derive_seed(cfg.seed, stream::EVAL), tag))
}

/// Subsample indices without replacement, deterministic.
pub fn pick_indices(n: usize, k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}
