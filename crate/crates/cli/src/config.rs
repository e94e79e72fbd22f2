//! Run configuration: one JSON document with flat sections, every field
//! defaulted, dumpable via --print-config. The FNV hash of the canonical
//! serialization identifies a run; architecture-relevant subsets hash
//! separately so checkpoints can refuse mismatched models.

use musemask_core::autoencoder::{AEConfig, MaskAwareMode};
use musemask_core::edit_control::BaseEditConfig;
use musemask_core::error::{Error, Result};
use musemask_core::mask_unet::MaskUNetConfig;
use musemask_core::rng::fnv1a64;
use musemask_core::semantic_maps::class_id;
use musemask_core::synth_dataset::{SceneConfig, Vocabulary};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub n_scenes: usize,
    pub scene: SceneConfig,
    /// Scenes with index % holdout_mod == holdout_mod - 1 are held out.
    pub holdout_mod: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_scenes: 2000,
            scene: SceneConfig::default(),
            holdout_mod: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AeSection {
    pub widths: [usize; 3],
    pub latent_channels: usize,
    pub gated: bool,
    pub shared_aux_encoder: bool,
    pub base_steps: usize,
    pub base_batch: usize,
    pub base_lr: f64,
    pub base_warmup: usize,
    pub skip_steps: usize,
    pub skip_batch: usize,
    pub skip_lr: f64,
    pub skip_warmup: usize,
    pub lambda_l1: f32,
    pub lambda_perc: f32,
}

impl Default for AeSection {
    fn default() -> Self {
        AeSection {
            widths: [32, 64, 128],
            latent_channels: 4,
            gated: true,
            shared_aux_encoder: true,
            base_steps: 3000,
            base_batch: 8,
            base_lr: 1e-3,
            base_warmup: 100,
            skip_steps: 2000,
            skip_batch: 8,
            skip_lr: 1e-3,
            skip_warmup: 100,
            lambda_l1: 1.0,
            lambda_perc: 0.1,
        }
    }
}

impl AeSection {
    pub fn to_ae_config(&self) -> AEConfig {
        AEConfig {
            in_channels: 3,
            latent_channels: self.latent_channels,
            widths: self.widths,
            mask_aware: MaskAwareMode::NonLinear,
            gated: self.gated,
            shared_aux_encoder: self.shared_aux_encoder,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Section {
    pub widths: [usize; 3],
    pub text_dim: usize,
    pub heads: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub cfg_dropout: f64,
    pub insert_steps: usize,
    pub insert_lr: f64,
    pub insert_classes: Vec<u8>,
}

impl Default for Stage1Section {
    fn default() -> Self {
        Stage1Section {
            widths: [64, 128, 256],
            text_dim: 128,
            heads: 4,
            steps: 15_000,
            batch: 16,
            // paper optimizer defaults; desk-scale configs override lr
            lr: 1e-5,
            warmup: 500,
            cfg_dropout: 0.1,
            insert_steps: 2000,
            insert_lr: 1e-4,
            insert_classes: vec![class_id::EYEGLASSES, class_id::HAT],
        }
    }
}

impl Stage1Section {
    pub fn to_unet_config(&self) -> MaskUNetConfig {
        MaskUNetConfig {
            latent_channels: 4,
            widths: self.widths,
            text_dim: self.text_dim,
            heads: self.heads,
            vocab_size: Vocabulary::default_vocab().len(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Section {
    pub widths: [usize; 3],
    pub head_width: usize,
    pub text_dim: usize,
    pub heads: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub cfg_dropout: f64,
    pub control_steps: usize,
    pub control_batch: usize,
    pub control_lr: f64,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Stage2Section {
            widths: [64, 128, 256],
            head_width: 32,
            text_dim: 128,
            heads: 4,
            steps: 8000,
            batch: 4,
            lr: 1e-4,
            warmup: 500,
            cfg_dropout: 0.1,
            control_steps: 8000,
            control_batch: 4,
            control_lr: 1e-4,
        }
    }
}

impl Stage2Section {
    pub fn to_base_config(&self) -> BaseEditConfig {
        BaseEditConfig {
            widths: self.widths,
            head_width: self.head_width,
            text_dim: self.text_dim,
            heads: self.heads,
            vocab_size: Vocabulary::default_vocab().len(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionSection {
    pub t_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            t_count: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSection {
    pub steps: usize,
    pub guidance: f64,
    pub stage2_guidance: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            steps: 50,
            guidance: 3.0,
            stage2_guidance: 1.5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Held-out edit tasks for outside-mask agreement.
    pub n_edit_tasks: usize,
    /// Seed pairs for the diversity check.
    pub n_seed_pairs: usize,
    /// Held-out insertion prompts.
    pub n_insert_prompts: usize,
    /// Held-out samples for AE reconstruction metrics.
    pub n_recon: usize,
    /// (t, eps) draws per held-out pair for the denoising loss.
    pub n_loss_pairs: usize,
    /// Held-out image edits for inside-region agreement.
    pub n_image_edits: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_edit_tasks: 64,
            n_seed_pairs: 50,
            n_insert_prompts: 64,
            n_recon: 64,
            n_loss_pairs: 128,
            n_image_edits: 16,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub data: DataSection,
    pub ae: AeSection,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    pub diffusion: DiffusionSection,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        if self.data.holdout_mod < 2 {
            return Err(Error::Config("holdout_mod must be ≥ 2".into()));
        }
        if self.diffusion.t_count < 1 {
            return Err(Error::Config("t_count must be ≥ 1".into()));
        }
        if self.sampler.steps < 1 || self.sampler.steps > self.diffusion.t_count {
            return Err(Error::Config(format!(
                "sampler steps {} outside [1, {}]",
                self.sampler.steps, self.diffusion.t_count
            )));
        }
        for (name, lr) in [
            ("ae.base_lr", self.ae.base_lr),
            ("ae.skip_lr", self.ae.skip_lr),
            ("stage1.lr", self.stage1.lr),
            ("stage2.lr", self.stage2.lr),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} = {lr} invalid")));
            }
        }
        if self.stage1.insert_classes.iter().any(|&c| c == 0 || c >= 8) {
            return Err(Error::Config("insert_classes must be in [1, 7]".into()));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn config_hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(canon.as_bytes()))
    }

    /// True when the scene index belongs to the held-out split.
    pub fn is_holdout(&self, scene_index: usize) -> bool {
        scene_index % self.data.holdout_mod == self.data.holdout_mod - 1
    }

    /// Worker count: 1 in deterministic mode, else MUSEMASK_THREADS or
    /// the number of CPUs.
    pub fn workers(&self) -> usize {
        if self.deterministic {
            return 1;
        }
        match std::env::var("MUSEMASK_THREADS") {
            Ok(v) => v.parse().unwrap_or(1).max(1),
            Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        }
    }
}

/// One end-to-end edit request (stage 1 then stage 2).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditRequest {
    pub mode: String,
    /// Reference image (PPM).
    pub reference: String,
    /// Conditioning semantic map (PGM).
    pub map: String,
    pub edit_text: String,
    pub caption: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub user_mask_rle: Option<Vec<usize>>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guidance: Option<f64>,
    /// Defaults per mode: true for edit, false (forced) for insert.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_aware_decode: Option<bool>,
}

impl EditRequest {
    pub fn load(path: &Path) -> Result<EditRequest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_hash_is_stable() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.config_hash(), RunConfig::default().config_hash());
        let mut other = RunConfig::default();
        other.seed = 43;
        assert_ne!(cfg.config_hash(), other.config_hash());
    }

    #[test]
    fn partial_config_files_fill_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 7, "data": {"n_scenes": 12}}"#).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.data.n_scenes, 12);
        assert_eq!(cfg.data.holdout_mod, 10);
        assert_eq!(cfg.stage1.batch, 16);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = RunConfig::default();
        cfg.sampler.steps = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.data.holdout_mod = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.stage1.insert_classes = vec![0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn holdout_split() {
        let cfg = RunConfig::default();
        assert!(cfg.is_holdout(9));
        assert!(cfg.is_holdout(19));
        assert!(!cfg.is_holdout(0));
        assert!(!cfg.is_holdout(8));
    }
}
