//! Procedural corpus of layered face-like scenes: deterministic scene
//! sampling, captioning, rendering, and JSONL manifest assembly.

pub mod captions;
pub(crate) mod shapes;
pub mod render;

pub use captions::{
    caption_scene, detokenize, empty_ids, tokenize, CaptionRecord, Vocabulary, EMPTY_ID,
    MAX_TOKENS, PAD_ID,
};
pub use render::{classify_render, read_ppm, render_scene, write_ppm, Image};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::semantic_maps::{
    self, class_id, compose_layers, rle_encode, write_map, write_scene, InstanceLayer,
    LayeredScene, Mask, SemanticMap,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use shapes::*;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Inclusive parameter range, expressed as a fraction of the canvas size.
pub type Range = (f64, f64);

fn draw(rng: &mut ChaCha8Rng, r: Range) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..=r.1)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Presence probability per class index (background entry ignored,
    /// face forced to 1).
    pub presence: [f64; 8],
    pub face_rx: Range,
    pub face_ry: Range,
    pub face_cx: Range,
    pub face_cy: Range,
    pub hair_margin: Range,
    pub hair_shrink: Range,
    pub hair_len: Range,
    pub hair_wave_amp: Range,
    pub hair_wave_freq: Range,
    pub hair_wavy_prob: f64,
    pub eye_off: Range,
    pub eye_y: Range,
    pub eye_rx: Range,
    pub eye_ry: Range,
    pub nose_y: Range,
    pub nose_rx: Range,
    pub nose_ry: Range,
    pub mouth_y: Range,
    pub mouth_rx: Range,
    pub mouth_ry: Range,
    pub glasses_pad: Range,
    pub glasses_rim: Range,
    pub glasses_ratio: Range,
    pub hat_margin: Range,
    pub hat_band: Range,
    pub hat_brim_h: Range,
    pub hat_brim_w: Range,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 64,
            height: 64,
            presence: [1.0, 1.0, 0.9, 1.0, 1.0, 1.0, 0.4, 0.3],
            face_cx: (0.47, 0.53),
            face_cy: (0.52, 0.58),
            face_rx: (0.23, 0.30),
            face_ry: (0.30, 0.38),
            hair_margin: (0.03, 0.07),
            hair_shrink: (0.04, 0.09),
            hair_len: (-0.15, 1.05),
            hair_wave_amp: (0.028, 0.048),
            hair_wave_freq: (2.0, 3.5),
            hair_wavy_prob: 0.5,
            eye_off: (0.40, 0.52),
            eye_y: (0.20, 0.30),
            eye_rx: (0.055, 0.095),
            eye_ry: (0.035, 0.065),
            nose_y: (0.05, 0.18),
            nose_rx: (0.030, 0.060),
            nose_ry: (0.055, 0.110),
            mouth_y: (0.45, 0.60),
            mouth_rx: (0.10, 0.20),
            mouth_ry: (0.035, 0.062),
            glasses_pad: (0.020, 0.045),
            glasses_rim: (0.020, 0.034),
            glasses_ratio: (0.72, 1.15),
            hat_margin: (0.04, 0.09),
            hat_band: (0.30, 0.62),
            hat_brim_h: (0.03, 0.05),
            hat_brim_w: (0.02, 0.05),
            seed: 42,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 32 || self.height < 32 {
            return Err(Error::Config(format!(
                "canvas {}x{} too small for the minimum shapes (need ≥ 32)",
                self.width, self.height
            )));
        }
        for (i, p) in self.presence.iter().enumerate() {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::Config(format!("presence[{i}] = {p} outside [0,1]")));
            }
        }
        for (name, r) in [
            ("face_rx", self.face_rx),
            ("face_ry", self.face_ry),
            ("hair_len", self.hair_len),
            ("eye_rx", self.eye_rx),
            ("mouth_rx", self.mouth_rx),
        ] {
            if r.1 < r.0 {
                return Err(Error::Config(format!("range {name} is empty: {r:?}")));
            }
        }
        Ok(())
    }
}

/// Deterministically sample one scene. Layer z-order is fixed as
/// face < hair < eyes < nose < mouth < eyeglasses < hat.
pub fn sample_scene(config: &SceneConfig, seed: u64) -> Result<LayeredScene> {
    config.validate()?;
    let (w, h) = (config.width, config.height);
    let (wf, hf) = (w as f64, h as f64);
    let mut rng = rng_from_seed(seed);

    // draw all parameters first so presence decisions never shift streams
    let face = FaceGeom {
        cx: draw(&mut rng, config.face_cx) * wf,
        cy: draw(&mut rng, config.face_cy) * hf,
        rx: draw(&mut rng, config.face_rx) * wf,
        ry: draw(&mut rng, config.face_ry) * hf,
    };
    let wavy = rng.random_bool(config.hair_wavy_prob);
    let hair = HairGeom {
        margin: draw(&mut rng, config.hair_margin) * wf,
        shrink: draw(&mut rng, config.hair_shrink) * wf,
        len_frac: draw(&mut rng, config.hair_len),
        wave_amp: if wavy {
            draw(&mut rng, config.hair_wave_amp) * wf
        } else {
            let _ = draw(&mut rng, config.hair_wave_amp);
            0.0
        },
        wave_freq: draw(&mut rng, config.hair_wave_freq).round(),
    };
    let eyes = EyesGeom {
        off_x: draw(&mut rng, config.eye_off) * face.rx,
        ey: face.cy - draw(&mut rng, config.eye_y) * face.ry,
        rx: draw(&mut rng, config.eye_rx) * wf,
        ry: draw(&mut rng, config.eye_ry) * hf,
    };
    let nose = BlobGeom {
        cy: face.cy + draw(&mut rng, config.nose_y) * face.ry,
        rx: draw(&mut rng, config.nose_rx) * wf,
        ry: draw(&mut rng, config.nose_ry) * hf,
    };
    let mouth = BlobGeom {
        cy: face.cy + draw(&mut rng, config.mouth_y) * face.ry,
        rx: draw(&mut rng, config.mouth_rx) * wf,
        ry: draw(&mut rng, config.mouth_ry) * hf,
    };
    let glasses = GlassesGeom {
        pad: draw(&mut rng, config.glasses_pad) * wf,
        rim: draw(&mut rng, config.glasses_rim) * wf,
        ratio: draw(&mut rng, config.glasses_ratio),
    };
    let hat = HatGeom {
        margin: draw(&mut rng, config.hat_margin) * wf,
        band_frac: draw(&mut rng, config.hat_band),
        brim_h: (draw(&mut rng, config.hat_brim_h) * hf).max(1.5),
        brim_w: draw(&mut rng, config.hat_brim_w) * wf,
    };
    let present: Vec<bool> = (0..8).map(|c| rng.random_bool(config.presence[c])).collect();

    let mut layers = Vec::new();
    layers.push(InstanceLayer::new(class_id::FACE, 0, face_mask(w, h, &face))?);
    if present[class_id::HAIR as usize] {
        layers.push(InstanceLayer::new(class_id::HAIR, 1, hair_mask(w, h, &face, &hair))?);
    }
    if present[class_id::EYES as usize] {
        layers.push(InstanceLayer::new(class_id::EYES, 2, eyes_mask(w, h, &face, &eyes))?);
    }
    if present[class_id::NOSE as usize] {
        layers.push(InstanceLayer::new(class_id::NOSE, 3, blob_mask(w, h, &face, &nose))?);
    }
    if present[class_id::MOUTH as usize] {
        layers.push(InstanceLayer::new(class_id::MOUTH, 4, blob_mask(w, h, &face, &mouth))?);
    }
    if present[class_id::EYEGLASSES as usize] {
        layers.push(InstanceLayer::new(
            class_id::EYEGLASSES,
            5,
            glasses_mask(w, h, &face, &eyes, &glasses),
        )?);
    }
    if present[class_id::HAT as usize] {
        layers.push(InstanceLayer::new(class_id::HAT, 6, hat_mask(w, h, &face, &hat))?);
    }
    LayeredScene::new(w, h, layers)
}

/// One manifest line; `kind` is "full" (whole scene) or "pair"
/// (leave-one-out sample).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub kind: String,
    pub scene: String,
    #[serde(rename = "map_Sn")]
    pub map_sn: String,
    #[serde(rename = "map_Sk", skip_serializing_if = "Option::is_none")]
    pub map_sk: Option<String>,
    #[serde(rename = "mask_Mk_rle", skip_serializing_if = "Option::is_none")]
    pub mask_mk_rle: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_id: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edit_text: Option<String>,
    pub caption: String,
    pub image: String,
    pub seed: u64,
}

impl ManifestRecord {
    /// Scene index parsed back out of the record id.
    pub fn scene_index(&self) -> usize {
        self.id[1..7].parse().expect("well-formed record id")
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("manifest line: {e}"))))
        .collect()
}

/// Chunked parallel map over scene indices; results come back in index
/// order, so the output is identical for any worker count.
fn parallel_scenes<T: Send>(
    n: usize,
    workers: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let workers = workers.clamp(1, n.max(1));
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    let mut out: Vec<Result<Vec<T>>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers {
            let lo = w * chunk;
            let hi = ((w + 1) * chunk).min(n);
            let f = &f;
            handles.push(scope.spawn(move || (lo..hi).map(f).collect::<Result<Vec<T>>>()));
        }
        for h in handles {
            out.push(h.join().expect("scene worker panicked"));
        }
    });
    let mut flat = Vec::with_capacity(n);
    for chunk in out {
        flat.extend(chunk?);
    }
    Ok(flat)
}

/// Generate `n_scenes` scenes and write scenes, maps (S_n and every S_k),
/// renders, and the JSONL manifest under `out_dir`. Built in a staging
/// directory and swapped in atomically; a failure leaves no partial
/// output. Scene generation may fan out over `workers` threads; manifest
/// assembly is single-writer and byte-identical for any worker count.
pub fn build_dataset(
    n_scenes: usize,
    config: &SceneConfig,
    out_dir: &Path,
    workers: usize,
) -> Result<Vec<ManifestRecord>> {
    config.validate()?;
    let staging = out_dir.with_extension("staging");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    let result = build_into(n_scenes, config, &staging, workers);
    match result {
        Ok(records) => {
            if out_dir.exists() {
                fs::remove_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
            }
            fs::rename(&staging, out_dir).map_err(|e| Error::io(out_dir, e))?;
            Ok(records)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

struct SceneProduct {
    scene: LayeredScene,
    caps: CaptionRecord,
    img: Image,
    s_n: SemanticMap,
    pairs: Vec<semantic_maps::PairSample>,
    seed: u64,
}

fn build_into(
    n_scenes: usize,
    config: &SceneConfig,
    dir: &Path,
    workers: usize,
) -> Result<Vec<ManifestRecord>> {
    for sub in ["scenes", "maps", "images"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir, e))?;
    }
    let products = parallel_scenes(n_scenes, workers, |i| {
        let scene_seed = derive_seed(derive_seed(config.seed, stream::SCENE), i as u64);
        let caption_seed = derive_seed(derive_seed(config.seed, stream::CAPTION), i as u64);
        let render_seed = derive_seed(derive_seed(config.seed, stream::RENDER), i as u64);
        let scene = sample_scene(config, scene_seed)?;
        let caps = caption_scene(&scene, caption_seed);
        let img = render_scene(&scene, render_seed);
        let s_n = compose_layers(&scene);
        let pairs = if scene.layer_count() >= 2 {
            semantic_maps::all_pairs(&scene)?
        } else {
            Vec::new()
        };
        Ok(SceneProduct {
            scene,
            caps,
            img,
            s_n,
            pairs,
            seed: scene_seed,
        })
    })?;

    let mut records = Vec::new();
    for (i, p) in products.iter().enumerate() {
        let sid = format!("s{i:06}");
        let scene_rel = format!("scenes/{sid}.json");
        let sn_rel = format!("maps/{sid}_sn.pgm");
        let img_rel = format!("images/{sid}.ppm");
        write_scene(&p.scene, &dir.join(&scene_rel))?;
        write_map(&p.s_n, &dir.join(&sn_rel))?;
        write_ppm(&p.img, &dir.join(&img_rel))?;

        records.push(ManifestRecord {
            id: sid.clone(),
            kind: "full".into(),
            scene: scene_rel.clone(),
            map_sn: sn_rel.clone(),
            map_sk: None,
            mask_mk_rle: None,
            class_id: None,
            edit_text: None,
            caption: p.caps.caption.clone(),
            image: img_rel.clone(),
            seed: p.seed,
        });

        for pair in &p.pairs {
            let sk_rel = format!("maps/{sid}_k{}_sk.pgm", pair.k);
            write_map(&pair.s_k, &dir.join(&sk_rel))?;
            let edit_text = p
                .caps
                .edits
                .iter()
                .find(|(c, _)| *c == pair.t_k)
                .map(|(_, t)| t.clone())
                .expect("caption covers every present class");
            records.push(ManifestRecord {
                id: format!("{sid}_k{}", pair.k),
                kind: "pair".into(),
                scene: scene_rel.clone(),
                map_sn: sn_rel.clone(),
                map_sk: Some(sk_rel),
                mask_mk_rle: Some(rle_encode(&pair.m_k)),
                class_id: Some(pair.t_k),
                edit_text: Some(edit_text),
                caption: p.caps.caption.clone(),
                image: img_rel.clone(),
                seed: p.seed,
            });
        }
    }
    let mut manifest = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut manifest, r).map_err(|e| Error::Format(e.to_string()))?;
        manifest.write_all(b"\n").map_err(|e| Error::io(dir, e))?;
    }
    fs::write(dir.join("manifest.jsonl"), manifest).map_err(|e| Error::io(dir, e))?;
    Ok(records)
}

/// A corpus loaded back into memory for training.
pub struct Corpus {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub struct PairData {
    pub scene_index: usize,
    pub s_n: SemanticMap,
    pub s_k: SemanticMap,
    pub m_k: Mask,
    pub class_id: u8,
    pub edit_text: String,
}

pub struct FullData {
    pub scene_index: usize,
    pub s_n: SemanticMap,
    pub caption: String,
    pub image: Image,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Corpus> {
        let manifest = root.join("manifest.jsonl");
        if !manifest.exists() {
            return Err(Error::MissingArtifact(manifest));
        }
        Ok(Corpus {
            root: root.to_path_buf(),
            records: read_manifest(&manifest)?,
        })
    }

    pub fn load_pair(&self, r: &ManifestRecord) -> Result<PairData> {
        let s_n = semantic_maps::read_map(&self.root.join(&r.map_sn))?;
        let (w, h) = (s_n.width(), s_n.height());
        Ok(PairData {
            scene_index: r.scene_index(),
            s_k: semantic_maps::read_map(
                &self.root.join(r.map_sk.as_ref().ok_or_else(|| {
                    Error::Format(format!("record {} lacks map_Sk", r.id))
                })?),
            )?,
            s_n,
            m_k: semantic_maps::rle_decode(
                r.mask_mk_rle
                    .as_ref()
                    .ok_or_else(|| Error::Format(format!("record {} lacks mask", r.id)))?,
                w,
                h,
            )?,
            class_id: r
                .class_id
                .ok_or_else(|| Error::Format(format!("record {} lacks class_id", r.id)))?,
            edit_text: r
                .edit_text
                .clone()
                .ok_or_else(|| Error::Format(format!("record {} lacks edit_text", r.id)))?,
        })
    }

    pub fn load_full(&self, r: &ManifestRecord) -> Result<FullData> {
        Ok(FullData {
            scene_index: r.scene_index(),
            s_n: semantic_maps::read_map(&self.root.join(&r.map_sn))?,
            caption: r.caption.clone(),
            image: read_ppm(&self.root.join(&r.image))?,
        })
    }

    pub fn pairs(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(|r| r.kind == "pair")
    }

    pub fn fulls(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(|r| r.kind == "full")
    }
}
