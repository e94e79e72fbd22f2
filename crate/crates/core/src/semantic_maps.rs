//! Layered amodal scenes, their composition into per-pixel label maps,
//! leave-one-out pairing, palette/one-hot encodings, and the bit-exact
//! PGM / JSON / RLE file formats.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

/// Number of semantic classes: background plus seven face attributes.
pub const CLASS_COUNT: usize = 8;

pub mod class_id {
    pub const BACKGROUND: u8 = 0;
    pub const FACE: u8 = 1;
    pub const HAIR: u8 = 2;
    pub const EYES: u8 = 3;
    pub const NOSE: u8 = 4;
    pub const MOUTH: u8 = 5;
    pub const EYEGLASSES: u8 = 6;
    pub const HAT: u8 = 7;
}

pub const CLASS_NAMES: [&str; CLASS_COUNT] = [
    "background",
    "face",
    "hair",
    "eyes",
    "nose",
    "mouth",
    "eyeglasses",
    "hat",
];

/// Binary grid stored row-major, one byte per pixel (0 or 1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Mask::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(x, y) as u8;
            }
        }
        m
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "mask data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Format("mask entries must be 0 or 1".into()));
        }
        Ok(Mask {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count_ones() == 0
    }

    /// Set union, in place.
    pub fn or_assign(&mut self, other: &Mask) {
        assert_eq!((self.width, self.height), (other.width, other.height));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    /// Nearest-neighbor resize; keeps entries binary at every scale.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Mask {
        let mut out = Mask::zeros(width, height);
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            let sy = sy.min(self.height - 1);
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                let sx = sx.min(self.width - 1);
                out.data[y * width + x] = self.data[sy * self.width + sx];
            }
        }
        out
    }

    /// Chebyshev dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Mask {
        let r = radius as isize;
        let mut out = Mask::zeros(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (nx, ny) = (x as isize + dx, y as isize + dy);
                        if nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height {
                            out.data[ny as usize * self.width + nx as usize] = 1;
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct InstanceLayer {
    class_id: u8,
    z_order: u32,
    amodal_mask: Mask,
}

impl InstanceLayer {
    pub fn new(class_id: u8, z_order: u32, amodal_mask: Mask) -> Result<Self> {
        if class_id == 0 || class_id as usize >= CLASS_COUNT {
            return Err(Error::InvalidScene(format!(
                "class_id {class_id} outside [1, {}]",
                CLASS_COUNT - 1
            )));
        }
        if amodal_mask.is_empty() {
            return Err(Error::InvalidScene(format!(
                "layer of class {class_id} has an empty amodal mask"
            )));
        }
        Ok(InstanceLayer {
            class_id,
            z_order,
            amodal_mask,
        })
    }

    pub fn class_id(&self) -> u8 {
        self.class_id
    }

    pub fn z_order(&self) -> u32 {
        self.z_order
    }

    pub fn amodal_mask(&self) -> &Mask {
        &self.amodal_mask
    }
}

#[derive(Clone, Debug)]
pub struct LayeredScene {
    width: usize,
    height: usize,
    layers: Vec<InstanceLayer>,
}

impl LayeredScene {
    pub fn new(width: usize, height: usize, layers: Vec<InstanceLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidScene("scene needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[1].z_order <= pair[0].z_order {
                return Err(Error::InvalidScene(format!(
                    "z_orders must be strictly increasing ({} then {})",
                    pair[0].z_order, pair[1].z_order
                )));
            }
        }
        for l in &layers {
            if l.amodal_mask.width() != width || l.amodal_mask.height() != height {
                return Err(Error::InvalidScene(format!(
                    "layer of class {} is {}x{}, canvas is {width}x{height}",
                    l.class_id,
                    l.amodal_mask.width(),
                    l.amodal_mask.height()
                )));
            }
        }
        Ok(LayeredScene {
            width,
            height,
            layers,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn layers(&self) -> &[InstanceLayer] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMap {
    width: usize,
    height: usize,
    labels: Vec<u8>,
    class_count: usize,
}

impl SemanticMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>, class_count: usize) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "label grid length {} does not match {width}x{height}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::Format(format!(
                "label {bad} exceeds class count {class_count}"
            )));
        }
        Ok(SemanticMap {
            width,
            height,
            labels,
            class_count,
        })
    }

    pub fn background(width: usize, height: usize) -> Self {
        SemanticMap {
            width,
            height,
            labels: vec![0; width * height],
            class_count: CLASS_COUNT,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Pixel count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.class_count];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// RGB palette with pairwise color distance ≥ 100, so nearest-color
/// decoding is unambiguous under moderate perturbation.
#[derive(Clone, Debug)]
pub struct Palette {
    colors: Vec<[u8; 3]>,
}

pub const MIN_PALETTE_DISTANCE: f64 = 100.0;

impl Palette {
    pub fn new(colors: Vec<[u8; 3]>) -> Result<Self> {
        for i in 0..colors.len() {
            for j in (i + 1)..colors.len() {
                let d = color_dist(colors[i], colors[j]);
                if d < MIN_PALETTE_DISTANCE {
                    return Err(Error::Config(format!(
                        "palette colors {i} and {j} are only {d:.1} apart (need ≥ {MIN_PALETTE_DISTANCE})"
                    )));
                }
            }
        }
        Ok(Palette { colors })
    }

    pub fn default_palette() -> Self {
        Palette::new(vec![
            [0, 0, 0],
            [255, 204, 153],
            [102, 51, 0],
            [0, 0, 255],
            [0, 255, 0],
            [255, 0, 0],
            [255, 255, 0],
            [255, 0, 255],
        ])
        .expect("default palette satisfies the distance bound")
    }

    pub fn colors(&self) -> &[[u8; 3]] {
        &self.colors
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }
}

fn color_dist(a: [u8; 3], b: [u8; 3]) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        let d = a[i] as f64 - b[i] as f64;
        s += d * d;
    }
    s.sqrt()
}

/// One leave-one-out training pair.
#[derive(Clone, Debug)]
pub struct PairSample {
    /// Composed map with layer k removed.
    pub s_k: SemanticMap,
    /// Fully composed map.
    pub s_n: SemanticMap,
    /// Amodal mask of the removed layer.
    pub m_k: Mask,
    /// Class of the removed layer.
    pub t_k: u8,
    /// 1-based index of the removed layer (by ascending z).
    pub k: usize,
}

/// Stack layers by ascending z-order; the highest layer covering a pixel
/// wins, uncovered pixels stay background.
pub fn compose_layers(scene: &LayeredScene) -> SemanticMap {
    compose_excluding(scene, usize::MAX)
}

fn compose_excluding(scene: &LayeredScene, skip_index: usize) -> SemanticMap {
    let mut labels = vec![0u8; scene.width * scene.height];
    for (i, layer) in scene.layers.iter().enumerate() {
        if i == skip_index {
            continue;
        }
        for (l, m) in labels.iter_mut().zip(layer.amodal_mask.data()) {
            if *m != 0 {
                *l = layer.class_id;
            }
        }
    }
    SemanticMap {
        width: scene.width,
        height: scene.height,
        labels,
        class_count: CLASS_COUNT,
    }
}

/// Remove the k-th layer (1-based, by ascending z) and return the pair
/// (S_k, S_n, M_k, t_k). Requires at least two layers.
pub fn leave_one_out(scene: &LayeredScene, k: usize) -> Result<PairSample> {
    let n = scene.layer_count();
    if n < 2 {
        return Err(Error::DegenerateScene(
            "cannot form a pair from a single-layer scene".into(),
        ));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidScene(format!("pair index {k} outside [1, {n}]")));
    }
    let layer = &scene.layers[k - 1];
    Ok(PairSample {
        s_k: compose_excluding(scene, k - 1),
        s_n: compose_layers(scene),
        m_k: layer.amodal_mask.clone(),
        t_k: layer.class_id,
        k,
    })
}

/// Every leave-one-out pair, ordered by ascending z.
pub fn all_pairs(scene: &LayeredScene) -> Result<Vec<PairSample>> {
    let n = scene.layer_count();
    if n < 2 {
        return Err(Error::DegenerateScene(
            "cannot form pairs from a single-layer scene".into(),
        ));
    }
    (1..=n).map(|k| leave_one_out(scene, k)).collect()
}

/// One-hot channels [C, H, W]; exactly one 1 per pixel column.
pub fn one_hot_encode(map: &SemanticMap) -> Tensor {
    let (c, h, w) = (map.class_count, map.height, map.width);
    let mut t = Tensor::zeros(&[c, h, w]);
    for (p, &l) in map.labels.iter().enumerate() {
        t.data_mut()[l as usize * h * w + p] = 1.0;
    }
    t
}

/// Palette colors scaled to [-1, 1]; output [3, H, W].
pub fn palette_encode(map: &SemanticMap, palette: &Palette) -> Tensor {
    assert!(
        palette.len() >= map.class_count,
        "palette has {} colors for {} classes",
        palette.len(),
        map.class_count
    );
    let (h, w) = (map.height, map.width);
    let mut t = Tensor::zeros(&[3, h, w]);
    for (p, &l) in map.labels.iter().enumerate() {
        let c = palette.colors[l as usize];
        for ch in 0..3 {
            t.data_mut()[ch * h * w + p] = c[ch] as f32 / 127.5 - 1.0;
        }
    }
    t
}

/// Nearest palette color per pixel (Euclidean in de-normalized RGB);
/// ties break toward the lower class index.
pub fn palette_decode(array: &Tensor, palette: &Palette) -> Result<SemanticMap> {
    let dims = array.dims();
    if dims.len() != 3 || dims[0] != 3 {
        return Err(Error::Shape(format!("expected [3, H, W], got {dims:?}")));
    }
    if !array.is_finite() {
        return Err(Error::Decode("non-finite values in decoded array".into()));
    }
    let (h, w) = (dims[1], dims[2]);
    let plane = h * w;
    let mut labels = vec![0u8; plane];
    for p in 0..plane {
        let rgb = [
            (array.data()[p] + 1.0) * 127.5,
            (array.data()[plane + p] + 1.0) * 127.5,
            (array.data()[2 * plane + p] + 1.0) * 127.5,
        ];
        let mut best = 0usize;
        let mut best_d = f32::INFINITY;
        for (ci, c) in palette.colors.iter().enumerate() {
            let mut d = 0.0f32;
            for ch in 0..3 {
                let diff = rgb[ch] - c[ch] as f32;
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = ci;
            }
        }
        labels[p] = best as u8;
    }
    SemanticMap::new(w, h, labels, palette.len())
}

/// 1 where the map's label equals `class_id`.
pub fn mask_support(map: &SemanticMap, class_id: u8) -> Mask {
    assert!((class_id as usize) < map.class_count);
    let mut m = Mask::zeros(map.width, map.height);
    for (d, &l) in m.data.iter_mut().zip(&map.labels) {
        *d = (l == class_id) as u8;
    }
    m
}

/// Row-major run lengths; the first run counts zeros (may be 0).
pub fn rle_encode(mask: &Mask) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut len = 0usize;
    for &v in mask.data() {
        if v == current {
            len += 1;
        } else {
            runs.push(len);
            current = v;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn rle_decode(runs: &[usize], width: usize, height: usize) -> Result<Mask> {
    let total: usize = runs.iter().sum();
    if total != width * height {
        return Err(Error::Format(format!(
            "run lengths sum to {total}, grid needs {}",
            width * height
        )));
    }
    let mut data = Vec::with_capacity(total);
    let mut v = 0u8;
    for &r in runs {
        data.extend(std::iter::repeat(v).take(r));
        v ^= 1;
    }
    Mask::from_vec(width, height, data)
}

/// Write a semantic map as binary PGM (P5, maxval 255, pixel = class index).
pub fn write_map(map: &SemanticMap, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(map.labels.len() + 32);
    write!(buf, "P5\n{} {}\n255\n", map.width, map.height).expect("vec write");
    buf.extend_from_slice(&map.labels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_map(path: &Path) -> Result<SemanticMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height, pixels) = parse_pnm(&bytes, b"P5", 1)
        .map_err(|msg| Error::Format(format!("{}: {msg}", path.display())))?;
    SemanticMap::new(width, height, pixels.to_vec(), CLASS_COUNT)
}

/// Shared P5/P6 parser: returns (width, height, payload).
pub(crate) fn parse_pnm<'a>(
    bytes: &'a [u8],
    magic: &[u8],
    channels: usize,
) -> std::result::Result<(usize, usize, &'a [u8]), String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!(
            "bad magic (expected {})",
            String::from_utf8_lossy(magic)
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| "bad header".to_string())?
            .parse()
            .map_err(|_| "bad header number".to_string())?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing header terminator".into());
    }
    pos += 1;
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported (need 255)"));
    }
    let need = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() != need {
        return Err(format!("payload is {} bytes, need {need}", payload.len()));
    }
    Ok((width, height, payload))
}

// ---- scene JSON file ----

#[derive(Serialize, Deserialize)]
struct SceneFileLayer {
    class_id: u8,
    z: u32,
    rle: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    width: usize,
    height: usize,
    layers: Vec<SceneFileLayer>,
}

pub fn scene_to_json(scene: &LayeredScene) -> String {
    let f = SceneFile {
        width: scene.width,
        height: scene.height,
        layers: scene
            .layers
            .iter()
            .map(|l| SceneFileLayer {
                class_id: l.class_id,
                z: l.z_order,
                rle: rle_encode(&l.amodal_mask),
            })
            .collect(),
    };
    serde_json::to_string(&f).expect("scene serialization")
}

pub fn scene_from_json(json: &str) -> Result<LayeredScene> {
    let f: SceneFile =
        serde_json::from_str(json).map_err(|e| Error::Format(format!("scene json: {e}")))?;
    let layers = f
        .layers
        .into_iter()
        .map(|l| InstanceLayer::new(l.class_id, l.z, rle_decode(&l.rle, f.width, f.height)?))
        .collect::<Result<Vec<_>>>()?;
    LayeredScene::new(f.width, f.height, layers)
}

pub fn write_scene(scene: &LayeredScene, path: &Path) -> Result<()> {
    fs::write(path, scene_to_json(scene)).map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: &Path) -> Result<LayeredScene> {
    let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scene_from_json(&json)
}
