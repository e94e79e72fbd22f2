//! Deterministic toy renderer: per-class base colors, seeded value-noise
//! texture, and a fixed top-left light ramp. Total perturbation from the
//! base color is bounded by NOISE_AMP + RAMP_AMP ≤ 24 levels, well under
//! half the minimum base-color distance, so nearest-base-color
//! classification of a clean render recovers the label map.

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::semantic_maps::{compose_layers, parse_pnm, LayeredScene, SemanticMap};
use rand::Rng;
use std::fs;
use std::io::Write;
use std::path::Path;

/// Render base colors per class (not the segmentation palette; these are
/// the "photo" colors). Pairwise distance ≥ 100.
pub const RENDER_BASE: [[u8; 3]; 8] = [
    [16, 16, 16],    // background
    [230, 180, 150], // face
    [110, 60, 20],   // hair
    [30, 40, 220],   // eyes
    [40, 200, 60],   // nose
    [220, 30, 30],   // mouth
    [240, 240, 40],  // eyeglasses
    [230, 40, 230],  // hat
];

pub const NOISE_AMP: f64 = 15.0;
pub const RAMP_AMP: f64 = 9.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }

    /// Planar [3, H, W] floats in [-1, 1].
    pub fn to_tensor(&self) -> crate::nn::Tensor {
        let plane = self.width * self.height;
        let mut t = crate::nn::Tensor::zeros(&[3, self.height, self.width]);
        for p in 0..plane {
            for c in 0..3 {
                t.data_mut()[c * plane + p] = self.rgb[p * 3 + c] as f32 / 127.5 - 1.0;
            }
        }
        t
    }

    pub fn from_tensor(t: &crate::nn::Tensor) -> Image {
        let dims = t.dims();
        assert_eq!(dims.len(), 3);
        assert_eq!(dims[0], 3);
        let (h, w) = (dims[1], dims[2]);
        let plane = h * w;
        let mut rgb = vec![0u8; plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                let v = (t.data()[c * plane + p] + 1.0) * 127.5;
                rgb[p * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        Image {
            width: w,
            height: h,
            rgb,
        }
    }
}

/// Bilinear value noise over an 8px lattice, in [-1, 1].
struct ValueNoise {
    gw: usize,
    grid: Vec<f64>,
}

impl ValueNoise {
    fn new(w: usize, h: usize, seed: u64) -> Self {
        let gw = w / 8 + 2;
        let gh = h / 8 + 2;
        let mut rng = rng_from_seed(seed);
        let grid = (0..gw * gh).map(|_| rng.random_range(-1.0..=1.0)).collect();
        ValueNoise { gw, grid }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        let fx = x as f64 / 8.0;
        let fy = y as f64 / 8.0;
        let (ix, iy) = (fx as usize, fy as usize);
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        let g = |gx: usize, gy: usize| self.grid[gy * self.gw + gx];
        let a = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
        let b = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
        a * (1.0 - ty) + b * ty
    }
}

/// Deterministic render of a scene to an 8-bit RGB image.
pub fn render_scene(scene: &LayeredScene, seed: u64) -> Image {
    let (w, h) = (scene.width(), scene.height());
    let labels = compose_layers(scene);
    let noise = ValueNoise::new(w, h, seed);
    let mut rgb = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let base = RENDER_BASE[labels.get(x, y) as usize];
            let n = noise.at(x, y) * NOISE_AMP;
            let ramp = RAMP_AMP * (1.0 - 2.0 * (x + y) as f64 / (w + h - 2) as f64);
            for c in 0..3 {
                let v = base[c] as f64 + n + ramp;
                rgb[(y * w + x) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Image {
        width: w,
        height: h,
        rgb,
    }
}

/// Class of the nearest render base color, per pixel.
pub fn classify_render(img: &Image) -> SemanticMap {
    let mut labels = vec![0u8; img.width * img.height];
    for p in 0..labels.len() {
        let px = [img.rgb[p * 3], img.rgb[p * 3 + 1], img.rgb[p * 3 + 2]];
        let mut best = 0;
        let mut best_d = i64::MAX;
        for (ci, c) in RENDER_BASE.iter().enumerate() {
            let d: i64 = (0..3)
                .map(|k| {
                    let diff = px[k] as i64 - c[k] as i64;
                    diff * diff
                })
                .sum();
            if d < best_d {
                best_d = d;
                best = ci;
            }
        }
        labels[p] = best as u8;
    }
    SemanticMap::new(img.width, img.height, labels, RENDER_BASE.len()).expect("labels in range")
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(img.rgb.len() + 32);
    write!(buf, "P6\n{} {}\n255\n", img.width, img.height).expect("vec write");
    buf.extend_from_slice(&img.rgb);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height, payload) = parse_pnm(&bytes, b"P6", 3)
        .map_err(|msg| Error::Format(format!("{}: {msg}", path.display())))?;
    Ok(Image {
        width,
        height,
        rgb: payload.to_vec(),
    })
}
