//! Evaluation metrics: pixel-wise mask accuracy, PSNR (global and
//! region-restricted), a per-class area-distribution distance standing in
//! for FID at this scale, and seed-pair diversity.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::semantic_maps::{Mask, SemanticMap};
use serde::Serialize;
use std::collections::BTreeMap;

/// Fraction of pixels whose labels agree.
pub fn mask_accuracy(pred: &SemanticMap, gt: &SemanticMap) -> Result<f64> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::Shape(format!(
            "map sizes differ: {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let same = pred
        .labels()
        .iter()
        .zip(gt.labels())
        .filter(|(a, b)| a == b)
        .count();
    Ok(same as f64 / pred.labels().len() as f64)
}

/// 10·log10(max_val² / MSE); +∞ for identical inputs.
pub fn psnr(a: &[f32], b: &[f32], max_val: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut s = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = (*x - *y) as f64;
        s += d * d;
    }
    let mse = s / a.len() as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (max_val * max_val / mse).log10()
}

/// PSNR over the pixels selected by `region`. `a` and `b` are interpreted
/// as C×H×W planes over the region grid.
pub fn region_psnr(a: &Tensor, b: &Tensor, region: &Mask, max_val: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let dims = a.dims();
    let (c, h, w) = match dims.len() {
        3 => (dims[0], dims[1], dims[2]),
        _ => return Err(Error::Shape(format!("expected [C,H,W], got {dims:?}"))),
    };
    if region.width() != w || region.height() != h {
        return Err(Error::Shape("region grid does not match image".into()));
    }
    if region.is_empty() {
        return Err(Error::Config("region is empty".into()));
    }
    let plane = h * w;
    let mut s = 0.0f64;
    let mut n = 0usize;
    for p in 0..plane {
        if region.data()[p] == 0 {
            continue;
        }
        for ch in 0..c {
            let d = (a.data()[ch * plane + p] - b.data()[ch * plane + p]) as f64;
            s += d * d;
            n += 1;
        }
    }
    let mse = s / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Exact 1-D Wasserstein-1 distance between two empirical distributions,
/// integrating |Qa − Qb| over the merged quantile grid.
fn w1_exact(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        // sorted-difference formula
        return a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / a.len() as f64;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut total = 0.0;
    let mut q = 0.0f64;
    let (mut i, mut j) = (0usize, 0usize);
    while q < 1.0 - 1e-15 {
        let qa = (i + 1) as f64 / na;
        let qb = (j + 1) as f64 / nb;
        let next = qa.min(qb).min(1.0);
        total += (next - q) * (a[i] - b[j]).abs();
        q = next;
        if (qa - next).abs() < 1e-15 {
            i += 1;
        }
        if (qb - next).abs() < 1e-15 {
            j += 1;
        }
    }
    total
}

/// Mean over classes of the W1 distance between per-map area fractions.
pub fn class_area_w1(set_a: &[SemanticMap], set_b: &[SemanticMap]) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::Config("class_area_w1 needs non-empty sets".into()));
    }
    let c = set_a[0].class_count();
    let fracs = |set: &[SemanticMap], class: usize| -> Vec<f64> {
        set.iter()
            .map(|m| m.histogram()[class] as f64 / m.labels().len() as f64)
            .collect()
    };
    let mut total = 0.0;
    for class in 0..c {
        total += w1_exact(fracs(set_a, class), fracs(set_b, class));
    }
    Ok(total / c as f64)
}

/// Mean pairwise normalized Hamming distance inside `region`.
pub fn diversity_score(maps: &[SemanticMap], region: &Mask) -> Result<f64> {
    if maps.len() < 2 {
        return Err(Error::Config("diversity needs at least two maps".into()));
    }
    let area = region.count_ones();
    if area == 0 {
        return Err(Error::Config("diversity region is empty".into()));
    }
    let mut total = 0.0f64;
    let mut pairs = 0usize;
    for i in 0..maps.len() {
        for j in (i + 1)..maps.len() {
            let mut diff = 0usize;
            for (p, r) in region.data().iter().enumerate() {
                if *r != 0 && maps[i].labels()[p] != maps[j].labels()[p] {
                    diff += 1;
                }
            }
            total += diff as f64 / area as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Evaluation output: metric map plus provenance fields. Serialized with
/// sorted keys so reports are byte-stable for diffing.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub sample_count: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if self.sample_count < 1 {
            return Err(Error::Config("report needs at least one sample".into()));
        }
        for (k, v) in &self.metrics {
            if !v.is_finite() {
                return Err(Error::Config(format!("metric {k} is not finite: {v}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}
