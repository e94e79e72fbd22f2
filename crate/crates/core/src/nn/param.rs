//! Trainable parameter storage and named-parameter traversal.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug)]
pub struct Param {
    pub w: Vec<f32>,
    pub g: Vec<f32>,
    pub dims: Vec<usize>,
}

impl Param {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Param {
            w: vec![0.0; n],
            g: vec![0.0; n],
            dims: dims.to_vec(),
        }
    }

    pub fn from_vec(dims: &[usize], w: Vec<f32>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), w.len());
        Param {
            g: vec![0.0; w.len()],
            w,
            dims: dims.to_vec(),
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(dims: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = dims.iter().product();
        let w = (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Param {
            w,
            g: vec![0.0; n],
            dims: dims.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.w.len()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.g {
            *g = 0.0;
        }
    }
}

/// Visit every trainable parameter with a stable, construction-ordered name.
pub trait Params {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);

    fn named_params(&mut self) -> Vec<(String, &mut Param)>
    where
        Self: Sized,
    {
        let mut out = Vec::new();
        self.visit_params("", &mut out);
        out
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Order-sensitive fingerprint of all parameter values.
pub fn param_fingerprint(model: &mut impl Params) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut out = Vec::new();
    model.visit_params("", &mut out);
    for (name, p) in out {
        for b in name.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        for x in &p.w {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}

pub fn zero_grads(model: &mut impl Params) {
    let mut out = Vec::new();
    model.visit_params("", &mut out);
    for (_, p) in out {
        p.zero_grad();
    }
}
