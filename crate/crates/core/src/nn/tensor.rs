//! Dense f32 tensor with shape metadata. Layout is row-major; conv layers
//! interpret 4-D tensors as NCHW.

use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(dims: &[usize], v: f32) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "dims {:?} do not match data length {}",
            dims,
            data.len()
        );
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn randn(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(mut self, dims: &[usize]) -> Self {
        assert_eq!(dims.iter().product::<usize>(), self.data.len());
        self.dims = dims.to_vec();
        self
    }

    /// Checks the tensor is 4-D and returns (n, c, h, w).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.dims.len() != 4 {
            return Err(Error::Shape(format!("expected 4-D tensor, got {:?}", self.dims)));
        }
        Ok((self.dims[0], self.dims[1], self.dims[2], self.dims[3]))
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        if self.dims.len() != 3 {
            return Err(Error::Shape(format!("expected 3-D tensor, got {:?}", self.dims)));
        }
        Ok((self.dims[0], self.dims[1], self.dims[2]))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.dims, other.dims);
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a - b)
            .collect();
        Tensor {
            dims: self.dims.clone(),
            data,
        }
    }

    /// Maximum absolute difference between two same-shaped tensors.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Concatenate along the channel axis of NCHW tensors.
    pub fn cat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        let (n, ca, h, w) = a.dims4().expect("cat_channels needs 4-D");
        let (nb, cb, hb, wb) = b.dims4().expect("cat_channels needs 4-D");
        assert_eq!((n, h, w), (nb, hb, wb), "cat_channels spatial mismatch");
        let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
        let plane = h * w;
        for i in 0..n {
            let dst = &mut out.data[i * (ca + cb) * plane..];
            dst[..ca * plane].copy_from_slice(&a.data[i * ca * plane..(i + 1) * ca * plane]);
            dst[ca * plane..(ca + cb) * plane]
                .copy_from_slice(&b.data[i * cb * plane..(i + 1) * cb * plane]);
        }
        out
    }

    /// Split the channel axis at `ca`, inverse of `cat_channels`.
    pub fn split_channels(&self, ca: usize) -> (Tensor, Tensor) {
        let (n, c, h, w) = self.dims4().expect("split_channels needs 4-D");
        assert!(ca <= c);
        let cb = c - ca;
        let mut a = Tensor::zeros(&[n, ca, h, w]);
        let mut b = Tensor::zeros(&[n, cb, h, w]);
        let plane = h * w;
        for i in 0..n {
            let src = &self.data[i * c * plane..];
            a.data[i * ca * plane..(i + 1) * ca * plane].copy_from_slice(&src[..ca * plane]);
            b.data[i * cb * plane..(i + 1) * cb * plane]
                .copy_from_slice(&src[ca * plane..c * plane]);
        }
        (a, b)
    }

    /// Mean of squared entries.
    pub fn mean_sq(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        let s: f64 = self.data.iter().map(|v| (*v as f64) * (*v as f64)).sum();
        (s / self.data.len() as f64) as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn cat_split_roundtrip() {
        let mut rng = rng_from_seed(7);
        let a = Tensor::randn(&[2, 3, 4, 5], &mut rng);
        let b = Tensor::randn(&[2, 2, 4, 5], &mut rng);
        let c = Tensor::cat_channels(&a, &b);
        assert_eq!(c.dims(), &[2, 5, 4, 5]);
        let (a2, b2) = c.split_channels(3);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn randn_is_deterministic() {
        let a = Tensor::randn(&[16], &mut rng_from_seed(3));
        let b = Tensor::randn(&[16], &mut rng_from_seed(3));
        assert_eq!(a, b);
    }
}
