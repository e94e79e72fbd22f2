//! Affine map over the last axis, and a token embedding table.

use super::param::{join, Param, Params};
use super::tensor::Tensor;
use super::gemm;
use rand_chacha::ChaCha8Rng;

pub struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    pub weight: Param, // [out_f, in_f]
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(in_f: usize, out_f: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            in_f,
            out_f,
            weight: Param::randn(&[out_f, in_f], (1.0 / in_f as f32).sqrt(), rng),
            bias: Param::zeros(&[out_f]),
            cache: None,
        }
    }

    pub fn new_zeroed(in_f: usize, out_f: usize) -> Self {
        Linear {
            in_f,
            out_f,
            weight: Param::zeros(&[out_f, in_f]),
            bias: Param::zeros(&[out_f]),
            cache: None,
        }
    }

    fn out_dims(&self, x: &Tensor) -> Vec<usize> {
        let mut dims = x.dims().to_vec();
        *dims.last_mut().unwrap() = self.out_f;
        dims
    }

    fn run(&self, x: &Tensor) -> Tensor {
        assert_eq!(*x.dims().last().unwrap(), self.in_f);
        let rows = x.numel() / self.in_f;
        let mut y = Tensor::zeros(&self.out_dims(x));
        // Y = X · Wᵀ
        gemm(
            rows, self.in_f, self.out_f,
            1.0, x.data(), self.in_f as isize, 1,
            &self.weight.w, 1, self.in_f as isize,
            0.0, y.data_mut(), self.out_f as isize, 1,
        );
        for r in 0..rows {
            let row = &mut y.data_mut()[r * self.out_f..(r + 1) * self.out_f];
            for (v, b) in row.iter_mut().zip(&self.bias.w) {
                *v += b;
            }
        }
        y
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.run(x)
    }

    pub fn forward_t(&mut self, x: &Tensor) -> Tensor {
        let y = self.run(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache.as_ref().expect("linear backward without forward_t");
        let rows = x.numel() / self.in_f;
        assert_eq!(dy.numel(), rows * self.out_f);
        // dW += dYᵀ · X
        gemm(
            self.out_f, rows, self.in_f,
            1.0, dy.data(), 1, self.out_f as isize,
            x.data(), self.in_f as isize, 1,
            1.0, &mut self.weight.g, self.in_f as isize, 1,
        );
        for r in 0..rows {
            for (g, d) in self.bias.g.iter_mut().zip(&dy.data()[r * self.out_f..(r + 1) * self.out_f]) {
                *g += d;
            }
        }
        // dX = dY · W
        let mut dx = Tensor::zeros(x.dims());
        gemm(
            rows, self.out_f, self.in_f,
            1.0, dy.data(), self.out_f as isize, 1,
            &self.weight.w, self.in_f as isize, 1,
            0.0, dx.data_mut(), self.in_f as isize, 1,
        );
        dx
    }
}

impl Params for Linear {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

pub struct Embedding {
    pub vocab: usize,
    pub dim: usize,
    pub table: Param, // [vocab, dim]
    cache: Option<Vec<usize>>,
}

impl Embedding {
    pub fn new(vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Embedding {
            vocab,
            dim,
            table: Param::randn(&[vocab, dim], 0.02, rng),
            cache: None,
        }
    }

    fn gather(&self, ids: &[usize], rows_dims: &[usize]) -> Tensor {
        let mut dims = rows_dims.to_vec();
        dims.push(self.dim);
        let mut y = Tensor::zeros(&dims);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < self.vocab, "token id {id} out of vocab {}", self.vocab);
            y.data_mut()[r * self.dim..(r + 1) * self.dim]
                .copy_from_slice(&self.table.w[id * self.dim..(id + 1) * self.dim]);
        }
        y
    }

    /// ids laid out [n, l]; output [n, l, dim].
    pub fn forward(&self, ids: &[usize], n: usize, l: usize) -> Tensor {
        assert_eq!(ids.len(), n * l);
        self.gather(ids, &[n, l])
    }

    pub fn forward_t(&mut self, ids: &[usize], n: usize, l: usize) -> Tensor {
        let y = self.forward(ids, n, l);
        self.cache = Some(ids.to_vec());
        y
    }

    pub fn backward(&mut self, dy: &Tensor) {
        let ids = self.cache.as_ref().expect("embedding backward without forward_t");
        assert_eq!(dy.numel(), ids.len() * self.dim);
        for (r, &id) in ids.iter().enumerate() {
            let src = &dy.data()[r * self.dim..(r + 1) * self.dim];
            let dst = &mut self.table.g[id * self.dim..(id + 1) * self.dim];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

impl Params for Embedding {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "table"), &mut self.table));
    }
}
