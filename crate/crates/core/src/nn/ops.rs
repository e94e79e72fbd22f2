//! Stateless tensor ops used by the blocks: SiLU, nearest-neighbor
//! up/downsampling, sinusoidal timestep features, broadcasts.

use super::tensor::Tensor;

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v *= sigmoid(*v);
    }
    y
}

/// d(silu)/dx given the pre-activation input.
pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    assert_eq!(x.dims(), dy.dims());
    let mut dx = dy.clone();
    for (d, v) in dx.data_mut().iter_mut().zip(x.data()) {
        let s = sigmoid(*v);
        *d *= s * (1.0 + *v * (1.0 - s));
    }
    dx
}

pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4().expect("upsample input must be 4-D");
    let mut y = Tensor::zeros(&[n, c, h * 2, w * 2]);
    let (oh, ow) = (h * 2, w * 2);
    for i in 0..n {
        for ch in 0..c {
            let src = &x.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            let dst = &mut y.data_mut()[(i * c + ch) * oh * ow..(i * c + ch + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
                }
            }
        }
    }
    y
}

pub fn upsample_nearest2x_backward(dy: &Tensor) -> Tensor {
    let (n, c, oh, ow) = dy.dims4().expect("upsample grad must be 4-D");
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for i in 0..n {
        for ch in 0..c {
            let src = &dy.data()[(i * c + ch) * oh * ow..(i * c + ch + 1) * oh * ow];
            let dst = &mut dx.data_mut()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    dst[(oy / 2) * w + ox / 2] += src[oy * ow + ox];
                }
            }
        }
    }
    dx
}

/// Sinusoidal features for integer timesteps; output [n, dim].
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut y = Tensor::zeros(&[ts.len(), dim]);
    for (i, &t) in ts.iter().enumerate() {
        for j in 0..half {
            let freq = (-(j as f64) * (10000.0f64).ln() / (half as f64 - 1.0)).exp();
            let arg = t as f64 * freq;
            y.data_mut()[i * dim + j] = arg.sin() as f32;
            y.data_mut()[i * dim + half + j] = arg.cos() as f32;
        }
    }
    y
}

/// y[n,c,h,w] += b[n,c] broadcast over the spatial plane.
pub fn add_channel_bias(x: &mut Tensor, b: &Tensor) {
    let (n, c, h, w) = x.dims4().expect("bias target must be 4-D");
    assert_eq!(b.dims(), &[n, c]);
    let plane = h * w;
    for i in 0..n {
        for ch in 0..c {
            let v = b.data()[i * c + ch];
            for p in &mut x.data_mut()[(i * c + ch) * plane..(i * c + ch + 1) * plane] {
                *p += v;
            }
        }
    }
}

/// Gradient of `add_channel_bias` w.r.t. the bias: spatial sums.
pub fn channel_bias_grad(dy: &Tensor) -> Tensor {
    let (n, c, h, w) = dy.dims4().unwrap();
    let plane = h * w;
    let mut g = Tensor::zeros(&[n, c]);
    for i in 0..n {
        for ch in 0..c {
            let mut s = 0.0f32;
            for p in &dy.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane] {
                s += p;
            }
            g.data_mut()[i * c + ch] = s;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn upsample_backward_is_adjoint() {
        // <up(x), y> == <x, up_backward(y)> for random x, y
        let mut rng = rng_from_seed(11);
        let x = Tensor::randn(&[1, 2, 3, 4], &mut rng);
        let y = Tensor::randn(&[1, 2, 6, 8], &mut rng);
        let ux = upsample_nearest2x(&x);
        let uty = upsample_nearest2x_backward(&y);
        let lhs: f32 = ux.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.data().iter().zip(uty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }

    #[test]
    fn timestep_embedding_shape_and_range() {
        let e = timestep_embedding(&[1, 500, 1000], 128);
        assert_eq!(e.dims(), &[3, 128]);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0 + 1e-6));
    }
}
