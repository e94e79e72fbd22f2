//! Minimal CPU neural-net stack: tensors, layers with explicit backward
//! passes, and AdamW. All matrix work funnels through `matrixmultiply`;
//! every reduction runs in a fixed order so results are bit-reproducible.

pub mod adamw;
pub mod attention;
pub mod blocks;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod ops;
pub mod param;
pub mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use attention::MultiHeadAttention;
pub use blocks::{ConvBlock, Downsample, ResBlock, SpatialCrossAttn, TextEncoder, TimeEmbed, Upsample};
pub use conv::Conv2d;
pub use linear::{Embedding, Linear};
pub use norm::{GroupNorm, LayerNorm};
pub use param::{join, param_fingerprint, zero_grads, Param, Params};
pub use tensor::Tensor;

/// Thin safe wrapper over `matrixmultiply::sgemm`.
///
/// Computes C = alpha * A(m×k) * B(k×n) + beta * C(m×n) with explicit
/// row/col strides (so transposed views cost nothing).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(span(m, k, rsa, csa) <= a.len());
    debug_assert!(span(k, n, rsb, csb) <= b.len());
    debug_assert!(span(m, n, rsc, csc) <= c.len());
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize + 1
}
