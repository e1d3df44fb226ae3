//! Shared 2-D convolution used by the convolutional attention transforms and
//! the convolutional token embedding.

use crate::grid::Kernel;
use crate::scalar::Scalar;

/// Same-size 2-D convolution of one token's `p_h x p_w` patch with a centered
/// odd kernel, zero padding, stride 1. Follows the convolution orientation
/// `(w * u)(y) = sum_xi w(xi) u(y - xi)`.
pub(crate) fn conv2d_same<F: Scalar>(
    input: &[F],
    p_h: usize,
    p_w: usize,
    kernel: &Kernel<F>,
) -> Vec<F> {
    let kh = kernel.rows();
    let kw = kernel.cols();
    let ch = (kh / 2) as isize;
    let cw = (kw / 2) as isize;
    let mut out = vec![F::zero(); p_h * p_w];
    for a in 0..p_h as isize {
        for b in 0..p_w as isize {
            let mut acc = F::zero();
            for i in 0..kh as isize {
                for j in 0..kw as isize {
                    let src_r = a - (i - ch);
                    let src_c = b - (j - cw);
                    if src_r >= 0 && src_r < p_h as isize && src_c >= 0 && src_c < p_w as isize {
                        acc = acc
                            + kernel.at(i as usize, j as usize)
                                * input[src_r as usize * p_w + src_c as usize];
                    }
                }
            }
            out[a as usize * p_w + b as usize] = acc;
        }
    }
    out
}
