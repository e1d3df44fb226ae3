//! Q/K/V transforms, attention scores, and the attention substep in
//! single-head, multi-head, and convolutional form.
//!
//! The substep includes the residual: `u + scores(Q, K) * V`. Scores are
//! scaled by `1/sqrt(scale_dim)` with `scale_dim = n_y` throughout; the
//! unscaled variant is reachable by calling [`scores`] with `scale_dim = 1`.
//! In the multi-head substep the input is added once, outside the head sum.

use serde::{Deserialize, Serialize};

use crate::conv::conv2d_same;
use crate::error::{Error, Result};
use crate::grid::{inner_product_y, softmax2, GridFunction, Kernel};
use crate::scalar::Scalar;

/// Square Q/K/V weight kernels of one attention head.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingleHeadWeights<F: Scalar = f64> {
    w_q: Kernel<F>,
    w_k: Kernel<F>,
    w_v: Kernel<F>,
}

impl<F: Scalar> SingleHeadWeights<F> {
    pub fn new(w_q: Kernel<F>, w_k: Kernel<F>, w_v: Kernel<F>) -> Result<Self> {
        let n = w_q.rows();
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v)] {
            if w.rows() != n || w.cols() != n {
                return Err(Error::Inconsistent(format!(
                    "attention weight {name} must be {n}x{n}, got {}x{}",
                    w.rows(),
                    w.cols()
                )));
            }
        }
        Ok(Self { w_q, w_k, w_v })
    }

    /// Embedding width the weights act on.
    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn w_q(&self) -> &Kernel<F> {
        &self.w_q
    }

    pub fn w_k(&self) -> &Kernel<F> {
        &self.w_k
    }

    pub fn w_v(&self) -> &Kernel<F> {
        &self.w_v
    }
}

#[derive(Deserialize)]
#[serde(bound = "F: Scalar")]
struct SingleHeadRepr<F: Scalar> {
    w_q: Kernel<F>,
    w_k: Kernel<F>,
    w_v: Kernel<F>,
}

impl<'de, F: Scalar> Deserialize<'de> for SingleHeadWeights<F> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = SingleHeadRepr::<F>::deserialize(d)?;
        Self::new(r.w_q, r.w_k, r.w_v).map_err(serde::de::Error::custom)
    }
}

/// Ordered list of heads sharing one embedding width.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiHeadWeights<F: Scalar = f64> {
    heads: Vec<SingleHeadWeights<F>>,
}

impl<F: Scalar> MultiHeadWeights<F> {
    pub fn new(heads: Vec<SingleHeadWeights<F>>) -> Result<Self> {
        let first = heads.first().ok_or(Error::NoHeads)?;
        let n = first.dim();
        if heads.iter().any(|h| h.dim() != n) {
            return Err(Error::Inconsistent(
                "all attention heads must share the embedding width".into(),
            ));
        }
        Ok(Self { heads })
    }

    pub fn heads(&self) -> &[SingleHeadWeights<F>] {
        &self.heads
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn dim(&self) -> usize {
        self.heads[0].dim()
    }
}

#[derive(Deserialize)]
#[serde(bound = "F: Scalar")]
struct MultiHeadRepr<F: Scalar> {
    heads: Vec<SingleHeadWeights<F>>,
}

impl<'de, F: Scalar> Deserialize<'de> for MultiHeadWeights<F> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = MultiHeadRepr::<F>::deserialize(d)?;
        Self::new(r.heads).map_err(serde::de::Error::custom)
    }
}

/// Q/K/V as 2-D convolution kernels applied per token over a `p_h x p_w`
/// patch grid with `p_h * p_w = n_y`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvHeadWeights<F: Scalar = f64> {
    w_q: Kernel<F>,
    w_k: Kernel<F>,
    w_v: Kernel<F>,
    patch_h: usize,
    patch_w: usize,
}

fn ensure_odd_kernel<F: Scalar>(w: &Kernel<F>) -> Result<()> {
    if w.rows() % 2 == 0 || w.cols() % 2 == 0 {
        return Err(Error::EvenKernel {
            rows: w.rows(),
            cols: w.cols(),
        });
    }
    Ok(())
}

impl<F: Scalar> ConvHeadWeights<F> {
    pub fn new(
        w_q: Kernel<F>,
        w_k: Kernel<F>,
        w_v: Kernel<F>,
        patch_h: usize,
        patch_w: usize,
    ) -> Result<Self> {
        for w in [&w_q, &w_k, &w_v] {
            ensure_odd_kernel(w)?;
        }
        if patch_h == 0 || patch_w == 0 {
            return Err(Error::ZeroDim {
                rows: patch_h,
                cols: patch_w,
            });
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            patch_h,
            patch_w,
        })
    }

    pub fn patch(&self) -> (usize, usize) {
        (self.patch_h, self.patch_w)
    }

    pub fn w_q(&self) -> &Kernel<F> {
        &self.w_q
    }

    pub fn w_k(&self) -> &Kernel<F> {
        &self.w_k
    }

    pub fn w_v(&self) -> &Kernel<F> {
        &self.w_v
    }

    pub fn check_width(&self, n_y: usize) -> Result<()> {
        if self.patch_h * self.patch_w != n_y {
            return Err(Error::PatchGrid {
                n_y,
                p_h: self.patch_h,
                p_w: self.patch_w,
            });
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(bound = "F: Scalar")]
struct ConvHeadRepr<F: Scalar> {
    w_q: Kernel<F>,
    w_k: Kernel<F>,
    w_v: Kernel<F>,
    patch_h: usize,
    patch_w: usize,
}

impl<'de, F: Scalar> Deserialize<'de> for ConvHeadWeights<F> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = ConvHeadRepr::<F>::deserialize(d)?;
        Self::new(r.w_q, r.w_k, r.w_v, r.patch_h, r.patch_w).map_err(serde::de::Error::custom)
    }
}

/// Q = u w_q, K = u w_k, V = u w_v.
pub fn qkv<F: Scalar>(
    u: &GridFunction<F>,
    w: &SingleHeadWeights<F>,
) -> Result<(GridFunction<F>, GridFunction<F>, GridFunction<F>)> {
    Ok((u.matmul(&w.w_q)?, u.matmul(&w.w_k)?, u.matmul(&w.w_v)?))
}

/// Row-stochastic score matrix: `softmax2(Q K^T / sqrt(scale_dim))`.
pub fn scores<F: Scalar>(
    q: &GridFunction<F>,
    k: &GridFunction<F>,
    scale_dim: usize,
) -> Result<Kernel<F>> {
    if q.n_x() != k.n_x() || q.n_y() != k.n_y() {
        return Err(Error::DimMismatch {
            context: "attention scores",
            expected_rows: q.n_x(),
            expected_cols: q.n_y(),
            got_rows: k.n_x(),
            got_cols: k.n_y(),
        });
    }
    if scale_dim == 0 {
        return Err(Error::Invalid("scale_dim must be positive".into()));
    }
    let n = q.n_x();
    let s = F::cast(scale_dim).sqrt();
    let mut raw = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            raw.push(inner_product_y(q.row(i), k.row(j))? / s);
        }
    }
    Ok(softmax2(&Kernel::new(n, n, raw)?))
}

/// `gamma * v`: applies a score matrix to the value rows.
fn apply_scores<F: Scalar>(gamma: &Kernel<F>, v: &GridFunction<F>) -> GridFunction<F> {
    let n_x = v.n_x();
    let n_y = v.n_y();
    let mut out = Vec::with_capacity(n_x * n_y);
    for i in 0..n_x {
        for l in 0..n_y {
            let mut acc = F::zero();
            for j in 0..n_x {
                acc = acc + gamma.at(i, j) * v.at(j, l);
            }
            out.push(acc);
        }
    }
    GridFunction::new(n_x, n_y, out).expect("score application preserves shape")
}

/// The attention term alone, without the residual.
fn attention_term<F: Scalar>(
    u: &GridFunction<F>,
    w: &SingleHeadWeights<F>,
) -> Result<GridFunction<F>> {
    let (q, k, v) = qkv(u, w)?;
    let gamma = scores(&q, &k, u.n_y())?;
    Ok(apply_scores(&gamma, &v))
}

/// Single-head attention substep: `u0 + scores(Q, K) V`. The residual is part
/// of the substep.
pub fn attention_substep<F: Scalar>(
    u0: &GridFunction<F>,
    w: &SingleHeadWeights<F>,
) -> Result<GridFunction<F>> {
    u0.add(&attention_term(u0, w)?)
}

/// Multi-head attention substep: `u0` plus the sum of per-head attention
/// terms, the input added once outside the head sum. With one head this is
/// identical to [`attention_substep`].
pub fn multihead_substep<F: Scalar>(
    u0: &GridFunction<F>,
    w: &MultiHeadWeights<F>,
) -> Result<GridFunction<F>> {
    let mut acc = u0.clone();
    for head in &w.heads {
        acc = acc.add(&attention_term(u0, head)?)?;
    }
    Ok(acc)
}

/// Q/K/V by per-token 2-D convolution over the declared patch grid.
pub fn conv_qkv<F: Scalar>(
    u: &GridFunction<F>,
    w: &ConvHeadWeights<F>,
) -> Result<(GridFunction<F>, GridFunction<F>, GridFunction<F>)> {
    w.check_width(u.n_y())?;
    let conv_all = |kernel: &Kernel<F>| -> GridFunction<F> {
        let mut values = Vec::with_capacity(u.n_x() * u.n_y());
        for t in 0..u.n_x() {
            values.extend(conv2d_same(u.row(t), w.patch_h, w.patch_w, kernel));
        }
        GridFunction::new(u.n_x(), u.n_y(), values).expect("convolution preserves shape")
    };
    Ok((conv_all(&w.w_q), conv_all(&w.w_k), conv_all(&w.w_v)))
}

/// Convolutional attention substep: same score/apply structure as
/// [`attention_substep`] with convolutional Q/K/V.
pub fn conv_attention_substep<F: Scalar>(
    u0: &GridFunction<F>,
    w: &ConvHeadWeights<F>,
) -> Result<GridFunction<F>> {
    let (q, k, v) = conv_qkv(u0, w)?;
    let gamma = scores(&q, &k, u0.n_y())?;
    u0.add(&apply_scores(&gamma, &v))
}
