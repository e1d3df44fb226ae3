//! An independently written standard transformer encoder block, used only as
//! the equivalence oracle for the splitting path. Everything here is explicit
//! loops over scalars, deliberately naive and unoptimized: its value is
//! independence, not speed. Do not share code with the substep modules.

use crate::error::{Error, Result};
use crate::grid::{GridFunction, Kernel};
use crate::scalar::Scalar;
use crate::splitting::SkipMode;

/// Parameters of the reference block. `ffn_weights` holds full weight
/// matrices (not residual offsets) and per-token-row biases; `ln1`/`ln2` are
/// (mean, standard deviation) pairs.
#[derive(Debug, Clone)]
pub struct StdBlockParams<F: Scalar = f64> {
    pub w_q: Kernel<F>,
    pub w_k: Kernel<F>,
    pub w_v: Kernel<F>,
    pub ln1: (F, F),
    pub ln2: (F, F),
    pub ffn_weights: Vec<(Kernel<F>, Vec<F>)>,
}

fn dims_match<F: Scalar>(u: &GridFunction<F>, w: &Kernel<F>) -> Result<()> {
    if w.rows() != u.n_y() || w.cols() != u.n_y() {
        return Err(Error::DimMismatch {
            context: "reference block",
            expected_rows: u.n_y(),
            expected_cols: u.n_y(),
            got_rows: w.rows(),
            got_cols: w.cols(),
        });
    }
    Ok(())
}

/// Scaled dot-product attention term, `softmax(Q K^T / sqrt(scale_dim)) V`,
/// written as explicit triple loops. No residual.
pub fn std_attention<F: Scalar>(
    u: &GridFunction<F>,
    w_q: &Kernel<F>,
    w_k: &Kernel<F>,
    w_v: &Kernel<F>,
    scale_dim: usize,
) -> Result<GridFunction<F>> {
    dims_match(u, w_q)?;
    dims_match(u, w_k)?;
    dims_match(u, w_v)?;
    let n_x = u.n_x();
    let n_y = u.n_y();

    let project = |w: &Kernel<F>| -> Vec<F> {
        let mut out = vec![F::zero(); n_x * n_y];
        for i in 0..n_x {
            for j in 0..n_y {
                let mut acc = F::zero();
                for l in 0..n_y {
                    acc = acc + u.at(i, l) * w.at(l, j);
                }
                out[i * n_y + j] = acc;
            }
        }
        out
    };
    let q = project(w_q);
    let k = project(w_k);
    let v = project(w_v);

    let scale = F::cast(scale_dim).sqrt();
    let mut weights = vec![F::zero(); n_x * n_x];
    for i in 0..n_x {
        for j in 0..n_x {
            let mut acc = F::zero();
            for l in 0..n_y {
                acc = acc + q[i * n_y + l] * k[j * n_y + l];
            }
            weights[i * n_x + j] = acc / scale;
        }
    }
    for i in 0..n_x {
        let row = &mut weights[i * n_x..(i + 1) * n_x];
        let mut m = row[0];
        for &x in row.iter().skip(1) {
            if x > m {
                m = x;
            }
        }
        let mut sum = F::zero();
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            sum = sum + *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }

    let mut out = vec![F::zero(); n_x * n_y];
    for i in 0..n_x {
        for l in 0..n_y {
            let mut acc = F::zero();
            for j in 0..n_x {
                acc = acc + weights[i * n_x + j] * v[j * n_y + l];
            }
            out[i * n_y + l] = acc;
        }
    }
    GridFunction::new(n_x, n_y, out)
}

fn std_layer_norm<F: Scalar>(u: &GridFunction<F>, mean: F, std: F) -> GridFunction<F> {
    let n_x = u.n_x();
    let n_y = u.n_y();
    let mut out = vec![F::zero(); n_x * n_y];
    for i in 0..n_x {
        let mut alpha = F::zero();
        for l in 0..n_y {
            alpha = alpha + u.at(i, l);
        }
        alpha = alpha / F::cast(n_y);
        let mut beta = F::zero();
        for l in 0..n_y {
            let d = u.at(i, l) - alpha;
            beta = beta + d * d;
        }
        beta = beta / F::cast(n_y);
        let denom = beta.sqrt();
        for l in 0..n_y {
            out[i * n_y + l] = std * (u.at(i, l) - alpha) / denom + mean;
        }
    }
    GridFunction::new(n_x, n_y, out).expect("layer norm preserves shape")
}

/// Feedforward stack with full weights, per-token-row bias, ReLU after every
/// layer (including the last).
pub fn std_ffn<F: Scalar>(
    u: &GridFunction<F>,
    layers: &[(Kernel<F>, Vec<F>)],
) -> Result<GridFunction<F>> {
    if layers.is_empty() {
        return Err(Error::NoLayers);
    }
    let n_x = u.n_x();
    let n_y = u.n_y();
    let mut state = u.values().to_vec();
    for (w, b) in layers {
        dims_match(u, w)?;
        if b.len() != n_x {
            return Err(Error::LenMismatch {
                context: "reference ffn bias",
                expected: n_x,
                got: b.len(),
            });
        }
        let mut next = vec![F::zero(); n_x * n_y];
        for i in 0..n_x {
            for j in 0..n_y {
                let mut acc = F::zero();
                for k in 0..n_y {
                    acc = acc + state[i * n_y + k] * w.at(k, j);
                }
                let z = acc + b[i];
                next[i * n_y + j] = if z > F::zero() { z } else { F::zero() };
            }
        }
        state = next;
    }
    GridFunction::new(n_x, n_y, state)
}

/// One encoder block: attention with residual, layer norm, feedforward stack,
/// skip combination, layer norm.
pub fn std_encoder_block<F: Scalar>(
    u: &GridFunction<F>,
    p: &StdBlockParams<F>,
    skip_mode: SkipMode,
) -> Result<GridFunction<F>> {
    let n_x = u.n_x();
    let n_y = u.n_y();
    let attn = std_attention(u, &p.w_q, &p.w_k, &p.w_v, n_y)?;
    let mut summed = vec![F::zero(); n_x * n_y];
    for i in 0..n_x * n_y {
        summed[i] = u.values()[i] + attn.values()[i];
    }
    let u1 = std_layer_norm(&GridFunction::new(n_x, n_y, summed)?, p.ln1.0, p.ln1.1);
    let u2 = std_ffn(&u1, &p.ffn_weights)?;
    let half = F::cast(0.5);
    let mut combined = vec![F::zero(); n_x * n_y];
    for i in 0..n_x * n_y {
        let s = u2.values()[i] + u1.values()[i];
        combined[i] = match skip_mode {
            SkipMode::Average => s * half,
            SkipMode::Add => s,
        };
    }
    Ok(std_layer_norm(
        &GridFunction::new(n_x, n_y, combined)?,
        p.ln2.0,
        p.ln2.1,
    ))
}
