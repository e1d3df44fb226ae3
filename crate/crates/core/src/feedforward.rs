//! Feedforward substeps: a linear transform with built-in residual and a
//! per-token-row bias, followed by projection onto the nonnegative orthant.
//!
//! One substep computes `relu(u + u w + b)`, so the effective linear layer
//! has weight `I + w`. The bias is one scalar per token row, added to every
//! entry of that row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridFunction, Kernel};
use crate::projection::project_s2;
use crate::scalar::Scalar;

/// One feedforward layer: square weight `w` over the embedding width and a
/// bias vector with one entry per token row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FfnLayerParams<F: Scalar = f64> {
    w: Kernel<F>,
    b: Vec<F>,
}

impl<F: Scalar> FfnLayerParams<F> {
    pub fn new(w: Kernel<F>, b: Vec<F>) -> Result<Self> {
        if w.rows() != w.cols() {
            return Err(Error::Inconsistent(format!(
                "ffn weight must be square, got {}x{}",
                w.rows(),
                w.cols()
            )));
        }
        if b.is_empty() {
            return Err(Error::Invalid("ffn bias must not be empty".into()));
        }
        for (index, v) in b.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "ffn bias",
                    index,
                });
            }
        }
        Ok(Self { w, b })
    }

    pub fn w(&self) -> &Kernel<F> {
        &self.w
    }

    pub fn b(&self) -> &[F] {
        &self.b
    }

    /// (token count, embedding width) the layer expects.
    pub fn dims(&self) -> (usize, usize) {
        (self.b.len(), self.w.rows())
    }
}

#[derive(Deserialize)]
#[serde(bound = "F: Scalar")]
struct FfnLayerRepr<F: Scalar> {
    w: Kernel<F>,
    b: Vec<F>,
}

impl<'de, F: Scalar> Deserialize<'de> for FfnLayerParams<F> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = FfnLayerRepr::<F>::deserialize(d)?;
        Self::new(r.w, r.b).map_err(serde::de::Error::custom)
    }
}

/// One feedforward substep: `relu((u + u w) + b)`, with the bias broadcast
/// along each token row. The two phases (linear update, then projection) are
/// evaluated literally in that order.
pub fn ffn_substep<F: Scalar>(u: &GridFunction<F>, p: &FfnLayerParams<F>) -> Result<GridFunction<F>> {
    let (n_x, n_y) = p.dims();
    if u.n_x() != n_x || u.n_y() != n_y {
        return Err(Error::DimMismatch {
            context: "ffn substep",
            expected_rows: n_x,
            expected_cols: n_y,
            got_rows: u.n_x(),
            got_cols: u.n_y(),
        });
    }
    let linear = u.add(&u.matmul(&p.w)?)?;
    let mut values = Vec::with_capacity(n_x * n_y);
    for k in 0..n_x {
        for &v in linear.row(k) {
            values.push(v + p.b[k]);
        }
    }
    let pre_activation = GridFunction::new(n_x, n_y, values)?;
    Ok(project_s2(&pre_activation))
}

/// Sequential application of `layers`; the layer list must not be empty.
pub fn ffn_stack<F: Scalar>(
    u: &GridFunction<F>,
    layers: &[FfnLayerParams<F>],
) -> Result<GridFunction<F>> {
    if layers.is_empty() {
        return Err(Error::NoLayers);
    }
    let mut state = u.clone();
    for layer in layers {
        state = ffn_substep(&state, layer)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: &[Vec<f64>]) -> GridFunction {
        GridFunction::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_on_nonnegative_input_with_zero_params() {
        let u = grid(&[vec![0.0, 1.0], vec![2.0, 0.5]]);
        let p = FfnLayerParams::new(Kernel::zeros(2, 2).unwrap(), vec![0.0, 0.0]).unwrap();
        assert_eq!(ffn_substep(&u, &p).unwrap(), u);
    }

    #[test]
    fn residual_cancellation_with_minus_identity() {
        let u = grid(&[vec![1.0, -2.0], vec![3.0, 4.0]]);
        let minus_i = Kernel::identity(2).unwrap().scale(-1.0);
        let p = FfnLayerParams::new(minus_i, vec![0.0, 0.0]).unwrap();
        let out = ffn_substep(&u, &p).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_evaluation_with_bias_and_relu() {
        let u = grid(&[vec![1.0, -3.0]]);
        let p = FfnLayerParams::new(Kernel::zeros(2, 2).unwrap(), vec![1.0]).unwrap();
        let out = ffn_substep(&u, &p).unwrap();
        assert_eq!(out.values(), &[2.0, 0.0]);
    }

    #[test]
    fn bias_is_per_token_row() {
        let u = grid(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let p = FfnLayerParams::new(Kernel::zeros(2, 2).unwrap(), vec![1.0, 2.0]).unwrap();
        let out = ffn_substep(&u, &p).unwrap();
        assert_eq!(out.values(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn stack_of_one_reduces_to_substep() {
        let u = grid(&[vec![0.4, -0.2], vec![1.5, 0.1]]);
        let p = FfnLayerParams::new(
            Kernel::new(2, 2, vec![0.3, -0.1, 0.2, 0.5]).unwrap(),
            vec![0.1, -0.4],
        )
        .unwrap();
        let direct = ffn_substep(&u, &p).unwrap();
        let stacked = ffn_stack(&u, &[p]).unwrap();
        assert_eq!(direct, stacked);
    }

    #[test]
    fn stack_of_two_noops_on_nonnegative_input() {
        let u = grid(&[vec![0.0, 1.0], vec![2.0, 0.5]]);
        let zero = || FfnLayerParams::new(Kernel::zeros(2, 2).unwrap(), vec![0.0, 0.0]).unwrap();
        assert_eq!(ffn_stack(&u, &[zero(), zero()]).unwrap(), u);
    }

    #[test]
    fn empty_stack_is_an_error() {
        let u = grid(&[vec![1.0]]);
        assert!(ffn_stack(&u, &[]).is_err());
    }

    #[test]
    fn output_is_always_nonnegative() {
        let u = grid(&[vec![-5.0, 3.0], vec![0.2, -0.8]]);
        let p = FfnLayerParams::new(
            Kernel::new(2, 2, vec![-2.0, 1.0, 0.5, -3.0]).unwrap(),
            vec![-1.0, 0.5],
        )
        .unwrap();
        let out = ffn_substep(&u, &p).unwrap();
        assert!(out.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn two_phase_evaluation_is_bitwise_identical() {
        let u = grid(&[vec![0.7, -1.1, 0.3], vec![-0.2, 0.9, 1.4]]);
        let p = FfnLayerParams::new(
            Kernel::new(3, 3, (0..9).map(|i| 0.1 * i as f64 - 0.4).collect()).unwrap(),
            vec![0.25, -0.5],
        )
        .unwrap();
        let substep = ffn_substep(&u, &p).unwrap();

        // Phase 1 by hand: u + u w + b, then phase 2: project.
        let linear = u.add(&u.matmul(p.w()).unwrap()).unwrap();
        let mut values = Vec::new();
        for k in 0..u.n_x() {
            for &v in linear.row(k) {
                values.push(v + p.b()[k]);
            }
        }
        let bar = GridFunction::new(u.n_x(), u.n_y(), values).unwrap();
        let replay = project_s2(&bar);
        let bits = substep
            .values()
            .iter()
            .zip(replay.values())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(bits);
    }
}
