//! The discrete control problem at desk scale: mean loss over a dataset,
//! central finite-difference gradients over a flat view of the trainable
//! scalars, and plain gradient descent.
//!
//! Finite differences keep the training path independent of the forward
//! implementation; a parameter cap keeps the cost honest.

use serde::{Deserialize, Serialize};

use crate::adapters::{vit_forward, ConvTokenEmbedParams, VitParams};
use crate::attention::{ConvHeadWeights, MultiHeadWeights, SingleHeadWeights};
use crate::error::{Error, Result};
use crate::grid::{GridFunction, Kernel};
use crate::projection::NormTarget;
use crate::scalar::Scalar;
use crate::splitting::{propagate, AttentionParams, BlockParams, ModelParams};

/// Loss applied to each pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// One supervised pair: grid-to-grid, or patches-to-vector through the image
/// adapters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged, bound = "F: Scalar")]
pub enum Sample<F: Scalar = f64> {
    Grid {
        input: GridFunction<F>,
        target: GridFunction<F>,
    },
    Patches {
        patches: Kernel<F>,
        target: Vec<F>,
    },
}

/// Supervised pairs with uniform shapes and a loss kind.
#[derive(Debug, Clone, Serialize)]
#[serde(bound = "F: Scalar")]
pub struct Dataset<F: Scalar = f64> {
    loss_kind: LossKind,
    pairs: Vec<Sample<F>>,
}

impl<F: Scalar> Dataset<F> {
    pub fn new(loss_kind: LossKind, pairs: Vec<Sample<F>>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let describe = |s: &Sample<F>| match s {
            Sample::Grid { input, target } => (
                false,
                input.n_x(),
                input.n_y(),
                target.n_x() * target.n_y(),
            ),
            Sample::Patches { patches, target } => {
                (true, patches.rows(), patches.cols(), target.len())
            }
        };
        let first = describe(&pairs[0]);
        for (i, s) in pairs.iter().enumerate() {
            if describe(s) != first {
                return Err(Error::Inconsistent(format!(
                    "dataset pair {i} does not match the shape of pair 0"
                )));
            }
            if let Sample::Patches { target, .. } = s {
                for (index, v) in target.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            context: "dataset target",
                            index,
                        });
                    }
                }
            }
        }
        if loss_kind == LossKind::CrossEntropy && !first.0 {
            return Err(Error::Inconsistent(
                "cross entropy applies to head outputs; the dataset holds grid targets".into(),
            ));
        }
        Ok(Self { loss_kind, pairs })
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss_kind
    }

    pub fn pairs(&self) -> &[Sample<F>] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Deserialize)]
#[serde(bound = "F: Scalar")]
struct DatasetRepr<F: Scalar> {
    loss_kind: LossKind,
    pairs: Vec<Sample<F>>,
}

impl<'de, F: Scalar> Deserialize<'de> for Dataset<F> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = DatasetRepr::<F>::deserialize(d)?;
        Self::new(r.loss_kind, r.pairs).map_err(serde::de::Error::custom)
    }
}

fn mse_entries<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x - *y;
        acc = acc + d * d;
    }
    acc / F::cast(a.len())
}

fn cross_entropy<F: Scalar>(logits: &[F], target: &[F]) -> F {
    let mut m = logits[0];
    for &v in &logits[1..] {
        if v > m {
            m = v;
        }
    }
    let mut sum = F::zero();
    for &v in logits {
        sum = sum + (v - m).exp();
    }
    let log_z = sum.ln();
    let mut acc = F::zero();
    for (o, t) in logits.iter().zip(target.iter()) {
        acc = acc - *t * ((*o - m) - log_z);
    }
    acc
}

/// Mean loss of the model over the dataset.
pub fn loss<F: Scalar>(m: &ModelParams<F>, d: &Dataset<F>) -> Result<F> {
    let mut total = F::zero();
    for pair in &d.pairs {
        let l = match pair {
            Sample::Grid { input, target } => {
                let out = propagate(input, m)?;
                if out.n_x() != target.n_x() || out.n_y() != target.n_y() {
                    return Err(Error::DimMismatch {
                        context: "loss target",
                        expected_rows: out.n_x(),
                        expected_cols: out.n_y(),
                        got_rows: target.n_x(),
                        got_cols: target.n_y(),
                    });
                }
                match d.loss_kind {
                    LossKind::Mse => mse_entries(out.values(), target.values()),
                    LossKind::CrossEntropy => {
                        return Err(Error::Inconsistent(
                            "cross entropy needs head outputs".into(),
                        ))
                    }
                }
            }
            Sample::Patches { patches, target } => {
                let vit = m.vit().ok_or_else(|| {
                    Error::Inconsistent("patch pairs need adapter parameters on the model".into())
                })?;
                let out = vit_forward(patches, vit, m)?;
                if out.len() != target.len() {
                    return Err(Error::LenMismatch {
                        context: "loss target",
                        expected: out.len(),
                        got: target.len(),
                    });
                }
                match d.loss_kind {
                    LossKind::Mse => mse_entries(&out, target),
                    LossKind::CrossEntropy => cross_entropy(&out, target),
                }
            }
        };
        total = total + l;
    }
    Ok(total / F::cast(d.pairs.len()))
}

fn flatten_attn<F: Scalar>(attn: &AttentionParams<F>, out: &mut Vec<F>) {
    let push_head = |h: &SingleHeadWeights<F>, out: &mut Vec<F>| {
        out.extend_from_slice(h.w_q().values());
        out.extend_from_slice(h.w_k().values());
        out.extend_from_slice(h.w_v().values());
    };
    match attn {
        AttentionParams::Single(w) => push_head(w, out),
        AttentionParams::MultiHead(w) => {
            for head in w.heads() {
                push_head(head, out);
            }
        }
        AttentionParams::Conv(w) => {
            out.extend_from_slice(w.w_q().values());
            out.extend_from_slice(w.w_k().values());
            out.extend_from_slice(w.w_v().values());
        }
    }
}

struct Cursor<'a, F> {
    values: &'a [F],
    pos: usize,
}

impl<'a, F: Scalar> Cursor<'a, F> {
    fn take(&mut self, n: usize) -> &'a [F] {
        let slice = &self.values[self.pos..self.pos + n];
        self.pos += n;
        slice
    }

    fn take_one(&mut self) -> F {
        let v = self.values[self.pos];
        self.pos += 1;
        v
    }
}

/// Flat vector view of every trainable scalar in a model, in schedule order:
/// per block the conv token embedding (kernel, bias) when present, the
/// attention kernels, optionally the first normalization targets, the
/// feedforward layers (weight, bias), optionally the second normalization
/// targets; then the adapter parameters (embed, class token, head) when
/// present. Rebuilding through [`FlatParams::apply_to`] restores every scalar
/// bit for bit.
#[derive(Debug, Clone)]
pub struct FlatParams<F: Scalar = f64> {
    values: Vec<F>,
    train_norms: bool,
}

impl<F: Scalar> FlatParams<F> {
    pub fn from_model(m: &ModelParams<F>, train_norms: bool) -> Self {
        let mut values = Vec::new();
        for block in m.blocks() {
            if let Some(cte) = block.conv_embed() {
                values.extend_from_slice(cte.kernel().values());
                values.extend_from_slice(cte.bias());
            }
            flatten_attn(block.attn(), &mut values);
            if train_norms {
                values.push(block.norm1().sigma1());
                values.push(block.norm1().sigma2());
            }
            for layer in block.ffn() {
                values.extend_from_slice(layer.w().values());
                values.extend_from_slice(layer.b());
            }
            if train_norms {
                values.push(block.norm2().sigma1());
                values.push(block.norm2().sigma2());
            }
        }
        if let Some(vit) = m.vit() {
            values.extend_from_slice(vit.embed().values());
            values.extend_from_slice(vit.class_token());
            values.extend_from_slice(vit.head().values());
        }
        Self {
            values,
            train_norms,
        }
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn train_norms(&self) -> bool {
        self.train_norms
    }

    /// Rebuilds a model with this vector's scalars, taking every shape from
    /// `template`.
    pub fn apply_to(&self, template: &ModelParams<F>) -> Result<ModelParams<F>> {
        let expected = Self::from_model(template, self.train_norms).len();
        if expected != self.values.len() {
            return Err(Error::LenMismatch {
                context: "flat parameters",
                expected,
                got: self.values.len(),
            });
        }
        let mut cur = Cursor {
            values: &self.values,
            pos: 0,
        };
        let rebuild_kernel = |cur: &mut Cursor<F>, k: &Kernel<F>| -> Result<Kernel<F>> {
            Kernel::new(k.rows(), k.cols(), cur.take(k.rows() * k.cols()).to_vec())
        };

        let mut blocks = Vec::with_capacity(template.n_t());
        for block in template.blocks() {
            let conv_embed = match block.conv_embed() {
                Some(cte) => {
                    let kernel = rebuild_kernel(&mut cur, cte.kernel())?;
                    let bias = cur.take(cte.bias().len()).to_vec();
                    let (p_h, p_w) = cte.patch();
                    Some(ConvTokenEmbedParams::new(kernel, bias, p_h, p_w)?)
                }
                None => None,
            };
            let attn = match block.attn() {
                AttentionParams::Single(w) => {
                    let w_q = rebuild_kernel(&mut cur, w.w_q())?;
                    let w_k = rebuild_kernel(&mut cur, w.w_k())?;
                    let w_v = rebuild_kernel(&mut cur, w.w_v())?;
                    AttentionParams::Single(SingleHeadWeights::new(w_q, w_k, w_v)?)
                }
                AttentionParams::MultiHead(w) => {
                    let mut heads = Vec::with_capacity(w.n_heads());
                    for head in w.heads() {
                        let w_q = rebuild_kernel(&mut cur, head.w_q())?;
                        let w_k = rebuild_kernel(&mut cur, head.w_k())?;
                        let w_v = rebuild_kernel(&mut cur, head.w_v())?;
                        heads.push(SingleHeadWeights::new(w_q, w_k, w_v)?);
                    }
                    AttentionParams::MultiHead(MultiHeadWeights::new(heads)?)
                }
                AttentionParams::Conv(w) => {
                    let w_q = rebuild_kernel(&mut cur, w.w_q())?;
                    let w_k = rebuild_kernel(&mut cur, w.w_k())?;
                    let w_v = rebuild_kernel(&mut cur, w.w_v())?;
                    let (p_h, p_w) = w.patch();
                    AttentionParams::Conv(ConvHeadWeights::new(w_q, w_k, w_v, p_h, p_w)?)
                }
            };
            let norm1 = if self.train_norms {
                let s1 = cur.take_one();
                let s2 = cur.take_one();
                NormTarget::new(s1, s2, block.norm1().epsilon())?
            } else {
                *block.norm1()
            };
            let mut ffn = Vec::with_capacity(block.j());
            for layer in block.ffn() {
                let w = rebuild_kernel(&mut cur, layer.w())?;
                let b = cur.take(layer.b().len()).to_vec();
                ffn.push(crate::feedforward::FfnLayerParams::new(w, b)?);
            }
            let norm2 = if self.train_norms {
                let s1 = cur.take_one();
                let s2 = cur.take_one();
                NormTarget::new(s1, s2, block.norm2().epsilon())?
            } else {
                *block.norm2()
            };
            blocks.push(BlockParams::with_skip_mode(
                attn,
                norm1,
                norm2,
                ffn,
                conv_embed,
                block.skip_mode(),
            )?);
        }
        let vit = match template.vit() {
            Some(v) => {
                let embed = rebuild_kernel(&mut cur, v.embed())?;
                let class_token = cur.take(v.class_token().len()).to_vec();
                let head = rebuild_kernel(&mut cur, v.head())?;
                Some(VitParams::new(embed, class_token, head)?)
            }
            None => None,
        };
        ModelParams::new(template.mode(), blocks, vit)
    }
}

/// Central finite differences of the mean loss with respect to every
/// trainable scalar. Deterministic, and independent of coordinate order: each
/// coordinate is probed from a clean copy.
pub fn fd_gradient<F: Scalar>(
    m: &ModelParams<F>,
    d: &Dataset<F>,
    h: F,
    train_norms: bool,
) -> Result<Vec<F>> {
    if !(h > F::zero()) {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let flat = FlatParams::from_model(m, train_norms);
    let two_h = h + h;
    let mut grad = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus.values_mut()[i] = plus.values()[i] + h;
        let mut minus = flat.clone();
        minus.values_mut()[i] = minus.values()[i] - h;
        let lp = loss(&plus.apply_to(m)?, d)?;
        let lm = loss(&minus.apply_to(m)?, d)?;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::NonFiniteLoss { index: i });
        }
        grad.push((lp - lm) / two_h);
    }
    Ok(grad)
}

/// Settings for [`train`].
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions<F: Scalar = f64> {
    pub steps: usize,
    pub lr: F,
    pub seed: u64,
    pub fd_step: F,
    pub train_norms: bool,
    pub param_cap: usize,
    pub divergence_limit: F,
}

impl<F: Scalar> TrainOptions<F> {
    pub fn new(steps: usize, lr: F, seed: u64) -> Self {
        Self {
            steps,
            lr,
            seed,
            fd_step: F::cast(1e-5),
            train_norms: false,
            param_cap: 2000,
            divergence_limit: F::cast(1e6),
        }
    }
}

/// Plain gradient descent with a fixed learning rate on the flat parameter
/// vector. Returns the trained model and the loss curve (initial loss first,
/// then one entry per step). Aborts when the loss exceeds the divergence
/// limit.
pub fn train<F: Scalar>(
    m: &ModelParams<F>,
    d: &Dataset<F>,
    opts: &TrainOptions<F>,
) -> Result<(ModelParams<F>, Vec<F>)> {
    let count = FlatParams::from_model(m, opts.train_norms).len();
    if count > opts.param_cap {
        return Err(Error::ParamCap {
            count,
            cap: opts.param_cap,
        });
    }
    let mut model = m.clone();
    let mut losses = Vec::with_capacity(opts.steps + 1);
    losses.push(loss(&model, d)?);
    for step in 0..opts.steps {
        let grad = fd_gradient(&model, d, opts.fd_step, opts.train_norms)?;
        let mut flat = FlatParams::from_model(&model, opts.train_norms);
        for (v, g) in flat.values_mut().iter_mut().zip(grad) {
            *v = *v - opts.lr * g;
        }
        model = flat.apply_to(&model)?;
        let l = loss(&model, d)?;
        if !l.is_finite() || l > opts.divergence_limit {
            return Err(Error::Diverged {
                step,
                loss: l.to_f64().unwrap_or(f64::NAN),
            });
        }
        losses.push(l);
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(n_x: usize, n_y: usize) -> ModelParams {
        let w = |s: f64| {
            Kernel::new(
                n_y,
                n_y,
                (0..n_y * n_y).map(|i| s * (i as f64 - 2.0) / 10.0).collect(),
            )
            .unwrap()
        };
        let block = BlockParams::new(
            crate::splitting::AttentionParams::Single(
                SingleHeadWeights::new(w(0.3), w(-0.2), w(0.5)).unwrap(),
            ),
            NormTarget::standard(),
            NormTarget::standard(),
            vec![crate::feedforward::FfnLayerParams::new(w(0.1), vec![0.05; n_x]).unwrap()],
            None,
        )
        .unwrap();
        ModelParams::new(crate::splitting::ModelMode::Vanilla, vec![block], None).unwrap()
    }

    fn grid_pair(m: &ModelParams, shift: f64) -> Sample {
        let n_x = m.n_x();
        let n_y = m.n_y();
        let input = GridFunction::from_fn(n_x, n_y, |k, l| {
            ((k * n_y + l) as f64 * 0.37 + shift).sin()
        })
        .unwrap();
        let target = GridFunction::from_fn(n_x, n_y, |k, l| {
            ((k * n_y + l) as f64 * 0.21 - shift).cos()
        })
        .unwrap();
        Sample::Grid { input, target }
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let m = tiny_model(2, 3);
        let input = GridFunction::from_fn(2, 3, |k, l| (k + l) as f64 * 0.3 - 0.4).unwrap();
        let target = propagate(&input, &m).unwrap();
        let d = Dataset::new(LossKind::Mse, vec![Sample::Grid { input, target }]).unwrap();
        assert_eq!(loss(&m, &d).unwrap(), 0.0);
    }

    #[test]
    fn single_pair_mse_is_the_definition() {
        let m = tiny_model(2, 3);
        let input = GridFunction::from_fn(2, 3, |k, l| (k as f64 - l as f64) * 0.5).unwrap();
        let target = GridFunction::zeros(2, 3).unwrap();
        let out = propagate(&input, &m).unwrap();
        let expected: f64 =
            out.values().iter().map(|v| v * v).sum::<f64>() / out.values().len() as f64;
        let d = Dataset::new(LossKind::Mse, vec![Sample::Grid { input, target }]).unwrap();
        assert!((loss(&m, &d).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn duplicating_pairs_leaves_the_mean_loss_unchanged() {
        let m = tiny_model(2, 3);
        let p = grid_pair(&m, 0.3);
        let d1 = Dataset::new(LossKind::Mse, vec![p.clone()]).unwrap();
        let d2 = Dataset::new(LossKind::Mse, vec![p.clone(), p]).unwrap();
        let l1 = loss(&m, &d1).unwrap();
        let l2 = loss(&m, &d2).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
    }

    #[test]
    fn flat_roundtrip_is_bitwise() {
        let m = tiny_model(2, 4);
        for train_norms in [false, true] {
            let flat = FlatParams::from_model(&m, train_norms);
            let back = flat.apply_to(&m).unwrap();
            let again = FlatParams::from_model(&back, train_norms);
            assert_eq!(flat.len(), again.len());
            let bits = flat
                .values()
                .iter()
                .zip(again.values())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(bits);
            assert_eq!(back, m);
        }
    }

    #[test]
    fn gradient_is_independent_of_coordinate_order() {
        let m = tiny_model(2, 2);
        let d = Dataset::new(LossKind::Mse, vec![grid_pair(&m, 0.1)]).unwrap();
        let g = fd_gradient(&m, &d, 1e-5, false).unwrap();
        // Probe a few coordinates in reverse order by hand.
        let flat = FlatParams::from_model(&m, false);
        for i in (0..flat.len()).rev().take(5) {
            let mut plus = flat.clone();
            plus.values_mut()[i] += 1e-5;
            let mut minus = flat.clone();
            minus.values_mut()[i] -= 1e-5;
            let lp = loss(&plus.apply_to(&m).unwrap(), &d).unwrap();
            let lm = loss(&minus.apply_to(&m).unwrap(), &d).unwrap();
            let expect = (lp - lm) / 2e-5;
            assert_eq!(g[i].to_bits(), expect.to_bits());
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_and_loss_flat() {
        let m = tiny_model(2, 2);
        let d = Dataset::new(LossKind::Mse, vec![grid_pair(&m, 0.2)]).unwrap();
        let (trained, losses) = train(&m, &d, &TrainOptions::new(5, 0.0, 0)).unwrap();
        assert_eq!(trained, m);
        assert!(losses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn parameter_cap_is_enforced() {
        let m = tiny_model(2, 8);
        let d = Dataset::new(LossKind::Mse, vec![grid_pair(&m, 0.2)]).unwrap();
        let mut opts = TrainOptions::new(1, 0.1, 0);
        opts.param_cap = 10;
        assert!(matches!(
            train(&m, &d, &opts),
            Err(Error::ParamCap { .. })
        ));
    }

    #[test]
    fn cross_entropy_rejects_grid_targets() {
        let m = tiny_model(2, 3);
        let pair = grid_pair(&m, 0.0);
        assert!(Dataset::new(LossKind::CrossEntropy, vec![pair]).is_err());
    }

    #[test]
    fn richardson_step_halving_consistency() {
        let m = tiny_model(2, 2);
        let d = Dataset::new(LossKind::Mse, vec![grid_pair(&m, 0.4)]).unwrap();
        let h = 1e-3;
        let g1 = fd_gradient(&m, &d, h, false).unwrap();
        let g2 = fd_gradient(&m, &d, h / 2.0, false).unwrap();
        let g4 = fd_gradient(&m, &d, h / 4.0, false).unwrap();
        // Central differences carry an O(h^2) error term, so successive
        // halvings shrink the defect by about 4.
        for i in 0..g1.len().min(10) {
            let e1 = (g1[i] - g2[i]).abs();
            let e2 = (g2[i] - g4[i]).abs();
            assert!(
                e2 <= 0.5 * e1 + 1e-12,
                "coordinate {i}: e1 = {e1:.3e}, e2 = {e2:.3e}"
            );
        }
    }
}
