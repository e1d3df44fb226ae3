//! Composition of substeps into one block step (one transformer block), the
//! propagator chaining blocks over time, and a small generic toolkit for
//! sequential (Lie) and parallel splitting of evolution equations with an
//! empirical order measurement against a dense matrix-exponential reference.
//!
//! One block step runs, in order: attention (with residual), projection onto
//! the mean/variance set, J feedforward substeps, a relaxation that averages
//! the feedforward output with the post-attention normalized state, and a
//! closing projection. The convolutional schedule prepends a convolutional
//! token embedding and its own normalization.

use std::fmt;

use serde::{Deserialize, Serialize, Serializer};

use crate::adapters::{conv_token_embed_substep, ConvTokenEmbedParams, VitParams};
use crate::attention::{
    attention_substep, conv_attention_substep, multihead_substep, ConvHeadWeights,
    MultiHeadWeights, SingleHeadWeights,
};
use crate::error::{Error, Result};
use crate::feedforward::{ffn_substep, FfnLayerParams};
use crate::grid::GridFunction;
use crate::projection::{project_s1, NormTarget};
use crate::scalar::Scalar;

/// How the relaxation substep combines the feedforward output with the
/// post-attention normalized state. `Average` is the faithful scheme; `Add`
/// matches the convention of standard transformers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    #[default]
    Average,
    Add,
}

/// Attention flavor of a model; fixes the block schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Vanilla,
    Multihead,
    Cvt,
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelMode::Vanilla => "vanilla",
            ModelMode::Multihead => "multihead",
            ModelMode::Cvt => "cvt",
        };
        f.write_str(s)
    }
}

/// Attention weights of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "F: Scalar")]
pub enum AttentionParams<F: Scalar = f64> {
    Single(SingleHeadWeights<F>),
    MultiHead(MultiHeadWeights<F>),
    Conv(ConvHeadWeights<F>),
}

impl<F: Scalar> AttentionParams<F> {
    /// Embedding width the attention acts on. Conv weights derive it from the
    /// patch grid.
    pub fn n_y(&self) -> usize {
        match self {
            AttentionParams::Single(w) => w.dim(),
            AttentionParams::MultiHead(w) => w.dim(),
            AttentionParams::Conv(w) => {
                let (h, v) = w.patch();
                h * v
            }
        }
    }

    fn mode(&self) -> ModelMode {
        match self {
            AttentionParams::Single(_) => ModelMode::Vanilla,
            AttentionParams::MultiHead(_) => ModelMode::Multihead,
            AttentionParams::Conv(_) => ModelMode::Cvt,
        }
    }
}

/// Control variables of one time step: attention weights, two normalization
/// targets, the feedforward layers, and (in the convolutional schedule) the
/// token embedding.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockParams<F: Scalar = f64> {
    attn: AttentionParams<F>,
    norm1: NormTarget<F>,
    norm2: NormTarget<F>,
    ffn: Vec<FfnLayerParams<F>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    conv_embed: Option<ConvTokenEmbedParams<F>>,
    #[serde(default)]
    skip_mode: SkipMode,
}

impl<F: Scalar> BlockParams<F> {
    pub fn new(
        attn: AttentionParams<F>,
        norm1: NormTarget<F>,
        norm2: NormTarget<F>,
        ffn: Vec<FfnLayerParams<F>>,
        conv_embed: Option<ConvTokenEmbedParams<F>>,
    ) -> Result<Self> {
        Self::with_skip_mode(attn, norm1, norm2, ffn, conv_embed, SkipMode::Average)
    }

    pub fn with_skip_mode(
        attn: AttentionParams<F>,
        norm1: NormTarget<F>,
        norm2: NormTarget<F>,
        ffn: Vec<FfnLayerParams<F>>,
        conv_embed: Option<ConvTokenEmbedParams<F>>,
        skip_mode: SkipMode,
    ) -> Result<Self> {
        if ffn.is_empty() {
            return Err(Error::NoLayers);
        }
        let n_y = attn.n_y();
        let n_x = ffn[0].dims().0;
        for layer in &ffn {
            if layer.dims() != (n_x, n_y) {
                return Err(Error::Inconsistent(format!(
                    "ffn layer expects {:?}, block is ({n_x}, {n_y})",
                    layer.dims()
                )));
            }
        }
        if let Some(cte) = &conv_embed {
            let (p_h, p_w) = cte.patch();
            if p_h * p_w != n_y {
                return Err(Error::PatchGrid { n_y, p_h, p_w });
            }
            if cte.n_x() != n_x {
                return Err(Error::LenMismatch {
                    context: "token embedding bias",
                    expected: n_x,
                    got: cte.n_x(),
                });
            }
        }
        Ok(Self {
            attn,
            norm1,
            norm2,
            ffn,
            conv_embed,
            skip_mode,
        })
    }

    pub fn attn(&self) -> &AttentionParams<F> {
        &self.attn
    }

    pub fn norm1(&self) -> &NormTarget<F> {
        &self.norm1
    }

    pub fn norm2(&self) -> &NormTarget<F> {
        &self.norm2
    }

    pub fn ffn(&self) -> &[FfnLayerParams<F>] {
        &self.ffn
    }

    pub fn conv_embed(&self) -> Option<&ConvTokenEmbedParams<F>> {
        self.conv_embed.as_ref()
    }

    pub fn skip_mode(&self) -> SkipMode {
        self.skip_mode
    }

    pub fn n_x(&self) -> usize {
        self.ffn[0].dims().0
    }

    pub fn n_y(&self) -> usize {
        self.attn.n_y()
    }

    /// Number of feedforward layers J.
    pub fn j(&self) -> usize {
        self.ffn.len()
    }

    /// Substeps per block step: 4 + J, or 6 + J with the token embedding.
    pub fn substeps(&self) -> usize {
        if self.conv_embed.is_some() {
            6 + self.j()
        } else {
            4 + self.j()
        }
    }
}

#[derive(Deserialize)]
#[serde(bound = "F: Scalar")]
struct BlockRepr<F: Scalar> {
    attn: AttentionParams<F>,
    norm1: NormTarget<F>,
    norm2: NormTarget<F>,
    ffn: Vec<FfnLayerParams<F>>,
    #[serde(default)]
    conv_embed: Option<ConvTokenEmbedParams<F>>,
    #[serde(default)]
    skip_mode: SkipMode,
}

impl<'de, F: Scalar> Deserialize<'de> for BlockParams<F> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = BlockRepr::<F>::deserialize(d)?;
        Self::with_skip_mode(r.attn, r.norm1, r.norm2, r.ffn, r.conv_embed, r.skip_mode)
            .map_err(serde::de::Error::custom)
    }
}

/// Which substep produced a trace state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubstepLabel {
    /// The incoming state, before any substep.
    Input,
    ConvEmbed,
    NormEmbed,
    Attention,
    Norm1,
    /// 1-based feedforward layer index.
    Ffn(usize),
    SkipAvg,
    Norm2,
}

impl fmt::Display for SubstepLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubstepLabel::Input => f.write_str("input"),
            SubstepLabel::ConvEmbed => f.write_str("conv_embed"),
            SubstepLabel::NormEmbed => f.write_str("norm_embed"),
            SubstepLabel::Attention => f.write_str("attention"),
            SubstepLabel::Norm1 => f.write_str("norm1"),
            SubstepLabel::Ffn(j) => write!(f, "ffn_{j}"),
            SubstepLabel::SkipAvg => f.write_str("skip_avg"),
            SubstepLabel::Norm2 => f.write_str("norm2"),
        }
    }
}

impl Serialize for SubstepLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

/// One labeled intermediate state.
#[derive(Debug, Clone, Serialize)]
#[serde(bound = "F: Scalar")]
pub struct TraceEntry<F: Scalar = f64> {
    pub label: SubstepLabel,
    pub state: GridFunction<F>,
}

/// Ordered record of all intermediate states of one block step, starting at
/// the input.
#[derive(Debug, Clone, Serialize)]
#[serde(transparent, bound = "F: Scalar")]
pub struct SplitTrace<F: Scalar = f64> {
    entries: Vec<TraceEntry<F>>,
}

impl<F: Scalar> SplitTrace<F> {
    pub fn entries(&self) -> &[TraceEntry<F>] {
        &self.entries
    }

    /// Total recorded states, input included.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Substep states, the input excluded; equals the block's M.
    pub fn substep_count(&self) -> usize {
        self.entries.len().saturating_sub(1)
    }

    pub fn labels(&self) -> Vec<SubstepLabel> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn state(&self, label: SubstepLabel) -> Option<&GridFunction<F>> {
        self.entries
            .iter()
            .find(|e| e.label == label)
            .map(|e| &e.state)
    }

    pub fn final_state(&self) -> &GridFunction<F> {
        &self.entries.last().expect("trace is never empty").state
    }
}

fn apply_attention<F: Scalar>(
    u: &GridFunction<F>,
    attn: &AttentionParams<F>,
) -> Result<GridFunction<F>> {
    match attn {
        AttentionParams::Single(w) => attention_substep(u, w),
        AttentionParams::MultiHead(w) => multihead_substep(u, w),
        AttentionParams::Conv(w) => conv_attention_substep(u, w),
    }
}

fn combine_skip<F: Scalar>(
    ffn_out: &GridFunction<F>,
    norm1_state: &GridFunction<F>,
    mode: SkipMode,
) -> Result<GridFunction<F>> {
    let sum = ffn_out.add(norm1_state)?;
    Ok(match mode {
        SkipMode::Average => sum.scale(F::cast(0.5)),
        SkipMode::Add => sum,
    })
}

/// One block step: runs the substep schedule on `u0` and returns the final
/// state together with the full trace.
pub fn block_step<F: Scalar>(
    u0: &GridFunction<F>,
    p: &BlockParams<F>,
) -> Result<(GridFunction<F>, SplitTrace<F>)> {
    if u0.n_x() != p.n_x() || u0.n_y() != p.n_y() {
        return Err(Error::DimMismatch {
            context: "block step",
            expected_rows: p.n_x(),
            expected_cols: p.n_y(),
            got_rows: u0.n_x(),
            got_cols: u0.n_y(),
        });
    }
    let mut entries = vec![TraceEntry {
        label: SubstepLabel::Input,
        state: u0.clone(),
    }];
    let mut push = |entries: &mut Vec<TraceEntry<F>>, label, state: &GridFunction<F>| {
        entries.push(TraceEntry {
            label,
            state: state.clone(),
        });
    };

    let mut state = u0.clone();
    if let Some(cte) = &p.conv_embed {
        state = conv_token_embed_substep(&state, cte)?;
        push(&mut entries, SubstepLabel::ConvEmbed, &state);
        state = project_s1(&state, &p.norm1);
        push(&mut entries, SubstepLabel::NormEmbed, &state);
    }

    state = apply_attention(&state, &p.attn)?;
    push(&mut entries, SubstepLabel::Attention, &state);

    state = project_s1(&state, &p.norm1);
    push(&mut entries, SubstepLabel::Norm1, &state);
    let norm1_state = state.clone();

    for (j, layer) in p.ffn.iter().enumerate() {
        state = ffn_substep(&state, layer)?;
        push(&mut entries, SubstepLabel::Ffn(j + 1), &state);
    }

    state = combine_skip(&state, &norm1_state, p.skip_mode)?;
    push(&mut entries, SubstepLabel::SkipAvg, &state);

    state = project_s1(&state, &p.norm2);
    push(&mut entries, SubstepLabel::Norm2, &state);

    Ok((state, SplitTrace { entries }))
}

/// The full control trajectory: one block per time step, all sharing mode and
/// dimensions, plus the optional image adapter parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Scalar = f64> {
    mode: ModelMode,
    blocks: Vec<BlockParams<F>>,
    vit: Option<VitParams<F>>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn new(
        mode: ModelMode,
        blocks: Vec<BlockParams<F>>,
        vit: Option<VitParams<F>>,
    ) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::Inconsistent("model needs at least one block".into()))?;
        let (n_x, n_y, j) = (first.n_x(), first.n_y(), first.j());
        for (i, b) in blocks.iter().enumerate() {
            if b.n_x() != n_x || b.n_y() != n_y || b.j() != j {
                return Err(Error::Inconsistent(format!(
                    "block {i} has dims ({}, {}, J={}), expected ({n_x}, {n_y}, J={j})",
                    b.n_x(),
                    b.n_y(),
                    b.j()
                )));
            }
            if b.attn.mode() != mode {
                return Err(Error::Inconsistent(format!(
                    "block {i} holds {} attention but the model mode is {mode}",
                    b.attn.mode()
                )));
            }
            match (mode, b.conv_embed.is_some()) {
                (ModelMode::Cvt, false) => {
                    return Err(Error::Inconsistent(format!(
                        "cvt block {i} is missing the conv token embedding"
                    )))
                }
                (ModelMode::Vanilla | ModelMode::Multihead, true) => {
                    return Err(Error::Inconsistent(format!(
                        "block {i} has a conv token embedding but the model mode is {mode}"
                    )))
                }
                _ => {}
            }
        }
        if let Some(v) = &vit {
            if v.n_y() != n_y {
                return Err(Error::Inconsistent(format!(
                    "adapter embedding width {} does not match the model width {n_y}",
                    v.n_y()
                )));
            }
        }
        Ok(Self { mode, blocks, vit })
    }

    pub fn mode(&self) -> ModelMode {
        self.mode
    }

    pub fn blocks(&self) -> &[BlockParams<F>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [BlockParams<F>] {
        &mut self.blocks
    }

    pub fn vit(&self) -> Option<&VitParams<F>> {
        self.vit.as_ref()
    }

    pub fn set_vit(&mut self, vit: Option<VitParams<F>>) -> Result<()> {
        if let Some(v) = &vit {
            if v.n_y() != self.n_y() {
                return Err(Error::Inconsistent(format!(
                    "adapter embedding width {} does not match the model width {}",
                    v.n_y(),
                    self.n_y()
                )));
            }
        }
        self.vit = vit;
        Ok(())
    }

    /// Number of block steps N_t.
    pub fn n_t(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_x(&self) -> usize {
        self.blocks[0].n_x()
    }

    pub fn n_y(&self) -> usize {
        self.blocks[0].n_y()
    }

    pub fn j(&self) -> usize {
        self.blocks[0].j()
    }
}

#[derive(Serialize)]
#[serde(bound = "F: Scalar")]
struct ModelReprRef<'a, F: Scalar> {
    mode: ModelMode,
    n_x: usize,
    n_y: usize,
    #[serde(rename = "J")]
    j: usize,
    blocks: &'a [BlockParams<F>],
    #[serde(skip_serializing_if = "Option::is_none")]
    vit: &'a Option<VitParams<F>>,
}

impl<F: Scalar> Serialize for ModelParams<F> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        ModelReprRef {
            mode: self.mode,
            n_x: self.n_x(),
            n_y: self.n_y(),
            j: self.j(),
            blocks: &self.blocks,
            vit: &self.vit,
        }
        .serialize(serializer)
    }
}

#[derive(Deserialize)]
#[serde(bound = "F: Scalar")]
struct ModelRepr<F: Scalar> {
    mode: ModelMode,
    n_x: usize,
    n_y: usize,
    #[serde(rename = "J")]
    j: usize,
    blocks: Vec<BlockParams<F>>,
    #[serde(default)]
    vit: Option<VitParams<F>>,
}

impl<'de, F: Scalar> Deserialize<'de> for ModelParams<F> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = ModelRepr::<F>::deserialize(d)?;
        let m = ModelParams::new(r.mode, r.blocks, r.vit).map_err(serde::de::Error::custom)?;
        if m.n_x() != r.n_x || m.n_y() != r.n_y || m.j() != r.j {
            return Err(serde::de::Error::custom(format!(
                "declared dims (n_x={}, n_y={}, J={}) do not match the blocks ({}, {}, {})",
                r.n_x,
                r.n_y,
                r.j,
                m.n_x(),
                m.n_y(),
                m.j()
            )));
        }
        Ok(m)
    }
}

/// Applies all block steps in order.
pub fn propagate<F: Scalar>(f: &GridFunction<F>, m: &ModelParams<F>) -> Result<GridFunction<F>> {
    let mut state = f.clone();
    for block in &m.blocks {
        state = block_step(&state, block)?.0;
    }
    Ok(state)
}

/// One labeled state of a propagation trace.
#[derive(Debug, Clone, Serialize)]
#[serde(bound = "F: Scalar")]
pub struct PropTraceEntry<F: Scalar = f64> {
    pub block: usize,
    pub label: SubstepLabel,
    pub state: GridFunction<F>,
}

/// Like [`propagate`], also returning every substep state. The input appears
/// once, so the trace holds `N_t * M + 1` entries.
pub fn propagate_traced<F: Scalar>(
    f: &GridFunction<F>,
    m: &ModelParams<F>,
) -> Result<(GridFunction<F>, Vec<PropTraceEntry<F>>)> {
    let mut state = f.clone();
    let mut entries = Vec::new();
    for (b, block) in m.blocks.iter().enumerate() {
        let (next, trace) = block_step(&state, block)?;
        for entry in trace.entries {
            if b > 0 && entry.label == SubstepLabel::Input {
                continue;
            }
            entries.push(PropTraceEntry {
                block: b,
                label: entry.label,
                state: entry.state,
            });
        }
        state = next;
    }
    Ok((state, entries))
}

/// Advances one split component of an evolution equation. `advance` solves
/// `v' = rate * g(t, v)` on `[t, t + dt]` from `u`, where `g` is this
/// component's contribution to the full right-hand side `u' = sum_k g_k(t, u)`.
/// The sequential scheme uses `rate = 1`; the parallel scheme hands each
/// component `rate = K`.
pub trait SubstepSolver<F: Scalar> {
    fn advance(&self, u: &[F], t: F, dt: F, rate: F) -> Vec<F>;
}

/// Sequential (Lie) splitting over `n_steps` uniform steps: within each step
/// the components are advanced one after another, each from the previous
/// component's output.
pub fn lie_solve<F: Scalar>(
    ops: &[&dyn SubstepSolver<F>],
    u0: &[F],
    t_span: (F, F),
    n_steps: usize,
) -> Result<Vec<F>> {
    if n_steps == 0 {
        return Err(Error::NoSteps);
    }
    if ops.is_empty() {
        return Err(Error::Invalid("no substep solvers given".into()));
    }
    let dt = (t_span.1 - t_span.0) / F::cast(n_steps);
    let mut u = u0.to_vec();
    for step in 0..n_steps {
        let t = t_span.0 + dt * F::cast(step);
        for op in ops {
            u = op.advance(&u, t, dt, F::one());
        }
    }
    Ok(u)
}

/// Parallel splitting: within each step every component advances
/// independently from the shared state with its rate scaled by K, and the
/// results are averaged in order.
pub fn parallel_solve<F: Scalar>(
    ops: &[&dyn SubstepSolver<F>],
    u0: &[F],
    t_span: (F, F),
    n_steps: usize,
) -> Result<Vec<F>> {
    if n_steps == 0 {
        return Err(Error::NoSteps);
    }
    if ops.is_empty() {
        return Err(Error::Invalid("no substep solvers given".into()));
    }
    let k = F::cast(ops.len());
    let dt = (t_span.1 - t_span.0) / F::cast(n_steps);
    let mut u = u0.to_vec();
    for step in 0..n_steps {
        let t = t_span.0 + dt * F::cast(step);
        let mut mean = vec![F::zero(); u.len()];
        for op in ops {
            let v = op.advance(&u, t, dt, k);
            for (m, x) in mean.iter_mut().zip(v) {
                *m = *m + x;
            }
        }
        for m in mean.iter_mut() {
            *m = *m / k;
        }
        u = mean;
    }
    Ok(u)
}

/// Exact solver for componentwise exponential growth `v' = rate * coeff * v`.
pub struct ScalarGrowth<F> {
    pub coeff: F,
}

impl<F: Scalar> SubstepSolver<F> for ScalarGrowth<F> {
    fn advance(&self, u: &[F], _t: F, dt: F, rate: F) -> Vec<F> {
        let factor = (rate * self.coeff * dt).exp();
        u.iter().map(|&x| x * factor).collect()
    }
}

/// Exact solver for `v' = rate * M v` with a nilpotent 2x2 matrix (`M M = 0`),
/// where the propagator truncates to `I + rate dt M`.
pub struct NilpotentLinear2x2<F> {
    m: [F; 4],
}

impl<F: Scalar> NilpotentLinear2x2<F> {
    pub fn new(m: [F; 4]) -> Result<Self> {
        let sq = [
            m[0] * m[0] + m[1] * m[2],
            m[0] * m[1] + m[1] * m[3],
            m[2] * m[0] + m[3] * m[2],
            m[2] * m[1] + m[3] * m[3],
        ];
        if sq.iter().any(|&x| x != F::zero()) {
            return Err(Error::Invalid(
                "matrix is not nilpotent of order 2; the closed-form solver does not apply".into(),
            ));
        }
        Ok(Self { m })
    }
}

impl<F: Scalar> SubstepSolver<F> for NilpotentLinear2x2<F> {
    fn advance(&self, u: &[F], _t: F, dt: F, rate: F) -> Vec<F> {
        let c = rate * dt;
        let [a, b, d, e] = self.m;
        vec![
            u[0] + c * (a * u[0] + b * u[1]),
            u[1] + c * (d * u[0] + e * u[1]),
        ]
    }
}

/// First-order explicit Euler advance for an arbitrary right-hand side.
pub struct ExplicitEuler<F, G>
where
    G: Fn(F, &[F]) -> Vec<F>,
{
    rhs: G,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar, G: Fn(F, &[F]) -> Vec<F>> ExplicitEuler<F, G> {
    pub fn new(rhs: G) -> Self {
        Self {
            rhs,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<F: Scalar, G: Fn(F, &[F]) -> Vec<F>> SubstepSolver<F> for ExplicitEuler<F, G> {
    fn advance(&self, u: &[F], t: F, dt: F, rate: F) -> Vec<F> {
        let g = (self.rhs)(t, u);
        u.iter()
            .zip(g)
            .map(|(&x, gx)| x + rate * dt * gx)
            .collect()
    }
}

/// Dense matrix exponential by scaling and squaring with a truncated Taylor
/// series, used as the reference solution for the order studies. `a` is an
/// `n x n` matrix in row-major order.
pub fn expm<F: Scalar>(n: usize, a: &[F]) -> Result<Vec<F>> {
    if a.len() != n * n || n == 0 {
        return Err(Error::ShapeData {
            rows: n,
            cols: n,
            len: a.len(),
        });
    }
    // Scale so the infinity norm drops below 1/2.
    let mut norm = F::zero();
    for i in 0..n {
        let mut row_sum = F::zero();
        for j in 0..n {
            row_sum = row_sum + a[i * n + j].abs();
        }
        if row_sum > norm {
            norm = row_sum;
        }
    }
    let mut squarings = 0u32;
    let half = F::cast(0.5);
    let mut scale = F::one();
    while norm * scale > half && squarings < 64 {
        scale = scale * half;
        squarings += 1;
    }
    let x: Vec<F> = a.iter().map(|&v| v * scale).collect();

    let mat_mul = |p: &[F], q: &[F]| -> Vec<F> {
        let mut out = vec![F::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = F::zero();
                for k in 0..n {
                    acc = acc + p[i * n + k] * q[k * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    };
    let max_abs = |p: &[F]| {
        let mut m = F::zero();
        for &v in p {
            if v.abs() > m {
                m = v.abs();
            }
        }
        m
    };

    let mut result = vec![F::zero(); n * n];
    for i in 0..n {
        result[i * n + i] = F::one();
    }
    let mut term = result.clone();
    for k in 1..=40usize {
        term = mat_mul(&term, &x);
        let inv_k = F::one() / F::cast(k);
        for t in term.iter_mut() {
            *t = *t * inv_k;
        }
        for (r, t) in result.iter_mut().zip(&term) {
            *r = *r + *t;
        }
        if max_abs(&term) < F::epsilon() * max_abs(&result) {
            break;
        }
    }
    for _ in 0..squarings {
        result = mat_mul(&result, &result);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Kernel;

    fn grid(rows: &[Vec<f64>]) -> GridFunction {
        GridFunction::from_rows(rows).unwrap()
    }

    fn zero_vanilla_block(n_x: usize, n_y: usize, j: usize) -> BlockParams {
        let z = || Kernel::zeros(n_y, n_y).unwrap();
        BlockParams::new(
            AttentionParams::Single(SingleHeadWeights::new(z(), z(), z()).unwrap()),
            NormTarget::standard(),
            NormTarget::standard(),
            (0..j)
                .map(|_| FfnLayerParams::new(Kernel::zeros(n_y, n_y).unwrap(), vec![0.0; n_x]).unwrap())
                .collect(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn vanilla_trace_has_m_plus_one_states() {
        let u = grid(&[vec![0.4, -0.2, 0.9], vec![1.0, 0.3, -0.5]]);
        let p = zero_vanilla_block(2, 3, 2);
        let (_, trace) = block_step(&u, &p).unwrap();
        assert_eq!(p.substeps(), 6);
        assert_eq!(trace.len(), 7);
        assert_eq!(trace.substep_count(), 6);
        assert_eq!(
            trace.labels(),
            vec![
                SubstepLabel::Input,
                SubstepLabel::Attention,
                SubstepLabel::Norm1,
                SubstepLabel::Ffn(1),
                SubstepLabel::Ffn(2),
                SubstepLabel::SkipAvg,
                SubstepLabel::Norm2,
            ]
        );
    }

    #[test]
    fn final_state_rows_hit_the_norm2_moments() {
        let u = grid(&[vec![0.4, -0.2, 0.9, 2.0], vec![1.0, 0.3, -0.5, 0.7]]);
        let p = zero_vanilla_block(2, 4, 2);
        let (out, _) = block_step(&u, &p).unwrap();
        for k in 0..out.n_x() {
            let row = out.row(k);
            let mean: f64 = row.iter().sum::<f64>() / row.len() as f64;
            let var: f64 =
                row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn skip_modes_differ_at_the_skip_state() {
        let u = grid(&[vec![0.4, -0.2, 0.9], vec![1.0, 0.3, -0.5]]);
        let avg = zero_vanilla_block(2, 3, 1);
        let add = BlockParams::with_skip_mode(
            avg.attn.clone(),
            avg.norm1,
            avg.norm2,
            avg.ffn.clone(),
            None,
            SkipMode::Add,
        )
        .unwrap();
        let (_, t_avg) = block_step(&u, &avg).unwrap();
        let (_, t_add) = block_step(&u, &add).unwrap();
        let s_avg = t_avg.state(SubstepLabel::SkipAvg).unwrap();
        let s_add = t_add.state(SubstepLabel::SkipAvg).unwrap();
        assert!(s_avg.max_abs_diff(s_add).unwrap() > 1e-3);
        // After the closing normalization the two are indistinguishable.
        assert_eq!(
            t_avg.final_state().max_abs_diff(t_add.final_state()).unwrap(),
            0.0
        );
    }

    #[test]
    fn propagate_single_block_equals_block_step() {
        let u = grid(&[vec![0.4, -0.2, 0.9], vec![1.0, 0.3, -0.5]]);
        let p = zero_vanilla_block(2, 3, 1);
        let m = ModelParams::new(ModelMode::Vanilla, vec![p.clone()], None).unwrap();
        let direct = block_step(&u, &p).unwrap().0;
        let chained = propagate(&u, &m).unwrap();
        assert_eq!(direct, chained);
    }

    #[test]
    fn propagate_two_identical_blocks_is_block_step_twice() {
        let u = grid(&[vec![0.4, -0.2, 0.9], vec![1.0, 0.3, -0.5]]);
        let p = zero_vanilla_block(2, 3, 1);
        let m = ModelParams::new(ModelMode::Vanilla, vec![p.clone(), p.clone()], None).unwrap();
        let twice = block_step(&block_step(&u, &p).unwrap().0, &p).unwrap().0;
        let chained = propagate(&u, &m).unwrap();
        assert_eq!(twice, chained);
    }

    #[test]
    fn traced_propagation_counts_nt_m_plus_one() {
        let u = grid(&[vec![0.4, -0.2, 0.9], vec![1.0, 0.3, -0.5]]);
        let p = zero_vanilla_block(2, 3, 2);
        let m = ModelParams::new(
            ModelMode::Vanilla,
            vec![p.clone(), p.clone(), p.clone()],
            None,
        )
        .unwrap();
        let (_, entries) = propagate_traced(&u, &m).unwrap();
        assert_eq!(entries.len(), 3 * 6 + 1);
    }

    #[test]
    fn model_mode_consistency_is_enforced() {
        let p = zero_vanilla_block(2, 3, 1);
        assert!(ModelParams::new(ModelMode::Multihead, vec![p.clone()], None).is_err());
        assert!(ModelParams::new(ModelMode::Cvt, vec![p], None).is_err());
    }

    #[test]
    fn lie_commuting_split_is_exact() {
        // u' = u split into two half-rate components with exact sub-solvers;
        // commuting pieces make the composition exact at any step count.
        let half = ScalarGrowth { coeff: 0.5 };
        let ops: Vec<&dyn SubstepSolver<f64>> = vec![&half, &half];
        for n_steps in [1, 4, 32] {
            let u = lie_solve(&ops, &[1.0], (0.0, 1.0), n_steps).unwrap();
            assert!((u[0] - 1.0_f64.exp()).abs() < 1e-12, "n = {n_steps}");
        }
    }

    #[test]
    fn lie_single_operator_is_plain_stepping() {
        let whole = ScalarGrowth { coeff: 1.0 };
        let ops: Vec<&dyn SubstepSolver<f64>> = vec![&whole];
        let u = lie_solve(&ops, &[2.0], (0.0, 1.0), 7).unwrap();
        assert!((u[0] - 2.0 * 1.0_f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn parallel_one_operator_matches_lie() {
        let whole = ScalarGrowth { coeff: 1.0 };
        let ops: Vec<&dyn SubstepSolver<f64>> = vec![&whole];
        let a = lie_solve(&ops, &[1.5], (0.0, 1.0), 5).unwrap();
        let b = parallel_solve(&ops, &[1.5], (0.0, 1.0), 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parallel_commuting_split_is_exact() {
        let half = ScalarGrowth { coeff: 0.5 };
        let ops: Vec<&dyn SubstepSolver<f64>> = vec![&half, &half];
        let u = parallel_solve(&ops, &[1.0], (0.0, 1.0), 16).unwrap();
        assert!((u[0] - 1.0_f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn nilpotent_solver_rejects_general_matrices() {
        assert!(NilpotentLinear2x2::new([0.0, 1.0, 0.0, 0.0]).is_ok());
        assert!(NilpotentLinear2x2::new([1.0, 0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn zero_steps_is_an_error() {
        let whole = ScalarGrowth { coeff: 1.0 };
        let ops: Vec<&dyn SubstepSolver<f64>> = vec![&whole];
        assert!(lie_solve(&ops, &[1.0], (0.0, 1.0), 0).is_err());
    }

    #[test]
    fn expm_of_nilpotent_truncates() {
        let e = expm(2, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(e, vec![1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn expm_rotation_generator() {
        let e = expm(2, &[0.0, -1.0, 1.0, 0.0]).unwrap();
        let (s, c) = 1.0_f64.sin_cos();
        assert!((e[0] - c).abs() < 1e-14);
        assert!((e[1] + s).abs() < 1e-14);
        assert!((e[2] - s).abs() < 1e-14);
        assert!((e[3] - c).abs() < 1e-14);
    }

    #[test]
    fn expm_diagonal() {
        let e = expm(2, &[1.0, 0.0, 0.0, -2.0]).unwrap();
        assert!((e[0] - 1.0_f64.exp()).abs() < 1e-13);
        assert!((e[3] - (-2.0_f64).exp()).abs() < 1e-15);
        assert_eq!(e[1], 0.0);
    }

    #[test]
    fn model_json_shape() {
        let p = zero_vanilla_block(2, 3, 1);
        let m = ModelParams::new(ModelMode::Vanilla, vec![p], None).unwrap();
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["mode"], "vanilla");
        assert_eq!(v["n_x"], 2);
        assert_eq!(v["n_y"], 3);
        assert_eq!(v["J"], 1);
        assert_eq!(v["blocks"][0]["attn"]["kind"], "single");
        let back: ModelParams = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }
}
