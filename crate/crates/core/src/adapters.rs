//! Input/output adapters: the patch-embedding front end and classification
//! head used for image inputs, and the convolutional token embedding substep
//! used by the convolutional stepper schedule.

use serde::{Deserialize, Serialize};

use crate::conv::conv2d_same;
use crate::error::{Error, Result};
use crate::grid::{GridFunction, Kernel};
use crate::scalar::Scalar;
use crate::splitting::{propagate, ModelParams};

/// Learnable pre/post-processing around the propagator: an embedding matrix
/// `embed` (patch dimension D by embedding width), a learnable `class_token`
/// row prepended to the embedded patches, and a `head` matrix mapping the
/// class row to the output vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VitParams<F: Scalar = f64> {
    embed: Kernel<F>,
    class_token: Vec<F>,
    head: Kernel<F>,
}

impl<F: Scalar> VitParams<F> {
    pub fn new(embed: Kernel<F>, class_token: Vec<F>, head: Kernel<F>) -> Result<Self> {
        let n_y = embed.cols();
        if class_token.len() != n_y {
            return Err(Error::LenMismatch {
                context: "class token",
                expected: n_y,
                got: class_token.len(),
            });
        }
        for (index, v) in class_token.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "class token",
                    index,
                });
            }
        }
        if head.rows() != n_y {
            return Err(Error::DimMismatch {
                context: "head matrix",
                expected_rows: n_y,
                expected_cols: head.cols(),
                got_rows: head.rows(),
                got_cols: head.cols(),
            });
        }
        Ok(Self {
            embed,
            class_token,
            head,
        })
    }

    pub fn embed(&self) -> &Kernel<F> {
        &self.embed
    }

    pub fn class_token(&self) -> &[F] {
        &self.class_token
    }

    pub fn head(&self) -> &Kernel<F> {
        &self.head
    }

    /// Embedding width `n_y` shared with the model.
    pub fn n_y(&self) -> usize {
        self.embed.cols()
    }

    /// Flattened patch dimension D.
    pub fn patch_dim(&self) -> usize {
        self.embed.rows()
    }

    /// Output vector length d.
    pub fn out_dim(&self) -> usize {
        self.head.cols()
    }
}

#[derive(Deserialize)]
#[serde(bound = "F: Scalar")]
struct VitRepr<F: Scalar> {
    embed: Kernel<F>,
    class_token: Vec<F>,
    head: Kernel<F>,
}

impl<'de, F: Scalar> Deserialize<'de> for VitParams<F> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = VitRepr::<F>::deserialize(d)?;
        Self::new(r.embed, r.class_token, r.head).map_err(serde::de::Error::custom)
    }
}

/// Convolutional token embedding: an odd 2-D kernel applied per token over
/// the declared patch grid, plus a per-token-row bias.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvTokenEmbedParams<F: Scalar = f64> {
    kernel: Kernel<F>,
    bias: Vec<F>,
    patch_h: usize,
    patch_w: usize,
}

impl<F: Scalar> ConvTokenEmbedParams<F> {
    pub fn new(kernel: Kernel<F>, bias: Vec<F>, patch_h: usize, patch_w: usize) -> Result<Self> {
        if kernel.rows() % 2 == 0 || kernel.cols() % 2 == 0 {
            return Err(Error::EvenKernel {
                rows: kernel.rows(),
                cols: kernel.cols(),
            });
        }
        if patch_h == 0 || patch_w == 0 {
            return Err(Error::ZeroDim {
                rows: patch_h,
                cols: patch_w,
            });
        }
        if bias.is_empty() {
            return Err(Error::Invalid("token embedding bias must not be empty".into()));
        }
        for (index, v) in bias.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "token embedding bias",
                    index,
                });
            }
        }
        Ok(Self {
            kernel,
            bias,
            patch_h,
            patch_w,
        })
    }

    pub fn kernel(&self) -> &Kernel<F> {
        &self.kernel
    }

    pub fn bias(&self) -> &[F] {
        &self.bias
    }

    pub fn patch(&self) -> (usize, usize) {
        (self.patch_h, self.patch_w)
    }

    pub fn n_x(&self) -> usize {
        self.bias.len()
    }
}

#[derive(Deserialize)]
#[serde(bound = "F: Scalar")]
struct ConvTokenEmbedRepr<F: Scalar> {
    kernel: Kernel<F>,
    bias: Vec<F>,
    patch_h: usize,
    patch_w: usize,
}

impl<'de, F: Scalar> Deserialize<'de> for ConvTokenEmbedParams<F> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = ConvTokenEmbedRepr::<F>::deserialize(d)?;
        Self::new(r.kernel, r.bias, r.patch_h, r.patch_w).map_err(serde::de::Error::custom)
    }
}

/// Builds the initial state from flattened image patches: row 0 is the class
/// token, rows 1.. are `patches * embed`.
pub fn vit_pre<F: Scalar>(patches: &Kernel<F>, p: &VitParams<F>) -> Result<GridFunction<F>> {
    if patches.cols() != p.patch_dim() {
        return Err(Error::DimMismatch {
            context: "patch embedding",
            expected_rows: patches.rows(),
            expected_cols: p.patch_dim(),
            got_rows: patches.rows(),
            got_cols: patches.cols(),
        });
    }
    let embedded = patches.matmul(&p.embed)?;
    let n_y = p.n_y();
    let mut values = Vec::with_capacity((embedded.rows() + 1) * n_y);
    values.extend_from_slice(&p.class_token);
    values.extend_from_slice(embedded.values());
    GridFunction::new(embedded.rows() + 1, n_y, values)
}

/// Reads the classification output: the first token row times the head
/// matrix.
pub fn vit_post<F: Scalar>(u: &GridFunction<F>, p: &VitParams<F>) -> Result<Vec<F>> {
    if u.n_y() != p.n_y() {
        return Err(Error::LenMismatch {
            context: "head input",
            expected: p.n_y(),
            got: u.n_y(),
        });
    }
    let head = p.head();
    let row = u.row(0);
    let mut out = Vec::with_capacity(head.cols());
    for j in 0..head.cols() {
        let mut acc = F::zero();
        for l in 0..head.rows() {
            acc = acc + row[l] * head.at(l, j);
        }
        out.push(acc);
    }
    Ok(out)
}

/// Convolutional token embedding substep with built-in residual:
/// `u0 + kernel * u0 + bias`, the convolution applied per token over the
/// patch grid and the bias broadcast along each token row.
pub fn conv_token_embed_substep<F: Scalar>(
    u0: &GridFunction<F>,
    p: &ConvTokenEmbedParams<F>,
) -> Result<GridFunction<F>> {
    let (p_h, p_w) = p.patch();
    if p_h * p_w != u0.n_y() {
        return Err(Error::PatchGrid {
            n_y: u0.n_y(),
            p_h,
            p_w,
        });
    }
    if p.n_x() != u0.n_x() {
        return Err(Error::LenMismatch {
            context: "token embedding bias",
            expected: u0.n_x(),
            got: p.n_x(),
        });
    }
    let mut values = Vec::with_capacity(u0.n_x() * u0.n_y());
    for t in 0..u0.n_x() {
        let row = u0.row(t);
        let conv = conv2d_same(row, p_h, p_w, p.kernel());
        for (x, c) in row.iter().zip(conv) {
            values.push(*x + c + p.bias()[t]);
        }
    }
    GridFunction::new(u0.n_x(), u0.n_y(), values)
}

/// Full image pipeline: embed patches, propagate, read the head.
pub fn vit_forward<F: Scalar>(
    patches: &Kernel<F>,
    vit: &VitParams<F>,
    m: &ModelParams<F>,
) -> Result<Vec<F>> {
    let u0 = vit_pre(patches, vit)?;
    let ut = propagate(&u0, m)?;
    vit_post(&ut, vit)
}

/// Cuts a grayscale image into non-overlapping `patch x patch` crops, listed
/// row-major, each flattened row-major. Image dimensions must be divisible by
/// `patch`.
pub fn extract_patches<F: Scalar>(image: &Kernel<F>, patch: usize) -> Result<Kernel<F>> {
    if patch == 0 || image.rows() % patch != 0 || image.cols() % patch != 0 {
        return Err(Error::Invalid(format!(
            "image {}x{} is not divisible into {patch}x{patch} patches",
            image.rows(),
            image.cols()
        )));
    }
    let ph = image.rows() / patch;
    let pw = image.cols() / patch;
    let mut values = Vec::with_capacity(image.rows() * image.cols());
    for pr in 0..ph {
        for pc in 0..pw {
            for r in 0..patch {
                for c in 0..patch {
                    values.push(image.at(pr * patch + r, pc * patch + c));
                }
            }
        }
    }
    Kernel::new(ph * pw, patch * patch, values)
}

/// Parses an 8-bit grayscale PGM image (binary `P5` or ASCII `P2`) into reals
/// normalized to [0, 1].
pub fn read_pgm<F: Scalar>(bytes: &[u8]) -> Result<Kernel<F>> {
    let mut fields = Vec::new();
    let mut pos = 0;
    // Header: magic, width, height, maxval, separated by whitespace with
    // optional '#' comment lines.
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start < pos {
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| {
                Error::Invalid("pgm header is not valid ascii".into())
            })?);
        }
    }
    if fields.len() < 4 {
        return Err(Error::Invalid("truncated pgm header".into()));
    }
    let magic = fields[0];
    let width: usize = fields[1]
        .parse()
        .map_err(|_| Error::Invalid("bad pgm width".into()))?;
    let height: usize = fields[2]
        .parse()
        .map_err(|_| Error::Invalid("bad pgm height".into()))?;
    let maxval: u32 = fields[3]
        .parse()
        .map_err(|_| Error::Invalid("bad pgm maxval".into()))?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Invalid(format!(
            "only 8-bit pgm supported, maxval = {maxval}"
        )));
    }
    let denom = F::cast(maxval);
    let mut values = Vec::with_capacity(width * height);
    match magic {
        "P5" => {
            pos += 1; // single whitespace byte after maxval
            let want = width * height;
            if bytes.len() < pos + want {
                return Err(Error::Invalid("truncated pgm pixel data".into()));
            }
            for &b in &bytes[pos..pos + want] {
                values.push(F::cast(b) / denom);
            }
        }
        "P2" => {
            let text = std::str::from_utf8(&bytes[pos..])
                .map_err(|_| Error::Invalid("pgm pixel data is not valid ascii".into()))?;
            for tok in text.split_ascii_whitespace().take(width * height) {
                let v: u32 = tok
                    .parse()
                    .map_err(|_| Error::Invalid("bad pgm pixel value".into()))?;
                values.push(F::cast(v) / denom);
            }
            if values.len() != width * height {
                return Err(Error::Invalid("truncated pgm pixel data".into()));
            }
        }
        other => {
            return Err(Error::Invalid(format!(
                "unsupported pgm magic {other:?}, expected P5 or P2"
            )))
        }
    }
    Kernel::new(height, width, values)
}
