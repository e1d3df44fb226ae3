//! Grid functions on the discretized token and embedding domains, plus the
//! discrete inner product, matrix product, and row-wise softmax that the rest
//! of the crate is built from.
//!
//! Conventions: unit spacing on both axes, so discrete integrals are plain
//! sums and the inner product carries no quadrature weight. Every reduction
//! runs in a fixed left-to-right order so reruns are bit-identical.
//!
//! The JSON interchange format for any 2-D array is
//! `{"shape":[rows,cols],"data":[row-major numbers]}`; readers reject a
//! shape/data length mismatch.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn ensure_finite<F: Scalar>(context: &'static str, values: &[F]) -> Result<()> {
    for (index, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { context, index });
        }
    }
    Ok(())
}

fn matmul_raw<F: Scalar>(a: &[F], ar: usize, ac: usize, b: &[F], bc: usize) -> Vec<F> {
    let mut out = vec![F::zero(); ar * bc];
    for i in 0..ar {
        for j in 0..bc {
            let mut acc = F::zero();
            for k in 0..ac {
                acc = acc + a[i * ac + k] * b[k * bc + j];
            }
            out[i * bc + j] = acc;
        }
    }
    out
}

fn max_abs_diff_raw<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut worst = F::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        let d = (*x - *y).abs();
        if d > worst {
            worst = d;
        }
    }
    worst
}

#[derive(Serialize)]
struct TensorReprRef<'a, F> {
    shape: [usize; 2],
    data: &'a [F],
}

#[derive(Deserialize)]
#[serde(bound = "F: Scalar")]
struct TensorRepr<F> {
    shape: [usize; 2],
    data: Vec<F>,
}

/// Dense real matrix with finite entries. Holds attention kernels, feedforward
/// weights, embedding matrices, attention score tables, and image patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel<F: Scalar = f64> {
    rows: usize,
    cols: usize,
    values: Vec<F>,
}

impl<F: Scalar> Kernel<F> {
    pub fn new(rows: usize, cols: usize, values: Vec<F>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ZeroDim { rows, cols });
        }
        if values.len() != rows * cols {
            return Err(Error::ShapeData {
                rows,
                cols,
                len: values.len(),
            });
        }
        ensure_finite("kernel", &values)?;
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::LenMismatch {
                    context: "kernel row",
                    expected: c,
                    got: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(r, c, values)
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![F::zero(); rows * cols])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut values = vec![F::zero(); n * n];
        for i in 0..n {
            values[i * n + i] = F::one();
        }
        Self::new(n, n, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// Conventional matrix product with a fixed inner summation order.
    pub fn matmul(&self, other: &Kernel<F>) -> Result<Kernel<F>> {
        if self.cols != other.rows {
            return Err(Error::DimMismatch {
                context: "matmul",
                expected_rows: self.cols,
                expected_cols: other.cols,
                got_rows: other.rows,
                got_cols: other.cols,
            });
        }
        let values = matmul_raw(&self.values, self.rows, self.cols, &other.values, other.cols);
        Kernel::new(self.rows, other.cols, values)
    }

    pub fn transpose(&self) -> Kernel<F> {
        let mut values = vec![F::zero(); self.values.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                values[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        Kernel {
            rows: self.cols,
            cols: self.rows,
            values,
        }
    }

    pub fn scale(&self, s: F) -> Kernel<F> {
        Kernel {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| *v * s).collect(),
        }
    }

    pub fn add(&self, other: &Kernel<F>) -> Result<Kernel<F>> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimMismatch {
                context: "kernel add",
                expected_rows: self.rows,
                expected_cols: self.cols,
                got_rows: other.rows,
                got_cols: other.cols,
            });
        }
        let values = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| *a + *b)
            .collect();
        Kernel::new(self.rows, self.cols, values)
    }

    pub fn max_abs_diff(&self, other: &Kernel<F>) -> Result<F> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimMismatch {
                context: "kernel diff",
                expected_rows: self.rows,
                expected_cols: self.cols,
                got_rows: other.rows,
                got_cols: other.cols,
            });
        }
        Ok(max_abs_diff_raw(&self.values, &other.values))
    }
}

impl<F: Scalar> Serialize for Kernel<F> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        TensorReprRef {
            shape: [self.rows, self.cols],
            data: &self.values,
        }
        .serialize(serializer)
    }
}

impl<'de, F: Scalar> Deserialize<'de> for Kernel<F> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = TensorRepr::<F>::deserialize(deserializer)?;
        Kernel::new(repr.shape[0], repr.shape[1], repr.data).map_err(D::Error::custom)
    }
}

/// Discretization of the state `u` at a fixed time: `n_x` token rows, each an
/// `n_y`-entry embedding vector, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction<F: Scalar = f64> {
    n_x: usize,
    n_y: usize,
    values: Vec<F>,
}

impl<F: Scalar> GridFunction<F> {
    pub fn new(n_x: usize, n_y: usize, values: Vec<F>) -> Result<Self> {
        if n_x == 0 || n_y == 0 {
            return Err(Error::ZeroDim {
                rows: n_x,
                cols: n_y,
            });
        }
        if values.len() != n_x * n_y {
            return Err(Error::ShapeData {
                rows: n_x,
                cols: n_y,
                len: values.len(),
            });
        }
        ensure_finite("grid function", &values)?;
        Ok(Self { n_x, n_y, values })
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let k = Kernel::from_rows(rows)?;
        Self::new(k.rows, k.cols, k.values)
    }

    pub fn from_fn(n_x: usize, n_y: usize, mut f: impl FnMut(usize, usize) -> F) -> Result<Self> {
        let mut values = Vec::with_capacity(n_x * n_y);
        for k in 0..n_x {
            for l in 0..n_y {
                values.push(f(k, l));
            }
        }
        Self::new(n_x, n_y, values)
    }

    pub fn zeros(n_x: usize, n_y: usize) -> Result<Self> {
        Self::new(n_x, n_y, vec![F::zero(); n_x * n_y])
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn at(&self, k: usize, l: usize) -> F {
        self.values[k * self.n_y + l]
    }

    pub fn row(&self, k: usize) -> &[F] {
        &self.values[k * self.n_y..(k + 1) * self.n_y]
    }

    /// Right-multiplication `u * w` by a kernel; the discrete form of the
    /// integral transforms that produce Q, K, V and embeddings.
    pub fn matmul(&self, w: &Kernel<F>) -> Result<GridFunction<F>> {
        if self.n_y != w.rows() {
            return Err(Error::DimMismatch {
                context: "grid matmul",
                expected_rows: self.n_y,
                expected_cols: w.cols(),
                got_rows: w.rows(),
                got_cols: w.cols(),
            });
        }
        let values = matmul_raw(&self.values, self.n_x, self.n_y, w.values(), w.cols());
        GridFunction::new(self.n_x, w.cols(), values)
    }

    pub fn add(&self, other: &GridFunction<F>) -> Result<GridFunction<F>> {
        if self.n_x != other.n_x || self.n_y != other.n_y {
            return Err(Error::DimMismatch {
                context: "grid add",
                expected_rows: self.n_x,
                expected_cols: self.n_y,
                got_rows: other.n_x,
                got_cols: other.n_y,
            });
        }
        let values = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| *a + *b)
            .collect();
        GridFunction::new(self.n_x, self.n_y, values)
    }

    pub fn scale(&self, s: F) -> GridFunction<F> {
        GridFunction {
            n_x: self.n_x,
            n_y: self.n_y,
            values: self.values.iter().map(|v| *v * s).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &GridFunction<F>) -> Result<F> {
        if self.n_x != other.n_x || self.n_y != other.n_y {
            return Err(Error::DimMismatch {
                context: "grid diff",
                expected_rows: self.n_x,
                expected_cols: self.n_y,
                got_rows: other.n_x,
                got_cols: other.n_y,
            });
        }
        Ok(max_abs_diff_raw(&self.values, &other.values))
    }

    /// Reorders token rows by `perm`, which must be a permutation of `0..n_x`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<GridFunction<F>> {
        if perm.len() != self.n_x {
            return Err(Error::LenMismatch {
                context: "row permutation",
                expected: self.n_x,
                got: perm.len(),
            });
        }
        let mut seen = vec![false; self.n_x];
        for &p in perm {
            if p >= self.n_x || seen[p] {
                return Err(Error::Invalid(format!(
                    "{:?} is not a permutation of 0..{}",
                    perm, self.n_x
                )));
            }
            seen[p] = true;
        }
        let mut values = Vec::with_capacity(self.values.len());
        for &p in perm {
            values.extend_from_slice(self.row(p));
        }
        GridFunction::new(self.n_x, self.n_y, values)
    }
}

impl<F: Scalar> Serialize for GridFunction<F> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        TensorReprRef {
            shape: [self.n_x, self.n_y],
            data: &self.values,
        }
        .serialize(serializer)
    }
}

impl<'de, F: Scalar> Deserialize<'de> for GridFunction<F> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = TensorRepr::<F>::deserialize(deserializer)?;
        GridFunction::new(repr.shape[0], repr.shape[1], repr.data).map_err(D::Error::custom)
    }
}

/// Discrete inner product along the embedding axis: a plain dot product under
/// the unit-weight convention.
pub fn inner_product_y<F: Scalar>(a: &[F], b: &[F]) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::LenMismatch {
            context: "inner product",
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        acc = acc + *x * *y;
    }
    Ok(acc)
}

/// Row-wise softmax. The row maximum is subtracted before exponentiation,
/// which leaves the result unchanged in exact arithmetic and keeps large
/// scores from overflowing.
pub fn softmax2<F: Scalar>(scores: &Kernel<F>) -> Kernel<F> {
    let rows = scores.rows();
    let cols = scores.cols();
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = scores.row(r);
        let mut m = row[0];
        for &v in &row[1..] {
            if v > m {
                m = v;
            }
        }
        let mut sum = F::zero();
        let start = values.len();
        for &v in row {
            let e = (v - m).exp();
            values.push(e);
            sum = sum + e;
        }
        for v in &mut values[start..] {
            *v = *v / sum;
        }
    }
    Kernel {
        rows,
        cols,
        values,
    }
}

/// Conventional matrix product; forwards to [`Kernel::matmul`].
pub fn matmul<F: Scalar>(a: &Kernel<F>, b: &Kernel<F>) -> Result<Kernel<F>> {
    a.matmul(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inner_product_orthogonal_axes() {
        let v = inner_product_y(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn inner_product_hand_sum() {
        // 1*3 + 2*4
        let v = inner_product_y(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(v, 11.0);
    }

    #[test]
    fn inner_product_self_1d() {
        let c = 1.7_f64;
        let v = inner_product_y(&[c], &[c]).unwrap();
        assert_eq!(v, c * c);
    }

    #[test]
    fn inner_product_length_mismatch() {
        assert!(inner_product_y(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn softmax_uniform_for_equal_scores() {
        let s = Kernel::<f64>::new(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let out = softmax2(&s);
        for &v in out.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_hand_evaluation() {
        let s = Kernel::new(1, 2, vec![(2.0_f64).ln(), 0.0]).unwrap();
        let out = softmax2(&s);
        assert!((out.at(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((out.at(0, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_magnitude_stability() {
        let s = Kernel::new(1, 2, vec![1000.0, 1000.0]).unwrap();
        let out = softmax2(&s);
        assert_eq!(out.at(0, 0), 0.5);
        assert_eq!(out.at(0, 1), 0.5);
    }

    #[test]
    fn matmul_identity() {
        let i2 = Kernel::identity(2).unwrap();
        let m = Kernel::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(i2.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_row_sums() {
        let a = Kernel::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Kernel::new(2, 1, vec![1.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.values(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_annihilator() {
        let z = Kernel::zeros(2, 2).unwrap();
        let m = Kernel::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = z.matmul(&m).unwrap();
        assert!(c.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Kernel::new(2, 3, vec![0.0; 6]).unwrap();
        let b = Kernel::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn grid_rejects_nonfinite() {
        assert!(GridFunction::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Kernel::new(1, 2, vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn json_roundtrip_and_shape_rejection() {
        let g = GridFunction::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        assert_eq!(s, r#"{"shape":[2,2],"data":[1.0,2.0,3.0,4.0]}"#);
        let back: GridFunction = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);

        let bad = r#"{"shape":[2,2],"data":[1.0,2.0,3.0]}"#;
        assert!(serde_json::from_str::<GridFunction>(bad).is_err());
        assert!(serde_json::from_str::<Kernel>(bad).is_err());
    }

    #[test]
    fn permute_rows_roundtrip() {
        let g = GridFunction::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = g.permute_rows(&[2, 0, 1]).unwrap();
        assert_eq!(p.row(0), &[5.0, 6.0]);
        assert!(g.permute_rows(&[0, 0, 1]).is_err());
    }
}
