//! Small dense linear algebra.
//!
//! Everything here works in `f64`. Matrices are row-major and never empty.
//! Products accumulate over the shared index in increasing order, so a matrix
//! product computed over a row-concatenation of two inputs is bit-identical to
//! the product over the original input. The simulator relies on this.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Largest finite binary16 value.
pub const HALF_MAX: f64 = 65504.0;

const JACOBI_TOLERANCE: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
const PIVOT_TOLERANCE: f64 = 1e-14;

#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim(format!("empty matrix {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::dim(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    /// # Panics
    ///
    /// Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix {rows}x{cols}");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Builds a matrix from row slices.
    ///
    /// # Panics
    ///
    /// Panics on ragged or empty input. Intended for literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty(), "no rows");
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self::new(rows.len(), cols, rows.concat()).expect("valid literal")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!("{what}: {:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::dim(format!("matmul {:?} x {:?}", self.shape(), other.shape())));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let lhs = self.data[i * self.cols + k];
                let rhs = other.row(k);
                for (o, r) in out_row.iter_mut().zip(rhs) {
                    *o += lhs * r;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`, accumulating over rows in order.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::dim(format!(
                "t_matmul {:?}ᵀ x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let lhs_row = self.row(k);
            let rhs_row = other.row(k);
            for (i, lhs) in lhs_row.iter().enumerate() {
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, r) in out_row.iter_mut().zip(rhs_row) {
                    *o += lhs * r;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`; each output row depends only on the matching row of `self`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::dim(format!(
                "matmul_t {:?} x {:?}ᵀ",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let lhs = self.row(i);
            for j in 0..other.rows {
                let rhs = other.row(j);
                let mut acc = 0.0;
                for (l, r) in lhs.iter().zip(rhs) {
                    acc += l * r;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(&self, other: &Self, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other, what)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.data.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        (0..self.rows).all(|i| (i + 1..self.cols).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol * scale))
    }

    /// `(m + mᵀ) / 2`
    pub fn symmetrize(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::dim(format!("symmetrize {:?}", self.shape())));
        }
        Ok(Self::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self[(i, j)] + self[(j, i)])
        }))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks row blocks vertically, preserving order.
    pub fn vstack(blocks: &[&Self]) -> Result<Self> {
        let first = blocks.first().ok_or_else(|| Error::dim("vstack of nothing"))?;
        let cols = first.cols;
        if let Some(bad) = blocks.iter().find(|b| b.cols != cols) {
            return Err(Error::dim(format!("vstack column mismatch {} vs {}", cols, bad.cols)));
        }
        let rows = blocks.iter().map(|b| b.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for b in blocks {
            data.extend_from_slice(&b.data);
        }
        Self::new(rows, cols, data)
    }

    /// Column-major vectorization as an `n x 1` matrix.
    pub fn vec_col_major(&self) -> Self {
        let mut data = Vec::with_capacity(self.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self[(i, j)]);
            }
        }
        Self {
            rows: self.len(),
            cols: 1,
            data,
        }
    }

    /// Inverse of [`DenseMatrix::vec_col_major`].
    pub fn unvec_col_major(values: &[f64], rows: usize, cols: usize) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::dim(format!(
                "unvec of {} values into {rows}x{cols}",
                values.len()
            )));
        }
        let mut out = Self::new(rows, cols, vec![0.0; rows * cols])?;
        for j in 0..cols {
            for i in 0..rows {
                out[(i, j)] = values[j * rows + i];
            }
        }
        Ok(out)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Eigen decomposition of a symmetric matrix.
///
/// Columns of `vectors` are orthonormal eigenvectors; `values` are sorted in
/// descending order. Each eigenvector is signed so that its largest-magnitude
/// entry (lowest index on ties) is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub vectors: DenseMatrix,
    pub values: Vec<f64>,
}

/// `a ⊗ b`
pub fn kron(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DenseMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let s = a[(i, j)];
            for p in 0..br {
                for q in 0..bc {
                    out[(i * br + p, j * bc + q)] = s * b[(p, q)];
                }
            }
        }
    }
    out
}

/// Symmetric eigen decomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized first. Sweeps stop once the off-diagonal
/// Frobenius norm drops below `1e-12` times the input's Frobenius norm, or
/// after 100 sweeps.
pub fn sym_eig(m: &DenseMatrix) -> Result<EigenPair> {
    if !m.is_square() {
        return Err(Error::dim(format!("sym_eig of {:?}", m.shape())));
    }
    let n = m.rows();
    let mut a = m.symmetrize()?;
    let mut v = DenseMatrix::identity(n);
    let threshold = JACOBI_TOLERANCE * a.frobenius_norm();

    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a) <= threshold {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));

    let values = order.iter().map(|&k| a[(k, k)]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        let mut pivot = 0;
        for i in 1..n {
            if v[(i, k)].abs() > v[(pivot, k)].abs() {
                pivot = i;
            }
        }
        let sign = if v[(pivot, k)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[(i, col)] = sign * v[(i, k)];
        }
    }
    Ok(EigenPair { vectors, values })
}

fn off_diagonal_norm(a: &DenseMatrix) -> f64 {
    let n = a.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
    }
    acc.sqrt()
}

/// One Jacobi rotation zeroing `a[p][q]`, accumulated into `v`.
fn rotate(a: &mut DenseMatrix, v: &mut DenseMatrix, p: usize, q: usize) {
    let apq = a[(p, q)];
    if apq == 0.0 {
        return;
    }
    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
    let t = if theta.abs() > 1e150 {
        0.5 / theta
    } else {
        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
    };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let n = a.rows();

    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;

    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// `m + gamma·I`
pub fn add_diag(m: &DenseMatrix, gamma: f64) -> Result<DenseMatrix> {
    if !m.is_square() {
        return Err(Error::dim(format!("add_diag of {:?}", m.shape())));
    }
    let mut out = m.clone();
    for i in 0..m.rows() {
        out[(i, i)] += gamma;
    }
    Ok(out)
}

/// Gauss-Jordan inversion with partial pivoting.
///
/// A pivot smaller than `1e-14` times the largest entry of its original row
/// is reported as singular.
pub fn invert(m: &DenseMatrix) -> Result<DenseMatrix> {
    if !m.is_square() {
        return Err(Error::dim(format!("invert of {:?}", m.shape())));
    }
    let n = m.rows();
    let mut work = m.clone();
    let mut inv = DenseMatrix::identity(n);
    let mut row_scale: Vec<f64> = (0..n)
        .map(|i| m.row(i).iter().fold(0.0_f64, |acc, v| acc.max(v.abs())))
        .collect();

    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| work[(i, col)].abs().total_cmp(&work[(j, col)].abs()).then(j.cmp(&i)))
            .expect("non-empty range");
        let pivot = work[(pivot_row, col)];
        if row_scale[pivot_row] == 0.0 || pivot.abs() < PIVOT_TOLERANCE * row_scale[pivot_row] {
            return Err(Error::Singular(format!("pivot {pivot:e} in column {col}")));
        }
        if pivot_row != col {
            swap_rows(&mut work, pivot_row, col);
            swap_rows(&mut inv, pivot_row, col);
            row_scale.swap(pivot_row, col);
        }
        let inv_pivot = 1.0 / pivot;
        for v in work.row_mut(col) {
            *v *= inv_pivot;
        }
        for v in inv.row_mut(col) {
            *v *= inv_pivot;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = work[(r, col)];
            if factor == 0.0 {
                continue;
            }
            for c in 0..n {
                work[(r, c)] -= factor * work[(col, c)];
                inv[(r, c)] -= factor * inv[(col, c)];
            }
        }
    }
    Ok(inv)
}

fn swap_rows(m: &mut DenseMatrix, a: usize, b: usize) {
    let cols = m.cols();
    for c in 0..cols {
        m.data.swap(a * cols + c, b * cols + c);
    }
}

/// Rounds one value to the nearest binary16 value (ties to even) and widens it back.
///
/// Magnitudes at or above 65504 saturate; NaN passes through.
pub fn round_to_half(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    let ax = x.abs();
    if ax >= HALF_MAX {
        return HALF_MAX.copysign(x);
    }
    // binary16 has 10 fraction bits; subnormals share the 2^-24 quantum.
    let biased = ((ax.to_bits() >> 52) & 0x7ff) as i32;
    let exponent = (biased - 1023).max(-14);
    let quantum = 2f64.powi(exponent - 10);
    let rounded = (ax / quantum).round_ties_even() * quantum;
    rounded.copysign(x)
}

/// Replaces every entry by its binary16 rounding.
pub fn quantize_half(m: &DenseMatrix) -> DenseMatrix {
    m.map(round_to_half)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        let r = random(n, n, rng);
        add_diag(&r.matmul_t(&r).unwrap(), 1.0).unwrap()
    }

    fn rel_err(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn rejects_empty_and_short_data() {
        assert!(DenseMatrix::new(0, 3, vec![]).is_err());
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn kron_shapes_and_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(2, 3, &mut rng);
        let b = random(4, 5, &mut rng);
        let k = kron(&a, &b);
        assert_eq!(k.shape(), (8, 15));
        for i in 0..2 {
            for j in 0..3 {
                for p in 0..4 {
                    for q in 0..5 {
                        assert_eq!(k[(i * 4 + p, j * 5 + q)], a[(i, j)] * b[(p, q)]);
                    }
                }
            }
        }
        assert_eq!(
            kron(&DenseMatrix::identity(2), &DenseMatrix::identity(3)),
            DenseMatrix::identity(6)
        );
        let b = random(3, 3, &mut rng);
        assert_eq!(kron(&DenseMatrix::from_rows(&[&[2.0]]), &b), b.scale(2.0));
    }

    #[test]
    fn eig_of_diagonal() {
        let e = sym_eig(&DenseMatrix::from_diag(&[3.0, 1.0])).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
        assert_eq!(e.vectors, DenseMatrix::identity(2));
    }

    #[test]
    fn eig_two_by_two() {
        let m = DenseMatrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let e = sym_eig(&m).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.vectors[(0, 0)] - h).abs() < 1e-14 && (e.vectors[(1, 0)] - h).abs() < 1e-14);
        // second column ∝ [1, -1]; sign convention picks the first entry on the tie
        assert!((e.vectors[(0, 1)] - h).abs() < 1e-14 && (e.vectors[(1, 1)] + h).abs() < 1e-14);
        let recon = e
            .vectors
            .matmul(&DenseMatrix::from_diag(&e.values))
            .unwrap()
            .matmul_t(&e.vectors)
            .unwrap();
        assert!(rel_err(&recon, &m) < 1e-14);
    }

    #[test]
    fn eig_random_spd_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1, 3, 6, 12] {
            let m = random_spd(n, &mut rng);
            let e = sym_eig(&m).unwrap();
            let recon = e
                .vectors
                .matmul(&DenseMatrix::from_diag(&e.values))
                .unwrap()
                .matmul_t(&e.vectors)
                .unwrap();
            assert!(rel_err(&recon, &m) < 1e-9, "n={n}");
            let gram = e.vectors.t_matmul(&e.vectors).unwrap();
            assert!(gram.sub(&DenseMatrix::identity(n)).unwrap().frobenius_norm() < 1e-10);
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
            assert_eq!(sym_eig(&m).unwrap(), e);
        }
    }

    #[test]
    fn eig_rejects_non_square() {
        assert!(matches!(sym_eig(&DenseMatrix::zeros(2, 3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn add_diag_cases() {
        assert_eq!(
            add_diag(&DenseMatrix::zeros(3, 3), 0.003).unwrap(),
            DenseMatrix::identity(3).scale(0.003)
        );
        assert_eq!(
            add_diag(&DenseMatrix::identity(2), 1.0).unwrap(),
            DenseMatrix::identity(2).scale(2.0)
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random(4, 4, &mut rng);
        assert_eq!(add_diag(&m, 0.0).unwrap(), m);
        assert!(add_diag(&DenseMatrix::zeros(2, 3), 1.0).is_err());
    }

    #[test]
    fn invert_cases() {
        assert_eq!(
            invert(&DenseMatrix::identity(3).scale(2.0)).unwrap(),
            DenseMatrix::identity(3).scale(0.5)
        );
        assert_eq!(
            invert(&DenseMatrix::from_diag(&[4.0, 0.25])).unwrap(),
            DenseMatrix::from_diag(&[0.25, 4.0])
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_spd(5, &mut rng);
        let residual = m
            .matmul(&invert(&m).unwrap())
            .unwrap()
            .sub(&DenseMatrix::identity(5))
            .unwrap();
        assert!(residual.frobenius_norm() < 1e-8);
    }

    #[test]
    fn invert_detects_singular() {
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(matches!(invert(&m), Err(Error::Singular(_))));
        assert!(matches!(invert(&DenseMatrix::zeros(2, 2)), Err(Error::Singular(_))));
    }

    /// Decodes a binary16 bit pattern without going through the rounding code.
    fn decode_half(bits: u16) -> f64 {
        let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
        let exp = ((bits >> 10) & 0x1f) as i32;
        let frac = (bits & 0x3ff) as f64;
        match exp {
            0 => sign * frac * 2f64.powi(-24),
            31 => f64::NAN,
            e => sign * (1.0 + frac / 1024.0) * 2f64.powi(e - 15),
        }
    }

    /// Nearest binary16 by enumeration; ties go to the even significand.
    fn nearest_half_oracle(x: f64) -> f64 {
        let mut best = (f64::INFINITY, 0u16);
        for bits in 0..=0xffffu16 {
            let v = decode_half(bits);
            if v.is_nan() {
                continue;
            }
            let d = (v - x).abs();
            if d < best.0 || (d == best.0 && bits & 1 == 0 && best.1 & 1 == 1) {
                best = (d, bits);
            }
        }
        decode_half(best.1)
    }

    #[test]
    fn half_rounding_examples() {
        assert_eq!(round_to_half(1.0), 1.0);
        assert_eq!(nearest_half_oracle(0.1), 0.0999755859375);
        assert_eq!(round_to_half(0.1), 0.0999755859375);
        assert_eq!(round_to_half(1e5), 65504.0);
        assert_eq!(round_to_half(-1e5), -65504.0);
        assert_eq!(round_to_half(f64::INFINITY), 65504.0);
        assert_eq!(round_to_half(1e-9), 0.0);
    }

    #[test]
    fn half_rounding_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut samples: Vec<f64> = vec![
            2f64.powi(-25),
            3.0 * 2f64.powi(-25),
            2f64.powi(-14) * (1.0 - 2f64.powi(-12)),
            2048.0 + 1.0,
            2048.0 + 3.0,
            65519.0,
        ];
        for _ in 0..200 {
            let e: i32 = rng.gen_range(-26..16);
            samples.push(rng.gen_range(-1.0..1.0) * 2f64.powi(e));
        }
        for x in samples {
            assert_eq!(round_to_half(x), nearest_half_oracle(x).min(HALF_MAX), "x={x:e}");
        }
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random(6, 7, &mut rng).scale(1000.0);
        let q = quantize_half(&m);
        assert_eq!(quantize_half(&q), q);
    }

    #[test]
    fn vec_round_trip() {
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let v = m.vec_col_major();
        assert_eq!(v.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(DenseMatrix::unvec_col_major(v.data(), 2, 3).unwrap(), m);
    }

    #[test]
    fn t_matmul_is_split_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random(9, 4, &mut rng);
        let b = random(9, 3, &mut rng);
        let top_a = DenseMatrix::new(4, 4, a.data()[..16].to_vec()).unwrap();
        let bot_a = DenseMatrix::new(5, 4, a.data()[16..].to_vec()).unwrap();
        let top_b = DenseMatrix::new(4, 3, b.data()[..12].to_vec()).unwrap();
        let bot_b = DenseMatrix::new(5, 3, b.data()[12..].to_vec()).unwrap();
        let stacked_a = DenseMatrix::vstack(&[&top_a, &bot_a]).unwrap();
        let stacked_b = DenseMatrix::vstack(&[&top_b, &bot_b]).unwrap();
        assert_eq!(stacked_a.t_matmul(&stacked_b).unwrap(), a.t_matmul(&b).unwrap());
    }
}
