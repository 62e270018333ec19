//! Dense linear algebra and probability primitives.
//!
//! Everything runs in `f64`. [`Matrix`] is row-major; products go through
//! `matrixmultiply`'s stride-aware GEMM so transposed operands never need
//! to be materialized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp floor applied to probabilities before taking logarithms.
pub const KL_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Stack equally sized rows into a matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (i, v) in values.iter().enumerate() {
            self.set(i, j, *v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entrywise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.require_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Gather a subset of rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Append zero columns until the matrix is `new_cols` wide.
    pub fn widen(&self, new_cols: usize) -> Matrix {
        debug_assert!(new_cols >= self.cols);
        let mut out = Matrix::zeros(self.rows, new_cols);
        for i in 0..self.rows {
            out.row_mut(i)[..self.cols].copy_from_slice(self.row(i));
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.require_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        self.require_same_shape(other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Add `value` to every row, broadcasting a row vector.
    pub fn add_row_broadcast(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.cols);
        for chunk in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (a, b) in chunk.iter_mut().zip(row) {
                *a += b;
            }
        }
    }

    pub fn relu_inplace(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.max(0.0));
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("inner dim {}", self.cols),
                other.rows,
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut out);
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "matmul_tn",
                format!("inner dim {}", self.rows),
                other.rows,
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(1.0, self, true, other, false, 0.0, &mut out);
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_nt",
                format!("inner dim {}", self.cols),
                other.cols,
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(1.0, self, false, other, true, 0.0, &mut out);
        Ok(out)
    }

    fn require_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }
}

/// `c = alpha · op(a) · op(b) + beta · c`. Shapes are the caller's job.
pub(crate) fn gemm(
    alpha: f64,
    a: &Matrix,
    trans_a: bool,
    b: &Matrix,
    trans_b: bool,
    beta: f64,
    c: &mut Matrix,
) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if trans_b { b.rows } else { b.cols };
    debug_assert_eq!(c.rows, m);
    debug_assert_eq!(c.cols, n);
    debug_assert_eq!(if trans_b { b.cols } else { b.rows }, k);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale(beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and dimensions describe exactly the buffers owned by
    // `a`, `b` and `c`, and `c` does not alias either input.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty probability vector".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Cholesky factor `L` (lower, row-major) of a symmetric positive-definite
/// matrix, or the first pivot that failed.
fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let scale = (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max).max(1.0);
    let tol = scale * 1e-14;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = &l.data[j * n..j * n + j];
        let d = a.get(j, j) - lj.iter().map(|v| v * v).sum::<f64>();
        if !(d > tol) {
            return Err(Error::Singular { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l.data[j * n + j] = djj;
        for i in j + 1..n {
            let (head, tail) = l.data.split_at_mut(i * n);
            let li = &tail[..j];
            let lj = &head[j * n..j * n + j];
            let s: f64 = li.iter().zip(lj).map(|(x, y)| x * y).sum();
            tail[j] = (a.get(i, j) - s) / djj;
        }
    }
    Ok(l)
}

/// Solve `L Lᵀ X = B` in place.
fn cholesky_solve(l: &Matrix, b: &mut Matrix) {
    let n = l.rows();
    let k = b.cols();
    // forward: L Y = B
    for i in 0..n {
        for p in 0..i {
            let lip = l.get(i, p);
            if lip != 0.0 {
                for c in 0..k {
                    let v = b.get(p, c);
                    b.data[i * k + c] -= lip * v;
                }
            }
        }
        let d = l.get(i, i);
        b.row_mut(i).iter_mut().for_each(|v| *v /= d);
    }
    // backward: Lᵀ X = Y
    for i in (0..n).rev() {
        for p in i + 1..n {
            let lpi = l.get(p, i);
            if lpi != 0.0 {
                for c in 0..k {
                    let v = b.get(p, c);
                    b.data[i * k + c] -= lpi * v;
                }
            }
        }
        let d = l.get(i, i);
        b.row_mut(i).iter_mut().for_each(|v| *v /= d);
    }
}

/// Solve `(G + βI) W = C` by Cholesky factorization with one step of
/// iterative refinement.
pub fn solve_ridge(g: &Matrix, c: &Matrix, beta: f64) -> Result<Matrix> {
    let m = g.rows();
    if g.cols() != m {
        return Err(Error::shape("solve_ridge", "square G", format!("{}x{}", m, g.cols())));
    }
    if c.rows() != m {
        return Err(Error::shape("solve_ridge", format!("C with {m} rows"), c.rows()));
    }
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::InvalidInput(format!("ridge beta must be finite and >= 0, got {beta}")));
    }
    if !g.is_finite() || !c.is_finite() {
        return Err(Error::InvalidInput("non-finite entry in ridge system".into()));
    }
    let mut a = g.clone();
    for i in 0..m {
        a.data[i * m + i] += beta;
    }
    let l = cholesky(&a)?;
    let mut w = c.clone();
    cholesky_solve(&l, &mut w);

    // r = C - A W, then W += A⁻¹ r
    let mut r = c.clone();
    gemm(-1.0, &a, false, &w, false, 1.0, &mut r);
    cholesky_solve(&l, &mut r);
    w.add_assign(&r)?;
    if !w.is_finite() {
        return Err(Error::InvalidInput("ridge solution is not finite".into()));
    }
    Ok(w)
}

/// Temperature-scaled, max-shifted softmax.
pub fn softmax_temp(z: &[f64], tau: f64) -> Result<ProbVector> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if z.is_empty() {
        return Err(Error::InvalidInput("empty logit vector".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite logit".into()));
    }
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|v| ((v - zmax) / tau).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    Ok(ProbVector(p))
}

fn clamp_renormalize(p: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = p.iter().map(|v| v.max(KL_EPSILON)).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Symmetric KL divergence `½(KL(p‖q) + KL(q‖p))` after ε-clamping.
///
/// Evaluated as `½ Σ (pᵢ − qᵢ)(ln pᵢ − ln qᵢ)`: every term is non-negative
/// and the expression is exactly symmetric in floating point.
pub fn sym_kl(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidInput(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let pc = clamp_renormalize(p.values());
    let qc = clamp_renormalize(q.values());
    let sum: f64 = pc
        .iter()
        .zip(&qc)
        .map(|(a, b)| (a - b) * (a.ln() - b.ln()))
        .sum();
    Ok(0.5 * sum)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut g = a.matmul_tn(&a).unwrap();
        for i in 0..n {
            g.set(i, i, g.get(i, i) + 0.5);
        }
        g
    }

    /// Gauss-Jordan inverse with partial pivoting, independent of the
    /// Cholesky path.
    fn inverse_oracle(a: &Matrix) -> Matrix {
        let n = a.rows();
        let mut aug = Matrix::zeros(n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                aug.set(i, j, a.get(i, j));
            }
            aug.set(i, n + i, 1.0);
        }
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| aug.get(x, col).abs().total_cmp(&aug.get(y, col).abs()))
                .unwrap();
            for j in 0..2 * n {
                let t = aug.get(col, j);
                aug.set(col, j, aug.get(piv, j));
                aug.set(piv, j, t);
            }
            let d = aug.get(col, col);
            for j in 0..2 * n {
                aug.set(col, j, aug.get(col, j) / d);
            }
            for r in 0..n {
                if r != col {
                    let f = aug.get(r, col);
                    for j in 0..2 * n {
                        aug.set(r, j, aug.get(r, j) - f * aug.get(col, j));
                    }
                }
            }
        }
        Matrix::from_fn(n, n, |i, j| aug.get(i, n + j))
    }

    #[test]
    fn ridge_identity() {
        let i3 = Matrix::identity(3);
        let w = solve_ridge(&i3, &i3, 0.0).unwrap();
        assert_eq!(w.max_abs_diff(&i3).unwrap(), 0.0);
    }

    #[test]
    fn ridge_scalar() {
        let g = Matrix::new(1, 1, vec![0.0]).unwrap();
        let c = Matrix::new(1, 1, vec![4.0]).unwrap();
        let w = solve_ridge(&g, &c, 2.0).unwrap();
        assert!((w.get(0, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn ridge_matches_inverse_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_spd(8, &mut rng);
        let c = Matrix::from_fn(8, 3, |_, _| rng.random_range(-2.0..2.0));
        let w = solve_ridge(&g, &c, 0.1).unwrap();
        let mut a = g.clone();
        for i in 0..8 {
            a.set(i, i, a.get(i, i) + 0.1);
        }
        let expected = inverse_oracle(&a).matmul(&c).unwrap();
        assert!(w.max_abs_diff(&expected).unwrap() < 1e-9);

        let mut resid = a.matmul(&w).unwrap();
        resid.add_scaled(&c, -1.0).unwrap();
        assert!(resid.max_abs() < 1e-8 * c.max_abs());
    }

    #[test]
    fn ridge_reports_pivot() {
        // rank-1 PSD matrix, no ridge
        let g = Matrix::new(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let c = Matrix::identity(2);
        match solve_ridge(&g, &c, 0.0) {
            Err(Error::Singular { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn ridge_rejects_non_finite() {
        let mut g = Matrix::identity(2);
        g.data_mut()[1] = f64::NAN;
        assert!(matches!(
            solve_ridge(&g, &Matrix::identity(2), 1.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            solve_ridge(&Matrix::identity(2), &Matrix::identity(2), f64::INFINITY),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn ridge_invariant_under_row_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = Matrix::from_fn(30, 6, |_, _| rng.random_range(-1.0..1.0));
        let y = Matrix::from_fn(30, 2, |i, j| ((i + j) % 2) as f64);
        let mut perm: Vec<usize> = (0..30).collect();
        perm.reverse();
        perm.swap(3, 17);
        let (hp, yp) = (h.select_rows(&perm), y.select_rows(&perm));
        let w1 = solve_ridge(&h.matmul_tn(&h).unwrap(), &h.matmul_tn(&y).unwrap(), 0.5).unwrap();
        let w2 =
            solve_ridge(&hp.matmul_tn(&hp).unwrap(), &hp.matmul_tn(&yp).unwrap(), 0.5).unwrap();
        assert!(w1.max_abs_diff(&w2).unwrap() < 1e-9);
    }

    #[test]
    fn matrix_new_rejects_nan() {
        assert!(Matrix::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 2, vec![0.0]).is_err());
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let b = Matrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let tn = a.matmul_tn(&b).unwrap();
        let explicit = a.transpose().matmul(&b).unwrap();
        assert!(tn.max_abs_diff(&explicit).unwrap() < 1e-14);
        let nt = b.transpose().matmul_nt(&a.transpose()).unwrap();
        assert!(nt.max_abs_diff(&tn.transpose()).unwrap() < 1e-14);
    }

    #[test]
    fn softmax_uniform_for_constant_logits() {
        for tau in [0.05, 1.0, 7.0] {
            let p = softmax_temp(&[2.5, 2.5, 2.5], tau).unwrap();
            for v in p.values() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax_temp(&[0.0, 2f64.ln()], 1.0).unwrap();
        assert!((p.values()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.values()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_sharp_temperature() {
        // softmax([10, 0]) = [1/(1+e^-10), e^-10/(1+e^-10)]; reference values
        // evaluated at 50 digits with mpmath.
        let p = softmax_temp(&[1.0, 0.0], 0.1).unwrap();
        assert!((p.values()[0] - 0.999_954_602_131_297_6).abs() < 1e-15);
        assert!((p.values()[1] - 4.539_786_870_243_439_5e-5).abs() < 1e-18);
    }

    #[test]
    fn softmax_rejects_bad_tau() {
        assert!(matches!(softmax_temp(&[1.0], 0.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(softmax_temp(&[1.0], -1.0), Err(Error::InvalidParameter(_))));
        assert!(softmax_temp(&[f64::NAN], 1.0).is_err());
    }

    #[test]
    fn sym_kl_identity_is_zero() {
        let p = ProbVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(sym_kl(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn sym_kl_direct_summation() {
        let p = ProbVector::new(vec![0.5, 0.5]).unwrap();
        let q = ProbVector::new(vec![0.25, 0.75]).unwrap();
        let kl_pq = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        let kl_qp = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
        let expected = 0.5 * (kl_pq + kl_qp);
        assert!((sym_kl(&p, &q).unwrap() - expected).abs() < 1e-15);
        assert!((kl_pq - (0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln())).abs() < 1e-15);
    }

    #[test]
    fn sym_kl_clamped_zero_entry() {
        let p = ProbVector::new(vec![1.0, 0.0]).unwrap();
        let q = ProbVector::new(vec![0.5, 0.5]).unwrap();
        let d = sym_kl(&p, &q).unwrap();
        // oracle: clamp to 1e-12, renormalize, sum both KL directions
        let pc = [1.0 / (1.0 + 1e-12), 1e-12 / (1.0 + 1e-12)];
        let qc = [0.5, 0.5];
        let kl = |a: &[f64; 2], b: &[f64; 2]| -> f64 {
            a.iter().zip(b).map(|(x, y)| x * (x / y).ln()).sum()
        };
        let expected = 0.5 * (kl(&pc, &qc) + kl(&qc, &pc));
        assert!(d.is_finite());
        assert!((d - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn sym_kl_length_mismatch() {
        let p = ProbVector::new(vec![1.0]).unwrap();
        let q = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert!(matches!(sym_kl(&p, &q), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_shift_invariant(z in prop::collection::vec(-5.0f64..5.0, 1..8), c in -100i32..100) {
                let shifted: Vec<f64> = z.iter().map(|v| v + c as f64).collect();
                let p = softmax_temp(&z, 0.7).unwrap();
                let q = softmax_temp(&shifted, 0.7).unwrap();
                for (a, b) in p.values().iter().zip(q.values()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn sym_kl_symmetric_and_non_negative(
                a in prop::collection::vec(-4.0f64..4.0, 4),
                b in prop::collection::vec(-4.0f64..4.0, 4),
            ) {
                let p = softmax_temp(&a, 0.5).unwrap();
                let q = softmax_temp(&b, 0.5).unwrap();
                let d1 = sym_kl(&p, &q).unwrap();
                let d2 = sym_kl(&q, &p).unwrap();
                prop_assert_eq!(d1.to_bits(), d2.to_bits());
                prop_assert!(d1 >= 0.0);
            }
        }
    }
}
