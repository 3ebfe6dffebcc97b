//! Dense real matrix arithmetic and the small solvers everything else
//! builds on.
//!
//! All storage is row-major `f64`; problem sizes are desk-scale (a few
//! thousand rows at most), so there is no blocking, no sparsity, and no
//! attempt at BLAS-level performance. Operations are pure: inputs are never
//! mutated, and results can be shared freely across threads.

use thiserror::Error;

/// Pivot threshold below which a Cholesky factorization is declared
/// singular instead of producing garbage.
pub const CHOLESKY_PIVOT_MIN: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {op} got {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("matrix is singular or not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { pivot: f64, index: usize },
    #[error("data length {got} does not match shape {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, got: usize },
}

/// Dense 2-D real-valued array, row-major, 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DataLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Build from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged row in Tensor::from_rows");
            data.extend_from_slice(row);
        }
        Tensor { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data }
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, LinalgError> {
        if self.cols != rhs.rows {
            return Err(LinalgError::Dimension {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, rhs.cols);
        // ikj order keeps the inner loop contiguous on both operands.
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * rhs^T` without materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor, LinalgError> {
        if self.cols != rhs.cols {
            return Err(LinalgError::Dimension {
                op: "matmul_nt",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in 0..rhs.rows {
                let b_row = &rhs.data[j * rhs.cols..(j + 1) * rhs.cols];
                let mut acc = 0.0;
                for (a, b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out.data[i * rhs.rows + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, LinalgError> {
        self.zip_with("add", rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor, LinalgError> {
        self.zip_with("sub", rhs, |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Tensor) -> Result<Tensor, LinalgError> {
        self.zip_with("hadamard", rhs, |a, b| a * b)
    }

    fn zip_with(
        &self,
        op: &'static str,
        rhs: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, LinalgError> {
        if self.shape() != rhs.shape() {
            return Err(LinalgError::Dimension {
                op,
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// L2 norm of each column, returned as a 1 x cols tensor.
    pub fn column_l2_norms(&self) -> Tensor {
        let mut out = Tensor::zeros(1, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c] += self.get(r, c).powi(2);
            }
        }
        for v in &mut out.data {
            *v = v.sqrt();
        }
        out
    }

    /// Horizontal concatenation; row counts must agree. A zero-column
    /// operand acts as a neutral element.
    pub fn concat_cols(&self, rhs: &Tensor) -> Result<Tensor, LinalgError> {
        if self.rows != rhs.rows {
            return Err(LinalgError::Dimension {
                op: "concat_cols",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let cols = self.cols + rhs.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(rhs.row(r));
        }
        Ok(Tensor {
            rows: self.rows,
            cols,
            data,
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Lower-triangular Cholesky factor L with A = L L^T.
///
/// A must be symmetric positive definite; a pivot below
/// [`CHOLESKY_PIVOT_MIN`] reports `NotPositiveDefinite` so the caller can
/// route to a ridge fallback.
pub fn cholesky(a: &Tensor) -> Result<Tensor, LinalgError> {
    if a.rows != a.cols {
        return Err(LinalgError::Dimension {
            op: "cholesky",
            lhs: a.shape(),
            rhs: a.shape(),
        });
    }
    let n = a.rows;
    let mut l = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum < CHOLESKY_PIVOT_MIN {
                    return Err(LinalgError::NotPositiveDefinite { pivot: sum, index: i });
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solve A X = B for symmetric positive definite A via Cholesky.
pub fn solve_spd(a: &Tensor, b: &Tensor) -> Result<Tensor, LinalgError> {
    if a.rows != b.rows {
        return Err(LinalgError::Dimension {
            op: "solve_spd",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let l = cholesky(a)?;
    let n = a.rows;
    let m = b.cols;
    // Forward substitution: L Y = B.
    let mut y = b.clone();
    for i in 0..n {
        for c in 0..m {
            let mut v = y.get(i, c);
            for k in 0..i {
                v -= l.get(i, k) * y.get(k, c);
            }
            y.set(i, c, v / l.get(i, i));
        }
    }
    // Back substitution: L^T X = Y.
    let mut x = y;
    for i in (0..n).rev() {
        for c in 0..m {
            let mut v = x.get(i, c);
            for k in i + 1..n {
                v -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, v / l.get(i, i));
        }
    }
    Ok(x)
}

/// Gradient of a scalar loss w.r.t. A, given the gradient w.r.t. A^{-1}.
///
/// From d(A^{-1}) = -A^{-1} dA A^{-1}:
/// grad_A = -Ainv^T * grad_out * Ainv^T.
pub fn inverse_backward(ainv: &Tensor, grad_out: &Tensor) -> Result<Tensor, LinalgError> {
    if ainv.rows != ainv.cols || ainv.shape() != grad_out.shape() {
        return Err(LinalgError::Dimension {
            op: "inverse_backward",
            lhs: ainv.shape(),
            rhs: grad_out.shape(),
        });
    }
    let at = ainv.transpose();
    at.matmul(grad_out)?.matmul(&at).map(|t| t.scale(-1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_tensor(rng: &mut StdRng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Entry-by-entry triple-loop product, independent of matmul's loop order.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    /// Gauss-Jordan inverse with partial pivoting, used as an independent
    /// solver oracle.
    pub(crate) fn gauss_jordan_inverse(a: &Tensor) -> Tensor {
        let n = a.rows();
        assert_eq!(n, a.cols());
        let mut m = a.clone();
        let mut inv = Tensor::identity(n);
        for col in 0..n {
            let mut pivot = col;
            for r in col + 1..n {
                if m.get(r, col).abs() > m.get(pivot, col).abs() {
                    pivot = r;
                }
            }
            for c in 0..n {
                let t = m.get(col, c);
                m.set(col, c, m.get(pivot, c));
                m.set(pivot, c, t);
                let t = inv.get(col, c);
                inv.set(col, c, inv.get(pivot, c));
                inv.set(pivot, c, t);
            }
            let p = m.get(col, col);
            assert!(p.abs() > 1e-14, "singular matrix in oracle");
            for c in 0..n {
                m.set(col, c, m.get(col, c) / p);
                inv.set(col, c, inv.get(col, c) / p);
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = m.get(r, col);
                for c in 0..n {
                    m.set(r, c, m.get(r, c) - f * m.get(col, c));
                    inv.set(r, c, inv.get(r, c) - f * inv.get(col, c));
                }
            }
        }
        inv
    }

    fn random_spd(rng: &mut StdRng, n: usize) -> Tensor {
        let m = random_tensor(rng, n, n);
        m.transpose().matmul(&m).unwrap().add(&Tensor::identity(n)).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut rng = StdRng::seed_from_u64(1);
        let m = random_tensor(&mut rng, 3, 3);
        let i3 = Tensor::identity(3);
        assert_eq!(i3.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_checked() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(2);
        let a = random_tensor(&mut rng, 5, 7);
        let b = random_tensor(&mut rng, 7, 3);
        let got = a.matmul(&b).unwrap();
        let want = matmul_oracle(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(LinalgError::Dimension { .. })));
    }

    #[test]
    fn solve_spd_identity_system() {
        let mut rng = StdRng::seed_from_u64(3);
        let b = random_tensor(&mut rng, 4, 2);
        let x = solve_spd(&Tensor::identity(4), &b).unwrap();
        for (g, w) in x.data().iter().zip(b.data()) {
            assert!((g - w).abs() < 1e-14);
        }
    }

    #[test]
    fn solve_spd_diagonal_system() {
        let a = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![2.0], vec![8.0]]);
        let x = solve_spd(&a, &b).unwrap();
        assert!((x.get(0, 0) - 1.0).abs() < 1e-14);
        assert!((x.get(1, 0) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn solve_spd_matches_gauss_jordan_oracle() {
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..10 {
            let a = random_spd(&mut rng, 6);
            let b = random_tensor(&mut rng, 6, 3);
            let x = solve_spd(&a, &b).unwrap();
            let want = gauss_jordan_inverse(&a).matmul(&b).unwrap();
            for (g, w) in x.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-10, "got {g}, want {w}");
            }
            // Residual contract.
            let resid = a.matmul(&x).unwrap().sub(&b).unwrap().frobenius_norm();
            assert!(resid / b.frobenius_norm() <= 1e-10);
        }
    }

    #[test]
    fn solve_spd_rejects_singular() {
        let a = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let b = Tensor::zeros(2, 1);
        assert!(matches!(
            solve_spd(&a, &b),
            Err(LinalgError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn inverse_backward_identity_case() {
        let mut rng = StdRng::seed_from_u64(5);
        let g = random_tensor(&mut rng, 3, 3);
        let got = inverse_backward(&Tensor::identity(3), &g).unwrap();
        let want = g.scale(-1.0);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn inverse_backward_scalar_case() {
        // A = [2], A^{-1} = [0.5]; d(1/a)/da = -1/a^2 = -0.25.
        let ainv = Tensor::from_rows(&[vec![0.5]]);
        let g = Tensor::from_rows(&[vec![1.0]]);
        let got = inverse_backward(&ainv, &g).unwrap();
        assert!((got.get(0, 0) + 0.25).abs() < 1e-14);
    }

    #[test]
    fn inverse_backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(6);
        let n = 4;
        let a = random_spd(&mut rng, n);
        let w = random_tensor(&mut rng, n, n);
        // Scalar loss: sum(W .* A^{-1}); grad w.r.t. A^{-1} is W.
        let ainv = gauss_jordan_inverse(&a);
        let analytic = inverse_backward(&ainv, &w).unwrap();
        let step = 1e-5;
        for r in 0..n {
            for c in 0..n {
                let mut ap = a.clone();
                ap.set(r, c, ap.get(r, c) + step);
                let mut am = a.clone();
                am.set(r, c, am.get(r, c) - step);
                let lp = gauss_jordan_inverse(&ap).hadamard(&w).unwrap().sum();
                let lm = gauss_jordan_inverse(&am).hadamard(&w).unwrap().sum();
                let fd = (lp - lm) / (2.0 * step);
                let an = analytic.get(r, c);
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(rel <= 1e-5, "entry ({r},{c}): analytic {an}, fd {fd}");
            }
        }
    }

    #[test]
    fn solve_then_multiply_recovers_identity() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..5 {
            let a = random_spd(&mut rng, 5);
            let x = solve_spd(&a, &Tensor::identity(5)).unwrap();
            let prod = a.matmul(&x).unwrap();
            let diff = prod.sub(&Tensor::identity(5)).unwrap();
            assert!(diff.frobenius_norm() <= 1e-9);
        }
    }

    #[test]
    fn concat_cols_neutral_element() {
        let mut rng = StdRng::seed_from_u64(8);
        let m = random_tensor(&mut rng, 4, 3);
        let empty = Tensor::zeros(4, 0);
        assert_eq!(m.concat_cols(&empty).unwrap(), m);
        assert_eq!(empty.concat_cols(&m).unwrap(), m);
    }

    #[test]
    fn column_l2_norms_three_four_five() {
        let m = Tensor::from_rows(&[vec![3.0], vec![4.0]]);
        let n = m.column_l2_norms();
        assert!((n.get(0, 0) - 5.0).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn transpose_is_involution(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
            let mut rng = StdRng::seed_from_u64(seed);
            let m = random_tensor(&mut rng, rows, cols);
            prop_assert_eq!(m.transpose().transpose(), m);
        }

        #[test]
        fn matmul_is_associative(seed in 0u64..500) {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = random_tensor(&mut rng, 5, 5);
            let b = random_tensor(&mut rng, 5, 5);
            let c = random_tensor(&mut rng, 5, 5);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let diff = left.sub(&right).unwrap();
            prop_assert!(diff.max_abs() <= 1e-10);
        }
    }
}
