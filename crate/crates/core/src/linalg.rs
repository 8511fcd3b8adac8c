//! Tridiagonal matrices and the small set of vector kernels the solvers need.
//!
//! Every operator arising from linear elements on a 1D mesh is tridiagonal, so
//! a banded LU with partial pivoting covers all forward, adjoint and prior
//! solves.

use crate::error::{Error, Result};

/// Square tridiagonal matrix stored by diagonals.
///
/// `lower[i]` is entry `(i+1, i)`, `upper[i]` is entry `(i, i+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiagonal {
    pub fn zeros(n: usize) -> Self {
        let off = n.saturating_sub(1);
        Self {
            lower: vec![0.0; off],
            diag: vec![0.0; n],
            upper: vec![0.0; off],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n);
        t.diag.iter_mut().for_each(|d| *d = 1.0);
        t
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// Entry `(row, col)`; zero outside the band.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        if row == col {
            self.diag[row]
        } else if col + 1 == row {
            self.lower[col]
        } else if row + 1 == col {
            self.upper[row]
        } else {
            0.0
        }
    }

    /// Adds `value` to entry `(row, col)`, which must lie in the band.
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        if row == col {
            self.diag[row] += value;
        } else if col + 1 == row {
            self.lower[col] += value;
        } else if row + 1 == col {
            self.upper[row] += value;
        } else {
            panic!("entry ({row}, {col}) outside tridiagonal band");
        }
    }

    pub fn transpose(&self) -> Self {
        Self {
            lower: self.upper.clone(),
            diag: self.diag.clone(),
            upper: self.lower.clone(),
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            lower: self.lower.iter().map(|v| alpha * v).collect(),
            diag: self.diag.iter().map(|v| alpha * v).collect(),
            upper: self.upper.iter().map(|v| alpha * v).collect(),
        }
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, alpha: f64, other: &Self) -> Self {
        assert_eq!(self.dim(), other.dim());
        let zip = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + alpha * y).collect();
        Self {
            lower: zip(&self.lower, &other.lower),
            diag: zip(&self.diag, &other.diag),
            upper: zip(&self.upper, &other.upper),
        }
    }

    /// Replaces row `i` by the unit row `e_i`.
    pub fn set_identity_row(&mut self, i: usize) {
        self.diag[i] = 1.0;
        if i > 0 {
            self.lower[i - 1] = 0.0;
        }
        if i + 1 < self.dim() {
            self.upper[i] = 0.0;
        }
    }

    /// Zeroes row `i`.
    pub fn clear_row(&mut self, i: usize) {
        self.diag[i] = 0.0;
        if i > 0 {
            self.lower[i - 1] = 0.0;
        }
        if i + 1 < self.dim() {
            self.upper[i] = 0.0;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(x.len(), n, "tridiagonal matvec length");
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = self.diag[i] * x[i];
            if i > 0 {
                acc += self.lower[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                acc += self.upper[i] * x[i + 1];
            }
            y[i] = acc;
        }
        y
    }

    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(x.len(), n, "tridiagonal matvec length");
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = self.diag[i] * x[i];
            if i > 0 {
                acc += self.upper[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                acc += self.lower[i] * x[i + 1];
            }
            y[i] = acc;
        }
        y
    }

    /// Row sums, i.e. `A * 1`.
    pub fn row_sums(&self) -> Vec<f64> {
        self.matvec(&vec![1.0; self.dim()])
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.dim();
        nalgebra::DMatrix::from_fn(n, n, |i, j| self.get(i, j))
    }

    /// LU factorization with partial pivoting (LAPACK `gttrf` layout).
    pub fn factorize(&self) -> Result<TridiagonalLu> {
        TridiagonalLu::new(self)
    }

    /// Cholesky factor `L` (lower bidiagonal) of a symmetric positive definite matrix.
    pub fn cholesky(&self) -> Result<BidiagonalFactor> {
        let n = self.dim();
        let mut diag = vec![0.0; n];
        let mut sub = vec![0.0; n.saturating_sub(1)];
        for i in 0..n {
            let mut d = self.diag[i];
            if i > 0 {
                d -= sub[i - 1] * sub[i - 1];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Solver(format!(
                    "matrix not positive definite (pivot {d:e} at row {i})"
                )));
            }
            diag[i] = d.sqrt();
            if i + 1 < n {
                sub[i] = self.lower[i] / diag[i];
            }
        }
        Ok(BidiagonalFactor { diag, sub })
    }
}

/// Lower bidiagonal Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct BidiagonalFactor {
    diag: Vec<f64>,
    sub: Vec<f64>,
}

impl BidiagonalFactor {
    /// `L x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.diag.len())
            .map(|i| {
                let mut v = self.diag[i] * x[i];
                if i > 0 {
                    v += self.sub[i - 1] * x[i - 1];
                }
                v
            })
            .collect()
    }
}

/// Factorization `P A = L U` of a tridiagonal matrix; `U` has two superdiagonals.
#[derive(Debug, Clone)]
pub struct TridiagonalLu {
    dl: Vec<f64>,
    d: Vec<f64>,
    du: Vec<f64>,
    du2: Vec<f64>,
    /// Row swapped with `i` at step `i`: either `i` or `i + 1`.
    ipiv: Vec<usize>,
}

impl TridiagonalLu {
    fn new(a: &Tridiagonal) -> Result<Self> {
        let n = a.dim();
        if n == 0 {
            return Err(Error::Solver("empty matrix".into()));
        }
        let mut dl = a.lower.clone();
        let mut d = a.diag.clone();
        let mut du = a.upper.clone();
        let mut du2 = vec![0.0; n.saturating_sub(2)];
        let mut ipiv: Vec<usize> = (0..n).collect();

        for i in 0..n.saturating_sub(1) {
            if d[i].abs() >= dl[i].abs() {
                if d[i] != 0.0 {
                    let fact = dl[i] / d[i];
                    dl[i] = fact;
                    d[i + 1] -= fact * du[i];
                }
            } else {
                let fact = d[i] / dl[i];
                d[i] = dl[i];
                dl[i] = fact;
                let temp = du[i];
                du[i] = d[i + 1];
                d[i + 1] = temp - fact * d[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] = -fact * du[i + 1];
                }
                ipiv[i] = i + 1;
            }
        }
        let scale = a
            .diag
            .iter()
            .chain(&a.lower)
            .chain(&a.upper)
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        for (i, di) in d.iter().enumerate() {
            if !di.is_finite() || di.abs() <= scale * 1e-300 || *di == 0.0 {
                return Err(Error::Solver(format!("singular tridiagonal system (zero pivot at {i})")));
            }
        }
        Ok(Self { dl, d, du, du2, ipiv })
    }

    pub fn dim(&self) -> usize {
        self.d.len()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n, "tridiagonal solve length");
        let mut x = b.to_vec();
        for i in 0..n.saturating_sub(1) {
            if self.ipiv[i] == i {
                x[i + 1] -= self.dl[i] * x[i];
            } else {
                let temp = x[i] - self.dl[i] * x[i + 1];
                x[i] = x[i + 1];
                x[i + 1] = temp;
            }
        }
        x[n - 1] /= self.d[n - 1];
        if n > 1 {
            x[n - 2] = (x[n - 2] - self.du[n - 2] * x[n - 1]) / self.d[n - 2];
        }
        for i in (0..n.saturating_sub(2)).rev() {
            x[i] = (x[i] - self.du[i] * x[i + 1] - self.du2[i] * x[i + 2]) / self.d[i];
        }
        x
    }

    /// Solves `Aᵀ x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n, "tridiagonal solve length");
        let mut x = b.to_vec();
        x[0] /= self.d[0];
        if n > 1 {
            x[1] = (x[1] - self.du[0] * x[0]) / self.d[1];
        }
        for i in 2..n {
            x[i] = (x[i] - self.du[i - 1] * x[i - 1] - self.du2[i - 2] * x[i - 2]) / self.d[i];
        }
        for i in (0..n.saturating_sub(1)).rev() {
            let ip = self.ipiv[i];
            let temp = x[i] - self.dl[i] * x[i + 1];
            x[i] = x[ip];
            x[ip] = temp;
        }
        x
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_tridiag(n: usize, vals: &[f64]) -> Tridiagonal {
        let mut t = Tridiagonal::zeros(n);
        for i in 0..n {
            t.diag[i] = vals[i % vals.len()];
        }
        for i in 0..n - 1 {
            t.lower[i] = vals[(i + 3) % vals.len()];
            t.upper[i] = vals[(i + 7) % vals.len()];
        }
        t
    }

    #[test]
    fn pivoting_handles_zero_diagonal() {
        // [[0,1],[1,0]] needs a row swap.
        let t = Tridiagonal { lower: vec![1.0], diag: vec![0.0, 0.0], upper: vec![1.0] };
        let lu = t.factorize().unwrap();
        assert_eq!(lu.solve(&[2.0, 3.0]), vec![3.0, 2.0]);
        assert_eq!(lu.solve_transpose(&[2.0, 3.0]), vec![3.0, 2.0]);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let t = Tridiagonal::zeros(3);
        assert!(matches!(t.factorize(), Err(Error::Solver(_))));
    }

    #[test]
    fn cholesky_reproduces_matrix() {
        let mut t = Tridiagonal::zeros(5);
        t.diag.iter_mut().for_each(|d| *d = 4.0);
        t.lower.iter_mut().for_each(|d| *d = 1.0);
        t.upper.iter_mut().for_each(|d| *d = 1.0);
        let l = t.cholesky().unwrap();
        // columns of L Lᵀ
        for j in 0..5 {
            let mut e = vec![0.0; 5];
            e[j] = 1.0;
            // Lᵀ e_j is row j of L
            let mut lt = vec![0.0; 5];
            lt[j] = l.diag[j];
            if j > 0 {
                lt[j - 1] = l.sub[j - 1];
            }
            let col = l.apply(&lt);
            for i in 0..5 {
                assert!((col[i] - t.get(i, j)).abs() < 1e-14);
            }
        }
    }

    proptest! {
        #[test]
        fn solves_match_dense(vals in prop::collection::vec(-3.0f64..3.0, 12), n in 2usize..9) {
            let mut t = random_tridiag(n, &vals);
            // keep it comfortably nonsingular
            for i in 0..n { t.diag[i] += if t.diag[i] >= 0.0 { 7.0 } else { -7.0 }; }
            let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin() + 0.5).collect();
            let lu = t.factorize().unwrap();
            let x = lu.solve(&rhs);
            let r = t.matvec(&x);
            for i in 0..n { prop_assert!((r[i] - rhs[i]).abs() < 1e-10); }
            let xt = lu.solve_transpose(&rhs);
            let rt = t.matvec_transpose(&xt);
            for i in 0..n { prop_assert!((rt[i] - rhs[i]).abs() < 1e-10); }
            let dense = t.to_dense();
            let dx = dense.clone() * nalgebra::DVector::from_vec(x.clone());
            for i in 0..n { prop_assert!((dx[i] - rhs[i]).abs() < 1e-10); }
        }
    }
}
