//! Small dense complex matrices.
//!
//! Everything downstream of the channel generator that needs exact complex
//! arithmetic (beam matrices, pilot equations, minimum-norm decoding) runs on
//! this representation; the real-tensor autodiff engine only sees complex
//! values as a trailing re/im axis and converts at module boundaries.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Row-major dense complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMat {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Column vector from a slice.
    pub fn col_from_slice(v: &[Complex64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn column(&self, j: usize) -> Vec<Complex64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, v: &[Complex64]) {
        for i in 0..self.rows {
            self[(i, j)] = v[i];
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn conj(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    /// Conjugate transpose.
    pub fn hermitian(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)].conj();
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &CMat) -> Result<CMat> {
        if self.cols != rhs.rows {
            return Err(Error::Dimension(format!(
                "matmul {}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = CMat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a.norm_sqr() == 0.0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    out[(i, j)] += a * rhs[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[Complex64]) -> Result<Vec<Complex64>> {
        if self.cols != v.len() {
            return Err(Error::Dimension(format!(
                "matvec {}x{} * {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![Complex64::new(0.0, 0.0); self.rows];
        for i in 0..self.rows {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..self.cols {
                acc += self[(i, k)] * v[k];
            }
            out[i] = acc;
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &CMat) -> Result<CMat> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::Dimension("matrix add shape mismatch".into()));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(CMat {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, c: Complex64) -> CMat {
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * c).collect(),
        }
    }

    pub fn fro_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Solves `self * X = B` by LU with partial pivoting. `self` must be square.
    pub fn solve(&self, b: &CMat) -> Result<CMat> {
        if self.rows != self.cols {
            return Err(Error::Dimension("solve needs a square matrix".into()));
        }
        if b.rows != self.rows {
            return Err(Error::Dimension("solve rhs row mismatch".into()));
        }
        let n = self.rows;
        let mut lu = self.data.clone();
        let mut x = b.data.clone();
        let ncols = b.cols;
        let mut max_pivot: f64 = 0.0;
        let mut min_pivot = f64::INFINITY;
        for k in 0..n {
            // pivot search
            let mut p = k;
            let mut best = lu[k * n + k].norm();
            for i in (k + 1)..n {
                let cand = lu[i * n + k].norm();
                if cand > best {
                    best = cand;
                    p = i;
                }
            }
            if best == 0.0 {
                return Err(Error::Singular {
                    context: "LU pivot is exactly zero".into(),
                    cond: f64::INFINITY,
                });
            }
            max_pivot = max_pivot.max(best);
            min_pivot = min_pivot.min(best);
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                for j in 0..ncols {
                    x.swap(k * ncols + j, p * ncols + j);
                }
            }
            let pivot = lu[k * n + k];
            for i in (k + 1)..n {
                let factor = lu[i * n + k] / pivot;
                lu[i * n + k] = factor;
                for j in (k + 1)..n {
                    let sub = factor * lu[k * n + j];
                    lu[i * n + j] -= sub;
                }
                for j in 0..ncols {
                    let sub = factor * x[k * ncols + j];
                    x[i * ncols + j] -= sub;
                }
            }
        }
        // crude conditioning gate on the pivot spread
        let cond = max_pivot / min_pivot;
        if !cond.is_finite() || cond > 1e14 {
            return Err(Error::Singular {
                context: "linear system numerically rank-deficient".into(),
                cond,
            });
        }
        // back substitution
        for j in 0..ncols {
            for i in (0..n).rev() {
                let mut acc = x[i * ncols + j];
                for k in (i + 1)..n {
                    acc -= lu[i * n + k] * x[k * ncols + j];
                }
                x[i * ncols + j] = acc / lu[i * n + i];
            }
        }
        CMat::from_vec(n, ncols, x)
    }

    /// Largest singular value via power iteration on `AᴴA`.
    ///
    /// Deterministic (fixed pseudo-random start vector). The estimate
    /// converges from below; callers that need an upper bound should add a
    /// safety margin.
    pub fn sigma_max(&self) -> f64 {
        let n = self.cols;
        if n == 0 || self.rows == 0 {
            return 0.0;
        }
        // LCG start vector avoids starting orthogonal to the top mode.
        let mut state = 0x9e37_79b9_7f4a_7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
        };
        let mut v: Vec<Complex64> = (0..n).map(|_| Complex64::new(next(), next())).collect();
        let norm0 = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        for z in v.iter_mut() {
            *z /= norm0;
        }
        let ah = self.hermitian();
        let mut sigma2 = 0.0;
        for _ in 0..200 {
            let av = self.matvec(&v).expect("shape checked");
            let mut w = ah.matvec(&av).expect("shape checked");
            let norm = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            for z in w.iter_mut() {
                *z /= norm;
            }
            let prev = sigma2;
            sigma2 = norm;
            v = w;
            if (sigma2 - prev).abs() <= 1e-13 * sigma2.max(1.0) {
                break;
            }
        }
        sigma2.sqrt()
    }
}

impl std::ops::Index<(usize, usize)> for CMat {
    type Output = Complex64;
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Squared Euclidean norm of a complex slice.
pub fn norm_sqr(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn matmul_identity() {
        let a = CMat::from_vec(2, 2, vec![c(1.0, 1.0), c(2.0, 0.0), c(0.0, -1.0), c(3.0, 2.0)])
            .unwrap();
        let i = CMat::identity(2);
        assert_eq!(a.matmul(&i).unwrap(), a);
    }

    #[test]
    fn solve_recovers_rhs() {
        let a = CMat::from_vec(
            3,
            3,
            vec![
                c(4.0, 0.0),
                c(1.0, 2.0),
                c(0.0, 0.0),
                c(1.0, -2.0),
                c(5.0, 0.0),
                c(0.5, 0.0),
                c(0.0, 0.0),
                c(0.5, 0.0),
                c(3.0, 0.0),
            ],
        )
        .unwrap();
        let x = CMat::from_vec(3, 1, vec![c(1.0, -1.0), c(2.0, 0.5), c(-0.5, 0.0)]).unwrap();
        let b = a.matmul(&x).unwrap();
        let got = a.solve(&b).unwrap();
        for (u, v) in got.data().iter().zip(x.data()) {
            assert!((u - v).norm() < 1e-12);
        }
    }

    #[test]
    fn singular_matrix_reports_condition() {
        let a = CMat::from_vec(2, 2, vec![c(1.0, 0.0), c(2.0, 0.0), c(2.0, 0.0), c(4.0, 0.0)])
            .unwrap();
        let b = CMat::from_vec(2, 1, vec![c(1.0, 0.0), c(2.0, 0.0)]).unwrap();
        match a.solve(&b) {
            Err(Error::Singular { .. }) => {}
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn sigma_max_matches_known_value() {
        // diag(3, 1) has sigma_max 3
        let a = CMat::from_vec(2, 2, vec![c(3.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)])
            .unwrap();
        assert!((a.sigma_max() - 3.0).abs() < 1e-9);
    }
}
