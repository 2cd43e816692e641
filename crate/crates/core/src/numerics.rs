//! Special functions and small dense linear-algebra kernels shared by the
//! inference modules: digamma, log-sum-exp, Cholesky factorization with log
//! determinant and inverse, and the log Wishart normalizer.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

/// Dense symmetric matrix, row-major full storage.
///
/// Wherever a `SymMatrix` is used as a precision or scale matrix it must be
/// positive-definite (Cholesky succeeds); construction only checks symmetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    /// Builds from row-major entries, validating symmetry to 1e-12.
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::Shape(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                data.len()
            )));
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                if (data[i * dim + j] - data[j * dim + i]).abs() > 1e-12 {
                    return Err(Error::Domain(format!(
                        "matrix not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self { dim, data })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Sets both (i,j) and (j,i).
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
        self.data[j * self.dim + i] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { dim: self.dim, data: self.data.iter().map(|v| v * c).collect() }
    }

    pub fn add_assign(&mut self, other: &SymMatrix) {
        assert_eq!(self.dim, other.dim);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sub_assign(&mut self, other: &SymMatrix) {
        assert_eq!(self.dim, other.dim);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
    }

    /// Adds `c * v vᵀ`.
    pub fn add_scaled_outer(&mut self, v: &[f64], c: f64) {
        assert_eq!(v.len(), self.dim);
        for i in 0..self.dim {
            let ci = c * v[i];
            for j in 0..self.dim {
                self.data[i * self.dim + j] += ci * v[j];
            }
        }
    }

    /// Adds `c` to every diagonal entry.
    pub fn add_diagonal(&mut self, c: f64) {
        for i in 0..self.dim {
            self.data[i * self.dim + i] += c;
        }
    }

    /// Quadratic form vᵀ M v.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.dim);
        let mut acc = 0.0;
        for i in 0..self.dim {
            let mut row = 0.0;
            for j in 0..self.dim {
                row += self.data[i * self.dim + j] * v[j];
            }
            acc += v[i] * row;
        }
        acc
    }

    /// Matrix-vector product M v.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.dim);
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.data[i * self.dim + j] * v[j]).sum())
            .collect()
    }

    /// Trace of M N.
    pub fn trace_product(&self, other: &SymMatrix) -> f64 {
        debug_assert_eq!(self.dim, other.dim);
        let mut acc = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                acc += self.data[i * self.dim + j] * other.data[j * self.dim + i];
            }
        }
        acc
    }

    pub fn max_abs_diff(&self, other: &SymMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Cholesky factorization outputs: lower factor L with L Lᵀ = M,
/// log |M|, and M⁻¹.
#[derive(Debug, Clone)]
pub struct CholeskyFactors {
    pub lower: Vec<f64>,
    pub logdet: f64,
    pub inverse: SymMatrix,
}

impl CholeskyFactors {
    /// Solves Lᵀ x = b by back substitution (used when sampling with a
    /// precision-form covariance).
    pub fn solve_upper(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= self.lower[j * n + i] * x[j];
            }
            x[i] = s / self.lower[i * n + i];
        }
        x
    }
}

/// Cholesky factorization of a positive-definite symmetric matrix, returning
/// the lower factor, log determinant and inverse in one pass.
///
/// A non-positive pivot aborts with the failing pivot index; callers that
/// assemble scatter matrices from near-empty clusters retry once with
/// `+1e-8·I` before giving up.
pub fn cholesky_logdet_inverse(m: &SymMatrix) -> Result<CholeskyFactors> {
    let n = m.dim;
    let mut l = vec![0.0; n * n];
    let mut logdet = 0.0;
    for j in 0..n {
        let mut d = m.get(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let ljj = d.sqrt();
        l[j * n + j] = ljj;
        logdet += 2.0 * ljj.ln();
        for i in (j + 1)..n {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    // Invert via two triangular solves against the identity.
    let mut inv = vec![0.0; n * n];
    for col in 0..n {
        // Forward solve L y = e_col.
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        // Back solve Lᵀ x = y.
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * inv[k * n + col];
            }
            inv[i * n + col] = s / l[i * n + i];
        }
    }
    // Symmetrize to wash out round-off between the two triangles.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (inv[i * n + j] + inv[j * n + i]);
            inv[i * n + j] = v;
            inv[j * n + i] = v;
        }
    }
    Ok(CholeskyFactors { lower: l, logdet, inverse: SymMatrix { dim: n, data: inv } })
}

/// Digamma function ψ(x) for x > 0.
///
/// Recurrence pushes the argument above 8, then the asymptotic expansion in
/// inverse even powers takes over; absolute error is below 1e-10 for
/// x ≥ 1e-3.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("digamma requires x > 0, got {x}")));
    }
    let mut acc = 0.0;
    let mut y = x;
    while y < 8.0 {
        acc -= 1.0 / y;
        y += 1.0;
    }
    let inv = 1.0 / y;
    let inv2 = inv * inv;
    // ψ(y) ≈ ln y − 1/(2y) − Σ B_{2n} / (2n y^{2n})
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0))))));
    Ok(acc + y.ln() - 0.5 * inv - series)
}

/// Numerically stable log Σ exp(vᵢ).
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    let max = values
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() {
        return Err(Error::Domain("log_sum_exp of empty vector".into()));
    }
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Log of the Wishart normalizer
/// B(W,ν) = |W|^{−ν/2} (2^{νD/2} π^{D(D−1)/4} Π_{i=1}^D Γ((ν+1−i)/2))^{−1}.
pub fn log_wishart_normalizer(w: &SymMatrix, nu: f64) -> Result<f64> {
    let d = w.dim() as f64;
    if nu <= d - 1.0 {
        return Err(Error::Domain(format!(
            "Wishart degrees of freedom {nu} must exceed dim-1 = {}",
            d - 1.0
        )));
    }
    let logdet = cholesky_logdet_inverse(w)?.logdet;
    let mut log_gamma_sum = 0.0;
    for i in 1..=w.dim() {
        log_gamma_sum += ln_gamma((nu + 1.0 - i as f64) / 2.0);
    }
    Ok(-0.5 * nu * logdet
        - 0.5 * nu * d * std::f64::consts::LN_2
        - 0.25 * d * (d - 1.0) * std::f64::consts::PI.ln()
        - log_gamma_sum)
}
