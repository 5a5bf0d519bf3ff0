//! Kernel functions, Gram matrices and the regularized SPD solves built on them.
//!
//! Every matrix computation in the crate goes through [`SpdFactor`], which
//! factors `K + ridge * I` with a Cholesky decomposition and escalates a small
//! diagonal jitter when roundoff makes the factorization fail.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Number of jitter escalations tried after a plain factorization fails.
pub const JITTER_ATTEMPTS: usize = 3;
const JITTER_START: f64 = 1e-10;
const JITTER_GROWTH: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    Gaussian,
    Matern52,
    /// Unit similarity for equal inputs, zero otherwise. Inputs are context ids.
    KroneckerDelta,
}

/// A stationary kernel with an isotropic lengthscale and an output magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub lengthscale: f64,
    pub magnitude: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, lengthscale: f64, magnitude: f64) -> Result<Self> {
        let spec = KernelSpec {
            kind,
            lengthscale,
            magnitude,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gaussian(lengthscale: f64, magnitude: f64) -> Result<Self> {
        Self::new(KernelKind::Gaussian, lengthscale, magnitude)
    }

    pub fn matern52(lengthscale: f64, magnitude: f64) -> Result<Self> {
        Self::new(KernelKind::Matern52, lengthscale, magnitude)
    }

    pub fn kronecker() -> Self {
        KernelSpec {
            kind: KernelKind::KroneckerDelta,
            lengthscale: 1.0,
            magnitude: 1.0,
        }
    }

    /// Builds a Gaussian kernel from natural-log hyperparameters.
    pub fn gaussian_from_log(log_lengthscale: f64, log_magnitude: f64) -> Result<Self> {
        Self::gaussian(log_lengthscale.exp(), log_magnitude.exp())
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == KernelKind::KroneckerDelta {
            return Ok(());
        }
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return Err(Error::input(format!(
                "kernel lengthscale must be positive, got {}",
                self.lengthscale
            )));
        }
        if !(self.magnitude > 0.0 && self.magnitude.is_finite()) {
            return Err(Error::input(format!(
                "kernel magnitude must be positive, got {}",
                self.magnitude
            )));
        }
        Ok(())
    }

    /// k(y, y), identical for every y since all kinds are stationary.
    pub fn diag(&self) -> f64 {
        match self.kind {
            KernelKind::KroneckerDelta => 1.0,
            _ => self.magnitude * self.magnitude,
        }
    }

    pub fn evaluate(&self, y1: &[f64], y2: &[f64]) -> Result<f64> {
        check_dim(y1.len(), y2.len())?;
        Ok(self.eval_unchecked(y1, y2))
    }

    /// Kernel value as a function of squared Euclidean distance.
    #[inline]
    pub fn from_sq_dist(&self, d2: f64) -> f64 {
        let m2 = self.magnitude * self.magnitude;
        match self.kind {
            KernelKind::Gaussian => m2 * (-d2 / (2.0 * self.lengthscale * self.lengthscale)).exp(),
            KernelKind::Matern52 => {
                let s = 5f64.sqrt() * d2.sqrt() / self.lengthscale;
                m2 * (1.0 + s + s * s / 3.0) * (-s).exp()
            }
            KernelKind::KroneckerDelta => {
                if d2 == 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, y1: &[f64], y2: &[f64]) -> f64 {
        self.from_sq_dist(sq_dist(y1, y2))
    }

    /// Vector of k(y, p) over `points`.
    pub fn cross(&self, points: &[Vec<f64>], y: &[f64]) -> Result<DVector<f64>> {
        if let Some(p) = points.first() {
            check_dim(p.len(), y.len())?;
        }
        Ok(DVector::from_iterator(
            points.len(),
            points.iter().map(|p| self.eval_unchecked(p, y)),
        ))
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Symmetric kernel matrix over a point set.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub values: DMatrix<f64>,
    pub jitter_added: f64,
}

impl GramMatrix {
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::input("Gram matrix must be square"));
        }
        Ok(GramMatrix {
            values,
            jitter_added: 0.0,
        })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    /// Smallest eigenvalue relative check: all eigenvalues >= -tol * trace.
    pub fn is_psd(&self, tol: f64) -> bool {
        let trace = self.values.trace().abs().max(f64::MIN_POSITIVE);
        let eig = SymmetricEigen::new(self.values.clone());
        eig.eigenvalues.iter().all(|&e| e >= -tol * trace)
    }
}

pub fn gram(kernel: &KernelSpec, points: &[Vec<f64>]) -> Result<GramMatrix> {
    let n = points.len();
    if n == 0 {
        return Err(Error::input("gram requires at least one point"));
    }
    let dim = points[0].len();
    for p in points {
        check_dim(dim, p.len())?;
    }
    let mut values = DMatrix::zeros(n, n);
    for a in 0..n {
        values[(a, a)] = kernel.eval_unchecked(&points[a], &points[a]);
        for b in 0..a {
            let v = kernel.eval_unchecked(&points[a], &points[b]);
            values[(a, b)] = v;
            values[(b, a)] = v;
        }
    }
    Ok(GramMatrix {
        values,
        jitter_added: 0.0,
    })
}

/// Cholesky factor of `K + ridge * I` (plus any jitter needed to factor it).
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    ridge: f64,
    jitter: f64,
}

impl SpdFactor {
    pub fn new(k: &DMatrix<f64>, ridge: f64) -> Result<Self> {
        if !(ridge > 0.0 && ridge.is_finite()) {
            return Err(Error::input(format!("ridge must be positive, got {ridge}")));
        }
        let n = k.nrows();
        let mut shifted = k.clone();
        for i in 0..n {
            shifted[(i, i)] += ridge;
        }
        if let Some(chol) = shifted.clone().cholesky() {
            return Ok(SpdFactor {
                chol,
                ridge,
                jitter: 0.0,
            });
        }
        let trace = k.trace().abs();
        let mut jitter = JITTER_START * if trace > 0.0 { trace / n as f64 } else { 1.0 };
        for attempt in 0..JITTER_ATTEMPTS {
            if attempt > 0 {
                jitter *= JITTER_GROWTH;
            }
            let mut m = shifted.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(chol) = m.cholesky() {
                log::debug!("SPD factorization needed jitter {jitter:e}");
                return Ok(SpdFactor {
                    chol,
                    ridge,
                    jitter,
                });
            }
        }
        Err(Error::Factorization { jitter })
    }

    pub fn n(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    /// `vᵀ (K + ridge I)⁻¹ v` through one triangular solve.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        let l = self.chol.l_dirty();
        let z = l
            .solve_lower_triangular(v)
            .expect("Cholesky factor has a positive diagonal");
        z.norm_squared()
    }

    /// `L⁻¹ M` for the lower Cholesky factor `L`.
    pub fn whiten(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(m)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// log det(K + ridge I), twice the sum of the log-diagonal of the factor.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }
}

/// Solves `(K + ridge I) x = rhs`.
pub fn regularized_solve(k: &GramMatrix, ridge: f64, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim(k.n(), rhs.nrows())?;
    Ok(SpdFactor::new(&k.values, ridge)?.solve(rhs))
}

/// log det(K + lam_bar I). Bound callers pass `lam_bar = max(1, n λ)`.
pub fn log_det_regularized(k: &GramMatrix, lam_bar: f64) -> Result<f64> {
    Ok(SpdFactor::new(&k.values, lam_bar)?.log_det())
}
