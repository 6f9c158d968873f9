//! Spectral normalization of effective stiffness tensors.
//!
//! The gap between the Voigt and Reuss bounds is factorized into a
//! Cholesky-like operator L with pseudo-inverse L+. Any admissible effective
//! tensor maps to a dimensionless symmetric matrix with spectrum in [0,1]:
//!
//!   Ytilde = L+ (V - C) L+^T,      C = V - L Ytilde L^T.
//!
//! Predicting Ytilde (through bounded eigenvalues and a parameterized
//! orthogonal factor) makes every reconstruction symmetric positive definite
//! and Loewner-bounded by construction, for any parameter values whatsoever.

use crate::error::{Error, Result};
use crate::linalg::{expm, jacobi_eigh, Mat};
use crate::mandel::MandelMatrix;

/// Default relative truncation threshold for gap eigenvalues.
pub const DEFAULT_EPS: f64 = 1e-8;

/// Eigenvalues of a normalized tensor may overshoot [0,1] by at most this
/// much before normalization refuses the input; covers iterative-solver noise
/// in training labels.
pub const CLAMP_TOL: f64 = 1e-6;

/// Factorization of the Voigt-Reuss gap: V - R = L L^T on the retained
/// eigenspace, with L+ the Moore-Penrose pseudo-inverse factor.
#[derive(Debug, Clone)]
pub struct SpectralFactor {
    l: Mat,
    l_plus: Mat,
    rank: usize,
    eps: f64,
    voigt: MandelMatrix,
    reuss: MandelMatrix,
}

impl SpectralFactor {
    pub fn l(&self) -> &Mat {
        &self.l
    }

    pub fn l_plus(&self) -> &Mat {
        &self.l_plus
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn voigt(&self) -> &MandelMatrix {
        &self.voigt
    }

    pub fn reuss(&self) -> &MandelMatrix {
        &self.reuss
    }

    pub fn dim(&self) -> usize {
        self.voigt.dim()
    }
}

/// Symmetric dimensionless matrix with spectrum in [0,1].
#[derive(Debug, Clone)]
pub struct NormalizedTensor {
    ytilde: Mat,
}

impl NormalizedTensor {
    /// Validates the [0,1] spectrum (tolerance 1e-9) and symmetry.
    pub fn new(ytilde: Mat) -> Result<Self> {
        if ytilde.rows() != ytilde.cols() {
            return Err(Error::DimMismatch("normalized tensor must be square".into()));
        }
        if ytilde.asymmetry() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "normalized tensor asymmetry {:.3e}",
                ytilde.asymmetry()
            )));
        }
        let sym = ytilde.symmetrized();
        let (w, _) = jacobi_eigh(&sym);
        let tol = 1e-9;
        if w[0] < -tol || w[w.len() - 1] > 1.0 + tol {
            return Err(Error::BoundsViolation(format!(
                "normalized spectrum {w:?} outside [0,1]"
            )));
        }
        Ok(NormalizedTensor { ytilde: sym })
    }

    pub fn ytilde(&self) -> &Mat {
        &self.ytilde
    }

    pub fn dim(&self) -> usize {
        self.ytilde.rows()
    }
}

/// Bounded degrees of freedom encoding a normalized tensor:
/// eigenvalues xi_lambda in [0,1]^m and orthogonal-factor parameters
/// xi_q in (0,1)^{m(m-1)/2}.
#[derive(Debug, Clone)]
pub struct NormalizedDOF {
    xi_lambda: Vec<f64>,
    xi_q: Vec<f64>,
}

impl NormalizedDOF {
    pub fn new(xi_lambda: Vec<f64>, xi_q: Vec<f64>) -> Result<Self> {
        let m = xi_lambda.len();
        if xi_q.len() != m * (m - 1) / 2 {
            return Err(Error::DimMismatch(format!(
                "xi_q needs {} entries for m={m}, got {}",
                m * (m - 1) / 2,
                xi_q.len()
            )));
        }
        if xi_lambda.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::InvalidArgument("xi_lambda outside [0,1]".into()));
        }
        if xi_q.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
            return Err(Error::InvalidArgument("xi_q outside (0,1)".into()));
        }
        Ok(NormalizedDOF { xi_lambda, xi_q })
    }

    pub fn dim(&self) -> usize {
        self.xi_lambda.len()
    }

    pub fn xi_lambda(&self) -> &[f64] {
        &self.xi_lambda
    }

    pub fn xi_q(&self) -> &[f64] {
        &self.xi_q
    }
}

/// Factorizes the gap between the bounds, truncating eigenvalues below
/// eps * lambda_max (plus a tiny absolute floor for collapsed envelopes).
pub fn factor_gap(voigt: &MandelMatrix, reuss: &MandelMatrix, eps: f64) -> Result<SpectralFactor> {
    if voigt.dim() != reuss.dim() {
        return Err(Error::DimMismatch(format!("{} vs {}", voigt.dim(), reuss.dim())));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("eps must lie in (0,1), got {eps}")));
    }
    let m = voigt.dim();
    let gap = voigt.as_mat().sub(reuss.as_mat()).symmetrized();
    let (w, q) = jacobi_eigh(&gap);
    let lam_max = w[m - 1].max(0.0);
    let scale = voigt.frobenius_norm();
    if w[0] < -eps * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::BoundsViolation(format!(
            "Voigt-Reuss gap indefinite: eigenvalues {w:?}"
        )));
    }
    // Collapsed envelopes leave pure round-off in the gap; the absolute floor
    // keeps those from being promoted to spurious rank.
    let cutoff = (eps * lam_max).max(1e-14 * scale);
    let kept: Vec<usize> = (0..m).filter(|&i| w[i] > cutoff).collect();
    let rank = kept.len();
    let mut l = Mat::zeros(m, m);
    let mut l_plus = Mat::zeros(m, m);
    for (col, &i) in kept.iter().enumerate() {
        let s = w[i].sqrt();
        for r in 0..m {
            l[(r, col)] = q[(r, i)] * s;
            l_plus[(col, r)] = q[(r, i)] / s;
        }
    }
    Ok(SpectralFactor { l, l_plus, rank, eps, voigt: voigt.clone(), reuss: reuss.clone() })
}

/// Maps an effective tensor into the normalized space, clamping eigenvalue
/// overshoot up to [`CLAMP_TOL`] and rejecting anything beyond.
pub fn normalize(cbar: &MandelMatrix, f: &SpectralFactor) -> Result<NormalizedTensor> {
    if cbar.dim() != f.dim() {
        return Err(Error::DimMismatch(format!("{} vs {}", cbar.dim(), f.dim())));
    }
    let diff = f.voigt.as_mat().sub(cbar.as_mat());
    let y_raw = f.l_plus.matmul(&diff).matmul(&f.l_plus.transpose()).symmetrized();
    let (w, q) = jacobi_eigh(&y_raw);
    if w.iter().any(|&x| x < -CLAMP_TOL || x > 1.0 + CLAMP_TOL) {
        return Err(Error::BoundsViolation(format!(
            "tensor violates Voigt-Reuss envelope: normalized eigenvalues {w:?}"
        )));
    }
    let clamped: Vec<f64> = w.iter().map(|x| x.clamp(0.0, 1.0)).collect();
    let ytilde = q.matmul(&Mat::diag(&clamped)).matmul(&q.transpose()).symmetrized();
    Ok(NormalizedTensor { ytilde })
}

/// Reconstructs the effective tensor C = V - L Ytilde L^T.
pub fn denormalize(yt: &NormalizedTensor, f: &SpectralFactor) -> MandelMatrix {
    assert_eq!(yt.dim(), f.dim(), "normalized tensor dimension mismatch");
    let lyl = f.l.matmul(yt.ytilde()).matmul(&f.l.transpose());
    MandelMatrix::from_mat_symmetrized(f.voigt.as_mat().sub(&lyl))
}

/// Smooth map from bounded parameters onto SO(m): the entries are mapped
/// affinely to skew generators w = pi (2 xi - 1) and exponentiated.
pub fn orthogonal_from_params(xi_q: &[f64]) -> Result<Mat> {
    let len = xi_q.len();
    // m (m-1) / 2 = len
    let m = (1 + ((1.0 + 8.0 * len as f64).sqrt() as usize)) / 2;
    if m * (m - 1) / 2 != len {
        return Err(Error::DimMismatch(format!("{len} parameters do not fill a skew triangle")));
    }
    if xi_q.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
        return Err(Error::InvalidArgument("xi_q outside (0,1)".into()));
    }
    let mut skew = Mat::zeros(m, m);
    let mut k = 0;
    for i in 0..m {
        for j in (i + 1)..m {
            let w = std::f64::consts::PI * (2.0 * xi_q[k] - 1.0);
            skew[(i, j)] = w;
            skew[(j, i)] = -w;
            k += 1;
        }
    }
    Ok(expm(&skew))
}

/// Builds Ytilde = Q(xi_q) diag(xi_lambda) Q(xi_q)^T.
pub fn dof_to_tilde(d: &NormalizedDOF) -> NormalizedTensor {
    let q = orthogonal_from_params(d.xi_q()).expect("DOF invariants hold");
    let ytilde =
        q.matmul(&Mat::diag(d.xi_lambda())).matmul(&q.transpose()).symmetrized();
    NormalizedTensor { ytilde }
}

/// Loss phi = ||A - B||_F / sqrt(m): the error relative to the admissible
/// Voigt-Reuss range. The loss contract of this crate is that training and
/// design losses act on normalized tensors, never on raw parameters.
pub fn loss_phi(a: &NormalizedTensor, b: &NormalizedTensor) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch(format!("{} vs {}", a.dim(), b.dim())));
    }
    Ok(a.ytilde.sub(&b.ytilde).frobenius_norm() / (a.dim() as f64).sqrt())
}

/// Gap-normalized distance between two effective tensors measured through
/// one factor: ||L+ (A - B) L+^T||_F / sqrt(m). Total (no spectrum checks),
/// and equal to `loss_phi` of the two normalized tensors whenever both lie
/// inside the factor's envelope.
pub fn phi_between(a: &MandelMatrix, b: &MandelMatrix, f: &SpectralFactor) -> Result<f64> {
    if a.dim() != f.dim() || b.dim() != f.dim() {
        return Err(Error::DimMismatch("tensor/factor dimension mismatch".into()));
    }
    let diff = a.as_mat().sub(b.as_mat());
    let mapped = f.l_plus.matmul(&diff).matmul(&f.l_plus.transpose());
    Ok(mapped.frobenius_norm() / (f.dim() as f64).sqrt())
}
