//! Stiffness tensors in the orthonormal Mandel basis, isotropic material
//! models, Loewner-order predicates and error metrics.
//!
//! Mandel (not Voigt) storage is used everywhere: the basis is orthonormal,
//! so Frobenius norms of the matrix representation coincide with the tensor
//! norms and stay consistent under the spectral maps built on top.

use crate::error::{Error, Result};
use crate::linalg::{jacobi_eigh, Mat};

/// Default relative tolerance for Loewner predicates; matches the noise
/// floor of solver-generated labels.
pub const LOEWNER_TOL: f64 = 1e-9;

/// Symmetric m x m stiffness/compliance matrix in the Mandel basis
/// (m = 3 for plane strain, m = 6 for full 3D).
#[derive(Debug, Clone, PartialEq)]
pub struct MandelMatrix {
    mat: Mat,
}

impl MandelMatrix {
    /// Builds from a row-major m x m slice; the input must be symmetric to
    /// 1e-12 relative and is symmetrized exactly on construction.
    pub fn new(m: usize, entries: &[f64]) -> Result<Self> {
        if !(m == 3 || m == 6) {
            return Err(Error::InvalidArgument(format!("Mandel dimension must be 3 or 6, got {m}")));
        }
        if entries.len() != m * m {
            return Err(Error::DimMismatch(format!(
                "expected {} entries for m={m}, got {}",
                m * m,
                entries.len()
            )));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite matrix entry".into()));
        }
        let mat = Mat::from_vec(m, m, entries.to_vec());
        if mat.asymmetry() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "matrix not symmetric: relative asymmetry {:.3e}",
                mat.asymmetry()
            )));
        }
        Ok(MandelMatrix { mat: mat.symmetrized() })
    }

    pub(crate) fn from_mat_symmetrized(mat: Mat) -> Self {
        debug_assert_eq!(mat.rows(), mat.cols());
        MandelMatrix { mat: mat.symmetrized() }
    }

    pub fn zero(m: usize) -> Self {
        MandelMatrix { mat: Mat::zeros(m, m) }
    }

    pub fn dim(&self) -> usize {
        self.mat.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.mat[(i, j)]
    }

    pub fn entries(&self) -> &[f64] {
        self.mat.data()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.mat
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.mat.frobenius_norm()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        jacobi_eigh(&self.mat).0
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    pub fn is_spd(&self, tol: f64) -> bool {
        self.min_eigenvalue() > tol * self.frobenius_norm()
    }

    pub fn inverse(&self) -> Result<MandelMatrix> {
        Ok(MandelMatrix::from_mat_symmetrized(self.mat.inverse()?))
    }

    pub fn add(&self, other: &MandelMatrix) -> MandelMatrix {
        MandelMatrix { mat: self.mat.add(&other.mat) }
    }

    pub fn sub(&self, other: &MandelMatrix) -> MandelMatrix {
        MandelMatrix { mat: self.mat.sub(&other.mat) }
    }

    pub fn scale(&self, s: f64) -> MandelMatrix {
        MandelMatrix { mat: self.mat.scale(s) }
    }

    /// Serializes as a JSON array of the full row-major matrix with
    /// 17-significant-digit decimal floats (exact f64 round trip).
    pub fn to_json_array(&self) -> String {
        let mut s = String::from("[");
        for (k, v) in self.entries().iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            s.push_str(&format_f64(*v));
        }
        s.push(']');
        s
    }

    /// Parses the row-major JSON array form produced by [`to_json_array`].
    pub fn from_json_array(text: &str) -> Result<Self> {
        let vals: Vec<f64> = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("matrix array: {e}")))?;
        let m = match vals.len() {
            9 => 3,
            36 => 6,
            n => return Err(Error::Parse(format!("matrix array has {n} entries, want 9 or 36"))),
        };
        MandelMatrix::new(m, &vals)
    }
}

/// 17 significant digits: the shortest fixed width that makes the decimal
/// text reproduce every f64 bit-exactly.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Isotropic linear-elastic phase given by engineering constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsotropicPhase {
    young: f64,
    poisson: f64,
}

impl IsotropicPhase {
    pub fn new(young: f64, poisson: f64) -> Result<Self> {
        if !(young.is_finite() && young > 0.0) {
            return Err(Error::InvalidArgument(format!("Young's modulus must be > 0, got {young}")));
        }
        if !(poisson.is_finite() && poisson > -1.0 && poisson < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "Poisson ratio must lie in (-1, 0.5), got {poisson}"
            )));
        }
        Ok(IsotropicPhase { young, poisson })
    }

    pub fn young(&self) -> f64 {
        self.young
    }

    pub fn poisson(&self) -> f64 {
        self.poisson
    }

    /// First Lame constant.
    pub fn lame_lambda(&self) -> f64 {
        self.young * self.poisson / ((1.0 + self.poisson) * (1.0 - 2.0 * self.poisson))
    }

    /// Shear modulus mu = E / (2(1+nu)).
    pub fn shear(&self) -> f64 {
        self.young / (2.0 * (1.0 + self.poisson))
    }

    /// 3D bulk modulus K = E / (3(1-2nu)).
    pub fn bulk_3d(&self) -> f64 {
        self.young / (3.0 * (1.0 - 2.0 * self.poisson))
    }

    /// Plane-strain (2D) bulk modulus k = lambda + mu.
    pub fn bulk_2d(&self) -> f64 {
        self.lame_lambda() + self.shear()
    }
}

/// Plane-strain stiffness of an isotropic phase as a 3x3 Mandel matrix.
pub fn plane_strain_stiffness(phase: &IsotropicPhase) -> MandelMatrix {
    let l = phase.lame_lambda();
    let two_mu = 2.0 * phase.shear();
    let entries = [l + two_mu, l, 0.0, l, l + two_mu, 0.0, 0.0, 0.0, two_mu];
    MandelMatrix::new(3, &entries).expect("plane-strain stiffness is symmetric")
}

/// 6x6 Mandel matrix of the hydrostatic projector (I (x) I)/3.
pub fn hydrostatic_projector_6() -> MandelMatrix {
    let mut e = [0.0; 36];
    for i in 0..3 {
        for j in 0..3 {
            e[i * 6 + j] = 1.0 / 3.0;
        }
    }
    MandelMatrix::new(6, &e).unwrap()
}

/// 6x6 Mandel matrix of the deviatoric projector P2 = I_sym - (I (x) I)/3.
pub fn deviatoric_projector_6() -> MandelMatrix {
    let mut e = [0.0; 36];
    for i in 0..6 {
        e[i * 6 + i] = 1.0;
    }
    for i in 0..3 {
        for j in 0..3 {
            e[i * 6 + j] -= 1.0 / 3.0;
        }
    }
    MandelMatrix::new(6, &e).unwrap()
}

/// Isotropic 3D stiffness 3K (I(x)I)/3 + 2G P2 as a 6x6 Mandel matrix.
pub fn iso_stiffness_3d(bulk: f64, shear: f64) -> Result<MandelMatrix> {
    if !(bulk > 0.0 && shear > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bulk and shear moduli must be > 0, got K={bulk}, G={shear}"
        )));
    }
    Ok(iso_combination_6(bulk, shear))
}

/// 3K (I(x)I)/3 + 2G P2 without the positivity check (used by the projection,
/// which must stay total for arbitrary symmetric input).
fn iso_combination_6(bulk: f64, shear: f64) -> MandelMatrix {
    let hydro = hydrostatic_projector_6().scale(3.0 * bulk);
    let dev = deviatoric_projector_6().scale(2.0 * shear);
    hydro.add(&dev)
}

/// Loewner predicate a <= b: smallest eigenvalue of (b - a) >= -tol ||b||_F.
pub fn loewner_leq(a: &MandelMatrix, b: &MandelMatrix, tol: f64) -> Result<bool> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch(format!("{} vs {}", a.dim(), b.dim())));
    }
    let diff = b.sub(a);
    Ok(diff.min_eigenvalue() >= -tol * b.frobenius_norm())
}

/// Relative Frobenius error ||a - b||_F / ||a||_F.
pub fn rel_frobenius(a: &MandelMatrix, b: &MandelMatrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch(format!("{} vs {}", a.dim(), b.dim())));
    }
    let na = a.frobenius_norm();
    if na == 0.0 {
        return Err(Error::InvalidArgument("reference matrix has zero norm".into()));
    }
    Ok(a.sub(b).frobenius_norm() / na)
}

/// Frobenius-orthogonal projection of a 6x6 Mandel matrix onto the isotropic
/// subspace; returns (projection, K, G).
pub fn isotropic_projection_6(c: &MandelMatrix) -> Result<(MandelMatrix, f64, f64)> {
    if c.dim() != 6 {
        return Err(Error::DimMismatch(format!("isotropic projection needs m=6, got {}", c.dim())));
    }
    let mut k = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            k += c.get(i, j);
        }
    }
    k /= 9.0;
    let mut trace = 0.0;
    for i in 0..6 {
        trace += c.get(i, i);
    }
    let g = (trace - 3.0 * k) / 10.0;
    Ok((iso_combination_6(k, g), k, g))
}

/// Directional Young's modulus E(theta) = 1 / (d^T C^{-1} d) for the
/// plane-strain uniaxial direction d = [cos^2, sin^2, sqrt(2) sin cos].
pub fn directional_young(c: &MandelMatrix, theta: f64) -> Result<f64> {
    if c.dim() != 3 {
        return Err(Error::DimMismatch(format!("directional modulus needs m=3, got {}", c.dim())));
    }
    let s = c.inverse()?;
    let (ct, st) = (theta.cos(), theta.sin());
    let d = [ct * ct, st * st, std::f64::consts::SQRT_2 * st * ct];
    let sd = s.as_mat().matvec(&d);
    let q: f64 = d.iter().zip(&sd).map(|(a, b)| a * b).sum();
    if q <= 0.0 {
        return Err(Error::Singular(format!("non-positive compliance quadratic {q}")));
    }
    Ok(1.0 / q)
}

/// In-plane rotation of a 3x3 Mandel stiffness by angle alpha, performed on
/// the underlying fourth-order tensor components.
pub fn rotate_plane(c: &MandelMatrix, alpha: f64) -> Result<MandelMatrix> {
    if c.dim() != 3 {
        return Err(Error::DimMismatch("plane rotation needs m=3".into()));
    }
    let sqrt2 = std::f64::consts::SQRT_2;
    // Mandel 3x3 -> full 2D fourth-order components.
    let idx = |i: usize, j: usize| -> usize {
        match (i, j) {
            (0, 0) => 0,
            (1, 1) => 1,
            _ => 2,
        }
    };
    let weight = |i: usize, j: usize| -> f64 {
        if i == j {
            1.0
        } else {
            sqrt2
        }
    };
    let mut full = [[[[0.0f64; 2]; 2]; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    full[i][j][k][l] =
                        c.get(idx(i, j), idx(k, l)) / (weight(i, j) * weight(k, l));
                }
            }
        }
    }
    let (ca, sa) = (alpha.cos(), alpha.sin());
    let q = [[ca, -sa], [sa, ca]];
    let mut rot = [[[[0.0f64; 2]; 2]; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    let mut acc = 0.0;
                    for a in 0..2 {
                        for b in 0..2 {
                            for cc in 0..2 {
                                for d in 0..2 {
                                    acc += q[i][a] * q[j][b] * q[k][cc] * q[l][d]
                                        * full[a][b][cc][d];
                                }
                            }
                        }
                    }
                    rot[i][j][k][l] = acc;
                }
            }
        }
    }
    let pairs = [(0usize, 0usize), (1, 1), (0, 1)];
    let mut entries = [0.0f64; 9];
    for (r, &(i, j)) in pairs.iter().enumerate() {
        for (s, &(k, l)) in pairs.iter().enumerate() {
            entries[r * 3 + s] = rot[i][j][k][l] * weight(i, j) * weight(k, l);
        }
    }
    MandelMatrix::new(3, &entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const GPA: f64 = 1e9;
    const MPA: f64 = 1e6;

    #[test]
    fn plane_strain_matches_closed_form_lame() {
        let p = IsotropicPhase::new(GPA, 0.3).unwrap();
        let c = plane_strain_stiffness(&p);
        assert!((c.get(0, 0) - 1.346154 * GPA).abs() < 1e3);
        assert!((c.get(0, 1) - 0.576923 * GPA).abs() < 1e3);
        assert!((c.get(2, 2) - 0.769231 * GPA).abs() < 1e3);
        assert_eq!(c.get(0, 2), 0.0);
        assert!(c.is_spd(1e-12));
    }

    #[test]
    fn plane_strain_zero_poisson_is_identity_like() {
        let p = IsotropicPhase::new(1.0, 0.0).unwrap();
        let c = plane_strain_stiffness(&p);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((c.get(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn plane_strain_near_incompressible() {
        let p = IsotropicPhase::new(MPA, 0.49).unwrap();
        let c = plane_strain_stiffness(&p);
        assert!((c.get(0, 0) - 17.1141 * MPA).abs() / MPA < 1e-3);
        assert!((c.get(0, 1) - 16.4430 * MPA).abs() / MPA < 1e-3);
        assert!((c.get(2, 2) - 0.671141 * MPA).abs() / MPA < 1e-5);
    }

    #[test]
    fn phase_rejects_invalid_constants() {
        assert!(IsotropicPhase::new(1.0, 0.5).is_err());
        assert!(IsotropicPhase::new(1.0, 0.7).is_err());
        assert!(IsotropicPhase::new(-1.0, 0.3).is_err());
        assert!(IsotropicPhase::new(0.0, 0.3).is_err());
    }

    #[test]
    fn iso_stiffness_spectrum() {
        let c = iso_stiffness_3d(1.0, 1.0).unwrap();
        let w = c.eigenvalues();
        assert!((w[0] - 2.0).abs() < 1e-10);
        assert!((w[4] - 2.0).abs() < 1e-10);
        assert!((w[5] - 3.0).abs() < 1e-10);

        let c = iso_stiffness_3d(1.0, 0.5).unwrap();
        // 3*(I x I)/3 + P2 assembled from the projectors directly
        let expect = hydrostatic_projector_6().scale(3.0).add(&deviatoric_projector_6());
        assert!(c.sub(&expect).frobenius_norm() < 1e-14);

        let c = iso_stiffness_3d(5.0 / 3.0, 1.0).unwrap();
        assert!((c.get(0, 0) - 3.0).abs() < 1e-14);
        assert!((c.get(0, 1) - 1.0).abs() < 1e-14);
        assert!(iso_stiffness_3d(-1.0, 1.0).is_err());
        assert!(iso_stiffness_3d(1.0, 0.0).is_err());
    }

    #[test]
    fn iso_spectrum_relative_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let k = 10f64.powf(rng.gen_range(-2.0..2.0));
            let g = 10f64.powf(rng.gen_range(-2.0..2.0));
            let w = iso_stiffness_3d(k, g).unwrap().eigenvalues();
            let mut expect = vec![2.0 * g; 5];
            expect.push(3.0 * k);
            expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (a, b) in w.iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-10 * b.abs());
            }
        }
    }

    #[test]
    fn loewner_ordering() {
        let i3 = MandelMatrix::new(3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let two = i3.scale(2.0);
        assert!(loewner_leq(&i3, &two, 0.0).unwrap());
        assert!(!loewner_leq(&two, &i3, 0.0).unwrap());
        let a = MandelMatrix::new(3, &[1., 0., 0., 0., 3., 0., 0., 0., 1.]).unwrap();
        let b = two.clone();
        assert!(!loewner_leq(&a, &b, 0.0).unwrap());
        let six = MandelMatrix::zero(6);
        assert!(loewner_leq(&six, &six, 0.0).is_ok());
        assert!(loewner_leq(&i3, &six, 0.0).is_err());
    }

    #[test]
    fn mutual_loewner_implies_near_equality() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let mut e = [0.0; 9];
            for v in e.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let base = Mat::from_vec(3, 3, e.to_vec()).symmetrized();
            let a = MandelMatrix::from_mat_symmetrized(base.clone());
            let b = MandelMatrix::from_mat_symmetrized(base);
            if loewner_leq(&a, &b, 1e-9).unwrap() && loewner_leq(&b, &a, 1e-9).unwrap() {
                assert!(a.sub(&b).frobenius_norm() <= 1e-6 * a.frobenius_norm().max(1e-300));
            }
        }
    }

    #[test]
    fn rel_frobenius_cases() {
        let c = plane_strain_stiffness(&IsotropicPhase::new(2.0, 0.25).unwrap());
        assert_eq!(rel_frobenius(&c, &c).unwrap(), 0.0);
        let i3 = MandelMatrix::new(3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let z = MandelMatrix::zero(3);
        assert!((rel_frobenius(&i3, &z).unwrap() - 1.0).abs() < 1e-15);
        let a = MandelMatrix::new(3, &[3., 0., 0., 0., 4., 0., 0., 0., 0.]).unwrap();
        let b = MandelMatrix::new(3, &[3., 0., 0., 0., 0., 0., 0., 0., 0.]).unwrap();
        assert!((rel_frobenius(&a, &b).unwrap() - 0.8).abs() < 1e-15);
        assert!(rel_frobenius(&z, &i3).is_err());
    }

    #[test]
    fn isotropic_projection_identity_on_isotropic() {
        let c = iso_stiffness_3d(1.7, 0.9).unwrap();
        let (proj, k, g) = isotropic_projection_6(&c).unwrap();
        assert!((k - 1.7).abs() < 1e-13);
        assert!((g - 0.9).abs() < 1e-13);
        assert!(proj.sub(&c).frobenius_norm() < 1e-12);

        let z = MandelMatrix::zero(6);
        let (pz, kz, gz) = isotropic_projection_6(&z).unwrap();
        assert_eq!((kz, gz), (0.0, 0.0));
        assert_eq!(pz.frobenius_norm(), 0.0);
    }

    #[test]
    fn isotropic_projection_is_orthogonal_least_squares() {
        // The projection must minimize the Frobenius distance over the 2D
        // isotropic subspace: check via the normal equations on the basis
        // {hydrostatic, deviatoric} for random symmetric input.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let b1 = hydrostatic_projector_6();
        let b2 = deviatoric_projector_6();
        let dot = |a: &MandelMatrix, b: &MandelMatrix| -> f64 {
            a.entries().iter().zip(b.entries()).map(|(x, y)| x * y).sum()
        };
        for _ in 0..20 {
            let mut e = [0.0; 36];
            for v in e.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let c = MandelMatrix::from_mat_symmetrized(Mat::from_vec(6, 6, e.to_vec()));
            let (proj, _, _) = isotropic_projection_6(&c).unwrap();
            // Least squares on the orthogonal basis directly.
            let a1 = dot(&c, &b1) / dot(&b1, &b1);
            let a2 = dot(&c, &b2) / dot(&b2, &b2);
            let ls = b1.scale(a1).add(&b2.scale(a2));
            assert!(proj.sub(&ls).frobenius_norm() <= 1e-12 * c.frobenius_norm().max(1.0));
            // residual orthogonality and idempotence
            let resid = c.sub(&proj);
            assert!(dot(&resid, &b1).abs() <= 1e-10 * c.frobenius_norm());
            assert!(dot(&resid, &b2).abs() <= 1e-10 * c.frobenius_norm());
            let (proj2, _, _) = isotropic_projection_6(&proj).unwrap();
            assert!(proj2.sub(&proj).frobenius_norm() <= 1e-10 * c.frobenius_norm().max(1.0));
        }
    }

    #[test]
    fn directional_young_isotropic_and_axis() {
        let p = IsotropicPhase::new(GPA, 0.3).unwrap();
        let c = plane_strain_stiffness(&p);
        let e0 = directional_young(&c, 0.0).unwrap();
        for k in 1..16 {
            let theta = k as f64 * 0.41;
            let e = directional_young(&c, theta).unwrap();
            assert!((e - e0).abs() <= 1e-9 * e0, "isotropic E(theta) must be constant");
            let ep = directional_young(&c, theta + std::f64::consts::PI).unwrap();
            assert!((e - ep).abs() <= 1e-9 * e0, "E(theta) must be pi-periodic");
        }
        // theta = 0 equals 1/S11
        let s = c.inverse().unwrap();
        assert!((e0 - 1.0 / s.get(0, 0)).abs() <= 1e-6);
    }

    #[test]
    fn rotation_preserves_isotropy_and_swaps_axes() {
        let p = IsotropicPhase::new(2.0, 0.2).unwrap();
        let c = plane_strain_stiffness(&p);
        let r = rotate_plane(&c, 0.7).unwrap();
        assert!(r.sub(&c).frobenius_norm() < 1e-12 * c.frobenius_norm());

        let aniso = MandelMatrix::new(3, &[4., 1., 0., 1., 2., 0., 0., 0., 1.]).unwrap();
        let quarter = rotate_plane(&aniso, std::f64::consts::FRAC_PI_2).unwrap();
        assert!((quarter.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((quarter.get(1, 1) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn constructor_enforces_symmetry() {
        let bad = [1.0, 0.5, 0.0, 0.4, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert!(MandelMatrix::new(3, &bad).is_err());
        assert!(MandelMatrix::new(4, &[0.0; 16]).is_err());
    }

    #[test]
    fn json_array_round_trip_is_exact() {
        let p = IsotropicPhase::new(GPA, 0.3).unwrap();
        let c = plane_strain_stiffness(&p);
        let text = c.to_json_array();
        let back = MandelMatrix::from_json_array(&text).unwrap();
        assert_eq!(c.entries(), back.entries());
        assert_eq!(text, back.to_json_array());
    }
}
