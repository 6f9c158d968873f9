//! First-order bounds (Voigt, Reuss, Hill) and classical mean-field
//! estimates (Mori-Tanaka, Hashin-Shtrikman) for biphasic composites.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::mandel::{iso_stiffness_3d, isotropic_projection_6, loewner_leq, MandelMatrix};

/// Two SPD phase stiffness matrices of equal dimension plus volume fractions.
#[derive(Debug, Clone)]
pub struct PhasePair {
    c0: MandelMatrix,
    c1: MandelMatrix,
    vol0: f64,
}

impl PhasePair {
    pub fn new(c0: MandelMatrix, c1: MandelMatrix, vol0: f64) -> Result<Self> {
        if c0.dim() != c1.dim() {
            return Err(Error::DimMismatch(format!("{} vs {}", c0.dim(), c1.dim())));
        }
        if !(0.0..=1.0).contains(&vol0) {
            return Err(Error::InvalidArgument(format!("volume fraction {vol0} outside [0,1]")));
        }
        if c0.min_eigenvalue() <= 0.0 || c1.min_eigenvalue() <= 0.0 {
            return Err(Error::InvalidArgument("phase stiffness must be SPD".into()));
        }
        Ok(PhasePair { c0, c1, vol0 })
    }

    pub fn phase0(&self) -> &MandelMatrix {
        &self.c0
    }

    pub fn phase1(&self) -> &MandelMatrix {
        &self.c1
    }

    pub fn vol0(&self) -> f64 {
        self.vol0
    }

    pub fn vol1(&self) -> f64 {
        1.0 - self.vol0
    }

    pub fn dim(&self) -> usize {
        self.c0.dim()
    }

    pub fn with_vol0(&self, vol0: f64) -> Result<Self> {
        PhasePair::new(self.c0.clone(), self.c1.clone(), vol0)
    }
}

/// Voigt bound: volume-weighted arithmetic mean of the phase stiffnesses.
pub fn voigt_bound(p: &PhasePair) -> MandelMatrix {
    p.phase0().scale(p.vol0()).add(&p.phase1().scale(p.vol1()))
}

/// Reuss bound: inverse of the volume-weighted mean compliance.
pub fn reuss_bound(p: &PhasePair) -> Result<MandelMatrix> {
    let s = p
        .phase0()
        .inverse()?
        .scale(p.vol0())
        .add(&p.phase1().inverse()?.scale(p.vol1()));
    s.inverse()
}

/// Hill average (V + R)/2.
pub fn hill_average(p: &PhasePair) -> Result<MandelMatrix> {
    Ok(voigt_bound(p).add(&reuss_bound(p)?).scale(0.5))
}

/// 2D hydrostatic projector in the Mandel basis.
fn hydro_projector_2d() -> Mat {
    Mat::from_rows(&[&[0.5, 0.5, 0.0], &[0.5, 0.5, 0.0], &[0.0, 0.0, 0.0]])
}

/// Plane-strain Eshelby tensor of a circular inclusion in an isotropic host
/// with Poisson ratio nu, as a 3x3 Mandel matrix.
fn eshelby_circular_2d(nu: f64) -> Mat {
    let s_h = 1.0 / (2.0 * (1.0 - nu));
    let s_d = (3.0 - 4.0 * nu) / (4.0 * (1.0 - nu));
    let j = hydro_projector_2d();
    let k = Mat::identity(3).sub(&j);
    j.scale(s_h).add(&k.scale(s_d))
}

/// Extracts (2D bulk, shear) from an isotropic plane-strain Mandel matrix.
fn iso_moduli_2d(c: &MandelMatrix) -> Result<(f64, f64)> {
    let tol = 1e-9 * c.frobenius_norm();
    let looks_iso = (c.get(0, 0) - c.get(1, 1)).abs() <= tol
        && c.get(0, 2).abs() <= tol
        && c.get(1, 2).abs() <= tol
        && (c.get(0, 0) - c.get(0, 1) - c.get(2, 2)).abs() <= tol;
    if !looks_iso {
        return Err(Error::InvalidArgument("phase is not isotropic in plane strain".into()));
    }
    Ok(((c.get(0, 0) + c.get(0, 1)) / 2.0, c.get(2, 2) / 2.0))
}

/// Extracts (3D bulk, shear) from an isotropic 6x6 Mandel matrix.
fn iso_moduli_3d(c: &MandelMatrix) -> Result<(f64, f64)> {
    let (proj, k, g) = isotropic_projection_6(c)?;
    if proj.sub(c).frobenius_norm() > 1e-9 * c.frobenius_norm() {
        return Err(Error::InvalidArgument("phase is not isotropic".into()));
    }
    Ok((k, g))
}

/// Builds an isotropic plane-strain Mandel matrix from (2D bulk, shear).
fn stiffness_from_2d_moduli(k: f64, mu: f64) -> MandelMatrix {
    MandelMatrix::new(3, &[k + mu, k - mu, 0.0, k - mu, k + mu, 0.0, 0.0, 0.0, 2.0 * mu])
        .expect("isotropic 2D stiffness is symmetric")
}

/// Mori-Tanaka estimate for circular inclusions in plane strain; phase 0 is
/// the host matrix, phase 1 the inclusion.
pub fn mori_tanaka_circular(p: &PhasePair) -> Result<MandelMatrix> {
    if p.dim() != 3 {
        return Err(Error::DimMismatch("Mori-Tanaka estimate implemented for plane strain".into()));
    }
    let (k0, mu0) = iso_moduli_2d(p.phase0())?;
    // host Poisson ratio from plane-strain moduli: k = lambda + mu.
    let lambda0 = k0 - mu0;
    let nu0 = lambda0 / (2.0 * (lambda0 + mu0));
    let s = eshelby_circular_2d(nu0);

    let c0 = p.phase0().as_mat();
    let c1 = p.phase1().as_mat();
    let dc = c1.sub(c0);
    // dilute strain concentration A = [I + S C0^-1 (C1 - C0)]^-1
    let a = Mat::identity(3)
        .add(&s.matmul(&c0.inverse()?).matmul(&dc))
        .inverse()?;
    let c_frac0 = p.vol0();
    let c_frac1 = p.vol1();
    // C_MT = C0 + c1 (C1 - C0) A [c0 I + c1 A]^-1
    let mix = Mat::identity(3).scale(c_frac0).add(&a.scale(c_frac1)).inverse()?;
    let est = c0.add(&dc.matmul(&a).matmul(&mix).scale(c_frac1));
    if est.asymmetry() > 1e-9 {
        return Err(Error::Numerical(format!(
            "Mori-Tanaka estimate asymmetry {:.3e}",
            est.asymmetry()
        )));
    }
    Ok(MandelMatrix::from_mat_symmetrized(est))
}

fn hs_candidate(m_ref: f64, m_other: f64, c_ref: f64, c_other: f64, denom_ref: f64) -> f64 {
    let dm = m_other - m_ref;
    if dm == 0.0 {
        return m_ref;
    }
    m_ref + c_other / (1.0 / dm + c_ref * denom_ref)
}

/// Hashin-Shtrikman bounds for an isotropic two-phase composite, returned as
/// (lower, upper) isotropic stiffness matrices in the pair's dimension.
///
/// With `well_ordered` the input must have both moduli ordered the same way
/// (the classical assumption); otherwise the candidate estimates from either
/// reference phase are bracketed by min/max per modulus.
pub fn hashin_shtrikman_scalar(
    p: &PhasePair,
    well_ordered: bool,
) -> Result<(MandelMatrix, MandelMatrix)> {
    let (moduli, build): ([(f64, f64); 2], fn(f64, f64) -> MandelMatrix) = match p.dim() {
        3 => (
            [iso_moduli_2d(p.phase0())?, iso_moduli_2d(p.phase1())?],
            stiffness_from_2d_moduli,
        ),
        6 => (
            [iso_moduli_3d(p.phase0())?, iso_moduli_3d(p.phase1())?],
            |k, g| iso_stiffness_3d(k, g).expect("HS moduli stay positive"),
        ),
        d => return Err(Error::DimMismatch(format!("unsupported dimension {d}"))),
    };
    let [(k0, g0), (k1, g1)] = moduli;
    if well_ordered {
        let ordered = (k0 - k1) * (g0 - g1) >= 0.0;
        if !ordered {
            return Err(Error::InvalidArgument(
                "phases are not well ordered (bulk and shear contrasts disagree)".into(),
            ));
        }
    }
    let vols = [p.vol0(), p.vol1()];
    let mut k_cands = [0.0; 2];
    let mut g_cands = [0.0; 2];
    for r in 0..2 {
        let o = 1 - r;
        let (kr, gr) = moduli[r];
        let (ko, go) = moduli[o];
        let (cr, co) = (vols[r], vols[o]);
        if p.dim() == 3 {
            k_cands[r] = hs_candidate(kr, ko, cr, co, 1.0 / (kr + gr));
            g_cands[r] =
                hs_candidate(gr, go, cr, co, (kr + 2.0 * gr) / (2.0 * gr * (kr + gr)));
        } else {
            k_cands[r] = hs_candidate(kr, ko, cr, co, 3.0 / (3.0 * kr + 4.0 * gr));
            g_cands[r] = hs_candidate(
                gr,
                go,
                cr,
                co,
                6.0 * (kr + 2.0 * gr) / (5.0 * gr * (3.0 * kr + 4.0 * gr)),
            );
        }
    }
    let lo = build(k_cands[0].min(k_cands[1]), g_cands[0].min(g_cands[1]));
    let hi = build(k_cands[0].max(k_cands[1]), g_cands[0].max(g_cands[1]));
    Ok((lo, hi))
}

/// True when `c` lies between the pair's Reuss and Voigt bounds at `tol`.
pub fn inside_envelope(c: &MandelMatrix, p: &PhasePair, tol: f64) -> Result<bool> {
    let v = voigt_bound(p);
    let r = reuss_bound(p)?;
    Ok(loewner_leq(&r, c, tol)? && loewner_leq(c, &v, tol)?)
}
