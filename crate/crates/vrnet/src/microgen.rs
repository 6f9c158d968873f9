//! Parametric periodic microstructures from thresholded cosine fields.
//!
//! A unit cell is fully determined by an amplitude matrix A (odd mode counts
//! per direction), a threshold tau and, for the differentiable soft render,
//! a temperature. Hard thresholding produces the binary two-phase images the
//! homogenization oracle consumes; soft thresholding is the smooth relaxation
//! the network and the inverse designer differentiate through.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Hyper mode-set size every amplitude grid is padded into.
pub const PAD_SIZE: usize = 11;

/// Production temperature approximating a hard threshold.
pub const T_PRODUCTION: f64 = 1e-4;

/// Temperature used for finite-difference gradient checks; at the production
/// temperature the sigmoid saturates and finite differences degenerate.
pub const T_GRAD_CHECK: f64 = 1e-2;

pub const ALLOWED_MODES: [usize; 5] = [3, 5, 7, 9, 11];

/// Amplitude matrix with signed mode indices p in [-(M1-1)/2, (M1-1)/2],
/// q likewise; entry (p, q) multiplies cos(2 pi (p x1 + q x2)).
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeGrid {
    m1: usize,
    m2: usize,
    /// row-major over (p, q) with p the slow index, offset by half the span
    data: Vec<f64>,
}

impl AmplitudeGrid {
    pub fn new(m1: usize, m2: usize, data: Vec<f64>) -> Result<Self> {
        if m1 % 2 == 0 || m2 % 2 == 0 {
            return Err(Error::InvalidArgument(format!("mode counts must be odd, got {m1}x{m2}")));
        }
        if data.len() != m1 * m2 {
            return Err(Error::DimMismatch(format!(
                "expected {} amplitudes, got {}",
                m1 * m2,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite amplitude".into()));
        }
        Ok(AmplitudeGrid { m1, m2, data })
    }

    pub fn zeros(m1: usize, m2: usize) -> Result<Self> {
        AmplitudeGrid::new(m1, m2, vec![0.0; m1 * m2])
    }

    /// i.i.d. U[-1, 1] entries.
    pub fn sample(rng: &mut impl Rng, m1: usize, m2: usize) -> Result<Self> {
        let data = (0..m1 * m2).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        AmplitudeGrid::new(m1, m2, data)
    }

    pub fn modes(&self) -> (usize, usize) {
        (self.m1, self.m2)
    }

    pub fn half_span(&self) -> (i64, i64) {
        ((self.m1 as i64 - 1) / 2, (self.m2 as i64 - 1) / 2)
    }

    /// Access by signed mode index.
    pub fn get(&self, p: i64, q: i64) -> f64 {
        let (h1, h2) = self.half_span();
        assert!(p.abs() <= h1 && q.abs() <= h2, "mode index out of range");
        self.data[((p + h1) as usize) * self.m2 + (q + h2) as usize]
    }

    pub fn set(&mut self, p: i64, q: i64, v: f64) {
        let (h1, h2) = self.half_span();
        assert!(p.abs() <= h1 && q.abs() <= h2, "mode index out of range");
        self.data[((p + h1) as usize) * self.m2 + (q + h2) as usize] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Symmetry classes imposable through algebraic constraints on A.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymmetryClass {
    None,
    Diagonal,
    Orthotropic,
    Square,
}

impl std::str::FromStr for SymmetryClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SymmetryClass::None),
            "diagonal" => Ok(SymmetryClass::Diagonal),
            "orthotropic" => Ok(SymmetryClass::Orthotropic),
            "square" => Ok(SymmetryClass::Square),
            other => Err(Error::InvalidArgument(format!("unknown symmetry class '{other}'"))),
        }
    }
}

/// Projects onto the requested symmetry class by group-orbit averaging.
pub fn symmetrize(a: &AmplitudeGrid, class: SymmetryClass) -> Result<AmplitudeGrid> {
    let (m1, m2) = a.modes();
    let needs_square = matches!(class, SymmetryClass::Diagonal | SymmetryClass::Square);
    if needs_square && m1 != m2 {
        return Err(Error::InvalidArgument(format!(
            "{class:?} symmetry needs a square grid, got {m1}x{m2}"
        )));
    }
    let orbit: &[fn(i64, i64) -> (i64, i64)] = match class {
        SymmetryClass::None => &[|p, q| (p, q)],
        SymmetryClass::Diagonal => &[|p, q| (p, q), |p, q| (q, p)],
        SymmetryClass::Orthotropic => {
            &[|p, q| (p, q), |p, q| (-p, q), |p, q| (p, -q), |p, q| (-p, -q)]
        }
        SymmetryClass::Square => &[
            |p, q| (p, q),
            |p, q| (-p, q),
            |p, q| (p, -q),
            |p, q| (-p, -q),
            |p, q| (q, p),
            |p, q| (-q, p),
            |p, q| (q, -p),
            |p, q| (-q, -p),
        ],
    };
    let (h1, h2) = a.half_span();
    let mut out = AmplitudeGrid::zeros(m1, m2)?;
    for p in -h1..=h1 {
        for q in -h2..=h2 {
            let mean = orbit
                .iter()
                .map(|g| {
                    let (gp, gq) = g(p, q);
                    a.get(gp, gq)
                })
                .sum::<f64>()
                / orbit.len() as f64;
            out.set(p, q, mean);
        }
    }
    Ok(out)
}

/// Centered zero-padding into a k x k grid with offsets ((k-m1)/2, (k-m2)/2).
pub fn embed_center(a: &AmplitudeGrid, k: usize) -> Result<AmplitudeGrid> {
    let (m1, m2) = a.modes();
    if k % 2 == 0 || k < m1.max(m2) {
        return Err(Error::InvalidArgument(format!("pad size {k} must be odd and >= {m1}x{m2}")));
    }
    let mut out = AmplitudeGrid::zeros(k, k)?;
    let (h1, h2) = a.half_span();
    for p in -h1..=h1 {
        for q in -h2..=h2 {
            out.set(p, q, a.get(p, q));
        }
    }
    Ok(out)
}

/// One unit-cell specification: a center-padded amplitude matrix, a threshold
/// and the soft-render temperature.
#[derive(Debug, Clone)]
pub struct MicroSpec {
    padded: AmplitudeGrid,
    tau: f64,
    temperature: f64,
}

impl MicroSpec {
    pub fn new(grid: &AmplitudeGrid, tau: f64, temperature: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!("tau {tau} outside [0,1]")));
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {temperature} must be > 0")));
        }
        let padded = embed_center(grid, PAD_SIZE)?;
        Ok(MicroSpec { padded, tau, temperature })
    }

    pub fn padded(&self) -> &AmplitudeGrid {
        &self.padded
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!("tau {tau} outside [0,1]")));
        }
        Ok(MicroSpec { padded: self.padded.clone(), tau, temperature: self.temperature })
    }

    /// Continuous field value at (x1, x2); periodic with unit period.
    pub fn field_value(&self, x1: f64, x2: f64) -> f64 {
        let (h1, h2) = self.padded.half_span();
        let mut acc = 0.0;
        for p in -h1..=h1 {
            for q in -h2..=h2 {
                let a = self.padded.get(p, q);
                if a != 0.0 {
                    acc +=
                        a * (2.0 * std::f64::consts::PI * (p as f64 * x1 + q as f64 * x2)).cos();
                }
            }
        }
        acc
    }
}

/// Scalar field sampled on the cell-centered pixel lattice of [-1/2, 1/2)^2.
#[derive(Debug, Clone)]
pub struct RasterField {
    width: usize,
    height: usize,
    /// row-major, row index along x2, column index along x1
    values: Vec<f64>,
}

impl RasterField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Cell-centered pixel coordinate i -> (i + 0.5)/n - 0.5.
pub fn pixel_coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 - 0.5
}

/// Cosine tables for one axis: cos/sin of 2 pi p x_i for every retained mode
/// p and pixel. Shared with the autodiff renderer op.
pub(crate) fn mode_tables(half: i64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let modes = (2 * half + 1) as usize;
    let mut cos_t = vec![0.0; modes * n];
    let mut sin_t = vec![0.0; modes * n];
    for (mi, p) in (-half..=half).enumerate() {
        for i in 0..n {
            let arg = 2.0 * std::f64::consts::PI * p as f64 * pixel_coord(i, n);
            cos_t[mi * n + i] = arg.cos();
            sin_t[mi * n + i] = arg.sin();
        }
    }
    (cos_t, sin_t)
}

/// Renders the cosine field on a width x height raster.
///
/// Uses the separable split cos(a+b) = cos a cos b - sin a sin b so the cost
/// is O(K^2 h + K w h) instead of O(K^2 w h).
pub fn field(spec: &MicroSpec, width: usize, height: usize) -> Result<RasterField> {
    if width < 2 || height < 2 {
        return Err(Error::InvalidArgument(format!("raster {width}x{height} too small")));
    }
    let (h1, h2) = spec.padded.half_span();
    let modes1 = (2 * h1 + 1) as usize;
    let modes2 = (2 * h2 + 1) as usize;
    let (c1, s1) = mode_tables(h1, width);
    let (c2, s2) = mode_tables(h2, height);
    // u[p][row] = sum_q A_pq cos(2 pi q x2), w likewise with sin
    let mut u = vec![0.0; modes1 * height];
    let mut w = vec![0.0; modes1 * height];
    for mp in 0..modes1 {
        for mq in 0..modes2 {
            let a = spec.padded.data()[mp * modes2 + mq];
            if a == 0.0 {
                continue;
            }
            let c2row = &c2[mq * height..(mq + 1) * height];
            let s2row = &s2[mq * height..(mq + 1) * height];
            let urow = &mut u[mp * height..(mp + 1) * height];
            for (uv, cv) in urow.iter_mut().zip(c2row) {
                *uv += a * cv;
            }
            let wrow = &mut w[mp * height..(mp + 1) * height];
            for (wv, sv) in wrow.iter_mut().zip(s2row) {
                *wv += a * sv;
            }
        }
    }
    let mut values = vec![0.0; width * height];
    for row in 0..height {
        let out = &mut values[row * width..(row + 1) * width];
        for mp in 0..modes1 {
            let (uv, wv) = (u[mp * height + row], w[mp * height + row]);
            let c1row = &c1[mp * width..(mp + 1) * width];
            let s1row = &s1[mp * width..(mp + 1) * width];
            for ((o, c), s) in out.iter_mut().zip(c1row).zip(s1row) {
                *o += uv * c - wv * s;
            }
        }
    }
    Ok(RasterField { width, height, values })
}

/// Affine rescaling to [0,1] by the raster extrema; fields with no spread
/// map to the constant 0.5.
pub fn range_normalize(f: &RasterField) -> RasterField {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in &f.values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let degenerate = !(span > f64::EPSILON * hi.abs().max(lo.abs()).max(1.0));
    let values = if degenerate {
        vec![0.5; f.values.len()]
    } else {
        f.values.iter().map(|v| (v - lo) / span).collect()
    };
    RasterField { width: f.width, height: f.height, values }
}

/// Two-phase image: the indicator of phase 1 (1 on phase 1, 0 on phase 0 in
/// hard mode; smooth values in (0,1) in soft mode) plus volume fractions.
#[derive(Debug, Clone)]
pub struct MicroImage {
    width: usize,
    height: usize,
    values: Vec<f64>,
    c1: f64,
}

impl MicroImage {
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimMismatch(format!(
                "{}x{} image needs {} values, got {}",
                width,
                height,
                width * height,
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("indicator values outside [0,1]".into()));
        }
        let c1 = values.iter().sum::<f64>() / values.len() as f64;
        Ok(MicroImage { width, height, values, c1 })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Volume fraction of phase 0 (indicator = 0).
    pub fn c0(&self) -> f64 {
        1.0 - self.c1
    }

    /// Volume fraction of phase 1 (indicator = 1).
    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

fn check_normalized(f: &RasterField) -> Result<()> {
    let ok = f.values.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v));
    if !ok {
        return Err(Error::InvalidArgument("field is not range-normalized".into()));
    }
    Ok(())
}

/// Hard threshold: phase 1 where the normalized field is >= tau.
pub fn threshold_hard(f: &RasterField, tau: f64) -> Result<MicroImage> {
    check_normalized(f)?;
    let values: Vec<f64> = f.values.iter().map(|&v| if v >= tau { 1.0 } else { 0.0 }).collect();
    MicroImage::from_values(f.width, f.height, values)
}

/// Soft threshold: sigmoid((field - tau)/T), smooth in both amplitudes and
/// threshold; converges pointwise to the hard threshold off the level set.
pub fn threshold_soft(f: &RasterField, tau: f64, temperature: f64) -> Result<MicroImage> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be > 0")));
    }
    check_normalized(f)?;
    let values: Vec<f64> =
        f.values.iter().map(|&v| 1.0 / (1.0 + (-(v - tau) / temperature).exp())).collect();
    MicroImage::from_values(f.width, f.height, values)
}

/// Equi-spaced thresholds k/(n+1), k = 1..n, strictly inside (0,1).
pub fn equispaced_taus(n: usize) -> Vec<f64> {
    (1..=n).map(|k| k as f64 / (n + 1) as f64).collect()
}

/// Samples one amplitude matrix (entries U[-1,1]) and pairs it with `tau_count`
/// equi-spaced thresholds. Deterministic in the seed.
pub fn sample_specs(seed: u64, modes: (usize, usize), tau_count: usize) -> Result<Vec<MicroSpec>> {
    let (m1, m2) = modes;
    if !ALLOWED_MODES.contains(&m1) || !ALLOWED_MODES.contains(&m2) {
        return Err(Error::InvalidArgument(format!(
            "mode counts must be one of {ALLOWED_MODES:?}, got {m1}x{m2}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = AmplitudeGrid::sample(&mut rng, m1, m2)?;
    equispaced_taus(tau_count)
        .into_iter()
        .map(|tau| MicroSpec::new(&grid, tau, T_PRODUCTION))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_mode(p: i64, q: i64, amp: f64) -> AmplitudeGrid {
        let mut a = AmplitudeGrid::zeros(5, 5).unwrap();
        a.set(p, q, amp);
        a
    }

    #[test]
    fn embed_offsets() {
        let a = AmplitudeGrid::new(3, 3, vec![1.0; 9]).unwrap();
        let padded = embed_center(&a, 11).unwrap();
        for p in -5i64..=5 {
            for q in -5i64..=5 {
                let inside = p.abs() <= 1 && q.abs() <= 1;
                assert_eq!(padded.get(p, q), if inside { 1.0 } else { 0.0 });
            }
        }
        // identity when already at the pad size
        let full = AmplitudeGrid::new(11, 11, (0..121).map(|i| i as f64).collect()).unwrap();
        assert_eq!(embed_center(&full, 11).unwrap(), full);
        // offsets (2,1) for 3x5 into 7 (0-based row/col of the top-left entry)
        let a = AmplitudeGrid::new(3, 5, (1..=15).map(f64::from).collect()).unwrap();
        let padded = embed_center(&a, 7).unwrap();
        assert_eq!(padded.data()[2 * 7 + 1], a.data()[0]);
        assert!(embed_center(&a, 3).is_err());
    }

    #[test]
    fn field_single_mode_is_stripes() {
        let spec = MicroSpec::new(&single_mode(1, 0, 1.0), 0.5, T_PRODUCTION).unwrap();
        let f = field(&spec, 64, 32).unwrap();
        for row in 0..32 {
            for col in 0..64 {
                let x1 = pixel_coord(col, 64);
                let expect = (2.0 * std::f64::consts::PI * x1).cos();
                assert!((f.get(row, col) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn field_trivial_cases() {
        let zero = MicroSpec::new(&AmplitudeGrid::zeros(3, 3).unwrap(), 0.5, 1e-4).unwrap();
        let f = field(&zero, 16, 16).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.0));

        let dc = MicroSpec::new(&single_mode(0, 0, 1.0), 0.5, 1e-4).unwrap();
        let f = field(&dc, 16, 16).unwrap();
        assert!(f.values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn field_matches_direct_sum_and_is_periodic() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let grid = AmplitudeGrid::sample(&mut rng, 5, 5).unwrap();
        let spec = MicroSpec::new(&grid, 0.5, 1e-4).unwrap();
        let f = field(&spec, 20, 14).unwrap();
        for row in (0..14).step_by(3) {
            for col in (0..20).step_by(3) {
                let x1 = pixel_coord(col, 20);
                let x2 = pixel_coord(row, 14);
                assert!((f.get(row, col) - spec.field_value(x1, x2)).abs() < 1e-12);
                assert!(
                    (spec.field_value(x1 + 1.0, x2) - spec.field_value(x1, x2)).abs() < 1e-10
                );
                assert!(
                    (spec.field_value(x1, x2 + 1.0) - spec.field_value(x1, x2)).abs() < 1e-10
                );
            }
        }
    }

    #[test]
    fn range_normalize_cases() {
        let spec = MicroSpec::new(&single_mode(1, 0, 1.0), 0.5, 1e-4).unwrap();
        let f = field(&spec, 101, 3).unwrap();
        let n = range_normalize(&f);
        // extrema map exactly to 0 and 1
        let lo = n.values().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = n.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
        // close to the analytic (cos+1)/2 up to raster extrema resolution
        for col in 0..101 {
            let x1 = pixel_coord(col, 101);
            let analytic = ((2.0 * std::f64::consts::PI * x1).cos() + 1.0) / 2.0;
            assert!((n.get(1, col) - analytic).abs() < 1e-3);
        }

        // affine invariance
        let shifted = RasterField {
            width: f.width,
            height: f.height,
            values: f.values().iter().map(|v| 3.0 * v + 7.0).collect(),
        };
        let n2 = range_normalize(&shifted);
        for (a, b) in n.values().iter().zip(n2.values()) {
            assert!((a - b).abs() < 1e-12);
        }

        // constant field maps to 0.5
        let dc = MicroSpec::new(&single_mode(0, 0, 4.0), 0.5, 1e-4).unwrap();
        let f = range_normalize(&field(&dc, 8, 8).unwrap());
        assert!(f.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn hard_threshold_endpoints_and_level() {
        let spec = MicroSpec::new(&single_mode(1, 0, 1.0), 0.5, 1e-4).unwrap();
        let f = range_normalize(&field(&spec, 100, 100).unwrap());
        let all = threshold_hard(&f, 0.0).unwrap();
        assert_eq!(all.c1(), 1.0);
        assert!(all.is_binary());
        let none = threshold_hard(&f, 1.0 + 1e-9).unwrap();
        assert_eq!(none.c1(), 0.0);
        // cosine level set at tau = 0.5 covers half the cell +- one column
        let half = threshold_hard(&f, 0.5).unwrap();
        assert!((half.c1() - 0.5).abs() <= 1.0 / 100.0 + 1e-12);
    }

    #[test]
    fn hard_threshold_monotone_in_tau() {
        for seed in 0..10u64 {
            let specs = sample_specs(seed, (5, 5), 1).unwrap();
            let f = range_normalize(&field(&specs[0], 64, 64).unwrap());
            let mut last = f64::INFINITY;
            for tau in equispaced_taus(100) {
                let c1 = threshold_hard(&f, tau).unwrap().c1();
                assert!(c1 <= last + 1e-15, "c1 must be non-increasing in tau");
                last = c1;
            }
        }
    }

    #[test]
    fn soft_threshold_properties() {
        let spec = MicroSpec::new(&single_mode(1, 0, 1.0), 0.5, 1e-4).unwrap();
        let f = range_normalize(&field(&spec, 100, 100).unwrap());
        let tau = 0.37;
        let soft = threshold_soft(&f, tau, T_PRODUCTION).unwrap();
        let hard = threshold_hard(&f, tau).unwrap();
        // saturation: far from the level set the soft value collapses
        for (idx, &v) in f.values().iter().enumerate() {
            if (v - tau).abs() >= 0.01 {
                assert!((soft.values()[idx] - hard.values()[idx]).abs() <= 1e-40);
            }
        }
        let mean_diff: f64 = soft
            .values()
            .iter()
            .zip(hard.values())
            .map(|(s, h)| (s - h).abs())
            .sum::<f64>()
            / (100.0 * 100.0);
        assert!(mean_diff <= 1e-3, "soft/hard mismatch {mean_diff}");

        // sigmoid midpoint where the field hits tau exactly
        let flat = RasterField { width: 2, height: 2, values: vec![tau, 0.0, 1.0, tau] };
        let s = threshold_soft(&flat, tau, 0.01).unwrap();
        assert_eq!(s.values()[0], 0.5);
        assert_eq!(s.values()[3], 0.5);

        assert!(threshold_soft(&f, tau, 0.0).is_err());
    }

    #[test]
    fn soft_threshold_derivative_wrt_tau() {
        // d mean(chi)/d tau from the sigmoid derivative vs central differences
        let spec = MicroSpec::new(&single_mode(1, 1, 0.8), 0.5, 1e-2).unwrap();
        let f = range_normalize(&field(&spec, 64, 64).unwrap());
        let t = T_GRAD_CHECK;
        let tau = 0.45;
        let n = f.values().len() as f64;
        let analytic: f64 = f
            .values()
            .iter()
            .map(|&v| {
                let s = 1.0 / (1.0 + (-(v - tau) / t).exp());
                -s * (1.0 - s) / t
            })
            .sum::<f64>()
            / n;
        assert!(analytic < 0.0);
        let h = 1e-6;
        let up = threshold_soft(&f, tau + h, t).unwrap().c1();
        let dn = threshold_soft(&f, tau - h, t).unwrap().c1();
        let fd = (up - dn) / (2.0 * h);
        assert!((analytic - fd).abs() <= 1e-4 * fd.abs(), "analytic {analytic} vs fd {fd}");
    }

    #[test]
    fn symmetrize_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let a = AmplitudeGrid::sample(&mut rng, 5, 5).unwrap();

        assert_eq!(symmetrize(&a, SymmetryClass::None).unwrap(), a);

        let d = symmetrize(&a, SymmetryClass::Diagonal).unwrap();
        assert_eq!(symmetrize(&d, SymmetryClass::Diagonal).unwrap(), d);
        for p in -2i64..=2 {
            for q in -2i64..=2 {
                assert!((d.get(p, q) - d.get(q, p)).abs() < 1e-15);
            }
        }

        let o = symmetrize(&a, SymmetryClass::Orthotropic).unwrap();
        for p in -2i64..=2 {
            for q in -2i64..=2 {
                assert!((o.get(p, q) - o.get(-p, q)).abs() < 1e-15);
                assert!((o.get(p, q) - o.get(p, -q)).abs() < 1e-15);
            }
        }

        let s = symmetrize(&a, SymmetryClass::Square).unwrap();
        for p in -2i64..=2 {
            for q in -2i64..=2 {
                assert!((s.get(p, q) - s.get(q, p)).abs() < 1e-15);
                assert!((s.get(p, q) - s.get(-p, q)).abs() < 1e-15);
                assert!((s.get(p, q) - s.get(p, -q)).abs() < 1e-15);
            }
        }

        let rect = AmplitudeGrid::sample(&mut rng, 3, 5).unwrap();
        assert!(symmetrize(&rect, SymmetryClass::Diagonal).is_err());
        assert!(symmetrize(&rect, SymmetryClass::Orthotropic).is_ok());
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let a = sample_specs(123, (3, 3), 25).unwrap();
        let b = sample_specs(123, (3, 3), 25).unwrap();
        assert_eq!(a.len(), 25);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.padded().data(), y.padded().data());
            assert_eq!(x.tau(), y.tau());
        }
        assert!(a[0].padded().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        for (k, spec) in a.iter().enumerate() {
            assert!((spec.tau() - (k + 1) as f64 / 26.0).abs() < 1e-15);
        }
        assert!(sample_specs(1, (4, 3), 5).is_err());
    }
}
