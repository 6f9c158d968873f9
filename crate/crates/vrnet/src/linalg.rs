//! Small dense matrix kernels: the handful of operations the tensor algebra
//! needs at sizes m <= 11, with a deterministic cyclic-Jacobi eigensolver.
//!
//! Everything here is plain `f64` on row-major storage. Reproducibility across
//! platforms matters more than speed at these sizes, which is why the
//! eigensolver is hand-rolled rather than delegated to LAPACK-style code.

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Mat::zeros(n, n);
        for (i, &v) in entries.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len());
        let mut y = vec![0.0; self.rows];
        for i in 0..self.rows {
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += self[(i, j)] * x[j];
            }
            y[i] = acc;
        }
        y
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> Mat {
        let data = self.data.iter().map(|a| a * s).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    /// (A + A^T)/2 for square matrices.
    pub fn symmetrized(&self) -> Mat {
        assert_eq!(self.rows, self.cols);
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    /// Relative asymmetry ||A - A^T||_F / ||A||_F (0 for the zero matrix).
    pub fn asymmetry(&self) -> f64 {
        let norm = self.frobenius_norm();
        if norm == 0.0 {
            return 0.0;
        }
        self.sub(&self.transpose()).frobenius_norm() / norm
    }

    /// Determinant by LU elimination with partial pivoting.
    pub fn det(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut a = self.clone();
        let mut det = 1.0;
        for col in 0..n {
            let mut pivot = col;
            let mut best = a[(col, col)].abs();
            for r in (col + 1)..n {
                if a[(r, col)].abs() > best {
                    best = a[(r, col)].abs();
                    pivot = r;
                }
            }
            if best == 0.0 {
                return 0.0;
            }
            if pivot != col {
                for j in 0..n {
                    a.data.swap(col * n + j, pivot * n + j);
                }
                det = -det;
            }
            det *= a[(col, col)];
            for r in (col + 1)..n {
                let f = a[(r, col)] / a[(col, col)];
                for j in col..n {
                    a[(r, j)] -= f * a[(col, j)];
                }
            }
        }
        det
    }

    /// Inverse by Gauss-Jordan elimination with partial pivoting.
    pub fn inverse(&self) -> Result<Mat> {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut a = self.clone();
        let mut inv = Mat::identity(n);
        for col in 0..n {
            let mut pivot = col;
            let mut best = a[(col, col)].abs();
            for r in (col + 1)..n {
                let v = a[(r, col)].abs();
                if v > best {
                    best = v;
                    pivot = r;
                }
            }
            if best == 0.0 {
                return Err(Error::Singular(format!("pivot {col} is exactly zero")));
            }
            if pivot != col {
                for j in 0..n {
                    a.data.swap(col * n + j, pivot * n + j);
                    inv.data.swap(col * n + j, pivot * n + j);
                }
            }
            let d = a[(col, col)];
            for j in 0..n {
                a[(col, j)] /= d;
                inv[(col, j)] /= d;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = a[(r, col)];
                if f == 0.0 {
                    continue;
                }
                for j in 0..n {
                    a[(r, j)] -= f * a[(col, j)];
                    inv[(r, j)] -= f * inv[(col, j)];
                }
            }
        }
        Ok(inv)
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.
///
/// Returns eigenvalues in ascending order and the corresponding eigenvectors
/// as matrix columns, A = V diag(w) V^T. Each eigenvector is normalized so
/// that its first component of non-negligible magnitude is positive, which
/// pins the decomposition down to a unique, platform-independent result.
pub fn jacobi_eigh(a: &Mat) -> (Vec<f64>, Mat) {
    assert_eq!(a.rows(), a.cols());
    let n = a.rows();
    let mut m = a.symmetrized();
    let mut v = Mat::identity(n);
    let norm = m.frobenius_norm().max(f64::MIN_POSITIVE);

    for _sweep in 0..60 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if (2.0 * off).sqrt() <= 1e-15 * norm {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[(p, k)];
                    let aqk = m[(q, k)];
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].partial_cmp(&m[(j, j)]).unwrap());
    let w: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vecs = Mat::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        let mut col: Vec<f64> = (0..n).map(|r| v[(r, old_col)]).collect();
        let maxabs = col.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let lead = col.iter().find(|x| x.abs() > 1e-12 * maxabs.max(1e-300));
        if let Some(&lead) = lead {
            if lead < 0.0 {
                for x in &mut col {
                    *x = -*x;
                }
            }
        }
        for r in 0..n {
            vecs[(r, new_col)] = col[r];
        }
    }
    (w, vecs)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &Mat) -> f64 {
    let (w, _) = jacobi_eigh(a);
    w[0]
}

/// Matrix exponential by (7,7)-Pade with a fixed number of squarings.
///
/// The scaling exponent is fixed (not norm-adaptive) so the map stays smooth
/// and bit-reproducible over its whole intended domain: skew-symmetric
/// generators with entries in [-pi, pi] at sizes n <= 6, whose norms stay
/// well below the Pade accuracy radius after scaling.
pub const EXPM_SQUARINGS: u32 = 6;
pub const EXPM_PADE_COEFFS: [f64; 8] =
    [17_297_280.0, 8_648_640.0, 1_995_840.0, 277_200.0, 25_200.0, 1_512.0, 56.0, 1.0];

pub fn expm(a: &Mat) -> Mat {
    assert_eq!(a.rows(), a.cols());
    let n = a.rows();
    let b = EXPM_PADE_COEFFS;
    let x = a.scale(0.5_f64.powi(EXPM_SQUARINGS as i32));
    let x2 = x.matmul(&x);
    let x4 = x2.matmul(&x2);
    let x6 = x4.matmul(&x2);
    // odd part U = X (b1 I + b3 X^2 + b5 X^4 + b7 X^6), even part V.
    let mut u_inner = Mat::identity(n).scale(b[1]);
    u_inner = u_inner.add(&x2.scale(b[3]));
    u_inner = u_inner.add(&x4.scale(b[5]));
    u_inner = u_inner.add(&x6.scale(b[7]));
    let u = x.matmul(&u_inner);
    let mut v = Mat::identity(n).scale(b[0]);
    v = v.add(&x2.scale(b[2]));
    v = v.add(&x4.scale(b[4]));
    v = v.add(&x6.scale(b[6]));
    let num = v.add(&u);
    let den = v.sub(&u);
    let mut f = den.inverse().expect("Pade denominator is well conditioned").matmul(&num);
    for _ in 0..EXPM_SQUARINGS {
        f = f.matmul(&f);
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, rng: &mut impl Rng) -> Mat {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.gen_range(-1.0..1.0);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        let a = Mat::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let (w, v) = jacobi_eigh(&a);
        assert!((w[0] - 1.0).abs() < 1e-14);
        assert!((w[1] - 3.0).abs() < 1e-14);
        // reconstruction
        let recon = v.matmul(&Mat::diag(&w)).matmul(&v.transpose());
        assert!(recon.sub(&a).frobenius_norm() < 1e-13);
    }

    #[test]
    fn jacobi_reconstructs_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [2usize, 3, 5, 6] {
            for _ in 0..20 {
                let a = random_symmetric(n, &mut rng);
                let (w, v) = jacobi_eigh(&a);
                let recon = v.matmul(&Mat::diag(&w)).matmul(&v.transpose());
                assert!(recon.sub(&a).frobenius_norm() <= 1e-12 * a.frobenius_norm().max(1.0));
                let orth = v.transpose().matmul(&v).sub(&Mat::identity(n)).frobenius_norm();
                assert!(orth < 1e-13);
                for k in 1..n {
                    assert!(w[k] >= w[k - 1]);
                }
            }
        }
    }

    #[test]
    fn jacobi_is_deterministic_and_sign_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_symmetric(6, &mut rng);
        let (w1, v1) = jacobi_eigh(&a);
        let (w2, v2) = jacobi_eigh(&a);
        assert_eq!(w1, w2);
        assert_eq!(v1.data(), v2.data());
        for c in 0..6 {
            let col: Vec<f64> = (0..6).map(|r| v1[(r, c)]).collect();
            let maxabs = col.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
            let lead = col.iter().find(|x| x.abs() > 1e-12 * maxabs).unwrap();
            assert!(*lead > 0.0);
        }
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [2usize, 3, 6] {
            for _ in 0..10 {
                let mut a = random_symmetric(n, &mut rng);
                for i in 0..n {
                    a[(i, i)] += 3.0; // keep well conditioned
                }
                let inv = a.inverse().unwrap();
                let err = a.matmul(&inv).sub(&Mat::identity(n)).frobenius_norm();
                assert!(err < 1e-12);
            }
        }
    }

    #[test]
    fn inverse_rejects_singular() {
        let a = Mat::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(a.inverse().is_err());
    }

    #[test]
    fn expm_zero_is_identity() {
        let z = Mat::zeros(4, 4);
        let e = expm(&z);
        assert!(e.sub(&Mat::identity(4)).frobenius_norm() < 1e-15);
    }

    #[test]
    fn expm_single_generator_is_plane_rotation() {
        // exp of a single skew generator is a Givens rotation by the angle.
        let angle = 0.731;
        let mut s = Mat::zeros(3, 3);
        s[(0, 1)] = angle;
        s[(1, 0)] = -angle;
        let q = expm(&s);
        assert!((q[(0, 0)] - angle.cos()).abs() < 1e-14);
        assert!((q[(0, 1)] - angle.sin()).abs() < 1e-14);
        assert!((q[(1, 0)] + angle.sin()).abs() < 1e-14);
        assert!((q[(2, 2)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn expm_of_skew_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [3usize, 6] {
            for _ in 0..10 {
                let mut s = Mat::zeros(n, n);
                for i in 0..n {
                    for j in (i + 1)..n {
                        let v = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                        s[(i, j)] = v;
                        s[(j, i)] = -v;
                    }
                }
                let q = expm(&s);
                let orth = q.transpose().matmul(&q).sub(&Mat::identity(n)).frobenius_norm();
                assert!(orth < 1e-12, "orthogonality defect {orth}");
            }
        }
    }
}
