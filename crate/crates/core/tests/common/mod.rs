//! Shared fixtures and independent numerical oracles for the acceptance
//! suite. Everything here is deliberately naive: the point is to agree with
//! the library through different arithmetic, not to be fast.

use lnforge::volume::Mask;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Maps any library error into the acceptance suite's string failures.
pub trait StrErr<T> {
    fn str_err(self) -> Result<T, String>;
}

impl<T, E: std::fmt::Display> StrErr<T> for Result<T, E> {
    fn str_err(self) -> Result<T, String> {
        self.map_err(|e| e.to_string())
    }
}

/// A random rotation matrix, built by Gram-Schmidt on Gaussian columns.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    use rand_distr::StandardNormal;
    loop {
        let mut cols = [[0.0f64; 3]; 3];
        for col in &mut cols {
            for x in col.iter_mut() {
                *x = rng.sample::<f64, _>(StandardNormal);
            }
        }
        let norm = |v: &[f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let n0 = norm(&cols[0]);
        if n0 < 1e-6 {
            continue;
        }
        for x in cols[0].iter_mut() {
            *x /= n0;
        }
        let d = dot(&cols[0], &cols[1]);
        for i in 0..3 {
            cols[1][i] -= d * cols[0][i];
        }
        let n1 = norm(&cols[1]);
        if n1 < 1e-6 {
            continue;
        }
        for x in cols[1].iter_mut() {
            *x /= n1;
        }
        // Third column: cross product keeps the frame right-handed.
        cols[2] = [
            cols[0][1] * cols[1][2] - cols[0][2] * cols[1][1],
            cols[0][2] * cols[1][0] - cols[0][0] * cols[1][2],
            cols[0][0] * cols[1][1] - cols[0][1] * cols[1][0],
        ];
        return cols;
    }
}

/// A randomly rotated solid ellipsoid on a voxel grid. Semi-axes are in
/// voxel units, so the minimum feature thickness is twice the smallest
/// semi-axis.
pub fn ellipsoid_mask(
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    center: (f64, f64, f64),
    semi_axes: (f64, f64, f64),
    rot: &[[f64; 3]; 3],
) -> Mask {
    let mut mask = Mask::empty(dims, spacing).expect("valid geometry");
    for k in 0..dims.2 {
        for j in 0..dims.1 {
            for i in 0..dims.0 {
                let p = [i as f64 - center.0, j as f64 - center.1, k as f64 - center.2];
                // Body coordinates: u = R^T p.
                let u = [
                    rot[0][0] * p[0] + rot[1][0] * p[1] + rot[2][0] * p[2],
                    rot[0][1] * p[0] + rot[1][1] * p[1] + rot[2][1] * p[2],
                    rot[0][2] * p[0] + rot[1][2] * p[1] + rot[2][2] * p[2],
                ];
                let e = (u[0] / semi_axes.0).powi(2)
                    + (u[1] / semi_axes.1).powi(2)
                    + (u[2] / semi_axes.2).powi(2);
                if e <= 1.0 {
                    mask.set(i, j, k);
                }
            }
        }
    }
    mask
}

/// A random member of the toy lesion family used across criteria: rotated
/// ellipsoid with semi-axes in `[semi_lo, semi_hi]` voxels and a jittered
/// center.
pub fn random_ellipsoid(
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    semi_lo: f64,
    semi_hi: f64,
    rng: &mut ChaCha8Rng,
) -> Mask {
    let c = (
        dims.0 as f64 / 2.0 + rng.gen_range(-1.5..=1.5),
        dims.1 as f64 / 2.0 + rng.gen_range(-1.5..=1.5),
        dims.2 as f64 / 2.0 + rng.gen_range(-1.5..=1.5),
    );
    let s = (
        rng.gen_range(semi_lo..=semi_hi),
        rng.gen_range(semi_lo..=semi_hi),
        rng.gen_range(semi_lo..=semi_hi),
    );
    let rot = random_rotation(rng);
    ellipsoid_mask(dims, spacing, c, s, &rot)
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method, sorted
/// descending. `a` is row-major `n * n` and gets destroyed.
pub fn jacobi_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n, "matrix must be square");
    for _sweep in 0..200 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let api = a[p * n + i];
                    let aqi = a[q * n + i];
                    a[p * n + i] = c * api - s * aqi;
                    a[q * n + i] = s * api + c * aqi;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).expect("finite eigenvalues"));
    eig
}
