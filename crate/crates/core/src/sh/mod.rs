//! Real, antipodally symmetric spherical-harmonic representation.
//!
//! Only even degrees `l = 0, 2, …, L` are kept, giving `(L+1)(L+2)/2`
//! coefficients. Columns are ordered by `l` ascending, then `m` from `−l`
//! to `+l`. With `N_l^m` the usual orthonormalization constant and
//! `P_l^m` the associated Legendre function without the Condon–Shortley
//! phase:
//!
//! ```text
//! m < 0:  √2 · N_l^|m| · P_l^|m|(cos θ) · sin(|m| φ)
//! m = 0:       N_l^0  · P_l(cos θ)
//! m > 0:  √2 · N_l^m  · P_l^m(cos θ)  · cos(m φ)
//! ```
//!
//! The basis is orthonormal over the unit sphere.

pub mod normalize;

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

pub use normalize::{compute_stats, compute_stats_pooled, denormalize_channels, normalize_channels, NormStats};

const UNIT_TOL: f64 = 1e-6;

/// Number of coefficients of an even order.
pub fn n_coefficients(order: usize) -> usize {
    (order + 1) * (order + 2) / 2
}

/// Channel counts of each even-degree block (1, 5, 9, 13, …) covering
/// `channels` channels; the last block is truncated if `channels` is not a
/// full `n_coefficients(L)`.
pub fn degree_blocks(channels: usize) -> Vec<usize> {
    let mut blocks = Vec::new();
    let mut left = channels;
    let mut l = 0;
    while left > 0 {
        let size = (2 * l + 1).min(left);
        blocks.push(size);
        left -= size;
        l += 2;
    }
    blocks
}

/// A set of unit gradient directions.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionSet {
    dirs: Vec<[f64; 3]>,
}

impl DirectionSet {
    pub fn new(dirs: Vec<[f64; 3]>) -> Result<Self> {
        if dirs.is_empty() {
            return Err(Error::invalid("empty direction set"));
        }
        for (i, d) in dirs.iter().enumerate() {
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::invalid(format!(
                    "direction {i} {d:?} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self { dirs })
    }

    /// `n` near-uniform points on the sphere (Fibonacci lattice).
    pub fn fibonacci(n: usize) -> Self {
        let golden = PI * (3.0 - 5f64.sqrt());
        let dirs = (0..n)
            .map(|i| {
                let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
                let r = (1.0 - z * z).max(0.0).sqrt();
                let phi = golden * i as f64;
                [r * phi.cos(), r * phi.sin(), z]
            })
            .collect();
        Self { dirs }
    }

    /// Parses one whitespace-separated `x y z` triple per line. Blank lines
    /// and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut dirs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::invalid(format!("line {}: {e}", lineno + 1)))?;
            if vals.len() != 3 {
                return Err(Error::invalid(format!(
                    "line {}: expected 3 values, got {}",
                    lineno + 1,
                    vals.len()
                )));
            }
            dirs.push([vals[0], vals[1], vals[2]]);
        }
        Self::new(dirs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn as_slice(&self) -> &[[f64; 3]] {
        &self.dirs
    }
}

/// Coefficients of one voxel's signal.
#[derive(Clone, Debug, PartialEq)]
pub struct ShCoefficients {
    order: usize,
    coeffs: Vec<f64>,
}

impl ShCoefficients {
    pub fn new(order: usize, coeffs: Vec<f64>) -> Result<Self> {
        check_order(order)?;
        if coeffs.len() != n_coefficients(order) {
            return Err(Error::shape(format!(
                "order {order} needs {} coefficients, got {}",
                n_coefficients(order),
                coeffs.len()
            )));
        }
        Ok(Self { order, coeffs })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coeffs
    }
}

fn check_order(order: usize) -> Result<()> {
    if order % 2 != 0 {
        return Err(Error::invalid(format!("SH order must be even, got {order}")));
    }
    Ok(())
}

/// `P_l^m(x)` for all `0 ≤ m ≤ l ≤ lmax`, no Condon–Shortley phase.
/// Indexed as `table[l][m]`.
fn legendre_table(lmax: usize, x: f64) -> Vec<Vec<f64>> {
    let mut p = vec![vec![0.0; lmax + 1]; lmax + 1];
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = 1.0;
    for m in 0..=lmax {
        if m > 0 {
            pmm *= (2 * m - 1) as f64 * s;
        }
        p[m][m] = pmm;
        if m < lmax {
            p[m + 1][m] = x * (2 * m + 1) as f64 * pmm;
        }
        for l in m + 2..=lmax {
            p[l][m] = ((2 * l - 1) as f64 * x * p[l - 1][m] - (l + m - 1) as f64 * p[l - 2][m])
                / (l - m) as f64;
        }
    }
    p
}

/// `sqrt((2l+1)/(4π) · (l−m)!/(l+m)!)`
fn norm_constant(l: usize, m: usize) -> f64 {
    let ratio: f64 = ((l - m + 1)..=(l + m)).map(|k| 1.0 / k as f64).product();
    ((2 * l + 1) as f64 / (4.0 * PI) * ratio).sqrt()
}

/// Basis row for a single unit direction.
pub fn basis_row(dir: [f64; 3], order: usize) -> Vec<f64> {
    let [x, y, z] = dir;
    let phi = y.atan2(x);
    let table = legendre_table(order, z.clamp(-1.0, 1.0));
    let mut row = Vec::with_capacity(n_coefficients(order));
    for l in (0..=order).step_by(2) {
        for m in -(l as i64)..=(l as i64) {
            let am = m.unsigned_abs() as usize;
            let base = norm_constant(l, am) * table[l][am];
            row.push(match m.signum() {
                -1 => 2f64.sqrt() * base * (am as f64 * phi).sin(),
                0 => base,
                _ => 2f64.sqrt() * base * (am as f64 * phi).cos(),
            });
        }
    }
    row
}

/// Dense `n × K` basis matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl BasisMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

pub fn sh_basis_matrix(dirs: &DirectionSet, order: usize) -> Result<BasisMatrix> {
    check_order(order)?;
    let cols = n_coefficients(order);
    let mut data = Vec::with_capacity(dirs.len() * cols);
    for &d in dirs.as_slice() {
        data.extend(basis_row(d, order));
    }
    Ok(BasisMatrix {
        rows: dirs.len(),
        cols,
        data,
    })
}

/// Least-squares coefficients minimizing `‖B·c − signals‖₂`, solved through
/// the normal equations with a Cholesky factorization.
pub fn fit_sh(signals: &[f64], dirs: &DirectionSet, order: usize) -> Result<ShCoefficients> {
    let basis = sh_basis_matrix(dirs, order)?;
    fit_with_basis(signals, &basis, order)
}

/// [`fit_sh`] with a precomputed basis, for fitting many voxels.
pub fn fit_with_basis(signals: &[f64], basis: &BasisMatrix, order: usize) -> Result<ShCoefficients> {
    let (n, k) = (basis.rows, basis.cols);
    if signals.len() != n {
        return Err(Error::shape(format!(
            "{} signals for {n} directions",
            signals.len()
        )));
    }
    if n < k {
        return Err(Error::invalid(format!(
            "{n} directions cannot determine {k} coefficients"
        )));
    }
    let mut gram = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    for r in 0..n {
        let row = &basis.data[r * k..(r + 1) * k];
        for i in 0..k {
            rhs[i] += row[i] * signals[r];
            for j in 0..=i {
                gram[i * k + j] += row[i] * row[j];
            }
        }
    }
    let chol = cholesky(&mut gram, k)?;
    ShCoefficients::new(order, cholesky_solve(chol, k, rhs))
}

/// In-place lower Cholesky factor of a symmetric matrix whose lower
/// triangle is filled.
fn cholesky(a: &mut [f64], n: usize) -> Result<&[f64]> {
    let scale = (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max);
    let tol = scale * 1e-12;
    for j in 0..n {
        let mut d = a[j * n + j];
        for p in 0..j {
            d -= a[j * n + p] * a[j * n + p];
        }
        if !(d > tol) {
            return Err(Error::RankDeficient { pivot: j, size: n });
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= a[i * n + p] * a[j * n + p];
            }
            a[i * n + j] = s / d;
        }
    }
    Ok(a)
}

fn cholesky_solve(l: &[f64], n: usize, mut b: Vec<f64>) -> Vec<f64> {
    for i in 0..n {
        let mut s = b[i];
        for p in 0..i {
            s -= l[i * n + p] * b[p];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for p in i + 1..n {
            s -= l[p * n + i] * b[p];
        }
        b[i] = s / l[i * n + i];
    }
    b
}

/// Signal `B·c` at each direction.
pub fn eval_sh(coeffs: &ShCoefficients, dirs: &DirectionSet) -> Result<Vec<f64>> {
    let basis = sh_basis_matrix(dirs, coeffs.order)?;
    if basis.cols != coeffs.coeffs.len() {
        return Err(Error::shape("coefficient count does not match basis"));
    }
    Ok((0..basis.rows)
        .map(|r| {
            (0..basis.cols)
                .map(|c| basis.get(r, c) * coeffs.coeffs[c])
                .sum()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficient_counts() {
        assert_eq!(n_coefficients(0), 1);
        assert_eq!(n_coefficients(4), 15);
        assert_eq!(n_coefficients(6), 28);
        assert_eq!(degree_blocks(28), vec![1, 5, 9, 13]);
        assert_eq!(degree_blocks(6), vec![1, 5]);
        assert_eq!(degree_blocks(8), vec![1, 5, 2]);
    }

    #[test]
    fn degree_zero_is_constant() {
        let dirs = DirectionSet::fibonacci(17);
        let b = sh_basis_matrix(&dirs, 0).unwrap();
        assert_eq!(b.cols, 1);
        for r in 0..b.rows {
            assert!((b.get(r, 0) - 0.28209479177387814).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_order_and_non_unit_directions_rejected() {
        let dirs = DirectionSet::fibonacci(30);
        assert!(sh_basis_matrix(&dirs, 3).is_err());
        assert!(DirectionSet::new(vec![[1.0, 1.0, 0.0]]).is_err());
    }

    #[test]
    fn basis_is_antipodally_symmetric() {
        let d = [0.36, -0.48, 0.8];
        let a = basis_row(d, 6);
        let b = basis_row([-d[0], -d[1], -d[2]], 6);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn underdetermined_and_degenerate_fits_fail() {
        let few = DirectionSet::fibonacci(10);
        assert!(fit_sh(&[0.0; 10], &few, 6).is_err());
        // 28 copies of one direction: rank one
        let same = DirectionSet::new(vec![[0.0, 0.0, 1.0]; 40]).unwrap();
        assert!(matches!(
            fit_sh(&[1.0; 40], &same, 6),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn zero_signal_fits_zero() {
        let dirs = DirectionSet::fibonacci(60);
        let c = fit_sh(&[0.0; 60], &dirs, 6).unwrap();
        assert!(c.as_slice().iter().all(|&v| v == 0.0));
        assert!(eval_sh(&ShCoefficients::new(6, vec![0.0; 28]).unwrap(), &dirs)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn parses_direction_file() {
        let d = DirectionSet::parse("# bvecs\n1 0 0\n\n0 1 0\n  0 0 -1  \n").unwrap();
        assert_eq!(d.len(), 3);
        assert!(DirectionSet::parse("1 0\n").is_err());
        assert!(DirectionSet::parse("1 0 x\n").is_err());
    }
}
