use msp_core::sh::{
    compute_stats, denormalize_channels, eval_sh, fit_sh, n_coefficients, normalize_channels,
    sh_basis_matrix, DirectionSet, ShCoefficients,
};
use msp_core::volume::{Mask, Volume};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense least squares through an SVD, independent of the Cholesky path.
fn svd_least_squares(dirs: &DirectionSet, order: usize, signals: &[f64]) -> Vec<f64> {
    let b = sh_basis_matrix(dirs, order).unwrap();
    let m = DMatrix::from_row_slice(b.rows, b.cols, &b.data);
    let s = DVector::from_row_slice(signals);
    m.svd(true, true).solve(&s, 1e-14).unwrap().iter().copied().collect()
}

#[test]
fn order_six_has_28_coefficients() {
    assert_eq!(n_coefficients(6), 28);
    let b = sh_basis_matrix(&DirectionSet::fibonacci(60), 6).unwrap();
    assert_eq!((b.rows, b.cols), (60, 28));
    for l in (0..=10).step_by(2) {
        assert_eq!(n_coefficients(l), (l + 1) * (l + 2) / 2);
    }
}

#[test]
fn constant_signal_isolates_degree_zero() {
    let dirs = DirectionSet::fibonacci(60);
    let s = 0.731;
    let c = fit_sh(&[s; 60], &dirs, 6).unwrap();
    let c0 = s * (4.0 * std::f64::consts::PI).sqrt();
    assert!((c.as_slice()[0] - c0).abs() <= 1e-8 * c0);
    assert!(c.as_slice()[1..].iter().all(|v| v.abs() <= 1e-8));

    let oracle = svd_least_squares(&dirs, 6, &[s; 60]);
    for (a, b) in c.as_slice().iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-8);
    }
}

#[test]
fn synthesize_then_fit_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dirs = DirectionSet::fibonacci(60);
    for _ in 0..20 {
        let truth: Vec<f64> = (0..28).map(|_| rng.random_range(-2.0..2.0)).collect();
        let coeffs = ShCoefficients::new(6, truth.clone()).unwrap();
        let signal = eval_sh(&coeffs, &dirs).unwrap();
        let fit = fit_sh(&signal, &dirs, 6).unwrap();
        let norm = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err = fit
            .as_slice()
            .iter()
            .zip(&truth)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err <= 1e-8 * norm, "relative error {}", err / norm);
    }
}

#[test]
fn fit_agrees_with_svd_on_noisy_signals() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dirs = DirectionSet::fibonacci(90);
    let signal: Vec<f64> = (0..90).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fit = fit_sh(&signal, &dirs, 6).unwrap();
    let oracle = svd_least_squares(&dirs, 6, &signal);
    for (a, b) in fit.as_slice().iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
}

#[test]
fn constant_coefficients_evaluate_to_constant_signal() {
    let dirs = DirectionSet::fibonacci(33);
    let s = -1.25;
    let mut c = vec![0.0; 28];
    c[0] = s * (4.0 * std::f64::consts::PI).sqrt();
    let sig = eval_sh(&ShCoefficients::new(6, c).unwrap(), &dirs).unwrap();
    assert!(sig.iter().all(|v| (v - s).abs() < 1e-12));
}

/// Exact integral of `x^a y^b z^c` over the unit sphere.
fn monomial_integral(a: u32, b: u32, c: u32) -> f64 {
    if a % 2 == 1 || b % 2 == 1 || c % 2 == 1 {
        return 0.0;
    }
    let g = |v: f64| statrs::function::gamma::gamma(v);
    let (a, b, c) = (a as f64, b as f64, c as f64);
    2.0 * g((a + 1.0) / 2.0) * g((b + 1.0) / 2.0) * g((c + 1.0) / 2.0) / g((a + b + c + 3.0) / 2.0)
}

/// Minimum-norm perturbation of uniform weights that integrates every
/// degree-12 monomial exactly (hence every product of two degree-≤6
/// harmonics). Built without reference to the SH code.
fn fitted_weights(dirs: &DirectionSet) -> Vec<f64> {
    let n = dirs.len();
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for a in 0..=12u32 {
        for b in 0..=(12 - a) {
            let c = 12 - a - b;
            rows.push(
                dirs.as_slice()
                    .iter()
                    .map(|d| d[0].powi(a as i32) * d[1].powi(b as i32) * d[2].powi(c as i32))
                    .collect::<Vec<_>>(),
            );
            rhs.push(monomial_integral(a, b, c));
        }
    }
    let m = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
    let w0 = DVector::from_element(n, 4.0 * std::f64::consts::PI / n as f64);
    let resid = DVector::from_vec(rhs) - &m * &w0;
    let lambda = (&m * m.transpose()).svd(true, true).solve(&resid, 1e-13).unwrap();
    (w0 + m.transpose() * lambda).iter().copied().collect()
}

#[test]
fn basis_is_orthonormal_under_uniform_quadrature() {
    let n = 500;
    let dirs = DirectionSet::fibonacci(n);
    let w = fitted_weights(&dirs);
    let uniform = 4.0 * std::f64::consts::PI / n as f64;
    assert!(w.iter().all(|&x| (x - uniform).abs() < 0.5 * uniform), "weights stay near-uniform");
    let b = sh_basis_matrix(&dirs, 6).unwrap();
    for i in 0..b.cols {
        for j in 0..b.cols {
            let g: f64 = (0..b.rows).map(|r| b.get(r, i) * b.get(r, j) * w[r]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((g - want).abs() < 1e-3, "gram[{i}][{j}] = {g}");
        }
    }
}

proptest! {
    #[test]
    fn fit_is_scale_equivariant(seed in 0u64..1000, kappa in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dirs = DirectionSet::fibonacci(45);
        let sig: Vec<f64> = (0..45).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = sig.iter().map(|v| v * kappa).collect();
        let a = fit_sh(&sig, &dirs, 6).unwrap();
        let b = fit_sh(&scaled, &dirs, 6).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x * kappa - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn normalization_standardizes_masked_voxels(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [6, 5, 4];
        let c = 3;
        let n = dims.iter().product::<usize>();
        let data: Vec<f32> = (0..n * c)
            .map(|i| rng.random_range(-3.0f32..5.0) * (1.0 + (i % c) as f32) + (i % c) as f32 * 10.0)
            .collect();
        let vol = Volume::new(dims, c, [1.0; 3], data).unwrap();
        let mask = Mask::from_fn(dims, |x, y, _| (x + y) % 3 != 0);
        let stats = compute_stats(&vol, &mask).unwrap();
        let norm = normalize_channels(&vol, &stats).unwrap();
        for ch in 0..c {
            let vals: Vec<f64> = mask.coordinates().iter()
                .map(|&[x, y, z]| norm.get(x, y, z, ch) as f64).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            prop_assert!(m.abs() <= 1e-5, "mean {}", m);
            prop_assert!((sd - 1.0).abs() <= 1e-4, "std {}", sd);
        }
        // idempotent on standardized data
        let again = normalize_channels(&norm, &compute_stats(&norm, &mask).unwrap()).unwrap();
        for (a, b) in again.data().iter().zip(norm.data()) {
            prop_assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
        let back = denormalize_channels(&norm, &stats).unwrap();
        for (a, b) in back.data().iter().zip(vol.data()) {
            prop_assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }
}
