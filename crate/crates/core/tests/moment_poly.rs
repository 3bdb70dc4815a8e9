mod common;

use common::{gl, moment_table as table};
use gauss_quad::legendre::GaussLegendre;
use graphon_core::moment_poly::*;
use graphon_core::stars::MultiIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Frozen from 40-digit tanh-sinh quadrature of exp(-1/(d^2 - x^2)).
const GOLDEN_SECOND_MOMENT_AT_ONE: f64 = 0.158_113_636_263_798_23;
const GOLDEN_FOURTH_MOMENT_AT_ONE: f64 = 0.052_981_818_022_077_168;
const GOLDEN_SECOND_MOMENT_AT_HALF: f64 = 0.019_124_230_013_873_458;
const GOLDEN_FOURTH_MOMENT_AT_FIFTH: f64 = 1.448_437_670_782_612_3e-6;

#[test]
fn second_moment_agrees_with_two_plain_rules() {
    // Plain Gauss–Legendre on (-1,1) at two resolutions, no adaptivity.
    let psi = |x: f64| if x.abs() < 1.0 { (-1.0 / (1.0 - x * x)).exp() } else { 0.0 };
    let ratio = |rule: &GaussLegendre| rule.integrate(-1.0, 1.0, |x| x * x * psi(x)) / rule.integrate(-1.0, 1.0, psi);
    let a = ratio(&gl(400));
    let b = ratio(&gl(800));
    assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    assert!((a - GOLDEN_SECOND_MOMENT_AT_ONE).abs() < 1e-10);
    let mm = mollifier_moments(1.0, 4).unwrap();
    assert!((mm.moments[2] - GOLDEN_SECOND_MOMENT_AT_ONE).abs() <= 1e-10 * GOLDEN_SECOND_MOMENT_AT_ONE);
    assert!((mm.moments[4] - GOLDEN_FOURTH_MOMENT_AT_ONE).abs() <= 1e-10 * GOLDEN_FOURTH_MOMENT_AT_ONE);
}

#[test]
fn narrow_mollifiers_hit_golden_values() {
    let half = mollifier_moments(0.5, 2).unwrap();
    assert!((half.moments[2] / GOLDEN_SECOND_MOMENT_AT_HALF - 1.0).abs() < 1e-10);
    let fifth = mollifier_moments(0.2, 4).unwrap();
    assert!((fifth.moments[4] / GOLDEN_FOURTH_MOMENT_AT_FIFTH - 1.0).abs() < 1e-10);
    for delta in [0.05, 0.2, 1.0, 3.0] {
        let mm = mollifier_moments(delta, 12).unwrap();
        for (j, m) in mm.moments.iter().enumerate() {
            assert!(m.abs() <= delta.powi(j as i32) * (1.0 + 1e-12), "delta {delta} j {j}");
        }
    }
}

#[test]
fn shifted_point_mass_matches_monte_carlo() {
    let c: f64 = 0.7;
    let cap = 4;
    let entries: Vec<f64> = (0..=cap).map(|j| c.powi(j as i32)).collect();
    let mm = mollifier_moments(1.0, cap).unwrap();
    let m = mollify_moments(&table(1, cap, entries), &mm).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let samples = 1_000_000;
    let mut sums = [0.0f64; 5];
    let mut squares = [0.0f64; 5];
    let mut drawn = 0;
    while drawn < samples {
        let x: f64 = rng.gen_range(-1.0..1.0);
        let accept = (1.0 - 1.0 / (1.0 - x * x)).exp();
        if rng.gen::<f64>() < accept {
            let y = c + x;
            for j in 0..=cap {
                let v = y.powi(j as i32);
                sums[j] += v;
                squares[j] += v * v;
            }
            drawn += 1;
        }
    }
    for j in 0..=cap {
        let mean = sums[j] / samples as f64;
        let var = squares[j] / samples as f64 - mean * mean;
        let se = (var / samples as f64).sqrt();
        assert!((m[j] - mean).abs() <= 3.0 * se + 1e-15, "j={j}: {} vs {mean} ± {se}", m[j]);
    }
}

#[test]
fn scaled_legendre_orthonormal() {
    let defect = common::legendre_orthonormality_defect(12, &[1.0, 0.4, 7.0]);
    assert!(defect < 1e-10, "{defect}");
}

fn monomial_moment(j: usize, kappa: f64) -> f64 {
    if j % 2 == 1 {
        0.0
    } else {
        2.0 * kappa.powi(j as i32 + 1) / (j + 1) as f64
    }
}

#[test]
fn uniform_density_has_only_constant_coefficient() {
    let (k, n, kappa) = (2usize, 6, 1.7f64);
    let vol = (2.0 * kappa).powi(k as i32);
    let m: Vec<f64> = MultiIndex::grid(k, n)
        .map(|a| a.exponents().iter().map(|&j| monomial_moment(j, kappa)).product::<f64>() / vol)
        .collect();
    let basis = legendre_basis(n, kappa).unwrap();
    let fit = fit_density(&m, &basis, k, 0.0, 64).unwrap();
    assert!((fit.rho[0] - (2.0 * kappa).powf(-(k as f64) / 2.0)).abs() < 1e-10);
    for r in &fit.rho[1..] {
        assert!(r.abs() < 1e-10, "{r}");
    }
    // L2 distance to the flat density
    let rule = gl(20);
    let l2: f64 = rule.integrate(-kappa, kappa, |x| {
        rule.integrate(-kappa, kappa, |y| (eval_density(&fit, &[x, y]) - 1.0 / vol).powi(2))
    });
    assert!(l2.sqrt() < 1e-9);
    assert!((fit.l1_norm_plus - 1.0).abs() < 1e-10);
}

#[test]
fn planted_coefficient_is_recovered() {
    let err = common::planted_recovery_error();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn fitted_density_reproduces_its_moments() {
    let (k, n, kappa) = (2, 4, 2.0);
    // Moments of a random two-atom mixture, mollified.
    let atoms: [[f64; 2]; 2] = [[0.6, -0.9], [-0.4, 0.8]];
    let p: Vec<f64> = MultiIndex::grid(k, n)
        .map(|a| {
            atoms
                .iter()
                .map(|z| z.iter().zip(a.exponents()).map(|(x, &e)| x.powi(e as i32)).product::<f64>())
                .sum::<f64>()
                / 2.0
        })
        .collect();
    let m = mollify_moments(&table(k, n, p), &mollifier_moments(0.3, n).unwrap()).unwrap();
    let fit = fit_density(&m, &legendre_basis(n, kappa).unwrap(), k, 0.3, 64).unwrap();
    let rule = gl(12);
    for alpha in MultiIndex::grid(k, n) {
        let e = alpha.exponents().to_vec();
        let got = rule.integrate(-kappa, kappa, |x| {
            rule.integrate(-kappa, kappa, |y| x.powi(e[0] as i32) * y.powi(e[1] as i32) * eval_density(&fit, &[x, y]))
        });
        let want = m[alpha.flat(n)];
        assert!((got - want).abs() < 1e-8 * want.abs().max(1.0), "{e:?}: {got} vs {want}");
    }
}

#[test]
fn evaluation_matches_naive_sum() {
    let (k, n, kappa) = (2, 5, 1.3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let basis = legendre_basis(n, kappa).unwrap();
    let m: Vec<f64> = (0..(n + 1) * (n + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let fit = DensityFit {
        k,
        n,
        kappa,
        delta: 0.1,
        rho: legendre_coefficients(&m, &basis, k).unwrap(),
        l1_norm_plus: 1.0,
        max_bound: 0.0,
        grid_resolution: 64,
        hankel_condition: 1.0,
        warnings: vec![],
    };
    let mono = |i: usize, x: f64| -> f64 { (0..=i).map(|j| basis.scaled_coeffs[i][j] * x.powi(j as i32)).sum() };
    for _ in 0..100 {
        let x = [rng.gen_range(-kappa..kappa), rng.gen_range(-kappa..kappa)];
        let naive: f64 = MultiIndex::grid(k, n)
            .map(|a| {
                let e = a.exponents();
                fit.rho[a.flat(n)] * mono(e[0], x[0]) * mono(e[1], x[1])
            })
            .sum();
        let fast = eval_density(&fit, &x);
        assert!((fast - naive).abs() < 1e-12 * naive.abs().max(1.0), "{fast} vs {naive}");
        assert_eq!(eval_density_plus(&fit, &x), fast.max(0.0));
    }
}

#[test]
fn max_bound_dominates_grid() {
    let (k, n, kappa) = (2, 4, 1.5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m: Vec<f64> = (0..25).map(|_| rng.gen_range(-0.5..0.5)).collect();
    m[0] = 1.0;
    let fit = fit_density(&m, &legendre_basis(n, kappa).unwrap(), k, 0.1, 32).unwrap();
    let axis = fit.axis_matrix(64);
    for r0 in 0..64 {
        for v in fit.grid_slab(&axis, 64, r0) {
            assert!(v.abs() <= fit.max_bound);
        }
    }
}

#[test]
fn cubic_positive_part_matches_closed_form() {
    // p(x) = x^3 - x on [-2, 2]; positive on (-1, 0) and (1, 2).
    let kappa = 2.0;
    let n = 3;
    let m: Vec<f64> = (0..=n)
        .map(|j| monomial_moment(j + 3, kappa) - monomial_moment(j + 1, kappa))
        .collect();
    let fit = fit_density(&m, &legendre_basis(n, kappa).unwrap(), 1, 0.0, 8192).unwrap();
    let closed = 0.25 + 2.25;
    assert!((fit.l1_norm_plus - closed).abs() < 1e-6, "{}", fit.l1_norm_plus);
    for x in [-1.5, -0.5, 0.3, 1.7] {
        assert!((eval_density(&fit, &[x]) - (x * x * x - x)).abs() < 1e-12);
    }
}

#[test]
fn two_atom_fit_improves_with_degree() {
    let l1 = common::two_atom_l1(&[8, 12, 16, 20]);
    assert!(l1.windows(2).all(|w| w[1] < w[0]), "{l1:?}");
}
