mod common;

use graphon_core::estimator::*;
use graphon_core::graphon::Kernel;
use graphon_core::moment_poly::*;
use graphon_core::stars::MultiIndex;
use rand::Rng;

/// Fit whose moments are those of `c₀ + c₁x + c₂y + c₃xy` on the box.
fn bilinear_fit(kappa: f64, c: [f64; 4]) -> DensityFit {
    let rule = common::gl(8);
    let n = 2;
    let m: Vec<f64> = MultiIndex::grid(2, n)
        .map(|a| {
            let e = a.exponents().to_vec();
            rule.integrate(-kappa, kappa, |x| {
                rule.integrate(-kappa, kappa, |y| {
                    x.powi(e[0] as i32) * y.powi(e[1] as i32) * (c[0] + c[1] * x + c[2] * y + c[3] * x * y)
                })
            })
        })
        .collect();
    fit_density(&m, &legendre_basis(n, kappa).unwrap(), 2, 0.0, 256).unwrap()
}

fn linear_fit(kappa: f64, slope: f64) -> DensityFit {
    // density (1 + slope·x/κ)/(2κ)
    let m = [1.0, slope * kappa / 3.0];
    fit_density(&m, &legendre_basis(1, kappa).unwrap(), 1, 0.0, 256).unwrap()
}

fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            ((i + 1) as f64 / n - f).abs().max((f - i as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn one_dimensional_draws_pass_kolmogorov_smirnov() {
    let (kappa, slope) = (2.0, 0.8);
    let fit = linear_fit(kappa, slope);
    let cdf = |x: f64| {
        let t = (x + kappa) / (2.0 * kappa);
        t + slope * (t * t - t)
    };
    let m = 20_000;
    for method in [SamplingMethod::Rejection, SamplingMethod::Grid] {
        let s = sample_density_with(&fit, m, 3, method).unwrap();
        assert_eq!(s.method, method);
        let d = ks_statistic(s.z.clone(), cdf);
        // 1% critical value
        assert!(d * (m as f64).sqrt() < 1.63, "{method:?}: {d}");
    }
}

#[test]
fn two_dimensional_draws_pass_chi_square() {
    let kappa = 1.0;
    // negative on part of the box, so only the positive part is sampled
    let fit = bilinear_fit(kappa, [0.1, 0.25, -0.1, 0.3]);
    let cells = 6;
    let h = 2.0 * kappa / cells as f64;
    let fine = 60;
    let mut mass = vec![0.0; cells * cells];
    for a in 0..cells * fine {
        for b in 0..cells * fine {
            let x = -kappa + (a as f64 + 0.5) * h / fine as f64;
            let y = -kappa + (b as f64 + 0.5) * h / fine as f64;
            mass[(a / fine) * cells + b / fine] += eval_density_plus(&fit, &[x, y]);
        }
    }
    let total: f64 = mass.iter().sum();
    let m = 60_000;
    let s = sample_density_with(&fit, m, 5, SamplingMethod::Rejection).unwrap();
    let mut counts = vec![0.0; cells * cells];
    for i in 0..m {
        let r = s.row(i);
        let a = (((r[0] + kappa) / h) as usize).min(cells - 1);
        let b = (((r[1] + kappa) / h) as usize).min(cells - 1);
        counts[a * cells + b] += 1.0;
    }
    let mut chi2 = 0.0;
    let mut dof = 0;
    for (c, w) in counts.iter().zip(&mass) {
        let e = m as f64 * w / total;
        if e > 5.0 {
            chi2 += (c - e) * (c - e) / e;
            dof += 1;
        } else {
            assert!(*c <= 5.0 * e.max(1.0) + 10.0);
        }
    }
    // 99.9% quantile is below dof + 4·sqrt(2·dof) + 10 for these sizes
    let limit = dof as f64 + 4.0 * (2.0 * dof as f64).sqrt() + 10.0;
    assert!(chi2 < limit, "chi2 {chi2} with {dof} cells");
}

#[test]
fn two_atom_sample_mean_matches_fit() {
    let (delta, kappa, n) = (0.2, 1.5, 12);
    let p: Vec<f64> = (0..=n).map(|j| if j % 2 == 0 { 1.0 } else { 0.0 }).collect();
    let m_in = mollify_moments(&common::moment_table(1, n, p), &mollifier_moments(delta, n).unwrap()).unwrap();
    let fit = fit_density(&m_in, &legendre_basis(n, kappa).unwrap(), 1, delta, 512).unwrap();
    let rule = common::gl(400);
    let mass = rule.integrate(-kappa, kappa, |x| eval_density_plus(&fit, &[x]));
    let mean_abs = rule.integrate(-kappa, kappa, |x| x.abs() * eval_density_plus(&fit, &[x])) / mass;
    let second = rule.integrate(-kappa, kappa, |x| x * x * eval_density_plus(&fit, &[x])) / mass;
    let m = 40_000;
    let s = sample_density(&fit, m, 8).unwrap();
    let got = s.z.iter().map(|z| z.abs()).sum::<f64>() / m as f64;
    let se = ((second - mean_abs * mean_abs) / m as f64).sqrt();
    assert!((got - mean_abs).abs() < 4.0 * se, "{got} vs {mean_abs} ± {se}");
    // mass concentrates near the atoms
    assert!(mean_abs > 0.6 && mean_abs < 1.2, "{mean_abs}");
}

#[test]
fn assembled_estimate_matches_feature_products() {
    let mut rng = common::rng(6);
    let (m, k) = (9, 3);
    let z: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let lambdas = vec![4.0, -2.5, 1.5];
    let est = assemble(z.clone(), lambdas.clone(), 2.0).unwrap();
    for _ in 0..200 {
        let (x, y): (f64, f64) = (rng.gen(), rng.gen());
        let (a, b) = (est.piece(x), est.piece(y));
        let want: f64 = (0..k).map(|i| lambdas[i] * z[a * k + i] * z[b * k + i]).sum();
        assert!((est.value(x, y) - want).abs() < 1e-12);
        assert_eq!(est.value(x, y), est.value(y, x));
    }
    // piece i covers ((i)/m, (i+1)/m]
    for i in 0..m {
        let right = (i + 1) as f64 / m as f64;
        assert_eq!(est.piece(right), i);
        assert_eq!(est.piece(right - 1e-9), i);
    }
    let text = est.to_json().unwrap();
    assert_eq!(GraphonEstimate::from_json(&text, "e").unwrap(), est);
}
