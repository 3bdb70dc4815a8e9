//! Brute-force oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use graphon_core::moment_poly::{
    eval_density_plus, fit_density, legendre_basis, legendre_coefficients, mollifier_moments, mollify_moments,
    scaled_legendre_values,
};
use graphon_core::nonbacktracking::{
    build_nb_operator, ihara_bass_reduce, largest_magnitude, KrylovOptions, Wanted,
};
use graphon_core::sampler::SparseGraph;
use graphon_core::stars::{count_star, star_counts_grid, MomentTable, MultiIndex};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gl(n: usize) -> GaussLegendre {
    GaussLegendre::new(NonZeroUsize::new(n).unwrap())
}

/// Erdős–Rényi graph with edge probability `p`.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> SparseGraph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    SparseGraph::from_edges(n, edges).unwrap()
}

/// Dense non-backtracking matrix straight from the definition:
/// `(u→v, x→y)` is 1 iff `v = x` and `y ≠ u`.
pub fn dense_nb(g: &SparseGraph) -> DMatrix<f64> {
    let oriented: Vec<(usize, usize)> = g.edges().iter().flat_map(|&(u, v)| [(u, v), (v, u)]).collect();
    let m = oriented.len();
    DMatrix::from_fn(m, m, |i, j| {
        let (u, v) = oriented[i];
        let (x, y) = oriented[j];
        if v == x && y != u {
            1.0
        } else {
            0.0
        }
    })
}

pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex64> {
    let f = faer::Mat::<f64>::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)]);
    let mut ev: Vec<Complex64> = f
        .eigenvalues()
        .expect("dense eigensolver converges")
        .iter()
        .map(|z| Complex64::new(z.re, z.im))
        .collect();
    ev.sort_by(|a, b| b.norm().total_cmp(&a.norm()).then(b.re.total_cmp(&a.re)).then(b.im.total_cmp(&a.im)));
    ev
}

/// Largest distance in a greedy nearest matching of two multisets, or
/// infinity if their sizes differ.
pub fn multiset_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut used = vec![false; b.len()];
    let mut worst = 0.0f64;
    for x in a {
        let (j, d) = b
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, y)| (j, (x - y).norm()))
            .min_by(|p, q| p.1.total_cmp(&q.1))
            .unwrap();
        used[j] = true;
        worst = worst.max(d);
    }
    worst
}

/// Outcome of the non-backtracking oracle over many small graphs.
#[derive(Debug, Default)]
pub struct NbOracleReport {
    pub graphs: usize,
    /// Iterative top eigenvalues vs dense eigensolve.
    pub iterative: f64,
    /// Non-unit spectrum of the Ihara–Bass companion vs dense eigensolve.
    pub ihara_dense: f64,
    /// Iterative top eigenvalues of the companion vs dense eigensolve.
    pub ihara_iterative: f64,
}

fn non_unit(ev: &[Complex64]) -> Vec<Complex64> {
    ev.iter()
        .copied()
        .filter(|z| z.norm() > 0.9 && (z - 1.0).norm() > 1e-3 && (z + 1.0).norm() > 1e-3)
        .collect()
}

/// Number of leading eigenvalues above `1.01` in magnitude (at most `cap`)
/// whose magnitude is separated from the next one.
fn separated_count(ev: &[Complex64], cap: usize) -> usize {
    let mut k = ev.iter().take(cap).filter(|z| z.norm() > 1.01).count();
    while k > 0 && k < ev.len() && ev[k - 1].norm() - ev[k].norm() < 1e-6 {
        k -= 1;
    }
    k
}

pub fn nb_oracle(graphs: usize, seed: u64) -> NbOracleReport {
    let mut rng = rng(seed);
    let mut report = NbOracleReport::default();
    let opts = KrylovOptions {
        tol: 1e-12,
        ..Default::default()
    };
    while report.graphs < graphs {
        let n = rng.gen_range(6..=30);
        let p = rng.gen_range(2.5..5.0) / n as f64;
        let g = random_graph(&mut rng, n, p);
        let dense = eigenvalues(&dense_nb(&g));
        if dense.first().map_or(true, |z| z.norm() < 1.05) {
            continue;
        }
        report.graphs += 1;

        let k = separated_count(&dense, 6);
        if k > 0 {
            let out = largest_magnitude(&build_nb_operator(&g), Wanted::Count(k), &opts).unwrap();
            let got: Vec<Complex64> = out.pairs.iter().map(|p| p.value).take(k).collect();
            report.iterative = report.iterative.max(multiset_distance(&got, &dense[..k]));
        }

        let companion = ihara_bass_reduce(&g);
        let cev = eigenvalues(&companion.dense());
        report.ihara_dense = report.ihara_dense.max(multiset_distance(&non_unit(&cev), &non_unit(&dense)));
        let kc = separated_count(&cev, 6);
        if kc > 0 {
            let out = largest_magnitude(&companion, Wanted::Count(kc), &opts).unwrap();
            let got: Vec<Complex64> = out.pairs.iter().map(|p| p.value).take(kc).collect();
            report.ihara_iterative = report.ihara_iterative.max(multiset_distance(&got, &dense[..kc]));
        }
    }
    report
}

/// `A_α` by enumerating ordered tuples of distinct neighbours; also returns
/// the sum of the absolute values of the terms.
pub fn brute_star(g: &SparseGraph, alpha: &[usize], b: &[Vec<f64>]) -> (f64, f64) {
    let labels: Vec<usize> = alpha.iter().enumerate().flat_map(|(i, &a)| std::iter::repeat(i).take(a)).collect();
    let mut total = 0.0;
    let mut abs = 0.0;
    for w in 0..g.n() {
        let nb = g.neighbors(w);
        let mut chosen = Vec::with_capacity(labels.len());
        enumerate(nb, &labels, b, &mut chosen, 1.0, &mut total, &mut abs);
    }
    (total, abs)
}

fn enumerate(
    nb: &[usize],
    labels: &[usize],
    b: &[Vec<f64>],
    chosen: &mut Vec<usize>,
    prod: f64,
    total: &mut f64,
    abs: &mut f64,
) {
    if chosen.len() == labels.len() {
        *total += prod;
        *abs += prod.abs();
        return;
    }
    let label = labels[chosen.len()];
    for &j in nb {
        if chosen.contains(&j) {
            continue;
        }
        chosen.push(j);
        enumerate(nb, labels, b, chosen, prod * b[label][j], total, abs);
        chosen.pop();
    }
}

/// Worst relative error (scaled by the sum of absolute terms) of the single
/// and full-grid star counts against enumeration, over `graphs` random graphs.
pub fn star_oracle(graphs: usize, seed: u64) -> (f64, usize) {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for t in 0..graphs {
        let n = rng.gen_range(2..=12);
        let p = rng.gen_range(0.2..0.9);
        let g = random_graph(&mut rng, n, p);
        let k = 1 + t % 2;
        let b: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
        let refs: Vec<&[f64]> = b.iter().map(|v| v.as_slice()).collect();
        let cap = 4;
        let grid = star_counts_grid(&g, &refs, cap, 1 << 20).unwrap();
        for alpha in MultiIndex::grid(k, cap) {
            if alpha.order() > 4 {
                continue;
            }
            let (want, scale) = brute_star(&g, alpha.exponents(), &b);
            let tol_scale = scale.max(f64::MIN_POSITIVE);
            let full = grid[alpha.flat(cap)];
            worst = worst.max((full - want).abs() / tol_scale);
            if alpha.order() > 0 {
                let single = count_star(&g, &alpha, &refs).unwrap();
                worst = worst.max((single - want).abs() / tol_scale);
            }
            checked += 1;
        }
    }
    (worst, checked)
}

pub fn moment_table(k: usize, cap: usize, entries: Vec<f64>) -> MomentTable {
    MomentTable {
        k,
        n_cap: cap,
        epsilon: 0.1,
        valid: true,
        pair_diagonal: vec![1.0; k],
        counts: vec![0.0; entries.len()],
        entries,
    }
}

/// Largest deviation of the scaled Legendre Gram matrix from the identity.
pub fn legendre_orthonormality_defect(n: usize, kappas: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for &kappa in kappas {
        let rule = gl(n + 2);
        let mut vi = vec![0.0; n + 1];
        for i in 0..=n {
            for j in 0..=n {
                let ip = rule.integrate(-kappa, kappa, |x| {
                    scaled_legendre_values(n, kappa, x, &mut vi);
                    vi[i] * vi[j]
                });
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((ip - expect).abs());
            }
        }
    }
    worst
}

/// Largest error recovering planted Legendre coefficients from exact
/// moments of `c₀ L̃₀ + c₂ L̃₂ + c₅ L̃₅`.
pub fn planted_recovery_error() -> f64 {
    let (n, kappa) = (6, 2.3);
    let planted = [0.4, 0.0, 0.15, 0.0, 0.0, -0.05, 0.0];
    let rule = gl(20);
    let mut v = vec![0.0; n + 1];
    let mut h = |x: f64| {
        scaled_legendre_values(n, kappa, x, &mut v);
        planted.iter().zip(&v).map(|(c, l)| c * l).sum::<f64>()
    };
    let m: Vec<f64> = (0..=n)
        .map(|j| rule.integrate(-kappa, kappa, |x| x.powi(j as i32) * h(x)))
        .collect();
    let rho = legendre_coefficients(&m, &legendre_basis(n, kappa).unwrap(), 1).unwrap();
    rho.iter().zip(&planted).map(|(r, p)| (r - p).abs()).fold(0.0, f64::max)
}

/// Density of `Ψ_δ` normalized to unit mass.
pub fn bump_density(delta: f64) -> impl Fn(f64) -> f64 {
    let psi = move |x: f64| {
        if x.abs() < delta {
            (-1.0 / (delta * delta - x * x)).exp()
        } else {
            0.0
        }
    };
    let z = gl(2000).integrate(-delta, delta, psi);
    move |x| psi(x) / z
}

/// L1 distance between the normalized positive part of the fit and the
/// mollified two-atom density (atoms ±1), for each degree in `degrees`.
pub fn two_atom_l1(degrees: &[usize]) -> Vec<f64> {
    let (delta, kappa) = (0.2, 1.5);
    let truth = bump_density(delta);
    let u = |x: f64| 0.5 * truth(x - 1.0) + 0.5 * truth(x + 1.0);
    let res = 20_000;
    let h = 2.0 * kappa / res as f64;
    degrees
        .iter()
        .map(|&n| {
            let p: Vec<f64> = (0..=n).map(|j| if j % 2 == 0 { 1.0 } else { 0.0 }).collect();
            let mm = mollifier_moments(delta, n).unwrap();
            let m = mollify_moments(&moment_table(1, n, p), &mm).unwrap();
            let fit = fit_density(&m, &legendre_basis(n, kappa).unwrap(), 1, delta, 256).unwrap();
            (0..res)
                .map(|r| {
                    let x = -kappa + (r as f64 + 0.5) * h;
                    (eval_density_plus(&fit, &[x]) / fit.l1_norm_plus - u(x)).abs() * h
                })
                .sum()
        })
        .collect()
}
