//! Restarted Arnoldi for the largest-magnitude eigenvalues of a real,
//! non-symmetric operator.
//!
//! The factorization `A V = V H + f rᵀ` is extended to `ncv` columns, then
//! restarted on an orthonormal basis of the wanted Ritz vectors of `H` (real
//! and imaginary parts for complex pairs). Restarting on the wanted invariant
//! subspace of `H` is the Krylov–Schur form of an exact-shift implicit
//! restart: the unwanted Ritz values are deflated from the new start space.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, scale};
use crate::rng::stage_rng;

use super::operator::LinearOperator;

#[derive(Debug, Clone)]
pub struct KrylovOptions {
    /// Krylov subspace dimension.
    pub ncv: usize,
    /// Relative residual tolerance `‖Ax − θx‖ ≤ tol·|θ|`.
    pub tol: f64,
    pub max_restarts: usize,
    pub seed: u64,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        KrylovOptions {
            ncv: 30,
            tol: 1e-10,
            max_restarts: 500,
            seed: 0,
        }
    }
}

/// Which eigenvalues must converge.
#[derive(Debug, Clone, Copy)]
pub enum Wanted {
    /// The `n` largest in magnitude.
    Count(usize),
    /// Every eigenvalue with `|θ| > sqrt(Re θ₁) + slack`, at most `cap` of
    /// them (always at least the leading one).
    AboveCutoff { slack: f64, cap: usize },
}

#[derive(Debug, Clone)]
pub struct RitzPair {
    pub value: Complex64,
    /// Unit-norm real eigenvector, present for real Ritz values.
    pub vector: Option<Vec<f64>>,
    pub residual_estimate: f64,
}

#[derive(Debug, Clone)]
pub struct KrylovOutcome {
    /// Converged wanted pairs, descending by magnitude.
    pub pairs: Vec<RitzPair>,
    /// All Ritz values of the final projection, descending by magnitude.
    pub ritz_values: Vec<Complex64>,
    pub restarts: usize,
}

/// Realness rule for Ritz values: `|Im θ| ≤ max(1e-8, 1e-3·|θ|)`.
pub fn is_effectively_real(z: Complex64) -> bool {
    z.im.abs() <= f64::max(1e-8, 1e-3 * z.norm())
}

fn magnitude_order(values: &[Complex64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (values[a], values[b]);
        y.norm()
            .total_cmp(&x.norm())
            .then(y.re.total_cmp(&x.re))
            .then(y.im.total_cmp(&x.im))
    });
    order
}

/// Index of the Perron candidate: among values tied (to 1e-9 relative) with
/// the largest magnitude, the one with the largest real part.
pub fn leading_index(sorted: &[Complex64]) -> usize {
    let top = sorted.first().map_or(0.0, |z| z.norm());
    sorted
        .iter()
        .enumerate()
        .take_while(|(_, z)| z.norm() >= top * (1.0 - 1e-9))
        .max_by(|a, b| a.1.re.total_cmp(&b.1.re).then(b.0.cmp(&a.0)))
        .map_or(0, |(i, _)| i)
}

fn is_conjugate_pair(a: Complex64, b: Complex64) -> bool {
    a.im != 0.0 && (a - b.conj()).norm() <= 1e-10 * a.norm().max(1.0)
}

/// Extends `k` so that it does not separate a conjugate pair.
fn keep_pairs_together(sorted: &[Complex64], k: usize, limit: usize) -> usize {
    if k > 0 && k < sorted.len() && is_conjugate_pair(sorted[k - 1], sorted[k]) {
        if k + 1 <= limit {
            k + 1
        } else {
            k - 1
        }
    } else {
        k
    }
}

fn max_abs(h: &DMatrix<f64>) -> f64 {
    h.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Real eigenvector of `h` for a real eigenvalue `theta` by inverse iteration.
fn real_eigenvector(h: &DMatrix<f64>, theta: f64) -> DVector<f64> {
    let m = h.nrows();
    let scale = max_abs(h).max(1.0);
    let mut shift = theta + 1e-10 * scale;
    let mut y = DVector::from_fn(m, |i, _| 1.0 + 0.1 * ((i as f64) * 0.7).sin());
    y /= y.norm();
    for _ in 0..4 {
        let a = h - DMatrix::identity(m, m) * shift;
        match a.lu().solve(&y) {
            Some(z) if z.iter().all(|v| v.is_finite()) && z.norm() > 0.0 => {
                y = &z / z.norm();
            }
            _ => {
                shift += 1e-8 * scale;
            }
        }
    }
    y
}

fn complex_eigenvector(h: &DMatrix<f64>, theta: Complex64) -> DVector<Complex64> {
    let m = h.nrows();
    let scale = max_abs(h).max(1.0);
    let hc: DMatrix<Complex64> = h.map(|v| Complex64::new(v, 0.0));
    let mut shift = theta + Complex64::new(1e-10 * scale, 0.0);
    let mut y = DVector::from_fn(m, |i, _| Complex64::new(1.0 + 0.1 * ((i as f64) * 0.7).sin(), 0.0));
    y /= Complex64::new(y.norm(), 0.0);
    for _ in 0..4 {
        let a = &hc - DMatrix::identity(m, m) * shift;
        match a.lu().solve(&y) {
            Some(z) if z.iter().all(|v| v.re.is_finite() && v.im.is_finite()) && z.norm() > 0.0 => {
                let nz = z.norm();
                y = z / Complex64::new(nz, 0.0);
            }
            _ => shift += Complex64::new(1e-8 * scale, 0.0),
        }
    }
    y
}

struct RitzData {
    values: Vec<Complex64>,
    vectors: Vec<DVector<Complex64>>,
    residuals: Vec<f64>,
}

fn ritz(h: &DMatrix<f64>, r: &[f64], beta: f64, count: usize) -> RitzData {
    let raw = h.clone().complex_eigenvalues();
    let raw: Vec<Complex64> = raw.iter().copied().collect();
    let order = magnitude_order(&raw);
    let values: Vec<Complex64> = order.iter().map(|&i| raw[i]).collect();
    let mut vectors = Vec::with_capacity(count);
    let mut residuals = Vec::with_capacity(count);
    for &theta in values.iter().take(count) {
        let y = if theta.im == 0.0 {
            real_eigenvector(h, theta.re).map(|v| Complex64::new(v, 0.0))
        } else {
            complex_eigenvector(h, theta)
        };
        let proj: Complex64 = y.iter().zip(r).map(|(yi, ri)| yi * *ri).sum();
        residuals.push(beta * proj.norm());
        vectors.push(y);
    }
    RitzData {
        values,
        vectors,
        residuals,
    }
}

/// Orthogonalizes `w` against `basis` by classical Gram–Schmidt, with a
/// second pass only when the first one cancels most of `w` (DGKS criterion),
/// and returns the accumulated coefficients.
fn orthogonalize(basis: &[Vec<f64>], w: &mut [f64]) -> Vec<f64> {
    let mut coeffs = vec![0.0; basis.len()];
    let mut before = norm(w);
    for _ in 0..2 {
        let c: Vec<f64> = basis.iter().map(|v| dot(v, w)).collect();
        for (v, ci) in basis.iter().zip(&c) {
            axpy(-ci, v, w);
        }
        coeffs.iter_mut().zip(&c).for_each(|(a, b)| *a += b);
        let after = norm(w);
        if after > std::f64::consts::FRAC_1_SQRT_2 * before {
            break;
        }
        before = after;
    }
    coeffs
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect();
        orthogonalize(basis, &mut v);
        let nv = norm(&v);
        if nv > 1e-8 {
            scale(1.0 / nv, &mut v);
            return v;
        }
    }
}

/// Orthonormal real basis of the span of the given (complex) vectors;
/// conjugate partners are skipped since their span is already covered.
fn real_span(vectors: &[DVector<Complex64>], values: &[Complex64]) -> Vec<DVector<f64>> {
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let push = |c: DVector<f64>, cols: &mut Vec<DVector<f64>>| {
        let mut c = c;
        for _ in 0..2 {
            for q in cols.iter() {
                let p = q.dot(&c);
                c -= q * p;
            }
        }
        let nc = c.norm();
        if nc > 1e-8 {
            cols.push(c / nc);
        }
    };
    for (y, theta) in vectors.iter().zip(values) {
        if theta.im == 0.0 {
            push(y.map(|z| z.re), &mut cols);
        } else if theta.im > 0.0 {
            push(y.map(|z| z.re), &mut cols);
            push(y.map(|z| z.im), &mut cols);
        } else if !values.iter().any(|t| is_conjugate_pair(*t, *theta)) {
            // unmatched conjugate, keep its real span anyway
            push(y.map(|z| z.re), &mut cols);
            push(y.map(|z| z.im), &mut cols);
        }
    }
    cols
}

/// Largest-magnitude eigenpairs of `op`.
pub fn largest_magnitude<A: LinearOperator>(op: &A, wanted: Wanted, opts: &KrylovOptions) -> Result<KrylovOutcome> {
    let dim = op.dim();
    if dim == 0 {
        return Err(Error::InvalidArgument("operator has dimension 0".into()));
    }
    let m = opts.ncv.max(4).min(dim);
    let mut rng = stage_rng("krylov", opts.seed);

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut h = DMatrix::<f64>::zeros(m, m);
    let mut f: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect();
    // A V_k = V_k H_k + f rᵀ
    let mut r: Vec<f64> = Vec::new();
    let mut restarts = 0usize;
    let mut w = vec![0.0; dim];

    loop {
        // extend to m columns
        for j in basis.len()..m {
            let beta = norm(&f);
            let h_scale = max_abs(&h).max(1.0);
            let v = if j > 0 && beta <= 1e-13 * h_scale {
                // invariant subspace found; continue with a fresh direction
                random_unit(&mut rng, dim, &basis)
            } else {
                for (c, rc) in r.iter().enumerate() {
                    h[(j, c)] = beta * rc;
                }
                let mut v = std::mem::take(&mut f);
                scale(1.0 / beta, &mut v);
                v
            };
            basis.push(v);
            op.apply(&basis[j], &mut w);
            let coeffs = orthogonalize(&basis, &mut w);
            for (i, c) in coeffs.iter().enumerate() {
                h[(i, j)] = *c;
            }
            f = w.clone();
            r = vec![0.0; j + 1];
            r[j] = 1.0;
        }
        let beta = norm(&f);

        let data = ritz(&h, &r, beta, m);
        let values = &data.values;

        let (need, want) = match wanted {
            Wanted::Count(n) => {
                let n = n.clamp(1, m);
                (n, n)
            }
            Wanted::AboveCutoff { slack, cap } => {
                let lead = leading_index(values);
                let cutoff = values[lead].re.max(0.0).sqrt() + slack;
                let above = values.iter().take_while(|z| z.norm() > cutoff).count();
                let need = above.min(cap.max(1)).max(lead + 1).min(m);
                (need, (need + 1).min(m))
            }
        };
        let need = keep_pairs_together(values, need, m);
        let is_converged =
            |i: usize| data.residuals[i] <= opts.tol * values[i].norm().max(f64::EPSILON.powf(2.0 / 3.0));
        let converged = (0..need).filter(|&i| is_converged(i)).count();
        // The first value below the cutoff may still be climbing towards it.
        let settled = match wanted {
            Wanted::AboveCutoff { slack, cap } if need < m && need < cap.max(1) => {
                let lead = leading_index(values);
                let cutoff = values[lead].re.max(0.0).sqrt() + slack;
                is_converged(need) || values[need].norm() + data.residuals[need] < cutoff
            }
            _ => true,
        };

        if converged == need && settled || m == dim && beta <= 1e-12 * max_abs(&h).max(1.0) {
            let pairs = (0..need)
                .map(|i| {
                    let theta = values[i];
                    let vector = is_effectively_real(theta).then(|| {
                        let y = if theta.im == 0.0 {
                            data.vectors[i].map(|z| z.re)
                        } else {
                            real_eigenvector(&h, theta.re)
                        };
                        let mut x = vec![0.0; dim];
                        for (v, yi) in basis.iter().zip(y.iter()) {
                            axpy(*yi, v, &mut x);
                        }
                        let nx = norm(&x);
                        scale(1.0 / nx, &mut x);
                        x
                    });
                    RitzPair {
                        value: theta,
                        vector,
                        residual_estimate: data.residuals[i],
                    }
                })
                .collect();
            return Ok(KrylovOutcome {
                pairs,
                ritz_values: values.clone(),
                restarts,
            });
        }

        if restarts >= opts.max_restarts {
            return Err(Error::NoConvergence {
                restarts,
                converged,
                wanted: need,
                partial: values[..need].to_vec(),
            });
        }
        restarts += 1;

        // thick restart on the wanted Ritz vectors plus a few extra
        let keep = (want + converged.min((m - want) / 2)).max(want + (m - want) / 3);
        let keep = keep_pairs_together(values, keep.min(m - 1), m - 1).max(1);
        let cols = real_span(&data.vectors[..keep], &values[..keep]);
        let k = cols.len();
        let y = DMatrix::from_columns(&cols);

        let mut new_basis: Vec<Vec<f64>> = Vec::with_capacity(m);
        for c in 0..k {
            let mut x = vec![0.0; dim];
            for (i, v) in basis.iter().enumerate() {
                axpy(y[(i, c)], v, &mut x);
            }
            new_basis.push(x);
        }
        let s = y.transpose() * &h * &y;
        let r_vec = DVector::from_vec(r.clone());
        let new_r = y.transpose() * r_vec;

        basis = new_basis;
        h.fill(0.0);
        h.view_mut((0, 0), (k, k)).copy_from(&s);
        r = new_r.iter().copied().collect();
    }
}
