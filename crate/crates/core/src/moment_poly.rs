//! Mollified moments and the truncated Legendre density fit.
//!
//! The moment estimates `P_α` are convolved with independent bump noise
//! `N_δ` in every coordinate, turning them into moments `M_α(δ)` of a smooth
//! density `u`. That density is expanded in scaled Legendre polynomials on
//! `[−κ, κ]^K`, truncated at degree `N` per coordinate.
//!
//! Tensors over the grid `0 ≤ α ≤ (N,…,N)` are stored row-major with the first
//! coordinate slowest, matching [`MultiIndex::flat`].

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stars::{grid_len, MomentTable, MultiIndex};

/// Grid points per axis used to normalize and sample the fitted density.
pub const DEFAULT_GRID_RESOLUTION: usize = 128;
/// Relative change under grid doubling above which the L₁ norm is flagged.
pub const L1_REFINEMENT_TOL: f64 = 1e-4;
/// Narrowest mollifier accepted.
pub const MIN_DELTA: f64 = 1e-6;

const QUAD_ORDER: usize = 30;
const QUAD_PANELS: usize = 64;
const QUAD_REL_TOL: f64 = 1e-13;
const QUAD_MAX_DEPTH: usize = 40;

/// Moments `E[N_δ^j]`, `j = 0…N`, of the density proportional to
/// `Ψ_δ(x) = exp(−1/(δ² − x²))` on `(−δ, δ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MollifierMoments {
    pub delta: f64,
    pub moments: Vec<f64>,
}

fn adaptive(rule: &GaussLegendre, f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, abs_tol: f64, depth: usize) -> f64 {
    let mid = 0.5 * (a + b);
    let left = rule.integrate(a, mid, f);
    let right = rule.integrate(mid, b, f);
    let split = left + right;
    if (split - whole).abs() <= abs_tol || depth >= QUAD_MAX_DEPTH {
        return split;
    }
    adaptive(rule, f, a, mid, left, abs_tol / 2.0, depth + 1) + adaptive(rule, f, mid, b, right, abs_tol / 2.0, depth + 1)
}

/// `∫_0^1 f` by panel-wise adaptive Gauss–Legendre, to a tolerance relative
/// to a first composite estimate.
fn integrate_unit(rule: &GaussLegendre, f: &dyn Fn(f64) -> f64) -> f64 {
    let h = 1.0 / QUAD_PANELS as f64;
    let panels: Vec<f64> = (0..QUAD_PANELS)
        .map(|p| rule.integrate(p as f64 * h, (p + 1) as f64 * h, f))
        .collect();
    let rough: f64 = panels.iter().map(|v| v.abs()).sum();
    let abs_tol = QUAD_REL_TOL * rough / QUAD_PANELS as f64;
    panels
        .iter()
        .enumerate()
        .map(|(p, &whole)| adaptive(rule, f, p as f64 * h, (p + 1) as f64 * h, whole, abs_tol, 0))
        .sum()
}

/// Mollifier moments up to order `n`.
///
/// With `x = δt`, `Ψ_δ(δt) = exp(−1/δ²) · exp(−t²/(δ²(1 − t²)))`; the constant
/// factor cancels in the ratio, so the integrand never underflows at `t = 0`.
/// Odd moments vanish by symmetry and are set to exactly zero.
pub fn mollifier_moments(delta: f64, n: usize) -> Result<MollifierMoments> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::InvalidArgument(format!("mollifier width must be positive, got {delta}")));
    }
    if delta < MIN_DELTA {
        return Err(Error::InvalidArgument(format!(
            "mollifier width {delta} is below {MIN_DELTA} and cannot be integrated reliably"
        )));
    }
    let a = 1.0 / (delta * delta);
    let g = move |t: f64| {
        if t >= 1.0 {
            0.0
        } else {
            (-a * t * t / (1.0 - t * t)).exp()
        }
    };
    let rule = GaussLegendre::new(NonZeroUsize::new(QUAD_ORDER).expect("nonzero order"));
    let z = integrate_unit(&rule, &g);
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::InvalidArgument(format!("mollifier normalizer underflowed at width {delta}")));
    }
    let mut moments = vec![0.0; n + 1];
    moments[0] = 1.0;
    for (j, slot) in moments.iter_mut().enumerate().skip(2).step_by(2) {
        let mj = integrate_unit(&rule, &|t: f64| t.powi(j as i32) * g(t));
        *slot = delta.powi(j as i32) * mj / z;
    }
    Ok(MollifierMoments { delta, moments })
}

/// Product of a tensor with a `rows × shape[axis]` matrix along one axis.
pub(crate) fn mode_product(t: &[f64], shape: &[usize], axis: usize, a: &[f64], rows: usize) -> (Vec<f64>, Vec<usize>) {
    let cols = shape[axis];
    debug_assert_eq!(a.len(), rows * cols);
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * rows * inner];
    for o in 0..outer {
        for r in 0..rows {
            let dst = &mut out[(o * rows + r) * inner..(o * rows + r + 1) * inner];
            for c in 0..cols {
                let w = a[r * cols + c];
                if w == 0.0 {
                    continue;
                }
                let src = &t[(o * cols + c) * inner..(o * cols + c + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = rows;
    (out, new_shape)
}

/// Applies the same square matrix along every axis of a `(N+1)^K` tensor.
fn kron_apply(t: &[f64], k: usize, a: &[f64], size: usize) -> Vec<f64> {
    let mut cur = t.to_vec();
    let mut shape = vec![size; k];
    for axis in 0..k {
        let (next, s) = mode_product(&cur, &shape, axis, a, size);
        cur = next;
        shape = s;
    }
    cur
}

fn binomial(a: usize, b: usize) -> f64 {
    (0..b).fold(1.0, |acc, i| acc * (a - i) as f64 / (i + 1) as f64)
}

/// `M_α(δ) = Σ_{β≤α} P_β ∏_i C(α_i, β_i) E[N_δ^{α_i−β_i}]`.
pub fn mollify_moments(table: &MomentTable, mm: &MollifierMoments) -> Result<Vec<f64>> {
    if !table.valid {
        return Err(Error::UnusableFit("moment table is invalid".into()));
    }
    let size = table.n_cap + 1;
    if mm.moments.len() < size {
        return Err(Error::DimensionMismatch(format!(
            "{} mollifier moments for degree {}",
            mm.moments.len(),
            table.n_cap
        )));
    }
    let mut t = vec![0.0; size * size];
    for a in 0..size {
        for b in 0..=a {
            t[a * size + b] = binomial(a, b) * mm.moments[a - b];
        }
    }
    Ok(kron_apply(&table.entries, table.k, &t, size))
}

/// Orthonormal Legendre polynomials on `[−1, 1]` and their rescaling to
/// `[−κ, κ]`, `L̃_i(x) = κ^{−1/2} L_i(x/κ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LegendreBasis {
    pub n: usize,
    pub kappa: f64,
    /// `C[i][j]`: coefficient of `x^j` in `L_i`.
    pub coeffs: Vec<Vec<f64>>,
    /// `C̃[i][j] = C[i][j] / κ^{j+1/2}`.
    pub scaled_coeffs: Vec<Vec<f64>>,
}

pub fn legendre_basis(n: usize, kappa: f64) -> Result<LegendreBasis> {
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(Error::InvalidArgument(format!("kappa must be positive, got {kappa}")));
    }
    // Standard Legendre P_i via (i+1)P_{i+1} = (2i+1)x P_i − i P_{i−1}.
    let mut p: Vec<Vec<f64>> = vec![vec![0.0; n + 1]; n + 1];
    p[0][0] = 1.0;
    if n >= 1 {
        p[1][1] = 1.0;
    }
    for i in 1..n {
        for j in 0..=n {
            let shifted = if j > 0 { p[i][j - 1] } else { 0.0 };
            p[i + 1][j] = ((2 * i + 1) as f64 * shifted - i as f64 * p[i - 1][j]) / (i + 1) as f64;
        }
    }
    let coeffs: Vec<Vec<f64>> = p
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let s = ((2 * i + 1) as f64 / 2.0).sqrt();
            row.iter().map(|c| c * s).collect()
        })
        .collect();
    let scaled_coeffs = coeffs
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(j, c)| c / kappa.powf(j as f64 + 0.5))
                .collect()
        })
        .collect();
    Ok(LegendreBasis {
        n,
        kappa,
        coeffs,
        scaled_coeffs,
    })
}

/// `L̃_0(x) … L̃_n(x)` by the three-term recurrence.
pub fn scaled_legendre_values(n: usize, kappa: f64, x: f64, out: &mut [f64]) {
    let y = x / kappa;
    let mut prev = 0.0;
    let mut cur = 1.0;
    for (i, slot) in out.iter_mut().enumerate().take(n + 1) {
        *slot = cur * ((2 * i + 1) as f64 / (2.0 * kappa)).sqrt();
        let next = ((2 * i + 1) as f64 * y * cur - i as f64 * prev) / (i + 1) as f64;
        prev = cur;
        cur = next;
    }
}

/// Condition number of the Hankel matrix of monomial moments on `[−1, 1]`,
/// `H_{ij} = 2/(i+j−1)` for even `i+j` (1-based) and `0` otherwise.
pub fn hankel_condition(n: usize) -> f64 {
    let h = DMatrix::from_fn(n + 1, n + 1, |i, j| {
        let s = i + j + 2;
        if s % 2 == 0 {
            2.0 / (s - 1) as f64
        } else {
            0.0
        }
    });
    let ev = SymmetricEigen::new(h).eigenvalues;
    let max = ev.iter().cloned().fold(f64::MIN, f64::max);
    let min = ev.iter().cloned().fold(f64::MAX, f64::min);
    max / min
}

/// Fitted density `ĥ_N = Σ_α ρ̂_α L̃_α` on `[−κ, κ]^K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityFit {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub kappa: f64,
    pub delta: f64,
    /// `ρ̂_α`, row-major over the grid.
    pub rho: Vec<f64>,
    /// `‖ĥ_N⁺‖₁`.
    pub l1_norm_plus: f64,
    /// `Σ_α |ρ̂_α| ∏_i sqrt((2α_i+1)/(2κ)) ≥ sup |ĥ_N|`.
    pub max_bound: f64,
    pub grid_resolution: usize,
    pub hankel_condition: f64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Coefficients `ρ̂_α = Σ_β C̃^{⊗K}_{α,β} M_β`, without normalization.
pub fn legendre_coefficients(m: &[f64], basis: &LegendreBasis, k: usize) -> Result<Vec<f64>> {
    let size = basis.n + 1;
    let len = grid_len(k, basis.n).ok_or_else(|| Error::InvalidArgument("coefficient grid overflows".into()))?;
    if m.len() != len {
        return Err(Error::DimensionMismatch(format!(
            "moment tensor has {} entries, expected {len}",
            m.len()
        )));
    }
    let c: Vec<f64> = basis.scaled_coeffs.iter().flatten().copied().collect();
    Ok(kron_apply(m, k, &c, size))
}

/// Fits the density and normalizes its positive part on a tensor grid with
/// `resolution` midpoints per axis.
pub fn fit_density(m: &[f64], basis: &LegendreBasis, k: usize, delta: f64, resolution: usize) -> Result<DensityFit> {
    let rho = legendre_coefficients(m, basis, k)?;
    let kappa = basis.kappa;
    let max_bound = rho
        .iter()
        .enumerate()
        .map(|(idx, r)| {
            let alpha = MultiIndex::from_flat(idx, k, basis.n);
            let w: f64 = alpha
                .exponents()
                .iter()
                .map(|&a| ((2 * a + 1) as f64 / (2.0 * kappa)).sqrt())
                .product();
            r.abs() * w
        })
        .sum();
    let mut fit = DensityFit {
        k,
        n: basis.n,
        kappa,
        delta,
        rho,
        l1_norm_plus: 0.0,
        max_bound,
        grid_resolution: resolution,
        hankel_condition: hankel_condition(basis.n),
        warnings: Vec::new(),
    };
    let l1 = l1_norm_plus(&fit, resolution)?;
    fit.l1_norm_plus = l1.value;
    fit.warnings.extend(l1.warning);
    Ok(fit)
}

impl DensityFit {
    /// The constant density `c` on the box, as a fit.
    pub fn constant(k: usize, kappa: f64, c: f64) -> Self {
        let rho0 = c * (2.0 * kappa).powf(k as f64 / 2.0);
        DensityFit {
            k,
            n: 0,
            kappa,
            delta: 0.0,
            rho: vec![rho0],
            l1_norm_plus: c.max(0.0) * (2.0 * kappa).powi(k as i32),
            max_bound: c.abs(),
            grid_resolution: DEFAULT_GRID_RESOLUTION,
            hankel_condition: 1.0,
            warnings: Vec::new(),
        }
    }

    fn in_box(&self, x: &[f64]) -> bool {
        x.len() == self.k && x.iter().all(|v| v.abs() <= self.kappa)
    }

    /// Values `L̃_j(x_r)` at the midpoints `x_r = −κ + (r+½)·2κ/res`,
    /// as a `res × (N+1)` row-major matrix.
    pub fn axis_matrix(&self, res: usize) -> Vec<f64> {
        let h = 2.0 * self.kappa / res as f64;
        let size = self.n + 1;
        let mut v = vec![0.0; res * size];
        for (r, row) in v.chunks_mut(size).enumerate() {
            scaled_legendre_values(self.n, self.kappa, -self.kappa + (r as f64 + 0.5) * h, row);
        }
        v
    }

    /// `ĥ_N` on the slab of grid points whose first coordinate is midpoint
    /// `r0`, row-major over the remaining `K−1` axes.
    pub fn grid_slab(&self, axis: &[f64], res: usize, r0: usize) -> Vec<f64> {
        let size = self.n + 1;
        let mut shape = vec![size; self.k];
        let (mut cur, s) = mode_product(&self.rho, &shape, 0, &axis[r0 * size..(r0 + 1) * size], 1);
        shape = s;
        for ax in 1..self.k {
            let (next, s) = mode_product(&cur, &shape, ax, axis, res);
            cur = next;
            shape = s;
        }
        cur
    }
}

/// `ĥ_N(x)`, zero outside `[−κ, κ]^K`.
pub fn eval_density(fit: &DensityFit, x: &[f64]) -> f64 {
    eval_density_with(fit, x, &mut Vec::new(), &mut Vec::new())
}

/// [`eval_density`] with caller-owned scratch buffers, for hot loops.
pub fn eval_density_with(fit: &DensityFit, x: &[f64], row: &mut Vec<f64>, work: &mut Vec<f64>) -> f64 {
    if !fit.in_box(x) {
        return 0.0;
    }
    if x.is_empty() {
        return fit.rho[0];
    }
    let size = fit.n + 1;
    row.resize(size, 0.0);
    let mut len = fit.rho.len() / size;
    work.clear();
    work.resize(len, 0.0);
    // contract the contiguous last axis first; later passes run in place,
    // since entry p only reads the block starting at p·size ≥ p
    for (pass, &xi) in x.iter().rev().enumerate() {
        scaled_legendre_values(fit.n, fit.kappa, xi, row);
        if pass > 0 {
            len /= size;
        }
        for p in 0..len {
            let block = if pass == 0 {
                &fit.rho[p * size..(p + 1) * size]
            } else {
                &work[p * size..(p + 1) * size]
            };
            let v: f64 = block.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
            work[p] = v;
        }
    }
    work[0]
}

/// `ĥ_N⁺(x) = max(ĥ_N(x), 0)`.
pub fn eval_density_plus(fit: &DensityFit, x: &[f64]) -> f64 {
    eval_density(fit, x).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct L1Estimate {
    /// Midpoint value at twice the requested resolution.
    pub value: f64,
    /// Midpoint value at the requested resolution.
    pub coarse: f64,
    pub warning: Option<String>,
}

fn positive_mass(fit: &DensityFit, res: usize) -> f64 {
    let axis = fit.axis_matrix(res);
    let partial: Vec<f64> = (0..res)
        .into_par_iter()
        .map(|r0| fit.grid_slab(&axis, res, r0).iter().map(|v| v.max(0.0)).sum())
        .collect();
    let cell = (2.0 * fit.kappa / res as f64).powi(fit.k as i32);
    partial.iter().sum::<f64>() * cell
}

/// `‖ĥ_N⁺‖₁` by the midpoint rule at `res` points per axis, checked against
/// `2·res`. The finer value is returned.
pub fn l1_norm_plus(fit: &DensityFit, res: usize) -> Result<L1Estimate> {
    if res < 32 {
        return Err(Error::InvalidArgument(format!("grid resolution must be at least 32, got {res}")));
    }
    let coarse = positive_mass(fit, res);
    let fine = positive_mass(fit, 2 * res);
    if !(fine > 0.0) {
        return Err(Error::UnusableFit(format!("positive part of the density has mass {fine}")));
    }
    let change = (fine - coarse).abs() / fine;
    let warning = (change >= L1_REFINEMENT_TOL).then(|| {
        format!("L1 norm changed by {change:.2e} relative under grid doubling at resolution {res}")
    });
    Ok(L1Estimate {
        value: fine,
        coarse,
        warning,
    })
}
