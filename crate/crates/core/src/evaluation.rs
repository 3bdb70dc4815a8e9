//! Estimator quality: grid L₂ distances, alignment distances, and the
//! eigenvector overlap diagnostics `C_ij`.
//!
//! The alignment distance takes an infimum over measure-preserving maps,
//! which is not computable in general. Two substitutes are provided: an
//! upper bound from canonical rearrangements of both kernels, and the exact
//! minimum over cell permutations for small equal-cell kernels.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::GraphonEstimate;
use crate::graphon::{Kernel, SpectralGraphon};
use crate::sampler::LatentAssignment;

/// Relative change under grid doubling above which a distance is flagged.
pub const L2_REFINEMENT_TOL: f64 = 1e-3;
/// Largest cell count for the exhaustive permutation search.
pub const MAX_EXACT_CELLS: usize = 9;
/// Coordinate priority orders are searched up to this many features.
const MAX_KEY_ORDER_SEARCH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2Distance {
    pub value: f64,
    /// Value at twice the grid resolution.
    pub refined: f64,
    pub warning: Option<String>,
}

fn grid_l2(a: &(dyn Kernel + Sync), b: &(dyn Kernel + Sync), g: usize) -> f64 {
    let pts: Vec<f64> = (0..g).map(|r| (r as f64 + 0.5) / g as f64).collect();
    let rows: Vec<f64> = pts
        .par_iter()
        .map(|&x| pts.iter().map(|&y| (a.value(x, y) - b.value(x, y)).powi(2)).sum())
        .collect();
    (rows.iter().sum::<f64>() / (g * g) as f64).sqrt()
}

/// `‖a − b‖₂` on `[0,1]²` by the midpoint rule on a `g × g` grid.
pub fn l2_distance_grid(a: &(dyn Kernel + Sync), b: &(dyn Kernel + Sync), g: usize) -> Result<L2Distance> {
    if g == 0 {
        return Err(Error::InvalidArgument("grid resolution must be positive".into()));
    }
    let value = grid_l2(a, b, g);
    let refined = grid_l2(a, b, 2 * g);
    let change = (refined - value).abs() / refined.max(value).max(f64::MIN_POSITIVE);
    let warning = (change >= L2_REFINEMENT_TOL && refined.max(value) > 1e-12).then(|| {
        format!("grid L2 distance changed by {change:.2e} relative under doubling from {g}")
    });
    Ok(L2Distance { value, refined, warning })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentMethod {
    CanonicalSort,
    ExactPermutation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub delta2_upper: f64,
    /// Signs applied to the estimated features, `±1` each.
    pub sign_pattern: Vec<i8>,
    /// Coordinate priority of the lexicographic sort key.
    pub key_order: Vec<usize>,
    pub method: AlignmentMethod,
    pub grid: usize,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    heap_permute(k, &mut cur, &mut out);
    out.sort();
    out
}

fn heap_permute(n: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if n <= 1 {
        out.push(cur.clone());
        return;
    }
    for i in 0..n - 1 {
        heap_permute(n - 1, cur, out);
        if n % 2 == 0 {
            cur.swap(i, n - 1);
        } else {
            cur.swap(0, n - 1);
        }
    }
    heap_permute(n - 1, cur, out);
}

/// Truth rearranged so that blocks appear in canonical order.
struct SortedTruth {
    /// Right end of each sorted block.
    ends: Vec<f64>,
    /// Kernel values between sorted blocks.
    values: Vec<Vec<f64>>,
}

fn sort_truth(truth: &SpectralGraphon, order: &[usize]) -> SortedTruth {
    let f0 = &truth.eigenfunctions[0];
    let blocks = f0.values.len();
    let measures: Vec<f64> = f0.breakpoints.windows(2).map(|w| w[1] - w[0]).collect();
    let keys: Vec<Vec<f64>> = (0..blocks)
        .map(|b| order.iter().map(|&i| truth.eigenfunctions[i].values[b]).collect())
        .collect();
    let mut idx: Vec<usize> = (0..blocks).collect();
    idx.sort_by(|&a, &b| lex_cmp(&keys[a], &keys[b]));
    let matrix = truth.block_matrix();
    let mut acc = 0.0;
    let ends = idx
        .iter()
        .map(|&b| {
            acc += measures[b];
            acc
        })
        .collect();
    let values = idx
        .iter()
        .map(|&a| idx.iter().map(|&b| matrix[a][b]).collect())
        .collect();
    SortedTruth { ends, values }
}

/// Upper bound on the alignment distance between an estimate and a step
/// truth.
///
/// Both kernels are rearranged by sorting their cells lexicographically by
/// feature vectors, which is a measure-preserving map on each side. The
/// search covers every sign pattern of the estimated features and, for up to
/// four features, every coordinate priority of the sort key; the smallest
/// grid distance is reported.
pub fn delta2_upper(estimate: &GraphonEstimate, truth: &SpectralGraphon, g: usize) -> Result<AlignmentReport> {
    let k = estimate.k();
    if truth.rank() < k {
        return Err(Error::DimensionMismatch(format!(
            "estimate has {k} features but the truth has {} eigenpairs",
            truth.rank()
        )));
    }
    if g == 0 || estimate.m == 0 {
        return Err(Error::InvalidArgument("empty grid or estimate".into()));
    }
    let orders = if k <= MAX_KEY_ORDER_SEARCH {
        permutations(k)
    } else {
        vec![(0..k).collect()]
    };
    let pts: Vec<f64> = (0..g).map(|r| (r as f64 + 0.5) / g as f64).collect();
    let mut best: Option<AlignmentReport> = None;
    for order in &orders {
        let sorted_truth = sort_truth(truth, order);
        let truth_block: Vec<usize> = pts
            .iter()
            .map(|&t| sorted_truth.ends.partition_point(|&e| e <= t).min(sorted_truth.ends.len() - 1))
            .collect();
        for mask in 0..(1usize << k) {
            let signs: Vec<f64> = (0..k).map(|i| if mask >> i & 1 == 1 { -1.0 } else { 1.0 }).collect();
            let keys: Vec<Vec<f64>> = (0..estimate.m)
                .map(|p| {
                    let row = estimate.row(p);
                    order.iter().map(|&i| signs[i] * row[i]).collect()
                })
                .collect();
            let mut idx: Vec<usize> = (0..estimate.m).collect();
            idx.sort_by(|&a, &b| lex_cmp(&keys[a], &keys[b]));
            let est_piece: Vec<usize> = pts.iter().map(|&t| idx[estimate.piece(t)]).collect();
            let total: f64 = (0..g)
                .into_par_iter()
                .map(|r| {
                    (0..g)
                        .map(|s| {
                            let q = estimate.piece_value(est_piece[r], est_piece[s]);
                            (q - sorted_truth.values[truth_block[r]][truth_block[s]]).powi(2)
                        })
                        .sum::<f64>()
                })
                .collect::<Vec<f64>>()
                .iter()
                .sum();
            let dist = (total / (g * g) as f64).sqrt();
            if best.as_ref().is_none_or(|b| dist < b.delta2_upper) {
                best = Some(AlignmentReport {
                    delta2_upper: dist,
                    sign_pattern: signs.iter().map(|&s| s as i8).collect(),
                    key_order: order.clone(),
                    method: AlignmentMethod::CanonicalSort,
                    grid: g,
                });
            }
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// Exact `min_π ‖a − b∘(π×π)‖₂` over permutations of `p` equal cells.
pub fn delta2_exact_cells(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let p = a.len();
    if b.len() != p || a.iter().chain(b).any(|r| r.len() != p) {
        return Err(Error::DimensionMismatch("both kernels must be p × p on the same p".into()));
    }
    if p > MAX_EXACT_CELLS {
        return Err(Error::InvalidArgument(format!(
            "{p} cells is too many for exhaustive search; use delta2_upper instead"
        )));
    }
    let best = permutations(p)
        .par_iter()
        .map(|pi| {
            let mut s = 0.0;
            for i in 0..p {
                for j in 0..p {
                    s += (a[i][j] - b[pi[i]][pi[j]]).powi(2);
                }
            }
            s
        })
        .reduce(|| f64::INFINITY, f64::min);
    Ok((best / (p * p) as f64).sqrt())
}

/// Overlaps `C_ij = n^{−1/2} Σ_v B_i(v) f_j(X_v)` between vertex aggregates
/// and true eigenfunctions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapDiagnostics {
    /// `K × L`, one row per estimated direction.
    pub c: Vec<Vec<f64>>,
    /// `Σ_ℓ μ_ℓ C_iℓ²`.
    pub contraction: Vec<f64>,
    /// `μ_i C_ii²`.
    pub diagonal: Vec<f64>,
}

pub fn diagnostics_c(
    aggregates: &[Vec<f64>],
    latents: Option<&LatentAssignment>,
    truth: &SpectralGraphon,
) -> Result<OverlapDiagnostics> {
    let latents = latents.ok_or_else(|| {
        Error::DiagnosticsUnavailable("latent positions are only known for simulated graphs".into())
    })?;
    let n = latents.len();
    if aggregates.iter().any(|b| b.len() != n) {
        return Err(Error::DimensionMismatch(format!("vertex aggregates do not cover {n} latents")));
    }
    let scale = 1.0 / (n as f64).sqrt();
    let c: Vec<Vec<f64>> = aggregates
        .iter()
        .map(|b| {
            truth
                .eigenfunctions
                .iter()
                .map(|f| scale * b.iter().zip(&latents.latents).map(|(bv, &x)| bv * f.eval(x)).sum::<f64>())
                .collect()
        })
        .collect();
    let contraction = c
        .iter()
        .map(|row| row.iter().zip(&truth.eigenvalues).map(|(ci, mu)| mu * ci * ci).sum())
        .collect();
    let diagonal = c
        .iter()
        .enumerate()
        .map(|(i, row)| match (row.get(i), truth.eigenvalues.get(i)) {
            (Some(ci), Some(mu)) => mu * ci * ci,
            _ => 0.0,
        })
        .collect();
    Ok(OverlapDiagnostics {
        c,
        contraction,
        diagonal,
    })
}

/// Metrics file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub config_hash: String,
    pub delta2_upper: Option<f64>,
    pub sign_pattern: Option<Vec<i8>>,
    pub key_order: Option<Vec<usize>>,
    pub l2_grid: Option<f64>,
    #[serde(rename = "C_matrix")]
    pub c_matrix: Option<Vec<Vec<f64>>>,
    pub c_contraction: Option<Vec<f64>>,
    pub c_diagonal: Option<Vec<f64>>,
    #[serde(rename = "fraction_negative_Qhat")]
    pub fraction_negative_qhat: f64,
    pub warnings: Vec<String>,
    pub runtime_sec: BTreeMap<String, f64>,
}
