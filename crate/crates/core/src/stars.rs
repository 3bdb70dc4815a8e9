//! Weighted star counts on the held-out edges and their normalizations.
//!
//! For a multi-index `α` over the `K` informative directions, `A_α` sums
//! `∏_ℓ B_{I_ℓ}(i_ℓ)` over centers `w` and ordered tuples of pairwise distinct
//! neighbors of `w`. The normalized values `P_α` estimate the joint moments
//! `∫ f_α` of the eigenfunctions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::SparseGraph;

/// Default cap on the number of table entries `(N+1)^K`.
pub const DEFAULT_MAX_ENTRIES: usize = 1 << 20;

const CENTER_CHUNK: usize = 1024;

/// Exponent vector `α`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MultiIndex {
    exponents: Vec<usize>,
}

impl MultiIndex {
    pub fn new(exponents: Vec<usize>) -> Self {
        MultiIndex { exponents }
    }

    pub fn zero(k: usize) -> Self {
        MultiIndex { exponents: vec![0; k] }
    }

    pub fn exponents(&self) -> &[usize] {
        &self.exponents
    }

    pub fn dim(&self) -> usize {
        self.exponents.len()
    }

    /// `|α|`
    pub fn order(&self) -> usize {
        self.exponents.iter().sum()
    }

    /// Nondecreasing leaf labels `I^α` in which label `i` occurs `α_i` times.
    pub fn labels(&self) -> Vec<usize> {
        self.exponents
            .iter()
            .enumerate()
            .flat_map(|(i, &a)| std::iter::repeat_n(i, a))
            .collect()
    }

    /// `α! = ∏ α_i!`
    pub fn factorial(&self) -> f64 {
        self.exponents.iter().map(|&a| factorial(a)).product()
    }

    /// Position in the row-major `(cap+1)^K` grid, first coordinate slowest.
    pub fn flat(&self, cap: usize) -> usize {
        self.exponents.iter().fold(0, |acc, &a| acc * (cap + 1) + a)
    }

    pub fn from_flat(mut index: usize, k: usize, cap: usize) -> Self {
        let mut exponents = vec![0; k];
        for slot in exponents.iter_mut().rev() {
            *slot = index % (cap + 1);
            index /= cap + 1;
        }
        MultiIndex { exponents }
    }

    /// All `0 ≤ α ≤ (cap,…,cap)` in row-major order.
    pub fn grid(k: usize, cap: usize) -> impl Iterator<Item = MultiIndex> {
        (0..grid_len(k, cap).unwrap_or(0)).map(move |i| MultiIndex::from_flat(i, k, cap))
    }
}

pub fn factorial(a: usize) -> f64 {
    (1..=a).map(|i| i as f64).product()
}

/// `(cap+1)^k`, or `None` on overflow.
pub fn grid_len(k: usize, cap: usize) -> Option<usize> {
    (0..k).try_fold(1usize, |acc, _| acc.checked_mul(cap + 1))
}

fn check_maps(g2: &SparseGraph, b: &[&[f64]]) -> Result<()> {
    for (k, map) in b.iter().enumerate() {
        if map.len() != g2.n() {
            return Err(Error::DimensionMismatch(format!(
                "vertex map {k} has {} entries for {} vertices",
                map.len(),
                g2.n()
            )));
        }
    }
    Ok(())
}

/// `A_kk = Σ_{i∼j} B_k(i)B_k(j)` over ordered adjacent pairs.
pub fn count_pair(g2: &SparseGraph, bk: &[f64]) -> Result<f64> {
    check_maps(g2, &[bk])?;
    let s: f64 = g2.edges().iter().map(|&(u, v)| bk[u] * bk[v]).sum();
    Ok(2.0 * s)
}

/// `P_kk = A_kk / (ε λ_k)`.
pub fn normalize_pair(a_kk: f64, epsilon: f64, lambda_k: f64) -> Result<f64> {
    if lambda_k == 0.0 || !lambda_k.is_finite() {
        return Err(Error::InvalidArgument(format!("eigenvalue must be nonzero, got {lambda_k}")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(a_kk / (epsilon * lambda_k))
}

/// Mixed-radix layout of a truncated polynomial in `K` variables with
/// degree at most `caps[i]` in variable `i`, first variable slowest.
struct Truncation {
    caps: Vec<usize>,
    stride: Vec<usize>,
    len: usize,
}

impl Truncation {
    fn new(caps: Vec<usize>) -> Option<Self> {
        let mut stride = vec![1usize; caps.len()];
        let mut len = 1usize;
        for i in (0..caps.len()).rev() {
            stride[i] = len;
            len = len.checked_mul(caps[i] + 1)?;
        }
        Some(Truncation { caps, stride, len })
    }

    /// Overwrites `poly` with `∏_{j∼w} (1 + Σ_i t_i B_i(j))`, truncated.
    fn center(&self, g2: &SparseGraph, w: usize, b: &[&[f64]], poly: &mut [f64]) {
        poly.iter_mut().for_each(|c| *c = 0.0);
        poly[0] = 1.0;
        for &j in g2.neighbors(w) {
            // high to low, so each neighbour enters at most once
            for idx in (1..self.len).rev() {
                let mut add = 0.0;
                for (i, bi) in b.iter().enumerate() {
                    if (idx / self.stride[i]) % (self.caps[i] + 1) > 0 {
                        add += bi[j] * poly[idx - self.stride[i]];
                    }
                }
                poly[idx] += add;
            }
        }
    }
}

/// `A_α` for one multi-index, from the generating function truncated to the
/// box `[0, α]`.
pub fn count_star(g2: &SparseGraph, alpha: &MultiIndex, b: &[&[f64]]) -> Result<f64> {
    if alpha.order() == 0 {
        return Err(Error::InvalidArgument("star count needs at least one leaf".into()));
    }
    if alpha.dim() > b.len() {
        return Err(Error::DimensionMismatch(format!(
            "multi-index has {} coordinates but {} vertex maps were given",
            alpha.dim(),
            b.len()
        )));
    }
    check_maps(g2, b)?;
    let shape = Truncation::new(alpha.exponents().to_vec())
        .ok_or_else(|| Error::InvalidArgument("multi-index is too large".into()))?;
    let maps = &b[..alpha.dim()];
    let m = alpha.order();
    let top = shape.len - 1;
    let sum = chunked_sum(g2.n(), |range| {
        let mut poly = vec![0.0; shape.len];
        range
            .filter(|&w| g2.degree(w) >= m)
            .map(|w| {
                shape.center(g2, w, maps, &mut poly);
                poly[top]
            })
            .sum()
    });
    Ok(sum * alpha.factorial())
}

/// Deterministic parallel sum over centers in fixed chunks.
fn chunked_sum(n: usize, f: impl Fn(std::ops::Range<usize>) -> f64 + Sync) -> f64 {
    let starts: Vec<usize> = (0..n).step_by(CENTER_CHUNK).collect();
    let partial: Vec<f64> = starts
        .par_iter()
        .map(|&s| f(s..(s + CENTER_CHUNK).min(n)))
        .collect();
    partial.iter().sum()
}

/// `P_α = A_α n^{|α|/2−1} / (ε^{|α|} ∏_i (sqrt(P_ii) λ_i)^{α_i})`.
///
/// Returns `None` when some `P_ii ≤ 0` for a direction the table uses, in
/// which case the whole table is invalid.
pub fn normalize_star(
    a_alpha: f64,
    alpha: &MultiIndex,
    n: usize,
    epsilon: f64,
    lambdas: &[f64],
    p_diag: &[f64],
) -> Option<f64> {
    if p_diag.iter().any(|&p| !(p > 0.0)) {
        return None;
    }
    let order = alpha.order() as i32;
    let mut denom = epsilon.powi(order);
    for (i, &a) in alpha.exponents().iter().enumerate() {
        denom *= (p_diag[i].sqrt() * lambdas[i]).powi(a as i32);
    }
    Some(a_alpha * (n as f64).powf(order as f64 / 2.0 - 1.0) / denom)
}

/// Normalized moment estimates over the full grid `0 ≤ α ≤ (N,…,N)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    pub k: usize,
    pub n_cap: usize,
    pub epsilon: f64,
    pub valid: bool,
    pub pair_diagonal: Vec<f64>,
    /// Raw counts `A_α`, row-major over the grid.
    pub counts: Vec<f64>,
    /// `P_α`, row-major over the grid; all zero when invalid.
    pub entries: Vec<f64>,
}

impl MomentTable {
    pub fn get(&self, alpha: &MultiIndex) -> f64 {
        self.entries[alpha.flat(self.n_cap)]
    }

    pub fn dump(&self) -> MomentTableDump {
        MomentTableDump {
            k: self.k,
            n: self.n_cap,
            epsilon: self.epsilon,
            valid: self.valid,
            p_diag: self.pair_diagonal.clone(),
            entries: MultiIndex::grid(self.k, self.n_cap)
                .zip(&self.entries)
                .map(|(a, &value)| MomentEntry {
                    alpha: a.exponents,
                    value,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub alpha: Vec<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTableDump {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub epsilon: f64,
    pub valid: bool,
    #[serde(rename = "P_diag")]
    pub p_diag: Vec<f64>,
    pub entries: Vec<MomentEntry>,
}

/// Inputs taken from the spectrum of the retained edges.
#[derive(Debug, Clone, Copy)]
pub struct StarInputs<'a> {
    /// `B_k(v)`, one map per informative direction.
    pub aggregates: &'a [Vec<f64>],
    pub lambdas: &'a [f64],
    pub epsilon: f64,
}

/// Raw counts `A_α` for the whole grid in one pass over centers.
///
/// Per center `w`, `A_α(w) = α! [t^α] ∏_{j∼w} (1 + Σ_i t_i B_i(j))`, the
/// product truncated at degree `cap` in each variable. Expanding the product
/// selects distinct neighbors and assigns each a label; `α!` orders the leaves.
pub fn star_counts_grid(g2: &SparseGraph, b: &[&[f64]], cap: usize, max_entries: usize) -> Result<Vec<f64>> {
    check_maps(g2, b)?;
    let k = b.len();
    let len = grid_len(k, cap)
        .filter(|&l| l <= max_entries)
        .ok_or(Error::TableTooLarge {
            entries: grid_len(k, cap).unwrap_or(usize::MAX),
            cap: max_entries,
        })?;
    let shape = Truncation::new(vec![cap; k]).expect("length checked above");
    let starts: Vec<usize> = (0..g2.n()).step_by(CENTER_CHUNK).collect();
    let partial: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&s| {
            let mut acc = vec![0.0; len];
            let mut poly = vec![0.0; len];
            for w in s..(s + CENTER_CHUNK).min(g2.n()) {
                shape.center(g2, w, b, &mut poly);
                acc.iter_mut().zip(&poly).for_each(|(a, p)| *a += p);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; len];
    for p in &partial {
        total.iter_mut().zip(p).for_each(|(t, x)| *t += x);
    }
    for (idx, t) in total.iter_mut().enumerate() {
        *t *= MultiIndex::from_flat(idx, k, cap).factorial();
    }
    Ok(total)
}

/// Full table of `P_α` for `0 ≤ α ≤ (N,…,N)`.
pub fn moment_table(g2: &SparseGraph, inputs: StarInputs<'_>, cap: usize, max_entries: usize) -> Result<MomentTable> {
    if cap == 0 {
        return Err(Error::InvalidArgument("moment cap N must be at least 1".into()));
    }
    let k = inputs.aggregates.len();
    if inputs.lambdas.len() < k {
        return Err(Error::DimensionMismatch(format!(
            "{} eigenvalues for {k} vertex maps",
            inputs.lambdas.len()
        )));
    }
    let b: Vec<&[f64]> = inputs.aggregates.iter().map(Vec::as_slice).collect();
    let counts = star_counts_grid(g2, &b, cap, max_entries)?;
    let pair_diagonal = b
        .iter()
        .zip(inputs.lambdas)
        .map(|(bk, &l)| normalize_pair(count_pair(g2, bk)?, inputs.epsilon, l))
        .collect::<Result<Vec<f64>>>()?;
    let normalized: Option<Vec<f64>> = counts
        .iter()
        .enumerate()
        .map(|(idx, &a)| {
            let alpha = MultiIndex::from_flat(idx, k, cap);
            normalize_star(a, &alpha, g2.n(), inputs.epsilon, inputs.lambdas, &pair_diagonal)
        })
        .collect();
    let valid = normalized.is_some();
    Ok(MomentTable {
        k,
        n_cap: cap,
        epsilon: inputs.epsilon,
        valid,
        pair_diagonal,
        entries: normalized.unwrap_or_else(|| vec![0.0; counts.len()]),
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multi_index_basics() {
        let a = MultiIndex::new(vec![2, 0, 1]);
        assert_eq!(a.order(), 3);
        assert_eq!(a.labels(), vec![0, 0, 2]);
        assert_eq!(a.factorial(), 2.0);
        assert_eq!(MultiIndex::from_flat(a.flat(3), 3, 3), a);
        assert_eq!(MultiIndex::grid(2, 2).count(), 9);
        assert_eq!(grid_len(200, 9), None);
    }

    #[test]
    fn pair_on_single_edge() {
        let g = SparseGraph::from_edges(2, [(0, 1)]).unwrap();
        assert_eq!(count_pair(&g, &[2.0, 3.0]).unwrap(), 12.0);
        assert_eq!(count_pair(&g, &[0.0, 0.0]).unwrap(), 0.0);
        assert!(count_pair(&g, &[1.0]).is_err());
    }

    #[test]
    fn pair_normalization() {
        assert!((normalize_pair(1.2, 0.1, 4.0).unwrap() - 3.0).abs() < 1e-15);
        assert_eq!(normalize_pair(0.0, 0.1, 4.0).unwrap(), 0.0);
        assert!(normalize_pair(1.0, 0.1, 0.0).is_err());
    }

    #[test]
    fn two_leaf_star_excludes_repeats() {
        let g = SparseGraph::from_edges(3, [(0, 1), (0, 2)]).unwrap();
        let b = [0.0, 1.0, 2.0];
        let a = count_star(&g, &MultiIndex::new(vec![2]), &[&b]).unwrap();
        // centers 1 and 2 have one neighbor each, so only center 0 contributes
        assert!((a - 4.0).abs() < 1e-14, "{a}");
    }

    #[test]
    fn single_leaf_is_degree_weighted() {
        let g = SparseGraph::from_edges(4, [(0, 1), (1, 2), (2, 0), (2, 3)]).unwrap();
        let b = [0.5, -1.0, 2.0, 3.0];
        let expect: f64 = (0..4).map(|j| g.degree(j) as f64 * b[j]).sum();
        let a = count_star(&g, &MultiIndex::new(vec![1]), &[&b]).unwrap();
        assert!((a - expect).abs() < 1e-14);
    }

    #[test]
    fn empty_index_normalizes_to_one() {
        let a = MultiIndex::zero(2);
        let p = normalize_star(50.0, &a, 50, 0.3, &[4.0, 3.0], &[1.0, 1.0]).unwrap();
        assert!((p - 1.0).abs() < 1e-15);
        assert_eq!(normalize_star(50.0, &a, 50, 0.3, &[4.0, 3.0], &[1.0, 0.0]), None);
    }

    #[test]
    fn grid_matches_single_counts() {
        let g = SparseGraph::from_edges(6, [(0, 1), (0, 2), (0, 3), (1, 2), (3, 4), (4, 5), (2, 5), (1, 5)]).unwrap();
        let b1 = [0.3, -0.7, 1.1, 0.4, -0.2, 0.9];
        let counts = star_counts_grid(&g, &[&b1], 3, 100).unwrap();
        assert_eq!(counts.len(), 4);
        assert_eq!(counts[0], 6.0);
        for j in 1..=3 {
            let single = count_star(&g, &MultiIndex::new(vec![j]), &[&b1]).unwrap();
            assert!((counts[j] - single).abs() < 1e-12, "{j}: {} vs {single}", counts[j]);
        }
        let b2 = [1.0, 0.5, -0.5, 2.0, 0.1, -1.0];
        assert_eq!(star_counts_grid(&g, &[&b1, &b2], 2, 100).unwrap().len(), 9);
    }

    #[test]
    fn table_cap_and_guard() {
        let g = SparseGraph::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        let b = vec![vec![1.0, 1.0, 1.0]; 3];
        let inputs = StarInputs {
            aggregates: &b,
            lambdas: &[1.0, 1.0, 1.0],
            epsilon: 0.5,
        };
        assert!(matches!(
            moment_table(&g, inputs, 4, 100),
            Err(Error::TableTooLarge { entries: 125, cap: 100 })
        ));
        // a negative eigenvalue makes P_11 negative and invalidates the table
        let bad = StarInputs {
            aggregates: &b[..1],
            lambdas: &[-1.0],
            epsilon: 0.5,
        };
        let t = moment_table(&g, bad, 2, 100).unwrap();
        assert!(!t.valid);
        assert!(t.entries.iter().all(|&p| p == 0.0));
        let good = StarInputs {
            aggregates: &b[..1],
            lambdas: &[1.0],
            epsilon: 0.5,
        };
        let t = moment_table(&g, good, 2, 100).unwrap();
        assert!(t.valid);
        assert!((t.get(&MultiIndex::zero(1)) - 1.0).abs() < 1e-15);
        assert_eq!(t.dump().entries.len(), 3);
    }
}
