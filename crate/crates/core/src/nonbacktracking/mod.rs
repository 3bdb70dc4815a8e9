//! Non-backtracking spectrum of the first split graph.
//!
//! The informative eigenvalues are the real ones outside the bulk disk of
//! radius `sqrt(λ₁)`, with a slack `e₁(n) = 1/sqrt(log n)`. Their eigenvectors
//! are summed over incoming oriented edges to give one aggregate per vertex.
//!
//! When the graph is the retained part of an edge split, it is a sample from
//! the graphon scaled by the retention fraction `1 − ε`. Reported eigenvalues
//! are divided by that fraction so they estimate the unsplit graphon's
//! eigenvalues, and the slack `e₁` is applied in those units.

mod krylov;
mod operator;

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::SparseGraph;

pub use krylov::{is_effectively_real, largest_magnitude, KrylovOptions, KrylovOutcome, RitzPair, Wanted};
pub use operator::{ihara_bass_reduce, IharaBassOperator, LinearOperator, NbOperator, OrientedEdgeSpace};

pub const DEFAULT_K_CAP: usize = 8;

/// Slack `e₁(n) = 1/sqrt(log n)`.
pub fn default_e1(n: usize) -> f64 {
    1.0 / (n as f64).ln().sqrt()
}

pub fn build_nb_operator(g1: &SparseGraph) -> NbOperator {
    NbOperator::new(g1)
}

#[derive(Debug, Clone)]
pub struct SpectrumOptions {
    pub e1_override: Option<f64>,
    pub tol: f64,
    pub max_restarts: usize,
    pub k_cap: usize,
    pub seed: u64,
    /// Fraction of edges the operator's graph retains from the sampled graph.
    pub retention: f64,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        SpectrumOptions {
            e1_override: None,
            tol: 1e-10,
            max_restarts: 500,
            k_cap: DEFAULT_K_CAP,
            seed: 0,
            retention: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NbSpectrum {
    pub k: usize,
    /// Accepted eigenvalues divided by the retention fraction, descending by
    /// magnitude.
    pub lambdas: Vec<f64>,
    /// Real parts of the accepted eigenvalues of the operator itself.
    pub raw_lambdas: Vec<f64>,
    pub retention: f64,
    /// Unit-norm eigenvectors over oriented edges, one per accepted eigenvalue.
    pub eigenvectors: Vec<Vec<f64>>,
    /// `vertex_aggregates[k][v] = B_k(v)`.
    pub vertex_aggregates: Vec<Vec<f64>>,
    pub e1: f64,
    /// Leading eigenvalue of the operator (not rescaled).
    pub lambda1: f64,
    /// Magnitude cutoff in operator units, `sqrt(λ₁) + retention·e₁`.
    pub cutoff: f64,
    /// `‖Bξ_k − λ_k ξ_k‖₂` with the operator's own eigenvalue.
    pub residuals: Vec<f64>,
    /// Top converged eigenvalues examined when choosing `K`.
    pub top_values: Vec<Complex64>,
    pub restarts: usize,
    pub warnings: Vec<String>,
}

/// Number of accepted eigenvalues: real, and strictly outside
/// `sqrt(λ₁) + slack`. Non-real values are skipped rather than ending the count.
pub fn count_informative(values: &[Complex64], lambda1: f64, slack: f64, cap: usize) -> usize {
    let cutoff = lambda1.max(0.0).sqrt() + slack;
    values
        .iter()
        .filter(|z| z.norm() > cutoff && is_effectively_real(**z))
        .count()
        .min(cap)
}

/// Flips `x` so that its first nonzero coordinate is positive.
fn fix_sign(x: &mut [f64]) {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if let Some(first) = x.iter().find(|v| v.abs() > 1e-10 * peak) {
        if *first < 0.0 {
            x.iter_mut().for_each(|v| *v = -*v);
        }
    }
}

pub fn top_spectrum(op: &NbOperator, n: usize, opts: &SpectrumOptions) -> Result<NbSpectrum> {
    if op.dim() == 0 {
        return Err(Error::DegenerateSpectrum(0.0));
    }
    let e1 = opts.e1_override.unwrap_or_else(|| default_e1(n));
    if !(opts.retention > 0.0 && opts.retention <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "retention must lie in (0,1], got {}",
            opts.retention
        )));
    }
    let slack = opts.retention * e1;
    let k_cap = opts.k_cap.max(1);
    let kopts = KrylovOptions {
        ncv: (4 * k_cap + 10).max(30),
        tol: opts.tol,
        max_restarts: opts.max_restarts,
        seed: opts.seed,
    };
    let outcome = largest_magnitude(op, Wanted::AboveCutoff { slack, cap: k_cap + 1 }, &kopts)?;
    let values: Vec<Complex64> = outcome.pairs.iter().map(|p| p.value).collect();
    let lead = values[krylov::leading_index(&values)];
    // any cycle forces λ₁ ≥ 1; forests have a nilpotent operator
    if !(lead.re >= 0.5) || !is_effectively_real(lead) {
        return Err(Error::DegenerateSpectrum(lead.re));
    }
    let lambda1 = lead.re;
    let cutoff = lambda1.sqrt() + slack;
    let k = count_informative(&values, lambda1, slack, k_cap);

    let mut lambdas = Vec::with_capacity(k);
    let mut eigenvectors = Vec::with_capacity(k);
    let mut residuals = Vec::with_capacity(k);
    let mut scratch = vec![0.0; op.dim()];
    for pair in &outcome.pairs {
        if lambdas.len() == k {
            break;
        }
        if !(pair.value.norm() > cutoff && is_effectively_real(pair.value)) {
            continue;
        }
        let mut x = pair.vector.clone().expect("real Ritz pair carries a vector");
        fix_sign(&mut x);
        op.apply(&x, &mut scratch);
        let lam = pair.value.re;
        let res = scratch
            .iter()
            .zip(&x)
            .map(|(bx, xi)| (bx - lam * xi).powi(2))
            .sum::<f64>()
            .sqrt();
        lambdas.push(lam);
        eigenvectors.push(x);
        residuals.push(res);
    }

    let mut warnings = Vec::new();
    for i in 1..lambdas.len() {
        if (lambdas[i] - lambdas[i - 1]).abs() < crate::graphon::SIMPLICITY_TOL * lambda1 {
            warnings.push(format!(
                "eigenvalues {} and {} are nearly equal ({} vs {})",
                i,
                i + 1,
                lambdas[i - 1],
                lambdas[i]
            ));
        }
    }
    if count_informative(&values, lambda1, slack, usize::MAX) > k_cap {
        warnings.push(format!("number of informative eigenvalues capped at {k_cap}"));
    }

    let vertex_aggregates = vertex_aggregates(&eigenvectors, op.space());
    Ok(NbSpectrum {
        k,
        lambdas: lambdas.iter().map(|l| l / opts.retention).collect(),
        raw_lambdas: lambdas,
        retention: opts.retention,
        eigenvectors,
        vertex_aggregates,
        e1,
        lambda1,
        cutoff,
        residuals,
        top_values: values,
        restarts: outcome.restarts,
        warnings,
    })
}

/// `B_k(v) = Σ_{e : e₂ = v} ξ_k(e)`; isolated vertices get 0.
pub fn vertex_aggregates(eigenvectors: &[Vec<f64>], space: &OrientedEdgeSpace) -> Vec<Vec<f64>> {
    eigenvectors
        .iter()
        .map(|xi| {
            (0..space.n())
                .map(|v| space.into(v).iter().map(|&e| xi[e]).sum())
                .collect()
        })
        .collect()
}

/// JSON summary of a spectrum run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumDump {
    pub version: u32,
    pub config_hash: String,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub lambdas: Vec<f64>,
    pub raw_lambdas: Vec<f64>,
    pub retention: f64,
    pub e1: f64,
    pub lambda1: f64,
    pub cutoff: f64,
    pub residuals: Vec<f64>,
    /// `[re, im]` of every examined eigenvalue.
    pub top_values: Vec<[f64; 2]>,
    pub restarts: usize,
    pub warnings: Vec<String>,
}

pub const SPECTRUM_VERSION: u32 = 1;

impl NbSpectrum {
    pub fn dump(&self, n: usize, config_hash: &str) -> SpectrumDump {
        SpectrumDump {
            version: SPECTRUM_VERSION,
            config_hash: config_hash.to_string(),
            n,
            k: self.k,
            lambdas: self.lambdas.clone(),
            raw_lambdas: self.raw_lambdas.clone(),
            retention: self.retention,
            e1: self.e1,
            lambda1: self.lambda1,
            cutoff: self.cutoff,
            residuals: self.residuals.clone(),
            top_values: self.top_values.iter().map(|z| [z.re, z.im]).collect(),
            restarts: self.restarts,
            warnings: self.warnings.clone(),
        }
    }
}

/// Serializes aggregates as an `n × K` row-major array of little-endian f64.
pub fn aggregates_to_bytes(aggregates: &[Vec<f64>], n: usize) -> Vec<u8> {
    let k = aggregates.len();
    let mut out = Vec::with_capacity(8 * n * k);
    for v in 0..n {
        for agg in aggregates {
            out.extend_from_slice(&agg[v].to_le_bytes());
        }
    }
    out
}

pub fn aggregates_from_bytes(bytes: &[u8], n: usize, k: usize, location: &str) -> Result<Vec<Vec<f64>>> {
    if bytes.len() != 8 * n * k {
        return Err(Error::parse(
            location,
            format!("expected {} bytes for {n} x {k} aggregates, found {}", 8 * n * k, bytes.len()),
        ));
    }
    let mut out = vec![vec![0.0; n]; k];
    for (idx, chunk) in bytes.chunks_exact(8).enumerate() {
        out[idx % k][idx / k] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(out)
}

pub fn write_aggregates(path: &Path, aggregates: &[Vec<f64>], n: usize) -> Result<()> {
    std::fs::write(path, aggregates_to_bytes(aggregates, n)).map_err(|e| Error::io(path, e))
}

pub fn read_aggregates(path: &Path, n: usize, k: usize) -> Result<Vec<Vec<f64>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    aggregates_from_bytes(&bytes, n, k, &path.display().to_string())
}
