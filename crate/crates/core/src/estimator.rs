//! Feature sampling from the fitted density and the step-function estimate
//! `Q̂(x, y) = Σ_i λ_i Z_{⌈xm⌉}(i) Z_{⌈ym⌉}(i)`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphon::Kernel;
use crate::moment_poly::{eval_density_with, DensityFit};
use crate::rng::substream_rng;

pub const ESTIMATE_VERSION: u32 = 1;
/// Rejection sampling is abandoned for the grid sampler below this
/// expected acceptance rate.
pub const MIN_ACCEPTANCE: f64 = 1e-3;
/// Largest number of cells the grid sampler tabulates.
const MAX_GRID_CELLS: usize = 1 << 24;
const ENVELOPE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMethod {
    /// Rejection unless the expected acceptance rate is below [`MIN_ACCEPTANCE`].
    Auto,
    Rejection,
    Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample {
    /// `m × K`, row-major.
    pub z: Vec<f64>,
    pub k: usize,
    pub method: SamplingMethod,
    /// `‖ĥ⁺‖₁ / ((2κ)^K · envelope)`.
    pub expected_acceptance: f64,
}

impl FeatureSample {
    pub fn rows(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.z.len() / self.k
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.k..(i + 1) * self.k]
    }
}

/// `m` i.i.d. draws from `ĥ_N⁺ / ‖ĥ_N⁺‖₁`.
pub fn sample_density(fit: &DensityFit, m: usize, seed: u64) -> Result<FeatureSample> {
    sample_density_with(fit, m, seed, SamplingMethod::Auto)
}

pub fn sample_density_with(fit: &DensityFit, m: usize, seed: u64, method: SamplingMethod) -> Result<FeatureSample> {
    if !(fit.l1_norm_plus > 0.0) || !(fit.max_bound > 0.0) {
        return Err(Error::UnusableFit(format!(
            "density fit has L1 norm {} and envelope {}",
            fit.l1_norm_plus, fit.max_bound
        )));
    }
    let k = fit.k;
    let volume = (2.0 * fit.kappa).powi(k as i32);
    let expected_acceptance = (fit.l1_norm_plus / (volume * fit.max_bound)).min(1.0);
    let chosen = match method {
        SamplingMethod::Auto if expected_acceptance < MIN_ACCEPTANCE => SamplingMethod::Grid,
        SamplingMethod::Auto => SamplingMethod::Rejection,
        other => other,
    };
    let z = match chosen {
        SamplingMethod::Grid => sample_grid(fit, m, seed)?,
        _ => sample_rejection(fit, m, seed)?,
    };
    Ok(FeatureSample {
        z,
        k,
        method: chosen,
        expected_acceptance,
    })
}

fn sample_rejection(fit: &DensityFit, m: usize, seed: u64) -> Result<Vec<f64>> {
    let k = fit.k;
    let envelope = fit.max_bound;
    let rows: Vec<Result<Vec<f64>>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream_rng("density-rejection", seed, i as u64);
            let mut x = vec![0.0; k];
            let (mut row, mut work) = (Vec::new(), Vec::new());
            loop {
                for xi in x.iter_mut() {
                    *xi = rng.gen_range(-fit.kappa..fit.kappa);
                }
                let h = eval_density_with(fit, &x, &mut row, &mut work);
                if h > envelope * (1.0 + ENVELOPE_SLACK) {
                    return Err(Error::Consistency(format!(
                        "density value {h} exceeds its envelope {envelope}"
                    )));
                }
                if rng.gen::<f64>() * envelope < h {
                    return Ok(x);
                }
            }
        })
        .collect();
    let mut z = Vec::with_capacity(m * k);
    for r in rows {
        z.extend(r?);
    }
    Ok(z)
}

/// Grid resolution per axis for the fallback sampler.
fn grid_resolution(fit: &DensityFit) -> usize {
    let mut res = fit.grid_resolution.max(2);
    while res > 2 && res.checked_pow(fit.k as u32).is_none_or(|c| c > MAX_GRID_CELLS) {
        res /= 2;
    }
    res
}

/// Inverse-CDF sampling of grid cells weighted by the positive part at the
/// cell midpoint, uniform within the chosen cell.
fn sample_grid(fit: &DensityFit, m: usize, seed: u64) -> Result<Vec<f64>> {
    let k = fit.k;
    let res = grid_resolution(fit);
    let axis = fit.axis_matrix(res);
    let slabs: Vec<Vec<f64>> = (0..res)
        .into_par_iter()
        .map(|r0| fit.grid_slab(&axis, res, r0))
        .collect();
    let mut cdf = Vec::with_capacity(res.pow(k as u32));
    let mut acc = 0.0;
    for v in slabs.iter().flatten() {
        acc += v.max(0.0);
        cdf.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::UnusableFit("density has no positive mass on the sampling grid".into()));
    }
    let h = 2.0 * fit.kappa / res as f64;
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream_rng("density-grid", seed, i as u64);
            let u = rng.gen::<f64>() * acc;
            let mut cell = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            let mut x = vec![0.0; k];
            for xi in x.iter_mut().rev() {
                let r = cell % res;
                cell /= res;
                *xi = -fit.kappa + (r as f64 + rng.gen::<f64>()) * h;
            }
            x
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

/// The step-function estimate built from `m` sampled feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphonEstimate {
    pub version: u32,
    pub lambdas: Vec<f64>,
    pub m: usize,
    pub kappa: f64,
    /// `m × K`, row-major.
    #[serde(rename = "Z")]
    pub z: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub config_hash: String,
}

/// `Q̂` from sampled rows and eigenvalue estimates.
pub fn assemble(z: Vec<f64>, lambdas: Vec<f64>, kappa: f64) -> Result<GraphonEstimate> {
    let k = lambdas.len();
    if k == 0 || z.is_empty() || z.len() % k != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} feature values do not form rows of length {k}",
            z.len()
        )));
    }
    Ok(GraphonEstimate {
        version: ESTIMATE_VERSION,
        m: z.len() / k,
        lambdas,
        kappa,
        z,
        seed: 0,
        config_hash: String::new(),
    })
}

impl GraphonEstimate {
    pub fn k(&self) -> usize {
        self.lambdas.len()
    }

    /// 0-based piece of `x`: `⌈xm⌉ − 1`, with `x = 0` in the first piece.
    pub fn piece(&self, x: f64) -> usize {
        let p = (x * self.m as f64).ceil() as usize;
        p.clamp(1, self.m) - 1
    }

    pub fn row(&self, piece: usize) -> &[f64] {
        let k = self.k();
        &self.z[piece * k..(piece + 1) * k]
    }

    /// `f̂_i(x)` for all `i`.
    pub fn features(&self, x: f64) -> &[f64] {
        self.row(self.piece(x))
    }

    /// Kernel value between two pieces.
    pub fn piece_value(&self, a: usize, b: usize) -> f64 {
        self.lambdas
            .iter()
            .zip(self.row(a).iter().zip(self.row(b)))
            .map(|(l, (p, q))| l * (p * q))
            .sum()
    }

    pub fn evaluate(&self, x: f64, y: f64) -> Result<f64> {
        if !((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)) {
            return Err(Error::OutOfRange { x, y });
        }
        Ok(self.value(x, y))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str, location: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::parse(format!("{location}:{}:{}", e.line(), e.column()), e.to_string()))?;
        let version = raw.get("version").and_then(|v| v.as_u64());
        match version {
            Some(v) if v == ESTIMATE_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::UnsupportedVersion {
                    found: u32::try_from(v).unwrap_or(u32::MAX),
                    expected: ESTIMATE_VERSION,
                })
            }
            None => return Err(Error::parse(location, "missing numeric field `version`")),
        }
        let est: GraphonEstimate = serde_json::from_str(text)
            .map_err(|e| Error::parse(format!("{location}:{}:{}", e.line(), e.column()), e.to_string()))?;
        let k = est.lambdas.len();
        if k == 0 || est.m == 0 || est.z.len() != est.m * k {
            return Err(Error::parse(
                location,
                format!(
                    "field `m` = {} with K = {k} does not match {} entries of `Z`",
                    est.m,
                    est.z.len()
                ),
            ));
        }
        Ok(est)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// `Q̂` at the midpoints of a `g × g` grid, one CSV row per `x`.
    pub fn grid_csv(&self, g: usize) -> String {
        let mut out = String::new();
        for r in 0..g {
            let x = (r as f64 + 0.5) / g as f64;
            let row: Vec<String> = (0..g)
                .map(|s| self.value(x, (s as f64 + 0.5) / g as f64).to_string())
                .collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    /// Fraction of `g × g` midpoints where `Q̂ < 0`.
    pub fn fraction_negative(&self, g: usize) -> f64 {
        let pieces: Vec<usize> = (0..g).map(|r| self.piece((r as f64 + 0.5) / g as f64)).collect();
        let negative: usize = pieces
            .par_iter()
            .map(|&a| pieces.iter().filter(|&&b| self.piece_value(a, b) < 0.0).count())
            .sum();
        negative as f64 / (g * g) as f64
    }
}

impl Kernel for GraphonEstimate {
    fn value(&self, x: f64, y: f64) -> f64 {
        self.piece_value(self.piece(x), self.piece(y))
    }
}
