//! Step graphons, their spectral form, and the checks the estimator relies on.
//!
//! A step graphon partitions `[0,1]` into consecutive blocks of the given
//! measures and is constant on each product of blocks. Its integral operator
//! has the same nonzero spectrum as the symmetric matrix `D^{1/2} W D^{1/2}`
//! with `D = diag(block_measures)`, which is what [`spectral_decompose`] uses.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MEASURE_TOL: f64 = 1e-12;

/// Anything that can be evaluated as a kernel on `[0,1]^2`.
pub trait Kernel {
    fn value(&self, x: f64, y: f64) -> f64;
}

fn check_unit_square(x: f64, y: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y) {
        Ok(())
    } else {
        Err(Error::OutOfRange { x, y })
    }
}

/// Index of the right-continuous piece of `breaks` containing `x`; `x = 1`
/// belongs to the last piece.
fn piece_index(breaks: &[f64], x: f64) -> usize {
    let pieces = breaks.len() - 1;
    // first breakpoint strictly greater than x, minus one
    let idx = breaks.partition_point(|&b| b <= x);
    idx.saturating_sub(1).min(pieces - 1)
}

fn cumulative(measures: &[f64]) -> Vec<f64> {
    let mut breaks = Vec::with_capacity(measures.len() + 1);
    let mut acc = 0.0;
    breaks.push(0.0);
    for m in &measures[..measures.len() - 1] {
        acc += m;
        breaks.push(acc);
    }
    breaks.push(1.0);
    breaks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepGraphon {
    pub block_measures: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl StepGraphon {
    pub fn new(block_measures: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        let g = StepGraphon {
            block_measures,
            values,
        };
        g.validate()?;
        Ok(g)
    }

    /// `k` blocks of measure `1/k` each.
    pub fn equal_blocks(values: Vec<Vec<f64>>) -> Result<Self> {
        let k = values.len();
        if k == 0 {
            return Err(Error::InvalidGraphon("no blocks".into()));
        }
        Self::new(vec![1.0 / k as f64; k], values)
    }

    pub fn constant(c: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![vec![c]])
    }

    pub fn num_blocks(&self) -> usize {
        self.block_measures.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.block_measures.len();
        if k == 0 {
            return Err(Error::InvalidGraphon("no blocks".into()));
        }
        if self.values.len() != k || self.values.iter().any(|row| row.len() != k) {
            return Err(Error::InvalidGraphon(format!(
                "values must be a {k}x{k} matrix"
            )));
        }
        if self.block_measures.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(Error::InvalidGraphon(
                "block measures must be strictly positive".into(),
            ));
        }
        let total: f64 = self.block_measures.iter().sum();
        if (total - 1.0).abs() > MEASURE_TOL {
            return Err(Error::InvalidGraphon(format!(
                "block measures sum to {total}, not 1"
            )));
        }
        for a in 0..k {
            for b in 0..k {
                let v = self.values[a][b];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidGraphon(format!(
                        "entry ({a},{b}) = {v} is negative or not finite"
                    )));
                }
                if v != self.values[b][a] {
                    return Err(Error::InvalidGraphon(format!(
                        "entries ({a},{b}) and ({b},{a}) differ"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Largest kernel value, the bound `M`.
    pub fn max_value(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .copied()
            .fold(0.0, f64::max)
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        cumulative(&self.block_measures)
    }

    pub fn block_of(&self, x: f64) -> usize {
        piece_index(&self.breakpoints(), x)
    }

    /// Weighted row sums `∫ Q(x, y) dy` per block.
    pub fn degree_profile(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&self.block_measures)
                    .map(|(w, m)| w * m)
                    .sum()
            })
            .collect()
    }

    pub fn evaluate(&self, x: f64, y: f64) -> Result<f64> {
        check_unit_square(x, y)?;
        Ok(self.value(x, y))
    }

    pub fn scale(&self, h: f64) -> Result<StepGraphon> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "scale factor must be positive, got {h}"
            )));
        }
        Ok(StepGraphon {
            block_measures: self.block_measures.clone(),
            values: self
                .values
                .iter()
                .map(|row| row.iter().map(|v| v * h).collect())
                .collect(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: StepGraphon = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }
}

impl Kernel for StepGraphon {
    fn value(&self, x: f64, y: f64) -> f64 {
        let breaks = self.breakpoints();
        self.values[piece_index(&breaks, x)][piece_index(&breaks, y)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl StepFunction {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let ok = breakpoints.len() >= 2
            && values.len() + 1 == breakpoints.len()
            && breakpoints[0] == 0.0
            && *breakpoints.last().unwrap() == 1.0
            && breakpoints.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::InvalidArgument(
                "step function breakpoints must increase strictly from 0 to 1".into(),
            ));
        }
        Ok(StepFunction {
            breakpoints,
            values,
        })
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.values[piece_index(&self.breakpoints, x)]
    }

    pub fn integral(&self) -> f64 {
        self.breakpoints
            .windows(2)
            .zip(&self.values)
            .map(|(w, v)| (w[1] - w[0]) * v)
            .sum()
    }

    /// L2 inner product with a step function on the same breakpoints.
    pub fn inner(&self, other: &StepFunction) -> f64 {
        self.breakpoints
            .windows(2)
            .zip(self.values.iter().zip(&other.values))
            .map(|(w, (a, b))| (w[1] - w[0]) * a * b)
            .sum()
    }
}

/// Eigen-expansion `Σ μ_i f_i(x) f_i(y)` of a step graphon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralGraphon {
    pub eigenvalues: Vec<f64>,
    pub eigenfunctions: Vec<StepFunction>,
    pub degree_constant: f64,
}

impl SpectralGraphon {
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Feature vector `(f_1(x), …, f_k(x))` of the first `k` eigenfunctions.
    pub fn features(&self, x: f64, k: usize) -> Vec<f64> {
        self.eigenfunctions[..k].iter().map(|f| f.eval(x)).collect()
    }

    pub fn evaluate(&self, x: f64, y: f64) -> Result<f64> {
        check_unit_square(x, y)?;
        Ok(self.value(x, y))
    }

    /// Block-level kernel matrix `Σ μ_i f_i(a) f_i(b)` on the shared breakpoints.
    pub fn block_matrix(&self) -> Vec<Vec<f64>> {
        let k = self
            .eigenfunctions
            .first()
            .map(|f| f.values.len())
            .unwrap_or(0);
        (0..k)
            .map(|a| {
                (0..k)
                    .map(|b| {
                        self.eigenvalues
                            .iter()
                            .zip(&self.eigenfunctions)
                            .map(|(mu, f)| mu * f.values[a] * f.values[b])
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }
}

impl Kernel for SpectralGraphon {
    fn value(&self, x: f64, y: f64) -> f64 {
        self.eigenvalues
            .iter()
            .zip(&self.eigenfunctions)
            .map(|(mu, f)| mu * f.eval(x) * f.eval(y))
            .sum()
    }
}

/// Orient a step eigenfunction: positive integral, or if the integral
/// vanishes, positive first nonzero value.
fn orient(values: &mut [f64], measures: &[f64]) {
    let integral: f64 = values.iter().zip(measures).map(|(v, m)| v * m).sum();
    let flip = if integral.abs() > 1e-12 {
        integral < 0.0
    } else {
        values
            .iter()
            .find(|v| v.abs() > 1e-12)
            .map_or(false, |v| *v < 0.0)
    };
    if flip {
        values.iter_mut().for_each(|v| *v = -*v);
    }
}

pub fn spectral_decompose(g: &StepGraphon) -> Result<SpectralGraphon> {
    g.validate()?;
    let k = g.num_blocks();
    let sqrt_d: Vec<f64> = g.block_measures.iter().map(|m| m.sqrt()).collect();
    let sym = DMatrix::from_fn(k, k, |a, b| sqrt_d[a] * g.values[a][b] * sqrt_d[b]);
    let eig = SymmetricEigen::new(sym);

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .abs()
            .total_cmp(&eig.eigenvalues[i].abs())
            .then(eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]))
    });

    let breaks = g.breakpoints();
    let mut eigenvalues = Vec::with_capacity(k);
    let mut eigenfunctions = Vec::with_capacity(k);
    for &i in &order {
        let mut values: Vec<f64> = (0..k)
            .map(|b| eig.eigenvectors[(b, i)] / sqrt_d[b])
            .collect();
        orient(&mut values, &g.block_measures);
        eigenvalues.push(eig.eigenvalues[i]);
        eigenfunctions.push(StepFunction {
            breakpoints: breaks.clone(),
            values,
        });
    }

    let profile = g.degree_profile();
    let degree_constant =
        profile.iter().zip(&g.block_measures).map(|(p, m)| p * m).sum();

    Ok(SpectralGraphon {
        eigenvalues,
        eigenfunctions,
        degree_constant,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// Kernel bound `M`.
    pub bound: f64,
    /// Mean expected degree `∫∫ Q`.
    pub degree: f64,
    pub degree_min: f64,
    pub degree_max: f64,
    pub constant_degree: bool,
    /// Number of eigenvalues with `|μ_i| > sqrt(μ_1)`.
    pub r0: usize,
    /// Indices `i < r0` whose eigenvalue is within the relative gap
    /// tolerance of a neighbour.
    pub non_simple: Vec<usize>,
    pub eigenvalues: Vec<f64>,
}

/// Relative gap below which two eigenvalues count as a multiple eigenvalue.
pub const SIMPLICITY_TOL: f64 = 1e-6;

pub fn check_assumptions(g: &StepGraphon, tol: f64) -> Result<AssumptionReport> {
    let spectral = spectral_decompose(g)?;
    let profile = g.degree_profile();
    let degree_min = profile.iter().copied().fold(f64::INFINITY, f64::min);
    let degree_max = profile.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mu = &spectral.eigenvalues;
    let mu1 = mu[0];
    let threshold = mu1.max(0.0).sqrt();
    // guard against roundoff placing a boundary eigenvalue just above the cutoff
    let margin = 1e-9 * mu1.abs().max(1.0);
    let r0 = mu.iter().take_while(|m| m.abs() > threshold + margin).count();

    let scale = mu1.abs().max(f64::MIN_POSITIVE);
    let non_simple = (0..r0)
        .filter(|&i| {
            let close = |j: usize| (mu[i] - mu[j]).abs() / scale < SIMPLICITY_TOL;
            (i > 0 && close(i - 1)) || (i + 1 < mu.len() && close(i + 1))
        })
        .collect();

    Ok(AssumptionReport {
        bound: g.max_value(),
        degree: spectral.degree_constant,
        degree_min,
        degree_max,
        constant_degree: degree_max - degree_min <= tol,
        r0,
        non_simple,
        eigenvalues: mu.clone(),
    })
}

pub fn rank_truncate(s: &SpectralGraphon, k: usize) -> Result<SpectralGraphon> {
    if k > s.rank() {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {k} of {} eigenpairs",
            s.rank()
        )));
    }
    if k > 0 && k < s.rank() {
        let a = s.eigenvalues[k - 1].abs();
        let b = s.eigenvalues[k].abs();
        if (a - b).abs() <= 1e-12 * s.eigenvalues[0].abs().max(1.0) {
            return Err(Error::AmbiguousTruncation {
                k,
                next: k + 1,
                value: a,
            });
        }
    }
    Ok(SpectralGraphon {
        eigenvalues: s.eigenvalues[..k].to_vec(),
        eigenfunctions: s.eigenfunctions[..k].to_vec(),
        degree_constant: s.degree_constant,
    })
}
