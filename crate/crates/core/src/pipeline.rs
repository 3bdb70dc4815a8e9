//! End-to-end runs: configuration, stage artifacts, manifests, and the
//! scaled-graphon mode.
//!
//! Every stage reads and writes versioned files in the output directory and
//! stamps them with the run's configuration hash, so each stage can also be
//! run on its own from the files of the previous one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimator::{assemble, sample_density, GraphonEstimate};
use crate::evaluation::{delta2_upper, diagnostics_c, l2_distance_grid, Metrics};
use crate::graphon::{spectral_decompose, StepGraphon};
use crate::moment_poly::{fit_density, legendre_basis, mollifier_moments, mollify_moments, DensityFit};
use crate::nonbacktracking::{
    build_nb_operator, default_e1, read_aggregates, top_spectrum, write_aggregates, SpectrumDump, SpectrumOptions,
    SPECTRUM_VERSION,
};
use crate::sampler::{degree_stats, sample_graph, split_edges, DegreeStats, LatentAssignment, SparseGraph};
use crate::stars::{moment_table, MomentEntry, MomentTable, MomentTableDump, MultiIndex, StarInputs};

pub const MANIFEST_VERSION: u32 = 1;
pub const STAGE_VERSION: u32 = 1;
/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "GRAPHON_FORGE_OUT";
pub const MIN_N: usize = 100;
pub const EPSILON_MIN: f64 = 0.01;
pub const EPSILON_MAX: f64 = 0.5;
pub const DELTA_FLOOR: f64 = 0.05;

mod files {
    pub const GRAPH: &str = "graph.edges";
    pub const LATENTS: &str = "latents.txt";
    pub const GENERATE: &str = "generate.json";
    pub const G1: &str = "g1.edges";
    pub const G2: &str = "g2.edges";
    pub const SPECTRUM: &str = "spectrum.json";
    pub const AGGREGATES: &str = "aggregates.bin";
    pub const MOMENTS: &str = "moments.json";
    pub const FIT: &str = "fit.json";
    pub const ESTIMATE: &str = "estimate.json";
    pub const QHAT_GRID: &str = "qhat_grid.csv";
    pub const METRICS: &str = "metrics.json";
    pub const MANIFEST: &str = "manifest.json";
    pub const SCALED: &str = "scaled.json";
    pub const SCALED_TABLE: &str = "scaled.csv";
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Generate,
    Spectrum,
    Moments,
    Fit,
    Estimate,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Generate,
        Stage::Spectrum,
        Stage::Moments,
        Stage::Fit,
        Stage::Estimate,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Spectrum => "spectrum",
            Stage::Moments => "moments",
            Stage::Fit => "fit",
            Stage::Estimate => "estimate",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Process exit code for a failure in this stage.
    pub fn exit_code(self) -> i32 {
        10 + self as i32
    }

    fn tag(self, e: Error) -> Error {
        match e {
            Error::Stage { .. } => e,
            other => Error::Stage {
                stage: self.name(),
                source: Box::new(other),
            },
        }
    }
}

/// Exit code for an error: stage-tagged failures get their stage's code,
/// configuration problems get 2.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Stage { stage, .. } => Stage::ALL
            .iter()
            .find(|s| s.name() == *stage)
            .map_or(1, |s| s.exit_code()),
        _ => 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Path(PathBuf),
    Inline(StepGraphon),
}

fn default_e0() -> f64 {
    0.1
}
fn default_n_cap() -> usize {
    4
}
fn default_k_cap() -> usize {
    crate::nonbacktracking::DEFAULT_K_CAP
}
fn default_fit_grid() -> usize {
    crate::moment_poly::DEFAULT_GRID_RESOLUTION
}
fn default_eval_grid() -> usize {
    512
}
fn default_l2_grid() -> usize {
    256
}
fn default_max_entries() -> usize {
    crate::stars::DEFAULT_MAX_ENTRIES
}
fn default_tol() -> f64 {
    1e-10
}
fn default_restarts() -> usize {
    500
}
fn default_ladder() -> Vec<f64> {
    vec![1.0, 2.0, 4.0, 8.0]
}

/// Run configuration, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Step graphon file, or the graphon itself.
    pub model: ModelSource,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Error tolerance `e₀`.
    #[serde(default = "default_e0")]
    pub e0: f64,
    /// Bound `M ≥ sup Q`; defaults to the model's maximum value.
    #[serde(rename = "M", default)]
    pub bound: Option<f64>,
    #[serde(default)]
    pub epsilon_override: Option<f64>,
    #[serde(default)]
    pub e1_override: Option<f64>,
    #[serde(rename = "N_override", default)]
    pub n_override: Option<usize>,
    /// Cap applied to the theoretical degree `N`.
    #[serde(rename = "N_cap", default = "default_n_cap")]
    pub n_cap: usize,
    #[serde(default)]
    pub delta_override: Option<f64>,
    #[serde(default)]
    pub m_override: Option<usize>,
    #[serde(rename = "K_cap", default = "default_k_cap")]
    pub k_cap: usize,
    #[serde(default = "default_fit_grid")]
    pub fit_grid: usize,
    #[serde(default = "default_eval_grid")]
    pub eval_grid: usize,
    #[serde(default = "default_l2_grid")]
    pub l2_grid: usize,
    #[serde(default = "default_max_entries")]
    pub max_table_entries: usize,
    #[serde(default = "default_tol")]
    pub eig_tol: f64,
    #[serde(default = "default_restarts")]
    pub max_restarts: usize,
    #[serde(default = "default_ladder")]
    pub h_ladder: Vec<f64>,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl PipelineConfig {
    /// Minimal configuration with defaults for everything else.
    pub fn new(model: ModelSource, n: usize, seed: u64) -> Self {
        PipelineConfig {
            model,
            n,
            seed,
            e0: default_e0(),
            bound: None,
            epsilon_override: None,
            e1_override: None,
            n_override: None,
            n_cap: default_n_cap(),
            delta_override: None,
            m_override: None,
            k_cap: default_k_cap(),
            fit_grid: default_fit_grid(),
            eval_grid: default_eval_grid(),
            l2_grid: default_l2_grid(),
            max_table_entries: default_max_entries(),
            eig_tol: default_tol(),
            max_restarts: default_restarts(),
            h_ladder: default_ladder(),
            deterministic: false,
            threads: None,
            output_dir: None,
        }
    }

    pub fn from_json(text: &str, location: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)
            .map_err(|e| Error::parse(format!("{location}:{}:{}", e.line(), e.column()), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative model path is taken relative to the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text, &path.display().to_string())?;
        if let ModelSource::Path(p) = &cfg.model {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.model = ModelSource::Path(dir.join(p));
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n < MIN_N {
            return bad(format!("n must be at least {MIN_N}, got {}", self.n));
        }
        if !(self.e0 > 0.0) {
            return bad(format!("e0 must be positive, got {}", self.e0));
        }
        for (name, v) in [
            ("M", self.bound),
            ("e1_override", self.e1_override),
            ("delta_override", self.delta_override),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("{name} must be positive, got {v}"));
                }
            }
        }
        if let Some(eps) = self.epsilon_override {
            if !(eps > 0.0 && eps < 1.0) {
                return bad(format!("epsilon_override must lie in (0,1), got {eps}"));
            }
        }
        if self.n_override == Some(0) || self.n_cap == 0 {
            return bad("N must be at least 1".into());
        }
        if self.m_override == Some(0) || self.k_cap == 0 || self.threads == Some(0) {
            return bad("m_override, K_cap and threads must be positive".into());
        }
        if self.fit_grid < 32 || self.eval_grid == 0 || self.l2_grid == 0 {
            return bad("fit_grid must be at least 32 and evaluation grids positive".into());
        }
        if self.h_ladder.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return bad("every h in h_ladder must be positive".into());
        }
        Ok(())
    }

    pub fn resolve_model(&self) -> Result<StepGraphon> {
        match &self.model {
            ModelSource::Inline(g) => {
                g.validate()?;
                Ok(g.clone())
            }
            ModelSource::Path(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                StepGraphon::from_json(&text).map_err(|e| match e {
                    Error::Json(j) => Error::parse(format!("{}:{}:{}", p.display(), j.line(), j.column()), j.to_string()),
                    other => other,
                })
            }
        }
    }

    /// Output directory: the config value, else the environment variable,
    /// else `./graphon-out`.
    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("graphon-out"))
    }

    /// `1/log log n`, clamped.
    pub fn epsilon(&self) -> f64 {
        self.epsilon_override.unwrap_or_else(|| theoretical_epsilon(self.n).clamp(EPSILON_MIN, EPSILON_MAX))
    }

    pub fn e1(&self) -> f64 {
        self.e1_override.unwrap_or_else(|| default_e1(self.n))
    }
}

pub fn theoretical_epsilon(n: usize) -> f64 {
    1.0 / (n as f64).ln().ln()
}

/// `N = (2KM/e₀)^{6K+30}` as a base-10 logarithm.
pub fn theoretical_degree_log10(k: usize, bound: f64, e0: f64) -> f64 {
    (6 * k + 30) as f64 * (2.0 * k as f64 * bound / e0).log10()
}

/// `δ = sqrt(e₀ / (64 K λ₁ M²))`.
pub fn theoretical_delta(k: usize, lambda1: f64, bound: f64, e0: f64) -> f64 {
    (e0 / (64.0 * k as f64 * lambda1 * bound * bound)).sqrt()
}

#[derive(Serialize)]
struct HashInput<'a> {
    config: &'a PipelineConfig,
    model: &'a StepGraphon,
    scale: f64,
}

/// Everything a stage needs besides its input files.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub cfg: PipelineConfig,
    /// Graphon the graph is drawn from.
    pub model: StepGraphon,
    /// Graphon the estimate is compared with.
    pub truth: StepGraphon,
    /// Factor `h` with `model = h · truth`.
    pub scale: f64,
    pub hash: String,
    pub out: PathBuf,
}

impl RunContext {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        Self::scaled(cfg, 1.0)
    }

    pub fn scaled(cfg: &PipelineConfig, h: f64) -> Result<Self> {
        cfg.validate()?;
        let truth = cfg.resolve_model()?;
        let model = if h == 1.0 { truth.clone() } else { truth.scale(h)? };
        Self::with_models(cfg, model, truth, h, cfg.output_dir())
    }

    fn with_models(cfg: &PipelineConfig, model: StepGraphon, truth: StepGraphon, scale: f64, out: PathBuf) -> Result<Self> {
        let mut hashed = cfg.clone();
        hashed.output_dir = None;
        hashed.threads = None;
        hashed.h_ladder = Vec::new();
        if let ModelSource::Path(_) = hashed.model {
            hashed.model = ModelSource::Path(PathBuf::new());
        }
        let bytes = serde_json::to_vec(&HashInput {
            config: &hashed,
            model: &model,
            scale,
        })?;
        let hash: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        Ok(RunContext {
            cfg: cfg.clone(),
            model,
            truth,
            scale,
            hash,
            out,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn check_hash(&self, found: &str, file: &str) -> Result<()> {
        if found != self.hash {
            return Err(Error::ConfigHashMismatch {
                found: format!("{found} ({file})"),
                expected: self.hash.clone(),
            });
        }
        Ok(())
    }

    /// Bound `M` used for `κ` and `δ`.
    pub fn bound(&self) -> f64 {
        self.cfg.bound.map_or_else(|| self.model.max_value(), |m| m * self.scale)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::parse(format!("{}:{}:{}", path.display(), e.line(), e.column()), e.to_string()))
}

fn check_version(found: u32, path: &Path) -> Result<()> {
    if found != STAGE_VERSION {
        return Err(Error::UnsupportedVersion {
            found,
            expected: STAGE_VERSION,
        })
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()));
    }
    Ok(())
}

/// Summary of the generated graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRecord {
    pub version: u32,
    pub config_hash: String,
    pub n: usize,
    pub edges: usize,
    pub mean_degree: f64,
    pub max_degree: usize,
    pub degree_histogram: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub graph: SparseGraph,
    pub latents: LatentAssignment,
    pub record: GenerateRecord,
}

pub fn generate_stage(ctx: &RunContext) -> Result<Generated> {
    let (graph, latents) = sample_graph(&ctx.model, ctx.cfg.n, ctx.cfg.seed)?;
    let DegreeStats { mean, max, histogram } = degree_stats(&graph);
    let record = GenerateRecord {
        version: STAGE_VERSION,
        config_hash: ctx.hash.clone(),
        n: graph.n(),
        edges: graph.num_edges(),
        mean_degree: mean,
        max_degree: max,
        degree_histogram: histogram,
    };
    Ok(Generated { graph, latents, record })
}

fn write_generated(ctx: &RunContext, g: &Generated) -> Result<()> {
    g.graph.write_edge_list(&ctx.path(files::GRAPH))?;
    let latents = ctx.path(files::LATENTS);
    std::fs::write(&latents, g.latents.to_text()).map_err(|e| Error::io(&latents, e))?;
    write_json(&ctx.path(files::GENERATE), &g.record)
}

fn read_generated(ctx: &RunContext) -> Result<Generated> {
    let path = ctx.path(files::GENERATE);
    let record: GenerateRecord = read_json(&path)?;
    check_version(record.version, &path)?;
    ctx.check_hash(&record.config_hash, files::GENERATE)?;
    let graph = SparseGraph::read_edge_list(&ctx.path(files::GRAPH))?;
    let lpath = ctx.path(files::LATENTS);
    let text = std::fs::read_to_string(&lpath).map_err(|e| Error::io(&lpath, e))?;
    let latents = LatentAssignment::from_text(&text, &lpath.display().to_string())?;
    Ok(Generated { graph, latents, record })
}

/// Spectrum of the retained edges, or the reason none was usable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRecord {
    #[serde(flatten)]
    pub dump: SpectrumDump,
    pub epsilon: f64,
    pub degenerate: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SpectrumOutput {
    pub g1: SparseGraph,
    pub g2: SparseGraph,
    pub record: SpectrumRecord,
    pub aggregates: Vec<Vec<f64>>,
}

pub fn spectrum_stage(ctx: &RunContext, graph: &SparseGraph) -> Result<SpectrumOutput> {
    let epsilon = ctx.cfg.epsilon();
    let (g1, g2) = split_edges(graph, epsilon, ctx.cfg.seed)?;
    let n = graph.n();
    let opts = SpectrumOptions {
        e1_override: Some(ctx.cfg.e1()),
        tol: ctx.cfg.eig_tol,
        max_restarts: ctx.cfg.max_restarts,
        k_cap: ctx.cfg.k_cap,
        seed: ctx.cfg.seed,
        retention: 1.0 - epsilon,
    };
    let (record, aggregates) = match top_spectrum(&build_nb_operator(&g1), n, &opts) {
        Ok(s) => {
            let mut dump = s.dump(n, &ctx.hash);
            let degenerate = (s.k == 0).then(|| "no eigenvalue clears the bulk cutoff".to_string());
            if let Some(reason) = &degenerate {
                dump.warnings.push(reason.clone());
            }
            (
                SpectrumRecord {
                    dump,
                    epsilon,
                    degenerate,
                },
                s.vertex_aggregates,
            )
        }
        Err(Error::DegenerateSpectrum(lead)) => {
            let reason = format!("leading eigenvalue {lead} is not usable; graph is too sparse");
            let dump = SpectrumDump {
                version: SPECTRUM_VERSION,
                config_hash: ctx.hash.clone(),
                n,
                k: 0,
                lambdas: Vec::new(),
                raw_lambdas: Vec::new(),
                retention: opts.retention,
                e1: opts.e1_override.unwrap_or_default(),
                lambda1: lead,
                cutoff: lead.max(0.0).sqrt() + opts.retention * opts.e1_override.unwrap_or_default(),
                residuals: Vec::new(),
                top_values: Vec::new(),
                restarts: 0,
                warnings: vec![reason.clone()],
            };
            (
                SpectrumRecord {
                    dump,
                    epsilon,
                    degenerate: Some(reason),
                },
                Vec::new(),
            )
        }
        Err(e) => return Err(e),
    };
    Ok(SpectrumOutput {
        g1,
        g2,
        record,
        aggregates,
    })
}

fn write_spectrum(ctx: &RunContext, s: &SpectrumOutput) -> Result<()> {
    s.g1.write_edge_list(&ctx.path(files::G1))?;
    s.g2.write_edge_list(&ctx.path(files::G2))?;
    write_aggregates(&ctx.path(files::AGGREGATES), &s.aggregates, s.g1.n())?;
    write_json(&ctx.path(files::SPECTRUM), &s.record)
}

fn read_spectrum(ctx: &RunContext) -> Result<SpectrumOutput> {
    let path = ctx.path(files::SPECTRUM);
    let record: SpectrumRecord = read_json(&path)?;
    if record.dump.version != SPECTRUM_VERSION {
        return Err(Error::UnsupportedVersion {
            found: record.dump.version,
            expected: SPECTRUM_VERSION,
        });
    }
    ctx.check_hash(&record.dump.config_hash, files::SPECTRUM)?;
    let g1 = SparseGraph::read_edge_list(&ctx.path(files::G1))?;
    let g2 = SparseGraph::read_edge_list(&ctx.path(files::G2))?;
    let aggregates = read_aggregates(&ctx.path(files::AGGREGATES), record.dump.n, record.dump.k)?;
    Ok(SpectrumOutput {
        g1,
        g2,
        record,
        aggregates,
    })
}

/// Moment table as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentsRecord {
    pub version: u32,
    pub config_hash: String,
    #[serde(flatten)]
    pub table: MomentTableDump,
    /// Raw star counts `A_α`, row-major.
    pub counts: Vec<f64>,
}

impl MomentsRecord {
    fn to_table(&self) -> MomentTable {
        MomentTable {
            k: self.table.k,
            n_cap: self.table.n,
            epsilon: self.table.epsilon,
            valid: self.table.valid,
            pair_diagonal: self.table.p_diag.clone(),
            counts: self.counts.clone(),
            entries: self.table.entries.iter().map(|e| e.value).collect(),
        }
    }
}

/// Degree `N` actually used: the override, else the theoretical value capped.
pub fn effective_degree(cfg: &PipelineConfig, k: usize, bound: f64) -> usize {
    cfg.n_override.unwrap_or_else(|| {
        let log10 = theoretical_degree_log10(k, bound, cfg.e0);
        if log10 >= (cfg.n_cap as f64).log10() {
            cfg.n_cap
        } else {
            (10f64.powf(log10).floor() as usize).clamp(1, cfg.n_cap)
        }
    })
}

pub fn moments_stage(ctx: &RunContext, spectrum: &SpectrumOutput) -> Result<MomentTable> {
    let k = spectrum.record.dump.k;
    let cap = effective_degree(&ctx.cfg, k, ctx.bound());
    if k == 0 {
        return Ok(MomentTable {
            k: 0,
            n_cap: cap,
            epsilon: spectrum.record.epsilon,
            valid: false,
            pair_diagonal: Vec::new(),
            counts: Vec::new(),
            entries: Vec::new(),
        });
    }
    let inputs = StarInputs {
        aggregates: &spectrum.aggregates,
        lambdas: &spectrum.record.dump.lambdas,
        epsilon: spectrum.record.epsilon,
    };
    moment_table(&spectrum.g2, inputs, cap, ctx.cfg.max_table_entries)
}

fn moments_record(ctx: &RunContext, table: &MomentTable) -> MomentsRecord {
    let table_dump = if table.k == 0 {
        MomentTableDump {
            k: 0,
            n: table.n_cap,
            epsilon: table.epsilon,
            valid: false,
            p_diag: Vec::new(),
            entries: Vec::<MomentEntry>::new(),
        }
    } else {
        table.dump()
    };
    MomentsRecord {
        version: STAGE_VERSION,
        config_hash: ctx.hash.clone(),
        table: table_dump,
        counts: table.counts.clone(),
    }
}

fn read_moments(ctx: &RunContext) -> Result<MomentTable> {
    let path = ctx.path(files::MOMENTS);
    let record: MomentsRecord = read_json(&path)?;
    check_version(record.version, &path)?;
    ctx.check_hash(&record.config_hash, files::MOMENTS)?;
    let table = record.to_table();
    let expected: Vec<Vec<usize>> = MultiIndex::grid(table.k, table.n_cap)
        .map(|a| a.exponents().to_vec())
        .collect();
    let found: Vec<&Vec<usize>> = record.table.entries.iter().map(|e| &e.alpha).collect();
    if table.k > 0 && (found.len() != expected.len() || found.iter().zip(&expected).any(|(a, b)| *a != b)) {
        return Err(Error::parse(path.display().to_string(), "moment entries do not cover the index grid in order"));
    }
    Ok(table)
}

/// Density fit as written to disk; `fit` is absent on the degenerate path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub version: u32,
    pub config_hash: String,
    pub fit: Option<DensityFit>,
    pub degenerate: Option<String>,
    pub delta_theoretical: Option<f64>,
}

pub fn fit_stage(ctx: &RunContext, table: &MomentTable, lambdas: &[f64]) -> Result<FitRecord> {
    let mut record = FitRecord {
        version: STAGE_VERSION,
        config_hash: ctx.hash.clone(),
        fit: None,
        degenerate: None,
        delta_theoretical: None,
    };
    if table.k == 0 {
        record.degenerate = Some("no informative eigenvalue".into());
        return Ok(record);
    }
    if !table.valid {
        record.degenerate = Some("some P_kk is not positive, all P_alpha set to 0".into());
        return Ok(record);
    }
    let k = table.k;
    let lambda1 = lambdas[0];
    let bound = ctx.bound();
    let kappa = 2.0 * bound / lambda1.sqrt();
    let delta_theoretical = theoretical_delta(k, lambda1, bound, ctx.cfg.e0);
    let delta = ctx.cfg.delta_override.unwrap_or(delta_theoretical.max(DELTA_FLOOR));
    let mm = mollifier_moments(delta, table.n_cap)?;
    let m = mollify_moments(table, &mm)?;
    let basis = legendre_basis(table.n_cap, kappa)?;
    record.fit = Some(fit_density(&m, &basis, k, delta, ctx.cfg.fit_grid)?);
    record.delta_theoretical = Some(delta_theoretical);
    Ok(record)
}

fn read_fit(ctx: &RunContext) -> Result<FitRecord> {
    let path = ctx.path(files::FIT);
    let record: FitRecord = read_json(&path)?;
    check_version(record.version, &path)?;
    ctx.check_hash(&record.config_hash, files::FIT)?;
    Ok(record)
}

/// Number of sampled feature vectors.
pub fn effective_m(cfg: &PipelineConfig) -> usize {
    cfg.m_override.unwrap_or(cfg.n)
}

pub fn estimate_stage(
    ctx: &RunContext,
    fit: &FitRecord,
    lambdas: &[f64],
    generated: &GenerateRecord,
) -> Result<GraphonEstimate> {
    let mut est = match &fit.fit {
        Some(f) => {
            let sample = sample_density(f, effective_m(&ctx.cfg), ctx.cfg.seed)?;
            let scaled: Vec<f64> = lambdas.iter().map(|l| l / ctx.scale).collect();
            assemble(sample.z, scaled, f.kappa)?
        }
        None => assemble(vec![1.0], vec![generated.mean_degree / ctx.scale], 1.0)?,
    };
    est.seed = ctx.cfg.seed;
    est.config_hash = ctx.hash.clone();
    Ok(est)
}

fn read_estimate(ctx: &RunContext) -> Result<GraphonEstimate> {
    let est = GraphonEstimate::read(&ctx.path(files::ESTIMATE))?;
    ctx.check_hash(&est.config_hash, files::ESTIMATE)?;
    Ok(est)
}

pub fn evaluate_stage(
    ctx: &RunContext,
    est: &GraphonEstimate,
    latents: &LatentAssignment,
    aggregates: &[Vec<f64>],
) -> Result<Metrics> {
    let truth = spectral_decompose(&ctx.truth)?;
    let mut warnings = Vec::new();
    let (delta2, signs, order) = match delta2_upper(est, &truth, ctx.cfg.eval_grid) {
        Ok(r) => (Some(r.delta2_upper), Some(r.sign_pattern), Some(r.key_order)),
        Err(e) => {
            warnings.push(format!("alignment distance unavailable: {e}"));
            (None, None, None)
        }
    };
    let l2 = l2_distance_grid(est, &ctx.truth, ctx.cfg.l2_grid)?;
    warnings.extend(l2.warning);
    let overlaps = if aggregates.is_empty() {
        None
    } else {
        Some(diagnostics_c(aggregates, Some(latents), &truth)?)
    };
    Ok(Metrics {
        config_hash: ctx.hash.clone(),
        delta2_upper: delta2,
        sign_pattern: signs,
        key_order: order,
        l2_grid: Some(l2.value),
        c_matrix: overlaps.as_ref().map(|o| o.c.clone()),
        c_contraction: overlaps.as_ref().map(|o| o.contraction.clone()),
        c_diagonal: overlaps.map(|o| o.diagonal),
        fraction_negative_qhat: est.fraction_negative(ctx.cfg.eval_grid),
        warnings,
        runtime_sec: BTreeMap::new(),
    })
}

/// A theoretical formula next to the value actually used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub theoretical: Option<f64>,
    pub effective: f64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub wall_time_sec: f64,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub scale: f64,
    pub status: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub lambdas: Vec<f64>,
    pub parameters: BTreeMap<String, Parameter>,
    pub delta2_upper: Option<f64>,
    pub warnings: Vec<String>,
    pub stages: Vec<StageTiming>,
    pub total_wall_time_sec: f64,
}

/// Everything one run produced, in memory.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub context: RunContext,
    pub generated: Generated,
    pub spectrum: SpectrumOutput,
    pub moments: MomentTable,
    pub fit: FitRecord,
    pub estimate: GraphonEstimate,
    pub metrics: Metrics,
    pub manifest: Manifest,
}

fn timed<T>(stage: Stage, times: &mut Vec<StageTiming>, artifacts: &[&str], f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| stage.tag(e))?;
    times.push(StageTiming {
        stage,
        wall_time_sec: start.elapsed().as_secs_f64(),
        artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
    });
    Ok(out)
}

fn parameters(ctx: &RunContext, spectrum: &SpectrumRecord, table: &MomentTable, fit: &FitRecord) -> BTreeMap<String, Parameter> {
    let cfg = &ctx.cfg;
    let mut p = BTreeMap::new();
    let note = |s: &str| s.to_string();
    p.insert(
        "epsilon".into(),
        Parameter {
            theoretical: Some(theoretical_epsilon(cfg.n)),
            effective: spectrum.epsilon,
            note: note(if cfg.epsilon_override.is_some() {
                "override"
            } else {
                "1/log log n clamped to [0.01, 0.5]"
            }),
        },
    );
    p.insert(
        "e1".into(),
        Parameter {
            theoretical: Some(default_e1(cfg.n)),
            effective: spectrum.dump.e1,
            note: note("slack applied in units of the debiased eigenvalues"),
        },
    );
    let k = spectrum.dump.k;
    p.insert(
        "N".into(),
        Parameter {
            theoretical: None,
            effective: table.n_cap as f64,
            note: format!(
                "(2KM/e0)^(6K+30) = 10^{:.1}; {}",
                theoretical_degree_log10(k.max(1), ctx.bound(), cfg.e0),
                if cfg.n_override.is_some() { "override" } else { "capped" }
            ),
        },
    );
    if let Some(f) = &fit.fit {
        p.insert(
            "delta".into(),
            Parameter {
                theoretical: fit.delta_theoretical,
                effective: f.delta,
                note: note(if cfg.delta_override.is_some() {
                    "override"
                } else {
                    "sqrt(e0/(64 K lambda1 M^2)) floored at 0.05"
                }),
            },
        );
        p.insert(
            "kappa".into(),
            Parameter {
                theoretical: Some(f.kappa),
                effective: f.kappa,
                note: note("2M/sqrt(lambda1)"),
            },
        );
    }
    p.insert(
        "m".into(),
        Parameter {
            theoretical: Some(cfg.n as f64),
            effective: effective_m(cfg) as f64,
            note: note(if cfg.m_override.is_some() { "override" } else { "m = n" }),
        },
    );
    p.insert(
        "M".into(),
        Parameter {
            theoretical: None,
            effective: ctx.bound(),
            note: note(if cfg.bound.is_some() {
                "from config, times the scale h"
            } else {
                "maximum of the model"
            }),
        },
    );
    p
}

/// Runs every stage in memory, writing each stage's artifacts and a manifest.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunArtifacts> {
    let ctx = RunContext::new(cfg)?;
    run_context(ctx)
}

fn run_context(ctx: RunContext) -> Result<RunArtifacts> {
    let start = Instant::now();
    std::fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    let mut times = Vec::new();
    let generated = timed(Stage::Generate, &mut times, &[files::GRAPH, files::LATENTS, files::GENERATE], || {
        let g = generate_stage(&ctx)?;
        write_generated(&ctx, &g)?;
        Ok(g)
    })?;
    let spectrum = timed(
        Stage::Spectrum,
        &mut times,
        &[files::G1, files::G2, files::SPECTRUM, files::AGGREGATES],
        || {
            let s = spectrum_stage(&ctx, &generated.graph)?;
            write_spectrum(&ctx, &s)?;
            Ok(s)
        },
    )?;
    let moments = timed(Stage::Moments, &mut times, &[files::MOMENTS], || {
        let t = moments_stage(&ctx, &spectrum)?;
        write_json(&ctx.path(files::MOMENTS), &moments_record(&ctx, &t))?;
        Ok(t)
    })?;
    let fit = timed(Stage::Fit, &mut times, &[files::FIT], || {
        let f = fit_stage(&ctx, &moments, &spectrum.record.dump.lambdas)?;
        write_json(&ctx.path(files::FIT), &f)?;
        Ok(f)
    })?;
    let estimate = timed(Stage::Estimate, &mut times, &[files::ESTIMATE, files::QHAT_GRID], || {
        let e = estimate_stage(&ctx, &fit, &spectrum.record.dump.lambdas, &generated.record)?;
        write_estimate(&ctx, &e)?;
        Ok(e)
    })?;
    let mut metrics = timed(Stage::Evaluate, &mut times, &[files::METRICS], || {
        evaluate_stage(&ctx, &estimate, &generated.latents, &spectrum.aggregates)
    })?;
    for t in &times {
        metrics.runtime_sec.insert(t.stage.name().to_string(), t.wall_time_sec);
    }
    write_json(&ctx.path(files::METRICS), &metrics).map_err(|e| Stage::Evaluate.tag(e))?;

    let mut warnings: Vec<String> = spectrum.record.dump.warnings.clone();
    if let Some(reason) = &fit.degenerate {
        warnings.push(format!("degenerate estimate (constant mean degree): {reason}"));
    }
    if let Some(f) = &fit.fit {
        warnings.extend(f.warnings.iter().cloned());
    }
    warnings.extend(metrics.warnings.iter().cloned());
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config_hash: ctx.hash.clone(),
        config: ctx.cfg.clone(),
        scale: ctx.scale,
        status: if fit.degenerate.is_some() { "degenerate" } else { "ok" }.to_string(),
        k: spectrum.record.dump.k,
        lambdas: spectrum.record.dump.lambdas.clone(),
        parameters: parameters(&ctx, &spectrum.record, &moments, &fit),
        delta2_upper: metrics.delta2_upper,
        warnings,
        stages: times,
        total_wall_time_sec: start.elapsed().as_secs_f64(),
    };
    write_json(&ctx.path(files::MANIFEST), &manifest)?;
    Ok(RunArtifacts {
        context: ctx,
        generated,
        spectrum,
        moments,
        fit,
        estimate,
        metrics,
        manifest,
    })
}

fn write_estimate(ctx: &RunContext, e: &GraphonEstimate) -> Result<()> {
    e.write(&ctx.path(files::ESTIMATE))?;
    let grid = ctx.path(files::QHAT_GRID);
    std::fs::write(&grid, e.grid_csv(ctx.cfg.l2_grid.min(256))).map_err(|err| Error::io(&grid, err))
}

/// Runs one stage from the previous stages' files in the output directory.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<()> {
    let ctx = RunContext::new(cfg)?;
    std::fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    let run = || -> Result<()> {
        match stage {
            Stage::Generate => write_generated(&ctx, &generate_stage(&ctx)?),
            Stage::Spectrum => {
                let g = read_generated(&ctx)?;
                write_spectrum(&ctx, &spectrum_stage(&ctx, &g.graph)?)
            }
            Stage::Moments => {
                let s = read_spectrum(&ctx)?;
                let t = moments_stage(&ctx, &s)?;
                write_json(&ctx.path(files::MOMENTS), &moments_record(&ctx, &t))
            }
            Stage::Fit => {
                let s = read_spectrum(&ctx)?;
                let t = read_moments(&ctx)?;
                write_json(&ctx.path(files::FIT), &fit_stage(&ctx, &t, &s.record.dump.lambdas)?)
            }
            Stage::Estimate => {
                let g = read_generated(&ctx)?;
                let s = read_spectrum(&ctx)?;
                let f = read_fit(&ctx)?;
                write_estimate(&ctx, &estimate_stage(&ctx, &f, &s.record.dump.lambdas, &g.record)?)
            }
            Stage::Evaluate => {
                let g = read_generated(&ctx)?;
                let s = read_spectrum(&ctx)?;
                let e = read_estimate(&ctx)?;
                let start = Instant::now();
                let mut m = evaluate_stage(&ctx, &e, &g.latents, &s.aggregates)?;
                m.runtime_sec.insert(stage.name().into(), start.elapsed().as_secs_f64());
                write_json(&ctx.path(files::METRICS), &m)
            }
        }
    };
    run().map_err(|e| stage.tag(e))
}

/// One rung of the scaled-mode ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledRow {
    pub h: f64,
    #[serde(rename = "K")]
    pub k: usize,
    /// Eigenvalue estimates divided by `h`.
    pub lambdas: Vec<f64>,
    pub delta2_upper: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledReport {
    pub version: u32,
    pub rows: Vec<ScaledRow>,
}

/// Runs the pipeline on `h · Q` for one `h` and compares `Q̂_h / h` with `Q`.
/// Artifacts go to `<out>/h_<h>`.
pub fn run_scaled_once(cfg: &PipelineConfig, h: f64) -> Result<RunArtifacts> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale h must be positive, got {h}")));
    }
    let base = RunContext::scaled(cfg, h)?;
    let out = cfg.output_dir().join(format!("h_{h}"));
    let ctx = RunContext::with_models(cfg, base.model, base.truth, h, out)?;
    run_context(ctx)
}

/// Runs every `h` of the configured ladder and writes the error-vs-`h` table.
pub fn run_scaled(cfg: &PipelineConfig) -> Result<ScaledReport> {
    let mut rows = Vec::new();
    for &h in &cfg.h_ladder {
        let run = run_scaled_once(cfg, h)?;
        rows.push(ScaledRow {
            h,
            k: run.manifest.k,
            lambdas: run.estimate.lambdas.clone(),
            delta2_upper: run.metrics.delta2_upper,
            status: run.manifest.status.clone(),
        });
    }
    let report = ScaledReport {
        version: MANIFEST_VERSION,
        rows,
    };
    let out = cfg.output_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_json(&out.join(files::SCALED), &report)?;
    let mut csv = String::from("h,K,delta2_upper\n");
    for r in &report.rows {
        let d = r.delta2_upper.map_or(String::new(), |d| d.to_string());
        csv.push_str(&format!("{},{},{}\n", r.h, r.k, d));
    }
    let table = out.join(files::SCALED_TABLE);
    std::fs::write(&table, csv).map_err(|e| Error::io(&table, e))?;
    Ok(report)
}
