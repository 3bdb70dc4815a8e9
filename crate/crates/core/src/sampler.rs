//! Sparse graphs drawn from a step graphon at scale `1/n`.
//!
//! Vertices get i.i.d. uniform latents and are bucketed by block. Each block
//! pair is then sampled with geometric skipping over its pair index space,
//! which visits only the selected pairs and is distributionally identical to
//! one Bernoulli trial per pair.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphon::StepGraphon;
use crate::rng::{stage_rng, substream_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentAssignment {
    pub latents: Vec<f64>,
}

impl LatentAssignment {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.latents.len() * 20);
        for x in &self.latents {
            writeln!(out, "{x}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str, location: &str) -> Result<Self> {
        let mut latents = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let x: f64 = line.parse().map_err(|_| {
                Error::parse(format!("{location}:{}", lineno + 1), "expected a real")
            })?;
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::parse(
                    format!("{location}:{}", lineno + 1),
                    format!("latent {x} outside [0,1]"),
                ));
            }
            latents.push(x);
        }
        Ok(LatentAssignment { latents })
    }
}

/// Simple undirected graph on `0..n` with sorted CSR adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl SparseGraph {
    /// Builds a graph from arbitrary unordered pairs. Self-loops and
    /// duplicates are rejected.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut list: Vec<(usize, usize)> = Vec::new();
        for (u, v) in edges {
            if u == v {
                return Err(Error::InvalidArgument(format!("self-loop at {u}")));
            }
            if u >= n || v >= n {
                return Err(Error::InvalidArgument(format!(
                    "edge ({u},{v}) out of range for n = {n}"
                )));
            }
            list.push((u.min(v), u.max(v)));
        }
        list.sort_unstable();
        if let Some(w) = list.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!(
                "duplicate edge ({},{})",
                w[0].0, w[0].1
            )));
        }
        Ok(Self::from_sorted_unique(n, list))
    }

    fn from_sorted_unique(n: usize, edges: Vec<(usize, usize)>) -> Self {
        let mut degree = vec![0usize; n];
        for &(u, v) in &edges {
            degree[u] += 1;
            degree[v] += 1;
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut fill = offsets[..n].to_vec();
        let mut neighbors = vec![0usize; 2 * edges.len()];
        for &(u, v) in &edges {
            neighbors[fill[u]] = v;
            fill[u] += 1;
            neighbors[fill[v]] = u;
            fill[v] += 1;
        }
        for v in 0..n {
            neighbors[offsets[v]..offsets[v + 1]].sort_unstable();
        }
        SparseGraph {
            n,
            edges,
            offsets,
            neighbors,
        }
    }

    pub fn empty(n: usize) -> Self {
        Self::from_sorted_unique(n, Vec::new())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edges `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Edge-list text: header `n m`, then one `u v` line per edge with `u < v`.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::with_capacity(16 * (self.edges.len() + 1));
        writeln!(out, "{} {}", self.n, self.edges.len()).unwrap();
        for (u, v) in &self.edges {
            writeln!(out, "{u} {v}").unwrap();
        }
        out
    }

    pub fn from_edge_list(text: &str, location: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let at = |i: usize| format!("{location}:{}", i + 1);
        let (i, header) = lines
            .next()
            .ok_or_else(|| Error::parse(format!("{location}:1"), "missing header"))?;
        let mut parts = header.split_whitespace();
        let mut field = |what: &str| -> Result<usize> {
            parts
                .next()
                .ok_or_else(|| Error::parse(at(i), format!("missing {what}")))?
                .parse()
                .map_err(|_| Error::parse(at(i), format!("bad {what}")))
        };
        let n = field("vertex count")?;
        let m = field("edge count")?;
        let mut edges = Vec::with_capacity(m);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<usize>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(u)), Some(Ok(v)), None) => {
                    if u >= v || v >= n {
                        return Err(Error::parse(at(i), format!("edge {u} {v} violates u < v < n")));
                    }
                    edges.push((u, v));
                }
                _ => return Err(Error::parse(at(i), "expected two vertex ids")),
            }
        }
        if edges.len() != m {
            return Err(Error::parse(
                location,
                format!("header declares {m} edges, found {}", edges.len()),
            ));
        }
        Self::from_edges(n, edges).map_err(|e| Error::parse(location, e.to_string()))
    }

    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_edge_list()).map_err(|e| Error::io(path, e))
    }

    pub fn read_edge_list(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_edge_list(&text, &path.display().to_string())
    }
}

/// Number of skipped trials before the next success of a Bernoulli(p) sequence.
fn geometric_skip<R: Rng>(rng: &mut R, log_q: f64) -> u64 {
    let u: f64 = rng.gen();
    // 1 - u lies in (0, 1]
    let s = ((1.0 - u).ln() / log_q).floor();
    if s >= u64::MAX as f64 {
        u64::MAX
    } else {
        s as u64
    }
}

/// Selected pair positions in `0..total` with independent probability `p`.
fn bernoulli_positions<R: Rng>(rng: &mut R, total: u64, p: f64) -> Vec<u64> {
    if p <= 0.0 || total == 0 {
        return Vec::new();
    }
    if p >= 1.0 {
        return (0..total).collect();
    }
    let log_q = (-p).ln_1p();
    let mut out = Vec::new();
    let mut pos: u64 = 0;
    loop {
        let skip = geometric_skip(rng, log_q);
        pos = match pos.checked_add(skip) {
            Some(x) if x < total => x,
            _ => break,
        };
        out.push(pos);
        pos += 1;
    }
    out
}

/// Maps position `t` in the row-major strict upper triangle of an `s × s`
/// matrix to `(i, j)` with `i < j`.
fn triangle_pair(t: u64, s: u64) -> (u64, u64) {
    // rows have lengths s-1, s-2, ...; invert the prefix sums
    let total = s * (s - 1) / 2;
    let rest = total - 1 - t;
    // rest indexes the triangle traversed from the end
    let k = (((8.0 * rest as f64 + 1.0).sqrt() - 1.0) / 2.0).floor() as u64;
    let mut k = k;
    while (k + 1) * (k + 2) / 2 <= rest {
        k += 1;
    }
    while k * (k + 1) / 2 > rest {
        k -= 1;
    }
    let i = s - 2 - k;
    let offset_in_row = rest - k * (k + 1) / 2;
    let j = s - 1 - offset_in_row;
    (i, j)
}

pub fn sample_graph(g: &StepGraphon, n: usize, seed: u64) -> Result<(SparseGraph, LatentAssignment)> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("n must be at least 2, got {n}")));
    }
    g.validate()?;
    let mut rng = stage_rng("latents", seed);
    let latents: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();

    let k = g.num_blocks();
    let breaks = g.breakpoints();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (v, &x) in latents.iter().enumerate() {
        let b = breaks.partition_point(|&t| t <= x).saturating_sub(1).min(k - 1);
        members[b].push(v);
    }

    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (a..k).map(move |b| (a, b))).collect();
    let chunks: Vec<Vec<(usize, usize)>> = pairs
        .par_iter()
        .enumerate()
        .map(|(idx, &(a, b))| {
            let p = (g.values[a][b] / n as f64).min(1.0);
            let mut rng = substream_rng("edges", seed, idx as u64);
            let (ma, mb) = (&members[a], &members[b]);
            if a == b {
                let s = ma.len() as u64;
                if s < 2 {
                    return Vec::new();
                }
                bernoulli_positions(&mut rng, s * (s - 1) / 2, p)
                    .into_iter()
                    .map(|t| {
                        let (i, j) = triangle_pair(t, s);
                        (ma[i as usize], ma[j as usize])
                    })
                    .collect()
            } else {
                let nb = mb.len() as u64;
                bernoulli_positions(&mut rng, ma.len() as u64 * nb, p)
                    .into_iter()
                    .map(|t| (ma[(t / nb) as usize], mb[(t % nb) as usize]))
                    .collect()
            }
        })
        .collect();

    let mut edges: Vec<(usize, usize)> = chunks
        .into_iter()
        .flatten()
        .map(|(u, v)| (u.min(v), u.max(v)))
        .collect();
    edges.sort_unstable();
    Ok((SparseGraph::from_sorted_unique(n, edges), LatentAssignment { latents }))
}

/// Splits the edges into `(G1, G2)`: each edge goes to `G1` with probability
/// `1 - epsilon`. Both graphs keep the full vertex set.
pub fn split_edges(gr: &SparseGraph, epsilon: f64, seed: u64) -> Result<(SparseGraph, SparseGraph)> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must lie in (0,1), got {epsilon}"
        )));
    }
    let mut rng = stage_rng("split", seed);
    let mut first = Vec::with_capacity(gr.num_edges());
    let mut second = Vec::new();
    for &e in gr.edges() {
        if rng.gen::<f64>() < 1.0 - epsilon {
            first.push(e);
        } else {
            second.push(e);
        }
    }
    Ok((
        SparseGraph::from_sorted_unique(gr.n(), first),
        SparseGraph::from_sorted_unique(gr.n(), second),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeStats {
    pub mean: f64,
    pub max: usize,
    /// `histogram[d]` vertices have degree `d`.
    pub histogram: Vec<usize>,
}

pub fn degree_stats(gr: &SparseGraph) -> DegreeStats {
    let max = (0..gr.n()).map(|v| gr.degree(v)).max().unwrap_or(0);
    let mut histogram = vec![0usize; max + 1];
    for v in 0..gr.n() {
        histogram[gr.degree(v)] += 1;
    }
    let mean = if gr.n() == 0 {
        0.0
    } else {
        2.0 * gr.num_edges() as f64 / gr.n() as f64
    };
    DegreeStats {
        mean,
        max,
        histogram,
    }
}
