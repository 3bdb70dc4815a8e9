use rayon::prelude::*;

use crate::sampler::SparseGraph;

/// A real linear map applied matrix-free.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

/// Oriented edges of a simple graph. Undirected edge `i = {u, v}` with
/// `u < v` yields `2i = (u → v)` and `2i + 1 = (v → u)`, so the reversal
/// `e⁻¹` is `e ^ 1`.
#[derive(Debug, Clone)]
pub struct OrientedEdgeSpace {
    n: usize,
    tails: Vec<usize>,
    heads: Vec<usize>,
    /// Oriented edges grouped by tail vertex, CSR layout.
    out_offsets: Vec<usize>,
    out_edges: Vec<usize>,
    /// Oriented edges grouped by head vertex, CSR layout.
    in_offsets: Vec<usize>,
    in_edges: Vec<usize>,
}

fn group_by(n: usize, keys: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut offsets = vec![0usize; n + 1];
    for &k in keys {
        offsets[k + 1] += 1;
    }
    for v in 0..n {
        offsets[v + 1] += offsets[v];
    }
    let mut fill = offsets[..n].to_vec();
    let mut items = vec![0usize; keys.len()];
    for (e, &k) in keys.iter().enumerate() {
        items[fill[k]] = e;
        fill[k] += 1;
    }
    (offsets, items)
}

impl OrientedEdgeSpace {
    pub fn new(graph: &SparseGraph) -> Self {
        let m = graph.num_edges();
        let mut tails = Vec::with_capacity(2 * m);
        let mut heads = Vec::with_capacity(2 * m);
        for &(u, v) in graph.edges() {
            tails.push(u);
            heads.push(v);
            tails.push(v);
            heads.push(u);
        }
        let (out_offsets, out_edges) = group_by(graph.n(), &tails);
        let (in_offsets, in_edges) = group_by(graph.n(), &heads);
        OrientedEdgeSpace {
            n: graph.n(),
            tails,
            heads,
            out_offsets,
            out_edges,
            in_offsets,
            in_edges,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.tails.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tails.is_empty()
    }

    pub fn tail(&self, e: usize) -> usize {
        self.tails[e]
    }

    pub fn head(&self, e: usize) -> usize {
        self.heads[e]
    }

    pub fn inverse(&self, e: usize) -> usize {
        e ^ 1
    }

    pub fn index_of(&self, tail: usize, head: usize) -> Option<usize> {
        self.out_of(tail).iter().copied().find(|&e| self.heads[e] == head)
    }

    /// Oriented edges leaving `v`.
    pub fn out_of(&self, v: usize) -> &[usize] {
        &self.out_edges[self.out_offsets[v]..self.out_offsets[v + 1]]
    }

    /// Oriented edges entering `v`.
    pub fn into(&self, v: usize) -> &[usize] {
        &self.in_edges[self.in_offsets[v]..self.in_offsets[v + 1]]
    }
}

/// Non-backtracking operator `B_{ef} = 1(e₂ = f₁) 1(e ≠ f⁻¹)`.
///
/// `(Bx)(e) = t(e₂) − x(e⁻¹)` with `t(v) = Σ_{f₁ = v} x(f)`, two passes of
/// cost `O(n + |E|)`.
#[derive(Debug, Clone)]
pub struct NbOperator {
    space: OrientedEdgeSpace,
}

impl NbOperator {
    pub fn new(graph: &SparseGraph) -> Self {
        NbOperator {
            space: OrientedEdgeSpace::new(graph),
        }
    }

    pub fn space(&self) -> &OrientedEdgeSpace {
        &self.space
    }

    /// Explicit CSR rows of `B`, built entry by entry from the definition.
    pub fn explicit_rows(&self) -> Vec<Vec<usize>> {
        let s = &self.space;
        (0..s.len())
            .map(|e| {
                let mut row: Vec<usize> = s
                    .out_of(s.head(e))
                    .iter()
                    .copied()
                    .filter(|&f| s.head(f) != s.tail(e))
                    .collect();
                row.sort_unstable();
                row
            })
            .collect()
    }
}

impl LinearOperator for NbOperator {
    fn dim(&self) -> usize {
        self.space.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let s = &self.space;
        let t: Vec<f64> = (0..s.n)
            .into_par_iter()
            .map(|v| s.out_of(v).iter().map(|&f| x[f]).sum())
            .collect();
        y.par_iter_mut()
            .enumerate()
            .for_each(|(e, ye)| *ye = t[s.heads[e]] - x[e ^ 1]);
    }
}

/// Companion operator `[[A, I − D], [I, 0]]` on `R^{2n}` whose eigenvalues
/// other than `±1` are those of the non-backtracking operator.
#[derive(Debug, Clone)]
pub struct IharaBassOperator {
    graph: SparseGraph,
}

pub fn ihara_bass_reduce(graph: &SparseGraph) -> IharaBassOperator {
    IharaBassOperator {
        graph: graph.clone(),
    }
}

impl IharaBassOperator {
    pub fn dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.graph.n();
        let mut m = nalgebra::DMatrix::zeros(2 * n, 2 * n);
        for v in 0..n {
            for &u in self.graph.neighbors(v) {
                m[(v, u)] = 1.0;
            }
            m[(v, n + v)] = 1.0 - self.graph.degree(v) as f64;
            m[(n + v, v)] = 1.0;
        }
        m
    }
}

impl LinearOperator for IharaBassOperator {
    fn dim(&self) -> usize {
        2 * self.graph.n()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.graph.n();
        let (top, bottom) = y.split_at_mut(n);
        let g = &self.graph;
        top.par_iter_mut().enumerate().for_each(|(v, yv)| {
            let a: f64 = g.neighbors(v).iter().map(|&u| x[u]).sum();
            *yv = a + (1.0 - g.degree(v) as f64) * x[n + v];
        });
        bottom.copy_from_slice(&x[..n]);
    }
}
