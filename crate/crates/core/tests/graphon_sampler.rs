mod common;

use graphon_core::graphon::*;
use graphon_core::sampler::*;
use rand::Rng;

fn sbm() -> StepGraphon {
    StepGraphon::equal_blocks(vec![vec![7.0, 1.0], vec![1.0, 7.0]]).unwrap()
}

#[test]
fn two_block_eigenpairs_are_analytic() {
    let s = spectral_decompose(&sbm()).unwrap();
    assert!((s.eigenvalues[0] - 4.0).abs() < 1e-12);
    assert!((s.eigenvalues[1] - 3.0).abs() < 1e-12);
    for v in &s.eigenfunctions[0].values {
        assert!((v - 1.0).abs() < 1e-12);
    }
    let f2 = &s.eigenfunctions[1].values;
    assert!((f2[0].abs() - 1.0).abs() < 1e-12 && (f2[0] + f2[1]).abs() < 1e-12);
    assert!((s.degree_constant - 4.0).abs() < 1e-12);
}

#[test]
fn decomposition_matches_midpoint_quadrature() {
    let mut rng = common::rng(12);
    for _ in 0..20 {
        let k = rng.gen_range(2..=5);
        let mut w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        let mut values = vec![vec![0.0; k]; k];
        for a in 0..k {
            for b in a..k {
                let v = rng.gen_range(0.0..9.0);
                values[a][b] = v;
                values[b][a] = v;
            }
        }
        let g = StepGraphon::new(w, values).unwrap();
        let s = spectral_decompose(&g).unwrap();
        // kernel reconstruction and orthonormality on a fine grid
        let res = 4000;
        let xs: Vec<f64> = (0..res).map(|i| (i as f64 + 0.5) / res as f64).collect();
        for i in 0..s.rank() {
            for j in 0..s.rank() {
                let ip: f64 = xs.iter().map(|&x| s.eigenfunctions[i].eval(x) * s.eigenfunctions[j].eval(x)).sum::<f64>()
                    / res as f64;
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((ip - expect).abs() < 5e-3, "({i},{j}) {ip}");
            }
        }
        for &x in xs.iter().step_by(97) {
            for &y in xs.iter().step_by(89) {
                assert!((s.value(x, y) - g.value(x, y)).abs() < 1e-9);
            }
        }
        let mags: Vec<f64> = s.eigenvalues.iter().map(|m| m.abs()).collect();
        assert!(mags.windows(2).all(|p| p[0] >= p[1]));
    }
}

#[test]
fn edge_counts_match_block_expectations() {
    let g = StepGraphon::new(
        vec![0.2, 0.3, 0.5],
        vec![vec![9.0, 2.0, 0.5], vec![2.0, 6.0, 1.0], vec![0.5, 1.0, 4.0]],
    )
    .unwrap();
    let n = 30_000;
    let (graph, latents) = sample_graph(&g, n, 21).unwrap();
    let block: Vec<usize> = latents.latents.iter().map(|&x| g.block_of(x)).collect();
    let mut sizes = [0f64; 3];
    for &b in &block {
        sizes[b] += 1.0;
    }
    let mut counts = [[0f64; 3]; 3];
    for &(u, v) in graph.edges() {
        let (a, b) = (block[u].min(block[v]), block[u].max(block[v]));
        counts[a][b] += 1.0;
    }
    for a in 0..3 {
        for b in a..3 {
            let pairs = if a == b { sizes[a] * (sizes[a] - 1.0) / 2.0 } else { sizes[a] * sizes[b] };
            let p = g.values[a][b] / n as f64;
            let mean = pairs * p;
            let z = (counts[a][b] - mean) / (mean * (1.0 - p)).sqrt();
            assert!(z.abs() < 4.5, "block ({a},{b}): {} vs {mean}", counts[a][b]);
        }
    }
    // latent positions are uniform: Kolmogorov–Smirnov at 1e-3
    let mut xs = latents.latents.clone();
    xs.sort_by(f64::total_cmp);
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n as f64 - x).abs().max((x - i as f64 / n as f64).abs()))
        .fold(0.0, f64::max);
    assert!(d * (n as f64).sqrt() < 1.95, "KS {d}");
}

#[test]
fn sampling_and_splitting_are_seeded() {
    let (a, la) = sample_graph(&sbm(), 5000, 4).unwrap();
    let (b, lb) = sample_graph(&sbm(), 5000, 4).unwrap();
    let (c, _) = sample_graph(&sbm(), 5000, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_ne!(a, c);
    let (g1, g2) = split_edges(&a, 0.3, 4).unwrap();
    assert_eq!(split_edges(&a, 0.3, 4).unwrap(), (g1.clone(), g2.clone()));
    assert_eq!(g1.num_edges() + g2.num_edges(), a.num_edges());
    assert_eq!((g1.n(), g2.n()), (5000, 5000));
    for &(u, v) in g2.edges() {
        assert!(a.has_edge(u, v) && !g1.has_edge(u, v));
    }
    let m = a.num_edges() as f64;
    let z = (g2.num_edges() as f64 - 0.3 * m) / (m * 0.3 * 0.7).sqrt();
    assert!(z.abs() < 4.0, "{z}");
}

#[test]
fn mean_degree_concentrates() {
    let (g, _) = sample_graph(&sbm(), 40_000, 9).unwrap();
    let stats = degree_stats(&g);
    // Var(2|E|/n) ≈ 2·4/n
    assert!((stats.mean - 4.0).abs() < 4.0 * (8.0 / 40_000f64).sqrt(), "{}", stats.mean);
    assert_eq!(stats.histogram.iter().sum::<usize>(), 40_000);
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (g, l) = sample_graph(&sbm(), 800, 1).unwrap();
    let path = dir.path().join("g.edges");
    g.write_edge_list(&path).unwrap();
    assert_eq!(SparseGraph::read_edge_list(&path).unwrap(), g);
    assert_eq!(LatentAssignment::from_text(&l.to_text(), "l").unwrap(), l);
    let text = serde_json::to_string(&sbm()).unwrap();
    assert_eq!(StepGraphon::from_json(&text).unwrap(), sbm());
}
