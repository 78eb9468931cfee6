//! Binary graphs, network portraits, Portrait Divergence, summary metrics and circuit analyses.

use crate::connectome::FunctionalNetwork;
use crate::error::{Error, Result};
use crate::linalg::{upper_pairs, upper_triangle};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};

/// Undirected simple graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryGraph {
    adj: Vec<Vec<usize>>,
}

impl BinaryGraph {
    pub fn empty(n: usize) -> Self {
        BinaryGraph { adj: vec![Vec::new(); n] }
    }

    /// Builds a graph from undirected edges; self-loops and duplicates are dropped.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::empty(n);
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::InconsistentInput(format!("edge ({a}, {b}) outside {n} nodes")));
            }
            if a != b && !g.adj[a].contains(&b) {
                g.adj[a].push(b);
                g.adj[b].push(a);
            }
        }
        for list in &mut g.adj {
            list.sort_unstable();
        }
        Ok(g)
    }

    pub fn complete(n: usize) -> Self {
        BinaryGraph { adj: (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect() }
    }

    pub fn path(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::from_edges(n, &edges).expect("valid path")
    }

    pub fn num_nodes(&self) -> usize {
        self.adj.len()
    }

    pub fn num_edges(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adj[v]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adj[a].binary_search(&b).is_ok()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, list) in self.adj.iter().enumerate() {
            out.extend(list.iter().filter(|&&b| b > a).map(|&b| (a, b)));
        }
        out
    }

    /// Hop distances from `s`; `None` marks unreachable nodes.
    pub fn bfs(&self, s: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.num_nodes()];
        dist[s] = Some(0);
        let mut q = VecDeque::from([s]);
        while let Some(v) = q.pop_front() {
            let d = dist[v].expect("queued nodes are reached");
            for &w in &self.adj[v] {
                if dist[w].is_none() {
                    dist[w] = Some(d + 1);
                    q.push_back(w);
                }
            }
        }
        dist
    }

    /// Connected-component index per node, numbered in order of first appearance.
    pub fn components(&self) -> Vec<usize> {
        let mut comp = vec![usize::MAX; self.num_nodes()];
        let mut next = 0;
        for s in 0..self.num_nodes() {
            if comp[s] != usize::MAX {
                continue;
            }
            for (v, d) in self.bfs(s).into_iter().enumerate() {
                if d.is_some() {
                    comp[v] = next;
                }
            }
            next += 1;
        }
        comp
    }

    pub fn component_sizes(&self) -> Vec<usize> {
        let comp = self.components();
        let mut sizes = vec![0; comp.iter().map(|c| c + 1).max().unwrap_or(0)];
        for c in comp {
            sizes[c] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Binarization {
    /// Edge when `|fc| >= tau`.
    #[default]
    Absolute,
    /// Edge when `fc >= tau`.
    PositiveOnly,
}

pub fn threshold_graph(fc: &FunctionalNetwork, tau: f64, rule: Binarization) -> BinaryGraph {
    threshold_matrix(&fc.fc, tau, rule)
}

pub fn threshold_matrix(fc: &DMatrix<f64>, tau: f64, rule: Binarization) -> BinaryGraph {
    let n = fc.nrows();
    let mut edges = Vec::new();
    for (i, j) in upper_pairs(n) {
        let w = fc[(i, j)];
        let keep = match rule {
            Binarization::Absolute => w.abs() >= tau,
            Binarization::PositiveOnly => w >= tau,
        };
        if keep {
            edges.push((i, j));
        }
    }
    BinaryGraph::from_edges(n, &edges).expect("indices in range")
}

/// `B[l][k]`: number of nodes with exactly `k` nodes at distance `l`,
/// for `l = 0..=d_max` and `k = 0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Portrait {
    pub b: DMatrix<f64>,
    pub diameter: usize,
}

pub fn network_portrait(g: &BinaryGraph) -> Portrait {
    let n = g.num_nodes();
    let dists: Vec<Vec<Option<usize>>> = (0..n).map(|s| g.bfs(s)).collect();
    let diameter = dists.iter().flatten().filter_map(|d| *d).max().unwrap_or(0);
    let mut b = DMatrix::zeros(diameter + 1, n + 1);
    for row in &dists {
        let mut counts = vec![0usize; diameter + 1];
        for d in row.iter().flatten() {
            counts[*d] += 1;
        }
        for (l, &k) in counts.iter().enumerate() {
            b[(l, k)] += 1.0;
        }
    }
    Portrait { b, diameter }
}

/// Joint distribution `P(k, l)` keyed by `(k, l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PortraitDistribution {
    pub p: BTreeMap<(usize, usize), f64>,
}

impl PortraitDistribution {
    pub fn total(&self) -> f64 {
        self.p.values().sum()
    }
}

/// `P(k, l) = (1/N) B[l][k] * (sum_k' k' B[l][k']) / sum_c n_c^2`.
pub fn portrait_distribution(portrait: &Portrait, g: &BinaryGraph) -> Result<PortraitDistribution> {
    let n = g.num_nodes();
    if portrait.b.ncols() != n + 1 {
        return Err(Error::InconsistentInput(format!("portrait has {} columns for {n} nodes", portrait.b.ncols())));
    }
    let norm: f64 = g.component_sizes().iter().map(|&c| (c * c) as f64).sum();
    let mut p = BTreeMap::new();
    for l in 0..portrait.b.nrows() {
        let paths: f64 = (0..=n).map(|k| k as f64 * portrait.b[(l, k)]).sum();
        if paths != 0.0 && portrait.b.row(l).sum() != n as f64 {
            return Err(Error::InconsistentInput(format!("portrait row {l} does not account for {n} nodes")));
        }
        for k in 0..=n {
            let v = portrait.b[(l, k)] / n as f64 * paths / norm;
            if v > 0.0 {
                p.insert((k, l), v);
            }
        }
    }
    Ok(PortraitDistribution { p })
}

/// Jensen-Shannon divergence in bits over the union of supports.
pub fn jensen_shannon(p: &PortraitDistribution, q: &PortraitDistribution) -> f64 {
    let mut keys: Vec<(usize, usize)> = p.p.keys().chain(q.p.keys()).cloned().collect();
    keys.sort_unstable();
    keys.dedup();
    let mut js = 0.0;
    for key in keys {
        let a = p.p.get(&key).copied().unwrap_or(0.0);
        let b = q.p.get(&key).copied().unwrap_or(0.0);
        let m = 0.5 * (a + b);
        if a > 0.0 {
            js += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            js += 0.5 * b * (b / m).log2();
        }
    }
    js.clamp(0.0, 1.0)
}

pub fn portrait_divergence(g1: &BinaryGraph, g2: &BinaryGraph) -> f64 {
    let p = portrait_distribution(&network_portrait(g1), g1).expect("portrait of the same graph");
    let q = portrait_distribution(&network_portrait(g2), g2).expect("portrait of the same graph");
    if p == q {
        return 0.0;
    }
    jensen_shannon(&p, &q)
}

/// `1 - PDiv`.
pub fn consistency(g1: &BinaryGraph, g2: &BinaryGraph) -> f64 {
    1.0 - portrait_divergence(g1, g2)
}

/// Mean shortest-path length over reachable ordered pairs; 0 when no pair is reachable.
pub fn char_path_length(g: &BinaryGraph) -> f64 {
    let (mut total, mut count) = (0usize, 0usize);
    for s in 0..g.num_nodes() {
        for (v, d) in g.bfs(s).into_iter().enumerate() {
            if let (true, Some(d)) = (v != s, d) {
                total += d;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total as f64 / count as f64
    }
}

/// Mean local clustering coefficient; nodes of degree below 2 contribute 0.
pub fn clustering_coefficient(g: &BinaryGraph) -> f64 {
    let n = g.num_nodes();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for v in 0..n {
        let nb = g.neighbors(v);
        let d = nb.len();
        if d < 2 {
            continue;
        }
        let mut links = 0;
        for (i, &a) in nb.iter().enumerate() {
            for &b in &nb[i + 1..] {
                if g.has_edge(a, b) {
                    links += 1;
                }
            }
        }
        total += 2.0 * links as f64 / (d * (d - 1)) as f64;
    }
    total / n as f64
}

/// Mean inverse shortest-path length over ordered pairs, with unreachable pairs counting 0.
pub fn global_efficiency(g: &BinaryGraph) -> f64 {
    let n = g.num_nodes();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for s in 0..n {
        for (v, d) in g.bfs(s).into_iter().enumerate() {
            if let (true, Some(d)) = (v != s, d) {
                total += 1.0 / d as f64;
            }
        }
    }
    total / (n * (n - 1)) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub cpl: f64,
    pub clustering: f64,
    pub efficiency: f64,
}

pub fn tau_sweep(fc: &DMatrix<f64>, taus: &[f64], rule: Binarization) -> Vec<SweepRow> {
    taus.iter()
        .map(|&tau| {
            let g = threshold_matrix(fc, tau, rule);
            SweepRow { tau, cpl: char_path_length(&g), clustering: clustering_coefficient(&g), efficiency: global_efficiency(&g) }
        })
        .collect()
}

/// Parses `start:end:step` into the inclusive grid `start + i * step`.
pub fn parse_tau_range(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Parse { location: "tau range".into(), message: format!("expected start:end:step, got {spec:?}") };
    if parts.len() != 3 {
        return Err(bad());
    }
    let v: Vec<f64> = parts.iter().map(|s| s.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
    let (start, end, step) = (v[0], v[1], v[2]);
    if !(step > 0.0) || end < start || start < 0.0 {
        return Err(bad());
    }
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}

/// Largest pointwise gap between two metric curves sampled on the same grid.
pub fn max_vertical_gap(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

fn group_mean(group: &[FunctionalNetwork]) -> Result<DMatrix<f64>> {
    let first = group.first().ok_or(Error::EmptyGroup)?;
    let mut acc = DMatrix::zeros(first.fc.nrows(), first.fc.ncols());
    for net in group {
        if net.fc.shape() != acc.shape() {
            return Err(Error::shape(format!("network {:?} vs {:?}", net.fc.shape(), acc.shape())));
        }
        acc += &net.fc;
    }
    Ok(acc / group.len() as f64)
}

/// `mean(group_a) - mean(group_b)`.
pub fn abnormal_circuit(group_a: &[FunctionalNetwork], group_b: &[FunctionalNetwork]) -> Result<DMatrix<f64>> {
    let a = group_mean(group_a)?;
    let b = group_mean(group_b)?;
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("group networks {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut d = a - b;
    let n = d.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (d[(i, j)] + d[(j, i)]);
            d[(i, j)] = m;
            d[(j, i)] = m;
        }
    }
    Ok(d)
}

/// Cosine similarity of the strict upper triangles.
pub fn circuit_cosine_similarity(c1: &DMatrix<f64>, c2: &DMatrix<f64>) -> Result<f64> {
    if c1.shape() != c2.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", c1.shape(), c2.shape())));
    }
    let a = upper_triangle(c1);
    let b = upper_triangle(c2);
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// The `k` upper-triangle entries of largest magnitude, ties in `(i, j)` order.
pub fn top_k_edges(circuit: &DMatrix<f64>, k: usize) -> Result<Vec<(usize, usize, f64)>> {
    let pairs = upper_pairs(circuit.nrows());
    if k > pairs.len() {
        return Err(Error::KTooLarge { requested: k, available: pairs.len() });
    }
    let mut entries: Vec<(usize, usize, f64)> = pairs.into_iter().map(|(i, j)| (i, j, circuit[(i, j)])).collect();
    entries.sort_by(|a, b| b.2.abs().total_cmp(&a.2.abs()).then((a.0, a.1).cmp(&(b.0, b.1))));
    entries.truncate(k);
    Ok(entries)
}
