//! Spectral clustering of activity profiles.
//!
//! Profiles are compared by cosine similarity, joined into a k-nearest
//! neighbor graph, and the smallest eigenvectors of its symmetric normalized
//! Laplacian `I - D^{-1/2} W D^{-1/2}` embed the cells for k-means. The
//! number of clusters comes from the largest gap in the ascending spectrum
//! unless fixed by the caller.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{CellId, GridSpec};
use crate::linalg::{lanczos_smallest, sym_eig, Spectrum};
use crate::par;
use crate::profiles::ActivityProfileMatrix;

/// Cosine of the angle between `u` and `v`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::input("vectors differ in length"));
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if !(nu > 0.0 && nv > 0.0) {
        return Err(Error::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Symmetrize {
    /// Keep an edge when either endpoint picks the other.
    #[default]
    Or,
    /// Keep an edge only when both endpoints pick each other.
    And,
}

impl FromStr for Symmetrize {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "or" => Ok(Symmetrize::Or),
            "and" => Ok(Symmetrize::And),
            _ => Err(format!("symmetrize must be `or` or `and`, got `{s}`")),
        }
    }
}

impl std::fmt::Display for Symmetrize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Symmetrize::Or => "or",
            Symmetrize::And => "and",
        })
    }
}

/// Sparse symmetric weighted graph over a subset of grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    /// Grid cell of each vertex.
    pub vertices: Vec<CellId>,
    /// Neighbors of each vertex with positive weight, ascending by index.
    pub adjacency: Vec<Vec<(usize, f64)>>,
    pub degree: Vec<f64>,
}

impl SimilarityGraph {
    /// Builds a graph from explicit undirected weighted edges.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut adj: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for &(a, b, w) in edges {
            if a >= n || b >= n || a == b {
                return Err(Error::input(format!("bad edge ({a}, {b})")));
            }
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::input(format!(
                    "edge weight {w} must be non-negative"
                )));
            }
            if w > 0.0 {
                adj[a].insert(b, w);
                adj[b].insert(a, w);
            }
        }
        Ok(Self::from_maps((0..n).map(CellId).collect(), adj))
    }

    fn from_maps(vertices: Vec<CellId>, adj: Vec<BTreeMap<usize, f64>>) -> Self {
        let adjacency: Vec<Vec<(usize, f64)>> =
            adj.into_iter().map(|m| m.into_iter().collect()).collect();
        let degree = adjacency
            .iter()
            .map(|row| row.iter().map(|&(_, w)| w).sum())
            .collect();
        SimilarityGraph {
            vertices,
            adjacency,
            degree,
        }
    }

    pub fn n(&self) -> usize {
        self.vertices.len()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i]
            .binary_search_by_key(&j, |&(k, _)| k)
            .map(|p| self.adjacency[i][p].1)
            .unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.n();
        let mut w = Array2::zeros((n, n));
        for (i, row) in self.adjacency.iter().enumerate() {
            for &(j, v) in row {
                w[[i, j]] = v;
            }
        }
        w
    }

    /// Number of connected components (isolated vertices count).
    pub fn components(&self) -> usize {
        component_members(self).len()
    }
}

/// kNN cosine graph over the rows of `rows`; `vertices` names each row.
pub fn knn_graph_rows(
    rows: ArrayView2<'_, f64>,
    vertices: Vec<CellId>,
    k_nn: usize,
    mode: Symmetrize,
) -> Result<SimilarityGraph> {
    let m = rows.nrows();
    if vertices.len() != m {
        return Err(Error::input("vertex list does not match row count"));
    }
    if k_nn < 1 || k_nn >= m {
        return Err(Error::TooFewVertices {
            needed: k_nn.max(1),
            have: m,
        });
    }
    let unit: Vec<Vec<f64>> = rows
        .rows()
        .into_iter()
        .map(|r| {
            let v: Vec<f64> = r.to_vec();
            let norm = dot(&v, &v).sqrt();
            if norm > 0.0 {
                Ok(v.iter().map(|x| x / norm).collect())
            } else {
                Err(Error::ZeroVector)
            }
        })
        .collect::<Result<_>>()?;
    let picks: Vec<Vec<(usize, f64)>> = par::map_range(m, |i| {
        let mut sims: Vec<(usize, f64)> = (0..m)
            .filter(|&j| j != i)
            .map(|j| (j, dot(&unit[i], &unit[j]).clamp(-1.0, 1.0)))
            .collect();
        let by_rank = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        sims.select_nth_unstable_by(k_nn - 1, by_rank);
        sims.truncate(k_nn);
        sims.sort_by(by_rank);
        sims
    });
    let chosen: Vec<std::collections::BTreeSet<usize>> = picks
        .iter()
        .map(|p| p.iter().map(|&(j, _)| j).collect())
        .collect();
    let mut adj: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); m];
    for (i, p) in picks.iter().enumerate() {
        for &(j, s) in p {
            let keep = match mode {
                Symmetrize::Or => true,
                Symmetrize::And => chosen[j].contains(&i),
            };
            let w = s.max(0.0);
            if keep && w > 0.0 {
                adj[i].insert(j, w);
                adj[j].insert(i, w);
            }
        }
    }
    Ok(SimilarityGraph::from_maps(vertices, adj))
}

/// kNN cosine graph over the usable (non-empty) profile rows.
pub fn knn_graph(
    profiles: &ActivityProfileMatrix,
    k_nn: usize,
    mode: Symmetrize,
) -> Result<SimilarityGraph> {
    let cells = profiles.usable_cells();
    let rows = profiles.values.select(
        ndarray::Axis(0),
        &cells.iter().map(|c| c.0).collect::<Vec<_>>(),
    );
    knn_graph_rows(rows.view(), cells, k_nn, mode)
}

/// `D - W`, or `I - D^{-1/2} W D^{-1/2}` when `normalized`.
pub fn laplacian(g: &SimilarityGraph, normalized: bool) -> Result<Array2<f64>> {
    let n = g.n();
    let mut l = Array2::zeros((n, n));
    if normalized {
        if let Some(i) = g.degree.iter().position(|&d| !(d > 0.0)) {
            return Err(Error::ZeroDegree(i));
        }
        let inv: Vec<f64> = g.degree.iter().map(|d| 1.0 / d.sqrt()).collect();
        for i in 0..n {
            l[[i, i]] = 1.0;
            for &(j, w) in &g.adjacency[i] {
                l[[i, j]] = -w * inv[i] * inv[j];
            }
        }
        // the products above can differ in the last bit between (i,j) and (j,i)
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (l[[i, j]] + l[[j, i]]);
                l[[i, j]] = v;
                l[[j, i]] = v;
            }
        }
    } else {
        for i in 0..n {
            l[[i, i]] = g.degree[i];
            for &(j, w) in &g.adjacency[i] {
                l[[i, j]] = -w;
            }
        }
    }
    Ok(l)
}

/// Graphs up to this many vertices get a dense eigendecomposition.
pub const DENSE_LIMIT: usize = 1500;

/// Vertex lists of the connected components, in order of smallest vertex.
pub fn component_members(g: &SimilarityGraph) -> Vec<Vec<usize>> {
    let n = g.n();
    let mut comp = vec![usize::MAX; n];
    let mut out: Vec<Vec<usize>> = Vec::new();
    for s in 0..n {
        if comp[s] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut members = vec![s];
        comp[s] = id;
        let mut at = 0;
        while at < members.len() {
            let v = members[at];
            at += 1;
            for &(u, _) in &g.adjacency[v] {
                if comp[u] == usize::MAX {
                    comp[u] = id;
                    members.push(u);
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

/// The `r` smallest eigenpairs of the normalized Laplacian of `g`.
///
/// Up to [`DENSE_LIMIT`] vertices this is a dense decomposition and every
/// eigenvalue is returned. Larger graphs are split into connected
/// components, each solved on its own (Lanczos on the sparse operator when
/// it is large), and only the `r` smallest values are returned.
pub fn normalized_laplacian_spectrum(g: &SimilarityGraph, r: usize, tol: f64) -> Result<Spectrum> {
    laplacian_spectrum_with_limit(g, r, tol, DENSE_LIMIT)
}

/// [`normalized_laplacian_spectrum`] with an explicit dense-size cutoff.
pub fn laplacian_spectrum_with_limit(
    g: &SimilarityGraph,
    r: usize,
    tol: f64,
    dense_limit: usize,
) -> Result<Spectrum> {
    let n = g.n();
    if n <= dense_limit {
        let lap = laplacian(g, true)?;
        return sym_eig(lap.view(), r, tol);
    }
    if let Some(i) = g.degree.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::ZeroDegree(i));
    }
    let inv: Vec<f64> = g.degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let comps = component_members(g);
    let parts = par::map_slice(&comps, |members| -> Result<Spectrum> {
        let s = members.len();
        let local: BTreeMap<usize, usize> =
            members.iter().enumerate().map(|(a, &v)| (v, a)).collect();
        let want = r.min(s);
        if s <= dense_limit {
            let mut l = Array2::zeros((s, s));
            for (a, &v) in members.iter().enumerate() {
                l[[a, a]] = 1.0;
                for &(u, w) in &g.adjacency[v] {
                    let b = local[&u];
                    l[[a, b]] = -w * inv[v] * inv[u];
                }
            }
            for a in 0..s {
                for b in 0..a {
                    let v = 0.5 * (l[[a, b]] + l[[b, a]]);
                    l[[a, b]] = v;
                    l[[b, a]] = v;
                }
            }
            let full = sym_eig(l.view(), want, tol)?;
            return Ok(Spectrum {
                eigenvalues: full.eigenvalues[..want].to_vec(),
                eigenvectors: full.eigenvectors,
            });
        }
        let rows: Vec<Vec<(usize, f64)>> = members
            .iter()
            .map(|&v| {
                g.adjacency[v]
                    .iter()
                    .map(|&(u, w)| (local[&u], w * inv[v] * inv[u]))
                    .collect()
            })
            .collect();
        let apply = |x: &[f64], y: &mut [f64]| {
            for (a, row) in rows.iter().enumerate() {
                y[a] = x[a] - row.iter().map(|&(b, w)| w * x[b]).sum::<f64>();
            }
        };
        lanczos_smallest(s, apply, want, 2.0, tol, 0x5eed)
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let mut pool: Vec<(f64, usize, usize)> = parts
        .iter()
        .enumerate()
        .flat_map(|(c, sp)| {
            sp.eigenvalues
                .iter()
                .enumerate()
                .map(move |(i, &l)| (l, c, i))
        })
        .collect();
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    if pool.len() < r {
        return Err(Error::NoConvergence(pool.len()));
    }
    pool.truncate(r);
    let mut eigenvectors = Array2::zeros((n, r));
    for (col, &(_, c, i)) in pool.iter().enumerate() {
        for (a, &v) in comps[c].iter().enumerate() {
            eigenvectors[[v, col]] = parts[c].eigenvectors[[a, i]];
        }
    }
    Ok(Spectrum {
        eigenvalues: pool.iter().map(|p| p.0).collect(),
        eigenvectors,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigengapChoice {
    pub k: usize,
    /// `gaps[i - 1] = lambda_{i+1} - lambda_i` for `i` in `1..=k_max`.
    pub gaps: Vec<f64>,
    /// The raw argmax was below 2 and got raised.
    pub clamped: bool,
}

/// `k = argmax_i (lambda_{i+1} - lambda_i)` over `i` in `1..=k_max`, ties to
/// the smaller `i`, clamped to at least 2.
pub fn eigengap_k(eigenvalues: &[f64], k_max: usize) -> Result<EigengapChoice> {
    if k_max < 1 || eigenvalues.len() < k_max + 1 {
        return Err(Error::input(format!(
            "eigengap search up to {k_max} needs {} eigenvalues, have {}",
            k_max + 1,
            eigenvalues.len()
        )));
    }
    let gaps: Vec<f64> = (1..=k_max)
        .map(|i| eigenvalues[i] - eigenvalues[i - 1])
        .collect();
    let mut best = 0;
    for (i, &g) in gaps.iter().enumerate() {
        if g > gaps[best] {
            best = i;
        }
    }
    let raw = best + 1;
    let clamped = raw < 2;
    if clamped {
        log::warn!("eigengap heuristic picked k = {raw}; using k = 2");
    }
    Ok(EigengapChoice {
        k: raw.max(2),
        gaps,
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    /// Inertia after each assignment step of the winning restart.
    pub history: Vec<f64>,
}

const KMEANS_MAX_ITERS: usize = 300;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distinct_rows(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    keys.sort();
    keys.dedup();
    keys.len()
}

/// Lloyd's algorithm from k-means++ seeds; the best of `restarts` runs.
pub fn kmeans(
    points: ArrayView2<'_, f64>,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<KMeansFit> {
    let rows: Vec<Vec<f64>> = points.rows().into_iter().map(|r| r.to_vec()).collect();
    if k == 0 {
        return Err(Error::input("k-means needs k >= 1"));
    }
    let distinct = distinct_rows(&rows);
    if k > distinct {
        return Err(Error::input(format!(
            "k = {k} exceeds the {distinct} distinct points"
        )));
    }
    let runs = par::map_range(restarts.max(1), |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
        lloyd(&rows, k, &mut rng)
    });
    let mut best = 0;
    for (i, run) in runs.iter().enumerate() {
        if run.inertia < runs[best].inertia {
            best = i;
        }
    }
    Ok(runs.into_iter().nth(best).unwrap())
}

fn plus_plus_init(rows: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut centers = vec![rows[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = rows.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        if d2[pick] == 0.0 {
            // rounding pushed past the end; take the last positive weight
            pick = d2
                .iter()
                .rposition(|&w| w > 0.0)
                .expect("k <= distinct points");
        }
        let c = rows[pick].clone();
        for (p, d) in rows.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

fn lloyd(rows: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> KMeansFit {
    let n = rows.len();
    let dim = rows.first().map_or(0, Vec::len);
    let mut centers = plus_plus_init(rows, k, rng);
    let mut labels = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let assigned = par::map_slice(rows, |p| nearest(p, &centers));
        let changed = assigned.iter().zip(&labels).any(|(a, &l)| a.0 != l);
        let inertia: f64 = assigned.iter().map(|a| a.1).sum();
        history.push(inertia);
        for (l, a) in labels.iter_mut().zip(&assigned) {
            *l = a.0;
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in rows.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // move the worst-served point into the empty cluster
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&rows[a], &centers[labels[a]])
                            .total_cmp(&sq_dist(&rows[b], &centers[labels[b]]))
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                centers[c] = rows[far].clone();
                counts[labels[far]] -= 1;
                labels[far] = c;
                counts[c] = 1;
            }
        }
    }
    let inertia = rows
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centers[l]))
        .sum();
    let mut centroids = Array2::zeros((k, dim));
    for (c, row) in centers.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            centroids[[c, j]] = v;
        }
    }
    KMeansFit {
        labels,
        centroids,
        inertia,
        history,
    }
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralParams {
    pub k_nn: usize,
    pub k_override: Option<usize>,
    pub k_max: usize,
    pub seed: u64,
    pub restarts: usize,
    /// L2-normalize embedding rows before k-means.
    pub row_normalize: bool,
    pub symmetrize: Symmetrize,
}

impl Default for SpectralParams {
    fn default() -> Self {
        SpectralParams {
            k_nn: 10,
            k_override: None,
            k_max: 20,
            seed: 42,
            restarts: 10,
            row_normalize: true,
            symmetrize: Symmetrize::Or,
        }
    }
}

/// Area types found by spectral clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    /// Cluster of every grid cell; `None` for cells left out of the graph.
    pub labels: Vec<Option<usize>>,
    /// k-means centroids in the spectral embedding (k x k).
    pub centroids: Array2<f64>,
    /// Smallest Laplacian eigenvalues, ascending (all of them for graphs
    /// that fit the dense solver).
    pub eigenvalues: Vec<f64>,
    pub eigengaps: Vec<f64>,
    pub k_clamped: bool,
}

impl ClusterModel {
    /// `(cell, cluster)` for every labeled cell.
    pub fn labeled(&self) -> Vec<(CellId, usize)> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|l| (CellId(i), l)))
            .collect()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for l in self.labels.iter().flatten() {
            sizes[*l] += 1;
        }
        sizes
    }
}

/// Relabels so clusters are numbered by first appearance.
fn canonical_labels(labels: &[usize], k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    for &l in labels {
        if map[l] == usize::MAX {
            map[l] = next;
            next += 1;
        }
    }
    for m in map.iter_mut().filter(|m| **m == usize::MAX) {
        *m = next;
        next += 1;
    }
    (labels.iter().map(|&l| map[l]).collect(), map)
}

pub fn spectral_cluster(
    profiles: &ActivityProfileMatrix,
    params: &SpectralParams,
) -> Result<ClusterModel> {
    let graph = knn_graph(profiles, params.k_nn, params.symmetrize)?;
    let m = graph.n();
    let k_max = params.k_max.min(m - 1).max(1);
    let r = (k_max + 1).max(params.k_override.unwrap_or(0));
    if r > m {
        return Err(Error::TooFewVertices { needed: r, have: m });
    }
    let Spectrum {
        eigenvalues,
        eigenvectors,
    } = normalized_laplacian_spectrum(&graph, r, 1e-8)?;
    let choice = eigengap_k(&eigenvalues, k_max)?;
    let (k, clamped) = match params.k_override {
        Some(k) if k >= 1 => (k, false),
        Some(_) => return Err(Error::input("k override must be at least 1")),
        None => (choice.k, choice.clamped),
    };
    let mut embed = eigenvectors.slice(ndarray::s![.., ..k]).to_owned();
    if params.row_normalize {
        for mut row in embed.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            }
        }
    }
    let fit = kmeans(embed.view(), k, params.seed, params.restarts)?;
    let (labels, map) = canonical_labels(&fit.labels, k);
    let mut centroids = Array2::zeros(fit.centroids.dim());
    for (old, &new) in map.iter().enumerate() {
        centroids.row_mut(new).assign(&fit.centroids.row(old));
    }
    let mut all = vec![None; profiles.n_cells()];
    for (v, &l) in graph.vertices.iter().zip(&labels) {
        all[v.0] = Some(l);
    }
    Ok(ClusterModel {
        k,
        labels: all,
        centroids,
        eigengaps: eigenvalues.windows(2).map(|w| w[1] - w[0]).collect(),
        eigenvalues,
        k_clamped: clamped,
    })
}

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len() as u64;
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sum_a * sum_b / choose2(n).max(1.0);
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

pub fn write_clusters_csv<W: Write>(model: &ClusterModel, mut out: W) -> Result<()> {
    writeln!(out, "cell_id,cluster")?;
    for (c, l) in model.labeled() {
        writeln!(out, "{c},{l}")?;
    }
    Ok(())
}

/// Reads `cell_id,cluster` rows into per-cell labels for a grid of `n_cells`.
pub fn read_clusters_csv<R: Read>(stream: R, n_cells: usize) -> Result<Vec<Option<usize>>> {
    let mut rdr = csv::Reader::from_reader(stream);
    crate::timeline::check_header(rdr.headers(), "cell_id,cluster")?;
    let mut labels = vec![None; n_cells];
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Row {
            row,
            message: e.to_string(),
        })?;
        let bad = || Error::Row {
            row,
            message: "malformed cluster row".into(),
        };
        let cell: usize = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let l: usize = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        if cell >= n_cells {
            return Err(Error::CellOutOfRange {
                index: cell,
                n: n_cells,
            });
        }
        labels[cell] = Some(l);
    }
    Ok(labels)
}

pub fn write_spectrum_csv<W: Write>(model: &ClusterModel, mut out: W) -> Result<()> {
    writeln!(out, "i,lambda,gap")?;
    for (i, l) in model.eigenvalues.iter().enumerate() {
        match model.eigengaps.get(i) {
            Some(g) => writeln!(out, "{},{l},{g}", i + 1)?,
            None => writeln!(out, "{},{l},", i + 1)?,
        }
    }
    Ok(())
}

/// Cell polygons as (lon, lat) rings, closed, counter-clockwise.
pub fn cell_ring(grid: &GridSpec, cell: CellId) -> Vec<[f64; 2]> {
    let (x0, y0, x1, y1) = grid.rect_local(cell);
    [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]
        .iter()
        .map(|&(x, y)| {
            let (lon, lat) = grid.to_geo(x, y);
            [lon, lat]
        })
        .collect()
}

/// GeoJSON FeatureCollection with one polygon per labeled cell.
pub fn clusters_geojson(grid: &GridSpec, model: &ClusterModel) -> serde_json::Value {
    let features: Vec<serde_json::Value> = model
        .labeled()
        .into_iter()
        .map(|(c, l)| {
            serde_json::json!({
                "type": "Feature",
                "properties": { "cell_id": c.0, "cluster": l },
                "geometry": { "type": "Polygon", "coordinates": [cell_ring(grid, c)] },
            })
        })
        .collect();
    serde_json::json!({ "type": "FeatureCollection", "features": features })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::ProfileFlag;
    use ndarray::array;

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[2.0, 1.0], &[2.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn three_points_two_neighbors_is_complete() {
        let rows = array![[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let g =
            knn_graph_rows(rows.view(), (0..3).map(CellId).collect(), 2, Symmetrize::Or).unwrap();
        assert_eq!(g.weight(0, 2), 0.0); // orthogonal, weight zero
        assert!((g.weight(0, 1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((g.weight(1, 2) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        let rows = array![[1.0, 0.1], [1.0, 1.0], [0.2, 1.0]];
        let g =
            knn_graph_rows(rows.view(), (0..3).map(CellId).collect(), 2, Symmetrize::Or).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let c =
                        cosine_similarity(&rows.row(i).to_vec(), &rows.row(j).to_vec()).unwrap();
                    assert!((g.weight(i, j) - c).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn separated_bundles_give_block_diagonal() {
        let rows = array![
            [1.0, 0.1, 0.0, 0.0],
            [1.0, 0.2, 0.0, 0.0],
            [0.9, 0.1, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.1],
            [0.0, 0.0, 1.0, 0.3],
            [0.0, 0.0, 0.8, 0.1],
        ];
        let g =
            knn_graph_rows(rows.view(), (0..6).map(CellId).collect(), 2, Symmetrize::Or).unwrap();
        let w = g.to_dense();
        for i in 0..3 {
            for j in 3..6 {
                assert_eq!(w[[i, j]], 0.0);
            }
        }
        assert_eq!(w, w.t());
        assert_eq!(g.components(), 2);
    }

    #[test]
    fn and_mode_is_subgraph_of_or_mode() {
        let rows = Array2::from_shape_fn((12, 3), |(i, j)| ((i * 7 + j * 3) % 5) as f64 + 0.5);
        let v: Vec<_> = (0..12).map(CellId).collect();
        let or = knn_graph_rows(rows.view(), v.clone(), 3, Symmetrize::Or)
            .unwrap()
            .to_dense();
        let and = knn_graph_rows(rows.view(), v, 3, Symmetrize::And)
            .unwrap()
            .to_dense();
        for (a, o) in and.iter().zip(or.iter()) {
            assert!(*a == 0.0 || a == o);
        }
    }

    #[test]
    fn knn_needs_enough_vertices() {
        let rows = array![[1.0], [2.0]];
        assert!(matches!(
            knn_graph_rows(rows.view(), vec![CellId(0), CellId(1)], 2, Symmetrize::Or),
            Err(Error::TooFewVertices { .. })
        ));
    }

    #[test]
    fn knn_graph_skips_flagged_rows() {
        let a = ActivityProfileMatrix {
            values: Array2::from_shape_fn(
                (5, 10),
                |(i, j)| if i == 2 { 0.0 } else { (i + j) as f64 },
            ),
            flags: vec![
                ProfileFlag::Ok,
                ProfileFlag::Ok,
                ProfileFlag::Empty,
                ProfileFlag::Ok,
                ProfileFlag::Capped,
            ],
        };
        let g = knn_graph(&a, 2, Symmetrize::Or).unwrap();
        assert_eq!(g.vertices, vec![CellId(0), CellId(1), CellId(3), CellId(4)]);
    }

    #[test]
    fn unnormalized_rows_sum_to_zero() {
        let g =
            SimilarityGraph::from_edges(4, &[(0, 1, 0.5), (1, 2, 0.25), (2, 3, 1.0), (0, 3, 0.1)])
                .unwrap();
        let l = laplacian(&g, false).unwrap();
        for row in l.rows() {
            assert!(row.sum().abs() < 1e-15);
        }
    }

    #[test]
    fn two_disconnected_edges_have_two_zero_eigenvalues() {
        let g = SimilarityGraph::from_edges(4, &[(0, 1, 1.0), (2, 3, 1.0)]).unwrap();
        for normalized in [false, true] {
            let l = laplacian(&g, normalized).unwrap();
            let s = sym_eig(l.view(), 4, 1e-10).unwrap();
            let zeros = s.eigenvalues.iter().filter(|v| v.abs() <= 1e-8).count();
            assert_eq!(zeros, 2);
        }
    }

    #[test]
    fn k3_spectrum() {
        // characteristic polynomial of [[2,-1,-1],[-1,2,-1],[-1,-1,2]]: -x (x-3)^2
        let g = SimilarityGraph::from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]).unwrap();
        let l = laplacian(&g, false).unwrap();
        let s = sym_eig(l.view(), 3, 1e-10).unwrap();
        assert!(s.eigenvalues[0].abs() < 1e-14);
        assert!((s.eigenvalues[1] - 3.0).abs() < 1e-14);
        assert!((s.eigenvalues[2] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn normalized_needs_positive_degree() {
        let g = SimilarityGraph::from_edges(3, &[(0, 1, 1.0)]).unwrap();
        assert!(matches!(laplacian(&g, true), Err(Error::ZeroDegree(2))));
    }

    #[test]
    fn eigengap_examples() {
        let c = eigengap_k(&[0.0, 0.0, 0.0, 0.9, 1.0, 1.1], 5).unwrap();
        assert_eq!(c.k, 3);
        assert!(!c.clamped);
        let flat = eigengap_k(&[0.0, 1.0, 2.0, 3.0, 4.0], 4).unwrap();
        assert_eq!(flat.k, 2);
        assert!(flat.clamped);
        assert!(eigengap_k(&[0.0, 1.0], 3).is_err());
    }

    #[test]
    fn kmeans_one_point_per_cluster() {
        let p = array![[0.0, 1.0], [4.0, 2.0], [3.0, -1.0], [7.0, 7.0]];
        let fit = kmeans(p.view(), 4, 42, 3).unwrap();
        assert_eq!(fit.inertia, 0.0);
        let mut l = fit.labels.clone();
        l.sort();
        assert_eq!(l, vec![0, 1, 2, 3]);
    }

    #[test]
    fn kmeans_line_split() {
        let p = array![[0.0], [0.1], [10.0], [10.1]];
        let fit = kmeans(p.view(), 2, 7, 5).unwrap();
        assert_eq!(fit.labels[0], fit.labels[1]);
        assert_eq!(fit.labels[2], fit.labels[3]);
        assert_ne!(fit.labels[0], fit.labels[2]);
        assert!((fit.inertia - 0.01).abs() < 1e-12);
    }

    #[test]
    fn kmeans_rejects_too_many_clusters() {
        let p = array![[1.0], [1.0], [2.0]];
        assert!(kmeans(p.view(), 3, 0, 1).is_err());
        assert!(kmeans(p.view(), 0, 0, 1).is_err());
    }

    #[test]
    fn kmeans_is_seed_deterministic() {
        let p = Array2::from_shape_fn((60, 2), |(i, j)| ((i * 31 + j * 17) % 23) as f64);
        let a = kmeans(p.view(), 4, 9, 4).unwrap();
        let b = kmeans(p.view(), 4, 9, 4).unwrap();
        assert_eq!(a, b);
        let s = par::sequential(|| kmeans(p.view(), 4, 9, 4).unwrap());
        assert_eq!(a, s);
    }

    #[test]
    fn ari_properties() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[0, 0, 0]), 1.0);
        let v = adjusted_rand_index(&[0, 0, 1, 1, 2, 2], &[0, 1, 0, 1, 0, 1]);
        assert!(v < 0.1);
    }

    #[test]
    fn repeated_patterns_form_clusters() {
        let patterns = [[3.0, 0.0, 1.0], [0.0, 2.0, 0.5], [0.2, 0.1, 4.0]];
        let n = 30;
        let values = Array2::from_shape_fn(
            (n, 10),
            |(i, j)| if j < 3 { patterns[i % 3][j] } else { 0.0 },
        );
        let a = ActivityProfileMatrix {
            values,
            flags: vec![ProfileFlag::Ok; n],
        };
        let params = SpectralParams {
            k_nn: 5,
            k_max: 8,
            ..Default::default()
        };
        let m = spectral_cluster(&a, &params).unwrap();
        assert_eq!(m.k, 3);
        let labels: Vec<usize> = m.labels.iter().map(|l| l.unwrap()).collect();
        let truth: Vec<usize> = (0..n).map(|i| i % 3).collect();
        assert_eq!(adjusted_rand_index(&labels, &truth), 1.0);
        assert_eq!(labels[0], 0);
    }

    #[test]
    fn csv_and_geojson_outputs() {
        let grid = GridSpec::new(9.0, 45.0, 100.0, 100.0, 2, 2).unwrap();
        let model = ClusterModel {
            k: 2,
            labels: vec![Some(0), None, Some(1), Some(0)],
            centroids: Array2::zeros((2, 2)),
            eigenvalues: vec![0.0, 0.5, 1.0],
            eigengaps: vec![0.5, 0.5],
            k_clamped: false,
        };
        let mut buf = Vec::new();
        write_clusters_csv(&model, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "cell_id,cluster\n0,0\n2,1\n3,0\n"
        );
        assert_eq!(read_clusters_csv(buf.as_slice(), 4).unwrap(), model.labels);
        let mut spec = Vec::new();
        write_spectrum_csv(&model, &mut spec).unwrap();
        assert_eq!(
            String::from_utf8(spec).unwrap(),
            "i,lambda,gap\n1,0,0.5\n2,0.5,0.5\n3,1,\n"
        );
        let gj = clusters_geojson(&grid, &model);
        assert_eq!(gj["features"].as_array().unwrap().len(), 3);
        assert_eq!(gj["features"][1]["properties"]["cluster"], 1);
        assert_eq!(
            gj["features"][0]["geometry"]["coordinates"][0]
                .as_array()
                .unwrap()
                .len(),
            5
        );
    }
    #[test]
    fn sparse_spectrum_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dirs = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let rows = Array2::from_shape_fn((240, 3), |(i, j)| {
            dirs[i % 3][j] + rng.random_range(0.0..0.2)
        });
        let g = knn_graph_rows(
            rows.view(),
            (0..240).map(CellId).collect(),
            6,
            Symmetrize::Or,
        )
        .unwrap();
        let dense = laplacian_spectrum_with_limit(&g, 8, 1e-8, 10_000).unwrap();
        let sparse = laplacian_spectrum_with_limit(&g, 8, 1e-8, 30).unwrap();
        assert_eq!(sparse.eigenvalues.len(), 8);
        for (a, b) in dense.eigenvalues.iter().zip(&sparse.eigenvalues) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
        let c = g.components();
        assert!(dense.eigenvalues[c] > 1e-6);
        let pd = dense.eigenvectors.slice(ndarray::s![.., ..c]).to_owned();
        let ps = sparse.eigenvectors.slice(ndarray::s![.., ..c]).to_owned();
        let diff = pd.dot(&pd.t()) - ps.dot(&ps.t());
        assert!(diff.iter().all(|v| v.abs() < 1e-7));
    }
}
