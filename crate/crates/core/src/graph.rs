//! Flow and spatial graphs over indexed locations, stored as symmetric CSR,
//! and the symmetric normalization used by the graph convolution.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geo::{cell_center, haversine_distance, GeoPoint};
use crate::trajectory::{LocationIndex, Trajectory};

/// Default spatial-graph distance threshold in meters.
pub const DEFAULT_DELTA_M: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    Flow,
    Spatial,
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphKind::Flow => "flow",
            GraphKind::Spatial => "spatial",
        })
    }
}

impl FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(GraphKind::Flow),
            "spatial" => Ok(GraphKind::Spatial),
            other => Err(Error::InvalidConfig(format!(
                "unknown graph kind `{other}`"
            ))),
        }
    }
}

/// Compressed sparse rows with `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    n: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    /// Builds from `(row, col, value)` triplets. Duplicates are summed in
    /// triplet order; columns within a row end up sorted.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut offsets = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < n && c < n, "triplet ({r}, {c}) outside {n}");
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            offsets[r + 1] += 1;
            cols.push(c);
            vals.push(v);
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        Csr {
            n,
            offsets,
            cols,
            vals,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// `(columns, values)` of one row.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).ok().map(|k| vals[k])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            let (c, v) = self.row(i);
            c.iter().zip(v).map(move |(&j, &w)| (i, j, w))
        })
    }

    /// Row-major dense copy; for tests and tiny graphs.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, j, w) in self.iter() {
            d[i][j] = w;
        }
        d
    }
}

/// Undirected, loop-free graph with positive weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    kind: GraphKind,
    adj: Csr,
}

impl WeightedGraph {
    /// Builds from undirected edges; both orientations are stored.
    pub fn from_edges(
        kind: GraphKind,
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut triplets = Vec::new();
        for (i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::RowOutOfRange {
                    row: i.max(j),
                    len: n,
                });
            }
            if i == j {
                return Err(Error::InvalidConfig(format!("self-loop on vertex {i}")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "edge ({i}, {j}) has non-positive weight {w}"
                )));
            }
            triplets.push((i, j, w));
            triplets.push((j, i, w));
        }
        Ok(WeightedGraph {
            kind,
            adj: Csr::from_triplets(n, triplets),
        })
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.adj.n
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.adj.nnz() / 2
    }

    pub fn adjacency(&self) -> &Csr {
        &self.adj
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        self.adj.get(i, j)
    }

    /// Undirected edges with `i < j`, ordered by `(i, j)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.adj.iter().filter(|&(i, j, _)| i < j)
    }

    pub fn total_weight(&self) -> f64 {
        self.edges().map(|(_, _, w)| w).sum()
    }
}

/// Counts consecutive co-occurrences; direction is ignored.
///
/// Edges with weight below `min_count` are dropped.
pub fn build_flow_graph(
    trajectories: &[Trajectory],
    index: &LocationIndex,
    min_count: u64,
) -> Result<WeightedGraph> {
    build_flow_graph_with(trajectories, index, min_count, Exec::default())
}

pub fn build_flow_graph_with(
    trajectories: &[Trajectory],
    index: &LocationIndex,
    min_count: u64,
    exec: Exec,
) -> Result<WeightedGraph> {
    let encoded = index.encode(trajectories)?;
    let shards = exec.workers().max(1);
    let shard_len = encoded.len().div_ceil(shards).max(1);
    let partial = exec.map_range(encoded.len().div_ceil(shard_len), |s| {
        let mut counts: HashMap<(usize, usize), u64> = HashMap::new();
        let end = ((s + 1) * shard_len).min(encoded.len());
        for ids in &encoded[s * shard_len..end] {
            for w in ids.windows(2) {
                let key = (w[0].min(w[1]), w[0].max(w[1]));
                *counts.entry(key).or_default() += 1;
            }
        }
        counts
    });
    let mut counts: HashMap<(usize, usize), u64> = HashMap::new();
    for part in partial {
        for (k, c) in part {
            *counts.entry(k).or_default() += c;
        }
    }
    WeightedGraph::from_edges(
        GraphKind::Flow,
        index.len(),
        counts
            .into_iter()
            .filter(|&((i, j), c)| i != j && c >= min_count.max(1))
            .map(|((i, j), c)| (i, j, c as f64)),
    )
}

/// Connects every pair of indexed cells whose centers are within `delta`
/// meters, with weight `exp(-dist / delta)`.
pub fn build_spatial_graph(index: &LocationIndex, delta: f64) -> Result<WeightedGraph> {
    let centers: Vec<GeoPoint> = index.cells().iter().map(|&c| cell_center(c)).collect();
    spatial_graph_from_points(&centers, delta, Exec::default())
}

pub fn build_spatial_graph_with(
    index: &LocationIndex,
    delta: f64,
    exec: Exec,
) -> Result<WeightedGraph> {
    let centers: Vec<GeoPoint> = index.cells().iter().map(|&c| cell_center(c)).collect();
    spatial_graph_from_points(&centers, delta, exec)
}

/// Edge weight for two locations `dist` meters apart, if they are linked.
pub fn spatial_weight(dist: f64, delta: f64) -> Option<f64> {
    (dist <= delta).then(|| (-dist / delta).exp())
}

/// Spatial graph over arbitrary points, vertex `i` being `points[i]`.
///
/// Points are hashed into cubes of side `delta` in 3-D Cartesian space. The
/// chord between two points never exceeds their great-circle distance, so
/// every linked pair lies in the same or an adjacent cube.
pub fn spatial_graph_from_points(
    points: &[GeoPoint],
    delta: f64,
    exec: Exec,
) -> Result<WeightedGraph> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "delta must be positive, got {delta}"
        )));
    }
    let key = |p: &[f64; 3]| -> [i64; 3] { p.map(|v| (v / delta).floor() as i64) };
    let xyz: Vec<[f64; 3]> = points.iter().map(GeoPoint::to_cartesian).collect();
    let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in xyz.iter().enumerate() {
        buckets.entry(key(p)).or_default().push(i);
    }
    let per_point = exec.map_range(points.len(), |i| {
        let [bx, by, bz] = key(&xyz[i]);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(members) = buckets.get(&[bx + dx, by + dy, bz + dz]) else {
                        continue;
                    };
                    for &j in members.iter().filter(|&&j| j > i) {
                        let dist = haversine_distance(points[i], points[j]);
                        if dist > 0.0 {
                            if let Some(w) = spatial_weight(dist, delta) {
                                out.push((i, j, w));
                            }
                        }
                    }
                }
            }
        }
        out
    });
    WeightedGraph::from_edges(
        GraphKind::Spatial,
        points.len(),
        per_point.into_iter().flatten(),
    )
}

/// `D^-1/2 (A + I) D^-1/2` in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedGraph {
    op: Csr,
}

impl NormalizedGraph {
    pub fn n(&self) -> usize {
        self.op.n
    }

    pub fn operator(&self) -> &Csr {
        &self.op
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        self.op.row(i)
    }

    /// No-edge operator on `n` vertices, which is the identity.
    pub fn identity(n: usize) -> Self {
        NormalizedGraph {
            op: Csr::from_triplets(n, (0..n).map(|i| (i, i, 1.0)).collect()),
        }
    }

    /// Largest eigenvalue magnitude estimate by power iteration.
    pub fn spectral_radius(&self, iters: usize) -> f64 {
        let n = self.n();
        if n == 0 {
            return 0.0;
        }
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
        let mut lambda = 0.0;
        for _ in 0..iters {
            let mut next = vec![0.0; n];
            for (i, j, w) in self.op.iter() {
                next[i] += w * v[j];
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            lambda = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = next.into_iter().map(|x| x / norm).collect();
        }
        lambda
    }
}

pub fn normalize_adjacency(g: &WeightedGraph) -> NormalizedGraph {
    normalize_with_self_loops(g, 1.0)
}

/// Normalization with self-loops of weight `loop_weight` instead of 1.
pub fn normalize_with_self_loops(g: &WeightedGraph, loop_weight: f64) -> NormalizedGraph {
    let n = g.n();
    let degree: Vec<f64> = (0..n)
        .map(|i| loop_weight + g.adj.row(i).1.iter().sum::<f64>())
        .collect();
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(g.adj.nnz() + n);
    let mut vals = Vec::with_capacity(g.adj.nnz() + n);
    offsets.push(0);
    for i in 0..n {
        let (c, v) = g.adj.row(i);
        let mut diag_done = false;
        for (&j, &w) in c.iter().zip(v) {
            if !diag_done && j > i {
                cols.push(i);
                vals.push(loop_weight * inv_sqrt[i] * inv_sqrt[i]);
                diag_done = true;
            }
            cols.push(j);
            vals.push(w * inv_sqrt[i] * inv_sqrt[j]);
        }
        if !diag_done {
            cols.push(i);
            vals.push(loop_weight * inv_sqrt[i] * inv_sqrt[i]);
        }
        offsets.push(cols.len());
    }
    NormalizedGraph {
        op: Csr {
            n,
            offsets,
            cols,
            vals,
        },
    }
}

/// Writes the `N E kind` header followed by `i j w` lines with `i < j`.
pub fn write_graph<W: Write>(out: W, g: &WeightedGraph) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "{} {} {}", g.n(), g.edge_count(), g.kind())?;
    for (i, j, wt) in g.edges() {
        writeln!(w, "{i} {j} {wt}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_graph<R: Read>(input: R, source: &str) -> Result<WeightedGraph> {
    let mut lines = BufReader::new(input).lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) => {
                let l = l?;
                if !l.trim().is_empty() {
                    break l;
                }
            }
            None => return Err(Error::parse(source, 1, "missing header")),
        }
    };
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 3 {
        return Err(Error::parse(source, 1, "header must be `N E kind`"));
    }
    let n: usize = h[0].parse().map_err(|_| Error::parse(source, 1, "bad N"))?;
    let e: usize = h[1].parse().map_err(|_| Error::parse(source, 1, "bad E"))?;
    let kind: GraphKind = h[2]
        .parse()
        .map_err(|err: Error| Error::parse(source, 1, err.to_string()))?;
    let mut edges = Vec::with_capacity(e);
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: &str| Error::parse(source, i + 1, m);
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(err("edge line must be `i j w`"));
        }
        let a: usize = f[0].parse().map_err(|_| err("bad vertex"))?;
        let b: usize = f[1].parse().map_err(|_| err("bad vertex"))?;
        let w: f64 = f[2].parse().map_err(|_| err("bad weight"))?;
        if a >= b {
            return Err(err("edges must satisfy i < j"));
        }
        edges.push((a, b, w));
    }
    if edges.len() != e {
        return Err(Error::parse(
            source,
            1,
            format!("header declares {e} edges, found {}", edges.len()),
        ));
    }
    WeightedGraph::from_edges(kind, n, edges)
        .map_err(|err| Error::parse(source, 0, err.to_string()))
}
