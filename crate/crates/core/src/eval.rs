//! Cosine queries, region Accuracy@K and feature export.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geo::CellId;
use crate::matrix::{dot, norm, Matrix};

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} components",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: usize,
    pub similarity: f64,
}

/// Exact `k` nearest rows to `query` by cosine, excluding the query row and
/// zero rows. Ties go to the smaller id.
pub fn top_k_neighbors(emb: &EmbeddingMatrix, query: usize, k: usize) -> Result<Vec<Neighbor>> {
    top_k_neighbors_with(emb, query, k, Exec::default())
}

pub fn top_k_neighbors_with(
    emb: &EmbeddingMatrix,
    query: usize,
    k: usize,
    exec: Exec,
) -> Result<Vec<Neighbor>> {
    let n = emb.len();
    if query >= n {
        return Err(Error::RowOutOfRange { row: query, len: n });
    }
    if k >= n {
        return Err(Error::InvalidConfig(format!(
            "k = {k} must be below the location count {n}"
        )));
    }
    let q = emb.vector(query);
    if norm(q) == 0.0 {
        return Err(Error::ZeroVector);
    }
    let sims = exec.map_range(n, |j| {
        if j == query {
            return None;
        }
        cosine_similarity(q, emb.vector(j))
            .ok()
            .map(|similarity| Neighbor { id: j, similarity })
    });
    let mut cands: Vec<Neighbor> = sims.into_iter().flatten().collect();
    let order =
        |a: &Neighbor, b: &Neighbor| b.similarity.total_cmp(&a.similarity).then(a.id.cmp(&b.id));
    if cands.len() > k {
        cands.select_nth_unstable_by(k, order);
        cands.truncate(k);
    }
    cands.sort_unstable_by(order);
    Ok(cands)
}

/// Writes `rank,cell_id,similarity` rows, ranks starting at 1.
pub fn write_neighbors<W: Write>(
    out: W,
    emb: &EmbeddingMatrix,
    neighbors: &[Neighbor],
) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "rank,cell_id,similarity")?;
    for (rank, nb) in neighbors.iter().enumerate() {
        writeln!(w, "{},{},{}", rank + 1, emb.cells()[nb.id], nb.similarity)?;
    }
    w.flush()?;
    Ok(())
}

/// Region membership over embedding row ids.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionLabeling {
    region_of: Vec<Option<u64>>,
    members: BTreeMap<u64, Vec<usize>>,
}

impl RegionLabeling {
    /// `labels[i]` is the region of row `i`, if any.
    pub fn new(labels: Vec<Option<u64>>) -> Self {
        let mut members: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (id, r) in labels.iter().enumerate() {
            if let Some(r) = r {
                members.entry(*r).or_default().push(id);
            }
        }
        RegionLabeling {
            region_of: labels,
            members,
        }
    }

    /// Labels rows of `emb` from `(cell, region)` pairs. Cells absent from
    /// the embedding are skipped; their count is returned.
    pub fn from_cells(emb: &EmbeddingMatrix, pairs: &[(CellId, u64)]) -> (Self, usize) {
        let ids: HashMap<CellId, usize> = emb
            .cells()
            .iter()
            .enumerate()
            .map(|(i, c)| (*c, i))
            .collect();
        let mut labels = vec![None; emb.len()];
        let mut missing = 0;
        for (cell, region) in pairs {
            match ids.get(cell) {
                Some(&i) => labels[i] = Some(*region),
                None => missing += 1,
            }
        }
        (RegionLabeling::new(labels), missing)
    }

    pub fn len(&self) -> usize {
        self.region_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.region_of.is_empty()
    }

    pub fn region(&self, id: usize) -> Option<u64> {
        self.region_of.get(id).copied().flatten()
    }

    pub fn regions(&self) -> &BTreeMap<u64, Vec<usize>> {
        &self.members
    }
}

pub fn read_region_labels<R: Read>(input: R, source: &str) -> Result<Vec<(CellId, u64)>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("cell_id")) {
            continue;
        }
        let (cell, region) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(source, i + 1, "expected `cell_id,region_id`"))?;
        let cell: CellId = cell
            .parse()
            .map_err(|e: Error| Error::parse(source, i + 1, e.to_string()))?;
        let region: u64 = region
            .trim()
            .parse()
            .map_err(|_| Error::parse(source, i + 1, format!("bad region id `{region}`")))?;
        out.push((cell, region));
    }
    Ok(out)
}

pub fn write_region_labels<W: Write>(out: W, labels: &[(CellId, u64)]) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "cell_id,region_id")?;
    for (cell, region) in labels {
        writeln!(w, "{cell},{region}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAccuracy {
    pub k: usize,
    pub accuracy: f64,
    /// Sampled `(location id, same-region fraction)` pairs.
    pub samples: Vec<(usize, f64)>,
    /// Regions with at most `k` members.
    pub skipped_regions: Vec<u64>,
}

/// Samples `samples_per_region` locations per region (seeded, uniform) and
/// averages the share of each sample's `k` nearest neighbors that lie in the
/// same region.
pub fn region_accuracy_at_k(
    emb: &EmbeddingMatrix,
    regions: &RegionLabeling,
    k: usize,
    samples_per_region: usize,
    seed: u64,
) -> Result<RegionAccuracy> {
    if regions.len() != emb.len() {
        return Err(Error::DimensionMismatch(format!(
            "labeling covers {} rows, embedding has {}",
            regions.len(),
            emb.len()
        )));
    }
    if k == 0 || samples_per_region == 0 {
        return Err(Error::InvalidConfig(
            "k and samples per region must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for (&region, members) in regions.regions() {
        if members.len() <= k {
            skipped.push(region);
            continue;
        }
        for _ in 0..samples_per_region {
            let id = members[rng.random_range(0..members.len())];
            let nbrs = top_k_neighbors(emb, id, k)?;
            let same = nbrs
                .iter()
                .filter(|nb| regions.region(nb.id) == Some(region))
                .count();
            samples.push((id, same as f64 / k as f64));
        }
    }
    if samples.is_empty() {
        return Err(Error::NoEligibleRegions { k });
    }
    let accuracy = samples.iter().map(|s| s.1).sum::<f64>() / samples.len() as f64;
    Ok(RegionAccuracy {
        k,
        accuracy,
        samples,
        skipped_regions: skipped,
    })
}

/// Mean pairwise cosine between distinct labeled rows, split into pairs in
/// the same region and pairs in different regions.
pub fn mean_region_cosines(emb: &EmbeddingMatrix, regions: &RegionLabeling) -> Result<(f64, f64)> {
    let labeled: Vec<(usize, u64)> = (0..emb.len())
        .filter_map(|i| regions.region(i).map(|r| (i, r)))
        .collect();
    let unit: Vec<Vec<f64>> = labeled
        .iter()
        .map(|&(i, _)| {
            let v = emb.vector(i);
            let nv = norm(v);
            if nv == 0.0 {
                Err(Error::ZeroVector)
            } else {
                Ok(v.iter().map(|x| x / nv).collect())
            }
        })
        .collect::<Result<_>>()?;
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..labeled.len() {
        for b in a + 1..labeled.len() {
            let c = dot(&unit[a], &unit[b]);
            if labeled[a].1 == labeled[b].1 {
                intra += c;
                n_intra += 1;
            } else {
                inter += c;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(Error::EmptyInput(
            "need pairs both within and across regions",
        ));
    }
    Ok((intra / n_intra as f64, inter / n_inter as f64))
}

/// Writes `cell_id,v1,...,vd` CSV rows for `ids`, in that order, with 17
/// significant digits.
pub fn export_features<W: Write>(out: W, emb: &EmbeddingMatrix, ids: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(out);
    write!(w, "cell_id")?;
    for j in 1..=emb.dim() {
        write!(w, ",v{j}")?;
    }
    w.write_all(b"\n")?;
    for &id in ids {
        if id >= emb.len() {
            return Err(Error::RowOutOfRange {
                row: id,
                len: emb.len(),
            });
        }
        write!(w, "{}", emb.cells()[id])?;
        for v in emb.vector(id) {
            write!(w, ",{v:.16e}")?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses the output of [`export_features`].
pub fn read_features<R: Read>(input: R, source: &str) -> Result<EmbeddingMatrix> {
    let mut lines = BufReader::new(input).lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::parse(source, 1, "missing header"))?;
    let d = header.split(',').count().saturating_sub(1);
    let mut cells = Vec::new();
    let mut data = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let mut f = line.split(',');
        let cell: CellId = f
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|e: Error| Error::parse(source, i + 2, e.to_string()))?;
        let before = data.len();
        for v in f {
            data.push(
                v.parse::<f64>()
                    .map_err(|_| Error::parse(source, i + 2, format!("bad value `{v}`")))?,
            );
        }
        if data.len() - before != d {
            return Err(Error::parse(source, i + 2, format!("expected {d} values")));
        }
        cells.push(cell);
    }
    let n = cells.len();
    EmbeddingMatrix::new(cells, Matrix::from_vec(n, d, data)?)
}
