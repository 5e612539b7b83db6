//! LBS record parsing, sessionization into trajectories, and the dense
//! location index.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geo::{cell_from_point, CellId, GeoPoint};

/// Default maximum gap between consecutive records of one trajectory, seconds.
pub const DEFAULT_MAX_GAP: u64 = 3600;

#[derive(Debug, Clone, PartialEq)]
pub struct LbsRecord {
    pub user_id: String,
    pub timestamp: u64,
    pub point: GeoPoint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    /// 1-based line number in the input.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedRecords {
    pub records: Vec<LbsRecord>,
    pub rejections: Vec<Rejection>,
}

/// Parses `user_id,timestamp,lat,lng` lines.
///
/// A first line whose second field is not an integer is treated as a header.
/// Malformed lines are collected in `rejections`; only read failures abort.
pub fn parse_records<R: Read>(input: R) -> Result<ParsedRecords> {
    let reader = BufReader::new(input);
    let mut out = ParsedRecords::default();
    let mut first = true;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if std::mem::take(&mut first) && is_header(trimmed) {
            continue;
        }
        match parse_line(trimmed) {
            Ok(r) => out.records.push(r),
            Err(reason) => out.rejections.push(Rejection {
                line: i + 1,
                reason,
            }),
        }
    }
    Ok(out)
}

/// Like [`parse_records`], transparently decompressing gzip input.
pub fn parse_records_file(path: &Path) -> Result<ParsedRecords> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut reader = BufReader::new(file);
    let gz = reader
        .fill_buf()
        .map_err(|e| Error::file(path, e))?
        .starts_with(&[0x1f, 0x8b]);
    if gz {
        parse_records(MultiGzDecoder::new(reader))
    } else {
        parse_records(reader)
    }
}

fn is_header(line: &str) -> bool {
    line.split(',')
        .nth(1)
        .is_some_and(|f| f.trim().parse::<u64>().is_err())
}

fn parse_line(line: &str) -> std::result::Result<LbsRecord, String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 fields, found {}", fields.len()));
    }
    if fields[0].is_empty() {
        return Err("empty user id".into());
    }
    let timestamp: u64 = fields[1]
        .parse()
        .map_err(|_| format!("bad timestamp `{}`", fields[1]))?;
    let lat: f64 = fields[2]
        .parse()
        .map_err(|_| format!("bad latitude `{}`", fields[2]))?;
    let lng: f64 = fields[3]
        .parse()
        .map_err(|_| format!("bad longitude `{}`", fields[3]))?;
    let point = GeoPoint::new(lat, lng).map_err(|e| e.to_string())?;
    Ok(LbsRecord {
        user_id: fields[0].to_string(),
        timestamp,
        point,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub user_id: String,
    pub cells: Vec<CellId>,
    pub timestamps: Vec<u64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Splits each user's records into trajectories wherever two consecutive
/// records are more than `max_gap` seconds apart.
///
/// Output is ordered by user id, then by start time, independently of the
/// input order. Consecutive records in the same cell collapse into one
/// position that keeps the first timestamp.
pub fn sessionize(records: &[LbsRecord], max_gap: u64, level: u8) -> Result<Vec<Trajectory>> {
    sessionize_with(records, max_gap, level, Exec::default())
}

pub fn sessionize_with(
    records: &[LbsRecord],
    max_gap: u64,
    level: u8,
    exec: Exec,
) -> Result<Vec<Trajectory>> {
    if max_gap == 0 {
        return Err(Error::InvalidConfig("max_gap must be positive".into()));
    }
    if records.is_empty() {
        // validates level even on empty input
        cell_from_point(GeoPoint::new(0.0, 0.0)?, level)?;
        return Ok(Vec::new());
    }
    let mut by_user: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        by_user.entry(r.user_id.as_str()).or_default().push(i);
    }
    let mut users: Vec<(&str, Vec<usize>)> = by_user.into_iter().collect();
    users.sort_unstable_by(|a, b| a.0.cmp(b.0));

    let per_user = exec.map_range(users.len(), |u| {
        let (user, idx) = &users[u];
        split_user(user, idx, records, max_gap, level)
    });
    let mut out = Vec::new();
    for t in per_user {
        out.extend(t?);
    }
    Ok(out)
}

fn split_user(
    user: &str,
    idx: &[usize],
    records: &[LbsRecord],
    max_gap: u64,
    level: u8,
) -> Result<Vec<Trajectory>> {
    let mut idx = idx.to_vec();
    // stable: equal timestamps keep input order
    idx.sort_by_key(|&i| records[i].timestamp);
    let mut out = Vec::new();
    let mut current: Option<Trajectory> = None;
    let mut last_ts = 0u64;
    for &i in &idx {
        let rec = &records[i];
        let cell = cell_from_point(rec.point, level)?;
        let split = current.is_none() || rec.timestamp - last_ts > max_gap;
        last_ts = rec.timestamp;
        if split {
            out.extend(current.take());
            current = Some(Trajectory {
                user_id: user.to_string(),
                cells: vec![cell],
                timestamps: vec![rec.timestamp],
            });
            continue;
        }
        let t = current.as_mut().expect("trajectory open");
        if t.cells.last() != Some(&cell) {
            t.cells.push(cell);
            t.timestamps.push(rec.timestamp);
        }
    }
    out.extend(current);
    Ok(out)
}

/// Dense ids for the cells of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationIndex {
    cells: Vec<CellId>,
    ids: HashMap<CellId, usize>,
    visits: Vec<u64>,
}

impl LocationIndex {
    /// Assigns ids in first-appearance order over `trajectories`.
    pub fn build(trajectories: &[Trajectory]) -> Result<Self> {
        if trajectories.iter().all(|t| t.is_empty()) {
            return Err(Error::EmptyInput("no trajectories to index"));
        }
        let mut index = LocationIndex {
            cells: Vec::new(),
            ids: HashMap::new(),
            visits: Vec::new(),
        };
        for cell in trajectories.iter().flat_map(|t| &t.cells) {
            let id = index.insert(*cell);
            index.visits[id] += 1;
        }
        Ok(index)
    }

    /// Builds an index from explicit `(cell, visit_count)` rows in id order.
    pub fn from_parts(rows: Vec<(CellId, u64)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("location index has no cells"));
        }
        let mut index = LocationIndex {
            cells: Vec::with_capacity(rows.len()),
            ids: HashMap::with_capacity(rows.len()),
            visits: Vec::with_capacity(rows.len()),
        };
        for (cell, count) in rows {
            if index.ids.contains_key(&cell) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate cell {cell} in index"
                )));
            }
            let id = index.insert(cell);
            index.visits[id] = count;
        }
        Ok(index)
    }

    fn insert(&mut self, cell: CellId) -> usize {
        *self.ids.entry(cell).or_insert_with(|| {
            self.cells.push(cell);
            self.visits.push(0);
            self.cells.len() - 1
        })
    }

    /// Appends every unobserved cell of the observed cells' grid bounding box
    /// with a visit count of zero. Returns the number of cells added.
    pub fn densify_bounding_box(&mut self) -> Result<usize> {
        let level = self.cells[0].level();
        if self.cells.iter().any(|c| c.level() != level) {
            return Err(Error::InvalidConfig("mixed cell levels in index".into()));
        }
        let (mut c0, mut c1, mut r0, mut r1) = (u64::MAX, 0, u64::MAX, 0);
        for (col, row) in self.cells.iter().map(CellId::grid) {
            c0 = c0.min(col);
            c1 = c1.max(col);
            r0 = r0.min(row);
            r1 = r1.max(row);
        }
        let mut extra = Vec::new();
        for row in r0..=r1 {
            for col in c0..=c1 {
                let cell = CellId::from_grid(level, col, row)?;
                if !self.ids.contains_key(&cell) {
                    extra.push(cell);
                }
            }
        }
        extra.sort_unstable();
        for cell in &extra {
            self.insert(*cell);
        }
        Ok(extra.len())
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn id(&self, cell: &CellId) -> Option<usize> {
        self.ids.get(cell).copied()
    }

    pub fn cell(&self, id: usize) -> CellId {
        self.cells[id]
    }

    pub fn cells(&self) -> &[CellId] {
        &self.cells
    }

    pub fn visit_counts(&self) -> &[u64] {
        &self.visits
    }

    /// Maps every trajectory to dense ids.
    pub fn encode(&self, trajectories: &[Trajectory]) -> Result<Vec<Vec<usize>>> {
        trajectories
            .iter()
            .map(|t| {
                t.cells
                    .iter()
                    .map(|c| self.id(c).ok_or(Error::UnknownCell(*c)))
                    .collect()
            })
            .collect()
    }
}

pub fn build_location_index(trajectories: &[Trajectory]) -> Result<LocationIndex> {
    LocationIndex::build(trajectories)
}

/// Writes `user_id<TAB>cell,cell,...<TAB>t,t,...` lines.
pub fn write_trajectories<W: Write>(out: W, trajectories: &[Trajectory]) -> Result<()> {
    let mut w = BufWriter::new(out);
    for t in trajectories {
        write!(w, "{}\t", t.user_id)?;
        write_joined(&mut w, &t.cells)?;
        w.write_all(b"\t")?;
        write_joined(&mut w, &t.timestamps)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_joined<W: Write, T: std::fmt::Display>(w: &mut W, items: &[T]) -> std::io::Result<()> {
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            w.write_all(b",")?;
        }
        write!(w, "{item}")?;
    }
    Ok(())
}

pub fn read_trajectories<R: Read>(input: R, source: &str) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::parse(source, i + 1, msg);
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(err(format!(
                "expected 3 tab-separated fields, found {}",
                parts.len()
            )));
        }
        let cells = parts[1]
            .split(',')
            .map(|s| s.parse::<CellId>())
            .collect::<Result<Vec<_>>>()
            .map_err(|e| err(e.to_string()))?;
        let timestamps = parts[2]
            .split(',')
            .map(|s| s.trim().parse::<u64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err(e.to_string()))?;
        if cells.len() != timestamps.len() {
            return Err(err("cell and timestamp counts differ".into()));
        }
        if timestamps.windows(2).any(|w| w[1] < w[0]) {
            return Err(err("timestamps decrease".into()));
        }
        out.push(Trajectory {
            user_id: parts[0].to_string(),
            cells,
            timestamps,
        });
    }
    Ok(out)
}

/// Writes `id<TAB>cell<TAB>visit_count` lines.
pub fn write_index<W: Write>(out: W, index: &LocationIndex) -> Result<()> {
    let mut w = BufWriter::new(out);
    for (id, (cell, count)) in index.cells.iter().zip(&index.visits).enumerate() {
        writeln!(w, "{id}\t{cell}\t{count}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_index<R: Read>(input: R, source: &str) -> Result<LocationIndex> {
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::parse(source, i + 1, msg);
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(err("expected `id<TAB>cell<TAB>count`".into()));
        }
        let id: usize = parts[0].parse().map_err(|_| err("bad id".into()))?;
        if id != rows.len() {
            return Err(err(format!("id {id} out of sequence")));
        }
        let cell: CellId = parts[1].parse().map_err(|e: Error| err(e.to_string()))?;
        let count: u64 = parts[2]
            .parse()
            .map_err(|_| err("bad visit count".into()))?;
        rows.push((cell, count));
    }
    LocationIndex::from_parts(rows)
}
