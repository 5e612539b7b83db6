use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use crate::error::{Error, Result};
use crate::geo::CellId;
use crate::matrix::Matrix;

/// Final location vectors, row `i` belonging to `cells[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    cells: Vec<CellId>,
    vectors: Matrix,
}

impl EmbeddingMatrix {
    pub fn new(cells: Vec<CellId>, vectors: Matrix) -> Result<Self> {
        if cells.len() != vectors.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} cells for {} embedding rows",
                cells.len(),
                vectors.rows()
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::InvalidConfig(
                "embedding contains non-finite values".into(),
            ));
        }
        Ok(EmbeddingMatrix { cells, vectors })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn cells(&self) -> &[CellId] {
        &self.cells
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        self.vectors.row(id)
    }

    pub fn id_of(&self, cell: &CellId) -> Option<usize> {
        self.cells.iter().position(|c| c == cell)
    }
}

/// Writes the `N d` header, then `level:index v1 ... vd` per location.
///
/// Values use the shortest representation that parses back to the same
/// `f64`, so the file round-trips exactly.
pub fn write_embeddings<W: Write>(out: W, emb: &EmbeddingMatrix) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "{} {}", emb.len(), emb.dim())?;
    for (i, cell) in emb.cells.iter().enumerate() {
        write!(w, "{cell}")?;
        for v in emb.vector(i) {
            write!(w, " {v}")?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings<R: Read>(input: R, source: &str) -> Result<EmbeddingMatrix> {
    let mut lines = BufReader::new(input).lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::parse(source, 1, "missing header"))?;
    let h: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(source, 1, "header must be `N d`"))?;
    let [n, d] = h[..] else {
        return Err(Error::parse(source, 1, "header must be `N d`"));
    };
    let mut cells = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 2;
        let mut fields = line.split_whitespace();
        let cell: CellId = fields
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|e: Error| Error::parse(source, lineno, e.to_string()))?;
        let before = data.len();
        for f in fields {
            data.push(
                f.parse::<f64>()
                    .map_err(|_| Error::parse(source, lineno, format!("bad value `{f}`")))?,
            );
        }
        if data.len() - before != d {
            return Err(Error::parse(source, lineno, format!("expected {d} values")));
        }
        cells.push(cell);
    }
    if cells.len() != n {
        return Err(Error::parse(
            source,
            1,
            format!("header declares {n} rows, found {}", cells.len()),
        ));
    }
    EmbeddingMatrix::new(cells, Matrix::from_vec(n, d, data)?)
}
