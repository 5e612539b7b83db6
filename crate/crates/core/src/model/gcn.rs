//! Graph convolution `act(A_hat * H * W)`, stacked per layer, evaluated either
//! over every vertex or lazily over a subset of output rows.
//!
//! Both paths accumulate each output row in the same order (CSR neighbor
//! order, then weight rows), so subset results are bit-identical to the
//! corresponding rows of a full pass.

use super::rows::{RowSet, SparseRows};
use super::{Activation, Aggregation, ParamStore, Side};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::graph::NormalizedGraph;
use crate::matrix::{axpy, Matrix};

/// Row source for the first convolution layer.
pub trait BaseRows {
    fn n_rows(&self) -> usize;
    fn dim(&self) -> usize;
    /// `acc += scale * row`
    fn add_row(&self, row: usize, scale: f64, acc: &mut [f64]);
}

impl BaseRows for Matrix {
    fn n_rows(&self) -> usize {
        self.rows()
    }

    fn dim(&self) -> usize {
        self.cols()
    }

    #[inline]
    fn add_row(&self, row: usize, scale: f64, acc: &mut [f64]) {
        axpy(scale, self.row(row), acc);
    }
}

/// One side of a [`ParamStore`] viewed as a base table.
pub(crate) struct StoreSide<'a, S: ?Sized>(pub &'a S, pub Side);

impl<S: ParamStore + ?Sized> BaseRows for StoreSide<'_, S> {
    fn n_rows(&self) -> usize {
        self.0.n()
    }

    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[inline]
    fn add_row(&self, row: usize, scale: f64, acc: &mut [f64]) {
        self.0.add_base_row(self.1, row, scale, acc);
    }
}

/// `out = act(agg * W)` for one row, `W` being `agg.len() x out.len()`.
#[inline]
fn transform_row(agg: &[f64], w: &[f64], act: Activation, out: &mut [f64]) {
    let cols = out.len();
    out.fill(0.0);
    for (i, &a) in agg.iter().enumerate() {
        axpy(a, &w[i * cols..(i + 1) * cols], out);
    }
    for v in out.iter_mut() {
        *v = act.apply(*v);
    }
}

fn check_layers(
    graph: &NormalizedGraph,
    base_rows: usize,
    base_dim: usize,
    weights: &[Matrix],
) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::DimensionMismatch("no weight matrices".into()));
    }
    if base_rows != graph.n() {
        return Err(Error::DimensionMismatch(format!(
            "base has {base_rows} rows, graph has {} vertices",
            graph.n()
        )));
    }
    let mut d = base_dim;
    for (k, w) in weights.iter().enumerate() {
        if w.rows() != d {
            return Err(Error::DimensionMismatch(format!(
                "layer {k} weight is {}x{}, input width {d}",
                w.rows(),
                w.cols()
            )));
        }
        d = w.cols();
    }
    Ok(())
}

/// Full forward pass over every vertex.
pub fn gcn_forward(
    graph: &NormalizedGraph,
    base: &Matrix,
    weights: &[Matrix],
    act: Activation,
) -> Result<Matrix> {
    gcn_forward_with(graph, base, weights, act, Exec::default())
}

pub(crate) fn gcn_forward_with(
    graph: &NormalizedGraph,
    base: &Matrix,
    weights: &[Matrix],
    act: Activation,
    exec: Exec,
) -> Result<Matrix> {
    check_layers(graph, base.rows(), base.cols(), weights)?;
    let n = graph.n();
    let mut prev = base.clone();
    for w in weights {
        let (din, dout) = (w.rows(), w.cols());
        let mut next = Matrix::zeros(n, dout);
        let rows_per_chunk = 256;
        exec.for_each_chunk_mut(
            next.as_mut_slice(),
            rows_per_chunk * dout.max(1),
            |c, chunk| {
                let mut agg = vec![0.0; din];
                for (k, out) in chunk.chunks_exact_mut(dout).enumerate() {
                    let r = c * rows_per_chunk + k;
                    agg.fill(0.0);
                    let (cols, vals) = graph.row(r);
                    for (&j, &a) in cols.iter().zip(vals) {
                        axpy(a, prev.row(j), &mut agg);
                    }
                    transform_row(&agg, w.as_slice(), act, out);
                }
            },
        );
        prev = next;
    }
    Ok(prev)
}

/// Forward pass restricted to `rows`; output row `i` belongs to `rows[i]`.
///
/// Only the base rows within `layers` hops of the requested rows are read.
pub fn gcn_forward_rows(
    graph: &NormalizedGraph,
    base: &Matrix,
    weights: &[Matrix],
    act: Activation,
    rows: &[usize],
) -> Result<Matrix> {
    check_layers(graph, base.rows(), base.cols(), weights)?;
    if let Some(&bad) = rows.iter().find(|&&r| r >= graph.n()) {
        return Err(Error::RowOutOfRange {
            row: bad,
            len: graph.n(),
        });
    }
    let dims: Vec<usize> = std::iter::once(base.cols())
        .chain(weights.iter().map(Matrix::cols))
        .collect();
    let mut tape = GcnTape::new(graph.n(), &dims);
    tape.load_weights(weights);
    tape.forward(graph, base, act, rows);
    let dout = *dims.last().unwrap();
    let mut out = Matrix::zeros(rows.len(), dout);
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(tape.output(r));
    }
    Ok(out)
}

/// Stored intermediates of a row-subset forward pass, reused across
/// batches, with the matching reverse pass.
#[derive(Debug, Clone)]
pub struct GcnTape {
    /// Width of level `k`; level 0 is the base table.
    dims: Vec<usize>,
    act: Activation,
    /// `levels[k - 1]` holds the rows evaluated at level `k`.
    levels: Vec<RowSet>,
    /// Aggregated inputs `A_hat * H_{k-1}` per level.
    pre: Vec<Vec<f64>>,
    /// Activations `H_k` per level.
    out: Vec<Vec<f64>>,
    /// Adjoints `dL/dH_k` per level.
    grad: Vec<Vec<f64>>,
    /// Row-major `W_k` per level.
    weights: Vec<Vec<f64>>,
    scratch_dz: Vec<f64>,
    scratch_da: Vec<f64>,
}

impl GcnTape {
    /// `dims[0]` is the base width, `dims[k]` the output width of layer `k`.
    pub fn new(n: usize, dims: &[usize]) -> Self {
        let layers = dims.len() - 1;
        assert!(layers >= 1);
        GcnTape {
            dims: dims.to_vec(),
            act: Activation::Tanh,
            levels: (0..layers).map(|_| RowSet::new(n)).collect(),
            pre: vec![Vec::new(); layers],
            out: vec![Vec::new(); layers],
            grad: vec![Vec::new(); layers],
            weights: (0..layers)
                .map(|k| vec![0.0; dims[k] * dims[k + 1]])
                .collect(),
            scratch_dz: Vec::new(),
            scratch_da: Vec::new(),
        }
    }

    pub fn layers(&self) -> usize {
        self.levels.len()
    }

    pub fn load_weights(&mut self, weights: &[Matrix]) {
        for (dst, w) in self.weights.iter_mut().zip(weights) {
            dst.copy_from_slice(w.as_slice());
        }
    }

    pub(crate) fn load_weights_from<S: ParamStore + ?Sized>(
        &mut self,
        store: &S,
        kind: crate::graph::GraphKind,
    ) {
        for (k, dst) in self.weights.iter_mut().enumerate() {
            store.copy_weights(kind, k, dst);
        }
    }

    /// Evaluates the stack at `rows` and clears all adjoints.
    pub fn forward<B: BaseRows + ?Sized>(
        &mut self,
        graph: &NormalizedGraph,
        base: &B,
        act: Activation,
        rows: &[usize],
    ) {
        self.act = act;
        let top = self.layers() - 1;
        self.levels[top].clear();
        for &r in rows {
            self.levels[top].insert(r);
        }
        for k in (1..=top).rev() {
            let (lower, upper) = self.levels.split_at_mut(k);
            let lower = &mut lower[k - 1];
            lower.clear();
            for &r in upper[0].ids() {
                for &j in graph.row(r).0 {
                    lower.insert(j);
                }
            }
        }
        for k in 0..self.layers() {
            let (din, dout) = (self.dims[k], self.dims[k + 1]);
            let m = self.levels[k].len();
            let mut pre = std::mem::take(&mut self.pre[k]);
            let mut out = std::mem::take(&mut self.out[k]);
            pre.clear();
            pre.resize(m * din, 0.0);
            out.clear();
            out.resize(m * dout, 0.0);
            for (local, &r) in self.levels[k].ids().iter().enumerate() {
                let agg = &mut pre[local * din..(local + 1) * din];
                let (cols, vals) = graph.row(r);
                if k == 0 {
                    for (&j, &a) in cols.iter().zip(vals) {
                        base.add_row(j, a, agg);
                    }
                } else {
                    let below = &self.levels[k - 1];
                    let prev = &self.out[k - 1];
                    for (&j, &a) in cols.iter().zip(vals) {
                        let l = below.local(j).expect("neighbor evaluated at lower level");
                        axpy(a, &prev[l * din..(l + 1) * din], agg);
                    }
                }
                transform_row(
                    agg,
                    &self.weights[k],
                    act,
                    &mut out[local * dout..(local + 1) * dout],
                );
            }
            self.pre[k] = pre;
            self.out[k] = out;
            self.grad[k].clear();
            self.grad[k].resize(m * dout, 0.0);
        }
    }

    /// Output row for a requested id.
    pub fn output(&self, row: usize) -> &[f64] {
        let top = self.layers() - 1;
        let d = self.dims[top + 1];
        let l = self.levels[top].local(row).expect("row was requested");
        &self.out[top][l * d..(l + 1) * d]
    }

    /// Adjoint slot for a requested id's output; accumulate into it before
    /// calling [`GcnTape::backward`].
    pub fn output_grad_mut(&mut self, row: usize) -> &mut [f64] {
        let top = self.layers() - 1;
        let d = self.dims[top + 1];
        let l = self.levels[top].local(row).expect("row was requested");
        &mut self.grad[top][l * d..(l + 1) * d]
    }

    /// Reverse pass. Adds base-row gradients to `base_grad` and per-layer
    /// weight gradients to `weight_grad`.
    pub(crate) fn backward(
        &mut self,
        graph: &NormalizedGraph,
        base_grad: &mut SparseRows,
        weight_grad: &mut [Vec<f64>],
    ) {
        for k in (0..self.layers()).rev() {
            let (din, dout) = (self.dims[k], self.dims[k + 1]);
            let w = &self.weights[k];
            let wg = &mut weight_grad[k];
            self.scratch_dz.resize(dout, 0.0);
            self.scratch_da.resize(din, 0.0);
            let (grad_lower, grad_upper) = self.grad.split_at_mut(k);
            let grad_k = &grad_upper[0];
            for (local, &r) in self.levels[k].ids().iter().enumerate() {
                let dh = &grad_k[local * dout..(local + 1) * dout];
                if dh.iter().all(|&g| g == 0.0) {
                    continue;
                }
                let h = &self.out[k][local * dout..(local + 1) * dout];
                let dz = &mut self.scratch_dz;
                for o in 0..dout {
                    dz[o] = dh[o] * self.act.derivative_from_output(h[o]);
                }
                // dW += agg^T dz ; dA = W dz
                let agg = &self.pre[k][local * din..(local + 1) * din];
                let da = &mut self.scratch_da;
                for i in 0..din {
                    let w_row = &w[i * dout..(i + 1) * dout];
                    axpy(agg[i], dz, &mut wg[i * dout..(i + 1) * dout]);
                    da[i] = crate::matrix::dot(w_row, dz);
                }
                let (cols, vals) = graph.row(r);
                if k == 0 {
                    for (&j, &a) in cols.iter().zip(vals) {
                        axpy(a, da, base_grad.row_mut(j));
                    }
                } else {
                    let below = &self.levels[k - 1];
                    let g_prev = &mut grad_lower[k - 1];
                    for (&j, &a) in cols.iter().zip(vals) {
                        let l = below.local(j).expect("neighbor evaluated at lower level");
                        axpy(a, da, &mut g_prev[l * din..(l + 1) * din]);
                    }
                }
            }
        }
    }
}

/// Elementwise mean or max of two equally shaped matrices.
pub fn aggregate(a: &Matrix, b: &Matrix, mode: Aggregation) -> Result<Matrix> {
    if (a.rows(), a.cols()) != (b.rows(), b.cols()) {
        return Err(Error::DimensionMismatch(format!(
            "cannot aggregate {}x{} with {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| match mode {
            Aggregation::Mean => 0.5 * (x + y),
            Aggregation::Max => x.max(y),
        })
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}
