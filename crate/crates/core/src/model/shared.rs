//! Parameters shared by concurrent SGD workers without locks.
//!
//! Every scalar is an `AtomicU64` holding `f64` bits. Reads and writes are
//! relaxed and updates are plain load/add/store, so concurrent updates to
//! one entry may overwrite each other. Nothing is torn and no update is
//! undefined behavior; lost increments are the accepted cost.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{BatchGradient, ModelParams, ParamStore, Side};
use crate::graph::GraphKind;
use crate::matrix::Matrix;

#[derive(Debug)]
pub struct SharedParams {
    n: usize,
    dim: usize,
    node: Vec<AtomicU64>,
    context: Vec<AtomicU64>,
    flow: Vec<Vec<AtomicU64>>,
    spatial: Vec<Vec<AtomicU64>>,
}

fn atomics(values: &[f64]) -> Vec<AtomicU64> {
    values.iter().map(|v| AtomicU64::new(v.to_bits())).collect()
}

fn load(cell: &AtomicU64) -> f64 {
    f64::from_bits(cell.load(Ordering::Relaxed))
}

fn add(cells: &[AtomicU64], scale: f64, delta: &[f64]) {
    for (c, &d) in cells.iter().zip(delta) {
        c.store((load(c) + scale * d).to_bits(), Ordering::Relaxed);
    }
}

impl SharedParams {
    pub fn new(params: &ModelParams) -> Self {
        SharedParams {
            n: params.n(),
            dim: params.dim(),
            node: atomics(params.node_base.as_slice()),
            context: atomics(params.context_base.as_slice()),
            flow: params
                .flow_weights
                .iter()
                .map(|w| atomics(w.as_slice()))
                .collect(),
            spatial: params
                .spatial_weights
                .iter()
                .map(|w| atomics(w.as_slice()))
                .collect(),
        }
    }

    pub fn snapshot(&self) -> ModelParams {
        let mat = |rows, cols, cells: &[AtomicU64]| {
            Matrix::from_vec(rows, cols, cells.iter().map(load).collect()).expect("shape")
        };
        let d = self.dim;
        ModelParams {
            node_base: mat(self.n, d, &self.node),
            context_base: mat(self.n, d, &self.context),
            flow_weights: self.flow.iter().map(|w| mat(d, d, w)).collect(),
            spatial_weights: self.spatial.iter().map(|w| mat(d, d, w)).collect(),
        }
    }

    fn table(&self, side: Side) -> &[AtomicU64] {
        match side {
            Side::Node => &self.node,
            Side::Context => &self.context,
        }
    }

    fn weight_cells(&self, kind: GraphKind) -> &[Vec<AtomicU64>] {
        match kind {
            GraphKind::Flow => &self.flow,
            GraphKind::Spatial => &self.spatial,
        }
    }

    /// `params -= lr * grad`, racing with other writers.
    pub fn apply(&self, grad: &BatchGradient, lr: f64) {
        let d = self.dim;
        for side in [Side::Node, Side::Context] {
            let table = self.table(side);
            for (id, g) in grad.rows(side).iter() {
                add(&table[id * d..(id + 1) * d], -lr, g);
            }
        }
        for &kind in grad.kinds() {
            for (cells, g) in self.weight_cells(kind).iter().zip(grad.weights(kind)) {
                add(cells, -lr, g);
            }
        }
    }
}

impl ParamStore for SharedParams {
    fn n(&self) -> usize {
        self.n
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn layers(&self) -> usize {
        self.flow.len()
    }

    #[inline]
    fn add_base_row(&self, side: Side, row: usize, scale: f64, acc: &mut [f64]) {
        let d = self.dim;
        for (a, c) in acc
            .iter_mut()
            .zip(&self.table(side)[row * d..(row + 1) * d])
        {
            *a += scale * load(c);
        }
    }

    fn copy_weights(&self, kind: GraphKind, layer: usize, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.weight_cells(kind)[layer]) {
            *o = load(c);
        }
    }
}
