//! Exact gradients of the negative-sampling loss for one center location.

use super::gcn::{GcnTape, StoreSide};
use super::loss::{sigmoid, softplus};
use super::rows::RowSet;
pub use super::rows::SparseRows;
use super::{Aggregation, Graphs, ModelConfig, ModelParams, ParamStore, Side};
use crate::error::{Error, Result};
use crate::graph::GraphKind;
use crate::matrix::{axpy, dot, Matrix};

/// One SGD unit: a center, its window contexts and sampled negatives.
///
/// Repeated ids are allowed and count once per occurrence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Batch {
    pub center: usize,
    pub contexts: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Sparse gradient of one batch's loss.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    loss: f64,
    dim: usize,
    kinds: &'static [GraphKind],
    node: SparseRows,
    context: SparseRows,
    flow_w: Vec<Vec<f64>>,
    spatial_w: Vec<Vec<f64>>,
}

impl BatchGradient {
    fn new(n: usize, dim: usize, layers: usize, kinds: &'static [GraphKind]) -> Self {
        BatchGradient {
            loss: 0.0,
            dim,
            kinds,
            node: SparseRows::new(n, dim),
            context: SparseRows::new(n, dim),
            flow_w: vec![vec![0.0; dim * dim]; layers],
            spatial_w: vec![vec![0.0; dim * dim]; layers],
        }
    }

    fn clear(&mut self) {
        self.loss = 0.0;
        self.node.clear();
        self.context.clear();
        for w in self.flow_w.iter_mut().chain(self.spatial_w.iter_mut()) {
            w.fill(0.0);
        }
    }

    pub fn loss(&self) -> f64 {
        self.loss
    }

    /// Graphs whose weights received gradient.
    pub fn kinds(&self) -> &'static [GraphKind] {
        self.kinds
    }

    pub fn node_rows(&self) -> &SparseRows {
        &self.node
    }

    pub fn context_rows(&self) -> &SparseRows {
        &self.context
    }

    pub fn rows(&self, side: Side) -> &SparseRows {
        match side {
            Side::Node => &self.node,
            Side::Context => &self.context,
        }
    }

    /// Row-major `d x d` weight gradients, one per layer.
    pub fn weights(&self, kind: GraphKind) -> &[Vec<f64>] {
        match kind {
            GraphKind::Flow => &self.flow_w,
            GraphKind::Spatial => &self.spatial_w,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite()
            && self
                .node
                .iter()
                .chain(self.context.iter())
                .all(|(_, r)| r.iter().all(|v| v.is_finite()))
            && self
                .flow_w
                .iter()
                .chain(&self.spatial_w)
                .all(|w| w.iter().all(|v| v.is_finite()))
    }

    /// Dense copy shaped like the parameters.
    pub fn to_dense(&self, n: usize) -> ParamGradient {
        let d = self.dim;
        let mut g = ParamGradient {
            node_base: Matrix::zeros(n, d),
            context_base: Matrix::zeros(n, d),
            flow_weights: Vec::new(),
            spatial_weights: Vec::new(),
        };
        for (id, r) in self.node.iter() {
            g.node_base.row_mut(id).copy_from_slice(r);
        }
        for (id, r) in self.context.iter() {
            g.context_base.row_mut(id).copy_from_slice(r);
        }
        let to_m = |ws: &[Vec<f64>]| -> Vec<Matrix> {
            ws.iter()
                .map(|w| Matrix::from_vec(d, d, w.clone()).unwrap())
                .collect()
        };
        g.flow_weights = to_m(&self.flow_w);
        g.spatial_weights = to_m(&self.spatial_w);
        g
    }
}

/// Dense gradient with the same layout as [`ModelParams`].
pub type ParamGradient = ModelParams;

/// Reusable buffers for [`skipgram_gradients`].
#[derive(Debug, Clone)]
pub struct SkipGramWorkspace {
    cfg: ModelConfig,
    node_tapes: Vec<GcnTape>,
    context_tapes: Vec<GcnTape>,
    context_set: RowSet,
    center_vec: Vec<f64>,
    center_grad: Vec<f64>,
    context_vecs: Vec<f64>,
    context_grads: Vec<f64>,
    grad: BatchGradient,
}

impl SkipGramWorkspace {
    pub fn new(n: usize, cfg: &ModelConfig) -> Self {
        let dims = vec![cfg.dim; cfg.layers + 1];
        let tapes = || {
            cfg.graphs
                .kinds()
                .iter()
                .map(|_| GcnTape::new(n, &dims))
                .collect::<Vec<_>>()
        };
        SkipGramWorkspace {
            cfg: *cfg,
            node_tapes: tapes(),
            context_tapes: tapes(),
            context_set: RowSet::new(n),
            center_vec: vec![0.0; cfg.dim],
            center_grad: vec![0.0; cfg.dim],
            context_vecs: Vec::new(),
            context_grads: Vec::new(),
            grad: BatchGradient::new(n, cfg.dim, cfg.layers, cfg.graphs.kinds()),
        }
    }

    pub fn gradient(&self) -> &BatchGradient {
        &self.grad
    }

    /// Computes loss and gradient for `batch` into the workspace.
    pub fn compute<S: ParamStore + ?Sized>(
        &mut self,
        batch: &Batch,
        store: &S,
        graphs: &Graphs,
    ) -> Result<&BatchGradient> {
        let cfg = self.cfg;
        let d = cfg.dim;
        let n = store.n();
        if store.dim() != d || store.layers() != cfg.layers {
            return Err(Error::DimensionMismatch(
                "parameters do not match model config".into(),
            ));
        }
        if graphs.n() != n {
            return Err(Error::DimensionMismatch(format!(
                "graphs have {} vertices, parameters {n}",
                graphs.n()
            )));
        }
        let all = std::iter::once(&batch.center)
            .chain(&batch.contexts)
            .chain(&batch.negatives);
        if let Some(&bad) = all.clone().find(|&&i| i >= n) {
            return Err(Error::RowOutOfRange { row: bad, len: n });
        }
        self.grad.clear();

        self.context_set.clear();
        for &x in batch.contexts.iter().chain(&batch.negatives) {
            self.context_set.insert(x);
        }
        let kinds = cfg.graphs.kinds();
        let node_side = StoreSide(store, Side::Node);
        let ctx_side = StoreSide(store, Side::Context);
        for (g, &kind) in kinds.iter().enumerate() {
            let graph = graphs.get(kind);
            self.node_tapes[g].load_weights_from(store, kind);
            self.node_tapes[g].forward(graph, &node_side, cfg.activation, &[batch.center]);
            self.context_tapes[g].load_weights_from(store, kind);
            self.context_tapes[g].forward(graph, &ctx_side, cfg.activation, self.context_set.ids());
        }

        // aggregated vectors
        combine(
            &self.node_tapes,
            batch.center,
            cfg.aggregation,
            &mut self.center_vec,
        );
        let m = self.context_set.len();
        self.context_vecs.resize(m * d, 0.0);
        for (l, &x) in self.context_set.ids().iter().enumerate() {
            combine(
                &self.context_tapes,
                x,
                cfg.aggregation,
                &mut self.context_vecs[l * d..(l + 1) * d],
            );
        }

        // loss and adjoints of the aggregated vectors
        self.center_grad.fill(0.0);
        self.context_grads.clear();
        self.context_grads.resize(m * d, 0.0);
        let mut loss = 0.0;
        let labelled = batch
            .contexts
            .iter()
            .map(|&x| (x, true))
            .chain(batch.negatives.iter().map(|&x| (x, false)));
        for (x, positive) in labelled {
            let l = self.context_set.local(x).expect("inserted above");
            let v = &self.context_vecs[l * d..(l + 1) * d];
            let s = dot(&self.center_vec, v);
            // d/ds of -log s(s) is s(s) - 1; of -log s(-s) it is s(s)
            let g = if positive {
                loss += softplus(-s);
                sigmoid(s) - 1.0
            } else {
                loss += softplus(s);
                sigmoid(s)
            };
            axpy(g, v, &mut self.center_grad);
            axpy(
                g,
                &self.center_vec,
                &mut self.context_grads[l * d..(l + 1) * d],
            );
        }
        self.grad.loss = loss;

        // aggregation adjoints
        spread(
            &mut self.node_tapes,
            batch.center,
            cfg.aggregation,
            &self.center_grad,
        );
        for (l, &x) in self.context_set.ids().iter().enumerate() {
            spread(
                &mut self.context_tapes,
                x,
                cfg.aggregation,
                &self.context_grads[l * d..(l + 1) * d],
            );
        }

        for (g, &kind) in kinds.iter().enumerate() {
            let graph = graphs.get(kind);
            let BatchGradient {
                node,
                context,
                flow_w,
                spatial_w,
                ..
            } = &mut self.grad;
            let wg = match kind {
                GraphKind::Flow => flow_w,
                GraphKind::Spatial => spatial_w,
            };
            self.node_tapes[g].backward(graph, node, wg);
            self.context_tapes[g].backward(graph, context, wg);
        }
        Ok(&self.grad)
    }
}

fn combine(tapes: &[GcnTape], row: usize, mode: Aggregation, out: &mut [f64]) {
    match tapes {
        [only] => out.copy_from_slice(only.output(row)),
        [a, b] => {
            for ((o, &x), &y) in out.iter_mut().zip(a.output(row)).zip(b.output(row)) {
                *o = match mode {
                    Aggregation::Mean => 0.5 * (x + y),
                    Aggregation::Max => x.max(y),
                };
            }
        }
        _ => unreachable!("one or two graphs"),
    }
}

/// Routes the adjoint of an aggregated row to the per-graph outputs. Max
/// sends it to the larger input, the first graph on ties.
fn spread(tapes: &mut [GcnTape], row: usize, mode: Aggregation, grad: &[f64]) {
    match tapes {
        [only] => axpy(1.0, grad, only.output_grad_mut(row)),
        [a, b] => match mode {
            Aggregation::Mean => {
                axpy(0.5, grad, a.output_grad_mut(row));
                axpy(0.5, grad, b.output_grad_mut(row));
            }
            Aggregation::Max => {
                let take_a: Vec<bool> = a
                    .output(row)
                    .iter()
                    .zip(b.output(row))
                    .map(|(x, y)| x >= y)
                    .collect();
                let ga = a.output_grad_mut(row);
                for (i, &t) in take_a.iter().enumerate() {
                    if t {
                        ga[i] += grad[i];
                    }
                }
                let gb = b.output_grad_mut(row);
                for (i, &t) in take_a.iter().enumerate() {
                    if !t {
                        gb[i] += grad[i];
                    }
                }
            }
        },
        _ => unreachable!("one or two graphs"),
    }
}

/// Loss and dense gradient of one batch.
pub fn skipgram_gradients(
    batch: &Batch,
    params: &ModelParams,
    graphs: &Graphs,
    cfg: &ModelConfig,
) -> Result<(f64, ParamGradient)> {
    params.check_shapes()?;
    let mut ws = SkipGramWorkspace::new(params.n(), cfg);
    let g = ws.compute(batch, params, graphs)?;
    if !g.is_finite() {
        return Err(Error::NonFinite {
            what: "gradient",
            epoch: 0,
            batch: 0,
        });
    }
    Ok((g.loss(), g.to_dense(params.n())))
}
