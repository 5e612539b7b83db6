//! Graph-convolution-parameterized skip-gram model.
//!
//! Each location has two base vectors (node and context). A location's
//! effective vector on either side is a graph convolution of the base table
//! over the flow graph and over the spatial graph, combined by an
//! aggregation. The convolution weights are shared by both sides.

mod gcn;
mod gradient;
mod likelihood;
mod loss;
mod rows;
mod sampler;
mod shared;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use gcn::{aggregate, gcn_forward, gcn_forward_rows, BaseRows, GcnTape};
pub use gradient::{skipgram_gradients, Batch, BatchGradient, ParamGradient, SkipGramWorkspace};
pub use likelihood::{full_softmax_log_likelihood, SOFTMAX_LOCATION_LIMIT};
pub use loss::{log_sigmoid, sigmoid, skipgram_loss};
pub use sampler::NegativeSampler;
pub use shared::SharedParams;
pub use train::{train, train_encoded, train_from, TrainConfig, TrainReport, Trained};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::graph::{GraphKind, NormalizedGraph};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Max,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            _ => Err(Error::InvalidConfig(format!("unknown aggregation `{s}`"))),
        }
    }
}

/// Which graph convolutions feed the aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphSet {
    Both,
    FlowOnly,
    SpatialOnly,
}

impl GraphSet {
    pub fn kinds(self) -> &'static [GraphKind] {
        match self {
            GraphSet::Both => &[GraphKind::Flow, GraphKind::Spatial],
            GraphSet::FlowOnly => &[GraphKind::Flow],
            GraphSet::SpatialOnly => &[GraphKind::Spatial],
        }
    }
}

impl FromStr for GraphSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(GraphSet::Both),
            "flow" | "flow-only" => Ok(GraphSet::FlowOnly),
            "spatial" | "spatial-only" => Ok(GraphSet::SpatialOnly),
            _ => Err(Error::InvalidConfig(format!("unknown graph set `{s}`"))),
        }
    }
}

impl fmt::Display for GraphSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphSet::Both => "both",
            GraphSet::FlowOnly => "flow",
            GraphSet::SpatialOnly => "spatial",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    /// Graph convolution layers per graph.
    pub layers: usize,
    pub activation: Activation,
    pub aggregation: Aggregation,
    pub graphs: GraphSet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 16,
            layers: 1,
            activation: Activation::Tanh,
            aggregation: Aggregation::Mean,
            graphs: GraphSet::Both,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dim must be at least 1".into()));
        }
        if self.layers == 0 {
            return Err(Error::InvalidConfig("layers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Base table selector: node vectors `u` or context vectors `u'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Node,
    Context,
}

/// The normalized flow and spatial operators over one vertex set.
#[derive(Debug, Clone)]
pub struct Graphs {
    pub flow: NormalizedGraph,
    pub spatial: NormalizedGraph,
}

impl Graphs {
    pub fn new(flow: NormalizedGraph, spatial: NormalizedGraph) -> Result<Self> {
        if flow.n() != spatial.n() {
            return Err(Error::DimensionMismatch(format!(
                "flow graph has {} vertices, spatial graph {}",
                flow.n(),
                spatial.n()
            )));
        }
        Ok(Graphs { flow, spatial })
    }

    pub fn n(&self) -> usize {
        self.flow.n()
    }

    pub fn get(&self, kind: GraphKind) -> &NormalizedGraph {
        match kind {
            GraphKind::Flow => &self.flow,
            GraphKind::Spatial => &self.spatial,
        }
    }
}

/// Trainable parameters: two `N x d` base tables and per-graph `d x d`
/// convolution weights, one matrix per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub node_base: Matrix,
    pub context_base: Matrix,
    pub flow_weights: Vec<Matrix>,
    pub spatial_weights: Vec<Matrix>,
}

impl ModelParams {
    /// Base tables uniform in `[-0.5/d, 0.5/d]`; weights uniform in
    /// `[-sqrt(6/2d), sqrt(6/2d)]`.
    pub fn init<R: Rng>(n: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let base = 0.5 / d as f64;
        let glorot = (6.0 / (2.0 * d as f64)).sqrt();
        let table = |rng: &mut R| Matrix::from_fn(n, d, |_, _| rng.random_range(-base..=base));
        let node_base = table(rng);
        let context_base = table(rng);
        let weights = |rng: &mut R| -> Vec<Matrix> {
            (0..cfg.layers)
                .map(|_| Matrix::from_fn(d, d, |_, _| rng.random_range(-glorot..=glorot)))
                .collect()
        };
        let flow_weights = weights(rng);
        let spatial_weights = weights(rng);
        ModelParams {
            node_base,
            context_base,
            flow_weights,
            spatial_weights,
        }
    }

    pub fn n(&self) -> usize {
        self.node_base.rows()
    }

    pub fn dim(&self) -> usize {
        self.node_base.cols()
    }

    pub fn layers(&self) -> usize {
        self.flow_weights.len()
    }

    pub fn base(&self, side: Side) -> &Matrix {
        match side {
            Side::Node => &self.node_base,
            Side::Context => &self.context_base,
        }
    }

    pub fn base_mut(&mut self, side: Side) -> &mut Matrix {
        match side {
            Side::Node => &mut self.node_base,
            Side::Context => &mut self.context_base,
        }
    }

    pub fn weights(&self, kind: GraphKind) -> &[Matrix] {
        match kind {
            GraphKind::Flow => &self.flow_weights,
            GraphKind::Spatial => &self.spatial_weights,
        }
    }

    pub fn weights_mut(&mut self, kind: GraphKind) -> &mut [Matrix] {
        match kind {
            GraphKind::Flow => &mut self.flow_weights,
            GraphKind::Spatial => &mut self.spatial_weights,
        }
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (n, d) = (self.n(), self.dim());
        let ok = self.context_base.rows() == n
            && self.context_base.cols() == d
            && !self.flow_weights.is_empty()
            && self.flow_weights.len() == self.spatial_weights.len()
            && self
                .flow_weights
                .iter()
                .chain(&self.spatial_weights)
                .all(|w| w.rows() == d && w.cols() == d);
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(
                "inconsistent parameter shapes".into(),
            ))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.node_base.is_finite()
            && self.context_base.is_finite()
            && self
                .flow_weights
                .iter()
                .chain(&self.spatial_weights)
                .all(Matrix::is_finite)
    }

    /// `self -= lr * grad`.
    pub fn apply(&mut self, grad: &BatchGradient, lr: f64) {
        for (side, rows) in [
            (Side::Node, grad.node_rows()),
            (Side::Context, grad.context_rows()),
        ] {
            let table = self.base_mut(side);
            for (id, g) in rows.iter() {
                crate::matrix::axpy(-lr, g, table.row_mut(id));
            }
        }
        for &kind in grad.kinds() {
            for (w, g) in self.weights_mut(kind).iter_mut().zip(grad.weights(kind)) {
                crate::matrix::axpy(-lr, g, w.as_mut_slice());
            }
        }
    }
}

/// Read access to parameters, as needed by the batch gradient.
///
/// Implemented for plain [`ModelParams`] and for the lock-free
/// [`SharedParams`] used by concurrent training.
pub trait ParamStore: Sync {
    fn n(&self) -> usize;
    fn dim(&self) -> usize;
    fn layers(&self) -> usize;
    /// `acc += scale * base[side][row]`
    fn add_base_row(&self, side: Side, row: usize, scale: f64, acc: &mut [f64]);
    fn copy_weights(&self, kind: GraphKind, layer: usize, out: &mut [f64]);
}

impl ParamStore for ModelParams {
    fn n(&self) -> usize {
        ModelParams::n(self)
    }

    fn dim(&self) -> usize {
        ModelParams::dim(self)
    }

    fn layers(&self) -> usize {
        ModelParams::layers(self)
    }

    #[inline]
    fn add_base_row(&self, side: Side, row: usize, scale: f64, acc: &mut [f64]) {
        crate::matrix::axpy(scale, self.base(side).row(row), acc);
    }

    fn copy_weights(&self, kind: GraphKind, layer: usize, out: &mut [f64]) {
        out.copy_from_slice(self.weights(kind)[layer].as_slice());
    }
}

/// Effective vectors for `rows` on one side.
pub fn embed(
    params: &ModelParams,
    graphs: &Graphs,
    cfg: &ModelConfig,
    rows: &[usize],
    side: Side,
) -> Result<Matrix> {
    params.check_shapes()?;
    let outs = cfg
        .graphs
        .kinds()
        .iter()
        .map(|&k| {
            gcn_forward_rows(
                graphs.get(k),
                params.base(side),
                params.weights(k),
                cfg.activation,
                rows,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate_all(outs, cfg.aggregation)
}

/// Effective vectors for every location on one side.
pub fn embed_all(
    params: &ModelParams,
    graphs: &Graphs,
    cfg: &ModelConfig,
    side: Side,
    exec: Exec,
) -> Result<Matrix> {
    params.check_shapes()?;
    let outs = cfg
        .graphs
        .kinds()
        .iter()
        .map(|&k| {
            gcn::gcn_forward_with(
                graphs.get(k),
                params.base(side),
                params.weights(k),
                cfg.activation,
                exec,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate_all(outs, cfg.aggregation)
}

fn aggregate_all(mut outs: Vec<Matrix>, mode: Aggregation) -> Result<Matrix> {
    match outs.len() {
        1 => Ok(outs.pop().unwrap()),
        2 => aggregate(&outs[0], &outs[1], mode),
        _ => unreachable!("one or two graphs"),
    }
}
