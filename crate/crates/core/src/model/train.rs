//! Epoch loop: window contexts, negative sampling, per-center SGD.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    embed_all, Batch, Graphs, ModelConfig, ModelParams, NegativeSampler, ParamStore, SharedParams,
    Side, SkipGramWorkspace,
};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::matrix::norm;
use crate::trajectory::{LocationIndex, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Context positions taken on each side of the center.
    pub window: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    /// Floor of the linear learning-rate decay.
    pub min_learning_rate: f64,
    pub epochs: usize,
    /// Stop once the epoch-mean loss changes by less than this fraction.
    pub tolerance: f64,
    pub seed: u64,
    /// Single worker, bit-reproducible. Otherwise workers race on shared
    /// parameters.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            window: 5,
            negatives: 5,
            learning_rate: 0.025,
            min_learning_rate: 1e-4,
            epochs: 30,
            tolerance: 1e-4,
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if self.negatives == 0 {
            return bad("negatives must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.min_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.tolerance.is_nan() || self.tolerance < 0.0 {
            return bad("tolerance must be non-negative");
        }
        Ok(())
    }

    fn rate_at(&self, step: usize, total: usize) -> f64 {
        let progress = step as f64 / total.max(1) as f64;
        (self.learning_rate - (self.learning_rate - self.min_learning_rate) * progress)
            .max(self.min_learning_rate)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub converged: bool,
    /// Mean batch loss of each completed epoch.
    pub epoch_loss: Vec<f64>,
    pub batches_per_epoch: usize,
    /// Centers for which every location was excluded from sampling.
    pub batches_without_negatives: usize,
    /// Sum over batches of each node base row's gradient norm.
    pub node_grad_norm: Vec<f64>,
    pub context_grad_norm: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ModelParams,
    pub embeddings: EmbeddingMatrix,
    pub report: TrainReport,
}

pub fn train(
    trajectories: &[Trajectory],
    graphs: &Graphs,
    index: &LocationIndex,
    cfg: &TrainConfig,
) -> Result<Trained> {
    let encoded = index.encode(trajectories)?;
    train_encoded(&encoded, graphs, index, cfg)
}

/// Trains on trajectories already mapped to dense ids.
pub fn train_encoded(
    sequences: &[Vec<usize>],
    graphs: &Graphs,
    index: &LocationIndex,
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(index.len(), &cfg.model, &mut rng);
    run(params, sequences, graphs, index, cfg, rng)
}

/// Trains starting from `params` instead of a fresh initialization.
pub fn train_from(
    params: ModelParams,
    sequences: &[Vec<usize>],
    graphs: &Graphs,
    index: &LocationIndex,
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    run(params, sequences, graphs, index, cfg, rng)
}

struct Corpus<'a> {
    sequences: &'a [Vec<usize>],
    sampler: Option<NegativeSampler>,
    graphs: &'a Graphs,
    cfg: &'a TrainConfig,
    total_steps: usize,
}

#[derive(Default)]
struct EpochStats {
    loss: f64,
    batches: usize,
    without_negatives: usize,
}

fn run(
    mut params: ModelParams,
    sequences: &[Vec<usize>],
    graphs: &Graphs,
    index: &LocationIndex,
    cfg: &TrainConfig,
    mut rng: ChaCha8Rng,
) -> Result<Trained> {
    let n = index.len();
    params.check_shapes()?;
    if params.n() != n || graphs.n() != n {
        return Err(Error::DimensionMismatch(format!(
            "index has {n} locations, parameters {}, graphs {}",
            params.n(),
            graphs.n()
        )));
    }
    if params.dim() != cfg.model.dim || params.layers() != cfg.model.layers {
        return Err(Error::DimensionMismatch(
            "parameters do not match model config".into(),
        ));
    }
    if let Some(&bad) = sequences.iter().flatten().find(|&&i| i >= n) {
        return Err(Error::RowOutOfRange { row: bad, len: n });
    }
    let centers: usize = sequences
        .iter()
        .filter(|s| s.len() >= 2)
        .map(Vec::len)
        .sum();
    let corpus = Corpus {
        sequences,
        // no training signal without pairs; an all-zero count table is legal then
        sampler: if centers > 0 {
            Some(NegativeSampler::new(index.visit_counts())?)
        } else {
            None
        },
        graphs,
        cfg,
        total_steps: centers * cfg.epochs,
    };
    let exec = if cfg.deterministic {
        Exec::Sequential
    } else {
        Exec::default()
    };

    let mut report = TrainReport {
        batches_per_epoch: centers,
        node_grad_norm: vec![0.0; n],
        context_grad_norm: vec![0.0; n],
        ..TrainReport::default()
    };
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut step = 0usize;
    let shared = (!cfg.deterministic).then(|| SharedParams::new(&params));
    let mut ws = cfg
        .deterministic
        .then(|| SkipGramWorkspace::new(n, &cfg.model));

    for epoch in 0..cfg.epochs {
        if centers == 0 {
            break;
        }
        order.shuffle(&mut rng);
        let stats = match (&shared, ws.as_mut()) {
            (None, Some(ws)) => {
                let mut stats = EpochStats::default();
                for &ti in &order {
                    corpus.run_sequence(
                        ti,
                        epoch,
                        &mut step,
                        &mut rng,
                        ws,
                        &mut stats,
                        &mut params,
                        &mut report,
                    )?;
                }
                stats
            }
            (Some(store), _) => {
                corpus.run_epoch_shared(store, &order, epoch, &mut step, exec, &mut report)?
            }
            _ => unreachable!(),
        };
        report.batches_without_negatives += stats.without_negatives;
        let mean = stats.loss / stats.batches as f64;
        report.epochs_run = epoch + 1;
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        let prev = report.epoch_loss.last().copied();
        report.epoch_loss.push(mean);
        if let Some(prev) = prev {
            if ((prev - mean) / prev).abs() < cfg.tolerance {
                report.converged = true;
                break;
            }
        }
    }
    if let Some(store) = shared {
        params = store.snapshot();
    }
    if !params.is_finite() {
        return Err(Error::NonFinite {
            what: "parameters",
            epoch: report.epochs_run,
            batch: 0,
        });
    }
    let vectors = embed_all(&params, graphs, &cfg.model, Side::Node, exec)?;
    let embeddings = EmbeddingMatrix::new(index.cells().to_vec(), vectors)?;
    Ok(Trained {
        params,
        embeddings,
        report,
    })
}

impl Corpus<'_> {
    fn fill_batch(
        &self,
        seq: &[usize],
        t: usize,
        rng: &mut ChaCha8Rng,
        batch: &mut Batch,
    ) -> Result<bool> {
        let m = self.cfg.window;
        let lo = t.saturating_sub(m);
        let hi = (t + m).min(seq.len() - 1);
        batch.center = seq[t];
        batch.contexts.clear();
        batch.contexts.extend_from_slice(&seq[lo..t]);
        batch.contexts.extend_from_slice(&seq[t + 1..=hi]);
        batch.negatives.clear();
        let sampler = self
            .sampler
            .as_ref()
            .expect("sampler exists when there are centers");
        let mut exclude = Vec::with_capacity(batch.contexts.len() + 1);
        exclude.push(batch.center);
        exclude.extend_from_slice(&batch.contexts);
        match sampler.sample_into(self.cfg.negatives, &exclude, rng, &mut batch.negatives) {
            Ok(()) => Ok(true),
            Err(Error::NoNegativeCandidates) => Ok(false),
            Err(e) => Err(e),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_sequence(
        &self,
        ti: usize,
        epoch: usize,
        step: &mut usize,
        rng: &mut ChaCha8Rng,
        ws: &mut SkipGramWorkspace,
        stats: &mut EpochStats,
        params: &mut ModelParams,
        report: &mut TrainReport,
    ) -> Result<()> {
        let seq = &self.sequences[ti];
        if seq.len() < 2 {
            return Ok(());
        }
        let mut batch = Batch::default();
        for t in 0..seq.len() {
            if !self.fill_batch(seq, t, rng, &mut batch)? {
                stats.without_negatives += 1;
            }
            let lr = self.cfg.rate_at(*step, self.total_steps);
            let grad = ws.compute(&batch, &*params, self.graphs)?;
            if !grad.loss().is_finite() {
                return Err(Error::NonFinite {
                    what: "loss",
                    epoch,
                    batch: stats.batches,
                });
            }
            if !grad.is_finite() {
                return Err(Error::NonFinite {
                    what: "gradient",
                    epoch,
                    batch: stats.batches,
                });
            }
            for (id, g) in grad.node_rows().iter() {
                report.node_grad_norm[id] += norm(g);
            }
            for (id, g) in grad.context_rows().iter() {
                report.context_grad_norm[id] += norm(g);
            }
            stats.loss += grad.loss();
            stats.batches += 1;
            params.apply(grad, lr);
            *step += 1;
        }
        Ok(())
    }

    fn run_epoch_shared(
        &self,
        store: &SharedParams,
        order: &[usize],
        epoch: usize,
        step: &mut usize,
        exec: Exec,
        report: &mut TrainReport,
    ) -> Result<EpochStats> {
        let n = store.n();
        let workers = exec.workers().max(1);
        let chunk_len = order.len().div_ceil(workers * 4).max(1);
        let chunks: Vec<&[usize]> = order.chunks(chunk_len).collect();
        let counter = AtomicUsize::new(*step);
        let node_norm: Vec<AtomicU64> = report
            .node_grad_norm
            .iter()
            .map(|v| AtomicU64::new(v.to_bits()))
            .collect();
        let ctx_norm: Vec<AtomicU64> = report
            .context_grad_norm
            .iter()
            .map(|v| AtomicU64::new(v.to_bits()))
            .collect();
        let bump = |cells: &[AtomicU64], id: usize, v: f64| {
            let old = f64::from_bits(cells[id].load(Ordering::Relaxed));
            cells[id].store((old + v).to_bits(), Ordering::Relaxed);
        };
        let results = exec.map_range(chunks.len(), |c| -> Result<EpochStats> {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            rng.set_stream(((epoch as u64) << 32) | (c as u64 + 2));
            let mut ws = SkipGramWorkspace::new(n, &self.cfg.model);
            let mut stats = EpochStats::default();
            let mut batch = Batch::default();
            for &ti in chunks[c] {
                let seq = &self.sequences[ti];
                if seq.len() < 2 {
                    continue;
                }
                for t in 0..seq.len() {
                    if !self.fill_batch(seq, t, &mut rng, &mut batch)? {
                        stats.without_negatives += 1;
                    }
                    let s = counter.fetch_add(1, Ordering::Relaxed);
                    let lr = self.cfg.rate_at(s, self.total_steps);
                    let grad = ws.compute(&batch, store, self.graphs)?;
                    if !grad.is_finite() {
                        return Err(Error::NonFinite {
                            what: "loss",
                            epoch,
                            batch: stats.batches,
                        });
                    }
                    for (id, g) in grad.node_rows().iter() {
                        bump(&node_norm, id, norm(g));
                    }
                    for (id, g) in grad.context_rows().iter() {
                        bump(&ctx_norm, id, norm(g));
                    }
                    stats.loss += grad.loss();
                    stats.batches += 1;
                    store.apply(grad, lr);
                }
            }
            Ok(stats)
        });
        let mut total = EpochStats::default();
        for r in results {
            let r = r?;
            total.loss += r.loss;
            total.batches += r.batches;
            total.without_negatives += r.without_negatives;
        }
        *step = counter.into_inner();
        report.node_grad_norm = node_norm
            .into_iter()
            .map(|a| f64::from_bits(a.into_inner()))
            .collect();
        report.context_grad_norm = ctx_norm
            .into_iter()
            .map(|a| f64::from_bits(a.into_inner()))
            .collect();
        Ok(total)
    }
}
