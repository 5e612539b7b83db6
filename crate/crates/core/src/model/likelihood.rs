use super::{embed_all, Graphs, ModelConfig, ModelParams, Side};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::matrix::dot;

/// Largest vertex count accepted by [`full_softmax_log_likelihood`].
pub const SOFTMAX_LOCATION_LIMIT: usize = 1000;

/// Exact skip-gram log-likelihood with the softmax taken over every
/// location: `sum over (center, context) pairs of
/// u'_o . u_c - log sum_l exp(u'_l . u_c)`.
///
/// Meant as a check on small corpora; the cost is quadratic in N.
pub fn full_softmax_log_likelihood(
    sequences: &[Vec<usize>],
    params: &ModelParams,
    graphs: &Graphs,
    cfg: &ModelConfig,
    window: usize,
) -> Result<f64> {
    let n = params.n();
    if n > SOFTMAX_LOCATION_LIMIT {
        return Err(Error::TooManyLocations {
            n,
            limit: SOFTMAX_LOCATION_LIMIT,
        });
    }
    if let Some(&bad) = sequences.iter().flatten().find(|&&i| i >= n) {
        return Err(Error::RowOutOfRange { row: bad, len: n });
    }
    let nodes = embed_all(params, graphs, cfg, Side::Node, Exec::Sequential)?;
    let contexts = embed_all(params, graphs, cfg, Side::Context, Exec::Sequential)?;
    let mut log_partition: Vec<Option<f64>> = vec![None; n];
    let mut total = 0.0;
    for seq in sequences {
        for (t, &c) in seq.iter().enumerate() {
            let u = nodes.row(c);
            let lz = *log_partition[c].get_or_insert_with(|| {
                let logits: Vec<f64> = (0..n).map(|l| dot(contexts.row(l), u)).collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
            });
            let lo = t.saturating_sub(window);
            let hi = (t + window).min(seq.len() - 1);
            for (j, &o) in seq.iter().enumerate().take(hi + 1).skip(lo) {
                if j != t {
                    total += dot(contexts.row(o), u) - lz;
                }
            }
        }
    }
    Ok(total)
}
