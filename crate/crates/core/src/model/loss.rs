use crate::matrix::dot;

/// Logistic function without overflow for large `|x|`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))`, accurate in both tails.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `log(1 + e^x)`
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Negative-sampling loss of one center vector: positives are pulled
/// towards it, negatives pushed away.
///
/// `sum_c -log s(u.c) + sum_z -log s(-u.z)`
pub fn skipgram_loss(center: &[f64], contexts: &[&[f64]], negatives: &[&[f64]]) -> f64 {
    let pos: f64 = contexts.iter().map(|c| softplus(-dot(center, c))).sum();
    let neg: f64 = negatives.iter().map(|z| softplus(dot(center, z))).sum();
    pos + neg
}
