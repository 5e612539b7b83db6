use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;

use crate::error::{Error, Result};

/// Exponent applied to visit counts for the noise distribution.
pub const UNIGRAM_POWER: f64 = 0.75;

/// Draws negative locations with probability proportional to
/// `visit_count^0.75`.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    weights: Vec<f64>,
    total: f64,
    alias: WeightedAliasIndex<f64>,
}

impl NegativeSampler {
    pub fn new(visit_counts: &[u64]) -> Result<Self> {
        Self::with_power(visit_counts, UNIGRAM_POWER)
    }

    pub fn with_power(visit_counts: &[u64], power: f64) -> Result<Self> {
        let weights: Vec<f64> = visit_counts
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { (c as f64).powf(power) })
            .collect();
        let total: f64 = weights.iter().sum();
        if total.is_nan() || total <= 0.0 {
            return Err(Error::NoNegativeCandidates);
        }
        let alias = WeightedAliasIndex::new(weights.clone())
            .map_err(|e| Error::InvalidConfig(format!("negative sampler: {e}")))?;
        Ok(NegativeSampler {
            weights,
            total,
            alias,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Probability of drawing `id` before exclusion.
    pub fn probability(&self, id: usize) -> f64 {
        self.weights[id] / self.total
    }

    /// Appends `k` draws to `out`, with replacement, never returning an id in
    /// `exclude`.
    pub fn sample_into<R: Rng + ?Sized>(
        &self,
        k: usize,
        exclude: &[usize],
        rng: &mut R,
        out: &mut Vec<usize>,
    ) -> Result<()> {
        if k == 0 {
            return Ok(());
        }
        let mut excluded: Vec<usize> = exclude
            .iter()
            .copied()
            .filter(|&i| i < self.weights.len())
            .collect();
        excluded.sort_unstable();
        excluded.dedup();
        let excluded_mass: f64 = excluded.iter().map(|&i| self.weights[i]).sum();
        if self.total - excluded_mass <= self.total * 1e-12 {
            return Err(Error::NoNegativeCandidates);
        }
        // rejection first; fall back to an explicit candidate table when
        // the excluded mass dominates
        let mut fallback: Option<WeightedAliasIndex<f64>> = None;
        for _ in 0..k {
            let mut tries = 0;
            let id = loop {
                if let Some(table) = &fallback {
                    break table.sample(rng);
                }
                let id = self.alias.sample(rng);
                if excluded.binary_search(&id).is_err() {
                    break id;
                }
                tries += 1;
                if tries == 64 {
                    let mut w = self.weights.clone();
                    for &i in &excluded {
                        w[i] = 0.0;
                    }
                    fallback = Some(
                        WeightedAliasIndex::new(w)
                            .map_err(|e| Error::InvalidConfig(format!("negative sampler: {e}")))?,
                    );
                }
            };
            out.push(id);
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        k: usize,
        exclude: &[usize],
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(k);
        self.sample_into(k, exclude, rng, &mut out)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_candidate() {
        let s = NegativeSampler::new(&[3, 5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(s
            .sample(50, &[0], &mut rng)
            .unwrap()
            .iter()
            .all(|&i| i == 1));
    }

    #[test]
    fn all_excluded_is_an_error() {
        let s = NegativeSampler::new(&[3, 5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            s.sample(1, &[0, 1], &mut rng),
            Err(Error::NoNegativeCandidates)
        ));
        // zero-visit cells are never candidates
        let s = NegativeSampler::new(&[0, 5]).unwrap();
        assert!(s.sample(1, &[1], &mut rng).is_err());
        assert!(NegativeSampler::new(&[0, 0]).is_err());
    }

    #[test]
    fn heavy_exclusion_uses_fallback() {
        let mut counts = vec![1000u64; 50];
        counts.push(1);
        let s = NegativeSampler::new(&counts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let exclude: Vec<usize> = (0..50).collect();
        assert!(s
            .sample(20, &exclude, &mut rng)
            .unwrap()
            .iter()
            .all(|&i| i == 50));
    }

    #[test]
    fn uniform_counts_pass_chi_square() {
        let n = 20;
        let s = NegativeSampler::new(&vec![7; n]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = 100_000;
        let mut hist = vec![0usize; n];
        for id in s.sample(draws, &[], &mut rng).unwrap() {
            hist[id] += 1;
        }
        let expected = draws as f64 / n as f64;
        let chi2: f64 = hist
            .iter()
            .map(|&h| (h as f64 - expected).powi(2) / expected)
            .sum();
        // chi-square 0.99 quantile, 19 degrees of freedom
        assert!(chi2 < 36.191, "chi2 = {chi2}");
    }

    #[test]
    fn skewed_counts_follow_power_law() {
        // one cell visited 8 times, eight cells visited once
        let mut counts = vec![8u64];
        counts.extend(std::iter::repeat_n(1, 8));
        let s = NegativeSampler::new(&counts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 1_000_000;
        let mut hist = vec![0usize; counts.len()];
        let mut buf = Vec::with_capacity(draws);
        s.sample_into(draws, &[], &mut rng, &mut buf).unwrap();
        for id in buf {
            hist[id] += 1;
        }
        let expected_ratio = 8f64.powf(0.75);
        let others = hist[1..].iter().sum::<usize>() as f64 / 8.0;
        let ratio = hist[0] as f64 / others;
        assert!(
            (ratio / expected_ratio - 1.0).abs() < 0.05,
            "ratio {ratio} vs {expected_ratio}"
        );
        let total_w = expected_ratio + 8.0;
        assert!((s.probability(0) - expected_ratio / total_w).abs() < 1e-15);
    }
}
