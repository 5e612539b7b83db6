//! Synthetic city with planted regions, for tests and demos.
//!
//! Regions are square blocks of grid cells separated by empty bands wider
//! than the default spatial threshold. Each trajectory walks inside its
//! user's home region and jumps to a uniformly chosen other region with
//! probability `inter_region_prob` per step.

use std::io::{BufWriter, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geo::{cell_from_point, CellId, GeoPoint, DEFAULT_LEVEL};
use crate::trajectory::LbsRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCityConfig {
    pub regions: usize,
    pub cells_per_region: usize,
    pub inter_region_prob: f64,
    pub trajectories: usize,
    pub trajectory_len: usize,
    pub trajectories_per_user: usize,
    /// Empty cells between neighboring region blocks.
    pub region_gap: u64,
    pub level: u8,
    pub origin: (f64, f64),
    /// Seconds between consecutive records, inclusive range.
    pub step_seconds: (u64, u64),
    pub seed: u64,
}

impl Default for SyntheticCityConfig {
    fn default() -> Self {
        SyntheticCityConfig {
            regions: 4,
            cells_per_region: 25,
            inter_region_prob: 0.05,
            trajectories: 2000,
            trajectory_len: 10,
            trajectories_per_user: 4,
            region_gap: 10,
            level: DEFAULT_LEVEL,
            origin: (23.1, 113.3),
            step_seconds: (60, 900),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCity {
    pub records: Vec<LbsRecord>,
    /// Planted region of every cell, region ids `0..regions`.
    pub labels: Vec<(CellId, u64)>,
    /// Cells of each region.
    pub region_cells: Vec<Vec<CellId>>,
}

impl SyntheticCityConfig {
    fn validate(&self) -> Result<()> {
        if self.regions == 0
            || self.cells_per_region == 0
            || self.trajectory_len == 0
            || self.trajectories_per_user == 0
        {
            return Err(Error::InvalidConfig(
                "synthetic city sizes must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.inter_region_prob) {
            return Err(Error::InvalidConfig(
                "inter_region_prob must lie in [0, 1]".into(),
            ));
        }
        if self.inter_region_prob > 0.0 && self.regions < 2 {
            return Err(Error::InvalidConfig(
                "region jumps need at least two regions".into(),
            ));
        }
        if self.step_seconds.0 == 0 || self.step_seconds.0 > self.step_seconds.1 {
            return Err(Error::InvalidConfig(
                "step_seconds must be a non-empty positive range".into(),
            ));
        }
        Ok(())
    }
}

pub fn generate_synthetic_city(cfg: &SyntheticCityConfig) -> Result<SyntheticCity> {
    cfg.validate()?;
    let origin = GeoPoint::new(cfg.origin.0, cfg.origin.1)?;
    let (col0, row0) = cell_from_point(origin, cfg.level)?.grid();
    let side = (cfg.cells_per_region as f64).sqrt().ceil() as u64;
    let per_row = (cfg.regions as f64).sqrt().ceil() as u64;
    let pitch = side + cfg.region_gap;
    let extent = 1u64 << cfg.level;
    if col0 + per_row * pitch >= extent || row0 + per_row * pitch >= extent {
        return Err(Error::InvalidConfig(
            "synthetic city does not fit the grid at this origin".into(),
        ));
    }

    let mut region_cells = Vec::with_capacity(cfg.regions);
    for r in 0..cfg.regions as u64 {
        let (bx, by) = (r % per_row, r / per_row);
        let cells = (0..cfg.cells_per_region as u64)
            .map(|i| {
                CellId::from_grid(
                    cfg.level,
                    col0 + bx * pitch + i % side,
                    row0 + by * pitch + i / side,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        region_cells.push(cells);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base_time: u64 = 1_575_158_400;
    let day = 86_400;
    let mut records = Vec::with_capacity(cfg.trajectories * cfg.trajectory_len);
    let mut home = 0;
    for t in 0..cfg.trajectories {
        let user = t / cfg.trajectories_per_user;
        if t % cfg.trajectories_per_user == 0 {
            home = rng.random_range(0..cfg.regions);
        }
        let mut time =
            base_time + (t % cfg.trajectories_per_user) as u64 * day + rng.random_range(0..3600);
        let mut region = home;
        for step in 0..cfg.trajectory_len {
            if step > 0 {
                time += rng.random_range(cfg.step_seconds.0..=cfg.step_seconds.1);
                if rng.random_bool(cfg.inter_region_prob) {
                    let other = rng.random_range(0..cfg.regions - 1);
                    region = if other >= region { other + 1 } else { other };
                }
            }
            let cells = &region_cells[region];
            let cell = cells[rng.random_range(0..cells.len())];
            let (lat0, lat1, lng0, lng1) = cell.bounds();
            let point = GeoPoint::new(
                lat0 + rng.random_range(0.1..0.9) * (lat1 - lat0),
                lng0 + rng.random_range(0.1..0.9) * (lng1 - lng0),
            )?;
            records.push(LbsRecord {
                user_id: format!("u{user:05}"),
                timestamp: time,
                point,
            });
        }
    }

    let labels = region_cells
        .iter()
        .enumerate()
        .flat_map(|(r, cells)| cells.iter().map(move |&c| (c, r as u64)))
        .collect();
    Ok(SyntheticCity {
        records,
        labels,
        region_cells,
    })
}

/// Writes records as `user_id,timestamp,lat,lng` CSV with a header.
pub fn write_records<W: Write>(out: W, records: &[LbsRecord]) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "user_id,timestamp,lat,lng")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{}",
            r.user_id,
            r.timestamp,
            r.point.lat(),
            r.point.lng()
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::trajectory::sessionize;

    fn small(p: f64) -> SyntheticCityConfig {
        SyntheticCityConfig {
            trajectories: 300,
            inter_region_prob: p,
            ..Default::default()
        }
    }

    fn region_map(city: &SyntheticCity) -> HashMap<CellId, u64> {
        city.labels.iter().copied().collect()
    }

    fn inter_fraction(city: &SyntheticCity) -> f64 {
        let regions = region_map(city);
        let trajs = sessionize(&city.records, 3600, DEFAULT_LEVEL).unwrap();
        let (mut cross, mut total) = (0usize, 0usize);
        for t in &trajs {
            for w in t.cells.windows(2) {
                total += 1;
                cross += usize::from(regions[&w[0]] != regions[&w[1]]);
            }
        }
        cross as f64 / total as f64
    }

    #[test]
    fn records_land_in_planted_cells() {
        let city = generate_synthetic_city(&small(0.05)).unwrap();
        let regions = region_map(&city);
        assert_eq!(city.labels.len(), 100);
        assert_eq!(city.records.len(), 3000);
        for r in &city.records {
            assert!(regions.contains_key(&cell_from_point(r.point, DEFAULT_LEVEL).unwrap()));
        }
    }

    #[test]
    fn zero_jump_probability_keeps_trajectories_home() {
        let city = generate_synthetic_city(&small(0.0)).unwrap();
        assert_eq!(inter_fraction(&city), 0.0);
    }

    #[test]
    fn certain_jumps_always_cross() {
        let city = generate_synthetic_city(&small(1.0)).unwrap();
        assert_eq!(inter_fraction(&city), 1.0);
    }

    #[test]
    fn default_mixing_is_mostly_local() {
        let city = generate_synthetic_city(&SyntheticCityConfig::default()).unwrap();
        assert!(inter_fraction(&city) < 0.1);
    }

    #[test]
    fn day_gaps_split_user_sessions() {
        let city = generate_synthetic_city(&small(0.05)).unwrap();
        let trajs = sessionize(&city.records, 3600, DEFAULT_LEVEL).unwrap();
        assert_eq!(trajs.len(), 300);
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = generate_synthetic_city(&small(0.05)).unwrap();
        let b = generate_synthetic_city(&small(0.05)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_city(&SyntheticCityConfig {
            seed: 8,
            ..small(0.05)
        })
        .unwrap();
        assert_ne!(a.records, c.records);
    }
}
