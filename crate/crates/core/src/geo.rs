//! Lat/lng discretization onto a Hilbert-linearized grid, plus great-circle
//! distance.
//!
//! A level-`L` grid splits the plate-carrée map into `2^L x 2^L` cells. Rows
//! run along latitude from -90 and columns along longitude from -180; the
//! pair `(col, row)` is linearized with a Hilbert curve that starts at the
//! origin and first steps in the +row direction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sphere radius used for all distances, in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

pub const MAX_LEVEL: u8 = 30;

/// Default grid level, roughly 150 m x 76 m cells at the equator.
pub const DEFAULT_LEVEL: u8 = 18;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat: f64,
    lng: f64,
}

impl GeoPoint {
    /// Validates latitude and wraps longitude into `[-180, 180)`.
    ///
    /// Longitudes outside `[-180, 180]` are rejected rather than wrapped, since
    /// they almost always indicate swapped or corrupted fields.
    pub fn new(lat: f64, lng: f64) -> Result<Self> {
        if !lat.is_finite() || !lng.is_finite() {
            return Err(Error::InvalidCoordinate(format!(
                "non-finite coordinate ({lat}, {lng})"
            )));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::InvalidCoordinate(format!(
                "latitude {lat} outside [-90, 90]"
            )));
        }
        if !(-180.0..=180.0).contains(&lng) {
            return Err(Error::InvalidCoordinate(format!(
                "longitude {lng} outside [-180, 180]"
            )));
        }
        let lng = if lng >= 180.0 { lng - 360.0 } else { lng };
        Ok(GeoPoint { lat, lng })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lng(&self) -> f64 {
        self.lng
    }

    /// Point on a sphere of radius [`EARTH_RADIUS_M`], in meters.
    pub fn to_cartesian(&self) -> [f64; 3] {
        let (lat, lng) = (self.lat.to_radians(), self.lng.to_radians());
        [
            EARTH_RADIUS_M * lat.cos() * lng.cos(),
            EARTH_RADIUS_M * lat.cos() * lng.sin(),
            EARTH_RADIUS_M * lat.sin(),
        ]
    }
}

/// A grid cell: `index` is the Hilbert position of the cell at `level`.
///
/// Serialized as `level:index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId {
    level: u8,
    index: u64,
}

impl CellId {
    pub fn new(level: u8, index: u64) -> Result<Self> {
        check_level(level)?;
        if index >= 1u64 << (2 * level as u32) {
            return Err(Error::InvalidCell(format!("{level}:{index}")));
        }
        Ok(CellId { level, index })
    }

    pub fn from_grid(level: u8, col: u64, row: u64) -> Result<Self> {
        check_level(level)?;
        let side = 1u64 << level;
        if col >= side || row >= side {
            return Err(Error::InvalidCell(format!(
                "grid ({col}, {row}) outside level {level}"
            )));
        }
        Ok(CellId {
            level,
            index: hilbert_index(level, col, row),
        })
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    /// `(col, row)` grid coordinates.
    pub fn grid(&self) -> (u64, u64) {
        hilbert_coords(self.level, self.index)
    }

    /// `(lat_min, lat_max, lng_min, lng_max)` of the cell rectangle.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let (col, row) = self.grid();
        let side = (1u64 << self.level) as f64;
        let lat_step = 180.0 / side;
        let lng_step = 360.0 / side;
        let lat0 = -90.0 + row as f64 * lat_step;
        let lng0 = -180.0 + col as f64 * lng_step;
        (lat0, lat0 + lat_step, lng0, lng0 + lng_step)
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.level, self.index)
    }
}

impl FromStr for CellId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidCell(s.to_string());
        let (level, index) = s.trim().split_once(':').ok_or_else(bad)?;
        let level: u8 = level.parse().map_err(|_| bad())?;
        let index: u64 = index.parse().map_err(|_| bad())?;
        CellId::new(level, index).map_err(|_| bad())
    }
}

fn check_level(level: u8) -> Result<()> {
    if (1..=MAX_LEVEL).contains(&level) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "level {level} outside [1, {MAX_LEVEL}]"
        )))
    }
}

/// Hilbert index of `(x, y)` on a `2^order` grid.
pub fn hilbert_index(order: u8, x: u64, y: u64) -> u64 {
    let n = 1u64 << order;
    let (mut x, mut y) = (x, y);
    let mut d = 0u64;
    let mut s = n >> 1;
    while s > 0 {
        let rx = u64::from(x & s > 0);
        let ry = u64::from(y & s > 0);
        d += s * s * ((3 * rx) ^ ry);
        rotate(n, &mut x, &mut y, rx, ry);
        s >>= 1;
    }
    d
}

/// Inverse of [`hilbert_index`].
pub fn hilbert_coords(order: u8, d: u64) -> (u64, u64) {
    let n = 1u64 << order;
    let (mut x, mut y) = (0u64, 0u64);
    let mut t = d;
    let mut s = 1u64;
    while s < n {
        let rx = 1 & (t / 2);
        let ry = 1 & (t ^ rx);
        rotate(s, &mut x, &mut y, rx, ry);
        x += s * rx;
        y += s * ry;
        t /= 4;
        s <<= 1;
    }
    (x, y)
}

fn rotate(n: u64, x: &mut u64, y: &mut u64, rx: u64, ry: u64) {
    if ry == 0 {
        if rx == 1 {
            *x = n - 1 - *x;
            *y = n - 1 - *y;
        }
        std::mem::swap(x, y);
    }
}

pub fn cell_from_point(p: GeoPoint, level: u8) -> Result<CellId> {
    check_level(level)?;
    if !p.lat.is_finite() || !p.lng.is_finite() {
        return Err(Error::InvalidCoordinate(format!(
            "non-finite coordinate ({}, {})",
            p.lat, p.lng
        )));
    }
    let side = 1u64 << level;
    let bin = |frac: f64| -> u64 {
        let v = (frac * side as f64).floor();
        if v <= 0.0 {
            0
        } else {
            (v as u64).min(side - 1)
        }
    };
    let row = bin((p.lat + 90.0) / 180.0);
    let col = bin((p.lng + 180.0) / 360.0);
    CellId::from_grid(level, col, row)
}

pub fn cell_center(c: CellId) -> GeoPoint {
    let (lat0, lat1, lng0, lng1) = c.bounds();
    GeoPoint {
        lat: 0.5 * (lat0 + lat1),
        lng: 0.5 * (lng0 + lng1),
    }
}

/// Great-circle distance in meters.
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lng - a.lng).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}
