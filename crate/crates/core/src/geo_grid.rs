//! Geographic primitives: points, great-circle distance, and the rectangular
//! cell partition whose 3x3 windows bound every neighborhood query in the
//! crate.
//!
//! Cell membership is half-open on both axes (`lower <= x < lower + delta`),
//! with cell corners computed as `origin + index * delta` so that every point
//! lands in exactly one cell even when the division is inexact in floating
//! point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in meters used by every distance in the crate.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// A validated WGS84-style coordinate. Altitude is carried but not used by
/// any distance yet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint", into = "RawPoint")]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
    alt: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawPoint {
    lat: f64,
    lon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alt: Option<f64>,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = Error;

    fn try_from(raw: RawPoint) -> Result<Self> {
        let p = GeoPoint::new(raw.lat, raw.lon)?;
        match raw.alt {
            Some(alt) => p.with_alt(alt),
            None => Ok(p),
        }
    }
}

impl From<GeoPoint> for RawPoint {
    fn from(p: GeoPoint) -> Self {
        RawPoint {
            lat: p.lat,
            lon: p.lon,
            alt: p.alt,
        }
    }
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::data(format!("latitude {lat} outside [-90, 90]")));
        }
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::data(format!("longitude {lon} outside [-180, 180]")));
        }
        Ok(GeoPoint { lat, lon, alt: None })
    }

    pub fn with_alt(mut self, alt: f64) -> Result<Self> {
        if !alt.is_finite() {
            return Err(Error::data("altitude must be finite"));
        }
        self.alt = Some(alt);
        Ok(self)
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn alt(&self) -> Option<f64> {
        self.alt
    }

    /// Point displaced by `north_m` / `east_m` meters on a local tangent plane.
    /// Latitude is clamped at the poles and longitude wrapped into range.
    pub fn offset_m(&self, north_m: f64, east_m: f64) -> GeoPoint {
        let lat = (self.lat + (north_m / EARTH_RADIUS_M).to_degrees()).clamp(-90.0, 90.0);
        let cos_lat = self.lat.to_radians().cos().max(1e-12);
        let mut lon = self.lon + (east_m / (EARTH_RADIUS_M * cos_lat)).to_degrees();
        if lon > 180.0 {
            lon -= 360.0;
        } else if lon < -180.0 {
            lon += 360.0;
        }
        GeoPoint {
            lat,
            lon,
            alt: self.alt,
        }
    }
}

/// Haversine great-circle distance in meters.
pub fn distance(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let s1 = (dphi / 2.0).sin();
    let s2 = (dlambda / 2.0).sin();
    let h = (s1 * s1 + phi1.cos() * phi2.cos() * s2 * s2).clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_M * h.sqrt().atan2((1.0 - h).sqrt())
}

/// Selectable distance functions. Only haversine is used by default; the
/// Manhattan variant measures north-south plus east-west legs at the mean
/// latitude.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Haversine,
    Manhattan,
}

impl DistanceMetric {
    pub fn distance(self, a: &GeoPoint, b: &GeoPoint) -> f64 {
        match self {
            DistanceMetric::Haversine => distance(a, b),
            DistanceMetric::Manhattan => {
                let mean_lat = ((a.lat + b.lat) / 2.0).to_radians();
                let mut dlon = (b.lon - a.lon).abs();
                if dlon > 180.0 {
                    dlon = 360.0 - dlon;
                }
                EARTH_RADIUS_M
                    * ((b.lat - a.lat).abs().to_radians() + mean_lat.cos() * dlon.to_radians())
            }
        }
    }
}

/// Integer coordinates of a grid cell; `i` counts latitude rows, `j`
/// longitude columns, both relative to the grid origin.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct CellIndex {
    pub i: i64,
    pub j: i64,
}

impl CellIndex {
    pub fn new(i: i64, j: i64) -> Self {
        CellIndex { i, j }
    }
}

/// Offsets of the eight surrounding cells, counter-clockwise starting from
/// the lower-left neighbor.
const NEIGHBOR_OFFSETS: [(i64, i64); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
];

/// The eight cells surrounding `c`, counter-clockwise. No wrap-around is
/// applied; use [`GridConfig::window`] for grid-aware neighborhoods.
pub fn neighbor_cells(c: CellIndex) -> [CellIndex; 8] {
    NEIGHBOR_OFFSETS.map(|(di, dj)| CellIndex::new(c.i + di, c.j + dj))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct GridConfig {
    delta_lat: f64,
    delta_lon: f64,
    origin: GeoPoint,
}

#[derive(Serialize, Deserialize)]
struct RawGrid {
    delta_lat: f64,
    delta_lon: f64,
    #[serde(default = "default_origin")]
    origin: GeoPoint,
}

fn default_origin() -> GeoPoint {
    GeoPoint {
        lat: -90.0,
        lon: -180.0,
        alt: None,
    }
}

impl TryFrom<RawGrid> for GridConfig {
    type Error = Error;

    fn try_from(raw: RawGrid) -> Result<Self> {
        GridConfig::new(raw.delta_lat, raw.delta_lon, raw.origin)
    }
}

impl From<GridConfig> for RawGrid {
    fn from(g: GridConfig) -> Self {
        RawGrid {
            delta_lat: g.delta_lat,
            delta_lon: g.delta_lon,
            origin: g.origin,
        }
    }
}

impl GridConfig {
    pub fn new(delta_lat: f64, delta_lon: f64, origin: GeoPoint) -> Result<Self> {
        for (name, d) in [("delta_lat", delta_lat), ("delta_lon", delta_lon)] {
            if !d.is_finite() || d <= 0.0 {
                return Err(Error::config(format!("{name} must be > 0, got {d}")));
            }
        }
        if delta_lon > 360.0 || delta_lat > 180.0 {
            return Err(Error::config("cell deltas larger than the globe"));
        }
        Ok(GridConfig {
            delta_lat,
            delta_lon,
            origin,
        })
    }

    /// Square cells of `delta` degrees anchored at (-90, -180).
    pub fn square(delta: f64) -> Result<Self> {
        GridConfig::new(delta, delta, default_origin())
    }

    pub fn delta_lat(&self) -> f64 {
        self.delta_lat
    }

    pub fn delta_lon(&self) -> f64 {
        self.delta_lon
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    /// Number of longitude columns when they tile the full circle exactly;
    /// `None` means no wrap-around at the antimeridian.
    pub fn columns(&self) -> Option<i64> {
        let n = 360.0 / self.delta_lon;
        let rounded = n.round();
        ((n - rounded).abs() < 1e-9 * n.max(1.0) && rounded >= 1.0).then_some(rounded as i64)
    }

    fn lat_corner(&self, i: i64) -> f64 {
        self.origin.lat + i as f64 * self.delta_lat
    }

    fn lon_corner(&self, j: i64) -> f64 {
        self.origin.lon + j as f64 * self.delta_lon
    }

    /// Lower-left corner of a cell, in degrees.
    pub fn corner(&self, c: CellIndex) -> (f64, f64) {
        (self.lat_corner(c.i), self.lon_corner(c.j))
    }

    pub fn cell_of(&self, p: &GeoPoint) -> CellIndex {
        let i = half_open_index(p.lat, |i| self.lat_corner(i), self.origin.lat, self.delta_lat);
        let lon = match self.columns() {
            Some(_) => {
                let mut off = (p.lon - self.origin.lon).rem_euclid(360.0);
                if off >= 360.0 {
                    off = 0.0;
                }
                self.origin.lon + off
            }
            None => p.lon,
        };
        let mut j = half_open_index(lon, |j| self.lon_corner(j), self.origin.lon, self.delta_lon);
        if let Some(cols) = self.columns() {
            j = j.rem_euclid(cols);
        }
        CellIndex::new(i, j)
    }

    fn wrap(&self, c: CellIndex) -> CellIndex {
        match self.columns() {
            Some(cols) => CellIndex::new(c.i, c.j.rem_euclid(cols)),
            None => c,
        }
    }

    /// The cell itself followed by its eight neighbors, with longitude
    /// wrap-around applied and duplicates removed.
    pub fn window(&self, c: CellIndex) -> Vec<CellIndex> {
        let mut out = Vec::with_capacity(9);
        out.push(self.wrap(c));
        for n in neighbor_cells(c) {
            let n = self.wrap(n);
            if !out.contains(&n) {
                out.push(n);
            }
        }
        out
    }

    /// Corner-to-opposite-corner distance of a cell.
    pub fn cell_diagonal_m(&self, c: CellIndex) -> f64 {
        let (lat, lon) = self.corner(c);
        let a = GeoPoint {
            lat: lat.clamp(-90.0, 90.0),
            lon,
            alt: None,
        };
        let b = GeoPoint {
            lat: (lat + self.delta_lat).clamp(-90.0, 90.0),
            lon: lon + self.delta_lon,
            alt: None,
        };
        distance(&a, &b)
    }

    /// Largest radius `r` such that every point within `r` meters of a point
    /// with `|lat| <= max_abs_lat` lies inside that point's 3x3 window.
    pub fn max_window_radius_m(&self, max_abs_lat: f64) -> f64 {
        let north_south = EARTH_RADIUS_M * self.delta_lat.to_radians();
        let phi = (max_abs_lat.abs() + self.delta_lat).min(90.0).to_radians();
        let dlon = self.delta_lon.to_radians().min(std::f64::consts::FRAC_PI_2);
        // distance from a point to the meridian `dlon` away
        let east_west = EARTH_RADIUS_M * (phi.cos() * dlon.sin()).clamp(0.0, 1.0).asin();
        north_south.min(east_west)
    }
}

fn half_open_index(x: f64, corner: impl Fn(i64) -> f64, origin: f64, delta: f64) -> i64 {
    let mut i = ((x - origin) / delta).floor() as i64;
    while x < corner(i) {
        i -= 1;
    }
    while x >= corner(i + 1) {
        i += 1;
    }
    i
}
