//! Small spherical-earth helpers.

pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Great-circle distance in meters.
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// Equirectangular tangent frame around an origin; accurate to well under a
/// meter over a few tens of kilometers at mid latitudes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalFrame {
    pub lat0: f64,
    pub lon0: f64,
    m_per_deg_lat: f64,
    m_per_deg_lon: f64,
}

impl LocalFrame {
    pub fn new(lat0: f64, lon0: f64) -> Self {
        let m_per_deg_lat = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        Self { lat0, lon0, m_per_deg_lat, m_per_deg_lon: m_per_deg_lat * lat0.to_radians().cos() }
    }

    /// (east, north) meters.
    pub fn to_xy(&self, lat: f64, lon: f64) -> (f64, f64) {
        ((lon - self.lon0) * self.m_per_deg_lon, (lat - self.lat0) * self.m_per_deg_lat)
    }

    /// (lat, lon) degrees.
    pub fn to_latlon(&self, x: f64, y: f64) -> (f64, f64) {
        (self.lat0 + y / self.m_per_deg_lat, self.lon0 + x / self.m_per_deg_lon)
    }
}
