use serde::{Deserialize, Serialize};

use super::cell::map_cell;
use super::{PersistentLocation, RawPoint, RawTrajectory, TrajError};
use crate::geo::LocalFrame;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StayConfig {
    pub stay_radius_m: f64,
    pub min_stay_duration: i64,
    pub zoom: u8,
}

impl Default for StayConfig {
    fn default() -> Self {
        Self { stay_radius_m: 150.0, min_stay_duration: 600, zoom: 16 }
    }
}

/// Running cluster of consecutive points with an upper bound on the distance
/// from any member to the centroid.
struct Cluster<'a> {
    xy: &'a [(f64, f64)],
    start: usize,
    end: usize,
    sum: (f64, f64),
    max_dist: f64,
}

impl<'a> Cluster<'a> {
    fn new(xy: &'a [(f64, f64)], start: usize) -> Self {
        Self { xy, start, end: start + 1, sum: xy[start], max_dist: 0.0 }
    }

    fn centroid_with(&self, extra: (f64, f64)) -> (f64, f64) {
        let n = (self.end - self.start + 1) as f64;
        ((self.sum.0 + extra.0) / n, (self.sum.1 + extra.1) / n)
    }

    /// Adds the next point if every member stays within `radius` of the new centroid.
    fn try_extend(&mut self, radius: f64) -> bool {
        let p = self.xy[self.end];
        let n = (self.end - self.start) as f64;
        let old = (self.sum.0 / n, self.sum.1 / n);
        let new = self.centroid_with(p);
        let shift = dist(old, new);
        let dp = dist(p, new);
        if dp > radius {
            return false;
        }
        // The centroid moved by `shift`, so no member moved further than that
        // relative to it; only rescan when the cheap bound is inconclusive.
        let mut bound = self.max_dist + shift;
        if bound > radius {
            bound = self.xy[self.start..self.end].iter().map(|&q| dist(q, new)).fold(0.0, f64::max);
            if bound > radius {
                return false;
            }
        }
        self.max_dist = bound.max(dp);
        self.sum.0 += p.0;
        self.sum.1 += p.1;
        self.end += 1;
        true
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn make_stay(
    frame: &LocalFrame,
    points: &[RawPoint],
    xy: &[(f64, f64)],
    zoom: u8,
) -> Result<PersistentLocation, TrajError> {
    let n = xy.len() as f64;
    let cx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let (lat, lon) = frame.to_latlon(cx, cy);
    Ok(PersistentLocation {
        centroid_lat: lat,
        centroid_lon: lon,
        arrival_t: points[0].t,
        departure_t: points[points.len() - 1].t,
        cell_id: map_cell(lat, lon, zoom)?,
        n_points: points.len(),
    })
}

/// Sliding-anchor stay-point scan.
///
/// From anchor `i`, points are appended while all of them remain within
/// `stay_radius_m` of their running centroid. The run is accepted as a stay when
/// it spans at least `min_stay_duration` seconds, and the scan resumes after it;
/// otherwise the anchor advances by one. Consecutive stays in the same cell
/// separated by less than `min_stay_duration` are merged when the merged points
/// still fit the radius.
pub fn detect_stays(traj: &RawTrajectory, cfg: &StayConfig) -> Result<Vec<PersistentLocation>, TrajError> {
    if cfg.stay_radius_m <= 0.0 || cfg.min_stay_duration < 0 {
        return Err(TrajError::InvalidParameter("stay radius must be positive and min duration non-negative".into()));
    }
    let pts = &traj.points;
    if pts.len() < 2 {
        return Ok(Vec::new());
    }
    if !traj.is_sorted() {
        return Err(TrajError::InvalidParameter(format!(
            "trajectory of {} is not strictly time-sorted",
            traj.agent_id
        )));
    }
    let frame = LocalFrame::new(pts[0].lat, pts[0].lon);
    let xy: Vec<(f64, f64)> = pts.iter().map(|p| frame.to_xy(p.lat, p.lon)).collect();

    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < pts.len() {
        let mut c = Cluster::new(&xy, i);
        while c.end < pts.len() && c.try_extend(cfg.stay_radius_m) {}
        let j = c.end - 1;
        if j > i && pts[j].t - pts[i].t >= cfg.min_stay_duration {
            runs.push((i, c.end));
            i = c.end;
        } else {
            i += 1;
        }
    }

    // Each stay keeps the point runs that formed it; gap points are not members.
    let mut stays: Vec<(Vec<(usize, usize)>, PersistentLocation)> = Vec::with_capacity(runs.len());
    for (s, e) in runs {
        let pl = make_stay(&frame, &pts[s..e], &xy[s..e], cfg.zoom)?;
        if let Some((members, prev)) = stays.last_mut() {
            if prev.cell_id == pl.cell_id && pl.arrival_t - prev.departure_t < cfg.min_stay_duration {
                let merged_xy: Vec<(f64, f64)> = members
                    .iter()
                    .chain(std::iter::once(&(s, e)))
                    .flat_map(|&(a, b)| xy[a..b].iter().copied())
                    .collect();
                let n = merged_xy.len() as f64;
                let cen =
                    (merged_xy.iter().map(|p| p.0).sum::<f64>() / n, merged_xy.iter().map(|p| p.1).sum::<f64>() / n);
                if merged_xy.iter().all(|&q| dist(q, cen) <= cfg.stay_radius_m) {
                    let (lat, lon) = frame.to_latlon(cen.0, cen.1);
                    if map_cell(lat, lon, cfg.zoom)? == prev.cell_id {
                        prev.centroid_lat = lat;
                        prev.centroid_lon = lon;
                        prev.departure_t = pl.departure_t;
                        prev.n_points += pl.n_points;
                        members.push((s, e));
                        continue;
                    }
                }
            }
        }
        stays.push((vec![(s, e)], pl));
    }
    Ok(stays.into_iter().map(|(_, pl)| pl).collect())
}
