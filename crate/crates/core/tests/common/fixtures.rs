//! Hand-built trajectory corpora with known tokenizations.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Exp1;
use stare_core::analysis::PredictionMatrix;
use stare_core::sim::stream_rng;
use stare_core::traj::{map_cell, RawPoint, RawTrajectory, TokenizeConfig};

/// Midnight UTC, Monday 2023-01-02.
pub const T0: i64 = 1_672_617_600;
pub const STEP: i64 = 300;

/// Centers of 20 horizontally adjacent zoom-16 cells; their token ids are
/// 1..=20 in this order because the cell index grows with the column.
pub fn row_of_cells() -> Vec<(f64, f64)> {
    let base = map_cell(38.85, -77.30, 16).unwrap();
    let (lat, lon) = base.center();
    let w = 360.0 / 65_536.0;
    (0..20).map(|k| (lat, lon + k as f64 * w)).collect()
}

/// Back-to-back stays `(cell position, hours)` from `start`, one point every
/// `STEP` seconds, no travel in between.
pub fn stays_from(start: i64, plan: &[(usize, f64)], cells: &[(f64, f64)]) -> Vec<RawPoint> {
    let mut t = start;
    let mut out = Vec::new();
    for &(c, h) in plan {
        let end = t + (h * 3600.0) as i64;
        while t < end {
            out.push(RawPoint { lat: cells[c].0, lon: cells[c].1, t });
            t += STEP;
        }
    }
    out
}

/// The worked example: one day visiting cells 1, 2, 5, 3, 1 for 8, 6, 2, 2, 6
/// hours, plus a second agent covering the remaining 16 cells over two days
/// (9 stays on the second day, so sequences are padded to length 9).
pub fn worked_example() -> Vec<RawTrajectory> {
    let cells = row_of_cells();
    let a = stays_from(T0, &[(0, 8.0), (1, 6.0), (4, 2.0), (2, 2.0), (0, 6.0)], &cells);
    let day0: Vec<(usize, f64)> = [3, 5, 6, 7, 8, 9, 10].iter().map(|&c| (c, 1.0)).collect();
    let day1: Vec<(usize, f64)> = (11..20).map(|c| (c, 1.0)).collect();
    let mut b = stays_from(T0, &day0, &cells);
    b.extend(stays_from(T0 + 86_400, &day1, &cells));
    vec![RawTrajectory::new("a", a), RawTrajectory::new("b", b)]
}

/// 30-minute blocks and a 38-hour ceiling: 76 duration tokens, so with 20
/// cells the special ids land on 97, 98, 99.
pub fn worked_example_config() -> TokenizeConfig {
    TokenizeConfig { block_seconds: 1800, max_dwell: 38 * 3600, ..TokenizeConfig::default() }
}

pub fn worked_example_expected() -> Vec<u32> {
    let mut v = vec![97, 1, 2, 5, 3, 1, 0, 0, 0, 0];
    v.extend([98, 36, 32, 24, 24, 32, 0, 0, 0, 0, 99]);
    v
}

pub fn to_csv(trajs: &[RawTrajectory]) -> String {
    let mut s = String::from("agent_id,timestamp,lat,lon\n");
    for t in trajs {
        for p in &t.points {
            s.push_str(&format!("{},{},{},{}\n", t.agent_id, p.t, p.lat, p.lon));
        }
    }
    s
}

/// Noisy planted-partition prediction matrix in shuffled order. Each row keeps
/// 0.4-0.6 of its mass on itself, 0.15-0.35 spread over its own group and the
/// rest over everyone else, with exponential weights inside each part.
pub fn planted_matrix(sizes: &[usize], seed: u64) -> (PredictionMatrix, Vec<usize>) {
    let mut rng = stream_rng(seed, "planted");
    let mut group: Vec<usize> = sizes.iter().enumerate().flat_map(|(g, &n)| vec![g; n]).collect();
    group.shuffle(&mut rng);
    let n = group.len();
    let values = (0..n)
        .map(|i| {
            let own = rng.random_range(0.4..0.6);
            let within = rng.random_range(0.15..0.35);
            let w: Vec<f64> = (0..n).map(|_| rng.sample(Exp1)).collect();
            let part =
                |same: bool| (0..n).filter(|&j| j != i && (group[j] == group[i]) == same).map(|j| w[j]).sum::<f64>();
            let (ws, wo) = (part(true), part(false));
            (0..n)
                .map(|j| match (j == i, group[j] == group[i]) {
                    (true, _) => own,
                    (false, true) => within * w[j] / ws,
                    (false, false) => (1.0 - own - within) * w[j] / wo,
                })
                .collect()
        })
        .collect();
    (PredictionMatrix { labels: (0..n).collect(), values }, group)
}
