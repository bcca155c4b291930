use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};

use super::agents::{spawn_agents, AgentProfile};
use super::world::{build_world, dist, path_from_tree, SimWorld};
use super::{stream_rng, SimConfig, SimError};
use crate::traj::{RawPoint, RawTrajectory, DAY_SECONDS};

/// Piece of an agent's timeline; consecutive segments tile each day exactly.
#[derive(Clone, Debug, PartialEq)]
pub enum Segment {
    Stay {
        state: usize,
        t0: i64,
        t1: i64,
    },
    Travel {
        from: usize,
        to: usize,
        t0: i64,
        t1: i64,
        /// Polyline in local meters: origin location, road nodes, destination.
        path: Vec<(f64, f64)>,
    },
}

impl Segment {
    pub fn span(&self) -> (i64, i64) {
        match *self {
            Segment::Stay { t0, t1, .. } | Segment::Travel { t0, t1, .. } => (t0, t1),
        }
    }
}

/// One step of the chain. `forced` marks the end-of-day return home that
/// overrides the sampled transition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Visit {
    pub day: usize,
    pub state: usize,
    pub arrival: i64,
    pub forced: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentRun {
    pub trajectory: RawTrajectory,
    pub segments: Vec<Segment>,
    pub visits: Vec<Visit>,
}

struct Paths<'a> {
    world: &'a SimWorld,
    profile: &'a AgentProfile,
    trees: BTreeMap<usize, (Vec<f64>, Vec<usize>)>,
}

impl Paths<'_> {
    fn route(&mut self, from: usize, to: usize) -> Result<(Vec<(f64, f64)>, f64), SimError> {
        let a = &self.world.locations[self.profile.states[from]];
        let b = &self.world.locations[self.profile.states[to]];
        let roads = &self.world.roads;
        let (d, prev) = self.trees.entry(a.node).or_insert_with(|| roads.shortest_tree(a.node));
        let (nodes, _) = path_from_tree(d, prev, a.node, b.node)?;
        let mut pts = Vec::with_capacity(nodes.len() + 2);
        pts.push(a.xy);
        pts.extend(nodes.iter().map(|&n| roads.nodes[n]));
        pts.push(b.xy);
        let len = pts.windows(2).map(|w| dist(w[0], w[1])).sum();
        Ok((pts, len))
    }
}

fn sample_next(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    // rounding left u above the final cumulative sum
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn position_at(seg: &Segment, t: i64, world: &SimWorld, profile: &AgentProfile) -> (f64, f64) {
    match seg {
        Segment::Stay { state, .. } => world.locations[profile.states[*state]].xy,
        Segment::Travel { t0, t1, path, .. } => {
            let total: f64 = path.windows(2).map(|w| dist(w[0], w[1])).sum();
            let frac = (t - t0) as f64 / (t1 - t0) as f64;
            let mut left = frac * total;
            for w in path.windows(2) {
                let l = dist(w[0], w[1]);
                if left <= l && l > 0.0 {
                    let f = left / l;
                    return (w[0].0 + f * (w[1].0 - w[0].0), w[0].1 + f * (w[1].1 - w[0].1));
                }
                left -= l;
            }
            *path.last().expect("non-empty path")
        }
    }
}

/// Builds the day-by-day timeline: each day starts at home at midnight,
/// follows the chain with lognormal dwells and road travel, and heads home
/// once the next stop would end after `return_home_by`; the night is spent at
/// home until midnight.
fn schedule(
    profile: &AgentProfile,
    world: &SimWorld,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Segment>, Vec<Visit>), SimError> {
    const HOME: usize = AgentProfile::HOME;
    let dists: Vec<LogNormal<f64>> = profile
        .states
        .iter()
        .map(|&s| {
            let (mu, sd) = profile.dwell_params.get(world.locations[s].category);
            LogNormal::new(mu, sd).map_err(|e| SimError::InvalidProfile(e.to_string()))
        })
        .collect::<Result<_, _>>()?;
    let dwell = |state: usize, rng: &mut ChaCha8Rng| (dists[state].sample(rng).round() as i64).max(1);
    let mut paths = Paths { world, profile, trees: BTreeMap::new() };
    let mut travel_cache: BTreeMap<(usize, usize), (Vec<(f64, f64)>, i64)> = BTreeMap::new();
    let mut travel = |a: usize, b: usize| -> Result<(Vec<(f64, f64)>, i64), SimError> {
        if let Some(v) = travel_cache.get(&(a, b)) {
            return Ok(v.clone());
        }
        let (path, len) = paths.route(a, b)?;
        let secs = ((len / cfg.speed_mps).ceil() as i64).max(1);
        travel_cache.insert((a, b), (path.clone(), secs));
        Ok((path, secs))
    };

    let mut segments = Vec::new();
    let mut visits = Vec::new();
    for day in 0..cfg.n_days {
        let d0 = cfg.start_epoch + day as i64 * DAY_SECONDS;
        let end = d0 + DAY_SECONDS;
        let cutoff = d0 + cfg.return_home_by;
        let mut cur = HOME;
        let mut stay_start = d0;
        let mut stay_end = d0 + dwell(HOME, rng);
        loop {
            if cur == HOME && stay_end >= cutoff {
                segments.push(Segment::Stay { state: HOME, t0: stay_start, t1: end });
                break;
            }
            let mut next = sample_next(&profile.transition_matrix[cur], rng);
            let d = dwell(next, rng);
            let mut forced = false;
            if next == cur {
                let fits = cur == HOME || stay_end + d + travel(cur, HOME)?.1 <= cutoff;
                if fits {
                    visits.push(Visit { day, state: cur, arrival: stay_end, forced });
                    stay_end += d;
                    continue;
                }
                next = HOME;
                forced = true;
            }
            let (mut path, mut tt) = travel(cur, next)?;
            if next != HOME && stay_end + tt + d + travel(next, HOME)?.1 > cutoff {
                next = HOME;
                forced = true;
                (path, tt) = travel(cur, HOME)?;
            }
            let arrive = stay_end + tt;
            if arrive >= end {
                return Err(SimError::InvalidConfig(format!(
                    "{} cannot get home before midnight; lower return_home_by",
                    profile.agent_id
                )));
            }
            segments.push(Segment::Stay { state: cur, t0: stay_start, t1: stay_end });
            segments.push(Segment::Travel { from: cur, to: next, t0: stay_end, t1: arrive, path });
            visits.push(Visit { day, state: next, arrival: arrive, forced });
            cur = next;
            stay_start = arrive;
            stay_end = if forced { end } else { arrive + d };
        }
    }
    Ok((segments, visits))
}

/// Simulates one agent and keeps the timeline and chain log alongside the points.
pub fn build_schedule(profile: &AgentProfile, world: &SimWorld, cfg: &SimConfig) -> Result<AgentRun, SimError> {
    profile.validate(world)?;
    let mut rng = stream_rng(cfg.seed, &profile.agent_id);
    let (segments, visits) = schedule(profile, world, cfg, &mut rng)?;

    let frame = world.frame();
    let n_samples = cfg.n_days as i64 * DAY_SECONDS / cfg.sample_interval;
    let mut points = Vec::with_capacity(n_samples as usize);
    let mut k = 0;
    for i in 0..n_samples {
        let t = cfg.start_epoch + i * cfg.sample_interval;
        while segments[k].span().1 <= t {
            k += 1;
        }
        let (x, y) = position_at(&segments[k], t, world, profile);
        let (nx, ny) = noise(cfg.gps_noise_m, &mut rng);
        let (lat, lon) = frame.to_latlon(x + nx, y + ny);
        points.push(RawPoint { lat, lon, t });
    }
    Ok(AgentRun { trajectory: RawTrajectory::new(profile.agent_id.clone(), points), segments, visits })
}

/// Isotropic Gaussian offset, redrawn until it lies within three sigma.
fn noise(sigma: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    if sigma == 0.0 {
        return (0.0, 0.0);
    }
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        if x * x + y * y <= 9.0 {
            return (sigma * x, sigma * y);
        }
    }
}

pub fn simulate_agent(profile: &AgentProfile, world: &SimWorld, cfg: &SimConfig) -> Result<RawTrajectory, SimError> {
    Ok(build_schedule(profile, world, cfg)?.trajectory)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOutput {
    pub world: SimWorld,
    pub agents: Vec<AgentProfile>,
    pub trajectories: Vec<RawTrajectory>,
    /// agent id → subpopulation id
    pub labels: BTreeMap<String, u32>,
}

/// World, agents and trajectories for one config.
pub fn simulate_all(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let world = build_world(&cfg.world, cfg.seed)?;
    let agents = spawn_agents(&world, cfg)?;
    let trajectories = agents.iter().map(|a| simulate_agent(a, &world, cfg)).collect::<Result<Vec<_>, _>>()?;
    let labels = agents.iter().map(|a| (a.agent_id.clone(), a.subpop_id)).collect();
    Ok(SimOutput { world, agents, trajectories, labels })
}
