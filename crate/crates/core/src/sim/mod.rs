//! Pattern-of-life simulator: agents hop between home, work, food and gym
//! locations following a per-agent Markov chain and drive between them on a
//! synthetic road grid.

mod agents;
mod export;
mod simulate;
mod world;

pub use agents::{spawn_agents, subpop_sizes, AgentProfile, DwellParams};
pub use export::{export_dataset, read_labels, write_csv, write_labels, CSV_NAME, LABELS_NAME};
pub use simulate::{build_schedule, simulate_agent, simulate_all, AgentRun, Segment, SimOutput, Visit};
pub use world::{build_world, Category, Location, RoadGraph, SimWorld, WorldConfig, MAX_SNAP_M};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::traj::DAY_SECONDS;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("not enough home locations: need {need}, have {have}")]
    InsufficientHomes { need: usize, have: usize },
    #[error("no road path between nodes {0} and {1}")]
    Unreachable(usize, usize),
    #[error("invalid agent profile: {0}")]
    InvalidProfile(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_subpops: usize,
    /// Total agent count, split as evenly as possible over subpopulations.
    pub n_agents: usize,
    pub n_days: usize,
    pub sample_interval: i64,
    pub gps_noise_m: f64,
    pub speed_mps: f64,
    pub seed: u64,
    /// Timestamp of the first simulated midnight (UTC).
    pub start_epoch: i64,
    /// Seconds after midnight by which agents must be heading home.
    pub return_home_by: i64,
    pub world: WorldConfig,
    /// Size of the food / gym pools shared by one subpopulation.
    pub food_per_subpop: usize,
    pub gym_per_subpop: usize,
    /// How many pool entries each agent may visit.
    pub food_per_agent: usize,
    pub gym_per_agent: usize,
    /// Weight of the shared subpopulation chain in each agent's transition
    /// matrix; 0 gives independent agents, 1 gives siblings the same chain.
    pub grouping: f64,
    pub dwell: DwellParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::preset("S").expect("preset S exists")
    }
}

impl SimConfig {
    /// Dataset presets by name: S, M, L, XL.
    pub fn preset(name: &str) -> Option<Self> {
        let (n_subpops, n_agents) = match name.to_ascii_uppercase().as_str() {
            "S" => (10, 37),
            "M" => (20, 348),
            "L" => (30, 1288),
            // roughly 440M points; hours of simulation and tens of GB of CSV
            "XL" => (50, 10_909),
            _ => return None,
        };
        Some(Self {
            n_subpops,
            n_agents,
            n_days: 28,
            sample_interval: 60,
            gps_noise_m: 10.0,
            speed_mps: 11.0,
            seed: 0,
            start_epoch: 1_672_617_600, // Monday 2023-01-02
            return_home_by: 22 * 3600,
            world: WorldConfig::for_population(n_subpops, n_agents),
            food_per_subpop: 4,
            gym_per_subpop: 2,
            food_per_agent: 3,
            gym_per_agent: 1,
            grouping: 0.9,
            dwell: DwellParams::default(),
        })
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.n_subpops == 0 || self.n_agents < self.n_subpops {
            return bad("need at least one subpopulation and one agent per subpopulation");
        }
        if self.n_days == 0 || self.sample_interval <= 0 || DAY_SECONDS % self.sample_interval != 0 {
            return bad("n_days must be positive and sample_interval must divide one day");
        }
        if !(self.gps_noise_m >= 0.0) || !(self.speed_mps > 0.0) {
            return bad("gps_noise_m must be non-negative and speed_mps positive");
        }
        if self.return_home_by <= 0 || self.return_home_by >= DAY_SECONDS {
            return bad("return_home_by must fall inside the day");
        }
        if self.food_per_agent == 0
            || self.gym_per_agent == 0
            || self.food_per_agent > self.food_per_subpop
            || self.gym_per_agent > self.gym_per_subpop
        {
            return bad("per-agent food/gym counts must be in 1..=pool size");
        }
        if self.world.n_work < self.n_subpops {
            return bad("need one work location per subpopulation");
        }
        if self.world.n_food < self.food_per_subpop || self.world.n_gym < self.gym_per_subpop {
            return bad("fewer food/gym locations than one subpopulation's pool");
        }
        if !(0.0..=1.0).contains(&self.grouping) {
            return bad("grouping must be in [0, 1]");
        }
        self.dwell.validate()?;
        self.world.validate()
    }
}

/// Deterministic RNG for a named stream, independent of evaluation order.
pub fn stream_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

pub fn agent_id(index: usize) -> String {
    format!("agent_{index:05}")
}
