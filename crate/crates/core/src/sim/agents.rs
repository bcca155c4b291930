use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use super::world::{dist, Category, SimWorld};
use super::{agent_id, stream_rng, SimConfig, SimError};

/// Lognormal dwell parameters per category, as (mean, sd) of the log of seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DwellParams {
    pub home: (f64, f64),
    pub work: (f64, f64),
    pub food: (f64, f64),
    pub gym: (f64, f64),
}

impl DwellParams {
    /// Log-space parameters whose lognormal has the given arithmetic mean.
    pub fn from_mean(mean_seconds: f64, log_sd: f64) -> (f64, f64) {
        (mean_seconds.ln() - log_sd * log_sd / 2.0, log_sd)
    }

    pub fn get(&self, cat: Category) -> (f64, f64) {
        match cat {
            Category::Home => self.home,
            Category::Work => self.work,
            Category::Food => self.food,
            Category::Gym => self.gym,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (mu, sd) in [self.home, self.work, self.food, self.gym] {
            if !mu.is_finite() || !(sd >= 0.0) || !sd.is_finite() {
                return Err(SimError::InvalidConfig("dwell parameters must be finite with sd >= 0".into()));
            }
        }
        Ok(())
    }
}

impl Default for DwellParams {
    fn default() -> Self {
        Self {
            home: Self::from_mean(8.0 * 3600.0, 0.25),
            work: Self::from_mean(7.0 * 3600.0, 0.2),
            food: Self::from_mean(3600.0, 0.4),
            gym: Self::from_mean(5400.0, 0.3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: String,
    pub subpop_id: u32,
    /// World location index of each chain state: home, work, foods, gyms.
    pub states: Vec<usize>,
    pub home: usize,
    pub work: usize,
    pub allowed_food: Vec<usize>,
    pub allowed_gym: Vec<usize>,
    /// Row-stochastic, indexed like `states`.
    pub transition_matrix: Vec<Vec<f64>>,
    pub dwell_params: DwellParams,
}

impl AgentProfile {
    /// Chain state holding the home location.
    pub const HOME: usize = 0;

    /// Assembles the state list from home, work, food and gym locations.
    pub fn new(
        agent_id: String,
        subpop_id: u32,
        home: usize,
        work: usize,
        allowed_food: Vec<usize>,
        allowed_gym: Vec<usize>,
        transition_matrix: Vec<Vec<f64>>,
        dwell_params: DwellParams,
    ) -> Self {
        let mut states = vec![home, work];
        states.extend(&allowed_food);
        states.extend(&allowed_gym);
        Self { agent_id, subpop_id, states, home, work, allowed_food, allowed_gym, transition_matrix, dwell_params }
    }

    pub fn validate(&self, world: &SimWorld) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidProfile(format!("{}: {m}", self.agent_id)));
        let n = self.states.len();
        if self.states.iter().any(|&s| s >= world.locations.len()) {
            return bad("state refers to a missing location".into());
        }
        let cat = |i: usize| world.locations[self.states[i]].category;
        if n < 2 || cat(0) != Category::Home || cat(1) != Category::Work {
            return bad("states must start with one home and one work location".into());
        }
        if self.states[2..].iter().any(|&s| {
            let c = world.locations[s].category;
            c == Category::Home || c == Category::Work
        }) {
            return bad("only one home and one work state allowed".into());
        }
        if self.transition_matrix.len() != n || self.transition_matrix.iter().any(|r| r.len() != n) {
            return bad(format!("transition matrix must be {n}x{n}"));
        }
        for (i, row) in self.transition_matrix.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return bad(format!("row {i} is not a probability vector"));
            }
        }
        Ok(())
    }
}

/// Splits `n_agents` over `n_subpops` groups whose sizes differ by at most one;
/// which groups get the extra agent is random.
pub fn subpop_sizes<R: Rng>(n_agents: usize, n_subpops: usize, rng: &mut R) -> Vec<usize> {
    let base = n_agents / n_subpops;
    let mut order: Vec<usize> = (0..n_subpops).collect();
    order.shuffle(rng);
    let mut sizes = vec![base; n_subpops];
    for &i in &order[..n_agents % n_subpops] {
        sizes[i] += 1;
    }
    sizes
}

/// Dirichlet(1) rows with the self-transition removed and the rest renormalized.
fn random_transitions<R: Rng>(n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
            row[i] = 0.0;
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
            row
        })
        .collect()
}

/// `grouping · base + (1 − grouping) · own`, where `base` is restricted to the
/// agent's states (`map` gives each state's index in `base`) and renormalized.
fn blend_transitions(base: &[Vec<f64>], map: &[usize], own: &[Vec<f64>], grouping: f64) -> Vec<Vec<f64>> {
    own.iter()
        .enumerate()
        .map(|(i, own_row)| {
            let restricted: Vec<f64> = map.iter().map(|&j| base[map[i]][j]).collect();
            let s: f64 = restricted.iter().sum();
            if s <= 0.0 {
                return own_row.clone();
            }
            let mut row: Vec<f64> =
                restricted.iter().zip(own_row).map(|(b, o)| grouping * b / s + (1.0 - grouping) * o).collect();
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= total);
            row
        })
        .collect()
}

fn nearest<'a>(
    world: &SimWorld,
    from: (f64, f64),
    candidates: impl Iterator<Item = &'a usize>,
    k: usize,
) -> Vec<usize> {
    let mut c: Vec<(f64, usize)> = candidates.map(|&i| (dist(from, world.locations[i].xy), i)).collect();
    c.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    c.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Groups agents into subpopulations that share a work place and live in one
/// neighborhood, then gives every agent its own random transition matrix.
pub fn spawn_agents(world: &SimWorld, cfg: &SimConfig) -> Result<Vec<AgentProfile>, SimError> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, "agents");
    let homes = world.indices_of(Category::Home);
    if homes.len() < cfg.n_agents {
        return Err(SimError::InsufficientHomes { need: cfg.n_agents, have: homes.len() });
    }
    let mut works = world.indices_of(Category::Work);
    let foods = world.indices_of(Category::Food);
    let gyms = world.indices_of(Category::Gym);
    if works.len() < cfg.n_subpops || foods.len() < cfg.food_per_subpop || gyms.len() < cfg.gym_per_subpop {
        return Err(SimError::InvalidConfig("world lacks commercial locations for every subpopulation".into()));
    }
    works.shuffle(&mut rng);

    let sizes = subpop_sizes(cfg.n_agents, cfg.n_subpops, &mut rng);
    let mut free: BTreeSet<usize> = homes.into_iter().collect();
    let mut agents = Vec::with_capacity(cfg.n_agents);
    for (s, &size) in sizes.iter().enumerate() {
        let work = works[s];
        let pool: Vec<usize> = free.iter().copied().collect();
        let center = pool[rng.random_range(0..pool.len())];
        let my_homes = nearest(world, world.locations[center].xy, free.iter(), size);
        for h in &my_homes {
            free.remove(h);
        }
        let work_xy = world.locations[work].xy;
        let food_pool = nearest(world, work_xy, foods.iter(), cfg.food_per_subpop);
        let gym_pool = nearest(world, work_xy, gyms.iter(), cfg.gym_per_subpop);
        // subpopulation-level chain over home, work and the whole pools
        let mut pool_states = vec![usize::MAX, work];
        pool_states.extend(&food_pool);
        pool_states.extend(&gym_pool);
        let base = random_transitions(pool_states.len(), &mut rng);
        for home in my_homes {
            let mut f: Vec<usize> = food_pool.choose_multiple(&mut rng, cfg.food_per_agent).copied().collect();
            let mut g: Vec<usize> = gym_pool.choose_multiple(&mut rng, cfg.gym_per_agent).copied().collect();
            f.sort_unstable();
            g.sort_unstable();
            let mut map = vec![0, 1];
            for s in f.iter().chain(&g) {
                map.push(pool_states.iter().position(|p| p == s).expect("state from the pool"));
            }
            let own = random_transitions(map.len(), &mut rng);
            let tm = blend_transitions(&base, &map, &own, cfg.grouping);
            agents.push(AgentProfile::new(agent_id(agents.len()), s as u32, home, work, f, g, tm, cfg.dwell));
        }
    }
    Ok(agents)
}
