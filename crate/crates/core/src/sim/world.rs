use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{stream_rng, SimError};
use crate::geo::LocalFrame;

/// Locations must be reachable from a road node within this distance.
pub const MAX_SNAP_M: f64 = 500.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Home,
    Work,
    Food,
    Gym,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub origin_lat: f64,
    pub origin_lon: f64,
    /// Side of the square study area.
    pub extent_km: f64,
    pub grid_spacing_m: f64,
    /// Max per-axis displacement of grid nodes.
    pub jitter_m: f64,
    pub n_home: usize,
    pub n_work: usize,
    pub n_food: usize,
    pub n_gym: usize,
    /// Std-dev of commercial locations around the center, as a fraction of the extent.
    pub commercial_spread: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self::for_population(10, 37)
    }
}

impl WorldConfig {
    /// Sizes the area and location counts for a population, keeping home
    /// density constant.
    pub fn for_population(n_subpops: usize, n_agents: usize) -> Self {
        let extent_km = (10.0 * (n_agents as f64 / 37.0).sqrt()).max(2.0);
        Self {
            origin_lat: 38.83,
            origin_lon: -77.31,
            extent_km,
            grid_spacing_m: 400.0,
            jitter_m: 80.0,
            n_home: 5 * n_agents,
            n_work: n_subpops,
            n_food: 2 * n_subpops + 4,
            n_gym: n_subpops + 2,
            commercial_spread: 0.15,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.extent_km > 0.0
            && self.grid_spacing_m > 0.0
            && self.jitter_m >= 0.0
            && self.jitter_m < self.grid_spacing_m / 2.0
            && self.commercial_spread > 0.0
            && (-85.0..=85.0).contains(&self.origin_lat)
            && (-180.0..=180.0).contains(&self.origin_lon);
        // worst case: a location in the middle of a grid square whose corners all moved away
        let worst_snap = std::f64::consts::SQRT_2 * (self.grid_spacing_m / 2.0 + self.jitter_m);
        if !ok || worst_snap > MAX_SNAP_M {
            return Err(SimError::InvalidConfig(format!(
                "world geometry invalid (grid {} m, jitter {} m)",
                self.grid_spacing_m, self.jitter_m
            )));
        }
        if self.n_home + self.n_work + self.n_food + self.n_gym == 0 {
            return Err(SimError::InvalidConfig("world has no locations".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub category: Category,
    pub lat: f64,
    pub lon: f64,
    /// Local (east, north) meters.
    pub xy: (f64, f64),
    /// Nearest road node and the length of the access edge to it.
    pub node: usize,
    pub snap_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadGraph {
    pub nodes: Vec<(f64, f64)>,
    pub adj: Vec<Vec<(usize, f64)>>,
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    // min-heap on distance, ties by node id
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl RoadGraph {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    fn add_edge(&mut self, a: usize, b: usize) {
        let w = dist(self.nodes[a], self.nodes[b]);
        self.adj[a].push((b, w));
        self.adj[b].push((a, w));
    }

    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &self.adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == self.nodes.len()
    }

    pub fn nearest_node(&self, p: (f64, f64)) -> (usize, f64) {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, &q)| (i, dist(p, q)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("road graph has nodes")
    }

    /// Dijkstra from `src`: distances and predecessor of each node.
    pub fn shortest_tree(&self, src: usize) -> (Vec<f64>, Vec<usize>) {
        let n = self.nodes.len();
        let mut d = vec![f64::INFINITY; n];
        let mut prev = vec![usize::MAX; n];
        let mut heap = BinaryHeap::new();
        d[src] = 0.0;
        heap.push(HeapItem(0.0, src));
        while let Some(HeapItem(du, u)) = heap.pop() {
            if du > d[u] {
                continue;
            }
            for &(v, w) in &self.adj[u] {
                let nd = du + w;
                if nd < d[v] {
                    d[v] = nd;
                    prev[v] = u;
                    heap.push(HeapItem(nd, v));
                }
            }
        }
        (d, prev)
    }

    /// Node sequence from `src` to `dst` and its length.
    pub fn shortest_path(&self, src: usize, dst: usize) -> Result<(Vec<usize>, f64), SimError> {
        let (d, prev) = self.shortest_tree(src);
        path_from_tree(&d, &prev, src, dst)
    }
}

pub(crate) fn path_from_tree(d: &[f64], prev: &[usize], src: usize, dst: usize) -> Result<(Vec<usize>, f64), SimError> {
    if !d[dst].is_finite() {
        return Err(SimError::Unreachable(src, dst));
    }
    let mut path = vec![dst];
    let mut u = dst;
    while u != src {
        u = prev[u];
        path.push(u);
    }
    path.reverse();
    Ok((path, d[dst]))
}

pub(crate) fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimWorld {
    pub config: WorldConfig,
    pub locations: Vec<Location>,
    pub roads: RoadGraph,
}

impl SimWorld {
    pub fn frame(&self) -> LocalFrame {
        LocalFrame::new(self.config.origin_lat, self.config.origin_lon)
    }

    pub fn indices_of(&self, cat: Category) -> Vec<usize> {
        (0..self.locations.len()).filter(|&i| self.locations[i].category == cat).collect()
    }
}

/// Jittered grid road network with homes spread uniformly and commercial
/// locations concentrated around the center.
pub fn build_world(cfg: &WorldConfig, seed: u64) -> Result<SimWorld, SimError> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, "world");
    let half = cfg.extent_km * 500.0;
    let n_side = (cfg.extent_km * 1000.0 / cfg.grid_spacing_m).ceil() as usize + 1;
    let mut roads = RoadGraph { nodes: Vec::with_capacity(n_side * n_side), adj: vec![Vec::new(); n_side * n_side] };
    for i in 0..n_side {
        for j in 0..n_side {
            let jx = rng.random_range(-cfg.jitter_m..=cfg.jitter_m);
            let jy = rng.random_range(-cfg.jitter_m..=cfg.jitter_m);
            roads.nodes.push((-half + j as f64 * cfg.grid_spacing_m + jx, -half + i as f64 * cfg.grid_spacing_m + jy));
        }
    }
    for i in 0..n_side {
        for j in 0..n_side {
            let u = i * n_side + j;
            if j + 1 < n_side {
                roads.add_edge(u, u + 1);
            }
            if i + 1 < n_side {
                roads.add_edge(u, u + n_side);
            }
        }
    }

    let frame = LocalFrame::new(cfg.origin_lat, cfg.origin_lon);
    let spread = Normal::new(0.0, cfg.commercial_spread * 2.0 * half).expect("positive spread");
    let mut locations = Vec::new();
    let counts = [
        (Category::Home, cfg.n_home),
        (Category::Work, cfg.n_work),
        (Category::Food, cfg.n_food),
        (Category::Gym, cfg.n_gym),
    ];
    for (cat, n) in counts {
        for _ in 0..n {
            let xy = if cat == Category::Home {
                (rng.random_range(-half..half), rng.random_range(-half..half))
            } else {
                (spread.sample(&mut rng).clamp(-half, half), spread.sample(&mut rng).clamp(-half, half))
            };
            let (node, snap_m) = roads.nearest_node(xy);
            if snap_m > MAX_SNAP_M {
                return Err(SimError::InvalidConfig(format!("location snaps {snap_m:.0} m from the road")));
            }
            let (lat, lon) = frame.to_latlon(xy.0, xy.1);
            locations.push(Location { category: cat, lat, lon, xy, node, snap_m });
        }
    }
    Ok(SimWorld { config: cfg.clone(), locations, roads })
}
