use std::collections::BTreeMap;

use stare_core::geo::haversine_m;
use stare_core::sim::{
    build_schedule, build_world, export_dataset, read_labels, simulate_all, spawn_agents, AgentProfile, Category,
    DwellParams, Segment, SimConfig, SimWorld, MAX_SNAP_M,
};
use stare_core::traj::{detect_stays, ingest_csv, StayConfig, DAY_SECONDS};

fn small() -> SimConfig {
    let mut cfg = SimConfig::preset("S").unwrap();
    cfg.n_days = 3;
    cfg
}

fn world_and_agents(cfg: &SimConfig) -> (SimWorld, Vec<AgentProfile>) {
    let world = build_world(&cfg.world, cfg.seed).unwrap();
    let agents = spawn_agents(&world, cfg).unwrap();
    (world, agents)
}

#[test]
fn world_is_connected_and_every_location_snaps() {
    for seed in 0..5 {
        let cfg = SimConfig { seed, ..small() };
        let w = build_world(&cfg.world, seed).unwrap();
        assert!(w.roads.is_connected());
        for loc in &w.locations {
            assert!(loc.snap_m <= MAX_SNAP_M);
            let node = w.roads.nodes[loc.node];
            let d = ((node.0 - loc.xy.0).powi(2) + (node.1 - loc.xy.1).powi(2)).sqrt();
            assert!((d - loc.snap_m).abs() < 1e-6);
        }
        assert_eq!(w.indices_of(Category::Home).len(), cfg.world.n_home);
        assert_eq!(w.indices_of(Category::Work).len(), cfg.world.n_work);
    }
}

#[test]
fn subpopulations_share_work_and_live_close() {
    let cfg = small();
    let (world, agents) = world_and_agents(&cfg);
    let mut by_group: BTreeMap<u32, Vec<&AgentProfile>> = BTreeMap::new();
    for a in &agents {
        by_group.entry(a.subpop_id).or_default().push(a);
    }
    assert_eq!(by_group.len(), cfg.n_subpops);
    let sizes: Vec<usize> = by_group.values().map(Vec::len).collect();
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);

    let homes: Vec<usize> = agents.iter().map(|a| a.home).collect();
    let mut uniq = homes.clone();
    uniq.sort_unstable();
    uniq.dedup();
    assert_eq!(uniq.len(), homes.len(), "one home per agent");

    let works: Vec<usize> = by_group.values().map(|g| g[0].work).collect();
    let mut uw = works.clone();
    uw.sort_unstable();
    uw.dedup();
    assert_eq!(uw.len(), works.len(), "one work place per subpopulation");

    let d = |a: usize, b: usize| {
        let (p, q) = (&world.locations[a], &world.locations[b]);
        haversine_m(p.lat, p.lon, q.lat, q.lon)
    };
    let (mut within, mut nw, mut across, mut na) = (0.0, 0, 0.0, 0);
    for a in &agents {
        for b in &agents {
            if a.agent_id >= b.agent_id {
                continue;
            }
            if a.subpop_id == b.subpop_id {
                assert_eq!(a.work, b.work);
                within += d(a.home, b.home);
                nw += 1;
            } else {
                across += d(a.home, b.home);
                na += 1;
            }
        }
    }
    assert!(within / (nw as f64) < 0.5 * across / (na as f64));
}

#[test]
fn profiles_are_valid_and_rows_stochastic() {
    let cfg = small();
    let (world, agents) = world_and_agents(&cfg);
    for a in &agents {
        a.validate(&world).unwrap();
        assert_eq!(a.allowed_food.len(), cfg.food_per_agent);
        assert_eq!(a.allowed_gym.len(), cfg.gym_per_agent);
        for (i, row) in a.transition_matrix.iter().enumerate() {
            assert_eq!(row[i], 0.0);
        }
    }
}

/// Stationary distribution by power iteration.
fn stationary(p: &[Vec<f64>]) -> Vec<f64> {
    let n = p.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..10_000 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                next[j] += pi[i] * p[i][j];
            }
        }
        // lazy step so periodic chains still converge
        pi = pi.iter().zip(&next).map(|(a, b)| 0.5 * (a + b)).collect();
    }
    pi
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[test]
fn chain_follows_its_transition_matrix() {
    let mut cfg = small();
    let (world, agents) = world_and_agents(&cfg);
    cfg.n_days = 200;
    cfg.sample_interval = 600;
    let short = DwellParams::from_mean(600.0, 0.1);
    let mut a = agents[0].clone();
    a.dwell_params = DwellParams { home: short, work: short, food: short, gym: short };
    let run = build_schedule(&a, &world, &cfg).unwrap();
    let n = a.states.len();
    let mut counts = vec![vec![0usize; n]; n];
    let mut occupancy = vec![0usize; n];
    let mut prev = AgentProfile::HOME;
    let mut day = usize::MAX;
    for v in &run.visits {
        if v.day != day {
            day = v.day;
            prev = AgentProfile::HOME;
        }
        if !v.forced {
            counts[prev][v.state] += 1;
            occupancy[v.state] += 1;
        }
        prev = v.state;
    }
    for (i, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        assert!(total > 1000, "state {i} left only {total} times");
        let emp: Vec<f64> = row.iter().map(|&c| c as f64 / total as f64).collect();
        let d = tv(&emp, &a.transition_matrix[i]);
        assert!(d <= 0.05, "row {i}: TV {d}");
    }
    let total: usize = occupancy.iter().sum();
    let emp: Vec<f64> = occupancy.iter().map(|&c| c as f64 / total as f64).collect();
    let d = tv(&emp, &stationary(&a.transition_matrix));
    assert!(d <= 0.05, "stationary TV {d}");
}

#[test]
fn noiseless_two_state_agent_sits_exactly_on_its_locations() {
    let mut cfg = small();
    cfg.gps_noise_m = 0.0;
    let (world, agents) = world_and_agents(&cfg);
    let src = &agents[0];
    let a = AgentProfile::new(
        "pair".into(),
        0,
        src.home,
        src.work,
        vec![],
        vec![],
        vec![vec![0.0, 1.0], vec![1.0, 0.0]],
        DwellParams::default(),
    );
    let run = build_schedule(&a, &world, &cfg).unwrap();
    let mut checked = 0;
    for p in &run.trajectory.points {
        let seg = run.segments.iter().find(|s| s.span().0 <= p.t && p.t < s.span().1).unwrap();
        if let Segment::Stay { state, .. } = seg {
            let loc = &world.locations[a.states[*state]];
            assert!((p.lat - loc.lat).abs() < 1e-9 && (p.lon - loc.lon).abs() < 1e-9);
            checked += 1;
        }
    }
    assert!(checked > run.trajectory.points.len() / 2);
    let states: Vec<usize> = run.visits.iter().map(|v| v.state).collect();
    assert!(states.contains(&1), "work is visited");
    for day in 0..cfg.n_days {
        let midnight = cfg.start_epoch + day as i64 * DAY_SECONDS;
        let p = run.trajectory.points.iter().find(|p| p.t == midnight).unwrap();
        let home = &world.locations[a.home];
        assert!((p.lat - home.lat).abs() < 1e-9);
    }
}

#[test]
fn identity_chain_never_leaves_home() {
    let mut cfg = small();
    cfg.gps_noise_m = 0.0;
    let (world, agents) = world_and_agents(&cfg);
    let mut a = agents[1].clone();
    let n = a.states.len();
    a.transition_matrix = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let run = build_schedule(&a, &world, &cfg).unwrap();
    let home = &world.locations[a.home];
    for p in &run.trajectory.points {
        assert!((p.lat - home.lat).abs() < 1e-9 && (p.lon - home.lon).abs() < 1e-9);
    }
}

#[test]
fn segments_tile_the_whole_period() {
    let cfg = small();
    let (world, agents) = world_and_agents(&cfg);
    for a in agents.iter().take(5) {
        let run = build_schedule(a, &world, &cfg).unwrap();
        assert_eq!(run.segments[0].span().0, cfg.start_epoch);
        assert_eq!(run.segments.last().unwrap().span().1, cfg.start_epoch + cfg.n_days as i64 * DAY_SECONDS);
        for w in run.segments.windows(2) {
            assert_eq!(w[0].span().1, w[1].span().0);
        }
        assert_eq!(run.trajectory.points.len(), cfg.n_days * 1440);
    }
}

#[test]
fn same_seed_same_output() {
    let cfg = small();
    let a = simulate_all(&cfg).unwrap();
    let b = simulate_all(&cfg).unwrap();
    assert_eq!(a, b);
    let c = simulate_all(&SimConfig { seed: 9, ..cfg }).unwrap();
    assert_ne!(a.trajectories, c.trajectories);
}

#[test]
fn export_roundtrips_through_ingest() {
    let mut cfg = small();
    cfg.n_days = 2;
    let out = simulate_all(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (csv, labels) = export_dataset(dir.path(), &out.trajectories, &out.labels).unwrap();
    let rep = ingest_csv(&csv).unwrap();
    assert_eq!(rep.malformed_rows, 0);
    assert_eq!(rep.duplicate_points, 0);
    assert_eq!(rep.trajectories, out.trajectories);
    assert_eq!(read_labels(&labels).unwrap(), out.labels);
}

#[test]
fn detected_stays_land_on_visited_locations() {
    let cfg = small();
    let out = simulate_all(&cfg).unwrap();
    let (mut near, mut total) = (0, 0);
    for (a, t) in out.agents.iter().zip(&out.trajectories) {
        for s in detect_stays(t, &StayConfig::default()).unwrap() {
            let best = a
                .states
                .iter()
                .map(|&i| {
                    let l = &out.world.locations[i];
                    haversine_m(s.centroid_lat, s.centroid_lon, l.lat, l.lon)
                })
                .fold(f64::INFINITY, f64::min);
            total += 1;
            // 3σ noise bound plus slack for travel points absorbed at the ends
            near += usize::from(best <= 3.0 * cfg.gps_noise_m + 20.0);
        }
    }
    assert!(total > 300);
    let frac = near as f64 / total as f64;
    assert!(frac >= 0.95, "{near}/{total}");
}
