use std::collections::HashSet;
use std::sync::Arc;

use da3_gridworld::{
    read_trace, wanderer_policy, Action, AgentKind, Cell, EnvConfig, GridMap, ObsProfile, Pos, TraceRecord,
    TraceWriter, World,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn three_rooms() -> Arc<GridMap> {
    Arc::new(GridMap::builtin("three-rooms").unwrap())
}

fn simple() -> Arc<GridMap> {
    Arc::new(GridMap::builtin("simple").unwrap())
}

fn random_actions(n: usize, rng: &mut ChaCha8Rng) -> Vec<Action> {
    (0..n).map(|_| Action::ALL[rng.gen_range(0..4)]).collect()
}

fn check_state(w: &World) {
    let objects = w.object_positions();
    assert_eq!(objects.len(), w.config().objects);
    assert_eq!(w.object_count(), objects.len());
    for p in &objects {
        assert_eq!(w.map().cell(*p), Cell::ObjectArea);
    }
    let mut seen = HashSet::new();
    for (i, p) in w.positions().iter().enumerate() {
        assert!(!w.map().is_wall(*p));
        assert!(seen.insert(*p), "two agents share {p}");
        if w.kind(i) == AgentKind::Learner {
            assert!(!w.has_object(*p), "object under learner {i}");
        }
    }
}

#[test]
fn three_rooms_reset_places_six_agents_and_25_objects() {
    let w = World::reset(three_rooms(), EnvConfig::default(), 9).unwrap();
    assert_eq!(w.n_agents(), 6);
    assert_eq!(w.object_positions().len(), 25);
    assert_eq!(w.t(), 0);
    let spawns: HashSet<Pos> = w.map().spawn_points().iter().map(|s| s.pos).collect();
    let placed: HashSet<Pos> = w.positions().iter().copied().collect();
    assert_eq!(spawns, placed);
}

#[test]
fn reset_is_deterministic_per_seed() {
    let a = World::reset(three_rooms(), EnvConfig::default(), 77).unwrap();
    let b = World::reset(three_rooms(), EnvConfig::default(), 77).unwrap();
    assert_eq!(a, b);
    let c = World::reset(three_rooms(), EnvConfig::default(), 78).unwrap();
    assert_ne!(a.object_positions(), c.object_positions());
}

#[test]
fn no_overlap_over_1000_resets() {
    let mut overlaps = 0;
    for seed in 0..1000 {
        for map in [three_rooms(), simple()] {
            let w = World::reset(map, EnvConfig::default(), seed).unwrap();
            check_state(&w);
            overlaps += w.positions().iter().filter(|p| w.has_object(**p)).count();
        }
    }
    assert_eq!(overlaps, 0);
}

#[test]
fn wanderers_keep_their_spawn_class() {
    let map = simple();
    for seed in 0..50 {
        let w = World::reset(map.clone(), EnvConfig::default(), seed).unwrap();
        for i in 4..6 {
            assert_eq!(w.kind(i), AgentKind::Wanderer);
            let spawn_kinds: Vec<_> = map
                .spawn_points()
                .iter()
                .filter(|s| s.pos == w.positions()[i])
                .map(|s| s.kind)
                .collect();
            assert_eq!(spawn_kinds, vec![AgentKind::Wanderer]);
        }
    }
}

#[test]
fn single_agent_examples() {
    let map = Arc::new(GridMap::builtin("tiny5").unwrap());
    let cfg = EnvConfig {
        objects: 3,
        ..Default::default()
    };
    let mut w = World::from_layout(
        map.clone(),
        cfg,
        vec![Pos::new(1, 1)],
        &[Pos::new(1, 2), Pos::new(3, 3), Pos::new(2, 3)],
        0,
    )
    .unwrap();
    let out = w.step(&[Action::Left]).unwrap();
    assert_eq!(out.rewards, vec![-1.0]);
    assert_eq!(w.positions()[0], Pos::new(1, 1));
    let out = w.step(&[Action::Down]).unwrap();
    assert_eq!(out.rewards, vec![1.0]);
    assert_eq!(w.object_positions().len(), 3);
    assert!(!w.has_object(Pos::new(1, 2)));
    check_state(&w);
}

fn corridor() -> Arc<GridMap> {
    Arc::new(GridMap::parse("#######\n#0...1#\n#ooooo#\n#######\n").unwrap())
}

#[test]
fn converging_agents_resolve_by_processing_order() {
    let mut orders = HashSet::new();
    for seed in 0..64 {
        let mut w = World::from_layout(
            corridor(),
            EnvConfig::default(),
            vec![Pos::new(2, 1), Pos::new(4, 1)],
            &[],
            seed,
        )
        .unwrap();
        let out = w.step(&[Action::Right, Action::Left]).unwrap();
        let (first, second) = (out.order[0], out.order[1]);
        orders.insert(out.order.clone());
        assert_eq!(w.positions()[first], Pos::new(3, 1));
        assert_eq!(
            w.positions()[second],
            if second == 0 { Pos::new(2, 1) } else { Pos::new(4, 1) }
        );
        assert!(out.events[second].agent_collision && !out.events[first].agent_collision);
        assert_eq!(out.rewards[second], -1.0);
        assert_eq!(out.rewards[first], 0.0);
    }
    assert_eq!(orders.len(), 2, "both processing orders should occur");
}

#[test]
fn swapping_agents_are_both_blocked() {
    let mut orders = HashSet::new();
    for seed in 0..64 {
        let start = vec![Pos::new(2, 1), Pos::new(3, 1)];
        let mut w = World::from_layout(corridor(), EnvConfig::default(), start.clone(), &[], seed).unwrap();
        let out = w.step(&[Action::Right, Action::Left]).unwrap();
        orders.insert(out.order.clone());
        assert_eq!(w.positions(), &start[..]);
        assert!(out.events.iter().all(|e| e.agent_collision));
        assert_eq!(out.rewards, vec![-1.0, -1.0]);
    }
    assert_eq!(orders.len(), 2);
}

#[test]
fn following_agent_moves_when_leader_goes_first() {
    for seed in 0..32 {
        let mut w = World::from_layout(
            corridor(),
            EnvConfig::default(),
            vec![Pos::new(2, 1), Pos::new(3, 1)],
            &[],
            seed,
        )
        .unwrap();
        let out = w.step(&[Action::Right, Action::Right]).unwrap();
        if out.order == [1, 0] {
            assert_eq!(w.positions(), &[Pos::new(3, 1), Pos::new(4, 1)]);
            assert_eq!(out.rewards, vec![0.0, 0.0]);
        } else {
            assert_eq!(w.positions(), &[Pos::new(2, 1), Pos::new(4, 1)]);
            assert_eq!(out.rewards, vec![-1.0, 0.0]);
        }
    }
}

#[test]
fn conservation_and_reward_accounting_over_10k_steps() {
    for map in [three_rooms(), simple()] {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000);
        let mut w = World::reset(map.clone(), EnvConfig::default(), 1).unwrap();
        let n = w.n_agents();
        let mut episode_reward = 0.0;
        let (mut collections, mut collisions) = (0usize, 0usize);
        let mut episodes = 0;
        for step in 0..10_000 {
            let out = w.step(&random_actions(n, &mut rng)).unwrap();
            check_state(&w);
            for (i, (r, e)) in out.rewards.iter().zip(&out.events).enumerate() {
                let expected = if e.collected {
                    1.0
                } else if e.agent_collision || e.wall_collision {
                    -1.0
                } else {
                    0.0
                };
                assert_eq!(*r, expected);
                assert!(!(e.collected && (e.agent_collision || e.wall_collision)));
                assert!(!(e.agent_collision && e.wall_collision));
                if w.kind(i) == AgentKind::Wanderer {
                    assert!(!e.collected);
                }
                episode_reward += r;
                collections += usize::from(e.collected);
                collisions += usize::from(e.agent_collision || e.wall_collision);
            }
            if out.done {
                assert_eq!(episode_reward, collections as f64 - collisions as f64);
                episode_reward = 0.0;
                collections = 0;
                collisions = 0;
                episodes += 1;
                w = World::reset(map.clone(), EnvConfig::default(), 2 + step as u64).unwrap();
            }
        }
        assert_eq!(episodes, 50);
    }
}

fn trace(seed: u64) -> Vec<u8> {
    let map = simple();
    let mut w = World::reset(map, EnvConfig::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut out = TraceWriter::new(Vec::new());
    while !w.is_done() {
        let mut actions = random_actions(4, &mut rng);
        for i in 4..6 {
            actions.push(wanderer_policy(&w, i, &mut rng).unwrap());
        }
        let o = w.step(&actions).unwrap();
        out.write(&TraceRecord::new(
            w.t(),
            &actions,
            w.positions(),
            w.object_positions(),
            &o,
        ))
        .unwrap();
    }
    out.into_inner()
}

#[test]
fn identical_inputs_give_identical_traces() {
    let a = trace(5);
    assert_eq!(a, trace(5));
    assert_ne!(a, trace(6));
    let records = read_trace(&a[..]).unwrap();
    assert_eq!(records.len(), 200);
    assert_eq!(records[199].t, 200);
}

#[test]
fn wanderer_action_frequencies_are_uniform() {
    let w = World::reset(simple(), EnvConfig::default(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(100_000);
    let mut counts = [0usize; 4];
    let draws = 100_000;
    for _ in 0..draws {
        counts[wanderer_policy(&w, 4, &mut rng).unwrap().index()] += 1;
    }
    for c in counts {
        let f = c as f64 / draws as f64;
        assert!((f - 0.25).abs() <= 0.01, "frequency {f}");
    }
    let mut r1 = ChaCha8Rng::seed_from_u64(3);
    let mut r2 = ChaCha8Rng::seed_from_u64(3);
    let s1: Vec<_> = (0..50).map(|_| wanderer_policy(&w, 5, &mut r1).unwrap()).collect();
    let s2: Vec<_> = (0..50).map(|_| wanderer_policy(&w, 5, &mut r2).unwrap()).collect();
    assert_eq!(s1, s2);
}

#[test]
fn wanderer_leaves_objects_in_place() {
    let map = simple();
    let mut positions: Vec<Pos> = map.spawn_points().iter().map(|s| s.pos).collect();
    positions[4] = Pos::new(5, 5);
    let objects = [Pos::new(6, 5), Pos::new(10, 10)];
    let mut w = World::from_layout(map, EnvConfig::default(), positions, &objects, 0).unwrap();
    let out = w
        .step(&[
            Action::Up,
            Action::Up,
            Action::Up,
            Action::Up,
            Action::Right,
            Action::Up,
        ])
        .unwrap();
    assert_eq!(w.positions()[4], Pos::new(6, 5));
    assert!(!out.events[4].collected);
    assert_eq!(out.rewards[4], 0.0);
    assert_eq!(w.object_positions(), objects.to_vec());
    // stepping off again leaves it there too
    w.step(&[
        Action::Up,
        Action::Up,
        Action::Up,
        Action::Up,
        Action::Right,
        Action::Up,
    ])
    .unwrap();
    assert!(w.has_object(Pos::new(6, 5)));
}

#[test]
fn exp2_profile_has_one_channel_per_agent() {
    let w = World::reset(simple(), EnvConfig::default(), 4).unwrap();
    for size in [7, 9] {
        let obs = w.encode_observation(2, size, ObsProfile::Exp2).unwrap();
        assert_eq!((obs.channels(), obs.size()), (8, size));
        let r = size / 2;
        assert_eq!(obs.get(2, r, r), 1);
        for c in (0..6).filter(|&c| c != 2) {
            assert_eq!(obs.get(c, r, r), 0);
        }
    }
}

/// Agent 0 looks at agent 1, one object, and a wall that casts a shadow.
#[test]
fn observation_with_neighbour_object_and_shadow() {
    let mut rows: Vec<Vec<char>> = (0..13)
        .map(|y| {
            (0..13)
                .map(|x| {
                    if x == 0 || y == 0 || x == 12 || y == 12 {
                        '#'
                    } else {
                        'o'
                    }
                })
                .collect()
        })
        .collect();
    rows[1][1] = '0';
    rows[1][2] = '1';
    rows[6][8] = '#';
    let text: Vec<String> = rows.into_iter().map(|r| r.into_iter().collect()).collect();
    let map = Arc::new(GridMap::parse(&text.join("\n")).unwrap());
    let w = World::from_layout(
        map,
        EnvConfig::default(),
        vec![Pos::new(6, 6), Pos::new(5, 4)],
        &[Pos::new(7, 7)],
        0,
    )
    .unwrap();
    let obs = w.encode_observation(0, 7, ObsProfile::Exp1).unwrap();
    let ones = |c: usize, v: i8| -> Vec<(usize, usize)> {
        (0..7)
            .flat_map(|r| (0..7).map(move |k| (r, k)))
            .filter(|&(r, k)| obs.get(c, r, k) == v)
            .collect()
    };
    assert_eq!(ones(0, 1), vec![(1, 2), (3, 3)]);
    assert_eq!(ones(1, 1), vec![(4, 4)]);
    // the wall two cells to the right, and the single cell behind it
    assert_eq!(ones(2, -1), vec![(3, 5), (3, 6)]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn observations_respect_channel_alphabets(seed in 0u64..10_000, steps in 0usize..40, exp2 in any::<bool>(), big in any::<bool>()) {
        let map = if exp2 { simple() } else { three_rooms() };
        let profile = if exp2 { ObsProfile::Exp2 } else { ObsProfile::Exp1 };
        let size = if big { 9 } else { 7 };
        let mut w = World::reset(map, EnvConfig::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..steps {
            let a = random_actions(w.n_agents(), &mut rng);
            w.step(&a).unwrap();
        }
        let r = size / 2;
        for agent in 0..w.n_agents() {
            let obs = w.encode_observation(agent, size, profile).unwrap();
            let blocked = obs.blocked_channel();
            for c in 0..obs.channels() {
                for row in 0..size {
                    for col in 0..size {
                        let v = obs.get(c, row, col);
                        if c == blocked {
                            prop_assert!(v == 0 || v == -1);
                        } else {
                            prop_assert!(v == 0 || v == 1);
                            if v == 1 {
                                prop_assert_eq!(obs.get(blocked, row, col), 0);
                            }
                        }
                    }
                }
            }
            let self_channel = if exp2 { agent } else { 0 };
            prop_assert_eq!(obs.get(self_channel, r, r), 1);
        }
    }
}
