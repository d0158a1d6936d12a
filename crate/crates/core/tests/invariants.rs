use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Map;
use socialgen::guidance::{elite_distribution, temperature};
use socialgen::metrics::{engagement, ttc_kinematic, DEFAULT_TTC_THRESHOLD};
use socialgen::proposal::{Intent, Proposal};
use socialgen::proposer::{describe_scene, interaction_potential, parse_proposal_text, select_pair, PairWeights};
use socialgen::scenario::{parse_scenario, scenario_to_json, Lane, LaneMap, Scenario, Trajectory};
use socialgen::social_reward::{intrinsic_components, IntrinsicWeights, RewardBreakdown, SocialParams};
use socialgen::Vec2;

fn lanes() -> LaneMap {
    let lane = |id: &str, y: f64| Lane {
        id: id.into(),
        centerline: vec![Vec2::new(-100.0, y), Vec2::new(300.0, y)],
        width: 3.5,
        speed_limit: 13.9,
        successors: vec![],
    };
    LaneMap { lanes: vec![lane("L0", 0.0), lane("L1", 3.5)] }
}

/// Agents driving straight lines; `specs` are (x, y, speed, heading).
fn scenario_from(specs: &[(f64, f64, f64, f64)], steps: usize) -> Scenario {
    let trajectories = specs
        .iter()
        .enumerate()
        .map(|(n, &(x, y, v, h))| {
            let d = Vec2::from_heading(h) * (v * 0.1);
            let pts: Vec<Vec2> = (0..steps).map(|k| Vec2::new(x, y) + d * k as f64).collect();
            Trajectory::from_positions(format!("car_{n}"), &pts, 0.1, h)
        })
        .collect();
    Scenario { trajectories, map: lanes(), metadata: Map::new() }
}

fn agent_spec() -> impl Strategy<Value = (f64, f64, f64, f64)> {
    (-50.0f64..150.0, -5.0f64..8.0, 0.0f64..20.0, -PI..PI)
}

fn intent_for(kind: usize, other: &str, x: f64) -> Intent {
    match kind {
        0 => Intent::LaneChangeLeft { target_lane: "L1".into() },
        1 => Intent::LaneChangeRight { target_lane: "L0".into() },
        2 => Intent::MaintainSpeed { target_speed: x.abs() },
        3 => Intent::Yield { yield_to: other.into() },
        _ => Intent::ReachPoint { goal: Vec2::new(x, -x / 3.0) },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn reward_total_is_closed_form(
        lambda in 0.0f64..5.0, phi in -PI / 2.0..=PI / 2.0,
        is in -1.0f64..=0.0, io in -1.0f64..=0.0, e in -3.0f64..3.0,
    ) {
        let b = RewardBreakdown::combine(SocialParams::new(lambda, phi).unwrap(), is, io, e);
        let want = lambda * (phi.cos() * is + phi.sin() * io) + e;
        prop_assert!((b.total - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn intrinsic_components_are_bounded(
        a in agent_spec(), b in agent_spec(),
        wiggle in prop::collection::vec(-1.5f64..1.5, 30),
    ) {
        let mut s = scenario_from(&[a, b], 30);
        // a jittery path for agent 0 stresses the comfort terms
        let pts: Vec<Vec2> = s.trajectories[0].positions().iter().zip(&wiggle).map(|(p, w)| *p + Vec2::new(*w, -*w)).collect();
        s.trajectories[0] = Trajectory::from_positions("car_0", &pts, 0.1, a.3);
        let w = IntrinsicWeights::default();
        let c = intrinsic_components(&s.trajectories[0], &[&s.trajectories[1]], &s.map, &w);
        for v in [c.lane, c.speed, c.heading, c.comfort, c.safety] {
            prop_assert!((-1.0..=0.0).contains(&v), "{c:?}");
        }
        let total = c.total(&w);
        prop_assert!((-1.0..=0.0).contains(&total));
    }

    #[test]
    fn elite_weights_form_a_distribution(
        rewards in prop::collection::vec(-1e3f64..1e3, 1..64), tau in 0.0f64..100.0,
    ) {
        let q = elite_distribution(&rewards, tau);
        prop_assert!((q.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(q.weights.iter().all(|w| (0.0..=1.0).contains(w)));
        for i in 0..rewards.len() {
            for j in 0..rewards.len() {
                if rewards[i] > rewards[j] {
                    prop_assert!(q.weights[i] >= q.weights[j]);
                }
            }
        }
        let h = q.entropy();
        prop_assert!(h >= -1e-12 && h <= (rewards.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn temperature_is_monotone(steps in 1usize..200, lo in 0.0f64..10.0, span in 0.0f64..100.0) {
        prop_assert_eq!(temperature(steps, steps, lo, lo + span), lo);
        prop_assert_eq!(temperature(0, steps, lo, lo + span), lo + span);
        for t in 1..=steps {
            prop_assert!(temperature(t - 1, steps, lo, lo + span) >= temperature(t, steps, lo, lo + span));
        }
    }

    #[test]
    fn proposal_render_parses_back(
        a in agent_spec(), b in agent_spec(), swap in any::<bool>(),
        ki in 0usize..5, kj in 0usize..5, x in -100.0f64..100.0, rationale in "[a-z ,.]{0,40}",
    ) {
        let s = scenario_from(&[a, b], 12);
        let (i, j) = if swap { ("car_1", "car_0") } else { ("car_0", "car_1") };
        let p = Proposal {
            agent_i: i.into(),
            agent_j: j.into(),
            intent_i: intent_for(ki, j, x),
            intent_j: intent_for(kj, i, -x),
            rationale,
            backend: None,
        };
        let back = parse_proposal_text(&format!("Here you go:\n```json\n{}\n```", p.render()), &s).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn select_pair_is_the_argmax(specs in prop::collection::vec(agent_spec(), 2..6)) {
        let s = scenario_from(&specs, 12);
        let desc = describe_scene(&s, 5.0);
        let w = PairWeights::default();
        let mut best: Option<(f64, (String, String))> = None;
        for i in 0..specs.len() {
            for j in i + 1..specs.len() {
                let p = desc.pair(&format!("car_{i}"), &format!("car_{j}")).unwrap();
                let score = interaction_potential(p, &w);
                if best.as_ref().is_none_or(|(b, _)| score > *b) {
                    best = Some((score, (p.agent_i.clone(), p.agent_j.clone())));
                }
            }
        }
        prop_assert_eq!(select_pair(&desc, &w).unwrap(), best.unwrap().1);
    }

    #[test]
    fn scenario_json_round_trips(specs in prop::collection::vec(agent_spec(), 1..4), steps in 2usize..30) {
        let mut s = scenario_from(&specs, steps);
        s.metadata.insert("note".into(), serde_json::json!({"k": [1, 2.5, "x"]}));
        let text = scenario_to_json(&s);
        let back = parse_scenario(&text).unwrap();
        prop_assert_eq!(&back.metadata, &s.metadata);
        prop_assert_eq!(back.map.lanes.len(), s.map.lanes.len());
        for (p, q) in back.trajectories.iter().zip(&s.trajectories) {
            prop_assert_eq!(&p.agent_id, &q.agent_id);
            prop_assert_eq!(p.states.len(), q.states.len());
            for (u, v) in p.states.iter().zip(&q.states) {
                // files keep 9 significant digits
                prop_assert!(u.position.distance(v.position) <= 1e-8 * v.position.norm().max(1.0));
                prop_assert!((u.speed - v.speed).abs() <= 1e-8 * v.speed.max(1.0));
            }
        }
        // rendering is a fixed point after one trip
        prop_assert_eq!(scenario_to_json(&back), text);
    }

    #[test]
    fn positions_only_trajectories_validate(
        start in agent_spec(), jitter in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 2..40),
    ) {
        let mut p = Vec2::new(start.0, start.1);
        let pts: Vec<Vec2> = jitter.iter().map(|&(dx, dy)| { p = p + Vec2::new(dx, dy); p }).collect();
        let mut s = scenario_from(&[start], pts.len());
        s.trajectories[0] = Trajectory::from_positions("car_0", &pts, 0.1, start.3);
        prop_assert!(s.validate().is_ok(), "{:?}", s.validate());
        prop_assert!(parse_scenario(&scenario_to_json(&s)).is_ok());
    }

    #[test]
    fn ttc_is_symmetric_and_shift_invariant(
        px in -50.0f64..50.0, py in -50.0f64..50.0, vx in -15.0f64..15.0, vy in -15.0f64..15.0,
        ux in -15.0f64..15.0, uy in -15.0f64..15.0, sx in -100.0f64..100.0,
    ) {
        let (p, v, u) = (Vec2::new(px, py), Vec2::new(vx, vy), Vec2::new(ux, uy));
        let a = ttc_kinematic(Vec2::ZERO, u, p, v, 4.0);
        let b = ttc_kinematic(p, v, Vec2::ZERO, u, 4.0);
        let c = ttc_kinematic(Vec2::new(sx, 0.0), u, p + Vec2::new(sx, 0.0), v, 4.0);
        prop_assert!(a >= 0.0);
        prop_assert!(a == b || (a - b).abs() <= 1e-9 * a.max(1.0));
        prop_assert!(a == c || (a - c).abs() <= 1e-9 * a.max(1.0));
    }
}

/// First grid time in [0, horizon] at which the discs overlap.
fn brute_force_ttc(p: Vec2, v: Vec2, q: Vec2, u: Vec2, radius: f64, dt: f64, horizon: f64) -> f64 {
    let steps = (horizon / dt) as usize;
    for k in 0..=steps {
        let t = k as f64 * dt;
        if (q + u * t).distance(p + v * t) <= radius {
            return t;
        }
    }
    f64::INFINITY
}

#[test]
fn ttc_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (dt, horizon) = (1e-4, 12.0);
    let mut hits = 0;
    for n in 0..1000 {
        let p = Vec2::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
        let v = Vec2::new(rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0));
        let q = Vec2::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
        let u = Vec2::new(rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0));
        let analytic = ttc_kinematic(p, v, q, u, 4.0);
        let oracle = brute_force_ttc(p, v, q, u, 4.0, dt, horizon);
        if oracle.is_finite() {
            hits += 1;
            assert!((analytic - oracle).abs() <= 1e-3, "case {n}: {analytic} vs {oracle}");
        } else {
            assert!(analytic > horizon - 1e-3, "case {n}: analytic {analytic} inside the horizon");
        }
    }
    assert!(hits > 100, "only {hits} colliding geometries");
}

#[test]
fn rear_end_example() {
    let t = ttc_kinematic(Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0), Vec2::new(40.0, 0.0), Vec2::ZERO, 4.0);
    assert!((t - 3.6).abs() < 1e-12, "{t}");
    assert!((brute_force_ttc(Vec2::ZERO, Vec2::new(10.0, 0.0), Vec2::new(40.0, 0.0), Vec2::ZERO, 4.0, 1e-4, 10.0) - 3.6).abs() <= 1e-3);
    assert!(engagement(t, DEFAULT_TTC_THRESHOLD));
}
