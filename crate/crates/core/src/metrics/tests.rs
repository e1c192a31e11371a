use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::env::{generate_scene, SceneNode, SceneParams};

/// Line 0 —2m— 1 —1m— 2 —1m— 3.
fn line() -> SceneGraph {
    let xs = [0.0, 2.0, 3.0, 4.0];
    let nodes = xs.iter().enumerate().map(|(id, &x)| SceneNode { id, pos: [x, 0.0], landmark: 0 }).collect();
    SceneGraph::from_parts(0, 1, nodes, vec![(0, 1), (1, 2), (2, 3)]).unwrap()
}

fn result(scene: &SceneGraph, path: &[usize], goal: usize, stopped: bool) -> EpisodeResult {
    EpisodeResult::new(scene, path.to_vec(), goal, stopped).unwrap()
}

fn random_walk(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> EpisodeResult {
    let start = rng.gen_range(0..scene.len());
    let goal = rng.gen_range(0..scene.len());
    let mut path = vec![start];
    let mut stopped = false;
    for _ in 0..15 {
        if rng.gen_bool(0.2) {
            stopped = true;
            break;
        }
        let nb = scene.neighbors(*path.last().unwrap());
        path.push(nb[rng.gen_range(0..nb.len())]);
    }
    EpisodeResult::new(scene, path, goal, stopped).unwrap()
}

#[test]
fn navigation_error_examples() {
    let s = line();
    assert_eq!(navigation_error(&result(&s, &[0, 1], 1, true)), 0.0);
    assert_eq!(navigation_error(&result(&s, &[0], 1, true)), 2.0);
    let a = result(&s, &[3], 0, true);
    let b = result(&s, &[0], 3, true);
    assert_eq!(navigation_error(&a), navigation_error(&b));
}

#[test]
fn success_requires_stop_and_is_inclusive() {
    let s = line();
    assert_eq!(success(&result(&s, &[0, 1, 2], 2, true), 1.0), 1.0);
    assert_eq!(success(&result(&s, &[0, 1, 2], 2, false), 1.0), 0.0);
    let boundary = result(&s, &[0, 1, 2], 3, true);
    assert_eq!(navigation_error(&boundary), 1.0);
    assert_eq!(success(&boundary, 1.0), 1.0);
    assert_eq!(success(&boundary, 0.999), 0.0);
}

#[test]
fn oracle_success_sees_passed_goal() {
    let s = line();
    let r = result(&s, &[0, 1, 2, 3], 1, true);
    assert_eq!(oracle_success(&r, 0.5), 1.0);
    assert_eq!(success(&r, 0.5), 0.0);
    let good = result(&s, &[0, 1], 1, true);
    assert_eq!(oracle_success(&good, 0.5), success(&good, 0.5));
}

#[test]
fn spl_examples() {
    let s = line();
    assert_eq!(spl(&result(&s, &[0, 1, 2], 2, true), 1.0), 1.0);
    assert_eq!(spl(&result(&s, &[0, 1], 3, true), 0.5), 0.0);
    let detour = result(&s, &[1, 2, 3, 2], 2, true);
    assert_eq!((detour.shortest_length, detour.executed_length), (1.0, 3.0));
    assert!((spl(&detour, 0.5) - 1.0 / 3.0).abs() <= 1e-15);
    let doubled = EpisodeResult { executed_length: 4.0, ..result(&s, &[0, 1], 1, true) };
    assert_eq!(spl(&doubled, 0.5), 0.5);
    assert_eq!(spl(&result(&s, &[2], 2, true), 1.0), 1.0);
    assert_eq!(spl(&result(&s, &[2], 2, false), 1.0), 0.0);
}

#[test]
fn invalid_results_are_rejected() {
    let s = line();
    assert!(EpisodeResult::new(&s, vec![], 0, true).is_err());
    assert!(EpisodeResult::new(&s, vec![0, 2], 1, true).is_err());
    assert!(EpisodeResult::new(&s, vec![0], 9, true).is_err());
}

#[test]
fn aggregate_examples_and_oracle() {
    let s = line();
    let perfect = result(&s, &[0, 1], 1, true);
    let one = aggregate(std::slice::from_ref(&perfect), 1.0).unwrap();
    assert_eq!((one.sr, one.spl, one.osr, one.ne, one.n_episodes), (1.0, 1.0, 1.0, 0.0, 1));
    let far = result(&s, &[3], 0, true);
    assert_eq!(aggregate(&[perfect, far], 1.0).unwrap().sr, 0.5);
    assert_eq!(aggregate(&[], 1.0), Err(MetricsError::Empty));

    let scene = generate_scene(4, &SceneParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let results: Vec<EpisodeResult> = (0..100).map(|_| random_walk(&scene, &mut rng)).collect();
    let agg = aggregate(&results, 1.0).unwrap();
    let (mut sr, mut sp, mut ne, mut os) = (0.0, 0.0, 0.0, 0.0);
    for r in &results {
        let d = r.final_distance;
        let ok = if r.stopped && d <= 1.0 { 1.0 } else { 0.0 };
        sr += ok;
        let longest = r.executed_length.max(r.shortest_length);
        sp += if longest == 0.0 { ok } else { ok * r.shortest_length / longest };
        ne += d;
        os += if r.closest_distance <= 1.0 { 1.0 } else { 0.0 };
    }
    let n = results.len() as f64;
    for (got, want) in [(agg.sr, sr / n), (agg.spl, sp / n), (agg.ne, ne / n), (agg.osr, os / n)] {
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

proptest! {
    #[test]
    fn metric_ordering_holds_per_episode(seed in 0u64..500) {
        let scene = generate_scene(seed % 7, &SceneParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let r = random_walk(&scene, &mut rng);
            let (p, s, o) = (spl(&r, 1.0), success(&r, 1.0), oracle_success(&r, 1.0));
            prop_assert!(0.0 <= p && p <= s && s <= o && o <= 1.0);
            prop_assert!(navigation_error(&r) >= 0.0);
            prop_assert_eq!(navigation_error(&r) == 0.0, r.stop_node() == r.goal);
        }
    }
}
