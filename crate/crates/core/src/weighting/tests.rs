use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;

fn draws(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_mkrw(&mut rng, 5, 5.0, 4.0).0).collect()
}

/// Two-sample Kolmogorov–Smirnov statistic.
fn ks_statistic(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn mkrw_singleton_is_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        assert_eq!(sample_mkrw(&mut rng, 1, 5.0, 4.0).0, vec![5.0]);
    }
}

#[test]
fn mkrw_sums_to_k_and_has_unit_means() {
    let d = draws(100_000, 1);
    for w in &d {
        assert!((w.iter().sum::<f64>() - 5.0).abs() <= 1e-9);
        assert!(w.iter().all(|x| *x >= 0.0));
    }
    for i in 0..5 {
        let mean = d.iter().map(|w| w[i]).sum::<f64>() / d.len() as f64;
        assert!((mean - 1.0).abs() <= 0.05, "λ{i} mean {mean}");
    }
}

#[test]
fn mkrw_components_are_exchangeable() {
    let d = draws(100_000, 2);
    let n = d.len() as f64;
    // 1% critical value of the two-sample KS test with equal sizes
    let critical = 1.628 * (2.0 / n).sqrt();
    for (i, j) in [(0, 1), (2, 4), (1, 3)] {
        let mut a: Vec<f64> = d.iter().map(|w| w[i]).collect();
        let mut b: Vec<f64> = d.iter().map(|w| w[j]).collect();
        let stat = ks_statistic(&mut a, &mut b);
        assert!(stat < critical, "λ{i} vs λ{j}: D = {stat}, critical {critical}");
    }
}

#[test]
fn mkrw_inflates_noise_variance() {
    let d = draws(100_000, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise: Vec<f64> = (0..d.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let var = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
    };
    let weighted: Vec<f64> = d.iter().zip(&noise).map(|(w, x)| w[0] * x).collect();
    assert!(var(&weighted) > var(&noise), "{} vs {}", var(&weighted), var(&noise));
}

#[test]
fn uncertainty_examples() {
    assert_eq!(teacher_uncertainty(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
    assert!((teacher_uncertainty(&[1.0, 0.0], &[0.5, 0.5]) - std::f64::consts::LN_2).abs() <= 1e-15);
    assert_eq!(teacher_uncertainty(&[1.0, 0.0], &[0.0, 1.0]), -(PROB_FLOOR.ln()));
    let mut last = f64::INFINITY;
    for k in 1..=100 {
        let p = k as f64 / 100.0;
        let u = teacher_uncertainty(&[1.0, 0.0], &[p, 1.0 - p]);
        assert!(u <= last);
        last = u;
    }
}

#[test]
fn transfer_weight_examples() {
    assert!((transfer_weight(1.0, 0.7) - 0.4965853037914095).abs() <= 1e-12);
    for beta in [0.0, 0.3, 0.5, 0.7, 0.9] {
        assert_eq!(transfer_weight(0.0, beta), 1.0);
    }
    for u in [0.0, 0.5, 3.0, 10.0] {
        assert_eq!(transfer_weight(u, 0.0), 1.0);
    }
}

#[test]
fn combine_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::scalar(0.5));
    let b = tape.constant(Tensor::scalar(7.0));
    let out = combine(&mut tape, &[vec![Some(a), Some(b)]], &TransferWeights(vec![2.0, 0.0]), &SampleWeights(vec![1.0])).unwrap();
    assert_eq!(tape.scalar(out), 1.0);

    let c = tape.constant(Tensor::scalar(1.5));
    let rows = vec![vec![Some(a), Some(b), None], vec![Some(c), None, Some(b)]];
    let out = combine(&mut tape, &rows, &TransferWeights(vec![1.0; 3]), &SampleWeights(vec![1.0, 1.0])).unwrap();
    assert_eq!(tape.scalar(out), (0.5 + 7.0 + 1.5 + 7.0) / 2.0);

    let err = combine(&mut tape, &rows, &TransferWeights(vec![1.0; 2]), &SampleWeights(vec![1.0, 1.0]));
    assert!(matches!(err, Err(WeightingError::Mismatch { .. })));
    let err = combine(&mut tape, &rows, &TransferWeights(vec![1.0; 3]), &SampleWeights(vec![1.0]));
    assert!(matches!(err, Err(WeightingError::Mismatch { .. })));
}

fn param_losses(tape: &mut Tape, store: &ParamStore) -> (Var, Var) {
    let x = store.bind(tape, 0, true);
    let y = store.bind(tape, 1, true);
    let x2 = tape.mul(x, x).unwrap();
    let y3 = tape.scale(y, 3.0).unwrap();
    let y3 = tape.mul(y3, x).unwrap();
    (tape.sum(x2).unwrap(), tape.sum(y3).unwrap())
}

#[test]
fn zero_gamma_removes_a_samples_gradient() {
    let mut store = ParamStore::new();
    store.add("x", Tensor::vector(vec![0.4, -1.0]));
    store.add("y", Tensor::vector(vec![2.0, 0.5]));
    let mut tape = Tape::new();
    let (lx, ly) = param_losses(&mut tape, &store);
    let rows = vec![vec![Some(lx), None], vec![None, Some(ly)]];
    let out = combine(&mut tape, &rows, &TransferWeights(vec![1.0, 1.0]), &SampleWeights(vec![1.0, 0.0])).unwrap();
    let g = tape.backward(out).unwrap();
    assert_eq!(store.flatten_grads(&g)[2..], [0.0, 0.0]);
}

#[test]
fn disabling_equals_zero_weight() {
    let mut store = ParamStore::new();
    store.add("x", Tensor::vector(vec![0.4, -1.0]));
    store.add("y", Tensor::vector(vec![2.0, 0.5]));
    let grads = |rows: fn(Var, Var) -> Vec<Option<Var>>, lambda: Vec<f64>| {
        let mut tape = Tape::new();
        let (lx, ly) = param_losses(&mut tape, &store);
        let out = combine(&mut tape, &[rows(lx, ly)], &TransferWeights(lambda), &SampleWeights(vec![0.8])).unwrap();
        (tape.scalar(out), store.flatten_grads(&tape.backward(out).unwrap()))
    };
    let disabled = grads(|x, _| vec![Some(x), None], vec![1.3, 1.0]);
    let zeroed = grads(|x, y| vec![Some(x), Some(y)], vec![1.3, 0.0]);
    assert_eq!(disabled, zeroed);
}

#[test]
fn baseline_weight_examples() {
    assert_eq!(baseline_weights(&WeightingStrategy::Equal, 5, None).unwrap().0, vec![1.0; 5]);
    let eq = baseline_weights(&WeightingStrategy::GradAdjust, 5, Some(&[0.3; 5])).unwrap().0;
    assert!(eq.iter().all(|w| (w - 1.0).abs() <= 1e-12));
    let w = baseline_weights(&WeightingStrategy::GradAdjust, 2, Some(&[1.0, 3.0])).unwrap().0;
    assert!((w[0] / w[1] - 3.0).abs() <= 1e-6);
    assert!((w.iter().sum::<f64>() - 2.0).abs() <= 1e-12);
    assert!(matches!(
        baseline_weights(&WeightingStrategy::GradAdjust, 2, None),
        Err(WeightingError::MissingGradients)
    ));
    assert!(WeightingStrategy::Mkrw { k: 0.0, tau: 1.0 }.validate().is_err());
}

#[test]
fn learned_weights_are_nonnegative_and_trainable() {
    let lw = LearnedWeights::new(5, &mut ChaCha8Rng::seed_from_u64(1));
    let mut tape = Tape::new();
    let vars = lw.bind(&mut tape, true).unwrap();
    let values = lw.values().0;
    for (v, want) in vars.iter().zip(&values) {
        assert!((tape.scalar(*v) - want).abs() <= 1e-15);
        assert!(*want > 0.0);
    }
    let losses: Vec<Option<Var>> = (0..5).map(|i| Some(tape.constant(Tensor::scalar(i as f64 + 1.0)))).collect();
    let out = combine_with(&mut tape, &[losses], &vars, &SampleWeights(vec![1.0])).unwrap();
    let g = tape.backward(out).unwrap();
    assert_eq!(g.get(lw.params.key(0)).unwrap().len(), 5);
}

proptest! {
    #[test]
    fn mkrw_normalized_for_any_parameters(seed in 0u64..10_000, m in 1usize..9, k in 0.1f64..20.0, tau in 0.1f64..10.0) {
        let w = sample_mkrw(&mut ChaCha8Rng::seed_from_u64(seed), m, k, tau).0;
        prop_assert!((w.iter().sum::<f64>() - k).abs() <= 1e-9);
        prop_assert!(w.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn gamma_decreasing_in_uncertainty(u in 0.0f64..10.0, du in 1e-6f64..5.0, beta in 1e-3f64..1.0) {
        let (a, b) = (transfer_weight(u, beta), transfer_weight(u + du, beta));
        prop_assert!(b < a);
        prop_assert!(a > 0.0 && a <= 1.0);
    }
}
