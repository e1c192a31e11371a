use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::finite_diff_check;
use crate::env::{generate_scene, observe, ObservationModel, Pose, SceneParams, Vocabulary};
use crate::model::{AgentModel, ModelConfig, NavState};

fn config(hidden: usize) -> ModelConfig {
    ModelConfig {
        hidden,
        text_layers: 1,
        pano_layers: 1,
        cross_layers: 1,
        heads: 4,
        vocab_size: Vocabulary::new(4).size(),
        obs_dim: 6,
        max_text_len: 8,
        horizon: 15,
    }
}

/// Runs both models one step on the same observation, teacher frozen.
fn mirrored_step(teacher: &AgentModel, student: &AgentModel, tape: &mut Tape) -> (MetaKnowledge, MetaKnowledge) {
    let params = SceneParams { n_nodes: 10, area_side: 5.0, n_landmarks: 4, ..SceneParams::default() };
    let scene = generate_scene(2, &params).unwrap();
    let obs = ObservationModel::new(1, 4, 6, 0.1);
    let pano = observe(&scene, &obs, 0, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let tokens = [5, 9, Vocabulary::END, Vocabulary::PAD];
    let positions = [0, 1, 2, 3];
    let pose = Pose { node: 0, heading: 0.0 };
    let tt = teacher.encode_text(tape, false, &tokens, &positions).unwrap();
    let st = student.encode_text(tape, true, &tokens, &positions).unwrap();
    let (mut ts, mut ss) = (NavState::new(pose), NavState::new(pose));
    let to = teacher.step(tape, false, &scene, &mut ts, &pano, &tt).unwrap();
    let so = student.step(tape, true, &scene, &mut ss, &pano, &st).unwrap();
    assert_eq!(to.actions, so.actions);
    (to.meta, so.meta)
}

#[test]
fn attention_loss_examples() {
    let mut tape = Tape::new();
    let t = tape.constant(Tensor::new(vec![1, 1, 2], vec![0.5, 0.5]).unwrap());
    let s = tape.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap());
    let l = attn_transfer_loss(&mut tape, t, s, Ability::Visual, 0).unwrap();
    assert!((tape.scalar(l) - 0.25).abs() <= 1e-15);
    let r = attn_transfer_loss(&mut tape, s, t, Ability::Visual, 0).unwrap();
    assert_eq!(tape.scalar(l), tape.scalar(r));
    let z = attn_transfer_loss(&mut tape, t, t, Ability::Visual, 0).unwrap();
    assert_eq!(tape.scalar(z), 0.0);

    let wrong = tape.constant(Tensor::new(vec![1, 2, 1], vec![1.0, 1.0]).unwrap());
    let err = attn_transfer_loss(&mut tape, t, wrong, Ability::Global, 7).unwrap_err();
    assert!(matches!(err, MakdError::Shape { ability: Ability::Global, step: 7, .. }));
    assert!(err.to_string().contains("Global") && err.to_string().contains("step 7"));
}

#[test]
fn feature_loss_examples() {
    let mut tape = Tape::new();
    let ident = AdapterSet::identity(3);
    let f = tape.constant(Tensor::new(vec![1, 3], vec![0.2, -1.0, 4.0]).unwrap());
    let l = feat_transfer_loss(&mut tape, f, f, &ident, true, Ability::Text, 0).unwrap();
    assert_eq!(tape.scalar(l), 0.0);

    let one = AdapterSet::identity(1);
    let t = tape.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
    let s = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
    let l = feat_transfer_loss(&mut tape, t, s, &one, true, Ability::Local, 0).unwrap();
    assert_eq!(tape.scalar(l), 1.0);

    let none = AdapterSet { adapters: vec![None; 4], ..AdapterSet::new(2, 3, 0) };
    let s2 = tape.constant(Tensor::zeros(vec![1, 2]));
    let err = feat_transfer_loss(&mut tape, f, s2, &none, true, Ability::Visual, 0).unwrap_err();
    assert!(matches!(err, MakdError::MissingAdapter { student: 2, teacher: 3, .. }));
}

#[test]
fn feature_loss_adapter_gradient_matches_finite_differences() {
    let base = AdapterSet::new(3, 4, 9);
    let w = base.params.index_of("adapter.g.w").unwrap();
    let point = base.params.get(w).data().to_vec();
    let err = finite_diff_check(
        |x| {
            let mut set = base.clone();
            set.params.get_mut(w).data_mut().copy_from_slice(x);
            let mut tape = Tape::new();
            let t = tape.constant(Tensor::new(vec![1, 4], vec![0.3, -0.2, 1.1, 0.5]).unwrap());
            let s = tape.constant(Tensor::new(vec![1, 3], vec![1.5, -0.7, 0.4]).unwrap());
            let l = feat_transfer_loss(&mut tape, t, s, &set, true, Ability::Global, 0).unwrap();
            let g = tape.backward(l)?;
            Ok((tape.scalar(l), g.get(set.params.key(w)).unwrap().to_vec()))
        },
        &point,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn logit_loss_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![0.3, -1.2, 2.0]));
    let l = logit_transfer_loss(&mut tape, a, a, 2.0, 0).unwrap();
    assert!(tape.scalar(l).abs() <= 1e-15);

    // softened distributions approach uniform, so the KL itself vanishes;
    // the τ²-scaled loss tends to half the variance of the logit gaps
    let b = tape.constant(Tensor::vector(vec![1.0, 0.0, -3.0]));
    let tau = 1e4;
    let l = logit_transfer_loss(&mut tape, a, b, tau, 0).unwrap();
    assert!(tape.scalar(l) / (tau * tau) <= 1e-6);
    let gaps = [0.3 - 1.0, -1.2 - 0.0, 2.0 + 3.0];
    let mean = gaps.iter().sum::<f64>() / 3.0;
    let half_var = gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / 6.0;
    assert!((tape.scalar(l) - half_var).abs() <= 1e-3, "{} vs {half_var}", tape.scalar(l));

    let t = tape.constant(Tensor::vector(vec![std::f64::consts::LN_2, 0.0]));
    let s = tape.constant(Tensor::vector(vec![0.0, 0.0]));
    let l = logit_transfer_loss(&mut tape, t, s, 1.0, 0).unwrap();
    let want = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
    assert!((tape.scalar(l) - want).abs() <= 1e-12);
    assert!((tape.scalar(l) - 0.0566).abs() <= 1e-4);

    let err = logit_transfer_loss(&mut tape, a, s, 1.0, 3).unwrap_err();
    assert!(matches!(err, MakdError::Mirroring { step: 3, teacher: 3, student: 2 }));
}

#[test]
fn identical_models_have_zero_transfer_loss() {
    let model = AgentModel::new(config(8), 1).unwrap();
    let mut tape = Tape::new();
    let (t, s) = mirrored_step(&model, &model, &mut tape);
    let set = makd_losses(&mut tape, &t, &s, &AdapterSet::identity(8), true, &DistillConfig::default(), 0).unwrap();
    for v in set.values(&tape) {
        assert!(v.abs() < 1e-10, "{v}");
    }
    assert!(set.b.is_some() && set.v.attn.is_some() && set.g.feat.is_some());
}

#[test]
fn ablation_flags_zero_exactly_the_disabled_terms() {
    let teacher = AgentModel::new(config(16), 1).unwrap();
    let student = AgentModel::new(config(8), 2).unwrap();
    let adapters = AdapterSet::new(8, 16, 3);
    let mut tape = Tape::new();
    let (t, s) = mirrored_step(&teacher, &student, &mut tape);

    let none = DistillConfig { abilities: AbilityFlags::NONE, ..DistillConfig::default() };
    let set = makd_losses(&mut tape, &t, &s, &adapters, true, &none, 0).unwrap();
    assert_eq!(set.values(&tape), [0.0; 5]);
    assert!(set.per_ability(&mut tape).unwrap().iter().all(Option::is_none));

    let no_g = DistillConfig { abilities: AbilityFlags::ALL.with(Ability::Global, false), ..DistillConfig::default() };
    let set = makd_losses(&mut tape, &t, &s, &adapters, true, &no_g, 0).unwrap();
    let v = set.values(&tape);
    assert_eq!(v[3], 0.0);
    assert!(v.iter().enumerate().all(|(i, x)| i == 3 || *x > 0.0), "{v:?}");

    let feat_only = DistillConfig { kinds: LossKinds { attention: false, feature: true, logit: false }, ..DistillConfig::default() };
    let set = makd_losses(&mut tape, &t, &s, &adapters, true, &feat_only, 0).unwrap();
    assert!(set.v.attn.is_none() && set.v.feat.is_some() && set.b.is_none());
}

#[test]
fn no_gradient_reaches_the_teacher() {
    let teacher = AgentModel::new(config(16), 1).unwrap();
    let student = AgentModel::new(config(8), 2).unwrap();
    let adapters = AdapterSet::new(8, 16, 3);
    let mut tape = Tape::new();
    let (t, s) = mirrored_step(&teacher, &student, &mut tape);
    let set = makd_losses(&mut tape, &t, &s, &adapters, true, &DistillConfig::default(), 0).unwrap();
    let parts: Vec<Var> = set.per_ability(&mut tape).unwrap().into_iter().flatten().collect();
    let joined = tape.concat(&parts, 1).unwrap();
    let total = tape.sum(joined).unwrap();
    let grads = tape.backward(total).unwrap();
    assert!(grads.keys().all(|k| k.store != teacher.params.id()));
    assert!(grads.keys().any(|k| k.store == student.params.id()));
    assert!(grads.keys().any(|k| k.store == adapters.params.id()));
}

#[test]
fn total_loss_balances_kd_and_ce() {
    let mut tape = Tape::new();
    let kd = tape.constant(Tensor::scalar(2.0));
    let ce = tape.constant(Tensor::scalar(4.0));
    for (alpha, want) in [(0.5, 3.0), (0.0, 4.0), (1.0, 2.0)] {
        let l = total_student_loss(&mut tape, kd, ce, alpha).unwrap();
        assert_eq!(tape.scalar(l), want);
    }
    assert!(total_student_loss(&mut tape, kd, ce, 1.5).is_err());
    assert!(DistillConfig { tau_logit: 0.0, ..DistillConfig::default() }.validate().is_err());
}
