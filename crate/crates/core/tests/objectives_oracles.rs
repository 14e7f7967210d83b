use masters::masking::{apply_mask, build_mask};
use masters::model::{ModelConfig, Transformer};
use masters::objectives::{
    advantages, distill_reward, final_objective, grpo_loss, jsd, response_log_probs, sequence_divergence, GroupItem,
    ObjectiveConfig,
};
use masters::seeding::rng_for;
use proptest::prelude::*;
use rand::Rng;

fn tiny(seed: u64, vocab: usize) -> Transformer {
    Transformer::new(ModelConfig { vocab_size: vocab, context_len: 10, n_layers: 1, d_model: 8, n_heads: 2, seed }).unwrap()
}

/// Direct summation over outcomes of 0.5 KL(P||M) + 0.5 KL(Q||M).
fn brute_jsd(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        let m = 0.5 * (p[i] + q[i]);
        if p[i] > 0.0 {
            total += 0.5 * p[i] * (p[i] / m).ln();
        }
        if q[i] > 0.0 {
            total += 0.5 * q[i] * (q[i] / m).ln();
        }
    }
    total
}

fn probs(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

#[test]
fn two_outcome_jsd_matches_hand_summation() {
    let p = [0.7f64, 0.3];
    let q = [0.4f64, 0.6];
    // Written out term by term: M = (0.55, 0.45).
    let expected = 0.5 * (0.7 * (0.7f64 / 0.55).ln() + 0.3 * (0.3f64 / 0.45).ln())
        + 0.5 * (0.4 * (0.4f64 / 0.55).ln() + 0.6 * (0.6f64 / 0.45).ln());
    let got = jsd(&[p[0].ln(), p[1].ln()], &[q[0].ln(), q[1].ln()]).unwrap();
    assert!((got - expected).abs() <= 1e-10, "{got} vs {expected}");
    // 40-digit evaluation of the same sum.
    assert!((got - 0.046_200_829_181_513_52).abs() <= 1e-10, "{got}");
}

#[test]
fn extreme_distributions() {
    assert!(jsd(&[1.0, -2.0, 0.5], &[1.0, -2.0, 0.5]).unwrap().abs() <= 1e-12);
    let far = jsd(&[60.0, -60.0], &[-60.0, 60.0]).unwrap();
    assert!((far - std::f64::consts::LN_2).abs() <= 1e-6, "{far}");
    assert!(jsd(&[0.0, 1.0], &[0.0, 1.0, 2.0]).is_err());
}

#[test]
fn thousand_random_pairs_match_brute_force() {
    let mut rng = rng_for(3, "jsd-pairs");
    for _ in 0..1000 {
        let v = rng.random_range(2..=32);
        let scale = rng.random_range(0.1..8.0);
        let a: Vec<f64> = (0..v).map(|_| rng.random_range(-scale..scale)).collect();
        let b: Vec<f64> = (0..v).map(|_| rng.random_range(-scale..scale)).collect();
        let got = jsd(&a, &b).unwrap();
        let want = brute_jsd(&probs(&a), &probs(&b));
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
        assert!((got - jsd(&b, &a).unwrap()).abs() <= 1e-12);
        assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&got));
    }
}

proptest! {
    #[test]
    fn jsd_is_symmetric_and_bounded(
        pair in (2usize..16).prop_flat_map(|v| (
            prop::collection::vec(-30.0f64..30.0, v),
            prop::collection::vec(-30.0f64..30.0, v),
        ))
    ) {
        let (a, b) = pair;
        let ab = jsd(&a, &b).unwrap();
        let ba = jsd(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&ab));
    }

    #[test]
    fn distill_reward_reverses_order_with_exact_endpoints(d in prop::collection::vec(0.0f64..0.7, 2..12)) {
        let r = distill_reward(&d).unwrap();
        let max = d.iter().copied().fold(f64::MIN, f64::max);
        let min = d.iter().copied().fold(f64::MAX, f64::min);
        for i in 0..d.len() {
            prop_assert!((0.0..=1.0).contains(&r[i]));
            if max > min {
                if d[i] == min { prop_assert_eq!(r[i], 1.0); }
                if d[i] == max { prop_assert_eq!(r[i], 0.0); }
            } else {
                prop_assert_eq!(r[i], 0.5);
            }
            for j in 0..d.len() {
                if d[i] < d[j] { prop_assert!(r[i] > r[j]); }
            }
        }
    }

    #[test]
    fn advantages_are_standardized_and_shift_invariant(
        r in prop::collection::vec(-3.0f64..3.0, 2..10),
        shift in -50.0f64..50.0,
    ) {
        let a = advantages(&r).unwrap().advantages;
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() <= 1e-9);
        // The epsilon in the denominator scales the spread by s / (s + eps).
        let rm = r.iter().sum::<f64>() / n;
        let s = (r.iter().map(|x| (x - rm).powi(2)).sum::<f64>() / n).sqrt();
        if std != 0.0 {
            prop_assert!((std - s / (s + 1e-8)).abs() <= 1e-9, "std {}", std);
            if s >= 1e-2 {
                prop_assert!((std - 1.0).abs() <= 1e-6, "std {}", std);
            }
        }
        let shifted: Vec<f64> = r.iter().map(|x| x + shift).collect();
        let b = advantages(&shifted).unwrap().advantages;
        if std > 0.0 {
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + shift.abs()));
            }
        }
    }
}

#[test]
fn reward_and_advantage_examples() {
    assert_eq!(distill_reward(&[0.1, 0.3, 0.5]).unwrap(), vec![1.0, 0.5, 0.0]);
    assert_eq!(distill_reward(&[2.0, 4.0]).unwrap(), vec![1.0, 0.0]);
    assert_eq!(distill_reward(&[0.2; 5]).unwrap(), vec![0.5; 5]);
    assert!(distill_reward(&[0.1]).is_err());
    let a = advantages(&[1.0, 0.0, 1.0, 0.0]).unwrap().advantages;
    for (x, e) in a.iter().zip([1.0, -1.0, 1.0, -1.0]) {
        assert!((x - e).abs() <= 1e-7);
    }
    assert_eq!(advantages(&[2.0; 8]).unwrap().advantages, vec![0.0; 8]);
    assert!(advantages(&[1.0]).is_err());
}

#[test]
fn sequence_divergence_reductions() {
    let a = tiny(1, 7);
    let zero = sequence_divergence(&a, &a, &[0, 3], &[4, 5, 1]).unwrap();
    assert!(zero.per_token.iter().all(|&d| d == 0.0));

    let t = tiny(2, 2);
    let s = tiny(3, 2);
    let d = sequence_divergence(&t, &s, &[0, 1], &[1]).unwrap();
    let direct = jsd(&t.next_logits(&[0, 1]).unwrap(), &s.next_logits(&[0, 1]).unwrap()).unwrap();
    assert_eq!(d.per_token.len(), 1);
    assert!((d.mean - direct).abs() <= 1e-12);

    let long = sequence_divergence(&t, &s, &[0], &[1; 12]);
    assert!(long.is_err(), "13 tokens overflow a context of 10");
}

#[test]
fn masking_the_teacher_changes_divergence() {
    let teacher = Transformer::new(ModelConfig { vocab_size: 9, context_len: 10, n_layers: 2, d_model: 16, n_heads: 2, seed: 4 }).unwrap();
    let student = tiny(5, 9);
    let at = |ratio: f64| {
        let plan = build_mask(teacher.params(), ratio).unwrap();
        let masked = teacher.with_params(apply_mask(teacher.params(), &plan).unwrap()).unwrap();
        sequence_divergence(&masked, &student, &[0, 2, 3], &[4, 6, 1]).unwrap().mean
    };
    let (d0, d1) = (at(0.0), at(1.0));
    assert!((d0 - d1).abs() > 1e-6, "{d0} vs {d1}");
}

/// Loss of the unified objective with every detached quantity frozen, so it
/// is a plain function of the student's parameters.
fn frozen_loss(
    student: &Transformer,
    teacher: &Transformer,
    reference: &Transformer,
    group: &[GroupItem<'_>],
    config: ObjectiveConfig,
    anchors: &[Vec<f64>],
) -> f64 {
    final_objective(student, Some(teacher), Some(reference), group, config, Some(anchors)).unwrap().0.total
}

fn anchors_for(student: &Transformer, group: &[GroupItem<'_>]) -> Vec<Vec<f64>> {
    group
        .iter()
        .map(|g| {
            response_log_probs(student, g.prompt, g.response)
                .unwrap()
                .iter()
                .zip(g.response)
                .map(|(row, &t)| row[t as usize])
                .collect()
        })
        .collect()
}

#[test]
fn full_objective_gradient_matches_central_differences() {
    let cfg = ModelConfig { vocab_size: 11, context_len: 10, n_layers: 2, d_model: 12, n_heads: 3, seed: 6 };
    let student = Transformer::new(cfg).unwrap();
    assert!(student.params().total_count() <= 5000, "{}", student.params().total_count());
    let teacher = Transformer::new(ModelConfig { seed: 7, ..cfg }).unwrap();
    let reference = Transformer::new(ModelConfig { seed: 8, ..cfg }).unwrap();
    let prompts: [&[u32]; 2] = [&[0, 3, 4], &[0, 5]];
    let responses: [&[u32]; 4] = [&[6, 7, 1], &[2], &[8, 8, 9, 1], &[10, 1]];
    let advs = [1.2, -0.4, 0.3, -1.1];
    let group: Vec<GroupItem<'_>> = responses
        .iter()
        .enumerate()
        .map(|(j, r)| GroupItem { prompt: prompts[j % 2], response: r, advantage: advs[j] })
        .collect();
    let anchors = anchors_for(&student, &group);
    let config = ObjectiveConfig::default();
    let (_, grads) = final_objective(&student, Some(&teacher), Some(&reference), &group, config, Some(&anchors)).unwrap();

    let total = student.params().total_count();
    let mut rng = rng_for(9, "fd-coords");
    let h = 1e-5;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..240 {
        let idx = rng.random_range(0..total);
        let mut plus = student.clone();
        *plus.params_mut().flat_mut(idx) += h;
        let mut minus = student.clone();
        *minus.params_mut().flat_mut(idx) -= h;
        let fd = (frozen_loss(&plus, &teacher, &reference, &group, config, &anchors)
            - frozen_loss(&minus, &teacher, &reference, &group, config, &anchors))
            / (2.0 * h);
        let an = grads.flat(idx);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
        assert!(rel <= 1e-3, "coordinate {idx}: analytic {an} numeric {fd}");
        checked += 1;
    }
    assert!(checked >= 200);
    eprintln!("worst relative error {worst:.2e}");
}

#[test]
fn policy_gradient_at_the_logits_is_minus_advantage_times_residual() {
    // With beta = 0 and the student as its own reference, the only gradient
    // is -(A/T) * (onehot - softmax) at each response position, pulled back
    // through the network. Compare with the model's own backward pass.
    let student = tiny(10, 6);
    let prompt = [0u32, 2];
    let response = [3u32, 4, 1];
    let adv = 0.8;
    let group = [GroupItem { prompt: &prompt, response: &response, advantage: adv }];
    let (terms, grads) = grpo_loss(&student, &student, &group, 0.0).unwrap();
    assert!(terms.grpo.abs() <= 1e-12 + adv, "{}", terms.grpo);

    let input = [0u32, 2, 3, 4];
    let rows = student.forward(&input).unwrap();
    let v = 6;
    let mut upstream = vec![0.0; input.len() * v];
    for (s, &tok) in response.iter().enumerate() {
        let t = 1 + s;
        let p = probs(&rows[t].values);
        for k in 0..v {
            let onehot = if k == tok as usize { 1.0 } else { 0.0 };
            upstream[t * v + k] = -adv / response.len() as f64 * (onehot - p[k]);
        }
    }
    let expected = student.backward(&input, &upstream).unwrap();
    for (a, b) in grads.iter_values().zip(expected.iter_values()) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn zero_cases_and_beta_linearity() {
    let m = tiny(11, 8);
    let prompt = [0u32, 5];
    let responses: [&[u32]; 2] = [&[6, 1], &[7, 7, 1]];
    let zero_group: Vec<GroupItem<'_>> =
        responses.iter().map(|r| GroupItem { prompt: &prompt, response: r, advantage: 0.0 }).collect();
    let (terms, _) = grpo_loss(&m, &m, &zero_group, 0.1).unwrap();
    assert!(terms.grpo.abs() <= 1e-9);
    let (terms, _) = final_objective(&m, Some(&m), Some(&m), &zero_group, ObjectiveConfig::default(), None).unwrap();
    assert!(terms.total.abs() <= 1e-9);

    let reference = tiny(12, 8);
    let group: Vec<GroupItem<'_>> = responses
        .iter()
        .zip([0.7, -0.7])
        .map(|(r, a)| GroupItem { prompt: &prompt, response: r, advantage: a })
        .collect();
    let at = |beta: f64| grpo_loss(&m, &reference, &group, beta).unwrap().0;
    let (l0, l1, l2) = (at(0.0), at(0.1), at(0.2));
    assert!(l1.kl > 0.0);
    let (c1, c2) = (l1.grpo - l0.grpo, l2.grpo - l0.grpo);
    assert!((c2 - 2.0 * c1).abs() <= 1e-12, "{c1} {c2}");
}

#[test]
fn dropping_the_distillation_term_leaves_the_grpo_gradient() {
    let student = tiny(13, 8);
    let teacher = tiny(14, 8);
    let reference = tiny(15, 8);
    let prompt = [0u32, 4];
    let responses: [&[u32]; 3] = [&[5, 1], &[6, 2, 1], &[7]];
    let group: Vec<GroupItem<'_>> = responses
        .iter()
        .zip([1.0, -0.5, -0.5])
        .map(|(r, a)| GroupItem { prompt: &prompt, response: r, advantage: a })
        .collect();
    let no_distill = ObjectiveConfig { distill: false, ..ObjectiveConfig::default() };
    let (_, with_teacher) = final_objective(&student, Some(&teacher), Some(&reference), &group, no_distill, None).unwrap();
    let (_, grpo_only) = grpo_loss(&student, &reference, &group, 0.1).unwrap();
    for (a, b) in with_teacher.iter_values().zip(grpo_only.iter_values()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn positive_advantage_step_raises_the_record_likelihood() {
    let student = tiny(16, 8);
    let prompt = [0u32, 3, 2];
    let response = [5u32, 6, 1];
    let group = [GroupItem { prompt: &prompt, response: &response, advantage: 1.0 }];
    let (_, grads) = grpo_loss(&student, &student, &group, 0.1).unwrap();
    let logp = |m: &Transformer| -> f64 {
        response_log_probs(m, &prompt, &response).unwrap().iter().zip(&response).map(|(r, &t)| r[t as usize]).sum()
    };
    let mut stepped = student.clone();
    let mut update = grads.clone();
    update.scale(-1e-3);
    stepped.params_mut().add_assign(&update);
    assert!(logp(&stepped) > logp(&student));
}
