use tracer_core::nn::Tensor;
use tracer_core::{
    collect_dataset, corrupt, pretrain_attacker, AttackerConfig, AttackerCritic, BehaviorPolicy, CorruptionMode,
    CorruptionSpec, Dataset, Element, EnvId,
};

fn rows(data: &[f32], dim: usize, idx: &[usize]) -> Tensor {
    let v = idx
        .iter()
        .flat_map(|&r| data[r * dim..(r + 1) * dim].iter().map(|&x| x as f64))
        .collect();
    Tensor::from_vec(idx.len(), dim, v).unwrap()
}

fn attacker_fixture() -> (Dataset, AttackerCritic) {
    let data = collect_dataset(EnvId::PointMass, &BehaviorPolicy::medium_replay(), 1500, 11).unwrap();
    let cfg = AttackerConfig {
        epochs: 4,
        updates_per_epoch: 50,
        hidden: 32,
        batch_size: 64,
        seed: 2,
        ..AttackerConfig::default()
    };
    let (critic, _) = pretrain_attacker(&data, &cfg).unwrap();
    (data, critic)
}

#[test]
fn simultaneous_coverage_matches_closed_form() {
    let clean = collect_dataset(EnvId::PointMass, &BehaviorPolicy::medium_replay(), 100_000, 4).unwrap();
    let spec = CorruptionSpec::new(CorruptionMode::Random, &Element::ALL, 0.3, 1.0, 9);
    let bad = corrupt(&clean, &spec, None).unwrap();
    let frac = bad.labels.unwrap().corrupted_fraction();
    let expect = 1.0 - 0.7f64.powi(4);
    assert!((frac - expect).abs() < 0.01, "coverage {frac} vs {expect}");
}

#[test]
fn pgd_stays_in_the_box_and_never_helps_the_critic() {
    let (clean, attacker) = attacker_fixture();
    for (element, eps) in [(Element::State, 0.5), (Element::Action, 1.0), (Element::Dynamics, 0.3)] {
        let mut spec = CorruptionSpec::new(CorruptionMode::Adversarial, &[element], 0.3, eps, 5);
        spec.pgd_steps = 20;
        let bad = corrupt(&clean, &spec, Some(&attacker)).unwrap();
        let labels = bad.labels.as_ref().unwrap();
        let hit: Vec<usize> = (0..clean.len()).filter(|&i| labels.is_corrupted(i)).collect();
        let (orig, new, dim, std) = match element {
            Element::State => (&clean.states, &bad.states, clean.state_dim, &clean.stats.state_std),
            Element::Action => (&clean.actions, &bad.actions, clean.action_dim, &clean.stats.action_std),
            _ => (&clean.next_states, &bad.next_states, clean.state_dim, &clean.stats.next_state_std),
        };
        let mut moved = 0;
        for &i in &hit {
            for d in 0..dim {
                let delta = (new[i * dim + d] as f64 - orig[i * dim + d] as f64).abs();
                assert!(delta <= eps * std[d], "{element:?} row {i} dim {d}: {delta} > {}", eps * std[d]);
                moved += usize::from(delta > 0.0);
            }
        }
        assert!(moved > 0, "{element:?}: the attack changed nothing");

        let (s0, a0) = (rows(&clean.states, clean.state_dim, &hit), rows(&clean.actions, clean.action_dim, &hit));
        let (before, after) = match element {
            Element::State => (attacker.min_q(&s0, &a0).unwrap(), {
                let s1 = rows(&bad.states, clean.state_dim, &hit);
                attacker.min_q(&s1, &a0).unwrap()
            }),
            Element::Action => (attacker.min_q(&s0, &a0).unwrap(), {
                let a1 = rows(&bad.actions, clean.action_dim, &hit);
                attacker.min_q(&s0, &a1).unwrap()
            }),
            _ => {
                let n0 = rows(&clean.next_states, clean.state_dim, &hit);
                let n1 = rows(&bad.next_states, clean.state_dim, &hit);
                let a2 = attacker.act(&n0).unwrap();
                (attacker.min_q(&n0, &a2).unwrap(), attacker.min_q(&n1, &a2).unwrap())
            }
        };
        for (k, (b, a)) in before.iter().zip(&after).enumerate() {
            assert!(a <= b, "{element:?} row {}: objective rose {b} -> {a}", hit[k]);
        }
        let gain: f64 = before.iter().zip(&after).map(|(b, a)| b - a).sum();
        assert!(gain > 0.0);
    }
}

#[test]
fn zero_budget_attack_is_a_no_op() {
    let (clean, attacker) = attacker_fixture();
    let spec = CorruptionSpec::new(CorruptionMode::Adversarial, &Element::ALL, 0.5, 0.0, 1);
    let bad = corrupt(&clean, &spec, Some(&attacker)).unwrap();
    assert_eq!(bad.states, clean.states);
    assert_eq!(bad.actions, clean.actions);
    assert_eq!(bad.next_states, clean.next_states);
    // −0·r is a signed zero; values still compare equal.
    assert!(bad.rewards.iter().zip(&clean.rewards).all(|(a, b)| *a == 0.0 || a == b));
    let random = CorruptionSpec::new(CorruptionMode::Random, &Element::ALL, 0.5, 0.0, 1);
    let bad = corrupt(&clean, &random, None).unwrap();
    assert_eq!(bad.states, clean.states);
    assert_eq!(bad.next_states, clean.next_states);
}

#[test]
fn attacker_ranks_bandit_actions_and_imitates_behavior() {
    let data = collect_dataset(EnvId::GaussianBandit, &BehaviorPolicy::Uniform, 4000, 3).unwrap();
    let cfg = AttackerConfig {
        epochs: 6,
        updates_per_epoch: 100,
        hidden: 32,
        seed: 1,
        ..AttackerConfig::default()
    };
    let (critic, report) = pretrain_attacker(&data, &cfg).unwrap();
    let s = Tensor::from_vec(3, 1, vec![0.0; 3]).unwrap();
    let a = Tensor::from_vec(3, 1, vec![0.3, -0.4, -0.9]).unwrap();
    let q = critic.min_q(&s, &a).unwrap();
    assert!(q[0] > q[1] && q[1] > q[2], "{q:?}");

    let replay = collect_dataset(EnvId::PointMass, &BehaviorPolicy::expert(), 3000, 3).unwrap();
    let (_, report2) = pretrain_attacker(&replay, &cfg).unwrap();
    let bc = &report2.bc_holdout_mse;
    assert!(bc.last().unwrap() < &(0.5 * bc[0]), "{bc:?}");
    assert_eq!(report.td_loss.len(), cfg.epochs);
}
