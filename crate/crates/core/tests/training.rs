use std::fs;

use tracer_core::policy::fit_behavior_cloning;
use tracer_core::seeding;
use tracer_core::trainer::{checkpoint_dir, METRICS_FILE};
use tracer_core::{
    collect_dataset, corrupt, run_training, Algorithm, BehaviorPolicy, CorruptionLabels, CorruptionMode,
    CorruptionSpec, Dataset, Element, EnvId, GaussianPolicy, RunOptions, TrainConfig, TrainState,
};

fn tiny(algorithm: Algorithm) -> TrainConfig {
    TrainConfig {
        algorithm,
        n_quantiles: 8,
        n_target_quantiles: 8,
        ensemble: if algorithm == Algorithm::Iql { 2 } else { 3 },
        batch_size: 16,
        epochs: 4,
        updates_per_epoch: 3,
        hidden: 16,
        embed_dim: 16,
        obs_hidden: 16,
        checkpoint_every: 2,
        seed: 9,
        ..TrainConfig::desk()
    }
}

fn corrupted() -> Dataset {
    let clean = collect_dataset(EnvId::PointMass, &BehaviorPolicy::medium_replay(), 500, 2).unwrap();
    let spec = CorruptionSpec::new(CorruptionMode::Random, &Element::ALL, 0.3, 1.0, 4);
    corrupt(&clean, &spec, None).unwrap()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = corrupted();
    let view = data.training_view();
    for alg in [Algorithm::Tracer, Algorithm::Iql] {
        let cfg = tiny(alg);
        let full = tempfile::tempdir().unwrap();
        let whole = run_training(&view, &cfg, full.path(), &RunOptions::default()).unwrap();

        // A run that died after its epoch-3 metrics row but before the
        // epoch-4 checkpoint.
        let cut = tempfile::tempdir().unwrap();
        run_training(&view, &cfg, cut.path(), &RunOptions::default()).unwrap();
        fs::remove_dir_all(checkpoint_dir(cut.path(), 4)).unwrap();
        let metrics = fs::read_to_string(cut.path().join(METRICS_FILE)).unwrap();
        let kept: Vec<&str> = metrics.lines().take(4).collect();
        fs::write(cut.path().join(METRICS_FILE), kept.join("\n") + "\n").unwrap();

        let opts = RunOptions {
            resume: true,
            ..RunOptions::default()
        };
        let resumed = run_training(&view, &cfg, cut.path(), &opts).unwrap();
        assert_eq!(resumed.state, whole.state, "{alg}");
        assert_eq!(
            fs::read_to_string(cut.path().join(METRICS_FILE)).unwrap(),
            fs::read_to_string(full.path().join(METRICS_FILE)).unwrap()
        );
    }
}

#[test]
fn training_never_reads_labels() {
    let data = corrupted();
    let mut unlabeled = data.clone();
    unlabeled.labels = None;
    let mut scrambled = data.clone();
    let n = scrambled.len();
    let mut masks = CorruptionLabels::new(n);
    for (i, m) in masks.masks.iter_mut().enumerate() {
        *m = (i * 7 % 16) as u8;
    }
    scrambled.labels = Some(masks);
    for alg in [Algorithm::Tracer, Algorithm::Riql] {
        let cfg = tiny(alg);
        let states: Vec<TrainState> = [&data, &unlabeled, &scrambled]
            .iter()
            .map(|d| {
                let view = d.training_view();
                let mut s = TrainState::for_view(&cfg, &view).unwrap();
                for _ in 0..4 {
                    s.train_step(&view).unwrap();
                }
                s
            })
            .collect();
        assert_eq!(states[0], states[1]);
        assert_eq!(states[0], states[2]);
    }
}

#[test]
fn unweighted_tracer_without_bayes_terms_is_distributional_riql() {
    let data = corrupted();
    let view = data.training_view();
    let mut t = tiny(Algorithm::Tracer);
    t.entropy_weighting = false;
    t.eta_start = 0.0;
    t.eta_end = 0.0;
    let d = TrainConfig {
        algorithm: Algorithm::Driql,
        ..t.clone()
    };
    let mut a = TrainState::for_view(&t, &view).unwrap();
    let mut b = TrainState::for_view(&d, &view).unwrap();
    for step in 0..6 {
        let ta = a.train_step(&view).unwrap();
        let tb = b.train_step(&view).unwrap();
        for (x, y) in [
            (ta.td_loss, tb.td_loss),
            (ta.value_loss, tb.value_loss),
            (ta.policy_loss, tb.policy_loss),
        ] {
            assert!((x - y).abs() <= 1e-12, "step {step}: {x} vs {y}");
        }
        assert_eq!(ta.eta, 0.0);
    }
    let (da, db) = (a.distributional().unwrap(), b.distributional().unwrap());
    assert_eq!(da.critics, db.critics);
    assert_eq!(da.value, db.value);
    assert_eq!(a.policy, b.policy);
}

#[test]
fn behavior_cloning_recovers_expert_actions() {
    let data = collect_dataset(EnvId::PointMass, &BehaviorPolicy::expert(), 4000, 6).unwrap();
    let view = data.training_view();
    let mut rng = seeding::rng(3, &[]);
    let mut policy = GaussianPolicy::new(data.state_dim, data.action_dim, &[64, 64], &mut rng);
    fit_behavior_cloning(&mut policy, &view, 2000, 128, 1e-3, &mut rng).unwrap();
    let idx: Vec<usize> = (0..data.len()).step_by(7).collect();
    let batch = view.batch(&idx);
    let pred = policy.act_eval(&batch.states).unwrap();
    let mse = pred
        .data()
        .iter()
        .zip(batch.actions.data())
        .map(|(p, a)| (p - a).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    assert!(mse < 0.1, "behavior cloning mse {mse}");
}

#[test]
fn checkpoint_continues_bit_identically() {
    let data = corrupted();
    let view = data.training_view();
    for alg in [Algorithm::Tracer, Algorithm::Driql, Algorithm::Riql, Algorithm::Iql] {
        let cfg = tiny(alg);
        let mut s = TrainState::for_view(&cfg, &view).unwrap();
        s.train_step(&view).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let mut r = TrainState::load(dir.path()).unwrap();
        for _ in 0..3 {
            let a = s.train_step(&view).unwrap();
            let b = r.train_step(&view).unwrap();
            assert_eq!(format!("{a:?}"), format!("{b:?}"));
        }
        assert_eq!(s, r, "{alg}");
    }
}
