//! The frozen critic that adversarial corruption descends against: a
//! min-ensemble of Q-networks fitted by TD evaluation of the behavior data,
//! plus a behavior-cloning policy head.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    module_grads, polyak_update, Activation, Adam, AdamConfig, Checkpoint, Graph, Mlp,
    Module, Tensor,
};
use crate::seeding::{self, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackerConfig {
    pub ensemble: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub updates_per_epoch: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub lr: f64,
    pub polyak: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        AttackerConfig {
            ensemble: 2,
            hidden: 64,
            epochs: 20,
            updates_per_epoch: 100,
            batch_size: 128,
            gamma: 0.99,
            lr: 1e-3,
            polyak: 0.05,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackerCritic {
    pub q_nets: Vec<Mlp>,
    pub policy: Mlp,
    pub state_dim: usize,
    pub action_dim: usize,
}

/// Per-epoch training curves.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackerReport {
    pub td_loss: Vec<f64>,
    pub bc_holdout_mse: Vec<f64>,
}

impl AttackerCritic {
    pub fn new(state_dim: usize, action_dim: usize, ensemble: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let q_nets = (0..ensemble)
            .map(|_| Mlp::new(&[state_dim + action_dim, hidden, hidden, 1], Activation::Identity, rng))
            .collect();
        let policy = Mlp::new(&[state_dim, hidden, hidden, action_dim], Activation::Identity, rng);
        AttackerCritic {
            q_nets,
            policy,
            state_dim,
            action_dim,
        }
    }

    /// Deterministic policy-head action, squashed into `[−1, 1]`.
    pub fn act(&self, states: &Tensor) -> Result<Tensor> {
        Ok(self.policy.predict(states)?.map(f64::tanh))
    }

    /// Row-wise minimum over the ensemble of `Q_p(s, a)`.
    pub fn min_q(&self, states: &Tensor, actions: &Tensor) -> Result<Vec<f64>> {
        min_over(&self.q_nets, states, actions)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "ensemble": self.q_nets.len(),
            "hidden": self.policy.dims()[1],
        });
        let mut ck = Checkpoint::new("attacker", 0, meta);
        for (k, q) in self.q_nets.iter().enumerate() {
            ck.push_all(&format!("q{k}"), q.params());
        }
        ck.push_all("policy", self.policy.params());
        ck.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(dir)?;
        if ck.module != "attacker" {
            return Err(Error::Checkpoint {
                path: dir.to_path_buf(),
                detail: format!("expected an attacker checkpoint, found `{}`", ck.module),
            });
        }
        let field = |k: &str| -> Result<usize> {
            ck.meta
                .get(k)
                .and_then(serde_json::Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| Error::Checkpoint {
                    path: dir.to_path_buf(),
                    detail: format!("manifest meta lacks `{k}`"),
                })
        };
        let mut rng = seeding::rng(0, &[]);
        let mut critic = AttackerCritic::new(
            field("state_dim")?,
            field("action_dim")?,
            field("ensemble")?,
            field("hidden")?,
            &mut rng,
        );
        let mut offset = 0;
        for q in &mut critic.q_nets {
            ck.restore_into(&mut offset, q.params_mut())?;
        }
        ck.restore_into(&mut offset, critic.policy.params_mut())?;
        Ok(critic)
    }
}

fn min_over(nets: &[Mlp], states: &Tensor, actions: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let s = g.constant(states.clone());
    let a = g.constant(actions.clone());
    let x = g.concat_cols(&[s, a])?;
    let mut out = vec![f64::INFINITY; states.rows()];
    for net in nets {
        let p = net.bind_frozen(&mut g);
        let q = net.forward(&mut g, &p, x)?;
        for (o, &v) in out.iter_mut().zip(g.value(q).data()) {
            *o = o.min(v);
        }
    }
    Ok(out)
}

/// Index of the transition that continues `i`'s trajectory, if the data
/// records one (the next row starting exactly where `i` ended).
fn successors(data: &Dataset) -> Vec<Option<usize>> {
    (0..data.len())
        .map(|i| {
            let j = i + 1;
            (j < data.len() && data.dones[i] == 0.0 && data.state(j) == data.next_state(i)).then_some(j)
        })
        .collect()
}

fn gather(col: &[f32], dim: usize, idx: &[usize]) -> Tensor {
    let mut v = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        v.extend(col[i * dim..(i + 1) * dim].iter().map(|&x| x as f64));
    }
    Tensor::from_vec(idx.len(), dim, v).expect("gathered")
}

/// Fit the attacker on clean data. Everything is frozen on return.
pub fn pretrain_attacker(data: &Dataset, config: &AttackerConfig) -> Result<(AttackerCritic, AttackerReport)> {
    if data.labels.is_some() || data.corruption.is_some() {
        return Err(Error::Config("the attacker must be pretrained on clean data".into()));
    }
    if config.ensemble == 0 || config.batch_size == 0 {
        return Err(Error::Config("attacker ensemble and batch size must be positive".into()));
    }
    let (ds, da) = (data.state_dim, data.action_dim);
    let mut init_rng = seeding::rng(config.seed, &[stream::ATTACKER, stream::INIT]);
    let mut critic = AttackerCritic::new(ds, da, config.ensemble, config.hidden, &mut init_rng);
    let mut targets = critic.q_nets.clone();
    let adam_cfg = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut q_opts: Vec<Adam> = critic.q_nets.iter().map(|q| Adam::new(adam_cfg, q)).collect();
    let mut pi_opt = Adam::new(adam_cfg, &critic.policy);

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seeding::rng(config.seed, &[stream::ATTACKER, stream::SELECT]));
    let n_hold = ((data.len() as f64 * config.holdout_fraction) as usize).min(data.len().saturating_sub(1));
    let (holdout, train) = order.split_at(n_hold);
    let hold_s = gather(&data.states, ds, holdout);
    let hold_a = gather(&data.actions, da, holdout);
    let succ = successors(data);

    let mut rng = seeding::rng(config.seed, &[stream::ATTACKER, stream::BATCH]);
    let mut report = AttackerReport::default();
    let mut step = 0u64;
    for _epoch in 0..config.epochs {
        let mut td_sum = 0.0;
        for _ in 0..config.updates_per_epoch {
            let idx: Vec<usize> = (0..config.batch_size).map(|_| train[rng.gen_range(0..train.len())]).collect();
            let s = gather(&data.states, ds, &idx);
            let a = gather(&data.actions, da, &idx);
            let s2 = gather(&data.next_states, ds, &idx);
            let r = gather(&data.rewards, 1, &idx);
            let done = gather(&data.dones, 1, &idx);

            let cloned = critic.act(&s2)?;
            let mut a2 = cloned.clone();
            for (row, &i) in idx.iter().enumerate() {
                if let Some(j) = succ[i] {
                    for d in 0..da {
                        a2.set(row, d, data.action(j)[d] as f64);
                    }
                }
            }
            let q2 = min_over(&targets, &s2, &a2)?;
            let y: Vec<f64> = (0..idx.len())
                .map(|b| r.get(b, 0) + config.gamma * (1.0 - done.get(b, 0)) * q2[b])
                .collect();

            let mut g = Graph::new();
            let sv = g.constant(s.clone());
            let av = g.constant(a.clone());
            let x = g.concat_cols(&[sv, av])?;
            let yv = g.constant(Tensor::column(y));
            let mut bound = Vec::new();
            let mut total = None;
            for (k, q) in critic.q_nets.iter().enumerate() {
                let p = q.bind(&mut g, &format!("attacker.q{k}"));
                let out = q.forward(&mut g, &p, x)?;
                let diff = g.sub(out, yv)?;
                let sq = g.square(diff);
                let loss = g.mean(sq);
                total = Some(match total {
                    None => loss,
                    Some(t) => g.add(t, loss)?,
                });
                bound.push(p);
            }
            let total = total.expect("nonempty ensemble");
            let value = g.value(total).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    component: "attacker_td",
                    step,
                });
            }
            td_sum += value / config.ensemble as f64;
            let grads = g.backward(total)?;
            for ((q, p), opt) in critic.q_nets.iter_mut().zip(&bound).zip(&mut q_opts) {
                let gq = module_grads(&grads, p, q);
                opt.apply(q, &gq)?;
            }

            let mut g = Graph::new();
            let p = critic.policy.bind(&mut g, "attacker.policy");
            let sv = g.constant(s);
            let out = critic.policy.forward(&mut g, &p, sv)?;
            let squashed = g.tanh(out);
            let av = g.constant(a);
            let diff = g.sub(squashed, av)?;
            let sq = g.square(diff);
            let loss = g.mean(sq);
            if !g.value(loss).item().is_finite() {
                return Err(Error::NonFiniteLoss {
                    component: "attacker_bc",
                    step,
                });
            }
            let grads = g.backward(loss)?;
            let gp = module_grads(&grads, &p, &critic.policy);
            pi_opt.apply(&mut critic.policy, &gp)?;

            step += 1;
            if step % 2 == 0 {
                for (t, q) in targets.iter_mut().zip(&critic.q_nets) {
                    polyak_update(t, q, config.polyak);
                }
            }
        }
        report.td_loss.push(td_sum / config.updates_per_epoch.max(1) as f64);
        let mse = if holdout.is_empty() {
            f64::NAN
        } else {
            let pred = critic.act(&hold_s)?;
            pred.zip_map(&hold_a, |p, a| (p - a) * (p - a)).mean()
        };
        report.bc_holdout_mse.push(mse);
    }
    Ok((critic, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{collect_dataset, BehaviorPolicy};
    use crate::env::EnvId;

    fn small_config(seed: u64) -> AttackerConfig {
        AttackerConfig {
            epochs: 3,
            updates_per_epoch: 20,
            batch_size: 32,
            hidden: 16,
            seed,
            ..AttackerConfig::default()
        }
    }

    #[test]
    fn successors_follow_trajectories() {
        let d = collect_dataset(EnvId::PointMass, &BehaviorPolicy::expert(), 250, 1).unwrap();
        let succ = successors(&d);
        assert_eq!(succ[0], Some(1));
        assert_eq!(succ[99], None);
        assert_eq!(succ[249], None);
        assert_eq!(succ.iter().filter(|s| s.is_none()).count(), 3);
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let d = collect_dataset(EnvId::PointMass, &BehaviorPolicy::medium_replay(), 300, 2).unwrap();
        let (a, ra) = pretrain_attacker(&d, &small_config(5)).unwrap();
        let (b, rb) = pretrain_attacker(&d, &small_config(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        assert_eq!(AttackerCritic::load(dir.path()).unwrap(), a);
    }

    #[test]
    fn refuses_corrupted_data() {
        let mut d = collect_dataset(EnvId::GaussianBandit, &BehaviorPolicy::Uniform, 50, 2).unwrap();
        d.labels = Some(crate::dataset::CorruptionLabels::new(50));
        assert!(pretrain_attacker(&d, &small_config(0)).is_err());
    }
}
