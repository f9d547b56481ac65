//! Training loops for TRACER, its distributional ablation, and the IQL and
//! RIQL baselines; checkpoints, telemetry and resumable runs.
//!
//! Every random draw of step `t` comes from a stream keyed by `(seed, t)`,
//! so a run resumed from a checkpoint replays the uninterrupted run exactly.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bayes::{
    eta_at, loss_first, loss_second, reparam_sample, standard_noise, EtaMode, ObservationHeads,
    SecondInputs,
};
use crate::config::{Algorithm, TrainConfig};
use crate::critic::{
    alpha_quantile, alpha_quantile_members, critic_input, grid_mean, quantile_huber_td_loss,
    sample_taus, scalar_td_loss, td_targets, value_expectile_loss, CriticEnsemble, QuantileNet,
};
use crate::dataset::{Batch, TrainingView};
use crate::entropy::{entropy_rows, entropy_weights, normalize_entropy};
use crate::env::EnvId;
use crate::error::{Error, Result};
use crate::nn::{
    cosine_features, module_grads, polyak_update, Activation, Adam, AdamConfig, Checkpoint, Graph,
    Mlp, Module, Tensor, COSINE_BASIS,
};
use crate::policy::{awr_loss, awr_weights, GaussianPolicy};
use crate::seeding::{self, stream};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str =
    "epoch,td_loss,bayes_loss,value_loss,policy_loss,mean_entropy,mean_weight,eta";
pub const CONFIG_FILE: &str = "config.txt";
pub const RUN_FILE: &str = "run.json";
const CHECKPOINT_MODULE: &str = "train-state";

/// Per-component init streams, so that adding or removing a component
/// leaves the others' initial parameters untouched.
mod part {
    pub const CRITIC: u64 = 1;
    pub const VALUE: u64 = 2;
    pub const HEADS: u64 = 3;
    pub const POLICY: u64 = 4;
    pub const Q: u64 = 5;
    pub const V: u64 = 6;
}

/// Losses and entropy statistics of one gradient step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTelemetry {
    pub td_loss: f64,
    pub bayes_loss: f64,
    pub value_loss: f64,
    pub policy_loss: f64,
    /// NaN for the scalar-critic baselines.
    pub mean_entropy: f64,
    pub mean_weight: f64,
    pub eta: f64,
}

impl StepTelemetry {
    fn fields(&self) -> [f64; 7] {
        [
            self.td_loss,
            self.bayes_loss,
            self.value_loss,
            self.policy_loss,
            self.mean_entropy,
            self.mean_weight,
            self.eta,
        ]
    }

    /// Field-wise mean.
    pub fn average(steps: &[StepTelemetry]) -> StepTelemetry {
        let n = steps.len().max(1) as f64;
        let mut acc = [0.0; 7];
        for s in steps {
            for (a, v) in acc.iter_mut().zip(s.fields()) {
                *a += v;
            }
        }
        let [td_loss, bayes_loss, value_loss, policy_loss, mean_entropy, mean_weight, eta] =
            acc.map(|v| v / n);
        StepTelemetry {
            td_loss,
            bayes_loss,
            value_loss,
            policy_loss,
            mean_entropy,
            mean_weight,
            eta,
        }
    }

    pub fn csv_row(&self, epoch: usize) -> String {
        let cells: Vec<String> = self.fields().iter().map(|v| format!("{v}")).collect();
        format!("{epoch},{}", cells.join(","))
    }
}

/// Affine state normalization fixed at the start of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ObsNorm {
    pub fn from_view(view: &TrainingView<'_>) -> Self {
        let (mean, std) = view.state_moments();
        ObsNorm {
            mean,
            std: std.into_iter().map(|s| s.max(1e-6)).collect(),
        }
    }

    pub fn apply(&self, states: &Tensor) -> Tensor {
        let d = self.mean.len();
        let mut out = states.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let k = i % d;
            *v = (*v - self.mean[k]) / self.std[k];
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistModels {
    pub critics: CriticEnsemble,
    pub critic_opts: Vec<Adam>,
    pub value: QuantileNet,
    pub value_target: QuantileNet,
    pub value_opt: Adam,
    /// Present only for TRACER.
    pub heads: Option<(ObservationHeads, Adam)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarModels {
    pub q: Vec<Mlp>,
    pub q_targets: Vec<Mlp>,
    pub q_opts: Vec<Adam>,
    pub v: Mlp,
    pub v_opt: Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Models {
    Distributional(DistModels),
    Scalar(ScalarModels),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub env: EnvId,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Gradient steps taken so far.
    pub step: u64,
    pub models: Models,
    pub policy: GaussianPolicy,
    pub policy_opt: Adam,
    pub obs_norm: Option<ObsNorm>,
}

fn adam(config: &TrainConfig, module: &impl Module) -> Adam {
    Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        module,
    )
}

/// Column-wise concatenation of equally tall tensors.
pub fn hcat(parts: &[&Tensor]) -> Tensor {
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::from_vec(rows, cols, data).expect("sized above")
}

fn finite(v: f64, component: &'static str, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { component, step })
    }
}

impl TrainState {
    /// Fresh parameters for `config` on an environment with the given dimensions.
    pub fn new(
        config: &TrainConfig,
        env: EnvId,
        obs_norm: Option<ObsNorm>,
    ) -> Result<Self> {
        config.validate()?;
        let (ds, da) = (env.state_dim(), env.action_dim());
        let seed = config.seed;
        let init = |part: u64, idx: u64| seeding::rng(seed, &[stream::INIT, part, idx]);
        let hidden = config.hidden_dims();
        let models = if config.algorithm.is_distributional() {
            let in_dim = ds + da + usize::from(config.reward_input);
            let mut k = 0u64;
            let critics = CriticEnsemble::new(config.ensemble, || {
                k += 1;
                QuantileNet::new(
                    in_dim,
                    &hidden,
                    config.embed_dim,
                    config.head_hidden,
                    &mut init(part::CRITIC, k - 1),
                )
            });
            let critic_opts = critics.members.iter().map(|m| adam(config, m)).collect();
            let value = QuantileNet::new(
                ds,
                &hidden,
                config.embed_dim,
                config.head_hidden,
                &mut init(part::VALUE, 0),
            );
            let heads = (config.algorithm == Algorithm::Tracer).then(|| {
                let h = ObservationHeads::new(
                    config.n_quantiles,
                    ds,
                    da,
                    config.obs_hidden,
                    &mut init(part::HEADS, 0),
                );
                let o = adam(config, &h);
                (h, o)
            });
            Models::Distributional(DistModels {
                critics,
                critic_opts,
                value_opt: adam(config, &value),
                value_target: value.clone(),
                value,
                heads,
            })
        } else {
            let mut dims = vec![ds + da];
            dims.extend_from_slice(&hidden);
            dims.push(1);
            let q: Vec<Mlp> = (0..config.ensemble as u64)
                .map(|i| Mlp::new(&dims, Activation::Identity, &mut init(part::Q, i)))
                .collect();
            let mut vdims = vec![ds];
            vdims.extend_from_slice(&hidden);
            vdims.push(1);
            let v = Mlp::new(&vdims, Activation::Identity, &mut init(part::V, 0));
            Models::Scalar(ScalarModels {
                q_opts: q.iter().map(|m| adam(config, m)).collect(),
                q_targets: q.clone(),
                q,
                v_opt: adam(config, &v),
                v,
            })
        };
        let policy = GaussianPolicy::new(ds, da, &hidden, &mut init(part::POLICY, 0));
        Ok(TrainState {
            config: config.clone(),
            env,
            state_dim: ds,
            action_dim: da,
            step: 0,
            models,
            policy_opt: adam(config, &policy),
            policy,
            obs_norm,
        })
    }

    /// Fresh state for training on `view`.
    pub fn for_view(config: &TrainConfig, view: &TrainingView<'_>) -> Result<Self> {
        if view.is_empty() {
            return Err(Error::Config("cannot train on an empty dataset".into()));
        }
        let norm = config.normalize_obs.then(|| ObsNorm::from_view(view));
        TrainState::new(config, view.env, norm)
    }

    /// Sample this step's batch from `view` and take one step.
    pub fn train_step(&mut self, view: &TrainingView<'_>) -> Result<StepTelemetry> {
        if view.env != self.env {
            return Err(Error::Mismatch(format!(
                "state was built for {} but the dataset is {}",
                self.env, view.env
            )));
        }
        let mut rng = seeding::rng(self.config.seed, &[stream::BATCH, self.step]);
        let batch = view.sample_batch(self.config.batch_size, &mut rng);
        self.step_on(&batch)
    }

    /// One step of the configured algorithm on a given batch.
    pub fn step_on(&mut self, batch: &Batch) -> Result<StepTelemetry> {
        let batch = match &self.obs_norm {
            Some(n) => Batch {
                states: n.apply(&batch.states),
                next_states: n.apply(&batch.next_states),
                ..batch.clone()
            },
            None => batch.clone(),
        };
        let t = match &mut self.models {
            Models::Distributional(m) => {
                distributional_step(m, &mut self.policy, &mut self.policy_opt, &self.config, &batch, self.step)?
            }
            Models::Scalar(m) => {
                scalar_step(m, &mut self.policy, &mut self.policy_opt, &self.config, &batch, self.step)?
            }
        };
        self.step += 1;
        Ok(t)
    }

    /// Deterministic evaluation actions for raw states.
    pub fn act(&self, states: &Tensor) -> Result<Tensor> {
        match &self.obs_norm {
            Some(n) => self.policy.act_eval(&n.apply(states)),
            None => self.policy.act_eval(states),
        }
    }

    /// The distributional critics, if this algorithm has them.
    pub fn distributional(&self) -> Option<&DistModels> {
        match &self.models {
            Models::Distributional(m) => Some(m),
            Models::Scalar(_) => None,
        }
    }

    fn adams(&self) -> Vec<&Adam> {
        let mut v: Vec<&Adam> = match &self.models {
            Models::Distributional(m) => {
                let mut v: Vec<&Adam> = m.critic_opts.iter().collect();
                v.push(&m.value_opt);
                if let Some((_, o)) = &m.heads {
                    v.push(o);
                }
                v
            }
            Models::Scalar(m) => {
                let mut v: Vec<&Adam> = m.q_opts.iter().collect();
                v.push(&m.v_opt);
                v
            }
        };
        v.push(&self.policy_opt);
        v
    }

    fn adams_mut(&mut self) -> Vec<&mut Adam> {
        let mut v: Vec<&mut Adam> = match &mut self.models {
            Models::Distributional(m) => {
                let mut v: Vec<&mut Adam> = m.critic_opts.iter_mut().collect();
                v.push(&mut m.value_opt);
                if let Some((_, o)) = &mut m.heads {
                    v.push(o);
                }
                v
            }
            Models::Scalar(m) => {
                let mut v: Vec<&mut Adam> = m.q_opts.iter_mut().collect();
                v.push(&mut m.v_opt);
                v
            }
        };
        v.push(&mut self.policy_opt);
        v
    }

    /// Every parameter and optimizer tensor, in checkpoint order.
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = Vec::new();
        match &self.models {
            Models::Distributional(m) => {
                m.critics.members.iter().for_each(|c| v.extend(c.params()));
                m.critics.targets.iter().for_each(|c| v.extend(c.params()));
                v.extend(m.value.params());
                v.extend(m.value_target.params());
                if let Some((h, _)) = &m.heads {
                    v.extend(h.params());
                }
            }
            Models::Scalar(m) => {
                m.q.iter().for_each(|q| v.extend(q.params()));
                m.q_targets.iter().for_each(|q| v.extend(q.params()));
                v.extend(m.v.params());
            }
        }
        v.extend(self.policy.params());
        for a in self.adams() {
            v.extend(a.state_tensors());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let TrainState {
            models,
            policy,
            policy_opt,
            ..
        } = self;
        let mut v: Vec<&mut Tensor> = Vec::new();
        let mut moments: Vec<&mut Tensor> = Vec::new();
        match models {
            Models::Distributional(m) => {
                let DistModels {
                    critics,
                    critic_opts,
                    value,
                    value_target,
                    value_opt,
                    heads,
                } = m;
                critics.members.iter_mut().for_each(|c| v.extend(c.params_mut()));
                critics.targets.iter_mut().for_each(|c| v.extend(c.params_mut()));
                v.extend(value.params_mut());
                v.extend(value_target.params_mut());
                critic_opts.iter_mut().for_each(|o| moments.extend(o.state_tensors_mut()));
                moments.extend(value_opt.state_tensors_mut());
                if let Some((h, o)) = heads {
                    v.extend(h.params_mut());
                    moments.extend(o.state_tensors_mut());
                }
            }
            Models::Scalar(m) => {
                let ScalarModels {
                    q,
                    q_targets,
                    q_opts,
                    v: vnet,
                    v_opt,
                } = m;
                q.iter_mut().for_each(|n| v.extend(n.params_mut()));
                q_targets.iter_mut().for_each(|n| v.extend(n.params_mut()));
                v.extend(vnet.params_mut());
                q_opts.iter_mut().for_each(|o| moments.extend(o.state_tensors_mut()));
                moments.extend(v_opt.state_tensors_mut());
            }
        }
        v.extend(policy.params_mut());
        v.extend(moments);
        v.extend(policy_opt.state_tensors_mut());
        v
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = serde_json::json!({
            "config": self.config,
            "env": self.env,
            "adam_steps": self.adams().iter().map(|a| a.step).collect::<Vec<_>>(),
            "obs_norm": self.obs_norm,
        });
        let mut ck = Checkpoint::new(CHECKPOINT_MODULE, self.step, meta);
        ck.push_all("state", self.tensors());
        ck.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(dir)?;
        let bad = |detail: String| Error::Checkpoint {
            path: dir.to_path_buf(),
            detail,
        };
        if ck.module != CHECKPOINT_MODULE {
            return Err(bad(format!("expected a training checkpoint, found `{}`", ck.module)));
        }
        let field = |k: &str| ck.meta.get(k).cloned().ok_or_else(|| bad(format!("meta lacks `{k}`")));
        let config: TrainConfig =
            serde_json::from_value(field("config")?).map_err(|e| bad(format!("config: {e}")))?;
        let env: EnvId = serde_json::from_value(field("env")?).map_err(|e| bad(format!("env: {e}")))?;
        let steps: Vec<u64> =
            serde_json::from_value(field("adam_steps")?).map_err(|e| bad(format!("adam_steps: {e}")))?;
        let norm: Option<ObsNorm> =
            serde_json::from_value(field("obs_norm")?).map_err(|e| bad(format!("obs_norm: {e}")))?;
        let mut state = TrainState::new(&config, env, norm)?;
        let mut offset = 0;
        ck.restore_into(&mut offset, state.tensors_mut())?;
        if offset != ck.tensors.len() {
            return Err(bad(format!("{} unused tensors", ck.tensors.len() - offset)));
        }
        let mut adams = state.adams_mut();
        if adams.len() != steps.len() {
            return Err(bad("optimizer count mismatch".into()));
        }
        for (a, s) in adams.iter_mut().zip(steps) {
            a.step = s;
        }
        state.step = ck.step;
        Ok(state)
    }
}

/// Member inputs `s ‖ a (‖ r)` as a plain tensor.
fn critic_input_tensor(batch: &Batch, reward_input: bool) -> Tensor {
    if reward_input {
        hcat(&[&batch.states, &batch.actions, &batch.rewards])
    } else {
        hcat(&[&batch.states, &batch.actions])
    }
}

fn policy_update(
    policy: &mut GaussianPolicy,
    opt: &mut Adam,
    config: &TrainConfig,
    batch: &Batch,
    advantages: &[f64],
    step: u64,
) -> Result<f64> {
    let weights = awr_weights(advantages, config.beta, config.w_max);
    let mut g = Graph::new();
    let p = policy.bind(&mut g, "policy");
    let s = g.constant(batch.states.clone());
    let loss = awr_loss(policy, &mut g, &p, s, &batch.actions, &weights)?;
    let value = finite(g.value(loss).item(), "policy", step)?;
    let grads = g.backward(loss)?;
    let gp = module_grads(&grads, &p, policy);
    opt.apply(policy, &gp)?;
    Ok(value)
}

/// TRACER step, or the distributional ablation when the state has no heads.
fn distributional_step(
    m: &mut DistModels,
    policy: &mut GaussianPolicy,
    policy_opt: &mut Adam,
    cfg: &TrainConfig,
    batch: &Batch,
    step: u64,
) -> Result<StepTelemetry> {
    let b = batch.len();
    let k = m.critics.len();
    let seed = cfg.seed;
    let taus = sample_taus(cfg.n_quantiles, &mut seeding::rng(seed, &[stream::TAU, step]));
    let taus_next = sample_taus(
        cfg.n_target_quantiles,
        &mut seeding::rng(seed, &[stream::TAU_TARGET, step]),
    );
    let feats = cosine_features(&taus, COSINE_BASIS)?;
    let z_next = m.value_target.quantiles(&batch.next_states, &taus_next)?;
    let targets = td_targets(&batch.rewards, &batch.dones, &z_next, cfg.gamma);
    let eta = eta_at(step, cfg.total_steps(), cfg.eta_start, cfg.eta_end);

    // Critic.
    let mut g = Graph::new();
    let sv = g.constant(batch.states.clone());
    let av = g.constant(batch.actions.clone());
    let rv = g.constant(batch.rewards.clone());
    let s2v = g.constant(batch.next_states.clone());
    let fv = g.constant(feats.clone());
    let x = critic_input(&mut g, sv, av, rv, cfg.reward_input)?;
    let member_vars: Vec<_> = m
        .critics
        .members
        .iter()
        .enumerate()
        .map(|(i, c)| c.bind(&mut g, &format!("critic{i}")))
        .collect();
    let mut d_vars = Vec::with_capacity(k);
    let mut d_vals = Vec::with_capacity(k);
    let mut td_means = Vec::with_capacity(k);
    for (c, p) in m.critics.members.iter().zip(&member_vars) {
        let d = c.forward(&mut g, p, x, fv)?;
        let td = quantile_huber_td_loss(&mut g, d, &targets, &taus, cfg.kappa)?;
        td_means.push(g.mean(td));
        d_vals.push(g.value(d).clone());
        d_vars.push(d);
    }

    let batch_mean = d_vals.iter().map(Tensor::sum).sum::<f64>() / (k * b * cfg.n_quantiles) as f64;
    let entropies: Vec<Vec<f64>> = d_vals
        .iter()
        .map(|d| entropy_rows(&taus, d, cfg.entropy_variant))
        .collect();
    let weights: Vec<Vec<f64>> = entropies
        .iter()
        .map(|h| {
            if cfg.entropy_weighting {
                entropy_weights(&normalize_entropy(h, batch_mean))
            } else {
                vec![1.0; b]
            }
        })
        .collect();

    let mut total = None;
    let mut bayes_sum = 0.0;
    let head_vars = m.heads.as_ref().map(|(h, _)| h.bind(&mut g, "heads"));
    for i in 0..k {
        let mut member_loss = td_means[i];
        if let (Some((heads, _)), Some(hp)) = (&m.heads, &head_vars) {
            let out = heads.forward(&mut g, hp, d_vars[i], sv, av, rv, s2v)?;
            let l1 = loss_first(&mut g, &out, sv, av, rv, cfg.first_loss, cfg.kappa)?;
            let mut nrng = seeding::rng(seed, &[stream::NOISE, step, i as u64]);
            let na = standard_noise(b, heads.action_dim, &mut nrng);
            let nr = standard_noise(b, 1, &mut nrng);
            let ns = standard_noise(b, heads.state_dim, &mut nrng);
            let inputs = SecondInputs {
                s: sv,
                a: av,
                r: rv,
                a_hat: reparam_sample(&mut g, out.mu_a, out.var_a, &na)?,
                r_hat: reparam_sample(&mut g, out.mu_r, out.var_r, &nr)?,
                s_hat: reparam_sample(&mut g, out.mu_s, out.var_s, &ns)?,
                tau_features: fv,
            };
            let l2 = loss_second(
                &mut g,
                &m.critics.members[i],
                &member_vars[i],
                &d_vals[i],
                &inputs,
                cfg.reward_input,
                cfg.kappa,
            )?;
            let both = g.add(l1, l2)?;
            bayes_sum += g.value(both).mean();
            let per_sample = match cfg.eta_mode {
                EtaMode::Joint => g.scale(both, eta),
                EtaMode::Split => {
                    let s1 = g.scale(l1, eta);
                    g.add(s1, l2)?
                }
            };
            let wv = g.constant(Tensor::column(weights[i].clone()));
            let weighted = g.mul(per_sample, wv)?;
            let bayes = g.mean(weighted);
            member_loss = g.add(member_loss, bayes)?;
        }
        total = Some(match total {
            None => member_loss,
            Some(t) => g.add(t, member_loss)?,
        });
    }
    let total = total.expect("nonempty ensemble");
    finite(g.value(total).item(), "critic", step)?;
    let td_loss = td_means.iter().map(|&v| g.value(v).item()).sum::<f64>() / k as f64;
    let grads = g.backward(total)?;
    for ((c, opt), p) in m
        .critics
        .members
        .iter_mut()
        .zip(&mut m.critic_opts)
        .zip(&member_vars)
    {
        let gp = module_grads(&grads, p, c);
        opt.apply(c, &gp)?;
    }
    if let (Some((heads, opt)), Some(hp)) = (&mut m.heads, &head_vars) {
        let gp = module_grads(&grads, hp, heads);
        opt.apply(heads, &gp)?;
    }
    drop(g);

    // Value distribution toward the α-quantile of the target critics.
    let xin = critic_input_tensor(batch, cfg.reward_input);
    let target_d: Vec<Tensor> = m
        .critics
        .targets
        .iter()
        .map(|c| c.quantiles(&xin, &taus))
        .collect::<Result<_>>()?;
    let d_alpha = alpha_quantile_members(&target_d, cfg.alpha);
    let mut g = Graph::new();
    let pv = m.value.bind(&mut g, "value");
    let sv = g.constant(batch.states.clone());
    let fv = g.constant(feats);
    let z = m.value.forward(&mut g, &pv, sv, fv)?;
    let vl = value_expectile_loss(&mut g, z, &d_alpha, cfg.nu)?;
    let vloss = g.mean(vl);
    let value_loss = finite(g.value(vloss).item(), "value", step)?;
    let grads = g.backward(vloss)?;
    let gp = module_grads(&grads, &pv, &m.value);
    m.value_opt.apply(&mut m.value, &gp)?;
    drop(g);

    // Policy.
    let member_q: Vec<Vec<f64>> = target_d.iter().map(grid_mean).collect();
    let v_now = grid_mean(&m.value.quantiles(&batch.states, &taus)?);
    let mut buf = vec![0.0; k];
    let adv: Vec<f64> = (0..b)
        .map(|r| {
            for (slot, q) in buf.iter_mut().zip(&member_q) {
                *slot = q[r];
            }
            alpha_quantile(&buf, cfg.alpha) - v_now[r]
        })
        .collect();
    let policy_loss = policy_update(policy, policy_opt, cfg, batch, &adv, step)?;

    if (step + 1) % cfg.target_update_every == 0 {
        for (t, o) in m.critics.targets.iter_mut().zip(&m.critics.members) {
            polyak_update(t, o, cfg.polyak);
        }
        polyak_update(&mut m.value_target, &m.value, cfg.polyak);
    }

    let n_h = (k * b) as f64;
    Ok(StepTelemetry {
        td_loss,
        bayes_loss: if m.heads.is_some() { bayes_sum / k as f64 } else { 0.0 },
        value_loss,
        policy_loss,
        mean_entropy: entropies.iter().flatten().sum::<f64>() / n_h,
        mean_weight: weights.iter().flatten().sum::<f64>() / n_h,
        eta: if m.heads.is_some() { eta } else { 0.0 },
    })
}

/// IQL (twin squared-error critics, min aggregation) or RIQL (Huber
/// ensemble, α-quantile aggregation).
fn scalar_step(
    m: &mut ScalarModels,
    policy: &mut GaussianPolicy,
    policy_opt: &mut Adam,
    cfg: &TrainConfig,
    batch: &Batch,
    step: u64,
) -> Result<StepTelemetry> {
    let b = batch.len();
    let sa = hcat(&[&batch.states, &batch.actions]);
    let v_next = m.v.predict(&batch.next_states)?;
    let y = td_targets(&batch.rewards, &batch.dones, &v_next, cfg.gamma);

    let mut g = Graph::new();
    let x = g.constant(sa.clone());
    let kappa = match cfg.algorithm {
        Algorithm::Iql => None,
        _ => Some(cfg.kappa),
    };
    let vars: Vec<_> = m
        .q
        .iter()
        .enumerate()
        .map(|(i, q)| q.bind(&mut g, &format!("q{i}")))
        .collect();
    let mut total = None;
    let mut parts = Vec::new();
    for (q, p) in m.q.iter().zip(&vars) {
        let out = q.forward(&mut g, p, x)?;
        let per = scalar_td_loss(&mut g, out, &y, kappa)?;
        let l = g.mean(per);
        parts.push(l);
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.expect("nonempty ensemble");
    finite(g.value(total).item(), "critic", step)?;
    let td_loss = parts.iter().map(|&v| g.value(v).item()).sum::<f64>() / parts.len() as f64;
    let grads = g.backward(total)?;
    for ((q, opt), p) in m.q.iter_mut().zip(&mut m.q_opts).zip(&vars) {
        let gp = module_grads(&grads, p, q);
        opt.apply(q, &gp)?;
    }
    drop(g);

    let target_q: Vec<Tensor> = m.q_targets.iter().map(|q| q.predict(&sa)).collect::<Result<_>>()?;
    let agg: Vec<f64> = (0..b)
        .map(|r| {
            let vals: Vec<f64> = target_q.iter().map(|t| t.get(r, 0)).collect();
            match cfg.algorithm {
                Algorithm::Iql => vals.iter().copied().fold(f64::INFINITY, f64::min),
                _ => alpha_quantile(&vals, cfg.alpha),
            }
        })
        .collect();
    let agg_t = Tensor::column(agg.clone());

    let mut g = Graph::new();
    let pv = m.v.bind(&mut g, "v");
    let sv = g.constant(batch.states.clone());
    let v = m.v.forward(&mut g, &pv, sv)?;
    let vl = value_expectile_loss(&mut g, v, &agg_t, cfg.nu)?;
    let vloss = g.mean(vl);
    let value_loss = finite(g.value(vloss).item(), "value", step)?;
    let grads = g.backward(vloss)?;
    let gp = module_grads(&grads, &pv, &m.v);
    m.v_opt.apply(&mut m.v, &gp)?;
    drop(g);

    let v_now = m.v.predict(&batch.states)?;
    let adv: Vec<f64> = agg.iter().enumerate().map(|(r, q)| q - v_now.get(r, 0)).collect();
    let policy_loss = policy_update(policy, policy_opt, cfg, batch, &adv, step)?;

    if (step + 1) % cfg.target_update_every == 0 {
        for (t, o) in m.q_targets.iter_mut().zip(&m.q) {
            polyak_update(t, o, cfg.polyak);
        }
    }

    Ok(StepTelemetry {
        td_loss,
        bayes_loss: 0.0,
        value_loss,
        policy_loss,
        mean_entropy: f64::NAN,
        mean_weight: 1.0,
        eta: 0.0,
    })
}

/// Identity of a run, written next to its metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub algorithm: Algorithm,
    pub env: EnvId,
    /// Corruption setting of the training data, e.g. `clean`.
    pub setting: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from the newest checkpoint in the run directory.
    pub resume: bool,
    pub setting: String,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub epochs: Vec<StepTelemetry>,
    pub final_checkpoint: PathBuf,
    pub state: TrainState,
}

pub fn checkpoint_dir(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("ckpt_{epoch}"))
}

/// Epoch numbers of the checkpoints in `run_dir`, ascending.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(run_dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(run_dir, e)),
    };
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(run_dir, e))?;
        let name = entry.file_name();
        if let Some(n) = name.to_str().and_then(|s| s.strip_prefix("ckpt_")) {
            if let Ok(epoch) = n.parse() {
                out.push(epoch);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Train for `config.epochs` epochs, logging one metrics row per epoch and
/// checkpointing every `checkpoint_every` epochs and at the end.
pub fn run_training(
    view: &TrainingView<'_>,
    config: &TrainConfig,
    run_dir: &Path,
    opts: &RunOptions,
) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let metrics = run_dir.join(METRICS_FILE);
    let (mut state, start_epoch, mut rows) = if opts.resume {
        resume_state(run_dir, config, view)?
    } else {
        if metrics.exists() {
            return Err(Error::Config(format!(
                "{} already holds a run; resume it or pick another directory",
                run_dir.display()
            )));
        }
        (TrainState::for_view(config, view)?, 0, vec![METRICS_HEADER.to_string()])
    };
    let cpath = run_dir.join(CONFIG_FILE);
    fs::write(&cpath, config.to_kv_text()).map_err(|e| Error::io(&cpath, e))?;
    let info = RunInfo {
        algorithm: config.algorithm,
        env: view.env,
        setting: if opts.setting.is_empty() { "clean".into() } else { opts.setting.clone() },
        seed: config.seed,
    };
    let ipath = run_dir.join(RUN_FILE);
    let text = serde_json::to_string_pretty(&info).map_err(|e| Error::Json {
        path: ipath.clone(),
        source: e,
    })?;
    fs::write(&ipath, text).map_err(|e| Error::io(&ipath, e))?;
    fs::write(&metrics, rows.join("\n") + "\n").map_err(|e| Error::io(&metrics, e))?;

    let mut epochs = Vec::new();
    let mut final_checkpoint = checkpoint_dir(run_dir, start_epoch);
    for epoch in start_epoch + 1..=config.epochs {
        let mut steps = Vec::with_capacity(config.updates_per_epoch);
        for _ in 0..config.updates_per_epoch {
            steps.push(state.train_step(view)?);
        }
        let avg = StepTelemetry::average(&steps);
        let row = avg.csv_row(epoch);
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&metrics)
            .map_err(|e| Error::io(&metrics, e))?;
        writeln!(f, "{row}").map_err(|e| Error::io(&metrics, e))?;
        rows.push(row);
        epochs.push(avg);
        if epoch == config.epochs || (config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0) {
            final_checkpoint = checkpoint_dir(run_dir, epoch);
            state.save(&final_checkpoint)?;
        }
    }
    Ok(RunSummary {
        run_dir: run_dir.to_path_buf(),
        epochs,
        final_checkpoint,
        state,
    })
}

fn resume_state(
    run_dir: &Path,
    config: &TrainConfig,
    view: &TrainingView<'_>,
) -> Result<(TrainState, usize, Vec<String>)> {
    let Some(&epoch) = list_checkpoints(run_dir)?.last() else {
        return Ok((TrainState::for_view(config, view)?, 0, vec![METRICS_HEADER.to_string()]));
    };
    let dir = checkpoint_dir(run_dir, epoch);
    let state = TrainState::load(&dir)?;
    if &state.config != config {
        return Err(Error::Mismatch(format!(
            "checkpoint {} was trained with a different configuration",
            dir.display()
        )));
    }
    if state.env != view.env {
        return Err(Error::Mismatch(format!(
            "checkpoint {} is for {}, dataset is {}",
            dir.display(),
            state.env,
            view.env
        )));
    }
    if state.step != (epoch * config.updates_per_epoch) as u64 {
        return Err(Error::Checkpoint {
            path: dir,
            detail: format!("step {} does not match epoch {epoch}", state.step),
        });
    }
    let metrics = run_dir.join(METRICS_FILE);
    let text = fs::read_to_string(&metrics).map_err(|e| Error::io(&metrics, e))?;
    let mut rows: Vec<String> = text.lines().take(epoch + 1).map(str::to_string).collect();
    if rows.first().map(String::as_str) != Some(METRICS_HEADER) || rows.len() != epoch + 1 {
        return Err(Error::Mismatch(format!(
            "{} does not cover the {epoch} checkpointed epochs",
            metrics.display()
        )));
    }
    rows.truncate(epoch + 1);
    Ok((state, epoch, rows))
}

/// Parse a metrics log back into `(epoch, telemetry)` rows.
pub fn read_metrics(path: &Path) -> Result<Vec<(usize, StepTelemetry)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Mismatch(format!("{} has an unexpected header", path.display())));
    }
    let mut out = Vec::new();
    for (no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Mismatch(format!("{} line {}: bad number `{s}`", path.display(), no + 2)))
        };
        if cells.len() != 8 {
            return Err(Error::Mismatch(format!("{} line {}: expected 8 columns", path.display(), no + 2)));
        }
        let epoch = parse(cells[0])? as usize;
        let v: Vec<f64> = cells[1..].iter().map(|c| parse(c)).collect::<Result<_>>()?;
        out.push((
            epoch,
            StepTelemetry {
                td_loss: v[0],
                bayes_loss: v[1],
                value_loss: v[2],
                policy_loss: v[3],
                mean_entropy: v[4],
                mean_weight: v[5],
                eta: v[6],
            },
        ));
    }
    Ok(out)
}
