//! Tanh-squashed Gaussian policy trained by advantage-weighted regression.

use rand::Rng;

use crate::dataset::TrainingView;
use crate::error::Result;
use crate::nn::{module_grads, Activation, Adam, AdamConfig, Graph, Mlp, Module, Tensor, Var};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Actions are pulled this far inside `±1` before the inverse squash.
pub const ACTION_CLIP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    pub net: Mlp,
    /// State-independent, `1 x d_a`.
    pub log_std: Tensor,
}

impl GaussianPolicy {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut dims = vec![state_dim];
        dims.extend_from_slice(hidden);
        dims.push(action_dim);
        GaussianPolicy {
            net: Mlp::new(&dims, Activation::Identity, rng),
            log_std: Tensor::zeros(1, action_dim),
        }
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.cols()
    }

    /// `log π(a|s)` per row, `B x 1`: the pre-squash Gaussian density at
    /// `atanh(a)` with the change-of-variables correction `−Σ log(1 − a²)`.
    pub fn log_prob(&self, g: &mut Graph, p: &[Var], s: Var, actions: &Tensor) -> Result<Var> {
        let (pn, pl) = p.split_at(self.net.num_tensors());
        let mean = self.net.forward(g, pn, s)?;
        let b = actions.rows();
        let clipped = actions.map(|a| a.clamp(-1.0 + ACTION_CLIP, 1.0 - ACTION_CLIP));
        let u = g.constant(clipped.map(f64::atanh));
        let log_std = g.clamp(pl[0], LOG_STD_MIN, LOG_STD_MAX);
        let log_std_b = g.broadcast_rows(log_std, b)?;
        let std = g.exp(log_std_b);
        let diff = g.sub(u, mean)?;
        let z = g.div(diff, std)?;
        let zz = g.square(z);
        let half = g.scale(zz, -0.5);
        let per_dim = g.sub(half, log_std_b)?;
        let summed = g.sum_cols(per_dim);
        let d = self.action_dim() as f64;
        let correction: Vec<f64> = (0..b)
            .map(|r| {
                clipped.row(r).iter().map(|a| (1.0 - a * a).ln()).sum::<f64>()
                    + 0.5 * d * (2.0 * std::f64::consts::PI).ln()
            })
            .collect();
        let cv = g.constant(Tensor::column(correction));
        g.sub(summed, cv)
    }

    /// Deterministic evaluation action: the squashed mean.
    pub fn act_eval(&self, states: &Tensor) -> Result<Tensor> {
        Ok(self.net.predict(states)?.map(f64::tanh))
    }
}

impl Module for GaussianPolicy {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.net.params();
        v.push(&self.log_std);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.net.params_mut();
        v.push(&mut self.log_std);
        v
    }
}

/// `min(exp(β·A), w_max)` per sample.
pub fn awr_weights(advantages: &[f64], beta: f64, w_max: f64) -> Vec<f64> {
    advantages.iter().map(|a| (beta * a).exp().min(w_max)).collect()
}

/// `−mean(w · log π(a|s))` with constant weights.
pub fn awr_loss(
    policy: &GaussianPolicy,
    g: &mut Graph,
    p: &[Var],
    states: Var,
    actions: &Tensor,
    weights: &[f64],
) -> Result<Var> {
    let lp = policy.log_prob(g, p, states, actions)?;
    let w = g.constant(Tensor::column(weights.to_vec()));
    let weighted = g.mul(lp, w)?;
    let m = g.mean(weighted);
    Ok(g.scale(m, -1.0))
}

/// Plain behavior cloning: AWR with unit weights. Returns the loss curve.
pub fn fit_behavior_cloning(
    policy: &mut GaussianPolicy,
    data: &TrainingView<'_>,
    steps: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let mut opt = Adam::new(
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        policy,
    );
    let ones = vec![1.0; batch_size];
    let mut curve = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch = data.sample_batch(batch_size, rng);
        let mut g = Graph::new();
        let p = policy.bind(&mut g, "policy");
        let s = g.constant(batch.states);
        let loss = awr_loss(policy, &mut g, &p, s, &batch.actions, &ones)?;
        curve.push(g.value(loss).item());
        let grads = g.backward(loss)?;
        let gp = module_grads(&grads, &p, policy);
        opt.apply(policy, &gp)?;
    }
    Ok(curve)
}
