//! Diagonal-Gaussian observation heads reconstructing actions, rewards and
//! states from action-value samples, and the two variational losses built
//! on them.
//!
//! Head conditions: `φ_a(D, s, r, s′)`, `φ_r(D, s, a)`, `φ_s(D, a, r)`.
//! Each head emits a mean and a raw scale per output dimension; the
//! variance is `softplus(raw) + SIGMA_MIN`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::critic::{critic_input, QuantileNet};
use crate::error::{Error, Result};
use crate::nn::{Activation, Graph, Mlp, Module, Tensor, Var};

pub const SIGMA_MIN: f64 = 1e-3;

/// How `η_t` enters the critic objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaMode {
    /// `L_D + η·w·(L_first + L_second)`.
    Joint,
    /// `L_D + w·(η·L_first + L_second)`.
    Split,
}

/// Penalty on the standardized residual inside the reconstruction term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FirstLoss {
    /// `z²`.
    Quadratic,
    /// `2κ·l_H^κ(z)`: equals `z²` for `|z| ≤ κ`, linear beyond.
    Huber,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationHeads {
    pub action: Mlp,
    pub reward: Mlp,
    pub state: Mlp,
    pub n_quantiles: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

/// Gaussian parameters of the three heads; variances, not deviations.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub mu_a: Var,
    pub var_a: Var,
    pub mu_r: Var,
    pub var_r: Var,
    pub mu_s: Var,
    pub var_s: Var,
}

impl ObservationHeads {
    pub fn new(n_quantiles: usize, state_dim: usize, action_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let (n, ds, da) = (n_quantiles, state_dim, action_dim);
        ObservationHeads {
            action: Mlp::new(&[n + 2 * ds + 1, hidden, 2 * da], Activation::Identity, rng),
            reward: Mlp::new(&[n + ds + da, hidden, 2], Activation::Identity, rng),
            state: Mlp::new(&[n + da + 1, hidden, 2 * ds], Activation::Identity, rng),
            n_quantiles,
            state_dim,
            action_dim,
        }
    }

    /// Mask routing: each head sees only its own condition set.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        d_repr: Var,
        s: Var,
        a: Var,
        r: Var,
        s_next: Var,
    ) -> Result<HeadOutputs> {
        if g.shape(d_repr)[1] != self.n_quantiles {
            return Err(Error::shape(
                "heads_forward",
                format!("representation width {} but heads expect {}", g.shape(d_repr)[1], self.n_quantiles),
            ));
        }
        let na = self.action.num_tensors();
        let nr = self.reward.num_tensors();
        let (pa, rest) = p.split_at(na);
        let (pr, ps) = rest.split_at(nr);

        let xa = g.concat_cols(&[d_repr, s, r, s_next])?;
        let oa = self.action.forward(g, pa, xa)?;
        let (mu_a, var_a) = split_gaussian(g, oa, self.action_dim)?;

        let xr = g.concat_cols(&[d_repr, s, a])?;
        let or = self.reward.forward(g, pr, xr)?;
        let (mu_r, var_r) = split_gaussian(g, or, 1)?;

        let xs = g.concat_cols(&[d_repr, a, r])?;
        let os = self.state.forward(g, ps, xs)?;
        let (mu_s, var_s) = split_gaussian(g, os, self.state_dim)?;

        Ok(HeadOutputs {
            mu_a,
            var_a,
            mu_r,
            var_r,
            mu_s,
            var_s,
        })
    }
}

impl Module for ObservationHeads {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.action.params();
        v.extend(self.reward.params());
        v.extend(self.state.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.action.params_mut();
        v.extend(self.reward.params_mut());
        v.extend(self.state.params_mut());
        v
    }
}

/// Columns `start..start+len` of `x`, via a constant selector.
fn take_cols(g: &mut Graph, x: Var, start: usize, len: usize) -> Result<Var> {
    let c = g.shape(x)[1];
    let mut sel = Tensor::zeros(c, len);
    for j in 0..len {
        sel.set(start + j, j, 1.0);
    }
    let sv = g.constant(sel);
    g.matmul(x, sv)
}

fn split_gaussian(g: &mut Graph, out: Var, dim: usize) -> Result<(Var, Var)> {
    let mu = take_cols(g, out, 0, dim)?;
    let raw = take_cols(g, out, dim, dim)?;
    let sp = g.softplus(raw);
    Ok((mu, g.add_scalar(sp, SIGMA_MIN)))
}

/// `½ Σ_d [φ((μ_d − x_d)/σ_d) + log σ_d²]` per row, `B x 1`.
pub fn gaussian_term(g: &mut Graph, mu: Var, var: Var, x: Var, first: FirstLoss, kappa: f64) -> Result<Var> {
    let diff = g.sub(mu, x)?;
    let quad = match first {
        FirstLoss::Quadratic => {
            let sq = g.square(diff);
            g.div(sq, var)?
        }
        FirstLoss::Huber => {
            let sd = g.sqrt(var);
            let z = g.div(diff, sd)?;
            let h = g.huber(z, kappa);
            g.scale(h, 2.0 * kappa)
        }
    };
    let logvar = g.log(var);
    let both = g.add(quad, logvar)?;
    let rows = g.sum_cols(both);
    Ok(g.scale(rows, 0.5))
}

/// Gaussian reconstruction loss over the three heads, `B x 1`.
pub fn loss_first(
    g: &mut Graph,
    out: &HeadOutputs,
    s: Var,
    a: Var,
    r: Var,
    first: FirstLoss,
    kappa: f64,
) -> Result<Var> {
    let la = gaussian_term(g, out.mu_a, out.var_a, a, first, kappa)?;
    let lr = gaussian_term(g, out.mu_r, out.var_r, r, first, kappa)?;
    let ls = gaussian_term(g, out.mu_s, out.var_s, s, first, kappa)?;
    let t = g.add(la, lr)?;
    g.add(t, ls)
}

/// `μ + √Σ ⊙ noise`.
pub fn reparam_sample(g: &mut Graph, mu: Var, var: Var, noise: &Tensor) -> Result<Var> {
    let sd = g.sqrt(var);
    let nv = g.constant(noise.clone());
    let shift = g.mul(sd, nv)?;
    g.add(mu, shift)
}

/// Standard normal noise, `rows x cols`.
pub fn standard_noise(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized above")
}

/// Inputs shared by the consistency loss branches.
pub struct SecondInputs {
    pub s: Var,
    pub a: Var,
    pub r: Var,
    pub s_hat: Var,
    pub a_hat: Var,
    pub r_hat: Var,
    pub tau_features: Var,
}

/// Huber consistency between the member's clean-input quantiles (constant
/// `clean`, `B x N`) and its quantiles at each reconstructed input, `B x 1`.
pub fn loss_second(
    g: &mut Graph,
    member: &QuantileNet,
    p: &[Var],
    clean: &Tensor,
    x: &SecondInputs,
    reward_input: bool,
    kappa: f64,
) -> Result<Var> {
    let target = g.constant(clean.clone());
    let branches = [
        (x.s, x.a_hat, x.r),
        (x.s, x.a, x.r_hat),
        (x.s_hat, x.a, x.r),
    ];
    let mut total: Option<Var> = None;
    for (s, a, r) in branches {
        let input = critic_input(g, s, a, r, reward_input)?;
        let d = member.forward(g, p, input, x.tau_features)?;
        let diff = g.sub(target, d)?;
        let h = g.huber(diff, kappa);
        let l = g.sum_cols(h);
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    Ok(total.expect("three branches"))
}

/// Linear schedule from `start` at step 0 to `end` at step `total − 1`.
pub fn eta_at(step: u64, total: u64, start: f64, end: f64) -> f64 {
    if total <= 1 {
        return end;
    }
    let frac = (step.min(total - 1)) as f64 / (total - 1) as f64;
    start + frac * (end - start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use crate::nn::cosine_features;
    use crate::seeding;

    const B: usize = 3;
    const N: usize = 4;

    fn setup() -> (ObservationHeads, QuantileNet, Tensor, Tensor, Tensor, Tensor) {
        let mut rng = seeding::rng(11, &[]);
        let mut heads = ObservationHeads::new(N, 2, 1, 5, &mut rng);
        let mut critic = QuantileNet::new(4, &[6], 5, 0, &mut rng);
        // Nonzero biases keep pre-activations off the rectifier kink.
        for p in heads.params_mut().into_iter().chain(critic.params_mut()) {
            if p.rows() == 1 {
                p.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.05..0.3));
            }
        }
        let s = standard_noise(B, 2, &mut rng);
        let a = standard_noise(B, 1, &mut rng).map(|v| v.tanh());
        let r = standard_noise(B, 1, &mut rng);
        let s2 = standard_noise(B, 2, &mut rng);
        (heads, critic, s, a, r, s2)
    }

    #[test]
    fn variances_respect_floor() {
        let (mut heads, _, s, a, r, s2) = setup();
        for p in heads.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v *= 40.0);
        }
        let mut g = Graph::new();
        let p = heads.bind_frozen(&mut g);
        let d = g.constant(Tensor::full(B, N, -30.0));
        let (sv, av, rv, s2v) = (g.constant(s), g.constant(a), g.constant(r), g.constant(s2));
        let o = heads.forward(&mut g, &p, d, sv, av, rv, s2v).unwrap();
        for v in [o.var_a, o.var_r, o.var_s] {
            assert!(g.value(v).data().iter().all(|&x| x >= SIGMA_MIN));
        }
    }

    #[test]
    fn next_state_only_reaches_action_head() {
        let (heads, _, s, a, r, s2) = setup();
        let run = |s2: Tensor| {
            let mut g = Graph::new();
            let p = heads.bind_frozen(&mut g);
            let d = g.constant(Tensor::full(B, N, 0.4));
            let (sv, av, rv, s2v) = (g.constant(s.clone()), g.constant(a.clone()), g.constant(r.clone()), g.constant(s2));
            let o = heads.forward(&mut g, &p, d, sv, av, rv, s2v).unwrap();
            [o.mu_a, o.var_a, o.mu_r, o.var_r, o.mu_s, o.var_s].map(|v| g.value(v).clone())
        };
        let before = run(s2.clone());
        let after = run(s2.map(|v| v + 1.0));
        assert_ne!(before[0], after[0]);
        for k in 2..6 {
            assert_eq!(before[k], after[k]);
        }
    }

    #[test]
    fn gaussian_term_worked_values() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::from_vec(2, 1, vec![1.0, 0.3]).unwrap());
        let x = g.constant(Tensor::from_vec(2, 1, vec![0.0, 0.3]).unwrap());
        let var = g.constant(Tensor::full(2, 1, 1.0));
        let l = gaussian_term(&mut g, mu, var, x, FirstLoss::Quadratic, 0.1).unwrap();
        assert_eq!(g.value(l).data(), &[0.5, 0.0]);
        let h = gaussian_term(&mut g, mu, var, x, FirstLoss::Huber, 1.0).unwrap();
        assert!((g.value(h).get(0, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reparam_zero_noise_is_mean() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::from_vec(1, 2, vec![0.2, -1.0]).unwrap());
        let var = g.constant(Tensor::from_vec(1, 2, vec![4.0, 0.5]).unwrap());
        let z = reparam_sample(&mut g, mu, var, &Tensor::zeros(1, 2)).unwrap();
        assert_eq!(g.value(z).data(), &[0.2, -1.0]);
    }

    #[test]
    fn reparam_moments() {
        let n = 100_000;
        let noise = standard_noise(n, 1, &mut seeding::rng(3, &[]));
        let mut g = Graph::new();
        let mu = g.constant(Tensor::full(n, 1, 1.5));
        let var = g.constant(Tensor::full(n, 1, 0.25));
        let z = reparam_sample(&mut g, mu, var, &noise).unwrap();
        let v = g.value(z);
        let mean = v.mean();
        let sd = (v.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((mean - 1.5).abs() < 4.0 * 0.5 / (n as f64).sqrt());
        assert!((sd - 0.5).abs() < 0.01);
        assert_eq!(noise, standard_noise(n, 1, &mut seeding::rng(3, &[])));
    }

    #[test]
    fn second_loss_vanishes_on_identical_inputs() {
        let (_, critic, s, a, r, _) = setup();
        let taus = [0.2, 0.4, 0.6, 0.8];
        let mut g = Graph::new();
        let p = critic.bind_frozen(&mut g);
        let (sv, av, rv) = (g.constant(s.clone()), g.constant(a.clone()), g.constant(r.clone()));
        let f = g.constant(cosine_features(&taus, 64).unwrap());
        let x = critic_input(&mut g, sv, av, rv, true).unwrap();
        let clean = critic.forward(&mut g, &p, x, f).unwrap();
        let clean = g.value(clean).clone();
        let inputs = SecondInputs {
            s: sv,
            a: av,
            r: rv,
            s_hat: sv,
            a_hat: av,
            r_hat: rv,
            tau_features: f,
        };
        let l = loss_second(&mut g, &critic, &p, &clean, &inputs, true, 0.1).unwrap();
        assert!(g.value(l).data().iter().all(|&v| v == 0.0));
        assert!((crate::nn::huber(0.5, 1.0) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn eta_schedule_endpoints() {
        assert_eq!(eta_at(0, 101, 1e-4, 1e-2), 1e-4);
        assert!((eta_at(100, 101, 1e-4, 1e-2) - 1e-2).abs() < 1e-18);
        assert!((eta_at(50, 101, 1e-4, 1e-2) - 5.05e-3).abs() < 1e-15);
        assert_eq!(eta_at(7, 101, 0.0, 0.0), 0.0);
    }

    /// Full Bayesian loss for one member, gradient-checked over heads and
    /// critic together.
    #[test]
    fn bayes_loss_gradients_match_finite_differences() {
        let (heads, critic, s, a, r, s2) = setup();
        let taus = [0.1, 0.35, 0.6, 0.9];
        let feats = cosine_features(&taus, 64).unwrap();
        let mut rng = seeding::rng(2, &[]);
        let (na, nr, ns) = (standard_noise(B, 1, &mut rng), standard_noise(B, 1, &mut rng), standard_noise(B, 2, &mut rng));
        let clean = {
            let x = Tensor::from_vec(B, 4, (0..B).flat_map(|b| [s.row(b), a.row(b), r.row(b)].concat()).collect()).unwrap();
            critic.quantiles(&x, &taus).unwrap()
        };
        let nh = heads.params().len();
        for first in [FirstLoss::Quadratic, FirstLoss::Huber] {
            let mut params: Vec<Tensor> = heads.params().into_iter().chain(critic.params()).cloned().collect();
            let err = check_gradients(&mut params, |g, p| {
                let (ph, pc) = p.split_at(nh);
                let (sv, av, rv, s2v) = (g.constant(s.clone()), g.constant(a.clone()), g.constant(r.clone()), g.constant(s2.clone()));
                let f = g.constant(feats.clone());
                let x = critic_input(g, sv, av, rv, true)?;
                let d = critic.forward(g, pc, x, f)?;
                let o = heads.forward(g, ph, d, sv, av, rv, s2v)?;
                let l1 = loss_first(g, &o, sv, av, rv, first, 0.5)?;
                let inputs = SecondInputs {
                    s: sv,
                    a: av,
                    r: rv,
                    s_hat: reparam_sample(g, o.mu_s, o.var_s, &ns)?,
                    a_hat: reparam_sample(g, o.mu_a, o.var_a, &na)?,
                    r_hat: reparam_sample(g, o.mu_r, o.var_r, &nr)?,
                    tau_features: f,
                };
                let l2 = loss_second(g, &critic, pc, &clean, &inputs, true, 0.5)?;
                let both = g.add(l1, l2)?;
                Ok(g.mean(both))
            })
            .unwrap();
            assert!(err < 1e-4, "{first:?}: {err}");
        }
    }
}
