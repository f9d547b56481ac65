//! Quantile critics `D_θ(s, a, r; τ)`, the value distribution `Z_ψ(s; τ)`,
//! their losses, and ensemble aggregation.
//!
//! A quantile network is `f(g(x) ⊙ h(τ))`: a rectified trunk `g`, the cosine
//! τ-embedding `h`, and a head `f`. Q and V are the MEAN over the τ grid.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{cosine_features, Activation, Graph, Mlp, Module, TauEmbedding, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct QuantileNet {
    pub trunk: Mlp,
    pub embed: TauEmbedding,
    pub head: Mlp,
}

impl QuantileNet {
    /// `hidden` lists the trunk's hidden widths; the trunk ends at
    /// `embed_dim`. `head_hidden = 0` makes the head a single affine map.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        embed_dim: usize,
        head_hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(embed_dim);
        let trunk = Mlp::new(&dims, Activation::Relu, rng);
        let embed = TauEmbedding::new(embed_dim, rng);
        let head_dims: Vec<usize> = if head_hidden == 0 {
            vec![embed_dim, 1]
        } else {
            vec![embed_dim, head_hidden, 1]
        };
        let head = Mlp::new(&head_dims, Activation::Identity, rng);
        QuantileNet { trunk, embed, head }
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    /// Quantile values, `B x N`, for inputs `x` (`B x in`) and the cosine
    /// features of an `N`-level grid.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var, tau_features: Var) -> Result<Var> {
        let nt = self.trunk.num_tensors();
        let (pt, rest) = p.split_at(nt);
        let (pe, ph) = rest.split_at(2);
        let b = g.shape(x)[0];
        let n = g.shape(tau_features)[0];
        let gx = self.trunk.forward(g, pt, x)?;
        let ht = self.embed.forward(g, pe, tau_features)?;
        let joint = g.outer_hadamard(gx, ht)?;
        let out = self.head.forward(g, ph, joint)?;
        g.reshape(out, b, n)
    }

    /// Frozen evaluation at `taus`.
    pub fn quantiles(&self, x: &Tensor, taus: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let f = g.constant(cosine_features(taus, self.embed.basis())?);
        let out = self.forward(&mut g, &p, xv, f)?;
        Ok(g.value(out).clone())
    }
}

impl Module for QuantileNet {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.trunk.params();
        v.extend(self.embed.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.trunk.params_mut();
        v.extend(self.embed.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}

/// `K` quantile critics with their target copies.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticEnsemble {
    pub members: Vec<QuantileNet>,
    pub targets: Vec<QuantileNet>,
}

impl CriticEnsemble {
    pub fn new(k: usize, build: impl FnMut() -> QuantileNet) -> Self {
        let members: Vec<QuantileNet> = std::iter::repeat_with(build).take(k).collect();
        CriticEnsemble {
            targets: members.clone(),
            members,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Critic input `s ‖ a ‖ r`, or `s ‖ a` when the reward is not an input.
pub fn critic_input(g: &mut Graph, s: Var, a: Var, r: Var, reward_input: bool) -> Result<Var> {
    if reward_input {
        g.concat_cols(&[s, a, r])
    } else {
        g.concat_cols(&[s, a])
    }
}

/// `n` levels drawn from `U(0, 1)`, excluding 0.
pub fn sample_taus(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let t: f64 = rng.gen();
            if t > 0.0 {
                break t;
            }
        })
        .collect()
}

/// Quantile values of one member at `taus`.
pub fn sample_quantiles(member: &QuantileNet, x: &Tensor, taus: &[f64]) -> Result<Tensor> {
    if taus.is_empty() {
        return Err(Error::Config("empty quantile grid".into()));
    }
    member.quantiles(x, taus)
}

/// Mean over the grid, one value per row.
pub fn grid_mean(values: &Tensor) -> Vec<f64> {
    let n = values.cols().max(1) as f64;
    (0..values.rows())
        .map(|r| values.row(r).iter().sum::<f64>() / n)
        .collect()
}

pub fn q_value(member: &QuantileNet, x: &Tensor, taus: &[f64]) -> Result<Vec<f64>> {
    Ok(grid_mean(&sample_quantiles(member, x, taus)?))
}

/// `r + γ(1 − done) Z^{τ′}(s′)`, `B x N′`.
pub fn td_targets(rewards: &Tensor, dones: &Tensor, z_next: &Tensor, gamma: f64) -> Tensor {
    let mut t = z_next.clone();
    let m = t.cols();
    for (row, chunk) in t.data_mut().chunks_mut(m.max(1)).enumerate() {
        let r = rewards.get(row, 0);
        let cont = gamma * (1.0 - dones.get(row, 0));
        for v in chunk {
            *v = r + cont * *v;
        }
    }
    t
}

/// Per-sample quantile-Huber TD loss, `B x 1`: average over `N′`, sum over `N`.
pub fn quantile_huber_td_loss(
    g: &mut Graph,
    pred: Var,
    targets: &Tensor,
    taus: &[f64],
    kappa: f64,
) -> Result<Var> {
    g.quantile_huber(pred, targets.clone(), taus, kappa)
}

/// Scalar critic regression toward constant targets `y`, `B x 1`: Huber
/// with threshold `kappa`, or squared error when `kappa` is `None`.
pub fn scalar_td_loss(g: &mut Graph, pred: Var, y: &Tensor, kappa: Option<f64>) -> Result<Var> {
    let yv = g.constant(y.clone());
    let diff = g.sub(yv, pred)?;
    Ok(match kappa {
        Some(k) => g.huber(diff, k),
        None => g.square(diff),
    })
}

/// Per-sample expectile loss of `Z_ψ` toward constant `D_α`, summed over
/// the grid, `B x 1`.
pub fn value_expectile_loss(g: &mut Graph, z: Var, d_alpha: &Tensor, nu: f64) -> Result<Var> {
    let target = g.constant(d_alpha.clone());
    let x = g.sub(target, z)?;
    let l = g.expectile(x, nu);
    Ok(g.sum_cols(l))
}

/// Order statistic at position `α(K − 1)` with linear interpolation.
pub fn alpha_quantile(values: &[f64], alpha: f64) -> f64 {
    assert!(!values.is_empty(), "alpha_quantile needs at least one value");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = alpha.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    v[lo] + frac * (v[hi] - v[lo])
}

/// Element-wise α-quantile across equally shaped member tensors.
pub fn alpha_quantile_members(members: &[Tensor], alpha: f64) -> Tensor {
    let mut out = members[0].clone();
    let mut buf = vec![0.0; members.len()];
    for i in 0..out.len() {
        for (b, m) in buf.iter_mut().zip(members) {
            *b = m.data()[i];
        }
        out.data_mut()[i] = alpha_quantile(&buf, alpha);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use crate::seeding;

    fn net(seed: u64) -> QuantileNet {
        QuantileNet::new(3, &[8], 6, 0, &mut seeding::rng(seed, &[]))
    }

    fn inputs() -> Tensor {
        Tensor::from_vec(2, 3, vec![0.1, -0.5, 0.7, 1.0, 0.2, -0.3]).unwrap()
    }

    #[test]
    fn quantiles_are_deterministic() {
        let q = net(1);
        let taus = [0.1, 0.5, 0.9];
        let a = sample_quantiles(&q, &inputs(), &taus).unwrap();
        assert_eq!(a, sample_quantiles(&q, &inputs(), &taus).unwrap());
        assert_eq!(a.shape(), [2, 3]);
    }

    #[test]
    fn rows_match_single_level_calls() {
        let q = net(2);
        let taus = [0.2, 0.7];
        let all = sample_quantiles(&q, &inputs(), &taus).unwrap();
        for (j, &t) in taus.iter().enumerate() {
            let one = sample_quantiles(&q, &inputs(), &[t]).unwrap();
            for r in 0..2 {
                assert!((one.get(r, 0) - all.get(r, j)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn q_value_of_constant_outputs() {
        let mut q = net(3);
        for p in q.head.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        q.head.layers[0].bias.set(0, 0, 2.5);
        assert_eq!(q_value(&q, &inputs(), &[0.3, 0.6, 0.9]).unwrap(), vec![2.5, 2.5]);
    }

    #[test]
    fn grid_permutation_keeps_q() {
        let q = net(4);
        let a = q_value(&q, &inputs(), &[0.1, 0.4, 0.8]).unwrap();
        let b = q_value(&q, &inputs(), &[0.8, 0.1, 0.4]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn td_loss_worked_value() {
        let mut g = Graph::new();
        let pred = g.constant(Tensor::scalar(0.0));
        let l = quantile_huber_td_loss(&mut g, pred, &Tensor::scalar(0.5), &[0.5], 1.0).unwrap();
        assert!((g.value(l).item() - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn td_loss_zero_and_symmetry() {
        let mut g = Graph::new();
        let pred = g.constant(Tensor::from_vec(1, 2, vec![0.3, 0.3]).unwrap());
        let zero = quantile_huber_td_loss(&mut g, pred, &Tensor::from_vec(1, 1, vec![0.3]).unwrap(), &[0.2, 0.9], 0.1).unwrap();
        assert_eq!(g.value(zero).item(), 0.0);
        let p0 = g.constant(Tensor::scalar(0.0));
        let up = quantile_huber_td_loss(&mut g, p0, &Tensor::scalar(0.7), &[0.5], 0.1).unwrap();
        let down = quantile_huber_td_loss(&mut g, p0, &Tensor::scalar(-0.7), &[0.5], 0.1).unwrap();
        assert_eq!(g.value(up).item(), g.value(down).item());
    }

    #[test]
    fn td_targets_mask_terminals() {
        let z = Tensor::from_vec(2, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        let t = td_targets(&Tensor::column(vec![1.0, 1.0]), &Tensor::column(vec![0.0, 1.0]), &z, 0.5);
        assert_eq!(t.data(), &[1.5, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn expectile_worked_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_vec(1, 2, vec![1.0, -1.0]).unwrap());
        let l = value_expectile_loss(&mut g, z, &Tensor::from_vec(1, 2, vec![0.0, 0.0]).unwrap(), 0.7).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-12);
        assert!((crate::nn::expectile(-1.0, 0.7) - 0.3).abs() < 1e-12);
        assert!((crate::nn::expectile(1.0, 0.7) - 0.7).abs() < 1e-12);
        for x in [-2.0, -0.1, 0.4, 3.0] {
            assert_eq!(crate::nn::expectile(x, 0.5), 0.5 * x * x);
        }
    }

    #[test]
    fn alpha_quantile_examples() {
        assert_eq!(alpha_quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.25), 2.0);
        assert_eq!(alpha_quantile(&[4.0, -1.0, 3.0], 0.0), -1.0);
        assert_eq!(alpha_quantile(&[4.0, -1.0, 3.0], 1.0), 4.0);
        assert_eq!(alpha_quantile(&[7.5], 0.6), 7.5);
        assert!((alpha_quantile(&[0.0, 1.0], 0.3) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn critic_and_losses_pass_gradient_check() {
        let q = net(6);
        let taus = [0.15, 0.5, 0.85];
        let feats = cosine_features(&taus, q.embed.basis()).unwrap();
        let targets = Tensor::from_vec(2, 2, vec![0.4, -0.2, 1.1, 0.05]).unwrap();
        let mut params: Vec<Tensor> = q.params().into_iter().cloned().collect();
        let err = check_gradients(&mut params, |g, p| {
            let x = g.constant(inputs());
            let f = g.constant(feats.clone());
            let d = q.forward(g, p, x, f)?;
            let td = quantile_huber_td_loss(g, d, &targets, &taus, 0.3)?;
            let v = value_expectile_loss(g, d, &Tensor::full(2, 3, 0.1), 0.7)?;
            let both = g.add(td, v)?;
            Ok(g.mean(both))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
