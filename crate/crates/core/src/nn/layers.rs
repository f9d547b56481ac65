use rand::Rng;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Anything that owns trainable tensors in a fixed order.
pub trait Module {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Register every parameter on the tape as a trainable leaf.
    fn bind(&self, g: &mut Graph, name: &str) -> Vec<Var> {
        self.params()
            .into_iter()
            .enumerate()
            .map(|(i, p)| g.param(p.clone(), format!("{name}.{i}")))
            .collect()
    }

    /// Register every parameter as a constant (no gradient).
    fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| g.constant(p.clone()))
            .collect()
    }

    fn num_scalars(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

/// Affine map `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// He-style uniform fan-in initialization, zero bias.
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / input.max(1) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Linear {
            weight: Tensor::from_vec(input, output, data).expect("sized above"),
            bias: Tensor::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let h = g.matmul(x, p[0])?;
        g.add_row(h, p[1])
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Multilayer perceptron: rectified-linear hidden layers, configurable output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub output_activation: Activation,
}

impl Mlp {
    /// `dims = [input, hidden..., output]`.
    pub fn new(dims: &[usize], output_activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Mlp {
            layers,
            output_activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::output_dim)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Linear::output_dim));
        d
    }

    pub fn num_tensors(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let xs = g.shape(x);
        if xs[1] != self.input_dim() {
            return Err(Error::shape(
                "mlp_forward",
                format!("input width {} but layer expects {}", xs[1], self.input_dim()),
            ));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, &p[2 * i..2 * i + 2], h)?;
            if i < last || self.output_activation == Activation::Relu {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Forward pass outside of any training graph.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xv)?;
        Ok(g.value(out).clone())
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Gradients for the leaves `vars` bound from `module`, zeros where none arrived.
pub fn module_grads<M: Module>(grads: &Gradients, vars: &[Var], module: &M) -> Vec<Tensor> {
    vars.iter()
        .zip(module.params())
        .map(|(&v, p)| grads.wrt_or_zeros(v, p))
        .collect()
}

/// `target ← (1 − mix)·target + mix·online`, element-wise.
pub fn polyak_update<M: Module>(target: &mut M, online: &M, mix: f64) {
    debug_assert!((0.0..=1.0).contains(&mix));
    for (t, o) in target.params_mut().into_iter().zip(online.params()) {
        for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = (1.0 - mix) * *tv + mix * ov;
        }
    }
}

/// Copy every tensor of `src` into `dst` (shapes must agree).
pub fn copy_params<M: Module>(dst: &mut M, src: &M) {
    for (d, s) in dst.params_mut().into_iter().zip(src.params()) {
        d.data_mut().copy_from_slice(s.data());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matmul_oracle(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        (0..w.cols())
            .map(|j| b.get(0, j) + (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum::<f64>())
            .collect()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mlp = Mlp {
            layers: vec![Linear {
                weight: Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                bias: Tensor::zeros(1, 2),
            }],
            output_activation: Activation::Identity,
        };
        let x = Tensor::from_vec(1, 2, vec![0.3, -7.0]).unwrap();
        assert_eq!(mlp.predict(&x).unwrap(), x);
    }

    #[test]
    fn relu_kills_negative_preactivation() {
        let mlp = Mlp {
            layers: vec![
                Linear {
                    weight: Tensor::from_vec(1, 1, vec![1.0]).unwrap(),
                    bias: Tensor::zeros(1, 1),
                },
                Linear {
                    weight: Tensor::from_vec(1, 1, vec![5.0]).unwrap(),
                    bias: Tensor::from_vec(1, 1, vec![0.25]).unwrap(),
                },
            ],
            output_activation: Activation::Identity,
        };
        let out = mlp.predict(&Tensor::scalar(-3.0)).unwrap();
        assert_eq!(out.item(), 0.25);
    }

    #[test]
    fn random_mlp_matches_hand_rolled_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mlp = Mlp::new(&[3, 5, 4, 2], Activation::Identity, &mut rng);
        for p in mlp.params_mut() {
            for v in p.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let x = Tensor::from_vec(2, 3, vec![0.1, -0.4, 0.9, 1.2, 0.0, -0.3]).unwrap();
        let out = mlp.predict(&x).unwrap();
        for r in 0..2 {
            let mut h = x.row(r).to_vec();
            for (i, l) in mlp.layers.iter().enumerate() {
                h = matmul_oracle(&h, &l.weight, &l.bias);
                if i + 1 < mlp.layers.len() {
                    h.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            for (a, b) in out.row(r).iter().zip(&h) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&[3, 4, 1], Activation::Identity, &mut rng);
        assert!(mlp.predict(&Tensor::zeros(2, 2)).is_err());
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mlp = Mlp::new(&[3, 6, 6, 2], Activation::Identity, &mut rng);
        let x = Tensor::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut params: Vec<Tensor> = mlp.params().into_iter().cloned().collect();
        let err = check_gradients(&mut params, |g, p| {
            let xv = g.constant(x.clone());
            let out = mlp.forward(g, p, xv)?;
            let sq = g.square(out);
            Ok(g.mean(sq))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn polyak_endpoints_and_mix() {
        let mut target = Linear {
            weight: Tensor::zeros(1, 1),
            bias: Tensor::zeros(1, 1),
        };
        let online = Linear {
            weight: Tensor::scalar(1.0),
            bias: Tensor::scalar(1.0),
        };
        let before = target.clone();
        polyak_update(&mut target, &online, 0.0);
        assert_eq!(target, before);
        polyak_update(&mut target, &online, 0.05);
        assert!((target.weight.item() - 0.05).abs() < 1e-15);
        polyak_update(&mut target, &online, 1.0);
        assert_eq!(target, online);
    }
}
