//! Random and adversarial data corruption.
//!
//! Each requested element gets its own selection pass of exactly `⌈c·n⌉`
//! rows drawn without replacement; passes run in the fixed order
//! state → action → reward → dynamics and their labels accumulate.
//! Noise scales always use the clean-data statistics frozen in the dataset.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacker::AttackerCritic;
use crate::dataset::{CorruptionLabels, Dataset};
use crate::error::{Error, Result};
use crate::nn::{Graph, Module, Tensor};
use crate::seeding::{self, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionMode {
    Random,
    Adversarial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Element {
    State,
    Action,
    Reward,
    Dynamics,
}

impl Element {
    pub const ALL: [Element; 4] = [
        Element::State,
        Element::Action,
        Element::Reward,
        Element::Dynamics,
    ];

    pub fn label_bit(self) -> u8 {
        match self {
            Element::State => CorruptionLabels::STATE,
            Element::Action => CorruptionLabels::ACTION,
            Element::Reward => CorruptionLabels::REWARD,
            Element::Dynamics => CorruptionLabels::NEXT_STATE,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Element::State => "state",
            Element::Action => "action",
            Element::Reward => "reward",
            Element::Dynamics => "dynamics",
        }
    }
}

impl FromStr for Element {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "s" | "state" | "obs" | "observation" => Ok(Element::State),
            "a" | "action" => Ok(Element::Action),
            "r" | "reward" => Ok(Element::Reward),
            "d" | "dynamics" | "next-state" => Ok(Element::Dynamics),
            other => Err(Error::Config(format!("unknown corruption element `{other}`"))),
        }
    }
}

impl FromStr for CorruptionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(CorruptionMode::Random),
            "adversarial" => Ok(CorruptionMode::Adversarial),
            other => Err(Error::Config(format!("unknown corruption mode `{other}`"))),
        }
    }
}

impl fmt::Display for CorruptionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorruptionMode::Random => "random",
            CorruptionMode::Adversarial => "adversarial",
        })
    }
}

/// Parse a comma-separated element list such as `s,a,r,d`.
pub fn parse_elements(s: &str) -> Result<Vec<Element>> {
    let mut out: Vec<Element> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub mode: CorruptionMode,
    pub elements: Vec<Element>,
    pub rate: f64,
    pub scale: f64,
    pub seed: u64,
    pub pgd_steps: usize,
    pub pgd_step_size: f64,
}

impl CorruptionSpec {
    pub fn new(mode: CorruptionMode, elements: &[Element], rate: f64, scale: f64, seed: u64) -> Self {
        CorruptionSpec {
            mode,
            elements: elements.to_vec(),
            rate,
            scale,
            seed,
            pgd_steps: 100,
            pgd_step_size: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!("corruption rate {} not in [0, 1]", self.rate)));
        }
        if !(self.scale >= 0.0) {
            return Err(Error::Config(format!("corruption scale {} is negative", self.scale)));
        }
        if self.elements.is_empty() {
            return Err(Error::Config("no corruption elements given".into()));
        }
        Ok(())
    }

    /// Short identifier such as `random-sard-c0.3-e1`.
    pub fn label(&self) -> String {
        let elems: String = self
            .elements
            .iter()
            .map(|e| match e {
                Element::State => 's',
                Element::Action => 'a',
                Element::Reward => 'r',
                Element::Dynamics => 'd',
            })
            .collect();
        format!("{}-{}-c{}-e{}", self.mode, elems, self.rate, self.scale)
    }

    /// Rows attacked by one selection pass.
    pub fn rows_per_pass(&self, n: usize) -> usize {
        // the epsilon absorbs products like 0.3 · 10 that land a hair above an integer
        (((self.rate * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
    }
}

/// Move `v` one representable `f32` toward `toward`.
fn step_toward(v: f32, toward: f32) -> f32 {
    if v == toward {
        return v;
    }
    let bits = v.to_bits();
    let up = toward > v;
    let next = if v == 0.0 {
        let tiny = f32::from_bits(1);
        if up {
            tiny
        } else {
            -tiny
        }
    } else if (v > 0.0) == up {
        f32::from_bits(bits + 1)
    } else {
        f32::from_bits(bits - 1)
    };
    next
}

/// `orig + delta` stored as `f32`, nudged so that the stored value still
/// satisfies `|stored − orig| ≤ bound`.
pub fn perturb_within(orig: f32, delta: f64, bound: f64) -> f32 {
    let mut v = (orig as f64 + delta) as f32;
    while (v as f64 - orig as f64).abs() > bound {
        v = step_toward(v, orig);
    }
    v
}

/// Random corruption of the elements listed in `spec`.
pub fn corrupt_random(dataset: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    if spec.mode != CorruptionMode::Random {
        return Err(Error::Config("corrupt_random needs mode = random".into()));
    }
    corrupt(dataset, spec, None)
}

/// Adversarial corruption; state, action and dynamics attacks need `attacker`.
pub fn corrupt_adversarial(
    dataset: &Dataset,
    spec: &CorruptionSpec,
    attacker: Option<&AttackerCritic>,
) -> Result<Dataset> {
    if spec.mode != CorruptionMode::Adversarial {
        return Err(Error::Config("corrupt_adversarial needs mode = adversarial".into()));
    }
    corrupt(dataset, spec, attacker)
}

/// All four elements in sequence, each with a fresh selection pass.
pub fn corrupt_simultaneous(
    dataset: &Dataset,
    spec: &CorruptionSpec,
    attacker: Option<&AttackerCritic>,
) -> Result<Dataset> {
    if spec.elements != Element::ALL {
        return Err(Error::Config(
            "simultaneous corruption needs all four elements".into(),
        ));
    }
    corrupt(dataset, spec, attacker)
}

/// Apply every pass requested by `spec` to a copy of `dataset`.
pub fn corrupt(
    dataset: &Dataset,
    spec: &CorruptionSpec,
    attacker: Option<&AttackerCritic>,
) -> Result<Dataset> {
    spec.validate()?;
    let mut out = dataset.clone();
    let n = out.len();
    let mut labels = out.labels.take().unwrap_or_else(|| CorruptionLabels::new(n));
    let mut elements = spec.elements.clone();
    elements.sort();
    elements.dedup();
    for element in elements {
        let pass = element as u64;
        let mut sel_rng = seeding::rng(spec.seed, &[stream::SELECT, pass]);
        let mut rows = index::sample(&mut sel_rng, n, spec.rows_per_pass(n)).into_vec();
        rows.sort_unstable();
        match spec.mode {
            CorruptionMode::Random => random_pass(&mut out, spec, element, &rows),
            CorruptionMode::Adversarial => adversarial_pass(&mut out, spec, element, &rows, attacker)?,
        }
        for &r in &rows {
            labels.masks[r] |= element.label_bit();
        }
    }
    out.labels = Some(labels);
    out.corruption = Some(spec.clone());
    Ok(out)
}

fn random_pass(data: &mut Dataset, spec: &CorruptionSpec, element: Element, rows: &[usize]) {
    let eps = spec.scale;
    let pass = element as u64;
    for &row in rows {
        let mut rng = seeding::rng(spec.seed, &[stream::PERTURB, pass, row as u64]);
        let uniform = |rng: &mut seeding::Rng| eps * (2.0 * rng.gen::<f64>() - 1.0);
        match element {
            Element::Reward => {
                data.rewards[row] = (30.0 * uniform(&mut rng)) as f32;
            }
            Element::State | Element::Action | Element::Dynamics => {
                let (dim, std, column) = match element {
                    Element::State => (data.state_dim, &data.stats.state_std, &mut data.states),
                    Element::Action => (data.action_dim, &data.stats.action_std, &mut data.actions),
                    _ => (data.state_dim, &data.stats.next_state_std, &mut data.next_states),
                };
                for d in 0..dim {
                    let lambda = uniform(&mut rng);
                    let v = &mut column[row * dim + d];
                    *v = perturb_within(*v, lambda * std[d], eps * std[d]);
                }
            }
        }
    }
}

/// Which attacker input the perturbation variable shifts.
#[derive(Clone, Copy)]
enum Target {
    State,
    Action,
    NextState,
}

fn adversarial_pass(
    data: &mut Dataset,
    spec: &CorruptionSpec,
    element: Element,
    rows: &[usize],
    attacker: Option<&AttackerCritic>,
) -> Result<()> {
    if element == Element::Reward {
        for &row in rows {
            data.rewards[row] = (-spec.scale * data.rewards[row] as f64) as f32;
        }
        return Ok(());
    }
    let attacker = attacker.ok_or(Error::MissingAttacker(element.name()))?;
    if rows.is_empty() {
        return Ok(());
    }
    let (ds, da) = (data.state_dim, data.action_dim);
    let gather = |col: &[f32], dim: usize| -> Tensor {
        let mut v = Vec::with_capacity(rows.len() * dim);
        for &r in rows {
            v.extend(col[r * dim..(r + 1) * dim].iter().map(|&x| x as f64));
        }
        Tensor::from_vec(rows.len(), dim, v).expect("gathered")
    };
    let (target, fixed_state, fixed_action, std) = match element {
        Element::State => (
            Target::State,
            gather(&data.states, ds),
            gather(&data.actions, da),
            data.stats.state_std.clone(),
        ),
        Element::Action => (
            Target::Action,
            gather(&data.states, ds),
            gather(&data.actions, da),
            data.stats.action_std.clone(),
        ),
        _ => {
            let s2 = gather(&data.next_states, ds);
            let a2 = attacker.act(&s2)?;
            (Target::NextState, s2, a2, data.stats.next_state_std.clone())
        }
    };
    let base = match target {
        Target::Action => fixed_action.clone(),
        _ => fixed_state.clone(),
    };
    let best = pgd_attack(attacker, target, &fixed_state, &fixed_action, &base, &std, spec)?;

    let (dim, column) = match target {
        Target::State => (ds, &mut data.states),
        Target::Action => (da, &mut data.actions),
        Target::NextState => (ds, &mut data.next_states),
    };
    let mut candidate = column.clone();
    for (k, &row) in rows.iter().enumerate() {
        for d in 0..dim {
            let v = &mut candidate[row * dim + d];
            let delta = best.get(k, d) * std[d];
            *v = perturb_within(*v, delta, spec.scale * std[d]);
        }
    }
    // Re-score what is actually stored; rows whose rounded attack does not
    // beat the clean objective keep their clean value.
    let stored = gather(&candidate, dim);
    let (clean_obj, attacked_obj) = match target {
        Target::Action => (
            attacker.min_q(&fixed_state, &base)?,
            attacker.min_q(&fixed_state, &stored)?,
        ),
        _ => (
            attacker.min_q(&base, &fixed_action)?,
            attacker.min_q(&stored, &fixed_action)?,
        ),
    };
    for (k, &row) in rows.iter().enumerate() {
        if attacked_obj[k] <= clean_obj[k] {
            column[row * dim..(row + 1) * dim].copy_from_slice(&candidate[row * dim..(row + 1) * dim]);
        }
    }
    Ok(())
}

/// Projected gradient descent on `z ∈ [−ε, ε]^d` minimizing the attacker's
/// ensemble-minimum Q at `base + z ⊙ std`. Starts at `z = 0` and returns the
/// best iterate seen (never worse than the start).
fn pgd_attack(
    attacker: &AttackerCritic,
    target: Target,
    states: &Tensor,
    actions: &Tensor,
    base: &Tensor,
    std: &[f64],
    spec: &CorruptionSpec,
) -> Result<Tensor> {
    let (m, d) = (base.rows(), base.cols());
    let eps = spec.scale;
    let std_row = Tensor::row_vector(std.to_vec());
    let mut z = Tensor::zeros(m, d);
    let mut best = z.clone();
    let mut best_obj = vec![f64::INFINITY; m];

    for iter in 0..=spec.pgd_steps {
        let mut g = Graph::new();
        let zv = g.param(z.clone(), "z");
        let sv = g.constant(std_row.clone());
        let sb = g.broadcast_rows(sv, m)?;
        let shift = g.mul(zv, sb)?;
        let bv = g.constant(base.clone());
        let moved = g.add(bv, shift)?;
        let input = match target {
            Target::Action => {
                let s = g.constant(states.clone());
                g.concat_cols(&[s, moved])?
            }
            _ => {
                let a = g.constant(actions.clone());
                g.concat_cols(&[moved, a])?
            }
        };
        let qs: Vec<_> = attacker
            .q_nets
            .iter()
            .map(|net| {
                let p = net.bind_frozen(&mut g);
                net.forward(&mut g, &p, input)
            })
            .collect::<Result<_>>()?;
        // subgradient of the row-wise minimum: route each row to its argmin member
        let mut obj = vec![f64::INFINITY; m];
        let mut owner = vec![0usize; m];
        for (k, &q) in qs.iter().enumerate() {
            for (row, &v) in g.value(q).data().iter().enumerate() {
                if v < obj[row] {
                    obj[row] = v;
                    owner[row] = k;
                }
            }
        }
        for row in 0..m {
            if obj[row] < best_obj[row] {
                best_obj[row] = obj[row];
                best.data_mut()[row * d..(row + 1) * d].copy_from_slice(z.row(row));
            }
        }
        if iter == spec.pgd_steps {
            break;
        }
        let mut terms = Vec::with_capacity(qs.len());
        for (k, &q) in qs.iter().enumerate() {
            let mask = Tensor::column((0..m).map(|r| if owner[r] == k { 1.0 } else { 0.0 }).collect());
            let mv = g.constant(mask);
            let masked = g.mul(q, mv)?;
            terms.push(g.sum(masked));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        let grads = g.backward(total)?;
        let gz = grads.wrt_or_zeros(zv, &z);
        for (zi, gi) in z.data_mut().iter_mut().zip(gz.data()) {
            *zi = (*zi - spec.pgd_step_size * gi).clamp(-eps, eps);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{collect_dataset, BehaviorPolicy};
    use crate::env::EnvId;

    fn point_mass(n: usize) -> Dataset {
        collect_dataset(EnvId::PointMass, &BehaviorPolicy::medium_replay(), n, 5).unwrap()
    }

    #[test]
    fn zero_scale_changes_nothing_but_labels() {
        let d = point_mass(500);
        for element in [Element::State, Element::Action, Element::Dynamics] {
            let spec = CorruptionSpec::new(CorruptionMode::Random, &[element], 0.3, 0.0, 1);
            let c = corrupt_random(&d, &spec).unwrap();
            assert_eq!(c.states, d.states);
            assert_eq!(c.actions, d.actions);
            assert_eq!(c.next_states, d.next_states);
            let labels = c.labels.unwrap();
            assert_eq!(labels.masks.iter().filter(|&&m| m == element.label_bit()).count(), 150);
        }
    }

    #[test]
    fn random_rewards_land_in_range() {
        let d = point_mass(2000);
        let spec = CorruptionSpec::new(CorruptionMode::Random, &[Element::Reward], 0.3, 1.0, 4);
        let c = corrupt_random(&d, &spec).unwrap();
        let labels = c.labels.as_ref().unwrap();
        for i in 0..c.len() {
            if labels.masks[i] != 0 {
                assert!((-30.0..=30.0).contains(&c.rewards[i]));
            } else {
                assert_eq!(c.rewards[i], d.rewards[i]);
            }
        }
    }

    #[test]
    fn exact_selection_count_and_seed_variation() {
        let d = point_mass(10_000);
        let a = corrupt_random(&d, &CorruptionSpec::new(CorruptionMode::Random, &[Element::State], 0.3, 1.0, 1)).unwrap();
        let b = corrupt_random(&d, &CorruptionSpec::new(CorruptionMode::Random, &[Element::State], 0.3, 1.0, 2)).unwrap();
        let (la, lb) = (a.labels.unwrap(), b.labels.unwrap());
        assert_eq!(la.masks.iter().filter(|&&m| m != 0).count(), 3000);
        assert_eq!(lb.masks.iter().filter(|&&m| m != 0).count(), 3000);
        assert_ne!(la, lb);
    }

    #[test]
    fn stats_stay_frozen_and_changes_follow_labels() {
        let d = point_mass(3000);
        let spec = CorruptionSpec::new(CorruptionMode::Random, &Element::ALL, 0.3, 1.0, 8);
        let c = corrupt_simultaneous(&d, &spec, None).unwrap();
        assert_eq!(c.stats, d.stats);
        let labels = c.labels.as_ref().unwrap();
        for i in 0..c.len() {
            let m = labels.masks[i];
            if m & CorruptionLabels::STATE == 0 {
                assert_eq!(c.state(i), d.state(i));
            }
            if m & CorruptionLabels::ACTION == 0 {
                assert_eq!(c.action(i), d.action(i));
            }
            if m & CorruptionLabels::REWARD == 0 {
                assert_eq!(c.rewards[i], d.rewards[i]);
            }
            if m & CorruptionLabels::NEXT_STATE == 0 {
                assert_eq!(c.next_state(i), d.next_state(i));
            }
            for k in 0..4 {
                let delta = (c.state(i)[k] as f64 - d.state(i)[k] as f64).abs();
                assert!(delta <= d.stats.state_std[k]);
            }
        }
    }

    #[test]
    fn rate_extremes() {
        let d = point_mass(400);
        let none = corrupt(&d, &CorruptionSpec::new(CorruptionMode::Random, &Element::ALL, 0.0, 1.0, 3), None).unwrap();
        assert!(none.labels.unwrap().masks.iter().all(|&m| m == 0));
        let all = corrupt(&d, &CorruptionSpec::new(CorruptionMode::Random, &Element::ALL, 1.0, 1.0, 3), None).unwrap();
        assert!(all.labels.unwrap().masks.iter().all(|&m| m == CorruptionLabels::ALL));
    }

    #[test]
    fn adversarial_reward_is_negated_and_scaled() {
        let mut d = point_mass(100);
        d.rewards.iter_mut().for_each(|r| *r = 2.0);
        let spec = CorruptionSpec::new(CorruptionMode::Adversarial, &[Element::Reward], 0.5, 1.0, 0);
        let c = corrupt_adversarial(&d, &spec, None).unwrap();
        let labels = c.labels.unwrap();
        for i in 0..100 {
            let expected = if labels.masks[i] != 0 { -2.0 } else { 2.0 };
            assert_eq!(c.rewards[i], expected);
        }
    }

    #[test]
    fn adversarial_state_without_attacker_fails() {
        let d = point_mass(50);
        let spec = CorruptionSpec::new(CorruptionMode::Adversarial, &[Element::State], 0.3, 1.0, 0);
        assert!(matches!(corrupt(&d, &spec, None), Err(Error::MissingAttacker("state"))));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let d = point_mass(10);
        let mut spec = CorruptionSpec::new(CorruptionMode::Random, &[Element::State], 1.5, 1.0, 0);
        assert!(corrupt(&d, &spec, None).is_err());
        spec.rate = 0.5;
        spec.scale = -1.0;
        assert!(corrupt(&d, &spec, None).is_err());
        spec.scale = 1.0;
        spec.elements.clear();
        assert!(corrupt(&d, &spec, None).is_err());
    }

    #[test]
    fn element_lists_parse() {
        assert_eq!(parse_elements("d,s,a,r").unwrap(), Element::ALL.to_vec());
        assert!(parse_elements("s,x").is_err());
    }

    #[test]
    fn perturbation_never_leaves_the_box() {
        let orig = 0.1f32;
        for delta in [1.0f64, -1.0, 0.3333333, 1e-9] {
            let bound = delta.abs();
            let v = perturb_within(orig, delta, bound);
            assert!((v as f64 - orig as f64).abs() <= bound);
        }
    }
}
