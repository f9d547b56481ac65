//! Offline datasets: columnar storage, statistics, behavior-policy
//! collection, and the on-disk format.
//!
//! On disk a dataset is a directory with `meta.json`, `data.bin` (row-major
//! little-endian `f32` records `s ‖ a ‖ r ‖ s′ ‖ done`) and, for corrupted
//! datasets, `labels.bin` (one byte per transition, low four bits =
//! state / action / reward / next-state flags).

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionSpec;
use crate::env::EnvId;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::seeding::{self, stream};

pub const DATASET_VERSION: u32 = 1;
pub const DATASET_MAGIC: &str = "tracer-dataset";

/// Per-transition corruption flags.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorruptionLabels {
    pub masks: Vec<u8>,
}

impl CorruptionLabels {
    pub const STATE: u8 = 1;
    pub const ACTION: u8 = 2;
    pub const REWARD: u8 = 4;
    pub const NEXT_STATE: u8 = 8;
    pub const ALL: u8 = 15;

    pub fn new(n: usize) -> Self {
        CorruptionLabels { masks: vec![0; n] }
    }

    pub fn is_corrupted(&self, row: usize) -> bool {
        self.masks[row] != 0
    }

    pub fn corrupted_fraction(&self) -> f64 {
        if self.masks.is_empty() {
            return 0.0;
        }
        self.masks.iter().filter(|&&m| m != 0).count() as f64 / self.masks.len() as f64
    }
}

/// Population standard deviations per dimension, frozen on clean data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub state_std: Vec<f64>,
    pub action_std: Vec<f64>,
    pub next_state_std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub env: EnvId,
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub next_states: Vec<f32>,
    pub dones: Vec<f32>,
    pub stats: DatasetStats,
    pub corruption: Option<CorruptionSpec>,
    pub labels: Option<CorruptionLabels>,
}

/// Population std of each column of a row-major `n x dim` block.
pub fn column_std(values: &[f32], dim: usize) -> Vec<f64> {
    let n = if dim == 0 { 0 } else { values.len() / dim };
    if n == 0 {
        return vec![0.0; dim];
    }
    (0..dim)
        .map(|d| {
            let mean = (0..n).map(|i| values[i * dim + d] as f64).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|i| (values[i * dim + d] as f64 - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            var.sqrt()
        })
        .collect()
}

impl Dataset {
    pub fn empty(env: EnvId) -> Self {
        let (ds, da) = (env.state_dim(), env.action_dim());
        Dataset {
            env,
            state_dim: ds,
            action_dim: da,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            dones: Vec::new(),
            stats: DatasetStats {
                state_std: vec![0.0; ds],
                action_std: vec![0.0; da],
                next_state_std: vec![0.0; ds],
            },
            corruption: None,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, s: &[f64], a: &[f64], r: f64, s2: &[f64], done: bool) {
        self.states.extend(s.iter().map(|&x| x as f32));
        self.actions.extend(a.iter().map(|&x| x as f32));
        self.rewards.push(r as f32);
        self.next_states.extend(s2.iter().map(|&x| x as f32));
        self.dones.push(if done { 1.0 } else { 0.0 });
    }

    pub fn state(&self, i: usize) -> &[f32] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f32] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f32] {
        &self.next_states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn compute_stats(&self) -> DatasetStats {
        DatasetStats {
            state_std: column_std(&self.states, self.state_dim),
            action_std: column_std(&self.actions, self.action_dim),
            next_state_std: column_std(&self.next_states, self.state_dim),
        }
    }

    /// Recompute and freeze statistics. Only meaningful on clean data.
    pub fn freeze_stats(&mut self) {
        self.stats = self.compute_stats();
    }

    /// The label-free view handed to training code.
    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            env: self.env,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            states: &self.states,
            actions: &self.actions,
            rewards: &self.rewards,
            next_states: &self.next_states,
            dones: &self.dones,
            stats: &self.stats,
        }
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().map(|&r| r as f64).sum::<f64>() / self.len().max(1) as f64
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = DatasetMeta {
            magic: DATASET_MAGIC.to_string(),
            format_version: DATASET_VERSION,
            env: self.env,
            n: self.len(),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            stats: self.stats.clone(),
            corruption: self.corruption.clone(),
            has_labels: self.labels.is_some(),
        };
        let mpath = dir.join("meta.json");
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Json {
            path: mpath.clone(),
            source: e,
        })?;
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;

        let record = 2 * self.state_dim + self.action_dim + 2;
        let mut blob = Vec::with_capacity(self.len() * record * 4);
        for i in 0..self.len() {
            let row = self
                .state(i)
                .iter()
                .chain(self.action(i))
                .chain(std::iter::once(&self.rewards[i]))
                .chain(self.next_state(i))
                .chain(std::iter::once(&self.dones[i]));
            for v in row {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let dpath = dir.join("data.bin");
        fs::write(&dpath, blob).map_err(|e| Error::io(&dpath, e))?;

        let lpath = dir.join("labels.bin");
        match &self.labels {
            Some(labels) => fs::write(&lpath, &labels.masks).map_err(|e| Error::io(&lpath, e))?,
            None if lpath.exists() => fs::remove_file(&lpath).map_err(|e| Error::io(&lpath, e))?,
            None => {}
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("meta.json");
        let header = |detail: String| Error::Header {
            path: mpath.clone(),
            detail,
        };
        let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let meta: DatasetMeta =
            serde_json::from_slice(&text).map_err(|e| header(format!("malformed meta.json: {e}")))?;
        if meta.magic != DATASET_MAGIC {
            return Err(header(format!("bad magic `{}`", meta.magic)));
        }
        if meta.format_version != DATASET_VERSION {
            return Err(header(format!("unsupported format version {}", meta.format_version)));
        }
        if meta.state_dim != meta.env.state_dim() || meta.action_dim != meta.env.action_dim() {
            return Err(header(format!(
                "dimensions ({}, {}) do not match environment {}",
                meta.state_dim, meta.action_dim, meta.env
            )));
        }
        if meta.stats.state_std.len() != meta.state_dim
            || meta.stats.next_state_std.len() != meta.state_dim
            || meta.stats.action_std.len() != meta.action_dim
        {
            return Err(header("statistics have the wrong dimension".into()));
        }

        let dpath = dir.join("data.bin");
        let blob = fs::read(&dpath).map_err(|e| Error::io(&dpath, e))?;
        let (ds, da) = (meta.state_dim, meta.action_dim);
        let record = 2 * ds + da + 2;
        if blob.len() != meta.n * record * 4 {
            return Err(Error::Blob {
                path: dpath,
                detail: format!(
                    "expected {} bytes for {} records, found {}",
                    meta.n * record * 4,
                    meta.n,
                    blob.len()
                ),
            });
        }
        let floats: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunks of 4")))
            .collect();
        let mut out = Dataset::empty(meta.env);
        out.states.reserve(meta.n * ds);
        for rec in floats.chunks_exact(record) {
            out.states.extend_from_slice(&rec[..ds]);
            out.actions.extend_from_slice(&rec[ds..ds + da]);
            out.rewards.push(rec[ds + da]);
            out.next_states.extend_from_slice(&rec[ds + da + 1..2 * ds + da + 1]);
            out.dones.push(rec[2 * ds + da + 1]);
        }
        out.stats = meta.stats;
        out.corruption = meta.corruption;

        let lpath = dir.join("labels.bin");
        if meta.has_labels {
            let masks = fs::read(&lpath).map_err(|e| Error::io(&lpath, e))?;
            if masks.len() != meta.n {
                return Err(Error::Blob {
                    path: lpath,
                    detail: format!("expected {} label bytes, found {}", meta.n, masks.len()),
                });
            }
            if let Some(bad) = masks.iter().find(|&&m| m > CorruptionLabels::ALL) {
                return Err(Error::Blob {
                    path: lpath,
                    detail: format!("label byte {bad:#04x} uses reserved bits"),
                });
            }
            out.labels = Some(CorruptionLabels { masks });
        }
        Ok(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    magic: String,
    format_version: u32,
    env: EnvId,
    n: usize,
    state_dim: usize,
    action_dim: usize,
    stats: DatasetStats,
    corruption: Option<CorruptionSpec>,
    has_labels: bool,
}

/// Read-only access to a dataset without its corruption labels. This is
/// the only dataset type training code accepts.
#[derive(Clone, Copy, Debug)]
pub struct TrainingView<'a> {
    pub env: EnvId,
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: &'a [f32],
    pub actions: &'a [f32],
    pub rewards: &'a [f32],
    pub next_states: &'a [f32],
    pub dones: &'a [f32],
    pub stats: &'a DatasetStats,
}

/// A minibatch in network precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Tensor,
    pub next_states: Tensor,
    pub dones: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.rows() == 0
    }
}

fn gather(values: &[f32], dim: usize, idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        data.extend(values[i * dim..(i + 1) * dim].iter().map(|&x| x as f64));
    }
    Tensor::from_vec(idx.len(), dim, data).expect("gathered rows")
}

impl<'a> TrainingView<'a> {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch {
            states: gather(self.states, self.state_dim, idx),
            actions: gather(self.actions, self.action_dim, idx),
            rewards: gather(self.rewards, 1, idx),
            next_states: gather(self.next_states, self.state_dim, idx),
            dones: gather(self.dones, 1, idx),
        }
    }

    /// Uniform sampling with replacement.
    pub fn sample_batch(&self, size: usize, rng: &mut impl Rng) -> Batch {
        let idx: Vec<usize> = (0..size).map(|_| rng.gen_range(0..self.len())).collect();
        self.batch(&idx)
    }

    pub fn state(&self, i: usize) -> &[f32] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f32] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f32] {
        &self.next_states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    /// Per-dimension mean and population std of the states column.
    pub fn state_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len().max(1) as f64;
        let d = self.state_dim;
        let mean: Vec<f64> = (0..d)
            .map(|k| (0..self.len()).map(|i| self.states[i * d + k] as f64).sum::<f64>() / n)
            .collect();
        (mean, column_std(self.states, d))
    }
}

/// Scripted behavior policies used to collect offline data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BehaviorPolicy {
    /// Expert action plus Gaussian noise whose scale is drawn per episode
    /// from `noise_levels`; actions clipped to `[−1, 1]`.
    MixedExpert { noise_levels: Vec<f64> },
    /// Uniform actions on `[−1, 1]`.
    Uniform,
}

impl BehaviorPolicy {
    /// Heterogeneous-quality data in the spirit of a replay buffer.
    pub fn medium_replay() -> Self {
        BehaviorPolicy::MixedExpert {
            noise_levels: vec![0.1, 0.3, 1.0],
        }
    }

    pub fn expert() -> Self {
        BehaviorPolicy::MixedExpert {
            noise_levels: vec![0.0],
        }
    }
}

/// Roll out `behavior` until exactly `n` transitions are collected, then
/// freeze statistics.
pub fn collect_dataset(env: EnvId, behavior: &BehaviorPolicy, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    let mut data = Dataset::empty(env);
    let mut episode = 0u64;
    while data.len() < n {
        let mut rng = seeding::rng(seed, &[stream::COLLECT, episode]);
        let sigma = match behavior {
            BehaviorPolicy::MixedExpert { noise_levels } => {
                noise_levels[rng.gen_range(0..noise_levels.len())]
            }
            BehaviorPolicy::Uniform => 0.0,
        };
        let mut state = env.reset(&mut rng);
        for _ in 0..env.horizon() {
            if data.len() == n {
                break;
            }
            let action: Vec<f64> = match behavior {
                BehaviorPolicy::MixedExpert { .. } => env
                    .expert_action(&state)
                    .into_iter()
                    .map(|a| {
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        (a + sigma * eps).clamp(-1.0, 1.0)
                    })
                    .collect(),
                BehaviorPolicy::Uniform => (0..env.action_dim())
                    .map(|_| rng.gen_range(-1.0..=1.0))
                    .collect(),
            };
            let step = env.step(&state, &action, &mut rng);
            data.push(&state, &action, step.reward, &step.next_state, step.done);
            if step.done {
                break;
            }
            state = step.next_state;
        }
        episode += 1;
    }
    data.freeze_stats();
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collects_exact_count_within_bounds() {
        let d = collect_dataset(EnvId::PointMass, &BehaviorPolicy::medium_replay(), 1000, 3).unwrap();
        assert_eq!(d.len(), 1000);
        assert_eq!(d.states.len(), 4000);
        assert!(d.actions.iter().all(|a| (-1.0..=1.0).contains(a)));
        assert!(d.rewards.iter().all(|r| r.is_finite() && *r <= 0.0));
    }

    #[test]
    fn noiseless_expert_beats_pure_noise() {
        let e = collect_dataset(EnvId::PointMass, &BehaviorPolicy::expert(), 5000, 1).unwrap();
        let u = collect_dataset(EnvId::PointMass, &BehaviorPolicy::Uniform, 5000, 1).unwrap();
        assert!(e.mean_reward() > u.mean_reward());
    }

    #[test]
    fn std_edge_cases() {
        assert_eq!(column_std(&[2.0, 2.0, 2.0], 1), vec![0.0]);
        assert_eq!(column_std(&[-1.0, 1.0], 1), vec![1.0]);
        let a = column_std(&[1.0, 5.0, 2.0, 7.0, 3.0, 0.0], 2);
        let b = column_std(&[3.0, 0.0, 1.0, 5.0, 2.0, 7.0], 2);
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for dir in [&d1, &d2] {
            collect_dataset(EnvId::PointMass, &BehaviorPolicy::medium_replay(), 500, 9)
                .unwrap()
                .save(dir.path())
                .unwrap();
        }
        for f in ["meta.json", "data.bin"] {
            assert_eq!(
                fs::read(d1.path().join(f)).unwrap(),
                fs::read(d2.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn round_trip_with_every_label_mask() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = collect_dataset(EnvId::GaussianBandit, &BehaviorPolicy::Uniform, 64, 2).unwrap();
        d.labels = Some(CorruptionLabels {
            masks: (0..64).map(|i| (i % 16) as u8).collect(),
        });
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, d);
        let masks = &back.labels.unwrap().masks;
        for m in 0..16u8 {
            assert!(masks.contains(&m));
        }
    }

    #[test]
    fn corrupted_header_byte_fails_with_header_error() {
        let dir = tempfile::tempdir().unwrap();
        collect_dataset(EnvId::PointMass, &BehaviorPolicy::Uniform, 10, 0)
            .unwrap()
            .save(dir.path())
            .unwrap();
        let p = dir.path().join("meta.json");
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'#';
        fs::write(&p, bytes).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Header { .. })));
    }

    #[test]
    fn truncated_blob_fails_with_blob_error() {
        let dir = tempfile::tempdir().unwrap();
        collect_dataset(EnvId::PointMass, &BehaviorPolicy::Uniform, 10, 0)
            .unwrap()
            .save(dir.path())
            .unwrap();
        let p = dir.path().join("data.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Blob { .. })));
    }
}
