//! Clean-environment evaluation, the entropy/corruption probe, and
//! aggregation of finished runs into summary tables and plot data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::Algorithm;
use crate::dataset::Dataset;
use crate::entropy::entropy_rows;
use crate::env::EnvId;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::seeding::{self, stream};
use crate::trainer::{
    checkpoint_dir, hcat, list_checkpoints, read_metrics, RunInfo, StepTelemetry, TrainState,
    METRICS_FILE, RUN_FILE,
};

pub const EVAL_FILE: &str = "eval.json";
pub const PROBE_FILE: &str = "probe.csv";
pub const PROBE_HEADER: &str = "epoch,accuracy,comparisons,ties,clean_entropy,corrupted_entropy";

/// Sample mean and standard error (`s / √n`, zero for a single value).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// FNV-1a over the text, as 16 hex digits.
pub fn fingerprint(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env: EnvId,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    /// Mean undiscounted return per seed.
    pub returns: Vec<f64>,
    pub normalized: Vec<f64>,
    pub mean_return: f64,
    pub stderr_return: f64,
    pub normalized_mean: f64,
    pub normalized_stderr: f64,
    pub config_fingerprint: String,
}

/// Roll out a deterministic policy for `episodes` episodes per seed.
pub fn evaluate_fn(
    env: EnvId,
    episodes: usize,
    seeds: &[u64],
    fingerprint: String,
    mut policy: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<EvalReport> {
    if episodes == 0 || seeds.is_empty() {
        return Err(Error::Config("evaluation needs at least one episode and one seed".into()));
    }
    let refs = env.reference_returns();
    let mut returns = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut total = 0.0;
        for ep in 0..episodes {
            let mut rng = seeding::rng(seed, &[stream::EVAL, env as u64, ep as u64]);
            let mut state = env.reset(&mut rng);
            for _ in 0..env.horizon() {
                let action = policy(&state)?;
                let step = env.step(&state, &action, &mut rng);
                total += step.reward;
                state = step.next_state;
                if step.done {
                    break;
                }
            }
        }
        returns.push(total / episodes as f64);
    }
    let normalized: Vec<f64> = returns.iter().map(|&r| refs.normalize(r)).collect();
    let (mean_return, stderr_return) = mean_stderr(&returns);
    let (normalized_mean, normalized_stderr) = mean_stderr(&normalized);
    Ok(EvalReport {
        env,
        episodes,
        seeds: seeds.to_vec(),
        returns,
        normalized,
        mean_return,
        stderr_return,
        normalized_mean,
        normalized_stderr,
        config_fingerprint: fingerprint,
    })
}

/// Evaluate a trained policy in the clean environment.
pub fn evaluate_policy(state: &TrainState, env: EnvId, episodes: usize, seeds: &[u64]) -> Result<EvalReport> {
    if state.env != env {
        return Err(Error::Mismatch(format!(
            "checkpoint was trained on {} but evaluation asked for {}",
            state.env, env
        )));
    }
    let fp = fingerprint(&state.config.to_kv_text());
    evaluate_fn(env, episodes, seeds, fp, |s| {
        let x = Tensor::row_vector(s.to_vec());
        Ok(state.act(&x)?.row(0).to_vec())
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub batches: usize,
    /// Rows drawn from each of the clean and corrupted subsets.
    pub per_side: usize,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(seed: u64) -> Self {
        ProbeConfig {
            batches: 500,
            per_side: 32,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Fraction of batches whose corrupted half has the higher mean entropy.
    pub accuracy: f64,
    pub comparisons: usize,
    /// Batches with equal means, decided by a fair coin.
    pub ties: usize,
    pub clean_trace: Vec<f64>,
    pub corrupted_trace: Vec<f64>,
}

impl ProbeResult {
    pub fn clean_mean(&self) -> f64 {
        mean_stderr(&self.clean_trace).0
    }

    pub fn corrupted_mean(&self) -> f64 {
        mean_stderr(&self.corrupted_trace).0
    }
}

/// Ensemble-mean entropy of every transition in `dataset`, on the midpoint
/// grid `τ_k = (k + ½)/N`.
pub fn row_entropies(state: &TrainState, dataset: &Dataset) -> Result<Vec<f64>> {
    let Some(models) = state.distributional() else {
        return Err(Error::Config(format!(
            "{} has no distributional critics to probe",
            state.config.algorithm
        )));
    };
    if dataset.env != state.env {
        return Err(Error::Mismatch(format!(
            "checkpoint was trained on {} but the dataset is {}",
            state.env, dataset.env
        )));
    }
    let n = state.config.n_quantiles;
    let taus: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect();
    let view = dataset.training_view();
    let mut out = Vec::with_capacity(dataset.len());
    let chunk = 512;
    let all: Vec<usize> = (0..dataset.len()).collect();
    for idx in all.chunks(chunk) {
        let b = view.batch(idx);
        let states = match &state.obs_norm {
            Some(norm) => norm.apply(&b.states),
            None => b.states,
        };
        let x = if state.config.reward_input {
            hcat(&[&states, &b.actions, &b.rewards])
        } else {
            hcat(&[&states, &b.actions])
        };
        let mut acc = vec![0.0; idx.len()];
        for member in &models.critics.members {
            let d = member.quantiles(&x, &taus)?;
            for (a, h) in acc.iter_mut().zip(entropy_rows(&taus, &d, state.config.entropy_variant)) {
                *a += h;
            }
        }
        let k = models.critics.len() as f64;
        out.extend(acc.into_iter().map(|a| a / k));
    }
    Ok(out)
}

/// Compare mean entropies of balanced clean/corrupted batches, using the
/// labels only to partition already computed entropies.
pub fn entropy_probe(state: &TrainState, dataset: &Dataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let labels = dataset.labels.as_ref().ok_or(Error::MissingLabels)?;
    let entropies = row_entropies(state, dataset)?;
    probe_entropies(&entropies, &labels.masks, cfg)
}

/// The probe on precomputed per-row entropies.
pub fn probe_entropies(entropies: &[f64], masks: &[u8], cfg: &ProbeConfig) -> Result<ProbeResult> {
    if entropies.len() != masks.len() {
        return Err(Error::Mismatch("one entropy per labeled row required".into()));
    }
    let clean: Vec<usize> = (0..masks.len()).filter(|&i| masks[i] == 0).collect();
    let corrupted: Vec<usize> = (0..masks.len()).filter(|&i| masks[i] != 0).collect();
    if clean.len() < cfg.per_side || corrupted.len() < cfg.per_side {
        return Err(Error::Config(format!(
            "probe needs {} rows per side, found {} clean and {} corrupted",
            cfg.per_side,
            clean.len(),
            corrupted.len()
        )));
    }
    let side_mean = |pool: &[usize], rng: &mut seeding::Rng| {
        index::sample(rng, pool.len(), cfg.per_side)
            .iter()
            .map(|j| entropies[pool[j]])
            .sum::<f64>()
            / cfg.per_side as f64
    };
    let mut wins = 0usize;
    let mut ties = 0usize;
    let mut clean_trace = Vec::with_capacity(cfg.batches);
    let mut corrupted_trace = Vec::with_capacity(cfg.batches);
    for b in 0..cfg.batches {
        let mut rng = seeding::rng(cfg.seed, &[stream::PROBE, b as u64]);
        let hc = side_mean(&clean, &mut rng);
        let hx = side_mean(&corrupted, &mut rng);
        if hx > hc {
            wins += 1;
        } else if hx == hc {
            ties += 1;
            if rng.gen_bool(0.5) {
                wins += 1;
            }
        }
        clean_trace.push(hc);
        corrupted_trace.push(hx);
    }
    Ok(ProbeResult {
        accuracy: wins as f64 / cfg.batches.max(1) as f64,
        comparisons: cfg.batches,
        ties,
        clean_trace,
        corrupted_trace,
    })
}

/// Probe every checkpoint of a run, writing `probe.csv` into the run directory.
pub fn probe_run(run_dir: &Path, dataset: &Dataset, cfg: &ProbeConfig) -> Result<Vec<(usize, ProbeResult)>> {
    let labels = dataset.labels.as_ref().ok_or(Error::MissingLabels)?;
    let epochs = list_checkpoints(run_dir)?;
    if epochs.is_empty() {
        return Err(Error::Config(format!("no checkpoints in {}", run_dir.display())));
    }
    let mut out = Vec::new();
    let mut text = format!("{PROBE_HEADER}\n");
    for epoch in epochs {
        let state = TrainState::load(&checkpoint_dir(run_dir, epoch))?;
        let h = row_entropies(&state, dataset)?;
        let r = probe_entropies(&h, &labels.masks, cfg)?;
        text.push_str(&format!(
            "{epoch},{},{},{},{},{}\n",
            r.accuracy,
            r.comparisons,
            r.ties,
            r.clean_mean(),
            r.corrupted_mean()
        ));
        out.push((epoch, r));
    }
    let path = run_dir.join(PROBE_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: &str =
    "algorithm,setting,runs,score_mean,score_stderr,scored_runs,final_td_loss_mean,final_td_loss_stderr";
pub const NOTES_FILE: &str = "notes.txt";
const NOTES: &str = "\
Q and V are the mean of the quantile values over the tau grid, not their sum.
Probe ties (equal clean and corrupted mean entropy) are decided by a fair coin under the probe seed.
";

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub algorithm: Algorithm,
    pub setting: String,
    pub runs: usize,
    pub score_mean: f64,
    pub score_stderr: f64,
    pub scored_runs: usize,
    pub final_td_loss_mean: f64,
    pub final_td_loss_stderr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<SummaryRow>,
    pub missing: Vec<PathBuf>,
    pub curve_files: Vec<PathBuf>,
}

struct LoadedRun {
    info: RunInfo,
    metrics: Vec<(usize, StepTelemetry)>,
    score: Option<f64>,
    probe: Vec<(usize, f64)>,
}

fn load_run(dir: &Path) -> Option<LoadedRun> {
    let info: RunInfo = serde_json::from_slice(&fs::read(dir.join(RUN_FILE)).ok()?).ok()?;
    let metrics = read_metrics(&dir.join(METRICS_FILE)).ok()?;
    let score = fs::read(dir.join(EVAL_FILE))
        .ok()
        .and_then(|b| serde_json::from_slice::<EvalReport>(&b).ok())
        .map(|r| r.normalized_mean);
    let probe = fs::read_to_string(dir.join(PROBE_FILE))
        .map(|t| {
            t.lines()
                .skip(1)
                .filter_map(|l| {
                    let mut c = l.split(',');
                    Some((c.next()?.parse().ok()?, c.next()?.parse().ok()?))
                })
                .collect()
        })
        .unwrap_or_default();
    Some(LoadedRun {
        info,
        metrics,
        score,
        probe,
    })
}

fn fmt_cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Mean ± stderr across runs at every x present in all of them.
fn curve(series: &[Vec<(usize, f64)>]) -> Vec<(usize, f64, f64)> {
    let Some(first) = series.first() else {
        return Vec::new();
    };
    first
        .iter()
        .filter_map(|&(x, _)| {
            let ys: Vec<f64> = series
                .iter()
                .map(|s| s.iter().find(|p| p.0 == x).map(|p| p.1))
                .collect::<Option<_>>()?;
            let (m, e) = mean_stderr(&ys);
            Some((x, m, e))
        })
        .collect()
}

/// Aggregate run directories into `summary.csv`, per-curve plot data
/// (`x,y,err`) under `out_dir/curves/`, and `missing.txt`.
pub fn report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Report> {
    let curves_dir = out_dir.join("curves");
    fs::create_dir_all(&curves_dir).map_err(|e| Error::io(&curves_dir, e))?;
    let mut groups: BTreeMap<(String, String), Vec<LoadedRun>> = BTreeMap::new();
    let mut missing = Vec::new();
    for dir in run_dirs {
        match load_run(dir) {
            Some(run) => groups
                .entry((run.info.algorithm.to_string(), run.info.setting.clone()))
                .or_default()
                .push(run),
            None => missing.push(dir.clone()),
        }
    }

    let mut rows = Vec::new();
    let mut curve_files = Vec::new();
    let mut table = format!("{SUMMARY_HEADER}\n");
    for ((alg, setting), runs) in &groups {
        let scores: Vec<f64> = runs.iter().filter_map(|r| r.score).collect();
        let (score_mean, score_stderr) = mean_stderr(&scores);
        let final_td: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.metrics.last().map(|m| m.1.td_loss))
            .collect();
        let (td_mean, td_stderr) = mean_stderr(&final_td);
        let row = SummaryRow {
            algorithm: runs[0].info.algorithm,
            setting: setting.clone(),
            runs: runs.len(),
            score_mean,
            score_stderr,
            scored_runs: scores.len(),
            final_td_loss_mean: td_mean,
            final_td_loss_stderr: td_stderr,
        };
        table.push_str(&format!(
            "{alg},{setting},{},{},{},{},{},{}\n",
            row.runs,
            fmt_cell(row.score_mean),
            fmt_cell(row.score_stderr),
            row.scored_runs,
            fmt_cell(row.final_td_loss_mean),
            fmt_cell(row.final_td_loss_stderr)
        ));
        rows.push(row);

        type Getter = fn(&StepTelemetry) -> f64;
        let metrics: [(&str, Getter); 6] = [
            ("td_loss", |t| t.td_loss),
            ("bayes_loss", |t| t.bayes_loss),
            ("value_loss", |t| t.value_loss),
            ("policy_loss", |t| t.policy_loss),
            ("mean_entropy", |t| t.mean_entropy),
            ("mean_weight", |t| t.mean_weight),
        ];
        let stem = format!("{}_{}", sanitize(alg), sanitize(setting));
        for (name, get) in metrics {
            let series: Vec<Vec<(usize, f64)>> = runs
                .iter()
                .map(|r| r.metrics.iter().map(|(e, t)| (*e, get(t))).collect())
                .collect();
            curve_files.push(write_curve(&curves_dir, &format!("{stem}_{name}.csv"), &curve(&series))?);
        }
        let probes: Vec<Vec<(usize, f64)>> =
            runs.iter().filter(|r| !r.probe.is_empty()).map(|r| r.probe.clone()).collect();
        if !probes.is_empty() {
            curve_files.push(write_curve(
                &curves_dir,
                &format!("{stem}_probe_accuracy.csv"),
                &curve(&probes),
            )?);
        }
    }
    let spath = out_dir.join(SUMMARY_FILE);
    fs::write(&spath, table).map_err(|e| Error::io(&spath, e))?;
    let mpath = out_dir.join("missing.txt");
    let mtext: String = missing.iter().map(|p| format!("{}\n", p.display())).collect();
    fs::write(&mpath, mtext).map_err(|e| Error::io(&mpath, e))?;
    let npath = out_dir.join(NOTES_FILE);
    fs::write(&npath, NOTES).map_err(|e| Error::io(&npath, e))?;
    Ok(Report {
        rows,
        missing,
        curve_files,
    })
}

fn write_curve(dir: &Path, name: &str, points: &[(usize, f64, f64)]) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut text = String::from("x,y,err\n");
    for (x, y, e) in points {
        text.push_str(&format!("{x},{},{}\n", fmt_cell(*y), fmt_cell(*e)));
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_stderr_hand_values() {
        let (m, e) = mean_stderr(&[1.0, 2.0, 6.0]);
        assert!((m - 3.0).abs() < 1e-15);
        assert!((e - (7.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_stderr(&[4.0]), (4.0, 0.0));
        assert!(mean_stderr(&[]).0.is_nan());
    }

    #[test]
    fn reference_policies_normalize_to_endpoints() {
        for env in EnvId::ALL {
            let r = env.reference_returns();
            assert!((r.normalize(r.expert) - 100.0).abs() < 1e-9);
            assert!(r.normalize(r.random).abs() < 1e-9);
        }
    }

    #[test]
    fn null_probe_sits_near_one_half() {
        let n = 4000;
        let mut rng = seeding::rng(4, &[]);
        let h: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let masks: Vec<u8> = (0..n).map(|i| if i % 3 == 0 { 4 } else { 0 }).collect();
        let r = probe_entropies(&h, &masks, &ProbeConfig::new(9)).unwrap();
        assert_eq!(r.comparisons, 500);
        assert_eq!(r.clean_trace.len(), 500);
        assert!((r.accuracy - 0.5).abs() < 0.08, "{}", r.accuracy);
        assert_eq!(r, probe_entropies(&h, &masks, &ProbeConfig::new(9)).unwrap());
    }

    #[test]
    fn identical_entropies_are_all_coin_flips() {
        let masks: Vec<u8> = (0..200).map(|i| (i % 2) as u8).collect();
        let r = probe_entropies(&vec![0.7; 200], &masks, &ProbeConfig::new(1)).unwrap();
        assert_eq!(r.ties, 500);
        assert!((r.accuracy - 0.5).abs() < 0.08);
    }

    #[test]
    fn probe_needs_both_sides() {
        let err = probe_entropies(&[0.0; 40], &[0; 40], &ProbeConfig::new(0));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn empty_report_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let r = report(&[], dir.path()).unwrap();
        assert!(r.rows.is_empty());
        let text = fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        assert_eq!(text, format!("{SUMMARY_HEADER}\n"));
    }

    #[test]
    fn fingerprint_is_stable() {
        assert_eq!(fingerprint(""), "cbf29ce484222325");
        assert_ne!(fingerprint("a"), fingerprint("b"));
    }
}
