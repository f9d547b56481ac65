//! `tracer`: generate data, corrupt it, train, evaluate, probe and report.

mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use settings::Settings;
use tracer_core::{
    collect_dataset, corrupt, entropy_probe, evaluate_policy, list_checkpoints, parse_elements,
    pretrain_attacker, probe_run, report, run_training, AttackerConfig, AttackerCritic,
    BehaviorPolicy, CorruptionMode, CorruptionSpec, Dataset, EnvId, ProbeConfig, RunOptions,
    TrainConfig, TrainState, EVAL_FILE,
};

#[derive(Parser)]
#[command(name = "tracer", version, about = "Corruption-robust offline RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect an offline dataset with a scripted behavior policy.
    GenData(GenData),
    /// Corrupt a clean dataset, recording per-row labels.
    Corrupt(CorruptCmd),
    /// Fit the frozen critic used by adversarial corruption.
    PretrainAttacker(PretrainAttacker),
    /// Train an agent on a (possibly corrupted) dataset.
    Train(Train),
    /// Evaluate a trained policy in the clean environment.
    Eval(Eval),
    /// Measure how often corrupted rows carry higher critic entropy.
    EntropyProbe(Probe),
    /// Aggregate run directories into summary tables and plot data.
    Report(ReportCmd),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    config: Option<PathBuf>,
    /// point-mass or gaussian-bandit.
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// medium-replay, expert or uniform.
    #[arg(long)]
    behavior: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct CorruptCmd {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// random or adversarial.
    #[arg(long)]
    mode: Option<String>,
    /// Comma-separated subset of s,a,r,d.
    #[arg(long)]
    elements: Option<String>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    pgd_steps: Option<usize>,
    #[arg(long)]
    pgd_step_size: Option<f64>,
    /// Attacker checkpoint directory (adversarial mode).
    #[arg(long)]
    attacker: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct PretrainAttacker {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    updates_per_epoch: Option<usize>,
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct Train {
    /// Flat `key = value` training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run_dir: PathBuf,
    /// desk or paper; overrides the config file's preset.
    #[arg(long)]
    preset: Option<String>,
    /// tracer, driql, riql or iql.
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    updates_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Any configuration key, as `key=value`; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from the newest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; its newest checkpoint is evaluated and `eval.json` written there.
    #[arg(long, required_unless_present = "checkpoint")]
    run_dir: Option<PathBuf>,
    #[arg(long, conflicts_with = "run_dir")]
    checkpoint: Option<PathBuf>,
    /// Must match the environment the checkpoint was trained on.
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Evaluation seeds are `seed, seed+1, ...`.
    #[arg(long)]
    num_seeds: Option<u64>,
    /// Report path; defaults to `eval.json` in the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct Probe {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Probe every checkpoint of this run and write `probe.csv` into it.
    #[arg(long, required_unless_present = "checkpoint")]
    run_dir: Option<PathBuf>,
    #[arg(long, conflicts_with = "run_dir")]
    checkpoint: Option<PathBuf>,
    /// Labeled (corrupted) dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    per_side: Option<usize>,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct ReportCmd {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Run directories, or parents whose children are run directories.
    runs: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Corrupt(c) => corrupt_cmd(c),
        Command::PretrainAttacker(c) => pretrain(c),
        Command::Train(c) => train(c),
        Command::Eval(c) => eval(c),
        Command::EntropyProbe(c) => probe(c),
        Command::Report(c) => report_cmd(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn gen_data(c: GenData) -> Result<()> {
    let s = Settings::load(c.config.as_deref())?;
    let env: EnvId = s.pick(c.env, "env", "point-mass".to_string())?.parse()?;
    let n = s.pick(c.n, "n", 20_000)?;
    let behavior = match s.pick(c.behavior, "behavior", "medium-replay".to_string())?.as_str() {
        "medium-replay" => BehaviorPolicy::medium_replay(),
        "expert" => BehaviorPolicy::expert(),
        "uniform" => BehaviorPolicy::Uniform,
        other => bail!("unknown behavior `{other}` (medium-replay, expert, uniform)"),
    };
    let data = collect_dataset(env, &behavior, n, c.seed)?;
    data.save(&c.out)?;
    println!("wrote {} transitions of {env} to {}", data.len(), c.out.display());
    Ok(())
}

fn corrupt_cmd(c: CorruptCmd) -> Result<()> {
    let s = Settings::load(c.config.as_deref())?;
    let clean = Dataset::load(&c.input)?;
    if clean.labels.is_some() || clean.corruption.is_some() {
        bail!("{} is already corrupted", c.input.display());
    }
    let mode: CorruptionMode = s.pick(c.mode, "mode", "random".to_string())?.parse()?;
    let elements = parse_elements(&s.pick(c.elements, "elements", "s,a,r,d".to_string())?)?;
    let mut spec = CorruptionSpec::new(
        mode,
        &elements,
        s.pick(c.rate, "rate", 0.3)?,
        s.pick(c.scale, "scale", 1.0)?,
        c.seed,
    );
    spec.pgd_steps = s.pick(c.pgd_steps, "pgd_steps", spec.pgd_steps)?;
    spec.pgd_step_size = s.pick(c.pgd_step_size, "pgd_step_size", spec.pgd_step_size)?;
    let attacker_dir = c.attacker.or(s.path("attacker"));
    let attacker = attacker_dir
        .as_deref()
        .map(AttackerCritic::load)
        .transpose()
        .context("loading attacker")?;
    let out = corrupt(&clean, &spec, attacker.as_ref())?;
    out.save(&c.out)?;
    let frac = out.labels.as_ref().map_or(0.0, |l| l.corrupted_fraction());
    println!(
        "wrote {} ({}): {:.1}% of rows corrupted",
        c.out.display(),
        spec.label(),
        100.0 * frac
    );
    Ok(())
}

fn pretrain(c: PretrainAttacker) -> Result<()> {
    let s = Settings::load(c.config.as_deref())?;
    let data = Dataset::load(&c.data)?;
    let d = AttackerConfig::default();
    let cfg = AttackerConfig {
        epochs: s.pick(c.epochs, "epochs", d.epochs)?,
        updates_per_epoch: s.pick(c.updates_per_epoch, "updates_per_epoch", d.updates_per_epoch)?,
        ensemble: s.pick(c.ensemble, "ensemble", d.ensemble)?,
        hidden: s.pick(c.hidden, "hidden", d.hidden)?,
        batch_size: s.pick(c.batch_size, "batch_size", d.batch_size)?,
        gamma: s.pick(None, "gamma", d.gamma)?,
        lr: s.pick(None, "lr", d.lr)?,
        seed: c.seed,
        ..d
    };
    let (attacker, rep) = pretrain_attacker(&data, &cfg)?;
    attacker.save(&c.out)?;
    let rpath = c.out.join("report.json");
    fs::write(&rpath, serde_json::to_string_pretty(&rep)?)
        .with_context(|| format!("writing {}", rpath.display()))?;
    println!(
        "attacker saved to {}: final td loss {:.4}, held-out bc mse {:.4}",
        c.out.display(),
        rep.td_loss.last().copied().unwrap_or(f64::NAN),
        rep.bc_holdout_mse.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn train_config(c: &Train) -> Result<TrainConfig> {
    let text = match &c.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut pairs = tracer_core::config::parse_kv(&text)?;
    let preset = c
        .preset
        .clone()
        .or_else(|| pairs.iter().find(|(k, _)| k == "preset").map(|(_, v)| v.clone()))
        .unwrap_or_else(|| "desk".into());
    pairs.retain(|(k, _)| k != "preset");
    let mut cfg = TrainConfig::preset(&preset)?;
    for (k, v) in &pairs {
        cfg.set(k, v)?;
    }
    for kv in &c.set {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects key=value, got `{kv}`");
        };
        cfg.set(k, v)?;
    }
    if let Some(a) = &c.algorithm {
        cfg.set("algorithm", a)?;
        if a == "iql" && !pairs.iter().any(|(k, _)| k == "ensemble" || k == "k") {
            cfg.ensemble = 2;
        }
    }
    if let Some(v) = c.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = c.updates_per_epoch {
        cfg.updates_per_epoch = v;
    }
    if let Some(v) = c.batch_size {
        cfg.batch_size = v;
    }
    cfg.seed = c.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn train(c: Train) -> Result<()> {
    let cfg = train_config(&c)?;
    let data = Dataset::load(&c.data)?;
    let setting = data
        .corruption
        .as_ref()
        .map_or_else(|| "clean".to_string(), CorruptionSpec::label);
    let opts = RunOptions {
        resume: c.resume,
        setting,
    };
    let run = run_training(&data.training_view(), &cfg, &c.run_dir, &opts)?;
    if let Some(last) = run.epochs.last() {
        println!(
            "epoch {}: td {:.4} value {:.4} policy {:.4} entropy {:.4} weight {:.4}",
            cfg.epochs, last.td_loss, last.value_loss, last.policy_loss, last.mean_entropy, last.mean_weight
        );
    }
    println!("final checkpoint: {}", run.final_checkpoint.display());
    Ok(())
}

fn newest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let Some(&epoch) = list_checkpoints(run_dir)?.last() else {
        bail!("no checkpoints in {}", run_dir.display());
    };
    Ok(tracer_core::trainer::checkpoint_dir(run_dir, epoch))
}

fn eval(c: Eval) -> Result<()> {
    let s = Settings::load(c.config.as_deref())?;
    let ckpt = match (&c.checkpoint, &c.run_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(r)) => newest_checkpoint(r)?,
        (None, None) => bail!("pass --run-dir or --checkpoint"),
    };
    let state = TrainState::load(&ckpt)?;
    let env: EnvId = match c.env.or(s.get("env")) {
        Some(e) => e.parse()?,
        None => state.env,
    };
    let episodes = s.pick(c.episodes, "episodes", 100)?;
    let n_seeds = s.pick(c.num_seeds, "num_seeds", 4)?;
    let seeds: Vec<u64> = (0..n_seeds).map(|k| c.seed + k).collect();
    let rep = evaluate_policy(&state, env, episodes, &seeds)?;
    let out = match (c.out, &c.run_dir) {
        (Some(p), _) => Some(p),
        (None, Some(r)) => Some(r.join(EVAL_FILE)),
        (None, None) => None,
    };
    if let Some(p) = out {
        fs::write(&p, serde_json::to_string_pretty(&rep)?).with_context(|| format!("writing {}", p.display()))?;
    }
    println!(
        "{env}: return {:.3} ± {:.3}, normalized {:.2} ± {:.2} over {} seeds",
        rep.mean_return,
        rep.stderr_return,
        rep.normalized_mean,
        rep.normalized_stderr,
        seeds.len()
    );
    Ok(())
}

fn probe(c: Probe) -> Result<()> {
    let s = Settings::load(c.config.as_deref())?;
    let data = Dataset::load(&c.data)?;
    let d = ProbeConfig::new(c.seed);
    let cfg = ProbeConfig {
        batches: s.pick(c.batches, "batches", d.batches)?,
        per_side: s.pick(c.per_side, "per_side", d.per_side)?,
        seed: c.seed,
    };
    let results = match (&c.checkpoint, &c.run_dir) {
        (Some(p), _) => vec![(0, entropy_probe(&TrainState::load(p)?, &data, &cfg)?)],
        (None, Some(r)) => probe_run(r, &data, &cfg)?,
        (None, None) => bail!("pass --run-dir or --checkpoint"),
    };
    println!("{}", tracer_core::eval::PROBE_HEADER);
    for (epoch, r) in results {
        println!(
            "{epoch},{:.4},{},{},{:.6},{:.6}",
            r.accuracy,
            r.comparisons,
            r.ties,
            r.clean_mean(),
            r.corrupted_mean()
        );
    }
    Ok(())
}

fn expand_runs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.join(tracer_core::trainer::RUN_FILE).exists() || !p.is_dir() {
            out.push(p.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = fs::read_dir(p)
            .with_context(|| format!("listing {}", p.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|c| c.is_dir())
            .collect();
        children.sort();
        if children.is_empty() {
            out.push(p.clone());
        } else {
            out.extend(children);
        }
    }
    Ok(out)
}

fn report_cmd(c: ReportCmd) -> Result<()> {
    let s = Settings::load(c.config.as_deref())?;
    let mut runs = c.runs.clone();
    if runs.is_empty() {
        if let Some(p) = s.path("runs") {
            runs.push(p);
        }
    }
    let runs = expand_runs(&runs)?;
    let rep = report(&runs, &c.out)?;
    println!("{}", fs::read_to_string(c.out.join(tracer_core::eval::SUMMARY_FILE))?.trim_end());
    for m in &rep.missing {
        eprintln!("missing or incomplete run: {}", m.display());
    }
    Ok(())
}
