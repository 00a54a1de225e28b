use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cvarppo::bandit::{run_bandit, ArmSource, BanditConfig, BanditRun, GaussianArms, PolicyArms, TraceArms};
use cvarppo::config::{ArmSpec, ExperimentConfig};
use cvarppo::envsim::{resolve_perturbation, EnvConfig};
use cvarppo::error::TrainError;
use cvarppo::riskcore::RiskLevel;
use cvarppo::selftest::{run_selftest, CheckResult, Hooks};
use cvarppo::trainer::{evaluate, Checkpoint, EvalSummary, IterationMetrics, Trainer};
use rand_chacha::ChaCha8Rng;

use crate::error::CliError;
use crate::manifest::{create_run_dir, sha256_hex, unix_now, Manifest, RunArgs, CONFIG_SNAPSHOT, MANIFEST_FORMAT};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.log";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.json";
pub const ROBUSTNESS_FILE: &str = "robustness.csv";
pub const SELECTIONS_FILE: &str = "selections.csv";
pub const REGRET_FILE: &str = "regret.csv";
pub const SUMMARY_FILE: &str = "selection_summary.csv";

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub run_id: Option<String>,
}

#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub path: PathBuf,
    pub text: String,
    pub config: ExperimentConfig,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_loaded(path, text)
}

fn parse_loaded(path: &Path, text: String) -> Result<LoadedConfig, CliError> {
    let config = ExperimentConfig::parse(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok(LoadedConfig {
        path: path.to_path_buf(),
        text,
        config,
    })
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn fmt_alpha(a: f64) -> String {
    format!("{a}")
}

struct RunWriter {
    dir: PathBuf,
    manifest: Manifest,
}

impl RunWriter {
    fn create(
        root: &Path,
        run_id: &str,
        subcommand: &str,
        loaded: &LoadedConfig,
        seed: u64,
        args: RunArgs,
    ) -> Result<Self, CliError> {
        let dir = create_run_dir(root, run_id)?;
        write_file(&dir.join(CONFIG_SNAPSHOT), loaded.text.as_bytes())?;
        Ok(Self {
            dir,
            manifest: Manifest {
                format: MANIFEST_FORMAT,
                run_id: run_id.to_string(),
                subcommand: subcommand.to_string(),
                config_path: loaded.path.clone(),
                config_snapshot: CONFIG_SNAPSHOT.into(),
                config_sha256: sha256_hex(loaded.text.as_bytes()),
                seed,
                args,
                started_unix: unix_now(),
                finished_unix: 0,
                artifacts: vec![CONFIG_SNAPSHOT.into()],
            },
        })
    }

    fn artifact(&mut self, rel: impl Into<String>) {
        self.manifest.artifacts.push(rel.into());
    }

    fn finish(mut self) -> Result<PathBuf, CliError> {
        self.manifest.finished_unix = unix_now();
        self.manifest.save(&self.dir)?;
        Ok(self.dir)
    }
}

/// Config with the command-line overrides applied.
fn train_config(loaded: &LoadedConfig, seed: u64, args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = loaded.config.clone();
    cfg.train.seed = seed;
    if let Some(a) = args.alpha {
        cfg.train.alpha = RiskLevel::new(a).map_err(|e| CliError::Validation(format!("--alpha: {e}")))?;
    }
    if let Some(f) = args.freeze_lambda {
        cfg.train.freeze_lambda = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_train_id(cfg: &ExperimentConfig) -> String {
    if cfg.train.freeze_lambda {
        format!("ppo-s{}", cfg.train.seed)
    } else {
        format!("train-a{}-s{}", fmt_alpha(cfg.train.alpha.value()), cfg.train.seed)
    }
}

fn effective_seed(g: &Globals, loaded: &LoadedConfig) -> u64 {
    g.seed.unwrap_or(loaded.config.train.seed)
}

pub fn cmd_train(g: &Globals, loaded: &LoadedConfig, args: RunArgs) -> Result<PathBuf, CliError> {
    let seed = effective_seed(g, loaded);
    let cfg = train_config(loaded, seed, &args)?;
    let run_id = g.run_id.clone().unwrap_or_else(|| default_train_id(&cfg));
    train_into(&g.output_dir, &run_id, loaded, seed, args, "train")
}

/// Trains one policy into `root/run_id`.
pub fn train_into(
    root: &Path,
    run_id: &str,
    loaded: &LoadedConfig,
    seed: u64,
    args: RunArgs,
    subcommand: &str,
) -> Result<PathBuf, CliError> {
    let cfg = train_config(loaded, seed, &args)?;
    let mut trainer = Trainer::new(cfg.train.clone(), cfg.env.clone(), cfg.reward.clone())?;
    let mut run = RunWriter::create(root, run_id, subcommand, loaded, seed, args)?;
    let result = train_loop(&mut trainer, &run.dir);
    run.artifact(METRICS_FILE);
    run.artifact(TIMING_FILE);
    let ck_dir = run.dir.join(CHECKPOINT_DIR);
    match result {
        Ok(saved) => {
            for s in saved {
                run.artifact(format!("{CHECKPOINT_DIR}/{s}"));
            }
            trainer.checkpoint().save(&ck_dir.join(FINAL_CHECKPOINT))?;
            run.artifact(format!("{CHECKPOINT_DIR}/{FINAL_CHECKPOINT}"));
            run.finish()
        }
        Err(e) => {
            // The trainer rolled back to the last good iteration.
            let name = "last_good.json";
            trainer.checkpoint().save(&ck_dir.join(name))?;
            run.artifact(format!("{CHECKPOINT_DIR}/{name}"));
            run.finish()?;
            Err(e.into())
        }
    }
}

fn train_loop(trainer: &mut Trainer, dir: &Path) -> Result<Vec<String>, TrainError> {
    let io = |p: &Path, e: std::io::Error| TrainError::Checkpoint(format!("{}: {e}", p.display()));
    let ck_dir = dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ck_dir).map_err(|e| io(&ck_dir, e))?;
    let metrics_path = dir.join(METRICS_FILE);
    let timing_path = dir.join(TIMING_FILE);
    let mut metrics = File::create(&metrics_path).map_err(|e| io(&metrics_path, e))?;
    let mut timing = File::create(&timing_path).map_err(|e| io(&timing_path, e))?;
    writeln!(metrics, "{}", IterationMetrics::CSV_HEADER).map_err(|e| io(&metrics_path, e))?;
    writeln!(timing, "iteration wall_seconds").map_err(|e| io(&timing_path, e))?;
    let every = trainer.config().checkpoint_every;
    let mut saved = Vec::new();
    let mut clock = Instant::now();
    trainer.run(|t, m| {
        writeln!(metrics, "{}", m.csv_row()).map_err(|e| io(&metrics_path, e))?;
        writeln!(timing, "{} {:.6}", m.iteration, clock.elapsed().as_secs_f64()).map_err(|e| io(&timing_path, e))?;
        clock = Instant::now();
        if every > 0 && t.iteration() % every == 0 {
            let name = format!("ckpt_{:06}.json", t.iteration());
            t.checkpoint().save(&ck_dir.join(&name))?;
            saved.push(name);
        }
        Ok(())
    })?;
    Ok(saved)
}

/// Display name: the run directory for `run/checkpoints/final.json`,
/// `run/<stem>` for other checkpoints in a run, else the file stem.
pub fn policy_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let parent = path.parent();
    let in_run = parent.and_then(|p| p.file_name()).is_some_and(|n| n == CHECKPOINT_DIR);
    match parent.and_then(|p| p.parent()).and_then(|r| r.file_name()) {
        Some(run) if in_run => {
            let run = run.to_string_lossy();
            if stem == "final" {
                run.into_owned()
            } else {
                format!("{run}/{stem}")
            }
        }
        _ => stem,
    }
}

fn absolute(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    paths
        .iter()
        .map(|p| std::fs::canonicalize(p).map_err(|e| CliError::io(p, e)))
        .collect()
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::Validation(e.to_string()))
}

pub fn cmd_eval(g: &Globals, loaded: &LoadedConfig, mut args: RunArgs) -> Result<PathBuf, CliError> {
    if args.checkpoints.is_empty() {
        return Err(CliError::Validation("eval needs at least one --checkpoint".into()));
    }
    args.checkpoints = absolute(&args.checkpoints)?;
    let seed = effective_seed(g, loaded);
    let run_id = g.run_id.clone().unwrap_or_else(|| format!("eval-s{seed}"));
    eval_into(&g.output_dir, &run_id, loaded, seed, args)
}

fn eval_into(root: &Path, run_id: &str, loaded: &LoadedConfig, seed: u64, args: RunArgs) -> Result<PathBuf, CliError> {
    let cfg = &loaded.config;
    let names = if args.perturbations.is_empty() {
        cfg.eval.perturbations.clone()
    } else {
        args.perturbations.clone()
    };
    let suite = cfg.suite();
    let specs = names
        .iter()
        .map(|n| resolve_perturbation(&suite, n))
        .collect::<Result<Vec<_>, _>>()?;
    let episodes = args.episodes.unwrap_or(cfg.eval.episodes);
    if episodes == 0 {
        return Err(CliError::Validation("--episodes must be at least 1".into()));
    }
    let alphas = cfg
        .eval
        .alphas
        .iter()
        .map(|&a| RiskLevel::new(a).map_err(|e| CliError::Validation(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let policies = args
        .checkpoints
        .iter()
        .map(|p| Ok((policy_name(p), load_checkpoint(p)?)))
        .collect::<Result<Vec<_>, CliError>>()?;

    let mut run = RunWriter::create(root, run_id, "eval", loaded, seed, args)?;
    let path = run.dir.join(ROBUSTNESS_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(robustness_header(&alphas))?;
    for (name, ck) in &policies {
        for (pname, spec) in names.iter().zip(&specs) {
            let s = evaluate(ck, spec, episodes, &alphas, seed, cfg.eval.num_envs, cfg.eval.command_bound)?;
            w.write_record(robustness_row(name, pname, &s))?;
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    run.artifact(ROBUSTNESS_FILE);
    run.finish()
}

pub fn robustness_header(alphas: &[RiskLevel]) -> Vec<String> {
    let mut h: Vec<String> = ["policy", "perturbation", "episodes", "mean", "failure_rate", "mean_length"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for a in alphas {
        h.push(format!("var_{}", fmt_alpha(a.value())));
        h.push(format!("cvar_{}", fmt_alpha(a.value())));
    }
    h
}

fn robustness_row(policy: &str, perturbation: &str, s: &EvalSummary) -> Vec<String> {
    let mut r = vec![
        policy.to_string(),
        perturbation.to_string(),
        s.episodes.to_string(),
        format!("{:?}", s.mean),
        format!("{:?}", s.failure_rate),
        format!("{:?}", s.mean_length),
    ];
    for t in &s.tails {
        r.push(format!("{:?}", t.var));
        r.push(format!("{:?}", t.cvar));
    }
    r
}

/// Arms from heterogeneous sources, one sub-source per arm.
struct MixedArms {
    arms: Vec<Box<dyn ArmSource>>,
}

impl ArmSource for MixedArms {
    fn num_arms(&self) -> usize {
        self.arms.len()
    }

    fn pull(&mut self, arm: usize, rng: &mut ChaCha8Rng) -> f64 {
        self.arms[arm].pull(0, rng)
    }

    fn true_means(&self) -> Option<Vec<f64>> {
        self.arms.iter().map(|a| a.true_means().map(|m| m[0])).collect()
    }
}

fn build_arms(cfg: &ExperimentConfig, extra: &[PathBuf], perturbation: &str, seed: u64) -> Result<MixedArms, CliError> {
    let episode_len = cfg.bandit.episode_len.unwrap_or(cfg.env.episode_len);
    let suite = cfg.suite();
    let policy_arm = |k: usize, path: &Path, pert: &str| -> Result<Box<dyn ArmSource>, CliError> {
        let ck = load_checkpoint(path)?;
        let spec = resolve_perturbation(&suite, pert)?;
        let env = EnvConfig {
            episode_len,
            ..ck.trainer.env().config().clone()
        };
        let bound = cfg.eval.command_bound.unwrap_or(ck.trainer.env().curriculum_bound());
        let arm = PolicyArms::new(
            vec![ck.policy().clone()],
            &env,
            ck.trainer.env().weights(),
            &spec,
            bound,
            seed.wrapping_add(k as u64),
        )?;
        Ok(Box::new(arm))
    };
    let mut arms: Vec<Box<dyn ArmSource>> = Vec::new();
    for spec in &cfg.bandit.arms {
        let k = arms.len();
        arms.push(match spec {
            ArmSpec::Gaussian { mean, std } => Box::new(GaussianArms::new(&[(*mean, *std)])?),
            ArmSpec::FixedTrace { returns } => Box::new(TraceArms::new(vec![returns.clone()])?),
            ArmSpec::LivePolicy {
                checkpoint,
                perturbation,
            } => policy_arm(k, checkpoint, perturbation)?,
        });
    }
    for path in extra {
        let k = arms.len();
        arms.push(policy_arm(k, path, perturbation)?);
    }
    Ok(MixedArms { arms })
}

pub fn cmd_bandit(g: &Globals, loaded: &LoadedConfig, mut args: RunArgs) -> Result<PathBuf, CliError> {
    args.checkpoints = absolute(&args.checkpoints)?;
    let seed = effective_seed(g, loaded);
    let run_id = g.run_id.clone().unwrap_or_else(|| format!("bandit-s{seed}"));
    bandit_into(&g.output_dir, &run_id, loaded, seed, args)
}

fn bandit_into(root: &Path, run_id: &str, loaded: &LoadedConfig, seed: u64, args: RunArgs) -> Result<PathBuf, CliError> {
    let cfg = &loaded.config;
    if args.perturbations.len() > 1 {
        return Err(CliError::Validation("bandit takes at most one --perturbation".into()));
    }
    let pert = args.perturbations.first().map(String::as_str).unwrap_or("none");
    let mut source = build_arms(cfg, &args.checkpoints, pert, seed)?;
    if source.num_arms() < 2 {
        return Err(CliError::Validation(format!(
            "bandit needs at least 2 arms, got {}",
            source.num_arms()
        )));
    }
    let episode_len = cfg.bandit.episode_len.unwrap_or(cfg.env.episode_len);
    let bcfg = BanditConfig {
        num_arms: source.num_arms(),
        episode_len,
        horizon: args.episodes.unwrap_or(cfg.bandit.horizon),
        delta_conf: cfg.bandit.delta_conf,
        reward_range: cfg.bandit_reward_range(),
    };
    bcfg.validate()?;
    let result = run_bandit(&mut source, &bcfg, seed)?;

    let mut run = RunWriter::create(root, run_id, "bandit", loaded, seed, args)?;
    write_bandit_csvs(&run.dir, &result, episode_len, cfg.bandit.window)?;
    for f in [SELECTIONS_FILE, REGRET_FILE, SUMMARY_FILE] {
        run.artifact(f);
    }
    run.finish()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Selection history, regret curve and the windowed selection summary.
/// Arms are numbered from 1 in every file.
pub fn write_bandit_csvs(dir: &Path, run: &BanditRun, episode_len: u32, window: usize) -> Result<(), CliError> {
    let k = run.stats.len();
    let realized = run.realized_regret().unwrap_or_else(|| run.empirical_regret());
    let pseudo = run.pseudo_regret();

    let mut w = csv::Writer::from_path(dir.join(SELECTIONS_FILE))?;
    let mut header = vec!["episode".to_string(), "arm".into(), "return".into()];
    header.extend((1..=k).map(|i| format!("ucb_{i}")));
    header.extend(["cumulative_regret".to_string(), "pseudo_regret".into()]);
    w.write_record(&header)?;
    for (i, r) in run.records.iter().enumerate() {
        let mut row = vec![r.episode.to_string(), (r.arm + 1).to_string(), format!("{:?}", r.episodic_return)];
        match &r.ucb {
            Some(u) => row.extend(u.iter().map(|x| format!("{x:?}"))),
            None => row.extend(std::iter::repeat_n(String::new(), k)),
        }
        row.push(format!("{:?}", realized[i]));
        row.push(opt(pseudo.as_ref().map(|p| p[i])));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::io(dir, e))?;

    let mut w = csv::Writer::from_path(dir.join(REGRET_FILE))?;
    w.write_record(["episode", "timestep", "cumulative_regret", "mean_regret", "pseudo_regret"])?;
    for (i, r) in realized.iter().enumerate() {
        let e = i + 1;
        w.write_record([
            e.to_string(),
            (e as u64 * episode_len as u64).to_string(),
            format!("{r:?}"),
            format!("{:?}", r / e as f64),
            opt(pseudo.as_ref().map(|p| p[i])),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(dir, e))?;

    let freq = run.selection_frequencies(window);
    let mut w = csv::Writer::from_path(dir.join(SUMMARY_FILE))?;
    let mut header = vec!["arm".to_string()];
    let n = run.records.len();
    header.extend((0..freq.len()).map(|j| (((j + 1) * window).min(n) as u64 * episode_len as u64).to_string()));
    w.write_record(&header)?;
    for arm in 0..k {
        let mut row = vec![(arm + 1).to_string()];
        row.extend(freq.iter().map(|f| format!("{:?}", f[arm])));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::io(dir, e))?;
    Ok(())
}

/// Member runs of a sweep: (run id, alpha override, freeze λ).
fn sweep_members(cfg: &ExperimentConfig) -> Vec<(String, f64, bool)> {
    let mut m: Vec<(String, f64, bool)> = cfg
        .sweep
        .alphas
        .iter()
        .map(|&a| (format!("cvar-a{}", fmt_alpha(a)), a, false))
        .collect();
    if cfg.sweep.include_ppo {
        m.push(("ppo".into(), 1.0, true));
    }
    m
}

/// Trains every sweep member concurrently under one directory, then
/// evaluates all final checkpoints on the configured perturbations.
pub fn cmd_sweep(g: &Globals, loaded: &LoadedConfig, args: RunArgs) -> Result<PathBuf, CliError> {
    let seed = effective_seed(g, loaded);
    let run_id = g.run_id.clone().unwrap_or_else(|| format!("sweep-s{seed}"));
    sweep_into(&g.output_dir, &run_id, loaded, seed, args)
}

fn sweep_into(root: &Path, run_id: &str, loaded: &LoadedConfig, seed: u64, args: RunArgs) -> Result<PathBuf, CliError> {
    let members = sweep_members(&loaded.config);
    let mut run = RunWriter::create(root, run_id, "sweep", loaded, seed, args.clone())?;
    let dir = run.dir.clone();
    let results: Vec<Result<PathBuf, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = members
            .iter()
            .map(|(id, alpha, freeze)| {
                let member_args = RunArgs {
                    alpha: Some(*alpha),
                    freeze_lambda: Some(*freeze),
                    ..Default::default()
                };
                let dir = &dir;
                s.spawn(move || train_into(dir, id, loaded, seed, member_args, "train"))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Runtime("training thread panicked".into()))))
            .collect()
    });
    let mut checkpoints = Vec::new();
    for ((id, _, _), r) in members.iter().zip(results) {
        r?;
        run.artifact(format!("{id}/{}", crate::manifest::MANIFEST_FILE));
        checkpoints.push(dir.join(id).join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT));
    }
    let eval_args = RunArgs {
        checkpoints,
        ..args
    };
    eval_into(&dir, "eval", loaded, seed, eval_args)?;
    run.artifact(format!("eval/{ROBUSTNESS_FILE}"));
    run.finish()
}

pub fn cmd_selftest(g: &Globals) -> Result<Vec<CheckResult>, CliError> {
    let results = run_selftest(Hooks::default(), g.seed.unwrap_or(0));
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if results.iter().all(|r| r.passed) {
        Ok(results)
    } else {
        Err(CliError::SelftestFailed)
    }
}

/// Re-executes a recorded run into `output_root` under the same run id.
pub fn cmd_replay(manifest_path: &Path, output_root: &Path) -> Result<PathBuf, CliError> {
    let m = Manifest::load(manifest_path)?;
    let run_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let text = m.snapshot_text(run_dir)?;
    let loaded = parse_loaded(&run_dir.join(&m.config_snapshot), text)?;
    let args = m.args.clone();
    match m.subcommand.as_str() {
        "train" => train_into(output_root, &m.run_id, &loaded, m.seed, args, "train"),
        "eval" => eval_into(output_root, &m.run_id, &loaded, m.seed, args),
        "bandit" => bandit_into(output_root, &m.run_id, &loaded, m.seed, args),
        "sweep" => sweep_into(output_root, &m.run_id, &loaded, m.seed, args),
        other => Err(CliError::Validation(format!("cannot replay subcommand {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_names() {
        assert_eq!(policy_name(Path::new("/x/ppo-s1/checkpoints/final.json")), "ppo-s1");
        assert_eq!(policy_name(Path::new("/x/r/checkpoints/ckpt_000010.json")), "r/ckpt_000010");
        assert_eq!(policy_name(Path::new("/x/y/pol.json")), "pol");
    }

    #[test]
    fn sweep_has_five_alphas_and_ppo() {
        let cfg = ExperimentConfig::parse("[train]\nalpha = 0.5\n").unwrap();
        let m = sweep_members(&cfg);
        assert_eq!(m.len(), 6);
        assert_eq!(m.iter().filter(|x| x.2).count(), 1);
    }
}
