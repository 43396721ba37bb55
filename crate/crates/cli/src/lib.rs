//! `tasktokens` subcommands. [`run`] is the whole program minus `main`, so
//! tests can drive it in-process.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tasktokens::adapter::{trainable_parameters, Mode, Policy};
use tasktokens::bfm::{dagger_pretrain, load_checkpoint, save_checkpoint, Checkpoint, PretrainRow};
use tasktokens::eval::{
    ablation_run, evaluate_seeds, ood_sweep, write_ablation_csv, write_report_csv, write_sweep_csv, PolicyController,
};
use tasktokens::ppo::train;
use tasktokens::{Error, RunConfig, TaskKind};

#[derive(Debug, Parser)]
#[command(
    name = "tasktokens",
    version,
    about = "Task-token adaptation of a frozen behavior model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Distill the scripted expert into a behavior model (DAgger).
    Pretrain(Common),
    /// Adapt to one task with PPO.
    Train(TaskArgs),
    /// Success rate of a trained policy over the configured seeds.
    Eval(TaskArgs),
    /// Friction / gravity perturbation sweep of a trained policy.
    Sweep(TaskArgs),
    /// Encoder width × pose input × prior ablation (trains every cell).
    Ablate(TaskArgs),
    /// Print a checkpoint manifest and, for behavior models, per-mode trainable counts.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; omitted sections take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root; beats both the config and the environment.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TaskArgs {
    #[command(flatten)]
    pub common: Common,
    /// direction, steering, reach, strike or dash.
    #[arg(long, default_value = "direction", value_parser = parse_task)]
    pub task: TaskKind,
    /// task_tokens, full_finetune, pure_ppo or prompt_only.
    #[arg(long, default_value = "task_tokens", value_parser = parse_mode)]
    pub mode: Mode,
    /// Policy checkpoint for eval / sweep (else `io.policy_checkpoint`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e| format!("{e}"))
}

/// Parses `argv` (program name first) and runs it. Returns the exit code:
/// 0 on success, 2 for unusable flags, 1 for anything that fails later.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version also arrive here, on stdout with code 0.
            if e.use_stderr() {
                let _ = write!(stderr, "{}", e.render());
                return 2;
            }
            let _ = write!(stdout, "{}", e.render());
            return 0;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<(), Error> {
    match cmd {
        Command::Pretrain(c) => pretrain(&c, out),
        Command::Train(a) => train_cmd(&a, out),
        Command::Eval(a) => eval_cmd(&a, out),
        Command::Sweep(a) => sweep_cmd(&a, out),
        Command::Ablate(a) => ablate_cmd(&a, out),
        Command::Inspect { checkpoint, config } => inspect(&checkpoint, config.as_deref(), out),
    }
}

/// Config after file, environment and flag overrides.
pub fn resolve(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .with_env_output();
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.io.output = out.clone();
    }
    Ok(cfg)
}

/// Creates `io.output/<run_id>/` and echoes the resolved config into it.
fn run_dir(cfg: &RunConfig, run_id: &str) -> Result<PathBuf, Error> {
    let dir = cfg.io.output.join(run_id);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    Ok(dir)
}

fn task_run_id(cmd: &str, a: &TaskArgs, seed: u64) -> String {
    format!("{cmd}-{}-{}-s{seed}", a.task.name(), a.mode.name())
}

fn required<'a>(p: Option<&'a PathBuf>, what: &str) -> Result<&'a Path, Error> {
    p.map(PathBuf::as_path)
        .ok_or_else(|| Error::Config(format!("{what} is not set")))
}

fn load_bfm(cfg: &RunConfig) -> Result<Checkpoint, Error> {
    Ok(load_checkpoint(required(
        cfg.io.bfm_checkpoint.as_ref(),
        "io.bfm_checkpoint",
    )?)?)
}

fn pretrain(c: &Common, out: &mut dyn Write) -> Result<(), Error> {
    let cfg = resolve(c)?;
    let dir = run_dir(&cfg, &format!("pretrain-s{}", cfg.seed))?;
    let o = dagger_pretrain(&cfg.bfm.pretrain, &cfg.bfm.model, &cfg.sim.physics, cfg.seed, Some(out))?;
    save_checkpoint(&o.checkpoint, &dir.join("bfm.ckpt"))?;
    PretrainRow::write_csv(&o.history, fs::File::create(dir.join("pretrain.csv"))?)?;
    writeln!(
        out,
        "validation mse {:.5} -> {:.5} ({:.1}% of initial); wrote {}",
        o.initial_val_mse,
        o.final_val_mse,
        100.0 * o.final_val_mse / o.initial_val_mse,
        dir.join("bfm.ckpt").display()
    )?;
    Ok(())
}

fn train_cmd(a: &TaskArgs, out: &mut dyn Write) -> Result<(), Error> {
    let cfg = resolve(&a.common)?;
    let bfm = if a.mode.uses_bfm() { Some(load_bfm(&cfg)?) } else { None };
    let dir = run_dir(&cfg, &task_run_id("train", a, cfg.seed))?;
    let setup = cfg.train_setup(a.mode, a.task, cfg.seed);
    let o = train(&setup, bfm.as_ref(), Some(&dir), Some(out))?;
    let last = o.metrics.last().map_or(0.0, |r| r.success_rate);
    writeln!(
        out,
        "{} env steps, final success {last:.1}%; outputs in {}",
        o.env_steps,
        dir.display()
    )?;
    Ok(())
}

/// The policy to evaluate: a checkpoint, or a freshly built prompt-only policy.
fn load_policy(cfg: &RunConfig, a: &TaskArgs) -> Result<Policy, Error> {
    let path = a.checkpoint.as_ref().or(cfg.io.policy_checkpoint.as_ref());
    match path {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            let needs_bfm = ckpt
                .manifest
                .config
                .get("mode")
                .and_then(|m| serde_json::from_value::<Mode>(m.clone()).ok())
                .is_some_and(Mode::uses_bfm);
            let bfm = if needs_bfm { Some(load_bfm(cfg)?) } else { None };
            let policy = Policy::from_checkpoint(&ckpt, bfm.as_ref())?;
            if policy.task != a.task {
                return Err(Error::Config(format!(
                    "checkpoint was trained on {}, not {}",
                    policy.task.name(),
                    a.task.name()
                )));
            }
            Ok(policy)
        }
        None if a.mode == Mode::PromptOnly => {
            let bfm = load_bfm(cfg)?;
            Ok(Policy::new(a.mode, a.task, cfg.adapter.clone(), Some(&bfm), cfg.seed)?)
        }
        None => Err(Error::Config(format!(
            "mode {} needs a policy checkpoint (--checkpoint or io.policy_checkpoint)",
            a.mode
        ))),
    }
}

fn eval_cmd(a: &TaskArgs, out: &mut dyn Write) -> Result<(), Error> {
    let cfg = resolve(&a.common)?;
    let policy = load_policy(&cfg, a)?;
    let report = evaluate_seeds(
        &mut PolicyController::new(&policy),
        &cfg.eval_setup(a.task),
        cfg.eval.episodes,
        &cfg.eval.seeds,
        Some(policy.mode),
    )?;
    let dir = run_dir(&cfg, &task_run_id("eval", a, cfg.seed))?;
    write_report_csv(&report, fs::File::create(dir.join("eval.csv"))?)?;
    writeln!(
        out,
        "{} / {}: {:.2} ± {:.2}% over {} seeds × {} episodes",
        a.task.name(),
        policy.mode,
        report.mean,
        report.std,
        report.seeds.len(),
        report.episodes
    )?;
    Ok(())
}

fn sweep_cmd(a: &TaskArgs, out: &mut dyn Write) -> Result<(), Error> {
    let cfg = resolve(&a.common)?;
    let policy = load_policy(&cfg, a)?;
    let mut grid = cfg.eval.sweep.clone();
    grid.task = a.task;
    let rows = ood_sweep(
        &mut PolicyController::new(&policy),
        &grid,
        &cfg.eval_setup(a.task),
        cfg.eval.episodes,
        &cfg.eval.seeds,
    )?;
    let dir = run_dir(&cfg, &task_run_id("sweep", a, cfg.seed))?;
    write_sweep_csv(&rows, fs::File::create(dir.join("sweep.csv"))?)?;
    for r in &rows {
        writeln!(
            out,
            "{:<8} friction ×{:<4} gravity ×{:<4} {:6.2} ± {:.2}",
            r.axis, r.friction, r.gravity, r.mean, r.std
        )?;
    }
    Ok(())
}

fn ablate_cmd(a: &TaskArgs, out: &mut dyn Write) -> Result<(), Error> {
    let cfg = resolve(&a.common)?;
    let bfm = load_bfm(&cfg)?;
    let dir = run_dir(&cfg, &format!("ablate-{}-s{}", a.task.name(), cfg.seed))?;
    let base = cfg.train_setup(Mode::TaskTokens, a.task, cfg.seed);
    let rows = ablation_run(&cfg.eval.ablation, &base, &bfm, Some(out))?;
    write_ablation_csv(&rows, fs::File::create(dir.join("ablation.csv"))?)?;
    Ok(())
}

fn inspect(path: &Path, config: Option<&Path>, out: &mut dyn Write) -> Result<(), Error> {
    let ckpt = load_checkpoint(path)?;
    let m = &ckpt.manifest;
    writeln!(out, "kind {}\nsha256 {}", m.kind, m.sha256)?;
    for (k, v) in &m.metadata {
        writeln!(out, "meta {k} = {v}")?;
    }
    for t in &m.tensors {
        writeln!(out, "tensor {} {:?}", t.name, t.shape)?;
    }
    if m.kind == "bfm" {
        let cfg = match config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for mode in [Mode::TaskTokens, Mode::FullFinetune, Mode::PurePpo, Mode::PromptOnly] {
            let policy = Policy::new(mode, TaskKind::Direction, cfg.adapter.clone(), Some(&ckpt), cfg.seed)?;
            let set = trainable_parameters(mode, &policy)?;
            writeln!(out, "trainable {} {}", mode, set.count)?;
        }
    }
    Ok(())
}
