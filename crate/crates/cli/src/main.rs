//! `geco`: command-line driver for base training, correction collection,
//! adaptation, evaluation and the continual, efficiency and transfer studies.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use geco_core::config::ExperimentConfig;
use geco_core::envsuite::{TaskKind, TaskSpec};
use geco_core::experiment::{
    base_from_checkpoint, demos_to_jsonl, efficiency_csv, evaluate, load_adapter, run_continual, run_efficiency,
    run_transfer, train_base, transfer_csv, AdaptedActor, BaseStore, Learner, TrainedBase,
};
use geco_core::geomoe::GroupedObs;
use geco_core::metrics::{report_csv, report_table};
use geco_core::pointcloud::{parse_cloud, Frame};
use geco_core::{GecoError, Result};

#[derive(Parser)]
#[command(name = "geco", version, about = "Geometry-aware continual sim-to-real adaptation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; keys it omits keep the values of the selected profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in defaults the config file is layered over.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    /// Overrides `experiment.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "geco-out")]
    out: PathBuf,
    /// Overrides `experiment.method`.
    #[arg(long, global = true)]
    method: Option<String>,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the resolved config as TOML before running.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    /// Reduced sizes for one desktop core.
    Desk,
    /// Full-size defaults.
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Generate sim demonstrations and behaviour-clone a frozen base policy.
    TrainBase {
        #[arg(long)]
        task: String,
    },
    /// Run shared-autonomy rollouts on the real variant and record corrections.
    Collect {
        #[arg(long)]
        task: String,
        #[command(flatten)]
        models: Models,
        /// Number of corrected trajectories; defaults to `collect.corrections`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Collect corrections for one task and adapt the method's trainable module.
    Adapt {
        #[arg(long)]
        task: String,
        #[command(flatten)]
        models: Models,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Success rate of a base policy (plus optional adapter) on one task variant.
    Eval {
        #[arg(long)]
        task: String,
        #[command(flatten)]
        models: Models,
        /// Evaluate on the sim variant instead of the real one.
        #[arg(long)]
        sim: bool,
    },
    /// Full continual run over `experiment.tasks`.
    Continual,
    /// From-scratch vs from-continued success across correction budgets.
    Efficiency,
    /// Adapt on a source task, then on a target task with a small budget.
    CrossTransfer {
        #[arg(long)]
        source: Option<String>,
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Per-group geometric features of a point cloud.
    Feat {
        /// Whitespace-separated `x y z` lines in the base frame.
        #[arg(long, conflicts_with = "task")]
        input: Option<PathBuf>,
        /// Use the first sim observation of this task instead of a file.
        #[arg(long)]
        task: Option<String>,
    },
}

#[derive(Args)]
struct Models {
    /// Base checkpoint; trained from scratch when omitted.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Adapter checkpoint for the configured method.
    #[arg(long)]
    adapter: Option<PathBuf>,
}

/// Held for the lifetime of a run; removes the lock file on drop.
struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".geco.lock");
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                GecoError::Io(std::io::Error::new(e.kind(), format!("{} is locked by another run", dir.display())))
            } else {
                GecoError::Io(e)
            }
        })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn exit_code(e: &GecoError) -> u8 {
    match e {
        GecoError::Config(_) | GecoError::Parse(_) => 2,
        GecoError::CollectionFailure(_) => 3,
        GecoError::Io(_) | GecoError::Json(_) => 4,
        _ => 1,
    }
}

fn resolve_config(c: &Common) -> Result<ExperimentConfig> {
    let base = match c.profile {
        Profile::Desk => ExperimentConfig::desk(),
        Profile::Full => ExperimentConfig::default(),
    };
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::from_toml_over(&base, &fs::read_to_string(path)?)?,
        None => base,
    };
    for o in &c.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = c.seed {
        cfg.experiment.seed = seed;
    }
    if let Some(m) = &c.method {
        cfg.experiment.method = m.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_task(id: &str) -> Result<TaskKind> {
    id.parse().map_err(|_| GecoError::Config(format!("--task: unknown task id {id:?}")))
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn load_base(cfg: &ExperimentConfig, kind: TaskKind, models: &Models) -> Result<TrainedBase> {
    let seed = cfg.experiment.seed;
    match &models.base {
        Some(path) => base_from_checkpoint(cfg, kind, seed, &fs::read(path)?),
        None => train_base(cfg, kind, seed),
    }
}

fn learner_for<'c>(cfg: &'c ExperimentConfig, base: &TrainedBase, models: &Models) -> Result<(Learner<'c>, usize)> {
    let mut learner = Learner::new(cfg, cfg.experiment.method, cfg.experiment.seed)?;
    if let Some(path) = &models.adapter {
        learner.adapter = load_adapter(cfg, cfg.experiment.method, &fs::read(path)?)?;
    }
    let task = learner.add_task(base)?;
    Ok((learner, task))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    if cli.common.print_config {
        print!("{}", cfg.to_toml()?);
    }
    let out = &cli.common.out;
    let _lock = OutputLock::acquire(out)?;
    write(out, "config.toml", cfg.to_toml()?)?;
    match cli.command {
        Command::TrainBase { task } => {
            let kind = parse_task(&task)?;
            let base = train_base(&cfg, kind, cfg.experiment.seed)?;
            write(out, &format!("base_{kind}.ckpt"), base.policy.to_checkpoint())?;
            write(out, &format!("demos_{kind}.jsonl"), demos_to_jsonl(kind, &base.demos)?)?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in base.log.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l:.6}\n"));
            }
            write(out, &format!("bc_loss_{kind}.csv"), csv)?;
            let n = base.log.losses.len().min(100).max(1);
            let first = base.log.losses.iter().take(n).sum::<f64>() / n as f64;
            let last = base.log.losses.iter().rev().take(n).sum::<f64>() / n as f64;
            println!("{kind}: {} samples, loss {first:.4} -> {last:.4}", base.demos.len());
        }
        Command::Collect { task, models, n } => {
            let kind = parse_task(&task)?;
            let base = load_base(&cfg, kind, &models)?;
            let (learner, t) = learner_for(&cfg, &base, &models)?;
            let set = learner.collect(t, n.unwrap_or(cfg.collect.corrections))?;
            let mut jsonl = String::new();
            for traj in &set.trajectories {
                jsonl.push_str(&traj.to_jsonl()?);
            }
            write(out, &format!("corrections_{kind}.jsonl"), jsonl)?;
            println!(
                "{kind}: kept {} of {} trajectories, {} interventions",
                set.trajectories.len(),
                set.attempts,
                set.interventions()
            );
        }
        Command::Adapt { task, models, n } => {
            let kind = parse_task(&task)?;
            let base = load_base(&cfg, kind, &models)?;
            let (mut learner, t) = learner_for(&cfg, &base, &models)?;
            let (phase, gates) = learner.learn_task(t, n.unwrap_or(cfg.collect.corrections))?;
            write(out, &format!("adapter_{kind}.ckpt"), learner.adapter.checkpoint())?;
            write(out, &format!("base_{kind}.ckpt"), base.policy.to_checkpoint())?;
            if !gates.is_empty() {
                write(out, &format!("gates_{kind}.csv"), gates)?;
            }
            write(out, &format!("adapt_{kind}.log"), format!("{}\n", phase.line()))?;
            println!("{}", phase.line());
        }
        Command::Eval { task, models, sim } => {
            let kind = parse_task(&task)?;
            let base = load_base(&cfg, kind, &models)?;
            let (learner, _) = learner_for(&cfg, &base, &models)?;
            let spec = if sim {
                TaskSpec::sim(kind, cfg.policy.point_budget)
            } else {
                TaskSpec::real(kind, cfg.policy.point_budget)
            };
            let actor = AdaptedActor { policy: &base.policy, adapter: &learner.adapter, moe_arch: &cfg.moe };
            let e = &cfg.experiment;
            let sr = evaluate(&actor, &spec, e.eval_trials, e.eval_seed)?;
            let domain = if sim { "sim" } else { "real" };
            let csv = format!("task,domain,method,trials,success_rate\n{kind},{domain},{},{},{sr:.6}\n", e.method, e.eval_trials);
            write(out, &format!("eval_{kind}_{domain}.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Continual => {
            let mut store = BaseStore::new();
            let result = run_continual(&cfg, &mut store)?;
            write(out, "eval_matrix.csv", result.matrix.to_csv())?;
            write(out, "report.csv", report_csv(&result.matrix)?)?;
            let table = report_table(&result.matrix)?;
            write(out, "report.txt", &table)?;
            let log: String = result.phases.iter().map(|p| format!("{}\n", p.line())).collect();
            write(out, "phases.log", log)?;
            for (kind, csv) in &result.gate_records {
                if !csv.is_empty() {
                    write(out, &format!("gates_{kind}.csv"), csv)?;
                }
            }
            for ((kind, _), ckpt) in result.base_checkpoints.iter().zip(&result.adapter_checkpoints) {
                write(out, &format!("adapter_after_{kind}.ckpt"), ckpt)?;
            }
            for (kind, ckpt) in &result.base_checkpoints {
                write(out, &format!("base_{kind}.ckpt"), ckpt)?;
            }
            write(out, "buffer.jsonl", &result.buffer_jsonl)?;
            print!("{table}");
        }
        Command::Efficiency => {
            let mut store = BaseStore::new();
            let rows = run_efficiency(&cfg, &mut store)?;
            let csv = efficiency_csv(&rows);
            write(out, "efficiency.csv", &csv)?;
            print!("{csv}");
        }
        Command::CrossTransfer { source, target, budget } => {
            let t = &cfg.transfer;
            let source = parse_task(source.as_deref().unwrap_or(&t.source))?;
            let target = parse_task(target.as_deref().unwrap_or(&t.target))?;
            let mut store = BaseStore::new();
            let row = run_transfer(&cfg, &mut store, source, target, budget.unwrap_or(t.budget))?;
            let csv = transfer_csv(&[row]);
            write(out, "transfer.csv", &csv)?;
            print!("{csv}");
        }
        Command::Feat { input, task } => {
            let cloud = match (input, task) {
                (Some(path), _) => parse_cloud(&fs::read_to_string(path)?, Frame::Base)?,
                (None, Some(task)) => {
                    let spec = TaskSpec::sim(parse_task(&task)?, cfg.policy.point_budget);
                    geco_core::envsuite::EnvState::reset(&spec, cfg.experiment.seed).observe()?.cloud
                }
                (None, None) => return Err(GecoError::Config("feat needs --input or --task".into())),
            };
            let grouped = GroupedObs::build(&cloud, &cfg.moe)?;
            let mut csv = String::from("group_index,cx,cy,cz,linearity,planarity,saliency,lambda1,lambda2,lambda3\n");
            for (i, (g, f)) in grouped.groups.iter().zip(&grouped.geometry).enumerate() {
                let [cx, cy, cz] = g.centroid;
                let [l1, l2, l3] = f.eigvals;
                csv.push_str(&format!(
                    "{i},{cx:.6},{cy:.6},{cz:.6},{:.6},{:.6},{:.6},{l1:.6e},{l2:.6e},{l3:.6e}\n",
                    f.linearity, f.planarity, f.saliency
                ));
            }
            write(out, "features.csv", &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
