//! Experiment pipelines: base training, continual adaptation, data-efficiency
//! and cross-task transfer studies.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_without_replacement;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, Method, ReplayKind};
use crate::derive_seed;
use crate::envsuite::{collect_corrections, expert_dataset, DemoNoise, run_episode, Actor, CorrectionSet, TaskKind, TaskSpec};
use crate::error::{shape_err, GecoError, Result};
use crate::geomoe::{adapt_step, gate_records_csv, AdaptExample, GateRecord, GeoMoe, GroupedObs, MoeArch, Routing};
use crate::geoper::{
    build_training_mix, compute_priorities, MixConfig, MixItem, ReplaySample, Source, UnifiedBuffer, UtilizationState,
};
use crate::metrics::{success_rate, EvalMatrix};
use crate::policy::{fnv1a, train_bc, ActionChunk, BasePolicy, BcConfig, BcLog, Observation, CHUNK_WIDTH};
use crate::tinynn::{checkpoint, visit_prefixed, visit_prefixed_mut, zeros_like, Activation, Adam, Mlp, Parameters};

/// Small network on frozen encoder features whose output is added to the
/// sampled chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionResidual {
    net: Mlp,
}

impl ActionResidual {
    pub fn new(feature_width: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::new(&[feature_width, hidden, CHUNK_WIDTH], Activation::Tanh, Activation::Identity, &mut rng)?;
        let last = net.layers_mut().last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        Ok(Self { net })
    }

    pub fn delta(&self, feature: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(feature)
    }

    /// Batch-mean MSE of `base + delta(feature)` against the targets, with gradients.
    pub fn loss(&self, batch: &[(&[f64], &[f64], &[f64])]) -> Result<(Vec<f64>, ActionResidual)> {
        let mut grads = zeros_like(self);
        let mut per = Vec::with_capacity(batch.len());
        let b = batch.len() as f64;
        for (feature, base, target) in batch {
            let tape = self.net.forward_tape(feature, 1)?;
            let out = tape.output();
            let mut l = 0.0;
            let d: Vec<f64> = out
                .iter()
                .zip(base.iter())
                .zip(target.iter())
                .map(|((o, a), t)| {
                    let diff = a + o - t;
                    l += diff * diff;
                    2.0 * diff / CHUNK_WIDTH as f64 / b
                })
                .collect();
            per.push(l / CHUNK_WIDTH as f64);
            self.net.backward_params(&tape, &d, &mut grads.net)?;
        }
        Ok((per, grads))
    }
}

impl Parameters for ActionResidual {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_prefixed("net", &self.net, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_prefixed_mut("net", &mut self.net, f);
    }
}

/// The trainable part of a method.
#[derive(Clone, Debug, PartialEq)]
pub enum Adapter {
    None,
    Observation(GeoMoe),
    Action(ActionResidual),
}

impl Adapter {
    pub fn for_method(method: Method, cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let rw = cfg.policy.residual_width;
        Ok(match method {
            Method::DirectDeploy => Adapter::None,
            Method::ActionResidual => Adapter::Action(ActionResidual::new(cfg.policy.feature_width, rw, seed)?),
            Method::ObsResidualDense => Adapter::Observation(GeoMoe::new(&cfg.moe, rw, Routing::Dense, seed)?),
            Method::NaiveFinetune | Method::GeomoePer | Method::GeomoeGeoper => {
                Adapter::Observation(GeoMoe::new(&cfg.moe, rw, Routing::Gated, seed)?)
            }
        })
    }

    pub fn checkpoint(&self) -> Vec<u8> {
        match self {
            Adapter::None => checkpoint::encode(&[]),
            Adapter::Observation(m) => checkpoint::save(m),
            Adapter::Action(a) => checkpoint::save(a),
        }
    }

    pub fn moe(&self) -> Option<&GeoMoe> {
        match self {
            Adapter::Observation(m) => Some(m),
            _ => None,
        }
    }
}

/// Frozen base policy plus the current adapter.
pub struct AdaptedActor<'a> {
    pub policy: &'a BasePolicy,
    pub adapter: &'a Adapter,
    pub moe_arch: &'a MoeArch,
}

impl Actor for AdaptedActor<'_> {
    fn act(&self, obs: &Observation, seed: u64) -> Result<ActionChunk> {
        match self.adapter {
            Adapter::None => self.policy.act(obs, None, seed),
            Adapter::Observation(m) => {
                let grouped = GroupedObs::build(&obs.cloud, self.moe_arch)?;
                let (r, _) = m.residual(&grouped)?;
                self.policy.act(obs, Some(&r), seed)
            }
            Adapter::Action(a) => {
                let f = self.policy.encode(obs)?;
                let base = self.policy.head().sample_chunk(&f, None, seed)?;
                let d = a.delta(&f)?;
                let flat: Vec<f64> = base.flat().iter().zip(&d).map(|(x, y)| x + y).collect();
                ActionChunk::from_flat_clamped(&flat)
            }
        }
    }
}

/// Success rate over episode seeds `base_seed..base_seed + trials`.
pub fn evaluate(actor: &dyn Actor, spec: &TaskSpec, trials: usize, base_seed: u64) -> Result<f64> {
    let outcomes: Vec<bool> =
        (0..trials).map(|i| run_episode(actor, spec, base_seed.wrapping_add(i as u64))).collect::<Result<_>>()?;
    Ok(success_rate(&outcomes))
}

/// A sim-trained, frozen base policy with the data it was cloned from.
#[derive(Clone, Debug)]
pub struct TrainedBase {
    pub task: TaskKind,
    pub policy: BasePolicy,
    pub demos: Vec<(Observation, ActionChunk)>,
    pub log: BcLog,
    /// Wall-clock seconds spent generating data and training.
    pub train_secs: f64,
}

fn task_salt(kind: TaskKind) -> u64 {
    TaskKind::ALL.iter().position(|&k| k == kind).unwrap() as u64
}

/// Sim expert demonstrations for `kind`, as used for base training and the sim pool.
pub fn sim_demos(cfg: &ExperimentConfig, kind: TaskKind, seed: u64) -> Result<Vec<(Observation, ActionChunk)>> {
    let spec = TaskSpec::sim(kind, cfg.policy.point_budget);
    let noise = DemoNoise { action_std: cfg.bc.demo_noise_std, grip_flip: cfg.bc.demo_grip_flip };
    expert_dataset(&spec, cfg.bc.demos, noise, derive_seed(seed, 100 + task_salt(kind)))
}

/// Generates expert demonstrations in sim and clones them into a frozen policy.
///
/// Every task's policy starts from the same initial weights.
pub fn train_base(cfg: &ExperimentConfig, kind: TaskKind, seed: u64) -> Result<TrainedBase> {
    let started = std::time::Instant::now();
    let demos = sim_demos(cfg, kind, seed)?;
    let bc = BcConfig { steps: cfg.bc.steps, batch_size: cfg.bc.batch_size, lr: cfg.bc.lr, cosine_decay: cfg.bc.cosine_decay };
    let (policy, log) = train_bc(&demos, &cfg.policy, &bc, derive_seed(seed, 11), derive_seed(seed, 200 + task_salt(kind)))?;
    Ok(TrainedBase { task: kind, policy, demos, log, train_secs: started.elapsed().as_secs_f64() })
}

/// A base restored from a checkpoint; its demonstrations are regenerated.
pub fn base_from_checkpoint(cfg: &ExperimentConfig, kind: TaskKind, seed: u64, bytes: &[u8]) -> Result<TrainedBase> {
    let policy = BasePolicy::from_checkpoint(&cfg.policy, bytes)?;
    Ok(TrainedBase { task: kind, policy, demos: sim_demos(cfg, kind, seed)?, log: BcLog::default(), train_secs: 0.0 })
}

/// One JSON object per demonstration sample.
pub fn demos_to_jsonl(kind: TaskKind, demos: &[(Observation, ActionChunk)]) -> Result<String> {
    #[derive(serde::Serialize)]
    struct Line<'a> {
        task_id: &'a str,
        proprio: &'a [f64],
        points: Vec<f64>,
        action_chunk: Vec<f64>,
    }
    let mut s = String::new();
    for (obs, chunk) in demos {
        let line = Line {
            task_id: kind.id(),
            proprio: &obs.proprio,
            points: obs.cloud.points.iter().flatten().copied().collect(),
            action_chunk: chunk.flat(),
        };
        s.push_str(&serde_json::to_string(&line)?);
        s.push('\n');
    }
    Ok(s)
}

/// Memoises base training per (task, seed, policy/bc settings).
#[derive(Default)]
pub struct BaseStore {
    entries: BTreeMap<String, TrainedBase>,
}

impl BaseStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(cfg: &ExperimentConfig, kind: TaskKind, seed: u64) -> Result<String> {
        let settings = format!(
            "{}|{}",
            toml::to_string(&cfg.policy).map_err(|e| GecoError::Config(e.to_string()))?,
            toml::to_string(&cfg.bc).map_err(|e| GecoError::Config(e.to_string()))?
        );
        Ok(format!("{kind}:{seed}:{:016x}", fnv1a(settings.as_bytes())))
    }

    pub fn get(&mut self, cfg: &ExperimentConfig, kind: TaskKind, seed: u64) -> Result<&TrainedBase> {
        let key = Self::key(cfg, kind, seed)?;
        if !self.entries.contains_key(&key) {
            log::info!("training base policy for {kind} (seed {seed})");
            let base = train_base(cfg, kind, seed)?;
            self.entries.insert(key.clone(), base);
        }
        Ok(&self.entries[&key])
    }

    /// The cached base, without training one if absent.
    pub fn cached(&self, cfg: &ExperimentConfig, kind: TaskKind, seed: u64) -> Option<&TrainedBase> {
        self.entries.get(&Self::key(cfg, kind, seed).ok()?)
    }

    pub fn insert(&mut self, cfg: &ExperimentConfig, seed: u64, base: TrainedBase) -> Result<()> {
        let key = Self::key(cfg, base.task, seed)?;
        self.entries.insert(key, base);
        Ok(())
    }
}

/// A training example with the derived quantities adaptation needs.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// Position of the sample's task in the learner's sequence.
    pub task: usize,
    pub grouped: GroupedObs,
    pub feature: Vec<f64>,
    pub chunk: Vec<f64>,
    /// Zero-residual sampled chunk; only filled for action-residual adapters.
    pub base_chunk: Vec<f64>,
}

/// Number of steps averaged for the first and final adaptation losses.
const LOSS_WINDOW: usize = 20;

/// Per-task summary of an adaptation phase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseLog {
    pub task: String,
    pub corrections: usize,
    pub attempts: usize,
    pub interventions: usize,
    pub samples: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub buffer_len: usize,
}

impl PhaseLog {
    pub fn line(&self) -> String {
        format!(
            "task={} corrections={} attempts={} interventions={} samples={} loss_first={:.5} loss_final={:.5} buffer={}",
            self.task,
            self.corrections,
            self.attempts,
            self.interventions,
            self.samples,
            self.first_loss,
            self.final_loss,
            self.buffer_len
        )
    }
}

/// Continual learner state: per-task frozen bases, one shared adapter and the replay buffer.
#[derive(Clone)]
pub struct Learner<'c> {
    cfg: &'c ExperimentConfig,
    method: Method,
    seed: u64,
    pub adapter: Adapter,
    pub tasks: Vec<TaskKind>,
    pub bases: Vec<BasePolicy>,
    /// Sim demonstration pool per task.
    sim_pools: Vec<Vec<Prepared>>,
    pub buffer: UnifiedBuffer,
    replay: Vec<Prepared>,
}

impl<'c> Learner<'c> {
    pub fn new(cfg: &'c ExperimentConfig, method: Method, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            method,
            seed,
            adapter: Adapter::for_method(method, cfg, derive_seed(seed, 400))?,
            tasks: Vec::new(),
            bases: Vec::new(),
            sim_pools: Vec::new(),
            buffer: UnifiedBuffer::new(),
            replay: Vec::new(),
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    fn actor(&self, task: usize) -> AdaptedActor<'_> {
        AdaptedActor { policy: &self.bases[task], adapter: &self.adapter, moe_arch: &self.cfg.moe }
    }

    fn prepare(&self, task: usize, obs: &Observation, chunk: &ActionChunk, salt: u64) -> Result<Prepared> {
        let base = &self.bases[task];
        let feature = base.encode(obs)?;
        let base_chunk = match self.adapter {
            Adapter::Action(_) => base.head().sample_chunk(&feature, None, derive_seed(self.seed, salt))?.flat(),
            _ => Vec::new(),
        };
        Ok(Prepared {
            task,
            grouped: GroupedObs::build(&obs.cloud, &self.cfg.moe)?,
            feature,
            chunk: chunk.flat(),
            base_chunk,
        })
    }

    /// Registers the next task and its frozen base; returns its position.
    pub fn add_task(&mut self, base: &TrainedBase) -> Result<usize> {
        let task = self.tasks.len();
        self.tasks.push(base.task);
        self.bases.push(base.policy.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 600 + task_salt(base.task)));
        let n = self.cfg.collect.sim_pool.min(base.demos.len());
        let mut idx = sample_without_replacement(&mut rng, base.demos.len(), n).into_vec();
        idx.sort_unstable();
        let mut pool = Vec::with_capacity(n);
        for (j, i) in idx.into_iter().enumerate() {
            let (o, c) = &base.demos[i];
            pool.push(self.prepare(task, o, c, 0x51_0000 + j as u64)?);
        }
        self.sim_pools.push(pool);
        Ok(task)
    }

    pub fn real_spec(&self, task: usize) -> TaskSpec {
        TaskSpec::real(self.tasks[task], self.cfg.policy.point_budget)
    }

    /// Shared-autonomy rollouts of the current policy on the real variant.
    pub fn collect(&self, task: usize, n_traj: usize) -> Result<CorrectionSet> {
        let spec = self.real_spec(task);
        let c = &self.cfg.collect;
        collect_corrections(
            &self.actor(task),
            &spec,
            n_traj,
            c.threshold,
            c.prune_window,
            derive_seed(self.seed, 300 + task_salt(self.tasks[task])),
        )
        .map_err(|e| match e {
            GecoError::CollectionFailure(m) => GecoError::CollectionFailure(format!("task {}: {m}", self.tasks[task])),
            other => other,
        })
    }

    pub fn evaluate(&self, task: usize) -> Result<f64> {
        let e = &self.cfg.experiment;
        evaluate(&self.actor(task), &self.real_spec(task), e.eval_trials, e.eval_seed)
    }

    fn train_step(
        &mut self,
        current: &[Prepared],
        task: usize,
        opt: &mut Adam,
        util: &mut UtilizationState,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let r = &self.cfg.replay;
        let replay_kind = self.method.replay();
        let mix = MixConfig {
            batch_size: self.cfg.adapt.batch_size,
            replay_fraction: if replay_kind == ReplayKind::None { 0.0 } else { r.replay_percent as f64 / 100.0 },
            correction_fraction: r.correction_percent as f64 / 100.0,
            exponent: r.exponent,
            task_index: task,
        };
        let sims = &self.sim_pools[task];
        let items = build_training_mix(current.len(), sims.len(), &self.buffer, &mix, rng)?;
        let batch: Vec<&Prepared> = items
            .iter()
            .map(|it| match *it {
                MixItem::Correction(i) => &current[i],
                MixItem::Sim(i) => &sims[i],
                MixItem::Replay(i) => &self.replay[i],
            })
            .collect();
        let (per_example, records) = match &mut self.adapter {
            Adapter::None => return Ok(0.0),
            Adapter::Observation(moe) => {
                let examples: Vec<AdaptExample> = batch
                    .iter()
                    .map(|p| AdaptExample {
                        head: self.bases[p.task].head(),
                        feature: &p.feature,
                        grouped: &p.grouped,
                        chunk: &p.chunk,
                    })
                    .collect();
                let loss = adapt_step(moe, opt, self.cfg.moe.balance_weight, &examples, rng)?;
                (loss.per_example, loss.records)
            }
            Adapter::Action(a) => {
                let rows: Vec<(&[f64], &[f64], &[f64])> =
                    batch.iter().map(|p| (&p.feature[..], &p.base_chunk[..], &p.chunk[..])).collect();
                let (per, grads) = a.loss(&rows)?;
                opt.step(a, &grads)?;
                (per, Vec::new())
            }
        };
        match replay_kind {
            ReplayKind::Geometric => {
                let current_records: Vec<GateRecord> = items
                    .iter()
                    .zip(records)
                    .filter(|(it, _)| !matches!(it, MixItem::Replay(_)))
                    .map(|(_, r)| r)
                    .collect();
                util.update(&current_records);
                if !self.buffer.is_empty() && util.utilization.is_some() {
                    compute_priorities(&mut self.buffer, util)?;
                }
            }
            ReplayKind::Loss => {
                for (it, l) in items.iter().zip(&per_example) {
                    if let MixItem::Replay(i) = *it {
                        self.buffer.set_priority(i, *l)?;
                    }
                }
            }
            ReplayKind::None => {}
        }
        Ok(per_example.iter().sum::<f64>() / per_example.len().max(1) as f64)
    }

    /// Collects corrections for `task`, adapts on the mix, and merges the
    /// task's correction samples into the replay buffer.
    pub fn learn_task(&mut self, task: usize, n_traj: usize) -> Result<(PhaseLog, String)> {
        let mut log = PhaseLog { task: self.tasks[task].to_string(), ..PhaseLog::default() };
        if matches!(self.adapter, Adapter::None) || n_traj == 0 {
            log.buffer_len = self.buffer.len();
            return Ok((log, String::new()));
        }
        let set = self.collect(task, n_traj)?;
        log.corrections = set.trajectories.len();
        log.attempts = set.attempts;
        log.interventions = set.interventions();
        let raw = set.samples()?;
        let mut current = Vec::with_capacity(raw.len());
        for (j, (o, c, _)) in raw.iter().enumerate() {
            current.push(self.prepare(task, o, c, 0xc0_0000 + j as u64)?);
        }
        log.samples = current.len();
        let mut opt = Adam::new(self.cfg.moe.lr);
        let mut util = UtilizationState::new(self.cfg.replay.ema, self.cfg.replay.epsilon);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 500 + task as u64));
        let steps = self.cfg.adapt.steps_for(n_traj, self.cfg.collect.corrections);
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            losses.push(self.train_step(&current, task, &mut opt, &mut util, &mut rng)?);
        }
        let window = LOSS_WINDOW.min(losses.len()).max(1);
        log.first_loss = losses.iter().take(window).sum::<f64>() / window as f64;
        log.final_loss = losses.iter().rev().take(window).sum::<f64>() / window as f64;
        let gate_csv = self.merge(task, &raw, current)?;
        log.buffer_len = self.buffer.len();
        Ok((log, gate_csv))
    }

    /// Stores the task's samples with their routing activations; returns the gate-record CSV.
    fn merge(&mut self, task: usize, raw: &[(Observation, ActionChunk, bool)], current: Vec<Prepared>) -> Result<String> {
        let mut records = Vec::with_capacity(current.len());
        for p in &current {
            records.push(match &self.adapter {
                Adapter::Observation(m) => m.residual(&p.grouped)?.1,
                _ => GateRecord { weights: vec![vec![1.0]; p.grouped.groups.len()] },
            });
        }
        let csv = match &self.adapter {
            Adapter::Observation(m) => {
                let rows: Vec<(usize, &GateRecord, &GroupedObs)> =
                    records.iter().zip(&current).enumerate().map(|(i, (r, p))| (i, r, &p.grouped)).collect();
                gate_records_csv(m.experts(), &rows)
            }
            _ => String::new(),
        };
        if self.method.replay() == ReplayKind::None {
            return Ok(csv);
        }
        let initial = self.buffer.max_priority().unwrap_or(1.0);
        for ((p, rec), (o, c, _)) in current.into_iter().zip(&records).zip(raw) {
            self.buffer.push(ReplaySample {
                task_id: self.tasks[task].to_string(),
                source: Source::HumanCorrection,
                obs: o.clone(),
                chunk: c.clone(),
                activation: rec.mean(),
                priority: initial,
            });
            self.replay.push(p);
        }
        Ok(csv)
    }
}

/// Everything a continual run produces.
#[derive(Clone, Debug)]
pub struct ContinualOutcome {
    pub matrix: EvalMatrix,
    pub phases: Vec<PhaseLog>,
    /// Gate-record CSV per task (empty for adapters without routing).
    pub gate_records: Vec<(TaskKind, String)>,
    /// Adapter checkpoint after each task.
    pub adapter_checkpoints: Vec<Vec<u8>>,
    pub base_checkpoints: Vec<(TaskKind, Vec<u8>)>,
    pub buffer_jsonl: String,
}

/// Train base → collect corrections → adapt → evaluate all seen tasks → merge, for each task.
pub fn run_continual(cfg: &ExperimentConfig, store: &mut BaseStore) -> Result<ContinualOutcome> {
    let kinds = cfg.task_kinds()?;
    let seed = cfg.experiment.seed;
    let mut learner = Learner::new(cfg, cfg.experiment.method, seed)?;
    let mut matrix = EvalMatrix::new(kinds.iter().map(|k| k.to_string()).collect(), cfg.experiment.eval_trials);
    let mut out = ContinualOutcome {
        matrix: matrix.clone(),
        phases: Vec::new(),
        gate_records: Vec::new(),
        adapter_checkpoints: Vec::new(),
        base_checkpoints: Vec::new(),
        buffer_jsonl: String::new(),
    };
    for (t, &kind) in kinds.iter().enumerate() {
        let base = store.get(cfg, kind, seed)?;
        out.base_checkpoints.push((kind, base.policy.to_checkpoint()));
        let task = learner.add_task(base)?;
        let (phase, csv) = learner.learn_task(task, cfg.collect.corrections)?;
        log::info!("{}", phase.line());
        out.phases.push(phase);
        out.gate_records.push((kind, csv));
        out.adapter_checkpoints.push(learner.adapter.checkpoint());
        for k in 0..=t {
            let sr = learner.evaluate(k)?;
            log::info!("after {kind}: {} success {sr:.3}", kinds[k]);
            matrix.set(t, k, sr)?;
        }
    }
    out.matrix = matrix;
    out.buffer_jsonl = learner.buffer.to_jsonl()?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    FromScratch,
    FromContinued,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::FromScratch => "from_scratch",
            Variant::FromContinued => "from_continued",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EfficiencyRow {
    pub budget: usize,
    pub variant: Variant,
    pub success: f64,
}

pub fn efficiency_csv(rows: &[EfficiencyRow]) -> String {
    let mut s = String::from("budget,variant,success_rate\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6}\n", r.budget, r.variant.name(), r.success));
    }
    s
}

fn learner_after_source<'c>(cfg: &'c ExperimentConfig, store: &mut BaseStore, method: Method, source: TaskKind) -> Result<Learner<'c>> {
    let seed = cfg.experiment.seed;
    let mut learner = Learner::new(cfg, method, seed)?;
    let t = learner.add_task(store.get(cfg, source, seed)?)?;
    learner.learn_task(t, cfg.collect.corrections)?;
    Ok(learner)
}

/// Target-task success after adapting with each correction budget, starting
/// either from a fresh adapter or from one already adapted to the source task.
pub fn run_efficiency(cfg: &ExperimentConfig, store: &mut BaseStore) -> Result<Vec<EfficiencyRow>> {
    let e = &cfg.efficiency;
    if e.budgets.len() < 2 {
        return Err(GecoError::Config("efficiency.budgets needs at least two budgets".into()));
    }
    let source: TaskKind = e.source.parse()?;
    let target: TaskKind = e.target.parse()?;
    let seed = cfg.experiment.seed;
    let method = cfg.experiment.method;
    let continued = learner_after_source(cfg, store, method, source)?;
    let target_base = store.get(cfg, target, seed)?.clone();
    let mut rows = Vec::new();
    for &budget in &e.budgets {
        let mut scratch = Learner::new(cfg, method, seed)?;
        let t = scratch.add_task(&target_base)?;
        scratch.learn_task(t, budget)?;
        rows.push(EfficiencyRow { budget, variant: Variant::FromScratch, success: scratch.evaluate(t)? });
        let mut cont = continued.clone();
        let t = cont.add_task(&target_base)?;
        cont.learn_task(t, budget)?;
        rows.push(EfficiencyRow { budget, variant: Variant::FromContinued, success: cont.evaluate(t)? });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferRow {
    pub source: TaskKind,
    pub target: TaskKind,
    pub budget: usize,
    pub success: f64,
}

/// Adapts on `source` with the full correction budget, then on `target` with `budget`.
pub fn run_transfer(cfg: &ExperimentConfig, store: &mut BaseStore, source: TaskKind, target: TaskKind, budget: usize) -> Result<TransferRow> {
    let seed = cfg.experiment.seed;
    let mut learner = learner_after_source(cfg, store, cfg.experiment.method, source)?;
    let t = learner.add_task(store.get(cfg, target, seed)?)?;
    learner.learn_task(t, budget)?;
    Ok(TransferRow { source, target, budget, success: learner.evaluate(t)? })
}

/// Target success with a fresh adapter and the same small budget.
pub fn run_scratch(cfg: &ExperimentConfig, store: &mut BaseStore, target: TaskKind, budget: usize) -> Result<f64> {
    let seed = cfg.experiment.seed;
    let mut learner = Learner::new(cfg, cfg.experiment.method, seed)?;
    let t = learner.add_task(store.get(cfg, target, seed)?)?;
    learner.learn_task(t, budget)?;
    learner.evaluate(t)
}

pub fn transfer_csv(rows: &[TransferRow]) -> String {
    let mut s = String::from("source,target,budget,success_rate\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:.6}\n", r.source, r.target, r.budget, r.success));
    }
    s
}

/// Loads an adapter checkpoint written by [`Adapter::checkpoint`].
pub fn load_adapter(cfg: &ExperimentConfig, method: Method, bytes: &[u8]) -> Result<Adapter> {
    let mut a = Adapter::for_method(method, cfg, 0)?;
    match &mut a {
        Adapter::None => {
            if !checkpoint::decode(bytes)?.is_empty() {
                return Err(shape_err("direct_deploy checkpoint must be empty"));
            }
        }
        Adapter::Observation(m) => checkpoint::load(m, bytes)?,
        Adapter::Action(x) => checkpoint::load(x, bytes)?,
    }
    Ok(a)
}
