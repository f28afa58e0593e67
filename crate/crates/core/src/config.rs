//! Experiment configuration: TOML sections with `--set section.key=value` overrides.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envsuite::TaskKind;
use crate::error::{GecoError, Result};
use crate::geomoe::MoeArch;
use crate::policy::{PolicyArch, CHUNK_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DirectDeploy,
    NaiveFinetune,
    ActionResidual,
    ObsResidualDense,
    GeomoePer,
    GeomoeGeoper,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::DirectDeploy,
        Method::NaiveFinetune,
        Method::ActionResidual,
        Method::ObsResidualDense,
        Method::GeomoePer,
        Method::GeomoeGeoper,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::DirectDeploy => "direct_deploy",
            Method::NaiveFinetune => "naive_finetune",
            Method::ActionResidual => "action_residual",
            Method::ObsResidualDense => "obs_residual_dense",
            Method::GeomoePer => "geomoe_per",
            Method::GeomoeGeoper => "geomoe_geoper",
        }
    }

    /// Whether old-task samples are replayed, and how they are prioritised.
    pub fn replay(self) -> ReplayKind {
        match self {
            Method::DirectDeploy | Method::NaiveFinetune => ReplayKind::None,
            Method::GeomoeGeoper => ReplayKind::Geometric,
            Method::ActionResidual | Method::ObsResidualDense | Method::GeomoePer => ReplayKind::Loss,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReplayKind {
    None,
    /// Priority from the last observed per-sample loss; new samples get the current maximum.
    Loss,
    /// Priority from stored expert activations and current utilization.
    Geometric,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = GecoError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| GecoError::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub tasks: Vec<String>,
    pub method: Method,
    pub seed: u64,
    pub eval_trials: usize,
    pub eval_seed: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            tasks: vec!["cuboid-reach".into(), "cuboid-stack".into(), "curved-reach".into()],
            method: Method::GeomoeGeoper,
            seed: 0,
            eval_trials: 30,
            eval_seed: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcSection {
    /// Expert demonstrations per task.
    pub demos: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cosine_decay: bool,
    /// Gaussian noise on executed demonstration translations.
    pub demo_noise_std: f64,
    /// Per-step probability of inverting the executed gripper command.
    pub demo_grip_flip: f64,
}

impl Default for BcSection {
    fn default() -> Self {
        Self {
            demos: 200,
            steps: 3000,
            batch_size: 32,
            lr: 3e-4,
            cosine_decay: false,
            demo_noise_std: 0.3,
            demo_grip_flip: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    /// Optimizer steps at the full correction budget (`collect.corrections`).
    pub steps: usize,
    pub batch_size: usize,
}

impl AdaptSection {
    /// Steps for a phase with `n_traj` corrections: proportional to the
    /// budget, so every budget sees the same number of passes over its data.
    pub fn steps_for(&self, n_traj: usize, full_budget: usize) -> usize {
        if full_budget == 0 {
            return self.steps;
        }
        (self.steps * n_traj).div_ceil(full_budget).max(1)
    }
}

impl Default for AdaptSection {
    fn default() -> Self {
        Self { steps: 400, batch_size: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplaySection {
    pub exponent: f64,
    pub epsilon: f64,
    pub ema: f64,
    /// Share of each batch drawn from earlier tasks, in percent.
    pub replay_percent: u32,
    /// Share of the current-task part drawn from corrections, in percent.
    pub correction_percent: u32,
}

impl Default for ReplaySection {
    fn default() -> Self {
        Self { exponent: 0.6, epsilon: 1e-6, ema: 0.4, replay_percent: 10, correction_percent: 95 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectSection {
    /// Successful corrected trajectories per task.
    pub corrections: usize,
    /// ∞-norm deviation that triggers an intervention.
    pub threshold: f64,
    pub prune_window: usize,
    /// Sim demonstration steps kept per task for the current-task mix.
    pub sim_pool: usize,
}

impl Default for CollectSection {
    fn default() -> Self {
        Self { corrections: 12, threshold: 0.15, prune_window: 2, sim_pool: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EfficiencySection {
    pub source: String,
    pub target: String,
    pub budgets: Vec<usize>,
}

impl Default for EfficiencySection {
    fn default() -> Self {
        Self { source: "cuboid-stack".into(), target: "cuboid-reach".into(), budgets: vec![4, 8, 12] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    pub source: String,
    pub target: String,
    pub budget: usize,
}

impl Default for TransferSection {
    fn default() -> Self {
        Self { source: "cuboid-stack".into(), target: "cuboid-reach".into(), budget: 2 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub policy: PolicyArch,
    pub bc: BcSection,
    pub moe: MoeArch,
    pub adapt: AdaptSection,
    pub replay: ReplaySection,
    pub collect: CollectSection,
    pub efficiency: EfficiencySection,
    pub transfer: TransferSection,
}

impl ExperimentConfig {
    /// Reduced sizes that keep a full continual run to seconds per task on one core.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.policy.point_budget = 64;
        c.policy.point_hidden = vec![16, 32];
        c.bc.demos = 60;
        c.bc.steps = 6000;
        c.bc.lr = 3e-3;
        c.bc.cosine_decay = true;
        c.moe.groups = 8;
        c.moe.group_size = 16;
        c.moe.embed_hidden = vec![24, 24];
        c.moe.expert_hidden = vec![24];
        c.moe.gate_hidden = vec![12];
        c.adapt.steps = 300;
        c.collect.sim_pool = 100;
        c.experiment.eval_trials = 100;
        c
    }

    pub fn task_kinds(&self) -> Result<Vec<TaskKind>> {
        if self.experiment.tasks.is_empty() {
            return Err(GecoError::Config("experiment.tasks must list at least one task".into()));
        }
        self.experiment
            .tasks
            .iter()
            .map(|t| t.parse().map_err(|_| GecoError::Config(format!("experiment.tasks: unknown task id {t:?}"))))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.task_kinds()?;
        self.policy.validate()?;
        if self.policy.chunk_len != CHUNK_LEN {
            return Err(GecoError::Config(format!("policy.chunk_len must be {CHUNK_LEN}")));
        }
        self.moe.validate()?;
        if self.moe.group_size > self.policy.point_budget {
            return Err(GecoError::Config("moe.group_size exceeds policy.point_budget".into()));
        }
        if self.experiment.eval_trials == 0 {
            return Err(GecoError::Config("experiment.eval_trials must be at least 1".into()));
        }
        if self.bc.demos == 0 || self.bc.batch_size == 0 || !(self.bc.lr > 0.0) {
            return Err(GecoError::Config("bc.demos, bc.batch_size and bc.lr must be positive".into()));
        }
        if !(self.bc.demo_noise_std >= 0.0) || !(0.0..=1.0).contains(&self.bc.demo_grip_flip) {
            return Err(GecoError::Config("bc.demo_noise_std must be ≥ 0 and bc.demo_grip_flip in [0, 1]".into()));
        }
        if self.adapt.batch_size == 0 {
            return Err(GecoError::Config("adapt.batch_size must be positive".into()));
        }
        let r = &self.replay;
        if r.replay_percent > 100 || r.correction_percent > 100 {
            return Err(GecoError::Config("replay percentages must lie in 0..=100".into()));
        }
        if !(r.exponent >= 0.0 && r.epsilon > 0.0 && (0.0..=1.0).contains(&r.ema)) {
            return Err(GecoError::Config("replay.exponent >= 0, replay.epsilon > 0, replay.ema in [0, 1]".into()));
        }
        if !(self.collect.threshold >= 0.0) {
            return Err(GecoError::Config("collect.threshold must be >= 0".into()));
        }
        for (key, t) in [
            ("efficiency.source", &self.efficiency.source),
            ("efficiency.target", &self.efficiency.target),
            ("transfer.source", &self.transfer.source),
            ("transfer.target", &self.transfer.target),
        ] {
            t.parse::<TaskKind>().map_err(|_| GecoError::Config(format!("{key}: unknown task id {t:?}")))?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| GecoError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a (possibly partial) TOML config; missing keys keep the values of `base`.
    pub fn from_toml_over(base: &Self, text: &str) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).map_err(|e| GecoError::Config(e.to_string()))?;
        let mut root = toml::Value::try_from(base).map_err(|e| GecoError::Config(e.to_string()))?;
        let root_table = root.as_table_mut().ok_or_else(|| GecoError::Config("config is not a table".into()))?;
        for (section, body) in file {
            let target = root_table
                .get_mut(&section)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| GecoError::Config(format!("unknown config section {section:?}")))?;
            let body = match body {
                toml::Value::Table(t) => t,
                _ => return Err(GecoError::Config(format!("{section} must be a table"))),
            };
            for (key, value) in body {
                let slot = target
                    .get_mut(&key)
                    .ok_or_else(|| GecoError::Config(format!("unknown config key {section}.{key}")))?;
                *slot = coerce(slot, value);
            }
        }
        let c: Self = root.try_into().map_err(|e: toml::de::Error| GecoError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Serialises with short exponent notation for small floats.
    pub fn to_toml(&self) -> Result<String> {
        let value = toml::Value::try_from(self).map_err(|e| GecoError::Config(e.to_string()))?;
        let table = value.as_table().ok_or_else(|| GecoError::Config("config is not a table".into()))?;
        let mut out = String::new();
        for (section, body) in table {
            let body = body.as_table().ok_or_else(|| GecoError::Config(format!("{section} is not a table")))?;
            out.push_str(&format!("[{section}]\n"));
            for (k, v) in body {
                out.push_str(&format!("{k} = {}\n", format_value(v)));
            }
            out.push('\n');
        }
        Ok(out)
    }

    /// Applies `section.key=value`; the value is parsed as a TOML literal,
    /// falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| GecoError::Config(format!("override {assignment:?} is not key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| GecoError::Config(format!("override key {path:?} must be section.key")))?;
        let raw = raw.trim();
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| GecoError::Config(e.to_string()))?;
        let sec = root
            .get_mut(section)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| GecoError::Config(format!("unknown config section {section:?}")))?;
        let slot = sec.get_mut(key).ok_or_else(|| GecoError::Config(format!("unknown config key {section}.{key}")))?;
        *slot = coerce(slot, parsed);
        let updated: Self = root.try_into().map_err(|e: toml::de::Error| GecoError::Config(format!("{section}.{key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

/// Integers given where a float is expected (and vice versa for whole floats) are converted.
fn coerce(current: &toml::Value, new: toml::Value) -> toml::Value {
    match (current, &new) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
        _ => new,
    }
}

fn format_float(v: f64) -> String {
    if v != 0.0 && v.is_finite() && (v.abs() < 1e-2 || v.abs() >= 1e7) {
        format!("{v:e}")
    } else {
        format!("{v:?}")
    }
}

fn format_value(v: &toml::Value) -> String {
    match v {
        toml::Value::Float(f) => format_float(*f),
        toml::Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(format_value).collect();
            format!("[{}]", parts.join(", "))
        }
        other => other.to_string(),
    }
}
