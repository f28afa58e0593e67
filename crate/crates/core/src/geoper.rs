//! Cross-task replay buffer with expert-activation priorities.
//!
//! Every stored sample keeps the mean routing vector the module produced for
//! it. While a new task trains, an EMA of current expert utilization is
//! tracked and samples that lean on under-used experts are replayed more.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GecoError, Result};
use crate::geomoe::GateRecord;
use crate::pointcloud::PointCloud;
use crate::policy::{ActionChunk, Observation};

/// Added to every priority before exponentiation so no sample has zero mass.
pub const PRIORITY_SMOOTHING: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    SimExpert,
    HumanCorrection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplaySample {
    pub task_id: String,
    pub source: Source,
    pub obs: Observation,
    pub chunk: ActionChunk,
    /// Mean routing vector over the observation's groups.
    pub activation: Vec<f64>,
    pub priority: f64,
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    task_id: String,
    source: Source,
    proprio: Vec<f64>,
    points: Vec<f64>,
    action_chunk: Vec<f64>,
    activation: Vec<f64>,
    priority: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UnifiedBuffer {
    samples: Vec<ReplaySample>,
}

impl UnifiedBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[ReplaySample] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> Result<&ReplaySample> {
        self.samples.get(i).ok_or_else(|| GecoError::NotFound(format!("replay sample {i}")))
    }

    pub fn priorities(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.priority).collect()
    }

    pub fn push(&mut self, sample: ReplaySample) {
        self.samples.push(sample);
    }

    pub fn extend(&mut self, samples: impl IntoIterator<Item = ReplaySample>) {
        self.samples.extend(samples);
    }

    /// Distinct task ids in insertion order.
    pub fn task_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for s in &self.samples {
            if !ids.contains(&s.task_id) {
                ids.push(s.task_id.clone());
            }
        }
        ids
    }

    /// Stores the mean of the record's per-group weight vectors as the sample's activation.
    pub fn record_activation(&mut self, i: usize, record: &GateRecord) -> Result<()> {
        let len = self.samples.len();
        let s = self.samples.get_mut(i).ok_or_else(|| GecoError::NotFound(format!("replay sample {i} of {len}")))?;
        if record.weights.is_empty() {
            return Err(GecoError::EmptyInput("gate record has no groups"));
        }
        s.activation = record.mean();
        Ok(())
    }

    pub fn set_priority(&mut self, i: usize, priority: f64) -> Result<()> {
        if !(priority.is_finite() && priority >= 0.0) {
            return Err(GecoError::Numeric(format!("priority {priority} must be finite and >= 0")));
        }
        let len = self.samples.len();
        let s = self.samples.get_mut(i).ok_or_else(|| GecoError::NotFound(format!("replay sample {i} of {len}")))?;
        s.priority = priority;
        Ok(())
    }

    pub fn max_priority(&self) -> Option<f64> {
        self.samples.iter().map(|s| s.priority).reduce(f64::max)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.samples {
            let line = SampleLine {
                task_id: s.task_id.clone(),
                source: s.source,
                proprio: s.obs.proprio.clone(),
                points: s.obs.cloud.points.iter().flatten().copied().collect(),
                action_chunk: s.chunk.flat(),
                activation: s.activation.clone(),
                priority: s.priority,
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let l: SampleLine = serde_json::from_str(line)?;
            if l.points.len() % 3 != 0 {
                return Err(GecoError::Parse(format!("line {}: point list not a multiple of 3", n + 1)));
            }
            let points = l.points.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            samples.push(ReplaySample {
                task_id: l.task_id,
                source: l.source,
                obs: Observation { cloud: PointCloud::base(points), proprio: l.proprio },
                chunk: ActionChunk::from_flat_clamped(&l.action_chunk)?,
                activation: l.activation,
                priority: l.priority,
            });
        }
        Ok(Self { samples })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilizationState {
    pub utilization: Option<Vec<f64>>,
    pub ema_coeff: f64,
    pub epsilon: f64,
}

impl UtilizationState {
    pub fn new(ema_coeff: f64, epsilon: f64) -> Self {
        Self { utilization: None, ema_coeff, epsilon }
    }

    /// Folds the mean routing vector of a batch of records into the EMA. The
    /// first call adopts the batch mean; an empty batch changes nothing.
    pub fn update(&mut self, records: &[GateRecord]) -> Option<&[f64]> {
        let weights: Vec<&Vec<f64>> = records.iter().flat_map(|r| r.weights.iter()).collect();
        if weights.is_empty() {
            return self.utilization.as_deref();
        }
        let m = weights[0].len();
        let mut mean = vec![0.0; m];
        for w in &weights {
            for (a, b) in mean.iter_mut().zip(w.iter()) {
                *a += b;
            }
        }
        let n = weights.len() as f64;
        mean.iter_mut().for_each(|v| *v /= n);
        self.utilization = Some(match self.utilization.take() {
            None => mean,
            Some(prev) => prev.iter().zip(&mean).map(|(p, u)| self.ema_coeff * u + (1.0 - self.ema_coeff) * p).collect(),
        });
        self.utilization.as_deref()
    }
}

/// `Σ_j W_j / (u_j + ε)`
pub fn priority(activation: &[f64], utilization: &[f64], epsilon: f64) -> f64 {
    activation.iter().zip(utilization).map(|(w, u)| w / (u + epsilon)).sum()
}

/// Recomputes every sample's priority from its stored activation.
pub fn compute_priorities(buffer: &mut UnifiedBuffer, state: &UtilizationState) -> Result<()> {
    let u = state
        .utilization
        .as_deref()
        .ok_or_else(|| GecoError::Config("utilization has not been initialised".into()))?;
    for s in &mut buffer.samples {
        if s.activation.len() != u.len() {
            return Err(GecoError::Shape(format!(
                "activation width {} differs from utilization width {}",
                s.activation.len(),
                u.len()
            )));
        }
        s.priority = priority(&s.activation, u, state.epsilon);
    }
    Ok(())
}

/// `(P_i + 1e-6)^α / Σ_k (P_k + 1e-6)^α`
pub fn sampling_probs(priorities: &[f64], exponent: f64) -> Vec<f64> {
    let raw: Vec<f64> = priorities.iter().map(|p| (p + PRIORITY_SMOOTHING).powf(exponent)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Draws `n` indices with replacement from the exponentiated priorities.
pub fn sample_indices<R: Rng + ?Sized>(priorities: &[f64], exponent: f64, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if priorities.is_empty() {
        return Err(GecoError::EmptyInput("cannot sample from an empty replay buffer"));
    }
    let probs = sampling_probs(priorities, exponent);
    let dist = WeightedIndex::new(&probs).map_err(|e| GecoError::Numeric(format!("replay weights: {e}")))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

pub fn sample_replay<R: Rng + ?Sized>(buffer: &UnifiedBuffer, exponent: f64, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    sample_indices(&buffer.priorities(), exponent, n, rng)
}

/// Composition of one training batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixCounts {
    pub correction: usize,
    pub sim: usize,
    pub replay: usize,
}

/// Nested split: `replay_fraction` of the batch from the buffer (at least one
/// item when the buffer is nonempty), then `correction_fraction` of the rest
/// from corrections and the remainder from sim demonstrations.
pub fn mix_counts(batch: usize, buffer_len: usize, sim_available: bool, replay_fraction: f64, correction_fraction: f64) -> MixCounts {
    let replay = if buffer_len == 0 || replay_fraction <= 0.0 {
        0
    } else {
        ((batch as f64 * replay_fraction).round() as usize).clamp(1, batch)
    };
    let current = batch - replay;
    let correction = if sim_available {
        ((current as f64 * correction_fraction).round() as usize).min(current)
    } else {
        current
    };
    MixCounts { correction, sim: current - correction, replay }
}

/// Where a batch item comes from; indices refer to the respective pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixItem {
    Correction(usize),
    Sim(usize),
    Replay(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixConfig {
    pub batch_size: usize,
    pub replay_fraction: f64,
    pub correction_fraction: f64,
    pub exponent: f64,
    /// Zero-based position of the current task in the sequence.
    pub task_index: usize,
}

/// Draws one mixed batch. Current-task pools are sampled uniformly, the
/// buffer by priority.
pub fn build_training_mix<R: Rng + ?Sized>(
    corrections: usize,
    sims: usize,
    buffer: &UnifiedBuffer,
    cfg: &MixConfig,
    rng: &mut R,
) -> Result<Vec<MixItem>> {
    if corrections == 0 {
        return Err(GecoError::EmptyInput("current task has no correction samples"));
    }
    if cfg.task_index > 0 && buffer.is_empty() && cfg.replay_fraction > 0.0 {
        log::warn!("task {} has an empty replay buffer; training on current-task data only", cfg.task_index + 1);
    }
    let counts = mix_counts(cfg.batch_size, buffer.len(), sims > 0, cfg.replay_fraction, cfg.correction_fraction);
    let mut items = Vec::with_capacity(cfg.batch_size);
    items.extend((0..counts.correction).map(|_| MixItem::Correction(rng.random_range(0..corrections))));
    items.extend((0..counts.sim).map(|_| MixItem::Sim(rng.random_range(0..sims))));
    if counts.replay > 0 {
        items.extend(sample_replay(buffer, cfg.exponent, counts.replay, rng)?.into_iter().map(MixItem::Replay));
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(activation: Vec<f64>) -> ReplaySample {
        ReplaySample {
            task_id: "cuboid-reach".into(),
            source: Source::HumanCorrection,
            obs: Observation { cloud: PointCloud::base(vec![[0.0, 0.1, 0.2]]), proprio: vec![0.0; 4] },
            chunk: ActionChunk::constant([0.5, -0.5, 0.0, 1.0]).unwrap(),
            activation,
            priority: 1.0,
        }
    }

    #[test]
    fn utilization_ema() {
        let mut s = UtilizationState::new(0.4, 1e-6);
        s.update(&[GateRecord { weights: vec![vec![1.0, 0.0]] }]);
        assert_eq!(s.utilization.as_deref(), Some(&[1.0, 0.0][..]));
        let u = s.update(&[GateRecord { weights: vec![vec![0.0, 1.0]] }]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-12 && (u[1] - 0.4).abs() < 1e-12);
        assert_eq!(s.update(&[]).unwrap().len(), 2);
    }

    #[test]
    fn priority_hand_cases() {
        assert!((priority(&[0.3, 0.7], &[0.5, 0.5], 1e-6) - 2.0).abs() < 1e-5);
        let a = priority(&[0.0, 1.0], &[1.0, 0.0], 1e-6);
        let b = priority(&[1.0, 0.0], &[1.0, 0.0], 1e-6);
        assert!((a / b - 1e6 * (1.0 + 1e-6)).abs() < 1e-3);
        assert!((priority(&[0.5, 0.5], &[0.25, 0.75], 0.0) - 8.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_probability_hand_case() {
        let p = sampling_probs(&[16.0 - 1e-6, 1.0 - 1e-6], 0.5);
        assert!((p[0] - 0.8).abs() < 1e-12 && (p[1] - 0.2).abs() < 1e-12);
        let flat = sampling_probs(&[100.0, 1.0, 7.0], 0.0);
        assert!(flat.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn mix_counts_examples() {
        assert_eq!(mix_counts(20, 0, true, 0.1, 0.95), MixCounts { correction: 19, sim: 1, replay: 0 });
        assert_eq!(mix_counts(20, 50, true, 0.1, 0.95), MixCounts { correction: 17, sim: 1, replay: 2 });
        assert_eq!(mix_counts(4, 50, true, 0.1, 0.95).replay, 1);
        assert_eq!(mix_counts(20, 50, false, 0.1, 0.95), MixCounts { correction: 18, sim: 0, replay: 2 });
    }

    #[test]
    fn record_activation_means_groups() {
        let mut b = UnifiedBuffer::new();
        b.push(sample(vec![]));
        b.record_activation(0, &GateRecord { weights: vec![vec![1.0, 0.0], vec![0.0, 1.0]] }).unwrap();
        assert_eq!(b.samples()[0].activation, vec![0.5, 0.5]);
        assert!(matches!(b.record_activation(3, &GateRecord { weights: vec![vec![1.0]] }), Err(GecoError::NotFound(_))));
    }

    #[test]
    fn empty_buffer_sampling_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_replay(&UnifiedBuffer::new(), 0.6, 3, &mut rng).is_err());
    }

    #[test]
    fn jsonl_roundtrip() {
        let mut b = UnifiedBuffer::new();
        b.push(sample(vec![0.25, 0.75]));
        let text = b.to_jsonl().unwrap();
        assert!(text.contains("\"source\":\"human_correction\""));
        assert_eq!(UnifiedBuffer::from_jsonl(&text).unwrap(), b);
    }
}
