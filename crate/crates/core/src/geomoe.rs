//! Geometry-gated mixture of residual experts.
//!
//! Each local group of the observation is embedded by a shared per-point
//! network with max-pooling, routed by a gate that only sees the group's shape
//! descriptors and centroid, and mapped through a softmax-weighted mix of
//! experts. The per-group outputs are max-pooled into one residual vector that
//! fills the frozen head's residual slot.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, GecoError, Result};
use crate::geomfeat::{geometric_features_with, GeomFeatures, SaliencyFormula};
use crate::pointcloud::{knn_groups, LocalGroup, PointCloud};
use crate::policy::{ActionChunk, BasePolicy, DiffusionHead, Observation, CHUNK_WIDTH};
use crate::tinynn::{
    softmax, softmax_backward, visit_prefixed, visit_prefixed_mut, zeros_like, Activation, Adam, Mlp, MlpTape,
    Parameters,
};

/// `[linearity, planarity, saliency, log1p(λ1), cx, cy, cz]`
pub const GATE_FEATURES: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Softmax gate over several experts.
    #[default]
    Gated,
    /// One expert, no gate: a dense observation residual.
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeArch {
    pub experts: usize,
    pub groups: usize,
    pub group_size: usize,
    pub embed_hidden: Vec<usize>,
    pub expert_hidden: Vec<usize>,
    pub gate_hidden: Vec<usize>,
    pub balance_weight: f64,
    pub lr: f64,
    /// Multiplier on member offsets from the group centroid before embedding.
    pub local_scale: f64,
    /// Multiplier on the group centroid before embedding.
    pub centroid_scale: f64,
    /// Seed of the farthest-point start used to pick group centers.
    pub group_seed: u64,
    pub saliency: SaliencyFormula,
}

impl Default for MoeArch {
    fn default() -> Self {
        Self {
            experts: 3,
            groups: 16,
            group_size: 16,
            embed_hidden: vec![32, 32],
            expert_hidden: vec![32],
            gate_hidden: vec![16],
            balance_weight: 0.01,
            lr: 1e-3,
            local_scale: 50.0,
            centroid_scale: 10.0,
            group_seed: 0,
            saliency: SaliencyFormula::SurfaceVariation,
        }
    }
}

impl MoeArch {
    pub fn validate(&self) -> Result<()> {
        if self.experts < 2 {
            return Err(GecoError::Config(format!("moe.experts must be at least 2, got {}", self.experts)));
        }
        if self.groups == 0 || self.group_size < 3 {
            return Err(GecoError::Config("moe.groups must be positive and moe.group_size at least 3".into()));
        }
        if self.embed_hidden.is_empty() {
            return Err(GecoError::Config("moe.embed_hidden must name at least one layer".into()));
        }
        if !(self.balance_weight >= 0.0 && self.lr > 0.0) {
            return Err(GecoError::Config("moe.balance_weight must be >= 0 and moe.lr > 0".into()));
        }
        Ok(())
    }
}

/// Shape descriptors and centroid of one group, plus the degenerate flag.
pub fn gate_features(group: &LocalGroup, formula: SaliencyFormula) -> Result<([f64; GATE_FEATURES], GeomFeatures)> {
    let f = geometric_features_with(group, formula)?;
    let c = group.centroid;
    let v = if f.degenerate {
        [0.0, 0.0, 0.0, 0.0, c[0], c[1], c[2]]
    } else {
        [f.linearity, f.planarity, f.saliency, f.eigvals[0].ln_1p(), c[0], c[1], c[2]]
    };
    Ok((v, f))
}

/// An observation split into local groups with their gate inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedObs {
    pub groups: Vec<LocalGroup>,
    pub geometry: Vec<GeomFeatures>,
    pub gate_inputs: Vec<[f64; GATE_FEATURES]>,
}

impl GroupedObs {
    pub fn build(cloud: &PointCloud, arch: &MoeArch) -> Result<Self> {
        let groups = knn_groups(cloud, arch.groups, arch.group_size, arch.group_seed)?;
        Self::from_groups(groups, arch.saliency)
    }

    pub fn from_groups(groups: Vec<LocalGroup>, formula: SaliencyFormula) -> Result<Self> {
        if groups.is_empty() {
            return Err(GecoError::EmptyInput("residual needs at least one group"));
        }
        let mut geometry = Vec::with_capacity(groups.len());
        let mut gate_inputs = Vec::with_capacity(groups.len());
        for g in &groups {
            let (v, f) = gate_features(g, formula)?;
            gate_inputs.push(v);
            geometry.push(f);
        }
        Ok(Self { groups, geometry, gate_inputs })
    }

    fn point_rows(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }
}

/// Per-group routing weights of one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct GateRecord {
    pub weights: Vec<Vec<f64>>,
}

impl GateRecord {
    /// Mean weight vector over groups.
    pub fn mean(&self) -> Vec<f64> {
        mean_weights(&self.weights)
    }
}

pub fn mean_weights(weights: &[Vec<f64>]) -> Vec<f64> {
    let m = weights.first().map_or(0, |w| w.len());
    let mut out = vec![0.0; m];
    for w in weights {
        for (o, v) in out.iter_mut().zip(w) {
            *o += v;
        }
    }
    let n = weights.len().max(1) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeoMoe {
    gate: Mlp,
    embedder: Mlp,
    experts: Vec<Mlp>,
    routing: Routing,
    local_scale: f64,
    centroid_scale: f64,
}

struct MoeTape {
    /// Group count per sample.
    groups: Vec<usize>,
    /// Member count per group, across the batch.
    members: Vec<usize>,
    embed: MlpTape,
    embed_argmax: Vec<usize>,
    gate: Option<MlpTape>,
    probs: Vec<f64>,
    experts: Vec<MlpTape>,
    residual_argmax: Vec<usize>,
    residuals: Vec<f64>,
}

impl GeoMoe {
    /// Expert output layers start at zero, so a fresh module adds nothing.
    pub fn new(arch: &MoeArch, residual_width: usize, routing: Routing, seed: u64) -> Result<Self> {
        arch.validate()?;
        if residual_width == 0 {
            return Err(GecoError::Config("residual width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![6];
        widths.extend_from_slice(&arch.embed_hidden);
        let embedder = Mlp::new(&widths, Activation::Relu, Activation::Relu, &mut rng)?;
        let embed_width = *arch.embed_hidden.last().unwrap();
        let count = match routing {
            Routing::Gated => arch.experts,
            Routing::Dense => 1,
        };
        let mut gw = vec![GATE_FEATURES];
        gw.extend_from_slice(&arch.gate_hidden);
        gw.push(count);
        let gate = Mlp::new(&gw, Activation::Tanh, Activation::Identity, &mut rng)?;
        let mut ew = vec![embed_width];
        ew.extend_from_slice(&arch.expert_hidden);
        ew.push(residual_width);
        let mut experts = Vec::with_capacity(count);
        for _ in 0..count {
            let mut e = Mlp::new(&ew, Activation::Relu, Activation::Identity, &mut rng)?;
            let last = e.layers_mut().last_mut().unwrap();
            last.weight.fill(0.0);
            last.bias.fill(0.0);
            experts.push(e);
        }
        Ok(Self { gate, embedder, experts, routing, local_scale: arch.local_scale, centroid_scale: arch.centroid_scale })
    }

    pub fn from_parts(gate: Mlp, embedder: Mlp, experts: Vec<Mlp>, local_scale: f64, centroid_scale: f64) -> Result<Self> {
        let routing = if experts.len() == 1 { Routing::Dense } else { Routing::Gated };
        if experts.is_empty() {
            return Err(shape_err("need at least one expert"));
        }
        let topology = experts[0].widths();
        if experts.iter().any(|e| e.widths() != topology) {
            return Err(shape_err("experts must share one topology"));
        }
        if embedder.input_width() != 6 || topology[0] != embedder.output_width() {
            return Err(shape_err("embedder does not feed the experts"));
        }
        if gate.input_width() != GATE_FEATURES || gate.output_width() != experts.len() {
            return Err(shape_err("gate widths do not match the expert count"));
        }
        Ok(Self { gate, embedder, experts, routing, local_scale, centroid_scale })
    }

    pub fn experts(&self) -> usize {
        self.experts.len()
    }

    pub fn routing(&self) -> Routing {
        self.routing
    }

    pub fn residual_width(&self) -> usize {
        self.experts[0].output_width()
    }

    pub fn gate(&self) -> &Mlp {
        &self.gate
    }

    pub fn gate_mut(&mut self) -> &mut Mlp {
        &mut self.gate
    }

    pub fn expert(&self, j: usize) -> &Mlp {
        &self.experts[j]
    }

    pub fn expert_mut(&mut self, j: usize) -> &mut Mlp {
        &mut self.experts[j]
    }

    /// Zeroes every expert's output layer so the residual is exactly zero.
    pub fn force_zero_output(&mut self) {
        for e in &mut self.experts {
            let last = e.layers_mut().last_mut().unwrap();
            last.weight.fill(0.0);
            last.bias.fill(0.0);
        }
    }

    /// Softmax routing weights for one gate input.
    pub fn route(&self, gate_input: &[f64; GATE_FEATURES]) -> Result<Vec<f64>> {
        match self.routing {
            Routing::Dense => Ok(vec![1.0]),
            Routing::Gated => Ok(softmax(&self.gate.forward(gate_input)?)),
        }
    }

    /// Group embedding: per-point network over `[offset · local_scale, centroid · centroid_scale]`, max-pooled.
    pub fn embed(&self, group: &LocalGroup) -> Result<Vec<f64>> {
        let rows = self.embed_rows(std::slice::from_ref(group));
        let out = self.embedder.forward_batch(&rows, group.members.len())?;
        let w = self.embedder.output_width();
        let mut best = vec![f64::NEG_INFINITY; w];
        for row in out.chunks_exact(w) {
            for (b, v) in best.iter_mut().zip(row) {
                if *v > *b {
                    *b = *v;
                }
            }
        }
        Ok(best)
    }

    fn embed_rows(&self, groups: &[LocalGroup]) -> Vec<f64> {
        let mut rows = Vec::new();
        for g in groups {
            let c = g.centroid;
            for p in &g.members {
                for a in 0..3 {
                    rows.push((p[a] - c[a]) * self.local_scale);
                }
                for a in 0..3 {
                    rows.push(c[a] * self.centroid_scale);
                }
            }
        }
        rows
    }

    /// Per-group feature `Σ_j w_j · Expert_j(embedding)` with the weights used.
    pub fn expert_mix(&self, group: &LocalGroup, gate_input: &[f64; GATE_FEATURES]) -> Result<(Vec<f64>, Vec<f64>)> {
        let w = self.route(gate_input)?;
        let e = self.embed(group)?;
        let mut out = vec![0.0; self.residual_width()];
        for (j, wj) in w.iter().enumerate() {
            let o = self.experts[j].forward(&e)?;
            for (a, b) in out.iter_mut().zip(&o) {
                *a += wj * b;
            }
        }
        Ok((out, w))
    }

    /// Residual vector and routing record for one observation.
    pub fn residual(&self, obs: &GroupedObs) -> Result<(Vec<f64>, GateRecord)> {
        let tape = self.forward_tape(&[obs])?;
        let m = self.experts.len();
        let weights = tape.probs.chunks_exact(m).map(|w| w.to_vec()).collect();
        Ok((tape.residuals, GateRecord { weights }))
    }

    fn forward_tape(&self, batch: &[&GroupedObs]) -> Result<MoeTape> {
        let m = self.experts.len();
        let rw = self.residual_width();
        let groups: Vec<usize> = batch.iter().map(|o| o.groups.len()).collect();
        if groups.contains(&0) {
            return Err(GecoError::EmptyInput("residual needs at least one group"));
        }
        let total: usize = groups.iter().sum();
        let mut members = Vec::with_capacity(total);
        let mut rows = Vec::with_capacity(batch.iter().map(|o| o.point_rows()).sum::<usize>() * 6);
        let mut gate_in = Vec::with_capacity(total * GATE_FEATURES);
        for o in batch {
            rows.extend(self.embed_rows(&o.groups));
            members.extend(o.groups.iter().map(|g| g.members.len()));
            for g in &o.gate_inputs {
                gate_in.extend_from_slice(g);
            }
        }
        let n_rows = members.iter().sum();
        let embed = self.embedder.forward_tape(&rows, n_rows)?;
        let ew = self.embedder.output_width();
        let eo = embed.output();
        let mut embeds = vec![f64::NEG_INFINITY; total * ew];
        let mut embed_argmax = vec![0usize; total * ew];
        let mut row = 0;
        for (gi, &cnt) in members.iter().enumerate() {
            let best = &mut embeds[gi * ew..(gi + 1) * ew];
            let am = &mut embed_argmax[gi * ew..(gi + 1) * ew];
            for r in row..row + cnt {
                let vals = &eo[r * ew..(r + 1) * ew];
                for c in 0..ew {
                    if vals[c] > best[c] {
                        best[c] = vals[c];
                        am[c] = r;
                    }
                }
            }
            row += cnt;
        }
        let (gate, probs) = match self.routing {
            Routing::Dense => (None, vec![1.0; total]),
            Routing::Gated => {
                let t = self.gate.forward_tape(&gate_in, total)?;
                let probs = t.output().chunks_exact(m).flat_map(softmax).collect();
                (Some(t), probs)
            }
        };
        let experts: Vec<MlpTape> =
            self.experts.iter().map(|e| e.forward_tape(&embeds, total)).collect::<Result<_>>()?;
        let mut mixed = vec![0.0; total * rw];
        for (j, t) in experts.iter().enumerate() {
            let out = t.output();
            for gi in 0..total {
                let w = probs[gi * m + j];
                for c in 0..rw {
                    mixed[gi * rw + c] += w * out[gi * rw + c];
                }
            }
        }
        let mut residuals = vec![f64::NEG_INFINITY; batch.len() * rw];
        let mut residual_argmax = vec![0usize; batch.len() * rw];
        let mut g0 = 0;
        for (b, &cnt) in groups.iter().enumerate() {
            for gi in g0..g0 + cnt {
                for c in 0..rw {
                    if mixed[gi * rw + c] > residuals[b * rw + c] {
                        residuals[b * rw + c] = mixed[gi * rw + c];
                        residual_argmax[b * rw + c] = gi;
                    }
                }
            }
            g0 += cnt;
        }
        Ok(MoeTape { groups, members, embed, embed_argmax, gate, probs, experts, residual_argmax, residuals })
    }

    /// Accumulates parameter gradients given upstream gradients on the
    /// residuals and, optionally, directly on the routing weights.
    fn backward(&self, tape: &MoeTape, d_res: &[f64], d_probs_extra: Option<&[f64]>, grads: &mut GeoMoe) -> Result<()> {
        let m = self.experts.len();
        let rw = self.residual_width();
        let total: usize = tape.groups.iter().sum();
        let mut d_mixed = vec![0.0; total * rw];
        for b in 0..tape.groups.len() {
            for c in 0..rw {
                let gi = tape.residual_argmax[b * rw + c];
                d_mixed[gi * rw + c] += d_res[b * rw + c];
            }
        }
        let ew = self.embedder.output_width();
        let mut d_embeds = vec![0.0; total * ew];
        let mut d_probs = match d_probs_extra {
            Some(d) => d.to_vec(),
            None => vec![0.0; total * m],
        };
        for (j, t) in tape.experts.iter().enumerate() {
            let out = t.output();
            let mut d_out = vec![0.0; total * rw];
            for gi in 0..total {
                let w = tape.probs[gi * m + j];
                let mut dp = 0.0;
                for c in 0..rw {
                    let g = d_mixed[gi * rw + c];
                    d_out[gi * rw + c] = w * g;
                    dp += g * out[gi * rw + c];
                }
                d_probs[gi * m + j] += dp;
            }
            let d_in = self.experts[j].backward(t, &d_out, &mut grads.experts[j])?;
            for (a, b) in d_embeds.iter_mut().zip(&d_in) {
                *a += b;
            }
        }
        if let Some(gt) = &tape.gate {
            let d_logits: Vec<f64> = tape
                .probs
                .chunks_exact(m)
                .zip(d_probs.chunks_exact(m))
                .flat_map(|(p, d)| softmax_backward(p, d))
                .collect();
            self.gate.backward_params(gt, &d_logits, &mut grads.gate)?;
        }
        let n_rows: usize = tape.members.iter().sum();
        let mut d_rows = vec![0.0; n_rows * ew];
        for gi in 0..total {
            for c in 0..ew {
                let r = tape.embed_argmax[gi * ew + c];
                d_rows[r * ew + c] += d_embeds[gi * ew + c];
            }
        }
        self.embedder.backward_params(&tape.embed, &d_rows, &mut grads.embedder)
    }
}

impl Parameters for GeoMoe {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_prefixed("gate", &self.gate, f);
        visit_prefixed("embedder", &self.embedder, f);
        for (j, e) in self.experts.iter().enumerate() {
            visit_prefixed(&format!("experts.{j}"), e, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_prefixed_mut("gate", &mut self.gate, f);
        visit_prefixed_mut("embedder", &mut self.embedder, f);
        for (j, e) in self.experts.iter_mut().enumerate() {
            visit_prefixed_mut(&format!("experts.{j}"), e, f);
        }
    }
}

/// Componentwise max over per-group features.
pub fn aggregate_residual(per_group: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_group.first().ok_or(GecoError::EmptyInput("residual needs at least one group"))?;
    let mut out = first.clone();
    for g in &per_group[1..] {
        if g.len() != out.len() {
            return Err(shape_err("per-group features differ in width"));
        }
        for (o, v) in out.iter_mut().zip(g) {
            if *v > *o {
                *o = *v;
            }
        }
    }
    Ok(out)
}

/// Load-balancing loss `M · Σ_j f_j · p_j` over all routed groups, where `f_j`
/// is the fraction of groups whose largest weight is expert `j` (ties go to
/// the lowest index) and `p_j` the mean weight of expert `j`.
pub fn balance_loss(weights: &[Vec<f64>]) -> Result<f64> {
    Ok(balance_terms(weights)?.0)
}

/// Loss and the constant `M · f_j / N` that is its gradient with respect to each `w_ij`.
fn balance_terms(weights: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    let m = weights.first().ok_or(GecoError::EmptyInput("balance loss needs routed groups"))?.len();
    let n = weights.len() as f64;
    let mut frac = vec![0.0; m];
    for w in weights {
        let mut best = 0;
        for j in 1..m {
            if w[j] > w[best] {
                best = j;
            }
        }
        frac[best] += 1.0 / n;
    }
    let mean = mean_weights(weights);
    let loss = m as f64 * frac.iter().zip(&mean).map(|(f, p)| f * p).sum::<f64>();
    let grad = frac.iter().map(|f| m as f64 * f / n).collect();
    Ok((loss, grad))
}

/// Base action with the residual slot filled from the module.
pub fn corrected_forward(policy: &BasePolicy, moe: &GeoMoe, obs: &Observation, grouped: &GroupedObs, seed: u64) -> Result<(ActionChunk, GateRecord)> {
    if !policy.is_frozen() {
        return Err(GecoError::FreezeViolation("corrected_forward requires a frozen base policy".into()));
    }
    if moe.residual_width() != policy.residual_width() {
        return Err(shape_err(format!(
            "module residual width {} differs from the policy slot {}",
            moe.residual_width(),
            policy.residual_width()
        )));
    }
    let (r, rec) = moe.residual(grouped)?;
    Ok((policy.act(obs, Some(&r), seed)?, rec))
}

/// One adaptation example. The head belongs to the frozen base policy of the
/// example's task and is only read.
#[derive(Clone, Copy, Debug)]
pub struct AdaptExample<'a> {
    pub head: &'a DiffusionHead,
    pub feature: &'a [f64],
    pub grouped: &'a GroupedObs,
    pub chunk: &'a [f64],
}

/// Diffusion step and noise drawn for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptDraw {
    pub step: usize,
    pub noise: Vec<f64>,
}

impl AdaptDraw {
    pub fn sample<R: Rng + ?Sized>(steps: usize, rng: &mut R) -> Self {
        let step = rng.random_range(0..steps);
        let noise = (0..CHUNK_WIDTH).map(|_| rng.sample(StandardNormal)).collect();
        Self { step, noise }
    }
}

#[derive(Clone, Debug)]
pub struct AdaptLoss {
    pub total: f64,
    pub mse: f64,
    pub balance: f64,
    /// Reconstruction MSE of each example.
    pub per_example: Vec<f64>,
    pub records: Vec<GateRecord>,
}

/// `mean MSE(â, a) + α · L_balance` where `â` is the one-step reconstruction
/// `(a^k − √(1−ᾱ_k) ε̂) / √ᾱ_k`, with gradients for the module only.
pub fn adapt_loss(moe: &GeoMoe, balance_weight: f64, batch: &[AdaptExample], draws: &[AdaptDraw]) -> Result<(AdaptLoss, GeoMoe)> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(shape_err("adaptation batch and draws must be nonempty and equal in length"));
    }
    let rw = moe.residual_width();
    let grouped: Vec<&GroupedObs> = batch.iter().map(|e| e.grouped).collect();
    let tape = moe.forward_tape(&grouped)?;
    let b = batch.len() as f64;
    let mut d_res = vec![0.0; batch.len() * rw];
    let mut per_example = Vec::with_capacity(batch.len());
    for (i, (ex, draw)) in batch.iter().zip(draws).enumerate() {
        let head = ex.head;
        if head.residual_width() != rw || ex.feature.len() != head.feature_width() || ex.chunk.len() != CHUNK_WIDTH {
            return Err(shape_err("adaptation example does not fit the module or head"));
        }
        let sched = head.schedule();
        let k = draw.step;
        let ab = sched.alpha_bars[k];
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let x_k = sched.add_noise(ex.chunk, k, &draw.noise);
        let mut cond = ex.feature.to_vec();
        cond.extend_from_slice(&tape.residuals[i * rw..(i + 1) * rw]);
        let ht = head.forward_rows(&x_k, &[k], &cond)?;
        let eps = ht.tape.output();
        let mut loss = 0.0;
        let d_eps: Vec<f64> = eps
            .iter()
            .zip(&x_k)
            .zip(ex.chunk)
            .map(|((e, x), a)| {
                let recon = (x - sn * e) / sa;
                let d = recon - a;
                loss += d * d;
                // d/dε̂ of the batch-mean MSE
                2.0 * d / CHUNK_WIDTH as f64 / b * (-sn / sa)
            })
            .collect();
        per_example.push(loss / CHUNK_WIDTH as f64);
        let d_cond = head.cond_grad(&ht, &d_eps, None)?;
        d_res[i * rw..(i + 1) * rw].copy_from_slice(&d_cond[head.feature_width()..]);
    }
    let m = moe.experts();
    let weights: Vec<Vec<f64>> = tape.probs.chunks_exact(m).map(|w| w.to_vec()).collect();
    let (balance, d_bal) = match moe.routing {
        Routing::Dense => (0.0, None),
        Routing::Gated => {
            let (l, g) = balance_terms(&weights)?;
            let d: Vec<f64> = (0..weights.len()).flat_map(|_| g.iter().map(|v| v * balance_weight)).collect();
            (l, Some(d))
        }
    };
    let mut grads = zeros_like(moe);
    moe.backward(&tape, &d_res, d_bal.as_deref(), &mut grads)?;
    let mse = per_example.iter().sum::<f64>() / b;
    let mut records = Vec::with_capacity(batch.len());
    let mut off = 0;
    for &cnt in &tape.groups {
        records.push(GateRecord { weights: weights[off..off + cnt].to_vec() });
        off += cnt;
    }
    Ok((AdaptLoss { total: mse + balance_weight * balance, mse, balance, per_example, records }, grads))
}

/// One Adam step on the module's parameters.
pub fn adapt_step<R: Rng + ?Sized>(
    moe: &mut GeoMoe,
    opt: &mut Adam,
    balance_weight: f64,
    batch: &[AdaptExample],
    rng: &mut R,
) -> Result<AdaptLoss> {
    let steps = batch.first().map_or(1, |e| e.head.schedule().steps());
    let draws: Vec<AdaptDraw> = batch.iter().map(|_| AdaptDraw::sample(steps, rng)).collect();
    let (loss, grads) = adapt_loss(moe, balance_weight, batch, &draws)?;
    opt.step(moe, &grads)?;
    Ok(loss)
}

/// Routing-record CSV rows `sample_id,group_index,w_1..w_M,linearity,planarity,saliency`.
pub fn gate_records_csv(experts: usize, rows: &[(usize, &GateRecord, &GroupedObs)]) -> String {
    let mut s = String::from("sample_id,group_index");
    for j in 1..=experts {
        s.push_str(&format!(",w_{j}"));
    }
    s.push_str(",linearity,planarity,saliency\n");
    for (id, rec, obs) in rows {
        for (gi, (w, f)) in rec.weights.iter().zip(&obs.geometry).enumerate() {
            s.push_str(&format!("{id},{gi}"));
            for v in w {
                s.push_str(&format!(",{v}"));
            }
            s.push_str(&format!(",{},{},{}\n", f.linearity, f.planarity, f.saliency));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynn::fill;

    fn plane_group(center: [f64; 3]) -> LocalGroup {
        let mut pts = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                pts.push([center[0] + 0.01 * i as f64 - 0.015, center[1] + 0.01 * j as f64 - 0.015, center[2]]);
            }
        }
        LocalGroup::from_members(0, (0..16).collect(), pts)
    }

    fn small_arch() -> MoeArch {
        MoeArch { groups: 2, group_size: 4, embed_hidden: vec![5], expert_hidden: vec![4], gate_hidden: vec![3], ..MoeArch::default() }
    }

    #[test]
    fn plane_patch_gate_features() {
        let (v, _) = gate_features(&plane_group([1.0, 2.0, 3.0]), SaliencyFormula::default()).unwrap();
        assert!(v[0].abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9 && v[2].abs() < 1e-12);
        for (a, b) in v[4..].iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_points_zero_geometry() {
        let g = LocalGroup::from_members(0, vec![0, 1, 2], vec![[0.5, 0.5, 0.5]; 3]);
        let (v, f) = gate_features(&g, SaliencyFormula::default()).unwrap();
        assert!(f.degenerate);
        assert_eq!(&v[..4], &[0.0; 4]);
    }

    #[test]
    fn zero_gate_routes_uniformly() {
        let mut moe = GeoMoe::new(&small_arch(), 2, Routing::Gated, 0).unwrap();
        fill(moe.gate_mut(), 0.0);
        let w = moe.route(&[0.3; GATE_FEATURES]).unwrap();
        assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn saturated_gate_is_one_hot() {
        let mut moe = GeoMoe::new(&small_arch(), 2, Routing::Gated, 0).unwrap();
        fill(moe.gate_mut(), 0.0);
        let last = moe.gate_mut().layers_mut().last_mut().unwrap();
        last.bias[1] = 1000.0;
        let w = moe.route(&[0.1; GATE_FEATURES]).unwrap();
        assert!((w[1] - 1.0).abs() < 1e-12 && w[0] < 1e-12);
    }

    #[test]
    fn aggregate_cases() {
        assert_eq!(aggregate_residual(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(aggregate_residual(&[vec![3.0, -1.0]]).unwrap(), vec![3.0, -1.0]);
        assert!(aggregate_residual(&[]).is_err());
    }

    #[test]
    fn balance_loss_hand_cases() {
        let uniform = vec![vec![1.0 / 3.0; 3]; 4];
        assert!((balance_loss(&uniform).unwrap() - 1.0).abs() < 1e-12);
        let collapsed = vec![vec![0.0, 1.0, 0.0]; 5];
        assert!((balance_loss(&collapsed).unwrap() - 3.0).abs() < 1e-12);
        let split = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((balance_loss(&split).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fresh_module_outputs_zero_residual() {
        let moe = GeoMoe::new(&small_arch(), 3, Routing::Gated, 4).unwrap();
        let groups = vec![plane_group([0.0, 0.0, 0.02]), plane_group([0.05, 0.0, 0.02])];
        let obs = GroupedObs::from_groups(groups, SaliencyFormula::default()).unwrap();
        let (r, rec) = moe.residual(&obs).unwrap();
        assert_eq!(r, vec![0.0; 3]);
        for w in &rec.weights {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_header() {
        let csv = gate_records_csv(3, &[]);
        assert_eq!(csv, "sample_id,group_index,w_1,w_2,w_3,linearity,planarity,saliency\n");
    }
}
