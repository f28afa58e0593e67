//! Base simulation policy: a PointNet-style encoder feeding a DDPM action head.
//!
//! The head conditions on `[encoder feature ‖ residual slot]`. The residual
//! slot stays zero while the policy is cloned from sim demonstrations and is
//! the only channel through which adaptation modules influence actions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{shape_err, GecoError, Result};
use crate::pointcloud::PointCloud;
use crate::tinynn::{
    checkpoint, visit_prefixed, visit_prefixed_mut, zeros_like, Activation, Adam, Mlp, MlpTape, Parameters,
};

pub const CHUNK_LEN: usize = 8;
pub const ACTION_DIM: usize = 4;
pub const CHUNK_WIDTH: usize = CHUNK_LEN * ACTION_DIM;

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub cloud: PointCloud,
    pub proprio: Vec<f64>,
}

/// Eight consecutive `[dx, dy, dz, gripper]` actions, each component in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    actions: Vec<[f64; ACTION_DIM]>,
}

impl ActionChunk {
    pub fn new(actions: Vec<[f64; ACTION_DIM]>) -> Result<Self> {
        if actions.len() != CHUNK_LEN {
            return Err(shape_err(format!("chunk needs {CHUNK_LEN} actions, got {}", actions.len())));
        }
        if actions.iter().flatten().any(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(GecoError::Numeric("chunk components must be finite and within [-1, 1]".into()));
        }
        Ok(Self { actions })
    }

    pub fn constant(action: [f64; ACTION_DIM]) -> Result<Self> {
        Self::new(vec![action; CHUNK_LEN])
    }

    /// Builds a chunk from a flat vector, clamping every component into [-1, 1].
    pub fn from_flat_clamped(flat: &[f64]) -> Result<Self> {
        if flat.len() != CHUNK_WIDTH {
            return Err(shape_err(format!("flat chunk has {} values, expected {CHUNK_WIDTH}", flat.len())));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(GecoError::Numeric("non-finite action".into()));
        }
        let actions = flat
            .chunks_exact(ACTION_DIM)
            .map(|c| [c[0].clamp(-1.0, 1.0), c[1].clamp(-1.0, 1.0), c[2].clamp(-1.0, 1.0), c[3].clamp(-1.0, 1.0)])
            .collect();
        Ok(Self { actions })
    }

    pub fn actions(&self) -> &[[f64; ACTION_DIM]] {
        &self.actions
    }

    pub fn flat(&self) -> Vec<f64> {
        self.actions.iter().flatten().copied().collect()
    }
}

/// Linear-β DDPM schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(GecoError::Config(format!(
                "invalid schedule: {steps} steps, beta {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|k| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `√ᾱ_k a + √(1-ᾱ_k) ε`
    pub fn add_noise(&self, clean: &[f64], k: usize, noise: &[f64]) -> Vec<f64> {
        let ab = self.alpha_bars[k];
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        clean.iter().zip(noise).map(|(a, e)| s * a + n * e).collect()
    }

    /// Standard deviation of the reverse transition out of step `k` (β̃_k).
    pub fn posterior_std(&self, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        let var = self.betas[k] * (1.0 - self.alpha_bars[k - 1]) / (1.0 - self.alpha_bars[k]);
        var.sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyArch {
    pub chunk_len: usize,
    pub point_budget: usize,
    pub proprio_dim: usize,
    pub point_hidden: Vec<usize>,
    pub feature_width: usize,
    pub residual_width: usize,
    pub head_hidden: Vec<usize>,
    pub input_scale: f64,
    pub proprio_scale: Vec<f64>,
    pub denoise_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for PolicyArch {
    fn default() -> Self {
        Self {
            chunk_len: CHUNK_LEN,
            point_budget: 256,
            proprio_dim: 4,
            point_hidden: vec![32, 64],
            feature_width: 64,
            residual_width: 64,
            head_hidden: vec![128, 128],
            input_scale: 10.0,
            proprio_scale: vec![10.0, 10.0, 10.0, 1.0],
            denoise_steps: 10,
            beta_start: 1e-4,
            beta_end: 0.2,
        }
    }
}

impl PolicyArch {
    pub fn validate(&self) -> Result<()> {
        if self.point_budget == 0 || self.point_hidden.is_empty() || self.feature_width == 0 {
            return Err(GecoError::Config("policy architecture has zero-sized parts".into()));
        }
        if self.residual_width > self.feature_width {
            return Err(GecoError::Config("residual_width must not exceed feature_width".into()));
        }
        if self.proprio_dim < 3 {
            return Err(GecoError::Config("proprio_dim must include the gripper position".into()));
        }
        if self.proprio_scale.len() != self.proprio_dim {
            return Err(GecoError::Config(format!(
                "proprio_scale has {} entries for proprio_dim {}",
                self.proprio_scale.len(),
                self.proprio_dim
            )));
        }
        NoiseSchedule::linear(self.denoise_steps, self.beta_start, self.beta_end).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointEncoder {
    point_net: Mlp,
    proj: Mlp,
    input_scale: f64,
    proprio_scale: Vec<f64>,
    budget: usize,
}

pub(crate) struct EncoderTape {
    batch: usize,
    point: MlpTape,
    argmax: Vec<usize>,
    proj: MlpTape,
}

impl EncoderTape {
    pub(crate) fn features(&self) -> &[f64] {
        self.proj.output()
    }
}

impl PointEncoder {
    pub fn new<R: Rng + ?Sized>(arch: &PolicyArch, rng: &mut R) -> Result<Self> {
        let mut widths = vec![3];
        widths.extend_from_slice(&arch.point_hidden);
        let point_net = Mlp::new(&widths, Activation::Relu, Activation::Relu, rng)?;
        let pooled = *arch.point_hidden.last().unwrap();
        let proj = Mlp::new(&[2 * pooled + arch.proprio_dim, arch.feature_width], Activation::Tanh, Activation::Tanh, rng)?;
        Ok(Self {
            point_net,
            proj,
            input_scale: arch.input_scale,
            proprio_scale: arch.proprio_scale.clone(),
            budget: arch.point_budget,
        })
    }

    pub fn from_parts(point_net: Mlp, proj: Mlp, input_scale: f64, proprio_scale: Vec<f64>, budget: usize) -> Result<Self> {
        if point_net.input_width() != 3 || proj.input_width() != 2 * point_net.output_width() + proprio_scale.len() {
            return Err(shape_err("encoder parts do not fit together"));
        }
        Ok(Self { point_net, proj, input_scale, proprio_scale, budget })
    }

    pub fn point_net(&self) -> &Mlp {
        &self.point_net
    }

    pub fn feature_width(&self) -> usize {
        self.proj.output_width()
    }

    pub fn encode(&self, obs: &Observation) -> Result<Vec<f64>> {
        Ok(self.encode_tape(&[obs])?.features().to_vec())
    }

    pub(crate) fn encode_tape(&self, batch: &[&Observation]) -> Result<EncoderTape> {
        let n = self.budget;
        let p = self.proprio_scale.len();
        let mut pts = Vec::with_capacity(batch.len() * n * 3);
        for obs in batch {
            if obs.cloud.len() != n {
                return Err(shape_err(format!("observation has {} points, budget is {n}", obs.cloud.len())));
            }
            if obs.proprio.len() != p {
                return Err(shape_err(format!("proprio has {} values, expected {p}", obs.proprio.len())));
            }
            // points are expressed relative to the gripper
            for q in &obs.cloud.points {
                pts.extend(q.iter().zip(&obs.proprio[..3]).map(|(c, g)| (c - g) * self.input_scale));
            }
        }
        let point = self.point_net.forward_tape(&pts, batch.len() * n)?;
        let h = self.point_net.output_width();
        let out = point.output();
        let mut argmax = vec![0usize; batch.len() * h];
        let mut proj_in = Vec::with_capacity(batch.len() * (2 * h + p));
        for (b, obs) in batch.iter().enumerate() {
            let mut best = vec![f64::NEG_INFINITY; h];
            let mut mean = vec![0.0; h];
            let am = &mut argmax[b * h..(b + 1) * h];
            for i in 0..n {
                let row = &out[(b * n + i) * h..(b * n + i + 1) * h];
                for c in 0..h {
                    if row[c] > best[c] {
                        best[c] = row[c];
                        am[c] = i;
                    }
                    mean[c] += row[c] / n as f64;
                }
            }
            proj_in.extend_from_slice(&best);
            proj_in.extend_from_slice(&mean);
            proj_in.extend(obs.proprio.iter().zip(&self.proprio_scale).map(|(v, s)| v * s));
        }
        let proj = self.proj.forward_tape(&proj_in, batch.len())?;
        Ok(EncoderTape { batch: batch.len(), point, argmax, proj })
    }

    pub(crate) fn backward(&self, tape: &EncoderTape, d_feat: &[f64], grads: &mut PointEncoder) -> Result<()> {
        let d_proj_in = self.proj.backward(&tape.proj, d_feat, &mut grads.proj)?;
        let h = self.point_net.output_width();
        let p = self.proprio_scale.len();
        let n = self.budget;
        let mut d_points = vec![0.0; tape.batch * n * h];
        for b in 0..tape.batch {
            let d_in = &d_proj_in[b * (2 * h + p)..(b + 1) * (2 * h + p)];
            for i in 0..n {
                for c in 0..h {
                    d_points[(b * n + i) * h + c] = d_in[h + c] / n as f64;
                }
            }
            for c in 0..h {
                let i = tape.argmax[b * h + c];
                d_points[(b * n + i) * h + c] += d_in[c];
            }
        }
        self.point_net.backward_params(&tape.point, &d_points, &mut grads.point_net)
    }
}

impl Parameters for PointEncoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_prefixed("point_net", &self.point_net, f);
        visit_prefixed("proj", &self.proj, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_prefixed_mut("point_net", &mut self.point_net, f);
        visit_prefixed_mut("proj", &mut self.proj, f);
    }
}

/// Noise-prediction network ε_θ over `[noisy chunk ‖ one-hot step ‖ feature ‖ residual]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionHead {
    net: Mlp,
    schedule: NoiseSchedule,
    feature_width: usize,
    residual_width: usize,
}

/// Gradients of a head evaluation.
#[derive(Clone, Debug)]
pub struct HeadGrads {
    pub net: Mlp,
    pub feature: Vec<f64>,
    pub residual: Vec<f64>,
}

pub(crate) struct HeadTape {
    pub(crate) tape: MlpTape,
}

impl DiffusionHead {
    pub fn new<R: Rng + ?Sized>(arch: &PolicyArch, rng: &mut R) -> Result<Self> {
        let schedule = NoiseSchedule::linear(arch.denoise_steps, arch.beta_start, arch.beta_end)?;
        let mut widths = vec![CHUNK_WIDTH + schedule.steps() + arch.feature_width + arch.residual_width];
        widths.extend_from_slice(&arch.head_hidden);
        widths.push(CHUNK_WIDTH);
        let net = Mlp::new(&widths, Activation::Relu, Activation::Identity, rng)?;
        Ok(Self { net, schedule, feature_width: arch.feature_width, residual_width: arch.residual_width })
    }

    pub fn from_net(net: Mlp, schedule: NoiseSchedule, feature_width: usize, residual_width: usize) -> Result<Self> {
        if net.input_width() != CHUNK_WIDTH + schedule.steps() + feature_width + residual_width
            || net.output_width() != CHUNK_WIDTH
        {
            return Err(shape_err("head network widths do not match chunk/schedule/feature layout"));
        }
        Ok(Self { net, schedule, feature_width, residual_width })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn residual_width(&self) -> usize {
        self.residual_width
    }

    /// Sets the residual-slot input weights of the first layer to the
    /// trained feature weights mapped through `basis` (`feature_width ×
    /// residual_width`, row-major), so that a residual `r` perturbs the head
    /// like the feature offset `basis · r`. Outputs with a zero residual are
    /// unchanged.
    pub fn tie_residual_slot(&mut self, basis: &[f64]) -> Result<()> {
        let (fw, rw) = (self.feature_width, self.residual_width);
        if basis.len() != fw * rw {
            return Err(shape_err(format!("residual basis has {} values, expected {}", basis.len(), fw * rw)));
        }
        let off = self.cond_offset();
        let first = &mut self.net.layers_mut()[0];
        let inputs = first.inputs;
        for o in 0..first.outputs {
            let row = &mut first.weight[o * inputs..(o + 1) * inputs];
            for j in 0..rw {
                row[off + fw + j] = (0..fw).map(|f| row[off + f] * basis[f * rw + j]).sum();
            }
        }
        Ok(())
    }

    fn cond_offset(&self) -> usize {
        CHUNK_WIDTH + self.schedule.steps()
    }

    fn push_row(&self, row: &mut Vec<f64>, x_k: &[f64], k: usize, feature: &[f64], residual: Option<&[f64]>) {
        row.extend_from_slice(x_k);
        row.extend((0..self.schedule.steps()).map(|i| if i == k { 1.0 } else { 0.0 }));
        row.extend_from_slice(feature);
        match residual {
            Some(r) => row.extend_from_slice(r),
            None => row.extend(std::iter::repeat_n(0.0, self.residual_width)),
        }
    }

    fn check_cond(&self, feature: &[f64], residual: Option<&[f64]>) -> Result<()> {
        if feature.len() != self.feature_width {
            return Err(shape_err(format!("feature has {} values, head expects {}", feature.len(), self.feature_width)));
        }
        if let Some(r) = residual {
            if r.len() != self.residual_width {
                return Err(shape_err(format!(
                    "residual has {} values, head expects {}",
                    r.len(),
                    self.residual_width
                )));
            }
        }
        Ok(())
    }

    pub fn predict_eps(&self, x_k: &[f64], k: usize, feature: &[f64], residual: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_cond(feature, residual)?;
        if x_k.len() != CHUNK_WIDTH || k >= self.schedule.steps() {
            return Err(shape_err("noisy chunk width or step out of range"));
        }
        let mut row = Vec::with_capacity(self.net.input_width());
        self.push_row(&mut row, x_k, k, feature, residual);
        self.net.forward(&row)
    }

    /// Batched ε prediction with a tape. `cond` rows are `[feature ‖ residual]`.
    pub(crate) fn forward_rows(&self, x_k: &[f64], ks: &[usize], cond: &[f64]) -> Result<HeadTape> {
        let rows = ks.len();
        let cw = self.feature_width + self.residual_width;
        if x_k.len() != rows * CHUNK_WIDTH || cond.len() != rows * cw {
            return Err(shape_err("batched head input sizes disagree"));
        }
        let mut input = Vec::with_capacity(rows * self.net.input_width());
        for r in 0..rows {
            let c = &cond[r * cw..(r + 1) * cw];
            self.push_row(
                &mut input,
                &x_k[r * CHUNK_WIDTH..(r + 1) * CHUNK_WIDTH],
                ks[r],
                &c[..self.feature_width],
                Some(&c[self.feature_width..]),
            );
        }
        Ok(HeadTape { tape: self.net.forward_tape(&input, rows)? })
    }

    /// Gradient of the tape output with respect to the `[feature ‖ residual]` rows.
    pub(crate) fn cond_grad(&self, tape: &HeadTape, d_eps: &[f64], grads: Option<&mut Mlp>) -> Result<Vec<f64>> {
        let dx = match grads {
            Some(g) => self.net.backward(&tape.tape, d_eps, g)?,
            None => self.net.backward_input(&tape.tape, d_eps)?,
        };
        let iw = self.net.input_width();
        let off = self.cond_offset();
        Ok(dx.chunks_exact(iw).flat_map(|row| row[off..].iter().copied()).collect())
    }

    /// `‖ε − ε_θ(a^k, k, f)‖²` with gradients for the network, the feature and the residual.
    pub fn diffusion_loss(
        &self,
        feature: &[f64],
        residual: Option<&[f64]>,
        chunk: &ActionChunk,
        k: usize,
        noise: &[f64],
    ) -> Result<(f64, HeadGrads)> {
        self.check_cond(feature, residual)?;
        if k >= self.schedule.steps() || noise.len() != CHUNK_WIDTH {
            return Err(shape_err("diffusion step or noise width out of range"));
        }
        if feature.iter().chain(noise).chain(residual.unwrap_or(&[])).any(|v| !v.is_finite()) {
            return Err(GecoError::Numeric("non-finite diffusion input".into()));
        }
        let x_k = self.schedule.add_noise(&chunk.flat(), k, noise);
        let mut cond = feature.to_vec();
        match residual {
            Some(r) => cond.extend_from_slice(r),
            None => cond.extend(std::iter::repeat_n(0.0, self.residual_width)),
        }
        let tape = self.forward_rows(&x_k, &[k], &cond)?;
        let pred = tape.tape.output();
        let mut loss = 0.0;
        let d_eps: Vec<f64> = pred
            .iter()
            .zip(noise)
            .map(|(p, e)| {
                let d = p - e;
                loss += d * d;
                2.0 * d
            })
            .collect();
        let mut net = zeros_like(&self.net);
        let d_cond = self.cond_grad(&tape, &d_eps, Some(&mut net))?;
        Ok((
            loss,
            HeadGrads {
                net,
                feature: d_cond[..self.feature_width].to_vec(),
                residual: d_cond[self.feature_width..].to_vec(),
            },
        ))
    }

    /// DDPM ancestral sampling from a seeded Gaussian, clamped to [-1, 1].
    pub fn sample_chunk(&self, feature: &[f64], residual: Option<&[f64]>, seed: u64) -> Result<ActionChunk> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(feature, residual, &mut rng)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, feature: &[f64], residual: Option<&[f64]>, rng: &mut R) -> Result<ActionChunk> {
        self.check_cond(feature, residual)?;
        let s = &self.schedule;
        let mut x: Vec<f64> = (0..CHUNK_WIDTH).map(|_| rng.sample(StandardNormal)).collect();
        let mut row = Vec::with_capacity(self.net.input_width());
        for k in (0..s.steps()).rev() {
            row.clear();
            self.push_row(&mut row, &x, k, feature, residual);
            let eps = self.net.forward(&row)?;
            let coef = s.betas[k] / (1.0 - s.alpha_bars[k]).sqrt();
            let inv_sqrt_alpha = 1.0 / s.alphas[k].sqrt();
            let sigma = s.posterior_std(k);
            for (xi, ei) in x.iter_mut().zip(&eps) {
                *xi = (*xi - coef * ei) * inv_sqrt_alpha;
            }
            if k > 0 {
                for xi in x.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *xi += sigma * z;
                }
            }
        }
        ActionChunk::from_flat_clamped(&x)
    }
}

impl Parameters for DiffusionHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_prefixed("net", &self.net, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_prefixed_mut("net", &mut self.net, f);
    }
}

#[derive(Clone, Debug, PartialEq)]
struct PolicyNets {
    encoder: PointEncoder,
    head: DiffusionHead,
}

impl Parameters for PolicyNets {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_prefixed("encoder", &self.encoder, f);
        visit_prefixed("head", &self.head, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_prefixed_mut("encoder", &mut self.encoder, f);
        visit_prefixed_mut("head", &mut self.head, f);
    }
}

/// Encoder plus diffusion head. Parameters are only reachable through shared
/// references once the policy leaves [`train_bc`].
#[derive(Clone, Debug, PartialEq)]
pub struct BasePolicy {
    nets: PolicyNets,
    arch: PolicyArch,
    frozen: bool,
}

impl BasePolicy {
    /// Freshly initialised, not yet frozen.
    pub fn init(arch: &PolicyArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = PointEncoder::new(arch, &mut rng)?;
        let head = DiffusionHead::new(arch, &mut rng)?;
        Ok(Self { nets: PolicyNets { encoder, head }, arch: arch.clone(), frozen: false })
    }

    pub fn from_parts(encoder: PointEncoder, head: DiffusionHead, arch: &PolicyArch) -> Result<Self> {
        if encoder.feature_width() != head.feature_width() {
            return Err(shape_err("encoder feature width differs from head"));
        }
        Ok(Self { nets: PolicyNets { encoder, head }, arch: arch.clone(), frozen: true })
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn arch(&self) -> &PolicyArch {
        &self.arch
    }

    pub fn encoder(&self) -> &PointEncoder {
        &self.nets.encoder
    }

    pub fn head(&self) -> &DiffusionHead {
        &self.nets.head
    }

    pub fn residual_width(&self) -> usize {
        self.nets.head.residual_width
    }

    pub fn encode(&self, obs: &Observation) -> Result<Vec<f64>> {
        self.nets.encoder.encode(obs)
    }

    /// Samples a chunk; `residual = None` means the zero residual.
    pub fn act(&self, obs: &Observation, residual: Option<&[f64]>, seed: u64) -> Result<ActionChunk> {
        let f = self.encode(obs)?;
        self.nets.head.sample_chunk(&f, residual, seed)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.nets.visit(f)
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        checkpoint::save(&self.nets)
    }

    /// Loads a frozen policy of the given architecture.
    pub fn from_checkpoint(arch: &PolicyArch, bytes: &[u8]) -> Result<Self> {
        let mut p = Self::init(arch, 0)?;
        checkpoint::load(&mut p.nets, bytes)?;
        Ok(p.frozen())
    }

    /// FNV-1a over the checkpoint bytes.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(&self.to_checkpoint())
    }
}

/// Seeded `feature_width × residual_width` matrix with orthonormal columns.
pub fn residual_basis(feature_width: usize, residual_width: usize, seed: u64) -> Result<Vec<f64>> {
    if residual_width > feature_width {
        return Err(GecoError::Config(format!(
            "residual_width {residual_width} exceeds feature_width {feature_width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(residual_width);
    while cols.len() < residual_width {
        let mut v: Vec<f64> = (0..feature_width).map(|_| rng.sample(StandardNormal)).collect();
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Ok((0..feature_width * residual_width).map(|i| cols[i % residual_width][i / residual_width]).collect())
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self { steps: 3000, batch_size: 32, lr: 3e-4, cosine_decay: false }
    }
}

#[derive(Clone, Debug, Default)]
pub struct BcLog {
    pub losses: Vec<f64>,
}

impl BcLog {
    /// Exponential moving average of the per-step losses.
    pub fn ema(&self, coeff: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.losses.len());
        let mut acc = None;
        for &l in &self.losses {
            let v = match acc {
                None => l,
                Some(a) => coeff * l + (1.0 - coeff) * a,
            };
            acc = Some(v);
            out.push(v);
        }
        out
    }
}

/// One minibatch of the diffusion objective, averaged over the batch, with
/// gradients for encoder and head.
fn bc_batch_grads(
    nets: &PolicyNets,
    batch: &[&(Observation, ActionChunk)],
    ks: &[usize],
    noises: &[f64],
) -> Result<(f64, PolicyNets)> {
    let b = batch.len();
    let obs: Vec<&Observation> = batch.iter().map(|(o, _)| o).collect();
    let enc = nets.encoder.encode_tape(&obs)?;
    let feats = enc.features();
    let fw = nets.head.feature_width;
    let rw = nets.head.residual_width;
    let sched = &nets.head.schedule;
    let mut x_k = Vec::with_capacity(b * CHUNK_WIDTH);
    let mut cond = Vec::with_capacity(b * (fw + rw));
    for (i, (_, chunk)) in batch.iter().enumerate() {
        x_k.extend(sched.add_noise(&chunk.flat(), ks[i], &noises[i * CHUNK_WIDTH..(i + 1) * CHUNK_WIDTH]));
        cond.extend_from_slice(&feats[i * fw..(i + 1) * fw]);
        cond.extend(std::iter::repeat_n(0.0, rw));
    }
    let tape = nets.head.forward_rows(&x_k, ks, &cond)?;
    let pred = tape.tape.output();
    let scale = 1.0 / b as f64;
    let mut loss = 0.0;
    let d_eps: Vec<f64> = pred
        .iter()
        .zip(noises)
        .map(|(p, e)| {
            let d = p - e;
            loss += d * d;
            2.0 * d * scale
        })
        .collect();
    let mut grads = PolicyNets { encoder: zeros_like(&nets.encoder), head: zeros_like(&nets.head) };
    let d_cond = nets.head.cond_grad(&tape, &d_eps, Some(&mut grads.head.net))?;
    let d_feat: Vec<f64> = d_cond.chunks_exact(fw + rw).flat_map(|r| r[..fw].iter().copied()).collect();
    nets.encoder.backward(&enc, &d_feat, &mut grads.encoder)?;
    Ok((loss * scale, grads))
}

/// Behaviour cloning with the diffusion objective. The returned policy is frozen.
pub fn train_bc(
    dataset: &[(Observation, ActionChunk)],
    arch: &PolicyArch,
    cfg: &BcConfig,
    init_seed: u64,
    train_seed: u64,
) -> Result<(BasePolicy, BcLog)> {
    if dataset.is_empty() {
        return Err(GecoError::Config("behaviour cloning dataset is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(GecoError::Config("batch_size must be positive".into()));
    }
    let mut policy = BasePolicy::init(arch, init_seed)?;
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(train_seed);
    let steps = policy.nets.head.schedule.steps();
    let mut log = BcLog::default();
    for step in 0..cfg.steps {
        if cfg.cosine_decay {
            opt.lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        }
        let batch: Vec<&(Observation, ActionChunk)> =
            (0..cfg.batch_size).map(|_| &dataset[rng.random_range(0..dataset.len())]).collect();
        let ks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..steps)).collect();
        let noises: Vec<f64> = (0..cfg.batch_size * CHUNK_WIDTH).map(|_| rng.sample(StandardNormal)).collect();
        let (loss, grads) = bc_batch_grads(&policy.nets, &batch, &ks, &noises)?;
        opt.step(&mut policy.nets, &grads)?;
        log.losses.push(loss);
    }
    let basis = residual_basis(arch.feature_width, arch.residual_width, derive_seed(init_seed, 0x5107))?;
    policy.nets.head.tie_residual_slot(&basis)?;
    Ok((policy.frozen(), log))
}

/// Mean diffusion loss of `policy` over `batch` at fixed steps and noises;
/// exposed for gradient checking.
pub fn bc_loss(
    policy: &BasePolicy,
    batch: &[&(Observation, ActionChunk)],
    ks: &[usize],
    noises: &[f64],
) -> Result<f64> {
    Ok(bc_batch_grads(&policy.nets, batch, ks, noises)?.0)
}

/// Encoder and head gradients of [`bc_loss`], as `(encoder, head)`.
pub fn bc_loss_grads(
    policy: &BasePolicy,
    batch: &[&(Observation, ActionChunk)],
    ks: &[usize],
    noises: &[f64],
) -> Result<(f64, PointEncoder, DiffusionHead)> {
    let (loss, g) = bc_batch_grads(&policy.nets, batch, ks, noises)?;
    Ok((loss, g.encoder, g.head))
}

/// A copy of `policy` with one scalar parameter replaced; used by finite-difference checks.
pub fn perturbed(policy: &BasePolicy, index: usize, value: f64) -> BasePolicy {
    let mut p = policy.clone();
    crate::tinynn::set_scalar(&mut p.nets, index, value);
    p
}
