//! Kinematic tabletop tasks with paired simulated and "real" observation models.
//!
//! Both variants share dynamics and goals. The real variant corrupts the
//! object point clouds (rigid offset, jitter, dropout, distractors), so a
//! policy cloned in sim aims at the wrong place. A privileged scripted expert
//! solves every task and doubles as the intervening corrector.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{GecoError, Result};
use crate::pointcloud::{
    add, crop_aabb, dist2, dot, fps_downsample, fuse_views, pad_to_budget, sub, transform_to_base, CameraExtrinsics,
    Point3, PointCloud,
};
use crate::policy::{ActionChunk, Observation, ACTION_DIM, CHUNK_LEN};

/// Gripper displacement (m) per unit action component.
pub const MAX_STEP: f64 = 0.02;
pub const GRASP_RADIUS: f64 = 0.02;
pub const HOME: Point3 = [0.0, 0.0, 0.15];
pub const WORKSPACE_LO: Point3 = [-0.2, -0.2, 0.002];
pub const WORKSPACE_HI: Point3 = [0.2, 0.2, 0.3];
pub const CUBE_SIZE: f64 = 0.04;
/// Reach tasks succeed once the held object's grasp point is this high.
pub const LIFT_SUCCESS_Z: f64 = 0.08;
const LIFT_TARGET_Z: f64 = 0.1;
/// Closing the gripper below this distance is part of the expert plan.
const EXPERT_CLOSE_DIST: f64 = 1e-6;
const STACK_TOLERANCE: f64 = 0.02;
const PEG_TOLERANCE: f64 = 0.008;
const ARC_RADIUS: f64 = 0.05;
const ARC_SPAN: f64 = 2.0 * std::f64::consts::FRAC_PI_3;
const TUBE_RADIUS: f64 = 0.008;
const PEG_HALF_WIDTH: f64 = 0.007;
const PEG_HEIGHT: f64 = 0.05;
const SLAB_HALF: f64 = 0.035;
const SLAB_HEIGHT: f64 = 0.02;
const PLATE_HALF: f64 = 0.03;
const PLATE_HEIGHT: f64 = 0.01;
const HOLE_RADIUS: f64 = 0.012;
const SURFACE_SPACING: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "cuboid-reach")]
    CuboidReach,
    #[serde(rename = "cuboid-stack")]
    CuboidStack,
    #[serde(rename = "curved-reach")]
    CurvedReach,
    #[serde(rename = "peg-insert")]
    PegInsert,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::CuboidReach, TaskKind::CuboidStack, TaskKind::CurvedReach, TaskKind::PegInsert];

    pub fn id(self) -> &'static str {
        match self {
            TaskKind::CuboidReach => "cuboid-reach",
            TaskKind::CuboidStack => "cuboid-stack",
            TaskKind::CurvedReach => "curved-reach",
            TaskKind::PegInsert => "peg-insert",
        }
    }

    pub fn geometry(self) -> GeometryClass {
        match self {
            TaskKind::CuboidReach | TaskKind::CuboidStack => GeometryClass::Cuboid,
            TaskKind::CurvedReach => GeometryClass::Curved,
            TaskKind::PegInsert => GeometryClass::Peg,
        }
    }

    pub fn horizon(self) -> usize {
        match self {
            TaskKind::CuboidReach | TaskKind::CurvedReach => 32,
            TaskKind::CuboidStack | TaskKind::PegInsert => 48,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for TaskKind {
    type Err = GecoError;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.id() == s)
            .ok_or_else(|| GecoError::Config(format!("unknown task id {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryClass {
    Cuboid,
    Curved,
    Peg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Sim,
    Real,
}

/// Observation corruption of the real variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainGap {
    /// Per-coordinate Gaussian noise σ (m).
    pub jitter: f64,
    /// Probability of dropping each raw object point.
    pub dropout: f64,
    /// Rigid translation of every object cloud (m).
    pub offset: Point3,
    /// Uniform clutter points added inside the workspace.
    pub distractors: usize,
}

impl DomainGap {
    pub fn none() -> Self {
        Self { jitter: 0.0, dropout: 0.0, offset: [0.0; 3], distractors: 0 }
    }

    /// The fixed real-world gap of a geometry class. Objects of one class
    /// share a calibration error, so the two cuboid tasks see the same offset.
    pub fn real(class: GeometryClass) -> Self {
        let offset = match class {
            GeometryClass::Cuboid => [0.03, -0.02, 0.0],
            GeometryClass::Curved => [-0.025, -0.03, 0.0],
            GeometryClass::Peg => [0.02, 0.03, 0.0],
        };
        Self { jitter: 0.002, dropout: 0.2, offset, distractors: 0 }
    }

    pub fn is_zero(&self) -> bool {
        self.jitter == 0.0 && self.dropout == 0.0 && self.offset == [0.0; 3] && self.distractors == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub domain: Domain,
    pub gap: DomainGap,
    pub horizon: usize,
    pub point_budget: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, domain: Domain, point_budget: usize) -> Self {
        let gap = match domain {
            Domain::Sim => DomainGap::none(),
            Domain::Real => DomainGap::real(kind.geometry()),
        };
        Self { kind, domain, gap, horizon: kind.horizon(), point_budget }
    }

    pub fn sim(kind: TaskKind, point_budget: usize) -> Self {
        Self::new(kind, Domain::Sim, point_budget)
    }

    pub fn real(kind: TaskKind, point_budget: usize) -> Self {
        Self::new(kind, Domain::Real, point_budget)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Cube,
    /// Wide, flat stacking base.
    Slab,
    Arc { yaw: f64 },
    Peg,
    HolePlate,
}

/// A rigid object; `pos` is its grasp point (or centre for fixtures).
#[derive(Clone, Copy, Debug, PartialEq)]
struct Body {
    shape: Shape,
    pos: Point3,
}

impl Body {
    /// Surface samples with outward normals, in the base frame.
    fn surface(&self) -> Vec<(Point3, Point3)> {
        let mut out = Vec::new();
        match self.shape {
            Shape::Cube => box_surface(self.pos, [CUBE_SIZE / 2.0; 3], &mut out),
            Shape::Slab => box_surface(self.pos, [SLAB_HALF, SLAB_HALF, SLAB_HEIGHT / 2.0], &mut out),
            Shape::Peg => {
                let c = [self.pos[0], self.pos[1], self.pos[2] - 0.01];
                box_surface(c, [PEG_HALF_WIDTH, PEG_HALF_WIDTH, PEG_HEIGHT / 2.0], &mut out)
            }
            Shape::HolePlate => {
                let c = [self.pos[0], self.pos[1], PLATE_HEIGHT / 2.0];
                let mut tmp = Vec::new();
                box_surface(c, [PLATE_HALF, PLATE_HALF, PLATE_HEIGHT / 2.0], &mut tmp);
                let r2 = HOLE_RADIUS * HOLE_RADIUS;
                out.extend(tmp.into_iter().filter(|(p, n)| {
                    n[2] < 0.5 || (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) > r2
                }));
            }
            Shape::Arc { yaw } => {
                // Centreline arc through `pos` at its midpoint, bulging along yaw.
                let centre = [self.pos[0] - ARC_RADIUS * yaw.cos(), self.pos[1] - ARC_RADIUS * yaw.sin(), self.pos[2]];
                let along = (ARC_RADIUS * ARC_SPAN / SURFACE_SPACING).ceil() as usize;
                let around = 10;
                for i in 0..=along {
                    let th = yaw - ARC_SPAN / 2.0 + ARC_SPAN * i as f64 / along as f64;
                    let radial = [th.cos(), th.sin(), 0.0];
                    let cl = add(centre, [ARC_RADIUS * radial[0], ARC_RADIUS * radial[1], 0.0]);
                    for j in 0..around {
                        let ph = 2.0 * std::f64::consts::PI * j as f64 / around as f64;
                        let n = [radial[0] * ph.cos(), radial[1] * ph.cos(), ph.sin()];
                        out.push((add(cl, [TUBE_RADIUS * n[0], TUBE_RADIUS * n[1], TUBE_RADIUS * n[2]]), n));
                    }
                }
            }
        }
        out
    }
}

fn box_surface(c: Point3, half: Point3, out: &mut Vec<(Point3, Point3)>) {
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            if axis == 2 && sign < 0.0 {
                continue; // resting face is never seen
            }
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            let nu = ((2.0 * half[u] / SURFACE_SPACING).round() as usize).max(1);
            let nv = ((2.0 * half[v] / SURFACE_SPACING).round() as usize).max(1);
            let mut n = [0.0; 3];
            n[axis] = sign;
            for i in 0..=nu {
                for j in 0..=nv {
                    let mut p = c;
                    p[axis] += sign * half[axis];
                    p[u] += -half[u] + 2.0 * half[u] * i as f64 / nu as f64;
                    p[v] += -half[v] + 2.0 * half[v] * j as f64 / nv as f64;
                    out.push((p, n));
                }
            }
        }
    }
}

/// Drops each point independently with probability `prob`.
pub fn drop_points<R: Rng + ?Sized>(points: &mut Vec<Point3>, prob: f64, rng: &mut R) {
    points.retain(|_| rng.random::<f64>() >= prob);
}

fn cameras() -> [CameraExtrinsics; 2] {
    [
        CameraExtrinsics::look_at([0.35, 0.1, 0.35], [0.0, 0.0, 0.0]).expect("valid camera"),
        CameraExtrinsics::look_at([-0.2, -0.3, 0.3], [0.0, 0.0, 0.02]).expect("valid camera"),
    ]
}

/// Full simulator state. Privileged: the expert and corrector read it directly.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    spec: TaskSpec,
    seed: u64,
    gripper: Point3,
    closed: bool,
    held: Option<usize>,
    bodies: Vec<Body>,
    /// Object placed on the fixture (stack/insert tasks).
    placed: bool,
    t: usize,
    done: bool,
    success: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub done: bool,
    pub success: bool,
}

impl EnvState {
    pub fn reset(spec: &TaskSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5eed));
        let xy = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| [rng.random_range(lo..hi), rng.random_range(lo..hi)];
        let bodies = match spec.kind {
            TaskKind::CuboidReach => {
                let p = xy(&mut rng, -0.08, 0.08);
                vec![Body { shape: Shape::Cube, pos: [p[0], p[1], CUBE_SIZE / 2.0] }]
            }
            TaskKind::CuboidStack => {
                // the cube spawns in the near half and the slab in the far half
                let a = [rng.random_range(-0.08..0.08), rng.random_range(-0.09..-0.01)];
                let b = [rng.random_range(-0.08..0.08), rng.random_range(0.05..0.09)];
                vec![
                    Body { shape: Shape::Cube, pos: [a[0], a[1], CUBE_SIZE / 2.0] },
                    Body { shape: Shape::Slab, pos: [b[0], b[1], SLAB_HEIGHT / 2.0] },
                ]
            }
            TaskKind::CurvedReach => {
                let p = xy(&mut rng, -0.08, 0.08);
                let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                vec![Body { shape: Shape::Arc { yaw }, pos: [p[0], p[1], TUBE_RADIUS] }]
            }
            TaskKind::PegInsert => {
                let a = [rng.random_range(-0.08..0.08), rng.random_range(-0.09..-0.01)];
                let b = [rng.random_range(-0.08..0.08), rng.random_range(0.04..0.09)];
                vec![
                    Body { shape: Shape::Peg, pos: [a[0], a[1], PEG_HEIGHT / 2.0 + 0.01] },
                    Body { shape: Shape::HolePlate, pos: [b[0], b[1], PLATE_HEIGHT / 2.0] },
                ]
            }
        };
        Self { spec: spec.clone(), seed, gripper: HOME, closed: false, held: None, bodies, placed: false, t: 0, done: false, success: false }
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn gripper(&self) -> Point3 {
        self.gripper
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn is_holding(&self) -> bool {
        self.held.is_some()
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn is_success(&self) -> bool {
        self.success
    }

    /// True grasp point of the object to be manipulated.
    pub fn grasp_point(&self) -> Point3 {
        self.bodies[0].pos
    }

    pub fn proprio(&self) -> Vec<f64> {
        vec![self.gripper[0], self.gripper[1], self.gripper[2], if self.closed { 1.0 } else { 0.0 }]
    }

    /// Noise-free object surface points visible from at least one camera, without the gap.
    fn visible_views(&self, offset: Point3) -> Vec<PointCloud> {
        let cams = cameras();
        let surf: Vec<(Point3, Point3)> = self.bodies.iter().flat_map(|b| b.surface()).collect();
        cams.iter()
            .map(|cam| {
                let eye = cam.translation();
                let pts = surf
                    .iter()
                    .filter(|(p, n)| dot(*n, sub(eye, *p)) > 0.0)
                    .map(|(p, _)| cam.apply_inverse(add(*p, offset)))
                    .collect();
                PointCloud::camera(pts)
            })
            .collect()
    }

    /// Renders the observation for the current step. Corruption noise is drawn
    /// from a stream keyed by (episode seed, step), so rendering is pure.
    pub fn observe(&self) -> Result<Observation> {
        let gap = &self.spec.gap;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0x0b5e_0000 + self.t as u64));
        let cams = cameras();
        let views = self.visible_views(gap.offset);
        let base_views: Vec<PointCloud> =
            views.iter().zip(&cams).map(|(v, c)| transform_to_base(v, c)).collect::<Result<_>>()?;
        let mut cloud = fuse_views(&base_views)?;
        if gap.dropout > 0.0 {
            drop_points(&mut cloud.points, gap.dropout, &mut rng);
        }
        if gap.jitter > 0.0 {
            let normal = Normal::new(0.0, gap.jitter).map_err(|e| GecoError::Config(e.to_string()))?;
            for p in &mut cloud.points {
                for c in p.iter_mut() {
                    *c += normal.sample(&mut rng);
                }
            }
        }
        for _ in 0..gap.distractors {
            cloud.points.push([
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
                rng.random_range(0.005..0.1),
            ]);
        }
        let mut cloud = crop_aabb(&cloud, WORKSPACE_LO, WORKSPACE_HI)?;
        if cloud.is_empty() {
            cloud.points.push([0.0, 0.0, WORKSPACE_LO[2]]);
        }
        let sampled = fps_downsample(&cloud, self.spec.point_budget, rng.random())?;
        let cloud = pad_to_budget(&sampled, self.spec.point_budget)?;
        Ok(Observation { cloud, proprio: self.proprio() })
    }

    /// Advances one step. Gripper commands above 0.5 close, below −0.5 open,
    /// anything in between keeps the current state.
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if action.len() != ACTION_DIM {
            return Err(GecoError::Shape(format!("action has {} values, expected {ACTION_DIM}", action.len())));
        }
        if action.iter().any(|v| !v.is_finite()) {
            return Err(GecoError::Numeric("non-finite action".into()));
        }
        if self.done {
            return Ok(StepOutcome { done: true, success: self.success });
        }
        for a in 0..3 {
            let d = action[a].clamp(-1.0, 1.0) * MAX_STEP;
            self.gripper[a] = (self.gripper[a] + d).clamp(WORKSPACE_LO[a], WORKSPACE_HI[a]);
        }
        if let Some(h) = self.held {
            self.bodies[h].pos = self.gripper;
        }
        if action[3] > 0.5 && !self.closed {
            self.closed = true;
            if self.held.is_none() && !self.placed && dist2(self.gripper, self.bodies[0].pos) <= GRASP_RADIUS * GRASP_RADIUS {
                self.held = Some(0);
                self.bodies[0].pos = self.gripper;
            }
        } else if action[3] < -0.5 && self.closed {
            self.closed = false;
            if self.held.take().is_some() {
                self.release();
            }
        }
        self.t += 1;
        self.success = self.goal_reached();
        self.done = self.success || self.t >= self.spec.horizon;
        Ok(StepOutcome { done: self.done, success: self.success })
    }

    fn release(&mut self) {
        let p = self.bodies[0].pos;
        match self.spec.kind {
            TaskKind::CuboidStack => {
                let b = self.bodies[1].pos;
                let (dx, dy) = (p[0] - b[0], p[1] - b[1]);
                if dx.abs() < SLAB_HALF && dy.abs() < SLAB_HALF && p[2] > SLAB_HEIGHT + CUBE_SIZE / 2.0 - 0.005 {
                    self.bodies[0].pos[2] = SLAB_HEIGHT + CUBE_SIZE / 2.0;
                    self.placed = dx.hypot(dy) <= STACK_TOLERANCE;
                } else {
                    self.bodies[0].pos[2] = CUBE_SIZE / 2.0;
                }
            }
            TaskKind::PegInsert => {
                let b = self.bodies[1].pos;
                let d = (p[0] - b[0]).hypot(p[1] - b[1]);
                let bottom = p[2] - 0.01 - PEG_HEIGHT / 2.0;
                if d <= PEG_TOLERANCE && bottom <= PLATE_HEIGHT + 0.015 {
                    self.placed = true;
                    self.bodies[0].pos[2] = PEG_HEIGHT / 2.0 + 0.01;
                } else {
                    self.bodies[0].pos[2] = PEG_HEIGHT / 2.0 + 0.01 + if d < PLATE_HALF { PLATE_HEIGHT } else { 0.0 };
                }
            }
            TaskKind::CuboidReach => self.bodies[0].pos[2] = CUBE_SIZE / 2.0,
            TaskKind::CurvedReach => self.bodies[0].pos[2] = TUBE_RADIUS,
        }
    }

    fn goal_reached(&self) -> bool {
        match self.spec.kind {
            TaskKind::CuboidReach | TaskKind::CurvedReach => self.held.is_some() && self.bodies[0].pos[2] >= LIFT_SUCCESS_Z,
            TaskKind::CuboidStack | TaskKind::PegInsert => self.placed,
        }
    }

    /// Where the held object must be released, as a gripper position.
    fn place_target(&self) -> Point3 {
        let b = self.bodies[1].pos;
        match self.spec.kind {
            TaskKind::CuboidStack => [b[0], b[1], SLAB_HEIGHT + CUBE_SIZE / 2.0 + 0.002],
            _ => [b[0], b[1], PLATE_HEIGHT + PEG_HEIGHT / 2.0 + 0.01 + 0.004],
        }
    }
}

fn toward(from: Point3, to: Point3, grip: f64) -> [f64; ACTION_DIM] {
    let d = sub(to, from);
    [(d[0] / MAX_STEP).clamp(-1.0, 1.0), (d[1] / MAX_STEP).clamp(-1.0, 1.0), (d[2] / MAX_STEP).clamp(-1.0, 1.0), grip]
}

/// Straight-line reach, grasp, and transport plan using the true object poses.
pub fn scripted_expert(state: &EnvState) -> [f64; ACTION_DIM] {
    if state.done {
        return [0.0, 0.0, 0.0, if state.closed { 1.0 } else { -1.0 }];
    }
    let g = state.gripper;
    match state.held {
        None if state.placed => [0.0, 0.0, 0.0, -1.0],
        None => {
            let target = state.grasp_point();
            if dist2(g, target) <= EXPERT_CLOSE_DIST * EXPERT_CLOSE_DIST && !state.closed {
                [0.0, 0.0, 0.0, 1.0]
            } else {
                toward(g, target, -1.0)
            }
        }
        Some(_) => match state.spec.kind {
            TaskKind::CuboidReach | TaskKind::CurvedReach => {
                let p = state.grasp_point();
                toward(g, [p[0], p[1], LIFT_TARGET_Z], 1.0)
            }
            TaskKind::CuboidStack | TaskKind::PegInsert => {
                let target = state.place_target();
                if dist2(g, target) <= EXPERT_CLOSE_DIST * EXPERT_CLOSE_DIST {
                    [0.0, 0.0, 0.0, -1.0]
                } else {
                    toward(g, target, 1.0)
                }
            }
        },
    }
}

/// Replaces the policy action with the expert's when they differ by more
/// than `threshold` in any component.
pub fn oracle_correct(policy_action: &[f64; ACTION_DIM], state: &EnvState, threshold: f64) -> ([f64; ACTION_DIM], bool) {
    let expert = scripted_expert(state);
    let dev = policy_action.iter().zip(&expert).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if dev > threshold {
        (expert, true)
    } else {
        (*policy_action, false)
    }
}

/// Anything that maps an observation to an action chunk.
pub trait Actor {
    fn act(&self, obs: &Observation, seed: u64) -> Result<ActionChunk>;
}

/// Actor that never moves and never changes the gripper.
pub struct ZeroActor;

impl Actor for ZeroActor {
    fn act(&self, _obs: &Observation, _seed: u64) -> Result<ActionChunk> {
        ActionChunk::constant([0.0; ACTION_DIM])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub obs: Observation,
    pub action: [f64; ACTION_DIM],
    pub intervened: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub task: TaskKind,
    pub domain: Domain,
    pub steps: Vec<TrajectoryStep>,
    pub success: bool,
}

impl Trajectory {
    /// Label for step `t`: the actions executed from `t` on, padded past the
    /// end with a motionless action that keeps the final gripper command.
    pub fn chunk_at(&self, t: usize) -> Result<ActionChunk> {
        let last = self.steps.last().map_or([0.0; ACTION_DIM], |s| s.action);
        let pad = [0.0, 0.0, 0.0, last[3]];
        let actions = (t..t + CHUNK_LEN).map(|i| self.steps.get(i).map_or(pad, |s| s.action)).collect();
        ActionChunk::new(actions)
    }

    pub fn interventions(&self) -> usize {
        self.steps.iter().filter(|s| s.intervened).count()
    }

    /// One JSON object per step.
    pub fn to_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            task_id: &'a str,
            domain: Domain,
            t: usize,
            proprio: &'a [f64],
            points: Vec<f64>,
            action: &'a [f64],
            intervened: bool,
        }
        let mut s = String::new();
        for (t, st) in self.steps.iter().enumerate() {
            let line = Line {
                task_id: self.task.id(),
                domain: self.domain,
                t,
                proprio: &st.obs.proprio,
                points: st.obs.cloud.points.iter().flatten().copied().collect(),
                action: &st.action,
                intervened: st.intervened,
            };
            s.push_str(&serde_json::to_string(&line)?);
            s.push('\n');
        }
        Ok(s)
    }

    /// Parses consecutive steps of one or more trajectories; a step with `t = 0`
    /// starts a new trajectory. Success is not stored and is reported as true.
    pub fn from_jsonl(text: &str) -> Result<Vec<Trajectory>> {
        #[derive(Deserialize)]
        struct Line {
            task_id: String,
            domain: Domain,
            t: usize,
            proprio: Vec<f64>,
            points: Vec<f64>,
            action: Vec<f64>,
            intervened: bool,
        }
        let mut out: Vec<Trajectory> = Vec::new();
        for (n, raw) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let l: Line = serde_json::from_str(raw)?;
            if l.action.len() != ACTION_DIM || l.points.len() % 3 != 0 {
                return Err(GecoError::Parse(format!("line {}: malformed step", n + 1)));
            }
            let task: TaskKind = l.task_id.parse()?;
            if l.t == 0 || out.is_empty() {
                out.push(Trajectory { task, domain: l.domain, steps: Vec::new(), success: true });
            }
            let points = l.points.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            out.last_mut().unwrap().steps.push(TrajectoryStep {
                obs: Observation { cloud: PointCloud::base(points), proprio: l.proprio },
                action: [l.action[0], l.action[1], l.action[2], l.action[3]],
                intervened: l.intervened,
            });
        }
        Ok(out)
    }
}

/// Runs one episode with the scripted expert.
pub fn expert_episode(spec: &TaskSpec, seed: u64) -> Result<Trajectory> {
    let mut state = EnvState::reset(spec, seed);
    let mut steps = Vec::new();
    while !state.is_done() {
        let obs = state.observe()?;
        let action = scripted_expert(&state);
        state.step(&action)?;
        steps.push(TrajectoryStep { obs, action, intervened: false });
    }
    Ok(Trajectory { task: spec.kind, domain: spec.domain, steps, success: state.is_success() })
}

/// Perturbations applied to executed expert actions while recording
/// demonstrations; labels stay clean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoNoise {
    /// Standard deviation of Gaussian noise on the translation commands.
    pub action_std: f64,
    /// Per-step probability of inverting the gripper command.
    pub grip_flip: f64,
}

impl DemoNoise {
    pub const NONE: DemoNoise = DemoNoise { action_std: 0.0, grip_flip: 0.0 };
}

/// The chunk the expert would execute open-loop from `state`.
pub fn expert_chunk(state: &EnvState) -> Result<ActionChunk> {
    let mut sim = state.clone();
    let mut actions = Vec::with_capacity(CHUNK_LEN);
    for _ in 0..CHUNK_LEN {
        let a = scripted_expert(&sim);
        sim.step(&a)?;
        actions.push(a);
    }
    ActionChunk::new(actions)
}

/// `(observation, chunk)` pairs from expert demonstrations on seeds
/// `seed..seed+n`. Executed actions are perturbed by `noise`; each label is
/// the expert's plan from the state actually visited.
pub fn expert_dataset(spec: &TaskSpec, episodes: usize, noise: DemoNoise, seed: u64) -> Result<Vec<(Observation, ActionChunk)>> {
    let mut data = Vec::new();
    for e in 0..episodes {
        let episode_seed = seed.wrapping_add(e as u64);
        let mut state = EnvState::reset(spec, episode_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(episode_seed, 0xde30));
        while !state.is_done() {
            let chunk = expert_chunk(&state)?;
            let mut action = chunk.actions()[0];
            if noise.action_std > 0.0 {
                for a in action.iter_mut().take(3) {
                    let z: f64 = rng.sample(StandardNormal);
                    *a = (*a + noise.action_std * z).clamp(-1.0, 1.0);
                }
            }
            if noise.grip_flip > 0.0 && rng.random_bool(noise.grip_flip) {
                action[3] = -action[3];
            }
            data.push((state.observe()?, chunk));
            state.step(&action)?;
        }
    }
    Ok(data)
}

/// Policy-only episode; chunks are executed in full before re-planning.
pub fn run_episode(actor: &dyn Actor, spec: &TaskSpec, seed: u64) -> Result<bool> {
    let mut state = EnvState::reset(spec, seed);
    let mut queue: VecDeque<[f64; ACTION_DIM]> = VecDeque::new();
    while !state.is_done() {
        if queue.is_empty() {
            let obs = state.observe()?;
            let chunk = actor.act(&obs, derive_seed(seed, 0xac70_0000 + state.t() as u64))?;
            queue.extend(chunk.actions().iter().copied());
        }
        let a = queue.pop_front().unwrap();
        state.step(&a)?;
    }
    Ok(state.is_success())
}

/// Shared-autonomy episode: the corrector overrides deviating actions and the
/// policy re-plans after every override.
pub fn corrected_episode(actor: &dyn Actor, spec: &TaskSpec, threshold: f64, seed: u64) -> Result<Trajectory> {
    let mut state = EnvState::reset(spec, seed);
    let mut queue: VecDeque<[f64; ACTION_DIM]> = VecDeque::new();
    let mut steps = Vec::new();
    while !state.is_done() {
        let obs = state.observe()?;
        if queue.is_empty() {
            let chunk = actor.act(&obs, derive_seed(seed, 0xac70_0000 + state.t() as u64))?;
            queue.extend(chunk.actions().iter().copied());
        }
        let proposed = queue.pop_front().unwrap();
        let (action, intervened) = oracle_correct(&proposed, &state, threshold);
        if intervened {
            queue.clear();
        }
        state.step(&action)?;
        steps.push(TrajectoryStep { obs, action, intervened });
    }
    Ok(Trajectory { task: spec.kind, domain: spec.domain, steps, success: state.is_success() })
}

/// Indices of steps kept after removing, before each intervention onset, up
/// to `window` preceding policy-generated steps.
pub fn prune_indices(intervened: &[bool], window: usize) -> Vec<usize> {
    let mut keep = vec![true; intervened.len()];
    for t in 0..intervened.len() {
        let onset = intervened[t] && (t == 0 || !intervened[t - 1]);
        if onset {
            for s in t.saturating_sub(window)..t {
                if !intervened[s] {
                    keep[s] = false;
                }
            }
        }
    }
    (0..intervened.len()).filter(|&i| keep[i]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionSet {
    pub trajectories: Vec<Trajectory>,
    /// Kept step indices per trajectory.
    pub kept: Vec<Vec<usize>>,
    pub attempts: usize,
}

impl CorrectionSet {
    /// Training pairs from the kept steps; labels use the unpruned timeline.
    pub fn samples(&self) -> Result<Vec<(Observation, ActionChunk, bool)>> {
        let mut out = Vec::new();
        for (traj, kept) in self.trajectories.iter().zip(&self.kept) {
            for &t in kept {
                out.push((traj.steps[t].obs.clone(), traj.chunk_at(t)?, traj.steps[t].intervened));
            }
        }
        Ok(out)
    }

    pub fn interventions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::interventions).sum()
    }
}

/// Collects `n_traj` successful corrected trajectories, trying at most `3·n_traj` episodes.
pub fn collect_corrections(
    actor: &dyn Actor,
    spec: &TaskSpec,
    n_traj: usize,
    threshold: f64,
    prune_window: usize,
    seed: u64,
) -> Result<CorrectionSet> {
    let mut set = CorrectionSet { trajectories: Vec::new(), kept: Vec::new(), attempts: 0 };
    let max_attempts = n_traj * 3;
    while set.trajectories.len() < n_traj && set.attempts < max_attempts {
        let traj = corrected_episode(actor, spec, threshold, derive_seed(seed, set.attempts as u64))?;
        set.attempts += 1;
        if traj.success {
            let flags: Vec<bool> = traj.steps.iter().map(|s| s.intervened).collect();
            set.kept.push(prune_indices(&flags, prune_window));
            set.trajectories.push(traj);
        }
    }
    if set.trajectories.is_empty() && n_traj > 0 {
        return Err(GecoError::CollectionFailure(format!(
            "no successful {} trajectory in {} attempts",
            spec.kind, set.attempts
        )));
    }
    Ok(set)
}
