//! Brute-force oracles and fixtures shared by the integration tests.

#![allow(dead_code)]

use geco_core::experiment::ActionResidual;
use geco_core::geomfeat::{points_eigvals, GeomFeatures, SaliencyFormula};
use geco_core::geomoe::{adapt_loss, balance_loss, AdaptDraw, AdaptExample, GateRecord, GeoMoe, GroupedObs, MoeArch, Routing};
use geco_core::geoper::{priority, UtilizationState};
use geco_core::metrics::{n_nbt, EvalMatrix};
use geco_core::pointcloud::{fps_indices, knn_indices, Point3, PointCloud};
use geco_core::policy::{
    bc_loss, bc_loss_grads, perturbed, ActionChunk, BasePolicy, BcLog, Observation, PolicyArch, CHUNK_WIDTH,
};
use geco_core::tinynn::gradcheck::{check, rel_err, GradCheckReport};
use geco_core::tinynn::{flatten, softmax, zeros_like, Activation, Mlp, Parameters};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_points(seed: u64, n: usize) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
}

pub fn random_obs(seed: u64, n: usize, proprio: usize) -> Observation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(0.0..0.1)])
        .collect();
    let proprio = (0..proprio).map(|_| rng.random_range(-0.1..0.2)).collect();
    Observation { cloud: PointCloud::base(points), proprio }
}

fn d2(a: Point3, b: Point3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Farthest point sampling recomputing every distance from scratch; ties go to
/// the lowest index.
pub fn brute_fps(points: &[Point3], n: usize, start: usize) -> Vec<usize> {
    if points.len() <= n {
        return (0..points.len()).collect();
    }
    let mut sel = vec![start];
    while sel.len() < n {
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..points.len() {
            if sel.contains(&i) {
                continue;
            }
            let d = sel.iter().map(|&s| d2(points[i], points[s])).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        sel.push(best.unwrap());
    }
    sel
}

/// k nearest neighbours by exhaustive comparison sort, center first.
pub fn brute_knn(points: &[Point3], center: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).filter(|&i| i != center).collect();
    // insertion sort keeps the oracle independent of the library sort
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (idx[j - 1], idx[j]);
            let (da, db) = (d2(points[a], points[center]), d2(points[b], points[center]));
            if da > db || (da == db && a > b) {
                idx.swap(j - 1, j);
                j -= 1;
            } else {
                break;
            }
        }
    }
    std::iter::once(center).chain(idx).take(k).collect()
}

/// Cyclic Jacobi rotations on a symmetric 3×3 matrix; eigenvalues sorted descending.
pub fn jacobi_eigvals(mut a: [[f64; 3]; 3]) -> [f64; 3] {
    for _ in 0..100 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        if off < 1e-30 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut r = [[0.0; 3]; 3];
            for (i, row) in r.iter_mut().enumerate() {
                row[i] = 1.0;
            }
            r[p][p] = c;
            r[q][q] = c;
            r[p][q] = s;
            r[q][p] = -s;
            // a ← rᵀ a r
            let mut ar = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    ar[i][j] = (0..3).map(|k| a[i][k] * r[k][j]).sum();
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    a[i][j] = (0..3).map(|k| r[k][i] * ar[k][j]).sum();
                }
            }
        }
    }
    let mut ev = [a[0][0], a[1][1], a[2][2]];
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

pub fn covariance_matrix(points: &[Point3]) -> [[f64; 3]; 3] {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k] / n;
        }
    }
    let mut m = [[0.0; 3]; 3];
    for p in points {
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += (p[i] - c[i]) * (p[j] - c[j]) / n;
            }
        }
    }
    m
}

/// One named numeric oracle check.
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn tol_check(name: &'static str, err: f64, tol: f64) -> Check {
    Check { name, pass: err <= tol, detail: format!("err {err:.3e} (tol {tol:.0e})") }
}

/// Every closed-form numeric oracle, each at its own tolerance.
pub fn numeric_oracles() -> Vec<Check> {
    let mut out = Vec::new();

    let line: Vec<Point3> = (0..10).map(|i| [0.1 * i as f64, 0.05 * i as f64, -0.02 * i as f64]).collect();
    let f = GeomFeatures::from_eigvals(points_eigvals(&line).unwrap(), SaliencyFormula::default());
    out.push(tol_check("line linearity", (f.linearity - 1.0).abs(), 1e-6));

    // square grid spanned by two orthonormal tilted axes, so λ1 = λ2 and λ3 = 0
    let (a, b) = ([1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt(), 0.0], [1.0 / 3f64.sqrt(), -1.0 / 3f64.sqrt(), 1.0 / 3f64.sqrt()]);
    let mut plane = Vec::new();
    for i in 0..5 {
        for j in 0..5 {
            let (u, v) = (0.02 * i as f64, 0.02 * j as f64);
            plane.push([0, 1, 2].map(|k| 0.5 + u * a[k] + v * b[k]));
        }
    }
    let f = GeomFeatures::from_eigvals(points_eigvals(&plane).unwrap(), SaliencyFormula::default());
    out.push(tol_check("plane planarity", (f.planarity - 1.0).abs(), 1e-6));

    // Geo-PER priorities against hand sums Σ W_j / (u_j + ε).
    let eps = 1e-6;
    let u = [0.9, 0.1];
    let p1 = priority(&[1.0, 0.0], &u, eps);
    let p2 = priority(&[0.0, 1.0], &u, eps);
    let expected = (0.9 + eps) / (0.1 + eps);
    out.push(tol_check("priority ratio", (p2 / p1 - expected).abs() / expected, 1e-9));
    let mixed = priority(&[0.25, 0.75], &[0.5, 0.25], eps);
    out.push(tol_check("priority mixed", (mixed - (0.25 / (0.5 + eps) + 0.75 / (0.25 + eps))).abs(), 1e-9));

    // N-NBT on a hand-evaluated three-task matrix.
    let m = EvalMatrix::from_rows(
        vec!["a".into(), "b".into(), "c".into()],
        10,
        &[vec![0.8], vec![0.6, 0.5], vec![0.4, 0.25, 0.9]],
    )
    .unwrap();
    let n0 = n_nbt(&m, 0).unwrap();
    let n1 = n_nbt(&m, 1).unwrap();
    let hand0 = -((0.6 - 0.8) / 0.8 + (0.4 - 0.8) / 0.8) / 2.0;
    let hand1 = -(0.25 - 0.5) / 0.5;
    out.push(tol_check("n-nbt", (n0 - hand0).abs().max((n1 - hand1).abs()), 1e-12));

    // Utilization EMA with coefficient 0.4 over three batch means.
    let mut state = UtilizationState::new(0.4, eps);
    let batches = [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
    let mut hand: Option<[f64; 2]> = None;
    let mut ema_err: f64 = 0.0;
    for b in batches {
        let got = state.update(&[GateRecord { weights: vec![b.to_vec()] }]).unwrap().to_vec();
        let h = match hand {
            None => b,
            Some(p) => [0.4 * b[0] + 0.6 * p[0], 0.4 * b[1] + 0.6 * p[1]],
        };
        hand = Some(h);
        ema_err = ema_err.max((got[0] - h[0]).abs()).max((got[1] - h[1]).abs());
    }
    let log = BcLog { losses: vec![1.0, 0.5, 0.25] };
    let e = log.ema(0.1);
    ema_err = ema_err.max((e[2] - (0.1 * 0.25 + 0.9 * (0.1 * 0.5 + 0.9 * 1.0))).abs());
    out.push(tol_check("ema", ema_err, 1e-9));

    let s = softmax(&[1.0, 2.0, 3.0]);
    let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    let sm_err = (0..3).map(|i| (s[i] - ((i + 1) as f64).exp() / z).abs()).fold(0.0, f64::max);
    out.push(tol_check("softmax", sm_err, 1e-9));

    // Two groups route to expert 0, one to expert 1: f = (2/3, 1/3, 0).
    let w = vec![vec![0.6, 0.3, 0.1], vec![0.5, 0.2, 0.3], vec![0.2, 0.7, 0.1]];
    let p = [1.3 / 3.0, 1.2 / 3.0, 0.5 / 3.0];
    let hand = 3.0 * (2.0 / 3.0 * p[0] + 1.0 / 3.0 * p[1]);
    out.push(tol_check("balance loss", (balance_loss(&w).unwrap() - hand).abs(), 1e-9));

    let mut mismatches = 0;
    for seed in 0..50u64 {
        let n = 8 + (seed as usize * 7) % 57;
        let pts = random_points(seed, n);
        let budget = 1 + (seed as usize * 5) % n;
        let start = (seed as usize * 11) % n;
        if fps_indices(&pts, budget, start).unwrap() != brute_fps(&pts, budget, start) {
            mismatches += 1;
        }
        for c in [0, n / 2, n - 1] {
            let k = 1 + (seed as usize + c) % n;
            if knn_indices(&pts, c, k) != brute_knn(&pts, c, k) {
                mismatches += 1;
            }
        }
    }
    out.push(Check { name: "fps/knn brute force", pass: mismatches == 0, detail: format!("{mismatches} mismatches over 50 seeds") });

    out
}

/// Small policy architecture used by the gradient and sampling fixtures.
pub fn tiny_arch() -> PolicyArch {
    PolicyArch {
        point_budget: 8,
        point_hidden: vec![5, 4],
        feature_width: 6,
        residual_width: 3,
        head_hidden: vec![12],
        ..PolicyArch::default()
    }
}

pub fn tiny_moe_arch() -> MoeArch {
    MoeArch { groups: 3, group_size: 4, embed_hidden: vec![5], expert_hidden: vec![4], gate_hidden: vec![3], ..MoeArch::default() }
}

/// Replaces every parameter with a seeded value in ±`scale`.
pub fn randomize<P: Parameters + ?Sized>(p: &mut P, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.visit_mut(&mut |_, data| data.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale)));
}

pub fn random_vec(seed: u64, n: usize, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

fn grad_check(name: &'static str, report: GradCheckReport) -> Check {
    Check {
        name,
        pass: report.passes(FD_TOL),
        detail: format!("{} params, max rel err {:.2e} at {}", report.checked, report.max_rel_err, report.worst),
    }
}

fn mlp_check(name: &'static str, hidden: Activation, output: Activation) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = Mlp::new(&[5, 7, 6, 3], hidden, output, &mut rng).unwrap();
    let rows = 4;
    let x = random_vec(12, 5 * rows, 1.0);
    let weights = random_vec(13, 3 * rows, 1.0);
    let loss = |m: &Mlp| m.forward_batch(&x, rows).unwrap().iter().zip(&weights).map(|(o, w)| o * w).sum::<f64>();
    let tape = net.forward_tape(&x, rows).unwrap();
    let mut grads = zeros_like(&net);
    net.backward_params(&tape, &weights, &mut grads).unwrap();
    grad_check(name, check(&net, &grads, loss, FD_STEP, 1))
}

/// Fixed adaptation batch: a policy head, per-example features, grouped
/// observations, target chunks and diffusion draws.
pub struct AdaptFixture {
    pub policy: BasePolicy,
    pub features: Vec<Vec<f64>>,
    pub grouped: Vec<GroupedObs>,
    pub chunks: Vec<Vec<f64>>,
    pub draws: Vec<AdaptDraw>,
}

impl AdaptFixture {
    pub fn new(seed: u64, examples: usize) -> Self {
        let arch = tiny_arch();
        let policy = BasePolicy::init(&arch, seed).unwrap();
        let moe_arch = tiny_moe_arch();
        let mut features = Vec::new();
        let mut grouped = Vec::new();
        let mut chunks = Vec::new();
        let mut draws = Vec::new();
        for i in 0..examples as u64 {
            let obs = random_obs(seed * 100 + i, arch.point_budget, arch.proprio_dim);
            features.push(policy.encode(&obs).unwrap());
            grouped.push(GroupedObs::build(&obs.cloud, &moe_arch).unwrap());
            chunks.push(random_vec(seed * 100 + 50 + i, CHUNK_WIDTH, 1.0));
            draws.push(AdaptDraw { step: (i as usize * 3 + 1) % arch.denoise_steps, noise: random_vec(seed * 100 + 80 + i, CHUNK_WIDTH, 1.5) });
        }
        Self { policy, features, grouped, chunks, draws }
    }

    pub fn batch(&self) -> Vec<AdaptExample<'_>> {
        (0..self.features.len())
            .map(|i| AdaptExample {
                head: self.policy.head(),
                feature: &self.features[i],
                grouped: &self.grouped[i],
                chunk: &self.chunks[i],
            })
            .collect()
    }
}

fn adapt_check(name: &'static str, routing: Routing, balance_weight: f64) -> Check {
    let fx = AdaptFixture::new(3, 3);
    let batch = fx.batch();
    let mut moe = GeoMoe::new(&tiny_moe_arch(), tiny_arch().residual_width, routing, 4).unwrap();
    randomize(&mut moe, 5, 0.6);
    let (_, grads) = adapt_loss(&moe, balance_weight, &batch, &fx.draws).unwrap();
    let loss = |m: &GeoMoe| adapt_loss(m, balance_weight, &batch, &fx.draws).unwrap().0.total;
    grad_check(name, check(&moe, &grads, loss, FD_STEP, 1))
}

fn bc_check() -> Check {
    let arch = tiny_arch();
    let policy = BasePolicy::init(&arch, 21).unwrap();
    let data: Vec<(Observation, ActionChunk)> = (0..3)
        .map(|i| {
            let obs = random_obs(30 + i, arch.point_budget, arch.proprio_dim);
            (obs, ActionChunk::from_flat_clamped(&random_vec(40 + i, CHUNK_WIDTH, 1.0)).unwrap())
        })
        .collect();
    let batch: Vec<&(Observation, ActionChunk)> = data.iter().collect();
    let ks = [0, 4, 9];
    let noises = random_vec(50, 3 * CHUNK_WIDTH, 1.5);
    let (_, enc, head) = bc_loss_grads(&policy, &batch, &ks, &noises).unwrap();
    let mut analytic = flatten(&enc);
    analytic.extend(flatten(&head));
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: String::new(), worst_analytic: 0.0, worst_numeric: 0.0 };
    let mut current = Vec::new();
    policy.visit_params(&mut |_, _, data| current.extend_from_slice(data));
    for (i, (&g, &v)) in analytic.iter().zip(&current).enumerate() {
        let up = bc_loss(&perturbed(&policy, i, v + FD_STEP), &batch, &ks, &noises).unwrap();
        let down = bc_loss(&perturbed(&policy, i, v - FD_STEP), &batch, &ks, &noises).unwrap();
        let numeric = (up - down) / (2.0 * FD_STEP);
        let e = rel_err(g, numeric);
        report.checked += 1;
        if e > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = e;
            report.worst = format!("param {i}");
        }
    }
    grad_check("policy bc loss (encoder + head)", report)
}

fn action_residual_check() -> Check {
    let mut net = ActionResidual::new(6, 5, 7).unwrap();
    randomize(&mut net, 8, 0.5);
    let rows: Vec<[Vec<f64>; 3]> =
        (0..3).map(|i| [random_vec(60 + i, 6, 1.0), random_vec(70 + i, CHUNK_WIDTH, 1.0), random_vec(80 + i, CHUNK_WIDTH, 1.0)]).collect();
    let batch: Vec<(&[f64], &[f64], &[f64])> = rows.iter().map(|[f, b, t]| (&f[..], &b[..], &t[..])).collect();
    let (_, grads) = net.loss(&batch).unwrap();
    let loss = |m: &ActionResidual| {
        let per = m.loss(&batch).unwrap().0;
        per.iter().sum::<f64>() / per.len() as f64
    };
    grad_check("action residual", check(&net, &grads, loss, FD_STEP, 1))
}

/// Central-difference checks of every trainable network.
pub fn gradient_checks() -> Vec<Check> {
    vec![
        mlp_check("mlp relu", Activation::Relu, Activation::Identity),
        mlp_check("mlp tanh", Activation::Tanh, Activation::Tanh),
        bc_check(),
        adapt_check("geomoe adapt loss (gated)", Routing::Gated, 0.5),
        adapt_check("geomoe adapt loss (dense)", Routing::Dense, 0.0),
        action_residual_check(),
    ]
}
