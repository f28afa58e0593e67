//! End-to-end behaviour of the policy, environment suite, features and config.

mod common;

use common::*;
use geco_core::config::{ExperimentConfig, Method, ReplayKind};
use geco_core::envsuite::{drop_points, expert_episode, EnvState, GeometryClass, TaskKind, TaskSpec};
use geco_core::experiment::Adapter;
use geco_core::geomoe::GroupedObs;
use geco_core::pointcloud::Point3;
use geco_core::policy::{train_bc, ActionChunk, BasePolicy, BcConfig, DiffusionHead, Observation, PolicyArch, CHUNK_WIDTH};
use geco_core::tinynn::fill;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn memorising_arch() -> PolicyArch {
    PolicyArch { point_budget: 16, ..PolicyArch::default() }
}

const TARGET: [f64; 4] = [0.4, -0.2, 0.1, 0.5];

fn bc_cfg() -> BcConfig {
    BcConfig { steps: 2000, batch_size: 32, lr: 3e-3, cosine_decay: true }
}

/// Mean of each action dimension over `samples` sampled chunks.
fn sampled_means(policy: &BasePolicy, data: &[(Observation, ActionChunk)], samples: usize) -> [f64; 4] {
    let mut sums = [0.0; 4];
    for s in 0..samples {
        let chunk = policy.act(&data[s % data.len()].0, None, s as u64).unwrap();
        for (d, sum) in sums.iter_mut().enumerate() {
            *sum += chunk.flat().chunks(4).map(|a| a[d]).sum::<f64>() / 8.0;
        }
    }
    sums.map(|s| s / samples as f64)
}

#[test]
fn single_example_dataset_is_memorised() {
    let arch = memorising_arch();
    let data = vec![(random_obs(5, arch.point_budget, arch.proprio_dim), ActionChunk::constant(TARGET).unwrap())];
    let (policy, log) = train_bc(&data, &arch, &bc_cfg(), 1, 2).unwrap();
    assert!(policy.is_frozen());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (head, tail) = (mean(&log.losses[..10]), mean(&log.losses[log.losses.len() - 100..]));
    // The k = 0 term keeps the summed loss well above zero; see the decisions ledger.
    assert!(tail < head / 4.0, "loss {head} -> {tail}");

    let ema = log.ema(0.05);
    assert!(ema[199] < ema[0], "ema over the first 200 steps: {} -> {}", ema[0], ema[199]);

    for (d, m) in sampled_means(&policy, &data, 50).iter().enumerate() {
        assert!((m - TARGET[d]).abs() < 0.05, "dim {d}: mean {m} vs {}", TARGET[d]);
    }
}

#[test]
fn constant_action_dataset_samples_its_mean() {
    let arch = memorising_arch();
    let data: Vec<(Observation, ActionChunk)> = (0..4)
        .map(|i| (random_obs(10 + i, arch.point_budget, arch.proprio_dim), ActionChunk::constant(TARGET).unwrap()))
        .collect();
    let (policy, _) = train_bc(&data, &arch, &bc_cfg(), 3, 4).unwrap();
    for (d, m) in sampled_means(&policy, &data, 200).iter().enumerate() {
        assert!((m - TARGET[d]).abs() < 0.05, "dim {d}: mean {m} vs {}", TARGET[d]);
    }
}

#[test]
fn zero_noise_predictor_follows_the_hand_recursion() {
    let arch = tiny_arch();
    let policy = BasePolicy::init(&arch, 0).unwrap();
    let mut net = policy.head().net().clone();
    fill(&mut net, 0.0);
    let sched = policy.head().schedule().clone();
    let head = DiffusionHead::from_net(net, sched.clone(), arch.feature_width, arch.residual_width).unwrap();
    let feature = vec![0.3; arch.feature_width];
    let got = head.sample_chunk(&feature, None, 77).unwrap().flat();

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut x: Vec<f64> = (0..CHUNK_WIDTH).map(|_| StandardNormal.sample(&mut rng)).collect();
    for k in (0..sched.betas.len()).rev() {
        for v in x.iter_mut() {
            *v /= sched.alphas[k].sqrt();
        }
        if k > 0 {
            let sigma = ((1.0 - sched.alpha_bars[k - 1]) / (1.0 - sched.alpha_bars[k]) * sched.betas[k]).sqrt();
            for v in x.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * z;
            }
        }
    }
    for (a, b) in got.iter().zip(&x) {
        assert!((a - b.clamp(-1.0, 1.0)).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn dropout_keeps_the_expected_share() {
    let n = 256;
    let (p, keep) = (0.3, 0.7);
    let sd = (n as f64 * p * keep).sqrt();
    for seed in 0..20u64 {
        let mut pts: Vec<Point3> = random_points(seed, n);
        drop_points(&mut pts, p, &mut ChaCha8Rng::seed_from_u64(seed));
        let left = pts.len() as f64;
        assert!((left - n as f64 * keep).abs() <= 3.0 * sd, "seed {seed}: kept {left}");
    }
}

#[test]
fn expert_solves_every_task_in_both_domains() {
    for kind in TaskKind::ALL {
        for spec in [TaskSpec::sim(kind, 64), TaskSpec::real(kind, 64)] {
            let solved = (0..50u64).filter(|&s| expert_episode(&spec, s).unwrap().success).count();
            assert_eq!(solved, 50, "{kind} {:?}", spec.domain);
        }
    }
}

fn mean_shape(kind: TaskKind) -> (f64, f64) {
    let cfg = ExperimentConfig::desk();
    let spec = TaskSpec::sim(kind, cfg.policy.point_budget);
    let (mut lin, mut pla, mut n) = (0.0, 0.0, 0.0);
    for s in 0..20u64 {
        let obs = EnvState::reset(&spec, s).observe().unwrap();
        let g = GroupedObs::build(&obs.cloud, &cfg.moe).unwrap();
        for f in &g.geometry {
            lin += f.linearity;
            pla += f.planarity;
            n += 1.0;
        }
    }
    (lin / n, pla / n)
}

#[test]
fn cuboids_look_planar_and_curved_objects_linear() {
    for kind in TaskKind::ALL {
        let (lin, pla) = mean_shape(kind);
        match kind.geometry() {
            GeometryClass::Cuboid => assert!(pla > lin, "{kind}: planarity {pla} linearity {lin}"),
            GeometryClass::Curved => assert!(lin > pla, "{kind}: planarity {pla} linearity {lin}"),
            GeometryClass::Peg => {}
        }
    }
}

#[test]
fn dumped_default_config_lists_the_headline_values() {
    let text = ExperimentConfig::default().to_toml().unwrap();
    for line in [
        "lr = 3e-4",
        "lr = 1e-3",
        "denoise_steps = 10",
        "chunk_len = 8",
        "exponent = 0.6",
        "epsilon = 1e-6",
        "ema = 0.4",
        "replay_percent = 10",
        "correction_percent = 95",
    ] {
        assert!(text.lines().any(|l| l == line), "missing {line:?} in\n{text}");
    }
}

#[test]
fn baseline_wiring() {
    let cfg = ExperimentConfig::desk();
    assert!(matches!(Adapter::for_method(Method::DirectDeploy, &cfg, 0).unwrap(), Adapter::None));
    assert_eq!(Method::NaiveFinetune.replay(), ReplayKind::None);
    assert_eq!(Method::GeomoeGeoper.replay(), ReplayKind::Geometric);
    assert_eq!(Method::GeomoePer.replay(), ReplayKind::Loss);
    assert!(matches!(Adapter::for_method(Method::ActionResidual, &cfg, 0).unwrap(), Adapter::Action(_)));
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
    }
}

#[test]
fn partial_config_file_layers_over_a_profile() {
    let base = ExperimentConfig::desk();
    let c = ExperimentConfig::from_toml_over(&base, "[bc]\nsteps = 500\n[experiment]\nseed = 4\n").unwrap();
    assert_eq!(c.bc.steps, 500);
    assert_eq!(c.experiment.seed, 4);
    assert_eq!(c.policy, base.policy);
    let e = ExperimentConfig::from_toml_over(&base, "[bc]\nstepz = 1\n").unwrap_err().to_string();
    assert!(e.contains("bc.stepz"), "{e}");
    let e = ExperimentConfig::from_toml_over(&base, "[experiment]\ntasks = [\"cuboid-reach\", \"torus\"]\n").unwrap_err();
    assert!(e.to_string().contains("experiment.tasks"), "{e}");
}
