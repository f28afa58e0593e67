//! Analytic gradients of every network against central finite differences.

mod common;

use common::*;
use geco_core::geomoe::{adapt_loss, GeoMoe, Routing};
use geco_core::tinynn::{flatten, scalar_owner, Parameters};

#[test]
fn every_network_matches_finite_differences() {
    for c in gradient_checks() {
        println!("{}: {}", c.name, c.detail);
        assert!(c.pass, "{}: {}", c.name, c.detail);
    }
}

#[test]
fn identical_experts_give_no_gate_gradient_from_the_reconstruction_term() {
    let fx = AdaptFixture::new(9, 4);
    let batch = fx.batch();
    let mut moe = GeoMoe::new(&tiny_moe_arch(), tiny_arch().residual_width, Routing::Gated, 1).unwrap();
    randomize(&mut moe, 2, 0.6);
    let template = moe.expert(0).clone();
    for j in 1..moe.experts() {
        *moe.expert_mut(j) = template.clone();
    }
    let (_, grads) = adapt_loss(&moe, 0.0, &batch, &fx.draws).unwrap();
    let gate = flatten(grads.gate());
    let worst = gate.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst <= 1e-8, "gate gradient {worst:.3e}");
    // the experts themselves still receive a gradient
    let mut expert_norm = 0.0;
    grads.visit(&mut |name, _, data| {
        if name.starts_with("expert") {
            expert_norm += data.iter().map(|v| v * v).sum::<f64>();
        }
    });
    assert!(expert_norm > 0.0, "{}", scalar_owner(&grads, 0));
}
