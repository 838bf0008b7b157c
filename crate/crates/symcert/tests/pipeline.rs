//! End-to-end behavior of the composed pipeline.

use symcert::edge_wedge;
use symcert::experiments::{coverage_trial, equality_pipeline, CoverageConfig};
use symcert::prompting::{estimate_h, PatternChannel, Stencil, TransformerPrompt};
use symcert::task::{Alphabet, SubstitutionScheme, TemplateFamily};
use symcert::transformer::{Activation, AttnConfig};
use symcert::worked_cases;

#[test]
fn trials_are_reproducible() {
    let p = equality_pipeline(40, 40).unwrap();
    let cfg = CoverageConfig::default();
    let a = coverage_trial(&p, &cfg, 17).unwrap();
    let b = coverage_trial(&p, &cfg, 17).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn envelope_grows_with_level() {
    let p = equality_pipeline(40, 40).unwrap();
    let sizes = [48, 48];
    let mut last = 0.0;
    for v in [0.5, 1.0, 2.0, 4.0, 8.0] {
        let env = edge_wedge::envelope(&p.models[0], &p.edge_wedge, &sizes, 0, &p.y_r, 0.05, 0.1, v).unwrap();
        assert!(env.a_0 <= env.a_op && env.a_0 <= env.a_ew);
        assert!(env.b_ew >= last);
        last = env.b_ew;
    }
}

#[test]
fn worked_case_proxies() {
    for rep in worked_cases::run_all().unwrap() {
        assert!(rep.b_rho_matches(), "{}: {}", rep.name, rep.b_rho);
    }
}

#[test]
fn transformer_prompt_passes_gate_and_matches_richer_stencil() {
    let fam = TemplateFamily::equality();
    let scheme = SubstitutionScheme::uniform(Alphabet::ranges(1, 6, 0, 6));
    let prompt = TransformerPrompt {
        cfg: AttnConfig {
            beta: 0.5,
            gamma: 0.5,
            activation: Activation::Relu,
        },
        cls: 0,
        samples: 2000,
        order: 20,
        seed: 3,
    };
    let channel = PatternChannel { noise: 0.0 };
    let central = estimate_h(&prompt, &fam, &scheme, &channel, 1e-3, 4, Stencil::Central, 5).unwrap();
    let five = estimate_h(&prompt, &fam, &scheme, &channel, 1e-3, 4, Stencil::FivePoint, 5).unwrap();
    assert!(central.gate_gap <= 1e-12);
    assert!((&central.h - &five.h).amax() <= 1e-5, "{} vs {}", central.h, five.h);
    // the abstraction channel adds signal, so the direction is nonzero
    assert!(central.h.amax() > 0.0);
}
