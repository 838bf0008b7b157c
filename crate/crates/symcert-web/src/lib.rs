//! WebAssembly bindings for the browser demo. Each exported function takes
//! plain numbers or strings and returns a JSON document.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use symcert::experiments::{self, CoverageConfig};
use symcert::kl;
use symcert::worked_cases;

/// Samples one equality-task dataset and certifies its fresh-test score.
pub fn certify_equality_json(m: usize, n: usize, lambda: f64, delta: f64, seed: u64) -> Result<Value, String> {
    if m < 2 || n < 2 || lambda.is_nan() || lambda <= 0.0 || !(0.0..=1.0).contains(&delta) || delta == 0.0 {
        return Err("need m >= 2, n >= 2, lambda > 0 and delta in (0, 1]".into());
    }
    let p = experiments::equality_pipeline(m, m).map_err(|e| e.to_string())?;
    let cfg = CoverageConfig {
        m,
        m_test: m,
        n,
        lambda,
        delta,
        seed,
        ..CoverageConfig::default()
    };
    let o = experiments::coverage_trial(&p, &cfg, 0).map_err(|e| e.to_string())?;
    let rep = &o.report;
    let finite = |x: f64| if x.is_finite() { json!(x) } else { Value::Null };
    Ok(json!({
        "representative": rep.e_rep,
        "route": rep.route.map(|r| r.label()),
        "b_sharp": finite(rep.b_sharp),
        "budgets": {
            "CS": finite(rep.budgets.cs),
            "DEG": finite(rep.budgets.deg),
            "BD": finite(rep.budgets.bd),
            "ANOVA": finite(rep.budgets.anova),
            "BF": finite(rep.budgets.bf),
        },
        "b_ew": o.envelope.as_ref().map(|e| finite(e.b_ew)),
        "f_hat": o.f_hat,
        "ideal_score": finite(rep.ideal_score),
        "error": finite(o.error()),
        "covered": o.covered(),
        "edges": o.edges,
        "label": o.label,
    }))
}

/// Runs one worked collision-graph case and returns its graph and routes.
pub fn worked_case_json(name: &str) -> Result<Value, String> {
    let spec = worked_cases::cases()
        .into_iter()
        .find(|c| c.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| format!("unknown case {name:?}"))?;
    let built = worked_cases::build_case(&spec).map_err(|e| e.to_string())?;
    let rep = worked_cases::run_case(&spec).map_err(|e| e.to_string())?;
    let g = &built.graph;
    Ok(json!({
        "name": rep.name,
        "colors": g.colors,
        "edges": g.edges(),
        "test_edges": (0..g.n()).filter(|&i| g.test_edges[i]).collect::<Vec<_>>(),
        "lambdas": rep.lambdas,
        "routes": rep.routes.iter().map(|r| r.map(|r| r.label())).collect::<Vec<_>>(),
        "stable_route": rep.stable_route.map(|r| r.label()),
        "expected_route": rep.expected_route.label(),
        "b_rho": rep.b_rho,
    }))
}

/// KL upper envelope and its Bernstein relaxation.
pub fn kl_bound_json(n_eff: f64, q: f64, u: f64) -> Result<Value, String> {
    if n_eff.is_nan() || n_eff < 0.0 || !(0.0..=1.0).contains(&q) || u.is_nan() || u < 0.0 {
        return Err("need n_eff >= 0, q in [0, 1] and u >= 0".into());
    }
    Ok(json!({
        "kl_inverse": kl::kl_inverse(n_eff, q, u),
        "bernstein": kl::bernstein_relax(n_eff, q, u),
    }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn certify_equality(m: usize, n: usize, lambda: f64, delta: f64, seed: u32) -> Result<String, JsValue> {
    to_js(certify_equality_json(m, n, lambda, delta, u64::from(seed)))
}

#[wasm_bindgen]
pub fn worked_case(name: &str) -> Result<String, JsValue> {
    to_js(worked_case_json(name))
}

#[wasm_bindgen]
pub fn kl_bound(n_eff: f64, q: f64, u: f64) -> Result<String, JsValue> {
    to_js(kl_bound_json(n_eff, q, u))
}
