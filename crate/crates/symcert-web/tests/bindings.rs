//! The JSON documents behind the browser demo.

use symcert_web::{certify_equality_json, kl_bound_json, worked_case_json};

#[test]
fn certificate_document() {
    let v = certify_equality_json(40, 96, 0.05, 0.1, 3).unwrap();
    assert_eq!(v["representative"], true);
    assert!(v["b_sharp"].as_f64().unwrap() > 0.0);
    assert_eq!(v["covered"], true);
    assert!(certify_equality_json(1, 96, 0.05, 0.1, 3).is_err());
}

#[test]
fn worked_case_document() {
    let v = worked_case_json("c2").unwrap();
    assert_eq!(v["name"], "C2");
    assert_eq!(v["edges"].as_array().unwrap().len(), 50);
    assert_eq!(v["stable_route"], "DEG");
    assert!(worked_case_json("C9").is_err());
}

#[test]
fn kl_document() {
    let v = kl_bound_json(100.0, 0.1, 2.0).unwrap();
    let (a, b) = (v["kl_inverse"].as_f64().unwrap(), v["bernstein"].as_f64().unwrap());
    assert!(a > 0.1 && b >= a);
    assert!(kl_bound_json(10.0, 1.5, 1.0).is_err());
}
