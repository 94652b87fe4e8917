#![allow(dead_code)]

use sssc_core::NetworkCase;

pub const MACHINE: &str = r#"{"M": 0.125, "D": 0.0, "xd": 0.146, "xq": 0.0969, "xdp": 0.0608, "xqp": 0.0969,
    "td0p": 8.96, "tq0p": 0.31, "rs": 0.0, "omega_s": 376.99111843077515}"#;
pub const EXCITER: &str = r#"{"ka": 20.0, "ta": 0.2, "ke": 1.0, "te": 0.314, "kf": 0.063, "tf": 0.35, "ae": 0.0039, "be": 1.555}"#;

/// One machine feeding a constant-power load over one line.
pub fn two_bus_json(pl: f64, ql: f64) -> String {
    format!(
        r#"{{
  "base_mva": 100.0,
  "buses": [
    {{"id": 1, "kind": "generator", "pl": 0.0, "ql": 0.0, "vmin": 0.9, "vmax": 1.1, "angle_reference": true}},
    {{"id": 2, "kind": "load", "pl": {pl}, "ql": {ql}, "vmin": 0.9, "vmax": 1.1}}
  ],
  "lines": [
    {{"from": 1, "to": 2, "series_admittance": {{"re": 1.0, "im": -10.0}}, "shunt_admittance_half": {{"re": 0.0, "im": 0.0}}, "imax": 3.0}}
  ],
  "generators": [
    {{"bus": 1, "cost": {{"a2": 0.001, "a1": 10.0, "a0": 0.0}},
     "limits": {{"pmin": 0.0, "pmax": 2.0, "qmin": -2.0, "qmax": 2.0}},
     "machine": {MACHINE}, "exciter": {EXCITER}}}
  ]
}}"#
    )
}

pub fn two_bus(pl: f64, ql: f64) -> NetworkCase {
    NetworkCase::from_json_str(&two_bus_json(pl, ql)).unwrap()
}

pub fn wscc9() -> NetworkCase {
    sssc_core::case::bundled_case("wscc9").unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
