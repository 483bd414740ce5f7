//! Serde helpers that write floats with 9 significant digits, so JSON
//! exports are identical across platforms and between the CLI and service.

use serde::Serializer;

pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

pub fn sig9<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round_sig9(*x))
}

pub fn sig9_opt<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match x {
        Some(v) => s.serialize_some(&round_sig9(*v)),
        None => s.serialize_none(),
    }
}
