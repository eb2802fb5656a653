#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use wselect::energy_model::DEFAULT_TRACE_LEN;
use wselect::qnn::{load_model, Dataset, QuantizedNetwork, Split};
use wselect::scheduler::{profile_network, NetworkProfile};
use wselect::transitions::CollectConfig;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn model() -> QuantizedNetwork {
    load_model(&fixture("desk_model.json")).unwrap()
}

pub fn calib() -> Dataset {
    Dataset::load(&fixture("calib.bin"), Split::Calibration).unwrap()
}

pub fn val() -> Dataset {
    Dataset::load(&fixture("val.bin"), Split::Validation).unwrap()
}

pub fn profile(net: &QuantizedNetwork, seed: u64) -> NetworkProfile {
    profile_network(net, &calib(), &CollectConfig::default(), DEFAULT_TRACE_LEN, seed).unwrap()
}

/// Seed-0 profile of the bundled model, shared by the tests of one binary.
pub fn profile0() -> &'static NetworkProfile {
    static P: OnceLock<NetworkProfile> = OnceLock::new();
    P.get_or_init(|| profile(&model(), 0))
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
