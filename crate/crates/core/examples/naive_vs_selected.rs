//! Restricts every conv layer to 16 values, once through the per-layer
//! selection (highest energy share first) and once with the naive
//! network-wide set of the 16 lowest-power weights, for several profile seeds.
//!
//! Run: cargo run --release -p wselect --example naive_vs_selected -- [seeds] [delta] [--fast] [model.json calib.bin val.bin]

use std::path::PathBuf;
use std::time::Instant;

use wselect::energy_model::DEFAULT_TRACE_LEN;
use wselect::qnn::{load_model, Dataset, Split};
use wselect::scheduler::{compress_network, global_compress_baseline, profile_network, CompressionConfig, ScheduleParams};
use wselect::selection::SelectionParams;
use wselect::transitions::CollectConfig;

fn main() -> wselect::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let fast = args.iter().any(|a| a == "--fast");
    let rest: Vec<&String> = args.iter().filter(|a| !a.starts_with("--")).collect();
    let seeds: u64 = rest.first().and_then(|s| s.parse().ok()).unwrap_or(1);
    let delta: f64 = rest.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let fx = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let path = |i: usize, def: &str| rest.get(i).map(PathBuf::from).unwrap_or(fx.join(def));
    let net = load_model(&path(2, "desk_model.json"))?;
    let calib = Dataset::load(&path(3, "calib.bin"), Split::Calibration)?;
    let val = Dataset::load(&path(4, "val.bin"), Split::Validation)?;

    let params = ScheduleParams {
        delta,
        selection: SelectionParams { fast, ..Default::default() },
        ..Default::default()
    };
    let sixteen = CompressionConfig { prune_ratio: 0.0, set_size: 16 };
    for seed in 0..seeds {
        let t0 = Instant::now();
        let profile = profile_network(&net, &calib, &CollectConfig::default(), DEFAULT_TRACE_LEN, seed)?;
        let t_prof = t0.elapsed();
        let mut sel = net.clone();
        let r = compress_network(&mut sel, &profile, &calib, &val, &params, &[sixteen])?;
        let sizes: Vec<usize> = r
            .layers
            .iter()
            .map(|l| l.candidate_set.as_ref().map_or(256, |s| s.values.len()))
            .collect();
        let mut nv = net.clone();
        let n = global_compress_baseline(&mut nv, &profile, &calib, &val, &params, sixteen, 0.0)?;
        println!(
            "seed {seed}: acc0 {:.4} selected {:.4} (sizes {:?}, saving {:.1}%) naive {:.4} (saving {:.1}%) [profile {:.1?}, total {:.1?}]",
            r.acc0,
            r.final_accuracy,
            sizes,
            100.0 * r.saving_pct,
            n.final_accuracy,
            100.0 * n.saving_pct,
            t_prof,
            t0.elapsed()
        );
    }
    Ok(())
}
