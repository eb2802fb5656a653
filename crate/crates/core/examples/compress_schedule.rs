//! Profiles the bundled model, runs the energy-prioritized layer-wise
//! schedule and, for comparison, uniform global compression and the naive
//! lowest-power set at one matched configuration.
//!
//! Run: cargo run --release -p wselect --example compress_schedule -- [delta] [prune] [size] [model.json calib.bin val.bin]

use std::path::PathBuf;
use std::time::Instant;

use wselect::energy_model::DEFAULT_TRACE_LEN;
use wselect::qnn::{load_model, Dataset, Split};
use wselect::scheduler::{
    compress_network, default_grid, global_compress_baseline, profile_network, CompressionConfig,
    CompressionReport, ScheduleParams,
};
use wselect::transitions::CollectConfig;

fn summary(name: &str, r: &CompressionReport) {
    println!(
        "{name:<10} acc0 {:.4} final {:.4} saving {:5.1}%",
        r.acc0,
        r.final_accuracy,
        100.0 * r.saving_pct
    );
    for l in &r.layers {
        println!(
            "    layer {} rho {:.3} {:?} {:?} E {:.3e} -> {:.3e} acc {:.4} set {:?}",
            l.layer_index,
            l.rho,
            l.status,
            l.chosen.map(|c| (c.prune_ratio, c.set_size)),
            l.e_before,
            l.e_after,
            l.acc_after,
            l.candidate_set.as_ref().map(|s| s.values.len())
        );
    }
}

fn main() -> wselect::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let delta: f64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(0.03);
    let prune: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let size: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(16);
    let fx = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let path = |i: usize, def: &str| args.get(i).map(PathBuf::from).unwrap_or(fx.join(def));
    let net = load_model(&path(3, "desk_model.json"))?;
    let calib = Dataset::load(&path(4, "calib.bin"), Split::Calibration)?;
    let val = Dataset::load(&path(5, "val.bin"), Split::Validation)?;
    let params = ScheduleParams { delta, ..Default::default() };

    let t0 = Instant::now();
    let profile = profile_network(&net, &calib, &CollectConfig::default(), DEFAULT_TRACE_LEN, 0)?;
    println!("profiled in {:.1?}", t0.elapsed());

    let mut lw = net.clone();
    let r = compress_network(&mut lw, &profile, &calib, &val, &params, &default_grid())?;
    r.check_invariants()?;
    summary("layerwise", &r);
    println!("  [{:.1?}]", t0.elapsed());

    let matched = CompressionConfig { prune_ratio: prune, set_size: size };
    let mut lw1 = net.clone();
    let wide = ScheduleParams { delta: 0.5, ..params };
    let r = compress_network(&mut lw1, &profile, &calib, &val, &wide, &[matched])?;
    summary("lw-match", &r);
    let mut gl = net.clone();
    let r = global_compress_baseline(&mut gl, &profile, &calib, &val, &params, matched, 0.5)?;
    summary("global", &r);
    let mut nv = net.clone();
    let naive = CompressionConfig { prune_ratio: 0.0, set_size: size };
    let r = global_compress_baseline(&mut nv, &profile, &calib, &val, &params, naive, 0.0)?;
    summary("naive", &r);
    println!("  [{:.1?}]", t0.elapsed());
    Ok(())
}
