//! Restricts each conv layer of the bundled model to a small weight set
//! (initial set plus greedy elimination) and compares the result against
//! the naive lowest-power set of the same size.
//!
//! Run: cargo run --release -p wselect --example select_weights -- [k_target] [delta] [--fast]

use std::path::PathBuf;
use std::time::Instant;

use wselect::energy_model::{build_power_table, ArrayConfig, DEFAULT_TRACE_LEN};
use wselect::qnn::{load_model, Dataset, Split};
use wselect::selection::{naive_lowest_power, select_layer, LayerContext, SelectionParams};
use wselect::transitions::{collect_stats, CollectConfig};

fn main() -> wselect::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let fast = args.iter().any(|a| a == "--fast");
    let nums: Vec<&String> = args.iter().filter(|a| !a.starts_with("--")).collect();
    let k_target: usize = nums.first().and_then(|s| s.parse().ok()).unwrap_or(16);
    let delta: f64 = nums.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.03);

    let fx = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let net = load_model(&fx.join("desk_model.json"))?;
    let calib = Dataset::load(&fx.join("calib.bin"), Split::Calibration)?;
    let val = Dataset::load(&fx.join("val.bin"), Split::Validation)?;
    let cfg = ArrayConfig::default();
    let params = SelectionParams { k_target, delta, fast, ..Default::default() };

    for &li in &net.conv_indices() {
        let t0 = Instant::now();
        let stats = collect_stats(&net, &calib, li, &CollectConfig::default())?;
        let table = build_power_table(&stats, DEFAULT_TRACE_LEN, 1)?;
        let mut ctx = LayerContext::new(&net, li, &table, &calib, &val, &cfg)?;
        let out = select_layer(&mut ctx, &params, None)?;
        let naive = naive_lowest_power(&table.power, k_target);
        let naive_acc = ctx.accuracy(&naive)?;
        let naive_e = ctx.energy(&naive)?;
        let accepted = out.log.iter().filter(|r| r.accepted).count();
        println!(
            "layer {li}: acc0 {:.4} init |{}| {:.4} -> |{}| {:.4} ({} removals, {} log) E {:.3e} -> {:.3e} -> {:.3e} | naive {:.4} E {:.3e} [{:.1?}]",
            out.acc0,
            out.initial_size,
            out.initial_acc,
            out.set.len(),
            out.final_acc,
            accepted,
            out.log.len(),
            out.e_reference,
            out.e_initial,
            out.e_final,
            naive_acc,
            naive_e,
            t0.elapsed()
        );
        println!("  set {:?}\n  naive {:?}", out.set.values, naive);
    }
    Ok(())
}
