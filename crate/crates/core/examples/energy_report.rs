//! Profiles every conv layer of a model, builds its per-weight power table
//! and prints tile counts, estimate- vs simulate-mode tile power, energies
//! and shares.
//!
//! Run: cargo run --release -p wselect --example energy_report -- [model.json] [calib.bin]

use std::path::PathBuf;
use std::time::Instant;

use wselect::energy_model::{
    build_power_table, layer_energy, layer_energy_simulated, shares_of, ArrayConfig, SimulateConfig,
    DEFAULT_TRACE_LEN,
};
use wselect::qnn::{load_model, Dataset, Split};
use wselect::transitions::{collect_stats, stability_ratio, stability_samples, CollectConfig};

fn main() -> wselect::Result<()> {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let mut args = std::env::args().skip(1);
    let model = args.next().map(PathBuf::from).unwrap_or(fixtures.join("desk_model.json"));
    let calib = args.next().map(PathBuf::from).unwrap_or(fixtures.join("calib.bin"));
    let net = load_model(&model)?;
    let data = Dataset::load(&calib, Split::Calibration)?;
    let cfg = ArrayConfig::default();

    let mut energies = Vec::new();
    for (n, &li) in net.conv_indices().iter().enumerate() {
        let t0 = Instant::now();
        let stats = collect_stats(&net, &data, li, &CollectConfig { seed: n as u64, ..Default::default() })?;
        let table = build_power_table(&stats, DEFAULT_TRACE_LEN, 17)?;
        let est = layer_energy(&net, li, &table, &cfg)?;
        let sim = layer_energy_simulated(&net, &data, li, &cfg, &SimulateConfig::default())?;
        let stab = stability_ratio(&stability_samples(&stats, 37, 1, 100_000, 5)?)?;
        println!(
            "layer {li}: N={} P_est={:.3} P_sim={:.3} (rel {:+.3}) cv={:.3} rank(0)={} power(0)={:.2} stability={:.2} [{:.1?}]",
            est.n_tiles,
            est.p_tile,
            sim.p_tile,
            est.p_tile / sim.p_tile - 1.0,
            table.coefficient_of_variation(),
            table.rank_of(0),
            table.get(0),
            stab.ratio,
            t0.elapsed()
        );
        energies.push(est);
    }
    let shares = shares_of(&energies.iter().map(|e| e.e_layer).collect::<Vec<_>>())?;
    for (e, s) in energies.iter().zip(&shares) {
        println!("layer {}: E={:.4e} rho={s:.4}", e.layer_index, e.e_layer);
    }
    Ok(())
}
