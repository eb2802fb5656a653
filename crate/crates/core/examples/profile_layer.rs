//! Transition statistics of one conv layer: activation sparsity, the most
//! frequent partial-sum groups, the stability ratio of the grouping, and how
//! closely a synthesized trace follows the recorded group frequencies.
//!
//! Run: cargo run --release -p wselect --example profile_layer -- [layer] [model.json calib.bin]

use std::path::PathBuf;

use wselect::energy_model::{build_power_table, DEFAULT_TRACE_LEN};
use wselect::qnn::{load_model, Dataset, Split};
use wselect::transitions::{
    collect_stats, stability_ratio, stability_samples, total_variation, CollectConfig, GroupId, TraceSampler, GROUP_COUNT,
};

fn main() -> wselect::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let fx = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let net = load_model(&args.get(1).map(PathBuf::from).unwrap_or(fx.join("desk_model.json")))?;
    let calib = Dataset::load(&args.get(2).map(PathBuf::from).unwrap_or(fx.join("calib.bin")), Split::Calibration)?;
    let layer: usize = match args.first() {
        Some(s) => s.parse().map_err(|_| wselect::Error::InvalidConfig(format!("bad layer {s}")))?,
        None => net.conv_indices()[1],
    };

    let stats = collect_stats(&net, &calib, layer, &CollectConfig::default())?;
    println!(
        "layer {layer}: {} activation and {} partial-sum transitions",
        stats.total_act_transitions, stats.total_psum_transitions
    );
    let act = stats.act_marginal();
    let max_pos = act[129..].iter().cloned().fold(0.0, f64::max);
    println!("P(a = 0) {:.3}, largest P(a = v > 0) {max_pos:.3}", act[128]);

    let marg = stats.group_marginal();
    let mut top: Vec<usize> = (0..GROUP_COUNT).collect();
    top.sort_by(|&a, &b| marg[b].total_cmp(&marg[a]));
    println!("most frequent groups (msb bin, hw bin):");
    for &g in top.iter().take(6) {
        let id = GroupId::from_index(g);
        println!("  ({}, {}) {:.3}  {} reservoir values", id.msb_bin, id.hw_bin, marg[g], stats.group_samples[g].len());
    }

    let r = stability_ratio(&stability_samples(&stats, 37, 1, 100_000, 5)?)?;
    println!(
        "stability ratio {:.2} over {} groups (inter {:.2}, intra {:.3})",
        r.ratio, r.groups, r.inter_group_mean_variance, r.mean_intra_group_variance
    );

    let groups = TraceSampler::new(&stats)?.sample_groups(1_000_000, 1);
    let mut freq = vec![0.0; GROUP_COUNT];
    for g in &groups {
        freq[*g] += 1.0 / groups.len() as f64;
    }
    println!("sampled trace vs recorded groups: total variation {:.4}", total_variation(&freq, &marg));

    let table = build_power_table(&stats, DEFAULT_TRACE_LEN, 0)?;
    println!(
        "power table: mean {:.2}, cv {:.3}, weight 0 has {} cheaper values",
        table.mean(),
        table.coefficient_of_variation(),
        table.rank_of(0)
    );
    Ok(())
}
