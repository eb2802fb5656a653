//! Toggle counts of the gate-level MAC: a few single cycles, mean toggles
//! per partial-sum Hamming distance, and same-bin vs upward MSB moves.
//!
//! Run: cargo run --release -p wselect --example mac_transitions -- [samples] [seed]

use wselect::mac_sim::{mac_cycle, MacDatapath, PartialSum, QuantActivation, QuantWeight};
use wselect::transitions::{group_of, group_pair_energy, hd_sweep, spearman};

fn main() -> wselect::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let samples: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(100_000);
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);

    let dp = MacDatapath::default();
    println!("MAC with {} nets", dp.geometry().net_count());
    let reset = dp.reset_state();
    for (w, a, p) in [(0, 127, 0), (1, 1, 1), (-1, 1, 0), (-128, -128, 0), (37, 5, -1), (37, 5, 1 << 20)] {
        let (s, e) = mac_cycle(&reset, QuantWeight(w), QuantActivation(a), PartialSum::new(p)?);
        let g = group_of(PartialSum::new(p)?);
        println!(
            "  w {w:5} a {a:5} psum {p:8} (group {:2}) -> out {:8}  {:3} toggles from reset",
            g.index(),
            s.psum_out(),
            e.toggles
        );
    }

    let buckets = hd_sweep(samples, seed);
    println!("\nmean toggles by partial-sum Hamming distance ({samples} transitions)");
    for b in &buckets {
        println!("  hd {:2}: {:7.2}  ({} samples)", b.key, b.mean_toggles, b.count);
    }
    let x: Vec<f64> = buckets.iter().map(|b| b.key as f64).collect();
    let y: Vec<f64> = buckets.iter().map(|b| b.mean_toggles).collect();
    println!("  spearman {:.4}", spearman(&x, &y));

    let (same, up) = group_pair_energy(samples, seed).diagonal_vs_upward();
    println!("\nsame MSB bin {same:.2} toggles, to a higher bin {up:.2} toggles");
    Ok(())
}
