//! Integer-only evaluation of a model file on a dataset split. With a third
//! argument, also writes a canonical copy of the model (fingerprint filled in).
//!
//! Run: cargo run -p wselect --example evaluate_model -- <model.json> <val.bin> [canonical.json]

use std::path::PathBuf;

use wselect::qnn::{load_model, save_model, Dataset, Split};

fn main() -> wselect::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 2 {
        eprintln!("usage: evaluate_model <model.json> <data.bin> [canonical.json]");
        std::process::exit(2);
    }
    let net = load_model(&PathBuf::from(&args[0]))?;
    let data = Dataset::load(&PathBuf::from(&args[1]), Split::Validation)?;
    let acc = net.accuracy(&data)?;
    println!("{}: top1 {:.4} ({}/{})", net.name, acc.top1, acc.correct, acc.n_samples);
    for (i, (layer, shape)) in net.layers.iter().zip(&net.shapes()?[1..]).enumerate() {
        println!("  layer {i:2} {:<8} -> {shape:?}", layer.kind());
    }
    if let Some(out) = args.get(2) {
        save_model(&net, &PathBuf::from(out))?;
        println!("fingerprint {}", wselect::qnn::io::fingerprint(&net));
    }
    Ok(())
}
