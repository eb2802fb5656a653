//! Generates the seeded synthetic 10-class stroke dataset and writes the
//! train / calibration / validation splits in the raw binary format.
//!
//! Run: cargo run -p wselect --example synthetic_dataset -- <out_dir> [train_n] [noise=..] [distractor=..] [shift=..] [strokes=..] [brightness=..] [pool=..]

use std::path::PathBuf;

use wselect::qnn::dataset::{synthetic, SynthParams};
use wselect::qnn::Split;

fn main() -> wselect::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (overrides, positional): (Vec<&String>, Vec<&String>) = args.iter().partition(|a| a.contains('='));
    let out = PathBuf::from(positional.first().map(|s| s.as_str()).unwrap_or("data"));
    let train_n: usize = positional.get(1).and_then(|s| s.parse().ok()).unwrap_or(8000);
    let mut params = SynthParams::default();
    for o in overrides {
        let (k, v) = o.split_once('=').unwrap();
        let bad = || wselect::Error::InvalidConfig(format!("bad value in {o}"));
        match k {
            "noise" => params.noise = v.parse().map_err(|_| bad())?,
            "distractor" => params.distractor = v.parse().map_err(|_| bad())?,
            "shift" => params.max_shift = v.parse().map_err(|_| bad())?,
            "brightness" => params.brightness = v.parse().map_err(|_| bad())?,
            "pool" => params.stroke_pool = v.parse().map_err(|_| bad())?,
            "strokes" => params.strokes_per_class = v.parse().map_err(|_| bad())?,
            _ => return Err(wselect::Error::InvalidConfig(format!("unknown parameter {k}"))),
        }
    }
    std::fs::create_dir_all(&out).map_err(|e| wselect::Error::io(&out, e))?;
    for (name, n, seed, split) in [
        ("train.bin", train_n, 1, Split::Train),
        ("calib.bin", 512, 2, Split::Calibration),
        ("val.bin", 1024, 3, Split::Validation),
    ] {
        let d = synthetic(n, seed, split, &params)?;
        d.save(&out.join(name))?;
        let mean = d.images.iter().map(|&v| v as f64).sum::<f64>() / d.images.len() as f64;
        println!("{name}: {} images {}x{}x{}, mean pixel {mean:.2}", d.len(), d.c, d.h, d.w);
    }
    Ok(())
}
