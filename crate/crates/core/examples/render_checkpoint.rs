//! Renders every held-out view of a dataset from a checkpoint, prints the
//! spectral metrics under both mask policies and writes comparison images.
//!
//! cargo run --release --example render_checkpoint -- desk.ckpt desk_dataset out/

use std::path::PathBuf;

use hyperfield::dataset::Dataset;
use hyperfield::hypercube::BandTriplet;
use hyperfield::metrics::{evaluate_heldout, write_heldout, MaskPolicy};
use hyperfield::render::RenderConfig;
use hyperfield::train::load_checkpoint;

fn main() -> hyperfield::Result<()> {
    let args: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    let [ckpt, dataset, out] = args.as_slice() else {
        eprintln!("usage: render_checkpoint <ckpt> <dataset dir> <out dir>");
        std::process::exit(2);
    };
    let state = load_checkpoint(ckpt)?;
    let data = Dataset::load(dataset)?;
    let cfg = RenderConfig {
        coarse_samples: 32,
        fine_samples: 32,
        ..RenderConfig::default()
    };
    for policy in [MaskPolicy::FullFrame, MaskPolicy::Foreground] {
        let report = evaluate_heldout(&state, &data, policy, &cfg, "desk")?;
        print!("{policy:?}\n{}", report.to_csv());
        if policy == MaskPolicy::FullFrame {
            write_heldout(&report, &data, &BandTriplet::VISIBLE, out)?;
        }
    }
    println!("comparison images in {}", out.display());
    Ok(())
}
