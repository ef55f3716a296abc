//! Renders the analytic desk scene on a turntable ring, writes the dataset
//! and a visible composite of the first view.
//!
//! cargo run --release --example synth_dataset -- /tmp/desk

use std::path::PathBuf;

use hyperfield::hypercube::{write_rgb_png, BandTriplet};
use hyperfield::scene::{emit_dataset, AnalyticScene, SynthOptions, TurntableConfig};

fn main() -> hyperfield::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "desk_dataset".into()));
    let data = emit_dataset(
        &AnalyticScene::desk_fruit(),
        &TurntableConfig::desk_default(),
        &SynthOptions::desk_default(),
        &out,
    )?;
    println!(
        "{} views of {}x{} px, {} bands; train {:?}, held out {:?}",
        data.n_views(),
        data.camera.width,
        data.camera.height,
        data.bands(),
        data.split.train,
        data.split.eval
    );
    for (i, mask) in data.masks.iter().enumerate().take(3) {
        let m = mask.as_ref().expect("synthetic views carry masks");
        println!("view {i}: {:.1}% foreground", 100.0 * m.count() as f64 / m.values().len() as f64);
    }
    let rgb = data.cubes[0].composite(&BandTriplet::VISIBLE)?;
    write_rgb_png(&rgb, &out.join("view_000_visible.png"))?;
    println!("wrote {}", out.display());
    Ok(())
}
