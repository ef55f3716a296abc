//! Extracts a point cloud from a desk-scene checkpoint and scores it against
//! the analytic sphere.
//!
//! cargo run --release --example train_desk -- --out desk.ckpt
//! cargo run --release --example extract_desk -- desk.ckpt --mode crossing

use std::path::PathBuf;

use clap::Parser;
use hyperfield::extract::{extract_pointcloud, refine_pointcloud, ExtractConfig, ExtractMode};
use hyperfield::scene::{sample_sphere_surface, AnalyticScene};
use hyperfield::spatial::{pr_sweep, IcpConfig, PointCloud};
use hyperfield::train::load_checkpoint;

#[derive(Parser)]
struct Args {
    checkpoint: PathBuf,
    #[arg(long, default_value = "crossing")]
    mode: ExtractMode,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    #[arg(long, default_value_t = 5.0)]
    sigma_min: f64,
    /// Skip statistical outlier removal.
    #[arg(long)]
    no_refine: bool,
    /// Register onto the ground truth before scoring.
    #[arg(long)]
    icp: bool,
}

fn main() -> hyperfield::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let state = load_checkpoint(&args.checkpoint)?;
    let cfg = ExtractConfig {
        resolution: args.resolution,
        sigma_min: args.sigma_min,
        mode: args.mode,
        ..ExtractConfig::default()
    };
    let mut pc = extract_pointcloud(&state, &cfg)?;
    println!("extracted {} points", pc.len());
    if !args.no_refine {
        pc = refine_pointcloud(&pc, 16, 2.0)?;
        println!("{} points after outlier removal", pc.len());
    }

    let scene = AnalyticScene::desk_fruit();
    let r = 0.05;
    let near = pc.points.iter().filter(|p| scene.signed_distance(p) <= 0.1 * r).count();
    println!("within 0.1 r of the solid: {:.2}%", 100.0 * near as f64 / pc.len() as f64);
    let mut sd: Vec<f64> = pc.points.iter().map(|p| scene.signed_distance(p) / r).collect();
    sd.sort_by(f64::total_cmp);
    let q = |f: f64| sd[((sd.len() - 1) as f64 * f) as usize];
    println!(
        "signed distance / r: p05 {:.3}, median {:.3}, p95 {:.3}",
        q(0.05),
        q(0.5),
        q(0.95)
    );

    let gt = PointCloud::new(sample_sphere_surface(nalgebra::Vector3::zeros(), r, 20_000))?;
    let grid: Vec<f64> = (1..=10).map(|k| k as f64 * 0.005 * r).collect();
    let icp = IcpConfig::default();
    let curve = pr_sweep(&pc, &gt, &grid, args.icp.then_some(&icp))?;
    print!("{}", curve.to_csv());
    let at = curve.thresholds.iter().position(|e| (e - 0.02 * r).abs() < 1e-12).unwrap();
    println!("F at 0.02 r: {:.2}", 100.0 * curve.fscore[at]);
    Ok(())
}
