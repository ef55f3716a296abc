//! A small loss-weight ablation on a reduced synthetic scene, printed in the
//! `setting,lambda_ang,lambda_hsi,stage,...` table layout.
//!
//! cargo run --release --example loss_ablation -- --iters 200

use clap::Parser;
use hyperfield::ablation::{ablation_grid, parse_grid};
use hyperfield::geometry::CameraModel;
use hyperfield::metrics::MaskPolicy;
use hyperfield::scene::{synthesize, AnalyticScene, SynthOptions, TurntableConfig};
use hyperfield::train::TrainConfig;

#[derive(Parser)]
struct Args {
    /// Iterations per stage.
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value = "default")]
    grid: String,
    #[arg(long, default_value = "full-frame")]
    policy: MaskPolicy,
}

fn main() -> hyperfield::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let ring = TurntableConfig {
        n_views: 12,
        intrinsics: CameraModel::from_fov(0.443, 32, 32)?,
        ..TurntableConfig::desk_default()
    };
    let opts = SynthOptions {
        eval_fraction: 1.0 / 6.0,
        ..SynthOptions::desk_default()
    };
    let data = synthesize(&AnalyticScene::desk_fruit(), &ring, &opts)?;
    let mut cfg = TrainConfig {
        pretrain_iters: args.iters,
        finetune_iters: args.iters,
        rays_per_batch: 128,
        normal_rays: 8,
        ..TrainConfig::default()
    };
    cfg.field.trunk_width = 32;
    cfg.field.radiance_width = 32;
    cfg.render.coarse_samples = 16;
    cfg.render.fine_samples = 16;
    let report = ablation_grid(&cfg, &data, &parse_grid(&args.grid)?, args.policy)?;
    print!("{}", report.to_csv());
    Ok(())
}
