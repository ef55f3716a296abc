//! Loss-weight ablation: one full two-stage run per `(λ_ang, λ_hsi)` pair,
//! scored on the held-out views after each stage.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::{evaluate_heldout, MaskPolicy, MeanSd, SpectralMetrics};
use crate::train::{train_stage, Stage, TrainConfig, TrainState};

/// The five `(λ_ang, λ_hsi)` settings of the standard grid.
pub const DEFAULT_GRID: [(f64, f64); 5] = [(0.0, 1.0), (0.25, 0.75), (0.5, 0.5), (0.75, 0.25), (1.0, 0.0)];

pub fn pair_label(ang: f64, hsi: f64) -> String {
    match (ang, hsi) {
        (a, h) if a == 0.0 && h == 1.0 => "HSI-only".into(),
        (a, h) if a == 1.0 && h == 0.0 => "Angular-only".into(),
        (a, h) => format!("({a},{h})"),
    }
}

/// Parses `default` or `a:h,a:h,...`.
pub fn parse_grid(spec: &str) -> Result<Vec<(f64, f64)>> {
    if spec == "default" {
        return Ok(DEFAULT_GRID.to_vec());
    }
    let bad = || Error::parse("weight grid", format!("`{spec}`: expected `default` or ang:hsi,..."));
    let grid: Vec<(f64, f64)> = spec
        .split(',')
        .map(|pair| {
            let (a, h) = pair.split_once(':').ok_or_else(bad)?;
            Ok((a.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?))
        })
        .collect::<Result<_>>()?;
    if grid.is_empty() {
        return Err(bad());
    }
    for &(a, h) in &grid {
        LossWeights::with_pair(a, h).validate()?;
    }
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub lambda_ang: f64,
    pub lambda_hsi: f64,
    pub stage: Stage,
    pub metrics: SpectralMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub policy: MaskPolicy,
    pub rows: Vec<AblationRow>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cell(m: &MeanSd, digits: usize) -> String {
    format!("{:.*} ± {:.*}", digits, m.mean, digits, m.sd)
}

impl AblationReport {
    /// `setting,lambda_ang,lambda_hsi,stage,SAM,RMSE,SSIM,PSNR` with
    /// `mean ± sd` cells; labels containing a comma are quoted.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("setting,lambda_ang,lambda_hsi,stage,SAM,RMSE,SSIM,PSNR\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                csv_field(&r.label),
                r.lambda_ang,
                r.lambda_hsi,
                r.stage,
                cell(&m.sam_rad, 4),
                cell(&m.rmse, 4),
                cell(&m.ssim, 4),
                cell(&m.psnr_db, 2)
            );
        }
        s
    }
}

/// Retrains from scratch for every pair; `base` supplies everything except
/// the two swept weights, which apply to both stages.
pub fn ablation_grid(
    base: &TrainConfig,
    data: &Dataset,
    grid: &[(f64, f64)],
    policy: MaskPolicy,
) -> Result<AblationReport> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty weight grid".into()));
    }
    let mut rows = Vec::with_capacity(2 * grid.len());
    for &(ang, hsi) in grid {
        let mut cfg = base.clone();
        cfg.weights.ang = ang;
        cfg.weights.hsi = hsi;
        cfg.finetune_weights = None;
        let label = pair_label(ang, hsi);
        log::info!("ablation {label}: pre-training");
        let mut state = TrainState::init(&cfg, data)?;
        for stage in [Stage::Pretrain, Stage::Finetune] {
            state = train_stage(state, &cfg, data, stage)?;
            let report = evaluate_heldout(&state, data, policy, &cfg.render, &label)?;
            rows.push(AblationRow {
                label: label.clone(),
                lambda_ang: ang,
                lambda_hsi: hsi,
                stage,
                metrics: report.summary,
            });
        }
    }
    Ok(AblationReport { policy, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_grid() {
        assert_eq!(pair_label(0.0, 1.0), "HSI-only");
        assert_eq!(pair_label(1.0, 0.0), "Angular-only");
        assert_eq!(pair_label(0.25, 0.75), "(0.25,0.75)");
        assert_eq!(parse_grid("default").unwrap().len(), 5);
        assert_eq!(parse_grid("0.25:0.75").unwrap(), vec![(0.25, 0.75)]);
        assert!(parse_grid("0.25").is_err());
        assert!(parse_grid("-1:2").is_err());
        assert_eq!(csv_field("(0.25,0.75)"), "\"(0.25,0.75)\"");
        assert_eq!(csv_field("HSI-only"), "HSI-only");
    }
}
