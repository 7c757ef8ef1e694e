//! Variant / loss-weight comparisons over several seeds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::objective::{median, LossWeights};
use crate::rain::Dataset;

use super::eval::evaluate;
use super::trainer::{TrainConfig, Trainer};

/// One configuration under comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub variant: Variant,
    pub weights: LossWeights,
}

impl Arm {
    /// Every variant crossed with every weight set. Labels carry the weights
    /// only when more than one set is compared.
    pub fn grid(variants: &[Variant], weights: &[LossWeights]) -> Vec<Arm> {
        let mut arms = Vec::new();
        for w in weights {
            for &v in variants {
                let label = if weights.len() > 1 {
                    format!("{v} [mse {} ssim {} perp {}]", w.w_mse, w.w_ssim, w.w_perp)
                } else {
                    v.to_string()
                };
                // Repeated entries stay separate rows instead of merging.
                let repeats = arms.iter().filter(|a: &&Arm| a.variant == v && a.weights == *w).count();
                let label = if repeats == 0 { label } else { format!("{label} #{}", repeats + 1) };
                arms.push(Arm { label, variant: v, weights: *w });
            }
        }
        arms
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub arm: String,
    pub median_psnr_db: f64,
    pub median_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub medians: Vec<AblationSummary>,
}

impl AblationTable {
    pub fn median_psnr(&self, arm: &str) -> Option<f64> {
        self.medians.iter().find(|m| m.arm == arm).map(|m| m.median_psnr_db)
    }

    /// Plain-text table: one row per (arm, seed), then one median row per arm.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.arm.len()).chain([7]).max().unwrap_or(7);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>9}  {:>7}", "variant", "seed", "PSNR(dB)", "SSIM");
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:>8}  {:>9.3}  {:>7.4}", r.arm, r.seed, r.psnr_db, r.ssim);
        }
        for m in &self.medians {
            let _ = writeln!(out, "{:<width$}  {:>8}  {:>9.3}  {:>7.4}", m.arm, "median", m.median_psnr_db, m.median_ssim);
        }
        out
    }
}

/// Trains every arm once per seed on `train` and scores it on `held_out`.
/// The seed drives both the weight initialization and the data order, so all
/// arms see identical batches for a given seed. `progress` is called after
/// each finished run.
pub fn run_ablation(
    model: &ModelConfig,
    train: &TrainConfig,
    arms: &[Arm],
    seeds: &[u64],
    train_data: &Dataset,
    held_out: &Dataset,
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    if arms.is_empty() || seeds.is_empty() {
        return Err(config_err!("ablation needs at least one arm and one seed"));
    }
    if held_out.is_empty() {
        return Err(config_err!("ablation needs a nonempty held-out split"));
    }
    let mut rows = Vec::new();
    for arm in arms {
        for &seed in seeds {
            let cfg = model.clone().with_variant(arm.variant);
            let net = Model::<f32>::build(&cfg, seed)?;
            let tc = TrainConfig { seed, weights: arm.weights, ..train.clone() };
            let mut trainer = Trainer::new(net, tc, train_data)?;
            trainer.run(None, |_| {})?;
            let report = evaluate(&trainer.model, held_out)?;
            let row = AblationRow { arm: arm.label.clone(), seed, psnr_db: report.mean_psnr_db, ssim: report.mean_ssim };
            progress(&row);
            rows.push(row);
        }
    }
    let medians = arms
        .iter()
        .map(|a| {
            let of = |f: fn(&AblationRow) -> f64| median(&rows.iter().filter(|r| r.arm == a.label).map(f).collect::<Vec<_>>());
            AblationSummary { arm: a.label.clone(), median_psnr_db: of(|r| r.psnr_db), median_ssim: of(|r| r.ssim) }
        })
        .collect();
    Ok(AblationTable { rows, medians })
}
