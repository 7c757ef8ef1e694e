//! Training losses and evaluation metrics.
//!
//! The training objective is `w_mse·MSE + w_ssim·(1 − SSIM) + w_perp·Perceptual`.
//! Each term returns its value (f64) and its gradient with respect to the
//! prediction. MSE is averaged over every element, so its scale does not
//! depend on batch or image size.

mod metrics;
mod perceptual;
mod ssim;

use serde::{Deserialize, Serialize};

pub use metrics::{median, psnr, MetricReport, PairMetrics};
pub use perceptual::{perceptual_loss, PerceptualExtractor, DEFAULT_SEED, DEFAULT_TAP, DEFAULT_WIDTHS};
pub use ssim::{ssim, ssim_loss, ssim_with_grad, SsimConfig};

use crate::error::{param_err, Result};
use crate::tensor::{Real, Tensor};

/// `mean((pred − target)²)` over all elements, with gradient
/// `2(pred − target)/count`.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    pred.ensure_same_shape(target, "mse")?;
    let count = pred.len() as f64;
    let loss = pred.data().iter().zip(target.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>() / count;
    let scale = T::lit(2.0 / count);
    Ok((loss, pred.zip_map(target, |a, b| scale * (a - b))?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_mse: f64,
    pub w_ssim: f64,
    pub w_perp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_mse: 1.0, w_ssim: 0.2, w_perp: 0.04 }
    }
}

impl LossWeights {
    pub const MSE_ONLY: LossWeights = LossWeights { w_mse: 1.0, w_ssim: 0.0, w_perp: 0.0 };

    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_mse, self.w_ssim, self.w_perp];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(param_err!("loss weights must be finite and nonnegative, got {ws:?}"));
        }
        if ws.iter().all(|w| *w == 0.0) {
            return Err(param_err!("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// How to obtain the perceptual feature extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptualConfig {
    pub widths: Vec<usize>,
    pub seed: u64,
    pub tap: usize,
    /// Optional container with `stageK.weight`/`stageK.bias` entries that
    /// replaces the seeded random weights.
    pub weights: Option<std::path::PathBuf>,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig { widths: DEFAULT_WIDTHS.to_vec(), seed: DEFAULT_SEED, tap: DEFAULT_TAP, weights: None }
    }
}

impl PerceptualConfig {
    pub fn build<T: Real>(&self) -> Result<PerceptualExtractor<T>> {
        match &self.weights {
            Some(path) => PerceptualExtractor::load(path, self.tap),
            None => PerceptualExtractor::seeded(&self.widths, self.seed, self.tap),
        }
    }
}

/// Loss value, per-term breakdown and gradient w.r.t. the prediction.
/// Terms with zero weight are not computed and report `None`.
#[derive(Clone, Debug)]
pub struct LossValue<T> {
    pub total: f64,
    pub mse: Option<f64>,
    pub ssim: Option<f64>,
    pub perp: Option<f64>,
    pub grad: Tensor<T>,
}

/// The weighted training objective with its fixed configuration.
#[derive(Clone, Debug)]
pub struct Objective<T> {
    pub weights: LossWeights,
    pub ssim: SsimConfig,
    pub extractor: PerceptualExtractor<T>,
}

impl<T: Real> Objective<T> {
    pub fn new(weights: LossWeights, ssim: SsimConfig, extractor: PerceptualExtractor<T>) -> Result<Self> {
        weights.validate()?;
        ssim.validate()?;
        Ok(Objective { weights, ssim, extractor })
    }

    pub fn with_weights(weights: LossWeights) -> Result<Self> {
        Self::new(weights, SsimConfig::default(), PerceptualExtractor::default_seeded())
    }

    pub fn evaluate(&self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<LossValue<T>> {
        combined_loss(pred, target, &self.weights, &self.ssim, &self.extractor)
    }
}

/// Weighted sum of the three losses and of their gradients.
pub fn combined_loss<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    weights: &LossWeights,
    ssim_cfg: &SsimConfig,
    extractor: &PerceptualExtractor<T>,
) -> Result<LossValue<T>> {
    weights.validate()?;
    pred.ensure_same_shape(target, "combined loss")?;
    let mut grad = Tensor::zeros(pred.shape().to_vec());
    let mut total = 0.0;
    let mut term = |w: f64, f: &dyn Fn() -> Result<(f64, Tensor<T>)>| -> Result<Option<f64>> {
        if w == 0.0 {
            return Ok(None);
        }
        let (l, g) = f()?;
        total += w * l;
        let wt = T::lit(w);
        for (acc, gv) in grad.data_mut().iter_mut().zip(g.data()) {
            *acc += wt * *gv;
        }
        Ok(Some(l))
    };
    let mse = term(weights.w_mse, &|| mse_loss(pred, target))?;
    let ssim = term(weights.w_ssim, &|| ssim_loss(pred, target, ssim_cfg))?;
    let perp = term(weights.w_perp, &|| perceptual_loss(pred, target, extractor))?;
    Ok(LossValue { total, mse, ssim, perp, grad })
}
