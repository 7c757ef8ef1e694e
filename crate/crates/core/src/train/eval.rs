use crate::error::Result;
use crate::model::Model;
use crate::objective::{MetricReport, PairMetrics};
use crate::rain::{Dataset, Image};
use crate::tensor::Real;

/// PSNR and SSIM of the model's output on every pair, full resolution.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset) -> Result<MetricReport> {
    evaluate_with(data, |rainy| model.derain(rainy))
}

/// Same as [`evaluate`] for an arbitrary restoration function; the identity
/// gives the rainy-input baseline.
pub fn evaluate_with(data: &Dataset, mut restore: impl FnMut(&Image) -> Result<Image>) -> Result<MetricReport> {
    let rows = data
        .pairs
        .iter()
        .map(|p| PairMetrics::measure::<f64>(&p.id, &restore(&p.rainy)?.to_tensor(), &p.clean.to_tensor()))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_rows(rows))
}
