use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{param_err, Result};
use crate::tensor::{Real, Tensor};

use super::ssim::{ssim, SsimConfig};

/// `10·log10(max_val² / MSE)` in dB. Identical images have zero error and
/// return `f64::INFINITY`, which reports serialize as the string `"inf"`.
pub fn psnr<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, max_val: f64) -> Result<f64> {
    pred.ensure_same_shape(target, "psnr")?;
    if !(max_val > 0.0) {
        return Err(param_err!("psnr max_val must be positive, got {max_val}"));
    }
    if pred.is_empty() {
        return Err(param_err!("psnr of empty images"));
    }
    let mse = pred.data().iter().zip(target.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// JSON numbers cannot hold infinities; those are written as strings.
mod real_or_string {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("expected a number or inf, got `{other}`"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pair_id: String,
    #[serde(with = "real_or_string")]
    pub psnr_db: f64,
    pub ssim: f64,
}

impl PairMetrics {
    /// PSNR (peak 1.0) and default-window SSIM for one prediction.
    pub fn measure<T: Real>(pair_id: impl Into<String>, pred: &Tensor<T>, target: &Tensor<T>) -> Result<Self> {
        Ok(PairMetrics {
            pair_id: pair_id.into(),
            psnr_db: psnr(pred, target, 1.0)?,
            ssim: ssim(pred, target, &SsimConfig::default())?,
        })
    }
}

/// Median of a sample (mean of the two middle values for even counts).
/// Infinities sort to the ends; NaN is not expected.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        let (a, b) = (v[m - 1], v[m]);
        if a == b { a } else { 0.5 * (a + b) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<PairMetrics>,
    #[serde(with = "real_or_string")]
    pub mean_psnr_db: f64,
    #[serde(with = "real_or_string")]
    pub median_psnr_db: f64,
    pub mean_ssim: f64,
    pub median_ssim: f64,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<PairMetrics>) -> Self {
        let p: Vec<f64> = rows.iter().map(|r| r.psnr_db).collect();
        let s: Vec<f64> = rows.iter().map(|r| r.ssim).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        MetricReport { mean_psnr_db: mean(&p), median_psnr_db: median(&p), mean_ssim: mean(&s), median_ssim: median(&s), rows }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infinity_roundtrips_through_json() {
        let r = PairMetrics { pair_id: "a".into(), psnr_db: f64::INFINITY, ssim: 1.0 };
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"inf\""), "{s}");
        assert_eq!(serde_json::from_str::<PairMetrics>(&s).unwrap(), r);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[f64::INFINITY, f64::INFINITY]), f64::INFINITY);
    }
}
