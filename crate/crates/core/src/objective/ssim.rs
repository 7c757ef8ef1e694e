//! Windowed SSIM with a Gaussian window and its gradient.
//!
//! Local statistics use normalized Gaussian weights `g` over each `k×k`
//! window that lies entirely inside the image ("valid" positions):
//!
//! ```text
//! μx = Σ g·x      σx² = Σ g·x² − μx²      σxy = Σ g·xy − μx·μy
//! S  = (2μxμy + C1)(2σxy + C2) / ((μx² + μy² + C1)(σx² + σy² + C2))
//! ```
//!
//! with `C1 = (k1·L)²`, `C2 = (k2·L)²`. The score is the mean of `S` over
//! valid positions and over every image plane (each channel of each batch
//! item). All arithmetic is done in f64 whatever the tensor precision.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 1.0 }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(param_err!("SSIM window must be odd and at least 3, got {}", self.window));
        }
        if !(self.sigma > 0.0 && self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0) {
            return Err(param_err!("SSIM sigma, k1, k2 and dynamic range must be positive"));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// Separable valid correlation of an `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        let src = &x[i * w..(i + 1) * w];
        for j in 0..ow {
            rows[i * ow + j] = g.iter().zip(&src[j..j + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for (t, &gt) in g.iter().enumerate() {
            let src = &rows[(i + t) * ow..(i + t + 1) * ow];
            for (o, s) in out[i * ow..(i + 1) * ow].iter_mut().zip(src) {
                *o += gt * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads an `oh×ow` map back onto `h×w`.
fn filter_valid_adjoint(m: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for i in 0..oh {
        for (t, &gt) in g.iter().enumerate() {
            let dst = &mut rows[(i + t) * ow..(i + t + 1) * ow];
            for (d, s) in dst.iter_mut().zip(&m[i * ow..(i + 1) * ow]) {
                *d += gt * s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..ow {
            let v = rows[i * ow + j];
            for (t, &gt) in g.iter().enumerate() {
                out[i * w + j + t] += gt * v;
            }
        }
    }
    out
}

fn plane_dims<T: Real>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig) -> Result<(usize, usize, usize)> {
    cfg.validate()?;
    x.ensure_same_shape(y, "ssim")?;
    let s = x.shape();
    if s.len() < 2 {
        return Err(shape_err!("ssim needs at least 2 spatial axes, got {:?}", s));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < cfg.window || w < cfg.window {
        return Err(param_err!("image {h}x{w} is smaller than the {}-pixel SSIM window", cfg.window));
    }
    Ok((x.len() / (h * w), h, w))
}

fn ssim_impl<T: Real>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig, want_grad: bool) -> Result<(f64, Option<Tensor<T>>)> {
    let (planes, h, w) = plane_dims(x, y, cfg)?;
    let g = cfg.kernel();
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let (oh, ow) = (h + 1 - cfg.window, w + 1 - cfg.window);
    let count = (planes * oh * ow) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Vec::with_capacity(x.len()));

    for p in 0..planes {
        let xs: Vec<f64> = x.data()[p * h * w..(p + 1) * h * w].iter().map(|v| v.as_f64()).collect();
        let ys: Vec<f64> = y.data()[p * h * w..(p + 1) * h * w].iter().map(|v| v.as_f64()).collect();
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&xs, h, w, &g);
        let my = filter_valid(&ys, h, w, &g);
        let mxx = filter_valid(&sq(&xs, &xs), h, w, &g);
        let myy = filter_valid(&sq(&ys, &ys), h, w, &g);
        let mxy = filter_valid(&sq(&xs, &ys), h, w, &g);

        let n = oh * ow;
        let (mut da, mut db, mut dc) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let a1 = 2.0 * mx[i] * my[i] + c1;
            let a2 = 2.0 * (mxy[i] - mx[i] * my[i]) + c2;
            let b1 = mx[i] * mx[i] + my[i] * my[i] + c1;
            let b2 = (mxx[i] - mx[i] * mx[i]) + (myy[i] - my[i] * my[i]) + c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                da[i] = (2.0 * my[i] * (a2 - a1) / (b1 * b2) - 2.0 * mx[i] * s * (1.0 / b1 - 1.0 / b2)) / count;
                db[i] = -s / b2 / count;
                dc[i] = 2.0 * a1 / (b1 * b2) / count;
            }
        }
        if let Some(out) = grad.as_mut() {
            let fa = filter_valid_adjoint(&da, h, w, &g);
            let fb = filter_valid_adjoint(&db, h, w, &g);
            let fc = filter_valid_adjoint(&dc, h, w, &g);
            for i in 0..h * w {
                out.push(T::lit(fa[i] + 2.0 * xs[i] * fb[i] + ys[i] * fc[i]));
            }
        }
    }
    let grad = grad.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?;
    Ok((total / count, grad))
}

/// Mean SSIM over valid windows and image planes.
pub fn ssim<T: Real>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig) -> Result<f64> {
    Ok(ssim_impl(x, y, cfg, false)?.0)
}

/// SSIM and its gradient with respect to `x`.
pub fn ssim_with_grad<T: Real>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig) -> Result<(f64, Tensor<T>)> {
    let (s, g) = ssim_impl(x, y, cfg, true)?;
    Ok((s, g.expect("gradient requested")))
}

/// `1 − SSIM(pred, target)` and its gradient with respect to `pred`.
pub fn ssim_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, cfg: &SsimConfig) -> Result<(f64, Tensor<T>)> {
    let (s, g) = ssim_with_grad(pred, target, cfg)?;
    Ok((1.0 - s, g.map(|v| -v)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::random_tensor;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let g = SsimConfig::default().kernel();
        assert_eq!(g.len(), 11);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert_eq!(g[i], g[10 - i]);
        }
    }

    #[test]
    fn adjoint_identity() {
        let g = SsimConfig { window: 3, ..Default::default() }.kernel();
        let x: Vec<f64> = random_tensor::<f64>(&[5, 7], 1).into_data();
        let m: Vec<f64> = random_tensor::<f64>(&[3, 5], 2).into_data();
        let lhs: f64 = filter_valid(&x, 5, 7, &g).iter().zip(&m).map(|(a, b)| a * b).sum();
        let rhs: f64 = filter_valid_adjoint(&m, 5, 7, &g).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-13);
    }

    #[test]
    fn rejects_small_images_and_even_windows() {
        let x = Tensor::<f64>::zeros([1, 1, 8, 8]);
        assert!(ssim(&x, &x, &SsimConfig::default()).is_err());
        let cfg = SsimConfig { window: 4, ..Default::default() };
        assert!(ssim(&x, &x, &cfg).is_err());
    }
}
