//! Oracles shared by the integration tests.

use dpafnet::Tensor;

/// SSIM written the slow way: for every valid window, weight every pixel by
/// the 2-D Gaussian and form the statistics directly.
pub fn ssim_brute(x: &Tensor<f64>, y: &Tensor<f64>, k: usize, sigma: f64) -> f64 {
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let r = (k / 2) as f64;
    let mut g = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            g[i * k + j] = (-((i as f64 - r).powi(2) + (j as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut acc, mut n) = (0.0, 0.0);
    for p in 0..planes {
        let xs = &x.data()[p * h * w..(p + 1) * h * w];
        let ys = &y.data()[p * h * w..(p + 1) * h * w];
        for i0 in 0..=h - k {
            for j0 in 0..=w - k {
                let mut m = [0.0; 2];
                for i in 0..k {
                    for j in 0..k {
                        let q = (i0 + i) * w + j0 + j;
                        m[0] += g[i * k + j] * xs[q];
                        m[1] += g[i * k + j] * ys[q];
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let q = (i0 + i) * w + j0 + j;
                        let (dx, dy) = (xs[q] - m[0], ys[q] - m[1]);
                        vx += g[i * k + j] * dx * dx;
                        vy += g[i * k + j] * dy * dy;
                        cxy += g[i * k + j] * dx * dy;
                    }
                }
                acc += (2.0 * m[0] * m[1] + c1) * (2.0 * cxy + c2)
                    / ((m[0] * m[0] + m[1] * m[1] + c1) * (vx + vy + c2));
                n += 1.0;
            }
        }
    }
    acc / n
}
