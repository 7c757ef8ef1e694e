//! Rain streak rendering: sparse salt noise smeared by a line kernel.
//!
//! Direction is measured from the vertical in degrees: 0 draws streaks
//! falling straight down, positive angles lean the lower end to the right
//! (image `x` grows rightwards, `y` downwards).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};

/// Serializable description of one streak layer; [`StreakSpec::render`]
/// turns it into pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreakSpec {
    pub direction_deg: f64,
    pub density: f64,
    pub length_px: usize,
    pub intensity: f64,
    pub seed: u64,
}

impl StreakSpec {
    pub fn render(&self, height: usize, width: usize) -> Result<StreakLayer> {
        render_streak_layer((height, width), self.direction_deg, self.density, self.length_px, self.intensity, self.seed)
    }
}

/// Rendered single-channel streak layer, broadcast over RGB when composed.
#[derive(Clone, Debug, PartialEq)]
pub struct StreakLayer {
    pub height: usize,
    pub width: usize,
    /// Row-major `H × W`, each value in `[0, intensity]`.
    pub pixels: Vec<f64>,
    pub direction_deg: f64,
    pub density: f64,
    pub length_px: usize,
    pub intensity: f64,
}

impl StreakLayer {
    pub fn zeros(height: usize, width: usize) -> Self {
        StreakLayer {
            height,
            width,
            pixels: vec![0.0; height * width],
            direction_deg: 0.0,
            density: 0.0,
            length_px: 1,
            intensity: 1.0,
        }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }
}

/// Binary impulse map: each pixel is 1 with probability `density`.
pub fn salt_noise(height: usize, width: usize, density: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..height * width).map(|_| if rng.random::<f64>() < density { 1.0 } else { 0.0 }).collect()
}

/// Normalized `(2r+1)²` motion-blur kernel with `r = length/2`.
///
/// `length` samples at offsets `t = i − (length−1)/2` along the streak
/// direction are rounded to the pixel grid and accumulated, so the kernel
/// is point-symmetric and sums to 1.
pub fn line_kernel(direction_deg: f64, length_px: usize) -> (usize, Vec<f64>) {
    let r = length_px / 2;
    let side = 2 * r + 1;
    let (sin, cos) = direction_deg.to_radians().sin_cos();
    let mut k = vec![0.0; side * side];
    let half = (length_px as f64 - 1.0) / 2.0;
    for i in 0..length_px {
        let t = i as f64 - half;
        let dx = (t * sin).round() as isize;
        let dy = (t * cos).round() as isize;
        k[((dy + r as isize) as usize) * side + (dx + r as isize) as usize] += 1.0;
    }
    let w = 1.0 / length_px as f64;
    k.iter_mut().for_each(|v| *v *= w);
    (r, k)
}

pub fn render_streak_layer(
    shape: (usize, usize),
    direction_deg: f64,
    density: f64,
    length_px: usize,
    intensity: f64,
    seed: u64,
) -> Result<StreakLayer> {
    let (h, w) = shape;
    if h == 0 || w == 0 {
        return Err(param_err!("streak layer must be at least 1x1"));
    }
    if !(0.0..=1.0).contains(&density) {
        return Err(param_err!("streak density {density} outside [0, 1]"));
    }
    if length_px == 0 {
        return Err(param_err!("streak length must be at least 1 pixel"));
    }
    if !(intensity > 0.0 && intensity <= 1.0) {
        return Err(param_err!("streak intensity {intensity} outside (0, 1]"));
    }
    if !direction_deg.is_finite() {
        return Err(param_err!("streak direction must be finite"));
    }
    let noise = salt_noise(h, w, density, seed);
    let (r, k) = line_kernel(direction_deg, length_px);
    let side = 2 * r + 1;
    let taps: Vec<(isize, isize, f64)> = k
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, &v)| ((i / side) as isize - r as isize, (i % side) as isize - r as isize, v))
        .collect();

    let mut pixels = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for &(dy, dx, kv) in &taps {
                let (sy, sx) = (y as isize + dy, x as isize + dx);
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    acc += kv * noise[sy as usize * w + sx as usize];
                }
            }
            pixels[y * w + x] = acc;
        }
    }
    let peak = pixels.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        let s = intensity / peak;
        pixels.iter_mut().for_each(|v| *v = (*v * s).min(intensity));
    }
    Ok(StreakLayer { height: h, width: w, pixels, direction_deg, density, length_px, intensity })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_sums_to_one_and_is_symmetric() {
        for (deg, len) in [(0.0, 1), (12.0, 7), (45.0, 9), (-30.0, 10)] {
            let (r, k) = line_kernel(deg, len);
            let side = 2 * r + 1;
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..k.len() {
                assert_eq!(k[i], k[side * side - 1 - i], "{deg} {len}");
            }
        }
    }

    #[test]
    fn vertical_kernel_is_a_column() {
        let (r, k) = line_kernel(0.0, 5);
        assert_eq!(r, 2);
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(k[y * 5 + x], if x == 2 { 0.2 } else { 0.0 });
            }
        }
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(render_streak_layer((4, 4), 0.0, 1.5, 3, 0.5, 1).is_err());
        assert!(render_streak_layer((4, 4), 0.0, 0.5, 0, 0.5, 1).is_err());
        assert!(render_streak_layer((4, 4), 0.0, 0.5, 3, 0.0, 1).is_err());
        assert!(render_streak_layer((4, 4), 0.0, 0.5, 3, 1.2, 1).is_err());
    }
}
