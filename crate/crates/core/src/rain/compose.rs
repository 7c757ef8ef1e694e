//! Rain image formation.
//!
//! Additive: `O = clamp(B + S, 0, 1)`.
//! Accumulation: `O = clamp(t·(B + Σₖ Sₖ ⊙ R) + (1 − t)·A, 0, 1)` with
//! transmittance `t`, binary rain-region mask `R` and per-channel
//! atmospheric light `A`. Streak layers are single-channel and apply
//! equally to R, G and B.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};

use super::image::Image;
use super::streak::{StreakLayer, StreakSpec};

/// Where rain falls.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSpec {
    Full,
    /// Rain only inside the rectangle.
    Rect { top: usize, left: usize, height: usize, width: usize },
}

impl MaskSpec {
    pub fn render(&self, height: usize, width: usize) -> Vec<u8> {
        match *self {
            MaskSpec::Full => vec![1; height * width],
            MaskSpec::Rect { top, left, height: rh, width: rw } => {
                let mut m = vec![0; height * width];
                for y in top.min(height)..(top + rh).min(height) {
                    for x in left.min(width)..(left + rw).min(width) {
                        m[y * width + x] = 1;
                    }
                }
                m
            }
        }
    }
}

/// Fully rendered parameters of the accumulation model.
#[derive(Clone, Debug, PartialEq)]
pub struct RainParams {
    pub transmittance: f64,
    pub layers: Vec<StreakLayer>,
    /// Row-major `H × W`, entries 0 or 1.
    pub region_mask: Vec<u8>,
    pub atmospheric_light: [f64; 3],
}

/// Serializable recipe from which [`RainParams`] are rendered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RainRecipe {
    pub transmittance: f64,
    pub layers: Vec<StreakSpec>,
    pub mask: MaskSpec,
    pub atmospheric_light: [f64; 3],
}

impl RainRecipe {
    pub fn render(&self, height: usize, width: usize) -> Result<RainParams> {
        let layers = self.layers.iter().map(|l| l.render(height, width)).collect::<Result<Vec<_>>>()?;
        let p = RainParams {
            transmittance: self.transmittance,
            layers,
            region_mask: self.mask.render(height, width),
            atmospheric_light: self.atmospheric_light,
        };
        p.validate()?;
        Ok(p)
    }
}

impl RainParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.transmittance) {
            return Err(param_err!("transmittance {} outside [0, 1]", self.transmittance));
        }
        if self.layers.is_empty() {
            return Err(param_err!("at least one streak layer is required"));
        }
        if self.region_mask.iter().any(|&m| m > 1) {
            return Err(param_err!("region mask entries must be 0 or 1"));
        }
        if self.atmospheric_light.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(param_err!("atmospheric light {:?} outside [0, 1]", self.atmospheric_light));
        }
        Ok(())
    }
}

fn check_layer(clean: &Image, layer: &StreakLayer) -> Result<()> {
    if (layer.height, layer.width) != (clean.height(), clean.width()) {
        return Err(shape_err!(
            "streak layer {}x{} does not match image {}x{}",
            layer.height,
            layer.width,
            clean.height(),
            clean.width()
        ));
    }
    Ok(())
}

pub fn compose_additive(clean: &Image, streaks: &StreakLayer) -> Result<Image> {
    check_layer(clean, streaks)?;
    let plane = clean.height() * clean.width();
    let data = clean
        .data()
        .iter()
        .enumerate()
        .map(|(i, &b)| (b + streaks.pixels[i % plane]).clamp(0.0, 1.0))
        .collect();
    Ok(Image::from_raw(clean.height(), clean.width(), data))
}

pub fn compose_heavy(clean: &Image, params: &RainParams) -> Result<Image> {
    params.validate()?;
    for layer in &params.layers {
        check_layer(clean, layer)?;
    }
    let plane = clean.height() * clean.width();
    if params.region_mask.len() != plane {
        return Err(shape_err!("region mask has {} entries, image has {plane} pixels", params.region_mask.len()));
    }
    let t = params.transmittance;
    let data = clean
        .data()
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let (c, p) = (i / plane, i % plane);
            let r = params.region_mask[p] as f64;
            let mut acc = b;
            for layer in &params.layers {
                acc += layer.pixels[p] * r;
            }
            (t * acc + (1.0 - t) * params.atmospheric_light[c]).clamp(0.0, 1.0)
        })
        .collect();
    Ok(Image::from_raw(clean.height(), clean.width(), data))
}
