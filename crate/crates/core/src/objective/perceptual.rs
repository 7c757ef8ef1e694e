//! Feature-space loss through a frozen convolutional extractor.
//!
//! Stage `s` is `[2×2 average pool if s > 1] → conv3×3 → ReLU`; the tapped
//! feature map Φ is the output of stage `tap`. The default extractor uses
//! seeded random weights in place of a pretrained network. Average pooling
//! keeps the map smooth, which finite-difference checks appreciate.

use std::path::Path;

use crate::error::{param_err, Error, Result};
use crate::nn::act::{relu, relu_backward};
use crate::nn::conv::{conv_backward, conv_forward, ConvCache};
use crate::params::{decode_container, encode_container, Init};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 64];
pub const DEFAULT_TAP: usize = 3;
pub const DEFAULT_SEED: u64 = 0x5EED_FEA7;

#[derive(Clone, Debug, PartialEq)]
struct Stage<T> {
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor<T> {
    stages: Vec<Stage<T>>,
    tap: usize,
}

struct StageCache<T> {
    pooled_from: Option<(usize, usize)>,
    conv: ConvCache<T>,
    pre: Tensor<T>,
}

fn avg_pool2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        for i in 0..oh {
            for j in 0..ow {
                let (r0, r1) = (2 * i * w, (2 * i + 1) * w);
                out.push(quarter * (plane[r0 + 2 * j] + plane[r0 + 2 * j + 1] + plane[r1 + 2 * j] + plane[r1 + 2 * j + 1]));
            }
        }
    }
    Tensor::new([n, c, oh, ow], out)
}

fn avg_pool2_backward<T: Real>(dy: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = dy.dims4()?;
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (gp, dp) in dy.data().chunks_exact(oh * ow).zip(dx.chunks_exact_mut(h * w)) {
        for i in 0..oh {
            for j in 0..ow {
                let g = quarter * gp[i * ow + j];
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    dp[(2 * i + di) * w + 2 * j + dj] += g;
                }
            }
        }
    }
    Tensor::new([n, c, h, w], dx)
}

impl<T: Real> PerceptualExtractor<T> {
    /// Random-weight extractor: He-uniform weights `U(±√(6/fan_in))`, zero
    /// biases, drawn from a ChaCha8 stream seeded with `seed`.
    pub fn seeded(widths: &[usize], seed: u64, tap: usize) -> Result<Self> {
        let mut init = Init::new(seed);
        let mut in_ch = 3;
        let mut stages = Vec::with_capacity(widths.len());
        for &out in widths {
            let fan_in = in_ch * 9;
            let weight = init.uniform(&[out, in_ch, 3, 3], (6.0 / fan_in as f64).sqrt());
            stages.push((weight, Some(Tensor::zeros([out]))));
            in_ch = out;
        }
        Self::from_stages(stages, tap)
    }

    /// Explicit weights: `(O×C×3×3 weight, optional bias)` per stage.
    pub fn from_stages(stages: Vec<(Tensor<T>, Option<Tensor<T>>)>, tap: usize) -> Result<Self> {
        if tap == 0 || tap > stages.len() {
            return Err(param_err!("tap stage {tap} outside 1..={}", stages.len()));
        }
        let mut in_ch = 3;
        for (i, (w, b)) in stages.iter().enumerate() {
            match *w.shape() {
                [o, c, 3, 3] if c == in_ch => {
                    if b.as_ref().is_some_and(|b| b.shape() != [o]) {
                        return Err(param_err!("stage {} bias does not match {o} outputs", i + 1));
                    }
                    in_ch = o;
                }
                _ => return Err(param_err!("stage {} weight {:?} is not {}-input 3×3", i + 1, w.shape(), in_ch)),
            }
        }
        Ok(PerceptualExtractor {
            stages: stages.into_iter().map(|(weight, bias)| Stage { weight, bias }).collect(),
            tap,
        })
    }

    pub fn default_seeded() -> Self {
        Self::seeded(&DEFAULT_WIDTHS, DEFAULT_SEED, DEFAULT_TAP).expect("default extractor is valid")
    }

    /// Loads weights from a parameter container with entries
    /// `stage1.weight`, `stage1.bias`, `stage2.weight`, ...
    pub fn load(path: &Path, tap: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut entries = decode_container::<T>(&bytes, path)?;
        let mut stages = Vec::new();
        for i in 1.. {
            let Some(wpos) = entries.iter().position(|e| e.name == format!("stage{i}.weight")) else { break };
            let w = entries.remove(wpos).value;
            let b = entries.iter().position(|e| e.name == format!("stage{i}.bias")).map(|p| entries.remove(p).value);
            stages.push((w, b));
        }
        if let Some(extra) = entries.first() {
            return Err(Error::format(path, format!("unexpected extractor entry `{}`", extra.name)));
        }
        Self::from_stages(stages, tap).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Encodes the weights in the container format read by [`Self::load`].
    pub fn to_bytes(&self) -> Vec<u8> {
        let names: Vec<(String, &Tensor<T>)> = self
            .stages
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                std::iter::once((format!("stage{}.weight", i + 1), &s.weight))
                    .chain(s.bias.as_ref().map(|b| (format!("stage{}.bias", i + 1), b)))
            })
            .collect();
        encode_container(names.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    pub fn tap(&self) -> usize {
        self.tap
    }

    pub fn cast<U: Real>(&self) -> PerceptualExtractor<U> {
        PerceptualExtractor {
            stages: self
                .stages
                .iter()
                .map(|s| Stage { weight: s.weight.cast(), bias: s.bias.as_ref().map(Tensor::cast) })
                .collect(),
            tap: self.tap,
        }
    }

    fn run(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<StageCache<T>>)> {
        let (_, _, h, w) = x.dims4()?;
        let shrink = 1usize << (self.tap - 1);
        if h < shrink || w < shrink {
            return Err(param_err!("{h}x{w} input is too small for a stage-{} perceptual tap", self.tap));
        }
        let mut f = x.clone();
        let mut caches = Vec::with_capacity(self.tap);
        for (i, s) in self.stages[..self.tap].iter().enumerate() {
            let pooled_from = if i > 0 {
                let (_, _, fh, fw) = f.dims4()?;
                f = avg_pool2(&f)?;
                Some((fh, fw))
            } else {
                None
            };
            let (pre, conv) = conv_forward(&f, &s.weight, s.bias.as_ref(), 1, 1)?;
            f = relu(&pre);
            caches.push(StageCache { pooled_from, conv, pre });
        }
        Ok((f, caches))
    }

    /// The tapped feature map Φ(x).
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x)?.0)
    }

    fn backward(&self, caches: &[StageCache<T>], dfeat: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = dfeat.clone();
        for (s, c) in self.stages.iter().zip(caches).rev() {
            let dpre = relu_backward(&c.pre, &g);
            g = conv_backward(&c.conv, &s.weight, &dpre, None)?.0;
            if let Some((h, w)) = c.pooled_from {
                g = avg_pool2_backward(&g, h, w)?;
            }
        }
        Ok(g)
    }
}

/// `(1/N) Σₙ (1/(H_Φ·W_Φ)) Σ_{c,y,x} (Φ(pred) − Φ(target))²` and its gradient
/// with respect to `pred`: squared feature error summed over channels and
/// normalized by the feature map's spatial size, averaged over the batch.
pub fn perceptual_loss<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    extractor: &PerceptualExtractor<T>,
) -> Result<(f64, Tensor<T>)> {
    pred.ensure_same_shape(target, "perceptual loss")?;
    let (fp, caches) = extractor.run(pred)?;
    let ft = extractor.features(target)?;
    let (n, _, fh, fw) = fp.dims4()?;
    let norm = (n * fh * fw) as f64;
    let loss = fp.data().iter().zip(ft.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>() / norm;
    let scale = T::lit(2.0 / norm);
    let dfeat = fp.zip_map(&ft, |a, b| scale * (a - b))?;
    Ok((loss, extractor.backward(&caches, &dfeat)?))
}
