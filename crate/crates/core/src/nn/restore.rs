//! Bilinear resizing and the decoder's restoration layer
//! (`upsample ×2 → conv3×3 → GELU → conv3×3`).
//!
//! Resizing uses half-pixel centers (the `align_corners = false`
//! convention): output index `o` samples source coordinate
//! `(o + 0.5)·in/out − 0.5`, clamped below at 0, with the upper neighbour
//! clamped to the last row/column.

use crate::error::{shape_err, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::{Real, Tensor};

use super::act::{gelu, gelu_backward};
use super::conv::{Conv2d, ConvCache};
use super::{scoped, Block};

#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = src - lo as f64;
            Tap { lo, hi, w_lo: 1.0 - frac, w_hi: frac }
        })
        .collect()
}

/// Bilinear resize of an NCHW tensor to `out_h × out_w`.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(shape_err!("cannot resize {h}x{w} to {out_h}x{out_w}"));
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks_exact(h * w) {
        for t in &ty {
            let (wl, wh) = (T::lit(t.w_lo), T::lit(t.w_hi));
            let r0 = &plane[t.lo * w..(t.lo + 1) * w];
            let r1 = &plane[t.hi * w..(t.hi + 1) * w];
            for s in &tx {
                let (sl, sh) = (T::lit(s.w_lo), T::lit(s.w_hi));
                out.push(wl * (sl * r0[s.lo] + sh * r0[s.hi]) + wh * (sl * r1[s.lo] + sh * r1[s.hi]));
            }
        }
    }
    Tensor::new([n, c, out_h, out_w], out)
}

/// Adjoint of [`resize_bilinear`]: maps an output gradient back to the
/// `in_h × in_w` grid.
pub fn resize_bilinear_backward<T: Real>(dy: &Tensor<T>, in_h: usize, in_w: usize) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = dy.dims4()?;
    let ty = taps(in_h, oh);
    let tx = taps(in_w, ow);
    let mut dx = vec![T::zero(); n * c * in_h * in_w];
    for (gplane, dplane) in dy.data().chunks_exact(oh * ow).zip(dx.chunks_exact_mut(in_h * in_w)) {
        for (oy, t) in ty.iter().enumerate() {
            let (wl, wh) = (T::lit(t.w_lo), T::lit(t.w_hi));
            for (ox, s) in tx.iter().enumerate() {
                let g = gplane[oy * ow + ox];
                let (sl, sh) = (T::lit(s.w_lo), T::lit(s.w_hi));
                dplane[t.lo * in_w + s.lo] += g * wl * sl;
                dplane[t.lo * in_w + s.hi] += g * wl * sh;
                dplane[t.hi * in_w + s.lo] += g * wh * sl;
                dplane[t.hi * in_w + s.hi] += g * wh * sh;
            }
        }
    }
    Tensor::new([n, c, in_h, in_w], dx)
}

#[derive(Clone, Debug)]
pub struct RestorationLayer {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub in_ch: usize,
    pub out_ch: usize,
}

pub struct RestorationCache<T> {
    in_hw: (usize, usize),
    c1: ConvCache<T>,
    pre: Tensor<T>,
    c2: ConvCache<T>,
}

impl RestorationLayer {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<Self> {
        Ok(RestorationLayer {
            conv1: Conv2d::same(ps, init, &scoped(name, "conv1"), in_ch, out_ch, 3)?,
            conv2: Conv2d::same(ps, init, &scoped(name, "conv2"), out_ch, out_ch, 3)?,
            in_ch,
            out_ch,
        })
    }

    /// Halving layer: `C → C/2`.
    pub fn halving<T: Real>(ps: &mut ParamStore<T>, init: &mut Init, name: &str, in_ch: usize) -> Result<Self> {
        Self::new(ps, init, name, in_ch, (in_ch / 2).max(1))
    }

    pub fn num_params(in_ch: usize, out_ch: usize) -> usize {
        Conv2d::num_params(in_ch, out_ch, 3, true) + Conv2d::num_params(out_ch, out_ch, 3, true)
    }
}

impl Block for RestorationLayer {
    type Cache<T: Real> = RestorationCache<T>;

    fn forward_train<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, RestorationCache<T>)> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_ch {
            return Err(shape_err!("restoration layer expects {} channels, got {c}", self.in_ch));
        }
        let up = resize_bilinear(x, 2 * h, 2 * w)?;
        let (pre, c1) = self.conv1.forward_train(ps, &up)?;
        let (y, c2) = self.conv2.forward_train(ps, &gelu(&pre))?;
        Ok((y, RestorationCache { in_hw: (h, w), c1, pre, c2 }))
    }

    fn backward<T: Real>(&self, ps: &mut ParamStore<T>, cache: &RestorationCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let dact = self.conv2.backward(ps, &cache.c2, dy)?;
        let dpre = gelu_backward(&cache.pre, &dact);
        let dup = self.conv1.backward(ps, &cache.c1, &dpre)?;
        resize_bilinear_backward(&dup, cache.in_hw.0, cache.in_hw.1)
    }
}
