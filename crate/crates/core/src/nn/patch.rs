//! Patch tokenization for the transformer branch and its learned inverse.
//!
//! A patch of size `p` at grid cell `(gi, gj)` becomes token
//! `t = gi·(W/p) + gj` whose feature vector is the patch flattened in
//! `(channel, row, col)` order, then projected linearly.

use crate::error::{shape_err, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

use super::linear::Linear;
use super::restore::{resize_bilinear, resize_bilinear_backward};
use super::{scoped, Block};

/// N×C×H×W → N×(H/p·W/p)×(C·p²).
pub fn patchify<T: Real>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(shape_err!("patch size {p} does not divide {h}x{w}"));
    }
    let (gh, gw) = (h / p, w / p);
    let vec_len = c * p * p;
    let mut out = vec![T::zero(); n * gh * gw * vec_len];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let t = (y / p) * gw + xx / p;
                    let k = (ch * p + y % p) * p + xx % p;
                    out[(b * gh * gw + t) * vec_len + k] = x.data()[((b * c + ch) * h + y) * w + xx];
                }
            }
        }
    }
    Tensor::new([n, gh * gw, vec_len], out)
}

/// Inverse of [`patchify`] for a `gh × gw` token grid.
pub fn unpatchify<T: Real>(tokens: &Tensor<T>, gh: usize, gw: usize, c: usize, p: usize) -> Result<Tensor<T>> {
    let (n, nt, vec_len) = tokens.dims3()?;
    if nt != gh * gw || vec_len != c * p * p {
        return Err(shape_err!("cannot fold {:?} into {c}×{gh}p×{gw}p with p={p}", tokens.shape()));
    }
    let (h, w) = (gh * p, gw * p);
    let mut out = vec![T::zero(); n * c * h * w];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let t = (y / p) * gw + xx / p;
                    let k = (ch * p + y % p) * p + xx % p;
                    out[((b * c + ch) * h + y) * w + xx] = tokens.data()[(b * nt + t) * vec_len + k];
                }
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    /// Learned additive positional map, stored `1 × d × G_h × G_w` and
    /// bilinearly resampled when the token grid differs.
    pub pos: Option<ParamId>,
    pub patch: usize,
    pub in_ch: usize,
    pub dim: usize,
    pub pos_grid: (usize, usize),
}

pub struct PatchEmbedCache<T> {
    patches: Tensor<T>,
    grid: (usize, usize),
}

impl PatchEmbed {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        patch: usize,
        dim: usize,
        pos_grid: Option<(usize, usize)>,
    ) -> Result<Self> {
        let proj = Linear::new(ps, init, &scoped(name, "proj"), in_ch * patch * patch, dim, true)?;
        let pos = match pos_grid {
            Some((gh, gw)) => Some(ps.add(scoped(name, "pos"), init.uniform(&[1, dim, gh, gw], 0.02))?),
            None => None,
        };
        Ok(PatchEmbed { proj, pos, patch, in_ch, dim, pos_grid: pos_grid.unwrap_or((0, 0)) })
    }

    pub fn num_params(in_ch: usize, patch: usize, dim: usize, pos_grid: Option<(usize, usize)>) -> usize {
        Linear::num_params(in_ch * patch * patch, dim, true) + pos_grid.map_or(0, |(h, w)| dim * h * w)
    }

    /// Token grid `(H/p, W/p)` for an input of the given spatial size.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(shape_err!("patch size {} does not divide {h}x{w}", self.patch));
        }
        Ok((h / self.patch, w / self.patch))
    }

    fn pos_for<T: Real>(&self, ps: &ParamStore<T>, grid: (usize, usize)) -> Result<Option<Tensor<T>>> {
        let Some(id) = self.pos else { return Ok(None) };
        let pos = ps.value(id);
        if grid == self.pos_grid {
            Ok(Some(pos.clone()))
        } else {
            resize_bilinear(pos, grid.0, grid.1).map(Some)
        }
    }
}

impl Block for PatchEmbed {
    type Cache<T: Real> = PatchEmbedCache<T>;

    fn forward_train<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, PatchEmbedCache<T>)> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_ch {
            return Err(shape_err!("patch embed expects {} channels, got {c}", self.in_ch));
        }
        let grid = self.grid(h, w)?;
        let patches = patchify(x, self.patch)?;
        let (mut tokens, _) = self.proj.forward_train(ps, &patches)?;
        if let Some(pos) = self.pos_for(ps, grid)? {
            let nt = grid.0 * grid.1;
            let pd = pos.data();
            for row_block in tokens.data_mut().chunks_exact_mut(nt * self.dim) {
                for t in 0..nt {
                    for ch in 0..self.dim {
                        row_block[t * self.dim + ch] += pd[ch * nt + t];
                    }
                }
            }
        }
        Ok((tokens, PatchEmbedCache { patches, grid }))
    }

    fn backward<T: Real>(&self, ps: &mut ParamStore<T>, cache: &PatchEmbedCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if let Some(id) = self.pos {
            let nt = cache.grid.0 * cache.grid.1;
            let mut dpos = Tensor::zeros([1, self.dim, cache.grid.0, cache.grid.1]);
            for row_block in dy.data().chunks_exact(nt * self.dim) {
                for t in 0..nt {
                    for ch in 0..self.dim {
                        dpos.data_mut()[ch * nt + t] += row_block[t * self.dim + ch];
                    }
                }
            }
            if cache.grid != self.pos_grid {
                dpos = resize_bilinear_backward(&dpos, self.pos_grid.0, self.pos_grid.1)?;
            }
            ps.grad_mut(id).add_assign(&dpos)?;
        }
        let dpatches = self.proj.backward(ps, &cache.patches, dy)?;
        unpatchify(&dpatches, cache.grid.0, cache.grid.1, self.in_ch, self.patch)
    }
}

/// Learned projection from tokens back to a feature map: each token becomes
/// a `p × p` patch of `out_ch` channels.
#[derive(Clone, Debug)]
pub struct PatchUnembed {
    pub proj: Linear,
    pub patch: usize,
    pub out_ch: usize,
    pub dim: usize,
}

pub struct PatchUnembedCache<T> {
    tokens: Tensor<T>,
    grid: (usize, usize),
}

impl PatchUnembed {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        out_ch: usize,
        patch: usize,
    ) -> Result<Self> {
        let proj = Linear::new(ps, init, &scoped(name, "proj"), dim, out_ch * patch * patch, true)?;
        Ok(PatchUnembed { proj, patch, out_ch, dim })
    }

    pub fn num_params(dim: usize, out_ch: usize, patch: usize) -> usize {
        Linear::num_params(dim, out_ch * patch * patch, true)
    }

    pub fn forward_train<T: Real>(
        &self,
        ps: &ParamStore<T>,
        tokens: &Tensor<T>,
        grid: (usize, usize),
    ) -> Result<(Tensor<T>, PatchUnembedCache<T>)> {
        let (_, nt, _) = tokens.dims3()?;
        if nt != grid.0 * grid.1 {
            return Err(shape_err!("{nt} tokens do not fill a {}x{} grid", grid.0, grid.1));
        }
        let vecs = self.proj.forward(ps, tokens)?;
        let y = unpatchify(&vecs, grid.0, grid.1, self.out_ch, self.patch)?;
        Ok((y, PatchUnembedCache { tokens: tokens.clone(), grid }))
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, tokens: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
        Ok(self.forward_train(ps, tokens, grid)?.0)
    }

    pub fn backward<T: Real>(&self, ps: &mut ParamStore<T>, cache: &PatchUnembedCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let dvecs = patchify(dy, self.patch)?;
        if dvecs.shape()[1] != cache.grid.0 * cache.grid.1 {
            return Err(shape_err!("unembed upstream gradient {:?} does not match grid", dy.shape()));
        }
        self.proj.backward(ps, &cache.tokens, &dvecs)
    }
}
