//! The dual-path network.
//!
//! ```text
//! rainy ─ conv3×3 ─ resblock ─┬──────────────────────────────────────────┐ skip
//!                             ├─ CNN: d × [stride-2 conv, resblocks] ─┐    │
//!                             └─ ViT: embed → blocks → unembed ───────┴ fuse
//!                                                                      │    │
//!                               d × restoration layer (×2 up) ─────────┘    │
//!                               concat with skip → conv3×3 → conv3×3 → + rainy
//! ```
//!
//! The CNN branch doubles its width at every stage, so both branches meet at
//! `base_channels · 2^d` channels and `H/2^d × W/2^d` resolution. Training
//! output is unclamped; [`Model::forward`] clamps to `[0, 1]`.

mod checkpoint;
mod config;

use std::collections::BTreeMap;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, Section};
pub use config::{ModelConfig, Variant};

use crate::error::{shape_err, Error, Result};
use crate::nn::channel_attention::ChannelAttentionCache;
use crate::nn::conv::ConvCache;
use crate::nn::patch::{PatchEmbedCache, PatchUnembedCache};
use crate::nn::resblock::ResBlockCache;
use crate::nn::restore::RestorationCache;
use crate::nn::transformer::TransformerCache;
use crate::nn::{
    scoped, Block, ChannelAttention, Conv2d, PatchEmbed, PatchUnembed, ResBlock, RestorationLayer, TransformerBlock,
};
use crate::params::{Init, ParamStore};
use crate::rain::Image;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
struct CnnStage {
    down: Conv2d,
    blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
struct VitBranch {
    embed: PatchEmbed,
    blocks: Vec<TransformerBlock>,
    unembed: PatchUnembed,
}

#[derive(Clone, Debug)]
enum Fusion {
    Attention { res1: ResBlock, res2: ResBlock, ca: ChannelAttention, proj: Conv2d },
    Additive { cnn_proj: Conv2d, vit_proj: Conv2d },
    Single { proj: Conv2d },
}

/// Network structure plus its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    stem: Conv2d,
    stem_res: ResBlock,
    cnn: Vec<CnnStage>,
    vit: Option<VitBranch>,
    fusion: Fusion,
    decoder: Vec<RestorationLayer>,
    merge: Conv2d,
    head: Conv2d,
}

struct VitCache<T> {
    embed: PatchEmbedCache<T>,
    blocks: Vec<TransformerCache<T>>,
    unembed: PatchUnembedCache<T>,
}

enum FusionCache<T> {
    Attention { res1: ResBlockCache<T>, res2: ResBlockCache<T>, ca: ChannelAttentionCache<T>, proj: ConvCache<T> },
    Additive { cnn: ConvCache<T>, vit: ConvCache<T> },
    Single(ConvCache<T>),
}

/// Everything [`Model::backward`] needs from a training forward pass.
pub struct ForwardCache<T> {
    stem: ConvCache<T>,
    stem_res: ResBlockCache<T>,
    cnn: Vec<(ConvCache<T>, Vec<ResBlockCache<T>>)>,
    vit: Option<VitCache<T>>,
    fusion: FusionCache<T>,
    decoder: Vec<RestorationCache<T>>,
    merge: ConvCache<T>,
    head: ConvCache<T>,
}

impl<T: Real> Model<T> {
    /// Builds a freshly initialized model; the same `(config, seed)` always
    /// yields the same parameter bytes.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let mut init = Init::new(seed);
        let b = config.base_channels;
        let deep = config.deep_channels();

        let stem = Conv2d::same(&mut ps, &mut init, "stem.conv", 3, b, 3)?;
        let stem_res = ResBlock::new(&mut ps, &mut init, "stem.res", b)?;

        let mut cnn = Vec::new();
        if config.variant.has_cnn() {
            let mut c = b;
            for s in 0..config.stages {
                let name = format!("cnn.stage{}", s + 1);
                let down = Conv2d::new(&mut ps, &mut init, &scoped(&name, "down"), c, 2 * c, 3, 2, 1, true)?;
                c *= 2;
                let blocks = (0..config.cnn_blocks_per_stage)
                    .map(|i| ResBlock::new(&mut ps, &mut init, &scoped(&name, &format!("res{}", i + 1)), c))
                    .collect::<Result<_>>()?;
                cnn.push(CnnStage { down, blocks });
            }
        }

        let vit = if config.variant.has_vit() {
            let embed = PatchEmbed::new(&mut ps, &mut init, "vit.embed", b, config.patch, config.vit_dim, config.pos_grid)?;
            let blocks = (0..config.vit_depth)
                .map(|i| {
                    TransformerBlock::new(
                        &mut ps,
                        &mut init,
                        &format!("vit.block{}", i + 1),
                        config.vit_dim,
                        config.vit_heads,
                        config.mlp_ratio,
                    )
                })
                .collect::<Result<_>>()?;
            let unembed = PatchUnembed::new(&mut ps, &mut init, "vit.unembed", config.vit_dim, deep, 1)?;
            Some(VitBranch { embed, blocks, unembed })
        } else {
            None
        };

        let fusion = match config.variant {
            Variant::Full => Fusion::Attention {
                res1: ResBlock::new(&mut ps, &mut init, "fusion.res1", 2 * deep)?,
                res2: ResBlock::new(&mut ps, &mut init, "fusion.res2", 2 * deep)?,
                ca: ChannelAttention::new(&mut ps, &mut init, "fusion.ca", 2 * deep, config.fusion_reduction)?,
                proj: Conv2d::same(&mut ps, &mut init, "fusion.proj", 2 * deep, deep, 1)?,
            },
            Variant::AdditiveFusion => Fusion::Additive {
                cnn_proj: Conv2d::same(&mut ps, &mut init, "fusion.cnn_proj", deep, deep, 1)?,
                vit_proj: Conv2d::new(&mut ps, &mut init, "fusion.vit_proj", deep, deep, 1, 1, 0, false)?,
            },
            Variant::OnlyCnn | Variant::OnlyTransformer => {
                Fusion::Single { proj: Conv2d::same(&mut ps, &mut init, "fusion.proj", deep, deep, 1)? }
            }
        };

        let mut decoder = Vec::new();
        let mut c = deep;
        for i in 0..config.stages {
            decoder.push(RestorationLayer::halving(&mut ps, &mut init, &format!("decoder.layer{}", i + 1), c)?);
            c /= 2;
        }
        let merge = Conv2d::same(&mut ps, &mut init, "merge", 2 * b, b, 3)?;
        let head = Conv2d::same(&mut ps, &mut init, "head", b, 3, 3)?;

        Ok(Model { config: config.clone(), params: ps, stem, stem_res, cnn, vit, fusion, decoder, merge, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Same structure with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem.clone(),
            stem_res: self.stem_res.clone(),
            cnn: self.cnn.clone(),
            vit: self.vit.clone(),
            fusion: self.fusion.clone(),
            decoder: self.decoder.clone(),
            merge: self.merge.clone(),
            head: self.head.clone(),
        }
    }

    /// Names accepted by [`Model::capture_activations`] for this variant.
    pub fn probe_names(&self) -> Vec<String> {
        let mut names = vec!["shallow".to_owned()];
        for i in 0..self.cnn.len() {
            names.push(format!("cnn.stage{}", i + 1));
        }
        if !self.cnn.is_empty() {
            names.push("cnn".into());
        }
        if let Some(vit) = &self.vit {
            names.push("vit.embed".into());
            for i in 0..vit.blocks.len() {
                names.push(format!("vit.block{}", i + 1));
            }
            names.push("vit".into());
        }
        if matches!(self.fusion, Fusion::Attention { .. }) {
            names.push("fusion.gate".into());
        }
        names.push("fused".into());
        for i in 0..self.decoder.len() {
            names.push(format!("decoder.layer{}", i + 1));
        }
        names.extend(["merged", "residual", "output"].map(String::from));
        names
    }

    fn run(&self, x: &Tensor<T>, rec: &mut dyn FnMut(&str, &Tensor<T>)) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(shape_err!("model expects 3 input channels, got {c}"));
        }
        self.config.check_input(h, w)?;
        let ps = &self.params;

        let (s0, stem) = self.stem.forward_train(ps, x)?;
        let (shallow, stem_res) = self.stem_res.forward_train(ps, &s0)?;
        rec("shallow", &shallow);

        let mut cnn_cache = Vec::with_capacity(self.cnn.len());
        let mut cnn_feat = None;
        if !self.cnn.is_empty() {
            let mut f = shallow.clone();
            for (i, stage) in self.cnn.iter().enumerate() {
                let (mut g, dc) = stage.down.forward_train(ps, &f)?;
                let mut rcs = Vec::with_capacity(stage.blocks.len());
                for blk in &stage.blocks {
                    let (o, rc) = blk.forward_train(ps, &g)?;
                    g = o;
                    rcs.push(rc);
                }
                rec(&format!("cnn.stage{}", i + 1), &g);
                cnn_cache.push((dc, rcs));
                f = g;
            }
            rec("cnn", &f);
            cnn_feat = Some(f);
        }

        let mut vit_cache = None;
        let mut vit_feat = None;
        if let Some(vit) = &self.vit {
            let grid = vit.embed.grid(h, w)?;
            let (mut t, embed) = vit.embed.forward_train(ps, &shallow)?;
            rec("vit.embed", &t);
            let mut blocks = Vec::with_capacity(vit.blocks.len());
            for (i, blk) in vit.blocks.iter().enumerate() {
                let (o, bc) = blk.forward_train(ps, &t)?;
                t = o;
                rec(&format!("vit.block{}", i + 1), &t);
                blocks.push(bc);
            }
            let (f, unembed) = vit.unembed.forward_train(ps, &t, grid)?;
            rec("vit", &f);
            vit_cache = Some(VitCache { embed, blocks, unembed });
            vit_feat = Some(f);
        }

        let (fused, fusion) = match &self.fusion {
            Fusion::Attention { res1, res2, ca, proj } => {
                let (cf, vf) = (cnn_feat.as_ref().unwrap(), vit_feat.as_ref().unwrap());
                let cat = Tensor::concat_channels(&[cf, vf])?;
                let (a, r1) = res1.forward_train(ps, &cat)?;
                let (b, r2) = res2.forward_train(ps, &a)?;
                let (g, cac) = ca.forward_train(ps, &b)?;
                rec("fusion.gate", &Tensor::new([x.shape()[0], 2 * self.config.deep_channels()], cac.gate().to_vec())?);
                let (y, pc) = proj.forward_train(ps, &g)?;
                (y, FusionCache::Attention { res1: r1, res2: r2, ca: cac, proj: pc })
            }
            Fusion::Additive { cnn_proj, vit_proj } => {
                let (a, cc) = cnn_proj.forward_train(ps, cnn_feat.as_ref().unwrap())?;
                let (b, vc) = vit_proj.forward_train(ps, vit_feat.as_ref().unwrap())?;
                (a.add(&b)?, FusionCache::Additive { cnn: cc, vit: vc })
            }
            Fusion::Single { proj } => {
                let input = cnn_feat.as_ref().or(vit_feat.as_ref()).unwrap();
                let (y, pc) = proj.forward_train(ps, input)?;
                (y, FusionCache::Single(pc))
            }
        };
        rec("fused", &fused);

        let mut d = fused;
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for (i, layer) in self.decoder.iter().enumerate() {
            let (o, lc) = layer.forward_train(ps, &d)?;
            d = o;
            rec(&format!("decoder.layer{}", i + 1), &d);
            decoder.push(lc);
        }
        let cat = Tensor::concat_channels(&[&d, &shallow])?;
        let (merged, merge) = self.merge.forward_train(ps, &cat)?;
        rec("merged", &merged);
        let (residual, head) = self.head.forward_train(ps, &merged)?;
        rec("residual", &residual);
        let y = x.add(&residual)?;

        Ok((
            y,
            ForwardCache { stem, stem_res, cnn: cnn_cache, vit: vit_cache, fusion, decoder, merge, head },
        ))
    }

    /// Training forward: unclamped `rainy + residual` and the cache for
    /// [`Model::backward`].
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.run(x, &mut |_, _| {})
    }

    /// Inference: prediction clamped to `[0, 1]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_train(x)?.0.clamp(T::zero(), T::one()))
    }

    /// Inference that also records the named intermediate tensors. The
    /// returned `"output"` entry equals [`Model::forward`] bit for bit.
    pub fn capture_activations(&self, x: &Tensor<T>, probes: &[&str]) -> Result<BTreeMap<String, Tensor<T>>> {
        let known = self.probe_names();
        if let Some(bad) = probes.iter().find(|p| !known.iter().any(|k| k == *p)) {
            return Err(Error::Lookup(format!(
                "no probe `{bad}` in a {} model (available: {})",
                self.config.variant,
                known.join(", ")
            )));
        }
        let mut out = BTreeMap::new();
        let (y, _) = self.run(x, &mut |name, t| {
            if probes.contains(&name) {
                out.insert(name.to_owned(), t.clone());
            }
        })?;
        if probes.contains(&"output") {
            out.insert("output".into(), y.clamp(T::zero(), T::one()));
        }
        Ok(out)
    }

    /// Accumulates parameter gradients for upstream gradient `dy` of the
    /// training output and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, cache: &ForwardCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let ps = &mut self.params;
        let b = self.config.base_channels;
        let deep = self.config.deep_channels();

        let dmerged = self.head.backward(ps, &cache.head, dy)?;
        let dcat = self.merge.backward(ps, &cache.merge, &dmerged)?;
        let mut parts = dcat.split_channels(&[b, b])?.into_iter();
        let mut dd = parts.next().unwrap();
        let mut dshallow = parts.next().unwrap();

        for (layer, lc) in self.decoder.iter().zip(&cache.decoder).rev() {
            dd = layer.backward(ps, lc, &dd)?;
        }

        let (dcnn, dvit) = match (&self.fusion, &cache.fusion) {
            (Fusion::Attention { res1, res2, ca, proj }, FusionCache::Attention { res1: c1, res2: c2, ca: cc, proj: pc }) => {
                let dg = proj.backward(ps, pc, &dd)?;
                let db = ca.backward(ps, cc, &dg)?;
                let da = res2.backward(ps, c2, &db)?;
                let dcat = res1.backward(ps, c1, &da)?;
                let mut it = dcat.split_channels(&[deep, deep])?.into_iter();
                (it.next(), it.next())
            }
            (Fusion::Additive { cnn_proj, vit_proj }, FusionCache::Additive { cnn, vit }) => {
                (Some(cnn_proj.backward(ps, cnn, &dd)?), Some(vit_proj.backward(ps, vit, &dd)?))
            }
            (Fusion::Single { proj }, FusionCache::Single(pc)) => {
                let g = proj.backward(ps, pc, &dd)?;
                if self.cnn.is_empty() { (None, Some(g)) } else { (Some(g), None) }
            }
            _ => unreachable!("fusion cache does not match fusion kind"),
        };

        if let Some(mut g) = dcnn {
            for (stage, (dc, rcs)) in self.cnn.iter().zip(&cache.cnn).rev() {
                for (blk, rc) in stage.blocks.iter().zip(rcs).rev() {
                    g = blk.backward(ps, rc, &g)?;
                }
                g = stage.down.backward(ps, dc, &g)?;
            }
            dshallow.add_assign(&g)?;
        }
        if let (Some(g), Some(vit), Some(vc)) = (dvit, &self.vit, &cache.vit) {
            let mut dt = vit.unembed.backward(ps, &vc.unembed, &g)?;
            for (blk, bc) in vit.blocks.iter().zip(&vc.blocks).rev() {
                dt = blk.backward(ps, bc, &dt)?;
            }
            dshallow.add_assign(&vit.embed.backward(ps, &vc.embed, &dt)?)?;
        }

        let ds0 = self.stem_res.backward(ps, &cache.stem_res, &dshallow)?;
        let mut dx = self.stem.backward(ps, &cache.stem, &ds0)?;
        dx.add_assign(dy)?;
        Ok(dx)
    }

    /// Bottom/right padding that makes an `h × w` input divisible by `2^stages`.
    pub fn padding_for(&self, h: usize, w: usize) -> (usize, usize) {
        let f = self.config.factor();
        (h.next_multiple_of(f) - h, w.next_multiple_of(f) - w)
    }

    /// Derains an image of any size: reflect-pads to a multiple of
    /// `2^stages`, runs inference and crops back.
    pub fn derain(&self, img: &Image) -> Result<Image> {
        let (h, w) = (img.height(), img.width());
        let (ph, pw) = self.padding_for(h, w);
        let x = img.to_tensor::<T>();
        let y = if (ph, pw) == (0, 0) {
            self.forward(&x)?
        } else {
            crop(&self.forward(&pad_reflect(&x, h + ph, w + pw)?)?, h, w)?
        };
        Image::from_tensor(&y)
    }

    /// Zeroes the output head so the model predicts `output = input`.
    pub fn zero_head(&mut self) {
        self.params.value_mut(self.head.weight).fill(T::zero());
        if let Some(b) = self.head.bias {
            self.params.value_mut(b).fill(T::zero());
        }
    }

    /// Zeroes the learned positional embedding, if any.
    pub fn zero_positional(&mut self) {
        if let Some(pos) = self.vit.as_ref().and_then(|v| v.embed.pos) {
            self.params.value_mut(pos).fill(T::zero());
        }
    }
}

/// Mirror index into `0..n` without repeating the edge sample
/// (`… 2 1 | 0 1 2 … n−1 | n−2 …`).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n { m } else { period - m }
}

/// Extends an NCHW tensor at the bottom and right to `out_h × out_w` by
/// reflection.
pub fn pad_reflect<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if out_h < h || out_w < w {
        return Err(shape_err!("cannot pad {h}x{w} down to {out_h}x{out_w}"));
    }
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks_exact(h * w) {
        for y in 0..out_h {
            let row = &plane[reflect(y, h) * w..(reflect(y, h) + 1) * w];
            out.extend((0..out_w).map(|xx| row[reflect(xx, w)]));
        }
    }
    Tensor::new([n, c, out_h, out_w], out)
}

/// Top-left `h × w` window of an NCHW tensor.
pub fn crop<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, ih, iw) = x.dims4()?;
    if h > ih || w > iw {
        return Err(shape_err!("cannot crop {ih}x{iw} to {h}x{w}"));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in x.data().chunks_exact(ih * iw) {
        for y in 0..h {
            out.extend_from_slice(&plane[y * iw..y * iw + w]);
        }
    }
    Tensor::new([n, c, h, w], out)
}
