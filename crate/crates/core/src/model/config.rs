use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Which encoder paths exist and how they are joined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Both branches, channel-attention fusion.
    Full,
    /// CNN branch only, followed by a 1×1 projection.
    OnlyCnn,
    /// Transformer branch only, followed by a 1×1 projection.
    OnlyTransformer,
    /// Both branches, each 1×1-projected and summed.
    AdditiveFusion,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::OnlyCnn, Variant::OnlyTransformer, Variant::AdditiveFusion];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::OnlyCnn => "only_cnn",
            Variant::OnlyTransformer => "only_transformer",
            Variant::AdditiveFusion => "additive_fusion",
        }
    }

    pub fn has_cnn(self) -> bool {
        self != Variant::OnlyTransformer
    }

    pub fn has_vit(self) -> bool {
        self != Variant::OnlyCnn
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| config_err!("unknown variant `{s}` (expected full, only_cnn, only_transformer, additive_fusion)"))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the shallow features.
    pub base_channels: usize,
    /// Number of ×2 downsampling stages `d`; the decoder has `d` restoration layers.
    pub stages: usize,
    pub cnn_blocks_per_stage: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,
    pub vit_dim: usize,
    /// Transformer MLP expansion ratio.
    pub mlp_ratio: usize,
    /// Patch size of the transformer branch; must equal `2^stages`.
    pub patch: usize,
    pub fusion_reduction: usize,
    /// Token grid of the learned positional embedding, or `None` for no
    /// positional information. Other grids are served by bilinear resampling.
    /// Serialized as `[h, w]` or the string `"none"` so that text formats
    /// without a null can still say "no embedding".
    #[serde(with = "grid_or_none")]
    pub pos_grid: Option<(usize, usize)>,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            stages: 2,
            cnn_blocks_per_stage: 1,
            vit_depth: 2,
            vit_heads: 4,
            vit_dim: 64,
            mlp_ratio: 2,
            patch: 4,
            fusion_reduction: 4,
            pos_grid: Some((16, 16)),
            variant: Variant::Full,
        }
    }
}

mod grid_or_none {
    use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Grid((usize, usize)),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<(usize, usize)>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(g) => Repr::Grid(*g).serialize(s),
            None => Repr::Word("none".into()).serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<(usize, usize)>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Grid(g) => Ok(Some(g)),
            Repr::Word(w) if w == "none" => Ok(None),
            Repr::Word(w) => Err(de::Error::custom(format!("pos_grid must be [h, w] or \"none\", got `{w}`"))),
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used for end-to-end gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            base_channels: 4,
            stages: 1,
            cnn_blocks_per_stage: 1,
            vit_depth: 1,
            vit_heads: 1,
            vit_dim: 8,
            mlp_ratio: 2,
            patch: 2,
            fusion_reduction: 4,
            pos_grid: Some((2, 2)),
            variant: Variant::Full,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Total spatial reduction of the encoder, `2^stages`.
    pub fn factor(&self) -> usize {
        1 << self.stages
    }

    /// Channel width at the deepest resolution.
    pub fn deep_channels(&self) -> usize {
        self.base_channels << self.stages
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(config_err!("base_channels must be positive"));
        }
        if self.stages > 8 {
            return Err(config_err!("stages = {} is unreasonably deep", self.stages));
        }
        if self.patch != self.factor() {
            return Err(config_err!("patch = {} must equal 2^stages = {}", self.patch, self.factor()));
        }
        if self.variant.has_vit() {
            if self.vit_dim == 0 || self.vit_heads == 0 || self.vit_dim % self.vit_heads != 0 {
                return Err(config_err!("vit_heads = {} must divide vit_dim = {}", self.vit_heads, self.vit_dim));
            }
            if self.mlp_ratio == 0 {
                return Err(config_err!("mlp_ratio must be positive"));
            }
            if let Some((gh, gw)) = self.pos_grid {
                if gh == 0 || gw == 0 {
                    return Err(config_err!("pos_grid must be nonempty"));
                }
            }
        }
        if self.variant == Variant::Full {
            let width = 2 * self.deep_channels();
            if self.fusion_reduction == 0 || width % self.fusion_reduction != 0 {
                return Err(config_err!(
                    "fusion_reduction = {} must divide the fused width {width}",
                    self.fusion_reduction
                ));
            }
        }
        Ok(())
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = self.factor();
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(crate::error::shape_err!("input {h}x{w} is not divisible by 2^stages = {f}"));
        }
        Ok(())
    }
}
