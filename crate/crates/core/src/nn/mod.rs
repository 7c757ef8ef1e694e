//! Differentiable building blocks with hand-written backward passes.
//!
//! Every block follows the same contract: `forward_train` returns the output
//! together with whatever the backward pass needs, and `backward` consumes
//! that cache plus the upstream gradient, accumulates parameter gradients
//! into the [`ParamStore`], and returns the gradient with respect to the
//! block input.

pub mod act;
pub mod attention;
pub mod channel_attention;
pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod patch;
pub mod resblock;
pub mod restore;
pub mod transformer;

pub use attention::{scaled_dot_attention, MultiHeadAttention};
pub use channel_attention::ChannelAttention;
pub use conv::{conv2d, Conv2d};
pub use linear::{LayerNorm, Linear};
pub use patch::{PatchEmbed, PatchUnembed};
pub use resblock::ResBlock;
pub use restore::{resize_bilinear, RestorationLayer};
pub use transformer::{Mlp, TransformerBlock};

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub trait Block {
    type Cache<T: Real>;

    fn forward_train<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Self::Cache<T>)>;

    fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        cache: &Self::Cache<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>>;

    fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_train(ps, x)?.0)
    }
}

/// Joins a scope prefix and a leaf name with a dot.
pub(crate) fn scoped(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_owned()
    } else {
        format!("{prefix}.{leaf}")
    }
}
