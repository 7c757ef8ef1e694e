//! Pre-norm transformer block:
//! `x₁ = x + MSA(LN₁(x))`, `y = x₁ + MLP(LN₂(x₁))`.

use crate::error::{shape_err, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::{Real, Tensor};

use super::act::{gelu, gelu_backward};
use super::attention::{MhaCache, MultiHeadAttention};
use super::linear::{LayerNorm, LayerNormCache, Linear};
use super::{scoped, Block};

/// `Linear(d, m·d) → GELU → Linear(m·d, d)`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache<T> {
    x: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
}

impl Mlp {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize, ratio: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(ps, init, &scoped(name, "fc1"), dim, dim * ratio, true)?,
            fc2: Linear::new(ps, init, &scoped(name, "fc2"), dim * ratio, dim, true)?,
        })
    }

    pub fn num_params(dim: usize, ratio: usize) -> usize {
        Linear::num_params(dim, dim * ratio, true) + Linear::num_params(dim * ratio, dim, true)
    }
}

impl Block for Mlp {
    type Cache<T: Real> = MlpCache<T>;

    fn forward_train<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, MlpCache<T>)> {
        let pre = self.fc1.forward(ps, x)?;
        let act = gelu(&pre);
        let y = self.fc2.forward(ps, &act)?;
        Ok((y, MlpCache { x: x.clone(), pre, act }))
    }

    fn backward<T: Real>(&self, ps: &mut ParamStore<T>, cache: &MlpCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let dact = self.fc2.backward(ps, &cache.act, dy)?;
        let dpre = gelu_backward(&cache.pre, &dact);
        self.fc1.backward(ps, &cache.x, &dpre)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub dim: usize,
}

pub struct TransformerCache<T> {
    ln1: LayerNormCache<T>,
    attn: MhaCache<T>,
    ln2: LayerNormCache<T>,
    mlp: MlpCache<T>,
}

impl TransformerBlock {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(ps, &scoped(name, "ln1"), dim)?,
            attn: MultiHeadAttention::new(ps, init, &scoped(name, "attn"), dim, heads)?,
            ln2: LayerNorm::new(ps, &scoped(name, "ln2"), dim)?,
            mlp: Mlp::new(ps, init, &scoped(name, "mlp"), dim, mlp_ratio)?,
            dim,
        })
    }

    pub fn num_params(dim: usize, mlp_ratio: usize) -> usize {
        2 * LayerNorm::num_params(dim) + MultiHeadAttention::num_params(dim) + Mlp::num_params(dim, mlp_ratio)
    }
}

impl Block for TransformerBlock {
    type Cache<T: Real> = TransformerCache<T>;

    fn forward_train<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, TransformerCache<T>)> {
        let (_, _, d) = x.dims3()?;
        if d != self.dim {
            return Err(shape_err!("transformer block expects width {}, got {d}", self.dim));
        }
        let (n1, ln1) = self.ln1.forward_train(ps, x)?;
        let (a, attn) = self.attn.forward_train(ps, &n1)?;
        let x1 = x.add(&a)?;
        let (n2, ln2) = self.ln2.forward_train(ps, &x1)?;
        let (m, mlp) = self.mlp.forward_train(ps, &n2)?;
        let y = x1.add(&m)?;
        Ok((y, TransformerCache { ln1, attn, ln2, mlp }))
    }

    fn backward<T: Real>(&self, ps: &mut ParamStore<T>, cache: &TransformerCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let dn2 = self.mlp.backward(ps, &cache.mlp, dy)?;
        let mut dx1 = self.ln2.backward(ps, &cache.ln2, &dn2)?;
        dx1.add_assign(dy)?;
        let dn1 = self.attn.backward(ps, &cache.attn, &dx1)?;
        let mut dx = self.ln1.backward(ps, &cache.ln1, &dn1)?;
        dx.add_assign(&dx1)?;
        Ok(dx)
    }
}
