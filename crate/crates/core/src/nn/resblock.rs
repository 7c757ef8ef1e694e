//! Residual block `y = f(x) + x` with `f = conv3×3 → ReLU → conv3×3`.

use crate::error::{shape_err, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::{Real, Tensor};

use super::act::{relu, relu_backward};
use super::conv::{Conv2d, ConvCache};
use super::{scoped, Block};

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub channels: usize,
}

pub struct ResBlockCache<T> {
    c1: ConvCache<T>,
    pre: Tensor<T>,
    c2: ConvCache<T>,
}

impl ResBlock {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        let conv1 = Conv2d::same(ps, init, &scoped(name, "conv1"), channels, channels, 3)?;
        let conv2 = Conv2d::same(ps, init, &scoped(name, "conv2"), channels, channels, 3)?;
        Ok(ResBlock { conv1, conv2, channels })
    }

    pub fn num_params(channels: usize) -> usize {
        2 * Conv2d::num_params(channels, channels, 3, true)
    }
}

impl Block for ResBlock {
    type Cache<T: Real> = ResBlockCache<T>;

    fn forward_train<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, ResBlockCache<T>)> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.channels {
            return Err(shape_err!("resblock expects {} channels, got {c}", self.channels));
        }
        let (pre, c1) = self.conv1.forward_train(ps, x)?;
        let (mut y, c2) = self.conv2.forward_train(ps, &relu(&pre))?;
        y.add_assign(x)?;
        Ok((y, ResBlockCache { c1, pre, c2 }))
    }

    fn backward<T: Real>(&self, ps: &mut ParamStore<T>, cache: &ResBlockCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let da = self.conv2.backward(ps, &cache.c2, dy)?;
        let dpre = relu_backward(&cache.pre, &da);
        let mut dx = self.conv1.backward(ps, &cache.c1, &dpre)?;
        dx.add_assign(dy)?;
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_block, randomize_params, random_tensor, DEFAULT_STEP};

    fn zeroed(channels: usize) -> (ResBlock, ParamStore<f64>) {
        let mut ps = ParamStore::new();
        let block = ResBlock::new(&mut ps, &mut Init::new(1), "rb", channels).unwrap();
        for id in ps.ids().collect::<Vec<_>>() {
            ps.value_mut(id).fill(0.0);
        }
        (block, ps)
    }

    #[test]
    fn zero_weights_are_identity() {
        let (block, ps) = zeroed(3);
        let x = random_tensor(&[2, 3, 5, 5], 4);
        assert_eq!(block.forward(&ps, &x).unwrap(), x);
    }

    #[test]
    fn zero_weights_pass_gradient_through() {
        let (block, mut ps) = zeroed(3);
        let x = random_tensor(&[1, 3, 4, 4], 4);
        let dy = random_tensor(&[1, 3, 4, 4], 5);
        let (_, cache) = block.forward_train(&ps, &x).unwrap();
        assert_eq!(block.backward(&mut ps, &cache, &dy).unwrap(), dy);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let (block, ps) = zeroed(3);
        assert!(block.forward(&ps, &Tensor::zeros([1, 2, 4, 4])).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut ps = ParamStore::<f64>::new();
        let block = ResBlock::new(&mut ps, &mut Init::new(2), "rb", 2).unwrap();
        randomize_params(&mut ps, 17, 0.5);
        let x = random_tensor(&[1, 2, 4, 4], 3);
        let report = check_block("resblock", &block, &mut ps, &x, DEFAULT_STEP, 1).unwrap();
        assert!(report.max_rel_err() < 1e-6, "{report:?}");
    }
}
