//! Affine maps and layer normalization over the last axis.

use crate::error::{shape_err, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{gemm, MatMut, MatRef, Real, Tensor};

use super::{scoped, Block};

/// `y = x Wᵀ + b` applied to the last axis; `W` is `out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = ps.add(scoped(name, "weight"), init.fan_in(&[out_dim, in_dim], in_dim))?;
        let bias = if bias { Some(ps.add(scoped(name, "bias"), Tensor::zeros([out_dim]))?) } else { None };
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn num_params(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }
}

impl Block for Linear {
    type Cache<T: Real> = Tensor<T>;

    fn forward_train<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let rows = last_axis_rows(x, self.in_dim)?;
        let mut out = vec![T::zero(); rows * self.out_dim];
        gemm(
            T::one(),
            MatRef::new(x.data(), rows, self.in_dim),
            MatRef::new(ps.value(self.weight).data(), self.out_dim, self.in_dim).t(),
            T::zero(),
            MatMut::new(&mut out, rows, self.out_dim),
        );
        if let Some(b) = self.bias {
            let b = ps.value(b).data();
            for row in out.chunks_exact_mut(self.out_dim) {
                row.iter_mut().zip(b).for_each(|(v, &bv)| *v += bv);
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = self.out_dim;
        Ok((Tensor::new(shape, out)?, x.clone()))
    }

    fn backward<T: Real>(&self, ps: &mut ParamStore<T>, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let rows = last_axis_rows(x, self.in_dim)?;
        if dy.len() != rows * self.out_dim {
            return Err(shape_err!("linear upstream gradient {:?} does not match output", dy.shape()));
        }
        {
            let (_, dw) = ps.value_and_grad(self.weight);
            gemm(
                T::one(),
                MatRef::new(dy.data(), rows, self.out_dim).t(),
                MatRef::new(x.data(), rows, self.in_dim),
                T::one(),
                MatMut::new(dw.data_mut(), self.out_dim, self.in_dim),
            );
        }
        if let Some(b) = self.bias {
            let db = ps.grad_mut(b).data_mut();
            for row in dy.data().chunks_exact(self.out_dim) {
                db.iter_mut().zip(row).for_each(|(g, &v)| *g += v);
            }
        }
        let mut dx = vec![T::zero(); x.len()];
        gemm(
            T::one(),
            MatRef::new(dy.data(), rows, self.out_dim),
            MatRef::new(ps.value(self.weight).data(), self.out_dim, self.in_dim),
            T::zero(),
            MatMut::new(&mut dx, rows, self.in_dim),
        );
        Tensor::new(x.shape().to_vec(), dx)
    }
}

fn last_axis_rows<T: Real>(x: &Tensor<T>, dim: usize) -> Result<usize> {
    match x.shape().last() {
        Some(&d) if d == dim => Ok(x.len() / d),
        _ => Err(shape_err!("expected last axis {dim}, got shape {:?}", x.shape())),
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = ps.add(scoped(name, "gamma"), Tensor::full([dim], T::one()))?;
        let beta = ps.add(scoped(name, "beta"), Tensor::zeros([dim]))?;
        Ok(LayerNorm { gamma, beta, dim, eps: Self::EPS })
    }

    pub fn num_params(dim: usize) -> usize {
        2 * dim
    }
}

impl Block for LayerNorm {
    type Cache<T: Real> = LayerNormCache<T>;

    fn forward_train<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, LayerNormCache<T>)> {
        last_axis_rows(x, self.dim)?;
        let d = T::lit(self.dim as f64);
        let eps = T::lit(self.eps);
        let gamma = ps.value(self.gamma).data();
        let beta = ps.value(self.beta).data();
        let mut y = Vec::with_capacity(x.len());
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(x.len() / self.dim);
        for row in x.data().chunks_exact(self.dim) {
            let mean = row.iter().copied().sum::<T>() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (i, &v) in row.iter().enumerate() {
                let xh = (v - mean) * is;
                xhat.push(xh);
                y.push(xh * gamma[i] + beta[i]);
            }
        }
        Ok((Tensor::new(x.shape().to_vec(), y)?, LayerNormCache { xhat, inv_std, shape: x.shape().to_vec() }))
    }

    fn backward<T: Real>(&self, ps: &mut ParamStore<T>, cache: &LayerNormCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if dy.shape() != cache.shape.as_slice() {
            return Err(shape_err!("layernorm upstream gradient {:?} does not match", dy.shape()));
        }
        let d = T::lit(self.dim as f64);
        let gamma = ps.value(self.gamma).data().to_vec();
        let mut dgamma = vec![T::zero(); self.dim];
        let mut dbeta = vec![T::zero(); self.dim];
        let mut dx = Vec::with_capacity(dy.len());
        for ((g_row, xh_row), &is) in dy.data().chunks_exact(self.dim).zip(cache.xhat.chunks_exact(self.dim)).zip(&cache.inv_std) {
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for i in 0..self.dim {
                dgamma[i] += g_row[i] * xh_row[i];
                dbeta[i] += g_row[i];
                let dxh = g_row[i] * gamma[i];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh_row[i];
            }
            let mean_dxh = sum_dxh / d;
            let mean_dxh_xh = sum_dxh_xh / d;
            for i in 0..self.dim {
                let dxh = g_row[i] * gamma[i];
                dx.push(is * (dxh - mean_dxh - xh_row[i] * mean_dxh_xh));
            }
        }
        ps.grad_mut(self.gamma).data_mut().iter_mut().zip(dgamma).for_each(|(g, v)| *g += v);
        ps.grad_mut(self.beta).data_mut().iter_mut().zip(dbeta).for_each(|(g, v)| *g += v);
        Tensor::new(cache.shape.clone(), dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_block, randomize_params, random_tensor, DEFAULT_STEP};

    #[test]
    fn linear_gradients() {
        let mut ps = ParamStore::<f64>::new();
        let lin = Linear::new(&mut ps, &mut Init::new(1), "fc", 3, 5, true).unwrap();
        randomize_params(&mut ps, 2, 1.0);
        let x = random_tensor(&[2, 4, 3], 3);
        let r = check_block("linear", &lin, &mut ps, &x, DEFAULT_STEP, 4).unwrap();
        assert!(r.max_rel_err() < 1e-6, "{r:?}");
    }

    #[test]
    fn layernorm_normalizes_and_checks_gradients() {
        let mut ps = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut ps, "ln", 6).unwrap();
        let x = random_tensor::<f64>(&[3, 6], 5);
        let y = ln.forward(&ps, &x).unwrap();
        for row in y.data().chunks(6) {
            let mean: f64 = row.iter().sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
        }
        randomize_params(&mut ps, 6, 1.0);
        let r = check_block("layernorm", &ln, &mut ps, &x, DEFAULT_STEP, 7).unwrap();
        assert!(r.max_rel_err() < 1e-6, "{r:?}");
    }
}
