//! Scaled dot-product attention and multi-head self-attention.

use crate::error::{config_err, shape_err, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::{gemm, MatMut, MatRef, Real, Tensor};

use super::linear::Linear;
use super::{scoped, Block};

fn softmax_rows<T: Real>(s: &mut [T], n: usize) {
    for row in s.chunks_exact_mut(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        let inv = T::one() / z;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// `probs = softmax(scale · q kᵀ)` (row-wise), `out = probs · v`.
fn attend<T: Real>(q: MatRef<'_, T>, k: MatRef<'_, T>, v: MatRef<'_, T>, scale: T, probs: &mut [T], out: MatMut<'_, T>) {
    let n = q.rows();
    let m = k.rows();
    gemm(scale, q, k.t(), T::zero(), MatMut::new(probs, n, m));
    softmax_rows(probs, m);
    gemm(T::one(), MatRef::new(probs, n, m), v, T::zero(), out);
}

#[allow(clippy::too_many_arguments)]
fn attend_backward<T: Real>(
    q: MatRef<'_, T>,
    k: MatRef<'_, T>,
    v: MatRef<'_, T>,
    probs: &[T],
    scale: T,
    dout: MatRef<'_, T>,
    dq: MatMut<'_, T>,
    dk: MatMut<'_, T>,
    dv: MatMut<'_, T>,
) {
    let n = q.rows();
    let m = k.rows();
    let p = MatRef::new(probs, n, m);
    gemm(T::one(), p.t(), dout, T::zero(), dv);
    let mut ds = vec![T::zero(); n * m];
    gemm(T::one(), dout, v.t(), T::zero(), MatMut::new(&mut ds, n, m));
    for (ds_row, p_row) in ds.chunks_exact_mut(m).zip(probs.chunks_exact(m)) {
        let dot: T = ds_row.iter().zip(p_row).map(|(&a, &b)| a * b).sum();
        for (d, &pv) in ds_row.iter_mut().zip(p_row) {
            *d = pv * (*d - dot);
        }
    }
    gemm(scale, MatRef::new(&ds, n, m), k, T::zero(), dq);
    gemm(scale, MatRef::new(&ds, n, m).t(), q, T::zero(), dk);
}

fn check_qkv<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (n, dk) = match *q.shape() {
        [n, d] => (n, d),
        _ => return Err(shape_err!("Q must be n×d_k, got {:?}", q.shape())),
    };
    let m = match *k.shape() {
        [m, d] if d == dk => m,
        _ => return Err(shape_err!("K must be m×{dk}, got {:?}", k.shape())),
    };
    let dv = match *v.shape() {
        [mv, d] if mv == m => d,
        _ => return Err(shape_err!("V must be {m}×d_v, got {:?}", v.shape())),
    };
    Ok((n, m, dk, dv))
}

/// `softmax(Q Kᵀ / √d_k) V` for Q: n×d_k, K: m×d_k, V: m×d_v. Also returns
/// the n×m attention matrix.
pub fn scaled_dot_attention_with_probs<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, m, dk, dv) = check_qkv(q, k, v)?;
    let scale = T::one() / T::lit(dk as f64).sqrt();
    let mut probs = vec![T::zero(); n * m];
    let mut out = vec![T::zero(); n * dv];
    attend(
        MatRef::new(q.data(), n, dk),
        MatRef::new(k.data(), m, dk),
        MatRef::new(v.data(), m, dv),
        scale,
        &mut probs,
        MatMut::new(&mut out, n, dv),
    );
    Ok((Tensor::new([n, dv], out)?, Tensor::new([n, m], probs)?))
}

pub fn scaled_dot_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(scaled_dot_attention_with_probs(q, k, v)?.0)
}

/// Gradients `(dQ, dK, dV)` of [`scaled_dot_attention`].
pub fn scaled_dot_attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, m, dk, dv) = check_qkv(q, k, v)?;
    if dout.shape() != [n, dv] {
        return Err(shape_err!("attention upstream gradient {:?}, expected [{n}, {dv}]", dout.shape()));
    }
    let (_, probs) = scaled_dot_attention_with_probs(q, k, v)?;
    let scale = T::one() / T::lit(dk as f64).sqrt();
    let (mut dq, mut dkk, mut dvv) = (vec![T::zero(); n * dk], vec![T::zero(); m * dk], vec![T::zero(); m * dv]);
    attend_backward(
        MatRef::new(q.data(), n, dk),
        MatRef::new(k.data(), m, dk),
        MatRef::new(v.data(), m, dv),
        probs.data(),
        scale,
        MatRef::new(dout.data(), n, dv),
        MatMut::new(&mut dq, n, dk),
        MatMut::new(&mut dkk, m, dk),
        MatMut::new(&mut dvv, m, dv),
    );
    Ok((Tensor::new([n, dk], dq)?, Tensor::new([m, dk], dkk)?, Tensor::new([m, dv], dvv)?))
}

/// Multi-head self-attention over `N × tokens × d_model` inputs. No
/// positional information enters here, so the map is equivariant to token
/// permutations.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub dim: usize,
    pub heads: usize,
}

pub struct MhaCache<T> {
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    probs: Vec<T>,
    concat: Tensor<T>,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(config_err!("{heads} heads do not divide model width {dim}"));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(ps, init, &scoped(name, "q"), dim, dim, true)?,
            wk: Linear::new(ps, init, &scoped(name, "k"), dim, dim, true)?,
            wv: Linear::new(ps, init, &scoped(name, "v"), dim, dim, true)?,
            wo: Linear::new(ps, init, &scoped(name, "out"), dim, dim, true)?,
            dim,
            heads,
        })
    }

    pub fn num_params(dim: usize) -> usize {
        4 * Linear::num_params(dim, dim, true)
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

impl Block for MultiHeadAttention {
    type Cache<T: Real> = MhaCache<T>;

    fn forward_train<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, MhaCache<T>)> {
        let (nb, n, d) = x.dims3()?;
        if d != self.dim {
            return Err(shape_err!("attention expects width {}, got {d}", self.dim));
        }
        let dh = self.head_dim();
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let q = self.wq.forward(ps, x)?;
        let k = self.wk.forward(ps, x)?;
        let v = self.wv.forward(ps, x)?;
        let mut probs = vec![T::zero(); nb * self.heads * n * n];
        let mut concat = vec![T::zero(); nb * n * d];
        for b in 0..nb {
            let base = b * n * d;
            for h in 0..self.heads {
                let off = base + h * dh;
                let pslot = (b * self.heads + h) * n * n;
                attend(
                    MatRef::strided(&q.data()[off..], n, dh, d, 1),
                    MatRef::strided(&k.data()[off..], n, dh, d, 1),
                    MatRef::strided(&v.data()[off..], n, dh, d, 1),
                    scale,
                    &mut probs[pslot..pslot + n * n],
                    MatMut::strided(&mut concat[off..], n, dh, d, 1),
                );
            }
        }
        let concat = Tensor::new([nb, n, d], concat)?;
        let y = self.wo.forward(ps, &concat)?;
        Ok((y, MhaCache { x: x.clone(), q, k, v, probs, concat }))
    }

    fn backward<T: Real>(&self, ps: &mut ParamStore<T>, cache: &MhaCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (nb, n, d) = cache.x.dims3()?;
        let dh = self.head_dim();
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let dconcat = self.wo.backward(ps, &cache.concat, dy)?;
        let mut dq = vec![T::zero(); nb * n * d];
        let mut dk = vec![T::zero(); nb * n * d];
        let mut dv = vec![T::zero(); nb * n * d];
        for b in 0..nb {
            let base = b * n * d;
            for h in 0..self.heads {
                let off = base + h * dh;
                let pslot = (b * self.heads + h) * n * n;
                attend_backward(
                    MatRef::strided(&cache.q.data()[off..], n, dh, d, 1),
                    MatRef::strided(&cache.k.data()[off..], n, dh, d, 1),
                    MatRef::strided(&cache.v.data()[off..], n, dh, d, 1),
                    &cache.probs[pslot..pslot + n * n],
                    scale,
                    MatRef::strided(&dconcat.data()[off..], n, dh, d, 1),
                    MatMut::strided(&mut dq[off..], n, dh, d, 1),
                    MatMut::strided(&mut dk[off..], n, dh, d, 1),
                    MatMut::strided(&mut dv[off..], n, dh, d, 1),
                );
            }
        }
        let shape = [nb, n, d];
        let mut dx = self.wq.backward(ps, &cache.x, &Tensor::new(shape, dq)?)?;
        dx.add_assign(&self.wk.backward(ps, &cache.x, &Tensor::new(shape, dk)?)?)?;
        dx.add_assign(&self.wv.backward(ps, &cache.x, &Tensor::new(shape, dv)?)?)?;
        Ok(dx)
    }
}
