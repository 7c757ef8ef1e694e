//! 2-D convolution (cross-correlation, no kernel flip) via im2col + GEMM.

use crate::error::{shape_err, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{gemm, MatMut, MatRef, Real, Tensor};

use super::{scoped, Block};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(x: &[usize], k: usize, stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err!("conv2d input must be NCHW, got {:?}", x)),
        };
        if stride == 0 {
            return Err(shape_err!("conv2d stride must be >= 1"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err!("conv2d kernel {k} larger than padded input {h}x{w} (pad {pad})"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Geometry { n, c, h, w, k, stride, pad, ho, wo })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.w as isize { T::zero() } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &Geometry, cols: &[T], dx: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

pub struct ConvCache<T> {
    geom: Geometry,
    cols: Vec<T>,
}

fn check_weight<T: Real>(x_shape: &[usize], weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<(usize, usize)> {
    let (o, c, k) = match *weight.shape() {
        [o, c, kh, kw] if kh == kw => (o, c, kh),
        _ => return Err(shape_err!("conv2d weight must be O×C×k×k, got {:?}", weight.shape())),
    };
    if x_shape.len() == 4 && x_shape[1] != c {
        return Err(shape_err!("conv2d expects {c} input channels, got {}", x_shape[1]));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(shape_err!("conv2d bias shape {:?}, expected [{o}]", b.shape()));
        }
    }
    Ok((o, k))
}

pub(crate) fn conv_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let (o, k) = check_weight(x.shape(), weight, bias)?;
    let g = Geometry::new(x.shape(), k, stride, padding)?;
    let (rows, p) = (g.rows(), g.cols());
    let mut cols = vec![T::zero(); g.n * rows * p];
    let mut out = vec![T::zero(); g.n * o * p];
    let in_stride = g.c * g.h * g.w;
    for b in 0..g.n {
        let col = &mut cols[b * rows * p..(b + 1) * rows * p];
        im2col(&g, &x.data()[b * in_stride..(b + 1) * in_stride], col);
        let y = &mut out[b * o * p..(b + 1) * o * p];
        gemm(T::one(), MatRef::new(weight.data(), o, rows), MatRef::new(col, rows, p), T::zero(), MatMut::new(y, o, p));
        if let Some(bias) = bias {
            for (oc, &bv) in bias.data().iter().enumerate() {
                y[oc * p..(oc + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok((Tensor::new([g.n, o, g.ho, g.wo], out)?, ConvCache { geom: g, cols }))
}

/// Accumulates the weight gradient into `dweight` when given; returns
/// `(dx, dbias)`.
pub(crate) fn conv_backward<T: Real>(
    cache: &ConvCache<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    mut dweight: Option<&mut Tensor<T>>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let g = &cache.geom;
    let o = weight.shape()[0];
    if dy.shape() != [g.n, o, g.ho, g.wo] {
        return Err(shape_err!("conv2d upstream gradient {:?} does not match output", dy.shape()));
    }
    let (rows, p) = (g.rows(), g.cols());
    let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
    let mut dbias = vec![T::zero(); o];
    let mut dcols = vec![T::zero(); rows * p];
    let in_stride = g.c * g.h * g.w;
    for b in 0..g.n {
        let dyb = &dy.data()[b * o * p..(b + 1) * o * p];
        let col = &cache.cols[b * rows * p..(b + 1) * rows * p];
        if let Some(dw) = dweight.as_deref_mut() {
            gemm(T::one(), MatRef::new(dyb, o, p), MatRef::new(col, rows, p).t(), T::one(), MatMut::new(dw.data_mut(), o, rows));
        }
        for (oc, v) in dbias.iter_mut().enumerate() {
            *v += dyb[oc * p..(oc + 1) * p].iter().copied().sum::<T>();
        }
        gemm(
            T::one(),
            MatRef::new(weight.data(), o, rows).t(),
            MatRef::new(dyb, o, p),
            T::zero(),
            MatMut::new(&mut dcols, rows, p),
        );
        col2im(g, &dcols, &mut dx[b * in_stride..(b + 1) * in_stride]);
    }
    Ok((Tensor::new([g.n, g.c, g.h, g.w], dx)?, dbias))
}

/// Stateless convolution: `x` is N×C×H×W, `weight` O×C×k×k, `bias` length O.
/// Output spatial size is `floor((H + 2·padding − k)/stride) + 1`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    Ok(conv_forward(x, weight, bias, stride, padding)?.0)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = ps.add(scoped(name, "weight"), init.fan_in(&[out_ch, in_ch, kernel, kernel], fan_in))?;
        let bias = if bias { Some(ps.add(scoped(name, "bias"), Tensor::zeros([out_ch]))?) } else { None };
        Ok(Conv2d { weight, bias, in_ch, out_ch, kernel, stride, padding })
    }

    /// `k×k` convolution, stride 1, padding `k/2`, with bias.
    pub fn same<T: Real>(
        ps: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Result<Self> {
        Self::new(ps, init, name, in_ch, out_ch, kernel, 1, kernel / 2, true)
    }

    pub fn num_params(in_ch: usize, out_ch: usize, kernel: usize, bias: bool) -> usize {
        out_ch * in_ch * kernel * kernel + if bias { out_ch } else { 0 }
    }
}

impl Block for Conv2d {
    type Cache<T: Real> = ConvCache<T>;

    fn forward_train<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        conv_forward(x, ps.value(self.weight), self.bias.map(|b| ps.value(b)), self.stride, self.padding)
    }

    fn backward<T: Real>(&self, ps: &mut ParamStore<T>, cache: &ConvCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (w, dw) = ps.value_and_grad(self.weight);
        let (dx, dbias) = conv_backward(cache, w, dy, Some(dw))?;
        if let Some(b) = self.bias {
            for (g, v) in ps.grad_mut(b).data_mut().iter_mut().zip(dbias) {
                *g += v;
            }
        }
        Ok(dx)
    }
}
