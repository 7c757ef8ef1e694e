//! Channel attention: `F' = M_c(F) ⊗ F` with
//! `M_c(F) = σ(W₁ ReLU(W₀ avg(F)) + W₁ ReLU(W₀ max(F)))`.
//!
//! `W₀: C → C/r` and `W₁: C/r → C` are bias-free and shared between the
//! average- and max-pooled paths. Pooling is global over H×W and the gate is
//! broadcast back over the spatial grid.

use crate::error::{config_err, shape_err, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

use super::act::sigmoid;
use super::{scoped, Block};

#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub w0: ParamId,
    pub w1: ParamId,
    pub channels: usize,
    pub hidden: usize,
}

pub struct ChannelAttentionCache<T> {
    x: Tensor<T>,
    avg: Vec<T>,
    max: Vec<T>,
    argmax: Vec<usize>,
    pre_avg: Vec<T>,
    pre_max: Vec<T>,
    gate: Vec<T>,
}

impl<T: Real> ChannelAttentionCache<T> {
    /// The N×C gate `M_c(F)`.
    pub fn gate(&self) -> &[T] {
        &self.gate
    }
}

// y[n, o] = Σ_i w[o, i] · x[n, i]
fn matvec<T: Real>(w: &[T], rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    (0..rows).map(|o| (0..cols).map(|i| w[o * cols + i] * x[i]).sum()).collect()
}

// y[i] = Σ_o w[o, i] · x[o]
fn matvec_t<T: Real>(w: &[T], rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); cols];
    for o in 0..rows {
        for i in 0..cols {
            y[i] += w[o * cols + i] * x[o];
        }
    }
    y
}

fn outer_acc<T: Real>(g: &mut [T], a: &[T], b: &[T]) {
    for (o, &av) in a.iter().enumerate() {
        for (i, &bv) in b.iter().enumerate() {
            g[o * b.len() + i] += av * bv;
        }
    }
}

impl ChannelAttention {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(config_err!("reduction ratio {reduction} must divide channel count {channels}"));
        }
        let hidden = channels / reduction;
        let w0 = ps.add(scoped(name, "w0"), init.fan_in(&[hidden, channels], channels))?;
        let w1 = ps.add(scoped(name, "w1"), init.fan_in(&[channels, hidden], hidden))?;
        Ok(ChannelAttention { w0, w1, channels, hidden })
    }

    pub fn num_params(channels: usize, reduction: usize) -> usize {
        2 * channels * (channels / reduction)
    }

    /// Computes only the gate `M_c(F)`, shape N×C.
    pub fn gate<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, _, _) = x.dims4()?;
        let (_, cache) = self.forward_train(ps, x)?;
        Tensor::new([n, c], cache.gate)
    }
}

impl Block for ChannelAttention {
    type Cache<T: Real> = ChannelAttentionCache<T>;

    fn forward_train<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, ChannelAttentionCache<T>)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(shape_err!("channel attention expects {} channels, got {c}", self.channels));
        }
        let hw = h * w;
        let inv_hw = T::lit(1.0 / hw as f64);
        let w0 = ps.value(self.w0).data();
        let w1 = ps.value(self.w1).data();
        let mut avg = Vec::with_capacity(n * c);
        let mut max = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for plane in x.data().chunks_exact(hw) {
            avg.push(plane.iter().copied().sum::<T>() * inv_hw);
            let (mut best, mut at) = (plane[0], 0);
            for (i, &v) in plane.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    at = i;
                }
            }
            max.push(best);
            argmax.push(at);
        }
        let mut pre_avg = Vec::with_capacity(n * self.hidden);
        let mut pre_max = Vec::with_capacity(n * self.hidden);
        let mut gate = Vec::with_capacity(n * c);
        for b in 0..n {
            let pa = matvec(w0, self.hidden, c, &avg[b * c..(b + 1) * c]);
            let pm = matvec(w0, self.hidden, c, &max[b * c..(b + 1) * c]);
            let ha: Vec<T> = pa.iter().map(|v| v.max(T::zero())).collect();
            let hm: Vec<T> = pm.iter().map(|v| v.max(T::zero())).collect();
            let za = matvec(w1, c, self.hidden, &ha);
            let zm = matvec(w1, c, self.hidden, &hm);
            gate.extend(za.iter().zip(&zm).map(|(&a, &m)| sigmoid(a + m)));
            pre_avg.extend(pa);
            pre_max.extend(pm);
        }
        let mut y = x.clone();
        for (plane, &g) in y.data_mut().chunks_exact_mut(hw).zip(&gate) {
            plane.iter_mut().for_each(|v| *v *= g);
        }
        Ok((y, ChannelAttentionCache { x: x.clone(), avg, max, argmax, pre_avg, pre_max, gate }))
    }

    fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        cache: &ChannelAttentionCache<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        cache.x.ensure_same_shape(dy, "channel attention backward")?;
        let (n, c, h, w) = cache.x.dims4()?;
        let (hid, hw) = (self.hidden, h * w);
        let inv_hw = T::lit(1.0 / hw as f64);
        let w0 = ps.value(self.w0).data().to_vec();
        let w1 = ps.value(self.w1).data().to_vec();
        let mut dw0 = vec![T::zero(); w0.len()];
        let mut dw1 = vec![T::zero(); w1.len()];

        let mut dx = dy.clone();
        for (plane, &g) in dx.data_mut().chunks_exact_mut(hw).zip(&cache.gate) {
            plane.iter_mut().for_each(|v| *v *= g);
        }
        for b in 0..n {
            // dL/dgate then through the sigmoid
            let dz: Vec<T> = (0..c)
                .map(|ch| {
                    let i = b * c + ch;
                    let off = i * hw;
                    let dg: T = dy.data()[off..off + hw]
                        .iter()
                        .zip(&cache.x.data()[off..off + hw])
                        .map(|(&d, &v)| d * v)
                        .sum();
                    let g = cache.gate[i];
                    dg * g * (T::one() - g)
                })
                .collect();
            let pa = &cache.pre_avg[b * hid..(b + 1) * hid];
            let pm = &cache.pre_max[b * hid..(b + 1) * hid];
            let ha: Vec<T> = pa.iter().map(|v| v.max(T::zero())).collect();
            let hm: Vec<T> = pm.iter().map(|v| v.max(T::zero())).collect();
            outer_acc(&mut dw1, &dz, &ha);
            outer_acc(&mut dw1, &dz, &hm);
            let dh = matvec_t(&w1, c, hid, &dz);
            let dpa: Vec<T> = dh.iter().zip(pa).map(|(&d, &p)| if p > T::zero() { d } else { T::zero() }).collect();
            let dpm: Vec<T> = dh.iter().zip(pm).map(|(&d, &p)| if p > T::zero() { d } else { T::zero() }).collect();
            outer_acc(&mut dw0, &dpa, &cache.avg[b * c..(b + 1) * c]);
            outer_acc(&mut dw0, &dpm, &cache.max[b * c..(b + 1) * c]);
            let davg = matvec_t(&w0, hid, c, &dpa);
            let dmax = matvec_t(&w0, hid, c, &dpm);
            for ch in 0..c {
                let i = b * c + ch;
                let plane = &mut dx.data_mut()[i * hw..(i + 1) * hw];
                let share = davg[ch] * inv_hw;
                plane.iter_mut().for_each(|v| *v += share);
                plane[cache.argmax[i]] += dmax[ch];
            }
        }
        for (g, v) in ps.grad_mut(self.w0).data_mut().iter_mut().zip(dw0) {
            *g += v;
        }
        for (g, v) in ps.grad_mut(self.w1).data_mut().iter_mut().zip(dw1) {
            *g += v;
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_block, randomize_params, random_tensor, DEFAULT_STEP};

    fn build(c: usize, r: usize, seed: u64) -> (ChannelAttention, ParamStore<f64>) {
        let mut ps = ParamStore::new();
        let ca = ChannelAttention::new(&mut ps, &mut Init::new(seed), "ca", c, r).unwrap();
        randomize_params(&mut ps, seed + 100, 1.0);
        (ca, ps)
    }

    #[test]
    fn rejects_non_dividing_reduction() {
        let mut ps = ParamStore::<f64>::new();
        assert!(ChannelAttention::new(&mut ps, &mut Init::new(0), "ca", 6, 4).is_err());
    }

    #[test]
    fn gate_in_open_unit_interval() {
        let (ca, ps) = build(8, 4, 1);
        let x = random_tensor::<f64>(&[2, 8, 3, 3], 2).scale(5.0);
        let gate = ca.gate(&ps, &x).unwrap();
        assert!(gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn constant_input_gives_doubled_path() {
        let (ca, ps) = build(4, 2, 3);
        let p = [0.3, -0.7, 1.1, 0.05];
        let x = Tensor::from_fn([1, 4, 3, 3], |i| p[i / 9]);
        let gate = ca.gate(&ps, &x).unwrap();
        let w0 = ps.value(ca.w0).data();
        let w1 = ps.value(ca.w1).data();
        for o in 0..4 {
            let z: f64 = (0..2)
                .map(|j| w1[o * 2 + j] * (0..4).map(|i| w0[j * 4 + i] * p[i]).sum::<f64>().max(0.0))
                .sum();
            assert!((gate.data()[o] - sigmoid(2.0 * z)).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_direct_formula() {
        let (ca, ps) = build(4, 2, 5);
        let x = random_tensor::<f64>(&[1, 4, 3, 3], 6);
        let y = ca.forward(&ps, &x).unwrap();
        let w0 = ps.value(ca.w0).data();
        let w1 = ps.value(ca.w1).data();
        let avg: Vec<f64> = (0..4).map(|c| x.data()[c * 9..c * 9 + 9].iter().sum::<f64>() / 9.0).collect();
        let max: Vec<f64> = (0..4).map(|c| x.data()[c * 9..c * 9 + 9].iter().cloned().fold(f64::MIN, f64::max)).collect();
        let mlp = |v: &[f64]| -> Vec<f64> {
            let hidden: Vec<f64> = (0..2).map(|j| (0..4).map(|i| w0[j * 4 + i] * v[i]).sum::<f64>().max(0.0)).collect();
            (0..4).map(|o| (0..2).map(|j| w1[o * 2 + j] * hidden[j]).sum()).collect()
        };
        let (za, zm) = (mlp(&avg), mlp(&max));
        for c in 0..4 {
            let g = 1.0 / (1.0 + (-(za[c] + zm[c])).exp());
            for k in 0..9 {
                assert!((y.data()[c * 9 + k] - g * x.data()[c * 9 + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permuting_channels_with_weights_permutes_gate() {
        let (ca, ps) = build(4, 2, 7);
        let x = random_tensor::<f64>(&[1, 4, 3, 3], 8);
        let perm = [2usize, 0, 3, 1];
        let xp = Tensor::from_fn([1, 4, 3, 3], |i| x.data()[perm[i / 9] * 9 + i % 9]);
        let mut ps2 = ps.clone();
        let w0 = ps.value(ca.w0).clone();
        let w1 = ps.value(ca.w1).clone();
        // W0 columns and W1 rows follow the channel permutation
        *ps2.value_mut(ca.w0) = Tensor::from_fn([2, 4], |i| w0.data()[(i / 4) * 4 + perm[i % 4]]);
        *ps2.value_mut(ca.w1) = Tensor::from_fn([4, 2], |i| w1.data()[perm[i / 2] * 2 + i % 2]);
        let g = ca.gate(&ps, &x).unwrap();
        let gp = ca.gate(&ps2, &xp).unwrap();
        for c in 0..4 {
            assert!((gp.data()[c] - g.data()[perm[c]]).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (ca, mut ps) = build(4, 2, 9);
        let x = random_tensor(&[2, 4, 3, 3], 10);
        let report = check_block("channel_attention", &ca, &mut ps, &x, DEFAULT_STEP, 2).unwrap();
        assert!(report.max_rel_err() < 1e-6, "{report:?}");
    }
}
