//! Central finite-difference gradient checking.
//!
//! The scalar probed is `L = Σ pᵢ·yᵢ` with a fixed pseudo-random probe `p`
//! drawn from `U(-1, 1)`, accumulated in f64. Each parameter tensor (and the
//! input) gets one row whose error is `‖a − n‖₂ / max(‖a‖₂ + ‖n‖₂, 1e-4)`,
//! `a` analytic, `n` numeric.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

use super::Block;

pub const DEFAULT_STEP: f64 = 1e-4;

// Central differences at h = 1e-4 carry ~1e-11 absolute noise per entry; rows
// whose true gradient is identically zero (e.g. key biases under softmax)
// would otherwise report noise / noise.
const NORM_FLOOR: f64 = 1e-4;

/// `U(-1, 1)` tensor from a ChaCha8 stream.
pub fn random_tensor<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random_range(-1.0..1.0)))
}

/// Overwrites every parameter with `U(-scale, scale)` values.
pub fn randomize_params<T: Real>(ps: &mut ParamStore<T>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in ps.ids().collect::<Vec<_>>() {
        for v in ps.value_mut(id).data_mut() {
            *v = T::lit(rng.random_range(-scale..scale));
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub target: String,
    pub entries: usize,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub rows: Vec<GradRow>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.rel_err).fold(0.0, f64::max)
    }

    pub fn entries(&self) -> usize {
        self.rows.iter().map(|r| r.entries).sum()
    }
}

fn probe_loss<T: Real>(y: &Tensor<T>, probe: &Tensor<T>) -> f64 {
    y.data().iter().zip(probe.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / (na + nn).max(NORM_FLOOR)
}

/// Checks `backward` against central differences of `forward`.
///
/// `backward(ps, x, dy)` must accumulate parameter gradients into `ps` and
/// return the input gradient.
pub fn check_fn<T, F, B>(
    name: &str,
    ps: &mut ParamStore<T>,
    x: &Tensor<T>,
    step: f64,
    probe_seed: u64,
    forward: F,
    backward: B,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&ParamStore<T>, &Tensor<T>) -> Result<Tensor<T>>,
    B: Fn(&mut ParamStore<T>, &Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
{
    let y = forward(ps, x)?;
    let probe = random_tensor::<T>(y.shape(), probe_seed);
    ps.zero_grads();
    let dx = backward(ps, x, &probe)?;
    let h = T::lit(step);
    let denom = 2.0 * step;

    let mut rows = Vec::new();
    for id in ps.ids().collect::<Vec<_>>() {
        let analytic: Vec<f64> = ps.grad(id).data().iter().map(|v| v.as_f64()).collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = ps.value(id).data()[i];
            ps.value_mut(id).data_mut()[i] = orig + h;
            let lp = probe_loss(&forward(ps, x)?, &probe);
            ps.value_mut(id).data_mut()[i] = orig - h;
            let lm = probe_loss(&forward(ps, x)?, &probe);
            ps.value_mut(id).data_mut()[i] = orig;
            numeric.push((lp - lm) / denom);
        }
        rows.push(GradRow { target: ps.name(id).to_owned(), entries: analytic.len(), rel_err: rel_err(&analytic, &numeric) });
    }

    let analytic: Vec<f64> = dx.data().iter().map(|v| v.as_f64()).collect();
    let mut xp = x.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        xp.data_mut()[i] = orig + h;
        let lp = probe_loss(&forward(ps, &xp)?, &probe);
        xp.data_mut()[i] = orig - h;
        let lm = probe_loss(&forward(ps, &xp)?, &probe);
        xp.data_mut()[i] = orig;
        numeric.push((lp - lm) / denom);
    }
    rows.push(GradRow { target: "input".into(), entries: analytic.len(), rel_err: rel_err(&analytic, &numeric) });
    ps.zero_grads();
    Ok(GradCheckReport { name: name.to_owned(), rows })
}

pub fn check_block<T: Real, B: Block>(
    name: &str,
    block: &B,
    ps: &mut ParamStore<T>,
    x: &Tensor<T>,
    step: f64,
    probe_seed: u64,
) -> Result<GradCheckReport> {
    check_fn(
        name,
        ps,
        x,
        step,
        probe_seed,
        |ps, x| block.forward(ps, x),
        |ps, x, dy| {
            let (_, cache) = block.forward_train(ps, x)?;
            block.backward(ps, &cache, dy)
        },
    )
}
