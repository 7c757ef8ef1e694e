//! Named finite-difference checks over every block and the micro model, in
//! f64. Shared by the test suite and `dpaf grad-check`.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::nn::attention::scaled_dot_attention_backward;
use crate::nn::gradcheck::{check_block, check_fn, randomize_params, random_tensor, GradCheckReport, DEFAULT_STEP};
use crate::nn::restore::resize_bilinear_backward;
use crate::nn::{
    resize_bilinear, scaled_dot_attention, ChannelAttention, Conv2d, LayerNorm, Linear, Mlp, MultiHeadAttention,
    PatchEmbed, PatchUnembed, ResBlock, RestorationLayer, TransformerBlock,
};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

/// Pass threshold for single blocks.
pub const BLOCK_TOLERANCE: f64 = 1e-6;
/// Pass threshold for whole-model checks.
pub const MODEL_TOLERANCE: f64 = 1e-5;

type Check = fn(u64) -> Result<GradCheckReport>;

const CHECKS: &[(&str, Check)] = &[
    ("conv", conv),
    ("conv_strided", conv_strided),
    ("linear", linear),
    ("layernorm", layernorm),
    ("scaled_dot_attention", sdpa),
    ("mha", mha),
    ("mlp", mlp),
    ("transformer_block", transformer_block),
    ("patch_embed", patch_embed),
    ("patch_embed_resized", patch_embed_resized),
    ("patch_unembed", patch_unembed),
    ("resblock", resblock),
    ("channel_attention", channel_attention),
    ("resize_bilinear", resize),
    ("restoration_layer", restoration_layer),
    ("model", model_full),
    ("model_only_cnn", model_only_cnn),
    ("model_only_transformer", model_only_transformer),
    ("model_additive_fusion", model_additive),
];

/// Scope names accepted by [`run`], besides `"all"`.
pub fn scopes() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

pub fn tolerance(scope: &str) -> f64 {
    if scope.starts_with("model") { MODEL_TOLERANCE } else { BLOCK_TOLERANCE }
}

/// Runs one named check, or every check for `"all"`. The seed moves the
/// random parameters, inputs and probe; the same seed reproduces the same
/// errors exactly.
pub fn run(scope: &str, seed: u64) -> Result<Vec<GradCheckReport>> {
    if scope == "all" {
        return CHECKS.iter().map(|(_, f)| f(seed)).collect();
    }
    match CHECKS.iter().find(|(n, _)| *n == scope) {
        Some((_, f)) => Ok(vec![f(seed)?]),
        None => Err(Error::Lookup(format!("unknown gradient-check scope `{scope}`; expected `all` or one of: {}", scopes().join(", ")))),
    }
}

fn s(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(1_000).wrapping_add(k)
}

fn conv(seed: u64) -> Result<GradCheckReport> {
    let mut ps = ParamStore::<f64>::new();
    let c = Conv2d::new(&mut ps, &mut Init::new(s(seed, 1)), "conv", 2, 3, 3, 1, 1, true)?;
    randomize_params(&mut ps, s(seed, 2), 0.5);
    check_block("conv", &c, &mut ps, &random_tensor(&[2, 2, 4, 5], s(seed, 3)), DEFAULT_STEP, s(seed, 4))
}

fn conv_strided(seed: u64) -> Result<GradCheckReport> {
    let mut ps = ParamStore::<f64>::new();
    let c = Conv2d::new(&mut ps, &mut Init::new(s(seed, 1)), "conv", 2, 3, 3, 2, 1, true)?;
    randomize_params(&mut ps, s(seed, 2), 0.5);
    check_block("conv_strided", &c, &mut ps, &random_tensor(&[1, 2, 5, 4], s(seed, 3)), DEFAULT_STEP, s(seed, 4))
}

fn linear(seed: u64) -> Result<GradCheckReport> {
    let mut ps = ParamStore::<f64>::new();
    let l = Linear::new(&mut ps, &mut Init::new(s(seed, 1)), "linear", 3, 5, true)?;
    randomize_params(&mut ps, s(seed, 2), 1.0);
    check_block("linear", &l, &mut ps, &random_tensor(&[2, 4, 3], s(seed, 3)), DEFAULT_STEP, s(seed, 4))
}

fn layernorm(seed: u64) -> Result<GradCheckReport> {
    let mut ps = ParamStore::<f64>::new();
    let l = LayerNorm::new(&mut ps, "layernorm", 6)?;
    randomize_params(&mut ps, s(seed, 2), 1.0);
    check_block("layernorm", &l, &mut ps, &random_tensor(&[3, 6], s(seed, 3)), DEFAULT_STEP, s(seed, 4))
}

fn sdpa(seed: u64) -> Result<GradCheckReport> {
    // Q, K and V packed as one 3×n×d input so all three get perturbed.
    let (n, d) = (4, 3);
    let split = move |x: &Tensor<f64>| -> Result<Vec<Tensor<f64>>> {
        (0..3).map(|i| Tensor::new([n, d], x.data()[i * n * d..(i + 1) * n * d].to_vec())).collect()
    };
    let x = random_tensor::<f64>(&[3, n, d], s(seed, 3)).scale(2.0);
    check_fn(
        "scaled_dot_attention",
        &mut ParamStore::<f64>::new(),
        &x,
        DEFAULT_STEP,
        s(seed, 4),
        |_, x| {
            let p = split(x)?;
            scaled_dot_attention(&p[0], &p[1], &p[2])
        },
        |_, x, dy| {
            let p = split(x)?;
            let (dq, dk, dv) = scaled_dot_attention_backward(&p[0], &p[1], &p[2], dy)?;
            let mut data = dq.into_data();
            data.extend(dk.into_data());
            data.extend(dv.into_data());
            Tensor::new([3, n, d], data)
        },
    )
}

fn mha(seed: u64) -> Result<GradCheckReport> {
    let mut ps = ParamStore::<f64>::new();
    let m = MultiHeadAttention::new(&mut ps, &mut Init::new(s(seed, 1)), "mha", 4, 2)?;
    randomize_params(&mut ps, s(seed, 2), 1.0);
    check_block("mha", &m, &mut ps, &random_tensor(&[2, 4, 4], s(seed, 3)), DEFAULT_STEP, s(seed, 4))
}

fn mlp(seed: u64) -> Result<GradCheckReport> {
    let mut ps = ParamStore::<f64>::new();
    let m = Mlp::new(&mut ps, &mut Init::new(s(seed, 1)), "mlp", 4, 2)?;
    randomize_params(&mut ps, s(seed, 2), 1.0);
    check_block("mlp", &m, &mut ps, &random_tensor(&[2, 3, 4], s(seed, 3)), DEFAULT_STEP, s(seed, 4))
}

fn transformer_block(seed: u64) -> Result<GradCheckReport> {
    let mut ps = ParamStore::<f64>::new();
    let b = TransformerBlock::new(&mut ps, &mut Init::new(s(seed, 1)), "transformer_block", 8, 2, 2)?;
    randomize_params(&mut ps, s(seed, 2), 0.5);
    check_block("transformer_block", &b, &mut ps, &random_tensor(&[1, 4, 8], s(seed, 3)), DEFAULT_STEP, s(seed, 4))
}

fn patch_embed_with(name: &str, seed: u64, grid: (usize, usize)) -> Result<GradCheckReport> {
    let mut ps = ParamStore::<f64>::new();
    let p = PatchEmbed::new(&mut ps, &mut Init::new(s(seed, 1)), name, 2, 2, 3, Some(grid))?;
    randomize_params(&mut ps, s(seed, 2), 0.5);
    check_block(name, &p, &mut ps, &random_tensor(&[2, 2, 4, 4], s(seed, 3)), DEFAULT_STEP, s(seed, 4))
}

fn patch_embed(seed: u64) -> Result<GradCheckReport> {
    patch_embed_with("patch_embed", seed, (2, 2))
}

/// Token grid 2×2 served from a 3×2 learned table through bilinear resampling.
fn patch_embed_resized(seed: u64) -> Result<GradCheckReport> {
    patch_embed_with("patch_embed_resized", seed, (3, 2))
}

fn patch_unembed(seed: u64) -> Result<GradCheckReport> {
    let mut ps = ParamStore::<f64>::new();
    let p = PatchUnembed::new(&mut ps, &mut Init::new(s(seed, 1)), "patch_unembed", 3, 2, 2)?;
    randomize_params(&mut ps, s(seed, 2), 0.5);
    check_fn(
        "patch_unembed",
        &mut ps,
        &random_tensor(&[1, 6, 3], s(seed, 3)),
        DEFAULT_STEP,
        s(seed, 4),
        |ps, x| p.forward(ps, x, (2, 3)),
        |ps, x, dy| {
            let (_, cache) = p.forward_train(ps, x, (2, 3))?;
            p.backward(ps, &cache, dy)
        },
    )
}

fn resblock(seed: u64) -> Result<GradCheckReport> {
    let mut ps = ParamStore::<f64>::new();
    let b = ResBlock::new(&mut ps, &mut Init::new(s(seed, 1)), "resblock", 2)?;
    randomize_params(&mut ps, s(seed, 2), 0.5);
    check_block("resblock", &b, &mut ps, &random_tensor(&[1, 2, 4, 4], s(seed, 3)), DEFAULT_STEP, s(seed, 4))
}

fn channel_attention(seed: u64) -> Result<GradCheckReport> {
    let mut ps = ParamStore::<f64>::new();
    let c = ChannelAttention::new(&mut ps, &mut Init::new(s(seed, 1)), "channel_attention", 4, 2)?;
    randomize_params(&mut ps, s(seed, 2), 1.0);
    check_block("channel_attention", &c, &mut ps, &random_tensor(&[2, 4, 3, 3], s(seed, 3)), DEFAULT_STEP, s(seed, 4))
}

fn resize(seed: u64) -> Result<GradCheckReport> {
    check_fn(
        "resize_bilinear",
        &mut ParamStore::<f64>::new(),
        &random_tensor(&[1, 2, 3, 3], s(seed, 3)),
        DEFAULT_STEP,
        s(seed, 4),
        |_, x| resize_bilinear(x, 5, 7),
        |_, _, dy| resize_bilinear_backward(dy, 3, 3),
    )
}

fn restoration_layer(seed: u64) -> Result<GradCheckReport> {
    let mut ps = ParamStore::<f64>::new();
    let l = RestorationLayer::halving(&mut ps, &mut Init::new(s(seed, 1)), "restoration_layer", 2)?;
    randomize_params(&mut ps, s(seed, 2), 0.5);
    check_block("restoration_layer", &l, &mut ps, &random_tensor(&[1, 2, 2, 2], s(seed, 3)), DEFAULT_STEP, s(seed, 4))
}

/// Micro model on its unclamped output. Parameters keep their initialization
/// scale (uniform ±0.5 weights would blow activations up through a dozen
/// layers and drown the differences in roundoff) plus a small jitter so that
/// zero-initialized biases and norms are checked away from zero.
fn check_model(name: &str, variant: Variant, seed: u64) -> Result<GradCheckReport> {
    let mut model = Model::<f64>::build(&ModelConfig::micro().with_variant(variant), s(seed, 1))?;
    let mut jitter = ParamStore::<f64>::new();
    for id in model.params.ids() {
        jitter.add(model.params.name(id), Tensor::zeros(model.params.value(id).shape().to_vec()))?;
    }
    randomize_params(&mut jitter, s(seed, 2), 0.1);
    for id in model.params.ids().collect::<Vec<_>>() {
        model.params.value_mut(id).add_assign(jitter.value(id))?;
    }
    let mut ps = std::mem::replace(&mut model.params, ParamStore::new());
    let x = random_tensor::<f64>(&[2, 3, 4, 4], s(seed, 3)).map(|v| 0.5 + 0.5 * v);
    let with = |ps: ParamStore<f64>| {
        let mut m = model.clone();
        m.params = ps;
        m
    };
    check_fn(
        name,
        &mut ps,
        &x,
        DEFAULT_STEP,
        s(seed, 4),
        |ps, x| Ok(with(ps.clone()).forward_train(x)?.0),
        |ps, x, dy| {
            let mut m = with(std::mem::replace(ps, ParamStore::new()));
            let (_, cache) = m.forward_train(x)?;
            let dx = m.backward(&cache, dy);
            *ps = m.params;
            dx
        },
    )
}

fn model_full(seed: u64) -> Result<GradCheckReport> {
    check_model("model", Variant::Full, seed)
}

fn model_only_cnn(seed: u64) -> Result<GradCheckReport> {
    check_model("model_only_cnn", Variant::OnlyCnn, seed)
}

fn model_only_transformer(seed: u64) -> Result<GradCheckReport> {
    check_model("model_only_transformer", Variant::OnlyTransformer, seed)
}

fn model_additive(seed: u64) -> Result<GradCheckReport> {
    check_model("model_additive_fusion", Variant::AdditiveFusion, seed)
}
