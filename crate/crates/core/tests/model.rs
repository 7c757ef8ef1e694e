use std::path::Path;

use dpafnet::model::{crop, pad_reflect, read_checkpoint, write_checkpoint, Model, ModelConfig, Section, Variant};
use dpafnet::nn::gradcheck::random_tensor;
use dpafnet::rain::Image;
use dpafnet::{Error, Tensor};

fn tiny() -> ModelConfig {
    ModelConfig { base_channels: 8, stages: 2, vit_depth: 1, vit_heads: 2, vit_dim: 16, ..ModelConfig::default() }
}

fn unit_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor::<f64>(shape, seed).map(|v| 0.5 + 0.5 * v)
}

// Counts written from the layer formulas, not from the model code.
fn conv(k: usize, cin: usize, cout: usize, bias: bool) -> usize {
    k * k * cin * cout + if bias { cout } else { 0 }
}

fn resblock(c: usize) -> usize {
    2 * conv(3, c, c, true)
}

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

fn expected_params(c: &ModelConfig) -> usize {
    let (b, d, dim) = (c.base_channels, c.stages, c.vit_dim);
    let deep = b << d;
    let mut n = conv(3, 3, b, true) + resblock(b);
    if c.variant != Variant::OnlyTransformer {
        for s in 0..d {
            let (i, o) = (b << s, b << (s + 1));
            n += conv(3, i, o, true) + c.cnn_blocks_per_stage * resblock(o);
        }
    }
    if c.variant != Variant::OnlyCnn {
        let (gh, gw) = c.pos_grid.unwrap_or((0, 0));
        n += linear(b * c.patch * c.patch, dim) + gh * gw * dim;
        let block = 2 * (2 * dim) + 4 * linear(dim, dim) + linear(dim, dim * c.mlp_ratio) + linear(dim * c.mlp_ratio, dim);
        n += c.vit_depth * block + linear(dim, deep);
    }
    n += match c.variant {
        Variant::Full => {
            let w = 2 * deep;
            2 * resblock(w) + 2 * w * (w / c.fusion_reduction) + conv(1, w, deep, true)
        }
        Variant::AdditiveFusion => conv(1, deep, deep, true) + conv(1, deep, deep, false),
        _ => conv(1, deep, deep, true),
    };
    for s in 0..d {
        let (i, o) = (deep >> s, deep >> (s + 1));
        n += conv(3, i, o, true) + conv(3, o, o, true);
    }
    n + conv(3, 2 * b, b, true) + conv(3, b, 3, true)
}

#[test]
fn parameter_count_matches_closed_form() {
    let m = Model::<f32>::build(&tiny(), 0).unwrap();
    assert_eq!(expected_params(&tiny()), 201_171);
    assert_eq!(m.num_params(), 201_171);
    for v in Variant::ALL {
        for cfg in [tiny(), ModelConfig::default(), ModelConfig::micro()] {
            let cfg = cfg.with_variant(v);
            assert_eq!(Model::<f32>::build(&cfg, 1).unwrap().num_params(), expected_params(&cfg), "{v} {cfg:?}");
        }
    }
}

#[test]
fn single_branch_variants_are_smaller() {
    let full = Model::<f32>::build(&tiny(), 0).unwrap().num_params();
    for v in [Variant::OnlyCnn, Variant::OnlyTransformer] {
        assert!(Model::<f32>::build(&tiny().with_variant(v), 0).unwrap().num_params() < full);
    }
}

#[test]
fn only_cnn_has_no_attention_parameters() {
    let m = Model::<f32>::build(&tiny().with_variant(Variant::OnlyCnn), 0).unwrap();
    for name in m.params.names() {
        assert!(!name.starts_with("vit.") && !name.contains(".ca") && !name.contains("attn"), "{name}");
    }
    let only_vit = Model::<f32>::build(&tiny().with_variant(Variant::OnlyTransformer), 0).unwrap();
    assert!(only_vit.params.names().iter().all(|n| !n.starts_with("cnn.")));
}

#[test]
fn builds_are_deterministic() {
    let a = Model::<f32>::build(&tiny(), 7).unwrap();
    let b = Model::<f32>::build(&tiny(), 7).unwrap();
    let c = Model::<f32>::build(&tiny(), 8).unwrap();
    assert_eq!(a.params.to_bytes(), b.params.to_bytes());
    assert_ne!(a.params.to_bytes(), c.params.to_bytes());
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig { patch: 2, ..tiny() },
        ModelConfig { vit_heads: 3, ..tiny() },
        ModelConfig { fusion_reduction: 5, ..tiny() },
        ModelConfig { base_channels: 0, ..tiny() },
    ];
    for cfg in bad {
        assert!(matches!(Model::<f32>::build(&cfg, 0), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn forward_preserves_shape_and_rejects_indivisible_sizes() {
    let m = Model::<f64>::build(&tiny(), 0).unwrap();
    for (h, w) in [(4, 4), (8, 12), (16, 8)] {
        let x = unit_input(&[2, 3, h, w], 1);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.is_finite());
    }
    assert!(matches!(m.forward(&unit_input(&[1, 3, 6, 8], 1)), Err(Error::Shape(_))));
}

#[test]
fn zero_head_is_identity() {
    for v in Variant::ALL {
        let mut m = Model::<f64>::build(&tiny().with_variant(v), 3).unwrap();
        m.zero_head();
        let x = unit_input(&[1, 3, 8, 8], 2);
        assert_eq!(m.forward(&x).unwrap(), x, "{v}");
    }
}

#[test]
fn probing_does_not_change_the_output() {
    let m = Model::<f64>::build(&tiny(), 4).unwrap();
    let x = unit_input(&[1, 3, 16, 16], 5);
    let names = m.probe_names();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let acts = m.capture_activations(&x, &refs).unwrap();
    assert_eq!(acts.len(), names.len());
    assert_eq!(acts["output"], m.forward(&x).unwrap());
    assert_eq!(acts["shallow"].shape(), &[1, 8, 16, 16]);
    // Both branches end at the deepest grid, H/2^d × W/2^d.
    assert_eq!(acts["cnn"].shape(), &[1, 32, 4, 4]);
    assert_eq!(acts["vit"].shape(), &[1, 32, 4, 4]);
    let gate = &acts["fusion.gate"];
    assert!(gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
}

#[test]
fn unknown_probe_is_a_lookup_error() {
    let m = Model::<f64>::build(&tiny(), 4).unwrap();
    let err = m.capture_activations(&unit_input(&[1, 3, 4, 4], 1), &["nope"]).unwrap_err();
    assert!(matches!(err, Error::Lookup(_)));
    assert!(err.to_string().contains("shallow"), "error should list the probes: {err}");
}

#[test]
fn additive_and_full_agree_before_fusion() {
    let x = unit_input(&[1, 3, 16, 16], 6);
    let full = Model::<f64>::build(&tiny(), 11).unwrap();
    let add = Model::<f64>::build(&tiny().with_variant(Variant::AdditiveFusion), 11).unwrap();
    let pre = ["shallow", "cnn.stage1", "cnn", "vit.embed", "vit.block1", "vit"];
    let a = full.capture_activations(&x, &pre).unwrap();
    let b = add.capture_activations(&x, &pre).unwrap();
    for p in pre {
        assert_eq!(a[p], b[p], "{p}");
    }
    let fa = full.capture_activations(&x, &["fused"]).unwrap();
    let fb = add.capture_activations(&x, &["fused"]).unwrap();
    assert_ne!(fa["fused"], fb["fused"]);
}

#[test]
fn token_grid_follows_a_patch_shift() {
    // With positional embeddings zeroed the tokens depend only on a local
    // input window (radius 3 through stem + residual block), so rolling the
    // input down by one patch moves interior token rows down by one.
    let mut m = Model::<f64>::build(&tiny(), 12).unwrap();
    m.zero_positional();
    let (h, w, p) = (32, 32, 4);
    let x = unit_input(&[1, 3, h, w], 13);
    let shifted = Tensor::from_fn(vec![1, 3, h, w], |i| {
        let (c, r, col) = (i / (h * w), (i / w) % h, i % w);
        x.data()[c * h * w + ((r + h - p) % h) * w + col]
    });
    let a = &m.capture_activations(&x, &["vit.embed"]).unwrap()["vit.embed"];
    let b = &m.capture_activations(&shifted, &["vit.embed"]).unwrap()["vit.embed"];
    let (gw, dim) = (w / p, a.shape()[2]);
    for ti in 1..=5 {
        for tj in 0..gw {
            for k in 0..dim {
                let va = a.data()[(ti * gw + tj) * dim + k];
                let vb = b.data()[((ti + 1) * gw + tj) * dim + k];
                assert!((va - vb).abs() < 1e-12, "token ({ti},{tj})[{k}]: {va} vs {vb}");
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let m = Model::<f32>::build(&tiny().with_variant(Variant::AdditiveFusion), 21).unwrap();
    let extra = Section { name: "notes".into(), bytes: b"hello".to_vec() };
    let bytes = write_checkpoint(&m, std::slice::from_ref(&extra));
    let back = read_checkpoint::<f32>(&bytes, Path::new("mem")).unwrap();
    assert_eq!(back.model.config(), m.config());
    assert_eq!(back.model.params.to_bytes(), m.params.to_bytes());
    assert_eq!(back.section("notes"), Some(&b"hello"[..]));
    assert_eq!(write_checkpoint(&back.model, &back.sections), bytes);
}

/// Swaps the embedded config while keeping the parameter block.
fn with_config(bytes: &[u8], cfg: &ModelConfig) -> Vec<u8> {
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let json = serde_json::to_vec(cfg).unwrap();
    let mut out = bytes[..12].to_vec();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[16 + len..]);
    out
}

#[test]
fn checkpoint_mismatch_names_the_first_offending_entry() {
    let bytes = write_checkpoint(&Model::<f32>::build(&tiny(), 0).unwrap(), &[]);

    let wider = with_config(&bytes, &ModelConfig { base_channels: 4, ..tiny() });
    let err = read_checkpoint::<f32>(&wider, Path::new("w.ckpt")).err().unwrap().to_string();
    assert!(err.contains("stem.conv.weight") && err.contains("w.ckpt"), "{err}");

    let other = with_config(&bytes, &tiny().with_variant(Variant::AdditiveFusion));
    let err = read_checkpoint::<f32>(&other, Path::new("v.ckpt")).err().unwrap().to_string();
    assert!(err.contains("fusion."), "{err}");

    let mut truncated = bytes.clone();
    truncated.truncate(bytes.len() - 3);
    assert!(matches!(read_checkpoint::<f32>(&truncated, Path::new("t")), Err(Error::Format { .. })));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(read_checkpoint::<f32>(&trailing, Path::new("t")), Err(Error::Format { .. })));
    assert!(matches!(read_checkpoint::<f32>(b"DPAFCKPX", Path::new("t")), Err(Error::Format { .. })));
}

#[test]
fn cast_to_f64_preserves_behaviour() {
    let m = Model::<f32>::build(&tiny(), 5).unwrap();
    let m64: Model<f64> = m.cast();
    let x = unit_input(&[1, 3, 8, 8], 3);
    let y32 = m.forward(&x.cast::<f32>()).unwrap().cast::<f64>();
    let y64 = m64.forward(&x).unwrap();
    assert!(y32.max_abs_diff(&y64) < 1e-4);
}

#[test]
fn reflect_padding_and_crop() {
    let x = Tensor::<f64>::from_fn(vec![1, 1, 2, 3], |i| i as f64);
    let p = pad_reflect(&x, 4, 5).unwrap();
    // Rows 0 1 | 0 1 (mirrored without repeating the edge), same for columns.
    let expect = [0., 1., 2., 1., 0., 3., 4., 5., 4., 3., 0., 1., 2., 1., 0., 3., 4., 5., 4., 3.];
    assert_eq!(p.data(), &expect);
    assert_eq!(crop(&p, 2, 3).unwrap(), x);
}

#[test]
fn derain_handles_any_size() {
    let m = Model::<f32>::build(&tiny(), 6).unwrap();
    for (h, w) in [(5, 7), (13, 4), (16, 16), (1, 1)] {
        let img = Image::from_fn(h, w, |c, r, col| ((c + 2 * r + 3 * col) % 7) as f64 / 7.0).unwrap();
        let out = m.derain(&img).unwrap();
        assert_eq!((out.height(), out.width()), (h, w));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(m.padding_for(16, 16), (0, 0));
    assert_eq!(m.padding_for(5, 7), (3, 1));
}

#[test]
fn divisible_input_is_not_padded() {
    let m = Model::<f64>::build(&tiny(), 6).unwrap();
    let img = Image::from_fn(8, 12, |c, r, col| ((c + r * col) % 5) as f64 / 5.0).unwrap();
    let direct = Image::from_tensor(&m.forward(&img.to_tensor()).unwrap()).unwrap();
    assert_eq!(m.derain(&img).unwrap(), direct);
}
