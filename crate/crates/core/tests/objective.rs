use dpafnet::nn::gradcheck::random_tensor;
use dpafnet::objective::{
    combined_loss, mse_loss, perceptual_loss, psnr, ssim, ssim_loss, ssim_with_grad, LossWeights, MetricReport,
    PairMetrics, PerceptualExtractor, SsimConfig,
};
use dpafnet::Tensor;

mod common;
use common::ssim_brute;

fn unit(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor::<f64>(shape, seed).map(|v| 0.5 + 0.5 * v)
}

#[test]
fn ssim_matches_per_window_oracle() {
    let cfg = SsimConfig::default();
    for seed in 0..50 {
        let x = unit(&[1, 3, 16, 16], 2 * seed);
        // Correlated target so scores spread over a useful range.
        let noise = unit(&[1, 3, 16, 16], 2 * seed + 1);
        let t = (seed as f64) / 50.0;
        let y = x.zip_map(&noise, |a, b| (1.0 - t) * a + t * b).unwrap();
        let fast = ssim(&x, &y, &cfg).unwrap();
        let slow = ssim_brute(&x, &y, 11, 1.5);
        assert!((fast - slow).abs() < 1e-8, "seed {seed}: {fast} vs {slow}");
    }
}

#[test]
fn ssim_of_identical_images_is_one() {
    for seed in 0..5 {
        let x = unit(&[2, 3, 13, 17], seed);
        assert!((ssim(&x, &x, &SsimConfig::default()).unwrap() - 1.0).abs() < 1e-9);
    }
    let flat = Tensor::<f64>::full([1, 3, 11, 11], 0.4);
    assert!((ssim(&flat, &flat, &SsimConfig::default()).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ssim_is_symmetric_and_precision_independent() {
    let (x, y) = (unit(&[1, 3, 12, 12], 1), unit(&[1, 3, 12, 12], 2));
    let cfg = SsimConfig::default();
    let a = ssim(&x, &y, &cfg).unwrap();
    assert!((a - ssim(&y, &x, &cfg).unwrap()).abs() < 1e-14);
    let a32 = ssim(&x.cast::<f32>(), &y.cast::<f32>(), &cfg).unwrap();
    assert!((a - a32).abs() < 1e-6);
}

/// Central differences on a handful of coordinates.
fn fd_check(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, grad: &Tensor<f64>, coords: &[usize], tol: f64) {
    let h = 1e-5;
    for &i in coords {
        let (mut p, mut m) = (x.clone(), x.clone());
        p.data_mut()[i] += h;
        m.data_mut()[i] -= h;
        let num = (f(&p) - f(&m)) / (2.0 * h);
        let ana = grad.data()[i];
        let err = (num - ana).abs() / (num.abs() + ana.abs()).max(1e-6);
        assert!(err < tol, "coordinate {i}: analytic {ana} numeric {num}");
    }
}

fn coords(len: usize) -> Vec<usize> {
    (0..len).step_by(len / 23 + 1).chain([0, len - 1]).collect()
}

#[test]
fn ssim_gradient_matches_finite_differences() {
    let cfg = SsimConfig { window: 7, sigma: 1.2, ..SsimConfig::default() };
    let (x, y) = (unit(&[2, 3, 10, 9], 3), unit(&[2, 3, 10, 9], 4));
    let (_, g) = ssim_with_grad(&x, &y, &cfg).unwrap();
    fd_check(|v| ssim(v, &y, &cfg).unwrap(), &x, &g, &coords(x.len()), 1e-6);
    let (l, gl) = ssim_loss(&x, &y, &cfg).unwrap();
    assert!((l - (1.0 - ssim(&x, &y, &cfg).unwrap())).abs() < 1e-15);
    assert_eq!(gl, g.map(|v| -v));
}

fn extractor() -> PerceptualExtractor<f64> {
    PerceptualExtractor::<f32>::seeded(&[6, 8], 9, 2).unwrap().cast()
}

#[test]
fn combined_loss_is_linear_in_the_weights() {
    let (p, t) = (unit(&[2, 3, 12, 12], 5), unit(&[2, 3, 12, 12], 6));
    let (cfg, ext) = (SsimConfig::default(), extractor());
    let single = |w: LossWeights| combined_loss(&p, &t, &w, &cfg, &ext).unwrap();
    let e = [
        single(LossWeights { w_mse: 1.0, w_ssim: 0.0, w_perp: 0.0 }),
        single(LossWeights { w_mse: 0.0, w_ssim: 1.0, w_perp: 0.0 }),
        single(LossWeights { w_mse: 0.0, w_ssim: 0.0, w_perp: 1.0 }),
    ];
    assert!((e[0].total - mse_loss(&p, &t).unwrap().0).abs() < 1e-12);
    assert!((e[1].total - ssim_loss(&p, &t, &cfg).unwrap().0).abs() < 1e-12);
    assert!((e[2].total - perceptual_loss(&p, &t, &ext).unwrap().0).abs() < 1e-12);
    assert_eq!((e[0].ssim, e[0].perp), (None, None));

    let w = LossWeights { w_mse: 0.7, w_ssim: 0.3, w_perp: 0.05 };
    let all = single(w);
    let expect = w.w_mse * e[0].total + w.w_ssim * e[1].total + w.w_perp * e[2].total;
    assert!((all.total - expect).abs() < 1e-12);
    for i in 0..p.len() {
        let g = w.w_mse * e[0].grad.data()[i] + w.w_ssim * e[1].grad.data()[i] + w.w_perp * e[2].grad.data()[i];
        assert!((all.grad.data()[i] - g).abs() < 1e-12);
    }
}

#[test]
fn combined_gradient_matches_finite_differences() {
    let (p, t) = (unit(&[1, 3, 12, 12], 7), unit(&[1, 3, 12, 12], 8));
    let (cfg, ext, w) = (SsimConfig::default(), extractor(), LossWeights::default());
    let v = combined_loss(&p, &t, &w, &cfg, &ext).unwrap();
    fd_check(|x| combined_loss(x, &t, &w, &cfg, &ext).unwrap().total, &p, &v.grad, &coords(p.len()), 1e-5);
}

/// A 3→3 extractor whose kernels copy each channel through unchanged.
fn pass_through(stages: usize, tap: usize) -> PerceptualExtractor<f64> {
    let delta = Tensor::from_fn([3, 3, 3, 3], |i| {
        let (o, c, k) = (i / 27, (i / 9) % 3, i % 9);
        if o == c && k == 4 { 1.0 } else { 0.0 }
    });
    PerceptualExtractor::from_stages(vec![(delta, None); stages], tap).unwrap()
}

fn pool(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let (h, w) = (s[2] / 2, s[3] / 2);
    Tensor::from_fn([s[0], s[1], h, w], |i| {
        let (p, r, c) = (i / (h * w), (i / w) % h, i % w);
        let at = |dr: usize, dc: usize| x.data()[p * s[2] * s[3] + (2 * r + dr) * s[3] + 2 * c + dc];
        0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1))
    })
}

#[test]
fn perceptual_loss_composes_from_its_stages() {
    // Inputs are positive, so ReLU is the identity and an identity-kernel
    // extractor reduces the loss to a known feature map.
    let (p, t) = (unit(&[2, 3, 8, 10], 9), unit(&[2, 3, 8, 10], 10));
    let sq = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(u, v)| (u - v).powi(2)).sum::<f64>();

    let (l1, _) = perceptual_loss(&p, &t, &pass_through(1, 1)).unwrap();
    assert!((l1 - sq(&p, &t) / (2.0 * 8.0 * 10.0)).abs() < 1e-14);
    assert!((l1 - 3.0 * mse_loss(&p, &t).unwrap().0).abs() < 1e-14);

    let (l2, g2) = perceptual_loss(&p, &t, &pass_through(2, 2)).unwrap();
    assert!((l2 - sq(&pool(&p), &pool(&t)) / (2.0 * 4.0 * 5.0)).abs() < 1e-14);
    fd_check(|x| perceptual_loss(x, &t, &pass_through(2, 2)).unwrap().0, &p, &g2, &coords(p.len()), 1e-7);

    let seeded = extractor();
    let (l, g) = perceptual_loss(&p, &t, &seeded).unwrap();
    assert!(l > 0.0);
    fd_check(|x| perceptual_loss(x, &t, &seeded).unwrap().0, &p, &g, &coords(p.len()), 1e-5);
    assert_eq!(perceptual_loss(&p, &p, &seeded).unwrap().0, 0.0);
}

#[test]
fn psnr_closed_forms() {
    let a = Tensor::<f64>::full([1, 3, 8, 8], 0.4);
    let b = a.map(|v| v + 0.1);
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert!((psnr(&a, &b, 2.0).unwrap() - (20.0 + 20.0 * 2f64.log10())).abs() < 1e-9);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    assert!(psnr(&a, &b, 0.0).is_err());
    assert!(psnr(&a, &Tensor::zeros([1, 3, 8, 9]), 1.0).is_err());
}

#[test]
fn infinite_psnr_serializes_as_a_string() {
    let x = unit(&[1, 3, 12, 12], 11);
    let row = PairMetrics::measure("same", &x, &x).unwrap();
    assert_eq!(row.psnr_db, f64::INFINITY);
    let report = MetricReport::from_rows(vec![row.clone(), row]);
    let json = serde_json::to_string(&report).unwrap();
    assert!(json.contains(r#""psnr_db":"inf""#) && json.contains(r#""mean_psnr_db":"inf""#), "{json}");
    let back: MetricReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.median_psnr_db, f64::INFINITY);
    assert_eq!(back.rows.len(), 2);
}

#[test]
fn report_statistics() {
    let rows: Vec<_> = [(30.0, 0.9), (20.0, 0.5), (25.0, 0.7), (40.0, 0.8)]
        .iter()
        .enumerate()
        .map(|(i, &(p, s))| PairMetrics { pair_id: i.to_string(), psnr_db: p, ssim: s })
        .collect();
    let r = MetricReport::from_rows(rows);
    assert_eq!((r.mean_psnr_db, r.median_psnr_db), (28.75, 27.5));
    assert!((r.mean_ssim - 0.725).abs() < 1e-15 && (r.median_ssim - 0.75).abs() < 1e-15);
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    fn pair() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>)> {
        (0u64..10_000, 0.0f64..0.01).prop_map(|(seed, amp)| {
            let x = random_tensor::<f64>(&[1, 3, 12, 12], seed).map(|v| 0.45 + 0.4 * v);
            let n = random_tensor::<f64>(&[1, 3, 12, 12], seed + 1);
            let y = x.zip_map(&n, |a, b| a + amp * b).unwrap();
            (x, y)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn ssim_is_symmetric_and_bounded((x, y) in pair()) {
            let cfg = SsimConfig::default();
            let a = ssim(&x, &y, &cfg).unwrap();
            prop_assert!((a - ssim(&y, &x, &cfg).unwrap()).abs() < 1e-14);
            prop_assert!(a.abs() <= 1.0 + 1e-12);
        }

        // Near-identical pairs: the luminance term stays close to 1, so a
        // shared offset barely moves the score.
        #[test]
        fn shared_offset_barely_changes_ssim((x, y) in pair()) {
            let cfg = SsimConfig::default();
            let shift = |t: &Tensor<f64>| t.map(|v| v + 0.01);
            let d = (ssim(&x, &y, &cfg).unwrap() - ssim(&shift(&x), &shift(&y), &cfg).unwrap()).abs();
            prop_assert!(d < 1e-6, "changed by {d:e}");
        }

        #[test]
        fn psnr_of_a_uniform_offset(offset in 1e-3f64..0.5) {
            let a = Tensor::<f64>::full([1, 3, 4, 4], 0.25);
            let b = a.map(|v| v + offset);
            let want = -20.0 * offset.log10();
            prop_assert!((psnr(&a, &b, 1.0).unwrap() - want).abs() < 1e-9);
        }
    }
}
