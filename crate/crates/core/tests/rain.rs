use dpafnet::rain::{
    compose_additive, compose_heavy, generate_dataset, generate_pair, line_kernel, patch_window, render_streak_layer,
    salt_noise, sample_patch, Composition, Dataset, Image, Manifest, MaskSpec, RainParams, RainRanges, StreakLayer,
    MANIFEST_FILE,
};

fn background(h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |c, y, x| ((3 * c + 5 * y + 7 * x) % 11) as f64 / 11.0).unwrap()
}

fn layer(h: usize, w: usize, seed: u64) -> StreakLayer {
    render_streak_layer((h, w), 10.0, 0.05, 7, 0.8, seed).unwrap()
}

#[test]
fn heavy_with_full_transmission_is_additive() {
    let (h, w) = (20, 24);
    let b = background(h, w);
    let s = layer(h, w, 3);
    let params = RainParams {
        transmittance: 1.0,
        layers: vec![s.clone()],
        region_mask: vec![1; h * w],
        atmospheric_light: [0.3, 0.6, 0.9],
    };
    assert_eq!(compose_heavy(&b, &params).unwrap(), compose_additive(&b, &s).unwrap());
}

#[test]
fn zero_transmission_gives_the_atmospheric_light() {
    let (h, w) = (9, 7);
    let a = [0.25, 0.5, 0.875];
    let params = RainParams { transmittance: 0.0, layers: vec![layer(h, w, 1)], region_mask: vec![1; h * w], atmospheric_light: a };
    let out = compose_heavy(&background(h, w), &params).unwrap();
    assert_eq!(out, Image::filled(h, w, a).unwrap());
}

#[test]
fn heavy_matches_pointwise_formula() {
    let (h, w) = (12, 10);
    let b = background(h, w);
    let layers = vec![layer(h, w, 4), layer(h, w, 5)];
    let mask = MaskSpec::Rect { top: 2, left: 3, height: 6, width: 20 }.render(h, w);
    let (t, a) = (0.85, [0.9, 0.8, 0.7]);
    let params = RainParams { transmittance: t, layers: layers.clone(), region_mask: mask.clone(), atmospheric_light: a };
    let out = compose_heavy(&b, &params).unwrap();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let inside = (2..8).contains(&y) && x >= 3;
                assert_eq!(mask[y * w + x] == 1, inside);
                let s: f64 = layers.iter().map(|l| l.pixels[y * w + x]).sum::<f64>() * if inside { 1.0 } else { 0.0 };
                let want = (t * (b.get(c, y, x) + s) + (1.0 - t) * a[c]).clamp(0.0, 1.0);
                assert!((out.get(c, y, x) - want).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn composition_rejects_bad_parameters() {
    let b = background(8, 8);
    let ok = RainParams { transmittance: 0.9, layers: vec![layer(8, 8, 1)], region_mask: vec![1; 64], atmospheric_light: [1.0; 3] };
    assert!(compose_heavy(&b, &RainParams { transmittance: 1.2, ..ok.clone() }).is_err());
    assert!(compose_heavy(&b, &RainParams { layers: vec![layer(8, 9, 1)], ..ok.clone() }).is_err());
    assert!(compose_heavy(&b, &RainParams { region_mask: vec![1; 63], ..ok.clone() }).is_err());
    assert!(compose_heavy(&b, &RainParams { layers: vec![], ..ok }).is_err());
    assert!(render_streak_layer((8, 8), 0.0, 1.5, 5, 0.5, 0).is_err());
}

#[test]
fn line_kernel_directions() {
    let (r, k) = line_kernel(0.0, 5);
    assert_eq!(r, 2);
    for (i, v) in k.iter().enumerate() {
        let expect = if i % 5 == 2 { 0.2 } else { 0.0 };
        assert!((v - expect).abs() < 1e-15, "vertical tap {i}");
    }
    let (_, k) = line_kernel(90.0, 5);
    for (i, v) in k.iter().enumerate() {
        assert_eq!(*v > 0.0, i / 5 == 2);
    }
    // Positive angles lean the lower end to the right: the main diagonal.
    let (_, k) = line_kernel(45.0, 3);
    assert_eq!(k.iter().map(|&v| v > 0.0).collect::<Vec<_>>(), [true, false, false, false, true, false, false, false, true]);
    for (a, len) in [(13.0, 9), (-30.0, 6), (77.0, 1)] {
        let (_, k) = line_kernel(a, len);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let n = k.len();
        assert!((0..n).all(|i| k[i] == k[n - 1 - i]), "point symmetry at {a}°");
    }
}

/// Seed whose salt-noise map holds exactly one impulse, away from borders.
fn single_impulse(h: usize, w: usize, density: f64) -> (u64, usize, usize) {
    for seed in 0.. {
        let n = salt_noise(h, w, density, seed);
        let hits: Vec<usize> = (0..h * w).filter(|&i| n[i] == 1.0).collect();
        if let [p] = hits[..] {
            let (y, x) = (p / w, p % w);
            if (4..h - 4).contains(&y) && (4..w - 4).contains(&x) {
                return (seed, y, x);
            }
        }
    }
    unreachable!()
}

#[test]
fn a_single_drop_becomes_a_segment() {
    // Samples sit one pixel apart along the direction and round to the grid,
    // so diagonal streaks revisit pixels; values scale with the visit count.
    let (h, w) = (20, 20);
    let density = 1.0 / 400.0;
    let (seed, y0, x0) = single_impulse(h, w, density);
    for angle in [0.0f64, 45.0, -45.0, 90.0, 20.0] {
        let (sin, cos) = angle.to_radians().sin_cos();
        let mut visits = vec![0.0; h * w];
        for t in -3..=3 {
            let y = y0 as isize + (t as f64 * cos).round() as isize;
            let x = x0 as isize + (t as f64 * sin).round() as isize;
            visits[y as usize * w + x as usize] += 1.0;
        }
        let peak = visits.iter().copied().fold(0.0, f64::max);
        let s = render_streak_layer((h, w), angle, density, 7, 0.6, seed).unwrap();
        for i in 0..h * w {
            assert!((s.pixels[i] - 0.6 * visits[i] / peak).abs() < 1e-12, "{angle}° at ({},{})", i / w, i % w);
        }
    }
    let vertical = render_streak_layer((h, w), 0.0, density, 7, 0.6, seed).unwrap();
    assert_eq!(vertical.pixels.iter().filter(|&&v| v > 0.0).count(), 7);
    assert!((y0 - 3..=y0 + 3).all(|y| vertical.pixels[y * w + x0] == 0.6));
}

#[test]
fn streak_statistics_follow_their_parameters() {
    let s = render_streak_layer((64, 64), 5.0, 0.03, 9, 0.7, 12).unwrap();
    assert!(s.pixels.iter().all(|&v| (0.0..=0.7).contains(&v)));
    assert!((s.pixels.iter().copied().fold(0.0, f64::max) - 0.7).abs() < 1e-12);
    let denser = render_streak_layer((64, 64), 5.0, 0.09, 9, 0.7, 12).unwrap();
    assert!(denser.mean() > s.mean());
    assert_eq!(render_streak_layer((64, 64), 5.0, 0.03, 9, 0.7, 12).unwrap(), s);
    assert_eq!(render_streak_layer((8, 8), 0.0, 0.0, 3, 0.5, 0).unwrap().pixels, vec![0.0; 64]);
}

#[test]
fn patches_crop_both_images_at_the_same_place() {
    let (h, w) = (17, 23);
    let rainy = background(h, w);
    let clean = Image::from_fn(h, w, |c, y, x| (c * 1000 + y * 100 + x) as f64 / 4000.0).unwrap();
    for seed in 0..40 {
        let win = patch_window(h, w, 8, seed, true).unwrap();
        assert!(win.top + 8 <= h && win.left + 8 <= w);
        let (r, c) = sample_patch(&rainy, &clean, 8, seed, true).unwrap();
        for ch in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let sx = if win.flip { win.left + 7 - x } else { win.left + x };
                    assert_eq!(r.get(ch, y, x), rainy.get(ch, win.top + y, sx));
                    assert_eq!(c.get(ch, y, x), clean.get(ch, win.top + y, sx));
                }
            }
        }
        assert!(!patch_window(h, w, 8, seed, false).unwrap().flip);
    }
    let flips = (0..200).filter(|&s| patch_window(h, w, 8, s, true).unwrap().flip).count();
    assert!((60..140).contains(&flips), "{flips} flips in 200");
    assert!(patch_window(h, w, 18, 0, true).is_err());
}

#[test]
fn pairs_are_deterministic_and_in_range() {
    let ranges = RainRanges::default();
    let (a, ra) = generate_pair(5, 3, 24, 32, &ranges).unwrap();
    let (b, rb) = generate_pair(5, 3, 24, 32, &ranges).unwrap();
    assert_eq!((a.clone(), ra.clone()), (b, rb));
    let (c, _) = generate_pair(5, 4, 24, 32, &ranges).unwrap();
    assert_ne!(a.rainy, c.rainy);
    assert!(a.rainy.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let t = a.params.transmittance;
    assert!((0.8..=1.0).contains(&t));
    assert!((1..=3).contains(&a.params.layers.len()));
    assert_ne!(a.rainy, a.clean);
}

#[test]
fn additive_composition_setting() {
    let ranges = RainRanges { composition: Composition::Additive, ..RainRanges::default() };
    let (p, _) = generate_pair(1, 0, 16, 16, &ranges).unwrap();
    assert_eq!(p.rainy, compose_additive(&p.clean, &p.params.layers[0]).unwrap());
}

#[test]
fn manifest_regenerates_every_pair() {
    let dir = tempfile::tempdir().unwrap();
    let ranges = RainRanges::default();
    let m = generate_dataset(6, (20, 28), &ranges, 77, dir.path()).unwrap();
    let loaded = Dataset::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded.manifest, m);
    assert_eq!(Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap(), m);
    for (record, pair) in m.pairs.iter().zip(&loaded.pairs) {
        let again = m.regenerate(record).unwrap();
        assert_eq!(again.rainy.to_rgb8(), pair.rainy.to_rgb8(), "{}", record.id);
        assert_eq!(again.clean.to_rgb8(), pair.clean.to_rgb8(), "{}", record.id);
        assert_eq!(again.rainy.quantized(), pair.rainy);
    }
    let mem = Dataset::synthetic(6, (20, 28), &ranges, 77).unwrap();
    assert_eq!(mem.manifest, m);
    assert_eq!(mem.pairs, loaded.pairs);
}

#[test]
fn generating_twice_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(3, (16, 16), &RainRanges::default(), 9, a.path()).unwrap();
    generate_dataset(3, (16, 16), &RainRanges::default(), 9, b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn split_holds_out_the_tail() {
    let d = Dataset::synthetic(5, (8, 8), &RainRanges::default(), 1).unwrap();
    let ids: Vec<_> = d.pairs.iter().map(|p| p.id.clone()).collect();
    let (train, test) = d.split(2).unwrap();
    assert_eq!(train.pairs.iter().map(|p| &p.id).collect::<Vec<_>>(), ids[..3].iter().collect::<Vec<_>>());
    assert_eq!(test.pairs.iter().map(|p| &p.id).collect::<Vec<_>>(), ids[3..].iter().collect::<Vec<_>>());
    let d = Dataset::synthetic(2, (8, 8), &RainRanges::default(), 1).unwrap();
    assert!(d.split(2).is_err());
}

#[test]
fn png_round_trip_is_lossless_after_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let img = background(9, 13).quantized();
    let p = dir.path().join("x.png");
    img.save_png(&p).unwrap();
    assert_eq!(Image::load_png(&p).unwrap(), img);
}
