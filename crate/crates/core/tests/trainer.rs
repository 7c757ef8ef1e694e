use dpafnet::model::{Model, ModelConfig};
use dpafnet::objective::{LossWeights, PairMetrics};
use dpafnet::rain::{Dataset, LoadedPair, RainRanges};
use dpafnet::train::{adam_step, evaluate, evaluate_with, read_trace, AdamConfig, AdamState, Schedule, TrainConfig, Trainer};
use dpafnet::{Error, Tensor};

fn data(n: usize) -> Dataset {
    Dataset::synthetic(n, (16, 16), &RainRanges::default(), 3).unwrap()
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch: 2,
        patch: Some(12),
        seed: 4,
        schedule: Schedule { lr_init: 1e-3, lr_final: 1e-5, total_epochs: epochs, warmup_steps: 5 },
        ..TrainConfig::default()
    }
}

fn micro(seed: u64) -> Model<f32> {
    Model::build(&ModelConfig::micro(), seed).unwrap()
}

#[test]
fn adam_first_step_closed_form() {
    // After one step the bias-corrected moments are g and g², so the update
    // is lr·g/(|g| + ε).
    let p0 = Tensor::<f64>::from_fn([7], |i| i as f64 * 0.3 - 1.0);
    let g = Tensor::<f64>::new([7], vec![0.5, -2.0, 1e-3, 0.0, -1e-9, 3.0, -0.25]).unwrap();
    let mut params = vec![p0.clone()];
    let mut state = AdamState::new(&params, AdamConfig::default());
    let lr = 0.01;
    adam_step(&mut params, std::slice::from_ref(&g), &mut state, lr).unwrap();
    for i in 0..7 {
        let gi = g.data()[i];
        let want = p0.data()[i] - lr * gi / (gi.abs() + 1e-8);
        assert!((params[0].data()[i] - want).abs() < 1e-15, "entry {i}");
    }
    assert_eq!(state.step, 1);

    // Second step with the same gradient: m̂ = g, v̂ = g² again.
    let p1 = params[0].clone();
    adam_step(&mut params, std::slice::from_ref(&g), &mut state, lr).unwrap();
    for i in 0..7 {
        let gi = g.data()[i];
        let want = p1.data()[i] - lr * gi / (gi.abs() + 1e-8);
        assert!((params[0].data()[i] - want).abs() < 1e-14, "entry {i}");
    }
    let bad = vec![Tensor::<f64>::zeros([6])];
    assert!(adam_step(&mut params, &bad, &mut state, lr).is_err());
}

#[test]
fn learning_rate_closed_forms() {
    let s = Schedule { lr_init: 2e-4, lr_final: 1e-6, total_epochs: 10, warmup_steps: 100 };
    let spe = 50;
    assert_eq!(s.lr_at(0, spe), 0.0);
    assert!((s.lr_at(50, spe) - 1e-4).abs() < 1e-18);
    assert_eq!(s.lr_at(100, spe), 2e-4);
    assert_eq!(s.lr_at(500, spe), 1e-6);
    assert_eq!(s.lr_at(10_000, spe), 1e-6);
    // Halfway through the decay the cosine factor is cos²(π/4) = ½.
    let mid = s.lr_at(300, spe);
    let want = 1e-6 + (2e-4 - 1e-6) * (std::f64::consts::FRAC_PI_4).cos().powi(2);
    assert!((mid - want).abs() < 1e-18, "{mid} vs {want}");
    let mut prev = f64::INFINITY;
    for step in 100..=500 {
        let lr = s.lr_at(step, spe);
        assert!(lr <= prev, "lr rose at step {step}");
        assert!((1e-6..=2e-4).contains(&lr));
        prev = lr;
    }
    for step in 1..100 {
        assert!(s.lr_at(step, spe) > s.lr_at(step - 1, spe));
    }
    assert!(Schedule { lr_final: 1.0, ..s }.validate().is_err());
}

#[test]
fn one_pair_one_epoch_batch_one_is_one_step() {
    let d = data(1);
    let cfg = TrainConfig { batch: 1, schedule: Schedule { total_epochs: 1, ..Schedule::default() }, ..TrainConfig::default() };
    let mut t = Trainer::new(micro(0), cfg, &d).unwrap();
    assert_eq!((t.steps_per_epoch(), t.total_steps()), (1, 1));
    let recs = t.run(None, |_| {}).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!((t.state().step, t.state().epoch, t.state().batch_in_epoch), (1, 1, 0));
    assert!(t.is_finished());
    assert!(t.step().is_err());
}

#[test]
fn incomplete_batches_are_dropped() {
    let d = data(7);
    let t = Trainer::new(micro(0), TrainConfig { batch: 3, ..quick_config(2) }, &d).unwrap();
    assert_eq!((t.steps_per_epoch(), t.total_steps()), (2, 4));
    let too_big = TrainConfig { batch: 8, ..quick_config(2) };
    assert!(matches!(Trainer::new(micro(0), too_big, &d), Err(Error::Config(_))));
}

#[test]
fn trace_records_follow_the_schedule() {
    let d = data(4);
    let cfg = quick_config(5);
    let mut t = Trainer::new(micro(1), cfg.clone(), &d).unwrap();
    let recs = t.run(None, |_| {}).unwrap();
    assert_eq!(recs.len(), 10);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r.step, i as u64);
        assert_eq!(r.epoch, i / 2);
        assert_eq!(r.lr, cfg.schedule.lr_at(i as u64, 2));
        let w = cfg.weights;
        let sum = w.w_mse * r.loss_mse.unwrap() + w.w_ssim * r.loss_ssim.unwrap() + w.w_perp * r.loss_perp.unwrap();
        assert!((r.loss_total - sum).abs() < 1e-12);
    }
    assert_eq!(t.state().recent_losses.len(), 10);
}

#[test]
fn training_is_deterministic() {
    let d = data(6);
    let run = || {
        let mut t = Trainer::new(micro(2), quick_config(100), &d).unwrap();
        let recs = t.run_steps(50).unwrap();
        (recs, t.model.params.to_bytes())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.len(), 50);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let d = data(6);
    let dir = tempfile::tempdir().unwrap();
    let mut whole = Trainer::new(micro(5), quick_config(100), &d).unwrap();
    let full = whole.run_steps(50).unwrap();

    let mut first = Trainer::new(micro(5), quick_config(100), &d).unwrap();
    let mut split = first.run_steps(23).unwrap();
    let ckpt = dir.path().join("mid.ckpt");
    first.save(&ckpt).unwrap();
    drop(first);
    let mut second = Trainer::<f32>::resume(&ckpt, &d).unwrap();
    assert_eq!(second.state().step, 23);
    split.extend(second.run_steps(27).unwrap());

    assert_eq!(split, full);
    assert_eq!(second.model.params.to_bytes(), whole.model.params.to_bytes());
    assert_eq!(second.adam, whole.adam);
    assert_eq!(second.state(), whole.state());
}

#[test]
fn run_writes_trace_and_checkpoints() {
    let d = data(4);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { checkpoint_every_epochs: 2, ..quick_config(5) };
    let mut t = Trainer::new(micro(6), cfg, &d).unwrap();
    let mut seen = 0;
    let recs = t.run(Some(dir.path()), |_| seen += 1).unwrap();
    assert_eq!(seen, recs.len());
    assert_eq!(read_trace(&dir.path().join("trace.jsonl")).unwrap(), recs);
    for name in ["epoch_0002.ckpt", "epoch_0004.ckpt", "last.ckpt"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    assert!(!dir.path().join("epoch_0005.ckpt").exists());
    let resumed = Trainer::<f32>::resume(&dir.path().join("last.ckpt"), &d).unwrap();
    assert!(resumed.is_finished());
}

#[test]
fn max_steps_caps_the_run() {
    let d = data(4);
    let mut t = Trainer::new(micro(7), TrainConfig { max_steps: Some(3), ..quick_config(50) }, &d).unwrap();
    assert_eq!(t.run(None, |_| {}).unwrap().len(), 3);
    t.set_max_steps(Some(5));
    assert_eq!(t.run(None, |_| {}).unwrap().len(), 2);
}

#[test]
fn divergence_is_reported_with_the_step() {
    let d = data(2);
    let mut model = micro(8);
    let id = model.params.id("head.weight").unwrap();
    model.params.value_mut(id).data_mut()[0] = f32::NAN;
    let mut t = Trainer::new(model, TrainConfig { weights: LossWeights::MSE_ONLY, ..quick_config(3) }, &d).unwrap();
    match t.step() {
        Err(Error::NonFinite { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn overfitting_a_single_pair_reduces_the_loss() {
    let d = data(1);
    let cfg = TrainConfig {
        batch: 1,
        hflip: false,
        weights: LossWeights::MSE_ONLY,
        schedule: Schedule { lr_init: 2e-3, lr_final: 2e-3, total_epochs: 60, warmup_steps: 0 },
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(micro(9), cfg, &d).unwrap();
    let recs = t.run(None, |_| {}).unwrap();
    let (first, last) = (recs[0].loss_total, recs.last().unwrap().loss_total);
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn evaluation_oracles() {
    let d = data(3);
    // Clean images evaluated against themselves.
    let same = Dataset::from_pairs(
        d.pairs.iter().map(|p| LoadedPair { id: p.id.clone(), rainy: p.clean.clone(), clean: p.clean.clone() }).collect(),
    );
    let r = evaluate_with(&same, |x| Ok(x.clone())).unwrap();
    assert!(r.rows.iter().all(|row| row.psnr_db == f64::INFINITY && (row.ssim - 1.0).abs() < 1e-9));
    assert_eq!(r.mean_psnr_db, f64::INFINITY);

    // The identity baseline equals the raw rainy-vs-clean metrics.
    let base = evaluate_with(&d, |x| Ok(x.clone())).unwrap();
    for (row, p) in base.rows.iter().zip(&d.pairs) {
        let want = PairMetrics::measure::<f64>(&p.id, &p.rainy.to_tensor(), &p.clean.to_tensor()).unwrap();
        assert_eq!(*row, want);
    }
    let mean = base.rows.iter().map(|r| r.psnr_db).sum::<f64>() / 3.0;
    assert!((base.mean_psnr_db - mean).abs() < 1e-12);
    let mut ps: Vec<f64> = base.rows.iter().map(|r| r.psnr_db).collect();
    ps.sort_by(f64::total_cmp);
    assert_eq!(base.median_psnr_db, ps[1]);

    // A model with a zeroed head is the identity too.
    let mut m = micro(10);
    m.zero_head();
    let viaid = evaluate(&m, &d).unwrap();
    for (a, b) in viaid.rows.iter().zip(&base.rows) {
        assert!((a.psnr_db - b.psnr_db).abs() < 1e-4 && (a.ssim - b.ssim).abs() < 1e-6);
    }
}
