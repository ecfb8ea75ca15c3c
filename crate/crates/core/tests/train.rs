use std::ops::ControlFlow;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skipcross::data::{synth_generate, PreprocessConfig, Sample, SceneSpec};
use skipcross::model::{FusionTopology, SkipcrossNet, Strategy};
use skipcross::raster::{Image, Mask};
use skipcross::tensor::{Param, Tensor};
use skipcross::train::{
    augment, fit, scale_brightness, step_with, train_step, validate, Adam, AugmentFlags,
    PlateauScheduler, TrainConfig, TrainError,
};

fn tiny() -> FusionTopology {
    FusionTopology::new(vec![1, 2], vec![4, 8], Strategy::Skipcross)
}

fn samples(n: usize, size: usize) -> Vec<Sample> {
    let cfg = PreprocessConfig {
        width: size,
        height: size,
        ..PreprocessConfig::default()
    };
    let spec = SceneSpec {
        width: size,
        height: size,
        ..SceneSpec::default()
    };
    synth_generate(&spec, n)
        .unwrap()
        .iter()
        .map(|s| s.to_sample(&cfg).unwrap())
        .collect()
}

fn quiet(cfg: TrainConfig) -> TrainConfig {
    TrainConfig {
        augment: AugmentFlags::NONE,
        crop_size: (32, 32),
        batch_size: 2,
        ..cfg
    }
}

/// Scalar loss `(x - 3)^2` recorded on the tape.
fn quadratic_step(opt: &mut Adam<f64>, x: &Param<f64>) -> f64 {
    step_with(opt, |tape| {
        let d = tape.param(x).add(tape.constant(Tensor::scalar(-3.0)))?;
        Ok(d.scale(d)?)
    })
    .unwrap()
}

#[test]
fn adam_matches_reference_on_quadratic() {
    let x = Param::new(Tensor::scalar(0.0f64));
    let mut opt = Adam::new(vec![x.clone()], 0.01);
    let (mut rx, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    let mut last = f64::INFINITY;
    for t in 1..=100 {
        let loss = quadratic_step(&mut opt, &x);
        assert!((loss - (rx - 3.0).powi(2)).abs() <= 1e-12 * loss);
        assert!(loss < last, "loss rose at step {t}");
        last = loss;
        let g = 2.0 * (rx - 3.0);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        rx -= 0.01 * mh / (vh.sqrt() + 1e-8);
        assert!((x.value().item() - rx).abs() < 1e-12);
    }
    assert_eq!(opt.steps(), 100);
    assert_eq!(x.grad().item(), 0.0);
}

#[test]
fn adam_converges_to_minimizer() {
    let x = Param::new(Tensor::scalar(-5.0f64));
    let mut opt = Adam::new(vec![x.clone()], 0.05);
    for _ in 0..3000 {
        quadratic_step(&mut opt, &x);
    }
    assert!(
        (x.value().item() - 3.0).abs() < 1e-2,
        "{}",
        x.value().item()
    );
}

#[test]
fn untouched_and_frozen_params_do_not_move() {
    let x = Param::new(Tensor::scalar(1.0f64));
    let idle = Param::new(Tensor::new(&[3], vec![0.5, -2.0, 7.0]).unwrap());
    let frozen = Param::new(Tensor::scalar(4.0f64));
    frozen.set_trainable(false);
    let mut opt = Adam::new(vec![x.clone(), idle.clone(), frozen.clone()], 0.1);
    for _ in 0..10 {
        step_with(&mut opt, |tape| {
            let d = tape.param(&x).scale(tape.param(&frozen))?;
            Ok(d.scale(d)?)
        })
        .unwrap();
    }
    assert_eq!(idle.value().data(), &[0.5, -2.0, 7.0]);
    assert_eq!(frozen.value().item(), 4.0);
    assert_ne!(x.value().item(), 1.0);
    let (m, v) = opt.moments(1);
    assert!(m.data().iter().chain(v.data()).all(|&z| z == 0.0));
}

#[test]
fn non_finite_loss_aborts() {
    let x = Param::new(Tensor::scalar(f64::NAN));
    let mut opt = Adam::new(vec![x.clone()], 0.1);
    let err = step_with(&mut opt, |tape| {
        let d = tape.param(&x);
        Ok(d.scale(d)?)
    })
    .unwrap_err();
    assert!(matches!(err, TrainError::NonFinite { step: 1, .. }));
    assert_eq!(opt.steps(), 0);
}

#[test]
fn train_step_reduces_loss_on_repeated_batch() {
    let data = samples(2, 32);
    let net = SkipcrossNet::<f64>::build(&tiny(), 3).unwrap();
    let mut opt = Adam::new(net.trainable_params(), 1e-2);
    let refs: Vec<&Sample> = data.iter().collect();
    let first = train_step(&net, &refs, &mut opt).unwrap();
    let mut last = first;
    for _ in 0..20 {
        last = train_step(&net, &refs, &mut opt).unwrap();
    }
    assert!(last < first, "{last} >= {first}");
    assert!(net
        .params()
        .iter()
        .all(|(_, p)| p.grad().data().iter().all(|&g| g == 0.0)));
}

#[test]
fn fit_is_bitwise_deterministic() {
    let data = samples(4, 32);
    let cfg = TrainConfig {
        max_epochs: 3,
        augment: AugmentFlags::ALL,
        crop_size: (16, 16),
        batch_size: 2,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = || {
        let net = SkipcrossNet::<f32>::build(&tiny(), 5).unwrap();
        let out = fit(&net, &data, &data, &cfg, |_, _| ControlFlow::Continue(())).unwrap();
        (out.history, net.snapshot())
    };
    let (h1, w1) = run();
    let (h2, w2) = run();
    assert_eq!(h1.epochs.len(), 3);
    for (a, b) in h1.epochs.iter().zip(&h2.epochs) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.val_maxf.to_bits(), b.val_maxf.to_bits());
        assert_eq!(a.lr, b.lr);
    }
    assert!(w1.iter().zip(&w2).all(|(a, b)| a.bitwise_eq(b)));
}

#[test]
fn zero_epochs_leave_net_untouched() {
    let data = samples(2, 32);
    let net = SkipcrossNet::<f32>::build(&tiny(), 1).unwrap();
    let before = net.snapshot();
    let cfg = quiet(TrainConfig {
        max_epochs: 0,
        ..TrainConfig::default()
    });
    let out = fit(&net, &data, &data, &cfg, |_, _| ControlFlow::Continue(())).unwrap();
    assert!(out.history.epochs.is_empty() && out.best.is_none());
    assert!(before
        .iter()
        .zip(net.snapshot())
        .all(|(a, b)| a.bitwise_eq(&b)));
}

/// Expected per-epoch rates for a constant validation score.
fn simulated_rates(lr: f64, decay: f64, min_lr: f64, patience: usize, epochs: usize) -> Vec<f64> {
    let (mut rate, mut bad, mut out) = (lr, 0, Vec::new());
    for epoch in 1..=epochs {
        out.push(rate);
        if epoch > 1 {
            bad += 1;
            if bad == patience {
                rate = (rate * decay).max(min_lr);
                bad = 0;
            }
        }
    }
    out
}

#[test]
fn frozen_network_triggers_plateau_decay() {
    let data = samples(2, 32);
    let net = SkipcrossNet::<f32>::build(&tiny(), 2).unwrap();
    net.params()
        .iter()
        .for_each(|(_, p)| p.set_trainable(false));
    let cfg = quiet(TrainConfig {
        max_epochs: 12,
        plateau_patience: 3,
        lr: 1e-2,
        min_lr: 5e-5,
        ..TrainConfig::default()
    });
    let out = fit(&net, &data, &data, &cfg, |_, _| ControlFlow::Continue(())).unwrap();
    let rates: Vec<f64> = out.history.epochs.iter().map(|r| r.lr).collect();
    assert_eq!(rates, simulated_rates(1e-2, 0.1, 5e-5, 3, 12));
    assert_eq!(rates[3], 1e-2);
    assert_eq!(rates[4], 1e-2 * 0.1);
    assert_eq!(*rates.last().unwrap(), 5e-5);
    assert_eq!(out.best.as_ref().unwrap().0, 1);
}

#[test]
fn best_snapshot_reaches_recorded_maximum() {
    let data = samples(4, 32);
    let net = SkipcrossNet::<f32>::build(&tiny(), 8).unwrap();
    let cfg = quiet(TrainConfig {
        max_epochs: 6,
        lr: 3e-3,
        ..TrainConfig::default()
    });
    let out = fit(&net, &data, &data, &cfg, |_, _| ControlFlow::Continue(())).unwrap();
    let (epoch, snap) = out.best.unwrap();
    let top = out.history.best().unwrap();
    assert_eq!(top.epoch, epoch);
    net.restore(&snap).unwrap();
    let v = validate(&net, &data, 2).unwrap();
    assert_eq!(v.maxf(), top.val_maxf);
}

#[test]
fn early_stop_and_csv() {
    let data = samples(2, 32);
    let net = SkipcrossNet::<f32>::build(&tiny(), 4).unwrap();
    let cfg = quiet(TrainConfig {
        max_epochs: 10,
        ..TrainConfig::default()
    });
    let out = fit(&net, &data, &data, &cfg, |r, _| {
        if r.epoch == 2 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap();
    let csv = out.history.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,loss,val_maxf,lr,seconds");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("2,"));
}

#[test]
fn invalid_configs_rejected() {
    let data = samples(1, 32);
    let net = SkipcrossNet::<f32>::build(&tiny(), 0).unwrap();
    for cfg in [
        TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr_decay: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            crop_size: (40, 48),
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(
            fit(&net, &data, &data, &cfg, |_, _| ControlFlow::Continue(())),
            Err(TrainError::Config(_))
        ));
    }
    assert!(matches!(
        fit(&net, &[], &data, &quiet(TrainConfig::default()), |_, _| {
            ControlFlow::Continue(())
        }),
        Err(TrainError::EmptySet(_))
    ));
}

/// Sample whose pixels encode their own coordinates.
fn coordinate_sample(h: usize, w: usize) -> Sample {
    let mut rgb = Image::zeros(3, h, w);
    let mut adi = Image::zeros(1, h, w);
    let mut mask = Mask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            rgb.set(0, y, x, y as f32 / h as f32);
            rgb.set(1, y, x, x as f32 / w as f32);
            rgb.set(2, y, x, 0.5);
            adi.set(0, y, x, ((y * w + x) % 251) as f32 / 251.0);
            mask.set(y, x, (x + 2 * y) % 3 == 0);
        }
    }
    Sample {
        id: "grid".into(),
        rgb,
        adi,
        mask,
    }
}

#[test]
fn disabled_augmentation_is_identity() {
    let s = coordinate_sample(32, 48);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(
        augment(&s, AugmentFlags::NONE, (32, 48), &mut rng).unwrap(),
        s
    );
    let resized = augment(&s, AugmentFlags::NONE, (16, 16), &mut rng).unwrap();
    assert_eq!((resized.height(), resized.width()), (16, 16));
}

#[test]
fn unit_brightness_is_identity() {
    let s = coordinate_sample(16, 16);
    let mut rgb = s.rgb.clone();
    scale_brightness(&mut rgb, 1.0);
    assert_eq!(rgb, s.rgb);
}

#[test]
fn crop_windows_agree_across_fields() {
    let s = coordinate_sample(48, 64);
    let flags = AugmentFlags {
        crop: true,
        ..AugmentFlags::NONE
    };
    for seed in 0..20 {
        let out = augment(&s, flags, (32, 32), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let y0 = (out.rgb.get(0, 0, 0) * 48.0).round() as usize;
        let x0 = (out.rgb.get(1, 0, 0) * 64.0).round() as usize;
        assert_eq!(out.rgb, s.rgb.crop(y0, x0, 32, 32));
        assert_eq!(out.adi, s.adi.crop(y0, x0, 32, 32));
        assert_eq!(out.mask, s.mask.crop(y0, x0, 32, 32));
    }
    let too_big = augment(&s, flags, (64, 64), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(too_big, Err(TrainError::Config(_))));
}

#[test]
fn road_removal_fills_a_road_rectangle() {
    let mut s = coordinate_sample(32, 32);
    s.mask = Mask::zeros(32, 32);
    for y in 20..32 {
        for x in 10..20 {
            s.mask.set(y, x, true);
        }
    }
    let flags = AugmentFlags {
        road_removal: true,
        ..AugmentFlags::NONE
    };
    let mut applied = 0;
    for seed in 0..40 {
        let out = augment(&s, flags, (32, 32), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(out.mask, s.mask);
        assert_eq!(out.adi, s.adi);
        let changed: Vec<(usize, usize)> = (0..32)
            .flat_map(|y| (0..32).map(move |x| (y, x)))
            .filter(|&(y, x)| {
                out.rgb.get(0, y, x) != s.rgb.get(0, y, x)
                    || out.rgb.get(1, y, x) != s.rgb.get(1, y, x)
            })
            .collect();
        if changed.is_empty() {
            continue;
        }
        applied += 1;
        let ys = changed.iter().map(|c| c.0);
        let xs = changed.iter().map(|c| c.1);
        let (y0, y1) = (ys.clone().min().unwrap(), ys.max().unwrap());
        let (x0, x1) = (xs.clone().min().unwrap(), xs.max().unwrap());
        let area = (y1 - y0 + 1) * (x1 - x0 + 1);
        assert!((40..=175).contains(&area), "area {area}");
        let hits_road = (y0..=y1).any(|y| (x0..=x1).any(|x| s.mask.get(y, x) == 1));
        assert!(hits_road);
        let mean = s.rgb.plane(2).iter().sum::<f32>() / 1024.0;
        assert_eq!(out.rgb.get(2, y0, x0), mean);
    }
    assert!((10..=30).contains(&applied), "applied {applied} of 40");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn augmentation_keeps_fields_aligned(
        seed in any::<u64>(),
        multiscale in any::<bool>(),
        crop in any::<bool>(),
        brightness in any::<bool>(),
        road_removal in any::<bool>(),
    ) {
        let s = coordinate_sample(64, 64);
        let flags = AugmentFlags { multiscale, crop, brightness, road_removal };
        let a = augment(&s, flags, (48, 48), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = augment(&s, flags, (48, 48), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        a.check_aligned().unwrap();
        prop_assert_eq!((a.height(), a.width()), (48, 48));
        prop_assert!(a.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn learning_rate_never_rises_or_drops_below_floor(
        scores in proptest::collection::vec(0.0f64..1.0, 1..60),
        patience in 1usize..5,
    ) {
        let cfg = TrainConfig { lr: 1e-3, min_lr: 1e-5, plateau_patience: patience, ..TrainConfig::default() };
        let mut sched = PlateauScheduler::new(&cfg);
        let mut last = sched.lr;
        for s in scores {
            let lr = sched.observe(s);
            prop_assert!(lr <= last && lr >= 1e-5);
            last = lr;
        }
    }
}
