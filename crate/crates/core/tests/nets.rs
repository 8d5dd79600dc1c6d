#![allow(clippy::needless_range_loop)]

use dscl_core::nets::{build_multihead, ArchConfig, ArchKind, Mode, Model, ParamGroup, Trainable, LUMA_BT601};
use dscl_core::tensor::gradcheck::{check_gradients, GradCheckOptions};
use dscl_core::tensor::optim::Sgd;
use dscl_core::tensor::{Tape, Tensor};
use dscl_core::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model<T: dscl_core::tensor::Elem>(arch: ArchKind, cfg: &ArchConfig, tasks: &[usize], seed: u64) -> Model<T> {
    Model::new(build_multihead(arch, cfg, tasks).unwrap(), seed).unwrap()
}

fn image(n: usize, size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[n, 3, size, size], 0.0, 1.0, &mut rng)
}

#[test]
fn small_input_reaches_a_512_vector() {
    let m: Model<f32> = model(ArchKind::Resnet18, &ArchConfig::new(32, 1.0), &[10], 0);
    let f = m.feature_map(&image(1, 32, 1), Mode::Eval).unwrap();
    assert_eq!(f.dims(), &[1, 512, 1, 1]);
}

#[test]
fn paper_resolution_concat_map() {
    let m: Model<f32> = model(ArchKind::Ds, &ArchConfig::new(224, 1.0), &[10], 0);
    let f = m.feature_map(&image(1, 224, 2), Mode::Eval).unwrap();
    assert_eq!(f.dims(), &[1, 1024, 7, 7]);
    let logits = m.predict(&image(1, 224, 2), &[0], Mode::Eval, 1).unwrap();
    assert_eq!(logits[0].dims(), &[1, 10]);
}

#[test]
fn constant_color_gives_constant_color_map() {
    let cfg = ArchConfig::new(64, 0.25);
    let m: Model<f32> = model(ArchKind::Ds, &cfg, &[2], 3);
    let color_c = cfg.widths()[3];
    let p = [0.8f32, 0.3, 0.15];
    let mut big = Tensor::zeros(&[1, 3, 64, 64]);
    for c in 0..3 {
        big.data_mut()[c * 4096..(c + 1) * 4096].fill(p[c]);
    }
    let pixel = Tensor::from_vec(vec![1, 3, 1, 1], p.to_vec()).unwrap();
    let map = m
        .feature_map(&big, Mode::Eval)
        .unwrap()
        .slice_channels(0, color_c)
        .unwrap();
    let one = m
        .feature_map(&pixel, Mode::Eval)
        .unwrap()
        .slice_channels(0, color_c)
        .unwrap();
    let d = map.dims().to_vec();
    assert_eq!(d, vec![1, color_c, 2, 2]);
    let plane = d[2] * d[3];
    for c in 0..color_c {
        for s in 0..plane {
            let v = map.data()[c * plane + s];
            let want = one.data()[c];
            assert!(
                (v - want).abs() <= 1e-6 * want.abs().max(1.0),
                "channel {c} pos {s}: {v} vs {want}"
            );
        }
    }
}

#[test]
fn strict_color_is_blind_to_pixel_arrangement() {
    let cfg = ArchConfig {
        strict_color: true,
        ..ArchConfig::new(32, 0.25)
    };
    let m: Model<f32> = model(ArchKind::Color, &cfg, &[4], 5);
    let x = image(1, 32, 6);
    let base = m.feature_map(&x, Mode::Eval).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let mut perm: Vec<usize> = (0..1024).collect();
        perm.shuffle(&mut rng);
        let mut y = x.clone();
        for c in 0..3 {
            for (dst, &src) in perm.iter().enumerate() {
                y.data_mut()[c * 1024 + dst] = x.data()[c * 1024 + src];
            }
        }
        let f = m.feature_map(&y, Mode::Eval).unwrap();
        assert!(f.max_abs_diff(&base) < 1e-6, "diff {}", f.max_abs_diff(&base));
    }
}

#[test]
fn faithful_color_branch_sees_arrangement() {
    let m: Model<f32> = model(ArchKind::Color, &ArchConfig::new(32, 0.25), &[4], 5);
    let x = image(1, 32, 6);
    let mut y = x.clone();
    for c in 0..3 {
        y.data_mut()[c * 1024..(c + 1) * 1024].reverse();
    }
    let (a, b) = (
        m.feature_map(&x, Mode::Eval).unwrap(),
        m.feature_map(&y, Mode::Eval).unwrap(),
    );
    assert!(a.max_abs_diff(&b) > 0.0);
}

#[test]
fn shape_branch_ignores_luma_preserving_chroma() {
    // f64 so the stored perturbed pixels keep their luma to well below 1e-6
    let m: Model<f64> = model(ArchKind::Shape, &ArchConfig::new(32, 0.25), &[4], 8);
    let x = image(1, 32, 9).cast::<f64>();
    let base = m.feature_map(&x, Mode::Eval).unwrap();
    let [cr, cg, cb] = LUMA_BT601;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..5 {
        let mut y = x.clone();
        for p in 0..1024 {
            let a: f64 = rng.random_range(-0.2..0.2);
            y.data_mut()[p] += a;
            y.data_mut()[1024 + p] -= a * cr / (2.0 * cg);
            y.data_mut()[2048 + p] -= a * cr / (2.0 * cb);
        }
        let f = m.feature_map(&y, Mode::Eval).unwrap();
        assert!(f.max_abs_diff(&base) < 1e-6, "diff {}", f.max_abs_diff(&base));
    }
}

#[test]
fn training_a_task_leaves_other_heads_untouched() {
    let mut m: Model<f32> = model(ArchKind::Ds, &ArchConfig::new(32, 0.125), &[2, 3], 11);
    let before: Vec<_> = m
        .head_ids(0)
        .iter()
        .map(|&id| m.store().get(id).value.clone())
        .collect();
    let shared_before = m.store().get(m.shared_ids()[0]).value.clone();
    let mut sgd = Sgd::new(0.9, 5e-4);
    let x = image(4, 32, 12);
    let mut ids = m.shared_ids();
    ids.extend(m.head_ids(1));
    for _ in 0..2 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = m
            .forward(&mut tape, xv, &[1], Mode::Train, Trainable::SharedAndHead(1))
            .unwrap();
        let loss = tape.cross_entropy(out.logits[0], &[0, 1, 2, 1]).unwrap();
        let updates = out.bn_updates;
        let grads = tape.backward(loss).unwrap();
        for id in m.head_ids(0) {
            assert!(grads.param(id).is_none());
        }
        m.store_mut().accumulate_grads(grads.into_params());
        sgd.step(m.store_mut(), &ids, 0.05).unwrap();
        m.apply_bn_updates(&updates);
    }
    for (id, b) in m.head_ids(0).iter().zip(&before) {
        assert_eq!(&m.store().get(*id).value, b);
    }
    assert_ne!(m.store().get(m.shared_ids()[0]).value, shared_before);
    assert!(m.param_count(ParamGroup::Head(0)) > 0);
}

#[test]
fn running_stats_follow_momentum() {
    let mut m: Model<f64> = model(ArchKind::Color, &ArchConfig::new(32, 0.125), &[2], 13);
    let x = image(2, 32, 14).cast::<f64>();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = m.forward(&mut tape, xv, &[0], Mode::Train, Trainable::None).unwrap();
    // first BN sees the stem conv output; recompute its channel means directly
    let w = &m.store().get(m.store().find("color.conv1.weight").unwrap()).value;
    let cout = w.dims()[0];
    let mut means = vec![0.0; cout];
    let ho = 16;
    for o in 0..cout {
        let mut s = 0.0;
        for n in 0..2 {
            for i in 0..ho {
                for j in 0..ho {
                    for c in 0..3 {
                        s += w.data()[o * 3 + c] * x.data()[n * 3072 + c * 1024 + 2 * i * 32 + 2 * j];
                    }
                }
            }
        }
        means[o] = s / (2 * ho * ho) as f64;
    }
    m.apply_bn_updates(&out.bn_updates);
    let (rm, rv) = m.running_stats("color.bn1").unwrap();
    for o in 0..cout {
        assert!((rm[o] - 0.1 * means[o]).abs() < 1e-9);
        assert!(rv[o] > 0.9 * 1.0 - 1e-12);
    }
}

#[test]
fn checkpoint_roundtrip_restores_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dscl");
    let cfg = ArchConfig::new(32, 0.125);
    let mut a: Model<f32> = model(ArchKind::Ds, &cfg, &[2, 2], 15);
    let x = image(3, 32, 16);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = a.forward(&mut tape, xv, &[0], Mode::Train, Trainable::None).unwrap();
    a.apply_bn_updates(&out.bn_updates);
    a.save(&path).unwrap();
    let mut b: Model<f32> = model(ArchKind::Ds, &cfg, &[2, 2], 99);
    b.load(&path).unwrap();
    assert_eq!(
        a.predict(&x, &[0, 1], Mode::Eval, 2).unwrap(),
        b.predict(&x, &[0, 1], Mode::Eval, 2).unwrap()
    );
    let mut other: Model<f32> = model(ArchKind::Resnet18, &cfg, &[2, 2], 0);
    assert!(matches!(other.load(&path), Err(Error::Format { .. })));
    let mut wide: Model<f64> = model(ArchKind::Ds, &cfg, &[2, 2], 0);
    assert!(matches!(wide.load(&path), Err(Error::Format { .. })));
}

#[test]
fn wrong_input_channels_is_a_shape_error() {
    let m: Model<f32> = model(ArchKind::Ds, &ArchConfig::new(32, 0.125), &[2], 0);
    let x = Tensor::<f32>::zeros(&[1, 1, 32, 32]);
    assert!(matches!(m.feature_map(&x, Mode::Eval), Err(Error::Shape { .. })));
}

#[test]
fn full_ds_forward_gradients_match_finite_differences() {
    let cfg = ArchConfig {
        head_channels: 8,
        ..ArchConfig::new(64, 0.0625)
    };
    let m: Model<f64> = model(ArchKind::Ds, &cfg, &[3], 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut inputs = vec![("x".to_string(), Tensor::uniform(&[2, 3, 64, 64], 0.0, 1.0, &mut rng))];
    for (_, p) in m.store().iter() {
        inputs.push((p.name.clone(), p.value.clone()));
    }
    let report = check_gradients(
        &inputs,
        |tape, vars| {
            let out = m.forward_with_params(tape, vars[0], &vars[1..], &[0], Mode::BatchStats)?;
            tape.cross_entropy(out.logits[0], &[0, 2])
        },
        GradCheckOptions {
            max_coords: Some(3),
            seed: 19,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "max rel error {}", report.max_rel_error());
}
