use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::synthetic;

fn rand_tensor<T: Float>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::c(rng.gen_range(-1.0..1.0))).collect())
}

fn build(cfg: &NetworkConfig, seed: u64) -> (RefSr, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let model = RefSr::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (model, store)
}

fn zero_shifts(n: usize) -> Shifts {
    Arc::from(vec![[0, 0]; n])
}

#[test]
fn encoder_pyramid_shapes() {
    let (model, store) = build(&NetworkConfig::tiny(), 1);
    let mut g = Graph::inference();
    let y = g.constant(Tensor::<f32>::zeros(&[1, 3, 160, 160]));
    let p = model.encoder().forward(&mut g, &store, y).unwrap();
    assert_eq!(g.shape(p.f1), &[1, 8, 40, 40]);
    assert_eq!(g.shape(p.f2), &[1, 8, 80, 80]);
    assert_eq!(g.shape(p.f4), &[1, 8, 160, 160]);
    assert!(g.value(p.f1).is_finite());
    let bad = g.constant(Tensor::<f32>::zeros(&[1, 3, 18, 16]));
    assert!(model.encoder().forward(&mut g, &store, bad).is_err());
}

#[test]
fn content_extractor_contract() {
    let (model, store) = build(&NetworkConfig::tiny(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor::<f32>(&[2, 3, 7, 9], &mut rng).map(|v| v.abs());
    let run = |x: &Tensor<f32>| {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let f = model.content().forward(&mut g, &store, xv);
        g.value(f).clone()
    };
    let a = run(&x);
    assert_eq!(a.shape(), &[2, 8, 7, 9]);
    assert!(a.is_finite());
    assert_eq!(a, run(&x));
}

#[test]
fn zero_routing_head_gives_half_gates() {
    let (model, mut store) = build(&NetworkConfig::tiny(), 4);
    let fas = model.fas_blocks()[0].clone();
    let Selection::Ras { fc_w, fc_b, bank, bias } = fas.select else {
        panic!("tiny config uses selection with a filter bank");
    };
    store.set(fc_w, Tensor::zeros(store.get(fc_w).shape()));
    store.set(fc_b, Tensor::zeros(&[2]));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let merged = rand_tensor::<f32>(&[1, 16, 6, 6], &mut rng);
    let mut g = Graph::inference();
    let m = g.constant(merged);
    let alpha = fas.select.routing(&mut g, &store, m).unwrap();
    assert!(g.value(alpha).data().iter().all(|&a| a == 0.5));
    let out = fas.select.forward(&mut g, &store, m).unwrap();
    // 0.5 * (E_1 + E_2) applied directly
    let bank_t = store.get(bank);
    let per = bank_t.numel() / 2;
    let half: Vec<f32> = (0..per).map(|i| 0.5 * (bank_t.data()[i] + bank_t.data()[per + i])).collect();
    let w = g.constant(Tensor::from_vec(&[8, 16, 3, 3], half));
    let b = g.param(&store, bias);
    let want = g.conv2d(m, w, Some(b), 1, 1);
    for (a, b) in g.value(out).data().iter().zip(g.value(want).data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn routing_gates_are_open_interval() {
    let (model, store) = build(&NetworkConfig::tiny(), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::inference();
    let m = g.constant(rand_tensor::<f32>(&[3, 16, 4, 4], &mut rng));
    for fas in model.fas_blocks() {
        let a = fas.select.routing(&mut g, &store, m).unwrap();
        assert!(g.value(a).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn selection_channel_mismatch_is_an_error() {
    let (model, store) = build(&NetworkConfig::tiny(), 8);
    let mut g = Graph::inference();
    let m = g.constant(Tensor::<f32>::zeros(&[1, 12, 4, 4]));
    assert!(matches!(model.fas_blocks()[0].select.forward(&mut g, &store, m), Err(Error::InvalidArgument(_))));
}

#[test]
fn degenerate_alignment_is_plain_conv() {
    let (model, store) = build(&NetworkConfig::tiny(), 9);
    let mdcn = &model.fas_blocks()[1].mdcn;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut g = Graph::inference();
    let f_ref = g.constant(rand_tensor::<f32>(&[2, 8, 9, 7], &mut rng));
    let off = g.constant(Tensor::zeros(&[2, 18, 9, 7]));
    let mask = g.constant(Tensor::full(&[2, 9, 9, 7], 1.0));
    let out = mdcn.sample(&mut g, &store, f_ref, off, mask, Some(zero_shifts(2 * 63)));
    let (w, b) = (g.param(&store, mdcn.weight), g.param(&store, mdcn.bias));
    let want = g.conv2d(f_ref, w, Some(b), 1, 1);
    for (a, b) in g.value(out).data().iter().zip(g.value(want).data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn rolled_reference_is_realigned_by_pre_offsets() {
    let (model, store) = build(&NetworkConfig::tiny(), 11);
    let mdcn = &model.fas_blocks()[0].mdcn;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (c, h, w, dy, dx) = (8, 16, 16, 2usize, 3usize);
    let base = rand_tensor::<f64>(&[1, c, h, w], &mut rng);
    // rolled[y + dy, x + dx] = base[y, x]
    let mut rolled = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                rolled[(ch * h + (y + dy) % h) * w + (x + dx) % w] = base.data()[(ch * h + y) * w + x];
            }
        }
    }
    let store64 = store.cast::<f64>();
    let mut g = Graph::inference();
    let b = g.constant(base);
    let r = g.constant(Tensor::from_vec(&[1, c, h, w], rolled));
    let off = g.constant(Tensor::zeros(&[1, 18, h, w]));
    let mask = g.constant(Tensor::full(&[1, 9, h, w], 1.0));
    let pre: Shifts = Arc::from(vec![[dy as i32, dx as i32]; h * w]);
    let aligned = mdcn.sample(&mut g, &store64, r, off, mask, Some(pre));
    let (wv, bv) = (g.param(&store64, mdcn.weight), g.param(&store64, mdcn.bias));
    let want = g.conv2d(b, wv, Some(bv), 1, 1);
    let (a, e) = (g.value(aligned).data(), g.value(want).data());
    for ch in 0..c {
        for y in 1..h - dy - 1 {
            for x in 1..w - dx - 1 {
                let i = (ch * h + y) * w + x;
                assert!((a[i] - e[i]).abs() < 1e-12, "({ch},{y},{x})");
            }
        }
    }
}

#[test]
fn zero_reference_with_zero_fusion_keeps_lr_path() {
    let cfg = NetworkConfig {
        enable_ras: false,
        ..NetworkConfig::tiny()
    };
    let (model, mut store) = build(&cfg, 13);
    let fas = model.fas_blocks()[0].clone();
    let Selection::Plain(conv) = &fas.select else {
        panic!("ras disabled");
    };
    for id in [conv.weight(), conv.bias().unwrap()] {
        store.set(id, Tensor::zeros(store.get(id).shape()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut g = Graph::inference();
    let f_lr = g.constant(rand_tensor::<f32>(&[1, 8, 6, 6], &mut rng));
    let f_ref = g.constant(Tensor::zeros(&[1, 8, 6, 6]));
    let out = fas.forward(&mut g, &store, f_lr, f_ref, &zero_shifts(36)).unwrap();
    let want = fas.tail(&mut g, &store, f_lr);
    assert_eq!(g.value(out), g.value(want));
}

#[test]
fn progressive_stacking_counts() {
    let full = NetworkConfig::desk();
    let single = NetworkConfig {
        enable_pfa: false,
        ..NetworkConfig::desk()
    };
    let (a, sa) = build(&full, 15);
    let (b, sb) = build(&single, 15);
    assert_eq!(a.fas_blocks().len(), 1 + 2 * 3);
    assert_eq!(b.fas_blocks().len(), 3);
    let per_fas = (sa.count() - sb.count()) / 4;
    assert_eq!(sa.count() - sb.count(), 4 * per_fas);
    let no_ras = NetworkConfig {
        enable_ras: false,
        ..NetworkConfig::desk()
    };
    let (_, sc) = build(&no_ras, 15);
    assert!(sc.iter().all(|(_, n, _)| !n.contains("bank")));
    assert!(sa.iter().any(|(_, n, _)| n.contains("bank")));
}

#[test]
fn end_to_end_shapes_and_determinism() {
    let (model, store) = build(&NetworkConfig::tiny(), 16);
    let hr = synthetic::texture(160, 160, 17);
    let lr = bicubic_resize(&hr, Scale::down(4)).unwrap();
    let reference = synthetic::texture(96, 128, 18);
    let a = model.infer(&store, &lr, &reference).unwrap();
    assert_eq!(a.dims(), (160, 160));
    assert_eq!(a, model.infer(&store, &lr, &reference).unwrap());
    let bad = synthetic::texture(30, 32, 1);
    assert!(model.infer(&store, &lr, &bad).is_err());
}

#[test]
fn every_parameter_gets_gradient() {
    let (model, store) = build(&NetworkConfig::tiny(), 19);
    let hr = synthetic::texture(32, 32, 20);
    let lr = bicubic_resize(&hr, Scale::down(4)).unwrap();
    let reference = synthetic::texture(32, 40, 21);
    let x = images_to_tensor::<f32>(&[&lr]).unwrap();
    let y = images_to_tensor::<f32>(&[&reference]).unwrap();
    let target = images_to_tensor::<f32>(&[&hr]).unwrap();
    let corr = model.correspond(&store, &x, &y).unwrap();
    assert!(corr.iter().all(|m| m.in_bounds()));
    let mut g = Graph::new();
    let (xv, yv, tv) = (g.constant(x), g.constant(y), g.constant(target));
    let out = model.forward(&mut g, &store, xv, yv, &corr).unwrap();
    let loss = g.l1(out, tv);
    let grads = g.backward(loss);
    for id in store.ids() {
        let n = grads.param(&store, id).map_or(0.0, |t| t.norm());
        assert!(n > 0.0, "{} has zero gradient", store.name(id));
    }
}

#[test]
fn encoder_matching_features_have_lr_shape() {
    let cfg = NetworkConfig {
        match_features: MatchFeatures::Encoder,
        ..NetworkConfig::tiny()
    };
    let (model, store) = build(&cfg, 22);
    let x = images_to_tensor::<f32>(&[&synthetic::texture(8, 10, 1)]).unwrap();
    let y = images_to_tensor::<f32>(&[&synthetic::texture(32, 24, 2)]).unwrap();
    let corr = model.correspond(&store, &x, &y).unwrap();
    assert_eq!((corr[0].height, corr[0].width, corr[0].ref_height, corr[0].ref_width), (8, 10, 8, 6));
    assert_eq!(corr, model.correspond(&store, &x, &y).unwrap());
}

#[test]
fn frozen_encoder_loads_and_is_fixed() {
    let (_, store) = build(&NetworkConfig::tiny(), 23);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.rrsr");
    let mut a = Archive::new(serde_json::Value::Null);
    a.push_store("model", &store);
    a.save(&path).unwrap();
    let cfg = NetworkConfig {
        encoder: EncoderKind::Frozen,
        encoder_weights: Some(path),
        ..NetworkConfig::tiny()
    };
    let mut frozen = ParamStore::<f32>::new();
    let model = RefSr::new(&cfg, &mut frozen, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    for id in model.encoder().params() {
        assert!(!frozen.is_trainable(id));
        assert_eq!(frozen.get(id), store.get(store.find(frozen.name(id)).unwrap()));
    }
    let missing = NetworkConfig {
        encoder: EncoderKind::Frozen,
        ..NetworkConfig::tiny()
    };
    assert!(matches!(
        RefSr::new(&missing, &mut ParamStore::<f32>::new(), &mut ChaCha8Rng::seed_from_u64(0)),
        Err(Error::Config { .. })
    ));
}
