use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Reduces any output to a scalar through a fixed random projection.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let p = g.constant(rand_tensor(&shape, &mut rng, -1.0, 1.0));
    let m = g.mul(y, p);
    g.sum(m)
}

/// Central-difference check of every input element.
fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let eval = |ts: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.variable(t.clone())).collect();
        let y = f(&mut g, &vars);
        let l = probe(&mut g, y, 99);
        (g, vars, l)
    };
    let (g, vars, l) = eval(inputs);
    let grads = g.backward(l);
    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).expect("gradient reaches input");
        assert_eq!(analytic.shape(), t.shape());
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            let (gp, _, lp) = eval(&plus);
            let (gm, _, lm) = eval(&minus);
            let num = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-3);
            assert!(err < 1e-5, "input {k} elem {j}: analytic {a} vs numeric {num}");
        }
    }
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&[2, 3], &mut rng, 0.2, 1.5);
    let b = rand_tensor(&[2, 3], &mut rng, -1.0, 1.0);
    check(&[a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(s, v[1]);
        let m = g.mul(d, v[1]);
        let q = g.square(m);
        let r = g.sqrt(v[0]);
        let t = g.add(q, r);
        let sc = g.scale(t, -0.7);
        g.add_scalar(sc, 0.3)
    });
    check(&[b], |g, v| {
        let l = g.leaky_relu(v[0], 0.1);
        g.sigmoid(l)
    });
}

#[test]
fn reductions_and_l1() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&[2, 2, 3, 3], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[2, 2, 3, 3], &mut rng, -1.0, 1.0);
    check(std::slice::from_ref(&a), |g, v| g.mean(v[0]));
    check(std::slice::from_ref(&a), |g, v| g.sum_per_sample(v[0]));
    check(std::slice::from_ref(&a), |g, v| g.global_avg_pool(v[0]));
    check(&[a, b], |g, v| g.l1(v[0], v[1]));
    let row = rand_tensor(&[1, 4], &mut rng, -1.0, 1.0);
    check(&[row], |g, v| {
        let t = g.tile(v[0], 3);
        g.spread(t, 2, 3)
    });
}

#[test]
fn layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&[2, 8, 2, 3], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[2, 3, 2, 3], &mut rng, -1.0, 1.0);
    check(&[a.clone(), b], |g, v| {
        let c = g.concat(&[v[0], v[1]]);
        let n = g.narrow(c, 2, 8);
        g.pixel_shuffle(n, 2)
    });
    check(&[a], |g, v| g.reshape(v[0], &[4, 24]));
}

#[test]
fn pixel_shuffle_layout() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_vec(&[1, 4, 1, 1], vec![0.0, 1.0, 2.0, 3.0]));
    let y = g.pixel_shuffle(x, 2);
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0, 3.0]);
}

#[test]
fn linear_and_kernel_mix() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let w = rand_tensor(&[5, 4], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[5], &mut rng, -1.0, 1.0);
    check(&[x, w, b], |g, v| g.linear(v[0], v[1], Some(v[2])));
    let alpha = rand_tensor(&[2, 3], &mut rng, 0.0, 1.0);
    let bank = rand_tensor(&[3, 2, 2, 3, 3], &mut rng, -1.0, 1.0);
    check(&[alpha, bank], |g, v| g.kernel_mix(v[0], v[1]));
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
        let x = rand_tensor(&[2, 2, 5, 6], &mut rng, -1.0, 1.0);
        let w = rand_tensor(&[3, 2, k, k], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[3], &mut rng, -1.0, 1.0);
        check(&[x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad));
    }
    let x = rand_tensor(&[2, 2, 4, 4], &mut rng, -1.0, 1.0);
    let w = rand_tensor(&[2, 3, 2, 3, 3], &mut rng, -1.0, 1.0);
    check(&[x, w], |g, v| g.conv2d(v[0], v[1], None, 1, 1));
}

#[test]
fn conv_transpose_is_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&[2, 2, 7, 6], &mut rng, -1.0, 1.0);
    let w = rand_tensor(&[3, 2, 4, 4], &mut rng, -1.0, 1.0);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, None, 2, 1);
    let u = rand_tensor(g.shape(y), &mut rng, -1.0, 1.0);
    let uv = g.constant(u.clone());
    let back = g.conv_transpose(uv, wv, 2, 1, (7, 6));
    let lhs: f64 = g.value(y).data().iter().zip(u.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = g.value(back).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    check(&[u, w], |g, v| g.conv_transpose(v[0], v[1], 2, 1, (7, 6)));
}

#[test]
fn mixed_kernel_conv_is_mixture_of_convs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (k, c) = (4, 2);
    let bank = rand_tensor(&[k, c, 2 * c, 3, 3], &mut rng, -1.0, 1.0);
    let x = rand_tensor(&[1, 2 * c, 5, 5], &mut rng, -1.0, 1.0);
    let alpha = rand_tensor(&[1, k], &mut rng, 0.0, 1.0);
    let mut g = Graph::new();
    let (bv, xv, av) = (g.constant(bank.clone()), g.constant(x), g.constant(alpha.clone()));
    let mixed = g.kernel_mix(av, bv);
    let y = g.conv2d(xv, mixed, None, 1, 1);
    let mut want = vec![0.0; g.value(y).numel()];
    let per = bank.numel() / k;
    for i in 0..k {
        let e = g.constant(Tensor::from_vec(&[c, 2 * c, 3, 3], bank.data()[i * per..(i + 1) * per].to_vec()));
        let yi = g.conv2d(xv, e, None, 1, 1);
        for (w, &v) in want.iter_mut().zip(g.value(yi).data()) {
            *w += alpha.data()[i] * v;
        }
    }
    for (a, b) in g.value(y).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-10);
    }
}

fn fractional_offsets(n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    // keep sample points away from integer grid lines where bilinear
    // interpolation has kinks
    let data = (0..n * 18 * h * w)
        .map(|_| rng.gen_range(-2i32..2) as f64 + rng.gen_range(0.15..0.85))
        .collect();
    Tensor::from_vec(&[n, 18, h, w], data)
}

#[test]
fn deform_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&[2, 2, 5, 6], &mut rng, -1.0, 1.0);
    let off = fractional_offsets(2, 4, 4, &mut rng);
    let mask = rand_tensor(&[2, 9, 4, 4], &mut rng, 0.1, 1.0);
    let w = rand_tensor(&[3, 2, 3, 3], &mut rng, -1.0, 1.0);
    let b = rand_tensor(&[3], &mut rng, -1.0, 1.0);
    let pre: Shifts = Arc::from(
        (0..2 * 16)
            .map(|_| [rng.gen_range(-1..=1), rng.gen_range(-1..=2)])
            .collect::<Vec<_>>(),
    );
    check(&[x, off, mask, w, b], |g, v| {
        g.deform_conv(v[0], v[1], v[2], v[3], Some(v[4]), Some(pre.clone()))
    });
}

#[test]
fn deform_with_integer_pre_offsets_equals_shift_then_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&[1, 2, 6, 6], &mut rng, -1.0, 1.0);
    let w = rand_tensor(&[2, 2, 3, 3], &mut rng, -1.0, 1.0);
    // uniform shift keeps the shifted map a plain translation
    let pre: Shifts = Arc::from(vec![[1, -1]; 36]);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x), g.constant(w));
    let off = g.constant(Tensor::zeros(&[1, 18, 6, 6]));
    let mask = g.constant(Tensor::full(&[1, 9, 6, 6], 1.0));
    let d = g.deform_conv(xv, off, mask, wv, None, Some(pre.clone()));
    // translating the input first, then convolving with zero padding, differs
    // only where the taps leave the shifted frame, so compare the interior
    let s = g.shift(xv, pre, (6, 6));
    let c = g.conv2d(s, wv, None, 1, 1);
    let (dv, cv) = (g.value(d).data(), g.value(c).data());
    for ch in 0..2 {
        for y in 1..4 {
            for x in 2..5 {
                let i = (ch * 6 + y) * 6 + x;
                assert!((dv[i] - cv[i]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn shift_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&[2, 2, 5, 5], &mut rng, -1.0, 1.0);
    let pre: Shifts = Arc::from(
        (0..2 * 12)
            .map(|_| [rng.gen_range(-1..=3), rng.gen_range(-1..=3)])
            .collect::<Vec<_>>(),
    );
    check(&[x], |g, v| g.shift(v[0], pre.clone(), (3, 4)));
}

#[test]
fn params_are_cached_and_tracked() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f64>::new();
    let w = store.add_uniform("w", &[2, 2], 2, 1.0, &mut rng);
    let frozen = store.add_uniform("f", &[2, 2], 2, 1.0, &mut rng);
    store.set_trainable(frozen, false);
    let mut g = Graph::new();
    let a = g.param(&store, w);
    let b = g.param(&store, w);
    assert_eq!(a, b);
    let f = g.param(&store, frozen);
    let m = g.mul(a, f);
    let l = g.sum(m);
    let grads = g.backward(l);
    assert_eq!(grads.param(&store, w).unwrap().data(), store.get(frozen).data());
    assert!(grads.param(&store, frozen).is_none());
    assert_eq!(g.take_touched(&store), vec![w, frozen]);
    assert!(g.take_touched(&store).is_empty());
}

#[test]
fn inference_graph_records_nothing() {
    let mut g = Graph::<f32>::inference();
    let x = g.variable(Tensor::full(&[2], 1.0));
    let y = g.square(x);
    assert!(!g.requires_grad(y));
    let s = g.sum(y);
    assert!(g.backward(s).wrt(x).is_none());
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::full(&[3], 2.0));
    let d = g.detach(x);
    let y = g.mul(x, d);
    let s = g.sum(y);
    let grads = g.backward(s);
    assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 2.0, 2.0]);
}
