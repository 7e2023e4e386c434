use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxfill::diffcore::{Array, DiffError, Tape, Var};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Array {
    let n: usize = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Central finite differences of `f` around `x`, step `h`.
fn numeric_grad(x: &Array, h: f64, f: &dyn Fn(&Array) -> f64) -> Array {
    let mut g = Array::zeros_like(x);
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        g.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    g
}

fn rel_err(a: &Array, b: &Array) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.norm().max(b.norm()).max(1e-12);
    diff / scale
}

/// Builds `build(tape, inputs)` with each input in turn differentiable, and
/// compares the reverse-mode gradient against finite differences.
fn check_all_inputs(inputs: &[Array], build: &dyn Fn(&mut Tape, &[Var]) -> Var) {
    for which in 0..inputs.len() {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.input(a.clone())).collect();
        let loss = build(&mut tape, &vars);
        let analytic = tape.grad(loss, vars[which]).unwrap();
        let f = |x: &Array| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, a)| t.constant(if i == which { x.clone() } else { a.clone() }))
                .collect();
            let l = build(&mut t, &vs);
            t.value(l).data()[0]
        };
        let numeric = numeric_grad(&inputs[which], 1e-4, &f);
        let err = rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "input {which}: relative error {err:e}");
    }
}

#[test]
fn logistic_of_zero_is_half() {
    let mut t = Tape::new();
    let z = t.constant(Array::scalar(0.0));
    let s = t.logistic(z).unwrap();
    assert_eq!(t.value(s).data(), &[0.5]);
}

#[test]
fn product_with_zeros_sums_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[4, 5], 3.0);
    let mut t = Tape::new();
    let va = t.input(a.clone());
    let vz = t.constant(Array::zeros_like(&a));
    let p = t.mul(va, vz).unwrap();
    let s = t.sum(p).unwrap();
    assert_eq!(t.value(s).data(), &[0.0]);
}

#[test]
fn identity_matmul_returns_vector() {
    let eye = Array::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let v = Array::from_vec(vec![0.3, -1.7, 2.5]);
    let mut t = Tape::new();
    let a = t.constant(eye);
    let b = t.constant(v.clone());
    let out = t.matmul(a, b).unwrap();
    assert_eq!(t.value(out), &v);
}

#[test]
fn grad_of_sum_of_squares() {
    let mut t = Tape::new();
    let x = t.input(Array::from_vec(vec![1.0, 2.0, 3.0]));
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum(sq).unwrap();
    let g = t.grad(loss, x).unwrap();
    assert_eq!(g.data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn logistic_bce_gradient_at_zero() {
    let mut t = Tape::new();
    let z = t.input(Array::scalar(0.0));
    let p = t.logistic(z).unwrap();
    let y = t.constant(Array::scalar(1.0));
    let loss = t.bce(p, y, None).unwrap();
    let g = t.grad(loss, z).unwrap();
    assert!((g.data()[0] + 0.5).abs() < 1e-12);
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[2, 3, 2], 1.5);
    let b = random(&mut rng, &[2, 3, 2], 1.5);
    let w = random(&mut rng, &[2, 3, 2], 1.0);
    // Weight every element differently so that sums are not symmetric.
    let weighted = |t: &mut Tape, v: Var, w: &Array| {
        let wv = t.constant(w.clone());
        let p = t.mul(v, wv).unwrap();
        t.sum(p).unwrap()
    };
    check_all_inputs(&[a.clone(), b.clone()], &|t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        weighted(t, s, &w)
    });
    check_all_inputs(&[a.clone(), b.clone()], &|t, v| {
        let s = t.sub(v[0], v[1]).unwrap();
        weighted(t, s, &w)
    });
    check_all_inputs(&[a.clone(), b.clone()], &|t, v| {
        let s = t.mul(v[0], v[1]).unwrap();
        weighted(t, s, &w)
    });
    check_all_inputs(&[a.clone()], &|t, v| {
        let s = t.scale(v[0], -2.5).unwrap();
        let s = t.add_scalar(s, 0.75).unwrap();
        let s = t.mul(s, s).unwrap();
        t.mean(s).unwrap()
    });
    check_all_inputs(&[a.clone()], &|t, v| {
        let s = t.logistic(v[0]).unwrap();
        weighted(t, s, &w)
    });
    check_all_inputs(&[a.clone()], &|t, v| {
        let s = t.exp(v[0]).unwrap();
        weighted(t, s, &w)
    });
    check_all_inputs(&[a], &|t, v| {
        let s = t.silu(v[0]).unwrap();
        weighted(t, s, &w)
    });
}

#[test]
fn matmul_and_channel_add_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 4], 1.0);
    let b = random(&mut rng, &[4, 2], 1.0);
    let w = random(&mut rng, &[3, 2], 1.0);
    check_all_inputs(&[a.clone(), b], &|t, v| {
        let m = t.matmul(v[0], v[1]).unwrap();
        let wv = t.constant(w.clone());
        let p = t.mul(m, wv).unwrap();
        t.sum(p).unwrap()
    });
    let vecb = random(&mut rng, &[4], 1.0);
    let wv3 = random(&mut rng, &[3], 1.0);
    check_all_inputs(&[a, vecb], &|t, v| {
        let m = t.matmul(v[0], v[1]).unwrap();
        let wv = t.constant(wv3.clone());
        let p = t.mul(m, wv).unwrap();
        t.sum(p).unwrap()
    });
    let x = random(&mut rng, &[2, 2, 3, 4], 1.0);
    let c = random(&mut rng, &[4], 1.0);
    let wx = random(&mut rng, &[2, 2, 3, 4], 1.0);
    check_all_inputs(&[x, c], &|t, v| {
        let s = t.add_channel(v[0], v[1]).unwrap();
        let s = t.logistic(s).unwrap();
        let wv = t.constant(wx.clone());
        let p = t.mul(s, wv).unwrap();
        t.sum(p).unwrap()
    });
}

#[test]
fn conv_and_resampling_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for stride in [1, 2] {
        let x = random(&mut rng, &[4, 4, 4, 2], 1.0);
        let w = random(&mut rng, &[3, 3, 3, 2, 3], 0.5);
        let b = random(&mut rng, &[3], 0.5);
        let out_side = 4 / stride;
        let wo = random(&mut rng, &[out_side, out_side, out_side, 3], 1.0);
        check_all_inputs(&[x, w, b], &|t, v| {
            let y = t.conv3d(v[0], v[1], v[2], stride).unwrap();
            let wv = t.constant(wo.clone());
            let p = t.mul(y, wv).unwrap();
            t.sum(p).unwrap()
        });
    }
    // narrow outputs take the per-tap product kernel
    for (side, cin, stride) in [(3, 4, 1), (4, 32, 2)] {
        let x = random(&mut rng, &[side, side, side, cin], 1.0);
        let w = random(&mut rng, &[3, 3, 3, cin, 1], 0.5);
        let b = random(&mut rng, &[1], 0.5);
        let out_side = side.div_ceil(stride);
        let wo = random(&mut rng, &[out_side, out_side, out_side, 1], 1.0);
        check_all_inputs(&[x, w, b], &|t, v| {
            let y = t.conv3d(v[0], v[1], v[2], stride).unwrap();
            let wv = t.constant(wo.clone());
            let p = t.mul(y, wv).unwrap();
            t.sum(p).unwrap()
        });
    }
    let x = random(&mut rng, &[2, 2, 2, 16], 1.0);
    let ws = random(&mut rng, &[4, 4, 4, 2], 1.0);
    check_all_inputs(&[x], &|t, v| {
        let y = t.depth_to_space(v[0], 2).unwrap();
        let wv = t.constant(ws.clone());
        let p = t.mul(y, wv).unwrap();
        t.sum(p).unwrap()
    });
    let x = random(&mut rng, &[2, 2, 2, 3], 1.0);
    let wu = random(&mut rng, &[4, 4, 4, 3], 1.0);
    check_all_inputs(&[x], &|t, v| {
        let y = t.upsample(v[0], 2).unwrap();
        let wv = t.constant(wu.clone());
        let p = t.mul(y, wv).unwrap();
        t.sum(p).unwrap()
    });
    let x = random(&mut rng, &[4, 4, 4, 2], 1.0);
    let wd = random(&mut rng, &[2, 2, 2, 2], 1.0);
    check_all_inputs(&[x], &|t, v| {
        let y = t.downsample(v[0], 2).unwrap();
        let wv = t.constant(wd.clone());
        let p = t.mul(y, wv).unwrap();
        t.sum(p).unwrap()
    });
}

#[test]
fn depth_to_space_places_channel_blocks() {
    // one input cell, eight channels numbered 0..8
    let x = Array::new(vec![1, 1, 1, 8], (0..8).map(f64::from).collect()).unwrap();
    let mut t = Tape::new();
    let v = t.constant(x);
    let y = t.depth_to_space(v, 2).unwrap();
    let out = t.value(y);
    assert_eq!(out.shape(), &[2, 2, 2, 1]);
    for a in 0..2 {
        for b in 0..2 {
            for e in 0..2 {
                let o = (a * 2 + b) * 2 + e;
                assert_eq!(out.data()[o], o as f64);
            }
        }
    }
    let bad = t.constant(Array::zeros(&[1, 1, 1, 6]));
    assert!(t.depth_to_space(bad, 2).is_err());
}

#[test]
fn bce_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = random(&mut rng, &[3, 4], 2.0);
    let y = Array::new(vec![3, 4], (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
    let mask = Array::new(vec![3, 4], (0..12).map(|i| (i % 2) as f64).collect()).unwrap();
    for weight in [None, Some(mask)] {
        check_all_inputs(&[z.clone()], &|t, v| {
            let p = t.logistic(v[0]).unwrap();
            let yv = t.constant(y.clone());
            let wv = weight.clone().map(|w| t.constant(w));
            t.bce(p, yv, wv).unwrap()
        });
    }
}

#[test]
fn empty_weight_mask_gives_zero_loss_and_gradient() {
    let mut t = Tape::new();
    let z = t.input(Array::from_vec(vec![0.3, -0.2]));
    let p = t.logistic(z).unwrap();
    let y = t.constant(Array::from_vec(vec![1.0, 0.0]));
    let w = t.constant(Array::zeros(&[2]));
    let loss = t.bce(p, y, Some(w)).unwrap();
    assert_eq!(t.value(loss).data(), &[0.0]);
    assert_eq!(t.grad(loss, z).unwrap().data(), &[0.0, 0.0]);
}

/// Three conv layers with logistic activations; the gradient with respect to
/// the network input and to every weight tensor is checked.
#[test]
fn random_three_layer_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[4, 4, 4, 1], 1.0);
    let w1 = random(&mut rng, &[3, 3, 3, 1, 3], 0.6);
    let b1 = random(&mut rng, &[3], 0.2);
    let w2 = random(&mut rng, &[3, 3, 3, 3, 3], 0.4);
    let b2 = random(&mut rng, &[3], 0.2);
    let w3 = random(&mut rng, &[3, 3, 3, 3, 1], 0.4);
    let b3 = random(&mut rng, &[1], 0.2);
    let target = Array::new(vec![4, 4, 4, 1], (0..64).map(|i| ((i * 7) % 5 == 0) as u8 as f64).collect()).unwrap();
    check_all_inputs(&[x, w1, b1, w2, b2, w3, b3], &|t, v| {
        let h = t.conv3d(v[0], v[1], v[2], 2).unwrap();
        let h = t.silu(h).unwrap();
        let h = t.upsample(h, 2).unwrap();
        let h = t.conv3d(h, v[3], v[4], 1).unwrap();
        let h = t.logistic(h).unwrap();
        let h = t.conv3d(h, v[5], v[6], 1).unwrap();
        let p = t.logistic(h).unwrap();
        let y = t.constant(target.clone());
        t.bce(p, y, None).unwrap()
    });
}

#[test]
fn gradient_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[6], 1.0);
    let (a, b) = (1.7, -0.6);
    let grads = |mode: u8| {
        let mut t = Tape::new();
        let v = t.input(x.clone());
        let f = {
            let s = t.logistic(v).unwrap();
            t.sum(s).unwrap()
        };
        let g = {
            let e = t.exp(v).unwrap();
            let e = t.mul(e, v).unwrap();
            t.mean(e).unwrap()
        };
        let loss = match mode {
            0 => f,
            1 => g,
            _ => {
                let fa = t.scale(f, a).unwrap();
                let gb = t.scale(g, b).unwrap();
                t.add(fa, gb).unwrap()
            }
        };
        t.grad(loss, v).unwrap()
    };
    let (gf, gg, gc) = (grads(0), grads(1), grads(2));
    for i in 0..x.len() {
        let expect = a * gf.data()[i] + b * gg.data()[i];
        assert!((gc.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn determinism_and_replay_are_bit_exact() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, &[4, 4, 4, 2], 1.0);
        let w = random(&mut rng, &[3, 3, 3, 2, 2], 0.5);
        let b = random(&mut rng, &[2], 0.5);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.input(x), t.input(w), t.input(b));
        let y = t.conv3d(xv, wv, bv, 1).unwrap();
        let y = t.silu(y).unwrap();
        let l = t.mean(y).unwrap();
        let g = t.grad(l, wv).unwrap();
        let replayed = t.replay().unwrap();
        for (i, r) in replayed.iter().enumerate() {
            assert_eq!(r.data(), t.replay().unwrap()[i].data());
        }
        assert_eq!(replayed.last().unwrap(), t.value(l));
        (t.value(l).clone(), g)
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.data()[0].to_bits(), l2.data()[0].to_bits());
    assert_eq!(g1, g2);
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut t = Tape::new();
    let a = t.input(Array::zeros(&[2, 3]));
    let b = t.input(Array::zeros(&[2, 2]));
    match t.matmul(a, b) {
        Err(DiffError::ShapeMismatch { op, shapes }) => {
            assert_eq!(op, "matmul");
            assert_eq!(shapes, vec![vec![2, 3], vec![2, 2]]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(t.add(a, b), Err(DiffError::ShapeMismatch { op: "add", .. })));
    let x = t.input(Array::zeros(&[4, 4, 4, 2]));
    let w = t.input(Array::zeros(&[3, 3, 3, 1, 2]));
    let bias = t.input(Array::zeros(&[2]));
    assert!(matches!(t.conv3d(x, w, bias, 1), Err(DiffError::ShapeMismatch { op: "conv3d", .. })));
}

#[test]
fn gradient_requires_scalar_loss_and_known_input() {
    let mut t = Tape::new();
    let x = t.input(Array::from_vec(vec![1.0, 2.0]));
    let y = t.logistic(x).unwrap();
    assert!(matches!(t.grad(y, x), Err(DiffError::NotScalar(_))));
    let loss = t.sum(y).unwrap();
    let mut other = Tape::new();
    let foreign = other.input(Array::scalar(1.0));
    assert!(matches!(t.grad(loss, foreign), Err(DiffError::NotOnTape)));
    t.reset();
    assert!(t.is_empty());
    assert!(matches!(t.grad(loss, x), Err(DiffError::NotOnTape)));
}
