use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check;
use super::*;
use crate::error::Result;

const EPS: f64 = 1e-5;
const OP_TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Contracts the output with fixed random weights so every output element
/// contributes to the scalar objective.
fn project(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rand_tensor(&mut rng, tape.value(y).shape().to_vec());
    let rv = tape.leaf(r);
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}

#[test]
fn conv1d_zero_input_yields_bias() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![2, 9]));
    let w = tape.leaf(Tensor::full(vec![3, 2, 3], 0.7));
    let b = tape.leaf(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
    let y = tape.conv1d(x, w, b, 1, 1).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape(), &[3, 9]);
    for c in 0..3 {
        for l in 0..9 {
            assert_eq!(out.data()[c * 9 + l], [0.5, -1.0, 2.0][c]);
        }
    }
}

#[test]
fn conv1d_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xin = rand_tensor(&mut rng, vec![4, 11]);
    let mut w = Tensor::zeros(vec![4, 4, 1]);
    for c in 0..4 {
        w.data_mut()[c * 4 + c] = 1.0;
    }
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(xin.clone());
    let wv = tape.leaf(w);
    let b = tape.leaf(Tensor::zeros(vec![4]));
    let y = tape.conv1d(x, wv, b, 1, 0).unwrap();
    assert_eq!(tape.value(y), &xin);
}

#[test]
fn conv1d_output_lengths() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![2, 1, 68]));
    let w = tape.leaf(Tensor::zeros(vec![1, 1, 3]));
    let b = tape.leaf(Tensor::zeros(vec![1]));
    let y = tape.conv1d(x, w, b, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 1, 34]);
    let z = tape.conv1d(y, w, b, 2, 1).unwrap();
    assert_eq!(tape.value(z).shape(), &[2, 1, 17]);
}

#[test]
fn conv1d_shape_mismatch_names_axis() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![2, 8]));
    let w = tape.leaf(Tensor::zeros(vec![3, 5, 3]));
    let b = tape.leaf(Tensor::zeros(vec![3]));
    let err = tape.conv1d(x, w, b, 1, 1).unwrap_err();
    assert!(matches!(err, crate::Error::Dimension { op: "conv1d", .. }));
    assert!(err.to_string().contains("axis 1"));
}

#[test]
fn conv1d_weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![
        rand_tensor(&mut rng, vec![2, 8]),
        rand_tensor(&mut rng, vec![3, 2, 3]),
        rand_tensor(&mut rng, vec![3]),
    ];
    let rep = check(&inputs, EPS, |t, v| {
        let y = t.conv1d(v[0], v[1], v[2], 1, 1)?;
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(rep.max_rel_error() < OP_TOL, "{rep:?}");
}

#[test]
fn strided_batched_conv1d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        rand_tensor(&mut rng, vec![2, 3, 9]),
        rand_tensor(&mut rng, vec![4, 3, 3]),
        rand_tensor(&mut rng, vec![4]),
    ];
    let rep = check(&inputs, EPS, |t, v| {
        let y = t.conv1d(v[0], v[1], v[2], 2, 1)?;
        project(t, y, 11)
    })
    .unwrap();
    assert!(rep.max_rel_error() < OP_TOL, "{rep:?}");
}

#[test]
fn attention_single_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xin = rand_tensor(&mut rng, vec![3, 1]);
    let ws: Vec<_> = (0..4).map(|_| rand_tensor(&mut rng, vec![3, 3])).collect();
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(xin.clone());
    let wv: Vec<_> = ws.iter().map(|w| tape.leaf(w.clone())).collect();
    let y = tape.self_attention(x, wv[0], wv[1], wv[2], wv[3], 1).unwrap();
    // softmax over one key is [[1]], so y = Wo·Wv·x
    let mut vx = [0.0; 3];
    for c in 0..3 {
        for d in 0..3 {
            vx[c] += ws[2].data()[c * 3 + d] * xin.data()[d];
        }
    }
    for c in 0..3 {
        let want: f64 = (0..3).map(|d| ws[3].data()[c * 3 + d] * vx[d]).sum();
        assert!((tape.value(y).data()[c] - want).abs() < 1e-14);
    }
}

#[test]
fn attention_zero_logits_average_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xin = rand_tensor(&mut rng, vec![4, 6]);
    let mut eye = Tensor::zeros(vec![4, 4]);
    for c in 0..4 {
        eye.data_mut()[c * 4 + c] = 1.0;
    }
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(xin.clone());
    let zero = tape.leaf(Tensor::zeros(vec![4, 4]));
    let id = tape.leaf(eye);
    let y = tape.self_attention(x, zero, zero, id, id, 1).unwrap();
    for c in 0..4 {
        let avg: f64 = xin.data()[c * 6..(c + 1) * 6].iter().sum::<f64>() / 6.0;
        for l in 0..6 {
            assert!((tape.value(y).data()[c * 6 + l] - avg).abs() < 1e-14);
        }
    }
}

#[test]
fn attention_gradients_match_finite_differences() {
    for heads in [1, 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut inputs = vec![rand_tensor(&mut rng, vec![2, 4, 6])];
        for _ in 0..4 {
            inputs.push(rand_tensor(&mut rng, vec![4, 4]));
        }
        let rep = check(&inputs, EPS, |t, v| {
            let y = t.self_attention(v[0], v[1], v[2], v[3], v[4], heads)?;
            project(t, y, 12)
        })
        .unwrap();
        assert!(rep.max_rel_error() < OP_TOL, "heads={heads}: {rep:?}");
    }
}

#[test]
fn attention_rejects_non_square_projection() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![4, 6]));
    let ok = tape.leaf(Tensor::zeros(vec![4, 4]));
    let bad = tape.leaf(Tensor::zeros(vec![4, 3]));
    assert!(tape.self_attention(x, ok, bad, ok, ok, 1).is_err());
}

#[test]
fn group_norm_constant_input_and_zero_gamma() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(vec![4, 5], 3.25));
    let one = tape.leaf(Tensor::full(vec![4], 1.0));
    let zero = tape.leaf(Tensor::zeros(vec![4]));
    let y = tape.group_norm(x, 2, one, zero, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xr = tape.leaf(rand_tensor(&mut rng, vec![4, 5]));
    let beta = tape.leaf(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
    let y = tape.group_norm(xr, 2, zero, beta, 1e-5).unwrap();
    for c in 0..4 {
        for l in 0..5 {
            assert_eq!(tape.value(y).data()[c * 5 + l], [0.1, 0.2, 0.3, 0.4][c]);
        }
    }
}

#[test]
fn group_norm_normalizes_each_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_fn(vec![6, 10], |i| 5.0 + 3.0 * rng.random_range(-1.0..1.0) + i as f64 * 0.01));
    let one = tape.leaf(Tensor::full(vec![6], 1.0));
    let zero = tape.leaf(Tensor::zeros(vec![6]));
    let y = tape.group_norm(x, 3, one, zero, 1e-5).unwrap();
    for g in 0..3 {
        let seg = &tape.value(y).data()[g * 20..(g + 1) * 20];
        let mean: f64 = seg.iter().sum::<f64>() / 20.0;
        let var: f64 = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
    let bad = tape.leaf(Tensor::zeros(vec![5, 10]));
    let g5 = tape.leaf(Tensor::zeros(vec![5]));
    assert!(tape.group_norm(bad, 2, g5, g5, 1e-5).is_err());
}

#[test]
fn group_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = vec![
        rand_tensor(&mut rng, vec![2, 4, 7]),
        rand_tensor(&mut rng, vec![4]),
        rand_tensor(&mut rng, vec![4]),
    ];
    let rep = check(&inputs, EPS, |t, v| {
        let y = t.group_norm(v[0], 2, v[1], v[2], 1e-5)?;
        project(t, y, 13)
    })
    .unwrap();
    assert!(rep.max_rel_error() < OP_TOL, "{rep:?}");
}

#[test]
fn silu_concat_and_slice() {
    let mut tape = Tape::<f64>::new();
    let z = tape.leaf(Tensor::zeros(vec![1, 5]));
    let s = tape.silu(z);
    assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
    let o = tape.leaf(Tensor::full(vec![1, 5], 1.0));
    let cat = tape.concat_channels(z, o).unwrap();
    assert_eq!(tape.value(cat).shape(), &[2, 5]);
    assert_eq!(&tape.value(cat).data()[..5], &[0.0; 5]);
    assert_eq!(&tape.value(cat).data()[5..], &[1.0; 5]);
    let short = tape.leaf(Tensor::zeros(vec![1, 4]));
    assert!(tape.concat_channels(z, short).is_err());
}

#[test]
fn silu_linear_film_upsample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs = vec![
        rand_tensor(&mut rng, vec![3, 5]),
        rand_tensor(&mut rng, vec![4, 5]),
        rand_tensor(&mut rng, vec![4]),
    ];
    let rep = check(&inputs, EPS, |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        let y = t.silu(y);
        project(t, y, 14)
    })
    .unwrap();
    assert!(rep.max_rel_error() < OP_TOL, "linear: {rep:?}");

    let inputs = vec![
        rand_tensor(&mut rng, vec![2, 3, 5]),
        rand_tensor(&mut rng, vec![2, 3]),
        rand_tensor(&mut rng, vec![2, 3]),
    ];
    let rep = check(&inputs, EPS, |t, v| {
        let y = t.film(v[0], v[1], v[2])?;
        let y = t.upsample_nearest(y, 9)?;
        project(t, y, 15)
    })
    .unwrap();
    assert!(rep.max_rel_error() < OP_TOL, "film/upsample: {rep:?}");
}

#[test]
fn elementwise_and_reduction_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let inputs = vec![rand_tensor(&mut rng, vec![2, 2, 4]), rand_tensor(&mut rng, vec![2, 1, 4])];
    let rep = check(&inputs, EPS, |t, v| {
        let c = t.concat_channels(v[0], v[1])?;
        let a = t.slice_channels(c, 1, 2)?;
        let b = t.slice_channels(c, 0, 2)?;
        let m = t.mul(a, b)?;
        let d = t.sub(m, b)?;
        let e = t.add(d, a)?;
        let f = t.scale_rows(e, &[0.5, -2.0])?;
        let g = t.scale(f, 3.0);
        Ok(t.mean(g))
    })
    .unwrap();
    assert!(rep.max_rel_error() < OP_TOL, "{rep:?}");
}

#[test]
fn broadcast_add_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let inputs = vec![rand_tensor(&mut rng, vec![3, 2, 5]), rand_tensor(&mut rng, vec![2, 5])];
    let rep = check(&inputs, EPS, |t, v| {
        let y = t.add_broadcast(v[0], v[1])?;
        project(t, y, 18)
    })
    .unwrap();
    assert!(rep.max_rel_error() < OP_TOL, "{rep:?}");
}

#[test]
fn backward_basics() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(4.0));
    let g = tape.backward(x, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let unused = tape.leaf(Tensor::full(vec![2], 9.0));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);

    let empty = Tape::<f64>::new();
    assert!(empty.backward(Var::default_for_tests(), &Tensor::scalar(1.0)).is_ok());

    let err = tape.backward(s, &Tensor::zeros(vec![2])).unwrap_err();
    assert!(matches!(err, crate::Error::Dimension { .. }));
}

#[test]
fn backward_is_linear_in_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(rand_tensor(&mut rng, vec![2, 6]));
    let w = tape.leaf(rand_tensor(&mut rng, vec![2, 2, 3]));
    let b = tape.leaf(rand_tensor(&mut rng, vec![2]));
    let y = tape.conv1d(x, w, b, 1, 1).unwrap();
    let y = tape.silu(y);
    let seed = rand_tensor(&mut rng, vec![2, 6]);
    let scaled = Tensor::from_fn(vec![2, 6], |i| 2.5 * seed.data()[i]);
    let g1 = tape.backward(y, &seed).unwrap();
    let g2 = tape.backward(y, &scaled).unwrap();
    for v in [x, w, b] {
        for (a, s) in g1.get(v).unwrap().data().iter().zip(g2.get(v).unwrap().data()) {
            assert!((2.5 * a - s).abs() <= 1e-14 * s.abs().max(1.0));
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(vec![3, 4, 17], |_| rng.random_range(-1.0..1.0)));
        let w: Vec<_> = (0..4)
            .map(|_| tape.leaf(Tensor::from_fn(vec![4, 4], |_| rng.random_range(-1.0..1.0))))
            .collect();
        let y = tape.self_attention(x, w[0], w[1], w[2], w[3], 1).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn concat_then_slice_recovers_inputs(c1 in 1usize..4, c2 in 1usize..4, l in 1usize..9, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&mut rng, vec![2, c1, l]);
            let b = rand_tensor(&mut rng, vec![2, c2, l]);
            let mut tape = Tape::<f64>::new();
            let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
            let cat = tape.concat_channels(va, vb).unwrap();
            let ra = tape.slice_channels(cat, 0, c1).unwrap();
            let rb = tape.slice_channels(cat, c1, c2).unwrap();
            prop_assert_eq!(tape.value(ra), &a);
            prop_assert_eq!(tape.value(rb), &b);
        }
    }
}
