use super::kernels;
use super::*;
use crate::rng::SeedStream;

fn randn_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut s = SeedStream::new(seed);
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| s.gaussian(0.0, 1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Central finite differences against the tape gradient of a scalar loss
/// built from `inputs`. `tol` is relative with a small absolute floor.
fn check_gradients(
    build: impl Fn(&mut Tape, &[Tensor]) -> VarId,
    inputs: &[Tensor],
    tol: f64,
) {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let loss = build(&mut tape, tensors);
        tape.value(loss).data()[0]
    };

    let mut tape = Tape::new();
    let marked: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad(true)).collect();
    let loss = build(&mut tape, &marked);
    tape.backward(loss).unwrap();

    let h = 1e-5;
    for (ti, t) in inputs.iter().enumerate() {
        // Leaves are recorded first, in order, by every builder below.
        let leaf = tape.nth_var(ti);
        let analytic = tape.grad(leaf).expect("leaf gradient").to_vec();
        for ei in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = (analytic[ei] - fd).abs();
            let bound = tol * analytic[ei].abs().max(fd.abs()).max(1.0e-4);
            assert!(
                err <= bound,
                "grad mismatch input {ti} elem {ei}: analytic {} vs fd {}",
                analytic[ei],
                fd
            );
        }
    }
}

fn leaves(tape: &mut Tape, inputs: &[Tensor]) -> Vec<VarId> {
    inputs.iter().map(|t| tape.leaf(t.clone())).collect()
}

/// Weighted sum with fixed pseudo-random weights, to get a scalar loss that
/// exercises every output element asymmetrically.
fn weighted_sum(tape: &mut Tape, v: VarId) -> VarId {
    let n = tape.value(v).numel();
    let shape = tape.value(v).shape().to_vec();
    let mut s = SeedStream::new(0xC0FFEE);
    let w: Vec<f64> = (0..n).map(|_| s.gaussian(0.0, 1.0)).collect();
    let w = tape.leaf(Tensor::new(shape, w).unwrap());
    let prod = tape.mul(v, w).unwrap();
    tape.sum_all(prod).unwrap()
}

// ── matmul ─────────────────────────────────────────────────────────────

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let i2 = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let c = tape.matmul(i2, a).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_annihilating() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
    let b = tape.leaf(Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[0.0; 4]);
}

#[test]
fn matmul_matches_naive_oracle() {
    // Independent route: dot products per output element.
    let a = randn_tensor(vec![3, 4], 11);
    let b = randn_tensor(vec![4, 2], 12);
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut dot = 0.0;
            for k in 0..4 {
                dot += a.at2(i, k) * b.at2(k, j);
            }
            assert!((tape.value(c).at2(i, j) - dot).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(vec![2, 3]));
    let b = tape.leaf(Tensor::zeros(vec![2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

// ── softmax ────────────────────────────────────────────────────────────

#[test]
fn softmax_uniform() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
    let s = tape.softmax(x, 0).unwrap();
    for &v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_saturation_is_stable() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![1000.0, 0.0, 0.0]).unwrap());
    let s = tape.softmax(x, 0).unwrap();
    let d = tape.value(s).data();
    assert!((d[0] - 1.0).abs() < 1e-12);
    assert!(d[1].abs() < 1e-12 && d[2].abs() < 1e-12);
}

#[test]
fn softmax_matches_formula_oracle() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let s = tape.softmax(x, 0).unwrap();
    let denom: f64 = (1..=3).map(|i| ((i as f64) - 3.0).exp()).sum();
    for (i, &v) in tape.value(s).data().iter().enumerate() {
        let expect = ((i as f64 + 1.0) - 3.0).exp() / denom;
        assert!((v - expect).abs() < 1e-12);
    }
}

// ── layer norm ─────────────────────────────────────────────────────────

#[test]
fn layer_norm_constant_row_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 4], vec![5.0; 4]).unwrap());
    let gain = tape.leaf(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
    let bias = tape.leaf(Tensor::zeros(vec![4]));
    let y = tape.layer_norm(x, gain, bias, 1e-6).unwrap();
    for &v in tape.value(y).data() {
        assert_eq!(v, 0.0);
    }
}

#[test]
fn layer_norm_already_normalized_row() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 2], vec![-1.0, 1.0]).unwrap());
    let gain = tape.leaf(Tensor::new(vec![2], vec![1.0; 2]).unwrap());
    let bias = tape.leaf(Tensor::zeros(vec![2]));
    let y = tape.layer_norm(x, gain, bias, 1e-14).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-10 && (d[1] - 1.0).abs() < 1e-10);
}

#[test]
fn layer_norm_matches_two_pass_oracle() {
    let x = randn_tensor(vec![2, 8], 21);
    let mut tape = Tape::new();
    let vx = tape.leaf(x.clone());
    let gain = tape.leaf(Tensor::new(vec![8], (0..8).map(|i| 1.0 + i as f64 * 0.1).collect()).unwrap());
    let bias = tape.leaf(Tensor::new(vec![8], (0..8).map(|i| i as f64 * 0.01).collect()).unwrap());
    let eps = 1e-9;
    let y = tape.layer_norm(vx, gain, bias, eps).unwrap();
    for r in 0..2 {
        let row: Vec<f64> = (0..8).map(|j| x.at2(r, j)).collect();
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        for j in 0..8 {
            let expect = (row[j] - mean) / (var + eps).sqrt() * (1.0 + j as f64 * 0.1)
                + j as f64 * 0.01;
            assert!((tape.value(y).at2(r, j) - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn layer_norm_dim_mismatch_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(vec![2, 4]));
    let gain = tape.leaf(Tensor::zeros(vec![3]));
    let bias = tape.leaf(Tensor::zeros(vec![4]));
    assert!(tape.layer_norm(x, gain, bias, 1e-6).is_err());
}

// ── gelu ───────────────────────────────────────────────────────────────

#[test]
fn gelu_fixed_points() {
    assert_eq!(kernels::gelu(0.0), 0.0);
    assert!((kernels::gelu(10.0) - 10.0).abs() < 1e-6);
}

#[test]
fn gelu_matches_closed_form_oracle() {
    // Same closed form, independently written.
    for i in 0..=100 {
        let x = -4.0 + 8.0 * i as f64 / 100.0;
        let inner = (2.0_f64 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3));
        let expect = 0.5 * x * (1.0 + inner.tanh());
        assert!((kernels::gelu(x) - expect).abs() < 1e-12, "x={x}");
    }
}

#[test]
fn gelu_monotone_above_dip() {
    // The tanh-form GELU is only monotone to the right of its minimum near
    // x ≈ −0.75; check the nondecreasing region.
    let mut prev = kernels::gelu(-0.7);
    for i in 1..=200 {
        let x = -0.7 + 4.7 * i as f64 / 200.0;
        let y = kernels::gelu(x);
        assert!(y >= prev, "gelu not nondecreasing at x={x}");
        prev = y;
    }
}

// ── backward: spec examples ────────────────────────────────────────────

#[test]
fn backward_sum_gives_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(randn_tensor(vec![2, 3], 31).with_grad(true));
    let loss = tape.sum_all(x).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad(true));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(sq).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_composite_matches_finite_differences() {
    // matmul + softmax + layer_norm on a 4x4 input.
    let build = |tape: &mut Tape, inputs: &[Tensor]| {
        let ids = leaves(tape, inputs);
        let prod = tape.matmul(ids[0], ids[1]).unwrap();
        let sm = tape.softmax(prod, 1).unwrap();
        let ln = tape.layer_norm(sm, ids[2], ids[3], 1e-5).unwrap();
        weighted_sum(tape, ln)
    };
    let inputs = vec![
        randn_tensor(vec![4, 4], 41),
        randn_tensor(vec![4, 4], 42),
        Tensor::new(vec![4], vec![1.1, 0.9, 1.0, 1.2]).unwrap(),
        Tensor::new(vec![4], vec![0.1, -0.1, 0.0, 0.2]).unwrap(),
    ];
    check_gradients(build, &inputs, 1e-4);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(randn_tensor(vec![2, 2], 51).with_grad(true));
    assert!(matches!(
        tape.backward(x),
        Err(TapeError::NonScalarLoss(_))
    ));
}

#[test]
fn backward_replay_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(randn_tensor(vec![3], 52).with_grad(true));
    let loss = tape.sum_all(x).unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(TapeError::BackwardReplay)));
}

#[test]
fn foreign_var_is_an_error() {
    let mut t1 = Tape::new();
    let mut t2 = Tape::new();
    let x = t1.leaf(Tensor::scalar(1.0).with_grad(true));
    assert!(matches!(t2.backward(x), Err(TapeError::ForeignVar)));
    let y = t2.leaf(Tensor::scalar(2.0));
    assert!(matches!(t2.add(x, y), Err(TapeError::ForeignVar)));
}

// ── per-op finite differences ──────────────────────────────────────────

#[test]
fn grad_add_sub_mul_scale() {
    let inputs = vec![randn_tensor(vec![3, 2], 61), randn_tensor(vec![3, 2], 62)];
    check_gradients(
        |tape, inp| {
            let ids = leaves(tape, inp);
            let a = tape.add(ids[0], ids[1]).unwrap();
            let s = tape.sub(a, ids[1]).unwrap();
            let m = tape.mul(s, ids[1]).unwrap();
            let sc = tape.scale(m, -1.7).unwrap();
            weighted_sum(tape, sc)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn grad_matmul_transpose() {
    let inputs = vec![randn_tensor(vec![3, 4], 63), randn_tensor(vec![3, 2], 64)];
    check_gradients(
        |tape, inp| {
            let ids = leaves(tape, inp);
            let at = tape.transpose(ids[0]).unwrap();
            let c = tape.matmul(at, ids[1]).unwrap();
            weighted_sum(tape, c)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn grad_reshape_mean_sum() {
    let inputs = vec![randn_tensor(vec![2, 6], 65)];
    check_gradients(
        |tape, inp| {
            let ids = leaves(tape, inp);
            let r = tape.reshape(ids[0], vec![3, 4]).unwrap();
            let m = tape.mean_rows(r).unwrap();
            let m2 = tape.reshape(m, vec![1, 4]).unwrap();
            let s = weighted_sum(tape, m2);
            let total = tape.mean_all(ids[0]).unwrap();
            let both = tape.add(s, total).unwrap();
            tape.sum_all(both).unwrap()
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn grad_unary_elementwise() {
    // abs/sqrt/exp/log on strictly positive inputs away from kinks.
    let mut s = SeedStream::new(66);
    let data: Vec<f64> = (0..6).map(|_| 0.5 + s.uniform() * 2.0).collect();
    let inputs = vec![Tensor::new(vec![6], data).unwrap()];
    check_gradients(
        |tape, inp| {
            let ids = leaves(tape, inp);
            let e = tape.exp(ids[0]).unwrap();
            let l = tape.log(e).unwrap();
            let sq = tape.sqrt(l).unwrap();
            let ab = tape.abs(sq).unwrap();
            let g = tape.gelu(ab).unwrap();
            weighted_sum(tape, g)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn grad_softmax_layernorm() {
    let inputs = vec![
        randn_tensor(vec![3, 5], 67),
        Tensor::new(vec![5], vec![1.0, 1.2, 0.8, 1.1, 0.9]).unwrap(),
        Tensor::new(vec![5], vec![0.0, 0.1, -0.1, 0.2, 0.0]).unwrap(),
    ];
    check_gradients(
        |tape, inp| {
            let ids = leaves(tape, inp);
            let sm = tape.softmax(ids[0], 1).unwrap();
            let ln = tape.layer_norm(sm, ids[1], ids[2], 1e-5).unwrap();
            weighted_sum(tape, ln)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn grad_concat_slice() {
    let inputs = vec![randn_tensor(vec![2, 3], 68), randn_tensor(vec![2, 2], 69)];
    check_gradients(
        |tape, inp| {
            let ids = leaves(tape, inp);
            let cat = tape.concat(&[ids[0], ids[1]], 1).unwrap();
            let sl = tape.slice(cat, 1, 1, 3).unwrap();
            let rows = tape.concat(&[sl, sl], 0).unwrap();
            let sl0 = tape.slice(rows, 0, 1, 2).unwrap();
            weighted_sum(tape, sl0)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn grad_add_row_vec() {
    let inputs = vec![randn_tensor(vec![4, 3], 70), randn_tensor(vec![3], 71)];
    check_gradients(
        |tape, inp| {
            let ids = leaves(tape, inp);
            let y = tape.add_row_vec(ids[0], ids[1]).unwrap();
            weighted_sum(tape, y)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn grad_row_normalize_upper_triangle() {
    let inputs = vec![randn_tensor(vec![4, 3], 72)];
    check_gradients(
        |tape, inp| {
            let ids = leaves(tape, inp);
            let rn = tape.row_normalize(ids[0], 1e-12).unwrap();
            let rt = tape.transpose(rn).unwrap();
            let gram = tape.matmul(rn, rt).unwrap();
            let ut = tape.upper_triangle(gram).unwrap();
            let utm = tape.reshape(ut, vec![1, 6]).unwrap();
            weighted_sum(tape, utm)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn grad_patchify() {
    let inputs = vec![randn_tensor(vec![2, 4, 4], 73)];
    check_gradients(
        |tape, inp| {
            let ids = leaves(tape, inp);
            let p = tape.patchify(ids[0], 2).unwrap();
            weighted_sum(tape, p)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn grad_entropy() {
    let centers = randn_tensor(vec![20], 74);
    let h = 0.4;
    let (lo, hi) = centers
        .data()
        .iter()
        .fold((f64::MAX, f64::MIN), |(l, h2), &v| (l.min(v), h2.max(v)));
    let grid_min = lo - 4.0 * h;
    let grid_step = (hi + 4.0 * h - grid_min) / 255.0;
    check_gradients(
        |tape, inp| {
            let ids = leaves(tape, inp);
            tape.entropy(ids[0], h, grid_min, grid_step, 256).unwrap()
        },
        &[centers],
        1e-4,
    );
}

#[test]
fn grad_tv_loss() {
    let inputs = vec![randn_tensor(vec![2, 4, 4], 75)];
    check_gradients(
        |tape, inp| {
            let ids = leaves(tape, inp);
            tape.tv_loss(ids[0]).unwrap()
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn grad_cross_entropy() {
    let inputs = vec![randn_tensor(vec![1, 7], 76)];
    check_gradients(
        |tape, inp| {
            let ids = leaves(tape, inp);
            tape.cross_entropy(ids[0], 3).unwrap()
        },
        &inputs,
        1e-4,
    );
}

// ── adam ───────────────────────────────────────────────────────────────

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut params = vec![1.0, -2.0, 3.0];
    let mut state = AdamState::new(3);
    adam_update(&mut params, &[0.0; 3], &mut state, 0.1, 0.9, 0.999, 1e-8).unwrap();
    assert_eq!(params, vec![1.0, -2.0, 3.0]);
}

#[test]
fn adam_single_step_closed_form() {
    // Fresh state, g = 1: m_hat = v_hat = 1, so the step is lr/(1 + eps).
    let mut params = vec![0.0];
    let mut state = AdamState::new(1);
    adam_update(&mut params, &[1.0], &mut state, 0.1, 0.9, 0.999, 1e-8).unwrap();
    assert!((params[0] + 0.1).abs() < 1e-6, "step was {}", params[0]);
}

#[test]
fn adam_descends_quadratic() {
    let mut w = vec![1.0];
    let mut state = AdamState::new(1);
    let mut prev = w[0] * w[0];
    for _ in 0..2 {
        let g = vec![2.0 * w[0]];
        adam_update(&mut w, &g, &mut state, 0.1, 0.9, 0.999, 1e-8).unwrap();
        let f = w[0] * w[0];
        assert!(f < prev);
        prev = f;
    }
}

#[test]
fn adam_shape_mismatch_errors() {
    let mut params = vec![0.0; 2];
    let mut state = AdamState::new(3);
    assert!(adam_update(&mut params, &[1.0; 2], &mut state, 0.1, 0.9, 0.999, 1e-8).is_err());
}

// ── invariants ─────────────────────────────────────────────────────────

#[test]
fn determinism_same_seed_bit_identical() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.leaf(randn_tensor(vec![4, 4], 99).with_grad(true));
        let w = tape.leaf(randn_tensor(vec![4, 4], 100));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.softmax(y, 1).unwrap();
        let loss = tape.sum_all(s).unwrap();
        tape.backward(loss).unwrap();
        (
            tape.value(s).data().to_vec(),
            tape.grad(x).unwrap().to_vec(),
        )
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1, v2);
    assert_eq!(g1, g2);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..4, cols in 1usize..6, seed in 0u64..500, scale in prop_oneof![Just(1.0), Just(1e3)]) {
            let mut t = randn_tensor(vec![rows, cols], seed);
            for v in t.data_mut() { *v *= scale; }
            let mut tape = Tape::new();
            let x = tape.leaf(t);
            let s = tape.softmax(x, 1).unwrap();
            for r in 0..rows {
                let sum: f64 = (0..cols).map(|c| tape.value(s).at2(r, c)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn ops_stay_finite_on_finite_inputs(seed in 0u64..200) {
            let x = randn_tensor(vec![3, 3], seed);
            let mut tape = Tape::new();
            let v = tape.leaf(x);
            let sm = tape.softmax(v, 1).unwrap();
            let g = tape.gelu(sm).unwrap();
            let t = tape.transpose(g).unwrap();
            let p = tape.matmul(g, t).unwrap();
            let m = tape.mean_all(p).unwrap();
            prop_assert!(tape.value(p).is_finite());
            prop_assert!(tape.value(m).is_finite());
        }
    }
}
