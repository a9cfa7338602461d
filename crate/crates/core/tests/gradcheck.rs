//! Finite-difference oracle for every primitive's backward pass.
//!
//! Each primitive is embedded in `loss = sum(op(inputs) * probe)` with a
//! fixed random probe, and the analytic gradient of every input element
//! is compared against a central difference of the loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tiue_core::tensor::{Graph, PrimOp, Scalar, Tensor, Value};

fn rand_tensor<S: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n).map(|_| S::from_f64(rng.random_range(lo..hi))).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Builds `sum(op(inputs) * probe)` inside `g` and returns the loss.
fn probed_loss<S: Scalar>(
    g: &mut Graph<S>,
    op: &PrimOp,
    inputs: &[Value<S>],
    probe: &Tensor<S>,
) -> Value<S> {
    let refs: Vec<&Value<S>> = inputs.iter().collect();
    let out = g.apply(op.clone(), &refs).unwrap();
    let probe = g.constant(probe);
    let weighted = g.apply(PrimOp::Mul, &[&out, &probe]).unwrap();
    g.apply(PrimOp::Sum { per_batch: false }, &[&weighted]).unwrap()
}

fn loss_value<S: Scalar>(op: &PrimOp, tensors: &[Tensor<S>], probe: &Tensor<S>) -> f64 {
    let mut g = Graph::new();
    let vals: Vec<Value<S>> = tensors.iter().map(|t| g.constant(t)).collect();
    probed_loss(&mut g, op, &vals, probe).tensor().item().unwrap().as_f64()
}

fn analytic_grads<S: Scalar>(
    op: &PrimOp,
    tensors: &[Tensor<S>],
    probe: &Tensor<S>,
) -> Vec<Tensor<S>> {
    let mut g = Graph::new();
    let leaves: Vec<Value<S>> = tensors.iter().map(|t| g.leaf(t)).collect();
    let loss = probed_loss(&mut g, op, &leaves, probe);
    g.verify_replay().unwrap();
    let grads = g.backward(&loss).unwrap();
    leaves.iter().map(|l| grads.get_or_zeros(l)).collect()
}

fn promote(t: &Tensor<f32>) -> Tensor<f64> {
    Tensor::from_vec(t.shape(), t.data().iter().map(|&v| v as f64).collect())
        .unwrap()
        .with_requires_grad(t.requires_grad())
}

/// Checks analytic gradients against a central difference computed in
/// f64: the f64 path at 1e-6 relative error, the f32 path against the
/// same well-conditioned oracle at 1e-3.
fn check_op_tols(op: PrimOp, shapes: &[&[usize]], domain: (f64, f64), tol64: f64, tol32: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    // draw in f32 so both precisions see bit-identical input values
    let tensors32: Vec<Tensor<f32>> = shapes
        .iter()
        .map(|s| rand_tensor::<f32>(s, &mut rng, domain.0, domain.1).with_requires_grad(true))
        .collect();
    let tensors64: Vec<Tensor<f64>> = tensors32.iter().map(promote).collect();

    let out_shape = {
        let mut g = Graph::new();
        let vals: Vec<Value<f64>> = tensors64.iter().map(|t| g.constant(t)).collect();
        let refs: Vec<&Value<f64>> = vals.iter().collect();
        g.apply(op.clone(), &refs).unwrap().shape().to_vec()
    };
    let probe32 = rand_tensor::<f32>(&out_shape, &mut rng, -1.0, 1.0);
    let probe64 = promote(&probe32);

    let grads64 = analytic_grads(&op, &tensors64, &probe64);
    let grads32 = analytic_grads(&op, &tensors32, &probe32);

    let h = 1e-5;
    for (ti, t) in tensors64.iter().enumerate() {
        for j in 0..t.numel() {
            let bump = |delta: f64| -> f64 {
                let mut data = t.data().to_vec();
                data[j] += delta;
                let mut ts = tensors64.clone();
                ts[ti] = Tensor::from_vec(t.shape(), data).unwrap();
                loss_value(&op, &ts, &probe64)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let a64 = grads64[ti].data()[j];
            let err64 = (a64 - numeric).abs() / a64.abs().max(numeric.abs()).max(1.0);
            assert!(
                err64 < tol64,
                "{op:?} f64 input {ti} elem {j}: analytic {a64}, numeric {numeric}, err {err64}"
            );
            let a32 = grads32[ti].data()[j] as f64;
            let err32 = (a32 - numeric).abs() / a32.abs().max(numeric.abs()).max(1.0);
            assert!(
                err32 < tol32,
                "{op:?} f32 input {ti} elem {j}: analytic {a32}, numeric {numeric}, err {err32}"
            );
        }
    }
}

fn check_both(op: PrimOp, shapes: &[&[usize]], domain: (f64, f64)) {
    check_op_tols(op, shapes, domain, 1e-6, 1e-3);
}

#[test]
fn conv2d_3x3_gradients() {
    check_both(PrimOp::Conv2d { pad: 1 }, &[&[2, 3, 6, 5], &[4, 3, 3, 3], &[4]], (-1.0, 1.0));
}

#[test]
fn conv2d_1x1_gradients() {
    check_both(PrimOp::Conv2d { pad: 0 }, &[&[2, 4, 5, 5], &[3, 4, 1, 1], &[3]], (-1.0, 1.0));
}

#[test]
fn linear_gradients() {
    check_both(PrimOp::Linear, &[&[3, 7], &[5, 7], &[5]], (-1.0, 1.0));
}

#[test]
fn matmul_gradients() {
    check_both(PrimOp::MatMul, &[&[4, 6], &[6, 3]], (-1.0, 1.0));
}

#[test]
fn group_norm_gradients() {
    check_both(
        PrimOp::GroupNorm { groups: 2, eps: 1e-5 },
        &[&[2, 4, 4, 3], &[4], &[4]],
        (-1.2, 1.2),
    );
}

#[test]
fn silu_gradients() {
    check_both(PrimOp::Silu, &[&[2, 4, 8, 8]], (-2.0, 2.0));
}

#[test]
fn elementwise_gradients() {
    check_both(PrimOp::Add, &[&[2, 3, 4, 4], &[2, 3, 4, 4]], (-1.0, 1.0));
    check_both(PrimOp::Mul, &[&[2, 3, 4, 4], &[2, 3, 4, 4]], (-1.0, 1.0));
    check_both(PrimOp::MulScalar(1.7), &[&[3, 5]], (-1.0, 1.0));
    check_both(PrimOp::AddScalar(-0.4), &[&[3, 5]], (-1.0, 1.0));
}

#[test]
fn scale_shift_gradients() {
    check_both(PrimOp::ScaleShift, &[&[2, 3, 4, 4], &[2, 3], &[2, 3]], (-1.0, 1.0));
}

#[test]
fn concat_and_resize_gradients() {
    check_both(PrimOp::ConcatChannels, &[&[2, 3, 4, 4], &[2, 2, 4, 4]], (-1.0, 1.0));
    check_both(PrimOp::AvgPool2, &[&[2, 3, 4, 4]], (-1.0, 1.0));
    check_both(PrimOp::UpsampleNearest2, &[&[2, 3, 3, 3]], (-1.0, 1.0));
    check_both(PrimOp::Reshape(vec![2, 24]), &[&[2, 3, 2, 4]], (-1.0, 1.0));
}

#[test]
fn reduction_gradients() {
    check_both(PrimOp::Sum { per_batch: false }, &[&[2, 3, 4]], (-1.0, 1.0));
    check_both(PrimOp::Sum { per_batch: true }, &[&[3, 4, 2]], (-1.0, 1.0));
    check_both(PrimOp::Mean { per_batch: false }, &[&[2, 3, 4]], (-1.0, 1.0));
    check_both(PrimOp::Mean { per_batch: true }, &[&[3, 4, 2]], (-1.0, 1.0));
}

#[test]
fn ln_and_clamp_gradients() {
    // domains keep ln well-conditioned and elements away from the clamp kink
    check_both(PrimOp::Ln, &[&[2, 6]], (0.3, 2.0));
    check_both(PrimOp::ClampMin(0.0), &[&[2, 6]], (0.1, 1.0));
    // fully clamped: gradient blocked everywhere
    check_both(PrimOp::ClampMin(5.0), &[&[2, 6]], (0.1, 1.0));
}

#[test]
fn silu_known_values() {
    let x = Tensor::<f64>::from_vec(&[2], vec![0.0, 1.0]).unwrap();
    let mut g = Graph::new();
    let v = g.constant(&x);
    let out = g.apply(PrimOp::Silu, &[&v]).unwrap();
    assert_eq!(out.tensor().data()[0], 0.0);
    let expect = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((out.tensor().data()[1] - expect).abs() < 1e-12);
    assert!((expect - 0.7311).abs() < 1e-4);
}

#[test]
fn conv2d_identity_kernel_preserves_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = rand_tensor::<f32>(&[1, 1, 8, 8], &mut rng, -1.0, 1.0);
    let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0f32]).unwrap();
    let b = Tensor::zeros(&[1]);
    let mut g = Graph::new();
    let (iv, wv, bv) = (g.constant(&img), g.constant(&w), g.constant(&b));
    let out = g.apply(PrimOp::Conv2d { pad: 0 }, &[&iv, &wv, &bv]).unwrap();
    assert!(out.tensor().bit_eq(&img));
}

#[test]
fn concat_shape_arithmetic() {
    let a = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
    let b = Tensor::<f32>::zeros(&[1, 5, 8, 8]);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(&a), g.constant(&b));
    let out = g.apply(PrimOp::ConcatChannels, &[&av, &bv]).unwrap();
    assert_eq!(out.shape(), &[1, 8, 8, 8]);
}

#[test]
fn linear_functional_gradient_is_the_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = rand_tensor::<f64>(&[3, 4], &mut rng, -1.0, 1.0);
    let x = rand_tensor::<f64>(&[3, 4], &mut rng, -1.0, 1.0).with_requires_grad(true);
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let wv = g.constant(&w);
    let prod = g.apply(PrimOp::Mul, &[&wv, &xv]).unwrap();
    let loss = g.apply(PrimOp::Sum { per_batch: false }, &[&prod]).unwrap();
    let grads = g.backward(&loss).unwrap();
    assert!(grads.get(&xv).unwrap().bit_eq(&w));
}

#[test]
fn mean_square_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor::<f64>(&[2, 5], &mut rng, -1.0, 1.0).with_requires_grad(true);
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let sq = g.apply(PrimOp::Mul, &[&xv, &xv]).unwrap();
    let loss = g.apply(PrimOp::Mean { per_batch: false }, &[&sq]).unwrap();
    let grads = g.backward(&loss).unwrap();
    let expect = x.map(|v| 2.0 * v / 10.0);
    assert!(grads.get(&xv).unwrap().max_rel_diff(&expect) < 1e-14);
}

fn three_layer_loss<S: Scalar>(g: &mut Graph<S>, vals: &[Value<S>]) -> Value<S> {
    let conv = g.apply(PrimOp::Conv2d { pad: 1 }, &[&vals[0], &vals[1], &vals[2]]).unwrap();
    let act = g.apply(PrimOp::Silu, &[&conv]).unwrap();
    let norm =
        g.apply(PrimOp::GroupNorm { groups: 2, eps: 1e-5 }, &[&act, &vals[3], &vals[4]]).unwrap();
    let flat = g.apply(PrimOp::Reshape(vec![2, 64]), &[&norm]).unwrap();
    let head = g.apply(PrimOp::Linear, &[&flat, &vals[5], &vals[6]]).unwrap();
    let sq = g.apply(PrimOp::Mul, &[&head, &head]).unwrap();
    g.apply(PrimOp::Mean { per_batch: false }, &[&sq]).unwrap()
}

#[test]
fn three_layer_network_fd() {
    // conv -> silu -> group_norm -> linear head via reshape; the f64
    // gradients face the finite-difference oracle directly and the f32
    // gradients are held to the same oracle at the coarser tolerance.
    let mut rng = ChaCha8Rng::seed_from_u64(0xABCD);
    let shapes: [&[usize]; 7] = [&[2, 2, 4, 4], &[4, 2, 3, 3], &[4], &[4], &[4], &[3, 64], &[3]];
    let domains = [(-1.0, 1.0), (-0.5, 0.5), (-0.1, 0.1), (0.5, 1.5), (-0.2, 0.2), (-0.3, 0.3), (-0.1, 0.1)];
    let tensors32: Vec<Tensor<f32>> = shapes
        .iter()
        .zip(domains)
        .map(|(s, (lo, hi))| rand_tensor::<f32>(s, &mut rng, lo, hi).with_requires_grad(true))
        .collect();
    let tensors64: Vec<Tensor<f64>> = tensors32.iter().map(promote).collect();

    let grads_of = |ts32: &[Tensor<f32>], ts64: &[Tensor<f64>]| {
        let mut g32 = Graph::new();
        let l32: Vec<Value<f32>> = ts32.iter().map(|t| g32.leaf(t)).collect();
        let loss32 = three_layer_loss(&mut g32, &l32);
        let gr32 = g32.backward(&loss32).unwrap();
        let mut g64 = Graph::new();
        let l64: Vec<Value<f64>> = ts64.iter().map(|t| g64.leaf(t)).collect();
        let loss64 = three_layer_loss(&mut g64, &l64);
        let gr64 = g64.backward(&loss64).unwrap();
        (
            l32.iter().map(|l| gr32.get_or_zeros(l)).collect::<Vec<_>>(),
            l64.iter().map(|l| gr64.get_or_zeros(l)).collect::<Vec<_>>(),
        )
    };
    let (grads32, grads64) = grads_of(&tensors32, &tensors64);

    let eval = |ts: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vals: Vec<Value<f64>> = ts.iter().map(|t| g.constant(t)).collect();
        three_layer_loss(&mut g, &vals).tensor().item().unwrap()
    };

    let h = 1e-5;
    let mut rng2 = ChaCha8Rng::seed_from_u64(99);
    for (ti, t) in tensors64.iter().enumerate() {
        for _ in 0..6.min(t.numel()) {
            let j = rng2.random_range(0..t.numel());
            let mut plus = t.data().to_vec();
            let mut minus = plus.clone();
            plus[j] += h;
            minus[j] -= h;
            let mut tp = tensors64.clone();
            tp[ti] = Tensor::from_vec(t.shape(), plus).unwrap();
            let mut tm = tensors64.clone();
            tm[ti] = Tensor::from_vec(t.shape(), minus).unwrap();
            let numeric = (eval(&tp) - eval(&tm)) / (2.0 * h);
            let a64 = grads64[ti].data()[j];
            let err64 = (a64 - numeric).abs() / a64.abs().max(numeric.abs()).max(1.0);
            assert!(err64 < 1e-6, "f64 tensor {ti} elem {j}: {a64} vs {numeric} (err {err64})");
            let a32 = grads32[ti].data()[j] as f64;
            let err32 = (a32 - numeric).abs() / a32.abs().max(numeric.abs()).max(1.0);
            assert!(err32 < 1e-3, "f32 tensor {ti} elem {j}: {a32} vs {numeric} (err {err32})");
        }
    }
}

#[test]
fn backward_is_linear_over_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);
    for round in 0..5 {
        let x = rand_tensor::<f64>(&[2, 6], &mut rng, -1.0, 1.0).with_requires_grad(true);
        let y = rand_tensor::<f64>(&[2, 6], &mut rng, -1.0, 1.0).with_requires_grad(true);

        let build = |g: &mut Graph<f64>, xv: &Value<f64>, yv: &Value<f64>| {
            let prod = g.apply(PrimOp::Mul, &[xv, yv]).unwrap();
            let act = g.apply(PrimOp::Silu, &[&prod]).unwrap();
            let l1 = g.apply(PrimOp::Sum { per_batch: false }, &[&act]).unwrap();
            let sq = g.apply(PrimOp::Mul, &[xv, xv]).unwrap();
            let l2 = g.apply(PrimOp::Mean { per_batch: false }, &[&sq]).unwrap();
            (l1, l2)
        };

        // combined loss
        let mut g = Graph::new();
        let (xv, yv) = (g.leaf(&x), g.leaf(&y));
        let (l1, l2) = build(&mut g, &xv, &yv);
        let total = g.apply(PrimOp::Add, &[&l1, &l2]).unwrap();
        let combined = g.backward(&total).unwrap();

        // separate losses on fresh graphs
        let mut g1 = Graph::new();
        let (x1, y1) = (g1.leaf(&x), g1.leaf(&y));
        let (l1a, _) = build(&mut g1, &x1, &y1);
        let gr1 = g1.backward(&l1a).unwrap();
        let mut g2 = Graph::new();
        let (x2, y2) = (g2.leaf(&x), g2.leaf(&y));
        let (_, l2b) = build(&mut g2, &x2, &y2);
        let gr2 = g2.backward(&l2b).unwrap();

        let sum_x = {
            let a = gr1.get_or_zeros(&x1);
            let b = gr2.get_or_zeros(&x2);
            Tensor::from_vec(
                a.shape(),
                a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect(),
            )
            .unwrap()
        };
        assert!(
            combined.get_or_zeros(&xv).max_rel_diff(&sum_x) < 1e-12,
            "round {round}: backward not additive over losses"
        );
        // y only appears in l1
        assert!(combined.get_or_zeros(&yv).max_rel_diff(&gr1.get_or_zeros(&y1)) < 1e-12);
    }
}

#[test]
fn unreachable_leaf_reads_zero_gradient() {
    let x = Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap().with_requires_grad(true);
    let y = Tensor::<f64>::from_vec(&[3], vec![4.0, 5.0, 6.0]).unwrap().with_requires_grad(true);
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let yv = g.leaf(&y);
    let loss = g.apply(PrimOp::Sum { per_batch: false }, &[&xv]).unwrap();
    let grads = g.backward(&loss).unwrap();
    assert!(grads.get(&yv).is_none());
    assert!(grads.get_or_zeros(&yv).bit_eq(&Tensor::zeros(&[3])));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let x = Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap().with_requires_grad(true);
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    assert!(g.backward(&xv).is_err());
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = rand_tensor::<f32>(&[2, 3, 6, 6], &mut rng, -1.0, 1.0);
    let w = rand_tensor::<f32>(&[4, 3, 3, 3], &mut rng, -0.5, 0.5);
    let b = rand_tensor::<f32>(&[4], &mut rng, -0.1, 0.1);
    let run = || {
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(&x), g.constant(&w), g.constant(&b));
        let conv = g.apply(PrimOp::Conv2d { pad: 1 }, &[&xv, &wv, &bv]).unwrap();
        let act = g.apply(PrimOp::Silu, &[&conv]).unwrap();
        act.into_tensor()
    };
    assert!(run().bit_eq(&run()));
}
