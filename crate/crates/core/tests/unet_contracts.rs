//! Contract tests for the shared-encoder UNet: split-pass identity,
//! cache immutability, batch independence, and end-to-end gradients
//! through encode -> K x decode -> loop-free combine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tiue_core::schedule::{loopfree_coeffs, NoiseSchedule, ScheduleParams};
use tiue_core::tensor::{Graph, PrimOp, Scalar, Tensor, Value};
use tiue_core::unet::{UNetConfig, UNetParams};

fn tiny_config() -> UNetConfig {
    UNetConfig {
        image_size: 8,
        base_channels: 8,
        channel_mult: vec![1, 2],
        resblocks_per_level: 1,
        time_embed_dim: 16,
        cond_dim: 4,
        norm_groups: 4,
        ..UNetConfig::default()
    }
}

fn rand_tensor<S: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> =
        (0..n).map(|_| S::from_f64((rng.random::<f64>() * 2.0 - 1.0) * scale)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn inputs<S: Scalar>(batch: usize, seed: u64) -> (Tensor<S>, Tensor<S>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = rand_tensor(&[batch, 3, 8, 8], &mut rng, 1.0);
    let cond = rand_tensor(&[batch, 4], &mut rng, 1.0);
    (z, cond)
}

#[test]
fn split_pass_equals_full_forward() {
    let params = UNetParams::<f32>::init(tiny_config(), 1).unwrap();
    let (z, cond) = inputs::<f32>(2, 10);
    let mut g = Graph::new();
    let net = params.bind(&mut g, false).unwrap();
    let zv = g.constant(&z);
    let cv = g.constant(&cond);
    let full = net.full_forward(&mut g, &zv, &[5, 5], &cv).unwrap();
    let cache = net.encode(&mut g, &zv, &[5, 5], &cv).unwrap();
    let split = net.decode(&mut g, &cache, &[5, 5], &cv).unwrap();
    assert!(full.tensor().bit_eq(split.tensor()));
}

#[test]
fn cache_has_one_skip_per_stage_plus_input_conv() {
    let cfg = UNetConfig::default();
    let params = UNetParams::<f32>::init(cfg.clone(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = rand_tensor::<f32>(&[1, 3, cfg.image_size, cfg.image_size], &mut rng, 1.0);
    let cond = rand_tensor::<f32>(&[1, cfg.cond_dim], &mut rng, 1.0);
    let mut g = Graph::new();
    let net = params.bind(&mut g, false).unwrap();
    let zv = g.constant(&z);
    let cv = g.constant(&cond);
    let cache = net.encode(&mut g, &zv, &[999], &cv).unwrap();
    assert_eq!(cache.skips.len(), cfg.levels() + 1);
    assert_eq!(cache.key_steps, vec![999]);
}

#[test]
fn encode_is_deterministic() {
    let params = UNetParams::<f32>::init(tiny_config(), 4).unwrap();
    let (z, cond) = inputs::<f32>(1, 11);
    let run = || {
        let mut g = Graph::new();
        let net = params.bind(&mut g, false).unwrap();
        let zv = g.constant(&z);
        let cv = g.constant(&cond);
        let cache = net.encode(&mut g, &zv, &[7], &cv).unwrap();
        cache.mid.tensor().clone()
    };
    assert!(run().bit_eq(&run()));
}

#[test]
fn batch_of_two_equals_two_singles() {
    let params = UNetParams::<f32>::init(tiny_config(), 5).unwrap();
    let (z, cond) = inputs::<f32>(2, 12);
    let mut g = Graph::new();
    let net = params.bind(&mut g, false).unwrap();
    let zv = g.constant(&z);
    let cv = g.constant(&cond);
    let both = net.full_forward(&mut g, &zv, &[3, 3], &cv).unwrap();

    let single = |i: usize| {
        let zi = Tensor::from_vec(&[1, 3, 8, 8], z.data()[i * 192..(i + 1) * 192].to_vec())
            .unwrap();
        let ci = Tensor::from_vec(&[1, 4], cond.data()[i * 4..(i + 1) * 4].to_vec()).unwrap();
        let mut g = Graph::new();
        let net = params.bind(&mut g, false).unwrap();
        let zv = g.constant(&zi);
        let cv = g.constant(&ci);
        net.full_forward(&mut g, &zv, &[3], &cv).unwrap().into_tensor()
    };
    let a = single(0);
    let b = single(1);
    let combined = both.tensor();
    assert_eq!(combined.shape(), &[2, 3, 8, 8]);
    assert!(combined.data()[..192]
        .iter()
        .zip(a.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(combined.data()[192..]
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn decode_depends_on_timestep_but_is_repeatable() {
    let params = UNetParams::<f32>::init(tiny_config(), 6).unwrap();
    let (z, cond) = inputs::<f32>(1, 13);
    let mut g = Graph::new();
    let net = params.bind(&mut g, false).unwrap();
    let zv = g.constant(&z);
    let cv = g.constant(&cond);
    let cache = net.encode(&mut g, &zv, &[9], &cv).unwrap();
    let a = net.decode(&mut g, &cache, &[9], &cv).unwrap();
    let b = net.decode(&mut g, &cache, &[9], &cv).unwrap();
    assert!(a.tensor().bit_eq(b.tensor()));
    assert_eq!(a.shape(), &[1, 3, 8, 8]);
    let c = net.decode(&mut g, &cache, &[2], &cv).unwrap();
    let dist: f64 = a
        .tensor()
        .data()
        .iter()
        .zip(c.tensor().data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(dist > 0.0, "different decode timesteps must produce different noise");
}

#[test]
fn one_cache_many_decodes_without_mutation() {
    let params = UNetParams::<f32>::init(tiny_config(), 7).unwrap();
    let (z, cond) = inputs::<f32>(1, 14);
    let mut g = Graph::new();
    let net = params.bind(&mut g, false).unwrap();
    let zv = g.constant(&z);
    let cv = g.constant(&cond);
    let cache = net.encode(&mut g, &zv, &[8], &cv).unwrap();
    let before: Vec<Tensor<f32>> = cache
        .skips
        .iter()
        .map(|s| s.tensor().clone())
        .chain(std::iter::once(cache.mid.tensor().clone()))
        .collect();
    for t in [8usize, 5, 3, 1, 0] {
        net.decode(&mut g, &cache, &[t], &cv).unwrap();
    }
    let after: Vec<&Tensor<f32>> = cache
        .skips
        .iter()
        .map(|s| s.tensor())
        .chain(std::iter::once(cache.mid.tensor()))
        .collect();
    for (b, a) in before.iter().zip(after) {
        assert!(b.bit_eq(a), "decode must never mutate the cache");
    }
}

#[test]
fn decode_rejects_foreign_condition() {
    let params = UNetParams::<f32>::init(tiny_config(), 8).unwrap();
    let (z, cond) = inputs::<f32>(1, 15);
    let (_, other) = inputs::<f32>(1, 16);
    let mut g = Graph::new();
    let net = params.bind(&mut g, false).unwrap();
    let zv = g.constant(&z);
    let cv = g.constant(&cond);
    let cache = net.encode(&mut g, &zv, &[8], &cv).unwrap();
    let ov = g.constant(&other);
    assert!(net.decode(&mut g, &cache, &[8], &ov).is_err());
}

#[test]
fn forward_is_finite_on_wild_inputs() {
    let params = UNetParams::<f32>::init(tiny_config(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let z = rand_tensor::<f32>(&[2, 3, 8, 8], &mut rng, 3.0);
    let cond = rand_tensor::<f32>(&[2, 4], &mut rng, 3.0);
    let mut g = Graph::new();
    let net = params.bind(&mut g, false).unwrap();
    let zv = g.constant(&z);
    let cv = g.constant(&cond);
    let out = net.full_forward(&mut g, &zv, &[999, 0], &cv).unwrap();
    assert!(out.tensor().is_finite());
}

/// Loss used by the finite-difference checks: encode once at the key
/// step, decode at every plan step, combine with the plan coefficients,
/// then take a probe-weighted sum.
fn one_pass_loss(
    params: &UNetParams<f64>,
    z: &Tensor<f64>,
    cond: &Tensor<f64>,
    probe: &Tensor<f64>,
    trainable: bool,
) -> (f64, Option<(Graph<f64>, Vec<Value<f64>>, Value<f64>)>) {
    let sched = NoiseSchedule::build(ScheduleParams {
        steps: 16,
        ..ScheduleParams::default()
    })
    .unwrap();
    let (ts, term) = tiue_core::schedule::select_timesteps(
        4,
        16,
        tiue_core::schedule::TimestepSpacing::Trailing,
    )
    .unwrap();
    let plan = loopfree_coeffs(&ts, term, &sched).unwrap();

    let mut g = Graph::new();
    let net = params.bind(&mut g, trainable).unwrap();
    let batch = z.shape()[0];
    let zv = g.constant(z);
    let cv = g.constant(cond);
    let cache = net.encode(&mut g, &zv, &vec![plan.key_step(); batch], &cv).unwrap();
    let mut acc = g.apply(PrimOp::MulScalar(plan.s), &[&zv]).unwrap();
    for (i, &t) in plan.timesteps.iter().enumerate() {
        let eps = net.decode(&mut g, &cache, &vec![t; batch], &cv).unwrap();
        let scaled = g.apply(PrimOp::MulScalar(plan.e[i]), &[&eps]).unwrap();
        acc = g.apply(PrimOp::Add, &[&acc, &scaled]).unwrap();
    }
    let pv = g.constant(probe);
    let weighted = g.apply(PrimOp::Mul, &[&acc, &pv]).unwrap();
    let loss = g.apply(PrimOp::Sum { per_batch: false }, &[&weighted]).unwrap();
    let v = loss.tensor().item().unwrap();
    if trainable {
        let leaves = net.leaves().to_vec();
        (v, Some((g, leaves, loss)))
    } else {
        (v, None)
    }
}

#[test]
fn one_pass_gradients_match_finite_differences() {
    let params = UNetParams::<f64>::init(tiny_config(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let z = rand_tensor::<f64>(&[1, 3, 8, 8], &mut rng, 1.0);
    let cond = rand_tensor::<f64>(&[1, 4], &mut rng, 1.0);
    let probe = rand_tensor::<f64>(&[1, 3, 8, 8], &mut rng, 1.0);

    let (_, tracked) = one_pass_loss(&params, &z, &cond, &probe, true);
    let (g, leaves, loss) = tracked.unwrap();
    let grads = g.backward(&loss).unwrap();

    let h = 1e-5;
    let mut checked = 0usize;
    let mut rng2 = ChaCha8Rng::seed_from_u64(23);
    for (i, (name, tensor)) in params.params().iter().enumerate() {
        // a few coordinates per parameter keeps the runtime sane while
        // still touching every tensor in the net
        let analytic = grads.get_or_zeros(&leaves[i]);
        for _ in 0..2 {
            let j = rng2.random_range(0..tensor.numel());
            let mut params_p = params.clone();
            let mut data = tensor.data().to_vec();
            data[j] += h;
            params_p
                .params_mut()
                .set(name, Tensor::from_vec(tensor.shape(), data.clone()).unwrap())
                .unwrap();
            let (lp, _) = one_pass_loss(&params_p, &z, &cond, &probe, false);
            data[j] -= 2.0 * h;
            params_p
                .params_mut()
                .set(name, Tensor::from_vec(tensor.shape(), data).unwrap())
                .unwrap();
            let (lm, _) = one_pass_loss(&params_p, &z, &cond, &probe, false);
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            assert!(err < 1e-5, "{name}[{j}]: analytic {a}, numeric {numeric}, err {err}");
            checked += 1;
        }
    }
    assert!(checked > 40);
}

#[test]
fn full_forward_input_gradient_matches_finite_differences() {
    let params = UNetParams::<f64>::init(tiny_config(), 31).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let z = rand_tensor::<f64>(&[1, 3, 8, 8], &mut rng, 1.0).with_requires_grad(true);
    let cond = rand_tensor::<f64>(&[1, 4], &mut rng, 1.0);

    let mut g = Graph::new();
    let net = params.bind(&mut g, false).unwrap();
    let zv = g.leaf(&z);
    let cv = g.constant(&cond);
    let out = net.full_forward(&mut g, &zv, &[6], &cv).unwrap();
    let loss = g.apply(PrimOp::Sum { per_batch: false }, &[&out]).unwrap();
    let grads = g.backward(&loss).unwrap();
    let analytic = grads.get_or_zeros(&zv);

    let eval = |zt: &Tensor<f64>| {
        let mut g = Graph::new();
        let net = params.bind(&mut g, false).unwrap();
        let zv = g.constant(zt);
        let cv = g.constant(&cond);
        let out = net.full_forward(&mut g, &zv, &[6], &cv).unwrap();
        let loss = g.apply(PrimOp::Sum { per_batch: false }, &[&out]).unwrap();
        loss.tensor().item().unwrap()
    };

    let h = 1e-5;
    let mut rng2 = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..12 {
        let j = rng2.random_range(0..z.numel());
        let mut plus = z.data().to_vec();
        plus[j] += h;
        let mut minus = z.data().to_vec();
        minus[j] -= h;
        let numeric = (eval(&Tensor::from_vec(z.shape(), plus).unwrap())
            - eval(&Tensor::from_vec(z.shape(), minus).unwrap()))
            / (2.0 * h);
        let a = analytic.data()[j];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        assert!(err < 1e-5, "z[{j}]: analytic {a}, numeric {numeric}, err {err}");
    }
}
