//! The training system: teacher pretraining, LoRA adapters,
//! classifier-free guidance, the variational-score-distillation
//! gradient with a KL noise regularizer, and the alternating
//! student/LoRA loop.
//!
//! Per distillation iteration: (1) draw conditions and a fresh input
//! noise, (2) run the student one-pass (shared encoder, `K` decoder
//! steps, closed-form combine), (3) update the student with the VSD
//! surrogate plus the weighted KL of its predicted noises, (4) update
//! the LoRA adapters on the detached student output with the plain
//! denoising loss. The whole loop consumes no images — conditions only.
//!
//! Everything is driven by one seeded stream, so a rerun with the same
//! config produces bit-identical checkpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CondVector, Sample};
use crate::metrics::kl_loss_value;
use crate::schedule::{
    loopfree_coeffs, select_timesteps, NoiseSchedule, SamplerPlan, ScheduleParams, StepTarget,
    TimestepSpacing,
};
use crate::tensor::{
    ema_update, Adam, AdamConfig, Gradients, Graph, ParamSet, PrimOp, Tensor, Value,
};
use crate::unet::{BoundUNet, UNetConfig, UNetParams};
use crate::{Error, Result};

// -----------------------------------------------------------------------
// configs
// -----------------------------------------------------------------------

/// Weighting function `w(t)` of the score-distillation gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// `w(t) = 1 - alpha_bar(t)`: keeps early-step gradients bounded.
    Sigma2,
    Constant,
}

/// Hyperparameters of the teacher pretraining run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the condition with the null condition,
    /// which is what makes classifier-free guidance possible later.
    pub cond_drop_prob: f64,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch: 8,
            lr: 1e-3,
            cond_drop_prob: 0.1,
            ema_decay: 0.999,
            seed: 0,
        }
    }
}

/// Hyperparameters of the alternating VSD + KL / LoRA loop.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub lr_student: f64,
    pub lr_lora: f64,
    pub guidance_scale: f64,
    pub k: usize,
    pub kl_weight: f64,
    pub w_kind: WeightKind,
    pub ema_decay: f64,
    pub t_min_frac: f64,
    pub t_max_frac: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub batch: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Progress log granularity (one row per this many iterations).
    pub log_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lr_student: 1e-6,
            lr_lora: 1e-3,
            guidance_scale: 4.5,
            k: 4,
            kl_weight: 0.1,
            w_kind: WeightKind::Sigma2,
            ema_decay: 0.999,
            t_min_frac: 0.02,
            t_max_frac: 0.98,
            lora_rank: 64,
            lora_alpha: 108.0,
            batch: 4,
            iterations: 2000,
            seed: 0,
            log_every: 50,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.t_min_frac && self.t_min_frac < self.t_max_frac && self.t_max_frac <= 1.0)
        {
            return Err(Error::InvalidRange {
                detail: format!(
                    "need 0 <= t_min_frac < t_max_frac <= 1, got {} and {}",
                    self.t_min_frac, self.t_max_frac
                ),
            });
        }
        if self.guidance_scale < 0.0 {
            return Err(Error::InvalidRange { detail: "guidance_scale must be >= 0".into() });
        }
        if self.k == 0 || self.batch == 0 || self.lora_rank == 0 || self.log_every == 0 {
            return Err(Error::InvalidRange {
                detail: "k, batch, lora_rank, log_every must be positive".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::DecayOutOfRange { decay: self.ema_decay });
        }
        Ok(())
    }
}

// -----------------------------------------------------------------------
// trained model container
// -----------------------------------------------------------------------

/// A trained network: raw weights plus the EMA shadow served at
/// inference.
#[derive(Clone)]
pub struct TrainedModel {
    pub config: UNetConfig,
    pub schedule: ScheduleParams,
    pub raw: ParamSet<f32>,
    pub ema: ParamSet<f32>,
}

impl TrainedModel {
    pub fn ema_model(&self) -> Result<UNetParams<f32>> {
        UNetParams::from_parts(self.config.clone(), self.ema.clone())
    }

    pub fn raw_model(&self) -> Result<UNetParams<f32>> {
        UNetParams::from_parts(self.config.clone(), self.raw.clone())
    }
}

// -----------------------------------------------------------------------
// seeded helpers
// -----------------------------------------------------------------------

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| (normal(rng) * scale) as f32).collect();
    Tensor::from_vec(shape, data).expect("noise tensor")
}

fn cond_tensor(conds: &[&CondVector]) -> Tensor<f32> {
    let dim = conds[0].dim();
    let mut data = Vec::with_capacity(conds.len() * dim);
    for c in conds {
        data.extend_from_slice(&c.0);
    }
    Tensor::from_vec(&[conds.len(), dim], data).expect("condition tensor")
}

/// `sqrt(ab) * x + sqrt(1 - ab) * eps` with per-item alpha_bars.
fn noise_to(
    x: &Tensor<f32>,
    eps: &Tensor<f32>,
    alpha_bars: &[f64],
) -> Tensor<f32> {
    let per = x.numel() / alpha_bars.len();
    let mut data = Vec::with_capacity(x.numel());
    for (i, &ab) in alpha_bars.iter().enumerate() {
        let cs = ab.sqrt() as f32;
        let cn = (1.0 - ab).sqrt() as f32;
        for j in i * per..(i + 1) * per {
            data.push(cs * x.data()[j] + cn * eps.data()[j]);
        }
    }
    Tensor::from_vec(x.shape(), data).expect("noised tensor")
}

// -----------------------------------------------------------------------
// LoRA
// -----------------------------------------------------------------------

/// Low-rank adapters over every linear and 1x1-convolution weight of a
/// base network. Adapter tensors live in a [`ParamSet`] under
/// `lora.<target>.A` / `lora.<target>.B`; the effective weight is
/// `W + (alpha / rank) * B * A`, which is exactly `W` at initialization
/// because `B` starts at zero.
#[derive(Clone)]
pub struct LoRAParams {
    pub rank: usize,
    pub alpha: f64,
    targets: Vec<LoraTarget>,
    pub params: ParamSet<f32>,
}

#[derive(Clone, Debug)]
struct LoraTarget {
    name: String,
    out_dim: usize,
    in_dim: usize,
    conv: bool,
}

fn lora_target_of(name: &str, shape: &[usize]) -> Option<LoraTarget> {
    if !name.ends_with(".w") {
        return None;
    }
    match shape {
        [o, i] => Some(LoraTarget { name: name.to_string(), out_dim: *o, in_dim: *i, conv: false }),
        [o, i, 1, 1] => {
            Some(LoraTarget { name: name.to_string(), out_dim: *o, in_dim: *i, conv: true })
        }
        _ => None,
    }
}

impl LoRAParams {
    /// Adapters for every eligible weight of `base`; `A ~ N(0, 1/rank)`,
    /// `B = 0`.
    pub fn init(base: &ParamSet<f32>, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (1.0 / rank as f64).sqrt();
        let mut targets = Vec::new();
        let mut params = ParamSet::new();
        for (name, tensor) in base.iter() {
            if let Some(t) = lora_target_of(name, tensor.shape()) {
                let a = Tensor::from_vec(
                    &[rank, t.in_dim],
                    (0..rank * t.in_dim).map(|_| (normal(&mut rng) * std) as f32).collect(),
                )?;
                params.insert(format!("lora.{}.A", t.name), a)?;
                params.insert(format!("lora.{}.B", t.name), Tensor::zeros(&[t.out_dim, rank]))?;
                targets.push(t);
            }
        }
        if targets.is_empty() {
            return Err(Error::TargetMissing { name: "no linear or 1x1 weights".into() });
        }
        Ok(Self { rank, alpha, targets, params })
    }

    pub fn target_names(&self) -> impl Iterator<Item = &str> {
        self.targets.iter().map(|t| t.name.as_str())
    }

    /// Binds the base network with every targeted weight replaced by
    /// `W + (alpha/rank) * B * A`. Returns the bound net plus the A/B
    /// leaves (in `params` order) when `trainable`.
    pub fn bind(
        &self,
        g: &mut Graph<f32>,
        base: &UNetParams<f32>,
        trainable: bool,
    ) -> Result<(BoundUNet<f32>, Vec<Value<f32>>)> {
        for t in &self.targets {
            if base.params().get(&t.name).is_none() {
                return Err(Error::TargetMissing { name: t.name.clone() });
            }
        }
        let mut leaves = vec![None; self.params.len()];
        let scale = self.alpha / self.rank as f64;
        let net = base.bind_with(g, false, |g, name, value| {
            let target = match self.targets.iter().find(|t| t.name == name) {
                Some(t) => t,
                None => return Ok(value),
            };
            let a_name = format!("lora.{name}.A");
            let b_name = format!("lora.{name}.B");
            let a_idx = self.params.position(&a_name).expect("lora A registered");
            let b_idx = self.params.position(&b_name).expect("lora B registered");
            let bind_leaf = |g: &mut Graph<f32>, idx: usize| {
                let t = self.params.tensor_at(idx);
                if trainable {
                    g.leaf(&t.clone().with_requires_grad(true))
                } else {
                    g.constant(t)
                }
            };
            let a = bind_leaf(g, a_idx);
            let b = bind_leaf(g, b_idx);
            leaves[a_idx] = Some(a.clone());
            leaves[b_idx] = Some(b.clone());
            let ba = g.apply(PrimOp::MatMul, &[&b, &a])?;
            let delta = g.apply(PrimOp::MulScalar(scale), &[&ba])?;
            let delta = if target.conv {
                g.apply(PrimOp::Reshape(vec![target.out_dim, target.in_dim, 1, 1]), &[&delta])?
            } else {
                delta
            };
            g.apply(PrimOp::Add, &[&value, &delta])
        })?;
        Ok((net, leaves.into_iter().map(|l| l.expect("all adapters bound")).collect()))
    }
}

/// Full forward through a LoRA-adapted base; base weights are never
/// mutated.
pub fn lora_forward(
    base: &UNetParams<f32>,
    lora: &LoRAParams,
    z: &Tensor<f32>,
    ts: &[usize],
    cond: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let (net, _) = lora.bind(&mut g, base, false)?;
    let zv = g.constant(z);
    let cv = g.constant(cond);
    Ok(net.full_forward(&mut g, &zv, ts, &cv)?.into_tensor())
}

// -----------------------------------------------------------------------
// classifier-free guidance
// -----------------------------------------------------------------------

/// `eps_u + scale * (eps_c - eps_u)` where `eps_u` uses the null (zero)
/// condition. The endpoint scales return the underlying prediction
/// exactly, and a null condition short-circuits to one unconditional
/// pass.
pub fn cfg_predict(
    mut forward: impl FnMut(&Tensor<f32>, &[usize], &Tensor<f32>) -> Result<Tensor<f32>>,
    x: &Tensor<f32>,
    ts: &[usize],
    cond: &Tensor<f32>,
    scale: f64,
) -> Result<Tensor<f32>> {
    let null = Tensor::zeros(cond.shape());
    let cond_is_null = cond.data().iter().all(|&v| v == 0.0);
    if cond_is_null || scale == 0.0 {
        return forward(x, ts, &null);
    }
    let eps_c = forward(x, ts, cond)?;
    if scale == 1.0 {
        return Ok(eps_c);
    }
    let eps_u = forward(x, ts, &null)?;
    let s = scale as f32;
    let data: Vec<f32> = eps_u
        .data()
        .iter()
        .zip(eps_c.data())
        .map(|(&u, &c)| u + s * (c - u))
        .collect();
    Tensor::from_vec(eps_u.shape(), data)
}

// -----------------------------------------------------------------------
// teacher pretraining
// -----------------------------------------------------------------------

/// One row of the teacher pretraining log.
#[derive(Clone, Copy, Debug)]
pub struct TeacherLogRow {
    pub iteration: usize,
    pub loss: f64,
}

/// Pretrains the epsilon-prediction teacher with the standard denoising
/// MSE on the toy dataset. Conditions drop to null with
/// `cond_drop_prob`. Returns raw and EMA weights.
pub fn train_teacher(
    dataset: &[Sample],
    unet_config: &UNetConfig,
    schedule_params: &ScheduleParams,
    cfg: &TeacherConfig,
) -> Result<(TrainedModel, Vec<TeacherLogRow>)> {
    train_teacher_impl(dataset, unet_config, schedule_params, cfg, 1.0)
}

fn train_teacher_impl(
    dataset: &[Sample],
    unet_config: &UNetConfig,
    schedule_params: &ScheduleParams,
    cfg: &TeacherConfig,
    noise_scale: f64,
) -> Result<(TrainedModel, Vec<TeacherLogRow>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    unet_config.validate()?;
    let sched = NoiseSchedule::build(schedule_params.clone())?;
    let mut model = UNetParams::<f32>::init(unet_config.clone(), cfg.seed)?;
    let mut shadow = model.params().clone();
    let mut adam = Adam::new(model.params(), AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EAC_4E52_0000_0001);
    let mut log = Vec::new();
    let t_total = sched.len();
    let cond_dim = unet_config.cond_dim;
    let img_numel = unet_config.in_channels * unet_config.image_size * unet_config.image_size;

    for iter in 0..cfg.iterations {
        // assemble batch
        let mut x0 = Vec::with_capacity(cfg.batch * img_numel);
        let mut conds = Vec::with_capacity(cfg.batch * cond_dim);
        let mut ts = Vec::with_capacity(cfg.batch);
        let mut alpha_bars = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let s = &dataset[rng.random_range(0..dataset.len())];
            x0.extend_from_slice(s.image.data());
            let dropped = rng.random::<f64>() < cfg.cond_drop_prob;
            if dropped {
                conds.extend(std::iter::repeat_n(0f32, cond_dim));
            } else {
                conds.extend_from_slice(&s.cond.0);
            }
            let t = rng.random_range(0..t_total);
            ts.push(t);
            alpha_bars.push(sched.alpha_bar(StepTarget::Step(t))?);
        }
        let x0 = Tensor::from_vec(
            &[cfg.batch, unet_config.in_channels, unet_config.image_size, unet_config.image_size],
            x0,
        )?;
        let cond = Tensor::from_vec(&[cfg.batch, cond_dim], conds)?;
        let eps = normal_tensor(&mut rng, x0.shape(), noise_scale);
        let x_t = noise_to(&x0, &eps, &alpha_bars);

        let mut g = Graph::new();
        let net = model.bind(&mut g, true)?;
        let xv = g.constant(&x_t);
        let cv = g.constant(&cond);
        let pred = net.full_forward(&mut g, &xv, &ts, &cv)?;
        let target = g.constant(&eps);
        let neg = g.apply(PrimOp::MulScalar(-1.0), &[&target])?;
        let diff = g.apply(PrimOp::Add, &[&pred, &neg])?;
        let sq = g.apply(PrimOp::Mul, &[&diff, &diff])?;
        let loss = g.apply(PrimOp::Mean { per_batch: false }, &[&sq])?;
        let loss_v = loss.tensor().item()? as f64;
        if !loss_v.is_finite() {
            return Err(Error::NonFinite { context: format!("teacher loss at iteration {iter}") });
        }
        let grads = g.backward(&loss)?;
        let grad_list = collect_grads(&grads, net.leaves());
        adam.step(model.params_mut(), &grad_list)?;
        ema_update(&mut shadow, model.params(), cfg.ema_decay)?;
        log.push(TeacherLogRow { iteration: iter, loss: loss_v });
    }
    Ok((
        TrainedModel {
            config: unet_config.clone(),
            schedule: schedule_params.clone(),
            raw: model.params().clone(),
            ema: shadow,
        },
        log,
    ))
}

fn collect_grads(grads: &Gradients<f32>, leaves: &[Value<f32>]) -> Vec<Option<Tensor<f32>>> {
    leaves.iter().map(|l| grads.get(l).cloned()).collect()
}

// -----------------------------------------------------------------------
// student one-pass
// -----------------------------------------------------------------------

/// Differentiable one-pass generation: encode the input noise once at
/// the key step, decode at every plan step, and combine in closed form.
/// Returns the combined sample and the per-step noise predictions.
pub fn student_one_pass(
    g: &mut Graph<f32>,
    net: &BoundUNet<f32>,
    noise: &Value<f32>,
    plan: &SamplerPlan,
    cond: &Value<f32>,
) -> Result<(Value<f32>, Vec<Value<f32>>)> {
    if plan.k() == 0 {
        return Err(Error::InvalidPlan { detail: "plan has no timesteps".into() });
    }
    let batch = noise.shape()[0];
    let cache = net.encode(g, noise, &vec![plan.key_step(); batch], cond)?;
    let mut eps_list = Vec::with_capacity(plan.k());
    for &t in &plan.timesteps {
        eps_list.push(net.decode(g, &cache, &vec![t; batch], cond)?);
    }
    let mut z0 = g.apply(PrimOp::MulScalar(plan.s), &[noise])?;
    for (coef, eps) in plan.e.iter().zip(&eps_list) {
        let scaled = g.apply(PrimOp::MulScalar(*coef), &[eps])?;
        z0 = g.apply(PrimOp::Add, &[&z0, &scaled])?;
    }
    Ok((z0, eps_list))
}

// -----------------------------------------------------------------------
// VSD gradient
// -----------------------------------------------------------------------

/// Output of [`vsd_grad`]: the gradient to deliver to the generated
/// sample, plus the timesteps and weights actually drawn.
pub struct VsdGrad {
    pub grad: Tensor<f32>,
    pub timesteps: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Score-distillation gradient on `z0`: noise it to a random
/// mid-schedule timestep, query teacher and LoRA nets (both under
/// classifier-free guidance), and weight the prediction difference.
/// Runs without gradient tracking.
#[allow(clippy::too_many_arguments)]
pub fn vsd_grad(
    z0: &Tensor<f32>,
    teacher: &BoundUNet<f32>,
    lora_net: &BoundUNet<f32>,
    sched: &NoiseSchedule,
    cond: &Tensor<f32>,
    rng: &mut ChaCha8Rng,
    cfg: &DistillConfig,
) -> Result<VsdGrad> {
    if !z0.is_finite() {
        return Err(Error::NonFinite { context: "vsd input z0".into() });
    }
    let batch = z0.shape()[0];
    let t_total = sched.len() as f64;
    let mut ts = Vec::with_capacity(batch);
    let mut alpha_bars = Vec::with_capacity(batch);
    for _ in 0..batch {
        let u = rng.random_range(cfg.t_min_frac..cfg.t_max_frac);
        let t = ((u * t_total) as usize).min(sched.len() - 1);
        ts.push(t);
        alpha_bars.push(sched.alpha_bar(StepTarget::Step(t))?);
    }
    let eps_prime = normal_tensor(rng, z0.shape(), 1.0);
    let x_t = noise_to(z0, &eps_prime, &alpha_bars);

    let run = |net: &BoundUNet<f32>, x: &Tensor<f32>, ts: &[usize], c: &Tensor<f32>| {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let cv = g.constant(c);
        Ok(net.full_forward(&mut g, &xv, ts, &cv)?.into_tensor())
    };
    let eps_teacher =
        cfg_predict(|x, ts, c| run(teacher, x, ts, c), &x_t, &ts, cond, cfg.guidance_scale)?;
    let eps_lora =
        cfg_predict(|x, ts, c| run(lora_net, x, ts, c), &x_t, &ts, cond, cfg.guidance_scale)?;
    if !eps_teacher.is_finite() || !eps_lora.is_finite() {
        return Err(Error::NonFinite { context: "vsd noise predictions".into() });
    }

    let weights: Vec<f64> = match cfg.w_kind {
        WeightKind::Sigma2 => alpha_bars.iter().map(|ab| 1.0 - ab).collect(),
        WeightKind::Constant => vec![1.0; batch],
    };
    let per = z0.numel() / batch;
    let mut grad = Vec::with_capacity(z0.numel());
    for (i, w) in weights.iter().enumerate() {
        let w = *w as f32;
        for j in i * per..(i + 1) * per {
            grad.push(w * (eps_teacher.data()[j] - eps_lora.data()[j]));
        }
    }
    Ok(VsdGrad { grad: Tensor::from_vec(z0.shape(), grad)?, timesteps: ts, weights })
}

/// Surrogate scalar whose gradient with respect to `z0` is exactly
/// `grad`: `sum(stop_grad(grad) * z0)`.
pub fn vsd_surrogate(
    g: &mut Graph<f32>,
    z0: &Value<f32>,
    grad: &Tensor<f32>,
) -> Result<Value<f32>> {
    let gv = g.constant(grad);
    let weighted = g.apply(PrimOp::Mul, &[&gv, z0])?;
    g.apply(PrimOp::Sum { per_batch: false }, &[&weighted])
}

/// Moment-matched KL of every predicted noise against N(0, 1), averaged
/// over the predictions; differentiable. The flag reports a clamped
/// (degenerate) variance.
pub fn kl_loss(g: &mut Graph<f32>, eps_list: &[Value<f32>]) -> Result<(Value<f32>, bool)> {
    if eps_list.is_empty() {
        return Err(Error::InvalidAttr { op: "kl_loss", detail: "no predictions".into() });
    }
    let mut acc: Option<Value<f32>> = None;
    let mut degenerate = false;
    for eps in eps_list {
        let (kl, deg) = kl_loss_value(g, eps)?;
        degenerate |= deg;
        acc = Some(match acc {
            Some(a) => g.apply(PrimOp::Add, &[&a, &kl])?,
            None => kl,
        });
    }
    let sum = acc.expect("non-empty");
    let mean = g.apply(PrimOp::MulScalar(1.0 / eps_list.len() as f64), &[&sum])?;
    Ok((mean, degenerate))
}

// -----------------------------------------------------------------------
// LoRA step
// -----------------------------------------------------------------------

/// One denoising-MSE update of the LoRA adapters on a detached student
/// sample. Base weights never change.
pub fn lora_step(
    lora: &mut LoRAParams,
    base: &UNetParams<f32>,
    z0_detached: &Tensor<f32>,
    sched: &NoiseSchedule,
    cond: &Tensor<f32>,
    rng: &mut ChaCha8Rng,
    opt: &mut Adam<f32>,
) -> Result<f64> {
    let batch = z0_detached.shape()[0];
    let mut ts = Vec::with_capacity(batch);
    let mut alpha_bars = Vec::with_capacity(batch);
    for _ in 0..batch {
        let t = rng.random_range(0..sched.len());
        ts.push(t);
        alpha_bars.push(sched.alpha_bar(StepTarget::Step(t))?);
    }
    let eps = normal_tensor(rng, z0_detached.shape(), 1.0);
    let x_t = noise_to(z0_detached, &eps, &alpha_bars);

    let mut g = Graph::new();
    let (net, leaves) = lora.bind(&mut g, base, true)?;
    let xv = g.constant(&x_t);
    let cv = g.constant(cond);
    let pred = net.full_forward(&mut g, &xv, &ts, &cv)?;
    let target = g.constant(&eps);
    let neg = g.apply(PrimOp::MulScalar(-1.0), &[&target])?;
    let diff = g.apply(PrimOp::Add, &[&pred, &neg])?;
    let sq = g.apply(PrimOp::Mul, &[&diff, &diff])?;
    let loss = g.apply(PrimOp::Mean { per_batch: false }, &[&sq])?;
    let loss_v = loss.tensor().item()? as f64;
    let grads = g.backward(&loss)?;
    let grad_list = collect_grads(&grads, &leaves);
    opt.step(&mut lora.params, &grad_list)?;
    Ok(loss_v)
}

// -----------------------------------------------------------------------
// the alternating loop
// -----------------------------------------------------------------------

/// One row of the distillation progress log.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DistillLogRow {
    pub iteration: usize,
    pub vsd_loss: f64,
    pub kl_loss: f64,
    pub lora_loss: f64,
    pub eps_mean: f64,
    pub eps_var: f64,
}

pub const DISTILL_LOG_HEADER: &str = "iteration,vsd_loss,kl_loss,lora_loss,eps_mean,eps_var";

impl DistillLogRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iteration, self.vsd_loss, self.kl_loss, self.lora_loss, self.eps_mean,
            self.eps_var
        )
    }
}

/// Result of a distillation run.
pub struct DistillOutput {
    pub student: TrainedModel,
    pub plan: SamplerPlan,
    pub log: Vec<DistillLogRow>,
}

/// The alternating image-free loop: the student trains against the VSD
/// surrogate plus the KL regularizer, the LoRA adapters train on the
/// detached student outputs. Deterministic given `cfg.seed`.
pub fn distill_loop(
    teacher: &TrainedModel,
    cfg: &DistillConfig,
    prompt_set: &[CondVector],
) -> Result<DistillOutput> {
    cfg.validate()?;
    if prompt_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sched = NoiseSchedule::build(teacher.schedule.clone())?;
    let (ts, terminal) = select_timesteps(cfg.k, sched.len(), TimestepSpacing::Trailing)?;
    let plan = loopfree_coeffs(&ts, terminal, &sched)?;

    // student and LoRA base start from the teacher's served weights
    let teacher_model = teacher.ema_model()?;
    let mut student = teacher_model.clone();
    let mut shadow = student.params().clone();
    let mut lora = LoRAParams::init(teacher_model.params(), cfg.lora_rank, cfg.lora_alpha, cfg.seed)?;

    let mut adam_student = Adam::new(
        student.params(),
        AdamConfig { lr: cfg.lr_student, ..AdamConfig::default() },
    );
    let mut adam_lora =
        Adam::new(&lora.params, AdamConfig { lr: cfg.lr_lora, ..AdamConfig::default() });

    let mut teacher_graph = Graph::new();
    let teacher_net = teacher_model.bind(&mut teacher_graph, false)?;

    let ucfg = student.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD157_12EE_0000_0002);
    let mut log = Vec::new();

    for iter in 0..cfg.iterations {
        // (1) conditions and input noise
        let conds: Vec<&CondVector> =
            (0..cfg.batch).map(|_| &prompt_set[rng.random_range(0..prompt_set.len())]).collect();
        let cond = cond_tensor(&conds);
        let noise = normal_tensor(
            &mut rng,
            &[cfg.batch, ucfg.in_channels, ucfg.image_size, ucfg.image_size],
            1.0,
        );

        // (2) one-pass student generation
        let mut g = Graph::new();
        let student_net = student.bind(&mut g, true)?;
        let nv = g.constant(&noise);
        let cv = g.constant(&cond);
        let (z0, eps_list) = student_one_pass(&mut g, &student_net, &nv, &plan, &cv)?;
        let z0_detached = z0.tensor().clone();

        // (3) student update: VSD surrogate + weighted KL
        let mut lora_graph = Graph::new();
        let (lora_net, _) = lora.bind(&mut lora_graph, &teacher_model, false)?;
        let vsd = vsd_grad(&z0_detached, &teacher_net, &lora_net, &sched, &cond, &mut rng, cfg)?;
        let surrogate = vsd_surrogate(&mut g, &z0, &vsd.grad)?;
        let (kl, _) = kl_loss(&mut g, &eps_list)?;
        let weighted_kl = g.apply(PrimOp::MulScalar(cfg.kl_weight), &[&kl])?;
        let total = g.apply(PrimOp::Add, &[&surrogate, &weighted_kl])?;
        let vsd_loss = surrogate.tensor().item()? as f64;
        let kl_value = kl.tensor().item()? as f64;
        if !vsd_loss.is_finite() || !kl_value.is_finite() {
            return Err(Error::NonFinite { context: format!("distill losses at iteration {iter}") });
        }
        let grads = g.backward(&total)?;
        let grad_list = collect_grads(&grads, student_net.leaves());
        adam_student.step(student.params_mut(), &grad_list)?;
        ema_update(&mut shadow, student.params(), cfg.ema_decay)?;

        // (4) LoRA update on the detached sample
        let lora_loss =
            lora_step(&mut lora, &teacher_model, &z0_detached, &sched, &cond, &mut rng, &mut adam_lora)?;

        if iter % cfg.log_every == 0 || iter + 1 == cfg.iterations {
            let mut acc = 0.0;
            let mut acc2 = 0.0;
            let mut count = 0usize;
            for eps in &eps_list {
                for &v in eps.tensor().data() {
                    acc += v as f64;
                    acc2 += (v as f64) * (v as f64);
                    count += 1;
                }
            }
            let mean = acc / count as f64;
            let var = acc2 / count as f64 - mean * mean;
            log.push(DistillLogRow {
                iteration: iter,
                vsd_loss,
                kl_loss: kl_value,
                lora_loss,
                eps_mean: mean,
                eps_var: var,
            });
        }
    }

    Ok(DistillOutput {
        student: TrainedModel {
            config: teacher.config.clone(),
            schedule: teacher.schedule.clone(),
            raw: student.params().clone(),
            ema: shadow,
        },
        plan,
        log,
    })
}
