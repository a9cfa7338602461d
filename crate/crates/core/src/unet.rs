//! Conditional epsilon-prediction UNet with an explicit encoder/decoder
//! boundary.
//!
//! The encoder (input conv, downsampling residual stages, and the
//! mid-block, which belongs to the encoder) produces an [`EncoderCache`]
//! of skip features plus the mid output. The decoder consumes one cache
//! and can run at any timestep, which is what makes the shared-encoder
//! one-pass sampler possible: encode once at the key step, decode at
//! `K` different steps, in parallel if desired.
//!
//! `full_forward` is literally `decode(encode(..))` at the same
//! timestep, so the split pass and the conventional pass are the same
//! code path.
//!
//! # Parameter namespace
//!
//! Names are stable and documented because checkpoints and LoRA target
//! them:
//!
//! ```text
//! in_conv.{w,b}
//! time_mlp.l1.{w,b}    time_mlp.l2.{w,b}
//! cond_mlp.l1.{w,b}    cond_mlp.l2.{w,b}
//! enc.{level}.{block}.<res>     mid.{block}.<res>     dec.{level}.{block}.<res>
//! out_norm.{g,b}
//! out_conv.{w,b}
//! ```
//!
//! where `<res>` is `norm1.{g,b} conv1.{w,b} emb_scale.{w,b}
//! emb_shift.{w,b} norm2.{g,b} conv2.{w,b}` plus `skip.{w,b}` when the
//! block changes channel count. Decoder levels are named by encoder
//! level index; execution order is highest level first.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, ParamSet, PrimOp, Scalar, Tensor, Value};
use crate::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub resblocks_per_level: usize,
    pub time_embed_dim: usize,
    pub cond_dim: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_size: 24,
            in_channels: 3,
            out_channels: 3,
            base_channels: 32,
            channel_mult: vec![1, 2, 4],
            resblocks_per_level: 2,
            time_embed_dim: 128,
            cond_dim: 16,
            norm_groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    /// Channel count per level.
    pub fn channels(&self) -> Vec<usize> {
        self.channel_mult.iter().map(|m| m * self.base_channels).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if levels == 0 {
            return Err(Error::InvalidAttr {
                op: "unet_config",
                detail: "channel_mult must be non-empty".into(),
            });
        }
        let down = 1usize << (levels - 1);
        if self.image_size == 0 || self.image_size % down != 0 {
            return Err(Error::InvalidAttr {
                op: "unet_config",
                detail: format!(
                    "image_size {} must be divisible by 2^(levels-1) = {down}",
                    self.image_size
                ),
            });
        }
        if self.image_size / down < 2 {
            return Err(Error::InvalidAttr {
                op: "unet_config",
                detail: "bottom resolution below 2x2".into(),
            });
        }
        for c in self.channels() {
            if c == 0 || c % self.norm_groups != 0 {
                return Err(Error::InvalidAttr {
                    op: "unet_config",
                    detail: format!("channel count {c} not divisible by {} groups", self.norm_groups),
                });
            }
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidAttr {
                op: "unet_config",
                detail: "time_embed_dim must be even and >= 2".into(),
            });
        }
        if self.in_channels == 0
            || self.out_channels == 0
            || self.cond_dim == 0
            || self.resblocks_per_level == 0
        {
            return Err(Error::InvalidAttr {
                op: "unet_config",
                detail: "channel counts, cond_dim, resblocks_per_level must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Pre-MLP sinusoidal position encoding of a timestep: `sin` ladder in
/// the first half, `cos` ladder in the second.
pub fn sinusoid_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    out
}

// -----------------------------------------------------------------------
// parameters
// -----------------------------------------------------------------------

/// Shape blueprint of one residual block.
#[derive(Clone, Copy, Debug)]
struct BlockSpec {
    c_in: usize,
    c_out: usize,
}

impl BlockSpec {
    fn has_skip(&self) -> bool {
        self.c_in != self.c_out
    }
}

/// Blueprint of the whole net: every block with its channel counts, in
/// execution order.
struct Layout {
    enc: Vec<Vec<BlockSpec>>,
    mid: Vec<BlockSpec>,
    dec: Vec<Vec<BlockSpec>>, // indexed by level; executed from the top
}

fn layout(cfg: &UNetConfig) -> Layout {
    let ch = cfg.channels();
    let levels = cfg.levels();
    let r = cfg.resblocks_per_level;
    let mut enc = Vec::with_capacity(levels);
    for l in 0..levels {
        let mut blocks = Vec::with_capacity(r);
        let input = if l == 0 { ch[0] } else { ch[l - 1] };
        blocks.push(BlockSpec { c_in: input, c_out: ch[l] });
        for _ in 1..r {
            blocks.push(BlockSpec { c_in: ch[l], c_out: ch[l] });
        }
        enc.push(blocks);
    }
    let top = ch[levels - 1];
    let mid = vec![BlockSpec { c_in: top, c_out: top }; 2];
    let mut dec = Vec::with_capacity(levels);
    for l in 0..levels {
        let mut blocks = Vec::with_capacity(r);
        // input: features arriving from above (ch[l+1], or mid's ch) + skip ch[l]
        let from_above = if l == levels - 1 { top } else { ch[l + 1] };
        blocks.push(BlockSpec { c_in: from_above + ch[l], c_out: ch[l] });
        for _ in 1..r {
            blocks.push(BlockSpec { c_in: ch[l], c_out: ch[l] });
        }
        dec.push(blocks);
    }
    Layout { enc, mid, dec }
}

/// Named parameter tensors for the full net.
#[derive(Clone)]
pub struct UNetParams<S: Scalar> {
    config: UNetConfig,
    params: ParamSet<S>,
}

struct InitCtx<'a, S: Scalar> {
    rng: &'a mut ChaCha8Rng,
    params: ParamSet<S>,
}

impl<S: Scalar> InitCtx<'_, S> {
    fn normal(&mut self, std: f64) -> S {
        let u1: f64 = self.rng.random::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = self.rng.random();
        S::from_f64((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std)
    }

    fn conv(&mut self, name: &str, co: usize, ci: usize, k: usize) {
        let fan_in = (ci * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let n = co * ci * k * k;
        let data: Vec<S> = (0..n).map(|_| self.normal(std)).collect();
        self.params
            .insert(format!("{name}.w"), Tensor::from_vec(&[co, ci, k, k], data).unwrap())
            .unwrap();
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[co])).unwrap();
    }

    fn linear(&mut self, name: &str, o: usize, i: usize) {
        let std = (1.0 / i as f64).sqrt();
        let data: Vec<S> = (0..o * i).map(|_| self.normal(std)).collect();
        self.params
            .insert(format!("{name}.w"), Tensor::from_vec(&[o, i], data).unwrap())
            .unwrap();
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[o])).unwrap();
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.params.insert(format!("{name}.g"), Tensor::full(&[c], S::one())).unwrap();
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[c])).unwrap();
    }

    fn resblock(&mut self, name: &str, spec: BlockSpec, embed_dim: usize) {
        self.norm(&format!("{name}.norm1"), spec.c_in);
        self.conv(&format!("{name}.conv1"), spec.c_out, spec.c_in, 3);
        self.linear(&format!("{name}.emb_scale"), spec.c_out, embed_dim);
        self.linear(&format!("{name}.emb_shift"), spec.c_out, embed_dim);
        self.norm(&format!("{name}.norm2"), spec.c_out);
        self.conv(&format!("{name}.conv2"), spec.c_out, spec.c_out, 3);
        if spec.has_skip() {
            self.conv(&format!("{name}.skip"), spec.c_out, spec.c_in, 1);
        }
    }
}

impl<S: Scalar> UNetParams<S> {
    /// Fresh parameters from a seed; deterministic across runs and
    /// platforms.
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let lay = layout(&config);
        let ch = config.channels();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cx = InitCtx { rng: &mut rng, params: ParamSet::new() };
        cx.conv("in_conv", ch[0], config.in_channels, 3);
        cx.linear("time_mlp.l1", config.time_embed_dim, config.time_embed_dim);
        cx.linear("time_mlp.l2", config.time_embed_dim, config.time_embed_dim);
        cx.linear("cond_mlp.l1", config.time_embed_dim, config.cond_dim);
        cx.linear("cond_mlp.l2", config.time_embed_dim, config.time_embed_dim);
        for (l, blocks) in lay.enc.iter().enumerate() {
            for (b, spec) in blocks.iter().enumerate() {
                cx.resblock(&format!("enc.{l}.{b}"), *spec, config.time_embed_dim);
            }
        }
        for (b, spec) in lay.mid.iter().enumerate() {
            cx.resblock(&format!("mid.{b}"), *spec, config.time_embed_dim);
        }
        for (l, blocks) in lay.dec.iter().enumerate() {
            for (b, spec) in blocks.iter().enumerate() {
                cx.resblock(&format!("dec.{l}.{b}"), *spec, config.time_embed_dim);
            }
        }
        cx.norm("out_norm", 2 * ch[0]);
        cx.conv("out_conv", config.out_channels, 2 * ch[0], 3);
        Ok(Self { config, params: cx.params })
    }

    pub fn from_parts(config: UNetConfig, params: ParamSet<S>) -> Result<Self> {
        config.validate()?;
        // cheap structural check: initializing the same config must
        // produce the same names and shapes
        let reference = Self::init(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "unet_params",
                detail: format!(
                    "expected {} tensors, got {}",
                    reference.params.len(),
                    params.len()
                ),
            });
        }
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(got) if got.shape() == t.shape() => {}
                Some(got) => {
                    return Err(Error::ShapeMismatch {
                        op: "unet_params",
                        detail: format!("{name}: {:?} vs {:?}", got.shape(), t.shape()),
                    })
                }
                None => return Err(Error::TargetMissing { name: name.to_string() }),
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// Binds every parameter into a graph: as gradient leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Result<BoundUNet<S>> {
        self.bind_with(g, trainable, |_, _, v| Ok(v))
    }

    /// Like [`UNetParams::bind`], but lets `transform` replace each
    /// bound value (LoRA adds low-rank deltas this way). `transform`
    /// sees the stable parameter name.
    pub fn bind_with(
        &self,
        g: &mut Graph<S>,
        trainable: bool,
        mut transform: impl FnMut(&mut Graph<S>, &str, Value<S>) -> Result<Value<S>>,
    ) -> Result<BoundUNet<S>> {
        let mut values = Vec::with_capacity(self.params.len());
        let mut leaves = Vec::with_capacity(self.params.len());
        for (name, tensor) in self.params.iter() {
            let bound = if trainable {
                g.leaf(&tensor.clone().with_requires_grad(true))
            } else {
                g.constant(tensor)
            };
            leaves.push(bound.clone());
            values.push(transform(g, name, bound)?);
        }
        let resolve = |name: &str| -> Value<S> {
            let i = self.params.position(name).expect("layout and namespace agree");
            values[i].clone()
        };
        let pair = |name: &str, suffix: (&str, &str)| {
            (resolve(&format!("{name}.{}", suffix.0)), resolve(&format!("{name}.{}", suffix.1)))
        };
        let wb = |name: &str| pair(name, ("w", "b"));
        let gb = |name: &str| pair(name, ("g", "b"));
        let block = |name: &str, spec: &BlockSpec| BoundBlock {
            norm1: gb(&format!("{name}.norm1")),
            conv1: wb(&format!("{name}.conv1")),
            emb_scale: wb(&format!("{name}.emb_scale")),
            emb_shift: wb(&format!("{name}.emb_shift")),
            norm2: gb(&format!("{name}.norm2")),
            conv2: wb(&format!("{name}.conv2")),
            skip: spec.has_skip().then(|| wb(&format!("{name}.skip"))),
        };
        let lay = layout(&self.config);
        Ok(BoundUNet {
            config: self.config.clone(),
            leaves,
            in_conv: wb("in_conv"),
            time_mlp: [wb("time_mlp.l1"), wb("time_mlp.l2")],
            cond_mlp: [wb("cond_mlp.l1"), wb("cond_mlp.l2")],
            enc: lay
                .enc
                .iter()
                .enumerate()
                .map(|(l, bs)| {
                    bs.iter()
                        .enumerate()
                        .map(|(b, spec)| block(&format!("enc.{l}.{b}"), spec))
                        .collect()
                })
                .collect(),
            mid: lay
                .mid
                .iter()
                .enumerate()
                .map(|(b, spec)| block(&format!("mid.{b}"), spec))
                .collect(),
            dec: lay
                .dec
                .iter()
                .enumerate()
                .map(|(l, bs)| {
                    bs.iter()
                        .enumerate()
                        .map(|(b, spec)| block(&format!("dec.{l}.{b}"), spec))
                        .collect()
                })
                .collect(),
            out_norm: gb("out_norm"),
            out_conv: wb("out_conv"),
        })
    }
}

// -----------------------------------------------------------------------
// bound net and forward passes
// -----------------------------------------------------------------------

struct BoundBlock<S: Scalar> {
    norm1: (Value<S>, Value<S>),
    conv1: (Value<S>, Value<S>),
    emb_scale: (Value<S>, Value<S>),
    emb_shift: (Value<S>, Value<S>),
    norm2: (Value<S>, Value<S>),
    conv2: (Value<S>, Value<S>),
    skip: Option<(Value<S>, Value<S>)>,
}

/// Parameters bound into (or constant alongside) a graph, ready to run.
pub struct BoundUNet<S: Scalar> {
    config: UNetConfig,
    /// Pre-transform bound values in parameter-set order; gradient
    /// queries go through these.
    leaves: Vec<Value<S>>,
    in_conv: (Value<S>, Value<S>),
    time_mlp: [(Value<S>, Value<S>); 2],
    cond_mlp: [(Value<S>, Value<S>); 2],
    enc: Vec<Vec<BoundBlock<S>>>,
    mid: Vec<BoundBlock<S>>,
    dec: Vec<Vec<BoundBlock<S>>>,
    out_norm: (Value<S>, Value<S>),
    out_conv: (Value<S>, Value<S>),
}

/// Frozen encoder outputs: one skip per stage plus the mid-block output.
pub struct EncoderCache<S: Scalar> {
    pub skips: Vec<Value<S>>,
    pub mid: Value<S>,
    /// Schedule indices (per batch item) the cache was produced at.
    pub key_steps: Vec<usize>,
    /// Condition the cache was produced with; decode checks it matches.
    pub cond: Tensor<S>,
}

impl<S: Scalar> BoundUNet<S> {
    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Bound values in parameter order, for gradient collection.
    pub fn leaves(&self) -> &[Value<S>] {
        &self.leaves
    }

    fn norm_groups(&self) -> PrimOp {
        PrimOp::GroupNorm { groups: self.config.norm_groups, eps: 1e-5 }
    }

    fn linear(
        &self,
        g: &mut Graph<S>,
        w: &(Value<S>, Value<S>),
        x: &Value<S>,
    ) -> Result<Value<S>> {
        g.apply(PrimOp::Linear, &[x, &w.0, &w.1])
    }

    /// Joint time/condition embedding: a two-layer MLP over the
    /// sinusoid plus a two-layer MLP over the condition vector.
    fn embedding(&self, g: &mut Graph<S>, ts: &[usize], cond: &Value<S>) -> Result<Value<S>> {
        let dim = self.config.time_embed_dim;
        let batch = ts.len();
        let mut sin_data = Vec::with_capacity(batch * dim);
        for &t in ts {
            sin_data.extend(sinusoid_embedding(t, dim).into_iter().map(S::from_f64));
        }
        let sin = g.constant(&Tensor::from_vec(&[batch, dim], sin_data)?);
        let h = self.linear(g, &self.time_mlp[0], &sin)?;
        let h = g.apply(PrimOp::Silu, &[&h])?;
        let t_emb = self.linear(g, &self.time_mlp[1], &h)?;
        let c = self.linear(g, &self.cond_mlp[0], cond)?;
        let c = g.apply(PrimOp::Silu, &[&c])?;
        let c_emb = self.linear(g, &self.cond_mlp[1], &c)?;
        g.apply(PrimOp::Add, &[&t_emb, &c_emb])
    }

    fn resblock(
        &self,
        g: &mut Graph<S>,
        blk: &BoundBlock<S>,
        x: &Value<S>,
        emb: &Value<S>,
    ) -> Result<Value<S>> {
        let h = g.apply(self.norm_groups(), &[x, &blk.norm1.0, &blk.norm1.1])?;
        let h = g.apply(PrimOp::Silu, &[&h])?;
        let h = g.apply(PrimOp::Conv2d { pad: 1 }, &[&h, &blk.conv1.0, &blk.conv1.1])?;
        let emb_act = g.apply(PrimOp::Silu, &[emb])?;
        let scale = self.linear(g, &blk.emb_scale, &emb_act)?;
        let shift = self.linear(g, &blk.emb_shift, &emb_act)?;
        let h = g.apply(self.norm_groups(), &[&h, &blk.norm2.0, &blk.norm2.1])?;
        let h = g.apply(PrimOp::ScaleShift, &[&h, &scale, &shift])?;
        let h = g.apply(PrimOp::Silu, &[&h])?;
        let h = g.apply(PrimOp::Conv2d { pad: 1 }, &[&h, &blk.conv2.0, &blk.conv2.1])?;
        let shortcut = match &blk.skip {
            Some(skip) => g.apply(PrimOp::Conv2d { pad: 0 }, &[x, &skip.0, &skip.1])?,
            None => x.clone(),
        };
        g.apply(PrimOp::Add, &[&h, &shortcut])
    }

    fn check_input(&self, z: &Value<S>, ts: &[usize], cond: &Value<S>) -> Result<()> {
        let cfg = &self.config;
        let want = [usize::MAX, cfg.in_channels, cfg.image_size, cfg.image_size];
        let shape = z.shape();
        if shape.len() != 4 || shape[1..] != want[1..] {
            return Err(Error::ShapeMismatch {
                op: "unet_forward",
                detail: format!(
                    "input {:?}, expected (batch, {}, {}, {})",
                    shape, cfg.in_channels, cfg.image_size, cfg.image_size
                ),
            });
        }
        if cond.shape() != [shape[0], cfg.cond_dim] {
            return Err(Error::ShapeMismatch {
                op: "unet_forward",
                detail: format!(
                    "condition {:?}, expected ({}, {})",
                    cond.shape(),
                    shape[0],
                    cfg.cond_dim
                ),
            });
        }
        if ts.len() != shape[0] {
            return Err(Error::ShapeMismatch {
                op: "unet_forward",
                detail: format!("{} timesteps for batch {}", ts.len(), shape[0]),
            });
        }
        Ok(())
    }

    /// Runs input conv, encoder stages, and the mid-block, all
    /// conditioned on the timestep/condition embedding.
    pub fn encode(
        &self,
        g: &mut Graph<S>,
        z: &Value<S>,
        ts: &[usize],
        cond: &Value<S>,
    ) -> Result<EncoderCache<S>> {
        self.check_input(z, ts, cond)?;
        let emb = self.embedding(g, ts, cond)?;
        let mut h = g.apply(PrimOp::Conv2d { pad: 1 }, &[z, &self.in_conv.0, &self.in_conv.1])?;
        let mut skips = vec![h.clone()];
        let levels = self.config.levels();
        for (l, blocks) in self.enc.iter().enumerate() {
            for blk in blocks {
                h = self.resblock(g, blk, &h, &emb)?;
            }
            skips.push(h.clone());
            if l + 1 < levels {
                h = g.apply(PrimOp::AvgPool2, &[&h])?;
            }
        }
        for blk in &self.mid {
            h = self.resblock(g, blk, &h, &emb)?;
        }
        Ok(EncoderCache {
            skips,
            mid: h,
            key_steps: ts.to_vec(),
            cond: cond.tensor().clone(),
        })
    }

    /// Decoder pass over a cache at timestep(s) `ts`; returns the
    /// predicted noise and the final hidden feature before the output
    /// head (the probe used by feature-similarity analysis).
    pub fn decode_with_feature(
        &self,
        g: &mut Graph<S>,
        cache: &EncoderCache<S>,
        ts: &[usize],
        cond: &Value<S>,
    ) -> Result<(Value<S>, Value<S>)> {
        if !cache.cond.bit_eq(cond.tensor()) {
            return Err(Error::CacheMismatch {
                detail: "condition differs from the one the cache was built with".into(),
            });
        }
        let levels = self.config.levels();
        if cache.skips.len() != levels + 1 {
            return Err(Error::CacheMismatch {
                detail: format!("{} skips for {} stages", cache.skips.len(), levels + 1),
            });
        }
        let ch = self.config.channels();
        let size = self.config.image_size;
        for l in 0..levels {
            let want = [cache.cond.shape()[0], ch[l], size >> l, size >> l];
            if cache.skips[l + 1].shape() != want {
                return Err(Error::CacheMismatch {
                    detail: format!(
                        "skip {}: {:?}, expected {:?}",
                        l + 1,
                        cache.skips[l + 1].shape(),
                        want
                    ),
                });
            }
        }
        if ts.len() != cache.cond.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "decode",
                detail: format!("{} timesteps for batch {}", ts.len(), cache.cond.shape()[0]),
            });
        }
        let emb = self.embedding(g, ts, cond)?;
        let mut h = cache.mid.clone();
        for l in (0..levels).rev() {
            h = g.apply(PrimOp::ConcatChannels, &[&h, &cache.skips[l + 1]])?;
            for blk in &self.dec[l] {
                h = self.resblock(g, blk, &h, &emb)?;
            }
            if l > 0 {
                h = g.apply(PrimOp::UpsampleNearest2, &[&h])?;
            }
        }
        let h = g.apply(PrimOp::ConcatChannels, &[&h, &cache.skips[0]])?;
        let h = g.apply(self.norm_groups(), &[&h, &self.out_norm.0, &self.out_norm.1])?;
        let h = g.apply(PrimOp::Silu, &[&h])?;
        let feature = h.clone();
        let out = g.apply(PrimOp::Conv2d { pad: 1 }, &[&h, &self.out_conv.0, &self.out_conv.1])?;
        Ok((out, feature))
    }

    /// Decoder pass over a cache; predicted noise only.
    pub fn decode(
        &self,
        g: &mut Graph<S>,
        cache: &EncoderCache<S>,
        ts: &[usize],
        cond: &Value<S>,
    ) -> Result<Value<S>> {
        Ok(self.decode_with_feature(g, cache, ts, cond)?.0)
    }

    /// Conventional pass: encode and decode at the same timestep(s).
    pub fn full_forward(
        &self,
        g: &mut Graph<S>,
        z: &Value<S>,
        ts: &[usize],
        cond: &Value<S>,
    ) -> Result<Value<S>> {
        let cache = self.encode(g, z, ts, cond)?;
        self.decode(g, &cache, ts, cond)
    }
}
