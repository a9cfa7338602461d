//! Motivating measurements: per-step encoder/decoder feature-similarity
//! traces and the quality-versus-steps curve.
//!
//! "Feature similarity" here is the cosine between flattened features
//! of consecutive sampling steps, averaged over probe seeds. The probed
//! layers are the encoder's mid-block output and the decoder's final
//! hidden feature before the output head; both choices are recorded in
//! the trace metadata.

use serde::{Deserialize, Serialize};

use crate::data::{all_conditions, CondVector};
use crate::metrics::{frechet_proxy, FeatureSet, Provenance};
use crate::sampler::{sample_ddim, SampleRequest, SamplerMode};
use crate::schedule::{ddim_step, select_timesteps, NoiseSchedule, StepTarget, TimestepSpacing};
use crate::tensor::{Graph, Tensor};
use crate::unet::UNetParams;
use crate::{Error, Result};

/// Adjacent-step cosine similarities of encoder and decoder features
/// along a sampling trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimilarityTrace {
    /// Schedule indices in sampling order.
    pub steps: Vec<usize>,
    /// Cosine between consecutive encoder mid features; `steps - 1`
    /// entries.
    pub enc_sim: Vec<f64>,
    /// Same for the decoder's final hidden feature.
    pub dec_sim: Vec<f64>,
    pub probes: usize,
    pub seed: u64,
    pub estimator: String,
    pub enc_layer: String,
    pub dec_layer: String,
}

impl SimilarityTrace {
    pub fn mean_enc(&self) -> f64 {
        self.enc_sim.iter().sum::<f64>() / self.enc_sim.len() as f64
    }

    pub fn mean_dec(&self) -> f64 {
        self.dec_sim.iter().sum::<f64>() / self.dec_sim.len() as f64
    }

    /// CSV body: `step_from,step_to,enc_sim,dec_sim`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step_from,step_to,enc_sim,dec_sim\n");
        for i in 0..self.enc_sim.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.steps[i],
                self.steps[i + 1],
                self.enc_sim[i],
                self.dec_sim[i]
            ));
        }
        out
    }

    /// JSON sidecar describing how the trace was measured.
    pub fn metadata_json(&self) -> String {
        serde_json::json!({
            "estimator": self.estimator,
            "enc_layer": self.enc_layer,
            "dec_layer": self.dec_layer,
            "probes": self.probes,
            "seed": self.seed,
            "steps": self.steps,
        })
        .to_string()
    }
}

fn cosine(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

pub(crate) fn feature_similarity_trace_impl(
    model: &UNetParams<f32>,
    sched: &NoiseSchedule,
    steps: usize,
    probes: usize,
    seed: u64,
    cond: &CondVector,
    hold_z_fixed: bool,
) -> Result<SimilarityTrace> {
    if steps < 2 {
        return Err(Error::InvalidSteps { steps, t: sched.len() });
    }
    if probes < 1 {
        return Err(Error::InvalidAttr {
            op: "feature_similarity_trace",
            detail: "probes must be >= 1".into(),
        });
    }
    let (ts, terminal) = select_timesteps(steps, sched.len(), TimestepSpacing::Trailing)?;
    let cfg = model.config();
    if cond.dim() != cfg.cond_dim {
        return Err(Error::DimMismatch { left: cond.dim(), right: cfg.cond_dim });
    }
    let mut graph = Graph::new();
    let net = model.bind(&mut graph, false)?;
    let cond_t = Tensor::from_vec(&[1, cond.dim()], cond.0.clone())?;

    let mut enc_acc = vec![0.0f64; steps - 1];
    let mut dec_acc = vec![0.0f64; steps - 1];
    for probe in 0..probes {
        // probe index keys the noise, so probes are independent draws
        let per = cfg.in_channels * cfg.image_size * cfg.image_size;
        let data: Vec<f32> = (0..per)
            .map(|e| crate::rng::normal_at(seed, probe as u64, e as u64) as f32)
            .collect();
        let mut z =
            Tensor::from_vec(&[1, cfg.in_channels, cfg.image_size, cfg.image_size], data)?;
        let mut prev: Option<(Tensor<f32>, Tensor<f32>)> = None;
        for (j, &t) in ts.iter().enumerate() {
            let mut g = Graph::new();
            let zv = g.constant(&z);
            let cv = g.constant(&cond_t);
            let cache = net.encode(&mut g, &zv, &[t], &cv)?;
            let (eps, feature) = net.decode_with_feature(&mut g, &cache, &[t], &cv)?;
            let enc_feat = cache.mid.tensor().clone();
            let dec_feat = feature.into_tensor();
            if let Some((pe, pd)) = &prev {
                enc_acc[j - 1] += cosine(pe, &enc_feat);
                dec_acc[j - 1] += cosine(pd, &dec_feat);
            }
            prev = Some((enc_feat, dec_feat));
            if !hold_z_fixed {
                let next = if j + 1 < ts.len() { StepTarget::Step(ts[j + 1]) } else { terminal };
                z = ddim_step(&z, eps.tensor(), t, next, sched)?;
            }
        }
    }
    let scale = 1.0 / probes as f64;
    Ok(SimilarityTrace {
        steps: ts,
        enc_sim: enc_acc.into_iter().map(|v| v * scale).collect(),
        dec_sim: dec_acc.into_iter().map(|v| v * scale).collect(),
        probes,
        seed,
        estimator: "adjacent-step cosine over flattened features".into(),
        enc_layer: "encoder mid-block output".into(),
        dec_layer: "decoder final hidden feature (before output head)".into(),
    })
}

/// Runs full multi-step DDIM sampling and records the cosine similarity
/// of encoder and decoder features between consecutive steps, averaged
/// over `probes` seeds.
pub fn feature_similarity_trace(
    model: &UNetParams<f32>,
    sched: &NoiseSchedule,
    steps: usize,
    probes: usize,
    seed: u64,
    cond: &CondVector,
) -> Result<SimilarityTrace> {
    feature_similarity_trace_impl(model, sched, steps, probes, seed, cond, false)
}

/// One point of the quality-versus-steps curve.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct QualityPoint {
    pub steps: usize,
    pub frechet: f64,
}

pub const QUALITY_CSV_HEADER: &str = "steps,frechet";

/// Samples `n_samples` images at every step count and scores them
/// against `real`. The embedding matches `real`'s kind; a teacher-
/// encoder embedding needs `embed_model`.
pub fn quality_vs_steps(
    model: &UNetParams<f32>,
    sched: &NoiseSchedule,
    steps_list: &[usize],
    n_samples: usize,
    real: &FeatureSet,
    embed_model: Option<&UNetParams<f32>>,
    seed: u64,
) -> Result<Vec<QualityPoint>> {
    let conds = all_conditions();
    let cond_cycle: Vec<CondVector> =
        (0..n_samples).map(|i| conds[i % conds.len()].2.clone()).collect();
    let mut out = Vec::with_capacity(steps_list.len());
    for &steps in steps_list {
        let req = SampleRequest {
            seed,
            batch: n_samples,
            cond: cond_cycle.clone(),
            mode: SamplerMode::Ddim,
            guidance_scale: 0.0,
            thread_count: 1,
        };
        let images = sample_ddim(model, sched, steps, &req)?;
        let fake = match real.kind {
            crate::metrics::EmbeddingKind::FlatPixels => {
                FeatureSet::from_pixels(&images, Provenance::Generated)?
            }
            crate::metrics::EmbeddingKind::TeacherEncoder => {
                let embed = embed_model.ok_or_else(|| Error::InvalidAttr {
                    op: "quality_vs_steps",
                    detail: "teacher-encoder embedding needs an embedding model".into(),
                })?;
                FeatureSet::from_teacher_mid(embed, &images, Provenance::Generated)?
            }
        };
        out.push(QualityPoint { steps, frechet: frechet_proxy(real, &fake)? });
    }
    Ok(out)
}
