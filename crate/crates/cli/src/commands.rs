use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};

use tiue_cli::checkpoint::{self, Checkpoint, TrainingMeta};
use tiue_cli::config::RunConfig;
use tiue_core::analysis::{feature_similarity_trace, quality_vs_steps, QUALITY_CSV_HEADER};
use tiue_core::data::{all_conditions, cond_embed, generate_dataset, CondVector};
use tiue_core::distill::{distill_loop, train_teacher as train_teacher_loop, DISTILL_LOG_HEADER};
use tiue_core::metrics::{evaluate, FeatureSet, Provenance};
use tiue_core::ppm;
use tiue_core::sampler::{
    interpolate_conditions, sample_ddim, sample_loopfree, write_images, SampleRequest,
    SamplerMode,
};
use tiue_core::schedule::{
    loopfree_coeffs, select_timesteps, NoiseSchedule, SamplerPlan, TimestepSpacing,
};
use tiue_core::tensor::Tensor;

use crate::{
    AnalyzeArgs, BenchArgs, DistillArgs, EvalArgs, ExportDataArgs, SampleArgs, TrainTeacherArgs,
};

pub fn export_data(args: ExportDataArgs) -> Result<()> {
    let cfg = RunConfig::from_path(&args.config)?;
    let n = args.count.unwrap_or(cfg.dataset.size);
    let seed = args.seed.unwrap_or(cfg.dataset.seed);
    let samples = generate_dataset(&cfg.toy, n, seed)?;
    tiue_core::data::export_dataset(&args.out, &samples)?;
    eprintln!("wrote {n} samples and manifest.json to {}", args.out.display());
    Ok(())
}

pub fn train_teacher(args: TrainTeacherArgs) -> Result<()> {
    let cfg = RunConfig::from_path(&args.config)?;
    let dataset = generate_dataset(&cfg.toy, cfg.dataset.size, cfg.dataset.seed)?;
    eprintln!(
        "training teacher: {} iterations, batch {}, {} images",
        cfg.teacher.iterations,
        cfg.teacher.batch,
        dataset.len()
    );
    let (model, log) = train_teacher_loop(&dataset, &cfg.unet, &cfg.schedule, &cfg.teacher)?;
    if let Some(log_path) = &args.log {
        let mut text = String::from("iteration,loss\n");
        for row in &log {
            text.push_str(&format!("{},{}\n", row.iteration, row.loss));
        }
        fs::write(log_path, text)?;
    }
    let meta = TrainingMeta {
        iterations: cfg.teacher.iterations as u64,
        config_hash: checkpoint::config_hash(&cfg),
        ema: true,
    };
    checkpoint::save(&args.out, &Checkpoint { model, plan: None, meta })?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

pub fn distill(args: DistillArgs) -> Result<()> {
    let cfg = RunConfig::from_path(&args.config)?;
    let teacher = checkpoint::load(&args.teacher)?;
    let prompts: Vec<CondVector> = all_conditions().into_iter().map(|(_, _, c)| c).collect();
    eprintln!(
        "distilling: {} iterations, K = {}, kl_weight = {}",
        cfg.distill.iterations, cfg.distill.k, cfg.distill.kl_weight
    );
    let out = distill_loop(&teacher.model, &cfg.distill, &prompts)?;
    if let Some(log_path) = &args.log {
        let mut text = String::from(DISTILL_LOG_HEADER);
        text.push('\n');
        for row in &out.log {
            text.push_str(&row.csv_row());
            text.push('\n');
        }
        fs::write(log_path, text)?;
    }
    let meta = TrainingMeta {
        iterations: cfg.distill.iterations as u64,
        config_hash: checkpoint::config_hash(&cfg),
        ema: true,
    };
    checkpoint::save(&args.out, &Checkpoint { model: out.student, plan: Some(out.plan), meta })?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn parse_cond(text: &str) -> Result<CondVector> {
    let (s, c) = text
        .split_once('.')
        .ok_or_else(|| anyhow!("condition must be shape.color, got {text}"))?;
    Ok(cond_embed(s.parse()?, c.parse()?)?)
}

fn default_threads(cli: Option<usize>) -> usize {
    cli.or_else(|| std::env::var("TIUE_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(4)
}

fn plan_for(k: usize, sched: &NoiseSchedule) -> Result<SamplerPlan> {
    let (ts, term) = select_timesteps(k, sched.len(), TimestepSpacing::Trailing)?;
    Ok(loopfree_coeffs(&ts, term, sched)?)
}

pub fn sample(args: SampleArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.model)?;
    let model = ckpt.model.ema_model()?;
    let sched = NoiseSchedule::build(ckpt.model.schedule.clone())?;

    let (count, conds) = match &args.interp {
        Some(spec) => {
            let parts: Vec<&str> = spec.split(',').collect();
            if parts.len() != 3 {
                bail!("--interp wants C1,C2,N, got {spec}");
            }
            let c1 = parse_cond(parts[0])?;
            let c2 = parse_cond(parts[1])?;
            let n: usize = parts[2].parse()?;
            (n, interpolate_conditions(&c1, &c2, n)?)
        }
        None => match &args.cond {
            Some(c) => (args.count, vec![parse_cond(c)?]),
            None => {
                let all = all_conditions();
                let conds =
                    (0..args.count).map(|i| all[i % all.len()].2.clone()).collect();
                (args.count, conds)
            }
        },
    };

    let mode = match args.mode.as_str() {
        "ddim" => SamplerMode::Ddim,
        "loopfree-seq" => SamplerMode::LoopfreeSeq,
        "loopfree-par" => SamplerMode::LoopfreePar,
        other => bail!("unknown mode {other}"),
    };
    let req = SampleRequest {
        seed: args.seed,
        batch: count,
        cond: conds,
        mode,
        guidance_scale: 0.0,
        thread_count: default_threads(args.threads),
    };
    let images = match mode {
        SamplerMode::Ddim => {
            let steps = args.steps.unwrap_or(50);
            sample_ddim(&model, &sched, steps, &req)?
        }
        _ => {
            let k = args
                .k
                .or_else(|| ckpt.plan.as_ref().map(|p| p.k()))
                .unwrap_or(4);
            let plan = match &ckpt.plan {
                Some(p) if p.k() == k => p.clone(),
                _ => plan_for(k, &sched)?,
            };
            sample_loopfree(&model, &plan, &req)?
        }
    };
    let paths = write_images(&args.out, &args.run_id, args.seed, &images)?;
    eprintln!("wrote {} images to {}", paths.len(), args.out.display());
    Ok(())
}

fn read_ppm_dir(dir: &Path) -> Result<Vec<Tensor<f32>>> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .ppm files in {}", dir.display());
    }
    files.iter().map(|p| Ok(ppm::read_file(p)?)).collect()
}

pub fn analyze(args: AnalyzeArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.model)?;
    let model = ckpt.model.ema_model()?;
    let sched = NoiseSchedule::build(ckpt.model.schedule.clone())?;

    if let Some(quality_steps) = &args.quality_steps {
        let steps: Vec<usize> = quality_steps
            .split(',')
            .map(|s| s.trim().parse().map_err(|e| anyhow!("bad step count {s}: {e}")))
            .collect::<Result<_>>()?;
        let real_dir =
            args.real.as_ref().ok_or_else(|| anyhow!("--quality-steps needs --real DIR"))?;
        let real_images = read_ppm_dir(real_dir)?;
        let real = FeatureSet::from_teacher_mid(&model, &real_images, Provenance::Real)?;
        let points =
            quality_vs_steps(&model, &sched, &steps, args.samples, &real, Some(&model), args.seed)?;
        let mut text = String::from(QUALITY_CSV_HEADER);
        text.push('\n');
        for p in &points {
            text.push_str(&format!("{},{}\n", p.steps, p.frechet));
        }
        fs::write(&args.out, text)?;
        eprintln!("wrote {} quality rows to {}", points.len(), args.out.display());
        return Ok(());
    }

    let steps = args.steps.ok_or_else(|| anyhow!("need --steps N or --quality-steps LIST"))?;
    let cond = parse_cond(&args.cond)?;
    let trace = feature_similarity_trace(&model, &sched, steps, args.probes, args.seed, &cond)?;
    fs::write(&args.out, trace.to_csv())?;
    let meta_path = args.out.with_extension("meta.json");
    fs::write(&meta_path, trace.metadata_json())?;
    eprintln!(
        "trace over {} steps: mean enc sim {:.4}, mean dec sim {:.4} ({})",
        steps,
        trace.mean_enc(),
        trace.mean_dec(),
        meta_path.display()
    );
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let real_images = read_ppm_dir(&args.real)?;
    let fake_images = read_ppm_dir(&args.fake)?;
    let (real, fake) = match args.embedding.as_str() {
        "pixels" => (
            FeatureSet::from_pixels(&real_images, Provenance::Real)?,
            FeatureSet::from_pixels(&fake_images, Provenance::Generated)?,
        ),
        other => {
            let ckpt_path = other
                .strip_prefix("teacher:")
                .ok_or_else(|| anyhow!("embedding must be `pixels` or `teacher:CKPT`"))?;
            let ckpt = checkpoint::load(Path::new(ckpt_path))?;
            let model = ckpt.model.ema_model()?;
            (
                FeatureSet::from_teacher_mid(&model, &real_images, Provenance::Real)?,
                FeatureSet::from_teacher_mid(&model, &fake_images, Provenance::Generated)?,
            )
        }
    };
    let report = evaluate(&real, &fake, args.k)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => fs::write(path, &json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn median_ms(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.model)?;
    let model = ckpt.model.ema_model()?;
    let sched = NoiseSchedule::build(ckpt.model.schedule.clone())?;
    let plan = plan_for(args.k, &sched)?;
    let thread_counts: Vec<usize> = args
        .threads
        .split(',')
        .map(|s| s.trim().parse().map_err(|e| anyhow!("bad thread count {s}: {e}")))
        .collect::<Result<_>>()?;
    let all = all_conditions();
    let conds: Vec<CondVector> =
        (0..args.batch).map(|i| all[i % all.len()].2.clone()).collect();
    let request = |mode: SamplerMode, threads: usize| SampleRequest {
        seed: 7,
        batch: args.batch,
        cond: conds.clone(),
        mode,
        guidance_scale: 0.0,
        thread_count: threads,
    };

    let time_loopfree = |mode: SamplerMode, threads: usize, runs: usize| -> Result<f64> {
        let req = request(mode, threads);
        sample_loopfree(&model, &plan, &req)?; // warmup
        let mut samples = Vec::with_capacity(runs);
        for _ in 0..runs {
            let start = Instant::now();
            let imgs = sample_loopfree(&model, &plan, &req)?;
            samples.push(start.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(imgs);
        }
        Ok(median_ms(&mut samples))
    };

    let mut csv = String::from("mode,threads,batch,k,median_ms,runs\n");
    let seq_ms = time_loopfree(SamplerMode::LoopfreeSeq, 1, args.runs)?;
    csv.push_str(&format!("loopfree-seq,1,{},{},{seq_ms},{}\n", args.batch, args.k, args.runs));
    eprintln!("loopfree-seq: {seq_ms:.1} ms");
    for &threads in &thread_counts {
        let par_ms = time_loopfree(SamplerMode::LoopfreePar, threads, args.runs)?;
        csv.push_str(&format!(
            "loopfree-par,{threads},{},{},{par_ms},{}\n",
            args.batch, args.k, args.runs
        ));
        eprintln!(
            "loopfree-par threads={threads}: {par_ms:.1} ms ({:.2}x of seq)",
            par_ms / seq_ms
        );
    }
    // iterated DDIM at the same step count, for reference
    {
        let req = request(SamplerMode::Ddim, 1);
        sample_ddim(&model, &sched, args.k, &req)?;
        let mut samples = Vec::with_capacity(args.runs);
        for _ in 0..args.runs {
            let start = Instant::now();
            let imgs = sample_ddim(&model, &sched, args.k, &req)?;
            samples.push(start.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(imgs);
        }
        let ms = median_ms(&mut samples);
        csv.push_str(&format!("ddim,1,{},{},{ms},{}\n", args.batch, args.k, args.runs));
        eprintln!("ddim {} steps: {ms:.1} ms", args.k);
    }
    fs::write(&args.out, csv)?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}
