use std::fs;
use std::path::{Path, PathBuf};

use tsmnet::audio::{load_wav, resample, write_wav, CANONICAL_RATE};
use tsmnet::eval::{self, Candidate, CorpusItem};
use tsmnet::model::Autoencoder;
use tsmnet::trainer::ingest_dataset;
use tsmnet::{speed_grid, Checkpoint, ChunkPolicy, Error, Method, ModelConfig, TrainConfig, Trainer};

use crate::{EvalArgs, Failure, StretchArgs, TrainArgs};

type Outcome = std::result::Result<(), Failure>;

fn load_model(path: &Path) -> Result<Autoencoder<f32>, Failure> {
    Ok(Checkpoint::load(path)?.model::<f32>()?)
}

fn default_output(input: &Path, method: Method, speed: f64) -> PathBuf {
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    input.with_file_name(format!("{stem}.{method}.{speed}.wav"))
}

pub fn stretch(a: StretchArgs) -> Outcome {
    let method: Method = a.method.parse()?;
    let model = match (method, &a.ckpt) {
        (Method::Neural, None) => {
            return Err(Failure::usage(
                "the neural method needs a model: tsm stretch <in.wav> --speed R --method neural --ckpt <model.tsmn>",
            ))
        }
        (Method::Neural, Some(p)) => Some(load_model(p)?),
        _ => None,
    };
    let out = a.out.clone().unwrap_or_else(|| default_output(&a.input, method, a.speed));
    if out == a.input {
        return Err(Failure::usage("output path equals the input path"));
    }
    let mut x = load_wav::<f32>(&a.input)?;
    if let Some(m) = &model {
        let rate = m.config().sample_rate;
        if x.sample_rate() != rate {
            if !a.auto_resample {
                return Err(Error::SampleRateMismatch {
                    expected: rate,
                    found: x.sample_rate(),
                }
                .into());
            }
            log::info!("resampling input from {} Hz to {rate} Hz", x.sample_rate());
            x = resample(&x, rate)?;
        }
    }
    let mut policy = ChunkPolicy::default();
    if let Some(c) = a.chunk_len {
        policy.chunk_len = c;
    }
    let y = method.apply(&x, a.speed, model.as_ref(), &policy)?;
    write_wav(&y, &out)?;
    println!(
        "method {method}: in {:.3} s ({} samples) -> out {:.3} s ({} samples), written to {}",
        x.duration_secs(),
        x.len(),
        y.duration_secs(),
        y.len(),
        out.display()
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure {
                code: 3,
                message: format!("cannot read {}: {e}", p.display()),
            })?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| Failure::usage(format!("invalid configuration {}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(cr) = a.cr {
        let preset = ModelConfig::preset(cr)?;
        cfg.model.stride_schedule = preset.stride_schedule;
    }
    if let Some(d) = &a.data {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = &a.resume {
        cfg.resume_from = Some(r.clone());
    }
    if a.fresh_discriminator {
        cfg.fresh_discriminator = true;
    }
    if let Some(s) = a.segment_len {
        cfg.segment_len = s;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(c) = a.checkpoint_every {
        cfg.checkpoint_every = c;
    }
    if !cfg.model.is_preset_ratio() {
        return Err(Failure::usage(format!(
            "unsupported compression ratio {}; use 256, 512 or 1024",
            cfg.model.compression_ratio()
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> Outcome {
    let cfg = train_config(&a)?;
    let data = cfg
        .data_dir
        .clone()
        .ok_or_else(|| Failure::usage("no dataset: pass --data <dir> or set data_dir in --config"))?;
    let sampler = ingest_dataset(&data, cfg.segment_len, cfg.seed)?;
    let mut trainer = match &cfg.resume_from {
        Some(p) => Trainer::resume(cfg.clone(), sampler, &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg.clone(), sampler)?,
    };
    let start = trainer.step();
    let report = trainer.fit(&a.run_dir, cfg.steps)?;
    for step in &report.divergence_warnings {
        eprintln!("warning: divergence detected at step {step}");
    }
    let last = report.metrics.last();
    println!(
        "trained steps {}..{} (CR={}), final d_loss {:.4}, AR {:.5}, NR {:.5}, checkpoint {}",
        start + 1,
        trainer.step(),
        cfg.model.compression_ratio(),
        last.map_or(f64::NAN, |m| m.d_loss),
        last.map_or(f64::NAN, |m| m.ar),
        last.map_or(f64::NAN, |m| m.nr),
        report.last_checkpoint.map_or("none".into(), |p| p.display().to_string())
    );
    Ok(())
}

pub fn parse_speeds(s: &str) -> Result<Vec<f64>, Failure> {
    if s.trim().eq_ignore_ascii_case("grid") {
        return Ok(speed_grid());
    }
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Failure::usage(format!("invalid speed {v:?}")))
        })
        .collect()
}

pub fn eval(a: EvalArgs, repetitions: Option<usize>) -> Outcome {
    let speeds = parse_speeds(&a.speeds)?;
    let methods: Vec<Method> = a
        .methods
        .split(',')
        .filter(|m| !m.trim().is_empty())
        .map(|m| m.trim().parse::<Method>())
        .collect::<tsmnet::Result<_>>()?;
    let mut models = Vec::new();
    if methods.contains(&Method::Neural) {
        if a.ckpt.is_empty() {
            eprintln!("notice: no --ckpt given; skipping neural rows");
        }
        for p in &a.ckpt {
            if p.is_file() {
                models.push(load_model(p)?);
            } else {
                eprintln!("notice: checkpoint {} not found; skipping its neural rows", p.display());
            }
        }
    }
    let corpus: Vec<CorpusItem<f32>> = match &a.corpus {
        Some(dir) => eval::load_corpus_dir(dir)?,
        None => eval::synthetic_corpus(a.seconds, CANONICAL_RATE, a.seed),
    };
    if corpus.is_empty() {
        return Err(Error::EmptyDataset("evaluation corpus has no WAV files".into()).into());
    }
    let mut candidates = Vec::new();
    for m in &methods {
        match m {
            Method::Neural => candidates.extend(models.iter().map(Candidate::neural)),
            other => candidates.push(Candidate::classical(*other)),
        }
    }
    let policy = ChunkPolicy::default();
    let report = match repetitions {
        Some(r) => eval::bench_inference(&candidates, &corpus, &speeds, r, &policy)?,
        None => eval::evaluate(&candidates, &corpus, &speeds, &policy)?,
    };
    report.write_csv(&a.report)?;
    if let Some(p) = &a.json {
        report.write_json(p)?;
    }
    if let Some(d) = &a.gnuplot {
        report.write_gnuplot(d)?;
    }
    for agg in report.aggregate() {
        log::info!(
            "{} r={:.2}: duration {:.3}%, pitch {}, {:.2} ms/s",
            agg.method,
            agg.speed,
            agg.mean_duration_error_pct,
            agg.mean_pitch_error_pct.map_or("n/a".into(), |v| format!("{v:.3}%")),
            agg.mean_ms_per_audio_sec
        );
    }
    println!("{} rows written to {}", report.rows.len(), a.report.display());
    Ok(())
}
