//! Adversarial training of the autoencoder against the multi-scale
//! discriminator.
//!
//! Each step performs one discriminator update followed by one generator
//! update. Audio and Neuralgram reconstruction errors are recorded for
//! monitoring only and never enter a gradient.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{self, DiscriminatorConfig, MultiScaleDiscriminator, FM_WEIGHT};
use crate::audio::{self, CANONICAL_RATE};
use crate::autograd::{Eager, Graph, Ops, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{Autoencoder, ModelConfig};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::tensor::Tensor;

type NamedGrads = Vec<(String, Tensor<f32>)>;

/// Window length of the divergence detector, in steps.
pub const DIVERGENCE_WINDOW: usize = 200;

const DISC_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;
const DATA_SEED_OFFSET: u64 = 0xd1b5_4a32_d192_ed03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DivergenceConfig {
    pub window: usize,
    /// Windowed-mean discriminator loss below which the discriminator is
    /// considered dominant.
    pub d_loss_threshold: f64,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        Self {
            window: DIVERGENCE_WINDOW,
            d_loss_threshold: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub discriminator: DiscriminatorConfig,
    pub segment_len: usize,
    pub batch_size: usize,
    /// Steps to run per call of [`Trainer::fit`].
    pub steps: u64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub betas: (f64, f64),
    pub fm_weight: f64,
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub data_dir: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
    pub fresh_discriminator: bool,
    pub divergence: DivergenceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            segment_len: 16384,
            batch_size: 8,
            steps: 1000,
            lr_generator: 1e-4,
            lr_discriminator: 1e-4,
            betas: (0.5, 0.9),
            fm_weight: FM_WEIGHT,
            seed: 0,
            checkpoint_every: 1000,
            data_dir: None,
            resume_from: None,
            fresh_discriminator: false,
            divergence: DivergenceConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.discriminator.validate()?;
        let cr = self.model.compression_ratio();
        if self.segment_len == 0 || !self.segment_len.is_multiple_of(cr) {
            return Err(Error::InvalidArgument(format!(
                "segment length {} must be a positive multiple of the compression ratio {cr}",
                self.segment_len
            )));
        }
        if self.segment_len < self.discriminator.min_input_len() {
            return Err(Error::InvalidArgument(format!(
                "segment length {} is shorter than one discriminator patch ({})",
                self.segment_len,
                self.discriminator.min_input_len()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.lr_generator >= 0.0 && self.lr_discriminator >= 0.0) {
            return Err(Error::InvalidArgument("learning rates must be non-negative".into()));
        }
        if self.divergence.window == 0 {
            return Err(Error::InvalidArgument("divergence window must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: u64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub l_fm: f64,
    /// Mean absolute audio reconstruction error.
    pub ar: f64,
    /// Mean absolute Neuralgram reconstruction error.
    pub nr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Health {
    Healthy,
    Diverging,
}

fn window_means(w: &[TrainMetrics]) -> (f64, f64, f64) {
    let n = w.len() as f64;
    let s = w.iter().fold((0.0, 0.0, 0.0), |a, m| (a.0 + m.d_loss, a.1 + m.ar, a.2 + m.nr));
    (s.0 / n, s.1 / n, s.2 / n)
}

/// Compares the latest window against the one before it. Fewer than two
/// full windows of history is reported healthy.
pub fn detect_divergence(history: &[TrainMetrics], cfg: &DivergenceConfig) -> Health {
    let w = cfg.window;
    if w == 0 || history.len() < 2 * w {
        return Health::Healthy;
    }
    let n = history.len();
    let (d_now, ar_now, nr_now) = window_means(&history[n - w..]);
    let (_, ar_prev, nr_prev) = window_means(&history[n - 2 * w..n - w]);
    if d_now < cfg.d_loss_threshold && ar_now > ar_prev && nr_now > nr_prev {
        Health::Diverging
    } else {
        Health::Healthy
    }
}

/// Position of a drawn segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentDraw {
    pub clip: usize,
    pub offset: usize,
}

/// Uniformly random fixed-length windows over a set of clips.
#[derive(Debug, Clone)]
pub struct SegmentSampler {
    clips: Vec<Vec<f32>>,
    segment_len: usize,
    seed: u64,
    rng: ChaCha8Rng,
}

impl SegmentSampler {
    pub fn from_clips(clips: Vec<Vec<f32>>, segment_len: usize, seed: u64) -> Result<Self> {
        let clips: Vec<_> = clips.into_iter().filter(|c| !c.is_empty()).collect();
        if clips.is_empty() {
            return Err(Error::EmptyDataset("no non-empty clips".into()));
        }
        if segment_len == 0 {
            return Err(Error::InvalidArgument("segment length must be positive".into()));
        }
        Ok(Self {
            clips,
            segment_len,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed ^ DATA_SEED_OFFSET),
        })
    }

    pub fn clip_count(&self) -> usize {
        self.clips.len()
    }

    pub fn clip_len(&self, i: usize) -> usize {
        self.clips[i].len()
    }

    pub fn segment_len(&self) -> usize {
        self.segment_len
    }

    pub fn draw(&mut self) -> SegmentDraw {
        let clip = self.rng.random_range(0..self.clips.len());
        let slack = self.clips[clip].len().saturating_sub(self.segment_len);
        let offset = self.rng.random_range(0..=slack);
        SegmentDraw { clip, offset }
    }

    /// Samples of a draw, zero-padded when the clip is shorter than a segment.
    pub fn segment(&self, d: SegmentDraw) -> Vec<f32> {
        let clip = &self.clips[d.clip];
        let end = (d.offset + self.segment_len).min(clip.len());
        let mut s = clip[d.offset..end].to_vec();
        s.resize(self.segment_len, 0.0);
        s
    }

    pub fn next_batch(&mut self, batch: usize) -> Tensor<f32> {
        let mut data = Vec::with_capacity(batch * self.segment_len);
        for _ in 0..batch {
            let d = self.draw();
            data.extend(self.segment(d));
        }
        Tensor::from_vec(&[batch, 1, self.segment_len], data).expect("batch shape")
    }

    fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    fn set_position(&mut self, seed: u64, pos: u128) {
        self.seed = seed;
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ DATA_SEED_OFFSET);
        self.rng.set_word_pos(pos);
    }
}

/// Loads every `.wav` file in `dir` (sorted by name), resampling to the
/// canonical rate. Unreadable files are skipped with a warning.
pub fn ingest_dataset(dir: &Path, segment_len: usize, seed: u64) -> Result<SegmentSampler> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset(format!("no WAV files in {}", dir.display())));
    }
    let mut clips = Vec::new();
    for p in &paths {
        match audio::load_wav::<f32>(p).and_then(|w| {
            if w.sample_rate() == CANONICAL_RATE {
                Ok(w)
            } else {
                audio::resample(&w, CANONICAL_RATE)
            }
        }) {
            Ok(w) => clips.push(w.into_samples()),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if clips.is_empty() {
        return Err(Error::EmptyDataset(format!("no readable WAV files in {}", dir.display())));
    }
    SegmentSampler::from_clips(clips, segment_len, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainingState {
    seed: u64,
    sampler_word_pos: String,
    adam_g_step: u64,
    adam_d_step: u64,
    #[serde(default)]
    diverging: bool,
}

/// Outcome of [`Trainer::fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub metrics: Vec<TrainMetrics>,
    /// Steps at which the divergence detector fired.
    pub divergence_warnings: Vec<u64>,
    pub last_checkpoint: Option<PathBuf>,
}

pub struct Trainer {
    config: TrainConfig,
    model: Autoencoder<f32>,
    disc: MultiScaleDiscriminator<f32>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    sampler: SegmentSampler,
    step: u64,
    history: Vec<TrainMetrics>,
    monitor: bool,
    diverging: bool,
}

fn all_finite(grads: &[(String, Tensor<f32>)]) -> bool {
    grads.iter().all(|(_, g)| g.all_finite())
}

fn optimizer_arrays(prefix: &str, opt: &Adam<f32>, out: &mut ParamStore<f32>) {
    for (name, t) in opt.m.iter() {
        out.insert(&format!("{prefix}m.{name}"), t.clone());
    }
    for (name, t) in opt.v.iter() {
        out.insert(&format!("{prefix}v.{name}"), t.clone());
    }
}

fn restore_optimizer(ckpt: &Checkpoint, prefix: &str, step: u64, opt: &mut Adam<f32>) {
    opt.m = ckpt.arrays_with_prefix(&format!("{prefix}m."));
    opt.v = ckpt.arrays_with_prefix(&format!("{prefix}v."));
    opt.step = step;
}

impl Trainer {
    pub fn new(config: TrainConfig, sampler: SegmentSampler) -> Result<Self> {
        config.validate()?;
        check_sampler(&config, &sampler)?;
        let model = Autoencoder::new(config.model.clone(), config.seed)?;
        let disc = MultiScaleDiscriminator::new(config.discriminator.clone(), config.seed ^ DISC_SEED_OFFSET)?;
        let mut sampler = sampler;
        sampler.set_position(config.seed, 0);
        Ok(Self {
            opt_g: Adam::new(config.adam(config.lr_generator)),
            opt_d: Adam::new(config.adam(config.lr_discriminator)),
            config,
            model,
            disc,
            sampler,
            step: 0,
            history: Vec::new(),
            monitor: true,
            diverging: false,
        })
    }

    /// Continues from a checkpoint. The model architecture must match the
    /// configuration. With `fresh_discriminator` set, or when the checkpoint
    /// holds no discriminator, the discriminator and its optimizer start over.
    pub fn resume(config: TrainConfig, sampler: SegmentSampler, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config, sampler)?;
        t.model = ckpt.model_for(&t.config.model)?;
        t.step = ckpt.step;
        let state: Option<TrainingState> = match &ckpt.state {
            Some(v) => Some(
                serde_json::from_value(v.clone())
                    .map_err(|e| Error::Checkpoint(format!("bad training state: {e}")))?,
            ),
            None => None,
        };
        if let Some(s) = &state {
            let pos = s
                .sampler_word_pos
                .parse::<u128>()
                .map_err(|e| Error::Checkpoint(format!("bad sampler position: {e}")))?;
            t.sampler.set_position(s.seed, pos);
            restore_optimizer(ckpt, "opt.g.", s.adam_g_step, &mut t.opt_g);
        }
        let disc = if t.config.fresh_discriminator {
            None
        } else {
            ckpt.discriminator_model::<f32>()?
        };
        match disc {
            Some(d) if d.config() == &t.config.discriminator => {
                t.disc = d;
                if let Some(s) = &state {
                    restore_optimizer(ckpt, "opt.d.", s.adam_d_step, &mut t.opt_d);
                }
            }
            Some(_) => {
                return Err(Error::ShapeMismatch(
                    "checkpoint discriminator differs from the configured one".into(),
                ))
            }
            None => {
                t.disc = MultiScaleDiscriminator::new(
                    t.config.discriminator.clone(),
                    t.config.seed ^ DISC_SEED_OFFSET ^ t.step,
                )?;
                t.opt_d = Adam::new(t.config.adam(t.config.lr_discriminator));
            }
        }
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Autoencoder<f32> {
        &self.model
    }

    pub fn discriminator(&self) -> &MultiScaleDiscriminator<f32> {
        &self.disc
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[TrainMetrics] {
        &self.history
    }

    /// Disables the reconstruction monitors; `ar` and `nr` are then reported as 0.
    pub fn set_monitoring(&mut self, on: bool) {
        self.monitor = on;
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_model(&self.model, self.step).with_discriminator(&self.disc);
        optimizer_arrays("opt.g.", &self.opt_g, &mut c.arrays);
        optimizer_arrays("opt.d.", &self.opt_d, &mut c.arrays);
        let state = TrainingState {
            seed: self.sampler.seed,
            sampler_word_pos: self.sampler.position().to_string(),
            adam_g_step: self.opt_g.step,
            adam_d_step: self.opt_d.step,
            diverging: self.diverging,
        };
        c.state = Some(serde_json::to_value(state).expect("plain struct"));
        c
    }

    /// One step on a batch drawn from the sampler.
    pub fn train_step(&mut self) -> Result<TrainMetrics> {
        let batch = self.sampler.next_batch(self.config.batch_size);
        self.train_on(&batch)
    }

    /// One discriminator and one generator update on `x: [B, 1, S]`. On a
    /// non-finite loss or gradient every parameter is left untouched.
    pub fn train_on(&mut self, x: &Tensor<f32>) -> Result<TrainMetrics> {
        let step = self.step + 1;
        let non_finite = |detail: &str| Error::NonFiniteLoss {
            step,
            detail: detail.to_string(),
        };
        let mut g = Graph::new();
        g.load(self.model.params(), true);
        let xv = g.constant(x.clone());
        let z = self.model.encode_ops(&mut g, &xv);
        let xh = self.model.decode_ops(&mut g, &z);
        let fake = g.get(xh).clone();

        let (ar, nr) = if self.monitor {
            let mut e = Eager::new(self.model.params());
            let c = e.constant(fake.clone());
            let z2 = self.model.encode_ops(&mut e, &c);
            (x.mean_abs_diff(&fake) as f64, g.get(z).mean_abs_diff(&z2) as f64)
        } else {
            (0.0, 0.0)
        };

        let (d_loss, d_grads) = {
            let mut gd = Graph::new();
            gd.load(self.disc.params(), true);
            let r = gd.constant(x.clone());
            let f = gd.constant(fake);
            let fr = self.disc.forward_ops(&mut gd, &r);
            let ff = self.disc.forward_ops(&mut gd, &f);
            let mut loss = 0.0f32;
            let mut seeds = Vec::new();
            for (rs, fs) in fr.iter().zip(&ff) {
                let (rl, fl) = (*rs.last().expect("logits"), *fs.last().expect("logits"));
                let (rv, fv) = (gd.get(rl), gd.get(fl));
                loss += adversary::hinge_d_loss(rv.data(), fv.data());
                let (gr, gf) = adversary::hinge_d_grad(rv.data(), fv.data());
                seeds.push((rl, Tensor::from_vec(rv.shape(), gr)?));
                seeds.push((fl, Tensor::from_vec(fv.shape(), gf)?));
            }
            if !loss.is_finite() {
                return Err(non_finite(&format!("discriminator loss {loss}")));
            }
            gd.backward(&seeds);
            (loss, gd.param_grads())
        };
        if !all_finite(&d_grads) {
            return Err(non_finite("discriminator gradient"));
        }
        let saved = (self.disc.params().clone(), self.opt_d.clone());
        self.opt_d.update(self.disc.params_mut(), &d_grads);

        let outcome = self.generator_update(&mut g, xh, x);
        let (g_adv, l_fm, grads) = match outcome {
            Ok(v) if all_finite(&v.2) && (v.0 + self.config.fm_weight as f32 * v.1).is_finite() => v,
            other => {
                *self.disc.params_mut() = saved.0;
                self.opt_d = saved.1;
                return Err(match other {
                    Err(e) => e,
                    Ok((a, f, _)) => non_finite(&format!("generator loss: adversarial {a}, feature matching {f}")),
                });
            }
        };
        self.opt_g.update(self.model.params_mut(), &grads);
        self.step = step;
        let m = TrainMetrics {
            step,
            d_loss: d_loss as f64,
            g_adv: g_adv as f64,
            l_fm: l_fm as f64,
            ar,
            nr,
        };
        self.history.push(m);
        Ok(m)
    }

    fn generator_update(
        &self,
        g: &mut Graph<f32>,
        xh: Var,
        x: &Tensor<f32>,
    ) -> Result<(f32, f32, NamedGrads)> {
        g.load(self.disc.params(), false);
        let feats = self.disc.forward_ops(g, &xh);
        let real = self.disc.discriminate_all(x)?;
        let lambda = self.config.fm_weight as f32;
        let (mut adv, mut fm) = (0.0f32, 0.0f32);
        let mut seeds = Vec::new();
        for (fs, r) in feats.iter().zip(&real) {
            let values: Vec<Tensor<f32>> = fs.iter().map(|v| g.get(*v).clone()).collect();
            let logits = values.last().expect("logits");
            adv += adversary::hinge_g_loss(logits.data());
            seeds.push((
                *fs.last().expect("logits"),
                Tensor::from_vec(logits.shape(), adversary::hinge_g_grad(logits.data()))?,
            ));
            let (l, grads) = adversary::feature_matching(&values, &r.feature_maps)?;
            fm += l;
            for (v, gr) in fs.iter().zip(grads) {
                seeds.push((*v, gr.map(|d| d * lambda)));
            }
        }
        if !(adv.is_finite() && fm.is_finite()) {
            return Ok((adv, fm, Vec::new()));
        }
        g.backward(&seeds);
        Ok((adv, fm, g.param_grads()))
    }

    /// Runs `steps` steps, appending metrics to `run_dir/metrics.jsonl` and
    /// writing `run_dir/step_<N>.tsmn` checkpoints. On a non-finite loss the
    /// last good state is checkpointed before the error is returned.
    pub fn fit(&mut self, run_dir: &Path, steps: u64) -> Result<FitReport> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let metrics_path = run_dir.join("metrics.jsonl");
        let mut metrics_file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;
        let mut report = FitReport {
            metrics: Vec::new(),
            divergence_warnings: Vec::new(),
            last_checkpoint: None,
        };
        let end = self.step + steps;
        while self.step < end {
            let m = match self.train_step() {
                Ok(m) => m,
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    log::error!("{e}; writing last good checkpoint");
                    report.last_checkpoint = Some(self.save_checkpoint(run_dir)?);
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let line = serde_json::to_string(&m)?;
            writeln!(metrics_file, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            report.metrics.push(m);
            let diverging = detect_divergence(&self.history, &self.config.divergence) == Health::Diverging;
            if diverging && !self.diverging {
                log::warn!(
                    "step {}: discriminator loss collapsed while AR and NR rise; training may be diverging",
                    m.step
                );
                report.divergence_warnings.push(m.step);
            }
            self.diverging = diverging;
            let every = self.config.checkpoint_every;
            if (every > 0 && self.step.is_multiple_of(every)) || self.step == end {
                report.last_checkpoint = Some(self.save_checkpoint(run_dir)?);
            }
        }
        metrics_file.flush().map_err(|e| Error::io(&metrics_path, e))?;
        Ok(report)
    }

    fn save_checkpoint(&self, run_dir: &Path) -> Result<PathBuf> {
        let path = run_dir.join(format!("step_{}.tsmn", self.step));
        self.checkpoint().save(&path)?;
        Ok(path)
    }
}

fn check_sampler(config: &TrainConfig, sampler: &SegmentSampler) -> Result<()> {
    if sampler.segment_len() != config.segment_len {
        return Err(Error::InvalidArgument(format!(
            "sampler yields {}-sample segments, configuration expects {}",
            sampler.segment_len(),
            config.segment_len
        )));
    }
    Ok(())
}
