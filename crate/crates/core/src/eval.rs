//! Objective evaluation and timing harness.
//!
//! Every stretched output is scored by duration error, dominant-frequency
//! error against its input and, at unit speed, reconstruction SNR. Reports
//! serialize to a per-row CSV, a JSON aggregate and gnuplot data files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, resample, Waveform, CANONICAL_RATE};
use crate::classical::target_len;
use crate::dsp::{hann, RealFft};
use crate::engine::{ChunkPolicy, Method};
use crate::error::{Error, Result};
use crate::model::Autoencoder;
use crate::scalar::Scalar;

pub const PITCH_FFT_LEN: usize = 8192;
/// Peak amplitude below which a signal counts as silent (-60 dBFS).
pub const SILENCE_THRESHOLD: f64 = 1e-3;
/// Timed repetitions per benchmark row never drop below this.
pub const MIN_REPETITIONS: usize = 5;

/// Worker threads for evaluation: `TSM_NUM_THREADS` if set, otherwise the
/// available parallelism.
pub fn worker_count() -> usize {
    std::env::var("TSM_NUM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Dominant frequency in Hz of the central `PITCH_FFT_LEN` samples: Hann
/// window, zero padding for short input, parabolic interpolation of the log
/// magnitude around the strongest non-DC bin.
pub fn dominant_frequency<T: Scalar>(w: &Waveform<T>) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::EmptyAudio);
    }
    let n = PITCH_FFT_LEN;
    let take = w.len().min(n);
    let start = (w.len() - take) / 2;
    let seg = &w.samples()[start..start + take];
    if seg.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs())) < SILENCE_THRESHOLD {
        return Err(Error::Silent);
    }
    let win: Vec<f64> = hann(take);
    let mut frame = vec![0.0f64; n];
    for (i, (s, h)) in seg.iter().zip(&win).enumerate() {
        frame[i] = s.as_f64() * h;
    }
    let mags = RealFft::new(n)?.forward(&frame).magnitudes();
    let k = (1..mags.len())
        .max_by(|&a, &b| mags[a].total_cmp(&mags[b]))
        .expect("non-empty spectrum");
    let mut bin = k as f64;
    if k + 1 < mags.len() {
        let ln = |v: f64| v.max(1e-300).ln();
        let (a, b, c) = (ln(mags[k - 1]), ln(mags[k]), ln(mags[k + 1]));
        let den = a - 2.0 * b + c;
        if den < 0.0 {
            bin += 0.5 * (a - c) / den;
        }
    }
    Ok(bin * w.sample_rate() as f64 / n as f64)
}

/// `|f_test - f_ref| / f_ref · 100`.
pub fn pitch_error<T: Scalar>(reference: &Waveform<T>, test: &Waveform<T>) -> Result<f64> {
    let fr = dominant_frequency(reference)?;
    let ft = dominant_frequency(test)?;
    Ok((ft - fr).abs() / fr * 100.0)
}

/// `|len_out - round(len_in / r)| / (len_in / r) · 100`.
pub fn duration_error_pct(len_in: usize, len_out: usize, r: f64) -> f64 {
    let ideal = len_in as f64 / r;
    (len_out as f64 - target_len(len_in, r) as f64).abs() / ideal * 100.0
}

/// Reconstruction SNR in dB over the common length.
pub fn snr_db<T: Scalar>(reference: &[T], test: &[T]) -> f64 {
    let n = reference.len().min(test.len());
    let (mut sig, mut err) = (0.0f64, 0.0f64);
    for (a, b) in reference[..n].iter().zip(&test[..n]) {
        let a = a.as_f64();
        sig += a * a;
        err += (a - b.as_f64()).powi(2);
    }
    10.0 * (sig / err.max(1e-300)).log10()
}

pub fn ms_per_audio_sec(elapsed: Duration, samples: usize, sample_rate: u32) -> f64 {
    let secs = samples as f64 / sample_rate as f64;
    (elapsed.as_secs_f64() * 1e3 / secs).max(1e-9)
}

/// One evaluation clip. `tonal` marks clips with a meaningful dominant
/// frequency; pitch error is only reported for those.
#[derive(Debug, Clone)]
pub struct CorpusItem<T> {
    pub name: String,
    pub audio: Waveform<T>,
    pub tonal: bool,
}

fn tone<T: Scalar>(freqs: &[f64], amp: f64, len: usize, rate: u32) -> Waveform<T> {
    let tau = 2.0 * std::f64::consts::PI;
    let s = (0..len)
        .map(|n| {
            let t = n as f64 / rate as f64;
            T::lit(freqs.iter().map(|f| amp * (tau * f * t).sin()).sum())
        })
        .collect();
    Waveform::new(s, rate).expect("non-empty")
}

/// Pure tones at 110, 440 and 1760 Hz.
pub fn tone_corpus<T: Scalar>(secs: f64, rate: u32) -> Vec<CorpusItem<T>> {
    let len = (secs * rate as f64).round() as usize;
    [110.0, 440.0, 1760.0]
        .iter()
        .map(|&f| CorpusItem {
            name: format!("tone-{f}"),
            audio: tone(&[f], 0.5, len, rate),
            tonal: true,
        })
        .collect()
}

/// Pure tones, a 440+660 Hz two-tone, a 110 to 1760 Hz exponential chirp and
/// gated noise bursts.
pub fn synthetic_corpus<T: Scalar>(secs: f64, rate: u32, seed: u64) -> Vec<CorpusItem<T>> {
    let len = (secs * rate as f64).round() as usize;
    let mut items = tone_corpus(secs, rate);
    items.push(CorpusItem {
        name: "two-tone".into(),
        audio: tone(&[440.0, 660.0], 0.3, len, rate),
        tonal: true,
    });
    let (f0, f1) = (110.0f64, 1760.0f64);
    let k = (f1 / f0).ln() / secs;
    let chirp = (0..len)
        .map(|n| {
            let t = n as f64 / rate as f64;
            T::lit(0.5 * (2.0 * std::f64::consts::PI * f0 * ((k * t).exp() - 1.0) / k).sin())
        })
        .collect();
    items.push(CorpusItem {
        name: "chirp".into(),
        audio: Waveform::new(chirp, rate).expect("non-empty"),
        tonal: false,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let burst = rate as usize / 10;
    let noise = (0..len)
        .map(|n| {
            let gate = if (n / burst).is_multiple_of(2) { 0.3 } else { 0.0 };
            T::lit(gate * rng.random_range(-1.0..1.0))
        })
        .collect();
    items.push(CorpusItem {
        name: "noise-bursts".into(),
        audio: Waveform::new(noise, rate).expect("non-empty"),
        tonal: false,
    });
    items
}

/// Every `.wav` file in `dir`, sorted by name and resampled to the canonical
/// rate.
pub fn load_corpus_dir<T: Scalar>(dir: &Path) -> Result<Vec<CorpusItem<T>>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let audio = resample(&load_wav::<T>(&p)?, CANONICAL_RATE)?;
            Ok(CorpusItem {
                name: p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                audio,
                tonal: true,
            })
        })
        .collect()
}

/// A method under evaluation, with its model for the neural variant.
#[derive(Debug, Clone)]
pub struct Candidate<'a, T: Scalar> {
    pub label: String,
    pub method: Method,
    pub model: Option<&'a Autoencoder<T>>,
}

impl<'a, T: Scalar> Candidate<'a, T> {
    pub fn classical(method: Method) -> Self {
        Self {
            label: method.name().into(),
            method,
            model: None,
        }
    }

    /// Labelled `tsmnet-<CR>`.
    pub fn neural(model: &'a Autoencoder<T>) -> Self {
        Self {
            label: format!("tsmnet-{}", model.compression_ratio()),
            method: Method::Neural,
            model: Some(model),
        }
    }

    fn run(&self, x: &Waveform<T>, r: f64, policy: &ChunkPolicy) -> Result<Waveform<T>> {
        self.method.apply(x, r, self.model, policy)
    }
}

/// One CSV row. Column order is fixed:
/// `method,sample,speed,duration_error_pct,pitch_error_pct,snr_db,ms_per_audio_sec`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub sample: String,
    pub speed: f64,
    pub duration_error_pct: f64,
    /// Empty for non-tonal or silent material.
    pub pitch_error_pct: Option<f64>,
    /// Only at unit speed.
    pub snr_db: Option<f64>,
    pub ms_per_audio_sec: f64,
}

pub const CSV_COLUMNS: [&str; 7] = [
    "method",
    "sample",
    "speed",
    "duration_error_pct",
    "pitch_error_pct",
    "snr_db",
    "ms_per_audio_sec",
];

/// Means per method and speed over the rows that carry each value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub speed: f64,
    pub rows: usize,
    pub mean_duration_error_pct: f64,
    pub mean_pitch_error_pct: Option<f64>,
    pub mean_snr_db: Option<f64>,
    pub mean_ms_per_audio_sec: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut groups: BTreeMap<(String, u64), Vec<&EvalRow>> = BTreeMap::new();
        for row in &self.rows {
            groups
                .entry((row.method.clone(), (row.speed * 1e6).round() as u64))
                .or_default()
                .push(row);
        }
        groups
            .into_values()
            .map(|rows| AggregateRow {
                method: rows[0].method.clone(),
                speed: rows[0].speed,
                rows: rows.len(),
                mean_duration_error_pct: mean(rows.iter().map(|r| r.duration_error_pct)).unwrap_or(0.0),
                mean_pitch_error_pct: mean(rows.iter().filter_map(|r| r.pitch_error_pct)),
                mean_snr_db: mean(rows.iter().filter_map(|r| r.snr_db)),
                mean_ms_per_audio_sec: mean(rows.iter().map(|r| r.ms_per_audio_sec)).unwrap_or(0.0),
            })
            .collect()
    }

    /// Rows of one method.
    pub fn method_rows<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a EvalRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method)
    }

    /// Mean ms per audio second of one method.
    pub fn mean_ms(&self, method: &str) -> Option<f64> {
        mean(self.method_rows(method).map(|r| r.ms_per_audio_sec))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        if self.rows.is_empty() {
            w.write_record(CSV_COLUMNS)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.aggregate())?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// One `<method>.dat` file per method in `dir`: speed against mean pitch
    /// error, whitespace separated.
    pub fn write_gnuplot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files: BTreeMap<String, String> = BTreeMap::new();
        for agg in self.aggregate() {
            let text = files
                .entry(agg.method.clone())
                .or_insert_with(|| "# speed mean_pitch_error_pct\n".into());
            let pe = agg.mean_pitch_error_pct.map_or("NaN".into(), |v| format!("{v:.6}"));
            text.push_str(&format!("{:.2} {pe}\n", agg.speed));
        }
        for (method, text) in files {
            let path = dir.join(format!("{method}.dat"));
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn score<T: Scalar>(label: &str, item: &CorpusItem<T>, r: f64, out: &Waveform<T>, ms: f64) -> EvalRow {
    let pitch = if item.tonal {
        pitch_error(&item.audio, out).ok()
    } else {
        None
    };
    EvalRow {
        method: label.into(),
        sample: item.name.clone(),
        speed: r,
        duration_error_pct: duration_error_pct(item.audio.len(), out.len(), r),
        pitch_error_pct: pitch,
        snr_db: (r == 1.0).then(|| snr_db(item.audio.samples(), out.samples())),
        ms_per_audio_sec: ms,
    }
}

struct Job<'c, 'a, T: Scalar> {
    candidate: &'c Candidate<'a, T>,
    item: &'c CorpusItem<T>,
    speed: f64,
}

fn jobs<'c, 'a, T: Scalar>(
    candidates: &'c [Candidate<'a, T>],
    corpus: &'c [CorpusItem<T>],
    speeds: &[f64],
) -> Vec<Job<'c, 'a, T>> {
    let mut out = Vec::new();
    for candidate in candidates {
        for item in corpus {
            for &speed in speeds {
                out.push(Job { candidate, item, speed });
            }
        }
    }
    out
}

fn run_once<T: Scalar>(job: &Job<'_, '_, T>, policy: &ChunkPolicy) -> Result<(Waveform<T>, f64)> {
    let t0 = Instant::now();
    let out = job.candidate.run(&job.item.audio, job.speed, policy)?;
    let ms = ms_per_audio_sec(t0.elapsed(), job.item.audio.len(), job.item.audio.sample_rate());
    Ok((out, ms))
}

/// Scores every candidate on every clip at every speed. Rows are computed in
/// parallel on [`worker_count`] threads; their order is fixed.
pub fn evaluate<T: Scalar>(
    candidates: &[Candidate<'_, T>],
    corpus: &[CorpusItem<T>],
    speeds: &[f64],
    policy: &ChunkPolicy,
) -> Result<EvalReport> {
    let jobs = jobs(candidates, corpus, speeds);
    let workers = worker_count().min(jobs.len()).max(1);
    let mut slots: Vec<Option<Result<EvalRow>>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let jobs = &jobs;
                s.spawn(move || {
                    (w..jobs.len())
                        .step_by(workers)
                        .map(|i| {
                            let job = &jobs[i];
                            let row = run_once(job, policy)
                                .map(|(out, ms)| score(&job.candidate.label, job.item, job.speed, &out, ms));
                            (i, row)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, row) in h.join().expect("evaluation worker panicked") {
                slots[i] = Some(row);
            }
        }
    });
    let rows = slots.into_iter().map(|r| r.expect("every job ran")).collect::<Result<_>>()?;
    Ok(EvalReport { rows })
}

/// Like [`evaluate`], but each row's timing is the median of
/// `repetitions` (at least five) runs after one untimed warm-up. Runs on a
/// single thread.
pub fn bench_inference<T: Scalar>(
    candidates: &[Candidate<'_, T>],
    corpus: &[CorpusItem<T>],
    speeds: &[f64],
    repetitions: usize,
    policy: &ChunkPolicy,
) -> Result<EvalReport> {
    let reps = repetitions.max(MIN_REPETITIONS);
    let mut rows = Vec::new();
    for job in jobs(candidates, corpus, speeds) {
        let (out, _) = run_once(&job, policy)?;
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            times.push(run_once(&job, policy)?.1);
        }
        times.sort_by(f64::total_cmp);
        let median = if reps % 2 == 1 {
            times[reps / 2]
        } else {
            0.5 * (times[reps / 2 - 1] + times[reps / 2])
        };
        rows.push(score(&job.candidate.label, job.item, job.speed, &out, median));
    }
    Ok(EvalReport { rows })
}

/// Pitch error of each model on pure tones at 110, 440 and 1760 Hz across
/// `speeds`: one row per model, speed and tone.
pub fn cr_ablation<T: Scalar>(
    models: &[&Autoencoder<T>],
    speeds: &[f64],
    secs: f64,
    policy: &ChunkPolicy,
) -> Result<EvalReport> {
    let candidates: Vec<_> = models.iter().map(|m| Candidate::neural(m)).collect();
    let rate = models.first().map_or(CANONICAL_RATE, |m| m.config().sample_rate);
    evaluate(&candidates, &tone_corpus(secs, rate), speeds, policy)
}
