//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use common::{band_peak, sine, snr_db, SR};
use tsmnet::adversary::{self, DiscriminatorConfig, MultiScaleDiscriminator, FM_WEIGHT};
use tsmnet::audio::{naive_speed_change, Waveform};
use tsmnet::autograd::{Eager, Graph, Ops};
use tsmnet::checkpoint::Checkpoint;
use tsmnet::classical::{pv_stretch, target_len, wsola_stretch, TsmParams};
use tsmnet::dsp::{frame, hann, overlap_add, FrameGrid};
use tsmnet::engine::{speed_grid, stretch, ChunkPolicy};
use tsmnet::eval::{bench_inference, dominant_frequency, duration_error_pct, Candidate, CorpusItem, PITCH_FFT_LEN};
use tsmnet::model::{Autoencoder, ModelConfig};
use tsmnet::nn::ParamStore;
use tsmnet::tensor::Tensor;
use tsmnet::trainer::{SegmentSampler, TrainConfig, Trainer};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run(n: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let elapsed = t0.elapsed();
    let (mut pass, mut detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    if let Some(limit) = limit {
        if elapsed > limit {
            pass = false;
            detail.push_str(&format!("; exceeded {:.0} s budget", limit.as_secs_f64()));
        }
    }
    println!(
        "criterion {n:>2} {name}: {} ({detail}) [{:.2} s]",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    pass
}

fn cola() -> Outcome {
    let n = 1024;
    let w: Vec<f64> = hann(n);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for hop in [n / 2, n / 4] {
        for _ in 0..3 {
            let x: Vec<f64> = (0..SR as usize).map(|_| rng.random_range(-1.0..1.0)).collect();
            let grid = FrameGrid::for_signal(x.len(), n, hop).unwrap();
            let frames: Vec<Vec<f64>> = frame(&x, grid)
                .unwrap()
                .into_iter()
                .map(|f| f.iter().zip(&w).map(|(a, b)| a * b).collect())
                .collect();
            let y = overlap_add(&frames, hop, &w).unwrap();
            let inner = n..x.len() - n;
            let rms = (inner.clone().map(|i| (y[i] - x[i]).powi(2)).sum::<f64>() / inner.len() as f64).sqrt();
            worst = worst.max(rms);
        }
    }
    outcome(worst <= 1e-6, format!("worst RMS {worst:.2e} at 50% and 75% overlap"))
}

fn baseline_pitch() -> Outcome {
    let bin = SR as f64 / PITCH_FFT_LEN as f64;
    let mut worst_pitch: f64 = 0.0;
    let mut worst_dur: f64 = 0.0;
    let mut worst_control_bins: f64 = 0.0;
    for f in [110.0, 440.0, 1760.0] {
        let x = sine::<f32>(&[f], 0.5, SR as usize);
        let f0 = dominant_frequency(&x).unwrap();
        for r in speed_grid() {
            for out in [
                wsola_stretch(x.samples(), &TsmParams::wsola(r)).unwrap(),
                pv_stretch(x.samples(), &TsmParams::pv_locked(r)).unwrap(),
            ] {
                let y = Waveform::new(out, SR).unwrap();
                let fy = dominant_frequency(&y).unwrap();
                worst_pitch = worst_pitch.max((fy - f0).abs() / f0 * 100.0);
                worst_dur = worst_dur.max(duration_error_pct(x.len(), y.len(), r));
            }
            let c = dominant_frequency(&naive_speed_change(&x, r).unwrap()).unwrap();
            worst_control_bins = worst_control_bins.max((c - f0 * r).abs() / bin);
        }
    }
    outcome(
        worst_pitch <= 1.0 && worst_dur <= 2.0 && worst_control_bins <= 1.0,
        format!(
            "worst pitch error {worst_pitch:.3}%, worst duration error {worst_dur:.3}%, resample control off f·r by {worst_control_bins:.3} bins"
        ),
    )
}

fn polyphony() -> Outcome {
    let x = sine::<f32>(&[440.0, 660.0], 0.3, SR as usize);
    let err = |y: &[f32], f: f64, lo: f64, hi: f64| (band_peak(y, lo, hi) - f).abs() / f * 100.0;
    let pv = pv_stretch(x.samples(), &TsmParams::pv_locked(1.5)).unwrap();
    let ws = wsola_stretch(x.samples(), &TsmParams::wsola(1.5)).unwrap();
    let (pv_a, pv_b) = (err(&pv, 440.0, 350.0, 550.0), err(&pv, 660.0, 550.0, 770.0));
    let (ws_a, ws_b) = (err(&ws, 440.0, 350.0, 550.0), err(&ws, 660.0, 550.0, 770.0));
    outcome(
        pv_a <= 1.0 && pv_b <= 1.0,
        format!("PV 440/660 errors {pv_a:.3}%/{pv_b:.3}%; WSOLA {ws_a:.3}%/{ws_b:.3}%"),
    )
}

fn shape_contract() -> Outcome {
    let mut checked = 0;
    for cr in [256, 512, 1024] {
        let model = Autoencoder::<f32>::new(ModelConfig::preset(cr).unwrap().with_channels(4, 16, 8), cr as u64).unwrap();
        for len in [1024usize, 16384, 22050, 220500] {
            let x = Waveform::new(vec![0.25f32; len], SR).unwrap();
            let g = model.encode(&x).unwrap();
            let y = model.decode(&g).unwrap();
            if g.frames() != len.div_ceil(cr) || y.len() != g.frames() * cr || y.samples().iter().any(|v| !v.is_finite()) {
                return outcome(false, format!("CR={cr} L={len}: {} frames, {} samples", g.frames(), y.len()));
            }
            checked += 1;
        }
    }
    outcome(true, format!("{checked} length/CR pairs"))
}

fn perturb_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, 0.1).unwrap();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).filter(|n| n.ends_with(".b")).collect();
    for name in names {
        for v in store.get_mut(&name).unwrap().data_mut() {
            *v += normal.sample(rng);
        }
    }
}

fn generator_objective(model: &Autoencoder<f64>, disc: &MultiScaleDiscriminator<f64>, x: &Tensor<f64>) -> f64 {
    let mut e = Eager::new(model.params());
    let xv = e.constant(x.clone());
    let z = model.encode_ops(&mut e, &xv);
    let xh = model.decode_ops(&mut e, &z).into_owned();
    let fake = disc.discriminate_all(&xh).unwrap();
    let real = disc.discriminate_all(x).unwrap();
    let (adv, fm) = adversary::generator_loss(&fake, &real).unwrap();
    adv + FM_WEIGHT * fm
}

fn compare(analytic: &[(String, Tensor<f64>)], store: &ParamStore<f64>, loss: impl Fn(&ParamStore<f64>) -> f64) -> (usize, usize) {
    let h = 1e-6;
    let (mut ok, mut total) = (0, 0);
    let mut probe = store.clone();
    for (name, grad) in analytic {
        for i in 0..grad.len() {
            let orig = probe.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = loss(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = loss(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            ok += usize::from(rel <= 1e-3);
            total += 1;
        }
    }
    (ok, total)
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = ModelConfig {
        stride_schedule: vec![2, 2],
        base_channels: 4,
        max_channels: 4,
        ngram_channels: 4,
        ..ModelConfig::default()
    };
    let mut model = Autoencoder::<f64>::new(cfg.clone(), 3).unwrap();
    perturb_biases(model.params_mut(), &mut rng);
    let dcfg = DiscriminatorConfig {
        channels: vec![4; 5],
        groups: 2,
        ..DiscriminatorConfig::default()
    };
    let mut disc = MultiScaleDiscriminator::<f64>::new(dcfg.clone(), 5).unwrap();
    perturb_biases(disc.params_mut(), &mut rng);
    let len = 256;
    let x: Vec<f64> = (0..len)
        .map(|n| 0.3 + 0.4 * (2.0 * std::f64::consts::PI * 5.0 * n as f64 / len as f64).sin() + rng.random_range(-0.1..0.1))
        .collect();
    let x = Tensor::from_vec(&[1, 1, len], x).unwrap();

    let mut g = Graph::new();
    g.load(model.params(), true);
    let xv = g.constant(x.clone());
    let z = model.encode_ops(&mut g, &xv);
    let xh = model.decode_ops(&mut g, &z);
    let fake = g.get(xh).clone();
    g.load(disc.params(), false);
    let feats = disc.forward_ops(&mut g, &xh);
    let real = disc.discriminate_all(&x).unwrap();
    let mut seeds = Vec::new();
    for (fs, r) in feats.iter().zip(&real) {
        let values: Vec<Tensor<f64>> = fs.iter().map(|v| g.get(*v).clone()).collect();
        let logits = values.last().unwrap();
        seeds.push((*fs.last().unwrap(), Tensor::from_vec(logits.shape(), adversary::hinge_g_grad(logits.data())).unwrap()));
        let (_, grads) = adversary::feature_matching(&values, &r.feature_maps).unwrap();
        for (v, gr) in fs.iter().zip(grads) {
            seeds.push((*v, gr.map(|d| d * FM_WEIGHT)));
        }
    }
    g.backward(&seeds);
    let g_grads = g.param_grads();
    let (g_ok, g_total) = compare(&g_grads, model.params(), |p| {
        let m = Autoencoder::from_params(cfg.clone(), p.clone()).unwrap();
        generator_objective(&m, &disc, &x)
    });

    let mut gd = Graph::new();
    gd.load(disc.params(), true);
    let rv = gd.constant(x.clone());
    let fv = gd.constant(fake.clone());
    let fr = disc.forward_ops(&mut gd, &rv);
    let ff = disc.forward_ops(&mut gd, &fv);
    let mut seeds = Vec::new();
    for (rs, fs) in fr.iter().zip(&ff) {
        let (rl, fl) = (*rs.last().unwrap(), *fs.last().unwrap());
        let (gr, gf) = adversary::hinge_d_grad(gd.get(rl).data(), gd.get(fl).data());
        seeds.push((rl, Tensor::from_vec(gd.get(rl).shape(), gr).unwrap()));
        seeds.push((fl, Tensor::from_vec(gd.get(fl).shape(), gf).unwrap()));
    }
    gd.backward(&seeds);
    let d_grads = gd.param_grads();
    let (d_ok, d_total) = compare(&d_grads, disc.params(), |p| {
        let d = MultiScaleDiscriminator::from_params(dcfg.clone(), p.clone()).unwrap();
        let real = d.discriminate_all(&x).unwrap();
        let fk = d.discriminate_all(&fake).unwrap();
        adversary::discriminator_loss(&real, &fk)
    });
    let (ok, total) = (g_ok + d_ok, g_total + d_total);
    let frac = ok as f64 / total as f64;
    outcome(
        frac >= 0.95,
        format!("{ok}/{total} parameters within 1e-3 ({:.2}%); generator {g_ok}/{g_total}, discriminator {d_ok}/{d_total}", 100.0 * frac),
    )
}

fn loss_identities() -> Outcome {
    let a = vec![Tensor::from_vec(&[1, 1, 2], vec![1.0f64, 2.0]).unwrap()];
    let b = vec![Tensor::from_vec(&[1, 1, 2], vec![2.0f64, 4.0]).unwrap()];
    let self_fm = adversary::feature_matching(&a, &a).unwrap().0;
    let fm = adversary::feature_matching(&a, &b).unwrap().0;
    let real = adversary::hinge_d_loss(&[0.3f64], &[-5.0]);
    let fake = adversary::hinge_d_loss(&[5.0f64], &[-2.0]);
    let mixed = adversary::hinge_d_loss(&[0.3f64, 2.0], &[-2.0, 0.5]);
    let g_adv = adversary::hinge_g_loss(&[0.0f64; 4]);
    let disc = MultiScaleDiscriminator::<f64>::new(DiscriminatorConfig::default().with_channels(vec![4, 8, 8, 16, 16]), 2).unwrap();
    let x = Tensor::from_vec(&[1, 1, 1024], (0..1024).map(|n| (n as f64 * 0.05).sin() * 0.5).collect()).unwrap();
    let outs = disc.discriminate_all(&x).unwrap();
    let (_, perfect_fm) = adversary::generator_loss(&outs, &outs).unwrap();
    let checks = [
        ("L_FM(a,a)", self_fm, 0.0),
        ("L_FM([1,2],[2,4])", fm, 1.5),
        ("real 0.3", real, 0.7),
        ("fake -2", fake, 0.0),
        ("mixed", mixed, (0.7 + 0.0) / 2.0 + (0.0 + 1.5) / 2.0),
        ("L_G_adv(0)", g_adv, 0.0),
        ("generator loss at perfect reconstruction", g_adv + FM_WEIGHT * perfect_fm, 0.0),
    ];
    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > 1e-12)
        .map(|(n, got, want)| format!("{n}: {got} != {want}"))
        .collect();
    outcome(bad.is_empty(), if bad.is_empty() { format!("{} identities", checks.len()) } else { bad.join("; ") })
}

/// Toy overfit configuration: CR=1024 with reduced widths, one 440 Hz clip.
fn toy_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig::preset(1024).unwrap().with_channels(4, 32, 8),
        discriminator: DiscriminatorConfig::default().with_channels(vec![4, 8, 16, 32, 32]),
        segment_len: 21_504,
        batch_size: 1,
        steps: 2000,
        lr_generator: 1e-4,
        lr_discriminator: 1e-5,
        seed: 1,
        ..TrainConfig::default()
    }
}

const TOY_SAMPLER_SEED: u64 = 7;

fn toy_overfit(slot: &mut Option<Autoencoder<f32>>) -> Outcome {
    let clip = sine::<f32>(&[440.0], 0.5, SR as usize);
    let cfg = toy_config();
    let sampler = SegmentSampler::from_clips(vec![clip.samples().to_vec()], cfg.segment_len, TOY_SAMPLER_SEED).unwrap();
    let steps = cfg.steps;
    let mut trainer = Trainer::new(cfg, sampler).unwrap();
    for _ in 0..steps {
        trainer.train_step().unwrap();
    }
    let first_ar = trainer.history()[0].ar;
    let y = trainer.model().reconstruct(&clip).unwrap();
    let final_ar = clip.samples().iter().zip(y.samples()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / clip.len() as f64;
    let snr = snr_db(clip.samples(), y.samples());
    let ratio = first_ar / final_ar;
    *slot = Some(trainer.model().clone());
    outcome(
        ratio >= 10.0 && snr >= 15.0,
        format!("AR {first_ar:.4} -> {final_ar:.4} ({ratio:.1}x), SNR {snr:.2} dB after {steps} steps"),
    )
}

fn stretch_behaviour(model: Option<&Autoencoder<f32>>) -> Outcome {
    let Some(model) = model else {
        return outcome(false, "no toy model (criterion 7 did not complete)");
    };
    let x = sine::<f32>(&[440.0], 0.5, SR as usize);
    let mut parts = Vec::new();
    let mut pass = true;
    for r in [0.5, 2.0] {
        let y = stretch(&x, r, model, &ChunkPolicy::default()).unwrap();
        let f = band_peak(y.samples(), 20.0, 5000.0);
        let pitch = (f - 440.0).abs() / 440.0 * 100.0;
        let ideal = x.len() as f64 / r;
        let dur = (y.len() as f64 - ideal).abs() / ideal * 100.0;
        let c = naive_speed_change(&x, r).unwrap();
        let fc = band_peak(c.samples(), 20.0, 5000.0);
        let control = (fc - 440.0).abs() / 440.0 * 100.0;
        pass &= pitch <= 3.0 && dur <= 1.0 && control > 3.0 && y.len() == target_len(x.len(), r);
        parts.push(format!("r={r}: peak {f:.1} Hz ({pitch:.2}%), duration error {dur:.3}%, resample peak {fc:.1} Hz"));
    }
    outcome(pass, parts.join("; "))
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig::preset(256).unwrap().with_channels(2, 4, 2),
        discriminator: DiscriminatorConfig {
            channels: vec![2; 5],
            groups: 1,
            ..DiscriminatorConfig::default()
        },
        segment_len: 2048,
        batch_size: 2,
        seed: 42,
        checkpoint_every: 1000,
        ..TrainConfig::default()
    }
}

fn tiny_sampler(cfg: &TrainConfig) -> SegmentSampler {
    let clips = vec![
        sine::<f32>(&[330.0], 0.4, 8000).into_samples(),
        sine::<f32>(&[550.0, 1200.0], 0.2, 6000).into_samples(),
    ];
    SegmentSampler::from_clips(clips, cfg.segment_len, cfg.seed).unwrap()
}

fn bits_equal(a: &ParamStore<f32>, b: &ParamStore<f32>) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((na, ta), (nb, tb))| {
            na == nb && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config();
    let run = |name: &str, steps: u64| {
        let mut t = Trainer::new(cfg.clone(), tiny_sampler(&cfg)).unwrap();
        t.fit(&dir.path().join(name), steps).unwrap();
        t
    };
    let a = run("a", 100);
    let b = run("b", 100);
    let ma = std::fs::read(dir.path().join("a/metrics.jsonl")).unwrap();
    let mb = std::fs::read(dir.path().join("b/metrics.jsonl")).unwrap();
    let same_metrics = ma == mb && !ma.is_empty() && bits_equal(a.model().params(), b.model().params());

    let ckpt = a.checkpoint();
    let path = dir.path().join("round.tsmn");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let round_trip = back == ckpt && bits_equal(&back.arrays, &ckpt.arrays);

    let mut half = run("c", 50);
    let saved = dir.path().join("half.tsmn");
    half.checkpoint().save(&saved).unwrap();
    drop(half);
    half = Trainer::resume(cfg.clone(), tiny_sampler(&cfg), &Checkpoint::load(&saved).unwrap()).unwrap();
    half.fit(&dir.path().join("c"), 50).unwrap();
    let resumed = half.step() == 100
        && bits_equal(half.model().params(), a.model().params())
        && bits_equal(half.discriminator().params(), a.discriminator().params());
    let mc = std::fs::read(dir.path().join("c/metrics.jsonl")).unwrap();
    let resumed_metrics = mc == ma;
    outcome(
        same_metrics && round_trip && resumed && resumed_metrics,
        format!(
            "identical metrics.jsonl: {same_metrics}; bit-exact checkpoint round trip: {round_trip}; 50+50 parameters equal 100: {resumed}; resumed metrics equal: {resumed_metrics}"
        ),
    )
}

fn timing_sanity() -> Outcome {
    let models: Vec<Autoencoder<f32>> = [256, 512, 1024]
        .iter()
        .map(|&cr| Autoencoder::new(ModelConfig::preset(cr).unwrap(), 1).unwrap())
        .collect();
    let candidates: Vec<Candidate<f32>> = models.iter().map(Candidate::neural).collect();
    let corpus = vec![CorpusItem {
        name: "tone-440".into(),
        audio: sine::<f32>(&[440.0], 0.5, 2 * SR as usize),
        tonal: true,
    }];
    let report = bench_inference(&candidates, &corpus, &[1.0], 5, &ChunkPolicy::default()).unwrap();
    let ms: Vec<f64> = ["tsmnet-256", "tsmnet-512", "tsmnet-1024"]
        .iter()
        .map(|m| report.mean_ms(m).unwrap())
        .collect();
    let units = report.rows.iter().all(|r| r.ms_per_audio_sec > 0.0 && r.ms_per_audio_sec.is_finite());
    outcome(
        units && ms[0] <= ms[1] && ms[1] <= ms[2],
        format!("ms per audio second: 256x {:.2}, 512x {:.2}, 1024x {:.2}", ms[0], ms[1], ms[2]),
    )
}

fn main() {
    let filter: Vec<usize> = std::env::var("TSM_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
        .unwrap_or_default();
    let wanted = |n: usize| filter.is_empty() || filter.contains(&n);
    let secs = Duration::from_secs;
    let mut all = true;
    let mut toy: Option<Autoencoder<f32>> = None;
    if wanted(1) {
        all &= run(1, "COLA identity", Some(secs(1)), cola);
    }
    if wanted(2) {
        all &= run(2, "baseline pitch preservation", Some(secs(30)), baseline_pitch);
    }
    if wanted(3) {
        all &= run(3, "polyphony contrast", Some(secs(10)), polyphony);
    }
    if wanted(4) {
        all &= run(4, "shape contract", Some(secs(30)), shape_contract);
    }
    if wanted(5) {
        all &= run(5, "gradient check", Some(secs(120)), gradient_check);
    }
    if wanted(6) {
        all &= run(6, "loss identities", Some(secs(1)), loss_identities);
    }
    if wanted(7) || wanted(8) {
        all &= run(7, "toy overfit", Some(secs(1800)), || toy_overfit(&mut toy));
    }
    if wanted(8) {
        all &= run(8, "end-to-end stretch behaviour", Some(secs(60)), || stretch_behaviour(toy.as_ref()));
    }
    if wanted(9) {
        all &= run(9, "determinism and persistence", None, determinism);
    }
    if wanted(10) {
        all &= run(10, "timing harness sanity", None, timing_sanity);
    }
    if !all {
        std::process::exit(1);
    }
}
