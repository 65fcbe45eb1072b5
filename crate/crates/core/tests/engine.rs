mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{sine, SR};
use tsmnet::audio::Waveform;
use tsmnet::classical::target_len;
use tsmnet::engine::{resize_neuralgram, scale_neuralgram, stretch, stretched_frames, ChunkPolicy, Method};
use tsmnet::model::{Autoencoder, ModelConfig, Neuralgram};

/// Sum of a few random low-frequency sinusoids per channel, well below the
/// latent Nyquist rate.
fn band_limited(channels: usize, frames: usize, seed: u64) -> Neuralgram<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(channels * frames);
    for _ in 0..channels {
        let parts: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| (rng.random_range(0.2..0.8), rng.random_range(0.0..0.1), rng.random_range(0.0..6.3)))
            .collect();
        data.extend((0..frames).map(|t| {
            parts
                .iter()
                .map(|(a, f, p)| a * (2.0 * std::f64::consts::PI * f * t as f64 + p).sin())
                .sum::<f64>()
        }));
    }
    Neuralgram::new(channels, data, 1024).unwrap()
}

fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

#[test]
fn round_trip_error_is_locked() {
    let g = band_limited(8, 64, 5);
    // measured: 3.76e-4, 1.20e-2, 8.55e-4
    for (r, limit) in [(0.5, 5e-4), (2.0, 1.5e-2), (0.8, 1.1e-3)] {
        let there = scale_neuralgram(&g, r).unwrap();
        let back = resize_neuralgram(&there, g.frames()).unwrap();
        let e = rms(back.data(), g.data());
        assert!(e <= limit, "r={r}: {e:.3e}");
    }
}

fn tiny(cr: usize) -> Autoencoder<f32> {
    Autoencoder::new(ModelConfig::preset(cr).unwrap().with_channels(2, 4, 2), 9).unwrap()
}

#[test]
fn ten_seconds_at_double_speed() {
    let m = tiny(1024);
    let x = Waveform::new(vec![0.1f32; 220_500], SR).unwrap();
    let y = stretch(&x, 2.0, &m, &ChunkPolicy::default()).unwrap();
    assert_eq!(y.len(), 110_250);
}

#[test]
fn long_inputs_are_chunked() {
    let m = tiny(256);
    let x = sine::<f32>(&[330.0], 0.5, 40_000);
    let policy = ChunkPolicy {
        chunk_len: 256 * 24,
        overlap: 4,
    };
    for r in [0.5, 1.0, 1.7] {
        let y = stretch(&x, r, &m, &policy).unwrap();
        assert_eq!(y.len(), target_len(x.len(), r));
        assert!(y.samples().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }
    let bad = ChunkPolicy {
        chunk_len: 256 * 8,
        overlap: 4,
    };
    assert!(stretch(&x, 1.0, &m, &bad).is_err());
}

#[test]
fn chunking_is_a_no_op_below_chunk_len() {
    let m = tiny(512);
    let x = sine::<f32>(&[220.0], 0.5, 30_000);
    let a = stretch(&x, 1.25, &m, &ChunkPolicy::default()).unwrap();
    let b = stretch(&x, 1.25, &m, &ChunkPolicy { chunk_len: 30_000, overlap: 4 }).unwrap();
    let e = a.samples().iter().zip(b.samples()).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>() / a.len() as f64;
    assert!(e.sqrt() < 1e-3);
}

#[test]
fn neural_method_needs_a_model() {
    let x = sine::<f32>(&[220.0], 0.5, 4096);
    assert!(Method::Neural.apply(&x, 1.0, None, &ChunkPolicy::default()).is_err());
    let m = tiny(256);
    assert_eq!(Method::Neural.apply(&x, 2.0, Some(&m), &ChunkPolicy::default()).unwrap().len(), 2048);
}

fn ngram_strategy() -> impl Strategy<Value = Neuralgram<f64>> {
    (1usize..5, 2usize..40).prop_flat_map(|(c, t)| {
        prop::collection::vec(-1.0f64..1.0, c * t).prop_map(move |d| Neuralgram::new(c, d, 256).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unit_speed_is_identity(g in ngram_strategy()) {
        prop_assert_eq!(scale_neuralgram(&g, 1.0).unwrap(), g);
    }

    #[test]
    fn endpoints_and_channels_are_preserved(g in ngram_strategy(), r in 0.25f64..4.0) {
        let s = scale_neuralgram(&g, r).unwrap();
        prop_assert_eq!(s.channels(), g.channels());
        prop_assert_eq!(s.frames(), ((g.frames() as f64 / r + 0.5).floor() as usize).max(2));
        for c in 0..g.channels() {
            let (a, b) = (g.channel(c), s.channel(c));
            prop_assert_eq!(a[0], b[0]);
            prop_assert_eq!(a[a.len() - 1], b[b.len() - 1]);
            prop_assert!(b.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn affine_channels_stay_affine(slope in -2.0f64..2.0, icpt in -1.0f64..1.0, t in 2usize..30, r in 0.25f64..4.0) {
        let g = Neuralgram::new(1, (0..t).map(|i| icpt + slope * i as f64).collect(), 256).unwrap();
        let s = scale_neuralgram(&g, r).unwrap();
        let n = s.frames();
        for (j, v) in s.data().iter().enumerate() {
            let want = icpt + slope * j as f64 * (t - 1) as f64 / (n - 1) as f64;
            prop_assert!((v - want).abs() < 1e-9);
        }
    }

    #[test]
    fn latent_length_covers_target(len in 256usize..100_000, r in 0.25f64..4.0, cr in prop::sample::select(vec![256usize, 512, 1024])) {
        prop_assume!(len >= cr);
        let frames = stretched_frames(len, cr, r);
        prop_assert!(frames * cr >= target_len(len, r));
        prop_assert!(frames >= 2);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn stretch_duration_contract(len in 1024usize..30_000, r in 0.5f64..2.0) {
        let m = tiny(256);
        let x = sine::<f32>(&[440.0], 0.5, len);
        let y = stretch(&x, r, &m, &ChunkPolicy::default()).unwrap();
        let ideal = len as f64 / r;
        prop_assert!((y.len() as f64 - ideal).abs() <= 0.01 * ideal);
        prop_assert!(y.samples().iter().all(|v| v.is_finite()));
    }
}
