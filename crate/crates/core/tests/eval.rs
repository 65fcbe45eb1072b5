mod common;

use proptest::prelude::*;

use common::{sine, SR};
use tsmnet::engine::{speed_grid, ChunkPolicy, Method};
use tsmnet::eval::{
    cr_ablation, dominant_frequency, evaluate, pitch_error, snr_db, synthetic_corpus, tone_corpus, Candidate,
    CSV_COLUMNS,
};
use tsmnet::model::{Autoencoder, ModelConfig};

#[test]
fn ablation_has_one_row_per_model_speed_and_tone() {
    let models: Vec<Autoencoder<f32>> = [256, 512, 1024]
        .iter()
        .map(|&cr| Autoencoder::new(ModelConfig::preset(cr).unwrap().with_channels(2, 4, 2), 2).unwrap())
        .collect();
    let refs: Vec<&Autoencoder<f32>> = models.iter().collect();
    let grid = speed_grid();
    let report = cr_ablation(&refs, &grid, 0.5, &ChunkPolicy::default()).unwrap();
    assert_eq!(report.rows.len(), 3 * grid.len() * 3);
    for cr in [256, 512, 1024] {
        assert_eq!(report.method_rows(&format!("tsmnet-{cr}")).count(), grid.len() * 3);
    }
    assert!(report.rows.iter().all(|r| r.duration_error_pct.is_finite() && r.ms_per_audio_sec > 0.0));
}

#[test]
fn classical_methods_meet_the_duration_bound_on_the_grid() {
    let corpus = synthetic_corpus::<f32>(1.0, SR, 3);
    let c = [Candidate::classical(Method::Wsola), Candidate::classical(Method::Pv)];
    let report = evaluate(&c, &corpus, &speed_grid(), &ChunkPolicy::default()).unwrap();
    assert_eq!(report.rows.len(), 2 * corpus.len() * 20);
    assert!(report.rows.iter().all(|r| r.duration_error_pct <= 2.0));
    let tonal = report.rows.iter().filter(|r| r.sample.starts_with("tone")).filter_map(|r| r.pitch_error_pct);
    assert!(tonal.clone().count() > 0);
    assert!(tonal.into_iter().all(|p| p <= 1.0));
    assert!(report.rows.iter().filter(|r| r.sample == "noise-bursts").all(|r| r.pitch_error_pct.is_none()));
}

#[test]
fn reports_are_deterministic_apart_from_timing() {
    let corpus = tone_corpus::<f32>(0.5, SR);
    let c = [Candidate::classical(Method::Ola)];
    let strip = |mut r: tsmnet::eval::EvalReport| {
        r.rows.iter_mut().for_each(|row| row.ms_per_audio_sec = 0.0);
        r
    };
    let a = strip(evaluate(&c, &corpus, &[0.7, 1.0], &ChunkPolicy::default()).unwrap());
    let b = strip(evaluate(&c, &corpus, &[0.7, 1.0], &ChunkPolicy::default()).unwrap());
    assert_eq!(a, b);
}

#[test]
fn report_files() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tone_corpus::<f32>(0.5, SR);
    let report = evaluate(&[Candidate::classical(Method::Wsola)], &corpus, &[1.0, 1.5], &ChunkPolicy::default()).unwrap();
    report.write_csv(&dir.path().join("r.csv")).unwrap();
    report.write_json(&dir.path().join("r.json")).unwrap();
    report.write_gnuplot(&dir.path().join("plots")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), CSV_COLUMNS.join(","));
    assert_eq!(csv.lines().count(), 1 + 6);
    let dat = std::fs::read_to_string(dir.path().join("plots/wsola.dat")).unwrap();
    assert_eq!(dat.lines().count(), 3);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);
}

#[test]
fn snr_of_identical_signals_is_large() {
    let x = sine::<f32>(&[440.0], 0.5, 4096);
    assert!(snr_db(x.samples(), x.samples()) > 200.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pitch_error_vanishes_on_identical_input(f in 60.0f64..5000.0, amp in 0.01f64..1.0) {
        let x = sine::<f64>(&[f], amp, 16384);
        prop_assert_eq!(pitch_error(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn estimator_tracks_tone_frequency(f in 60.0f64..8000.0) {
        let x = sine::<f64>(&[f], 0.5, 22050);
        let est = dominant_frequency(&x).unwrap();
        prop_assert!((est - f).abs() < 0.5, "{} vs {}", est, f);
    }
}
