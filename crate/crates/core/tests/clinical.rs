//! Generator-backed clinical checks: detector accuracy against analytic
//! ground truth, interval deltas between configured generator settings,
//! signal-quality behavior, and the inter-lead correlation structure.

use ecgrecon::dataio::{synth_generate, SynthConfig};
use ecgrecon::ecg::{EcgRecord, LeadId};
use ecgrecon::fiducials::{detect_r_peaks, mean_qt, qrs_duration, segment_beats};
use ecgrecon::masking::MaskConfig;
use ecgrecon::metrics::{
    correlation_matrix, delta_qrs, delta_qt, evaluate, r_detect_pct, sqi_avg_qrs, CopyPasteRecon,
    MetricScope, NoiseRecon,
};
use ecgrecon::preprocess::{preprocess_record, PreprocessConfig};

fn corpus(config: &SynthConfig) -> (Vec<EcgRecord>, ecgrecon::dataio::GroundTruth) {
    let (raw, truth) = synth_generate(config).unwrap();
    let pp = PreprocessConfig::default();
    let records = raw
        .iter()
        .map(|r| preprocess_record(r, &pp).unwrap().0)
        .collect();
    (records, truth)
}

#[test]
fn sixty_bpm_r_peaks_land_on_ground_truth() {
    let (records, truth) = corpus(&SynthConfig {
        num_records: 10,
        heart_rate_bpm: (60.0, 60.0),
        seed: 60,
        ..Default::default()
    });
    for (rec, t) in records.iter().zip(&truth.records) {
        let fs = rec.sampling_rate;
        let peaks = detect_r_peaks(rec.lead(LeadId::II), fs);
        assert!(
            (9..=11).contains(&peaks.len()),
            "{}: {} peaks at 60 bpm over 10 s",
            t.record_id,
            peaks.len()
        );
        for &rt in &t.r_times_s {
            let hit = peaks
                .iter()
                .any(|&p| (p as f64 / fs as f64 - rt).abs() <= 0.030);
            assert!(hit, "{}: beat at {rt:.2}s missed", t.record_id);
        }
        // Strictly increasing with at least the 200 ms refractory between peaks.
        let refractory = (0.2 * fs).round() as usize;
        for pair in peaks.windows(2) {
            assert!(pair[1] > pair[0] && pair[1] - pair[0] >= refractory);
        }
    }
}

#[test]
fn hundred_bpm_r_peaks_still_resolve() {
    let (records, truth) = corpus(&SynthConfig {
        num_records: 8,
        heart_rate_bpm: (100.0, 100.0),
        seed: 100,
        ..Default::default()
    });
    for (rec, t) in records.iter().zip(&truth.records) {
        let fs = rec.sampling_rate;
        let peaks = detect_r_peaks(rec.lead(LeadId::II), fs);
        assert!(
            (14..=17).contains(&peaks.len()),
            "{}: {} peaks at 100 bpm",
            t.record_id,
            peaks.len()
        );
        let hits = t
            .r_times_s
            .iter()
            .filter(|&&rt| {
                peaks
                    .iter()
                    .any(|&p| (p as f64 / fs as f64 - rt).abs() <= 0.030)
            })
            .count();
        assert!(hits >= t.r_times_s.len() - 1, "{}: {hits}/{}", t.record_id, t.r_times_s.len());
    }
}

#[test]
fn mean_qt_tracks_configured_interval() {
    let (records, truth) = corpus(&SynthConfig {
        num_records: 8,
        qt_s: (0.40, 0.40),
        seed: 40,
        ..Default::default()
    });
    for (rec, t) in records.iter().zip(&truth.records) {
        let qt = mean_qt(rec.lead(LeadId::II), rec.sampling_rate).unwrap();
        assert!(
            (qt - 0.40).abs() <= 0.02,
            "{}: mean QT {qt:.4} vs configured 0.40",
            t.record_id
        );
    }
}

#[test]
fn qt_difference_between_settings_resolves() {
    let short = corpus(&SynthConfig { num_records: 6, qt_s: (0.36, 0.36), seed: 361, ..Default::default() });
    let long = corpus(&SynthConfig { num_records: 6, qt_s: (0.44, 0.44), seed: 441, ..Default::default() });
    for (a, b) in short.0.iter().zip(&long.0) {
        let qa = mean_qt(a.lead(LeadId::II), a.sampling_rate).unwrap();
        let qb = mean_qt(b.lead(LeadId::II), b.sampling_rate).unwrap();
        let diff = qb - qa;
        assert!((diff - 0.08).abs() <= 0.02, "QT difference {diff:.4}");
        // The same comparison through the metric op.
        let d = delta_qt(a, b, LeadId::II).unwrap();
        assert!((d - 0.08).abs() <= 0.02, "delta_qt {d:.4}");
    }
}

#[test]
fn qrs_duration_tracks_configured_interval() {
    let (records, truth) = corpus(&SynthConfig {
        num_records: 8,
        qrs_s: (0.10, 0.10),
        seed: 10,
        ..Default::default()
    });
    for (rec, t) in records.iter().zip(&truth.records) {
        let fs = rec.sampling_rate;
        let lead = rec.lead(LeadId::II);
        let peaks = detect_r_peaks(lead, fs);
        let durations: Vec<f64> = segment_beats(lead.len(), &peaks, fs)
            .iter()
            .filter_map(|b| qrs_duration(lead, b.r_index, fs).ok())
            .collect();
        assert!(!durations.is_empty());
        let mean = durations.iter().sum::<f64>() / durations.len() as f64;
        assert!(
            (mean - 0.10).abs() <= 0.02,
            "{}: mean QRS {mean:.4} vs configured 0.10",
            t.record_id
        );
    }
}

#[test]
fn qrs_difference_between_settings_resolves() {
    let narrow = corpus(&SynthConfig { num_records: 6, qrs_s: (0.10, 0.10), seed: 101, ..Default::default() });
    let wide = corpus(&SynthConfig { num_records: 6, qrs_s: (0.14, 0.14), seed: 141, ..Default::default() });
    for (a, b) in narrow.0.iter().zip(&wide.0) {
        let d = delta_qrs(a, b, LeadId::II).unwrap();
        assert!((d - 0.04).abs() <= 0.02, "delta_qrs {d:.4}");
    }
}

#[test]
fn half_flattened_reconstruction_halves_r_detection() {
    let (records, truth) = corpus(&SynthConfig { num_records: 6, seed: 55, ..Default::default() });
    for (rec, t) in records.iter().zip(&truth.records) {
        let fs = rec.sampling_rate;
        let orig = rec.lead(LeadId::II);
        // Flatten every other beat's QRS neighborhood.
        let mut recon = orig.to_vec();
        for (bi, &rt) in t.r_times_s.iter().enumerate() {
            if bi % 2 == 1 {
                let center = (rt * fs as f64).round() as isize;
                let half = (0.15 * fs) as isize;
                for i in (center - half).max(0)..(center + half).min(recon.len() as isize) {
                    recon[i as usize] = 0.0;
                }
            }
        }
        let pct = r_detect_pct(&recon, orig, fs).unwrap();
        assert!((40.0..=60.0).contains(&pct), "{}: %-R {pct:.1}", t.record_id);
    }
}

#[test]
fn sqi_separates_clean_beats_from_noise() {
    let (records, _) = corpus(&SynthConfig { num_records: 6, seed: 66, ..Default::default() });
    for rec in &records {
        let q = sqi_avg_qrs(rec.lead(LeadId::II), rec.sampling_rate).unwrap();
        assert!(q > 0.9, "clean synthetic sqi {q:.3}");
    }
    // Pure noise: whatever "beats" the detector finds correlate weakly.
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for _ in 0..6 {
        let noise: Vec<f32> = (0..512).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        if let Ok(q) = sqi_avg_qrs(&noise, 51.2) {
            assert!(q < 0.85, "noise sqi {q:.3}");
        }
    }
}

#[test]
fn noise_reconstructor_scores_near_zero_pcc() {
    let (records, _) = corpus(&SynthConfig { num_records: 64, seed: 640, ..Default::default() });
    let reports = evaluate(
        &NoiseRecon { seed: 9 },
        &records,
        &[MaskConfig::Segment(3)],
        17,
        MetricScope::FullLead,
    )
    .unwrap();
    let mut sum = 0.0;
    let mut count = 0usize;
    for rec in &reports[0].records {
        for lead in &rec.leads {
            if lead.pcc.is_finite() {
                sum += lead.pcc;
                count += 1;
            }
        }
    }
    let mean = sum / count as f64;
    assert!(mean.abs() < 0.1, "noise reconstructor mean PCC {mean:.4}");
}

#[test]
fn correlation_matrix_reflects_lead_structure() {
    let (records, _) = corpus(&SynthConfig { num_records: 24, seed: 24, ..Default::default() });
    let matrix = correlation_matrix(&CopyPasteRecon, &records, 5).unwrap();
    assert_eq!(matrix.len(), 12);
    assert!(matrix.iter().all(|row| row.len() == 12));
    // Diagonal: the primer lead is copied verbatim.
    for (i, row) in matrix.iter().enumerate() {
        assert!(
            (row[i] - 1.0).abs() < 1e-6,
            "diagonal entry {i} is {}",
            row[i]
        );
    }
    // Lead III carries an independent source component: reconstructing it
    // from any other single lead correlates worse than reconstructing V5.
    let column_mean = |j: usize| -> f64 {
        let values: Vec<f64> = (0..12).filter(|&i| i != j).map(|i| matrix[i][j]).collect();
        values.iter().sum::<f64>() / values.len() as f64
    };
    let col_iii = column_mean(LeadId::III.ordinal());
    let col_v5 = column_mean(LeadId::V5.ordinal());
    assert!(
        col_iii < col_v5,
        "column III mean {col_iii:.3} should trail column V5 mean {col_v5:.3}"
    );
}
