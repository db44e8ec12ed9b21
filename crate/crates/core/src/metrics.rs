//! Distortion and clinical metrics plus per-configuration evaluation
//! reports: PCC, RMSE, MAE, DTW, delta-QT, delta-QRS, %-R, SQI.

use crate::baseline::copy_paste;
use crate::ecg::{EcgRecord, LeadId, LEAD_COUNT};
use crate::error::{Error, Result};
use crate::fiducials::{detect_r_peaks, mean_qt, qrs_duration, segment_beats};
use crate::loss::pearson_r;
use crate::masking::{apply_mask, primer_mask, MaskConfig, MaskedEcg};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

/// Pearson correlation coefficient with eps-guarded denominators.
pub fn pcc(a: &[f32], b: &[f32], eps: f64) -> f64 {
    let af: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let bf: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    pearson_r(&af, &bf, eps)
}

pub fn rmse(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().min(b.len()).max(1);
    let ss: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    (ss / n as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaeMode {
    Mean,
    Max,
}

/// Absolute error, either averaged (default in reports) or the maximum.
pub fn mae(a: &[f32], b: &[f32], mode: MaeMode) -> f64 {
    let diffs = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs());
    match mode {
        MaeMode::Mean => diffs.sum::<f64>() / a.len().max(1) as f64,
        MaeMode::Max => diffs.fold(0.0, f64::max),
    }
}

/// Classic dynamic time warping with absolute-difference local cost, full
/// window, unit step weights. The normalized variant divides by the length
/// of the optimal path (ties broken toward shorter paths).
pub fn dtw(a: &[f32], b: &[f32], normalize: bool) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("dtw of empty sequence"));
    }
    let (na, nb) = (a.len(), b.len());
    // Lexicographic DP over (cost, path length); both are path-additive.
    let mut cost = vec![f64::INFINITY; (na + 1) * (nb + 1)];
    let mut plen = vec![usize::MAX; (na + 1) * (nb + 1)];
    let idx = |i: usize, j: usize| i * (nb + 1) + j;
    cost[idx(0, 0)] = 0.0;
    plen[idx(0, 0)] = 0;
    for i in 1..=na {
        for j in 1..=nb {
            let local = (a[i - 1] as f64 - b[j - 1] as f64).abs();
            let mut best_c = f64::INFINITY;
            let mut best_l = usize::MAX;
            for (pi, pj) in [(i - 1, j - 1), (i - 1, j), (i, j - 1)] {
                let c = cost[idx(pi, pj)];
                let l = plen[idx(pi, pj)];
                if c < best_c || (c == best_c && l < best_l) {
                    best_c = c;
                    best_l = l;
                }
            }
            cost[idx(i, j)] = best_c + local;
            plen[idx(i, j)] = best_l.saturating_add(1);
        }
    }
    let total = cost[idx(na, nb)];
    Ok(if normalize { total / plen[idx(na, nb)] as f64 } else { total })
}

/// |mean QT(recon) - mean QT(orig)| in seconds for one lead; errors
/// propagate as detection failures.
pub fn delta_qt(recon: &EcgRecord, orig: &EcgRecord, lead: LeadId) -> Result<f64> {
    let a = mean_qt(recon.lead(lead), recon.sampling_rate)?;
    let b = mean_qt(orig.lead(lead), orig.sampling_rate)?;
    Ok((a - b).abs())
}

/// |mean QRS duration(recon) - mean QRS duration(orig)| in seconds.
pub fn delta_qrs(recon: &EcgRecord, orig: &EcgRecord, lead: LeadId) -> Result<f64> {
    Ok((mean_qrs(recon.lead(lead), recon.sampling_rate)?
        - mean_qrs(orig.lead(lead), orig.sampling_rate)?)
    .abs())
}

fn mean_qrs(lead: &[f32], fs: f32) -> Result<f64> {
    let peaks = detect_r_peaks(lead, fs);
    let beats = segment_beats(lead.len(), &peaks, fs);
    let durations: Vec<f64> = beats
        .iter()
        .filter_map(|b| qrs_duration(lead, b.r_index, fs).ok())
        .collect();
    if durations.is_empty() {
        return Err(Error::DetectionFailed("no beats with measurable QRS".into()));
    }
    Ok(durations.iter().sum::<f64>() / durations.len() as f64)
}

/// Percentage of original R peaks matched by a reconstructed peak within
/// 50 ms, capped at 100. Errors when the original lead has no peaks.
pub fn r_detect_pct(recon_lead: &[f32], orig_lead: &[f32], fs: f32) -> Result<f64> {
    let orig = detect_r_peaks(orig_lead, fs);
    if orig.is_empty() {
        return Err(Error::DetectionFailed("original lead has no R peaks".into()));
    }
    let recon = detect_r_peaks(recon_lead, fs);
    let tol = (0.05 * fs).round() as isize;
    let matched = orig
        .iter()
        .filter(|&&o| recon.iter().any(|&r| (r as isize - o as isize).abs() <= tol))
        .count();
    Ok((100.0 * matched as f64 / orig.len() as f64).min(100.0))
}

/// QRS-shape consistency in [0, 1]: z-scored 0.1 s windows around each R
/// correlated against their mean, rescaled from [-1, 1]. A single beat is
/// 1.0 by convention.
pub fn sqi_avg_qrs(lead: &[f32], fs: f32) -> Result<f64> {
    let half = ((0.1 * fs).round() as usize).max(1);
    let peaks = detect_r_peaks(lead, fs);
    let windows: Vec<Vec<f64>> = peaks
        .iter()
        .filter_map(|&r| {
            if r >= half && r + half < lead.len() {
                let w: Vec<f64> = lead[r - half..=r + half].iter().map(|&v| v as f64).collect();
                Some(zscore(&w))
            } else {
                None
            }
        })
        .collect();
    if windows.is_empty() {
        return Err(Error::DetectionFailed("no complete QRS windows".into()));
    }
    if windows.len() == 1 {
        return Ok(1.0);
    }
    let len = windows[0].len();
    let mut mean = vec![0.0f64; len];
    for w in &windows {
        for (m, v) in mean.iter_mut().zip(w) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= windows.len() as f64;
    }
    let mean_corr: f64 = windows
        .iter()
        .map(|w| pearson_r(w, &mean, 1e-8))
        .sum::<f64>()
        / windows.len() as f64;
    Ok(((mean_corr + 1.0) / 2.0).clamp(0.0, 1.0))
}

fn zscore(w: &[f64]) -> Vec<f64> {
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    w.iter().map(|v| (v - mean) / std).collect()
}

// ---------------------------------------------------------------------------
// Evaluation harness
// ---------------------------------------------------------------------------

/// Anything that turns a masked ECG back into a full record.
pub trait Reconstruct: Sync {
    fn method_name(&self) -> &str;
    fn reconstruct(&self, masked: &MaskedEcg) -> Result<EcgRecord>;
}

/// The CopyPaste baseline as a reconstructor.
pub struct CopyPasteRecon;

impl Reconstruct for CopyPasteRecon {
    fn method_name(&self) -> &str {
        "copypaste"
    }
    fn reconstruct(&self, masked: &MaskedEcg) -> Result<EcgRecord> {
        copy_paste(masked)
    }
}

/// Statistical null: emits fresh uniform noise in [-1, 1], seeded per record.
pub struct NoiseRecon {
    pub seed: u64,
}

impl Reconstruct for NoiseRecon {
    fn method_name(&self) -> &str {
        "noise"
    }
    fn reconstruct(&self, masked: &MaskedEcg) -> Result<EcgRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, hash_str(&masked.source_id)));
        let n = masked.n();
        let samples: Vec<f32> = (0..LEAD_COUNT * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut rec = EcgRecord::new(masked.source_id.clone(), masked.sampling_rate, samples, n)?;
        rec.set_normalized()?;
        Ok(rec)
    }
}

/// Which cells distortion metrics are computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricScope {
    /// Full lead (default): scores the whole reconstruction.
    FullLead,
    /// Only cells the mask hid (clinical metrics still use the full lead).
    MaskedOnly,
}

#[derive(Debug, Clone, Serialize)]
pub struct LeadScores {
    pub pcc: f64,
    pub rmse: f64,
    pub mae_mean: f64,
    pub mae_max: f64,
    pub dtw: f64,
    pub delta_qt_s: Option<f64>,
    pub delta_qrs_s: Option<f64>,
    pub r_detect_pct: Option<f64>,
    pub sqi_avg_qrs: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecordScores {
    pub record_id: String,
    /// One entry per lead in canonical order.
    pub leads: Vec<LeadScores>,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    fn from_values(values: &[f64]) -> Aggregate {
        if values.is_empty() {
            return Aggregate::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Aggregate { mean, std: var.sqrt(), count: values.len() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LeadAggregates {
    pub lead: String,
    pub pcc: Aggregate,
    pub rmse: Aggregate,
    pub mae_mean: Aggregate,
    pub mae_max: Aggregate,
    pub dtw: Aggregate,
    pub delta_qt_s: Aggregate,
    pub delta_qrs_s: Aggregate,
    pub r_detect_pct: Aggregate,
    pub sqi_avg_qrs: Aggregate,
    /// Records whose delta-QT/delta-QRS/sqi detection failed and were
    /// excluded from the aggregates above.
    pub fiducial_failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub config: String,
    pub method: String,
    pub records: Vec<RecordScores>,
    pub per_lead: Vec<LeadAggregates>,
}

/// Masks, reconstructs and scores every record under every configuration.
/// Deterministic given the seed; records are scored in parallel and merged
/// in input order.
pub fn evaluate(
    reconstructor: &dyn Reconstruct,
    records: &[EcgRecord],
    configs: &[MaskConfig],
    seed: u64,
    scope: MetricScope,
) -> Result<Vec<MetricReport>> {
    configs
        .iter()
        .enumerate()
        .map(|(ci, config)| {
            let scored: Result<Vec<RecordScores>> = records
                .par_iter()
                .enumerate()
                .map(|(ri, record)| {
                    let mask = primer_mask(*config, record.len())?;
                    let noise_seed = mix(seed, mix(ci as u64 + 1, ri as u64 + 1));
                    let masked = apply_mask(record, &mask, noise_seed)?;
                    let recon = reconstructor.reconstruct(&masked)?;
                    score_record(&recon, record, &masked, scope)
                })
                .collect();
            let records_scored = scored?;
            Ok(MetricReport {
                config: config.name(),
                method: reconstructor.method_name().to_string(),
                per_lead: aggregate(&records_scored),
                records: records_scored,
            })
        })
        .collect()
}

fn score_record(
    recon: &EcgRecord,
    orig: &EcgRecord,
    masked: &MaskedEcg,
    scope: MetricScope,
) -> Result<RecordScores> {
    let fs = orig.sampling_rate;
    let leads = LeadId::ALL
        .iter()
        .map(|&lead| {
            let (a_full, b_full) = (recon.lead(lead), orig.lead(lead));
            let (a, b): (Vec<f32>, Vec<f32>) = match scope {
                MetricScope::FullLead => (a_full.to_vec(), b_full.to_vec()),
                MetricScope::MaskedOnly => {
                    let row = masked.mask.lead_row(lead);
                    a_full
                        .iter()
                        .zip(b_full)
                        .zip(row)
                        .filter(|(_, &keep)| !keep)
                        .map(|((&x, &y), _)| (x, y))
                        .unzip()
                }
            };
            let empty = a.is_empty();
            LeadScores {
                pcc: if empty { f64::NAN } else { pcc(&a, &b, 1e-8) },
                rmse: if empty { f64::NAN } else { rmse(&a, &b) },
                mae_mean: if empty { f64::NAN } else { mae(&a, &b, MaeMode::Mean) },
                mae_max: if empty { f64::NAN } else { mae(&a, &b, MaeMode::Max) },
                dtw: if empty {
                    f64::NAN
                } else {
                    dtw(&a, &b, true).unwrap_or(f64::NAN)
                },
                delta_qt_s: delta_qt(recon, orig, lead).ok(),
                delta_qrs_s: delta_qrs(recon, orig, lead).ok(),
                r_detect_pct: r_detect_pct(recon.lead(lead), orig.lead(lead), fs).ok(),
                sqi_avg_qrs: sqi_avg_qrs(recon.lead(lead), fs).ok(),
            }
        })
        .collect();
    Ok(RecordScores { record_id: orig.id.clone(), leads })
}

fn aggregate(records: &[RecordScores]) -> Vec<LeadAggregates> {
    LeadId::ALL
        .iter()
        .enumerate()
        .map(|(li, lead)| {
            let collect = |f: &dyn Fn(&LeadScores) -> Option<f64>| -> Vec<f64> {
                records
                    .iter()
                    .filter_map(|r| f(&r.leads[li]).filter(|v| v.is_finite()))
                    .collect()
            };
            let failures = records
                .iter()
                .filter(|r| {
                    let s = &r.leads[li];
                    s.delta_qt_s.is_none() || s.delta_qrs_s.is_none() || s.sqi_avg_qrs.is_none()
                })
                .count();
            LeadAggregates {
                lead: lead.name().to_string(),
                pcc: Aggregate::from_values(&collect(&|s| Some(s.pcc))),
                rmse: Aggregate::from_values(&collect(&|s| Some(s.rmse))),
                mae_mean: Aggregate::from_values(&collect(&|s| Some(s.mae_mean))),
                mae_max: Aggregate::from_values(&collect(&|s| Some(s.mae_max))),
                dtw: Aggregate::from_values(&collect(&|s| Some(s.dtw))),
                delta_qt_s: Aggregate::from_values(&collect(&|s| s.delta_qt_s)),
                delta_qrs_s: Aggregate::from_values(&collect(&|s| s.delta_qrs_s)),
                r_detect_pct: Aggregate::from_values(&collect(&|s| s.r_detect_pct)),
                sqi_avg_qrs: Aggregate::from_values(&collect(&|s| s.sqi_avg_qrs)),
                fiducial_failures: failures,
            }
        })
        .collect()
}

/// 12x12 matrix: entry (i, j) is the mean PCC between reconstructed and
/// original lead j when the input mask is C_{lead i}.
pub fn correlation_matrix(
    reconstructor: &dyn Reconstruct,
    records: &[EcgRecord],
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    LeadId::ALL
        .iter()
        .enumerate()
        .map(|(i, &input_lead)| {
            let per_record: Result<Vec<Vec<f64>>> = records
                .par_iter()
                .enumerate()
                .map(|(ri, record)| {
                    let mask = primer_mask(MaskConfig::Lead(input_lead), record.len())?;
                    let masked = apply_mask(record, &mask, mix(seed, mix(i as u64, ri as u64)))?;
                    let recon = reconstructor.reconstruct(&masked)?;
                    Ok(LeadId::ALL
                        .iter()
                        .map(|&j| pcc(recon.lead(j), record.lead(j), 1e-8))
                        .collect())
                })
                .collect();
            let per_record = per_record?;
            let mut row = vec![0.0f64; LEAD_COUNT];
            for rec_row in &per_record {
                for (acc, v) in row.iter_mut().zip(rec_row) {
                    *acc += v;
                }
            }
            for v in row.iter_mut() {
                *v /= per_record.len().max(1) as f64;
            }
            Ok(row)
        })
        .collect()
}

/// Fixed CSV schema: one row per record x config x lead, record-major.
pub const METRIC_CSV_HEADER: &str =
    "config,lead,pcc,rmse,mae_mean,mae_max,dtw,delta_qt_s,delta_qrs_s,r_detect_pct,sqi_avg_qrs";

pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from(METRIC_CSV_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for report in reports {
        for record in &report.records {
            for (lead, s) in LeadId::ALL.iter().zip(&record.leads) {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{}\n",
                    report.config,
                    lead.name(),
                    s.pcc,
                    s.rmse,
                    s.mae_mean,
                    s.mae_max,
                    s.dtw,
                    opt(s.delta_qt_s),
                    opt(s.delta_qrs_s),
                    opt(s.r_detect_pct),
                    opt(s.sqi_avg_qrs),
                ));
            }
        }
    }
    out
}

/// JSON summary: per config x lead aggregates.
pub fn reports_to_summary_json(reports: &[MetricReport]) -> Result<String> {
    #[derive(Serialize)]
    struct Summary<'a> {
        config: &'a str,
        method: &'a str,
        n_records: usize,
        per_lead: &'a [LeadAggregates],
    }
    let summaries: Vec<Summary> = reports
        .iter()
        .map(|r| Summary {
            config: &r.config,
            method: &r.method,
            n_records: r.records.len(),
            per_lead: &r.per_lead,
        })
        .collect();
    serde_json::to_string_pretty(&summaries).map_err(|e| Error::Format(e.to_string()))
}

pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub(crate) fn hash_str(s: &str) -> u64 {
    // FNV-1a, pinned for cross-platform stability.
    let mut h = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
