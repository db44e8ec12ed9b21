//! Beat fiducials: R-peak detection (Pan-Tompkins style), beat windows,
//! Q trough, tangent-method T-end, S-offset, and QT/QRS interval estimates.
//!
//! Indices are whole samples at the lead's rate; callers convert to seconds.

use crate::error::{Error, Result};
use crate::preprocess::{bandpass, NormalizeScope, PreprocessConfig};

/// Fraction of the S recovery slope below which the tangent anchor is
/// rejected as flat when locating the S offset.
pub const QRS_SLOPE_FLOOR_FRACTION: f64 = 1e-4;

/// Beat window spans 0.4 s before to 0.6 s after the R peak.
pub const BEAT_PRE_S: f64 = 0.4;
pub const BEAT_POST_S: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeatWindow {
    pub r_index: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

/// Fully annotated beat, produced when every detector succeeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeatAnnotation {
    pub r_index: usize,
    pub q_index: usize,
    pub t_end_index: usize,
    pub window: (usize, usize),
}

fn pt_feature_signal(lead: &[f32], fs: f32) -> Vec<f32> {
    // 5-15 Hz zero-phase bandpass isolates QRS energy; clamp the high edge
    // for very low sampling rates.
    let high = (15.0f64).min(0.45 * fs as f64);
    let cfg = PreprocessConfig {
        low_cut_hz: 5.0f64.min(high * 0.5),
        high_cut_hz: high,
        target_points: 2,
        filter_order: 2,
        normalize_scope: NormalizeScope::PerRecord,
    };
    bandpass(lead, fs as f64, &cfg).unwrap_or_else(|_| lead.to_vec())
}

/// Pan-Tompkins style R-peak detector: bandpass, derivative, squaring,
/// 150 ms moving integration, adaptive threshold with a 200 ms refractory,
/// and a final peak refinement on the raw lead.
pub fn detect_r_peaks(lead: &[f32], fs: f32) -> Vec<usize> {
    let n = lead.len();
    if fs <= 0.0 || (n as f32) < 2.0 * fs {
        return Vec::new();
    }
    let bp = pt_feature_signal(lead, fs);

    // Squared central-difference derivative.
    let mut feat = vec![0.0f32; n];
    for i in 1..n - 1 {
        let d = (bp[i + 1] - bp[i - 1]) * 0.5;
        feat[i] = d * d;
    }

    // Moving integration over 150 ms.
    let win = ((0.15 * fs).round() as usize).max(1);
    let mut prefix = vec![0.0f64; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + feat[i] as f64;
    }
    let integrated: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(win / 2);
            let hi = (i + win / 2 + 1).min(n);
            (prefix[hi] - prefix[lo]) / win as f64
        })
        .collect();

    // Adaptive signal/noise levels initialized from the first two seconds.
    let init_len = ((2.0 * fs) as usize).min(n);
    let init_max = integrated[..init_len].iter().cloned().fold(0.0f64, f64::max);
    if init_max <= 0.0 {
        return Vec::new();
    }
    let mut spk = 0.5 * init_max;
    let mut npk = 0.5 * integrated[..init_len].iter().sum::<f64>() / init_len as f64;
    let refractory = (0.2 * fs).round() as usize;
    let mut last_det: Option<usize> = None;
    let mut raw_peaks = Vec::new();
    for i in 1..n - 1 {
        if !(integrated[i] > integrated[i - 1] && integrated[i] >= integrated[i + 1]) {
            continue;
        }
        let threshold = npk + 0.25 * (spk - npk);
        let in_refractory = last_det.is_some_and(|l| i - l < refractory);
        if integrated[i] > threshold && !in_refractory {
            raw_peaks.push(i);
            last_det = Some(i);
            spk = 0.125 * integrated[i] + 0.875 * spk;
        } else if !in_refractory {
            npk = 0.125 * integrated[i] + 0.875 * npk;
        }
    }

    // Refine on the raw lead: the filtered wavelet's extremum can sit on a
    // side lobe, so take the largest deviation from the local median near
    // the integrated peak (centered integration, so the window is too).
    let back = (0.10 * fs).round() as usize;
    let fwd = (0.10 * fs).round() as usize;
    let mut peaks: Vec<usize> = Vec::with_capacity(raw_peaks.len());
    for p in raw_peaks {
        let lo = p.saturating_sub(back);
        let hi = (p + fwd + 1).min(n);
        let mut window: Vec<f32> = lead[lo..hi].to_vec();
        window.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = window[window.len() / 2];
        let best = (lo..hi)
            .max_by(|&a, &b| {
                (lead[a] - med)
                    .abs()
                    .partial_cmp(&(lead[b] - med).abs())
                    .unwrap()
            })
            .unwrap_or(p);
        match peaks.last() {
            Some(&prev) if best <= prev || best - prev < refractory => {}
            _ => peaks.push(best),
        }
    }
    peaks
}

/// One window per R peak whose full 0.4 s / 0.6 s context fits the lead;
/// truncated edge beats are dropped.
pub fn segment_beats(lead_len: usize, r_peaks: &[usize], fs: f32) -> Vec<BeatWindow> {
    let fs = fs as f64;
    r_peaks
        .iter()
        .filter_map(|&r| {
            let start = (r as f64 - BEAT_PRE_S * fs).floor();
            let end = (r as f64 + BEAT_POST_S * fs).floor();
            if start >= 0.0 && end <= lead_len as f64 {
                Some(BeatWindow { r_index: r, start: start as usize, end: end as usize })
            } else {
                None
            }
        })
        .collect()
}

/// Q trough: minimum within the 80 ms preceding R (earliest index on ties).
pub fn detect_q(lead: &[f32], r: usize, fs: f32) -> Result<usize> {
    let span = ((0.08 * fs).round() as usize).max(1);
    let lo = r.saturating_sub(span);
    if lo >= r {
        return Err(Error::DetectionFailed("no samples before R for Q search".into()));
    }
    let mut best = lo;
    for i in lo..r {
        if lead[i] < lead[best] {
            best = i;
        }
    }
    Ok(best)
}

fn median(values: &mut Vec<f32>) -> f32 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

/// Isoelectric level around one beat: median over quiet zones on both
/// sides (before the P wave and after the T wave). Sampling both sides
/// cancels the slow baseline drift the 0.05 Hz highpass leaves behind.
fn pre_q_baseline(lead: &[f32], r: usize, fs: f32) -> f32 {
    let n = lead.len();
    let start = r.saturating_sub((BEAT_PRE_S * fs as f64).round() as usize);
    let end = r.saturating_sub((0.25 * fs) as usize).max(start + 1).min(n);
    let mut seg: Vec<f32> = lead[start..end].to_vec();
    let post_lo = (r + (0.45 * fs).round() as usize).min(n);
    let post_hi = (r + (0.55 * fs).round() as usize).min(n);
    seg.extend_from_slice(&lead[post_lo..post_hi]);
    if seg.len() < 3 {
        seg = lead[start..r.max(start + 1)].to_vec();
    }
    median(&mut seg)
}

/// T-end by the tangent method: steepest descent on the T wave's falling
/// edge (150-450 ms after R), extrapolated to the pre-Q baseline. Handles
/// inverted T waves by working on the baseline-relative magnitude.
pub fn detect_t_end(lead: &[f32], r: usize, fs: f32) -> Result<usize> {
    let n = lead.len();
    let zone_lo = r + (0.15 * fs).round() as usize;
    let zone_hi = (r + (0.45 * fs).round() as usize).min(n.saturating_sub(1));
    if zone_lo + 2 >= zone_hi {
        return Err(Error::DetectionFailed("T search zone outside lead".into()));
    }
    let baseline = pre_q_baseline(lead, r, fs);

    // T apex: largest baseline deviation in the central T zone.
    let apex_lo = r + (0.10 * fs).round() as usize;
    let apex_hi = (r + (0.35 * fs).round() as usize).min(n - 1);
    let apex = (apex_lo..apex_hi)
        .max_by(|&a, &b| {
            (lead[a] - baseline)
                .abs()
                .partial_cmp(&(lead[b] - baseline).abs())
                .unwrap()
        })
        .ok_or_else(|| Error::DetectionFailed("empty T apex zone".into()))?;
    let polarity = if lead[apex] >= baseline { 1.0f32 } else { -1.0 };

    let window_start = r.saturating_sub((BEAT_PRE_S * fs as f64).round() as usize);
    let amp = lead[window_start..zone_hi]
        .iter()
        .fold(0.0f32, |m, &v| m.max((v - baseline).abs()));
    if amp <= 0.0 {
        return Err(Error::DetectionFailed("flat beat: no T wave".into()));
    }

    // Steepest descent of the polarity-corrected wave after the apex.
    let search_lo = zone_lo.max(apex);
    let mut best: Option<(usize, f64)> = None;
    for i in search_lo..zone_hi {
        let d = polarity as f64 * (lead[i + 1] as f64 - lead[i - 1] as f64) * 0.5;
        if best.is_none() || d < best.unwrap().1 {
            best = Some((i, d));
        }
    }
    let (steepest, slope) = best.unwrap();
    if slope >= -1e-4 * amp as f64 {
        return Err(Error::DetectionFailed("no falling T edge".into()));
    }
    let height = polarity as f64 * (lead[steepest] - baseline) as f64;
    let crossing = steepest as f64 + height / (-slope);
    if !crossing.is_finite() || crossing < steepest as f64 || crossing > steepest as f64 + 0.3 * fs as f64 {
        return Err(Error::DetectionFailed("tangent does not reach baseline".into()));
    }
    let idx = crossing.round() as usize;
    Ok(idx.min(n - 1))
}

/// Q-to-S-offset duration in seconds. The S trough is the minimum within
/// 120 ms after R; the offset is where the tangent at the steepest point of
/// the S recovery (the rising edge back toward baseline) crosses the pre-Q
/// baseline.
pub fn qrs_duration(lead: &[f32], r: usize, fs: f32) -> Result<f64> {
    let n = lead.len();
    let q = detect_q(lead, r, fs)?;
    let s_hi = (r + ((0.12 * fs).round() as usize).max(1)).min(n.saturating_sub(2));
    if r + 1 > s_hi {
        return Err(Error::DetectionFailed("no room after R for S search".into()));
    }
    let mut s_trough = r + 1;
    for i in r + 1..=s_hi {
        if lead[i] < lead[s_trough] {
            s_trough = i;
        }
    }
    let baseline = pre_q_baseline(lead, r, fs);
    let central = |i: usize| (lead[i + 1] as f64 - lead[i - 1] as f64) * 0.5;
    // Steepest ascent of the recovery within 80 ms after the trough.
    let scan_hi = (s_trough + (0.08 * fs).round() as usize).min(n - 2);
    let mut best: Option<(usize, f64)> = None;
    for i in s_trough.max(1)..=scan_hi {
        let d = central(i);
        if best.is_none() || d > best.unwrap().1 {
            best = Some((i, d));
        }
    }
    let (anchor, slope) =
        best.ok_or_else(|| Error::DetectionFailed("no samples after S trough".into()))?;
    let amp = (lead[q] - baseline).abs().max((lead[r] - baseline).abs());
    if slope <= QRS_SLOPE_FLOOR_FRACTION * amp as f64 || amp == 0.0 {
        return Err(Error::DetectionFailed("flat beat: no S recovery slope".into()));
    }
    let height = (baseline - lead[anchor]) as f64;
    let crossing = anchor as f64 + height / slope;
    if !crossing.is_finite()
        || crossing < s_trough as f64
        || crossing > anchor as f64 + 0.2 * fs as f64
    {
        return Err(Error::DetectionFailed("S tangent does not reach baseline".into()));
    }
    let offset = (crossing.round() as usize).min(n - 1);
    if offset <= q {
        return Err(Error::DetectionFailed("degenerate QRS bounds".into()));
    }
    Ok((offset - q) as f64 / fs as f64)
}

/// Annotates every complete beat whose Q and T-end detectors both succeed.
pub fn annotate_beats(lead: &[f32], fs: f32) -> Vec<BeatAnnotation> {
    let peaks = detect_r_peaks(lead, fs);
    segment_beats(lead.len(), &peaks, fs)
        .into_iter()
        .filter_map(|b| {
            let q = detect_q(lead, b.r_index, fs).ok()?;
            let t = detect_t_end(lead, b.r_index, fs).ok()?;
            if q < b.r_index && b.r_index < t {
                Some(BeatAnnotation {
                    r_index: b.r_index,
                    q_index: q,
                    t_end_index: t,
                    window: (b.start, b.end),
                })
            } else {
                None
            }
        })
        .collect()
}

/// Mean QT interval (seconds) over beats with successful Q and T-end
/// detection; errors when no beat succeeds.
pub fn mean_qt(lead: &[f32], fs: f32) -> Result<f64> {
    let beats = annotate_beats(lead, fs);
    if beats.is_empty() {
        return Err(Error::DetectionFailed("no analyzable beats".into()));
    }
    let total: f64 = beats
        .iter()
        .map(|b| (b.t_end_index - b.q_index) as f64 / fs as f64)
        .sum();
    Ok(total / beats.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_signal_has_no_peaks() {
        assert!(detect_r_peaks(&vec![0.0; 512], 51.2).is_empty());
    }

    #[test]
    fn short_signal_has_no_peaks() {
        assert!(detect_r_peaks(&vec![1.0; 50], 51.2).is_empty());
    }

    #[test]
    fn segment_beats_drops_truncated() {
        let fs = 51.2;
        // 0.2 s in: window would start before 0.
        assert!(segment_beats(512, &[10], fs).is_empty());
        let windows = segment_beats(512, &[256], fs);
        assert_eq!(windows, vec![BeatWindow { r_index: 256, start: 235, end: 286 }]);
        assert!(segment_beats(512, &[], fs).is_empty());
    }

    #[test]
    fn q_is_first_minimum_on_ties() {
        let fs = 51.2;
        let mut lead = vec![0.5f32; 64];
        lead[32] = 1.0;
        // Flat pre-R: earliest index of the search window wins.
        let q = detect_q(&lead, 32, fs).unwrap();
        assert_eq!(q, 28);
    }

    #[test]
    fn q_on_monotone_ramp_is_window_start() {
        let fs = 51.2;
        let lead: Vec<f32> = (0..64).map(|i| i as f32 * 0.01).collect();
        let q = detect_q(&lead, 40, fs).unwrap();
        assert_eq!(q, 36);
    }

    #[test]
    fn t_end_fails_on_flat_beat() {
        let lead = vec![0.25f32; 512];
        assert!(detect_t_end(&lead, 256, 51.2).is_err());
        assert!(qrs_duration(&lead, 256, 51.2).is_err());
    }

    #[test]
    fn mean_qt_errors_without_beats() {
        assert!(matches!(
            mean_qt(&vec![0.0f32; 512], 51.2),
            Err(Error::DetectionFailed(_))
        ));
    }

    #[test]
    fn tangent_hits_two_sigma_on_gaussian_t() {
        // Pure Gaussian T wave at 500 Hz: tangent crossing lands at c + 2s.
        let fs = 500.0f32;
        let c = 1.0f64;
        let sigma = 0.06f64;
        let lead: Vec<f32> = (0..1000)
            .map(|i| {
                let t = i as f64 / fs as f64;
                let r = (-((t - 0.75) / 0.01).powi(2) / 2.0).exp(); // narrow R at 0.75 s
                let tw = 0.4 * (-((t - c) / sigma).powi(2) / 2.0).exp();
                (r + tw) as f32
            })
            .collect();
        let r_idx = 375;
        let t_end = detect_t_end(&lead, r_idx, fs).unwrap();
        let expected = ((c + 2.0 * sigma) * fs as f64).round() as usize;
        assert!(
            (t_end as isize - expected as isize).abs() <= 2,
            "t_end {t_end} vs expected {expected}"
        );
    }
}
