//! Preprocessing chain applied before masking: min-max normalization,
//! zero-phase Butterworth bandpass at the source rate, anti-aliased
//! downsampling to the working length.

use crate::ecg::{EcgRecord, LeadId, LEAD_COUNT};
use crate::error::{Error, Result};

/// Normalization scope for min-max scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizeScope {
    /// One min/max across all 12 leads (preserves inter-lead amplitude ratios).
    PerRecord,
    /// Independent min/max per lead.
    PerLead,
}

#[derive(Debug, Clone)]
pub struct PreprocessConfig {
    pub low_cut_hz: f64,
    pub high_cut_hz: f64,
    pub target_points: usize,
    pub filter_order: usize,
    pub normalize_scope: NormalizeScope,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            low_cut_hz: 0.05,
            high_cut_hz: 150.0,
            target_points: 512,
            filter_order: 4,
            normalize_scope: NormalizeScope::PerRecord,
        }
    }
}

impl PreprocessConfig {
    fn validate(&self) -> Result<()> {
        if !(self.low_cut_hz > 0.0 && self.low_cut_hz < self.high_cut_hz) {
            return Err(Error::Config(format!(
                "cutoffs must satisfy 0 < low ({}) < high ({})",
                self.low_cut_hz, self.high_cut_hz
            )));
        }
        if self.target_points < 2 {
            return Err(Error::Config("target_points must be at least 2".into()));
        }
        if self.filter_order == 0 {
            return Err(Error::Config("filter order must be positive".into()));
        }
        Ok(())
    }
}

/// Min-max normalizes to [-1, 1]. A degenerate scope (max == min) maps to
/// zero and is reported in the returned warning list.
pub fn minmax_normalize(
    record: &EcgRecord,
    scope: NormalizeScope,
) -> Result<(EcgRecord, Vec<String>)> {
    let n = record.len();
    let mut out = record.clone();
    let mut warnings = Vec::new();

    let mut apply = |data: &mut [f32], label: &str| {
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in data.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi == lo {
            data.fill(0.0);
            warnings.push(format!("degenerate {label}: constant signal mapped to 0"));
            return;
        }
        let scale = 2.0 / (hi - lo);
        for v in data.iter_mut() {
            *v = (*v - lo) * scale - 1.0;
        }
    };

    match scope {
        NormalizeScope::PerRecord => apply(out.samples_mut(), "record scope"),
        NormalizeScope::PerLead => {
            for lead in LeadId::ALL {
                let label = format!("lead {lead}");
                let start = lead.ordinal() * n;
                apply(&mut out.samples_mut()[start..start + n], &label);
            }
        }
    }
    // Extremes map exactly to +/-1 up to rounding; clamp residual ulps.
    for v in out.samples_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    out.set_normalized()?;
    Ok((out, warnings))
}

// ---------------------------------------------------------------------------
// Butterworth design and zero-phase application
// ---------------------------------------------------------------------------

/// One second-order section, direct form II transposed, a0 normalized to 1.
/// First-order sections are encoded with b2 = a2 = 0.
#[derive(Debug, Clone, Copy)]
struct Sos {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Sos {
    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }
}

#[derive(Debug, Clone, Copy)]
enum Pass {
    Low,
    High,
}

/// Butterworth sections for a lowpass or highpass of the given order via
/// bilinear transform with pre-warped cutoff.
fn butterworth_sections(order: usize, cutoff_hz: f64, fs: f64, pass: Pass) -> Vec<Sos> {
    let k = (std::f64::consts::PI * cutoff_hz / fs).tan();
    let k2 = k * k;
    let mut sections = Vec::new();
    for idx in 1..=(order / 2) {
        let theta = (2 * idx - 1) as f64 * std::f64::consts::PI / (2.0 * order as f64);
        let q = 1.0 / (2.0 * theta.cos());
        let norm = 1.0 / (1.0 + k / q + k2);
        let (b0, b1, b2) = match pass {
            Pass::Low => (k2 * norm, 2.0 * k2 * norm, k2 * norm),
            Pass::High => (norm, -2.0 * norm, norm),
        };
        sections.push(Sos {
            b0,
            b1,
            b2,
            a1: 2.0 * (k2 - 1.0) * norm,
            a2: (1.0 - k / q + k2) * norm,
        });
    }
    if order % 2 == 1 {
        let norm = 1.0 / (k + 1.0);
        let (b0, b1) = match pass {
            Pass::Low => (k * norm, k * norm),
            Pass::High => (norm, -norm),
        };
        sections.push(Sos {
            b0,
            b1,
            b2: 0.0,
            a1: (k - 1.0) * norm,
            a2: 0.0,
        });
    }
    sections
}

/// Runs one section over the signal with steady-state initial conditions
/// scaled to the first sample (removes the startup step transient).
fn apply_sos(section: &Sos, signal: &mut [f64]) {
    if signal.is_empty() {
        return;
    }
    let g = section.dc_gain();
    let x0 = signal[0];
    let mut z1 = (g - section.b0) * x0;
    let mut z2 = (section.b2 - section.a2 * g) * x0;
    for v in signal.iter_mut() {
        let x = *v;
        let y = section.b0 * x + z1;
        z1 = section.b1 * x - section.a1 * y + z2;
        z2 = section.b2 * x - section.a2 * y;
        *v = y;
    }
}

/// Forward-backward (zero-phase) cascade with odd edge extension.
fn filtfilt(sections: &[Sos], signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = (3 * (2 * sections.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * signal[0] - signal[i]);
    }
    ext.extend_from_slice(signal);
    for i in 1..=pad {
        ext.push(2.0 * signal[n - 1] - signal[n - 1 - i]);
    }
    for s in sections {
        apply_sos(s, &mut ext);
    }
    ext.reverse();
    for s in sections {
        apply_sos(s, &mut ext);
    }
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Zero-phase Butterworth bandpass (highpass at `low_cut_hz` cascaded with
/// lowpass at `high_cut_hz`, each of `filter_order`, applied forward and
/// backward). Output length equals input length.
pub fn bandpass(signal: &[f32], fs: f64, config: &PreprocessConfig) -> Result<Vec<f32>> {
    config.validate()?;
    if fs <= 2.0 * config.high_cut_hz {
        return Err(Error::Config(format!(
            "sampling rate {fs} Hz cannot carry a {} Hz cutoff; bandpass before downsampling",
            config.high_cut_hz
        )));
    }
    let sections = bandpass_sections(config, fs);
    let f64_signal: Vec<f64> = signal.iter().map(|&v| v as f64).collect();
    Ok(filtfilt(&sections, &f64_signal).into_iter().map(|v| v as f32).collect())
}

fn bandpass_sections(config: &PreprocessConfig, fs: f64) -> Vec<Sos> {
    let mut sections = butterworth_sections(config.filter_order, config.low_cut_hz, fs, Pass::High);
    sections.extend(butterworth_sections(
        config.filter_order,
        config.high_cut_hz,
        fs,
        Pass::Low,
    ));
    sections
}

// ---------------------------------------------------------------------------
// Anti-aliased downsampling
// ---------------------------------------------------------------------------

/// Resamples to exactly `target_points` spanning the same duration, using a
/// Blackman-windowed sinc with cutoff at the target Nyquist. No upsampling.
pub fn downsample(signal: &[f32], target_points: usize) -> Result<Vec<f32>> {
    let n_in = signal.len();
    if target_points < 2 {
        return Err(Error::Config("target_points must be at least 2".into()));
    }
    if n_in < target_points {
        return Err(Error::Config(format!(
            "cannot resample {n_in} points up to {target_points}; upsampling unsupported"
        )));
    }
    if n_in == target_points {
        return Ok(signal.to_vec());
    }
    let ratio = n_in as f64 / target_points as f64;
    let cutoff = 0.5 / ratio; // cycles per input sample
    const LOBES: f64 = 10.0;
    let half_width = LOBES * ratio;

    let mut out = Vec::with_capacity(target_points);
    for j in 0..target_points {
        let center = j as f64 * ratio;
        let lo = ((center - half_width).ceil() as i64).max(0) as usize;
        let hi = ((center + half_width).floor() as i64).min(n_in as i64 - 1) as usize;
        let mut acc = 0.0f64;
        let mut wsum = 0.0f64;
        for i in lo..=hi {
            let t = i as f64 - center;
            let w = blackman(t / half_width) * sinc(2.0 * cutoff * t);
            acc += w * signal[i] as f64;
            wsum += w;
        }
        out.push(if wsum.abs() > 1e-12 { (acc / wsum) as f32 } else { 0.0 });
    }
    Ok(out)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Blackman window on t in [-1, 1].
fn blackman(t: f64) -> f64 {
    if t.abs() > 1.0 {
        return 0.0;
    }
    let x = std::f64::consts::PI * (t + 1.0);
    0.42 - 0.5 * (x).cos() + 0.08 * (2.0 * x).cos()
}

/// Full chain: normalize, bandpass at the source rate, downsample to
/// `target_points`. Returns the processed record and any normalization
/// warnings.
///
/// When the source rate is too low for the configured high cutoff (already
/// downsampled input), the cutoff is clamped below Nyquist so the chain is
/// re-runnable at the working rate.
pub fn preprocess_record(
    record: &EcgRecord,
    config: &PreprocessConfig,
) -> Result<(EcgRecord, Vec<String>)> {
    config.validate()?;
    let n_in = record.len();
    if n_in < config.target_points {
        return Err(Error::Config(format!(
            "record has {n_in} points, fewer than target {}",
            config.target_points
        )));
    }
    let fs = record.sampling_rate as f64;
    let (normalized, warnings) = minmax_normalize(record, config.normalize_scope)?;

    let mut effective = config.clone();
    let nyquist = fs / 2.0;
    if effective.high_cut_hz >= nyquist {
        effective.high_cut_hz = 0.9 * nyquist;
        if effective.low_cut_hz >= effective.high_cut_hz {
            return Err(Error::Config(format!(
                "low cutoff {} Hz does not fit below Nyquist {nyquist} Hz",
                effective.low_cut_hz
            )));
        }
    }

    let mut samples = Vec::with_capacity(LEAD_COUNT * config.target_points);
    for lead in LeadId::ALL {
        let filtered = bandpass(normalized.lead(lead), fs, &effective)?;
        samples.extend(downsample(&filtered, config.target_points)?);
    }
    // Zero-phase filtering can overshoot past the normalized range; rescale
    // the whole record so the normalized invariant holds.
    let peak = samples.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        for v in samples.iter_mut() {
            *v /= peak;
        }
    }
    let fs_out = record.sampling_rate * config.target_points as f32 / n_in as f32;
    let mut out = record.with_samples(samples, config.target_points, fs_out)?;
    out.set_normalized()?;
    Ok((out, warnings))
}
