//! Synthetic 12-lead ECG generation with analytic ground-truth fiducials,
//! dataset construction, CSV and weight-file formats, and id-hash splits.
//!
//! The generator renders each beat as a sum of Gaussian bumps (P, Q, R, S,
//! T) on two source templates sharing beat times; limb leads are assembled
//! from leads I and II so the Einthoven identity holds exactly, and the
//! precordials are fixed linear mixes of the two sources plus small
//! per-lead noise.

use crate::autodiff::Tensor;
use crate::ecg::{assemble_record, EcgRecord, LeadId, LEAD_COUNT};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, mask_catalog, primer_mask, MaskConfig, MaskedEcg};
use crate::metrics::{hash_str, mix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub num_records: usize,
    pub heart_rate_bpm: (f64, f64),
    pub qt_s: (f64, f64),
    pub qrs_s: (f64, f64),
    pub baseline_wander_amp: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub sampling_rate: f64,
    pub duration_s: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_records: 16,
            heart_rate_bpm: (50.0, 75.0),
            qt_s: (0.36, 0.44),
            qrs_s: (0.10, 0.14),
            baseline_wander_amp: 0.012,
            noise_std: 0.004,
            seed: 0,
            sampling_rate: 500.0,
            duration_s: 10.0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let ranges = [self.heart_rate_bpm, self.qt_s, self.qrs_s];
        if ranges.iter().any(|(lo, hi)| !(lo <= hi) || *lo <= 0.0) {
            return Err(Error::Config("synth ranges must be non-empty and positive".into()));
        }
        if self.sampling_rate < 100.0 || self.duration_s < 2.0 {
            return Err(Error::Config("synth needs >= 100 Hz and >= 2 s".into()));
        }
        Ok(())
    }
}

/// Analytic fiducial times for one record, in seconds. All leads share beat
/// timing; the S offset is solved on the lead II composite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordTruth {
    pub record_id: String,
    pub r_times_s: Vec<f64>,
    pub q_onset_s: Vec<f64>,
    pub t_end_s: Vec<f64>,
    pub s_offset_s: Vec<f64>,
    pub qt_s: f64,
    pub qrs_s: f64,
    pub heart_rate_bpm: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub records: Vec<RecordTruth>,
}

/// One Gaussian bump: (amplitude, center offset from R in s, sigma in s).
type Bump = (f64, f64, f64);

const Q_CENTER: f64 = -0.042;
const SIGMA_P: f64 = 0.025;
const SIGMA_Q: f64 = 0.011;
const SIGMA_R: f64 = 0.013;
const SIGMA_S: f64 = 0.020;
const SIGMA_T: f64 = 0.062;

/// Source template amplitudes (P, Q, R, S, T). Template B has an inverted
/// T and deep S so the B-dominated lead III decorrelates from the rest.
const AMPS_A: [f64; 5] = [0.11, -0.24, 1.0, -0.30, 0.38];
const AMPS_B: [f64; 5] = [0.06, -0.10, 0.45, -0.40, -0.22];

/// Lead mixes (weight on template A, weight on template B) for the eight
/// acquired leads; the derived limb leads follow from I and II.
const MIX_I: (f64, f64) = (0.95, 0.0);
const MIX_II: (f64, f64) = (1.0, 0.3);
const MIX_CHEST: [(f64, f64); 6] = [
    (-0.40, 0.20),
    (0.50, 0.25),
    (0.75, 0.20),
    (1.00, 0.15),
    (1.10, 0.08),
    (1.05, 0.04),
];

struct BeatShape {
    /// Bump layout shared by both templates (centers, sigmas).
    centers: [f64; 5],
    sigmas: [f64; 5],
    scale_a: f64,
    scale_b: f64,
}

impl BeatShape {
    fn bumps(&self, mix: (f64, f64)) -> [Bump; 5] {
        let mut out = [(0.0, 0.0, 0.0); 5];
        for i in 0..5 {
            let amp = mix.0 * self.scale_a * AMPS_A[i] + mix.1 * self.scale_b * AMPS_B[i];
            out[i] = (amp, self.centers[i], self.sigmas[i]);
        }
        out
    }
}

fn eval_bumps(bumps: &[Bump; 5], t: f64) -> f64 {
    bumps
        .iter()
        .map(|&(a, c, s)| a * (-((t - c) / s).powi(2) / 2.0).exp())
        .sum()
}

fn eval_bumps_slope(bumps: &[Bump; 5], t: f64) -> f64 {
    bumps
        .iter()
        .map(|&(a, c, s)| {
            let u = (t - c) / s;
            -a * u / s * (-u * u / 2.0).exp()
        })
        .sum()
}

/// Analytic S offset on a fine grid: the tangent at the steepest point of
/// the S recovery (within 80 ms after the S trough) extrapolated to the
/// zero baseline. This is the definition the discrete detector applies to
/// sampled leads.
fn analytic_s_offset(bumps: &[Bump; 5]) -> f64 {
    const GRID: f64 = 2e-4;
    let mut s_trough = 0.004;
    let mut s_min = f64::INFINITY;
    let mut t = 0.004;
    while t <= 0.12 {
        let v = eval_bumps(bumps, t);
        if v < s_min {
            s_min = v;
            s_trough = t;
        }
        t += GRID;
    }
    let mut anchor = s_trough;
    let mut steepest = f64::NEG_INFINITY;
    let mut t = s_trough;
    while t <= s_trough + 0.08 {
        let d = eval_bumps_slope(bumps, t);
        if d > steepest {
            steepest = d;
            anchor = t;
        }
        t += GRID;
    }
    if steepest <= 0.0 {
        return s_trough;
    }
    anchor + (0.0 - eval_bumps(bumps, anchor)) / steepest
}

/// Places the S bump center so the analytic S offset of the lead II
/// composite lands exactly at Q_CENTER + qrs.
fn solve_s_center(shape: &mut BeatShape, qrs: f64) -> f64 {
    let target = Q_CENTER + qrs;
    let (mut lo, mut hi) = (0.012, target + 0.02);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        shape.centers[3] = mid;
        let off = analytic_s_offset(&shape.bumps(MIX_II));
        if off < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mid = 0.5 * (lo + hi);
    shape.centers[3] = mid;
    mid
}

fn render_template(
    beat_times: &[f64],
    bumps: &[Bump; 5],
    n: usize,
    fs: f64,
) -> Vec<f64> {
    let mut out = vec![0.0f64; n];
    for &r in beat_times {
        for &(a, c, s) in bumps.iter() {
            if a == 0.0 {
                continue;
            }
            let lo = (((r + c - 4.0 * s) * fs).floor().max(0.0)) as usize;
            let hi = ((((r + c + 4.0 * s) * fs).ceil()) as usize).min(n.saturating_sub(1));
            for (i, slot) in out.iter_mut().enumerate().take(hi + 1).skip(lo) {
                let t = i as f64 / fs;
                let u = (t - r - c) / s;
                *slot += a * (-u * u / 2.0).exp();
            }
        }
    }
    out
}

/// Generates `num_records` raw records (millivolt-scale, at the source
/// sampling rate) plus analytic ground truth. Fixed seed, fixed output.
pub fn synth_generate(config: &SynthConfig) -> Result<(Vec<EcgRecord>, GroundTruth)> {
    config.validate()?;
    let fs = config.sampling_rate;
    let n = (config.duration_s * fs).round() as usize;
    let mut records = Vec::with_capacity(config.num_records);
    let mut truth = GroundTruth::default();

    for idx in 0..config.num_records {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0x5e_c0_4d + idx as u64));
        let id = format!("synth-{:06}", idx);
        let hr = rng.gen_range(config.heart_rate_bpm.0..=config.heart_rate_bpm.1);
        let qt = rng.gen_range(config.qt_s.0..=config.qt_s.1);
        let qrs = rng.gen_range(config.qrs_s.0..=config.qrs_s.1);
        let rr = 60.0 / hr;

        let mut shape = BeatShape {
            centers: [-0.17, Q_CENTER, 0.0, 0.05, qt + Q_CENTER - 2.0 * SIGMA_T],
            sigmas: [SIGMA_P, SIGMA_Q, SIGMA_R, SIGMA_S, SIGMA_T],
            scale_a: rng.gen_range(0.9..1.1),
            scale_b: rng.gen_range(0.9..1.1),
        };
        let s_center = solve_s_center(&mut shape, qrs);
        let s_offset_rel = analytic_s_offset(&shape.bumps(MIX_II));
        debug_assert!((s_offset_rel - (Q_CENTER + qrs)).abs() < 2e-3);

        // Beat train with small per-beat jitter; margins keep every beat's
        // full morphology (and its segmentation window) inside the record.
        let mut beat_times = Vec::new();
        let mut t = rng.gen_range(0.5..0.5 + 0.5 * rr);
        while t < config.duration_s - 0.6 {
            beat_times.push(t);
            t += rr * (1.0 + rng.gen_range(-0.01..0.01));
        }

        let template_a = render_template(&beat_times, &shape.bumps((1.0, 0.0)), n, fs);
        let template_b = render_template(&beat_times, &shape.bumps((0.0, 1.0)), n, fs);

        // Per-lead wander phase/frequency and noise for the acquired leads.
        let wander_freq = rng.gen_range(0.15..0.40);
        let mut acquired: Vec<Vec<f32>> = Vec::with_capacity(8);
        for mix_lead in std::iter::once(MIX_I)
            .chain(std::iter::once(MIX_II))
            .chain(MIX_CHEST.iter().copied())
        {
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let noise_rng_seed = rng.gen::<u64>();
            let mut noise = ChaCha8Rng::seed_from_u64(noise_rng_seed);
            let lead: Vec<f32> = (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    let clean = mix_lead.0 * template_a[i] + mix_lead.1 * template_b[i];
                    let wander = config.baseline_wander_amp
                        * (std::f64::consts::TAU * wander_freq * t + phase).sin();
                    let noise_v = config.noise_std * gaussian(&mut noise);
                    (clean + wander + noise_v) as f32
                })
                .collect();
            acquired.push(lead);
        }
        let record = assemble_record(
            id.clone(),
            fs as f32,
            &acquired[0],
            &acquired[1],
            [
                &acquired[2],
                &acquired[3],
                &acquired[4],
                &acquired[5],
                &acquired[6],
                &acquired[7],
            ],
        )?;
        records.push(record);

        let _ = s_center;
        truth.records.push(RecordTruth {
            record_id: id,
            r_times_s: beat_times.clone(),
            q_onset_s: beat_times.iter().map(|r| r + Q_CENTER).collect(),
            t_end_s: beat_times.iter().map(|r| r + Q_CENTER + qt).collect(),
            s_offset_s: beat_times.iter().map(|r| r + s_offset_rel).collect(),
            qt_s: qt,
            qrs_s: qrs,
            heart_rate_bpm: hr,
        });
    }
    Ok((records, truth))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller from two uniforms.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ---------------------------------------------------------------------------
// Dataset construction and splits
// ---------------------------------------------------------------------------

/// One training example: a noise-filled masked record and its clean target.
#[derive(Debug, Clone)]
pub struct DatasetPair {
    pub masked: MaskedEcg,
    pub target: EcgRecord,
    pub config_name: String,
}

/// Crosses every record with the full 17-mask catalog: |out| = 17 |records|,
/// record-major in catalog order. Noise seeds derive from `seed`.
pub fn build_dataset(records: &[EcgRecord], seed: u64) -> Result<Vec<DatasetPair>> {
    build_pairs(records, &mask_catalog(), seed)
}

/// Record-major crossing with an explicit mask list.
pub fn build_pairs(
    records: &[EcgRecord],
    configs: &[MaskConfig],
    seed: u64,
) -> Result<Vec<DatasetPair>> {
    let mut pairs = Vec::with_capacity(records.len() * configs.len());
    for record in records {
        for (ci, config) in configs.iter().enumerate() {
            let mask = primer_mask(*config, record.len())?;
            let noise_seed = mix(seed, mix(hash_str(&record.id), ci as u64));
            pairs.push(DatasetPair {
                masked: apply_mask(record, &mask, noise_seed)?,
                target: record.clone(),
                config_name: config.name(),
            });
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Deterministic id-hash split (70/15/15): augmentation never leaks a
/// record across splits.
pub fn split_of(record_id: &str) -> Split {
    // FNV alone avalanches poorly on near-sequential ids; finalize it.
    let h = mix(hash_str(record_id), 0x511745) as f64 / u64::MAX as f64;
    if h < 0.70 {
        Split::Train
    } else if h < 0.85 {
        Split::Val
    } else {
        Split::Test
    }
}

/// Dataset manifest: record ids per split, serialized as JSON.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Manifest {
    pub fn from_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Manifest {
        let mut m = Manifest::default();
        for id in ids {
            match split_of(id) {
                Split::Train => m.train.push(id.to_string()),
                Split::Val => m.val.push(id.to_string()),
                Split::Test => m.test.push(id.to_string()),
            }
        }
        m
    }
}

// ---------------------------------------------------------------------------
// CSV record format
// ---------------------------------------------------------------------------

/// Writes `# fs=<hz>`, a canonical header row, then one row per sample.
/// Floats use the shortest representation that round-trips f32.
pub fn write_csv(record: &EcgRecord, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# fs={}", record.sampling_rate)?;
    let header: Vec<&str> = LeadId::ALL.iter().map(|l| l.name()).collect();
    writeln!(w, "{}", header.join(","))?;
    for i in 0..record.len() {
        let row: Vec<String> = LeadId::ALL
            .iter()
            .map(|&l| format!("{}", record.lead(l)[i]))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Reads the format written by [`write_csv`]. The record id is taken from
/// the file stem. Records whose values all lie in [-1, 1] are marked
/// normalized.
pub fn read_csv(path: &Path) -> Result<EcgRecord> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let fs_line = lines
        .next()
        .ok_or_else(|| Error::Format("empty CSV".into()))??;
    let fs: f32 = fs_line
        .strip_prefix("# fs=")
        .ok_or_else(|| Error::Format("first line must be `# fs=<hz>`".into()))?
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad sampling rate in {fs_line:?}")))?;
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("missing header row".into()))??;
    let expected: Vec<&str> = LeadId::ALL.iter().map(|l| l.name()).collect();
    if header.split(',').collect::<Vec<_>>() != expected {
        return Err(Error::Format(format!(
            "header must be the 12 canonical lead names, got {header:?}"
        )));
    }
    let mut columns: Vec<Vec<f32>> = vec![Vec::new(); LEAD_COUNT];
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != LEAD_COUNT {
            return Err(Error::Format(format!(
                "row {} has {} cells, expected 12",
                lineno + 3,
                cells.len()
            )));
        }
        for (col, cell) in columns.iter_mut().zip(cells) {
            let v: f32 = cell
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("non-numeric cell {cell:?}")))?;
            col.push(v);
        }
    }
    let n = columns[0].len();
    if n == 0 {
        return Err(Error::Format("CSV contains no data rows".into()));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "record".to_string());
    let samples: Vec<f32> = columns.into_iter().flatten().collect();
    let mut rec = EcgRecord::new(id, fs, samples, n)?;
    if rec.samples().iter().all(|v| (-1.0..=1.0).contains(v)) {
        rec.set_normalized()?;
    }
    Ok(rec)
}

// ---------------------------------------------------------------------------
// Tensor container (weights, optimizer state)
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"ECGR";
const FORMAT_VERSION: u32 = 1;

/// Binary tensor container: magic "ECGR", format version u32 LE, tensor
/// count u32 LE, then per tensor {name len u32, UTF-8 name, rank u32,
/// dims u32[], f32 data LE}.
pub fn write_tensors(path: &Path, tensors: &[(String, &Tensor<f32>)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape.len() as u32).to_le_bytes())?;
        for &d in &tensor.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &tensor.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CorruptFile(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::CorruptFile(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::CorruptFile("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            read_exact(&mut r, &mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        tensors.push((name, Tensor { shape, data }));
    }
    Ok(tensors)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::CorruptFile("unexpected end of file".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

use crate::model::{Model, ModelConfig};

/// Saves every model tensor (weights and running statistics).
pub fn save_weights(model: &Model, path: &Path) -> Result<()> {
    let tensors: Vec<(String, &Tensor<f32>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), &p.tensor))
        .collect();
    write_tensors(path, &tensors)
}

/// Rebuilds a model of the given configuration from a weights file,
/// validating that every expected tensor is present with the right shape.
pub fn load_weights(path: &Path, config: ModelConfig) -> Result<Model> {
    let tensors = read_tensors(path)?;
    let mut model = Model::build(config, 0)?;
    let mut loaded = std::collections::HashMap::new();
    for (name, tensor) in tensors {
        loaded.insert(name, tensor);
    }
    for param in model.params_mut() {
        let tensor = loaded.remove(&param.name).ok_or_else(|| {
            Error::ShapeMismatch(format!("weights file is missing tensor {}", param.name))
        })?;
        if tensor.shape != param.tensor.shape {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} has shape {:?}, config wants {:?}",
                param.name, tensor.shape, param.tensor.shape
            )));
        }
        param.tensor = tensor;
    }
    if let Some(name) = loaded.keys().next() {
        return Err(Error::ShapeMismatch(format!(
            "weights file contains unexpected tensor {name}"
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecg::LeadId;

    fn small_config() -> SynthConfig {
        SynthConfig { num_records: 2, duration_s: 10.0, ..Default::default() }
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = small_config();
        let (a, ta) = synth_generate(&cfg).unwrap();
        let (b, tb) = synth_generate(&cfg).unwrap();
        assert_eq!(a[0].samples(), b[0].samples());
        assert_eq!(ta.records[0].r_times_s, tb.records[0].r_times_s);
        let mut other = small_config();
        other.seed = 1;
        let (c, _) = synth_generate(&other).unwrap();
        assert_ne!(a[0].samples(), c[0].samples());
    }

    #[test]
    fn einthoven_holds_exactly() {
        let (records, _) = synth_generate(&small_config()).unwrap();
        for rec in &records {
            let (i, ii, iii) = (rec.lead(LeadId::I), rec.lead(LeadId::II), rec.lead(LeadId::III));
            for k in 0..rec.len() {
                let err = (i[k] + iii[k] - ii[k]).abs();
                let scale = ii[k].abs().max(1.0);
                assert!(err <= 4.0 * f32::EPSILON * scale, "einthoven violated: {err}");
            }
        }
    }

    #[test]
    fn ground_truth_qt_is_exact_by_construction() {
        let (_, truth) = synth_generate(&small_config()).unwrap();
        for rec in &truth.records {
            for (q, t) in rec.q_onset_s.iter().zip(&rec.t_end_s) {
                assert!((t - q - rec.qt_s).abs() < 1e-12);
            }
            for (q, s) in rec.q_onset_s.iter().zip(&rec.s_offset_s) {
                assert!((s - q - rec.qrs_s).abs() < 2e-3, "qrs placement off");
            }
        }
    }

    #[test]
    fn dataset_cardinality() {
        let n = 12;
        let recs: Vec<EcgRecord> = (0..3)
            .map(|i| {
                let mut r =
                    EcgRecord::new(format!("r{i}"), 51.2, vec![0.1; 12 * n], n).unwrap();
                r.set_normalized().unwrap();
                r
            })
            .collect();
        let pairs = build_dataset(&recs, 9).unwrap();
        assert_eq!(pairs.len(), 17 * 3);
        assert_eq!(pairs[0].config_name, "C1");
        assert_eq!(pairs[16].config_name, "C_V6");
        assert_eq!(pairs[0].target.id, "r0");
        assert_eq!(pairs[17].target.id, "r1");
        assert!(build_dataset(&[], 0).unwrap().is_empty());
    }

    #[test]
    fn split_fractions_roughly_hold() {
        let ids: Vec<String> = (0..2000).map(|i| format!("synth-{i:06}")).collect();
        let m = Manifest::from_ids(ids.iter().map(|s| s.as_str()));
        let total = (m.train.len() + m.val.len() + m.test.len()) as f64;
        assert_eq!(total as usize, 2000);
        assert!((m.train.len() as f64 / total - 0.70).abs() < 0.05);
        assert!((m.val.len() as f64 / total - 0.15).abs() < 0.04);
        assert!((m.test.len() as f64 / total - 0.15).abs() < 0.04);
        // Deterministic.
        let m2 = Manifest::from_ids(ids.iter().map(|s| s.as_str()));
        assert_eq!(m.train, m2.train);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = std::env::temp_dir().join("ecgrecon-csv-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.csv");
        let samples: Vec<f32> = (0..12 * 7).map(|i| (i as f32 * 0.37).sin() * 0.9).collect();
        let mut rec = EcgRecord::new("rt", 51.2, samples, 7).unwrap();
        rec.set_normalized().unwrap();
        write_csv(&rec, &path).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.samples(), rec.samples());
        assert_eq!(back.len(), 7);
        assert!(back.is_normalized());
        assert!((back.sampling_rate - 51.2).abs() < 1e-6);
    }

    #[test]
    fn csv_rejects_wrong_column_count() {
        let dir = std::env::temp_dir().join("ecgrecon-csv-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad13.csv");
        let mut text = String::from("# fs=51.2\n");
        text.push_str("I,II,III,aVR,aVL,aVF,V1,V2,V3,V4,V5,V6\n");
        text.push_str(&vec!["0.0"; 13].join(","));
        text.push('\n');
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_csv(&path), Err(Error::Format(_))));
    }

    #[test]
    fn csv_rejects_non_numeric() {
        let dir = std::env::temp_dir().join("ecgrecon-csv-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("nan.csv");
        let mut text = String::from("# fs=51.2\n");
        text.push_str("I,II,III,aVR,aVL,aVF,V1,V2,V3,V4,V5,V6\n");
        text.push_str(&vec!["abc"; 12].join(","));
        text.push('\n');
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_csv(&path), Err(Error::Format(_))));
    }

    #[test]
    fn weights_roundtrip_bitwise() {
        let dir = std::env::temp_dir().join("ecgrecon-w-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("w.ecgr");
        let cfg = ModelConfig {
            enc2d_channels: [2, 2, 2, 2],
            enc1d_channels: [1, 1, 1, 1],
            transition_channels: 2,
            ..Default::default()
        };
        let model = Model::build(cfg.clone(), 77).unwrap();
        save_weights(&model, &path).unwrap();
        let loaded = load_weights(&path, cfg).unwrap();
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.tensor.data.iter().zip(&b.tensor.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncated_weights_rejected() {
        let dir = std::env::temp_dir().join("ecgrecon-w-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.ecgr");
        let cfg = ModelConfig {
            enc2d_channels: [2, 2, 2, 2],
            enc1d_channels: [1, 1, 1, 1],
            transition_channels: 2,
            ..Default::default()
        };
        let model = Model::build(cfg.clone(), 1).unwrap();
        save_weights(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_weights(&path, cfg), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn wrong_config_names_offending_tensor() {
        let dir = std::env::temp_dir().join("ecgrecon-w-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("shape.ecgr");
        let cfg = ModelConfig {
            enc2d_channels: [2, 2, 2, 2],
            enc1d_channels: [1, 1, 1, 1],
            transition_channels: 2,
            ..Default::default()
        };
        let model = Model::build(cfg, 1).unwrap();
        save_weights(&model, &path).unwrap();
        let other = ModelConfig {
            enc2d_channels: [3, 2, 2, 2],
            enc1d_channels: [1, 1, 1, 1],
            transition_channels: 2,
            ..Default::default()
        };
        match load_weights(&path, other) {
            Err(Error::ShapeMismatch(msg)) => assert!(msg.contains("enc2d.0.conv.w")),
            Err(other) => panic!("expected shape mismatch, got {other:?}"),
            Ok(_) => panic!("expected shape mismatch, load succeeded"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = std::env::temp_dir().join("ecgrecon-w-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("magic.ecgr");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_tensors(&path), Err(Error::CorruptFile(_))));
    }
}
