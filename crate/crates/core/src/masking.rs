//! Primer masks: the 17 canonical masking configurations (C1..C5 segment
//! recovery, C_I..C_V6 lead reconstruction) plus the random and real-life
//! extensions, realized as boolean keep-matrices and noise-filled records.

use crate::ecg::{EcgRecord, LeadId, LEAD_COUNT};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A masking scheme. Segment masks keep one contiguous window per lead;
/// lead masks keep a single full lead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskConfig {
    /// C1..C5: `Segment(k)` splits the leads into G(k) groups, each keeping
    /// one window of the time axis (G: C1=12, C2=6, C3=4, C4=3, C5=2).
    Segment(u8),
    /// C_X: only lead X is available.
    Lead(LeadId),
    /// Per-lead random primer window, at least one sample long.
    Random(u64),
    /// C3 with lead II fully available (digitized paper printout layout).
    RealLife,
}

impl MaskConfig {
    /// Number of lead groups for `Segment(k)`.
    pub fn group_count(k: u8) -> Result<usize> {
        match k {
            1 => Ok(12),
            2 => Ok(6),
            3 => Ok(4),
            4 => Ok(3),
            5 => Ok(2),
            _ => Err(Error::Config(format!("segment mask index {k} outside 1..=5"))),
        }
    }

    /// Serialized name used by CLI flags and report columns.
    pub fn name(&self) -> String {
        match self {
            MaskConfig::Segment(k) => format!("C{k}"),
            MaskConfig::Lead(lead) => format!("C_{}", lead.name()),
            MaskConfig::Random(_) => "C_Rdm".to_string(),
            MaskConfig::RealLife => "C_real-life".to_string(),
        }
    }

    /// Parses a mask name. `C_Rdm` takes its noise window seed from `seed`.
    pub fn parse(name: &str, seed: u64) -> Result<MaskConfig> {
        if let Some(k) = name.strip_prefix('C') {
            if let Ok(idx) = k.parse::<u8>() {
                MaskConfig::group_count(idx)?;
                return Ok(MaskConfig::Segment(idx));
            }
        }
        if name == "C_Rdm" {
            return Ok(MaskConfig::Random(seed));
        }
        if name == "C_real-life" {
            return Ok(MaskConfig::RealLife);
        }
        if let Some(lead) = name.strip_prefix("C_") {
            return Ok(MaskConfig::Lead(LeadId::from_name(lead)?));
        }
        Err(Error::Config(format!("unknown mask configuration {name:?}")))
    }
}

/// Boolean keep-matrix: true cells are primer (available), false cells must
/// be reconstructed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrimerMask {
    keep: Vec<bool>,
    n: usize,
}

impl PrimerMask {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn keep(&self, lead: LeadId, idx: usize) -> bool {
        self.keep[lead.ordinal() * self.n + idx]
    }

    pub fn lead_row(&self, lead: LeadId) -> &[bool] {
        let o = lead.ordinal();
        &self.keep[o * self.n..(o + 1) * self.n]
    }

    /// Contiguous kept runs per lead as [start, end) index pairs.
    pub fn keep_ranges(&self) -> Vec<Vec<(usize, usize)>> {
        LeadId::ALL
            .iter()
            .map(|&lead| {
                let row = self.lead_row(lead);
                let mut runs = Vec::new();
                let mut start = None;
                for (i, &k) in row.iter().enumerate() {
                    match (k, start) {
                        (true, None) => start = Some(i),
                        (false, Some(s)) => {
                            runs.push((s, i));
                            start = None;
                        }
                        _ => {}
                    }
                }
                if let Some(s) = start {
                    runs.push((s, self.n));
                }
                runs
            })
            .collect()
    }

    pub fn from_ranges(n: usize, ranges: &[Vec<(usize, usize)>]) -> Result<PrimerMask> {
        if ranges.len() != LEAD_COUNT {
            return Err(Error::shape(format!("expected 12 lead range lists, got {}", ranges.len())));
        }
        let mut keep = vec![false; LEAD_COUNT * n];
        for (l, runs) in ranges.iter().enumerate() {
            for &(s, e) in runs {
                if s > e || e > n {
                    return Err(Error::invalid(format!("bad keep range [{s}, {e}) for n={n}")));
                }
                keep[l * n + s..l * n + e].fill(true);
            }
        }
        Ok(PrimerMask { keep, n })
    }

    /// All-true mask (identity).
    pub fn full(n: usize) -> PrimerMask {
        PrimerMask { keep: vec![true; LEAD_COUNT * n], n }
    }
}

/// A noise-filled incomplete ECG paired with the mask that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedEcg {
    pub samples: Vec<f32>,
    pub mask: PrimerMask,
    pub source_id: String,
    pub sampling_rate: f32,
}

impl MaskedEcg {
    pub fn n(&self) -> usize {
        self.mask.n
    }

    pub fn lead(&self, lead: LeadId) -> &[f32] {
        let o = lead.ordinal();
        &self.samples[o * self.n()..(o + 1) * self.n()]
    }
}

/// Realizes a mask configuration as a 12xN keep-matrix.
///
/// Segment(k): lead of ordinal `l` belongs to group `g = l / (12 / G)` and
/// keeps columns `[round(g*N/G), round((g+1)*N/G))`, so the group windows
/// tile the time axis. Lead(X): row X all true. RealLife: C3 with row II
/// forced true. Random(seed): one uniform window per lead, length >= 1.
pub fn primer_mask(config: MaskConfig, n: usize) -> Result<PrimerMask> {
    let mut keep = vec![false; LEAD_COUNT * n];
    match config {
        MaskConfig::Segment(k) => {
            let groups = MaskConfig::group_count(k)?;
            if n < groups {
                return Err(Error::invalid(format!(
                    "n={n} too short for {groups} segment groups"
                )));
            }
            fill_segment(&mut keep, n, groups);
        }
        MaskConfig::Lead(lead) => {
            let o = lead.ordinal();
            keep[o * n..(o + 1) * n].fill(true);
        }
        MaskConfig::RealLife => {
            fill_segment(&mut keep, n, 4);
            let o = LeadId::II.ordinal();
            keep[o * n..(o + 1) * n].fill(true);
        }
        MaskConfig::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for l in 0..LEAD_COUNT {
                let (s, e) = loop {
                    let a = rng.gen_range(0..=n);
                    let b = rng.gen_range(0..=n);
                    let (s, e) = if a <= b { (a, b) } else { (b, a) };
                    if e - s >= 1 {
                        break (s, e);
                    }
                };
                keep[l * n + s..l * n + e].fill(true);
            }
        }
    }
    Ok(PrimerMask { keep, n })
}

fn fill_segment(keep: &mut [bool], n: usize, groups: usize) {
    let per_group = LEAD_COUNT / groups;
    for l in 0..LEAD_COUNT {
        let g = l / per_group;
        let start = (g as f64 * n as f64 / groups as f64).round() as usize;
        let end = ((g + 1) as f64 * n as f64 / groups as f64).round() as usize;
        keep[l * n + start..l * n + end].fill(true);
    }
}

/// Copies primer cells and fills masked cells with i.i.d. uniform [0, 1)
/// noise from a generator seeded by `rng_seed`.
pub fn apply_mask(record: &EcgRecord, mask: &PrimerMask, rng_seed: u64) -> Result<MaskedEcg> {
    if record.len() != mask.n {
        return Err(Error::shape(format!(
            "record has {} samples per lead, mask expects {}",
            record.len(),
            mask.n
        )));
    }
    if !record.is_normalized() {
        return Err(Error::invalid("apply_mask requires a normalized record"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let samples = record
        .samples()
        .iter()
        .zip(&mask.keep)
        .map(|(&v, &k)| if k { v } else { rng.gen::<f32>() })
        .collect();
    Ok(MaskedEcg {
        samples,
        mask: mask.clone(),
        source_id: record.id.clone(),
        sampling_rate: record.sampling_rate,
    })
}

/// The 17 canonical training masks: C1..C5 then C_I..C_V6 in lead order.
/// C_Rdm and C_real-life are evaluation-only extensions and excluded.
pub fn mask_catalog() -> Vec<MaskConfig> {
    let mut catalog: Vec<MaskConfig> = (1..=5).map(MaskConfig::Segment).collect();
    catalog.extend(LeadId::ALL.iter().map(|&l| MaskConfig::Lead(l)));
    catalog
}

/// Fraction of kept cells over the 12xN matrix.
pub fn retained_fraction(mask: &PrimerMask) -> f64 {
    mask.keep.iter().filter(|&&k| k).count() as f64 / mask.keep.len() as f64
}

/// Mask serialization for the `mask` CLI stage: keep ranges per lead.
#[derive(Debug, Serialize, Deserialize)]
pub struct MaskFile {
    pub config: String,
    pub n: usize,
    pub keep_ranges: Vec<Vec<(usize, usize)>>,
}

impl MaskFile {
    pub fn new(config: &MaskConfig, mask: &PrimerMask) -> MaskFile {
        MaskFile {
            config: config.name(),
            n: mask.n,
            keep_ranges: mask.keep_ranges(),
        }
    }

    pub fn to_mask(&self) -> Result<PrimerMask> {
        PrimerMask::from_ranges(self.n, &self.keep_ranges)
    }
}
