//! 12-lead ECG data model: lead naming, record container, derived-lead algebra.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Number of leads in a standard 12-lead ECG.
pub const LEAD_COUNT: usize = 12;

/// One of the 12 standard leads, in canonical order
/// `[I, II, III, aVR, aVL, aVF, V1, V2, V3, V4, V5, V6]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LeadId {
    I,
    II,
    III,
    AVR,
    AVL,
    AVF,
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
}

impl LeadId {
    pub const ALL: [LeadId; LEAD_COUNT] = [
        LeadId::I,
        LeadId::II,
        LeadId::III,
        LeadId::AVR,
        LeadId::AVL,
        LeadId::AVF,
        LeadId::V1,
        LeadId::V2,
        LeadId::V3,
        LeadId::V4,
        LeadId::V5,
        LeadId::V6,
    ];

    pub fn ordinal(self) -> usize {
        Self::ALL.iter().position(|&l| l == self).unwrap()
    }

    pub fn from_ordinal(ord: usize) -> Result<LeadId> {
        Self::ALL
            .get(ord)
            .copied()
            .ok_or_else(|| Error::invalid(format!("lead ordinal {ord} out of range 0..12")))
    }

    pub fn name(self) -> &'static str {
        match self {
            LeadId::I => "I",
            LeadId::II => "II",
            LeadId::III => "III",
            LeadId::AVR => "aVR",
            LeadId::AVL => "aVL",
            LeadId::AVF => "aVF",
            LeadId::V1 => "V1",
            LeadId::V2 => "V2",
            LeadId::V3 => "V3",
            LeadId::V4 => "V4",
            LeadId::V5 => "V5",
            LeadId::V6 => "V6",
        }
    }

    pub fn from_name(name: &str) -> Result<LeadId> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.name() == name)
            .ok_or_else(|| Error::invalid(format!("unknown lead name {name:?}")))
    }
}

impl std::fmt::Display for LeadId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A 12-lead ECG: a 12xN matrix of voltages plus sampling metadata.
///
/// Voltages are millivolts before normalization and unitless in [-1, 1]
/// once the `normalized` flag is set.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub id: String,
    pub sampling_rate: f32,
    samples: Vec<f32>,
    n: usize,
    normalized: bool,
}

impl EcgRecord {
    /// Builds a record from a flat row-major 12xN matrix.
    pub fn new(id: impl Into<String>, sampling_rate: f32, samples: Vec<f32>, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("record must have at least one sample per lead"));
        }
        if samples.len() != LEAD_COUNT * n {
            return Err(Error::shape(format!(
                "expected {} samples for 12x{n}, got {}",
                LEAD_COUNT * n,
                samples.len()
            )));
        }
        if !(sampling_rate > 0.0) {
            return Err(Error::invalid("sampling rate must be positive"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("record contains non-finite samples"));
        }
        Ok(EcgRecord {
            id: id.into(),
            sampling_rate,
            samples,
            n,
            normalized: false,
        })
    }

    /// Number of samples per lead.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn lead(&self, lead: LeadId) -> &[f32] {
        let o = lead.ordinal();
        &self.samples[o * self.n..(o + 1) * self.n]
    }

    pub fn lead_mut(&mut self, lead: LeadId) -> &mut [f32] {
        let o = lead.ordinal();
        &mut self.samples[o * self.n..(o + 1) * self.n]
    }

    /// Flat row-major 12xN view, canonical lead order.
    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f32] {
        &mut self.samples
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Marks the record as min-max normalized. Every entry must lie in [-1, 1].
    pub fn set_normalized(&mut self) -> Result<()> {
        if self.samples.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::invalid("normalized record has entries outside [-1, 1]"));
        }
        self.normalized = true;
        Ok(())
    }

    /// Replaces the sample matrix while keeping id and metadata.
    pub fn with_samples(&self, samples: Vec<f32>, n: usize, sampling_rate: f32) -> Result<Self> {
        let mut rec = EcgRecord::new(self.id.clone(), sampling_rate, samples, n)?;
        rec.normalized = false;
        Ok(rec)
    }
}

/// Derives the four augmented limb leads from leads I and II.
///
/// III = II - I, aVR = -(I + II)/2, aVL = I - II/2, aVF = II - I/2.
/// The Einthoven identity I + III = II holds by construction.
pub fn derive_augmented_leads(lead_i: &[f32], lead_ii: &[f32]) -> Result<[Vec<f32>; 4]> {
    if lead_i.len() != lead_ii.len() {
        return Err(Error::invalid(format!(
            "lead I has {} samples, lead II has {}",
            lead_i.len(),
            lead_ii.len()
        )));
    }
    if lead_i.iter().chain(lead_ii).any(|v| !v.is_finite()) {
        return Err(Error::invalid("leads I/II contain non-finite samples"));
    }
    let n = lead_i.len();
    let mut iii = Vec::with_capacity(n);
    let mut avr = Vec::with_capacity(n);
    let mut avl = Vec::with_capacity(n);
    let mut avf = Vec::with_capacity(n);
    for (&a, &b) in lead_i.iter().zip(lead_ii) {
        iii.push(b - a);
        avr.push(-(a + b) / 2.0);
        avl.push(a - b / 2.0);
        avf.push(b - a / 2.0);
    }
    Ok([iii, avr, avl, avf])
}

/// Assembles a full 12-lead record from the eight acquired leads
/// (I, II, V1..V6), deriving III and the augmented leads.
pub fn assemble_record(
    id: impl Into<String>,
    sampling_rate: f32,
    lead_i: &[f32],
    lead_ii: &[f32],
    chest: [&[f32]; 6],
) -> Result<EcgRecord> {
    let n = lead_i.len();
    if lead_ii.len() != n || chest.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("all eight leads must have equal length"));
    }
    let [iii, avr, avl, avf] = derive_augmented_leads(lead_i, lead_ii)?;
    let mut samples = Vec::with_capacity(LEAD_COUNT * n);
    samples.extend_from_slice(lead_i);
    samples.extend_from_slice(lead_ii);
    samples.extend_from_slice(&iii);
    samples.extend_from_slice(&avr);
    samples.extend_from_slice(&avl);
    samples.extend_from_slice(&avf);
    for c in chest {
        samples.extend_from_slice(c);
    }
    EcgRecord::new(id, sampling_rate, samples, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lead_name_ordinal_roundtrip() {
        for (ord, lead) in LeadId::ALL.iter().enumerate() {
            assert_eq!(lead.ordinal(), ord);
            assert_eq!(LeadId::from_ordinal(ord).unwrap(), *lead);
            assert_eq!(LeadId::from_name(lead.name()).unwrap(), *lead);
        }
        assert!(LeadId::from_ordinal(12).is_err());
        assert!(LeadId::from_name("V7").is_err());
    }

    #[test]
    fn augmented_leads_constants() {
        let i = vec![1.0; 4];
        let ii = vec![3.0; 4];
        let [iii, avr, avl, avf] = derive_augmented_leads(&i, &ii).unwrap();
        assert!(iii.iter().all(|&v| v == 2.0));
        assert!(avr.iter().all(|&v| v == -2.0));
        assert!(avl.iter().all(|&v| v == -0.5));
        assert!(avf.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn augmented_leads_zeros() {
        let z = vec![0.0; 8];
        let out = derive_augmented_leads(&z, &z).unwrap();
        for lead in out {
            assert!(lead.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn augmented_leads_length_mismatch() {
        assert!(derive_augmented_leads(&[0.0; 3], &[0.0; 4]).is_err());
    }

    #[test]
    fn einthoven_identity_random() {
        let mut state = 0x9e3779b9u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / (1u64 << 31) as f32) - 1.0
        };
        let i: Vec<f32> = (0..16).map(|_| next()).collect();
        let ii: Vec<f32> = (0..16).map(|_| next()).collect();
        let [iii, ..] = derive_augmented_leads(&i, &ii).unwrap();
        for k in 0..16 {
            // II - I + I == II exactly when the subtraction is exact; allow ulps.
            let err = (i[k] + iii[k] - ii[k]).abs();
            assert!(err <= 4.0 * f32::EPSILON * ii[k].abs().max(1.0), "err {err}");
        }
    }

    #[test]
    fn assemble_zero_record() {
        let z = vec![0.0f32; 16];
        let rec = assemble_record("z", 500.0, &z, &z, [&z, &z, &z, &z, &z, &z]).unwrap();
        assert_eq!(rec.len(), 16);
        assert!(rec.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn assemble_derives_third_lead() {
        let i = vec![1.0f32; 8];
        let ii = vec![3.0f32; 8];
        let v = vec![0.25f32; 8];
        let rec =
            assemble_record("c", 500.0, &i, &ii, [&v, &v, &v, &v, &v, &v]).unwrap();
        assert!(rec.lead(LeadId::III).iter().all(|&x| x == 2.0));
        assert!(rec.lead(LeadId::V3).iter().all(|&x| x == 0.25));
    }

    #[test]
    fn assemble_full_size() {
        let l = vec![0.1f32; 5000];
        let rec =
            assemble_record("r", 500.0, &l, &l, [&l, &l, &l, &l, &l, &l]).unwrap();
        assert_eq!(rec.len(), 5000);
        assert_eq!(rec.samples().len(), 12 * 5000);
    }

    #[test]
    fn non_finite_rejected() {
        let mut l = vec![0.0f32; 8];
        l[3] = f32::NAN;
        let z = vec![0.0f32; 8];
        assert!(assemble_record("n", 500.0, &l, &z, [&z, &z, &z, &z, &z, &z]).is_err());
    }
}
