//! CopyPaste baseline: fill missing signal by replicating the primers.

use crate::ecg::{EcgRecord, LeadId};
use crate::error::{Error, Result};
use crate::masking::MaskedEcg;

/// Reconstructs by tiling each lead's primer periodically across the lead
/// (wrapping in both directions from the primer window). Leads without a
/// primer copy the filled signal of the reference lead, the lowest-ordinal
/// lead that has one. Primer cells are preserved exactly.
pub fn copy_paste(masked: &MaskedEcg) -> Result<EcgRecord> {
    let n = masked.n();
    let ranges = masked.mask.keep_ranges();
    let reference = LeadId::ALL
        .iter()
        .position(|&l| !ranges[l.ordinal()].is_empty())
        .ok_or_else(|| Error::invalid("copy_paste needs at least one primer cell"))?;

    let mut leads: Vec<Option<Vec<f32>>> = vec![None; 12];
    for lead in LeadId::ALL {
        let o = lead.ordinal();
        if ranges[o].is_empty() {
            continue;
        }
        // Tile from the first (for catalog masks, only) primer run.
        let (start, end) = ranges[o][0];
        let len = end - start;
        let src = masked.lead(lead);
        let mut filled = Vec::with_capacity(n);
        for idx in 0..n {
            if masked.mask.keep(lead, idx) {
                filled.push(src[idx]);
            } else {
                let phase = (idx as isize - start as isize).rem_euclid(len as isize) as usize;
                filled.push(src[start + phase]);
            }
        }
        leads[o] = Some(filled);
    }
    let reference_fill = leads[reference].clone().unwrap();
    let mut samples = Vec::with_capacity(12 * n);
    for o in 0..12 {
        match &leads[o] {
            Some(lead) => samples.extend_from_slice(lead),
            None => samples.extend_from_slice(&reference_fill),
        }
    }
    let mut rec = EcgRecord::new(masked.source_id.clone(), masked.sampling_rate, samples, n)?;
    // Primer values come from a normalized source; tiling cannot escape range.
    rec.set_normalized()?;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecg::assemble_record;
    use crate::masking::{apply_mask, mask_catalog, primer_mask, MaskConfig, PrimerMask};
    use crate::preprocess::{minmax_normalize, NormalizeScope};

    fn normalized_record(n: usize) -> EcgRecord {
        let i: Vec<f32> = (0..n).map(|k| (k as f32 * 0.4).sin()).collect();
        let ii: Vec<f32> = (0..n).map(|k| (k as f32 * 0.15).cos()).collect();
        let v: Vec<f32> = (0..n).map(|k| ((k % 7) as f32) / 7.0 - 0.5).collect();
        let rec = assemble_record("cp", 51.2, &i, &ii, [&v, &v, &v, &v, &v, &v]).unwrap();
        minmax_normalize(&rec, NormalizeScope::PerRecord).unwrap().0
    }

    #[test]
    fn tiles_primer_periodically() {
        let rec = normalized_record(4);
        let mask = PrimerMask::from_ranges(4, &vec![vec![(0, 2)]; 12]).unwrap();
        let masked = apply_mask(&rec, &mask, 1).unwrap();
        let out = copy_paste(&masked).unwrap();
        for lead in LeadId::ALL {
            let l = out.lead(lead);
            assert_eq!(l[2], l[0]);
            assert_eq!(l[3], l[1]);
        }
    }

    #[test]
    fn lead_mask_duplicates_reference_lead() {
        let rec = normalized_record(64);
        let mask = primer_mask(MaskConfig::Lead(LeadId::I), 64).unwrap();
        let masked = apply_mask(&rec, &mask, 2).unwrap();
        let out = copy_paste(&masked).unwrap();
        let lead_i = out.lead(LeadId::I).to_vec();
        assert_eq!(lead_i, rec.lead(LeadId::I));
        for lead in LeadId::ALL {
            assert_eq!(out.lead(lead), lead_i.as_slice(), "lead {lead}");
        }
    }

    #[test]
    fn identity_on_full_mask() {
        let rec = normalized_record(32);
        let masked = apply_mask(&rec, &PrimerMask::full(32), 5).unwrap();
        let out = copy_paste(&masked).unwrap();
        assert_eq!(out.samples(), rec.samples());
    }

    #[test]
    fn primers_preserved_on_all_catalog_masks() {
        let rec = normalized_record(100);
        for config in mask_catalog() {
            let mask = primer_mask(config, 100).unwrap();
            let masked = apply_mask(&rec, &mask, 9).unwrap();
            let out = copy_paste(&masked).unwrap();
            for lead in LeadId::ALL {
                for idx in 0..100 {
                    if mask.keep(lead, idx) {
                        assert_eq!(
                            out.lead(lead)[idx],
                            rec.lead(lead)[idx],
                            "{} primer altered at {lead}:{idx}",
                            config.name()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn segment_output_periodic_with_primer_length() {
        let rec = normalized_record(512);
        let mask = primer_mask(MaskConfig::Segment(3), 512).unwrap();
        let masked = apply_mask(&rec, &mask, 7).unwrap();
        let out = copy_paste(&masked).unwrap();
        let ranges = mask.keep_ranges();
        for lead in LeadId::ALL {
            let (start, end) = ranges[lead.ordinal()][0];
            let period = end - start;
            let l = out.lead(lead);
            for idx in 0..512 - period {
                assert_eq!(l[idx], l[idx + period], "lead {lead} idx {idx}");
            }
        }
    }

    #[test]
    fn no_primer_anywhere_is_an_error() {
        let rec = normalized_record(16);
        let empty = PrimerMask::from_ranges(16, &vec![vec![]; 12]).unwrap();
        let masked = apply_mask(&rec, &empty, 3).unwrap();
        assert!(copy_paste(&masked).is_err());
    }
}
