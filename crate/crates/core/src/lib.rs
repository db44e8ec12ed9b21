//! 12-lead ECG reconstruction toolkit: recover missing segments and missing
//! leads with a hybrid 1D/2D U-Net trained on a composite MSE + Pearson
//! objective, against a CopyPaste baseline, with clinical and distortion
//! metrics evaluated per masking configuration.

pub mod autodiff;
pub mod baseline;
pub mod dataio;
pub mod ecg;
pub mod error;
pub mod fiducials;
pub mod loss;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod train;

pub use ecg::{assemble_record, derive_augmented_leads, EcgRecord, LeadId, LEAD_COUNT};
pub use error::{Error, Result};
pub use masking::{apply_mask, mask_catalog, primer_mask, MaskConfig, MaskedEcg, PrimerMask};

/// Sizes the worker pool used by evaluation and training. Ignored if a
/// pool already exists in this process; merge order stays deterministic
/// regardless of thread count.
pub fn set_worker_threads(threads: usize) {
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build_global();
}
