//! Fidelity, privacy and utility metrics over decoded corpora.

mod fidelity;
mod privacy;
mod report;
mod utility;

pub use fidelity::{bigram, dimwise, fidelity, r2, seq_bigram, unigram, FidelityReport, FrequencyVector};
pub use privacy::{
    aia, mia, nearest_distances, sample_records, top_codes, AiaReport, Confusion, MiaReport, MultiHot, PrivacyReport,
    PRIVACY_NOTE,
};
pub use report::{report_csv, ReportRow, COLUMNS};
pub use utility::{tstr_probe, LabelResult, ProbeConfig, UtilityReport, PROBE_NAME};
