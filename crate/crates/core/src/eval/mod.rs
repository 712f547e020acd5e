//! Automatic metrics, the fidelity checker and entity-label recall.

mod fidelity;
mod ngram;
mod recall;
mod report;

pub use fidelity::{fidelity, sample_violations, FidelityReport, Violation};
pub use ngram::{bleu, bleu_all, lcs_len, rouge_l, Smoothing, BLEU_EPSILON, ROUGE_BETA};
pub use recall::{label_recall, RecallTable};
pub use report::{EvalReport, REPORT_SCHEMA};
