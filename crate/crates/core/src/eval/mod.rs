//! Translation, contrastive scoring, BLEU, memory accounting and
//! categorization export.

pub mod assignments;
pub mod bleu;
pub mod memory;
pub mod scoring;
pub mod translate;

pub use assignments::{export_assignments, parse_assignments, AssignmentExport};
pub use bleu::bleu;
pub use memory::{measure_peak, memory_report, memory_row, report_tsv, MemoryReport, MemoryRow, PeakAlloc, Scenario};
pub use scoring::{contrastive_eval, score_examples, score_sequence, ContrastiveReport, ModelScorer, Scorer};
pub use translate::{translate_document, ContextMode, DecodeConfig};
