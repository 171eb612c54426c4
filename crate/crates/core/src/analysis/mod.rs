//! Gradient-flow tracing and decomposition, difficulty scoring, attention
//! export, and corpus BLEU.

pub mod attention;
pub mod bleu;
pub mod difficulty;
pub mod gradflow;

pub use attention::{export_attention, AttentionDump, AttentionLayerDump, ExportScope};
pub use bleu::corpus_bleu;
pub use difficulty::{
    difficulty_score, records_to_tsv, score_records, sequence_nll, split_by_difficulty,
    DifficultyLabel, DifficultyRecord,
};
pub use gradflow::{
    activation_norm_ratio, grad_norms_to_csv, grad_path_decompose, grad_with_all_consumers_stopped,
    record_grad_norms, Decomposition, GradNormRow,
};
