//! Tool-use instruction data pipeline and agent runtime.
//!
//! Stages: [`datagen`] asks a teacher model for instructions about captioned
//! images, [`curation`] filters and deduplicates them, [`augment`] turns them
//! into training samples, and [`metrics`] / [`eval`] score a model's
//! transcripts. [`agent`] runs the interactive loop against a tool host.

pub mod agent;
pub mod augment;
pub mod bleu;
pub mod cli;
pub mod clients;
pub mod curation;
pub mod datagen;
pub mod eval;
pub mod jsonl;
pub mod metrics;
pub mod react;
pub mod registry;
pub mod template;
