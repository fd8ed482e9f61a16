//! Toy causal language model.

pub mod layout;
pub mod model;
pub mod vocab;

pub use layout::{ImageSource, ImageSpan, Ordering, SequenceLayout};
pub use model::{argmax, greedy, set_trainable_partition, LanguageModel, LoraMode, PartitionReport};
pub use vocab::Vocab;
