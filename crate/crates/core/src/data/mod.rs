//! Vocabularies, synthetic sequence tasks, the parallel-corpus reader and batching.

mod batch;
mod parallel;
mod tasks;
mod vocab;

pub use batch::{plan_batches, Batch, BatchIter, BatchPolicy, BatchSize, Example, TokenMatrix};
pub use parallel::{dataset_from_pairs, parse_parallel, ParallelCorpus};
pub use tasks::{generate, Dataset, TaskKind, TaskSpec};
pub use vocab::{Vocabulary, BOS, EOS, PAD, RESERVED, UNK};
