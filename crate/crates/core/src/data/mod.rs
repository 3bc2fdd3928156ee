//! Corpus reading, vocabularies, splits and batches.

pub mod batch;
pub mod corpus;
pub mod split;
pub mod synthetic;
pub mod vocab;

pub use batch::{
    batch_indices, corpus_instances, make_batch, make_batches, sentence_instances, window_bounds, Batch,
    ContextWindow, Instance,
};
pub use corpus::{parse_corpus, read_corpus, sense_form, split_sense_form, ParseWarning, PosTag, SenseCorpus, Sentence, Split, Token};
pub use split::{split_corpus, SplitManifest, DEFAULT_RATIOS};
pub use vocab::{build_vocab, Vocab, Vocabulary, BOS, EOS, PAD, SPECIALS, UNK};
