//! Seeded synthetic accented-speech corpus.
//!
//! Transcripts come from a sparse bigram chain; each symbol is rendered as a
//! few noisy frames around its prototype vector, and accents pull the frames
//! of selected symbols toward a confusable partner.

mod accent;
mod corpus;
mod grammar;
mod vocab;

pub use accent::{synthesize_utterance, AccentProfile, Prototypes, Utterance};
pub use corpus::{
    generate_corpus, load_split, manifest_path, write_archive, CorpusManifest, DatasetManifest,
    Generator, GeneratorConfig, VocabDescriptor, MANIFEST_FILE,
};
pub use grammar::{sample_transcript, BigramGrammar, DEFAULT_BRANCHING, MAX_TRANSCRIPT_LEN};
pub use vocab::{Symbol, SymbolVocab};
