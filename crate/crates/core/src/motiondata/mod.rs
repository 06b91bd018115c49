//! Motion and caption representations, the synthetic paired corpus, and its
//! on-disk formats.

mod clip;
mod corpus;
pub mod format;
mod templates;
mod vocab;

pub use clip::{CaptionTokens, MotionClip, MotionFrameLayout};
pub use corpus::{
    corpus_dir_hash, generate_clip, generate_corpus, split, ClipRecord, Corpus, CorpusConfig, CorpusManifest,
    NormStats, Split, SplitRatios, Splits, CLIPS_FILE, MANIFEST_FILE,
};
pub use templates::synthesize;
pub use vocab::{ActionTemplate, Vocabulary, BOS, EOS, PAD, UNK};
