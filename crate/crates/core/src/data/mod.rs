//! Corpora, tokenization, relevance filtering, batch mixing, the n-gram LM
//! and the synthetic corpus generator.

pub mod corpus;
pub mod filter;
pub mod ngram;
pub mod sampler;
pub mod synth;
pub mod tokenizer;

pub use corpus::{read_manifest, write_manifest, Corpus, CorpusKind, ManifestEntry, Utterance};
pub use filter::{filter_corpus, filter_indices, relevance_overlap, threshold_for_fraction, words};
pub use ngram::{default_lambdas, NGramLm};
pub use sampler::{Batch, MixingSampler, Source};
pub use synth::{synth_corpus, Relatedness, SynthConfig, SynthCorpora, SynthWorld, TEST_TIERS};
pub use tokenizer::Tokenizer;
