//! Corpus indexing, feature caching and same-speaker pair sampling.

mod features;
mod manifest;
mod sampling;

pub use features::{precompute_features, FeatureReport, OnError, MANIFEST_FILE, STATS_FILE};
pub use manifest::{scan_corpus, utterance_id, CorpusManifest, SpeakerEntry, Split, SplitSpec};
pub use sampling::{Dataset, SegmentPair, SpeakerData, Utterance};
