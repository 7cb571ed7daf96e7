#![allow(dead_code)]

use std::path::{Path, PathBuf};

use dvae_core::convert::{convert, extract_speaker_embedding, SpeakerEmbedding};
use dvae_core::data::{precompute_features, scan_corpus, Dataset, FeatureReport, OnError, SplitSpec};
use dvae_core::dsp::{read_features, MelFilterbank, MelSpectrogram, SpectrogramConfig};
use dvae_core::eval::mel_mcd;
use dvae_core::model::{Model, ModelConfig};
use dvae_core::toy::{write_toy_corpus, ToyCorpusConfig};
use dvae_core::train::{train_loop, TrainConfig, TrainSummary};

pub struct ToyCorpus {
    pub dir: tempfile::TempDir,
    pub features: FeatureReport,
    pub dataset: Dataset,
}

impl ToyCorpus {
    pub fn build() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let wav_root = dir.path().join("wav");
        write_toy_corpus(&wav_root, &ToyCorpusConfig::default()).unwrap();
        let cfg = SpectrogramConfig::default();
        let fb = MelFilterbank::new(&cfg).unwrap();
        let manifest = scan_corpus(&wav_root, "wav", &SplitSpec::Default).unwrap();
        let features = precompute_features(&manifest, dir.path().join("features"), &cfg, &fb, OnError::Abort).unwrap();
        let dataset = Dataset::load(&features.manifest, 64).unwrap();
        Self { dir, features, dataset }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    /// Normalized features of speaker `s`, in utterance order.
    pub fn mels(&self, s: usize) -> Vec<MelSpectrogram> {
        self.features.manifest.speakers[s]
            .utterances
            .iter()
            .map(|p| read_features(p).unwrap())
            .collect()
    }
}

pub fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        lr: 1e-4,
        beta: 1.0,
        total_steps: 2000,
        checkpoint_every: 500,
        seed,
        ..TrainConfig::default()
    }
}

pub fn train_toy(corpus: &ToyCorpus, model_cfg: &ModelConfig, cfg: &TrainConfig, out: &Path) -> (Model<f32>, TrainSummary) {
    let mut model = Model::<f32>::new(model_cfg.clone(), cfg.seed).unwrap();
    let summary = train_loop(&corpus.dataset, &mut model, cfg, out).unwrap();
    (model, summary)
}

/// Per-utterance embeddings for both speakers.
pub fn embeddings(model: &mut Model<f32>, corpus: &ToyCorpus) -> Vec<Vec<SpeakerEmbedding>> {
    (0..2)
        .map(|s| {
            corpus
                .mels(s)
                .iter()
                .map(|m| extract_speaker_embedding(model, std::slice::from_ref(m)).unwrap())
                .collect()
        })
        .collect()
}

/// Mean intra-speaker and inter-speaker cosine distances.
pub fn cosine_separation(emb: &[Vec<SpeakerEmbedding>]) -> (f64, f64) {
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
    let all: Vec<(usize, &SpeakerEmbedding)> = emb
        .iter()
        .enumerate()
        .flat_map(|(s, v)| v.iter().map(move |e| (s, e)))
        .collect();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            let d = all[i].1.cosine_distance(all[j].1);
            if all[i].0 == all[j].0 {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                nx += 1;
            }
        }
    }
    (intra / ni as f64, inter / nx as f64)
}

/// For each utterance of speaker A converted toward speaker B's mean
/// embedding: (MCD to B's rendition, MCD to A's rendition).
pub fn conversion_mcds(model: &mut Model<f32>, corpus: &ToyCorpus) -> Vec<(f64, f64)> {
    let stats = corpus.features.stats;
    let (a, b) = (corpus.mels(0), corpus.mels(1));
    let target = extract_speaker_embedding(model, &b).unwrap();
    a.iter()
        .zip(&b)
        .map(|(src, tgt)| {
            let out = stats.denormalize(&convert(model, src, &target).unwrap()).unwrap();
            let to_b = mel_mcd(&stats.denormalize(tgt).unwrap(), &out).unwrap();
            let to_a = mel_mcd(&stats.denormalize(src).unwrap(), &out).unwrap();
            (to_b, to_a)
        })
        .collect()
}

pub fn read_bytes(p: &PathBuf) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

/// Diagnostics: (raw A↔B MCD, A→A reconstruction MCD) per utterance.
pub fn baseline_mcds(model: &mut Model<f32>, corpus: &ToyCorpus) -> Vec<(f64, f64)> {
    let stats = corpus.features.stats;
    let (a, b) = (corpus.mels(0), corpus.mels(1));
    let own = extract_speaker_embedding(model, &a).unwrap();
    a.iter()
        .zip(&b)
        .map(|(src, tgt)| {
            let raw = mel_mcd(&stats.denormalize(tgt).unwrap(), &stats.denormalize(src).unwrap()).unwrap();
            let rec = stats.denormalize(&convert(model, src, &own).unwrap()).unwrap();
            (raw, mel_mcd(&stats.denormalize(src).unwrap(), &rec).unwrap())
        })
        .collect()
}
