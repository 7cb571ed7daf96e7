use std::path::{Path, PathBuf};

use crate::data::manifest::{utterance_id, CorpusManifest, SpeakerEntry, Split};
use crate::dsp::{load_wav, wav_to_logmel, write_features, write_stats, MelFilterbank, NormalizationStats, SpectrogramConfig};
use crate::error::{Error, Result};

/// What to do when one input file cannot be processed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OnError {
    Abort,
    /// Skip the file and report it.
    Continue,
}

#[derive(Debug)]
pub struct FeatureReport {
    /// Manifest over the written `.dvf` files, same speakers and splits.
    pub manifest: CorpusManifest,
    pub stats: NormalizationStats,
    pub failures: Vec<(PathBuf, Error)>,
}

pub const STATS_FILE: &str = "stats.dvs";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Two passes over a WAV manifest: global log-mel extrema over the training
/// speakers, then normalized feature files under `out/<speaker>/<utt>.dvf`.
/// Writes `stats.dvs` and `manifest.json` into `out`.
pub fn precompute_features(
    manifest: &CorpusManifest,
    out: impl AsRef<Path>,
    cfg: &SpectrogramConfig,
    fb: &MelFilterbank,
    on_error: OnError,
) -> Result<FeatureReport> {
    let out = out.as_ref();
    let mut failures = Vec::new();
    let handle = |path: &Path, e: Error, failures: &mut Vec<(PathBuf, Error)>| -> Result<()> {
        match on_error {
            OnError::Abort => Err(e.at(path)),
            OnError::Continue => {
                failures.push((path.to_path_buf(), e));
                Ok(())
            }
        }
    };

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for spk in manifest.train_speakers() {
        for path in &spk.utterances {
            match load_wav(path).and_then(|w| wav_to_logmel(&w, cfg, fb)) {
                Ok(mel) => {
                    if let Some((a, b)) = mel.min_max() {
                        lo = lo.min(a);
                        hi = hi.max(b);
                    }
                }
                Err(e) => handle(path, e, &mut failures)?,
            }
        }
    }
    let stats = NormalizationStats::new(lo, hi)?;

    std::fs::create_dir_all(out).map_err(|e| Error::from(e).at(out))?;
    let mut speakers = Vec::new();
    for spk in &manifest.speakers {
        let dir = out.join(&spk.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::from(e).at(&dir))?;
        let mut written = Vec::new();
        for path in &spk.utterances {
            let target = dir.join(format!("{}.dvf", utterance_id(path)));
            let result = load_wav(path)
                .and_then(|w| wav_to_logmel(&w, cfg, fb))
                .and_then(|m| stats.normalize(&m))
                .and_then(|m| write_features(&target, &m));
            match result {
                Ok(()) => written.push(target),
                // Train files that failed were already reported in pass one.
                Err(e) => {
                    if spk.split == Split::Test || !failures.iter().any(|(p, _)| p == path) {
                        handle(path, e, &mut failures)?;
                    }
                }
            }
        }
        speakers.push(SpeakerEntry {
            id: spk.id.clone(),
            split: spk.split,
            utterances: written,
        });
    }
    let features = CorpusManifest { speakers };
    write_stats(out.join(STATS_FILE), &stats)?;
    features.write(out.join(MANIFEST_FILE))?;
    Ok(FeatureReport {
        manifest: features,
        stats,
        failures,
    })
}
