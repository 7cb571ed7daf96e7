//! Inference: speaker embeddings from reference audio, latent swap, and
//! synthesis back to a waveform.

use std::io::Write;
use std::path::Path;

use dvae_nn::{Mode, Scalar};

use crate::dsp::{griffin_lim, MelFilterbank, MelSpectrogram, NormalizationStats, SpectrogramConfig, Waveform};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub vector: Vec<f32>,
    pub speaker_id: Option<String>,
    pub n_chunks: usize,
}

impl SpeakerEmbedding {
    pub fn cosine_distance(&self, other: &SpeakerEmbedding) -> f64 {
        let dot: f64 = self.vector.iter().zip(&other.vector).map(|(&a, &b)| a as f64 * b as f64).sum();
        let na: f64 = self.vector.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = other.vector.iter().map(|&b| (b as f64).powi(2)).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return 1.0;
        }
        1.0 - dot / (na * nb)
    }
}

fn check_input(m: &MelSpectrogram, model_mels: usize) -> Result<()> {
    if !m.normalized {
        return Err(Error::Domain("conversion expects normalized spectrograms".into()));
    }
    if m.n_mels != model_mels {
        return Err(Error::Length(format!("{} mel bins, model expects {model_mels}", m.n_mels)));
    }
    Ok(())
}

/// Mean speaker mean over every full, non-overlapping segment of the
/// utterances.
pub fn extract_speaker_embedding<F: Scalar>(model: &mut Model<F>, utterances: &[MelSpectrogram]) -> Result<SpeakerEmbedding> {
    let frames = model.config().segment_frames;
    let mut chunks = Vec::new();
    for u in utterances {
        check_input(u, model.config().n_mels)?;
        for c in 0..u.n_frames / frames {
            chunks.extend_from_slice(&u.crop(c * frames, frames).frames);
        }
    }
    if chunks.is_empty() {
        return Err(Error::Length(format!("no utterance has a full {frames}-frame segment")));
    }
    let post = model.encode(&chunks, Mode::Eval)?;
    let n = post.len();
    // Sorting each coordinate before summing makes the mean independent of
    // utterance order.
    let vector = (0..model.config().k1)
        .map(|d| {
            let mut vals: Vec<f32> = post.iter().map(|p| p.mu_s[d]).collect();
            vals.sort_by(f32::total_cmp);
            (vals.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32
        })
        .collect();
    Ok(SpeakerEmbedding {
        vector,
        speaker_id: None,
        n_chunks: n,
    })
}

/// Source content with the target's speaker embedding: per segment, the
/// content mean is joined to the embedding, decoded and refined.
pub fn convert<F: Scalar>(model: &mut Model<F>, source: &MelSpectrogram, target: &SpeakerEmbedding) -> Result<MelSpectrogram> {
    check_input(source, model.config().n_mels)?;
    if source.n_frames == 0 {
        return Err(Error::Length("source has no frames".into()));
    }
    if target.vector.len() != model.config().k1 {
        return Err(Error::Length(format!(
            "embedding of size {}, model expects {}",
            target.vector.len(),
            model.config().k1
        )));
    }
    let frames = model.config().segment_frames;
    let n_chunks = source.n_frames.div_ceil(frames);
    let mut chunks = Vec::with_capacity(n_chunks * frames * source.n_mels);
    for c in 0..n_chunks {
        chunks.extend_from_slice(&source.crop(c * frames, frames).frames);
    }
    let post = model.encode(&chunks, Mode::Eval)?;
    let z: Vec<f32> = post
        .iter()
        .flat_map(|p| target.vector.iter().chain(&p.mu_c).copied())
        .collect();
    let out = model.generate(&z, Mode::Eval)?;
    let mut refined = out.refined;
    refined.truncate(source.n_frames * source.n_mels);
    MelSpectrogram::new(source.n_frames, source.n_mels, refined, true)
}

/// Denormalizes and runs Griffin-Lim.
pub fn synthesize(
    converted: &MelSpectrogram,
    stats: &NormalizationStats,
    cfg: &SpectrogramConfig,
    fb: &MelFilterbank,
) -> Result<Waveform> {
    griffin_lim(&stats.denormalize(converted)?, cfg, fb, cfg.griffin_lim_iters)
}

/// One embedding per utterance: `speaker_id,utterance_id,e1..eK`.
pub fn write_embeddings_csv(path: impl AsRef<Path>, rows: &[(String, String, SpeakerEmbedding)]) -> Result<()> {
    let path = path.as_ref();
    let k = rows.first().map_or(8, |r| r.2.vector.len());
    let mut text = String::from("speaker_id,utterance_id");
    for i in 1..=k {
        text.push_str(&format!(",e{i}"));
    }
    text.push('\n');
    for (spk, utt, e) in rows {
        text.push_str(spk);
        text.push(',');
        text.push_str(utt);
        for v in &e.vector {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::from(e).at(path))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::from(e).at(path))
}
