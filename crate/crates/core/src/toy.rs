//! Synthetic two-speaker corpus: every utterance is a sequence of
//! vowel-like spectral envelopes rendered over a harmonic source. Speakers
//! differ in pitch, formant scaling and spectral tilt; utterance `k` has the
//! same vowel sequence for every speaker.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{write_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// First three formants (Hz) of a few vowel targets.
const VOWELS: [[f64; 3]; 6] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [660.0, 1720.0, 2410.0],
];

#[derive(Clone, Debug, PartialEq)]
pub struct Voice {
    pub id: String,
    pub f0: f64,
    pub formant_scale: f64,
    /// Harmonic amplitude falls as `h^-tilt`.
    pub tilt: f64,
}

impl Voice {
    pub fn pair() -> [Voice; 2] {
        [
            Voice {
                id: "spk_a".into(),
                f0: 140.0,
                formant_scale: 0.85,
                tilt: 1.2,
            },
            Voice {
                id: "spk_b".into(),
                f0: 150.0,
                formant_scale: 1.2,
                tilt: 0.4,
            },
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpusConfig {
    pub utterances: usize,
    pub seconds: f64,
    pub vowels_per_utterance: usize,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            utterances: 10,
            seconds: 3.0,
            vowels_per_utterance: 6,
            seed: 7,
        }
    }
}

/// Vowel index sequence of utterance `k`; identical across speakers.
pub fn vowel_sequence(cfg: &ToyCorpusConfig, k: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(k as u64));
    let mut seq: Vec<usize> = Vec::with_capacity(cfg.vowels_per_utterance);
    while seq.len() < cfg.vowels_per_utterance {
        let v = rng.gen_range(0..VOWELS.len());
        if seq.last() != Some(&v) {
            seq.push(v);
        }
    }
    seq
}

fn envelope(freq: f64, formants: &[f64; 3], scale: f64) -> f64 {
    let bandwidths = [90.0, 120.0, 160.0];
    let gains = [1.0, 0.6, 0.3];
    formants
        .iter()
        .zip(bandwidths)
        .zip(gains)
        .map(|((&f, bw), g)| {
            let d = (freq - f * scale) / (bw * scale);
            g / (1.0 + d * d)
        })
        .sum::<f64>()
        + 0.01
}

/// Renders utterance `k` for `voice`.
pub fn render(voice: &Voice, cfg: &ToyCorpusConfig, k: usize) -> Waveform {
    let n = (cfg.seconds * SAMPLE_RATE as f64) as usize;
    let seq = vowel_sequence(cfg, k);
    let seg = n as f64 / seq.len() as f64;
    let sr = SAMPLE_RATE as f64;
    let n_harm = ((7600.0 / voice.f0) as usize).max(1);
    let mut phase = vec![0.0f64; n_harm];
    let mut out = Vec::with_capacity(n);
    // Formant tracks glide linearly between consecutive vowel targets over
    // the last fifth of each vowel.
    let formants_at = |i: usize| -> [f64; 3] {
        let pos = i as f64 / seg;
        let idx = (pos.floor() as usize).min(seq.len() - 1);
        let frac = pos - idx as f64;
        let cur = VOWELS[seq[idx]];
        if idx + 1 < seq.len() && frac > 0.8 {
            let t = (frac - 0.8) / 0.2;
            let next = VOWELS[seq[idx + 1]];
            [0, 1, 2].map(|j| cur[j] * (1.0 - t) + next[j] * t)
        } else {
            cur
        }
    };
    for i in 0..n {
        let formants = formants_at(i);
        // Slow vibrato keeps harmonics from being perfectly stationary.
        let f0 = voice.f0 * (1.0 + 0.01 * (2.0 * PI * 5.0 * i as f64 / sr).sin());
        let mut s = 0.0;
        for (h, ph) in phase.iter_mut().enumerate() {
            let hf = f0 * (h + 1) as f64;
            *ph += 2.0 * PI * hf / sr;
            if hf < 7800.0 {
                let amp = envelope(hf, &formants, voice.formant_scale) * ((h + 1) as f64).powf(-voice.tilt);
                s += amp * ph.sin();
            }
        }
        out.push(s);
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    // 20 ms fades avoid clicks at the edges.
    let fade = (0.02 * sr) as usize;
    Waveform::new(
        out.iter()
            .enumerate()
            .map(|(i, v)| {
                let edge = i.min(n - 1 - i);
                let g = if edge < fade { edge as f64 / fade as f64 } else { 1.0 };
                (0.5 * v / peak * g) as f32
            })
            .collect(),
    )
}

/// Writes `root/<voice>/utt_<k>.wav` for both voices; returns the paths
/// grouped by voice.
pub fn write_toy_corpus(root: impl AsRef<Path>, cfg: &ToyCorpusConfig) -> Result<Vec<(String, Vec<PathBuf>)>> {
    let root = root.as_ref();
    if cfg.utterances < 2 {
        return Err(Error::Param("toy corpus needs at least 2 utterances per speaker".into()));
    }
    let mut out = Vec::new();
    for voice in Voice::pair() {
        let dir = root.join(&voice.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::from(e).at(&dir))?;
        let mut paths = Vec::new();
        for k in 0..cfg.utterances {
            let path = dir.join(format!("utt_{k:02}.wav"));
            write_wav(&path, &render(&voice, cfg, k))?;
            paths.push(path);
        }
        out.push((voice.id.clone(), paths));
    }
    Ok(out)
}
