use rand::Rng;

use crate::data::manifest::{utterance_id, CorpusManifest};
use crate::dsp::{read_features, MelSpectrogram};
use crate::error::{Error, Result};
use crate::model::PairBatch;

#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub mel: MelSpectrogram,
}

#[derive(Clone, Debug)]
pub struct SpeakerData {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

/// Normalized features of the training speakers, held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub speakers: Vec<SpeakerData>,
    pub segment_frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPair {
    pub x1: MelSpectrogram,
    pub x2: MelSpectrogram,
    pub speaker_id: String,
    pub utterances: (String, String),
    pub offsets: (usize, usize),
}

impl Dataset {
    /// Loads the feature files of every training speaker.
    pub fn load(manifest: &CorpusManifest, segment_frames: usize) -> Result<Self> {
        manifest.validate()?;
        let speakers = manifest
            .train_speakers()
            .map(|s| {
                let utterances = s
                    .utterances
                    .iter()
                    .map(|p| {
                        let mel = read_features(p)?;
                        if !mel.normalized {
                            return Err(Error::Domain(format!("{} holds unnormalized features", p.display())));
                        }
                        Ok(Utterance { id: utterance_id(p), mel })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SpeakerData {
                    id: s.id.clone(),
                    utterances,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(speakers, segment_frames)
    }

    pub fn new(speakers: Vec<SpeakerData>, segment_frames: usize) -> Result<Self> {
        if speakers.is_empty() {
            return Err(Error::Manifest("dataset has no speakers".into()));
        }
        if let Some(s) = speakers.iter().find(|s| s.utterances.len() < 2) {
            return Err(Error::Manifest(format!("speaker {} has fewer than 2 utterances", s.id)));
        }
        Ok(Self {
            speakers,
            segment_frames,
        })
    }

    /// Uniform speaker, two distinct uniform utterances, a uniform crop from each.
    pub fn sample_pair<R: Rng>(&self, rng: &mut R) -> SegmentPair {
        let spk = &self.speakers[rng.gen_range(0..self.speakers.len())];
        let n = spk.utterances.len();
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let (u1, u2) = (&spk.utterances[i], &spk.utterances[j]);
        let o1 = self.crop_offset(&u1.mel, rng);
        let o2 = self.crop_offset(&u2.mel, rng);
        let pair = SegmentPair {
            x1: u1.mel.crop(o1, self.segment_frames),
            x2: u2.mel.crop(o2, self.segment_frames),
            speaker_id: spk.id.clone(),
            utterances: (u1.id.clone(), u2.id.clone()),
            offsets: (o1, o2),
        };
        debug_assert!(pair.x1.n_frames == self.segment_frames && pair.x2.n_frames == self.segment_frames);
        debug_assert!(pair.utterances.0 != pair.utterances.1);
        pair
    }

    fn crop_offset<R: Rng>(&self, mel: &MelSpectrogram, rng: &mut R) -> usize {
        if mel.n_frames > self.segment_frames {
            rng.gen_range(0..=mel.n_frames - self.segment_frames)
        } else {
            0
        }
    }

    /// `pairs` draws packed as a [`PairBatch`]: first segments, then second segments.
    pub fn sample_batch<R: Rng>(&self, pairs: usize, rng: &mut R) -> (PairBatch<f32>, Vec<SegmentPair>) {
        let drawn: Vec<SegmentPair> = (0..pairs).map(|_| self.sample_pair(rng)).collect();
        let mut data = Vec::with_capacity(2 * pairs * self.segment_frames * 80);
        for p in &drawn {
            data.extend_from_slice(&p.x1.frames);
        }
        for p in &drawn {
            data.extend_from_slice(&p.x2.frames);
        }
        (PairBatch { pairs, data }, drawn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn utt(id: &str, frames: usize, value: f32) -> Utterance {
        Utterance {
            id: id.into(),
            mel: MelSpectrogram::new(frames, 80, vec![value; frames * 80], true).unwrap(),
        }
    }

    fn speaker(id: &str, n: usize, frames: usize) -> SpeakerData {
        SpeakerData {
            id: id.into(),
            utterances: (0..n).map(|i| utt(&format!("{id}_{i}"), frames, 0.5)).collect(),
        }
    }

    #[test]
    fn forced_pair_uses_both_utterances() {
        let ds = Dataset::new(vec![speaker("a", 2, 100)], 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let p = ds.sample_pair(&mut rng);
            let mut u = [p.utterances.0, p.utterances.1];
            u.sort();
            assert_eq!(u, ["a_0".to_string(), "a_1".to_string()]);
            assert!(p.offsets.0 <= 36 && p.offsets.1 <= 36);
        }
    }

    #[test]
    fn short_utterance_is_zero_padded() {
        let ds = Dataset::new(vec![speaker("a", 2, 10)], 64).unwrap();
        let p = ds.sample_pair(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(p.x1.n_frames, 64);
        assert!(p.x1.frames[..800].iter().all(|&v| v == 0.5));
        assert!(p.x1.frames[800..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_layout_puts_first_segments_first() {
        let mut a = speaker("a", 2, 64);
        a.utterances[1] = utt("a_1", 64, 0.25);
        let ds = Dataset::new(vec![a], 64).unwrap();
        let (batch, pairs) = ds.sample_batch(3, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(batch.data.len(), 6 * 64 * 80);
        for (k, p) in pairs.iter().enumerate() {
            assert_eq!(batch.data[k * 5120], p.x1.frames[0]);
            assert_eq!(batch.data[(3 + k) * 5120], p.x2.frames[0]);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let ds = Dataset::new(vec![speaker("a", 3, 90), speaker("b", 4, 120)], 64).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| ds.sample_pair(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
    }
}
