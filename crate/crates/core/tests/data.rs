//! Corpus scanning, feature precomputation and pair sampling.

use std::path::Path;

use dvae_core::data::{precompute_features, scan_corpus, Dataset, OnError, SpeakerData, SplitSpec, Utterance};
use dvae_core::dsp::{load_wav, read_features, read_stats, wav_to_logmel, write_wav, MelFilterbank, MelSpectrogram, SpectrogramConfig, Waveform};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(len: usize, amp: f32, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| amp * rng.gen_range(-1.0f32..1.0)).collect())
}

/// Three training speakers of noise at different levels and one test
/// speaker whose files are louder and quieter than anything in training.
fn write_corpus(root: &Path) {
    for (s, amp) in [0.05f32, 0.1, 0.2].iter().enumerate() {
        let dir = root.join(format!("spk{s}"));
        std::fs::create_dir_all(&dir).unwrap();
        for u in 0..3 {
            write_wav(dir.join(format!("u{u}.wav")), &noise(8000 + 1000 * u, *amp, (10 * s + u) as u64)).unwrap();
        }
    }
    let dir = root.join("zz_test");
    std::fs::create_dir_all(&dir).unwrap();
    let mut loud = vec![0.0f32; 6000];
    loud[3000..5000].copy_from_slice(&noise(2000, 0.9, 99).samples);
    write_wav(dir.join("edge.wav"), &Waveform::new(loud)).unwrap();
    write_wav(dir.join("plain.wav"), &noise(6000, 0.1, 98)).unwrap();
}

fn split() -> SplitSpec {
    SplitSpec::parse("spk0 train\nspk1 train\nspk2 train\nzz_test test\n").unwrap()
}

#[test]
fn repeated_scans_agree() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    let a = scan_corpus(dir.path(), "wav", &split()).unwrap();
    let b = scan_corpus(dir.path(), "wav", &split()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.train_speakers().count(), 3);
    assert_eq!(a.test_speakers().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["zz_test"]);
}

#[test]
fn precompute_is_reproducible_and_stats_match_the_extrema() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    write_corpus(&corpus);
    let cfg = SpectrogramConfig::default();
    let fb = MelFilterbank::new(&cfg).unwrap();
    let manifest = scan_corpus(&corpus, "wav", &split()).unwrap();

    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let rep = precompute_features(&manifest, &out_a, &cfg, &fb, OnError::Abort).unwrap();
    precompute_features(&manifest, &out_b, &cfg, &fb, OnError::Abort).unwrap();
    assert!(rep.failures.is_empty());

    for (sa, sb) in rep.manifest.speakers.iter().zip(&manifest.speakers) {
        assert_eq!(sa.utterances.len(), sb.utterances.len());
        for p in &sa.utterances {
            let rel = p.strip_prefix(&out_a).unwrap();
            assert_eq!(std::fs::read(p).unwrap(), std::fs::read(out_b.join(rel)).unwrap(), "{}", rel.display());
        }
    }
    assert_eq!(
        std::fs::read(out_a.join("stats.dvs")).unwrap(),
        std::fs::read(out_b.join("stats.dvs")).unwrap()
    );

    // Extrema are taken over training speakers only.
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for spk in manifest.train_speakers() {
        for p in &spk.utterances {
            let m = wav_to_logmel(&load_wav(p).unwrap(), &cfg, &fb).unwrap();
            for &v in &m.frames {
                lo = lo.min(v as f64);
                hi = hi.max(v as f64);
            }
        }
    }
    let stats = read_stats(out_a.join("stats.dvs")).unwrap();
    assert_eq!((stats.min, stats.max), (lo, hi));

    // Training features span exactly [0, 1].
    let train_vals: Vec<f32> = rep
        .manifest
        .train_speakers()
        .flat_map(|s| s.utterances.iter())
        .flat_map(|p| read_features(p).unwrap().frames)
        .collect();
    assert_eq!(train_vals.iter().cloned().fold(f32::INFINITY, f32::min), 0.0);
    assert_eq!(train_vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max), 1.0);

    // Out-of-range test values are clamped.
    let edge = rep.manifest.speaker("zz_test").unwrap().utterances[0].clone();
    let m = read_features(&edge).unwrap();
    assert!(m.normalized);
    assert!(m.frames.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(m.frames.contains(&0.0) && m.frames.contains(&1.0));
}

#[test]
fn broken_file_aborts_or_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    write_corpus(&corpus);
    std::fs::write(corpus.join("spk1").join("u9.wav"), b"not a wav").unwrap();
    let cfg = SpectrogramConfig::default();
    let fb = MelFilterbank::new(&cfg).unwrap();
    let manifest = scan_corpus(&corpus, "wav", &split()).unwrap();
    let err = precompute_features(&manifest, dir.path().join("a"), &cfg, &fb, OnError::Abort).unwrap_err();
    assert!(err.to_string().contains("u9.wav"), "{err}");
    let rep = precompute_features(&manifest, dir.path().join("b"), &cfg, &fb, OnError::Continue).unwrap();
    assert_eq!(rep.failures.len(), 1);
    assert_eq!(rep.manifest.speaker("spk1").unwrap().utterances.len(), 3);
}

fn dataset(speakers: usize, utts: usize, frames: impl Fn(usize) -> usize) -> Dataset {
    let speakers = (0..speakers)
        .map(|s| SpeakerData {
            id: format!("s{s}"),
            utterances: (0..utts)
                .map(|u| {
                    let n = frames(u);
                    // Entry value identifies speaker, utterance and frame.
                    let data = (0..n * 80).map(|i| (s * 1_000_000 + u * 1000 + i / 80) as f32).collect();
                    Utterance {
                        id: format!("s{s}_u{u}"),
                        mel: MelSpectrogram::new(n, 80, data, true).unwrap(),
                    }
                })
                .collect(),
        })
        .collect();
    Dataset::new(speakers, 64).unwrap()
}

#[test]
fn speakers_are_drawn_uniformly() {
    let ds = dataset(4, 3, |u| 64 + 10 * u);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 10_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let p = ds.sample_pair(&mut rng);
        counts[p.speaker_id[1..].parse::<usize>().unwrap()] += 1;
    }
    let expected = n as f64 / 4.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    for c in counts {
        let f = c as f64 / n as f64;
        assert!((0.22..=0.28).contains(&f), "{counts:?}");
    }
    // 99th percentile of chi-square with 3 degrees of freedom.
    assert!(chi2 < 11.345, "chi2 {chi2} for {counts:?}");
}

#[test]
fn fixed_seed_gives_a_fixed_sequence() {
    let ds = dataset(3, 4, |u| 70 + 20 * u);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20).map(|_| ds.sample_pair(&mut rng)).collect::<Vec<_>>()
    };
    assert_eq!(draw(5), draw(5));
    assert_ne!(draw(5), draw(6));
}

#[test]
fn batch_layout_puts_first_segments_first() {
    let ds = dataset(2, 3, |_| 64);
    let (batch, pairs) = ds.sample_batch(3, &mut ChaCha8Rng::seed_from_u64(1));
    let seg = 64 * 80;
    assert_eq!(batch.data.len(), 2 * 3 * seg);
    for (i, p) in pairs.iter().enumerate() {
        assert_eq!(&batch.data[i * seg..(i + 1) * seg], &p.x1.frames[..]);
        assert_eq!(&batch.data[(3 + i) * seg..(4 + i) * seg], &p.x2.frames[..]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pairs_are_same_speaker_distinct_utterances_full_segments(
        seed in any::<u64>(),
        speakers in 1usize..5,
        utts in 2usize..5,
        extra in prop::collection::vec(0usize..40, 5),
    ) {
        let ds = dataset(speakers, utts, |u| 64 + extra[u]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let p = ds.sample_pair(&mut rng);
            prop_assert_eq!(p.x1.n_frames, 64);
            prop_assert_eq!(p.x2.n_frames, 64);
            prop_assert_ne!(&p.utterances.0, &p.utterances.1);
            let spk = |v: f32| (v as usize) / 1_000_000;
            let utt = |v: f32| (v as usize) / 1000 % 1000;
            let s: usize = p.speaker_id[1..].parse().unwrap();
            for x in [&p.x1, &p.x2] {
                prop_assert!(x.frames.iter().all(|&v| spk(v) == s));
            }
            // Crops are contiguous runs starting at the reported offset.
            for (x, off) in [(&p.x1, p.offsets.0), (&p.x2, p.offsets.1)] {
                let u = utt(x.frames[0]);
                prop_assert!(off + 64 <= 64 + extra[u]);
                for t in 0..64 {
                    prop_assert_eq!((x.frame(t)[0] as usize) % 1000, off + t);
                }
            }
        }
    }
}
