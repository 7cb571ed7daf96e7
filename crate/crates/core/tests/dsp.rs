use dvae_core::dsp::{
    griffin_lim, griffin_lim_with_trace, stft_magnitude, wav_to_logmel, MelFilterbank, NormalizationStats,
    SpectrogramConfig, Waveform,
};
use proptest::prelude::*;

fn tone(freq: f64, len: usize, amp: f32) -> Waveform {
    Waveform::new(
        (0..len)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin() as f32)
            .collect(),
    )
}

#[test]
fn tone_survives_griffin_lim_round_trip() {
    let cfg = SpectrogramConfig::default();
    let fb = MelFilterbank::new(&cfg).unwrap();
    let w = tone(440.0, 16000, 0.5);
    let mel = wav_to_logmel(&w, &cfg, &fb).unwrap();
    let rebuilt = griffin_lim(&mel, &cfg, &fb, 60).unwrap();
    let mel2 = wav_to_logmel(&rebuilt, &cfg, &fb).unwrap();
    let (a, b) = (mel.argmax_bins(), mel2.argmax_bins());
    let n = a.len().min(b.len());
    let agree = (0..n).filter(|&t| a[t] == b[t]).count();
    assert!(agree as f64 >= 0.95 * n as f64, "{agree}/{n}");

    let s1 = stft_magnitude(&w, &cfg).unwrap();
    let s2 = stft_magnitude(&rebuilt, &cfg).unwrap();
    assert_eq!(s1.argmax_bin(s1.frames / 2), s2.argmax_bin(s2.frames / 2));
}

#[test]
fn griffin_lim_convergence_is_monotone() {
    let cfg = SpectrogramConfig::default();
    let fb = MelFilterbank::new(&cfg).unwrap();
    let mut w = tone(300.0, 12000, 0.3);
    for (i, s) in tone(1250.0, 12000, 0.2).samples.iter().enumerate() {
        w.samples[i] += s * (i as f32 / 12000.0);
    }
    let mel = wav_to_logmel(&w, &cfg, &fb).unwrap();
    let (out, trace) = griffin_lim_with_trace(&mel, &cfg, &fb, 40).unwrap();
    assert_eq!(trace.len(), 40);
    for pair in trace.windows(2) {
        assert!(pair[1] <= pair[0] * (1.0 + 1e-9), "{pair:?}");
    }
    assert_eq!(out.len(), (mel.n_frames - 1) * cfg.hop);
    let secs = mel.n_frames as f64 * cfg.hop as f64 / 16000.0;
    assert!((out.duration_secs() - secs).abs() <= cfg.fft_size as f64 / 16000.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn frame_count_law(len in 1024usize..6000) {
        let cfg = SpectrogramConfig::default();
        let s = stft_magnitude(&Waveform::new(vec![0.1; len]), &cfg).unwrap();
        prop_assert_eq!(s.frames, 1 + len / 256);
    }

    #[test]
    fn stft_is_positively_homogeneous(alpha in 0.0f32..4.0, seed in 0u64..1000) {
        let cfg = SpectrogramConfig::default();
        let x: Vec<f32> = (0..2048u64).map(|i| (((i + 1) * (seed + 17) * 2654435761) % 1000) as f32 / 1000.0 - 0.5).collect();
        let a = stft_magnitude(&Waveform::new(x.clone()), &cfg).unwrap();
        let b = stft_magnitude(&Waveform::new(x.iter().map(|v| v * alpha).collect()), &cfg).unwrap();
        for (p, q) in a.data.iter().zip(&b.data) {
            prop_assert!((p * alpha as f64 - q).abs() <= 1e-5 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn normalization_round_trip(lo in -30.0f64..0.0, span in 0.5f64..30.0, u in prop::collection::vec(0.0f64..1.0, 80)) {
        let stats = NormalizationStats::new(lo, lo + span).unwrap();
        let vals: Vec<f32> = u.iter().map(|t| (lo + t * span) as f32).collect();
        let m = dvae_core::dsp::MelSpectrogram::new(1, 80, vals.clone(), false).unwrap();
        let back = stats.denormalize(&stats.normalize(&m).unwrap()).unwrap();
        for (a, b) in vals.iter().zip(&back.frames) {
            prop_assert!(((a - b) / span as f32).abs() <= 1e-6);
        }
    }
}
