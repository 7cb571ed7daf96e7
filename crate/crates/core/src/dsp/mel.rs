use crate::dsp::stft::argmax;
use crate::dsp::{stft_magnitude, SpectrogramConfig, Waveform};
use crate::error::{Error, Result};

/// Lower bound applied to mel power before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with unit peak, stored as a dense `n_mels × n_bins`
/// matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
    /// Left edge, centre and right edge of each filter in Hz.
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &SpectrogramConfig) -> Result<Self> {
        cfg.validate()?;
        let n_mels = cfg.n_mels;
        let n_bins = cfg.n_bins();
        let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (l, c, r) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                *w = ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0);
            }
            if row.iter().all(|&w| w == 0.0) {
                return Err(Error::Filterbank(format!(
                    "filter {m} ({l:.1}..{r:.1} Hz) covers no FFT bin"
                )));
            }
        }
        Ok(Self {
            n_mels,
            n_bins,
            weights,
            edges_hz,
        })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.edges_hz[1..=self.n_mels]
    }

    /// `frames × n_bins` spectrum to `frames × n_mels`.
    pub fn apply(&self, spectrum: &[f64], frames: usize) -> Vec<f64> {
        let mut out = vec![0.0; frames * self.n_mels];
        crate::linalg::gemm_nt(frames, self.n_bins, self.n_mels, spectrum, &self.weights, &mut out);
        out
    }
}

/// Log-mel frames, row-major `n_frames × 80`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub n_frames: usize,
    pub n_mels: usize,
    pub frames: Vec<f32>,
    pub normalized: bool,
}

impl MelSpectrogram {
    pub fn new(n_frames: usize, n_mels: usize, frames: Vec<f32>, normalized: bool) -> Result<Self> {
        if frames.len() != n_frames * n_mels {
            return Err(Error::Length(format!(
                "{} values for {n_frames} frames of {n_mels} bins",
                frames.len()
            )));
        }
        Ok(Self {
            n_frames,
            n_mels,
            frames,
            normalized,
        })
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn argmax_bins(&self) -> Vec<usize> {
        (0..self.n_frames)
            .map(|t| argmax(&self.frame(t).iter().map(|&v| v as f64).collect::<Vec<_>>()))
            .collect()
    }

    /// Frames `start..start+len`, zero-padded past the end.
    pub fn crop(&self, start: usize, len: usize) -> MelSpectrogram {
        let mut frames = vec![0.0; len * self.n_mels];
        let avail = self.n_frames.saturating_sub(start).min(len);
        frames[..avail * self.n_mels]
            .copy_from_slice(&self.frames[start * self.n_mels..(start + avail) * self.n_mels]);
        MelSpectrogram {
            n_frames: len,
            n_mels: self.n_mels,
            frames,
            normalized: self.normalized,
        }
    }

    pub fn min_max(&self) -> Option<(f64, f64)> {
        let mut it = self.frames.iter().map(|&v| v as f64);
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }
}

pub fn wav_to_logmel(w: &Waveform, cfg: &SpectrogramConfig, fb: &MelFilterbank) -> Result<MelSpectrogram> {
    let spec = stft_magnitude(w, cfg)?;
    if fb.n_bins != spec.bins {
        return Err(Error::Filterbank(format!(
            "filterbank has {} bins, spectrum {}",
            fb.n_bins, spec.bins
        )));
    }
    let power: Vec<f64> = spec.data.iter().map(|m| m * m).collect();
    let mel = fb.apply(&power, spec.frames);
    let frames = mel.iter().map(|&p| p.max(LOG_FLOOR).ln() as f32).collect();
    MelSpectrogram::new(spec.frames, fb.n_mels, frames, false)
}

/// Corpus-global extrema of the log-mel values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationStats {
    pub min: f64,
    pub max: f64,
}

impl NormalizationStats {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(Error::Stats(format!("need finite min < max, got {min}, {max}")));
        }
        Ok(Self { min, max })
    }

    pub fn normalize(&self, m: &MelSpectrogram) -> Result<MelSpectrogram> {
        if m.normalized {
            return Err(Error::Domain("spectrogram is already normalized".into()));
        }
        let range = self.max - self.min;
        let frames = m
            .frames
            .iter()
            .map(|&v| ((v as f64 - self.min) / range).clamp(0.0, 1.0) as f32)
            .collect();
        Ok(MelSpectrogram { frames, normalized: true, ..m.clone() })
    }

    pub fn denormalize(&self, m: &MelSpectrogram) -> Result<MelSpectrogram> {
        if !m.normalized {
            return Err(Error::Domain("spectrogram is not normalized".into()));
        }
        let range = self.max - self.min;
        let frames = m
            .frames
            .iter()
            .map(|&v| (v as f64 * range + self.min) as f32)
            .collect();
        Ok(MelSpectrogram { frames, normalized: false, ..m.clone() })
    }
}
