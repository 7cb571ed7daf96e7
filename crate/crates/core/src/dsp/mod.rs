//! Audio front end: 16 kHz PCM in, log-mel spectrograms out, and back to
//! audio through Griffin-Lim.
//!
//! Analysis settings: Hamming window of 1024 samples, hop 256, 80 mel bands
//! over 0–8 kHz, power spectrum into the filterbank, natural log with a
//! 1e-10 floor, then a corpus-global min/max scaling into [0, 1].

mod cache;
mod griffin_lim;
mod mel;
mod stft;
mod wav;

pub use cache::{read_features, read_stats, write_features, write_stats, FEATURE_MAGIC, STATS_MAGIC};
pub use griffin_lim::{griffin_lim, griffin_lim_with_trace, mel_to_linear_power};
pub use mel::{hz_to_mel, mel_to_hz, wav_to_logmel, MelFilterbank, MelSpectrogram, NormalizationStats, LOG_FLOOR};
pub use stft::{stft_magnitude, Spectrogram};
pub use wav::{load_wav, write_wav, Waveform};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_MELS: usize = 80;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub griffin_lim_iters: usize,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            fft_size: 1024,
            hop: 256,
            n_mels: N_MELS,
            fmin: 0.0,
            fmax: 8000.0,
            griffin_lim_iters: 60,
        }
    }
}

impl SpectrogramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::Param(format!("sample_rate must be {SAMPLE_RATE}")));
        }
        if self.fft_size < 2 || self.fft_size % 2 != 0 {
            return Err(Error::Param(format!("fft_size {} must be even", self.fft_size)));
        }
        if self.hop == 0 || self.hop >= self.fft_size {
            return Err(Error::Param(format!("hop {} must be in 1..fft_size", self.hop)));
        }
        if self.n_mels != N_MELS {
            return Err(Error::Param(format!("n_mels must be {N_MELS}")));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Param(format!(
                "band edges {}..{} Hz must satisfy 0 <= fmin < fmax <= Nyquist",
                self.fmin, self.fmax
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Symmetric Hamming window of `fft_size` coefficients.
    pub fn window(&self) -> Vec<f64> {
        hamming(self.fft_size)
    }

    /// Frames produced for a signal of `len` samples: `1 + len / hop`.
    pub fn frame_count(&self, len: usize) -> usize {
        1 + len / self.hop
    }
}

pub fn hamming(n: usize) -> Vec<f64> {
    let denom = (n - 1) as f64;
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / denom).cos())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_symmetric_hamming() {
        let w = SpectrogramConfig::default().window();
        assert_eq!(w.len(), 1024);
        for i in 0..512 {
            assert!((w[i] - w[1023 - i]).abs() < 1e-12);
        }
        assert!((w[0] - 0.08).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(SpectrogramConfig::default().validate().is_ok());
        let bad = SpectrogramConfig {
            hop: 1024,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SpectrogramConfig {
            fmax: 9000.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
