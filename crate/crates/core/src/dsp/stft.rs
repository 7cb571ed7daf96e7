use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::dsp::{SpectrogramConfig, Waveform};
use crate::error::{Error, Result};

/// Row-major `frames × bins` magnitude matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn argmax_bin(&self, t: usize) -> usize {
        argmax(self.frame(t))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Magnitude STFT with frames centred on `t·hop` (reflect padding of
/// `fft_size/2` on both sides).
pub fn stft_magnitude(w: &Waveform, cfg: &SpectrogramConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let n = cfg.fft_size;
    if w.samples.len() < n {
        return Err(Error::Length(format!(
            "signal of {} samples is shorter than one {n}-sample window",
            w.samples.len()
        )));
    }
    let padded = reflect_pad(&w.samples, n / 2);
    let frames = cfg.frame_count(w.samples.len());
    let spec = ComplexStft::new(cfg).analyze(&padded, frames);
    Ok(Spectrogram {
        frames,
        bins: cfg.n_bins(),
        data: spec.iter().map(|c| c.norm()).collect(),
    })
}

fn reflect_pad(x: &[f32], pad: usize) -> Vec<f64> {
    let len = x.len();
    let mut out = Vec::with_capacity(len + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i] as f64));
    out.extend(x.iter().map(|&s| s as f64));
    out.extend((0..pad).map(|i| x[len - 2 - i] as f64));
    out
}

/// Windowed forward/inverse transforms over frames starting at `t·hop`.
pub(crate) struct ComplexStft {
    n: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl ComplexStft {
    pub(crate) fn new(cfg: &SpectrogramConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n: cfg.fft_size,
            hop: cfg.hop,
            window: cfg.window(),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        }
    }

    pub(crate) fn bins(&self) -> usize {
        self.n / 2 + 1
    }

    /// Signal length spanned by `frames` frames.
    pub(crate) fn span(&self, frames: usize) -> usize {
        (frames - 1) * self.hop + self.n
    }

    /// Half spectra of `frames` frames, row-major `frames × bins`.
    pub(crate) fn analyze(&self, x: &[f64], frames: usize) -> Vec<Complex<f64>> {
        let bins = self.bins();
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::default(); self.n];
        for t in 0..frames {
            let start = t * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(x[start + i] * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            out.extend_from_slice(&buf[..bins]);
        }
        out
    }

    /// Least-squares signal estimate from (possibly inconsistent) half
    /// spectra: `Σ w·ifft(X_t) / Σ w²`.
    pub(crate) fn synthesize(&self, spec: &[Complex<f64>], frames: usize) -> Vec<f64> {
        let bins = self.bins();
        let len = self.span(frames);
        let mut acc = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::default(); self.n];
        let scale = 1.0 / self.n as f64;
        for t in 0..frames {
            let row = &spec[t * bins..(t + 1) * bins];
            buf[..bins].copy_from_slice(row);
            for k in bins..self.n {
                buf[k] = row[self.n - k].conj();
            }
            // Imaginary parts at DC and Nyquist must vanish for a real signal.
            buf[0].im = 0.0;
            buf[self.n / 2].im = 0.0;
            self.inverse.process(&mut buf);
            let start = t * self.hop;
            for i in 0..self.n {
                acc[start + i] += self.window[i] * buf[i].re * scale;
                norm[start + i] += self.window[i] * self.window[i];
            }
        }
        acc.iter().zip(&norm).map(|(a, w)| a / w).collect()
    }
}
