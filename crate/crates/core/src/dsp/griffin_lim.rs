use rustfft::num_complex::Complex;

use crate::dsp::stft::ComplexStft;
use crate::dsp::{MelFilterbank, MelSpectrogram, Spectrogram, SpectrogramConfig, Waveform};
use crate::error::{Error, Result};
use crate::linalg::{gemm_nn, gemm_nt};

const NNLS_ITERS: usize = 150;

/// Nonnegative least-squares estimate of the linear power spectrum behind
/// each mel frame: `argmin_{P ≥ 0} ‖P·Wᵀ − M‖²`, solved for all frames at
/// once by accelerated projected gradient.
pub fn mel_to_linear_power(mel_power: &[f64], frames: usize, fb: &MelFilterbank) -> Vec<f64> {
    let (nm, nb) = (fb.n_mels, fb.n_bins);
    assert_eq!(mel_power.len(), frames * nm);
    let step = 1.0 / lipschitz(fb);
    // Start from each band's mean power density spread back over its bins.
    let mut wt = vec![0.0; nb * nm];
    for m in 0..nm {
        for k in 0..nb {
            wt[k * nm + m] = fb.weights[m * nb + k];
        }
    }
    let row_sum: Vec<f64> = (0..nm).map(|m| fb.row(m).iter().sum()).collect();
    let col_sum: Vec<f64> = (0..nb).map(|k| wt[k * nm..(k + 1) * nm].iter().sum()).collect();
    let density: Vec<f64> = mel_power
        .chunks(nm)
        .flat_map(|row| row.iter().zip(&row_sum).map(|(p, s)| p.max(0.0) / s))
        .collect();
    let mut x = vec![0.0; frames * nb];
    gemm_nn(frames, nm, nb, &density, &fb.weights, &mut x);
    for row in x.chunks_mut(nb) {
        for (v, s) in row.iter_mut().zip(&col_sum) {
            *v = if *s > 0.0 { *v / s } else { 0.0 };
        }
    }
    let mut y = x.clone();
    let mut prev = x.clone();
    let mut resid = vec![0.0; frames * nm];
    let mut grad = vec![0.0; frames * nb];
    let mut t = 1.0f64;
    for _ in 0..NNLS_ITERS {
        gemm_nt(frames, nb, nm, &y, &fb.weights, &mut resid);
        for (r, m) in resid.iter_mut().zip(mel_power) {
            *r -= m;
        }
        gemm_nt(frames, nm, nb, &resid, &wt, &mut grad);
        prev.copy_from_slice(&x);
        for ((xi, yi), gi) in x.iter_mut().zip(&y).zip(&grad) {
            *xi = (yi - step * gi).max(0.0);
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let mom = (t - 1.0) / t_next;
        for ((yi, xi), pi) in y.iter_mut().zip(&x).zip(&prev) {
            *yi = xi + mom * (xi - pi);
        }
        t = t_next;
    }
    x
}

/// Largest eigenvalue of `W·Wᵀ` by power iteration.
fn lipschitz(fb: &MelFilterbank) -> f64 {
    let (nm, nb) = (fb.n_mels, fb.n_bins);
    let mut gram = vec![0.0; nm * nm];
    gemm_nt(nm, nb, nm, &fb.weights, &fb.weights, &mut gram);
    let mut v = vec![1.0; nm];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut w = vec![0.0; nm];
        gemm_nn(nm, nm, 1, &gram, &v, &mut w);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        lambda = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

pub fn griffin_lim(m: &MelSpectrogram, cfg: &SpectrogramConfig, fb: &MelFilterbank, iterations: usize) -> Result<Waveform> {
    griffin_lim_with_trace(m, cfg, fb, iterations).map(|(w, _)| w)
}

/// As [`griffin_lim`], also returning the spectral convergence
/// `‖|STFT(x_k)| − S‖ / ‖S‖` after each iteration.
pub fn griffin_lim_with_trace(
    m: &MelSpectrogram,
    cfg: &SpectrogramConfig,
    fb: &MelFilterbank,
    iterations: usize,
) -> Result<(Waveform, Vec<f64>)> {
    if iterations == 0 {
        return Err(Error::Param("griffin_lim needs at least one iteration".into()));
    }
    if m.normalized {
        return Err(Error::Domain("griffin_lim expects a denormalized log-mel input".into()));
    }
    if m.n_mels != fb.n_mels || m.n_frames == 0 {
        return Err(Error::Length(format!(
            "{} frames of {} bins for a {}-band filterbank",
            m.n_frames, m.n_mels, fb.n_mels
        )));
    }
    let mel_power: Vec<f64> = m.frames.iter().map(|&v| (v as f64).exp()).collect();
    let power = mel_to_linear_power(&mel_power, m.n_frames, fb);
    let target = Spectrogram {
        frames: m.n_frames,
        bins: fb.n_bins,
        data: power.iter().map(|p| p.sqrt()).collect(),
    };
    let (signal, trace) = reconstruct_phase(&target, cfg, iterations);
    let half = cfg.fft_size / 2;
    let end = signal.len() - half;
    let samples = signal[half..end].iter().map(|&s| s as f32).collect();
    Ok((Waveform::new(samples), trace))
}

/// Griffin-Lim iterations from zero phase over frames at `t·hop`; returns
/// the full (unpadded-frame) signal of `(T−1)·hop + fft_size` samples.
pub(crate) fn reconstruct_phase(target: &Spectrogram, cfg: &SpectrogramConfig, iterations: usize) -> (Vec<f64>, Vec<f64>) {
    let st = ComplexStft::new(cfg);
    let frames = target.frames;
    let target_norm = target.data.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mut spec: Vec<Complex<f64>> = target.data.iter().map(|&a| Complex::new(a, 0.0)).collect();
    let mut signal = st.synthesize(&spec, frames);
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let est = st.analyze(&signal, frames);
        let mut err = 0.0;
        for ((s, e), &a) in spec.iter_mut().zip(&est).zip(&target.data) {
            let mag = e.norm();
            err += (mag - a) * (mag - a);
            *s = if mag > 0.0 { e * (a / mag) } else { Complex::new(a, 0.0) };
        }
        trace.push(err.sqrt() / target_norm);
        signal = st.synthesize(&spec, frames);
    }
    (signal, trace)
}
