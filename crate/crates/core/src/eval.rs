//! Objective evaluation: mel cepstra, DTW alignment, mel-cepstral distortion.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dsp::{load_wav, wav_to_logmel, MelFilterbank, MelSpectrogram, SpectrogramConfig};
use crate::error::{Error, Result};

pub const N_CEPSTRA: usize = 13;

/// `10/ln 10 · √2`, the per-frame scale of the distortion.
pub const MCD_SCALE: f64 = 10.0 / std::f64::consts::LN_10 * std::f64::consts::SQRT_2;

/// Per-frame coefficients `c1..cN`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CepstralSequence {
    pub n_frames: usize,
    pub n_coeffs: usize,
    pub data: Vec<f64>,
}

impl CepstralSequence {
    pub fn new(n_frames: usize, n_coeffs: usize, data: Vec<f64>) -> Result<Self> {
        if n_frames == 0 || data.len() != n_frames * n_coeffs {
            return Err(Error::Length(format!("{} values for {n_frames} frames of {n_coeffs}", data.len())));
        }
        Ok(Self { n_frames, n_coeffs, data })
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_coeffs..(t + 1) * self.n_coeffs]
    }
}

/// Orthonormal DCT-II basis row `k` for length `n`.
fn dct_row(k: usize, n: usize) -> Vec<f64> {
    let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
    (0..n)
        .map(|i| s * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
        .collect()
}

/// Full-length orthonormal DCT-II.
pub fn dct2(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|k| dct_row(k, n).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// DCT-II of each log-mel frame, keeping coefficients `1..=n_coeffs`.
pub fn mel_cepstrum(m: &MelSpectrogram, n_coeffs: usize) -> Result<CepstralSequence> {
    if m.normalized {
        return Err(Error::Domain("mel cepstra need denormalized log-mel input".into()));
    }
    if n_coeffs >= m.n_mels {
        return Err(Error::Param(format!("{n_coeffs} coefficients from {} bins", m.n_mels)));
    }
    let basis: Vec<Vec<f64>> = (1..=n_coeffs).map(|k| dct_row(k, m.n_mels)).collect();
    let mut data = Vec::with_capacity(m.n_frames * n_coeffs);
    for t in 0..m.n_frames {
        let frame = m.frame(t);
        for row in &basis {
            data.push(row.iter().zip(frame).map(|(a, &b)| a * b as f64).sum());
        }
    }
    CepstralSequence::new(m.n_frames, n_coeffs, data)
}

/// Monotone alignment from `(0, 0)` to `(T1−1, T2−1)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentPath {
    pub pairs: Vec<(usize, usize)>,
}

pub fn frame_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Minimum summed Euclidean frame distance over paths with steps (1,1),
/// (1,0), (0,1); ties resolve in that order.
pub fn dtw_align(a: &CepstralSequence, b: &CepstralSequence) -> (AlignmentPath, f64) {
    let (n, m) = (a.n_frames, b.n_frames);
    let mut cost = vec![f64::INFINITY; n * m];
    // 0: diagonal, 1: from (i−1, j), 2: from (i, j−1).
    let mut back = vec![0u8; n * m];
    for i in 0..n {
        for j in 0..m {
            let d = frame_distance(a.frame(i), b.frame(j));
            if i == 0 && j == 0 {
                cost[0] = d;
                continue;
            }
            let mut best = f64::INFINITY;
            let mut dir = 0;
            for (k, (pi, pj)) in [(1usize, 1usize), (1, 0), (0, 1)].into_iter().enumerate() {
                if i >= pi && j >= pj {
                    let c = cost[(i - pi) * m + (j - pj)];
                    if c < best {
                        best = c;
                        dir = k as u8;
                    }
                }
            }
            cost[i * m + j] = best + d;
            back[i * m + j] = dir;
        }
    }
    let mut pairs = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        match back[i * m + j] {
            0 => {
                i -= 1;
                j -= 1;
            }
            1 => i -= 1,
            _ => j -= 1,
        }
        pairs.push((i, j));
    }
    pairs.reverse();
    (AlignmentPath { pairs }, cost[n * m - 1])
}

/// Mean over the DTW path of `10/ln10 · √(2·Σ_d (c_d − c'_d)²)`, in dB.
pub fn mcd(reference: &CepstralSequence, converted: &CepstralSequence) -> f64 {
    let (path, _) = dtw_align(reference, converted);
    let total: f64 = path
        .pairs
        .iter()
        .map(|&(i, j)| MCD_SCALE * frame_distance(reference.frame(i), converted.frame(j)))
        .sum();
    total / path.pairs.len() as f64
}

/// MCD between two denormalized log-mel spectrograms.
pub fn mel_mcd(reference: &MelSpectrogram, converted: &MelSpectrogram) -> Result<f64> {
    Ok(mcd(&mel_cepstrum(reference, N_CEPSTRA)?, &mel_cepstrum(converted, N_CEPSTRA)?))
}

#[derive(Debug)]
pub struct EvalRow {
    pub reference: PathBuf,
    pub converted: PathBuf,
    pub mcd_db: std::result::Result<f64, Error>,
}

#[derive(Debug)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: f64,
    pub std: f64,
}

impl EvalReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.mcd_db.is_err()).count()
    }

    /// `ref,conv,mcd_db` rows (failed pairs as `nan`) then `MEAN` and `STD`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let num = |v: f64| if v.is_nan() { "nan".to_string() } else { v.to_string() };
        let mut text = String::from("ref,conv,mcd_db\n");
        for r in &self.rows {
            let v = r.mcd_db.as_ref().map_or(f64::NAN, |v| *v);
            text.push_str(&format!("{},{},{}\n", r.reference.display(), r.converted.display(), num(v)));
        }
        text.push_str(&format!("MEAN,,{}\nSTD,,{}\n", num(self.mean), num(self.std)));
        let mut f = std::fs::File::create(path).map_err(|e| Error::from(e).at(path))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::from(e).at(path))
    }
}

fn wav_cepstra(path: &Path, cfg: &SpectrogramConfig, fb: &MelFilterbank) -> Result<CepstralSequence> {
    let mel = load_wav(path).and_then(|w| wav_to_logmel(&w, cfg, fb)).map_err(|e| e.at(path))?;
    mel_cepstrum(&mel, N_CEPSTRA)
}

/// MCD of every `(reference, converted)` WAV pair. A pair that fails is
/// recorded and the rest still run; mean and population standard deviation
/// cover the successful pairs.
pub fn evaluate_corpus(pairs: &[(PathBuf, PathBuf)], cfg: &SpectrogramConfig, fb: &MelFilterbank) -> EvalReport {
    let rows: Vec<EvalRow> = pairs
        .iter()
        .map(|(r, c)| EvalRow {
            reference: r.clone(),
            converted: c.clone(),
            mcd_db: wav_cepstra(r, cfg, fb).and_then(|a| Ok(mcd(&a, &wav_cepstra(c, cfg, fb)?))),
        })
        .collect();
    let ok: Vec<f64> = rows.iter().filter_map(|r| r.mcd_db.as_ref().ok().copied()).collect();
    let (mean, std) = if ok.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let mean = ok.iter().sum::<f64>() / ok.len() as f64;
        let var = ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ok.len() as f64;
        (mean, var.sqrt())
    };
    EvalReport { rows, mean, std }
}

/// Reads a pair list: one `reference,converted` per line, optional
/// `ref,conv` header, paths relative to the list's directory.
pub fn read_pairs_csv(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, PathBuf)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.eq_ignore_ascii_case("ref,conv")) {
            continue;
        }
        let Some((r, c)) = line.split_once(',') else {
            return Err(Error::Format(format!("line {}: expected 'reference,converted'", n + 1)).at(path));
        };
        out.push((base.join(r.trim()), base.join(c.trim())));
    }
    Ok(out)
}
