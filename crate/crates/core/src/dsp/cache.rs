use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::dsp::{MelSpectrogram, NormalizationStats, N_MELS};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"DVF1";
pub const STATS_MAGIC: &[u8; 4] = b"DVS1";

pub fn write_features(path: impl AsRef<Path>, m: &MelSpectrogram) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(13 + 4 * m.frames.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.write_u32::<LittleEndian>(m.n_frames as u32)?;
    buf.write_u32::<LittleEndian>(m.n_mels as u32)?;
    buf.write_u8(m.normalized as u8)?;
    for &v in &m.frames {
        buf.write_f32::<LittleEndian>(v)?;
    }
    std::fs::write(path, buf).map_err(|e| Error::from(e).at(path))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::from(e).at(path))?;
    parse_features(&bytes).map_err(|e| e.at(path))
}

fn parse_features(mut r: &[u8]) -> Result<MelSpectrogram> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated feature header".into()))?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format(format!("bad feature magic {magic:?}")));
    }
    let n_frames = r.read_u32::<LittleEndian>().map_err(|_| Error::Format("truncated feature header".into()))? as usize;
    let n_mels = r.read_u32::<LittleEndian>().map_err(|_| Error::Format("truncated feature header".into()))? as usize;
    let normalized = match r.read_u8().map_err(|_| Error::Format("truncated feature header".into()))? {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("normalized flag {f}"))),
    };
    if n_mels != N_MELS {
        return Err(Error::Format(format!("expected {N_MELS} mel bins, found {n_mels}")));
    }
    if r.len() != n_frames * n_mels * 4 {
        return Err(Error::Format(format!(
            "payload of {} bytes for {n_frames} frames",
            r.len()
        )));
    }
    let mut frames = vec![0f32; n_frames * n_mels];
    r.read_f32_into::<LittleEndian>(&mut frames)?;
    MelSpectrogram::new(n_frames, n_mels, frames, normalized)
}

pub fn write_stats(path: impl AsRef<Path>, s: &NormalizationStats) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(20);
    buf.extend_from_slice(STATS_MAGIC);
    buf.write_f64::<LittleEndian>(s.min)?;
    buf.write_f64::<LittleEndian>(s.max)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::from(e).at(path))?;
    f.write_all(&buf).map_err(|e| Error::from(e).at(path))
}

pub fn read_stats(path: impl AsRef<Path>) -> Result<NormalizationStats> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::from(e).at(path))?;
    let parse = || -> Result<NormalizationStats> {
        if bytes.len() != 20 || &bytes[..4] != STATS_MAGIC {
            return Err(Error::Format("not a DVS1 stats file".into()));
        }
        let mut r = &bytes[4..];
        let min = r.read_f64::<LittleEndian>()?;
        let max = r.read_f64::<LittleEndian>()?;
        NormalizationStats::new(min, max)
    };
    parse().map_err(|e| e.at(path))
}
