//! `VGS1` spectrogram cache: magic, u32 frames, u32 bands, f32 row-major data.

use std::io::{Read, Write};

use super::spectrogram::{LogSpectrogram, BANDS};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"VGS1";

pub fn write_cache<W: Write>(spec: &LogSpectrogram, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + spec.values.len() * 4);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(spec.frames as u32).to_le_bytes());
    buf.extend_from_slice(&(BANDS as u32).to_le_bytes());
    for v in &spec.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_cache<R: Read>(mut r: R) -> Result<LogSpectrogram> {
    let bad = |reason: String| Error::Format { format: "VGS1", reason };
    let mut header = [0u8; 12];
    r.read_exact(&mut header).map_err(|e| bad(format!("header: {e}")))?;
    if &header[..4] != CACHE_MAGIC {
        return Err(bad(format!("magic {:?}", &header[..4])));
    }
    let frames = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let bands = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    if bands != BANDS {
        return Err(bad(format!("{bands} bands, expected {BANDS}")));
    }
    let mut raw = vec![0u8; frames * bands * 4];
    r.read_exact(&mut raw).map_err(|e| bad(format!("payload: {e}")))?;
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite value".into()));
    }
    Ok(LogSpectrogram { frames, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_layout() {
        let spec = LogSpectrogram {
            frames: 2,
            values: (0..256).map(|i| i as f32 * 0.5).collect(),
        };
        let mut buf = Vec::new();
        write_cache(&spec, &mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 256 * 4);
        assert_eq!(&buf[..4], b"VGS1");
        assert_eq!(&buf[4..12], &[2, 0, 0, 0, 128, 0, 0, 0]);
        assert_eq!(&buf[16..20], &0.5f32.to_le_bytes());
        assert_eq!(read_cache(&buf[..]).unwrap(), spec);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(read_cache(&b"VGS2\0\0\0\0\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_cache(&LogSpectrogram { frames: 1, values: vec![0.0; 128] }, &mut buf).unwrap();
        assert!(read_cache(&buf[..buf.len() - 1]).is_err());
    }
}
