//! `LMB1` clip records: magic, u32 frames, u32 dims, then f32 values row-major,
//! all little-endian.

use std::path::Path;

use super::clip::MotionClip;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LMB1";

pub fn record_len(frames: usize, dims: usize) -> usize {
    12 + 4 * frames * dims
}

/// Appends one record to `out`.
pub fn encode_clip(clip: &MotionClip, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(clip.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(clip.dims() as u32).to_le_bytes());
    for &v in clip.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Decodes the record starting at `offset`; returns the clip and the offset after it.
pub fn decode_clip(bytes: &[u8], offset: usize, id: &str, fps: f64, path: &Path) -> Result<(MotionClip, usize)> {
    let bad = |detail: String| Error::Format { format: "LMB1", path: path.to_path_buf(), detail };
    let head = bytes.get(offset..offset + 12).ok_or_else(|| bad(format!("truncated header at byte {offset}")))?;
    if &head[..4] != MAGIC {
        return Err(bad(format!("bad magic at byte {offset}")));
    }
    let frames = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let dims = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let end = offset + record_len(frames, dims);
    let body = bytes.get(offset + 12..end).ok_or_else(|| bad(format!("record at byte {offset} is truncated")))?;
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    let clip = MotionClip::new(id, fps, frames, dims, data).map_err(|e| bad(e.to_string()))?;
    Ok((clip, end))
}

pub fn write_clip(path: &Path, clip: &MotionClip) -> Result<()> {
    let mut buf = Vec::with_capacity(record_len(clip.frames(), clip.dims()));
    encode_clip(clip, &mut buf);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_clip(path: &Path, id: &str, fps: f64) -> Result<MotionClip> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (clip, end) = decode_clip(&bytes, 0, id, fps, path)?;
    if end != bytes.len() {
        return Err(Error::Format { format: "LMB1", path: path.to_path_buf(), detail: "trailing bytes".into() });
    }
    Ok(clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let clip = MotionClip::new("c", 20.0, 2, 1, vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        encode_clip(&clip, &mut buf);
        assert_eq!(&buf[..4], b"LMB1");
        assert_eq!(&buf[4..12], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&buf[12..16], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), record_len(2, 1));
        let (back, end) = decode_clip(&buf, 0, "c", 20.0, Path::new("mem")).unwrap();
        assert_eq!(back, clip);
        assert_eq!(end, buf.len());
    }

    #[test]
    fn corrupt_records_are_rejected() {
        let clip = MotionClip::new("c", 20.0, 3, 2, vec![0.0; 6]).unwrap();
        let mut buf = Vec::new();
        encode_clip(&clip, &mut buf);
        assert!(decode_clip(&buf[..buf.len() - 1], 0, "c", 20.0, Path::new("m")).is_err());
        buf[0] = b'X';
        assert!(decode_clip(&buf, 0, "c", 20.0, Path::new("m")).is_err());
    }
}
