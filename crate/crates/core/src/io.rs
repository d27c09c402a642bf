//! Flat-file helpers: atomic writes, PFM depth maps, PNG masks and JSON.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use image::{GrayImage, Luma};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::render::{DepthImage, SubjectMask};

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn temp_path_for(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    path.with_file_name(format!(".{name}.tmp-{}-{n}", std::process::id()))
}

/// Writes `bytes` to a sibling temp file, syncs it, then renames it over
/// `path`. Readers observe either the old or the new complete file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic_with(path, bytes, |_| Ok(()))
}

/// Like [`write_atomic`] but runs `before_rename` between the durable temp
/// write and the rename. An error from the hook aborts the rename and leaves
/// the target untouched, which is how interrupted writes are simulated.
pub fn write_atomic_with<F>(path: &Path, bytes: &[u8], before_rename: F) -> Result<()>
where
    F: FnOnce(&Path) -> std::io::Result<()>,
{
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = temp_path_for(path);
    {
        let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    before_rename(&tmp).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Encodes a depth image as little-endian grayscale PFM (scale -1.0).
/// PFM stores rows bottom-to-top.
pub fn encode_pfm(depth: &DepthImage) -> Vec<u8> {
    let (w, h) = (depth.width as usize, depth.height as usize);
    let header = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height);
    let mut out = Vec::with_capacity(header.len() + w * h * 4);
    out.extend_from_slice(header.as_bytes());
    for row in (0..h).rev() {
        for v in &depth.values[row * w..(row + 1) * w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8], origin: &Path) -> Result<DepthImage> {
    let mut reader = BufReader::new(bytes);
    let mut header = Vec::new();
    // three whitespace-terminated header lines
    let mut lines = Vec::new();
    for _ in 0..3 {
        header.clear();
        reader
            .read_until(b'\n', &mut header)
            .map_err(|e| Error::io(origin, e))?;
        lines.push(String::from_utf8_lossy(&header).trim().to_string());
    }
    if lines[0] != "Pf" {
        return Err(Error::parse(origin, format!("expected grayscale PFM magic 'Pf', got {:?}", lines[0])));
    }
    let dims: Vec<u32> = lines[1]
        .split_whitespace()
        .map(|s| s.parse::<u32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::parse(origin, format!("bad PFM dimensions: {e}")))?;
    if dims.len() != 2 {
        return Err(Error::parse(origin, "bad PFM dimensions line"));
    }
    let scale: f32 = lines[2]
        .parse()
        .map_err(|e| Error::parse(origin, format!("bad PFM scale: {e}")))?;
    let little = scale < 0.0;
    let (w, h) = (dims[0] as usize, dims[1] as usize);
    let mut data = vec![0u8; w * h * 4];
    reader
        .read_exact(&mut data)
        .map_err(|e| Error::parse(origin, format!("truncated PFM payload: {e}")))?;
    let mut values = vec![0f32; w * h];
    for (i, chunk) in data.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row_from_bottom, col) = (i / w, i % w);
        values[(h - 1 - row_from_bottom) * w + col] = v;
    }
    Ok(DepthImage {
        width: dims[0],
        height: dims[1],
        values,
    })
}

pub fn write_pfm(path: &Path, depth: &DepthImage) -> Result<()> {
    write_atomic(path, &encode_pfm(depth))
}

pub fn read_pfm(path: &Path) -> Result<DepthImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

pub fn encode_png<P, C>(img: &image::ImageBuffer<P, C>) -> Result<Vec<u8>>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png)?;
    Ok(buf)
}

pub fn write_png<P, C>(path: &Path, img: &image::ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    write_atomic(path, &encode_png(img)?)
}

/// Masks are stored as 8-bit PNG with 255 marking subject pixels.
pub fn mask_to_png(mask: &SubjectMask) -> GrayImage {
    GrayImage::from_fn(mask.width, mask.height, |x, y| {
        Luma([if mask.get(x, y) { 255 } else { 0 }])
    })
}

pub fn mask_from_png(img: &GrayImage) -> SubjectMask {
    let values = img.pixels().map(|p| p.0[0] >= 128).collect();
    SubjectMask {
        width: img.width(),
        height: img.height(),
        values,
    }
}

pub fn read_mask(path: &Path) -> Result<SubjectMask> {
    let img = image::open(path)?.to_luma8();
    Ok(mask_from_png(&img))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_keeps_rows_and_infinity() {
        let depth = DepthImage {
            width: 3,
            height: 2,
            values: vec![1.0, 2.0, f32::INFINITY, 4.5, 5.25, 6.0],
        };
        let bytes = encode_pfm(&depth);
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        // first stored row is the bottom image row
        let payload = &bytes[b"Pf\n3 2\n-1.0\n".len()..];
        assert_eq!(f32::from_le_bytes(payload[0..4].try_into().unwrap()), 4.5);
        let back = decode_pfm(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, depth);
    }

    #[test]
    fn truncated_pfm_is_a_parse_error() {
        let depth = DepthImage {
            width: 2,
            height: 2,
            values: vec![1.0; 4],
        };
        let mut bytes = encode_pfm(&depth);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_pfm(&bytes, Path::new("x")), Err(Error::Parse { .. })));
    }

    #[test]
    fn interrupted_atomic_write_keeps_previous_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("detections.json");
        write_atomic(&path, b"old").unwrap();
        let r = write_atomic_with(&path, b"new contents", |_| {
            Err(std::io::Error::other("simulated crash"))
        });
        assert!(r.is_err());
        assert_eq!(fs::read(&path).unwrap(), b"old");
        write_atomic(&path, b"new").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"new");
    }

    #[test]
    fn mask_png_round_trip() {
        let mask = SubjectMask {
            width: 3,
            height: 2,
            values: vec![true, false, true, false, false, true],
        };
        let png = mask_to_png(&mask);
        assert_eq!(png.get_pixel(0, 0).0[0], 255);
        assert_eq!(png.get_pixel(1, 0).0[0], 0);
        assert_eq!(mask_from_png(&png), mask);
    }
}
