use std::path::Path;

use super::bytes::{read_file, write_file_atomic};
use crate::error::{Error, Result};

/// Writes a 16-bit binary PGM, mapping `[lo, hi]` affinely onto `[0, 65535]` with clamping.
pub fn write_image_pgm(image: &[f64], nx: usize, ny: usize, path: &Path, window: (f64, f64)) -> Result<()> {
    let (lo, hi) = window;
    if !(hi > lo) {
        return Err(Error::InvalidArgument(format!(
            "pgm window needs hi > lo, got ({lo}, {hi})"
        )));
    }
    if image.len() != nx * ny {
        return Err(Error::shape("pgm image", &[ny, nx], &[image.len()]));
    }
    let mut out = format!("P5\n{nx} {ny}\n65535\n").into_bytes();
    out.reserve(2 * image.len());
    for &v in image {
        let t = ((v - lo) / (hi - lo) * 65535.0).round();
        let q = if t.is_nan() { 0.0 } else { t.clamp(0.0, 65535.0) } as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    write_file_atomic(path, &out)
}

/// Reads a 16-bit binary PGM written by [`write_image_pgm`]: `(nx, ny, samples)`.
pub fn read_image_pgm(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = read_file(path)?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(bad("not a 16-bit binary PGM"));
    }
    let nx: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let ny: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let payload = bytes.get(pos..).ok_or_else(|| bad("missing payload"))?;
    if payload.len() != 2 * nx * ny {
        return Err(bad("payload length does not match dimensions"));
    }
    let samples = payload
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((nx, ny, samples))
}
