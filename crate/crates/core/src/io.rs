//! Raw numeric file formats.
//!
//! * image: `KSIMG1\n`, then `d w h complex\n`, then little-endian f64 values
//!   in pixel order (`re im` pairs when `complex` is 1, real parts otherwise).
//!   `w` is the last (fastest) axis; 1-D images use `h = 1`.
//! * k-space: `KSKSP1\n`, then `M\n`, then M little-endian `re im` pairs.
//! * pattern: CSV with header `kx` or `kx,ky`, one row per point, 17
//!   significant digits. Columns follow the grid axis order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{ComplexImage, ImageGrid, KSpaceVector, SamplingPattern, C64};

const IMAGE_MAGIC: &[u8] = b"KSIMG1\n";
const KSPACE_MAGIC: &[u8] = b"KSKSP1\n";

fn header_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedHeader { path: path.to_path_buf(), reason: reason.into() }
}

fn data_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedData { path: path.to_path_buf(), reason: reason.into() }
}

/// Split off one `\n`-terminated ASCII line.
fn take_line<'a>(bytes: &'a [u8], path: &Path) -> Result<(&'a str, &'a [u8])> {
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| header_err(path, "unterminated header line"))?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| header_err(path, "header is not ASCII"))?;
    Ok((line, &bytes[end + 1..]))
}

fn read_f64s(bytes: &[u8], count: usize) -> Result<Vec<f64>> {
    if bytes.len() != count * 8 {
        return Err(Error::LengthMismatch { expected: count * 8, found: bytes.len() });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn save_image(path: impl AsRef<Path>, image: &ComplexImage) -> Result<()> {
    let grid = image.grid();
    let (h, w) = grid.rows_cols();
    // positive zero imaginary parts only, so the real encoding is lossless
    let is_real = image.data().iter().all(|z| z.im.to_bits() == 0);
    let mut buf = Vec::with_capacity(32 + image.data().len() * 16);
    buf.extend_from_slice(IMAGE_MAGIC);
    writeln!(buf, "{} {} {} {}", grid.ndim(), w, h, u8::from(!is_real))?;
    for z in image.data() {
        buf.extend_from_slice(&z.re.to_le_bytes());
        if !is_real {
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ComplexImage> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let rest = bytes
        .strip_prefix(IMAGE_MAGIC)
        .ok_or_else(|| header_err(path, "missing KSIMG1 magic"))?;
    let (line, payload) = take_line(rest, path)?;
    let fields: Vec<usize> = line
        .split_whitespace()
        .map(|f| f.parse().map_err(|_| header_err(path, format!("bad header field `{f}`"))))
        .collect::<Result<_>>()?;
    let [d, w, h, complex] = fields[..] else {
        return Err(header_err(path, "expected `d w h complex`"));
    };
    let grid = match d {
        1 if h == 1 => ImageGrid::new(&[w]),
        2 => ImageGrid::new(&[h, w]),
        _ => return Err(header_err(path, format!("unsupported shape d={d} w={w} h={h}"))),
    }
    .map_err(|e| header_err(path, e.to_string()))?;
    let n = grid.len();
    let data = match complex {
        0 => read_f64s(payload, n)?.into_iter().map(|re| C64::new(re, 0.0)).collect(),
        1 => read_f64s(payload, 2 * n)?
            .chunks_exact(2)
            .map(|c| C64::new(c[0], c[1]))
            .collect(),
        _ => return Err(header_err(path, "complex flag must be 0 or 1")),
    };
    ComplexImage::new(grid, data)
}

pub fn save_kspace(path: impl AsRef<Path>, y: &KSpaceVector) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + y.len() * 16);
    buf.extend_from_slice(KSPACE_MAGIC);
    writeln!(buf, "{}", y.len())?;
    for z in y.data() {
        buf.extend_from_slice(&z.re.to_le_bytes());
        buf.extend_from_slice(&z.im.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_kspace(path: impl AsRef<Path>) -> Result<KSpaceVector> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let rest = bytes
        .strip_prefix(KSPACE_MAGIC)
        .ok_or_else(|| header_err(path, "missing KSKSP1 magic"))?;
    let (line, payload) = take_line(rest, path)?;
    let m: usize = line.trim().parse().map_err(|_| header_err(path, format!("bad length `{line}`")))?;
    let values = read_f64s(payload, 2 * m)?;
    KSpaceVector::new(values.chunks_exact(2).map(|c| C64::new(c[0], c[1])).collect())
}

pub fn save_pattern(path: impl AsRef<Path>, pattern: &SamplingPattern) -> Result<()> {
    fs::write(path, pattern_csv(pattern))?;
    Ok(())
}

/// CSV text of a pattern in the on-disk format.
pub fn pattern_csv(pattern: &SamplingPattern) -> String {
    let mut out = String::from(if pattern.ndim() == 1 { "kx\n" } else { "kx,ky\n" });
    for p in pattern.points() {
        let row: Vec<String> = p.iter().map(|c| format!("{c:.16e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn load_pattern(path: impl AsRef<Path>) -> Result<SamplingPattern> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let ndim = match lines.next().map(str::trim) {
        Some("kx") => 1,
        Some("kx,ky") => 2,
        other => return Err(header_err(path, format!("unexpected header {other:?}"))),
    };
    let mut coords = Vec::new();
    for (row, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != ndim {
            return Err(data_err(path, format!("row {} has {} fields, expected {ndim}", row + 1, fields.len())));
        }
        for f in fields {
            coords.push(
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| data_err(path, format!("row {}: bad number `{f}`", row + 1)))?,
            );
        }
    }
    SamplingPattern::new(ndim, coords).map_err(|e| data_err(path, e.to_string()))
}

/// Load a pattern and require exactly `m` points.
pub fn load_pattern_expecting(path: impl AsRef<Path>, m: usize) -> Result<SamplingPattern> {
    let pattern = load_pattern(path)?;
    if pattern.len() != m {
        return Err(Error::LengthMismatch { expected: m, found: pattern.len() });
    }
    Ok(pattern)
}

/// 8-bit binary PGM of `|x|`, mapping `[0, peak]` linearly onto `[0, 255]`.
pub fn save_pgm(path: impl AsRef<Path>, image: &ComplexImage, peak: f64) -> Result<()> {
    let (h, w) = image.grid().rows_cols();
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(image.data().iter().map(|z| {
        let v = if peak > 0.0 { z.norm() / peak } else { 0.0 };
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }));
    fs::write(path, buf)?;
    Ok(())
}
