//! Readers for the native archive formats of the supported benchmarks.
//!
//! All readers return images as `u8` volumes in channel-major (`C×H×W`) order.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::{GzDecoder, ZlibDecoder};

use super::DataError;

/// Reads a whole file, transparently inflating a `.gz` sibling when the plain
/// file is absent.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    if path.exists() {
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| DataError::io(path, e))?;
        return Ok(buf);
    }
    let gz = PathBuf::from(format!("{}.gz", path.display()));
    if gz.exists() {
        File::open(&gz)
            .map(GzDecoder::new)
            .and_then(|mut d| d.read_to_end(&mut buf))
            .map_err(|e| DataError::io(&gz, e))?;
        return Ok(buf);
    }
    Err(DataError::Missing(path.to_path_buf()))
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// IDX image file (`magic 0x803`): returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    if bytes.len() < 16 || be_u32(bytes, 0) != 0x0803 {
        return Err(DataError::corrupt(path, "bad IDX image header"));
    }
    let n = be_u32(bytes, 4) as usize;
    let (r, c) = (be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    let body = &bytes[16..];
    if body.len() != n * r * c {
        return Err(DataError::corrupt(
            path,
            format!("expected {} pixel bytes, found {}", n * r * c, body.len()),
        ));
    }
    Ok((n, r, c, body.to_vec()))
}

/// IDX label file (`magic 0x801`).
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>, DataError> {
    if bytes.len() < 8 || be_u32(bytes, 0) != 0x0801 {
        return Err(DataError::corrupt(path, "bad IDX label header"));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() - 8 != n {
        return Err(DataError::corrupt(path, "label count mismatch"));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// CIFAR binary batches: each record is `label_bytes` label bytes followed by
/// 3072 channel-major pixels. The last label byte is used (the fine label for
/// CIFAR-100).
pub fn parse_cifar_records(bytes: &[u8], label_bytes: usize, path: &Path) -> Result<(Vec<u8>, Vec<usize>), DataError> {
    let rec = label_bytes + 3072;
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(DataError::corrupt(path, format!("size {} is not a multiple of {rec}", bytes.len())));
    }
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for r in bytes.chunks_exact(rec) {
        labels.push(r[label_bytes - 1] as usize);
        pixels.extend_from_slice(&r[label_bytes..]);
    }
    Ok((pixels, labels))
}

/// A numeric MATLAB array: dimensions (column-major) and its real part.
#[derive(Debug, Clone, PartialEq)]
pub struct MatArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: MatData,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MatData {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl MatData {
    pub fn len(&self) -> usize {
        match self {
            MatData::U8(v) => v.len(),
            MatData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            MatData::U8(v) => v.iter().map(|&b| b as f64).collect(),
            MatData::F64(v) => v.clone(),
        }
    }
}

const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT16: u32 = 3;
const MI_UINT16: u32 = 4;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_SINGLE: u32 = 7;
const MI_DOUBLE: u32 = 9;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self) -> Option<u32> {
        let b = self.buf.get(self.at..self.at + 4)?;
        self.at += 4;
        Some(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Reads one data element tag and body, honouring the small-element form
    /// and 8-byte padding.
    fn element(&mut self) -> Option<(u32, &'a [u8])> {
        let first = self.u32()?;
        if first >> 16 != 0 {
            let (ty, n) = (first & 0xffff, (first >> 16) as usize);
            let body = self.buf.get(self.at..self.at + n)?;
            self.at += 4;
            return Some((ty, body));
        }
        let n = self.u32()? as usize;
        let body = self.buf.get(self.at..self.at + n)?;
        self.at += n;
        if first != MI_COMPRESSED {
            self.at += (8 - n % 8) % 8;
        }
        Some((first, body))
    }
}

fn decode_numeric(ty: u32, body: &[u8]) -> Option<MatData> {
    macro_rules! le {
        ($t:ty, $w:expr) => {
            body.chunks_exact($w).map(|c| <$t>::from_le_bytes(c.try_into().unwrap()) as f64).collect()
        };
    }
    Some(match ty {
        MI_UINT8 => MatData::U8(body.to_vec()),
        MI_INT8 => MatData::F64(body.iter().map(|&b| b as i8 as f64).collect()),
        MI_INT16 => MatData::F64(le!(i16, 2)),
        MI_UINT16 => MatData::F64(le!(u16, 2)),
        MI_INT32 => MatData::F64(le!(i32, 4)),
        MI_UINT32 => MatData::F64(le!(u32, 4)),
        MI_SINGLE => MatData::F64(le!(f32, 4)),
        MI_DOUBLE => MatData::F64(le!(f64, 8)),
        _ => return None,
    })
}

fn parse_matrix(body: &[u8]) -> Option<MatArray> {
    let mut c = Cursor { buf: body, at: 0 };
    let (_, _flags) = c.element()?;
    let (dty, dims) = c.element()?;
    if dty != MI_INT32 {
        return None;
    }
    let dims = dims.chunks_exact(4).map(|b| i32::from_le_bytes(b.try_into().unwrap()) as usize).collect();
    let (_, name) = c.element()?;
    let (ty, real) = c.element()?;
    Some(MatArray {
        name: String::from_utf8_lossy(name).into_owned(),
        dims,
        data: decode_numeric(ty, real)?,
    })
}

/// Parses every numeric array in a little-endian MATLAB v5 file, inflating
/// compressed elements.
pub fn parse_mat_v5(bytes: &[u8], path: &Path) -> Result<Vec<MatArray>, DataError> {
    if bytes.len() < 128 || &bytes[126..128] != b"IM" {
        return Err(DataError::corrupt(path, "not a little-endian MAT v5 file"));
    }
    let mut out = Vec::new();
    let mut c = Cursor { buf: bytes, at: 128 };
    while c.at < bytes.len() {
        let (ty, body) = c.element().ok_or_else(|| DataError::corrupt(path, "truncated element"))?;
        let inflated;
        let (ty, body) = if ty == MI_COMPRESSED {
            let mut buf = Vec::new();
            ZlibDecoder::new(body)
                .read_to_end(&mut buf)
                .map_err(|e| DataError::io(path, e))?;
            inflated = buf;
            let mut inner = Cursor { buf: &inflated, at: 0 };
            let (t, b) = inner.element().ok_or_else(|| DataError::corrupt(path, "bad compressed element"))?;
            (t, b)
        } else {
            (ty, body)
        };
        if ty == MI_MATRIX {
            if let Some(m) = parse_matrix(body) {
                out.push(m);
            }
        }
    }
    Ok(out)
}

/// SVHN cropped-digit `.mat`: `X` is `32×32×3×N` column-major, `y` holds
/// labels 1..=10 with 10 standing for digit 0.
pub fn parse_svhn_mat(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<usize>), DataError> {
    let arrays = parse_mat_v5(bytes, path)?;
    let x = arrays.iter().find(|a| a.name == "X").ok_or_else(|| DataError::corrupt(path, "no X array"))?;
    let y = arrays.iter().find(|a| a.name == "y").ok_or_else(|| DataError::corrupt(path, "no y array"))?;
    if x.dims.len() != 4 || x.dims[..3] != [32, 32, 3] {
        return Err(DataError::corrupt(path, format!("unexpected X dims {:?}", x.dims)));
    }
    let n = x.dims[3];
    let MatData::U8(xs) = &x.data else {
        return Err(DataError::corrupt(path, "X is not uint8"));
    };
    let labels: Vec<usize> = y.data.to_f64().into_iter().map(|v| (v as usize) % 10).collect();
    if labels.len() != n || xs.len() != n * 3072 {
        return Err(DataError::corrupt(path, "X/y sample counts differ"));
    }
    let mut pixels = vec![0u8; n * 3072];
    // column-major (row, col, channel, sample) → channel-major row-major
    for s in 0..n {
        for ch in 0..3 {
            for col in 0..32 {
                for row in 0..32 {
                    pixels[s * 3072 + ch * 1024 + row * 32 + col] = xs[row + 32 * col + 1024 * ch + 3072 * s];
                }
            }
        }
    }
    Ok((pixels, labels))
}
