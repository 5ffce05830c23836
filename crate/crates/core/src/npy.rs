//! Reader and writer for NumPy `.npy` files (format version 1.0).
//!
//! Only the two layouts the engine exchanges with the exporter are
//! supported: 2-D C-order float matrices (`<f4`, `<f8`) and 1-D
//! little-endian integer label vectors. Files are always written as
//! version 1.0 with the header padded to a 64-byte boundary, which is
//! what `numpy.save` produces.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Error)]
pub enum NpyError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("unsupported layout: {0}")]
    UnsupportedLayout(String),
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
    #[error("truncated data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("negative label {0}")]
    NegativeLabel(i64),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

/// Parsed header plus the byte offset at which the data starts.
fn parse_header(bytes: &[u8]) -> Result<(Header, usize), NpyError> {
    let bad = |m: &str| NpyError::MalformedHeader(m.to_string());
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(bad("missing \\x93NUMPY magic"));
    }
    let major = bytes[6];
    let (len, start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(bad("truncated preamble"));
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        v => return Err(bad(&format!("unknown format version {v}"))),
    };
    let end = start + len;
    if bytes.len() < end {
        return Err(bad("header length exceeds file size"));
    }
    let text = std::str::from_utf8(&bytes[start..end]).map_err(|_| bad("header is not text"))?;
    let header = parse_dict(text.trim_end())?;
    Ok((header, end))
}

/// Minimal parser for the Python dict literal stored in the header.
fn parse_dict(text: &str) -> Result<Header, NpyError> {
    let bad = |m: &str| NpyError::MalformedHeader(format!("{m} in {text:?}"));
    let inner = text
        .trim()
        .strip_prefix('{')
        .and_then(|t| t.strip_suffix('}'))
        .ok_or_else(|| bad("header is not a dict"))?;

    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;
    let mut rest = inner.trim();
    while !rest.is_empty() {
        let (key, after) = take_quoted(rest).ok_or_else(|| bad("expected quoted key"))?;
        let after = after
            .trim_start()
            .strip_prefix(':')
            .ok_or_else(|| bad("expected ':'"))?
            .trim_start();
        let consumed = match key {
            "descr" => {
                let (v, a) = take_quoted(after).ok_or_else(|| bad("descr must be a string"))?;
                descr = Some(v.to_string());
                a
            }
            "fortran_order" => {
                if let Some(a) = after.strip_prefix("False") {
                    fortran = Some(false);
                    a
                } else if let Some(a) = after.strip_prefix("True") {
                    fortran = Some(true);
                    a
                } else {
                    return Err(bad("fortran_order must be a bool"));
                }
            }
            "shape" => {
                let body = after.strip_prefix('(').ok_or_else(|| bad("shape must be a tuple"))?;
                let close = body.find(')').ok_or_else(|| bad("unterminated shape"))?;
                let dims = body[..close]
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.trim_end_matches('L').parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| bad("shape entries must be integers"))?;
                shape = Some(dims);
                &body[close + 1..]
            }
            other => return Err(bad(&format!("unexpected key {other:?}"))),
        };
        rest = consumed.trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }
    Ok(Header {
        descr: descr.ok_or_else(|| bad("missing descr"))?,
        fortran_order: fortran.ok_or_else(|| bad("missing fortran_order"))?,
        shape: shape.ok_or_else(|| bad("missing shape"))?,
    })
}

fn take_quoted(s: &str) -> Option<(&str, &str)> {
    let q = s.chars().next().filter(|c| *c == '\'' || *c == '"')?;
    let body = &s[1..];
    let end = body.find(q)?;
    Some((&body[..end], &body[end + 1..]))
}

fn encode_header(descr: &str, shape: &[usize]) -> Vec<u8> {
    let dims = match shape {
        [n] => format!("({n},)"),
        _ => format!(
            "({})",
            shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut dict = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {dims}, }}");
    // magic(6) + version(2) + len(2) + dict + '\n' must be a multiple of ALIGN
    let unpadded = 10 + dict.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(10 + dict.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>, NpyError> {
    fs::read(path).map_err(|source| NpyError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), NpyError> {
    let io_err = |source| NpyError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(bytes).map_err(io_err)?;
    Ok(())
}

fn check_len(data: &[u8], expected: usize) -> Result<(), NpyError> {
    if data.len() != expected {
        return Err(NpyError::Truncated {
            expected,
            found: data.len(),
        });
    }
    Ok(())
}

/// Decodes an in-memory `.npy` image holding a 2-D float matrix.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, NpyError> {
    let (header, offset) = parse_header(bytes)?;
    if header.fortran_order {
        return Err(NpyError::UnsupportedLayout("fortran order".into()));
    }
    let (rows, cols) = match header.shape[..] {
        [r, c] => (r, c),
        _ => {
            return Err(NpyError::UnsupportedLayout(format!(
                "expected 2-D array, got shape {:?}",
                header.shape
            )))
        }
    };
    let n = rows * cols;
    let body = &bytes[offset..];
    let values: Vec<f32> = match header.descr.as_str() {
        "<f4" => {
            check_len(body, n * 4)?;
            body.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        }
        "<f8" => {
            check_len(body, n * 8)?;
            body.chunks_exact(8)
                .map(|b| {
                    let v = f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]);
                    // `as` rounds to nearest, ties to even
                    v as f32
                })
                .collect()
        }
        other => return Err(NpyError::UnsupportedDtype(other.to_string())),
    };
    Tensor::new(rows, cols, values)
}

/// Encodes a tensor as a version 1.0 `<f4` C-order `.npy` image.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = encode_header("<f4", &[t.rows(), t.cols()]);
    out.reserve(t.data().len() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, NpyError> {
    decode_tensor(&read_file(path.as_ref())?)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<(), NpyError> {
    write_file(path.as_ref(), &encode_tensor(t))
}

/// Decodes a 1-D integer array of class indices.
pub fn decode_labels(bytes: &[u8]) -> Result<Vec<usize>, NpyError> {
    let (header, offset) = parse_header(bytes)?;
    let n = match header.shape[..] {
        [n] => n,
        _ => {
            return Err(NpyError::UnsupportedLayout(format!(
                "expected 1-D label array, got shape {:?}",
                header.shape
            )))
        }
    };
    let body = &bytes[offset..];
    let raw: Vec<i64> = match header.descr.as_str() {
        "<i8" => {
            check_len(body, n * 8)?;
            body.chunks_exact(8)
                .map(|b| i64::from_le_bytes(b.try_into().unwrap()))
                .collect()
        }
        "<i4" => {
            check_len(body, n * 4)?;
            body.chunks_exact(4)
                .map(|b| i32::from_le_bytes(b.try_into().unwrap()) as i64)
                .collect()
        }
        "<u8" => {
            check_len(body, n * 8)?;
            body.chunks_exact(8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as i64)
                .collect()
        }
        "<u4" => {
            check_len(body, n * 4)?;
            body.chunks_exact(4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as i64)
                .collect()
        }
        "|u1" | "|i1" => {
            check_len(body, n)?;
            let signed = header.descr == "|i1";
            body.iter()
                .map(|&b| if signed { b as i8 as i64 } else { b as i64 })
                .collect()
        }
        other => return Err(NpyError::UnsupportedDtype(other.to_string())),
    };
    raw.into_iter()
        .map(|v| usize::try_from(v).map_err(|_| NpyError::NegativeLabel(v)))
        .collect()
}

pub fn encode_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = encode_header("<i8", &[labels.len()]);
    for &l in labels {
        out.extend_from_slice(&(l as i64).to_le_bytes());
    }
    out
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>, NpyError> {
    decode_labels(&read_file(path.as_ref())?)
}

pub fn write_labels(labels: &[usize], path: impl AsRef<Path>) -> Result<(), NpyError> {
    write_file(path.as_ref(), &encode_labels(labels))
}
