//! NPY container encoding. Writes format version 1.0, reads 1.0 and 2.0.
//!
//! Only C-order little-endian `f4`, `f8` and `u1` arrays are supported.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor, TensorData};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

fn descr(dtype: DType) -> &'static str {
    match dtype {
        DType::F32 => "<f4",
        DType::F64 => "<f8",
        DType::U8 => "|u1",
    }
}

fn parse_descr(s: &str) -> Result<DType> {
    match s {
        "<f4" => Ok(DType::F32),
        "<f8" => Ok(DType::F64),
        "|u1" | "<u1" | ">u1" | "u1" => Ok(DType::U8),
        other => Err(Error::DType(other.to_string())),
    }
}

fn shape_literal(shape: &[usize]) -> String {
    match shape {
        [] => "()".to_string(),
        [n] => format!("({n},)"),
        _ => {
            let parts: Vec<String> = shape.iter().map(|n| n.to_string()).collect();
            format!("({})", parts.join(", "))
        }
    }
}

/// Serializes a tensor into NPY v1.0 bytes.
pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        descr(t.dtype()),
        shape_literal(t.shape())
    );
    // magic(6) + version(2) + len(2) + header + '\n' must be a multiple of ALIGN
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    header.extend(std::iter::repeat_n(' ', pad));
    header.push('\n');

    let payload = t.to_le_bytes();
    let mut out = Vec::with_capacity(10 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Parses NPY v1.0 or v2.0 bytes.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Format("missing NPY magic".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, header_start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 => {
            if bytes.len() < 12 {
                return Err(Error::Format("truncated v2 preamble".into()));
            }
            let n = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
            (n as usize, 12)
        }
        _ => {
            return Err(Error::Format(format!(
                "unsupported NPY version {major}.{minor}"
            )))
        }
    };
    let header_end = header_start + header_len;
    if bytes.len() < header_end {
        return Err(Error::Format("truncated header".into()));
    }
    let header = std::str::from_utf8(&bytes[header_start..header_end])
        .map_err(|_| Error::Format("header is not valid text".into()))?;
    let header = Header::parse(header)?;
    if header.fortran_order {
        return Err(Error::UnsupportedLayout("fortran_order is True".into()));
    }
    let dtype = parse_descr(&header.descr)?;

    let count: usize = header.shape.iter().product();
    let payload = &bytes[header_end..];
    if payload.len() != count * dtype.size() {
        return Err(Error::Format(format!(
            "payload has {} bytes, shape {:?} needs {}",
            payload.len(),
            header.shape,
            count * dtype.size()
        )));
    }
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::U8 => TensorData::U8(payload.to_vec()),
    };
    Tensor::new(header.shape, data)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

#[derive(Debug)]
struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

impl Header {
    /// Parses the Python dict literal, e.g.
    /// `{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }`.
    fn parse(text: &str) -> Result<Header> {
        let bad = |msg: &str| Error::Format(format!("header: {msg}"));
        let body = text
            .trim()
            .strip_prefix('{')
            .and_then(|s| s.strip_suffix('}'))
            .ok_or_else(|| bad("not a dict literal"))?;

        let mut descr = None;
        let mut fortran = None;
        let mut shape = None;
        let mut rest = body.trim_start();
        while !rest.is_empty() {
            let (key, after) = take_quoted(rest).ok_or_else(|| bad("expected quoted key"))?;
            let after = after
                .trim_start()
                .strip_prefix(':')
                .ok_or_else(|| bad("expected ':'"))?
                .trim_start();
            let after = match key {
                "descr" => {
                    let (v, a) = take_quoted(after).ok_or_else(|| bad("descr must be a string"))?;
                    descr = Some(v.to_string());
                    a
                }
                "fortran_order" => {
                    if let Some(a) = after.strip_prefix("True") {
                        fortran = Some(true);
                        a
                    } else if let Some(a) = after.strip_prefix("False") {
                        fortran = Some(false);
                        a
                    } else {
                        return Err(bad("fortran_order must be True or False"));
                    }
                }
                "shape" => {
                    let inner = after
                        .strip_prefix('(')
                        .ok_or_else(|| bad("shape must be a tuple"))?;
                    let close = inner.find(')').ok_or_else(|| bad("unterminated shape"))?;
                    let dims = inner[..close]
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| s.trim_end_matches('L').parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad("shape entries must be integers"))?;
                    shape = Some(dims);
                    &inner[close + 1..]
                }
                other => return Err(bad(&format!("unknown key {other}"))),
            };
            let after = after.trim_start();
            rest = after.strip_prefix(',').unwrap_or(after).trim_start();
        }
        Ok(Header {
            descr: descr.ok_or_else(|| bad("missing descr"))?,
            fortran_order: fortran.ok_or_else(|| bad("missing fortran_order"))?,
            shape: shape.ok_or_else(|| bad("missing shape"))?,
        })
    }
}

fn take_quoted(s: &str) -> Option<(&str, &str)> {
    let quote = s.chars().next().filter(|c| *c == '\'' || *c == '"')?;
    let inner = &s[1..];
    let end = inner.find(quote)?;
    Some((&inner[..end], &inner[end + 1..]))
}
