//! Strict reader and writer for the little-endian `float32`, C-order subset
//! of NPY version 1.0.
//!
//! Layout: `\x93NUMPY`, version bytes `1 0`, a little-endian `u16` header
//! length, then an ASCII dict literal padded with spaces and closed by `\n`
//! so that the whole preamble is a multiple of 64 bytes. The payload is raw
//! little-endian `f32` data.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 6] = *b"\x93NUMPY";
const PREAMBLE_ALIGN: usize = 64;
const FIXED_LEN: usize = MAGIC.len() + 2 + 2;

/// Encodes a tensor as NPY bytes. Identical tensors give identical bytes.
pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let shape = t.shape();
    if shape.is_empty() {
        return Err(Error::Format("scalar (rank-0) tensors are not supported".into()));
    }
    if shape.contains(&0) {
        return Err(Error::Format(format!("zero-sized dimension in shape {shape:?}")));
    }
    let dims = if shape.len() == 1 {
        format!("({},)", shape[0])
    } else {
        let parts: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        format!("({})", parts.join(", "))
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {dims}, }}");
    let unpadded = FIXED_LEN + header.len() + 1;
    let padding = (PREAMBLE_ALIGN - unpadded % PREAMBLE_ALIGN) % PREAMBLE_ALIGN;
    header.extend(std::iter::repeat_n(' ', padding));
    header.push('\n');
    let header_len = u16::try_from(header.len())
        .map_err(|_| Error::Format(format!("header too long for NPY 1.0: {} bytes", header.len())))?;

    let mut out = Vec::with_capacity(FIXED_LEN + header.len() + 4 * t.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes NPY bytes. Non-finite payload values are rejected.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (shape, payload_start) = parse_preamble(bytes)?;
    let numel: usize = shape.iter().product();
    let payload = &bytes[payload_start..];
    if payload.len() != 4 * numel {
        return Err(Error::Format(format!(
            "payload has {} bytes, shape {:?} needs {}",
            payload.len(),
            shape,
            4 * numel
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let t = Tensor::new(shape, data)?;
    t.check_finite()?;
    Ok(t)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::in_file(path, e))
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(t)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads only the preamble and returns the stored shape.
pub fn read_shape(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    preamble_shape(path).map_err(|e| Error::in_file(path, e))
}

fn preamble_shape(path: &Path) -> Result<Vec<usize>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut fixed = [0u8; FIXED_LEN];
    f.read_exact(&mut fixed).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("file shorter than NPY preamble".into()),
        _ => Error::io(path, e),
    })?;
    let header_len = u16::from_le_bytes([fixed[8], fixed[9]]) as usize;
    let mut buf = fixed.to_vec();
    buf.resize(FIXED_LEN + header_len, 0);
    f.read_exact(&mut buf[FIXED_LEN..]).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated NPY header".into()),
        _ => Error::io(path, e),
    })?;
    parse_preamble(&buf).map(|(shape, _)| shape)
}

fn parse_preamble(bytes: &[u8]) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < FIXED_LEN || bytes[..6] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    if bytes[6..8] != [1, 0] {
        return Err(Error::Format(format!(
            "unsupported NPY version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let end = FIXED_LEN + header_len;
    if bytes.len() < end {
        return Err(Error::Format("truncated NPY header".into()));
    }
    let header = std::str::from_utf8(&bytes[FIXED_LEN..end])
        .ok()
        .filter(|h| h.is_ascii())
        .ok_or_else(|| Error::Format("header is not ASCII".into()))?;
    if !header.ends_with('\n') {
        return Err(Error::Format("header must end with a newline".into()));
    }
    let dict = HeaderDict::parse(header.trim_end())?;
    if dict.descr != "<f4" {
        return Err(Error::UnsupportedDtype(dict.descr));
    }
    if dict.fortran_order {
        return Err(Error::UnsupportedLayout);
    }
    if dict.shape.is_empty() {
        return Err(Error::Format("scalar (rank-0) arrays are not supported".into()));
    }
    if dict.shape.contains(&0) {
        return Err(Error::Format(format!("zero-sized dimension in shape {:?}", dict.shape)));
    }
    Ok((dict.shape, end))
}

#[derive(Debug)]
struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

impl HeaderDict {
    /// Parses the Python dict literal `{'descr': ..., 'fortran_order': ..., 'shape': (...), }`
    /// with keys in any order.
    fn parse(src: &str) -> Result<Self> {
        let mut cur = Cursor { s: src.as_bytes(), pos: 0 };
        let mut descr = None;
        let mut fortran_order = None;
        let mut shape = None;

        cur.expect(b'{')?;
        loop {
            cur.skip_ws();
            if cur.eat(b'}') {
                break;
            }
            let key = cur.string()?;
            cur.skip_ws();
            cur.expect(b':')?;
            cur.skip_ws();
            match key.as_str() {
                "descr" => descr = Some(cur.string()?),
                "fortran_order" => fortran_order = Some(cur.boolean()?),
                "shape" => shape = Some(cur.tuple()?),
                other => return Err(Error::Format(format!("unexpected header key '{other}'"))),
            }
            cur.skip_ws();
            if !cur.eat(b',') {
                cur.skip_ws();
                cur.expect(b'}')?;
                break;
            }
        }
        cur.skip_ws();
        if cur.pos != cur.s.len() {
            return Err(Error::Format("trailing bytes after header dict".into()));
        }
        Ok(HeaderDict {
            descr: descr.ok_or_else(|| Error::Format("missing 'descr'".into()))?,
            fortran_order: fortran_order
                .ok_or_else(|| Error::Format("missing 'fortran_order'".into()))?,
            shape: shape.ok_or_else(|| Error::Format("missing 'shape'".into()))?,
        })
    }
}

struct Cursor<'a> {
    s: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos] == b' ' {
            self.pos += 1;
        }
    }

    fn eat(&mut self, b: u8) -> bool {
        if self.s.get(self.pos) == Some(&b) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, b: u8) -> Result<()> {
        if self.eat(b) {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "expected '{}' at header offset {}",
                b as char, self.pos
            )))
        }
    }

    fn string(&mut self) -> Result<String> {
        self.expect(b'\'')?;
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos] != b'\'' {
            self.pos += 1;
        }
        let out = String::from_utf8_lossy(&self.s[start..self.pos]).into_owned();
        self.expect(b'\'')?;
        Ok(out)
    }

    fn boolean(&mut self) -> Result<bool> {
        let rest = &self.s[self.pos..];
        if rest.starts_with(b"True") {
            self.pos += 4;
            Ok(true)
        } else if rest.starts_with(b"False") {
            self.pos += 5;
            Ok(false)
        } else {
            Err(Error::Format("expected True or False".into()))
        }
    }

    fn tuple(&mut self) -> Result<Vec<usize>> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            self.skip_ws();
            if self.eat(b')') {
                break;
            }
            let start = self.pos;
            while self.pos < self.s.len() && self.s[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            let digits = std::str::from_utf8(&self.s[start..self.pos]).unwrap_or_default();
            let d = digits
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("bad dimension at header offset {start}")))?;
            dims.push(d);
            self.skip_ws();
            if !self.eat(b',') {
                self.skip_ws();
                self.expect(b')')?;
                break;
            }
        }
        Ok(dims)
    }
}
