//! Reading and writing 2-D `<f4` arrays in the NPY v1.0 format.
//!
//! Only the subset the activation dumps need is accepted: version 1.0,
//! little-endian 32-bit floats, C order, two-dimensional shapes. Everything
//! else is rejected with a typed error rather than converted.

use std::fs;
use std::io::Read;
use std::path::Path;

use thiserror::Error;

use super::Tensor2;

/// The NPY magic string.
pub const MAGIC: [u8; 6] = *b"\x93NUMPY";

/// Magic + version + header-length field.
const PREAMBLE_LEN: usize = 10;

/// Header blocks are padded so the data section starts on this boundary.
const ALIGNMENT: usize = 64;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("not an NPY file (bad magic)")]
    BadMagic,
    #[error("unsupported dtype {0:?}; only little-endian float32 ('<f4') is accepted")]
    UnsupportedDtype(String),
    #[error("unsupported layout: fortran_order arrays are not accepted")]
    UnsupportedLayout,
    #[error("bad NPY header: {0}")]
    BadHeader(String),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("matrix has no elements")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Shape information parsed from an NPY header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NpyHeader {
    pub rows: usize,
    pub cols: usize,
    /// Byte offset of the first data byte.
    pub data_offset: usize,
}

impl NpyHeader {
    pub fn data_len(&self) -> Option<usize> {
        self.rows.checked_mul(self.cols)?.checked_mul(4)
    }
}

/// Builds the padded ASCII header dictionary for a `rows × cols` array,
/// including the trailing newline.
fn header_text(rows: usize, cols: usize) -> String {
    let mut text = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': ({rows}, {cols}), }}"
    );
    let unpadded = PREAMBLE_LEN + text.len() + 1;
    let padded = unpadded.div_ceil(ALIGNMENT) * ALIGNMENT;
    text.extend(std::iter::repeat_n(' ', padded - unpadded));
    text.push('\n');
    text
}

/// Serializes a matrix to NPY bytes.
pub fn encode(tensor: &Tensor2) -> Result<Vec<u8>, TensorError> {
    if tensor.rows() == 0 || tensor.cols() == 0 {
        return Err(TensorError::Empty);
    }
    if let Some((row, col)) = tensor.first_non_finite() {
        return Err(TensorError::NonFinite { row, col });
    }
    let header = header_text(tensor.rows(), tensor.cols());
    let header_len = u16::try_from(header.len())
        .map_err(|_| TensorError::BadHeader("header exceeds 65535 bytes".into()))?;

    let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + tensor.data().len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses the preamble and header dictionary. `bytes` only needs to contain
/// the header; the data section is not inspected.
pub fn decode_header(bytes: &[u8]) -> Result<NpyHeader, TensorError> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(TensorError::BadMagic);
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(TensorError::BadHeader("truncated preamble".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(TensorError::BadHeader(format!(
            "unsupported format version {major}.{minor}"
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let end = PREAMBLE_LEN + header_len;
    let raw = bytes
        .get(PREAMBLE_LEN..end)
        .ok_or_else(|| TensorError::BadHeader("truncated header".into()))?;
    let text = std::str::from_utf8(raw)
        .ok()
        .filter(|t| t.is_ascii())
        .ok_or_else(|| TensorError::BadHeader("header is not ASCII".into()))?;
    if !text.ends_with('\n') {
        return Err(TensorError::BadHeader("header not newline-terminated".into()));
    }
    let dict = HeaderDict::parse(text.trim_end())?;

    if dict.descr != "<f4" {
        return Err(TensorError::UnsupportedDtype(dict.descr));
    }
    if dict.fortran_order {
        return Err(TensorError::UnsupportedLayout);
    }
    let (rows, cols) = match dict.shape.as_slice() {
        &[rows, cols] => (rows, cols),
        other => {
            return Err(TensorError::BadHeader(format!(
                "expected a 2-D shape, found {} dimensions",
                other.len()
            )))
        }
    };
    let header = NpyHeader {
        rows,
        cols,
        data_offset: end,
    };
    if header.data_len().is_none() {
        return Err(TensorError::BadHeader("shape overflows".into()));
    }
    Ok(header)
}

/// Parses a complete NPY byte buffer.
pub fn decode(bytes: &[u8]) -> Result<Tensor2, TensorError> {
    let header = decode_header(bytes)?;
    if header.rows == 0 || header.cols == 0 {
        return Err(TensorError::Empty);
    }
    let expected = header.data_len().expect("checked in decode_header");
    let data = &bytes[header.data_offset..];
    if data.len() != expected {
        return Err(TensorError::BadHeader(format!(
            "shape ({}, {}) needs {expected} data bytes, file has {}",
            header.rows,
            header.cols,
            data.len()
        )));
    }
    let values: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let tensor = Tensor2::from_vec(header.rows, header.cols, values)
        .map_err(|e| TensorError::BadHeader(e.to_string()))?;
    if let Some((row, col)) = tensor.first_non_finite() {
        return Err(TensorError::NonFinite { row, col });
    }
    Ok(tensor)
}

fn io_err(path: &Path, source: std::io::Error) -> TensorError {
    TensorError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a float32 matrix from an NPY file.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor2, TensorError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode(&bytes)
}

/// Reads only the header of an NPY file. Also checks that the file is long
/// enough to hold the declared data.
pub fn read_tensor_header(path: impl AsRef<Path>) -> Result<NpyHeader, TensorError> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut preamble = [0u8; PREAMBLE_LEN];
    file.read_exact(&mut preamble).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::BadMagic,
        _ => io_err(path, e),
    })?;
    if preamble[..MAGIC.len()] != MAGIC {
        return Err(TensorError::BadMagic);
    }
    let header_len = u16::from_le_bytes([preamble[8], preamble[9]]) as usize;
    let mut bytes = preamble.to_vec();
    bytes.resize(PREAMBLE_LEN + header_len, 0);
    file.read_exact(&mut bytes[PREAMBLE_LEN..])
        .map_err(|_| TensorError::BadHeader("truncated header".into()))?;
    let header = decode_header(&bytes)?;

    let file_len = file.metadata().map_err(|e| io_err(path, e))?.len();
    let expected = header
        .data_len()
        .and_then(|n| n.checked_add(header.data_offset))
        .ok_or_else(|| TensorError::BadHeader("shape overflows".into()))? as u64;
    if file_len != expected {
        return Err(TensorError::BadHeader(format!(
            "file is {file_len} bytes, header implies {expected}"
        )));
    }
    Ok(header)
}

/// Writes a float32 matrix as an NPY file.
pub fn write_tensor(tensor: &Tensor2, path: impl AsRef<Path>) -> Result<(), TensorError> {
    let path = path.as_ref();
    let bytes = encode(tensor)?;
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// The three keys of an NPY header dictionary.
#[derive(Debug)]
struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

impl HeaderDict {
    /// Parses the Python-literal dictionary numpy writes. Keys may appear in
    /// any order; a trailing comma is allowed.
    fn parse(text: &str) -> Result<Self, TensorError> {
        let mut p = LiteralParser::new(text);
        let mut descr = None;
        let mut fortran_order = None;
        let mut shape = None;

        p.expect(b'{')?;
        loop {
            p.skip_ws();
            if p.eat(b'}') {
                break;
            }
            let key = p.string()?;
            p.skip_ws();
            p.expect(b':')?;
            p.skip_ws();
            match key.as_str() {
                "descr" => set_once(&mut descr, p.string()?, "descr")?,
                "fortran_order" => set_once(&mut fortran_order, p.boolean()?, "fortran_order")?,
                "shape" => set_once(&mut shape, p.tuple()?, "shape")?,
                other => {
                    return Err(TensorError::BadHeader(format!("unexpected key {other:?}")));
                }
            }
            p.skip_ws();
            if p.eat(b',') {
                continue;
            }
            p.skip_ws();
            p.expect(b'}')?;
            break;
        }
        p.skip_ws();
        if !p.at_end() {
            return Err(TensorError::BadHeader("trailing characters after dictionary".into()));
        }

        let missing = |k: &str| TensorError::BadHeader(format!("missing key {k:?}"));
        Ok(Self {
            descr: descr.ok_or_else(|| missing("descr"))?,
            fortran_order: fortran_order.ok_or_else(|| missing("fortran_order"))?,
            shape: shape.ok_or_else(|| missing("shape"))?,
        })
    }
}

fn set_once<T>(slot: &mut Option<T>, value: T, key: &str) -> Result<(), TensorError> {
    if slot.replace(value).is_some() {
        return Err(TensorError::BadHeader(format!("duplicate key {key:?}")));
    }
    Ok(())
}

struct LiteralParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> LiteralParser<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            bytes: text.as_bytes(),
            pos: 0,
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\n' | b'\r')) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, b: u8) -> bool {
        if self.peek() == Some(b) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, b: u8) -> Result<(), TensorError> {
        if self.eat(b) {
            Ok(())
        } else {
            Err(TensorError::BadHeader(format!(
                "expected {:?} at offset {}",
                b as char, self.pos
            )))
        }
    }

    fn string(&mut self) -> Result<String, TensorError> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(TensorError::BadHeader(format!("expected string at offset {}", self.pos))),
        };
        self.pos += 1;
        let start = self.pos;
        while let Some(b) = self.peek() {
            if b == quote {
                let s = String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned();
                self.pos += 1;
                return Ok(s);
            }
            self.pos += 1;
        }
        Err(TensorError::BadHeader("unterminated string".into()))
    }

    fn boolean(&mut self) -> Result<bool, TensorError> {
        let rest = &self.bytes[self.pos..];
        if rest.starts_with(b"True") {
            self.pos += 4;
            Ok(true)
        } else if rest.starts_with(b"False") {
            self.pos += 5;
            Ok(false)
        } else {
            Err(TensorError::BadHeader("expected True or False".into()))
        }
    }

    fn integer(&mut self) -> Result<usize, TensorError> {
        let start = self.pos;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TensorError::BadHeader(format!("expected integer at offset {start}")))
    }

    fn tuple(&mut self) -> Result<Vec<usize>, TensorError> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            self.skip_ws();
            if self.eat(b')') {
                return Ok(dims);
            }
            dims.push(self.integer()?);
            self.skip_ws();
            if !self.eat(b',') {
                self.skip_ws();
                self.expect(b')')?;
                return Ok(dims);
            }
        }
    }
}
