//! Binary persistence formats.
//!
//! Two layouts live here, both little-endian:
//!
//! * **FMX1 matrix**: the 4 magic bytes `FMX1`, a `u64` row count, a `u64`
//!   column count, then `rows * cols` IEEE-754 `f64` values in row-major order.
//! * **Section container** (`FMXS`): the 4 magic bytes `FMXS`, a `u32` format
//!   version (currently 1), a `u32` section count, then for each section a
//!   `u16` name length, the UTF-8 name, a `u8` kind (`0` = FMX1 matrix,
//!   `1` = UTF-8 text), a `u64` payload length and the payload. Matrix
//!   payloads are complete FMX1 blobs.
//!
//! Section order is preserved, which keeps serialized bundles byte-stable.

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MATRIX_MAGIC: &[u8; 4] = b"FMX1";
pub const CONTAINER_MAGIC: &[u8; 4] = b"FMXS";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("payload holds {actual} bytes but the header declares {declared}")]
    DimensionMismatch { declared: u64, actual: u64 },
    #[error("section name is not valid UTF-8")]
    BadName,
    #[error("unknown section kind {0}")]
    UnknownKind(u8),
    #[error("section `{0}` is missing")]
    MissingSection(String),
    #[error("section `{name}` has the wrong kind or shape: {detail}")]
    BadSection { name: String, detail: String },
}

/// Row-major `f64` matrix as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl RawMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(rows * cols, values.len(), "matrix payload size");
        Self { rows, cols, values }
    }

    pub fn column(values: Vec<f64>) -> Self {
        let rows = values.len();
        Self::new(rows, 1, values)
    }

    pub fn encoded_len(&self) -> usize {
        4 + 16 + 8 * self.values.len()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(MATRIX_MAGIC)?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(8 * self.values.len());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    /// Decodes a complete FMX1 blob. Trailing bytes are an error.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 4 {
            return Err(FormatError::Truncated("missing magic".into()));
        }
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        if &found != MATRIX_MAGIC {
            return Err(FormatError::BadMagic {
                expected: *MATRIX_MAGIC,
                found,
            });
        }
        if bytes.len() < 20 {
            return Err(FormatError::Truncated("missing dimensions".into()));
        }
        let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let cols = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let declared = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| FormatError::Truncated(format!("dimensions {rows}x{cols} overflow")))?;
        let actual = (bytes.len() - 20) as u64;
        if actual < declared {
            return Err(FormatError::Truncated(format!(
                "{rows}x{cols} matrix needs {declared} payload bytes, found {actual}"
            )));
        }
        if actual > declared {
            return Err(FormatError::DimensionMismatch { declared, actual });
        }
        let values = bytes[20..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            rows: rows as usize,
            cols: cols as usize,
            values,
        })
    }

    pub fn read_file(path: &Path) -> Result<Self, FormatError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn write_file(&self, path: &Path) -> Result<(), FormatError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Section {
    Matrix(RawMatrix),
    Text(String),
}

/// Ordered collection of named sections.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SectionFile {
    sections: Vec<(String, Section)>,
}

impl SectionFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a section, replacing any earlier section with the same name.
    pub fn push(&mut self, name: impl Into<String>, section: Section) {
        let name = name.into();
        self.sections.retain(|(n, _)| *n != name);
        self.sections.push((name, section));
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: RawMatrix) {
        self.push(name, Section::Matrix(m));
    }

    pub fn push_text(&mut self, name: impl Into<String>, text: impl Into<String>) {
        self.push(name, Section::Text(text.into()));
    }

    pub fn push_scalars(&mut self, name: impl Into<String>, values: &[f64]) {
        self.push_matrix(name, RawMatrix::column(values.to_vec()));
    }

    pub fn get(&self, name: &str) -> Option<&Section> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn matrix(&self, name: &str) -> Result<&RawMatrix, FormatError> {
        match self.get(name) {
            Some(Section::Matrix(m)) => Ok(m),
            Some(Section::Text(_)) => Err(FormatError::BadSection {
                name: name.into(),
                detail: "expected a matrix, found text".into(),
            }),
            None => Err(FormatError::MissingSection(name.into())),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str, FormatError> {
        match self.get(name) {
            Some(Section::Text(t)) => Ok(t),
            Some(Section::Matrix(_)) => Err(FormatError::BadSection {
                name: name.into(),
                detail: "expected text, found a matrix".into(),
            }),
            None => Err(FormatError::MissingSection(name.into())),
        }
    }

    /// Reads a column of exactly `len` scalars.
    pub fn scalars(&self, name: &str, len: usize) -> Result<&[f64], FormatError> {
        let m = self.matrix(name)?;
        if m.values.len() != len {
            return Err(FormatError::BadSection {
                name: name.into(),
                detail: format!("expected {len} scalars, found {}", m.values.len()),
            });
        }
        Ok(&m.values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, section) in &self.sections {
            let name_bytes = name.as_bytes();
            assert!(
                name_bytes.len() <= u16::MAX as usize,
                "section name too long"
            );
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            match section {
                Section::Matrix(m) => {
                    out.push(0);
                    out.extend_from_slice(&(m.encoded_len() as u64).to_le_bytes());
                    m.write_to(&mut out).expect("writing to a Vec cannot fail");
                }
                Section::Text(t) => {
                    out.push(1);
                    out.extend_from_slice(&(t.len() as u64).to_le_bytes());
                    out.extend_from_slice(t.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "container magic")?;
        if &magic != CONTAINER_MAGIC {
            return Err(FormatError::BadMagic {
                expected: *CONTAINER_MAGIC,
                found: magic,
            });
        }
        let version = read_u32(&mut r, "version")?;
        if version != CONTAINER_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let count = read_u32(&mut r, "section count")?;
        let mut file = SectionFile::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(&mut r, &mut len, "section name length")?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(&mut r, &mut name, "section name")?;
            let name = String::from_utf8(name).map_err(|_| FormatError::BadName)?;
            let mut kind = [0u8; 1];
            read_exact(&mut r, &mut kind, "section kind")?;
            let payload_len = read_u64(&mut r, "payload length")? as usize;
            if r.len() < payload_len {
                return Err(FormatError::Truncated(format!("section `{name}` payload")));
            }
            let (payload, rest) = r.split_at(payload_len);
            r = rest;
            let section = match kind[0] {
                0 => Section::Matrix(RawMatrix::from_bytes(payload)?),
                1 => Section::Text(String::from_utf8(payload.to_vec()).map_err(|_| {
                    FormatError::BadSection {
                        name: name.clone(),
                        detail: "text is not valid UTF-8".into(),
                    }
                })?),
                k => return Err(FormatError::UnknownKind(k)),
            };
            file.sections.push((name, section));
        }
        if !r.is_empty() {
            return Err(FormatError::DimensionMismatch {
                declared: (bytes.len() - r.len()) as u64,
                actual: bytes.len() as u64,
            });
        }
        Ok(file)
    }

    pub fn read_file(path: &Path) -> Result<Self, FormatError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn write_file(&self, path: &Path) -> Result<(), FormatError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<(), FormatError> {
    if r.len() < buf.len() {
        return Err(FormatError::Truncated(what.into()));
    }
    let (head, rest) = r.split_at(buf.len());
    buf.copy_from_slice(head);
    *r = rest;
    Ok(())
}

fn read_u32(r: &mut &[u8], what: &str) -> Result<u32, FormatError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8], what: &str) -> Result<u64, FormatError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_header_layout() {
        let m = RawMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"FMX1");
        assert_eq!(u64::from_le_bytes(bytes[4..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 20 + 48);
        assert_eq!(RawMatrix::from_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn truncated_matrix_is_format_error() {
        let bytes = RawMatrix::new(2, 3, vec![0.5; 6]).to_bytes();
        let err = RawMatrix::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, FormatError::Truncated(_)));
    }

    #[test]
    fn trailing_bytes_are_dimension_mismatch() {
        let mut bytes = RawMatrix::new(1, 1, vec![0.5]).to_bytes();
        bytes.extend_from_slice(&[0u8; 8]);
        let err = RawMatrix::from_bytes(&bytes).unwrap_err();
        assert!(matches!(
            err,
            FormatError::DimensionMismatch {
                declared: 8,
                actual: 16
            }
        ));
    }

    #[test]
    fn container_round_trip_preserves_order_and_bits() {
        let mut f = SectionFile::new();
        f.push_text("kind", "iforest");
        f.push_matrix("m", RawMatrix::new(1, 2, vec![f64::MIN_POSITIVE, -0.0]));
        f.push_scalars("scalars", &[1.5, 0.1 + 0.2]);
        let g = SectionFile::from_bytes(&f.to_bytes()).unwrap();
        assert_eq!(g.names().collect::<Vec<_>>(), ["kind", "m", "scalars"]);
        let m = g.matrix("m").unwrap();
        assert_eq!(m.values[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(g.scalars("scalars", 2).unwrap()[1], 0.1 + 0.2);
        assert_eq!(g.to_bytes(), f.to_bytes());
    }

    #[test]
    fn missing_and_mistyped_sections() {
        let mut f = SectionFile::new();
        f.push_text("t", "x");
        assert!(matches!(
            f.matrix("nope"),
            Err(FormatError::MissingSection(_))
        ));
        assert!(matches!(f.matrix("t"), Err(FormatError::BadSection { .. })));
    }
}
