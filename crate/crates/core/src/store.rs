//! Versioned container of named numeric arrays with a JSON metadata header.
//!
//! Layout: magic `S4MA`, `u32` format version, `u64` header length, the JSON
//! header, then each array's little-endian payload in header order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"S4MA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            Self::F64(v) => v.len(),
            Self::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArrayFile {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

impl ArrayFile {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape,
            data: ArrayData::F64(data),
        });
    }

    pub fn push_u8(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<u8>) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape,
            data: ArrayData::U8(data),
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_writer(&self, w: &mut impl Write) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| Entry {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    dtype: match a.data {
                        ArrayData::F64(_) => "f64".into(),
                        ArrayData::U8(_) => "u8".into(),
                    },
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(json.len() as u64)?;
        w.write_all(&json)?;
        for a in &self.arrays {
            match &a.data {
                ArrayData::F64(v) => {
                    for &x in v {
                        w.write_f64::<LittleEndian>(x)?;
                    }
                }
                ArrayData::U8(v) => w.write_all(v)?,
            }
        }
        Ok(())
    }

    pub fn from_reader(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an array file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported array file version {version}")));
        }
        let len = r.read_u64::<LittleEndian>()? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            let data = match e.dtype.as_str() {
                "f64" => {
                    let mut v = vec![0.0; n];
                    r.read_f64_into::<LittleEndian>(&mut v)?;
                    ArrayData::F64(v)
                }
                "u8" => {
                    let mut v = vec![0u8; n];
                    r.read_exact(&mut v)?;
                    ArrayData::U8(v)
                }
                other => return Err(Error::Format(format!("unknown dtype {other}"))),
            };
            arrays.push(NamedArray {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Format(format!("array {} has inconsistent shape", a.name)));
            }
        }
        write_atomic(path, |w| self.to_writer(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(&mut BufReader::new(File::open(path)?))
    }
}

/// Writes through `f` into `path.tmp` and renames it over `path`.
pub fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        f(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.s4ma");
        let mut f = ArrayFile::new("test", serde_json::json!({"k": 1}));
        f.push_f64("w", vec![2, 2], vec![1.0, -2.5, f64::MIN_POSITIVE, 3.0]);
        f.push_u8("m", vec![3], vec![0, 1, 255]);
        f.save(&path).unwrap();
        assert_eq!(ArrayFile::load(&path).unwrap(), f);
    }

    #[test]
    fn rejects_garbage() {
        let mut bytes: &[u8] = b"nope....";
        assert!(ArrayFile::from_reader(&mut bytes).is_err());
    }
}
