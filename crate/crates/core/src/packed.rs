//! Packed array container: a single binary file holding named dense
//! arrays (f64 / u8 / u32 payloads) plus an optional JSON metadata
//! string. Used for synthetic datasets, saved perturbations, checkpoint
//! parameter blobs, and debug dumps of graph weight matrices.
//!
//! Layout (little-endian):
//!   magic "GAPK" | u16 version | u32 array_count
//!   per array: u16 name_len | name | u8 dtype | u8 ndim | u64 dims[ndim] | payload
//!   u32 meta_len | meta (UTF-8 JSON, may be empty)

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"GAPK";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U8(Vec<u8>),
    U32(Vec<u32>),
}

impl ArrayData {
    fn dtype_tag(&self) -> u8 {
        match self {
            ArrayData::F64(_) => 0,
            ArrayData::U8(_) => 1,
            ArrayData::U32(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
            ArrayData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl PackedArray {
    pub fn f64(name: &str, dims: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        PackedArray {
            name: name.to_string(),
            dims: dims.to_vec(),
            data: ArrayData::F64(data),
        }
    }

    pub fn from_tensor(name: &str, t: &Tensor) -> Self {
        Self::f64(name, t.shape(), t.data().to_vec())
    }

    pub fn as_tensor(&self) -> Result<Tensor> {
        match &self.data {
            ArrayData::F64(v) => Ok(Tensor::from_vec(&self.dims, v.clone())),
            _ => Err(Error::Input(format!(
                "array '{}' is not an f64 tensor",
                self.name
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PackedFile {
    pub arrays: Vec<PackedArray>,
    pub meta: Option<String>,
}

impl PackedFile {
    pub fn array(&self, name: &str) -> Result<&PackedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Input(format!("packed file has no array '{name}'")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            let name = a.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(a.data.dtype_tag());
            buf.push(a.dims.len() as u8);
            for d in &a.dims {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F64(v) => {
                    for x in v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
                ArrayData::U8(v) => buf.extend_from_slice(v),
                ArrayData::U32(v) => {
                    for x in v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        let meta = self.meta.as_deref().unwrap_or("");
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta.as_bytes());
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        let mut f =
            fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&buf)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path) -> Result<PackedFile> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let err = |msg: &str| Error::Io {
            path: path.display().to_string(),
            msg: format!("corrupt packed file: {msg}"),
        };
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(err("truncated"));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(err("bad magic"));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != VERSION {
            return Err(err(&format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| err("array name not utf-8"))?;
            let dtype = take(&mut pos, 1)?[0];
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = dims.iter().product();
            let data = match dtype {
                0 => {
                    let raw = take(&mut pos, numel * 8)?;
                    ArrayData::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                1 => ArrayData::U8(take(&mut pos, numel)?.to_vec()),
                2 => {
                    let raw = take(&mut pos, numel * 4)?;
                    ArrayData::U32(
                        raw.chunks_exact(4)
                            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                other => return Err(err(&format!("unknown dtype {other}"))),
            };
            arrays.push(PackedArray { name, dims, data });
        }
        let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let meta = String::from_utf8(take(&mut pos, meta_len)?.to_vec())
            .map_err(|_| err("meta not utf-8"))?;
        Ok(PackedFile {
            arrays,
            meta: if meta.is_empty() { None } else { Some(meta) },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.gapk");
        let file = PackedFile {
            arrays: vec![
                PackedArray::f64("delta", &[2, 3], vec![0.1, -0.2, 0.3, 1.0, 0.0, -1e-300]),
                PackedArray {
                    name: "labels".into(),
                    dims: vec![4],
                    data: ArrayData::U32(vec![0, 1, 2, 3]),
                },
                PackedArray {
                    name: "pixels".into(),
                    dims: vec![2, 2],
                    data: ArrayData::U8(vec![0, 128, 255, 7]),
                },
            ],
            meta: Some(r#"{"eps":"10/255"}"#.to_string()),
        };
        file.write(&path).unwrap();
        let back = PackedFile::read(&path).unwrap();
        assert_eq!(file, back);
    }

    #[test]
    fn corrupt_file_reports_path() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.gapk");
        std::fs::write(&path, b"NOPE").unwrap();
        match PackedFile::read(&path) {
            Err(Error::Io { path: p, .. }) => assert!(p.contains("bad.gapk")),
            other => panic!("expected io error, got {other:?}"),
        }
    }

    #[test]
    fn missing_array_is_input_error() {
        let file = PackedFile::default();
        assert!(matches!(file.array("nope"), Err(Error::Input(_))));
    }
}
