//! Versioned binary container of named arrays plus a string metadata map.
//! Used for feature-cache records, unit vocabularies, checkpoints, and the
//! vocoder-adapter mel exchange. Layout is little-endian throughout:
//!
//! ```text
//! magic "UVCB" | version u16 | meta_len u32 | meta JSON (sorted keys)
//! | n_arrays u32 | per array:
//!     name_len u16 | name | dtype u8 | ndim u8 | dims u64* | byte_len u64 | data
//! ```

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use ndarray::{ArrayD, IxDyn};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"UVCB";
const VERSION: u16 = 1;

#[derive(Debug, Clone)]
struct RawArray {
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    arrays: BTreeMap<String, RawArray>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn array_names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(|s| s.as_str())
    }

    pub fn has_array(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn insert<F: Scalar>(&mut self, name: &str, arr: &ArrayD<F>) {
        let mut data = Vec::with_capacity(arr.len() * F::DTYPE.size());
        for &v in arr.iter() {
            v.write_le(&mut data);
        }
        self.arrays.insert(
            name.to_string(),
            RawArray {
                dtype: F::DTYPE,
                shape: arr.shape().to_vec(),
                data,
            },
        );
    }

    pub fn insert_i64(&mut self, name: &str, values: &[i64]) {
        let mut data = Vec::with_capacity(values.len() * 8);
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        self.arrays.insert(
            name.to_string(),
            RawArray {
                dtype: Dtype::I64,
                shape: vec![values.len()],
                data,
            },
        );
    }

    pub fn get<F: Scalar>(&self, name: &str) -> Result<ArrayD<F>> {
        let raw = self
            .arrays
            .get(name)
            .ok_or_else(|| Error::CorruptContainer(format!("missing array '{name}'")))?;
        if raw.dtype != F::DTYPE {
            return Err(Error::CorruptContainer(format!(
                "array '{name}' has dtype {:?}, requested {:?}",
                raw.dtype,
                F::DTYPE
            )));
        }
        let size = F::DTYPE.size();
        let n: usize = raw.shape.iter().product();
        if raw.data.len() != n * size {
            return Err(Error::CorruptContainer(format!(
                "array '{name}' byte length mismatch"
            )));
        }
        let values: Vec<F> = raw.data.chunks_exact(size).map(F::read_le).collect();
        ArrayD::from_shape_vec(IxDyn(&raw.shape), values)
            .map_err(|e| Error::CorruptContainer(format!("array '{name}': {e}")))
    }

    pub fn get_i64(&self, name: &str) -> Result<Vec<i64>> {
        let raw = self
            .arrays
            .get(name)
            .ok_or_else(|| Error::CorruptContainer(format!("missing array '{name}'")))?;
        if raw.dtype != Dtype::I64 {
            return Err(Error::CorruptContainer(format!(
                "array '{name}' is not i64"
            )));
        }
        Ok(raw
            .data
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, raw) in &self.arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(raw.dtype.code());
            out.push(raw.shape.len() as u8);
            for &d in &raw.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(raw.data.len() as u64).to_le_bytes());
            out.extend_from_slice(&raw.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::CorruptContainer("bad magic".into()));
        }
        let version = u16::from_le_bytes([cur.u8()?, cur.u8()?]);
        if version != VERSION {
            return Err(Error::CorruptContainer(format!(
                "unsupported container version {version}"
            )));
        }
        let meta_len = cur.u32()? as usize;
        let meta_bytes = cur.take(meta_len)?;
        let meta: BTreeMap<String, String> = serde_json::from_slice(meta_bytes)
            .map_err(|e| Error::CorruptContainer(format!("meta: {e}")))?;
        let n_arrays = cur.u32()? as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..n_arrays {
            let name_len = u16::from_le_bytes([cur.u8()?, cur.u8()?]) as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|e| Error::CorruptContainer(format!("name: {e}")))?;
            let dtype = Dtype::from_code(cur.u8()?)
                .ok_or_else(|| Error::CorruptContainer("unknown dtype".into()))?;
            let ndim = cur.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64()? as usize);
            }
            let byte_len = cur.u64()? as usize;
            let expect: usize = shape.iter().product::<usize>() * dtype.size();
            if byte_len != expect {
                return Err(Error::CorruptContainer(format!(
                    "array '{name}' length {byte_len} != shape product {expect}"
                )));
            }
            let data = cur.take(byte_len)?.to_vec();
            arrays.insert(name, RawArray { dtype, shape, data });
        }
        Ok(Container { meta, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Content hash over the serialized container (meta included).
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_bytes());
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptContainer("truncated container".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = Container::new();
        c.meta.insert("kind".into(), "test".into());
        let arr = ArrayD::from_shape_vec(
            IxDyn(&[2, 3]),
            vec![1.0f32, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.125],
        )
        .unwrap();
        c.insert("m", &arr);
        c.insert_i64("ids", &[5, 7, 2]);
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.meta.get("kind").unwrap(), "test");
        assert_eq!(back.get::<f32>("m").unwrap(), arr);
        assert_eq!(back.get_i64("ids").unwrap(), vec![5, 7, 2]);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let mut c = Container::new();
        c.insert(
            "m",
            &ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0f32, 2.0]).unwrap(),
        );
        assert!(c.get::<f64>("m").is_err());
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        let mut c = Container::new();
        c.insert_i64("ids", &[1, 2, 3]);
        let mut bytes = c.to_bytes();
        bytes[0] = b'X';
        assert!(Container::from_bytes(&bytes).is_err());
        let mut truncated = c.to_bytes();
        truncated.truncate(truncated.len() - 4);
        assert!(Container::from_bytes(&truncated).is_err());
    }

    #[test]
    fn content_hash_tracks_content() {
        let mut a = Container::new();
        a.insert_i64("ids", &[1, 2, 3]);
        let mut b = Container::new();
        b.insert_i64("ids", &[1, 2, 3]);
        assert_eq!(a.content_hash(), b.content_hash());
        b.insert_i64("extra", &[4]);
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
