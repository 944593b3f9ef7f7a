//! The `HICPT1` container shared by target, concept and dataset artifacts.
//!
//! Layout: 6-byte magic, `u32` format version, `u64` header length, a JSON
//! header, raw little-endian array bytes, then a SHA-256 digest of
//! everything before it. Loading verifies the digest before decoding, so a
//! truncated or corrupted file never yields partial state.

use std::io::Write;
use std::path::Path;

use hiconcept_tensor::{Elem, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const MAGIC: &[u8; 6] = b"HICPT1";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayType {
    F32,
    F64,
    U8,
    U16,
    U32,
}

impl ArrayType {
    fn size(self) -> usize {
        match self {
            ArrayType::U8 => 1,
            ArrayType::U16 => 2,
            ArrayType::F32 | ArrayType::U32 => 4,
            ArrayType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: ArrayType,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// In-memory container: a kind tag, free-form JSON metadata and named arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    entries: Vec<ArrayEntry>,
    payload: Vec<u8>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            entries: Vec::new(),
            payload: Vec::new(),
        }
    }

    fn push_raw(&mut self, name: &str, dtype: ArrayType, shape: &[usize], bytes: Vec<u8>) {
        assert!(self.entry(name).is_none(), "duplicate array {name}");
        self.entries.push(ArrayEntry {
            name: name.to_string(),
            dtype,
            shape: shape.to_vec(),
            offset: self.payload.len(),
            nbytes: bytes.len(),
        });
        self.payload.extend_from_slice(&bytes);
    }

    fn entry(&self, name: &str) -> Option<&ArrayEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn put_tensor<T: Elem>(&mut self, name: &str, t: &Tensor<T>) {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        let dtype = match T::DTYPE {
            hiconcept_tensor::DType::F32 => ArrayType::F32,
            hiconcept_tensor::DType::F64 => ArrayType::F64,
        };
        self.push_raw(name, dtype, t.shape(), bytes);
    }

    pub fn put_u8(&mut self, name: &str, shape: &[usize], data: &[u8]) {
        self.push_raw(name, ArrayType::U8, shape, data.to_vec());
    }

    pub fn put_u16(&mut self, name: &str, shape: &[usize], data: &[u16]) {
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push_raw(name, ArrayType::U16, shape, bytes);
    }

    pub fn put_u32(&mut self, name: &str, shape: &[usize], data: &[u32]) {
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push_raw(name, ArrayType::U32, shape, bytes);
    }

    fn raw(&self, name: &str, want: ArrayType) -> Result<(&ArrayEntry, &[u8])> {
        let e = self.entry(name).ok_or_else(|| self.err(format!("missing array {name}")))?;
        if e.dtype != want {
            return Err(self.err(format!("array {name} has type {:?}, expected {want:?}", e.dtype)));
        }
        Ok((e, &self.payload[e.offset..e.offset + e.nbytes]))
    }

    fn err(&self, message: String) -> Error {
        Error::Checkpoint {
            path: format!("<{}>", self.kind).into(),
            message,
        }
    }

    /// Read a float array, converting between f32 and f64 if needed.
    pub fn tensor<T: Elem>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entry(name).ok_or_else(|| self.err(format!("missing array {name}")))?;
        let bytes = &self.payload[e.offset..e.offset + e.nbytes];
        let data: Vec<T> = match e.dtype {
            ArrayType::F32 => bytes.chunks_exact(4).map(|b| T::lit(f32::read_le(b) as f64)).collect(),
            ArrayType::F64 => bytes.chunks_exact(8).map(|b| T::lit(f64::read_le(b))).collect(),
            other => return Err(self.err(format!("array {name} has type {other:?}, expected float"))),
        };
        Tensor::new(&e.shape, data).map_err(|err| self.err(err.to_string()))
    }

    pub fn u8s(&self, name: &str) -> Result<(Vec<usize>, Vec<u8>)> {
        let (e, b) = self.raw(name, ArrayType::U8)?;
        Ok((e.shape.clone(), b.to_vec()))
    }

    pub fn u16s(&self, name: &str) -> Result<(Vec<usize>, Vec<u16>)> {
        let (e, b) = self.raw(name, ArrayType::U16)?;
        let v = b.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        Ok((e.shape.clone(), v))
    }

    pub fn u32s(&self, name: &str) -> Result<(Vec<usize>, Vec<u32>)> {
        let (e, b) = self.raw(name, ArrayType::U32)?;
        let v = b
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((e.shape.clone(), v))
    }

    /// Store every parameter under `prefix` + its name.
    pub fn put_params<T: Elem>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            self.put_tensor(&format!("{prefix}{name}"), t);
        }
    }

    /// Overwrite the values of `store` from arrays saved with [`Self::put_params`].
    pub fn load_params<T: Elem>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.name(id));
            let t = self.tensor::<T>(&name)?;
            if t.shape() != store.get(id).shape() {
                return Err(self.err(format!(
                    "array {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, t);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self.entries.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(18 + header.len() + self.payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(fail("not an HICPT1 container (bad magic)".into()));
        }
        if bytes.len() < 18 + DIGEST_LEN {
            return Err(fail("file truncated".into()));
        }
        let version = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        if version != VERSION {
            return Err(fail(format!("incompatible format version {version}, this build reads {VERSION}")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(fail("checksum mismatch (file truncated or corrupted)".into()));
        }
        let hlen = u64::from_le_bytes(body[10..18].try_into().unwrap()) as usize;
        if 18 + hlen > body.len() {
            return Err(fail("header length exceeds file size".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[18..18 + hlen]).map_err(|e| fail(format!("bad header: {e}")))?;
        let payload = body[18 + hlen..].to_vec();
        for e in &header.arrays {
            let expect = e.shape.iter().product::<usize>() * e.dtype.size();
            if e.nbytes != expect || e.offset + e.nbytes > payload.len() {
                return Err(fail(format!("array {} has inconsistent extent", e.name)));
            }
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            entries: header.arrays,
            payload,
        })
    }

    /// Write atomically: the target only appears once fully written.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("partial");
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("holds a {} artifact, expected {kind}", self.kind),
            });
        }
        Ok(())
    }

    /// SHA-256 over the serialized form, as lowercase hex.
    pub fn content_hash(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a parameter store's names, shapes and values.
pub fn params_hash<T: Elem>(store: &ParamStore<T>) -> String {
    hex_digest(&store.canonical_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test", serde_json::json!({"seed": 3}));
        c.put_tensor("w", &Tensor::<f32>::new(&[2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap());
        c.put_tensor("v", &Tensor::<f64>::new(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        c.put_u16("z", &[2], &[7, 65535]);
        c
    }

    #[test]
    fn roundtrip_is_exact() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensor::<f64>("v").unwrap().data(), &[0.1, 0.2, 0.3]);
        assert_eq!(back.u16s("z").unwrap().1, vec![7, 65535]);
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(Container::from_bytes(&bytes[..cut], Path::new("x")).is_err());
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad, Path::new("x")).is_err());
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = sample().to_bytes();
        bytes[6] = 9;
        let err = Container::from_bytes(&bytes, Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
