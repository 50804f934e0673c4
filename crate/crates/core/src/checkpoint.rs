//! Binary checkpoint and raw-array files.
//!
//! Checkpoint layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "CLIPDETC"
//! version    u32      1
//! embed_dim  u32      C
//! token_dim  u32      D
//! stride     u32      s
//! kind       u32 length + UTF-8   "toy" | "clip-import"
//! config     u32 length + UTF-8   flat key = value text
//! count      u32
//! count × { name: u32 length + UTF-8, ndim: u32, dims: ndim × u64, data: numel × f64 }
//! ```
//!
//! Raw arrays use `"TARR"`, version `u32`, `ndim: u32`, `dims: ndim × u64`,
//! then the `f64` data in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CLIPDETC";
pub const VERSION: u32 = 1;
pub const ARRAY_MAGIC: &[u8; 4] = b"TARR";
pub const ARRAY_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub embed_dim: u32,
    pub token_dim: u32,
    pub stride: u32,
    pub kind: String,
}

impl Header {
    pub fn for_encoder(cfg: &EncoderConfig) -> Self {
        Self {
            version: VERSION,
            embed_dim: cfg.embed_dim as u32,
            token_dim: cfg.token_dim as u32,
            stride: cfg.stride as u32,
            kind: cfg.kind().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

/// Record of what a load installed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadManifest {
    pub source: PathBuf,
    pub header: Header,
    pub tensors: Vec<String>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_tensor_body(buf: &mut Vec<u8>, t: &Tensor) {
    put_u32(buf, t.shape().len() as u32);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Load {
                field: field.to_string(),
                reason: format!("{} truncated at byte {}", self.what, self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, field: &str) -> Result<String> {
        let n = self.u32(field)? as usize;
        let bytes = self.take(n, field)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Load {
            field: field.to_string(),
            reason: "invalid UTF-8".into(),
        })
    }

    fn tensor_body(&mut self, field: &str) -> Result<Tensor> {
        let ndim = self.u32(field)? as usize;
        if ndim > 8 {
            return Err(Error::Load {
                field: field.to_string(),
                reason: format!("implausible rank {ndim}"),
            });
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u64(field)? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = self.take(n.saturating_mul(8), field)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(&dims, data)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Writes every tensor of `store` in registration order.
pub fn save(path: &Path, header: &Header, config: &str, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, header.version);
    put_u32(&mut buf, header.embed_dim);
    put_u32(&mut buf, header.token_dim);
    put_u32(&mut buf, header.stride);
    put_str(&mut buf, &header.kind);
    put_str(&mut buf, config);
    put_u32(&mut buf, store.len() as u32);
    for id in store.ids() {
        put_str(&mut buf, store.name(id));
        put_tensor_body(&mut buf, store.get(id));
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let buf = read_file(path)?;
    let mut c = Cursor {
        buf: &buf,
        pos: 0,
        what: "checkpoint",
    };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::Load {
            field: "magic".into(),
            reason: "not a checkpoint file".into(),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Load {
            field: "version".into(),
            reason: format!("unsupported version {version}"),
        });
    }
    let header = Header {
        version,
        embed_dim: c.u32("embed_dim")?,
        token_dim: c.u32("token_dim")?,
        stride: c.u32("stride")?,
        kind: c.string("kind")?,
    };
    let config = c.string("config")?;
    let count = c.u32("tensor_count")?;
    let mut tensors = Vec::new();
    for i in 0..count {
        let name = c.string(&format!("tensor[{i}].name"))?;
        let t = c.tensor_body(&name)?;
        tensors.push((name, t));
    }
    Ok(Checkpoint {
        header,
        config,
        tensors,
    })
}

fn check_dims(header: &Header, cfg: &EncoderConfig) -> Result<()> {
    for (field, got, want) in [
        ("embed_dim", header.embed_dim as usize, cfg.embed_dim),
        ("token_dim", header.token_dim as usize, cfg.token_dim),
        ("stride", header.stride as usize, cfg.stride),
    ] {
        if got != want {
            return Err(Error::Load {
                field: field.into(),
                reason: format!("file has {got}, model expects {want}"),
            });
        }
    }
    Ok(())
}

/// Installs every tensor of the file into `store`.
///
/// Header dimensions must equal `cfg`, every tensor name must exist in the
/// store and every shape must match. Store tensors absent from the file keep
/// their current values; with `require_all` they are an error instead.
pub fn install(path: &Path, store: &mut ParamStore, cfg: &EncoderConfig, require_all: bool) -> Result<LoadManifest> {
    let ck = read(path)?;
    check_dims(&ck.header, cfg)?;
    let mut staged = Vec::with_capacity(ck.tensors.len());
    for (name, t) in ck.tensors {
        let id = store.id(&name).ok_or_else(|| Error::Load {
            field: name.clone(),
            reason: "no such parameter in the model".into(),
        })?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Load {
                field: name,
                reason: format!("shape {:?} does not match expected {:?}", t.shape(), store.get(id).shape()),
            });
        }
        staged.push((id, name, t));
    }
    if require_all {
        if let Some(id) = store.ids().find(|&id| !staged.iter().any(|(s, _, _)| *s == id)) {
            return Err(Error::Load {
                field: store.name(id).to_string(),
                reason: "missing from checkpoint".into(),
            });
        }
    }
    let mut names = Vec::with_capacity(staged.len());
    for (id, name, t) in staged {
        store.set(id, t)?;
        names.push(name);
    }
    Ok(LoadManifest {
        source: path.to_path_buf(),
        header: ck.header,
        tensors: names,
    })
}

/// Imports externally exported encoder weights into `store`.
pub fn load_pretrained(path: &Path, store: &mut ParamStore, cfg: &EncoderConfig) -> Result<LoadManifest> {
    install(path, store, cfg, false)
}

pub fn write_array(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ARRAY_MAGIC);
    put_u32(&mut buf, ARRAY_VERSION);
    put_tensor_body(&mut buf, t);
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<Tensor> {
    let buf = read_file(path)?;
    let mut c = Cursor {
        buf: &buf,
        pos: 0,
        what: "array",
    };
    if c.take(4, "magic")? != ARRAY_MAGIC {
        return Err(Error::Load {
            field: "magic".into(),
            reason: "not a raw array file".into(),
        });
    }
    let v = c.u32("version")?;
    if v != ARRAY_VERSION {
        return Err(Error::Load {
            field: "version".into(),
            reason: format!("unsupported version {v}"),
        });
    }
    c.tensor_body("array")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{Encoders, Image};

    #[test]
    fn round_trip_gives_identical_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let cfg = EncoderConfig::toy();
        let a = Encoders::new(cfg.clone()).unwrap();
        save(&path, &Header::for_encoder(&cfg), "", &a.store).unwrap();

        let mut b = Encoders::new(EncoderConfig { seed: 99, ..cfg.clone() }).unwrap();
        let img = Image::new(16, 16, (0..768).map(|i| (i as f64 * 0.01).sin()).collect()).unwrap();
        assert_ne!(a.encode_image(&img).unwrap(), b.encode_image(&img).unwrap());
        let m = load_pretrained(&path, &mut b.store, &cfg).unwrap();
        assert_eq!(m.tensors.len(), a.store.len());
        assert_eq!(m.header.kind, "toy");
        assert_eq!(a.encode_image(&img).unwrap(), b.encode_image(&img).unwrap());
    }

    #[test]
    fn mismatches_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let cfg = EncoderConfig::toy();
        let a = Encoders::new(cfg.clone()).unwrap();
        save(&path, &Header::for_encoder(&cfg), "", &a.store).unwrap();
        let other = EncoderConfig { embed_dim: 64, ..cfg };
        let mut b = Encoders::new(other.clone()).unwrap();
        match load_pretrained(&path, &mut b.store, &other) {
            Err(Error::Load { field, .. }) => assert_eq!(field, "embed_dim"),
            r => panic!("unexpected {r:?}"),
        }
        match load_pretrained(&dir.path().join("nope"), &mut b.store, &other) {
            Err(Error::NotFound(_)) => {}
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn array_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let t = Tensor::new(&[2, 3], vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.0, 7.0]).unwrap();
        write_array(&p, &t).unwrap();
        assert_eq!(read_array(&p).unwrap(), t);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"TARR");
        assert_eq!(bytes.len(), 4 + 4 + 4 + 16 + 48);
    }
}
