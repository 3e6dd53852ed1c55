//! Versioned model checkpoint container, shared by the fader and classifier
//! models.
//!
//! Layout: magic `SFCP` | u16 version | u32 meta_len | meta JSON (UTF-8,
//! carries the model kind and an arch echo) | u32 n_blobs | blobs. Each blob:
//! u16 name_len | name | u8 ndim | ndim x u32 dims | payload of little-endian
//! f32 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SFCP";
const VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Blob {
    pub fn from_f64(name: impl Into<String>, shape: &[usize], data: &[f64]) -> Self {
        Blob {
            name: name.into(),
            shape: shape.to_vec(),
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    kind: &str,
    arch: &serde_json::Value,
    blobs: &[Blob],
) -> Result<()> {
    let path = path.as_ref();
    let mut w = File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))?;
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u16::<LE>(VERSION).map_err(io)?;
    let meta = serde_json::json!({ "kind": kind, "arch": arch });
    let meta_bytes = serde_json::to_vec(&meta).expect("meta json");
    w.write_u32::<LE>(meta_bytes.len() as u32).map_err(io)?;
    w.write_all(&meta_bytes).map_err(io)?;
    w.write_u32::<LE>(blobs.len() as u32).map_err(io)?;
    for blob in blobs {
        let name = blob.name.as_bytes();
        w.write_u16::<LE>(name.len() as u16).map_err(io)?;
        w.write_all(name).map_err(io)?;
        w.write_u8(blob.shape.len() as u8).map_err(io)?;
        for &d in &blob.shape {
            w.write_u32::<LE>(d as u32).map_err(io)?;
        }
        let count: usize = blob.shape.iter().product::<usize>().max(1);
        if count != blob.data.len() {
            return Err(Error::Shape(format!(
                "blob {}: shape {:?} does not match {} values",
                blob.name,
                blob.shape,
                blob.data.len()
            )));
        }
        for &v in &blob.data {
            w.write_f32::<LE>(v).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(String, serde_json::Value, Vec<Blob>)> {
    let path = path.as_ref();
    let mut r = File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(path, "header truncated: field `magic`"))?;
    if &magic != MAGIC {
        return Err(Error::format(path, "field `magic`: not a checkpoint file"));
    }
    let version = r
        .read_u16::<LE>()
        .map_err(|_| Error::format(path, "header truncated: field `version`"))?;
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("field `version`: unsupported version {version}"),
        ));
    }
    let meta_len = r
        .read_u32::<LE>()
        .map_err(|_| Error::format(path, "header truncated: field `meta_len`"))?
        as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)
        .map_err(|_| Error::format(path, "header truncated: field `meta`"))?;
    let meta: serde_json::Value = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::format(path, format!("field `meta`: {e}")))?;
    let kind = meta
        .get("kind")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::format(path, "field `meta.kind`: missing"))?
        .to_string();
    let arch = meta.get("arch").cloned().unwrap_or(serde_json::Value::Null);
    let n_blobs = r
        .read_u32::<LE>()
        .map_err(|_| Error::format(path, "header truncated: field `n_blobs`"))?;
    let mut blobs = Vec::with_capacity(n_blobs as usize);
    for _ in 0..n_blobs {
        let name_len = r
            .read_u16::<LE>()
            .map_err(|_| Error::format(path, "blob truncated: field `name_len`"))?
            as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::format(path, "blob truncated: field `name`"))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format(path, "blob name not UTF-8"))?;
        let ndim = r
            .read_u8()
            .map_err(|_| Error::format(path, "blob truncated: field `ndim`"))?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(
                r.read_u32::<LE>()
                    .map_err(|_| Error::format(path, "blob truncated: field `dims`"))?
                    as usize,
            );
        }
        let count: usize = shape.iter().product::<usize>().max(1);
        let mut data = vec![0f32; count];
        r.read_f32_into::<LE>(&mut data)
            .map_err(|_| Error::Data(format!("{}: blob `{name}` payload truncated", path.display())))?;
        blobs.push(Blob { name, shape, data });
    }
    Ok((kind, arch, blobs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let blobs = vec![
            Blob {
                name: "a.w".into(),
                shape: vec![2, 3],
                data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            },
            Blob {
                name: "a.b".into(),
                shape: vec![3],
                data: vec![-1.0, 0.0, 1.0],
            },
        ];
        let arch = serde_json::json!({"latent": 8});
        write_checkpoint(&path, "fader", &arch, &blobs).unwrap();
        let (kind, arch2, blobs2) = read_checkpoint(&path).unwrap();
        assert_eq!(kind, "fader");
        assert_eq!(arch2, arch);
        assert_eq!(blobs2.len(), 2);
        assert_eq!(blobs2[0].name, "a.w");
        assert_eq!(blobs2[0].shape, vec![2, 3]);
        assert_eq!(blobs2[0].data, blobs[0].data);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE someting").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
