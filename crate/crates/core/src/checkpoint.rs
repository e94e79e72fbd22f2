//! MKDF checkpoint format: magic "MKDF", u32 version, u64 header length,
//! UTF-8 JSON header (tensor names/shapes/offsets plus a free-form meta
//! map), then float32 little-endian blobs in header order.

use crate::error::{Error, Result};
use crate::nn::Params;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"MKDF";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    meta: BTreeMap<String, String>,
}

/// A named-tensor archive held in memory.
#[derive(Debug)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_model(model: &mut impl Params, meta: BTreeMap<String, String>) -> Self {
        let mut tensors = Vec::new();
        let mut named = Vec::new();
        model.visit_params("", &mut named);
        for (name, p) in named {
            tensors.push((name, p.dims.clone(), p.w.clone()));
        }
        Checkpoint { tensors, meta }
    }

    pub fn get(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f32>)> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }

    /// Copy stored values into the model's parameters, matched by name.
    /// Every model parameter must be present with an identical shape.
    pub fn apply_to(&self, model: &mut impl Params) -> Result<()> {
        let mut named = Vec::new();
        model.visit_params("", &mut named);
        for (name, p) in named {
            let (_, shape, data) = self
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name}")))?;
            if *shape != p.dims {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {shape:?}, model expects {:?}",
                    p.dims
                )));
            }
            p.w.copy_from_slice(data);
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, shape, data) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            });
            offset += (data.len() * 4) as u64;
        }
        let header = serde_json::to_vec(&Header {
            tensors: entries,
            meta: self.meta.clone(),
        })
        .expect("header serialization");

        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + hlen {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let blob = &bytes[16 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + count * 4;
            if end > blob.len() {
                return Err(Error::Format(format!("tensor {} overruns blob section", e.name)));
            }
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name.clone(), e.shape.clone(), data));
        }
        Ok(Checkpoint {
            tensors,
            meta: header.meta,
        })
    }

    /// Write via a temp file + rename so a crash never leaves a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("mkdf.tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Load a checkpoint and refuse to apply it when the stored architecture
/// fingerprint disagrees with the model's.
pub fn load_checked(path: &Path, model: &mut impl Params, arch_hash: &str) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if let Some(stored) = ckpt.meta.get("arch_hash") {
        if stored != arch_hash {
            return Err(Error::Config(format!(
                "checkpoint {} was produced for architecture {stored}, expected {arch_hash}",
                path.display()
            )));
        }
    }
    ckpt.apply_to(model)?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{join, Param};

    struct Toy {
        a: Param,
        b: Param,
    }

    impl Params for Toy {
        fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
            out.push((join(prefix, "a"), &mut self.a));
            out.push((join(prefix, "b"), &mut self.b));
        }
    }

    #[test]
    fn roundtrip_through_disk() {
        let mut toy = Toy {
            a: Param::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.25]),
            b: Param::from_vec(&[1], vec![-0.5]),
        };
        let mut meta = BTreeMap::new();
        meta.insert("config_hash".into(), "abc".into());
        let ckpt = Checkpoint::from_model(&mut toy, meta);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.mkdf");
        ckpt.save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.meta.get("config_hash").unwrap(), "abc");
        let mut toy2 = Toy {
            a: Param::zeros(&[2, 3]),
            b: Param::zeros(&[1]),
        };
        loaded.apply_to(&mut toy2).unwrap();
        assert_eq!(toy2.a.w, toy.a.w);
        assert_eq!(toy2.b.w, toy.b.w);
    }

    #[test]
    fn header_encodes_names_shapes_offsets() {
        let mut toy = Toy {
            a: Param::from_vec(&[2], vec![1.0, 2.0]),
            b: Param::from_vec(&[1], vec![3.0]),
        };
        let bytes = Checkpoint::from_model(&mut toy, BTreeMap::new()).encode();
        assert_eq!(&bytes[..4], b"MKDF");
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        assert_eq!(header["tensors"][0]["name"], "a");
        assert_eq!(header["tensors"][1]["offset"], 8);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut toy = Toy {
            a: Param::from_vec(&[2], vec![1.0, 2.0]),
            b: Param::from_vec(&[1], vec![3.0]),
        };
        let ckpt = Checkpoint::from_model(&mut toy, BTreeMap::new());
        let mut other = Toy {
            a: Param::zeros(&[3]),
            b: Param::zeros(&[1]),
        };
        assert!(ckpt.apply_to(&mut other).is_err());
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let err = Checkpoint::load(Path::new("/nonexistent/x.mkdf")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }
}
