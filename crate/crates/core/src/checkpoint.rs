//! Binary tensor archive used for model checkpoints and gate recordings.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CGRU" | version u32 | meta_len u32 | meta (UTF-8 key=value lines)
//! count u32 | count x { name_len u32 | name | rank u8 | dims u32 x rank
//!                       | dtype u8 | payload }
//! crc32 u32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{GateTrace, ModelConfig, ModelParams};
use crate::params::ParamSet;
use crate::recurrent::GateRecord;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CGRU";
pub const VERSION: u32 = 1;

/// One stored tensor with its payload kept as raw little-endian bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    payload: Vec<u8>,
}

impl Entry {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        let mut payload = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            payload,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' is stored as {:?}, expected {:?}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let data = self.payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        Tensor::new(&self.shape, data)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub meta: Vec<(String, String)>,
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("text field is not UTF-8".into()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, self.entries.len())?;
        for e in &self.entries {
            put_u32(&mut out, e.name.len())?;
            out.extend_from_slice(e.name.as_bytes());
            let rank = u8::try_from(e.shape.len())
                .map_err(|_| Error::Checkpoint(format!("rank of '{}' exceeds 255", e.name)))?;
            out.push(rank);
            for &d in &e.shape {
                put_u32(&mut out, d)?;
            }
            out.push(e.dtype as u8);
            out.extend_from_slice(&e.payload);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("missing CGRU magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut meta = Vec::new();
        for line in r.text()?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad config line '{line}'")))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.text()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let tag = r.u8()?;
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("'{name}': unknown dtype tag {tag}")))?;
            let len = shape
                .iter()
                .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("'{name}': size overflow")))?;
            let payload = r.take(len)?.to_vec();
            entries.push(Entry {
                name,
                shape,
                dtype,
                payload,
            });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes before the CRC",
                body.len() - r.pos
            )));
        }
        Ok(Archive { meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::format(path, msg),
            other => other,
        })
    }
}

/// Archive holding every parameter, with the model configuration and any
/// extra settings echoed in the metadata block.
pub fn params_to_archive<T: Scalar>(params: &ModelParams<T>, extra: &[(String, String)]) -> Archive {
    let mut meta = params.config.to_pairs();
    meta.extend(extra.iter().cloned());
    Archive {
        meta,
        entries: params
            .named()
            .into_iter()
            .map(|(n, t)| Entry::from_tensor(&n, t))
            .collect(),
    }
}

/// Rebuilds a model from an archive; the metadata alone determines the
/// shapes, and every tensor must be present exactly once.
pub fn params_from_archive<T: Scalar>(archive: &Archive) -> Result<ModelParams<T>> {
    let mut config = ModelConfig::desk();
    for (k, v) in &archive.meta {
        config.set(k, v)?;
    }
    let mut params = ModelParams::<T>::zeros(&config)?;
    let expected = params.named().len();
    if archive.entries.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, model needs {expected}",
            archive.entries.len()
        )));
    }
    for (name, t) in params.named_mut() {
        let e = archive
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        if e.shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {:?}, model needs {:?}",
                e.shape,
                t.shape()
            )));
        }
        *t = e.to_tensor()?;
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ModelParams<T>, extra: &[(String, String)]) -> Result<()> {
    params_to_archive(params, extra).save(path)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    params_from_archive(&Archive::load(path)?)
}

const GATE_FIELDS: [&str; 4] = ["z", "r", "h_cand", "h_new"];

/// Stores gate records as `<dir>.t<frame>.<field>` tensors.
pub fn gates_to_archive(trace: &GateTrace<f32>) -> Archive {
    let mut entries = Vec::new();
    for (dir, recs) in [("fwd", &trace.forward), ("bwd", &trace.backward)] {
        for (t, rec) in recs.iter().enumerate() {
            for (field, tensor) in GATE_FIELDS.iter().zip([&rec.z, &rec.r, &rec.h_cand, &rec.h_new]) {
                entries.push(Entry::from_tensor(&format!("{dir}.t{t:05}.{field}"), tensor));
            }
        }
    }
    Archive {
        meta: vec![
            ("kind".into(), "gates".into()),
            ("frames".into(), trace.forward.len().to_string()),
            ("backward_frames".into(), trace.backward.len().to_string()),
        ],
        entries,
    }
}

pub fn gates_from_archive(archive: &Archive) -> Result<GateTrace<f32>> {
    if archive.meta_value("kind") != Some("gates") {
        return Err(Error::Checkpoint("archive does not hold gate records".into()));
    }
    let count = |key: &str| -> Result<usize> {
        archive
            .meta_value(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("missing '{key}' in gate archive")))
    };
    let read = |dir: &str, n: usize| -> Result<Vec<GateRecord<f32>>> {
        (0..n)
            .map(|t| {
                let get = |field: &str| -> Result<Tensor> {
                    let name = format!("{dir}.t{t:05}.{field}");
                    archive
                        .get(&name)
                        .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?
                        .to_tensor()
                };
                Ok(GateRecord {
                    z: get("z")?,
                    r: get("r")?,
                    h_cand: get("h_cand")?,
                    h_new: get("h_new")?,
                })
            })
            .collect()
    };
    Ok(GateTrace {
        forward: read("fwd", count("frames")?)?,
        backward: read("bwd", count("backward_frames")?)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use rand::SeedableRng;

    fn model(v: Variant) -> ModelParams<f32> {
        let cfg = ModelConfig::desk().with_variant(v);
        ModelParams::init(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn roundtrip_every_variant() {
        for v in Variant::ALL {
            let p = model(v);
            let bytes = params_to_archive(&p, &[]).to_bytes().unwrap();
            let back: ModelParams<f32> =
                params_from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(back, p, "{v}");
        }
    }

    #[test]
    fn corrupted_byte_refused() {
        let mut bytes = params_to_archive(&model(Variant::Full), &[]).to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        let err = Archive::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("CRC"), "{err}");
    }

    #[test]
    fn wrong_dtype_refused() {
        let a = params_to_archive(&model(Variant::Unidir), &[]);
        assert!(params_from_archive::<f64>(&a).is_err());
    }

    #[test]
    fn layout_prefix() {
        let a = Archive {
            meta: vec![("k".into(), "v".into())],
            entries: vec![Entry::from_tensor("t", &Tensor::<f64>::full(&[2], 1.5))],
        };
        let b = a.to_bytes().unwrap();
        assert_eq!(&b[..4], b"CGRU");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &4u32.to_le_bytes());
        assert_eq!(&b[12..16], b"k=v\n");
        assert_eq!(b.len(), 16 + 4 + 4 + 1 + 1 + 4 + 1 + 16 + 4);
        assert_eq!(Archive::from_bytes(&b).unwrap(), a);
    }
}
