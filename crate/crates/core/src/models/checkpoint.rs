//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! "MMCK" | version u32 | arch descriptor (u32 len + UTF-8) | param count u32
//! per param: name (u32 len + UTF-8) | rank u8 | dims u32 * rank | f64 * numel
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::codec::{ReadError, Reader, Writer};
use crate::scalar::Scalar;
use crate::tensorcore::Tensor;

use super::{ArchSpec, Model, ModelError, Param};

const MAGIC: &[u8; 4] = b"MMCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    NotACheckpoint,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match its architecture header: {0}")]
    ShapeMismatch(ModelError),
}

impl From<ReadError> for CheckpointError {
    fn from(e: ReadError) -> Self {
        CheckpointError::Corrupt(e.to_string())
    }
}

pub fn encode_checkpoint<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.str(&model.arch().to_string());
    w.u32(model.params().len() as u32);
    for p in model.params() {
        w.str(&p.name);
        w.u8(p.value.rank() as u8);
        for &d in p.value.shape() {
            w.u32(d as u32);
        }
        for v in p.value.data() {
            w.f64(v.as_f64());
        }
    }
    w.finish()
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Model<T>, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(CheckpointError::NotACheckpoint);
    }
    let mut r = Reader::new(&bytes[4..]);
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let desc = r.str("architecture descriptor")?;
    let arch: ArchSpec = desc
        .parse()
        .map_err(|e: ModelError| CheckpointError::Corrupt(e.to_string()))?;
    let count = r.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.str("parameter name")?;
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        if numel.saturating_mul(8) > r.remaining() {
            return Err(CheckpointError::Corrupt(format!("truncated data for {name}")));
        }
        let data = (0..numel)
            .map(|_| r.f64("parameter data").map(T::lit))
            .collect::<Result<Vec<_>, _>>()?;
        let value = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
        params.push(Param { name, value });
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            r.remaining()
        )));
    }
    Model::from_params(arch, params).map_err(CheckpointError::ShapeMismatch)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(model)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_model;

    fn model() -> Model {
        build_model(&"mlp:2-8-3".parse().unwrap(), 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let back: Model = decode_checkpoint(&encode_checkpoint(&m)).unwrap();
        assert_eq!(back.arch(), m.arch());
        assert_eq!(back.checksum(), m.checksum());
        let x = Tensor::new([2, 2], vec![0.1, 0.9, 0.4, 0.3]).unwrap();
        assert!(back.logits(&x).unwrap().bit_eq(&m.logits(&x).unwrap()));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        let back: Model = load_checkpoint(&path).unwrap();
        assert_eq!(back.checksum(), m.checksum());
    }

    #[test]
    fn truncated_is_corrupt() {
        let bytes = encode_checkpoint(&model());
        for cut in [5, 12, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint::<f64>(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, CheckpointError::Corrupt(_)), "cut {cut}: {err}");
            assert!(err.to_string().starts_with("corrupt checkpoint"));
        }
    }

    #[test]
    fn wrong_magic_is_not_a_checkpoint() {
        let mut bytes = encode_checkpoint(&model());
        bytes[0] = b'X';
        let err = decode_checkpoint::<f64>(&bytes).unwrap_err();
        assert!(matches!(err, CheckpointError::NotACheckpoint));
        assert_eq!(err.to_string(), "not a checkpoint (bad magic bytes)");
        assert!(matches!(decode_checkpoint::<f64>(&[]), Err(CheckpointError::NotACheckpoint)));
    }

    #[test]
    fn header_shape_mismatch_detected() {
        let m = model();
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str("mlp:2-4-3");
        w.u32(m.params().len() as u32);
        for p in m.params() {
            w.str(&p.name);
            w.u8(p.value.rank() as u8);
            for &d in p.value.shape() {
                w.u32(d as u32);
            }
            for v in p.value.data() {
                w.f64(*v);
            }
        }
        let err = decode_checkpoint::<f64>(&w.finish()).unwrap_err();
        assert!(matches!(err, CheckpointError::ShapeMismatch(_)), "{err}");
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_checkpoint::<f64>(Path::new("/nonexistent/teacher.ckpt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/teacher.ckpt"));
    }
}
