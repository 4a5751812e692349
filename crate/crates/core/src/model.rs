//! The bi-encoder pairing a query tower with a candidate tower, and its
//! binary checkpoint format.
//!
//! Checkpoint layout: magic `PMDC`, format version (u32 LE), a
//! length-prefixed UTF-8 JSON config blob, then for each named tensor its
//! name length, name bytes, rank, dims (all u64 LE), and a row-major
//! little-endian f32 payload. Parameters are kept f32-representable in
//! memory, so a save/load cycle is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::encoder::{
    count_params, init_params, select_layers, EncoderConfig, EncoderError, EncoderParams,
    TensorView, TensorViewMut,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PMDC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a PMDC checkpoint")]
    NotACheckpoint { path: PathBuf },
    #[error("{path}: checkpoint format version {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: corrupt checkpoint: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Two towers of identical architecture: one encodes (head, relation) text,
/// the other encodes candidate tail text.
#[derive(Debug, Clone)]
pub struct BiEncoder {
    pub hr: EncoderParams,
    pub tail: EncoderParams,
}

pub type BiEncoderGrads = BiEncoder;

impl BiEncoder {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        Ok(Self {
            hr: init_params(config, seed)?,
            tail: init_params(config, seed ^ 0x9E37_79B9_7F4A_7C15)?,
        })
    }

    pub fn zeros(config: &EncoderConfig) -> Self {
        Self {
            hr: EncoderParams::zeros(config),
            tail: EncoderParams::zeros(config),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.hr.config
    }

    /// Total scalar parameters over both towers (no sharing).
    pub fn num_params(&self) -> u64 {
        self.hr.num_params() + self.tail.num_params()
    }

    /// Builds a shallower student by stride-based layer selection on each
    /// tower independently.
    pub fn select_layers(&self, config: &EncoderConfig) -> Result<Self, EncoderError> {
        Ok(Self {
            hr: select_layers(&self.hr, config)?,
            tail: select_layers(&self.tail, config)?,
        })
    }

    pub fn tensors(&self) -> Vec<(String, TensorView<'_>)> {
        let mut out = Vec::new();
        for (name, t) in self.hr.tensors() {
            out.push((format!("hr.{name}"), t));
        }
        for (name, t) in self.tail.tensors() {
            out.push((format!("tail.{name}"), t));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, TensorViewMut<'_>)> {
        let mut out = Vec::new();
        for (name, t) in self.hr.tensors_mut() {
            out.push((format!("hr.{name}"), t));
        }
        for (name, t) in self.tail.tensors_mut() {
            out.push((format!("tail.{name}"), t));
        }
        out
    }

    /// True when every tensor of both models is bitwise identical.
    pub fn bit_equal(&self, other: &BiEncoder) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a.iter().zip(b.iter()).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.len() == tb.len()
                    && ta
                        .as_slice()
                        .iter()
                        .zip(tb.as_slice())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Parameter count of the full bi-encoder at a given tower configuration,
/// optionally discounting one copy of the token embedding table as if the
/// towers shared it.
pub fn bi_encoder_param_count(config: &EncoderConfig, shared_embeddings: bool) -> u64 {
    let tower = count_params(config);
    let shared_discount = if shared_embeddings {
        (config.vocab_size * config.hidden) as u64
    } else {
        0
    };
    2 * tower - shared_discount
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(path: &Path, model: &BiEncoder) -> Result<(), CheckpointError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err(path))?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())
        .map_err(io_err(path))?;
    let config_json = serde_json::to_string(model.config()).expect("config serializes");
    w.write_all(&(config_json.len() as u64).to_le_bytes())
        .map_err(io_err(path))?;
    w.write_all(config_json.as_bytes()).map_err(io_err(path))?;
    for (name, tensor) in model.tensors() {
        w.write_all(&(name.len() as u64).to_le_bytes())
            .map_err(io_err(path))?;
        w.write_all(name.as_bytes()).map_err(io_err(path))?;
        let shape = tensor.shape();
        w.write_all(&(shape.len() as u64).to_le_bytes())
            .map_err(io_err(path))?;
        for dim in &shape {
            w.write_all(&(*dim as u64).to_le_bytes())
                .map_err(io_err(path))?;
        }
        for v in tensor.as_slice() {
            w.write_all(&(*v as f32).to_le_bytes())
                .map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

struct CheckpointReader<'a> {
    reader: BufReader<File>,
    path: &'a Path,
}

impl<'a> CheckpointReader<'a> {
    fn corrupt(&self, message: impl Into<String>) -> CheckpointError {
        CheckpointError::Corrupt {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), CheckpointError> {
        self.reader.read_exact(buf).map_err(|_| {
            self.corrupt("unexpected end of file")
        })
    }

    fn read_u64(&mut self) -> Result<u64, CheckpointError> {
        let mut buf = [0u8; 8];
        self.read_exact(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    /// Returns None at a clean end of file.
    fn read_u64_or_eof(&mut self) -> Result<Option<u64>, CheckpointError> {
        let mut buf = [0u8; 8];
        let mut filled = 0;
        while filled < 8 {
            let n = self
                .reader
                .read(&mut buf[filled..])
                .map_err(|e| self.corrupt(e.to_string()))?;
            if n == 0 {
                if filled == 0 {
                    return Ok(None);
                }
                return Err(self.corrupt("unexpected end of file"));
            }
            filled += n;
        }
        Ok(Some(u64::from_le_bytes(buf)))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<BiEncoder, CheckpointError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = CheckpointReader {
        reader: BufReader::new(file),
        path,
    };

    let mut magic = [0u8; 4];
    if r.reader.read_exact(&mut magic).is_err() || &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::NotACheckpoint {
            path: path.to_path_buf(),
        });
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version)?;
    let version = u32::from_le_bytes(version);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }

    let config_len = r.read_u64()? as usize;
    if config_len > 1 << 20 {
        return Err(r.corrupt("config blob implausibly large"));
    }
    let mut config_buf = vec![0u8; config_len];
    r.read_exact(&mut config_buf)?;
    let config: EncoderConfig = serde_json::from_slice(&config_buf)
        .map_err(|e| r.corrupt(format!("bad config JSON: {e}")))?;
    config.validate()?;

    let mut model = BiEncoder::zeros(&config);
    let mut filled = std::collections::HashSet::new();
    loop {
        let Some(name_len) = r.read_u64_or_eof()? else {
            break;
        };
        if name_len > 4096 {
            return Err(r.corrupt("tensor name implausibly long"));
        }
        let mut name_buf = vec![0u8; name_len as usize];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| r.corrupt("tensor name is not UTF-8"))?;
        let rank = r.read_u64()? as usize;
        if rank > 4 {
            return Err(r.corrupt(format!("tensor `{name}` has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.read_u64()? as usize);
        }
        let count: usize = dims.iter().product();
        let mut payload = vec![0u8; count * 4];
        r.read_exact(&mut payload)?;

        let mut tensors = model.tensors_mut();
        let slot = tensors
            .iter_mut()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| CheckpointError::Corrupt {
                path: path.to_path_buf(),
                message: format!("unknown tensor `{name}` for this config"),
            })?;
        if slot.1.len() != count {
            return Err(CheckpointError::Corrupt {
                path: path.to_path_buf(),
                message: format!(
                    "tensor `{name}` has {count} values, expected {}",
                    slot.1.len()
                ),
            });
        }
        let out = slot.1.as_slice_mut();
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            out[i] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        filled.insert(name);
    }

    let expected = model.tensors().len();
    if filled.len() != expected {
        return Err(CheckpointError::Corrupt {
            path: path.to_path_buf(),
            message: format!("{} of {expected} tensors present", filled.len()),
        });
    }
    Ok(model)
}
