//! Bit-exact binary persistence of a full training state.
//!
//! Layout (all integers little-endian, all floats f64 LE):
//!
//! ```text
//! offset  size        field
//! 0       8           magic "DEVGAN01"
//! 8       4           config text length L (u32)
//! 12      L           config as key=value UTF-8 text
//! ..      8           epochs_completed (u64)
//! ..      4           network count (u32)
//! per network:
//!         4 + n       name (u32 length + bytes)
//!         4           parameter count (u32)
//!   per parameter:
//!         4 + n       name (u32 length + bytes)
//!         4           rank (u32)
//!         8 * rank    extents (u64 each)
//!         8           adam step count (u64)
//!         8 * len     values
//!         8 * len     adam first moments
//!         8 * len     adam second moments
//! tail:   8           FNV-1a 64 checksum of all preceding bytes
//! ```
//!
//! The checksum is verified before anything is parsed; a corrupt file
//! never yields partial state. The embedded config rebuilds the exact
//! model skeleton, so shape or inventory drift is detected on load.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::config::{self, ConfigError};
use crate::training::{Model, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"DEVGAN01";

#[derive(Debug)]
pub enum CheckpointError {
    Io {
        path: PathBuf,
        source: io::Error,
    },
    BadMagic {
        path: PathBuf,
    },
    ChecksumMismatch {
        path: PathBuf,
    },
    Truncated {
        path: PathBuf,
        detail: String,
    },
    BadConfig {
        path: PathBuf,
        source: ConfigError,
    },
    /// A network named in the config is absent from the file.
    MissingNetwork {
        path: PathBuf,
        name: String,
    },
    /// A parameter block disagrees with the config-derived skeleton.
    ShapeMismatch {
        path: PathBuf,
        param: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    UnknownParam {
        path: PathBuf,
        name: String,
    },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CheckpointError::BadMagic { path } => {
                write!(f, "{}: not a checkpoint (bad magic)", path.display())
            }
            CheckpointError::ChecksumMismatch { path } => {
                write!(
                    f,
                    "{}: checksum mismatch (corrupt checkpoint)",
                    path.display()
                )
            }
            CheckpointError::Truncated { path, detail } => {
                write!(f, "{}: truncated checkpoint: {detail}", path.display())
            }
            CheckpointError::BadConfig { path, source } => {
                write!(f, "{}: embedded config: {source}", path.display())
            }
            CheckpointError::MissingNetwork { path, name } => {
                write!(f, "{}: network block '{name}' missing", path.display())
            }
            CheckpointError::ShapeMismatch {
                path,
                param,
                expected,
                got,
            } => write!(
                f,
                "{}: parameter {param}: shape {got:?} does not match config ({expected:?})",
                path.display()
            ),
            CheckpointError::UnknownParam { path, name } => {
                write!(
                    f,
                    "{}: parameter '{name}' not part of the configured model",
                    path.display()
                )
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

pub type CheckpointResult<T> = Result<T, CheckpointError>;

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serialize a training state (with its config) to checkpoint bytes.
pub fn encode_checkpoint(state: &TrainState, cfg: &TrainConfig) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.str(&config::to_kv_text(cfg));
    w.u64(state.epochs_completed);
    let nets = state.model.networks();
    w.u32(nets.len() as u32);
    for net in nets {
        w.str(&net.name);
        w.u32(net.params.len() as u32);
        for p in &net.params {
            w.str(&p.name);
            w.u32(p.shape.len() as u32);
            for &d in &p.shape {
                w.u64(d as u64);
            }
            w.u64(p.step_count);
            w.f64s(&p.values);
            w.f64s(&p.moment1);
            w.f64s(&p.moment2);
        }
    }
    let checksum = fnv1a64(&w.buf);
    w.u64(checksum);
    w.buf
}

pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, path: &Path) -> CheckpointResult<()> {
    fs::write(path, encode_checkpoint(state, cfg)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CheckpointResult<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("need {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> CheckpointResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> CheckpointResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> CheckpointResult<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CheckpointError::Truncated {
            path: self.path.to_path_buf(),
            detail: "non-UTF8 string".into(),
        })
    }
    fn f64s(&mut self, n: usize) -> CheckpointResult<Vec<f64>> {
        let bytes = self.take(8 * n)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parse checkpoint bytes back into the training state and its config.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> CheckpointResult<(TrainState, TrainConfig)> {
    let whole = path.to_path_buf();
    if bytes.len() < MAGIC.len() + 8 {
        return Err(CheckpointError::Truncated {
            path: whole,
            detail: format!("{} bytes is too short", bytes.len()),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a64(body) != stored {
        return Err(CheckpointError::ChecksumMismatch { path: whole });
    }
    if &body[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic { path: whole });
    }

    let mut r = Reader {
        path,
        bytes: body,
        pos: MAGIC.len(),
    };
    let cfg_text = r.str()?;
    let cfg = config::from_kv_text(&cfg_text).map_err(|source| CheckpointError::BadConfig {
        path: path.to_path_buf(),
        source,
    })?;
    let epochs_completed = r.u64()?;

    // Skeleton with the right inventory and shapes; every stored block
    // must land on one of its parameters.
    let mut model =
        Model::init(&cfg.arch, cfg.seed, cfg.model).map_err(|e| CheckpointError::BadConfig {
            path: path.to_path_buf(),
            source: ConfigError {
                line: 0,
                detail: e.to_string(),
            },
        })?;

    let net_count = r.u32()? as usize;
    let mut seen_nets = Vec::new();
    for _ in 0..net_count {
        let net_name = r.str()?;
        let param_count = r.u32()? as usize;
        for _ in 0..param_count {
            let param_name = r.str()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let step_count = r.u64()?;
            let len: usize = shape.iter().product();
            let values = r.f64s(len)?;
            let moment1 = r.f64s(len)?;
            let moment2 = r.f64s(len)?;

            let slot = model
                .networks_mut()
                .into_iter()
                .find(|n| n.name == net_name)
                .and_then(|n| n.params.iter_mut().find(|p| p.name == param_name));
            let Some(p) = slot else {
                return Err(CheckpointError::UnknownParam {
                    path: path.to_path_buf(),
                    name: format!("{net_name}/{param_name}"),
                });
            };
            if p.shape != shape {
                return Err(CheckpointError::ShapeMismatch {
                    path: path.to_path_buf(),
                    param: param_name,
                    expected: p.shape.clone(),
                    got: shape,
                });
            }
            p.values = values;
            p.moment1 = moment1;
            p.moment2 = moment2;
            p.step_count = step_count;
        }
        seen_nets.push(net_name);
    }
    for expected in model.networks().iter().map(|n| n.name.clone()) {
        if !seen_nets.contains(&expected) {
            return Err(CheckpointError::MissingNetwork {
                path: path.to_path_buf(),
                name: expected,
            });
        }
    }
    Ok((
        TrainState {
            model,
            epochs_completed,
        },
        cfg,
    ))
}

pub fn load_checkpoint(path: &Path) -> CheckpointResult<(TrainState, TrainConfig)> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes, path)
}
