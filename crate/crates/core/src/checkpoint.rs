//! Versioned checkpoint container.
//!
//! Layout:
//!
//! ```text
//! b"CATCKPT\0"                 8-byte magic
//! u32 little-endian            format version
//! u64 little-endian            header length in bytes
//! header                       UTF-8 JSON, see `CheckpointHeader`
//! payload                      tensors back to back, little-endian, header order
//! ```
//!
//! Each header tensor entry carries its byte offset into the payload and the
//! SHA-256 of its bytes, checked on load.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bootstrap::EmaSchedule;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::{DType, ParamSet, Scalar, Tensor};
use crate::optimizer::OptState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CATCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const GROUPS: [&str; 4] = ["student", "teacher", "adam_m", "adam_v"];

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key as hex.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position as decimal text.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: to_hex(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::InvalidArgument("malformed RNG state".into());
        let bytes = from_hex(&self.seed).ok_or_else(bad)?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad())?);
        Ok(rng)
    }
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn from_hex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len_bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: DType,
    pub step: u64,
    pub opt_t: u64,
    pub ema_step: u64,
    pub rng: RngState,
    /// Input mean and standard deviation as `f64` bit patterns.
    pub input_norm: Option<[u64; 2]>,
    /// Run configuration in its text form.
    pub config: String,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config)
    }

    /// Short content digest of the embedded configuration.
    pub fn config_digest(&self) -> String {
        to_hex(&Sha256::digest(self.config.as_bytes())[..8])
    }

    pub fn group_scalars(&self, group: &str) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.group == group)
            .map(|t| t.shape.iter().product::<usize>())
            .sum()
    }
}

/// Everything needed to continue a run bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub config: RunConfig,
    pub step: u64,
    pub student: ParamSet<T>,
    pub teacher: ParamSet<T>,
    pub opt: OptState<T>,
    pub ema: EmaSchedule,
    pub rng: RngState,
    pub input_norm: Option<(f64, f64)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        let groups = [&self.student, &self.teacher, &self.opt.m, &self.opt.v];
        for (group, set) in GROUPS.iter().zip(groups) {
            for (name, t) in set.iter() {
                let start = payload.len();
                for &v in t.data() {
                    v.write_le(&mut payload);
                }
                tensors.push(TensorEntry {
                    group: group.to_string(),
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset: start as u64,
                    len_bytes: (payload.len() - start) as u64,
                    sha256: to_hex(&Sha256::digest(&payload[start..])),
                });
            }
        }
        let header = CheckpointHeader {
            dtype: T::DTYPE,
            step: self.step,
            opt_t: self.opt.t,
            ema_step: self.ema.step,
            rng: self.rng.clone(),
            input_norm: self.input_norm.map(|(m, s)| [m.to_bits(), s.to_bits()]),
            config: self.config.to_text(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let (header, payload) = split(bytes, path)?;
        if header.dtype != T::DTYPE {
            return Err(Error::InvalidArgument(format!(
                "checkpoint holds {} tensors, expected {}",
                header.dtype.as_str(),
                T::DTYPE.as_str()
            )));
        }
        let corrupt = |detail: String| Error::Corrupt {
            path: path.to_path_buf(),
            detail,
        };
        let width = T::DTYPE.size_bytes();
        let mut sets: [ParamSet<T>; 4] = Default::default();
        let mut expected = 0u64;
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            if e.offset != expected || e.len_bytes != (numel * width) as u64 {
                return Err(corrupt(format!(
                    "tensor {}/{} has an inconsistent extent",
                    e.group, e.name
                )));
            }
            let stop = (e.offset + e.len_bytes) as usize;
            let bytes = payload.get(e.offset as usize..stop).ok_or_else(|| {
                corrupt(format!(
                    "tensor {}/{} runs past the payload",
                    e.group, e.name
                ))
            })?;
            if to_hex(&Sha256::digest(bytes)) != e.sha256 {
                return Err(Error::Checksum(format!("{}/{}", e.group, e.name)));
            }
            let data = bytes.chunks_exact(width).map(T::read_le).collect();
            let g = GROUPS
                .iter()
                .position(|g| *g == e.group)
                .ok_or_else(|| corrupt(format!("unknown tensor group {}", e.group)))?;
            sets[g].insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
            expected = stop as u64;
        }
        if expected as usize != payload.len() {
            return Err(corrupt(format!(
                "{} trailing payload bytes",
                payload.len() - expected as usize
            )));
        }
        let config = header.config()?;
        let [student, teacher, m, v] = sets;
        if !m.same_layout(&student) || !v.same_layout(&student) {
            return Err(corrupt(
                "optimizer moments do not mirror the student".into(),
            ));
        }
        let mut ema = config.ema();
        ema.step = header.ema_step;
        Ok(Self {
            opt: OptState {
                config: config.adamw(),
                m,
                v,
                t: header.opt_t,
            },
            config,
            step: header.step,
            student,
            teacher,
            ema,
            rng: header.rng,
            input_norm: header
                .input_norm
                .map(|[m, s]| (f64::from_bits(m), f64::from_bits(s))),
        })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.encode())?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

fn split<'a>(bytes: &'a [u8], path: &Path) -> Result<(CheckpointHeader, &'a [u8])> {
    let corrupt = |detail: &str| Error::Corrupt {
        path: PathBuf::from(path),
        detail: detail.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(20..20 + len)
        .ok_or_else(|| corrupt("header runs past end of file"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    Ok((header, &bytes[20 + len..]))
}

/// Reads and validates only the header, for inspection without knowing the dtype.
pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split(&bytes, path)?.0)
}
