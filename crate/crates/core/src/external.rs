//! Frozen external encoders that supply alignment targets, and the embedding file format.
//!
//! Embedding file layout (all integers in ASCII decimal):
//!
//! ```text
//! CATEMB1\n
//! source <source_id>\n
//! count <n>\n
//! <clip_id>\t<dim>\t<offset>\n      (n lines; offset in bytes from payload start)
//! \n
//! <payload: every vector as f32 little-endian, in record order>
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::MelSpectrogram;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const EMBEDDING_MAGIC: &str = "CATEMB1";

#[derive(Clone, Debug, PartialEq)]
pub struct TargetEmbedding {
    pub clip_id: String,
    pub source_id: String,
    pub vector: Vec<f32>,
}

impl TargetEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let v: Vec<f64> = self.vector.iter().map(|&x| x as f64).collect();
        Tensor::from_f64(vec![v.len()], &v)
    }
}

/// A frozen encoder mapping a clip to a fixed-size embedding.
pub trait ExternalEncoder: Send + Sync {
    fn source_id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, clip_id: &str, spec: &MelSpectrogram) -> Result<TargetEmbedding>;
}

/// Fixed seeded linear projection of the time-averaged spectrogram.
#[derive(Clone, Debug)]
pub struct SyntheticOracleEncoder {
    source_id: String,
    weight: Tensor<f64>,
    bias: Vec<f64>,
}

impl SyntheticOracleEncoder {
    pub fn new(seed: u64, mel_bins: usize, dim: usize) -> Result<Self> {
        if mel_bins == 0 || dim == 0 {
            return Err(Error::InvalidArgument(
                "oracle dimensions must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = Tensor::randn(&[mel_bins, dim], 1.0 / (mel_bins as f64).sqrt(), &mut rng);
        let bias = Tensor::<f64>::randn(&[dim], 0.1, &mut rng).into_data();
        Ok(Self {
            source_id: format!("synthetic-oracle-{seed}"),
            weight,
            bias,
        })
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

impl ExternalEncoder for SyntheticOracleEncoder {
    fn source_id(&self) -> &str {
        &self.source_id
    }

    fn dim(&self) -> usize {
        self.bias.len()
    }

    fn embed(&self, clip_id: &str, spec: &MelSpectrogram) -> Result<TargetEmbedding> {
        let (bins, dim) = (self.weight.shape()[0], self.weight.shape()[1]);
        if spec.mel_bins() != bins {
            return Err(Error::dim(
                "mel_bins",
                format!("oracle expects {bins} mel bins, got {}", spec.mel_bins()),
            ));
        }
        let frames = spec.frames() as f64;
        let mut pooled = vec![0.0; bins];
        for t in 0..spec.frames() {
            for (p, &v) in pooled.iter_mut().zip(spec.data().row(t)) {
                *p += v;
            }
        }
        let mut out = self.bias.clone();
        for (f, p) in pooled.iter().enumerate() {
            let m = p / frames;
            for (o, &w) in out
                .iter_mut()
                .zip(&self.weight.data()[f * dim..(f + 1) * dim])
            {
                *o += m * w;
            }
        }
        Ok(TargetEmbedding {
            clip_id: clip_id.to_string(),
            source_id: self.source_id.clone(),
            vector: out.into_iter().map(|v| v as f32).collect(),
        })
    }
}

/// Looks embeddings up by clip id in a precomputed file.
#[derive(Clone, Debug)]
pub struct FileBackedEncoder {
    source_id: String,
    dim: usize,
    records: HashMap<String, TargetEmbedding>,
}

impl FileBackedEncoder {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let records = read_embeddings(path.as_ref())?;
        let source_id = records
            .first()
            .map(|r| r.source_id.clone())
            .unwrap_or_default();
        let dim = records.first().map(|r| r.dim()).unwrap_or(0);
        if let Some(r) = records.iter().find(|r| r.dim() != dim) {
            return Err(Error::Corrupt {
                path: path.as_ref().to_path_buf(),
                detail: format!("clip {} has dim {}, expected {dim}", r.clip_id, r.dim()),
            });
        }
        Ok(Self {
            source_id,
            dim,
            records: records
                .into_iter()
                .map(|r| (r.clip_id.clone(), r))
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl ExternalEncoder for FileBackedEncoder {
    fn source_id(&self) -> &str {
        &self.source_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, clip_id: &str, _spec: &MelSpectrogram) -> Result<TargetEmbedding> {
        self.records
            .get(clip_id)
            .cloned()
            .ok_or_else(|| Error::Lookup(format!("no embedding for clip `{clip_id}`")))
    }
}

pub fn encode_embeddings(records: &[TargetEmbedding]) -> Result<Vec<u8>> {
    let source = records.first().map(|r| r.source_id.as_str()).unwrap_or("");
    let bad = |s: &str| s.is_empty() || s.contains(['\t', '\n', '\r']);
    if source.contains(['\t', '\n', '\r']) {
        return Err(Error::InvalidArgument(format!(
            "source id {source:?} contains a separator"
        )));
    }
    let mut header = format!(
        "{EMBEDDING_MAGIC}\nsource {source}\ncount {}\n",
        records.len()
    );
    let mut payload = Vec::new();
    let mut seen = BTreeMap::new();
    for r in records {
        if bad(&r.clip_id) {
            return Err(Error::InvalidArgument(format!(
                "clip id {:?} is empty or contains a separator",
                r.clip_id
            )));
        }
        if r.source_id != source {
            return Err(Error::InvalidArgument("records mix source ids".into()));
        }
        if seen.insert(r.clip_id.as_str(), ()).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate clip id {:?}",
                r.clip_id
            )));
        }
        header.push_str(&format!("{}\t{}\t{}\n", r.clip_id, r.dim(), payload.len()));
        for v in &r.vector {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    header.push('\n');
    let mut out = header.into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn write_embeddings(path: impl AsRef<Path>, records: &[TargetEmbedding]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_embeddings(records)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<TargetEmbedding>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes, path)
}

pub fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<Vec<TargetEmbedding>> {
    let corrupt = |detail: String| Error::Corrupt {
        path: PathBuf::from(path),
        detail,
    };
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| corrupt("missing blank line after header".into()))?;
    let header =
        std::str::from_utf8(&bytes[..end]).map_err(|_| corrupt("header is not UTF-8".into()))?;
    let payload = &bytes[end + 2..];
    let mut lines = header.lines();
    if lines.next() != Some(EMBEDDING_MAGIC) {
        return Err(corrupt(format!("missing {EMBEDDING_MAGIC} magic")));
    }
    let source = lines
        .next()
        .and_then(|l| l.strip_prefix("source "))
        .ok_or_else(|| corrupt("missing source line".into()))?
        .to_string();
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("count "))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| corrupt("missing count line".into()))?;
    let mut out = Vec::with_capacity(count);
    let mut expected_offset = 0usize;
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        let parsed = (f.len() == 3)
            .then(|| {
                Some((
                    f[0],
                    f[1].parse::<usize>().ok()?,
                    f[2].parse::<usize>().ok()?,
                ))
            })
            .flatten();
        let (id, dim, offset) =
            parsed.ok_or_else(|| corrupt(format!("bad index record {}", i + 1)))?;
        if offset != expected_offset {
            return Err(corrupt(format!(
                "record {id} offset {offset}, expected {expected_offset}"
            )));
        }
        let stop = offset + dim * 4;
        if stop > payload.len() {
            return Err(corrupt(format!("record {id} runs past the payload")));
        }
        let vector = payload[offset..stop]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push(TargetEmbedding {
            clip_id: id.to_string(),
            source_id: source.clone(),
            vector,
        });
        expected_offset = stop;
    }
    if out.len() != count {
        return Err(corrupt(format!(
            "header says {count} records, found {}",
            out.len()
        )));
    }
    if expected_offset != payload.len() {
        return Err(corrupt(format!(
            "payload has {} bytes, index covers {expected_offset}",
            payload.len()
        )));
    }
    Ok(out)
}
