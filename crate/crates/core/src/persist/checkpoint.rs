//! Container layout (little-endian):
//! magic "LVTCKPT1" | version u32 | stage u8 | config digest [32] | step u64 |
//! tensor count u32 | per tensor: name length u16, name utf-8, rank u8,
//! dims u32*rank, dtype u8, payload.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::lm::Lm;
use crate::persist::Config;
use crate::scalar::{DType, Scalar};
use crate::synth::write_atomic;
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LVTCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Stage {
    Tokenizer = 1,
    Denoiser = 2,
    Lm = 3,
}

impl Stage {
    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Stage::Tokenizer),
            2 => Some(Stage::Denoiser),
            3 => Some(Stage::Lm),
            _ => None,
        }
    }
}

/// A tensor in either precision, so one file can mix `f32` parameters with
/// `f64` running statistics.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Self {
        match S::DTYPE {
            DType::F32 => TensorData::F32(t.cast()),
            DType::F64 => TensorData::F64(t.cast()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    /// The tensor as `S`; the stored dtype must be `S`'s.
    pub fn to_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        if self.dtype() != S::DTYPE {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!(
                    "tensor stored as {:?}, requested {:?}",
                    self.dtype(),
                    S::DTYPE
                ),
            });
        }
        Ok(match self {
            TensorData::F32(t) => t.cast(),
            TensorData::F64(t) => t.cast(),
        })
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(t) => t.data().iter().for_each(|x| x.to_le_bytes_vec(out)),
            TensorData::F64(t) => t.data().iter().for_each(|x| x.to_le_bytes_vec(out)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub digest: [u8; 32],
    pub step: u64,
    pub tensors: Vec<(String, TensorData)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&TensorData> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format {
                what: "checkpoint",
                detail: format!("missing tensor {name}"),
            })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.stage as u8);
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&self.step.to_le_bytes());
        let count =
            u32::try_from(self.tensors.len()).map_err(|_| Error::invalid("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.shape().len())
                .map_err(|_| Error::invalid("tensor rank above 255"))?;
            out.push(rank);
            for &d in t.shape() {
                let d =
                    u32::try_from(d).map_err(|_| Error::invalid("tensor dimension above u32"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.push(t.dtype() as u8);
            t.write_payload(&mut out);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(format_err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(magic),
                std::str::from_utf8(CHECKPOINT_MAGIC).expect("ascii magic")
            )));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err(format!(
                "unsupported version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let tag = r.take(1, "stage")?[0];
        let stage =
            Stage::from_tag(tag).ok_or_else(|| format_err(format!("unknown stage tag {tag}")))?;
        let digest: [u8; 32] = r.take(32, "digest")?.try_into().expect("32 bytes");
        let step = u64::from_le_bytes(r.take(8, "step")?.try_into().expect("8 bytes"));
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::new();
        for i in 0..count {
            let what = format!("tensor {i}");
            let len = u16::from_le_bytes(r.take(2, &what)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len, &what)?)
                .map_err(|_| format_err(format!("{what}: name is not utf-8")))?
                .to_string();
            let rank = r.take(1, &name)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&name)? as usize);
            }
            let tag = r.take(1, &name)?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| format_err(format!("{name}: unknown dtype tag {tag}")))?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| format_err(format!("{name}: shape {shape:?} overflows")))?;
            let nbytes = n
                .checked_mul(dtype.size())
                .ok_or_else(|| format_err(format!("{name}: payload size overflows")))?;
            let payload = r.take(nbytes, &name)?;
            let t = match dtype {
                DType::F32 => TensorData::F32(Tensor::new(
                    shape,
                    payload.chunks_exact(4).map(f32::from_le_slice).collect(),
                )?),
                DType::F64 => TensorData::F64(Tensor::new(
                    shape,
                    payload.chunks_exact(8).map(f64::from_le_slice).collect(),
                )?),
            };
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(format_err(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            stage,
            digest,
            step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    /// Reads `path` and checks the stage and the digest of `config`.
    pub fn load(path: &Path, stage: Stage, config: &Config) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck = Self::decode(&bytes)?;
        if ck.stage != stage {
            return Err(format_err(format!(
                "{} holds a {:?} checkpoint, expected {stage:?}",
                path.display(),
                ck.stage
            )));
        }
        let expected = config.stage_digest(stage);
        if ck.digest != expected {
            return Err(Error::Digest {
                expected: hex(&expected),
                found: hex(&ck.digest),
            });
        }
        Ok(ck)
    }
}

fn format_err(detail: String) -> Error {
    Error::Format {
        what: "checkpoint",
        detail,
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                format_err(format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

fn params<S: Scalar>(named: Vec<(String, Tensor<S>)>) -> Vec<(String, TensorData)> {
    named
        .into_iter()
        .map(|(n, t)| (n, TensorData::from_tensor(&t)))
        .collect()
}

fn typed<S: Scalar>(ck: &Checkpoint) -> Result<Vec<(String, Tensor<S>)>> {
    ck.tensors
        .iter()
        .filter(|(n, _)| !n.starts_with("codebook."))
        .map(|(n, t)| Ok((n.clone(), t.to_tensor()?)))
        .collect()
}

fn f64_vec(values: impl Iterator<Item = f64>) -> TensorData {
    TensorData::F64(Tensor::vector(values.collect()))
}

pub fn save_tokenizer<S: Scalar>(
    path: &Path,
    model: &Tokenizer<S>,
    config: &Config,
    step: u64,
) -> Result<()> {
    let cb = &model.codebook;
    let mut tensors = params(model.store.named_values());
    tensors.push(("codebook.codes".into(), TensorData::from_tensor(&cb.codes)));
    tensors.push((
        "codebook.usage_counts".into(),
        f64_vec(cb.usage_counts.iter().map(|&c| c as f64)),
    ));
    tensors.push((
        "codebook.ema_cluster_size".into(),
        f64_vec(cb.ema_cluster_size.iter().copied()),
    ));
    tensors.push((
        "codebook.ema_embed_sum".into(),
        f64_vec(cb.ema_embed_sum.iter().copied()),
    ));
    tensors.push((
        "codebook.idle_steps".into(),
        f64_vec(cb.idle_steps.iter().map(|&c| c as f64)),
    ));
    tensors.push((
        "codebook.initialized".into(),
        f64_vec(std::iter::once(if cb.initialized { 1.0 } else { 0.0 })),
    ));
    Checkpoint {
        stage: Stage::Tokenizer,
        digest: config.stage_digest(Stage::Tokenizer),
        step,
        tensors,
    }
    .save(path)
}

fn f64_values(ck: &Checkpoint, name: &str, len: usize) -> Result<Vec<f64>> {
    let t = ck.get(name)?.to_tensor::<f64>()?;
    if t.len() != len {
        return Err(format_err(format!(
            "{name} has {} entries, expected {len}",
            t.len()
        )));
    }
    Ok(t.into_data())
}

pub fn load_tokenizer<S: Scalar>(path: &Path, config: &Config) -> Result<(Tokenizer<S>, u64)> {
    let ck = Checkpoint::load(path, Stage::Tokenizer, config)?;
    let mut model =
        Tokenizer::<S>::new(config.tokenizer.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    model.store.load_named(&typed(&ck)?)?;
    let (k, d) = (config.tokenizer.codebook_size, config.tokenizer.dim);
    let codes = ck.get("codebook.codes")?.to_tensor::<S>()?;
    if codes.shape() != [k, d] {
        return Err(format_err(format!(
            "codebook.codes shape {:?}, expected [{k}, {d}]",
            codes.shape()
        )));
    }
    let cb = &mut model.codebook;
    cb.codes = codes;
    cb.usage_counts = f64_values(&ck, "codebook.usage_counts", k)?
        .into_iter()
        .map(|c| c as u64)
        .collect();
    cb.ema_cluster_size = f64_values(&ck, "codebook.ema_cluster_size", k)?;
    cb.ema_embed_sum = f64_values(&ck, "codebook.ema_embed_sum", k * d)?;
    cb.idle_steps = f64_values(&ck, "codebook.idle_steps", k)?
        .into_iter()
        .map(|c| c as usize)
        .collect();
    cb.initialized = f64_values(&ck, "codebook.initialized", 1)?[0] != 0.0;
    Ok((model, ck.step))
}

pub fn save_denoiser<S: Scalar>(
    path: &Path,
    model: &Denoiser<S>,
    config: &Config,
    step: u64,
) -> Result<()> {
    Checkpoint {
        stage: Stage::Denoiser,
        digest: config.stage_digest(Stage::Denoiser),
        step,
        tensors: params(model.store.named_values()),
    }
    .save(path)
}

/// Signal and condition are both the flattened `N×D` grid.
pub fn load_denoiser<S: Scalar>(path: &Path, config: &Config) -> Result<(Denoiser<S>, u64)> {
    let ck = Checkpoint::load(path, Stage::Denoiser, config)?;
    let flat = config.tokenizer.patches() * config.tokenizer.dim;
    let mut model = Denoiser::<S>::new(
        config.denoiser.clone(),
        flat,
        flat,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    model.store.load_named(&typed(&ck)?)?;
    Ok((model, ck.step))
}

pub fn save_lm<S: Scalar>(path: &Path, model: &Lm<S>, config: &Config, step: u64) -> Result<()> {
    Checkpoint {
        stage: Stage::Lm,
        digest: config.stage_digest(Stage::Lm),
        step,
        tensors: params(model.store.named_values()),
    }
    .save(path)
}

pub fn load_lm<S: Scalar>(path: &Path, config: &Config) -> Result<(Lm<S>, u64)> {
    let ck = Checkpoint::load(path, Stage::Lm, config)?;
    let mut model = Lm::<S>::new(
        config.lm.clone(),
        config.vocabulary()?,
        config.tokenizer.dim,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    model.store.load_named(&typed(&ck)?)?;
    Ok((model, ck.step))
}
