//! Bit-exact binary containers.
//!
//! Checkpoint layout: magic `PEFTTTS1`, a kind byte (0 = base, 1 = delta),
//! for deltas the 32-byte SHA-256 of the base file, a little-endian u32
//! tensor count, then per tensor: u16 name length + UTF-8 name, dtype code
//! (0 = IEEE-754 binary32 LE, 1 = binary64 LE), rank byte, u32 dims, raw
//! row-major data; finally a u32-length-prefixed UTF-8 JSON config blob.
//!
//! Corpus files reuse the same tensor-table encoding under the magic
//! `PEFTCRP1`, with a JSON sidecar manifest at `<path>.json`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ModelConfig, PeftConfig, Precision};
use crate::error::{Error, Result};
use crate::model::{Model, ModelMeta};
use crate::params::ParamSet;
use crate::peft::{Delta, DeltaMeta};
use crate::synth::{Corpus, CorpusSpeaker, PitchStats, SpeakerLatent, SpeakerRole, Utterance};
use crate::tensor::{Dtype, Mat, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PEFTTTS1";
pub const CORPUS_MAGIC: &[u8; 8] = b"PEFTCRP1";
pub const TENSOR_FILE_MAGIC: &[u8; 8] = b"PEFTTNS1";

const KIND_BASE: u8 = 0;
const KIND_DELTA: u8 = 1;

/// Write a file atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path)
        .map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn sha256_bytes(bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

pub fn sha256_file(path: &Path) -> Result<[u8; 32]> {
    Ok(sha256_bytes(&fs::read(path)?))
}

fn push_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode_tensor_table<T: Scalar>(out: &mut Vec<u8>, params: &ParamSet<T>) {
    push_u32(out, params.len() as u32);
    for (name, entry) in params.iter() {
        let bytes = name.as_bytes();
        push_u16(out, bytes.len() as u16);
        out.extend_from_slice(bytes);
        out.push(T::DTYPE.code());
        out.push(2); // rank
        push_u32(out, entry.mat.rows() as u32);
        push_u32(out, entry.mat.cols() as u32);
        out.extend_from_slice(&entry.mat.le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// A tensor read back before precision dispatch.
pub struct RawTensor {
    pub name: String,
    pub dtype: Dtype,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl RawTensor {
    pub fn typed<T: Scalar>(&self) -> Result<Mat<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "tensor {} has dtype {:?}, expected {:?}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        Ok(Mat::from_le_bytes(self.rows, self.cols, &self.data))
    }
}

fn decode_tensor_table(r: &mut Reader) -> Result<Vec<RawTensor>> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        let dtype = Dtype::from_code(r.u8()?)
            .ok_or_else(|| Error::Format("unknown dtype code".into()))?;
        let rank = r.u8()?;
        if rank != 2 {
            return Err(Error::Format(format!("unsupported tensor rank {rank}")));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = r.take(rows * cols * dtype.size())?.to_vec();
        out.push(RawTensor {
            name,
            dtype,
            rows,
            cols,
            data,
        });
    }
    Ok(out)
}

fn encode_meta_blob(out: &mut Vec<u8>, json: &str) {
    push_u32(out, json.len() as u32);
    out.extend_from_slice(json.as_bytes());
}

fn decode_meta_blob(r: &mut Reader) -> Result<String> {
    let len = r.u32()? as usize;
    String::from_utf8(r.take(len)?.to_vec())
        .map_err(|_| Error::Format("config blob is not UTF-8".into()))
}

/// JSON config blob of a base checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseMeta {
    pub model: ModelConfig,
    pub meta: ModelMeta,
}

/// JSON config blob of a delta checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaFileMeta {
    pub peft: PeftConfig,
    pub delta: DeltaMeta,
}

pub fn save_base<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(KIND_BASE);
    encode_tensor_table(&mut out, &model.params);
    let meta = BaseMeta {
        model: model.cfg.clone(),
        meta: model.meta.clone(),
    };
    encode_meta_blob(&mut out, &serde_json::to_string(&meta)?);
    atomic_write(path, &out)
}

pub fn save_delta<T: Scalar>(path: &Path, delta: &Delta<T>, base_sha: [u8; 32]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(KIND_DELTA);
    out.extend_from_slice(&base_sha);
    encode_tensor_table(&mut out, &delta.tensors);
    let meta = DeltaFileMeta {
        peft: delta.peft.clone(),
        delta: delta.meta.clone(),
    };
    encode_meta_blob(&mut out, &serde_json::to_string(&meta)?);
    atomic_write(path, &out)
}

struct Envelope {
    kind: u8,
    base_sha: Option<[u8; 32]>,
    tensors: Vec<RawTensor>,
    meta: String,
}

fn read_envelope(path: &Path) -> Result<Envelope> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let kind = r.u8()?;
    let base_sha = match kind {
        KIND_BASE => None,
        KIND_DELTA => {
            let mut sha = [0u8; 32];
            sha.copy_from_slice(r.take(32)?);
            Some(sha)
        }
        other => return Err(Error::Format(format!("unknown checkpoint kind {other}"))),
    };
    let tensors = decode_tensor_table(&mut r)?;
    let meta = decode_meta_blob(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after config blob".into()));
    }
    Ok(Envelope {
        kind,
        base_sha,
        tensors,
        meta,
    })
}

/// Precision stored in a base checkpoint, for dispatch before typed loading.
pub fn peek_base_precision(path: &Path) -> Result<Precision> {
    let env = read_envelope(path)?;
    if env.kind != KIND_BASE {
        return Err(Error::Format("not a base checkpoint".into()));
    }
    let meta: BaseMeta = serde_json::from_str(&env.meta)?;
    Ok(meta.model.precision)
}

fn is_buffer_name(name: &str) -> bool {
    name.ends_with(".reference_mel")
}

pub fn load_base<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let env = read_envelope(path)?;
    if env.kind != KIND_BASE {
        return Err(Error::Format("not a base checkpoint".into()));
    }
    let meta: BaseMeta = serde_json::from_str(&env.meta)?;
    meta.model.validate()?;
    let mut params = ParamSet::new();
    for t in &env.tensors {
        let mat = t.typed::<T>()?;
        if is_buffer_name(&t.name) {
            params.insert_buffer(t.name.clone(), mat);
        } else {
            params.insert_param(t.name.clone(), mat);
        }
    }
    Ok(Model {
        cfg: meta.model,
        peft: PeftConfig::default(),
        params,
        meta: meta.meta,
    })
}

pub fn load_delta<T: Scalar>(path: &Path) -> Result<(Delta<T>, [u8; 32])> {
    let env = read_envelope(path)?;
    if env.kind != KIND_DELTA {
        return Err(Error::Format("not a delta checkpoint".into()));
    }
    let base_sha = env.base_sha.expect("delta carries a base hash");
    let meta: DeltaFileMeta = serde_json::from_str(&env.meta)?;
    let mut set = ParamSet::new();
    for t in &env.tensors {
        let mat = t.typed::<T>()?;
        if is_buffer_name(&t.name) {
            set.insert_buffer(t.name.clone(), mat);
        } else {
            set.insert_param(t.name.clone(), mat);
        }
    }
    Ok((
        Delta {
            peft: meta.peft,
            meta: meta.delta,
            tensors: set,
        },
        base_sha,
    ))
}

/// Load a base and delta pair, verify the delta was built on exactly this
/// base file, and compose them.
pub fn load_composed<T: Scalar>(base_path: &Path, delta_path: &Path) -> Result<Model<T>> {
    let base = load_base::<T>(base_path)?;
    let (delta, want_sha) = load_delta::<T>(delta_path)?;
    let got_sha = sha256_file(base_path)?;
    if want_sha != got_sha {
        return Err(Error::IncompatibleDelta(format!(
            "delta was built on a different base (hash {})",
            hex(&want_sha)
        )));
    }
    crate::peft::apply_delta(&base, &delta)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Bare tensor table under its own magic, for synthesis outputs.
pub fn save_tensor_file<T: Scalar>(path: &Path, table: &ParamSet<T>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_FILE_MAGIC);
    encode_tensor_table(&mut out, table);
    atomic_write(path, &out)
}

pub fn load_tensor_file<T: Scalar>(path: &Path) -> Result<ParamSet<T>> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8)? != TENSOR_FILE_MAGIC {
        return Err(Error::Format("bad tensor file magic".into()));
    }
    let tensors = decode_tensor_table(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in tensor file".into()));
    }
    let mut set = ParamSet::new();
    for t in &tensors {
        set.insert_buffer(t.name.clone(), t.typed::<T>()?);
    }
    Ok(set)
}

/// JSON sidecar manifest of a corpus container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub template_seed: u64,
    pub noise_sigma: f64,
    pub precision: Precision,
    pub stats: PitchStats,
    pub speakers: Vec<ManifestSpeaker>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSpeaker {
    pub latent: SpeakerLatent,
    pub role: SpeakerRole,
    pub train: usize,
    pub adapt: usize,
    pub test: usize,
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    std::path::PathBuf::from(os)
}

fn utterance_key(si: usize, split: &str, ui: usize) -> String {
    format!("s{si:03}.{split}{ui:03}")
}

fn insert_utterance<T: Scalar>(
    table: &mut ParamSet<T>,
    key: &str,
    utt: &Utterance<T>,
) {
    let tokens: Vec<T> = utt.tokens.iter().map(|&t| T::from_f64(t as f64)).collect();
    let durs: Vec<T> = utt.durations.iter().map(|&d| T::from_f64(d as f64)).collect();
    table.insert_buffer(format!("{key}.tokens"), Mat::row_vec(&tokens));
    table.insert_buffer(format!("{key}.pitch"), Mat::row_vec(&utt.pitch));
    table.insert_buffer(format!("{key}.durations"), Mat::row_vec(&durs));
    table.insert_buffer(format!("{key}.mel"), utt.mel.clone());
}

pub fn save_corpus<T: Scalar>(path: &Path, corpus: &Corpus<T>) -> Result<()> {
    let mut table = ParamSet::<T>::new();
    let mut speakers = Vec::new();
    for (si, sp) in corpus.speakers.iter().enumerate() {
        for (split, utts) in [("train", &sp.train), ("adapt", &sp.adapt), ("test", &sp.test)] {
            for (ui, utt) in utts.iter().enumerate() {
                insert_utterance(&mut table, &utterance_key(si, split, ui), utt);
            }
        }
        speakers.push(ManifestSpeaker {
            latent: sp.latent.clone(),
            role: sp.role,
            train: sp.train.len(),
            adapt: sp.adapt.len(),
            test: sp.test.len(),
        });
    }
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    encode_tensor_table(&mut out, &table);
    atomic_write(path, &out)?;

    let manifest = CorpusManifest {
        seed: corpus.seed,
        template_seed: corpus.template_seed,
        noise_sigma: corpus.noise_sigma,
        precision: match T::DTYPE {
            Dtype::F32 => Precision::F32,
            Dtype::F64 => Precision::F64,
        },
        stats: corpus.stats,
        speakers,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    atomic_write(&manifest_path(path), json.as_bytes())
}

pub fn load_corpus_manifest(path: &Path) -> Result<CorpusManifest> {
    let json = fs::read_to_string(manifest_path(path))?;
    Ok(serde_json::from_str(&json)?)
}

pub fn load_corpus<T: Scalar>(path: &Path) -> Result<Corpus<T>> {
    let manifest = load_corpus_manifest(path)?;
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8)? != CORPUS_MAGIC {
        return Err(Error::Format("bad corpus magic".into()));
    }
    let tensors = decode_tensor_table(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in corpus container".into()));
    }
    let mut by_name = std::collections::BTreeMap::new();
    for t in tensors {
        by_name.insert(t.name.clone(), t);
    }
    let fetch = |name: &str| -> Result<Mat<T>> {
        by_name
            .get(name)
            .ok_or_else(|| Error::Format(format!("corpus is missing tensor {name}")))?
            .typed::<T>()
    };

    let mut speakers = Vec::new();
    for (si, ms) in manifest.speakers.iter().enumerate() {
        let read_split = |split: &str, count: usize| -> Result<Vec<Utterance<T>>> {
            let mut utts = Vec::with_capacity(count);
            for ui in 0..count {
                let key = utterance_key(si, split, ui);
                let tokens_mat = fetch(&format!("{key}.tokens"))?;
                let tokens: Vec<usize> = tokens_mat
                    .as_slice()
                    .iter()
                    .map(|v| v.as_f64().round() as usize)
                    .collect();
                let pitch = fetch(&format!("{key}.pitch"))?.as_slice().to_vec();
                let durations: Vec<usize> = fetch(&format!("{key}.durations"))?
                    .as_slice()
                    .iter()
                    .map(|v| v.as_f64().round() as usize)
                    .collect();
                let mel = fetch(&format!("{key}.mel"))?;
                if durations.iter().sum::<usize>() != mel.rows() {
                    return Err(Error::Format(format!(
                        "durations of {key} do not sum to the mel frame count"
                    )));
                }
                utts.push(Utterance {
                    tokens,
                    mel,
                    pitch,
                    durations,
                });
            }
            Ok(utts)
        };
        speakers.push(CorpusSpeaker {
            latent: ms.latent.clone(),
            role: ms.role,
            train: read_split("train", ms.train)?,
            adapt: read_split("adapt", ms.adapt)?,
            test: read_split("test", ms.test)?,
        });
    }
    Ok(Corpus {
        seed: manifest.seed,
        template_seed: manifest.template_seed,
        noise_sigma: manifest.noise_sigma,
        speakers,
        stats: manifest.stats,
    })
}
