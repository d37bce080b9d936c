//! Binary checkpoint archive.
//!
//! Layout: the 8-byte magic `CAIBCCKP`, a little-endian `u64` header
//! length, a JSON header, then every tensor's values as little-endian `f64`
//! in header order. The header carries the format tag, a metadata record,
//! the model configuration, vocabulary, color bank, tensor names and shapes
//! and, for training checkpoints, the optimizer step and random stream
//! position. Optimizer moments are stored as tensors under `optim.m/` and
//! `optim.v/`.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::color_ops::ColorBank;
use crate::encoders::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::{Adam, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"CAIBCCKP";
pub const CHECKPOINT_FORMAT: &str = "caibc-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub parts: usize,
    pub vocab_hash: String,
    pub input_height: usize,
    pub input_width: usize,
}

impl Metadata {
    pub fn of(model: &Model) -> Self {
        Self::of_parts(&model.config, &model.vocab)
    }

    fn of_parts(config: &ModelConfig, vocab: &Vocab) -> Self {
        let enc = &config.encoder;
        Self {
            embed_dim: enc.embed_dim,
            proj_dim: enc.proj_dim,
            parts: enc.parts,
            vocab_hash: vocab.hash(),
            input_height: enc.input_height,
            input_width: enc.input_width,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    /// `u128` as a decimal string.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct TrainHeader {
    config: TrainConfig,
    epoch: usize,
    step: usize,
    adam_t: u64,
    rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    meta: Metadata,
    model: ModelConfig,
    num_classes: usize,
    vocab: Vocab,
    bank: ColorBank,
    tensors: Vec<TensorEntry>,
    train: Option<TrainHeader>,
}

fn write_archive(path: &Path, header: &Header, tensors: &[&Tensor]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let json = serde_json::to_vec(header)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + tensors.iter().map(|t| t.len() * 8).sum::<usize>());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_archive(path: &Path) -> Result<(Header, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::parse(path, "not a checkpoint archive"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| Error::parse(path, "truncated header"))?;
    let format: serde_json::Value = serde_json::from_slice(json)?;
    let found = format.get("format").and_then(|f| f.as_str()).unwrap_or("");
    if found != CHECKPOINT_FORMAT {
        return Err(Error::Version {
            expected: CHECKPOINT_FORMAT.into(),
            found: found.into(),
        });
    }
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::parse(path, e))?;
    let mut pos = 16 + len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(pos..pos + 8 * n)
            .ok_or_else(|| Error::parse(path, format!("truncated data for {}", entry.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)));
        pos += 8 * n;
    }
    if pos != bytes.len() {
        return Err(Error::parse(path, "trailing bytes after tensor data"));
    }
    if header.meta != Metadata::of_parts(&header.model, &header.vocab) {
        return Err(Error::parse(path, "metadata record does not match the stored model"));
    }
    Ok((header, tensors))
}

fn header_for(model: &Model, names: Vec<(String, Vec<usize>)>, train: Option<TrainHeader>) -> Header {
    Header {
        format: CHECKPOINT_FORMAT.into(),
        meta: Metadata::of(model),
        model: model.config.clone(),
        num_classes: model.num_classes,
        vocab: model.vocab.clone(),
        bank: model.bank.clone(),
        tensors: names.into_iter().map(|(name, shape)| TensorEntry { name, shape }).collect(),
        train,
    }
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let names = model.params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
    let tensors: Vec<&Tensor> = model.params.iter().map(|(_, t)| t).collect();
    write_archive(path, &header_for(model, names, None), &tensors)
}

fn split_tensors(tensors: Vec<(String, Tensor)>) -> (ParamStore, ParamStore, ParamStore) {
    let (mut params, mut m, mut v) = (ParamStore::new(), ParamStore::new(), ParamStore::new());
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix("optim.m/") {
            m.insert(rest, t);
        } else if let Some(rest) = name.strip_prefix("optim.v/") {
            v.insert(rest, t);
        } else {
            params.insert(name, t);
        }
    }
    (params, m, v)
}

fn model_from(header: &Header, params: ParamStore) -> Result<Model> {
    header.model.validate()?;
    Ok(Model {
        config: header.model.clone(),
        vocab: header.vocab.clone(),
        bank: header.bank.clone(),
        num_classes: header.num_classes,
        params,
    })
}

/// Loads the model from any checkpoint, ignoring training state.
pub fn load_model(path: &Path) -> Result<Model> {
    let (header, tensors) = read_archive(path)?;
    let (params, _, _) = split_tensors(tensors);
    model_from(&header, params)
}

pub fn save_state(path: &Path, state: &TrainState) -> Result<()> {
    let model = &state.model;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (prefix, store) in [("", &model.params), ("optim.m/", &state.adam.m), ("optim.v/", &state.adam.v)] {
        for (n, t) in store.iter() {
            names.push((format!("{prefix}{n}"), t.shape().to_vec()));
            tensors.push(t);
        }
    }
    let train = TrainHeader {
        config: state.config.clone(),
        epoch: state.epoch,
        step: state.step,
        adam_t: state.adam.t,
        rng: RngState {
            seed: state.rng.get_seed().to_vec(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
    };
    write_archive(path, &header_for(model, names, Some(train)), &tensors)
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    let (header, tensors) = read_archive(path)?;
    let train = header
        .train
        .as_ref()
        .ok_or_else(|| Error::parse(path, "checkpoint holds no training state"))?;
    let seed: [u8; 32] = train
        .rng
        .seed
        .clone()
        .try_into()
        .map_err(|_| Error::parse(path, "random seed must be 32 bytes"))?;
    let word_pos: u128 = train
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::parse(path, "bad random stream position"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(train.rng.stream);
    rng.set_word_pos(word_pos);
    let (params, m, v) = split_tensors(tensors);
    Ok(TrainState {
        config: train.config.clone(),
        model: model_from(&header, params)?,
        adam: Adam { m, v, t: train.adam_t },
        epoch: train.epoch,
        step: train.step,
        rng,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use crate::encoders::EncoderConfig;
    use crate::trainer::Trainer;

    fn setup() -> (TrainConfig, crate::data::DatasetManifest) {
        let cfg = TrainConfig {
            model: ModelConfig {
                encoder: EncoderConfig {
                    backbone_channels: vec![4, 4, 4, 8],
                    embed_dim: 8,
                    proj_dim: 8,
                    parts: 2,
                    ..EncoderConfig::default()
                },
                ..ModelConfig::default()
            },
            batch_size: 8,
            ids_per_batch: 4,
            steps_per_epoch: Some(1),
            ..TrainConfig::default()
        };
        let data = synth_generate(&SynthSpec {
            identities: 5,
            images_per_identity: 2,
            captions_per_image: 1,
            ..SynthSpec::default()
        })
        .unwrap()
        .manifest;
        (cfg, data)
    }

    #[test]
    fn resume_continues_bit_identically() {
        let (cfg, data) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut t = Trainer::new(cfg, &data).unwrap();
        t.step().unwrap();
        save_state(&path, t.state()).unwrap();
        let loaded = load_state(&path).unwrap();
        assert_eq!(&loaded, t.state());

        let expected = t.step().unwrap();
        let mut resumed = Trainer::resume(loaded, &data).unwrap();
        assert_eq!(resumed.step().unwrap(), expected);
        assert_eq!(resumed.state(), t.state());
    }

    #[test]
    fn model_roundtrip_and_format_errors() {
        let (cfg, data) = setup();
        let t = Trainer::new(cfg, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&path, &t.state().model).unwrap();
        assert_eq!(load_model(&path).unwrap(), t.state().model);
        assert!(load_state(&path).is_err());

        let mut bytes = fs::read(&path).unwrap();
        let at = bytes.windows(CHECKPOINT_FORMAT.len()).position(|w| w == CHECKPOINT_FORMAT.as_bytes()).unwrap();
        bytes[at + CHECKPOINT_FORMAT.len() - 1] = b'7';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Version { .. })));

        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Parse { .. })));
    }
}
