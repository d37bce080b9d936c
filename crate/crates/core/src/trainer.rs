//! Optimization loop: batch sampling, forward/backward over all active
//! branches, Adam updates with separate backbone and head learning rates.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::color_ops::{build_color_bank, default_lexicon, TokenSequence};
use crate::data::{identity_batch_sample, uniform_batch_sample, DatasetManifest};
use crate::encoders::Vocab;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{total_loss, LossWeights, Supervision};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub supervision: Supervision,
    pub epochs: usize,
    pub batch_size: usize,
    /// Identities per batch under full supervision.
    pub ids_per_batch: usize,
    /// Defaults to one pass over the records.
    pub steps_per_epoch: Option<usize>,
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub seed: u64,
    pub flip_prob: f64,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Minimum corpus count for a lexicon word to enter the color bank.
    pub bank_min_count: usize,
    /// Train the classifier logit scale along with the other parameters.
    pub learn_scale: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            supervision: Supervision::Full,
            epochs: 100,
            batch_size: 64,
            ids_per_batch: 32,
            steps_per_epoch: None,
            lr_backbone: 1e-4,
            lr_rest: 1e-3,
            seed: 0,
            flip_prob: 0.5,
            checkpoint_every: 0,
            bank_min_count: 1,
            learn_scale: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr_backbone >= 0.0 && self.lr_rest >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip probability must lie in [0, 1]".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        Ok(())
    }

    pub fn lr(&self, name: &str) -> f64 {
        match ParamGroup::of(name) {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Rest => self.lr_rest,
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        name == "head.scale" && !self.learn_scale
    }
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adam {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl Adam {
    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: impl Fn(&str) -> f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(p.shape()));
                self.v.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let m = self.m.get_mut(name).expect("inserted").data_mut();
            let v = self.v.get_mut(name).expect("inserted").data_mut();
            let rate = lr(name);
            for (i, (&gi, pi)) in g.data().iter().zip(p.data_mut()).enumerate() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                *pi -= rate * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub epoch: usize,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    pub losses: BTreeMap<String, f64>,
    pub lr_backbone: f64,
    pub lr_rest: f64,
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    out.flush()?;
    Ok(())
}

/// Vocabulary and color bank derived from the training captions.
pub fn text_resources(captions: &[TokenSequence], bank_min_count: usize) -> Result<(Vocab, crate::color_ops::ColorBank)> {
    let vocab = Vocab::build(captions.iter().flat_map(|c| c.tokens().iter().map(String::as_str)));
    let bank = build_color_bank(captions, &default_lexicon(), bank_min_count)?;
    Ok((vocab, bank))
}

pub struct Trainer<'a> {
    state: TrainState,
    manifest: &'a DatasetManifest,
    captions: Vec<TokenSequence>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, manifest: &'a DatasetManifest) -> Result<Self> {
        config.validate()?;
        if manifest.records.is_empty() {
            return Err(Error::Data("training manifest has no records".into()));
        }
        let captions = manifest.captions()?;
        let (vocab, bank) = text_resources(&captions, config.bank_min_count)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(config.model.clone(), vocab, bank, manifest.num_identities, &mut rng)?;
        let state = TrainState {
            config,
            model,
            adam: Adam::default(),
            epoch: 0,
            step: 0,
            rng,
        };
        Ok(Self {
            state,
            manifest,
            captions,
        })
    }

    pub fn resume(state: TrainState, manifest: &'a DatasetManifest) -> Result<Self> {
        if manifest.num_identities != state.model.num_classes {
            return Err(Error::Data(format!(
                "manifest has {} identities but the checkpoint was trained on {}",
                manifest.num_identities, state.model.num_classes
            )));
        }
        let captions = manifest.captions()?;
        Ok(Self {
            state,
            manifest,
            captions,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn steps_per_epoch(&self) -> usize {
        let cfg = &self.state.config;
        cfg.steps_per_epoch
            .unwrap_or_else(|| self.manifest.records.len().div_ceil(cfg.batch_size))
    }

    fn sample(&mut self) -> Result<Vec<usize>> {
        let cfg = &self.state.config;
        match cfg.supervision {
            Supervision::Full => identity_batch_sample(self.manifest, cfg.batch_size, cfg.ids_per_batch, &mut self.state.rng),
            Supervision::Weak => uniform_batch_sample(self.manifest, cfg.batch_size, &mut self.state.rng),
        }
    }

    /// One optimization step; returns the unweighted loss terms and total.
    pub fn step(&mut self) -> Result<MetricRecord> {
        let batch = self.sample()?;
        let mut images = Vec::with_capacity(batch.len());
        for &i in &batch {
            let img = &self.manifest.images[self.manifest.records[i].image].image;
            let flip = self.state.rng.random::<f64>() < self.state.config.flip_prob;
            images.push(if flip { img.flip_horizontal() } else { img.clone() });
        }
        let captions: Vec<&TokenSequence> = batch.iter().map(|&i| &self.captions[i]).collect();
        let labels: Vec<usize> = batch
            .iter()
            .map(|&i| {
                let r = &self.manifest.records[i];
                match self.state.config.supervision {
                    Supervision::Full => r.identity,
                    Supervision::Weak => r.image,
                }
            })
            .collect();

        let model = &self.state.model;
        let cfg = &self.state.config;
        let mut g = Graph::new();
        let visual = model.forward_visual(&mut g, &images.iter().collect::<Vec<_>>())?;
        let text = model.forward_text(&mut g, &captions)?;
        let breakdown = total_loss(&mut g, model, &visual, &text, &labels, &cfg.loss, cfg.supervision)?;
        let losses = breakdown.values(&g);
        if !losses["total"].is_finite() {
            return Err(Error::Divergence { step: self.state.step });
        }
        let mut grads = g.backward(breakdown.total).params();
        grads.retain(|name, _| !cfg.is_frozen(name));
        if grads.values().any(|t| !t.is_finite()) {
            return Err(Error::Divergence { step: self.state.step });
        }
        let (lr_backbone, lr_rest) = (cfg.lr_backbone, cfg.lr_rest);
        let lr = |name: &str| cfg.lr(name);
        self.state.adam.update(&mut self.state.model.params, &grads, lr);
        let record = MetricRecord {
            step: self.state.step,
            epoch: self.state.epoch,
            losses,
            lr_backbone,
            lr_rest,
        };
        self.state.step += 1;
        Ok(record)
    }

    pub fn run_epoch(&mut self) -> Result<Vec<MetricRecord>> {
        let records = (0..self.steps_per_epoch()).map(|_| self.step()).collect::<Result<Vec<_>>>()?;
        self.state.epoch += 1;
        Ok(records)
    }
}

/// Where [`train`] writes its artifacts; every field is optional.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Metric records are appended here as they are produced.
    pub metrics: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
}

/// Trains for the remaining epochs of `trainer`'s config.
pub fn run(trainer: &mut Trainer<'_>, outputs: &TrainOutputs) -> Result<Vec<MetricRecord>> {
    let mut log = match &outputs.metrics {
        Some(p) => Some(std::io::BufWriter::new(
            fs::OpenOptions::new().create(true).append(true).open(p)?,
        )),
        None => None,
    };
    if let Some(dir) = &outputs.checkpoints {
        fs::create_dir_all(dir)?;
    }
    let mut history = Vec::new();
    while trainer.state.epoch < trainer.state.config.epochs {
        let records = trainer.run_epoch()?;
        if let Some(out) = log.as_mut() {
            for r in &records {
                writeln!(out, "{}", serde_json::to_string(r)?)?;
            }
            out.flush()?;
        }
        history.extend(records);
        let epoch = trainer.state.epoch;
        let every = trainer.state.config.checkpoint_every;
        if let Some(dir) = &outputs.checkpoints {
            if (every > 0 && epoch.is_multiple_of(every)) || epoch == trainer.state.config.epochs {
                checkpoint::save_state(&dir.join(format!("epoch_{epoch:04}.ckpt")), &trainer.state)?;
            }
        }
    }
    Ok(history)
}

/// Builds a fresh trainer and runs every epoch.
pub fn train(config: TrainConfig, manifest: &DatasetManifest, outputs: &TrainOutputs) -> Result<(TrainState, Vec<MetricRecord>)> {
    let mut trainer = Trainer::new(config, manifest)?;
    let history = run(&mut trainer, outputs)?;
    Ok((trainer.into_state(), history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use crate::encoders::EncoderConfig;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
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
            epochs: 1,
            batch_size: 8,
            ids_per_batch: 4,
            steps_per_epoch: Some(2),
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> DatasetManifest {
        synth_generate(&SynthSpec {
            identities: 6,
            images_per_identity: 2,
            captions_per_image: 1,
            ..SynthSpec::default()
        })
        .unwrap()
        .manifest
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]));
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(vec![2], vec![0.5, -3.0]))]);
        let mut adam = Adam::default();
        adam.update(&mut params, &grads, |_| 0.1);
        let w = params.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let data = tiny_data();
        let cfg = TrainConfig {
            lr_backbone: 0.0,
            lr_rest: 0.0,
            ..tiny_config()
        };
        let mut t = Trainer::new(cfg, &data).unwrap();
        let before = t.state().model.params.clone();
        t.run_epoch().unwrap();
        assert_eq!(before, t.state().model.params);
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data();
        let (_, a) = train(tiny_config(), &data, &TrainOutputs::default()).unwrap();
        let (_, b) = train(tiny_config(), &data, &TrainOutputs::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a[0].losses.contains_key("tri.clr"));
    }

    #[test]
    fn groups_partition_parameters() {
        let data = tiny_data();
        let cfg = tiny_config();
        let t = Trainer::new(cfg.clone(), &data).unwrap();
        let (mut backbone, mut rest) = (0, 0);
        for name in t.state().model.params.names() {
            match ParamGroup::of(name) {
                ParamGroup::Backbone => {
                    assert!(name.starts_with("rgb.backbone.") || name.starts_with("grs.backbone."));
                    backbone += 1
                }
                ParamGroup::Rest => rest += 1,
            }
        }
        assert_eq!(backbone + rest, t.state().model.params.len());
        assert!(backbone > 0 && rest > 0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let data = tiny_data();
        for cfg in [
            TrainConfig { epochs: 0, ..tiny_config() },
            TrainConfig { lr_rest: -1.0, ..tiny_config() },
            TrainConfig { flip_prob: 2.0, ..tiny_config() },
        ] {
            assert!(matches!(Trainer::new(cfg, &data), Err(Error::Config(_))));
        }
    }

    #[test]
    fn divergence_is_reported() {
        let data = tiny_data();
        let mut t = Trainer::new(tiny_config(), &data).unwrap();
        t.state.model.params.insert("head.scale", Tensor::scalar(f64::NAN));
        assert!(matches!(t.step(), Err(Error::Divergence { step: 0 })));
    }
}
