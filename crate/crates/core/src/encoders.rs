//! Trainable visual and textual feature extractors.
//!
//! Visual path: a small strided convolution stack produces the pre-pooling
//! feature map; global max pooling or horizontal-strip max pooling is
//! followed by affine projections. Textual path: embedding lookup, a
//! bidirectional GRU whose per-word forward and backward states are averaged,
//! row-wise max pooling, and per-part word attention gates.
//!
//! Feature maps are laid out `[batch, height, width, channels]`.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::color_ops::{RgbImage, TokenSequence, MASK_TOKEN};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of each convolution stage.
    pub backbone_channels: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    /// Word embedding and word representation width `C`.
    pub embed_dim: usize,
    /// Projection width `P`.
    pub proj_dim: usize,
    /// Number of horizontal parts `K`.
    pub parts: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_height: 48,
            input_width: 16,
            backbone_channels: vec![16, 32, 48, 64],
            backbone_strides: vec![2, 2, 2, 1],
            embed_dim: 32,
            proj_dim: 64,
            parts: 6,
        }
    }
}

impl EncoderConfig {
    pub fn feature_size(&self) -> (usize, usize) {
        self.backbone_strides.iter().fold((self.input_height, self.input_width), |(h, w), &s| {
            ((h - 1) / s + 1, (w - 1) / s + 1)
        })
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().expect("at least one stage")
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.is_empty() || self.backbone_channels.len() != self.backbone_strides.len() {
            return Err(Error::Config("backbone channels and strides must be non-empty and equal length".into()));
        }
        if self.backbone_strides.contains(&0) || self.backbone_channels.contains(&0) {
            return Err(Error::Config("backbone strides and channels must be positive".into()));
        }
        if self.embed_dim == 0 || self.proj_dim == 0 || self.parts == 0 {
            return Err(Error::Config("embed_dim, proj_dim and parts must be positive".into()));
        }
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::Config("input resolution must be positive".into()));
        }
        let (h, _) = self.feature_size();
        if h % self.parts != 0 {
            return Err(Error::Partition { height: h, parts: self.parts });
        }
        Ok(())
    }
}

/// Token vocabulary with reserved padding, unknown and mask entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(vocab: Vocab) -> Self {
        vocab.tokens
    }
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const MASK: usize = 2;

    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string(), MASK_TOKEN.to_string()];
        let mut extra: Vec<String> = words.into_iter().map(str::to_lowercase).collect();
        extra.sort();
        extra.dedup();
        tokens.extend(extra.into_iter().filter(|w| w != PAD_TOKEN && w != UNK_TOKEN && w != MASK_TOKEN));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        if token == MASK_TOKEN {
            return Self::MASK;
        }
        self.index.get(&token.to_lowercase()).copied().unwrap_or(Self::UNK)
    }

    pub fn encode(&self, tokens: &TokenSequence) -> Vec<usize> {
        tokens.tokens().iter().map(|t| self.id(t)).collect()
    }

    /// Hex SHA-256 over the newline-joined token list.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

}

/// Padded batch of token id sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<Vec<usize>>) -> Result<Self> {
        if ids.is_empty() || ids.iter().any(Vec::is_empty) {
            return Err(Error::EmptySequence);
        }
        let lengths: Vec<usize> = ids.iter().map(Vec::len).collect();
        let max_len = *lengths.iter().max().expect("non-empty");
        Ok(Self { ids, lengths, max_len })
    }

    pub fn from_sequences(vocab: &Vocab, seqs: &[&TokenSequence]) -> Result<Self> {
        Self::new(seqs.iter().map(|s| vocab.encode(s)).collect())
    }

    pub fn batch_size(&self) -> usize {
        self.ids.len()
    }
}

/// Word representation matrix in graph form: `batch * seg` rows of width
/// `C`, row `b * seg + i` holding word `i` of sequence `b`. Rows past a
/// sequence's length are padding and never pooled.
#[derive(Debug, Clone)]
pub struct WordReps {
    pub matrix: Var,
    pub seg: usize,
    pub lengths: Vec<usize>,
}

/// One image's pre-pooling feature map, `[height, width, channels]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap(pub Tensor);

impl FeatureMap {
    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.0.data()[(row * self.width() + col) * self.channels() + channel]
    }
}

/// Splits a batched `[b, h, w, c]` tensor into per-image maps.
pub fn split_feature_maps(batch: &Tensor) -> Vec<FeatureMap> {
    let shape = batch.shape();
    let per = shape[1] * shape[2] * shape[3];
    batch
        .data()
        .chunks_exact(per)
        .map(|chunk| FeatureMap(Tensor::new(shape[1..].to_vec(), chunk.to_vec())))
        .collect()
}

/// Stacks images into a `[b, h, w, 3]` tensor scaled to `[-1, 1]`.
pub fn images_to_tensor(images: &[&RgbImage], cfg: &EncoderConfig) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * cfg.input_height * cfg.input_width * 3);
    for img in images {
        if img.height() != cfg.input_height || img.width() != cfg.input_width {
            return Err(Error::Shape(format!(
                "image is {}x{}, encoder expects {}x{}",
                img.height(),
                img.width(),
                cfg.input_height,
                cfg.input_width
            )));
        }
        data.extend(img.pixels().iter().map(|v| v / 127.5 - 1.0));
    }
    Ok(Tensor::new(vec![images.len(), cfg.input_height, cfg.input_width, 3], data))
}

pub fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Var {
    let w = g.param(store, &format!("{name}.weight"));
    let b = g.param(store, &format!("{name}.bias"));
    let y = g.matmul(x, w);
    g.add_bias(y, b)
}

pub fn init_backbone(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut impl Rng) {
    let mut cin = 3;
    for (i, &cout) in cfg.backbone_channels.iter().enumerate() {
        let std = (2.0 / (9 * cin) as f64).sqrt();
        store.normal(&format!("{prefix}.conv{i}.weight"), &[cout, 9 * cin], std, rng);
        store.zeros(&format!("{prefix}.conv{i}.bias"), &[cout]);
        cin = cout;
    }
}

/// Convolution stack; ReLU between stages, the last stage is affine.
pub fn visual_backbone(g: &mut Graph, store: &ParamStore, prefix: &str, images: Var, cfg: &EncoderConfig) -> Result<Var> {
    let shape = g.value(images).shape().to_vec();
    if shape.len() != 4 || shape[1] != cfg.input_height || shape[2] != cfg.input_width || shape[3] != 3 {
        return Err(Error::Shape(format!(
            "backbone input {:?} does not match {}x{}x3",
            shape, cfg.input_height, cfg.input_width
        )));
    }
    let stages = cfg.backbone_channels.len();
    let mut x = images;
    for (i, &stride) in cfg.backbone_strides.iter().enumerate() {
        let w = g.param(store, &format!("{prefix}.conv{i}.weight"));
        let b = g.param(store, &format!("{prefix}.conv{i}.bias"));
        x = g.conv2d(x, w, b, stride);
        if i + 1 < stages {
            x = g.relu(x);
        }
    }
    Ok(x)
}

/// Global max pooling over all spatial positions, then an affine head.
pub fn global_pool_project(g: &mut Graph, store: &ParamStore, map: Var, head: &str) -> Var {
    let h = g.value(map).shape()[1];
    let pooled = g.spatial_max(map, (0, h));
    linear(g, store, head, pooled)
}

/// Max pooling within `parts` equal horizontal strips, each strip through
/// its own head `{head_prefix}{k}`. Ordered top to bottom.
pub fn local_partition_project(
    g: &mut Graph,
    store: &ParamStore,
    map: Var,
    parts: usize,
    head_prefix: &str,
) -> Result<Vec<Var>> {
    let h = g.value(map).shape()[1];
    if parts == 0 || !h.is_multiple_of(parts) {
        return Err(Error::Partition { height: h, parts });
    }
    let strip = h / parts;
    Ok((0..parts)
        .map(|k| {
            let pooled = g.spatial_max(map, (k * strip, (k + 1) * strip));
            linear(g, store, &format!("{head_prefix}{k}"), pooled)
        })
        .collect())
}

pub fn init_text_encoder(store: &mut ParamStore, prefix: &str, vocab_size: usize, cfg: &EncoderConfig, rng: &mut impl Rng) {
    let c = cfg.embed_dim;
    store.normal(&format!("{prefix}.embedding"), &[vocab_size, c], 1.0, rng);
    let std = (1.0 / c as f64).sqrt();
    for dir in ["fwd", "bwd"] {
        for gate in ["r", "z", "n"] {
            store.normal(&format!("{prefix}.gru_{dir}.w_i{gate}"), &[c, c], std, rng);
            store.normal(&format!("{prefix}.gru_{dir}.w_h{gate}"), &[c, c], std, rng);
            store.zeros(&format!("{prefix}.gru_{dir}.b_i{gate}"), &[c]);
            store.zeros(&format!("{prefix}.gru_{dir}.b_h{gate}"), &[c]);
        }
    }
}

/// One GRU update: `r`, `z` gates, candidate `n = tanh(x W_in + b_in + r * (h W_hn + b_hn))`,
/// `h' = (1 - z) * n + z * h`.
pub fn gru_cell(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, h: Var) -> Var {
    let gate_pre = |g: &mut Graph, gate: &str| {
        let wi = g.param(store, &format!("{prefix}.w_i{gate}"));
        let bi = g.param(store, &format!("{prefix}.b_i{gate}"));
        let wh = g.param(store, &format!("{prefix}.w_h{gate}"));
        let bh = g.param(store, &format!("{prefix}.b_h{gate}"));
        let xi = g.matmul(x, wi);
        let xi = g.add_bias(xi, bi);
        let hh = g.matmul(h, wh);
        let hh = g.add_bias(hh, bh);
        (xi, hh)
    };
    let (xr, hr) = gate_pre(g, "r");
    let (xz, hz) = gate_pre(g, "z");
    let (xn, hn) = gate_pre(g, "n");
    let r = g.add(xr, hr);
    let r = g.sigmoid(r);
    let z = g.add(xz, hz);
    let z = g.sigmoid(z);
    let rn = g.mul(r, hn);
    let n = g.add(xn, rn);
    let n = g.tanh(n);
    // h' = n + z * (h - n)
    let diff = g.sub(h, n);
    let zd = g.mul(z, diff);
    g.add(n, zd)
}

fn run_gru(g: &mut Graph, store: &ParamStore, prefix: &str, embedding: Var, batch: &TokenBatch, reverse: bool) -> Vec<Var> {
    let b = batch.batch_size();
    let c = g.value(embedding).shape()[1];
    let mut h = g.constant(Tensor::zeros(&[b, c]));
    let mut states = Vec::with_capacity(batch.max_len);
    for t in 0..batch.max_len {
        let index: Vec<Option<usize>> = batch
            .ids
            .iter()
            .map(|ids| {
                let len = ids.len();
                (t < len).then(|| if reverse { ids[len - 1 - t] } else { ids[t] })
            })
            .collect();
        let mask: Vec<f64> = batch.lengths.iter().map(|&len| if t < len { 1.0 } else { 0.0 }).collect();
        let x = g.gather(embedding, index);
        let h_new = gru_cell(g, store, prefix, x, h);
        h = g.row_blend(h_new, h, mask);
        states.push(h);
    }
    states
}

/// Word representations: the forward and backward GRU states at each word,
/// averaged.
pub fn text_word_reps(g: &mut Graph, store: &ParamStore, prefix: &str, batch: &TokenBatch) -> WordReps {
    let embedding = g.param(store, &format!("{prefix}.embedding"));
    let fwd = run_gru(g, store, &format!("{prefix}.gru_fwd"), embedding, batch, false);
    let bwd = run_gru(g, store, &format!("{prefix}.gru_bwd"), embedding, batch, true);
    let seg = batch.max_len;
    let mut fwd_index = Vec::with_capacity(batch.batch_size() * seg);
    let mut bwd_index = Vec::with_capacity(batch.batch_size() * seg);
    for (b, &len) in batch.lengths.iter().enumerate() {
        for i in 0..seg {
            fwd_index.push((i < len).then_some((i, b)));
            bwd_index.push((i < len).then(|| (len - 1 - i, b)));
        }
    }
    let ef = g.gather_steps(fwd, fwd_index);
    let eb = g.gather_steps(bwd, bwd_index);
    let sum = g.add(ef, eb);
    let matrix = g.scale(sum, 0.5);
    WordReps {
        matrix,
        seg,
        lengths: batch.lengths.clone(),
    }
}

/// Row-wise max pooling over the words, then an affine head.
pub fn text_global(g: &mut Graph, store: &ParamStore, reps: &WordReps, head: &str) -> Var {
    let pooled = g.segment_max(reps.matrix, reps.seg, &reps.lengths);
    linear(g, store, head, pooled)
}

/// Word attention: gate `s_i^k = sigmoid(w_k . e_i)` per word and part,
/// scale each word by its gate, then max pooling and the part head
/// `{head_prefix}{k}`. Returns the part vectors and the `[rows, K]` gates.
pub fn word_attention_locals(
    g: &mut Graph,
    store: &ParamStore,
    reps: &WordReps,
    attention: &str,
    head_prefix: &str,
) -> (Vec<Var>, Var) {
    let w = g.param(store, attention);
    let parts = g.value(w).shape()[0];
    let logits = g.matmul_nt(reps.matrix, w);
    let gates = g.sigmoid(logits);
    let locals = (0..parts)
        .map(|k| {
            let scaled = g.scale_rows_by_col(reps.matrix, gates, k);
            let pooled = g.segment_max(scaled, reps.seg, &reps.lengths);
            linear(g, store, &format!("{head_prefix}{k}"), pooled)
        })
        .collect();
    (locals, gates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> EncoderConfig {
        EncoderConfig {
            input_height: 48,
            input_width: 16,
            backbone_channels: vec![4, 4, 4, 6],
            backbone_strides: vec![2, 2, 2, 1],
            embed_dim: 8,
            proj_dim: 8,
            parts: 2,
        }
    }

    fn map_tensor(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Tensor::new(vec![1, h, w, c], data)
    }

    fn identity_head(store: &mut ParamStore, name: &str, dim: usize) {
        let mut w = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = 1.0;
        }
        store.insert(format!("{name}.weight"), w);
        store.zeros(&format!("{name}.bias"), &[dim]);
    }

    #[test]
    fn backbone_output_size_is_stride_eight() {
        let cfg = toy_cfg();
        assert_eq!(cfg.feature_size(), (6, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_backbone(&mut store, "v", &cfg, &mut rng);
        let img = RgbImage::filled(48, 16, [10.0, 200.0, 30.0]);
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(&[&img], &cfg).unwrap());
        let m = visual_backbone(&mut g, &store, "v", x, &cfg).unwrap();
        assert_eq!(g.value(m).shape(), &[1, 6, 2, 6]);

        let mut g2 = Graph::new();
        let x2 = g2.constant(images_to_tensor(&[&img], &cfg).unwrap());
        let m2 = visual_backbone(&mut g2, &store, "v", x2, &cfg).unwrap();
        assert_eq!(g.value(m), g2.value(m2));
    }

    #[test]
    fn backbone_zero_final_layer_gives_bias_map() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        init_backbone(&mut store, "v", &cfg, &mut rng);
        store.zeros("v.conv3.weight", &[6, 36]);
        store.insert("v.conv3.bias", Tensor::new(vec![6], vec![0.5, -1.0, 2.0, 0.0, 3.0, 4.0]));
        let img = RgbImage::filled(48, 16, [0.0; 3]);
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(&[&img], &cfg).unwrap());
        let m = visual_backbone(&mut g, &store, "v", x, &cfg).unwrap();
        for px in g.value(m).data().chunks(6) {
            assert_eq!(px, &[0.5, -1.0, 2.0, 0.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn backbone_rejects_wrong_resolution() {
        let cfg = toy_cfg();
        let mut store = ParamStore::new();
        init_backbone(&mut store, "v", &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let img = RgbImage::filled(40, 16, [0.0; 3]);
        assert!(images_to_tensor(&[&img], &cfg).is_err());
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 40, 16, 3]));
        assert!(matches!(visual_backbone(&mut g, &store, "v", x, &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn global_pool_takes_channel_max() {
        // channel 0 grid [[1,5],[3,2]], channel 1 grid [[0,1],[3,2]]
        let ch0 = [[1.0, 5.0], [3.0, 2.0]];
        let ch1 = [[0.0, 1.0], [3.0, 2.0]];
        let t = map_tensor(2, 2, 2, |y, x, c| if c == 0 { ch0[y][x] } else { ch1[y][x] });
        let mut store = ParamStore::new();
        identity_head(&mut store, "head", 2);
        let mut g = Graph::new();
        let m = g.constant(t);
        let out = global_pool_project(&mut g, &store, m, "head");
        assert_eq!(g.value(out).data(), &[5.0, 3.0]);
    }

    #[test]
    fn global_pool_of_constant_and_single_position() {
        let mut store = ParamStore::new();
        identity_head(&mut store, "head", 3);
        let mut g = Graph::new();
        let m = g.constant(map_tensor(4, 2, 3, |_, _, _| 7.0));
        let out = global_pool_project(&mut g, &store, m, "head");
        assert_eq!(g.value(out).data(), &[7.0, 7.0, 7.0]);
        let single = g.constant(map_tensor(1, 1, 3, |_, _, c| c as f64 - 1.0));
        let out = global_pool_project(&mut g, &store, single, "head");
        assert_eq!(g.value(out).data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn local_partition_strips() {
        let mut store = ParamStore::new();
        for k in 0..6 {
            identity_head(&mut store, &format!("part{k}"), 1);
        }
        let mut g = Graph::new();
        let m = g.constant(map_tensor(24, 2, 1, |y, _, _| y as f64));
        let parts = local_partition_project(&mut g, &store, m, 6, "part").unwrap();
        let maxima: Vec<f64> = parts.iter().map(|p| g.value(*p).item()).collect();
        // strips of height 4: rows 0-3, 4-7, ...
        assert_eq!(maxima, vec![3.0, 7.0, 11.0, 15.0, 19.0, 23.0]);

        let c = g.constant(map_tensor(24, 2, 1, |_, _, _| 2.0));
        let parts = local_partition_project(&mut g, &store, c, 6, "part").unwrap();
        assert!(parts.iter().all(|p| g.value(*p).item() == 2.0));

        let bad = g.constant(map_tensor(23, 2, 1, |_, _, _| 0.0));
        assert!(matches!(
            local_partition_project(&mut g, &store, bad, 6, "part"),
            Err(Error::Partition { height: 23, parts: 6 })
        ));
    }

    #[test]
    fn strip_pooling_ignores_column_order() {
        let mut store = ParamStore::new();
        identity_head(&mut store, "part0", 2);
        identity_head(&mut store, "part1", 2);
        let f = |y: usize, x: usize, c: usize| ((y * 7 + x * 3 + c * 5) % 11) as f64;
        let mut g = Graph::new();
        let a = g.constant(map_tensor(4, 3, 2, f));
        let b = g.constant(map_tensor(4, 3, 2, |y, x, c| f(y, 2 - x, c)));
        let pa = local_partition_project(&mut g, &store, a, 2, "part").unwrap();
        let pb = local_partition_project(&mut g, &store, b, 2, "part").unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(g.value(*x), g.value(*y));
        }
    }

    fn text_store(c: usize, vocab: usize, seed: u64) -> ParamStore {
        let cfg = EncoderConfig { embed_dim: c, ..toy_cfg() };
        let mut store = ParamStore::new();
        init_text_encoder(&mut store, "text", vocab, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        store
    }

    #[test]
    fn word_reps_have_one_row_per_token() {
        let store = text_store(8, 10, 3);
        let batch = TokenBatch::new(vec![vec![4], vec![5, 6, 7]]).unwrap();
        let mut g = Graph::new();
        let reps = text_word_reps(&mut g, &store, "text", &batch);
        assert_eq!(reps.seg, 3);
        assert_eq!(g.value(reps.matrix).shape(), &[6, 8]);
        // padding rows of the short sequence stay zero
        assert!(g.value(reps.matrix).row(1).iter().all(|&v| v == 0.0));
        assert!(g.value(reps.matrix).row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padding_does_not_change_word_reps() {
        let store = text_store(8, 10, 4);
        let mut g = Graph::new();
        let alone = text_word_reps(&mut g, &store, "text", &TokenBatch::new(vec![vec![3, 4]]).unwrap());
        let padded = text_word_reps(&mut g, &store, "text", &TokenBatch::new(vec![vec![3, 4], vec![5, 6, 7, 8]]).unwrap());
        let a = g.value(alone.matrix).clone();
        let p = g.value(padded.matrix);
        for i in 0..2 {
            for (x, y) in a.row(i).iter().zip(p.row(i)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Hand-unrolled GRU for the zero recurrent weight case.
    #[test]
    fn zero_recurrent_weights_hand_trace() {
        let c = 2;
        let mut store = text_store(c, 4, 5);
        store.insert("text.embedding", Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0], vec![0.5, -1.0]]));
        let wi = Tensor::from_rows(&[vec![1.0, 0.5], vec![-0.5, 2.0]]);
        for dir in ["fwd", "bwd"] {
            for gate in ["r", "z", "n"] {
                store.insert(format!("text.gru_{dir}.w_i{gate}"), wi.clone());
                store.zeros(&format!("text.gru_{dir}.w_h{gate}"), &[c, c]);
            }
        }
        let mut g = Graph::new();
        let reps = text_word_reps(&mut g, &store, "text", &TokenBatch::new(vec![vec![3, 3]]).unwrap());
        // x W = (0.5 + 0.5, 0.25 - 2) = (1.0, -1.75)
        let a = [1.0, -1.75];
        let z = [sigmoid(a[0]), sigmoid(a[1])];
        let n = [a[0].tanh(), a[1].tanh()];
        let h1: Vec<f64> = (0..2).map(|j| (1.0 - z[j]) * n[j]).collect();
        let h2: Vec<f64> = (0..2).map(|j| (1.0 - z[j]) * n[j] + z[j] * h1[j]).collect();
        // word 0: forward h1, backward h2; word 1: forward h2, backward h1
        let e0: Vec<f64> = (0..2).map(|j| 0.5 * (h1[j] + h2[j])).collect();
        let m = g.value(reps.matrix);
        for j in 0..2 {
            assert!((m.row(0)[j] - e0[j]).abs() < 1e-12);
            assert!((m.row(1)[j] - e0[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_directions_reverse_rows() {
        let mut store = text_store(4, 8, 6);
        for name in ["w_ir", "w_iz", "w_in", "w_hr", "w_hz", "w_hn", "b_ir", "b_iz", "b_in", "b_hr", "b_hz", "b_hn"] {
            let v = store.get(&format!("text.gru_fwd.{name}")).unwrap().clone();
            store.insert(format!("text.gru_bwd.{name}"), v);
        }
        let mut g = Graph::new();
        let a = text_word_reps(&mut g, &store, "text", &TokenBatch::new(vec![vec![3, 5, 7]]).unwrap());
        let b = text_word_reps(&mut g, &store, "text", &TokenBatch::new(vec![vec![7, 5, 3]]).unwrap());
        let (ma, mb) = (g.value(a.matrix).clone(), g.value(b.matrix).clone());
        for i in 0..3 {
            for (x, y) in ma.row(i).iter().zip(mb.row(2 - i)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_word_sequence() {
        let store = text_store(4, 8, 7);
        let mut g = Graph::new();
        let reps = text_word_reps(&mut g, &store, "text", &TokenBatch::new(vec![vec![4]]).unwrap());
        assert_eq!(g.value(reps.matrix).shape(), &[1, 4]);
        assert!(TokenBatch::new(vec![vec![]]).is_err());
    }

    fn reps_from_rows(g: &mut Graph, rows: &[Vec<f64>]) -> WordReps {
        let m = g.constant(Tensor::from_rows(rows));
        WordReps {
            matrix: m,
            seg: rows.len(),
            lengths: vec![rows.len()],
        }
    }

    #[test]
    fn text_global_pools_rows() {
        let mut store = ParamStore::new();
        identity_head(&mut store, "head", 2);
        let mut g = Graph::new();
        let r = reps_from_rows(&mut g, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let out = text_global(&mut g, &store, &r, "head");
        assert_eq!(g.value(out).data(), &[1.0, 1.0]);
        let one = reps_from_rows(&mut g, &[vec![0.3, -0.2]]);
        let out1 = text_global(&mut g, &store, &one, "head");
        assert_eq!(g.value(out1).data(), &[0.3, -0.2]);
        let dup = reps_from_rows(&mut g, &[vec![0.3, -0.2], vec![0.3, -0.2]]);
        let out2 = text_global(&mut g, &store, &dup, "head");
        assert_eq!(g.value(out1), g.value(out2));
    }

    #[test]
    fn word_attention_gates() {
        let mut store = ParamStore::new();
        identity_head(&mut store, "part0", 2);
        store.insert("attn", Tensor::from_rows(&[vec![1.0, 1.0]]));
        let mut g = Graph::new();
        let r = reps_from_rows(&mut g, &[vec![2.0, -1.0]]);
        let (locals, gates) = word_attention_locals(&mut g, &store, &r, "attn", "part");
        let s = sigmoid(1.0);
        assert!((g.value(gates).item() - 0.7310585786300049).abs() < 1e-12);
        let out = g.value(locals[0]).data();
        assert!((out[0] - 2.0 * s).abs() < 1e-12 && (out[0] - 1.4621171573).abs() < 1e-9);
        assert!((out[1] + s).abs() < 1e-12);

        store.zeros("attn", &[1, 2]);
        let mut g = Graph::new();
        let r = reps_from_rows(&mut g, &[vec![2.0, -1.0], vec![4.0, 3.0]]);
        let (locals, gates) = word_attention_locals(&mut g, &store, &r, "attn", "part");
        assert!(g.value(gates).data().iter().all(|&v| v == 0.5));
        assert_eq!(g.value(locals[0]).data(), &[2.0, 1.5]);

        store.insert("attn", Tensor::from_rows(&[vec![1e3, 1e3]]));
        let mut g = Graph::new();
        let r = reps_from_rows(&mut g, &[vec![2.0, 1.0]]);
        let (locals, _) = word_attention_locals(&mut g, &store, &r, "attn", "part");
        assert!((g.value(locals[0]).data()[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn vocab_lookup() {
        let vocab = Vocab::build(["red", "shirt", "Red"]);
        assert_eq!(vocab.len(), 5);
        assert_eq!(vocab.id("[CLR]"), Vocab::MASK);
        assert_eq!(vocab.id("nonsense"), Vocab::UNK);
        assert_eq!(vocab.id("RED"), vocab.id("red"));
        assert_eq!(vocab.hash().len(), 64);
        assert_ne!(vocab.hash(), Vocab::build(["blue"]).hash());
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig { parts: 4, ..EncoderConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Partition { height: 6, parts: 4 })));
    }
}
