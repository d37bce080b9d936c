//! Central finite-difference checks of the analytic gradients.
//!
//! A check evaluates a scalar-valued graph function, back-propagates, then
//! perturbs sampled parameter entries by `±step` and compares
//! `(f(x + h) - f(x - h)) / 2h` with the analytic value using
//! `|a - n| / max(|a|, |n|, floor)`. Entries where the one-sided slopes
//! disagree sit on a kink (ReLU, max pooling, hinge, mining switch) and are
//! counted as skipped rather than compared.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branches::BranchConfig;
use crate::color_ops::{extract_color_prior, RgbImage, TokenSequence};
use crate::data::tokenize;
use crate::encoders::{
    global_pool_project, init_backbone, init_text_encoder, local_partition_project, text_global, text_word_reps,
    visual_backbone, word_attention_locals, EncoderConfig, TokenBatch,
};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::losses::{graph_logits, graph_mutual_learning, graph_triplet_loss, total_loss, LossWeights, Supervision};
use crate::model::{text_color, visual_color, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::text_resources;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Entries sampled from each parameter tensor; smaller tensors are checked in full.
    pub samples_per_tensor: usize,
    /// One-sided slopes differing by more than this (relative) mark a kink.
    pub kink_threshold: f64,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-3,
            floor: 1e-6,
            samples_per_tensor: 6,
            kink_threshold: 1e-2,
            seed: 0,
        }
    }
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    /// Parameter and flat index of the largest error.
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub results: Vec<CheckResult>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<28} {:>7} {:>7} {:>12}  status\n", "check", "checked", "kinks", "max rel err");
        for r in &self.results {
            let _ = writeln!(
                out,
                "{:<28} {:>7} {:>7} {:>12.3e}  {}",
                r.name,
                r.checked,
                r.skipped,
                r.max_rel_err,
                if r.passed() { "ok" } else { "FAIL" }
            );
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Scalar outputs of a graph function, evaluated on a fresh graph.
pub type Outputs<'a> = dyn Fn(&mut Graph, &ParamStore) -> Result<Vec<Var>> + 'a;

fn evaluate(f: &Outputs, store: &ParamStore) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let outs = f(&mut g, store)?;
    Ok(outs.iter().map(|&v| g.value(v).item()).collect())
}

/// Analytic gradients of every output of `f`.
pub fn analytic_gradients(f: &Outputs, store: &ParamStore) -> Result<Vec<BTreeMap<String, Tensor>>> {
    let mut g = Graph::new();
    let outs = f(&mut g, store)?;
    Ok(outs.iter().map(|&v| g.backward(v).params()).collect())
}

fn sample_entries(store: &ParamStore, cfg: &AuditConfig) -> Vec<(String, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    for (name, t) in store.iter() {
        let n = t.len();
        if n <= cfg.samples_per_tensor {
            entries.extend((0..n).map(|i| (name.clone(), i)));
        } else {
            let mut picked = sample(&mut rng, n, cfg.samples_per_tensor).into_vec();
            picked.sort_unstable();
            entries.extend(picked.into_iter().map(|i| (name.clone(), i)));
        }
    }
    entries
}

/// Compares `analytic[k]` against central differences of output `k` of
/// `f`, for every output at once.
pub fn compare_gradients(
    names: &[String],
    f: &Outputs,
    store: &ParamStore,
    analytic: &[BTreeMap<String, Tensor>],
    cfg: &AuditConfig,
) -> Result<Vec<CheckResult>> {
    let mut results: Vec<CheckResult> = names
        .iter()
        .map(|name| CheckResult {
            name: name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst: None,
            tolerance: cfg.tolerance,
        })
        .collect();
    let base = evaluate(f, store)?;
    let mut probe = store.clone();
    let h = cfg.step;
    for (name, i) in sample_entries(store, cfg) {
        let x = store.get(&name).expect("sampled from store").data()[i];
        probe.get_mut(&name).expect("same names").data_mut()[i] = x + h;
        let plus = evaluate(f, &probe)?;
        probe.get_mut(&name).expect("same names").data_mut()[i] = x - h;
        let minus = evaluate(f, &probe)?;
        probe.get_mut(&name).expect("same names").data_mut()[i] = x;
        for (k, r) in results.iter_mut().enumerate() {
            let right = (plus[k] - base[k]) / h;
            let left = (base[k] - minus[k]) / h;
            if relative_error(right, left, cfg.floor) > cfg.kink_threshold {
                r.skipped += 1;
                continue;
            }
            let numeric = (plus[k] - minus[k]) / (2.0 * h);
            let a = analytic[k].get(&name).map_or(0.0, |t| t.data()[i]);
            let err = relative_error(a, numeric, cfg.floor);
            r.checked += 1;
            if err > r.max_rel_err || r.worst.is_none() {
                r.max_rel_err = err;
                r.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(results)
}

pub fn check(names: &[String], f: &Outputs, store: &ParamStore, cfg: &AuditConfig) -> Result<Vec<CheckResult>> {
    let analytic = analytic_gradients(f, store)?;
    compare_gradients(names, f, store, &analytic, cfg)
}

/// Reduces a tensor-valued node to a scalar through a fixed random weighting.
fn probe(g: &mut Graph, x: Var, weights: &Tensor) -> Var {
    let w = g.constant(weights.clone());
    let prod = g.mul(x, w);
    g.sum(prod)
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Dimensions of the audit fixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditDims {
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub parts: usize,
    pub classes: usize,
    pub batch: usize,
}

impl Default for AuditDims {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            proj_dim: 8,
            parts: 2,
            classes: 3,
            batch: 4,
        }
    }
}

impl AuditDims {
    fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            backbone_channels: vec![4, 4, 4, 6],
            embed_dim: self.embed_dim,
            proj_dim: self.proj_dim,
            parts: self.parts,
            ..EncoderConfig::default()
        }
    }
}

const CAPTIONS: [&str; 4] = [
    "a man in a red shirt and blue pants with a bag",
    "the woman wearing a striped green top and black trousers",
    "a person carrying a backpack in white shorts",
    "a walker with a dotted yellow jacket and gray pants and a hat",
];

fn captions(batch: usize) -> Vec<TokenSequence> {
    (0..batch)
        .map(|i| tokenize(CAPTIONS[i % CAPTIONS.len()]).expect("fixture captions are non-empty"))
        .collect()
}

fn random_images(n: usize, enc: &EncoderConfig, rng: &mut impl Rng) -> Vec<RgbImage> {
    (0..n)
        .map(|_| {
            let px = (0..enc.input_height * enc.input_width * 3).map(|_| rng.random_range(0.0..255.0)).collect();
            RgbImage::new(enc.input_height, enc.input_width, px).expect("sized")
        })
        .collect()
}

/// Checks every loss term of the full three-branch model with respect to
/// every parameter tensor.
pub fn audit_losses(dims: &AuditDims, cfg: &AuditConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let enc = dims.encoder();
    let caps = captions(dims.batch);
    let (vocab, bank) = text_resources(&caps, 1)?;
    let model = Model::new(
        ModelConfig {
            encoder: enc.clone(),
            branches: BranchConfig::default(),
            ..ModelConfig::default()
        },
        vocab,
        bank,
        dims.classes,
        &mut rng,
    )?;
    let images = random_images(dims.batch, &enc, &mut rng);
    let labels: Vec<usize> = (0..dims.batch).map(|i| [0, 0, 1, 2][i % 4] % dims.classes).collect();
    let weights = LossWeights::default();
    let build = |g: &mut Graph, store: &ParamStore| -> Result<crate::losses::LossBreakdown> {
        let m = Model {
            params: store.clone(),
            ..model.clone()
        };
        let img_refs: Vec<&RgbImage> = images.iter().collect();
        let cap_refs: Vec<&TokenSequence> = caps.iter().collect();
        let visual = m.forward_visual(g, &img_refs)?;
        let text = m.forward_text(g, &cap_refs)?;
        total_loss(g, &m, &visual, &text, &labels, &weights, Supervision::Full)
    };
    let mut probe_graph = Graph::new();
    let breakdown = build(&mut probe_graph, &model.params)?;
    let mut names: Vec<String> = breakdown.terms.keys().cloned().collect();
    names.push("total".into());
    let f = |g: &mut Graph, store: &ParamStore| -> Result<Vec<Var>> {
        let b = build(g, store)?;
        let mut outs: Vec<Var> = b.terms.values().copied().collect();
        outs.push(b.total);
        Ok(outs)
    };
    let names: Vec<String> = names.into_iter().map(|n| format!("loss {n}")).collect();
    check(&names, &f, &model.params, cfg)
}

/// Checks each encoder and head op in isolation, including gradients with
/// respect to the op inputs.
pub fn audit_ops(dims: &AuditDims, cfg: &AuditConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let enc = dims.encoder();
    let (b, c, p, k, m) = (dims.batch, dims.embed_dim, dims.proj_dim, dims.parts, dims.classes);
    let cv = enc.feature_channels();
    let caps = captions(b);
    let (vocab, bank) = text_resources(&caps, 1)?;
    let cap_refs: Vec<&TokenSequence> = caps.iter().collect();
    let tokens = TokenBatch::from_sequences(&vocab, &cap_refs)?;
    let rows = b * tokens.max_len;
    let (fh, fw) = (enc.input_height / 8, enc.input_width / 8);
    let mut results = Vec::new();

    let mut push = |name: &str, store: &ParamStore, f: &Outputs| -> Result<()> {
        results.extend(check(&[name.to_string()], f, store, cfg)?);
        Ok(())
    };

    // visual backbone, input included
    let mut store = ParamStore::new();
    init_backbone(&mut store, "bb", &enc, &mut rng);
    store.insert("input", random_tensor(&[b, enc.input_height, enc.input_width, 3], 1.0, &mut rng));
    let w_map = random_tensor(&[b, fh, fw, cv], 1.0, &mut rng);
    push("op visual_backbone", &store, &|g, s| {
        let x = g.param(s, "input");
        let map = visual_backbone(g, s, "bb", x, &enc)?;
        Ok(vec![probe(g, map, &w_map)])
    })?;

    // pooling heads over a feature map
    let mut store = ParamStore::new();
    store.insert("map", random_tensor(&[b, fh, fw, cv], 1.0, &mut rng));
    store.linear("global", cv, p, &mut rng);
    for part in 0..k {
        store.linear(&format!("part{part}"), cv, p, &mut rng);
    }
    let w_p = random_tensor(&[b, p], 1.0, &mut rng);
    let w_l = random_tensor(&[b, k * p], 1.0, &mut rng);
    push("op global_pool_project", &store, &|g, s| {
        let map = g.param(s, "map");
        let v = global_pool_project(g, s, map, "global");
        Ok(vec![probe(g, v, &w_p)])
    })?;
    push("op local_partition_project", &store, &|g, s| {
        let map = g.param(s, "map");
        let parts = local_partition_project(g, s, map, k, "part")?;
        let local = g.concat_cols(parts);
        Ok(vec![probe(g, local, &w_l)])
    })?;

    // text encoder ops
    let mut store = ParamStore::new();
    init_text_encoder(&mut store, "text", vocab.len(), &enc, &mut rng);
    store.linear("tg", c, p, &mut rng);
    for part in 0..k {
        store.linear(&format!("tp{part}"), c, p, &mut rng);
    }
    store.normal("attention", &[k, c], 1.0, &mut rng);
    let w_reps = random_tensor(&[rows, c], 1.0, &mut rng);
    let w_gates = random_tensor(&[rows, k], 1.0, &mut rng);
    push("op bigru_word_reps", &store, &|g, s| {
        let reps = text_word_reps(g, s, "text", &tokens);
        Ok(vec![probe(g, reps.matrix, &w_reps)])
    })?;
    push("op text_global", &store, &|g, s| {
        let reps = text_word_reps(g, s, "text", &tokens);
        let t = text_global(g, s, &reps, "tg");
        Ok(vec![probe(g, t, &w_p)])
    })?;
    push("op word_attention", &store, &|g, s| {
        let reps = text_word_reps(g, s, "text", &tokens);
        let (parts, gates) = word_attention_locals(g, s, &reps, "attention", "tp");
        let local = g.concat_cols(parts);
        let a = probe(g, local, &w_l);
        let bgate = probe(g, gates, &w_gates);
        Ok(vec![g.add(a, bgate)])
    })?;

    // color branch ops
    let mut store = ParamStore::new();
    store.insert("m_rgb", random_tensor(&[b, fh, fw, cv], 1.0, &mut rng));
    store.insert("m_grs", random_tensor(&[b, fh, fw, cv], 1.0, &mut rng));
    store.insert("e_rgb", random_tensor(&[rows, c], 1.0, &mut rng));
    store.insert("e_grs", random_tensor(&[rows, c], 1.0, &mut rng));
    store.normal("text.embedding", &[vocab.len(), c], 1.0, &mut rng);
    store.linear("clr.visual", cv, p, &mut rng);
    store.linear("clr.text", c, p, &mut rng);
    store.linear("clr.prior", c, c, &mut rng);
    let prior: Vec<Vec<usize>> = caps
        .iter()
        .map(|s| vocab.encode(&TokenSequence::new(extract_color_prior(s, &bank)).expect("tokens")))
        .collect();
    push("op visual_color", &store, &|g, s| {
        let (a, bm) = (g.param(s, "m_rgb"), g.param(s, "m_grs"));
        let v = visual_color(g, s, a, bm);
        Ok(vec![probe(g, v, &w_p)])
    })?;
    push("op text_color_prior", &store, &|g, s| {
        let (a, bm) = (g.param(s, "e_rgb"), g.param(s, "e_grs"));
        let t = text_color(g, s, a, bm, tokens.max_len, &tokens.lengths, Some(prior.clone()));
        Ok(vec![probe(g, t, &w_p)])
    })?;

    // classifier, probabilities, similarity and the loss primitives
    let mut store = ParamStore::new();
    store.insert("v", random_tensor(&[b, p], 1.0, &mut rng));
    store.insert("t", random_tensor(&[b, p], 1.0, &mut rng));
    store.insert("v2", random_tensor(&[b, p], 1.0, &mut rng));
    store.insert("t2", random_tensor(&[b, p], 1.0, &mut rng));
    store.insert("w", random_tensor(&[m, p], 0.3, &mut rng));
    store.insert("scale", Tensor::scalar(4.0));
    let w_probs = random_tensor(&[b, m], 1.0, &mut rng);
    let labels: Vec<usize> = (0..b).map(|i| i % m).collect();
    let groups: Vec<usize> = (0..b).map(|i| i / 2).collect();
    push("op class_probs", &store, &|g, s| {
        let (v, w, sc) = (g.param(s, "v"), g.param(s, "w"), g.param(s, "scale"));
        let logits = graph_logits(g, v, w, sc);
        let probs = g.softmax(logits);
        Ok(vec![probe(g, probs, &w_probs)])
    })?;
    push("op id_cross_entropy", &store, &|g, s| {
        let (v, w, sc) = (g.param(s, "v"), g.param(s, "w"), g.param(s, "scale"));
        let logits = graph_logits(g, v, w, sc);
        Ok(vec![g.cross_entropy(logits, labels.clone())])
    })?;
    push("op triplet_batch_hard", &store, &|g, s| {
        let (v, t) = (g.param(s, "v"), g.param(s, "t"));
        Ok(vec![graph_triplet_loss(g, v, t, &groups, 0.5)])
    })?;
    push("op mutual_learning", &store, &|g, s| {
        let (w, sc) = (g.param(s, "w"), g.param(s, "scale"));
        let mut logits = BTreeMap::new();
        for (br, (vn, tn)) in [(crate::branches::Branch::Rgb, ("v", "t")), (crate::branches::Branch::Grs, ("v2", "t2"))] {
            let (v, t) = (g.param(s, vn), g.param(s, tn));
            logits.insert(br, (graph_logits(g, v, w, sc), graph_logits(g, t, w, sc)));
        }
        let per = graph_mutual_learning(g, &logits);
        let terms: Vec<Var> = per.values().copied().collect();
        Ok(vec![g.add_all(&terms)])
    })?;
    Ok(results)
}

/// Every op check followed by every loss-term check.
pub fn run_audit(dims: &AuditDims, cfg: &AuditConfig) -> Result<AuditReport> {
    let mut results = audit_ops(dims, cfg)?;
    results.extend(audit_losses(dims, cfg)?);
    Ok(AuditReport { results })
}
