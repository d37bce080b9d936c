use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::branches::{Branch, BranchConfig, BranchOutput};
use crate::color_ops::{deprive_color, extract_color_prior, mask_colors, ColorBank, RgbImage, TokenSequence};
use crate::encoders::{
    global_pool_project, images_to_tensor, init_backbone, init_text_encoder, linear, local_partition_project,
    split_feature_maps, text_global, text_word_reps, visual_backbone, word_attention_locals, EncoderConfig,
    TokenBatch, Vocab, WordReps,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Whether the identity classifier is shared by all branches or owned by
/// each branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierSharing {
    Shared,
    PerBranch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub branches: BranchConfig,
    /// Logit scale of the identity classifier.
    pub gamma: f64,
    pub classifier: ClassifierSharing,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            branches: BranchConfig::default(),
            gamma: 16.0,
            classifier: ClassifierSharing::Shared,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.branches.validate()?;
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub bank: ColorBank,
    pub num_classes: usize,
    pub params: ParamStore,
}

/// Visual features of one branch in graph form.
#[derive(Debug, Clone)]
pub struct VisualVars {
    pub global: Var,
    pub parts: Vec<Var>,
    pub local: Var,
    pub map: Var,
}

/// Textual features of one branch in graph form.
#[derive(Debug, Clone)]
pub struct TextVars {
    pub global: Var,
    pub parts: Vec<Var>,
    pub local: Var,
    pub reps: WordReps,
    pub gates: Var,
}

#[derive(Debug, Clone, Default)]
pub struct VisualFeatures {
    pub rgb: Option<VisualVars>,
    pub grs: Option<VisualVars>,
    pub clr: Option<Var>,
}

#[derive(Debug, Clone, Default)]
pub struct TextFeatures {
    pub rgb: Option<TextVars>,
    pub grs: Option<TextVars>,
    pub clr: Option<Var>,
}

/// `GMP(M_rgb - M_grs)` through the `clr.visual` head.
pub fn visual_color(g: &mut Graph, store: &ParamStore, m_rgb: Var, m_grs: Var) -> Var {
    let diff = g.sub(m_rgb, m_grs);
    let h = g.value(diff).shape()[1];
    let pooled = g.spatial_max(diff, (0, h));
    linear(g, store, "clr.visual", pooled)
}

/// `E_rgb - E_grs`, optionally enhanced with the projected sum of each
/// caption's color-word embeddings, pooled and passed through `clr.text`.
pub fn text_color(
    g: &mut Graph,
    store: &ParamStore,
    e_rgb: Var,
    e_grs: Var,
    seg: usize,
    lengths: &[usize],
    prior: Option<Vec<Vec<usize>>>,
) -> Var {
    let mut e = g.sub(e_rgb, e_grs);
    if let Some(bags) = prior {
        let table = g.param(store, "text.embedding");
        let summed = g.embed_bag(table, bags);
        let projected = linear(g, store, "clr.prior", summed);
        e = g.add_segment_broadcast(e, projected, seg);
    }
    let pooled = g.segment_max(e, seg, lengths);
    linear(g, store, "clr.text", pooled)
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, bank: ColorBank, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("at least one identity class is required".into()));
        }
        let params = Self::init_params(&config, vocab.len(), num_classes, rng);
        Ok(Self {
            config,
            vocab,
            bank,
            num_classes,
            params,
        })
    }

    fn init_params(config: &ModelConfig, vocab_size: usize, num_classes: usize, rng: &mut impl Rng) -> ParamStore {
        let enc = &config.encoder;
        let (cv, c, p, k) = (enc.feature_channels(), enc.embed_dim, enc.proj_dim, enc.parts);
        let mut store = ParamStore::new();
        let br = &config.branches;
        if br.rgb || br.grs {
            init_text_encoder(&mut store, "text", vocab_size, enc, rng);
        }
        for branch in [Branch::Rgb, Branch::Grs] {
            if !br.is_active(branch) {
                continue;
            }
            let name = branch.name();
            init_backbone(&mut store, &format!("{name}.backbone"), enc, rng);
            store.linear(&format!("{name}.visual.global"), cv, p, rng);
            store.linear(&format!("{name}.text.global"), c, p, rng);
            for part in 0..k {
                store.linear(&format!("{name}.visual.part{part}"), cv, p, rng);
                store.linear(&format!("{name}.text.part{part}"), c, p, rng);
            }
            store.normal(&format!("{name}.text.attention"), &[k, c], (1.0 / c as f64).sqrt(), rng);
        }
        if br.clr {
            store.linear("clr.visual", cv, p, rng);
            store.linear("clr.text", c, p, rng);
            let mut eye = Tensor::zeros(&[c, c]);
            for i in 0..c {
                eye.data_mut()[i * c + i] = 1.0;
            }
            store.insert("clr.prior.weight", eye);
            store.zeros("clr.prior.bias", &[c]);
        }
        store.insert("head.scale", Tensor::scalar(config.gamma));
        let head_std = 1.0 / (config.gamma * (p as f64).sqrt());
        let owners: Vec<Option<Branch>> = match config.classifier {
            ClassifierSharing::Shared => vec![None],
            ClassifierSharing::PerBranch => br.active().into_iter().map(Some).collect(),
        };
        for owner in owners {
            let prefix = owner.map_or("head".to_string(), |b| format!("head.{b}"));
            store.normal(&format!("{prefix}.global.weight"), &[num_classes, p], head_std, rng);
            if owner != Some(Branch::Clr) {
                for part in 0..k {
                    store.normal(&format!("{prefix}.part{part}.weight"), &[num_classes, p], head_std, rng);
                }
            }
        }
        store
    }

    /// Classifier weight name for a branch and slot (`global` or `part{k}`).
    pub fn head_name(&self, branch: Branch, slot: &str) -> String {
        match self.config.classifier {
            ClassifierSharing::Shared => format!("head.{slot}.weight"),
            ClassifierSharing::PerBranch => format!("head.{branch}.{slot}.weight"),
        }
    }

    pub fn encoder(&self) -> &EncoderConfig {
        &self.config.encoder
    }

    fn branch_visual(&self, g: &mut Graph, branch: Branch, images: Var) -> Result<VisualVars> {
        let name = branch.name();
        let enc = &self.config.encoder;
        let map = visual_backbone(g, &self.params, &format!("{name}.backbone"), images, enc)?;
        let global = global_pool_project(g, &self.params, map, &format!("{name}.visual.global"));
        let parts = local_partition_project(g, &self.params, map, enc.parts, &format!("{name}.visual.part"))?;
        let local = g.concat_cols(parts.clone());
        Ok(VisualVars { global, parts, local, map })
    }

    fn branch_text(&self, g: &mut Graph, branch: Branch, reps: WordReps) -> TextVars {
        let name = branch.name();
        let global = text_global(g, &self.params, &reps, &format!("{name}.text.global"));
        let (parts, gates) = word_attention_locals(
            g,
            &self.params,
            &reps,
            &format!("{name}.text.attention"),
            &format!("{name}.text.part"),
        );
        let local = g.concat_cols(parts.clone());
        TextVars {
            global,
            parts,
            local,
            reps,
            gates,
        }
    }

    pub fn forward_visual(&self, g: &mut Graph, images: &[&RgbImage]) -> Result<VisualFeatures> {
        let br = &self.config.branches;
        let mut out = VisualFeatures::default();
        if br.rgb {
            let x = g.constant(images_to_tensor(images, &self.config.encoder)?);
            out.rgb = Some(self.branch_visual(g, Branch::Rgb, x)?);
        }
        if br.grs {
            let tensor = if br.grs_scope.deprives_images() {
                let gray: Vec<RgbImage> = images.iter().map(|i| deprive_color(i)).collect();
                images_to_tensor(&gray.iter().collect::<Vec<_>>(), &self.config.encoder)?
            } else {
                images_to_tensor(images, &self.config.encoder)?
            };
            let x = g.constant(tensor);
            out.grs = Some(self.branch_visual(g, Branch::Grs, x)?);
        }
        if br.clr {
            let m_rgb = out.rgb.as_ref().expect("validated").map;
            let mut m_grs = out.grs.as_ref().expect("validated").map;
            if br.detach_grs {
                m_grs = g.detach(m_grs);
            }
            out.clr = Some(visual_color(g, &self.params, m_rgb, m_grs));
        }
        Ok(out)
    }

    pub fn forward_text(&self, g: &mut Graph, captions: &[&TokenSequence]) -> Result<TextFeatures> {
        self.forward_text_with_bank(g, captions, &self.bank)
    }

    pub fn forward_text_with_bank(&self, g: &mut Graph, captions: &[&TokenSequence], bank: &ColorBank) -> Result<TextFeatures> {
        let br = &self.config.branches;
        let mut out = TextFeatures::default();
        let raw = TokenBatch::from_sequences(&self.vocab, captions)?;
        if br.rgb {
            let reps = text_word_reps(g, &self.params, "text", &raw);
            out.rgb = Some(self.branch_text(g, Branch::Rgb, reps));
        }
        if br.grs {
            let batch = if br.grs_scope.masks_text() {
                let masked: Vec<TokenSequence> = captions.iter().map(|c| mask_colors(c, bank)).collect();
                TokenBatch::from_sequences(&self.vocab, &masked.iter().collect::<Vec<_>>())?
            } else {
                raw.clone()
            };
            let reps = text_word_reps(g, &self.params, "text", &batch);
            out.grs = Some(self.branch_text(g, Branch::Grs, reps));
        }
        if br.clr {
            let rgb = &out.rgb.as_ref().expect("validated").reps;
            let grs = &out.grs.as_ref().expect("validated").reps;
            let mut e_grs = grs.matrix;
            if br.detach_grs {
                e_grs = g.detach(e_grs);
            }
            let prior = br.color_prior.then(|| {
                captions
                    .iter()
                    .map(|c| extract_color_prior(c, bank).iter().map(|t| self.vocab.id(t)).collect())
                    .collect()
            });
            out.clr = Some(text_color(g, &self.params, rgb.matrix, e_grs, rgb.seg, &rgb.lengths, prior));
        }
        Ok(out)
    }

    fn collect_output(g: &Graph, visual: &VisualVars, text: &TextVars) -> BranchOutput {
        let n = text.reps.lengths[0];
        let c = g.value(text.reps.matrix).shape()[1];
        let rows = g.value(text.reps.matrix).data()[..n * c].to_vec();
        BranchOutput {
            visual_global: g.value(visual.global).data().to_vec(),
            visual_locals: visual.parts.iter().map(|p| g.value(*p).data().to_vec()).collect(),
            visual_map: split_feature_maps(g.value(visual.map)).remove(0),
            text_global: g.value(text.global).data().to_vec(),
            text_locals: text.parts.iter().map(|p| g.value(*p).data().to_vec()).collect(),
            word_matrix: Tensor::new(vec![n, c], rows),
        }
    }

    /// Single image/caption output of the rgb or grs branch.
    pub fn branch_output(&self, image: &RgbImage, tokens: &TokenSequence, branch: Branch) -> Result<BranchOutput> {
        match branch {
            Branch::Grs => self.grs_branch_output(image, tokens, &self.bank),
            Branch::Rgb => {
                if !self.config.branches.rgb {
                    return Err(Error::Config("rgb branch is not active".into()));
                }
                let mut g = Graph::new();
                let v = self.forward_visual(&mut g, &[image])?;
                let t = self.forward_text(&mut g, &[tokens])?;
                Ok(Self::collect_output(&g, v.rgb.as_ref().expect("active"), t.rgb.as_ref().expect("active")))
            }
            Branch::Clr => Err(Error::Config("the color branch has no BranchOutput; use run_clr_branch".into())),
        }
    }

    pub(crate) fn grs_branch_output(&self, image: &RgbImage, tokens: &TokenSequence, bank: &ColorBank) -> Result<BranchOutput> {
        if !self.config.branches.grs {
            return Err(Error::Config("grs branch is not active".into()));
        }
        let mut g = Graph::new();
        let v = self.forward_visual(&mut g, &[image])?;
        let t = self.forward_text_with_bank(&mut g, &[tokens], bank)?;
        Ok(Self::collect_output(&g, v.grs.as_ref().expect("active"), t.grs.as_ref().expect("active")))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::branches::{run_clr_branch, run_grs_branch, run_rgb_branch, similarity_bundle};
    use crate::color_ops::default_lexicon;

    fn small_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input_height: 16,
                input_width: 8,
                backbone_channels: vec![4, 4, 4, 8],
                backbone_strides: vec![2, 2, 2, 1],
                embed_dim: 8,
                proj_dim: 8,
                parts: 2,
            },
            ..ModelConfig::default()
        }
    }

    fn small_model(seed: u64) -> Model {
        let vocab = Vocab::build(["a", "woman", "in", "red", "blue", "shirt", "with", "bag"]);
        let bank = ColorBank::new(default_lexicon()).unwrap();
        Model::new(small_config(), vocab, bank, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn image() -> RgbImage {
        let mut img = RgbImage::filled(16, 8, [200.0, 30.0, 40.0]);
        for r in 8..16 {
            for c in 0..8 {
                img.set(r, c, [20.0, 40.0, 180.0]);
            }
        }
        img
    }

    fn caption() -> TokenSequence {
        TokenSequence::new("a woman in red shirt with bag".split(' ')).unwrap()
    }

    #[test]
    fn construction_is_deterministic() {
        assert_eq!(small_model(5).params, small_model(5).params);
        assert_ne!(small_model(5).params, small_model(6).params);
    }

    #[test]
    fn output_dimensions() {
        let m = small_model(1);
        let out = run_rgb_branch(&m, &image(), &caption()).unwrap();
        assert_eq!(out.visual_global.len(), 8);
        assert_eq!(out.visual_locals.len(), 2);
        assert_eq!(out.text_local().len(), 16);
        assert_eq!(out.visual_map.0.shape(), &[2, 1, 8]);
        assert_eq!(out.word_matrix.shape(), &[7, 8]);
    }

    #[test]
    fn grs_branch_ignores_color_of_gray_input_and_caption_colors() {
        let m = small_model(2);
        let gray = deprive_color(&image());
        let a = run_grs_branch(&m, &gray, &caption(), &m.bank).unwrap();
        let b = run_grs_branch(&m, &image(), &caption(), &m.bank).unwrap();
        assert_eq!(a.visual_global, b.visual_global);
        let blue = TokenSequence::new("a woman in blue shirt with bag".split(' ')).unwrap();
        let c = run_grs_branch(&m, &image(), &blue, &m.bank).unwrap();
        assert_eq!(a.text_global, c.text_global);
    }

    #[test]
    fn clr_of_identical_outputs_is_bias() {
        let mut m = small_model(3);
        m.params.insert("clr.visual.bias", Tensor::new(vec![8], (0..8).map(|i| i as f64).collect()));
        let rgb = run_rgb_branch(&m, &image(), &caption()).unwrap();
        let out = run_clr_branch(&m, &rgb, &rgb, &[], false).unwrap();
        assert_eq!(out.visual_color, (0..8).map(|i| i as f64).collect::<Vec<_>>());
        assert!(out.text_color.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_prior_adds_only_prior_bias() {
        let mut m = small_model(4);
        let rgb = run_rgb_branch(&m, &image(), &caption()).unwrap();
        let grs = run_grs_branch(&m, &image(), &caption(), &m.bank).unwrap();
        let off = run_clr_branch(&m, &rgb, &grs, &[], false).unwrap();
        let empty = run_clr_branch(&m, &rgb, &grs, &[], true).unwrap();
        assert_eq!(off, empty);
        m.params.insert("clr.prior.bias", Tensor::full(&[8], 0.5));
        let shifted = run_clr_branch(&m, &rgb, &grs, &[], true).unwrap();
        assert_ne!(off.text_color, shifted.text_color);
    }

    #[test]
    fn batched_graph_matches_single_sample_path() {
        let m = small_model(7);
        let rgb = run_rgb_branch(&m, &image(), &caption()).unwrap();
        let grs = run_grs_branch(&m, &image(), &caption(), &m.bank).unwrap();
        let prior = extract_color_prior(&caption(), &m.bank);
        let clr = run_clr_branch(&m, &rgb, &grs, &prior, true).unwrap();

        let short = TokenSequence::new(["woman"]).unwrap();
        let img = image();
        let other = RgbImage::filled(16, 8, [10.0, 220.0, 10.0]);
        let mut g = Graph::new();
        let v = m.forward_visual(&mut g, &[&img, &other]).unwrap();
        let t = m.forward_text(&mut g, &[&caption(), &short]).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-10);
        assert!(close(g.value(v.rgb.as_ref().unwrap().global).row(0), &rgb.visual_global));
        assert!(close(g.value(t.grs.as_ref().unwrap().global).row(0), &grs.text_global));
        assert!(close(g.value(v.clr.unwrap()).row(0), &clr.visual_color));
        assert!(close(g.value(t.clr.unwrap()).row(0), &clr.text_color));

        let bundle = similarity_bundle(Some(&rgb), Some(&grs), Some(&clr), &m.config.branches).unwrap();
        assert!(bundle.fused.is_finite());
    }

    #[test]
    fn rgb_only_model_has_no_grs_params() {
        let mut cfg = small_config();
        cfg.branches = BranchConfig::rgb_only();
        let vocab = Vocab::build(["a"]);
        let bank = ColorBank::new(default_lexicon()).unwrap();
        let m = Model::new(cfg, vocab, bank, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(m.params.names().all(|n| !n.starts_with("grs.") && !n.starts_with("clr.")));
        assert!(run_grs_branch(&m, &image(), &caption(), &m.bank).is_err());
    }
}
