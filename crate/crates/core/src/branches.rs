//! Branch configuration, per-image/per-caption branch outputs and the
//! cross-modal similarities used for ranking.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::color_ops::{ColorBank, RgbImage, TokenSequence};
use crate::encoders::FeatureMap;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Rgb,
    Grs,
    Clr,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Rgb, Branch::Grs, Branch::Clr];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Rgb => "rgb",
            Branch::Grs => "grs",
            Branch::Clr => "clr",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "rgb" => Ok(Branch::Rgb),
            "grs" => Ok(Branch::Grs),
            "clr" => Ok(Branch::Clr),
            other => Err(Error::Config(format!("unknown branch {other:?}"))),
        }
    }
}

/// Which modalities the grayscale branch deprives of color. `Visual` keeps
/// captions unmasked, `Text` keeps images in color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrsScope {
    Both,
    Visual,
    Text,
}

impl GrsScope {
    pub fn deprives_images(self) -> bool {
        matches!(self, GrsScope::Both | GrsScope::Visual)
    }

    pub fn masks_text(self) -> bool {
        matches!(self, GrsScope::Both | GrsScope::Text)
    }
}

/// Weight of each similarity component in the fused score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionWeights {
    pub global_rgb: f64,
    pub local_rgb: f64,
    pub global_grs: f64,
    pub local_grs: f64,
    pub clr: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            global_rgb: 1.0,
            local_rgb: 1.0,
            global_grs: 1.0,
            local_grs: 1.0,
            clr: 1.0,
        }
    }
}

impl FusionWeights {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.global_rgb, self.local_rgb, self.global_grs, self.local_grs, self.clr]
    }

    /// Parses five comma-separated weights in component order.
    pub fn parse(s: &str) -> Result<Self> {
        let values: Vec<f64> = s
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Config(format!("fusion weight {v:?}: {e}"))))
            .collect::<Result<_>>()?;
        match values.as_slice() {
            &[global_rgb, local_rgb, global_grs, local_grs, clr] => Ok(Self {
                global_rgb,
                local_rgb,
                global_grs,
                local_grs,
                clr,
            }),
            _ => Err(Error::Config(format!("expected 5 fusion weights, got {}", values.len()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BranchConfig {
    pub rgb: bool,
    pub grs: bool,
    pub clr: bool,
    pub grs_scope: GrsScope,
    pub color_prior: bool,
    pub fusion: FusionWeights,
    /// Block gradients from the color branch into the grayscale features.
    pub detach_grs: bool,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            rgb: true,
            grs: true,
            clr: true,
            grs_scope: GrsScope::Both,
            color_prior: true,
            fusion: FusionWeights::default(),
            detach_grs: false,
        }
    }
}

impl BranchConfig {
    pub fn rgb_only() -> Self {
        Self {
            grs: false,
            clr: false,
            color_prior: false,
            ..Self::default()
        }
    }

    pub fn with_branches(branches: &[Branch]) -> Self {
        Self {
            rgb: branches.contains(&Branch::Rgb),
            grs: branches.contains(&Branch::Grs),
            clr: branches.contains(&Branch::Clr),
            color_prior: branches.contains(&Branch::Clr),
            ..Self::default()
        }
    }

    pub fn is_active(&self, branch: Branch) -> bool {
        match branch {
            Branch::Rgb => self.rgb,
            Branch::Grs => self.grs,
            Branch::Clr => self.clr,
        }
    }

    pub fn active(&self) -> Vec<Branch> {
        Branch::ALL.into_iter().filter(|b| self.is_active(*b)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rgb || self.grs || self.clr) {
            return Err(Error::Config("at least one branch must be active".into()));
        }
        if self.clr && !(self.rgb && self.grs) {
            return Err(Error::Config("the color branch needs both the rgb and grs branches".into()));
        }
        if self.clr && self.grs_scope != GrsScope::Both {
            return Err(Error::Config("the color branch needs a grs branch deprived in both modalities".into()));
        }
        if self.color_prior && !self.clr {
            return Err(Error::Config("color prior requires the clr branch".into()));
        }
        Ok(())
    }
}

/// Visual and textual outputs of the rgb or grs branch for one image and one
/// caption.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    pub visual_global: Vec<f64>,
    pub visual_locals: Vec<Vec<f64>>,
    pub visual_map: FeatureMap,
    pub text_global: Vec<f64>,
    pub text_locals: Vec<Vec<f64>>,
    /// `[n, C]` word representations.
    pub word_matrix: Tensor,
}

impl BranchOutput {
    pub fn visual_local(&self) -> Vec<f64> {
        self.visual_locals.concat()
    }

    pub fn text_local(&self) -> Vec<f64> {
        self.text_locals.concat()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorOutput {
    pub visual_color: Vec<f64>,
    pub text_color: Vec<f64>,
}

/// The five branch similarities; inactive components are `None` and do not
/// contribute to `fused`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimilarityBundle {
    pub global_rgb: Option<f64>,
    pub local_rgb: Option<f64>,
    pub global_grs: Option<f64>,
    pub local_grs: Option<f64>,
    pub clr: Option<f64>,
    pub fused: f64,
}

impl SimilarityBundle {
    pub fn components(&self) -> [Option<f64>; 5] {
        [self.global_rgb, self.local_rgb, self.global_grs, self.local_grs, self.clr]
    }

    /// Recomputes `fused` from the components.
    pub fn fuse(mut self, weights: &FusionWeights) -> Self {
        self.fused = self
            .components()
            .iter()
            .zip(weights.to_vec())
            .filter_map(|(c, w)| c.map(|v| v * w))
            .sum();
        self
    }
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("cosine of vectors of length {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn run_rgb_branch(model: &Model, image: &RgbImage, tokens: &TokenSequence) -> Result<BranchOutput> {
    model.branch_output(image, tokens, crate::branches::Branch::Rgb)
}

/// Deprives the image of color and masks the caption's color words (per the
/// model's grs scope) before running the grayscale branch encoders.
pub fn run_grs_branch(model: &Model, image: &RgbImage, tokens: &TokenSequence, bank: &ColorBank) -> Result<BranchOutput> {
    if bank.words().is_empty() {
        return Err(Error::EmptyBank { min_count: 0 });
    }
    model.grs_branch_output(image, tokens, bank)
}

/// Color branch from the rgb and grs outputs: `M_rgb - M_grs` pooled and
/// projected for the visual side, `E_rgb - E_grs` plus the projected sum of
/// color-word embeddings, pooled and projected for the textual side.
pub fn run_clr_branch(
    model: &Model,
    rgb: &BranchOutput,
    grs: &BranchOutput,
    prior_tokens: &[String],
    prior_enabled: bool,
) -> Result<ColorOutput> {
    if rgb.visual_map.0.shape() != grs.visual_map.0.shape() {
        return Err(Error::Shape(format!(
            "feature maps {:?} and {:?} differ",
            rgb.visual_map.0.shape(),
            grs.visual_map.0.shape()
        )));
    }
    if rgb.word_matrix.shape() != grs.word_matrix.shape() {
        return Err(Error::Shape(format!(
            "word matrices {:?} and {:?} differ",
            rgb.word_matrix.shape(),
            grs.word_matrix.shape()
        )));
    }
    let store = &model.params;
    let mut g = Graph::new();
    let to_batch = |t: &Tensor| {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.clone().reshape(shape)
    };
    let m_rgb = g.constant(to_batch(&rgb.visual_map.0));
    let m_grs = g.constant(to_batch(&grs.visual_map.0));
    let v_clr = crate::model::visual_color(&mut g, store, m_rgb, m_grs);

    let n = rgb.word_matrix.shape()[0];
    let e_rgb = g.constant(rgb.word_matrix.clone());
    let e_grs = g.constant(grs.word_matrix.clone());
    let prior = prior_enabled.then(|| vec![prior_tokens.iter().map(|t| model.vocab.id(t)).collect::<Vec<_>>()]);
    let t_clr = crate::model::text_color(&mut g, store, e_rgb, e_grs, n, &[n], prior);
    Ok(ColorOutput {
        visual_color: g.value(v_clr).data().to_vec(),
        text_color: g.value(t_clr).data().to_vec(),
    })
}

/// Cosines of every active component; `clr` may be `None` when the color
/// branch is off.
pub fn similarity_bundle(
    rgb: Option<&BranchOutput>,
    grs: Option<&BranchOutput>,
    clr: Option<&ColorOutput>,
    config: &BranchConfig,
) -> Result<SimilarityBundle> {
    let mut bundle = SimilarityBundle::default();
    if config.rgb {
        let rgb = rgb.ok_or_else(|| Error::Config("rgb branch active but no output given".into()))?;
        bundle.global_rgb = Some(cosine(&rgb.visual_global, &rgb.text_global)?);
        bundle.local_rgb = Some(cosine(&rgb.visual_local(), &rgb.text_local())?);
    }
    if config.grs {
        let grs = grs.ok_or_else(|| Error::Config("grs branch active but no output given".into()))?;
        bundle.global_grs = Some(cosine(&grs.visual_global, &grs.text_global)?);
        bundle.local_grs = Some(cosine(&grs.visual_local(), &grs.text_local())?);
    }
    if config.clr {
        let clr = clr.ok_or_else(|| Error::Config("clr branch active but no output given".into()))?;
        bundle.clr = Some(cosine(&clr.visual_color, &clr.text_color)?);
    }
    Ok(bundle.fuse(&config.fusion))
}

/// Channel-wise mean at each spatial position, `[height, width]`.
pub fn response_map(map: &FeatureMap) -> Tensor {
    let (h, w, c) = (map.height(), map.width(), map.channels());
    let data = map
        .0
        .data()
        .chunks_exact(c)
        .map(|px| px.iter().sum::<f64>() / c as f64)
        .collect();
    Tensor::new(vec![h, w], data)
}
