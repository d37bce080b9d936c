//! Training objectives: identity classification, cross-branch mutual
//! learning, and batch-hard bidirectional triplet ranking.
//!
//! The free functions on plain values are the reference definitions; the
//! `graph_*` functions build the same quantities on a [`Graph`] for training.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::branches::Branch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{Model, TextFeatures, VisualFeatures};
use crate::tensor::Tensor;

/// Probability floor inside the logarithms of the mutual-learning loss.
pub const KL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `[M, P]`
    pub weights: Tensor,
    pub scale: f64,
}

impl ClassifierHead {
    pub fn new(weights: Tensor, scale: f64) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::Shape("classifier weights must be [classes, dim]".into()));
        }
        if !(scale > 0.0) {
            return Err(Error::Config(format!("classifier scale must be positive, got {scale}")));
        }
        Ok(Self { weights, scale })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(pub Vec<f64>);

impl ProbDist {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

pub fn class_probs(feature: &[f64], head: &ClassifierHead) -> Result<ProbDist> {
    if feature.len() != head.dim() {
        return Err(Error::Shape(format!(
            "feature of length {} for classifier of width {}",
            feature.len(),
            head.dim()
        )));
    }
    let logits: Vec<f64> = (0..head.num_classes())
        .map(|m| head.scale * head.weights.row(m).iter().zip(feature).map(|(w, f)| w * f).sum::<f64>())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    Ok(ProbDist(exp.into_iter().map(|e| e / total).collect()))
}

fn kl(p: &ProbDist, q: &ProbDist) -> f64 {
    p.0.iter()
        .zip(&q.0)
        .map(|(&a, &b)| a * (a.max(KL_EPS).ln() - b.max(KL_EPS).ln()))
        .sum()
}

/// Per-branch mutual-learning loss:
/// `L[br] = 1/2 * sum_{s != br} sum_i (KL(pv_br_i || pv_s_i) + KL(pt_br_i || pt_s_i))`.
/// Each branch supplies (visual, textual) distributions for the same samples.
pub fn mutual_learning_loss(
    branch_probs: &BTreeMap<Branch, (Vec<ProbDist>, Vec<ProbDist>)>,
) -> Result<BTreeMap<Branch, f64>> {
    let mut counts = branch_probs.values().flat_map(|(v, t)| [v.len(), t.len()]);
    if let Some(first) = counts.next() {
        if counts.any(|c| c != first) {
            return Err(Error::SampleCount("branches supply different sample counts".into()));
        }
    }
    let mut out = BTreeMap::new();
    for (br, (pv, pt)) in branch_probs {
        let mut total = 0.0;
        for (s, (qv, qt)) in branch_probs {
            if s == br {
                continue;
            }
            for i in 0..pv.len() {
                total += kl(&pv[i], &qv[i]) + kl(&pt[i], &qt[i]);
            }
        }
        out.insert(*br, 0.5 * total);
    }
    Ok(out)
}

/// Mean negative log-likelihood of the true identities.
pub fn id_loss(features: &[Vec<f64>], labels: &[usize], head: &ClassifierHead) -> Result<f64> {
    if features.len() != labels.len() {
        return Err(Error::SampleCount(format!("{} features for {} labels", features.len(), labels.len())));
    }
    let mut total = 0.0;
    for (f, &y) in features.iter().zip(labels) {
        if y >= head.num_classes() {
            return Err(Error::Label {
                label: y,
                classes: head.num_classes(),
            });
        }
        total -= class_probs(f, head)?.0[y].ln();
    }
    Ok(total / features.len() as f64)
}

/// Mean hinge `max(0, margin - pos + neg)` over anchors.
pub fn triplet_loss(sims_pos: &[f64], sims_neg: &[f64], margin: f64) -> Result<f64> {
    if sims_pos.len() != sims_neg.len() {
        return Err(Error::SampleCount("positive and negative similarity lists differ in length".into()));
    }
    if sims_pos.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = sims_pos.iter().zip(sims_neg).map(|(p, n)| (margin - p + n).max(0.0)).sum();
    Ok(total / sims_pos.len() as f64)
}

/// Average of the query-to-image and image-to-query triplet losses.
pub fn bidirectional_triplet_loss(t2i: (&[f64], &[f64]), i2t: (&[f64], &[f64]), margin: f64) -> Result<f64> {
    Ok(0.5 * (triplet_loss(t2i.0, t2i.1, margin)? + triplet_loss(i2t.0, i2t.1, margin)?))
}

/// `((pos_row, pos_col), (neg_row, neg_col))` in a similarity matrix.
pub type HingePair = ((usize, usize), (usize, usize));

/// Hardest positive (lowest similarity, same group) and hardest negative
/// (highest similarity, other group) per anchor of a `[texts, images]`
/// similarity matrix, in both directions. Anchors without a negative are
/// skipped. Returns `(t2i pairs, i2t pairs)` as `((pos_row, pos_col), (neg_row, neg_col))`.
pub fn mine_batch_hard(sims: &Tensor, groups: &[usize]) -> (Vec<HingePair>, Vec<HingePair>) {
    let n = groups.len();
    assert_eq!(sims.shape(), &[n, n]);
    let s = |r: usize, c: usize| sims.data()[r * n + c];
    let mut t2i = Vec::new();
    let mut i2t = Vec::new();
    for a in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if groups[j] == groups[a] {
                if pos.is_none_or(|p| s(a, j) < s(a, p)) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| s(a, j) > s(a, q)) {
                neg = Some(j);
            }
        }
        if let (Some(p), Some(q)) = (pos, neg) {
            t2i.push(((a, p), (a, q)));
        }
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for i in 0..n {
            if groups[i] == groups[a] {
                if pos.is_none_or(|p| s(i, a) < s(p, a)) {
                    pos = Some(i);
                }
            } else if neg.is_none_or(|q| s(i, a) > s(q, a)) {
                neg = Some(i);
            }
        }
        if let (Some(p), Some(q)) = (pos, neg) {
            i2t.push(((p, a), (q, a)));
        }
    }
    (t2i, i2t)
}

fn graph_hinge(g: &mut Graph, sims: Var, pairs: &[HingePair], margin: f64) -> Option<Var> {
    if pairs.is_empty() {
        return None;
    }
    let pos = g.pick(sims, pairs.iter().map(|p| p.0).collect());
    let neg = g.pick(sims, pairs.iter().map(|p| p.1).collect());
    let diff = g.sub(neg, pos);
    let shifted = g.add_const(diff, margin);
    let hinge = g.relu(shifted);
    Some(g.mean(hinge))
}

/// Batch-hard bidirectional triplet loss between `[B, D]` visual and textual
/// features; rows sharing a group id are positives.
pub fn graph_triplet_loss(g: &mut Graph, visual: Var, text: Var, groups: &[usize], margin: f64) -> Var {
    let vn = g.row_normalize(visual);
    let tn = g.row_normalize(text);
    let sims = g.matmul_nt(tn, vn);
    let (t2i, i2t) = mine_batch_hard(g.value(sims), groups);
    let terms: Vec<Var> = [graph_hinge(g, sims, &t2i, margin), graph_hinge(g, sims, &i2t, margin)]
        .into_iter()
        .flatten()
        .collect();
    let sum = g.add_all(&terms);
    g.scale(sum, 0.5)
}

/// `scale * feature @ W^T`
pub fn graph_logits(g: &mut Graph, feature: Var, weights: Var, scale: Var) -> Var {
    let raw = g.matmul_nt(feature, weights);
    g.scale_by(raw, scale)
}

/// Graph form of the per-branch mutual-learning loss from class logits.
pub fn graph_mutual_learning(g: &mut Graph, logits: &BTreeMap<Branch, (Var, Var)>) -> BTreeMap<Branch, Var> {
    let probs: BTreeMap<Branch, (Var, Var)> = logits
        .iter()
        .map(|(b, (v, t))| {
            let pv = g.softmax(*v);
            let pt = g.softmax(*t);
            (*b, (pv, pt))
        })
        .collect();
    let mut out = BTreeMap::new();
    for (br, (pv, pt)) in &probs {
        let mut terms = Vec::new();
        for (s, (qv, qt)) in &probs {
            if s == br {
                continue;
            }
            terms.push(g.kl_div(*pv, *qv, KL_EPS));
            terms.push(g.kl_div(*pt, *qt, KL_EPS));
        }
        let sum = g.add_all(&terms);
        out.insert(*br, g.scale(sum, 0.5));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// Identity labels drive the ID loss and triplet positives.
    Full,
    /// Only image-caption pairing is known; ID terms are dropped.
    Weak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mutual_learning: f64,
    pub id: f64,
    pub triplet: f64,
    pub margin: f64,
    /// Include the color branch features in the ID and triplet terms.
    pub clr_reid: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mutual_learning: 1.0,
            id: 1.0,
            triplet: 1.0,
            margin: 0.2,
            clr_reid: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.mutual_learning, self.id, self.triplet, self.margin].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("loss weights and margin must be non-negative".into()));
        }
        Ok(())
    }
}

/// Total loss node plus the named (unweighted) terms it was built from.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Var,
    pub terms: BTreeMap<String, Var>,
}

impl LossBreakdown {
    pub fn values(&self, g: &Graph) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = self.terms.iter().map(|(k, v)| (k.clone(), g.value(*v).item())).collect();
        out.insert("total".into(), g.value(self.total).item());
        out
    }
}

/// Weighted sum of every active objective.
///
/// Full supervision: ID loss on the global features of each active branch
/// and on every rgb/grs part feature; triplet loss on global and
/// concatenated local features of rgb/grs and on the color pair; mutual
/// learning across the branches' global features. Weak supervision drops
/// all ID terms and reads `labels` as image indices, so a caption's
/// positives are the copies of the image it describes.
pub fn total_loss(
    g: &mut Graph,
    model: &Model,
    visual: &VisualFeatures,
    text: &TextFeatures,
    labels: &[usize],
    weights: &LossWeights,
    supervision: Supervision,
) -> Result<LossBreakdown> {
    let store = &model.params;
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.num_classes) {
        if supervision == Supervision::Full {
            return Err(Error::Label {
                label: bad,
                classes: model.num_classes,
            });
        }
    }
    let groups = labels.to_vec();
    let use_id = supervision == Supervision::Full && weights.id > 0.0;
    let scale = g.param(store, "head.scale");
    let mut terms: BTreeMap<String, Var> = BTreeMap::new();
    let mut id_terms = Vec::new();
    let mut tri_terms = Vec::new();
    let mut global_logits: BTreeMap<Branch, (Var, Var)> = BTreeMap::new();

    let ce_pair = |g: &mut Graph, lv: Var, lt: Var| -> Var {
        let cv = g.cross_entropy(lv, labels.to_vec());
        let ct = g.cross_entropy(lt, labels.to_vec());
        g.add(cv, ct)
    };
    let id_pair = |g: &mut Graph, head: &str, v: Var, t: Var| -> Var {
        let w = g.param(store, head);
        let lv = graph_logits(g, v, w, scale);
        let lt = graph_logits(g, t, w, scale);
        ce_pair(g, lv, lt)
    };

    for branch in [Branch::Rgb, Branch::Grs] {
        let (Some(v), Some(t)) = (
            if branch == Branch::Rgb { &visual.rgb } else { &visual.grs },
            if branch == Branch::Rgb { &text.rgb } else { &text.grs },
        ) else {
            continue;
        };
        let head = model.head_name(branch, "global");
        let w = g.param(store, &head);
        let lv = graph_logits(g, v.global, w, scale);
        let lt = graph_logits(g, t.global, w, scale);
        global_logits.insert(branch, (lv, lt));
        if use_id {
            let global = ce_pair(g, lv, lt);
            terms.insert(format!("id.{branch}.global"), global);
            id_terms.push(global);
            let parts: Vec<Var> = (0..v.parts.len())
                .map(|k| id_pair(g, &model.head_name(branch, &format!("part{k}")), v.parts[k], t.parts[k]))
                .collect();
            let parts = g.add_all(&parts);
            terms.insert(format!("id.{branch}.parts"), parts);
            id_terms.push(parts);
        }
        if weights.triplet > 0.0 {
            let tg = graph_triplet_loss(g, v.global, t.global, &groups, weights.margin);
            let tl = graph_triplet_loss(g, v.local, t.local, &groups, weights.margin);
            terms.insert(format!("tri.{branch}.global"), tg);
            terms.insert(format!("tri.{branch}.local"), tl);
            tri_terms.extend([tg, tl]);
        }
    }
    if let (Some(v), Some(t)) = (visual.clr, text.clr) {
        let head = model.head_name(Branch::Clr, "global");
        let w = g.param(store, &head);
        let lv = graph_logits(g, v, w, scale);
        let lt = graph_logits(g, t, w, scale);
        global_logits.insert(Branch::Clr, (lv, lt));
        if weights.clr_reid {
            if use_id {
                let id = ce_pair(g, lv, lt);
                terms.insert("id.clr".into(), id);
                id_terms.push(id);
            }
            if weights.triplet > 0.0 {
                let tri = graph_triplet_loss(g, v, t, &groups, weights.margin);
                terms.insert("tri.clr".into(), tri);
                tri_terms.push(tri);
            }
        }
    }

    let mut weighted = Vec::new();
    if weights.mutual_learning > 0.0 && global_logits.len() > 1 {
        let ml = graph_mutual_learning(g, &global_logits);
        let per_branch: Vec<Var> = ml.values().copied().collect();
        for (b, v) in ml {
            terms.insert(format!("ml.{b}"), v);
        }
        let ml = g.add_all(&per_branch);
        weighted.push(g.scale(ml, weights.mutual_learning));
    }
    if !id_terms.is_empty() {
        let id = g.add_all(&id_terms);
        weighted.push(g.scale(id, weights.id));
    }
    if !tri_terms.is_empty() {
        let tri = g.add_all(&tri_terms);
        weighted.push(g.scale(tri, weights.triplet));
    }
    let total = g.add_all(&weighted);
    Ok(LossBreakdown { total, terms })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(rows: &[Vec<f64>], scale: f64) -> ClassifierHead {
        ClassifierHead::new(Tensor::from_rows(rows), scale).unwrap()
    }

    #[test]
    fn class_probs_examples() {
        let zero = head(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]], 16.0);
        let p = class_probs(&[1.0, 2.0], &zero).unwrap();
        assert!(p.probs().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));

        let tiny = head(&[vec![1.0, 0.0], vec![0.0, 5.0]], 1e-12);
        let p = class_probs(&[3.0, 2.0], &tiny).unwrap();
        assert!(p.probs().iter().all(|v| (v - 0.5).abs() < 1e-9));

        // logits (0, ln 3)
        let h = head(&[vec![0.0], vec![3f64.ln()]], 1.0);
        let p = class_probs(&[1.0], &h).unwrap();
        assert!((p.probs()[0] - 0.25).abs() < 1e-12 && (p.probs()[1] - 0.75).abs() < 1e-12);

        assert!(class_probs(&[1.0, 2.0, 3.0], &h).is_err());
        assert!(ClassifierHead::new(Tensor::zeros(&[2, 2]), 0.0).is_err());
    }

    fn pd(v: &[f64]) -> ProbDist {
        ProbDist(v.to_vec())
    }

    #[test]
    fn mutual_learning_examples() {
        let mut same = BTreeMap::new();
        for b in Branch::ALL {
            same.insert(b, (vec![pd(&[0.2, 0.8])], vec![pd(&[0.6, 0.4])]));
        }
        assert!(mutual_learning_loss(&same).unwrap().values().all(|&v| v.abs() < 1e-15));

        let mut two = BTreeMap::new();
        two.insert(Branch::Rgb, (vec![pd(&[0.5, 0.5])], vec![pd(&[0.3, 0.7])]));
        two.insert(Branch::Grs, (vec![pd(&[0.25, 0.75])], vec![pd(&[0.3, 0.7])]));
        let l = mutual_learning_loss(&two).unwrap();
        let expected = 0.5 * (0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln());
        assert!((l[&Branch::Rgb] - expected).abs() < 1e-12);
        assert!((l[&Branch::Rgb] - 0.07192).abs() < 1e-5);

        let mut bad = two.clone();
        bad.insert(Branch::Clr, (vec![], vec![]));
        assert!(matches!(mutual_learning_loss(&bad), Err(Error::SampleCount(_))));
    }

    #[test]
    fn id_loss_examples() {
        let confident = head(&[vec![100.0], vec![-100.0]], 1.0);
        assert!(id_loss(&[vec![1.0]], &[0], &confident).unwrap() < 1e-12);
        let uniform = head(&[vec![0.0], vec![0.0], vec![0.0], vec![0.0]], 1.0);
        let l = id_loss(&[vec![1.0], vec![-2.0]], &[0, 3], &uniform).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(id_loss(&[vec![1.0]], &[4], &uniform), Err(Error::Label { label: 4, classes: 4 })));
        assert!(id_loss(&[vec![1.0]], &[0, 1], &uniform).is_err());
    }

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet_loss(&[0.9], &[0.2], 0.3).unwrap(), 0.0);
        assert!((triplet_loss(&[0.4], &[0.4], 0.3).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(triplet_loss(&[0.5, 0.9], &[0.5, 0.1], 0.0).unwrap(), 0.0);
        assert!(triplet_loss(&[0.5], &[], 0.1).is_err());
        let b = bidirectional_triplet_loss((&[0.4], &[0.4]), (&[0.9], &[0.2]), 0.3).unwrap();
        assert!((b - 0.15).abs() < 1e-12);
    }

    #[test]
    fn batch_hard_mining_picks_extremes() {
        let sims = Tensor::from_rows(&[
            vec![0.9, 0.2, 0.7, 0.1],
            vec![0.3, 0.8, 0.4, 0.6],
            vec![0.5, 0.1, 0.6, 0.2],
            vec![0.0, 0.9, 0.3, 0.4],
        ]);
        let groups = [0, 1, 0, 1];
        let (t2i, i2t) = mine_batch_hard(&sims, &groups);
        // text 0: positives {0: .9, 2: .7} -> 2; negatives {1: .2, 3: .1} -> 1
        assert_eq!(t2i[0], ((0, 2), (0, 1)));
        // image 1: positive texts {1: .8, 3: .9} -> 1; negative texts {0: .2, 2: .1} -> 0
        assert_eq!(i2t[1], ((1, 1), (0, 1)));

        let (t2i, _) = mine_batch_hard(&sims, &[0, 1, 2, 3]);
        assert_eq!(t2i[0], ((0, 0), (0, 2)));
        let (t2i, i2t) = mine_batch_hard(&sims, &[0, 0, 0, 0]);
        assert!(t2i.is_empty() && i2t.is_empty());
    }

    #[test]
    fn graph_losses_match_reference() {
        let mut g = Graph::new();
        let feats = Tensor::from_rows(&[vec![0.3, -0.2], vec![1.0, 0.5], vec![-0.4, 0.9]]);
        let w = Tensor::from_rows(&[vec![0.5, 0.1], vec![-0.3, 0.8], vec![0.2, -0.6]]);
        let h = ClassifierHead::new(w.clone(), 2.0).unwrap();
        let fv = g.constant(feats.clone());
        let wv = g.constant(w);
        let sv = g.constant(Tensor::scalar(2.0));
        let logits = graph_logits(&mut g, fv, wv, sv);
        let ce = g.cross_entropy(logits, vec![0, 2, 1]);
        let rows: Vec<Vec<f64>> = (0..3).map(|i| feats.row(i).to_vec()).collect();
        let reference = id_loss(&rows, &[0, 2, 1], &h).unwrap();
        assert!((g.value(ce).item() - reference).abs() < 1e-12);

        let probs = g.softmax(logits);
        for i in 0..3 {
            let p = class_probs(&rows[i], &h).unwrap();
            for m in 0..3 {
                assert!((g.value(probs).row(i)[m] - p.0[m]).abs() < 1e-12);
            }
        }
    }
}
