//! Gallery indexing, text-to-image ranking, Rank-k accuracy and the
//! ablation runner.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::branches::{cosine, Branch, BranchConfig, GrsScope, SimilarityBundle};
use crate::color_ops::{RgbImage, TokenSequence};
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::Supervision;
use crate::model::Model;
use crate::tensor::Tensor;
use crate::trainer::{train, TrainConfig, TrainOutputs};

const EVAL_BATCH: usize = 64;

/// Which similarities rank the gallery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Weighted sum of every active component.
    #[default]
    Fused,
    /// Global plus local rgb similarity only.
    RgbOnly,
}

/// Query-independent visual features of one branch for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedVisual {
    pub global: Vec<f64>,
    pub local: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub rgb: Option<CachedVisual>,
    pub grs: Option<CachedVisual>,
    pub clr: Option<Vec<f64>>,
    pub identity: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    pub entries: Vec<GalleryEntry>,
    /// Fingerprint of the parameters the cache was built with.
    pub checkpoint_id: String,
}

/// Hex SHA-256 over parameter names, shapes and values.
pub fn model_fingerprint(model: &Model) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.params.iter() {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, _) = t.rows_cols();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

pub fn build_gallery(model: &Model, images: &[&RgbImage], identities: &[usize]) -> Result<GalleryIndex> {
    if images.len() != identities.len() {
        return Err(Error::SampleCount(format!("{} images for {} identities", images.len(), identities.len())));
    }
    let mut entries = Vec::with_capacity(images.len());
    for (chunk, ids) in images.chunks(EVAL_BATCH).zip(identities.chunks(EVAL_BATCH)) {
        let mut g = Graph::new();
        let v = model.forward_visual(&mut g, chunk)?;
        let cached = |vars: &Option<crate::model::VisualVars>| {
            vars.as_ref().map(|x| {
                rows(g.value(x.global))
                    .into_iter()
                    .zip(rows(g.value(x.local)))
                    .map(|(global, local)| CachedVisual { global, local })
                    .collect::<Vec<_>>()
            })
        };
        let mut rgb = cached(&v.rgb).map(Vec::into_iter);
        let mut grs = cached(&v.grs).map(Vec::into_iter);
        let mut clr = v.clr.map(|c| rows(g.value(c)).into_iter());
        for &identity in ids {
            entries.push(GalleryEntry {
                rgb: rgb.as_mut().and_then(Iterator::next),
                grs: grs.as_mut().and_then(Iterator::next),
                clr: clr.as_mut().and_then(Iterator::next),
                identity,
            });
        }
    }
    Ok(GalleryIndex {
        entries,
        checkpoint_id: model_fingerprint(model),
    })
}

pub fn build_gallery_from_manifest(model: &Model, manifest: &DatasetManifest) -> Result<GalleryIndex> {
    let images: Vec<&RgbImage> = manifest.images.iter().map(|e| &e.image).collect();
    build_gallery(model, &images, &manifest.image_identities())
}

/// Textual features of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeatures {
    pub rgb: Option<(Vec<f64>, Vec<f64>)>,
    pub grs: Option<(Vec<f64>, Vec<f64>)>,
    pub clr: Option<Vec<f64>>,
}

pub fn encode_queries(model: &Model, queries: &[&TokenSequence]) -> Result<Vec<QueryFeatures>> {
    let mut out = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(EVAL_BATCH) {
        let mut g = Graph::new();
        let t = model.forward_text(&mut g, chunk)?;
        let pair = |vars: &Option<crate::model::TextVars>| {
            vars.as_ref()
                .map(|x| rows(g.value(x.global)).into_iter().zip(rows(g.value(x.local))).collect::<Vec<_>>())
        };
        let mut rgb = pair(&t.rgb).map(Vec::into_iter);
        let mut grs = pair(&t.grs).map(Vec::into_iter);
        let mut clr = t.clr.map(|c| rows(g.value(c)).into_iter());
        for _ in chunk {
            out.push(QueryFeatures {
                rgb: rgb.as_mut().and_then(Iterator::next),
                grs: grs.as_mut().and_then(Iterator::next),
                clr: clr.as_mut().and_then(Iterator::next),
            });
        }
    }
    Ok(out)
}

/// Similarity components of one query against one gallery entry.
pub fn score(query: &QueryFeatures, entry: &GalleryEntry, config: &BranchConfig, mode: ScoreMode) -> Result<SimilarityBundle> {
    let mut b = SimilarityBundle::default();
    if let (Some((tg, tl)), Some(v)) = (&query.rgb, &entry.rgb) {
        b.global_rgb = Some(cosine(&v.global, tg)?);
        b.local_rgb = Some(cosine(&v.local, tl)?);
    }
    if mode == ScoreMode::Fused {
        if let (Some((tg, tl)), Some(v)) = (&query.grs, &entry.grs) {
            b.global_grs = Some(cosine(&v.global, tg)?);
            b.local_grs = Some(cosine(&v.local, tl)?);
        }
        if let (Some(t), Some(v)) = (&query.clr, &entry.clr) {
            b.clr = Some(cosine(v, t)?);
        }
    } else if b.global_rgb.is_none() {
        return Err(Error::Config("rgb-only scoring needs the rgb branch".into()));
    }
    Ok(b.fuse(&config.fusion))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankResult {
    /// Gallery indices by descending score.
    pub order: Vec<usize>,
    /// 1-based rank of the first gallery image of the query's identity.
    pub first_correct: Option<usize>,
}

/// Sorts by descending score, ties by ascending gallery index.
pub fn rank_scores(scores: &[f64], gallery_identities: &[usize], identity: usize) -> RankResult {
    // adding zero folds -0.0 into 0.0 so the two count as a tie
    let key: Vec<f64> = scores.iter().map(|s| s + 0.0).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| key[b].total_cmp(&key[a]).then(a.cmp(&b)));
    let first_correct = order.iter().position(|&i| gallery_identities[i] == identity).map(|p| p + 1);
    RankResult { order, first_correct }
}

pub fn rank_queries(
    model: &Model,
    index: &GalleryIndex,
    queries: &[&TokenSequence],
    identities: &[usize],
    mode: ScoreMode,
) -> Result<Vec<RankResult>> {
    if queries.len() != identities.len() {
        return Err(Error::SampleCount(format!("{} queries for {} identities", queries.len(), identities.len())));
    }
    if index.checkpoint_id != model_fingerprint(model) {
        return Err(Error::Config("gallery index was built with different parameters".into()));
    }
    let gallery_ids: Vec<usize> = index.entries.iter().map(|e| e.identity).collect();
    let features = encode_queries(model, queries)?;
    features
        .iter()
        .zip(identities)
        .map(|(q, &id)| {
            let scores = index
                .entries
                .iter()
                .map(|e| score(q, e, &model.config.branches, mode).map(|b| b.fused))
                .collect::<Result<Vec<_>>>()?;
            Ok(rank_scores(&scores, &gallery_ids, id))
        })
        .collect()
}

/// Fraction of queries whose first correct match is within the top `k`.
pub fn rank_k(results: &[RankResult], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if ks.contains(&0) {
        return Err(Error::Config("rank k must be at least 1".into()));
    }
    if ks.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("ks must be sorted ascending".into()));
    }
    if results.is_empty() {
        return Err(Error::Data("no ranking results".into()));
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = results.iter().filter(|r| r.first_correct.is_some_and(|f| f <= k)).count();
            (k, hits as f64 / results.len() as f64)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

/// Ranks every caption of `manifest` against all of its images.
pub fn evaluate(model: &Model, manifest: &DatasetManifest, mode: ScoreMode) -> Result<RankMetrics> {
    let index = build_gallery_from_manifest(model, manifest)?;
    let captions = manifest.captions()?;
    let refs: Vec<&TokenSequence> = captions.iter().collect();
    let ids: Vec<usize> = manifest.records.iter().map(|r| r.identity).collect();
    let results = rank_queries(model, &index, &refs, &ids, mode)?;
    let r = rank_k(&results, &[1, 5, 10])?;
    Ok(RankMetrics {
        r1: r[&1],
        r5: r[&5],
        r10: r[&10],
    })
}

/// One row of the ablation matrix. Unset fields keep the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub id: String,
    pub branches: Vec<Branch>,
    #[serde(default)]
    pub ml_loss: Option<bool>,
    #[serde(default)]
    pub color_prior: Option<bool>,
    #[serde(default)]
    pub grs_scope: Option<GrsScope>,
    #[serde(default)]
    pub supervision: Option<Supervision>,
    #[serde(default)]
    pub detach_grs: Option<bool>,
    #[serde(default)]
    pub score: Option<ScoreMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMatrix {
    #[serde(rename = "row")]
    pub rows: Vec<AblationRow>,
}

impl AblationMatrix {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Config(format!("ablation matrix: {e}")))?;
        if m.rows.is_empty() {
            return Err(Error::Config("ablation matrix has no rows".into()));
        }
        Ok(m)
    }
}

impl AblationRow {
    /// The base config with this row's toggles applied.
    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        let br = &mut cfg.model.branches;
        br.rgb = self.branches.contains(&Branch::Rgb);
        br.grs = self.branches.contains(&Branch::Grs);
        br.clr = self.branches.contains(&Branch::Clr);
        br.color_prior = self.color_prior.unwrap_or(br.color_prior) && br.clr;
        if let Some(scope) = self.grs_scope {
            br.grs_scope = scope;
        }
        if let Some(d) = self.detach_grs {
            br.detach_grs = d;
        }
        if let Some(ml) = self.ml_loss {
            if !ml {
                cfg.loss.mutual_learning = 0.0;
            } else if cfg.loss.mutual_learning == 0.0 {
                cfg.loss.mutual_learning = 1.0;
            }
        }
        if let Some(s) = self.supervision {
            cfg.supervision = s;
        }
        cfg.validate()
            .map_err(|e| Error::Config(format!("ablation row {:?}: {e}", self.id)))?;
        Ok(cfg)
    }

    pub fn describe(&self, cfg: &TrainConfig) -> String {
        let br = &cfg.model.branches;
        let names: Vec<&str> = br.active().iter().map(|b| b.name()).collect();
        format!(
            "{} ml={} prior={} scope={:?} sup={:?}",
            names.join("+"),
            if cfg.loss.mutual_learning > 0.0 { "on" } else { "off" },
            if br.color_prior { "on" } else { "off" },
            br.grs_scope,
            cfg.supervision
        )
        .to_lowercase()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub row: String,
    pub toggles: String,
    pub seed: u64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationReport {
    pub records: Vec<AblationRecord>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl AblationReport {
    /// Mean R@1 per row id.
    pub fn mean_r1(&self, row: &str) -> Option<f64> {
        let v: Vec<f64> = self.records.iter().filter(|r| r.row == row).map(|r| r.r1).collect();
        (!v.is_empty()).then(|| mean_std(&v).0)
    }

    /// Plain-text table, one line per row with mean and spread over seeds.
    pub fn table(&self) -> String {
        let mut rows: Vec<&str> = Vec::new();
        for r in &self.records {
            if !rows.contains(&r.row.as_str()) {
                rows.push(&r.row);
            }
        }
        let mut out = format!("{:<16} {:<52} {:>15} {:>15} {:>15}\n", "row", "toggles", "R@1", "R@5", "R@10");
        for row in rows {
            let recs: Vec<&AblationRecord> = self.records.iter().filter(|r| r.row == row).collect();
            let cell = |f: fn(&AblationRecord) -> f64| {
                let (m, s) = mean_std(&recs.iter().map(|r| f(r)).collect::<Vec<_>>());
                format!("{:.3} ± {:.3}", m, s)
            };
            let _ = writeln!(
                out,
                "{:<16} {:<52} {:>15} {:>15} {:>15}",
                row,
                recs[0].toggles,
                cell(|r| r.r1),
                cell(|r| r.r5),
                cell(|r| r.r10)
            );
        }
        out
    }

    pub fn write(&self, table_path: &Path, records_path: &Path) -> Result<()> {
        fs::write(table_path, self.table())?;
        let mut out = std::io::BufWriter::new(fs::File::create(records_path)?);
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r)?)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Trains and evaluates every row for every seed.
pub fn ablation_run(
    base: &TrainConfig,
    matrix: &AblationMatrix,
    train_set: &DatasetManifest,
    test_set: &DatasetManifest,
    seeds: &[u64],
) -> Result<AblationReport> {
    let configs = matrix
        .rows
        .iter()
        .map(|row| row.apply(base).map(|c| (row, c)))
        .collect::<Result<Vec<_>>>()?;
    let mut report = AblationReport::default();
    for (row, cfg) in configs {
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let (state, _) = train(cfg.clone(), train_set, &TrainOutputs::default())?;
            let m = evaluate(&state.model, test_set, row.score.unwrap_or_default())?;
            report.records.push(AblationRecord {
                row: row.id.clone(),
                toggles: row.describe(&cfg),
                seed,
                r1: m.r1,
                r5: m.r5,
                r10: m.r10,
            });
        }
    }
    Ok(report)
}

/// Writes a min-max normalized binary PGM (each value as a `scale`x`scale`
/// block) and a JSON sidecar with the raw values next to it.
pub fn write_response_map(map: &Tensor, pgm_path: &Path, scale: usize) -> Result<()> {
    let (h, w) = map.rows_cols();
    let scale = scale.max(1);
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{} {}\n255\n", w * scale, h * scale).into_bytes();
    for r in 0..h * scale {
        for c in 0..w * scale {
            let v = map.data()[(r / scale) * w + c / scale];
            bytes.push(((v - lo) / span * 255.0).round() as u8);
        }
    }
    if let Some(parent) = pgm_path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(pgm_path, bytes)?;
    let sidecar = serde_json::json!({
        "height": h,
        "width": w,
        "values": map.data(),
    });
    fs::write(pgm_path.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signed_zeros_tie() {
        let r = rank_scores(&[-0.0, 0.0, -1.0], &[0, 1, 2], 1);
        assert_eq!(r.order, vec![0, 1, 2]);
        assert_eq!(r.first_correct, Some(2));
    }

    #[test]
    fn rank_rules() {
        let r = rank_scores(&[0.1, 0.9], &[0, 1], 1);
        assert_eq!(r.order, vec![1, 0]);
        assert_eq!(r.first_correct, Some(1));
        let tie = rank_scores(&[0.5; 4], &[3, 2, 1, 0], 0);
        assert_eq!(tie.order, vec![0, 1, 2, 3]);
        assert_eq!(tie.first_correct, Some(4));
        assert_eq!(rank_scores(&[0.5], &[1], 0).first_correct, None);
    }

    #[test]
    fn rank_k_examples() {
        let at = |k| RankResult {
            order: vec![],
            first_correct: Some(k),
        };
        let m = rank_k(&[at(1)], &[1]).unwrap();
        assert_eq!(m[&1], 1.0);
        let m = rank_k(&[at(7)], &[5, 10]).unwrap();
        assert_eq!((m[&5], m[&10]), (0.0, 1.0));
        assert!(rank_k(&[at(1)], &[0]).is_err());
        assert!(rank_k(&[at(1)], &[5, 1]).is_err());
    }

    #[test]
    fn matrix_parsing_and_rows() {
        let m = AblationMatrix::from_toml(
            r#"
[[row]]
id = "rgb"
branches = ["rgb"]
ml_loss = false

[[row]]
id = "full"
branches = ["rgb", "grs", "clr"]
"#,
        )
        .unwrap();
        assert_eq!(m.rows.len(), 2);
        let base = TrainConfig::default();
        let rgb = m.rows[0].apply(&base).unwrap();
        assert!(!rgb.model.branches.grs && !rgb.model.branches.color_prior);
        assert_eq!(rgb.loss.mutual_learning, 0.0);
        let bad = AblationRow {
            id: "bad".into(),
            branches: vec![Branch::Rgb, Branch::Clr],
            ml_loss: None,
            color_prior: None,
            grs_scope: None,
            supervision: None,
            detach_grs: None,
            score: None,
        };
        assert!(bad.apply(&base).is_err());
        assert!(AblationMatrix::from_toml("row = []").is_err());
    }

    #[test]
    fn response_map_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.pgm");
        let map = Tensor::new(vec![2, 1], vec![-1.0, 3.0]);
        write_response_map(&map, &p, 2).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n2 4\n255\n"));
        assert_eq!(&bytes[bytes.len() - 8..], &[0, 0, 0, 0, 255, 255, 255, 255]);
        let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.with_extension("json")).unwrap()).unwrap();
        assert_eq!(side["values"][1], 3.0);
    }
}
