use caibc::branches::{run_clr_branch, run_grs_branch, run_rgb_branch, similarity_bundle, BranchConfig};
use caibc::color_ops::extract_color_prior;
use caibc::data::{synth_generate, SynthSpec};
use caibc::encoders::EncoderConfig;
use caibc::eval::{build_gallery_from_manifest, rank_queries, rank_scores, ScoreMode};
use caibc::model::{Model, ModelConfig};
use caibc::trainer::text_resources;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model(branches: BranchConfig, data: &caibc::data::DatasetManifest) -> Model {
    let caps = data.captions().unwrap();
    let (vocab, bank) = text_resources(&caps, 1).unwrap();
    let config = ModelConfig {
        encoder: EncoderConfig {
            backbone_channels: vec![4, 4, 4, 8],
            embed_dim: 8,
            proj_dim: 8,
            parts: 2,
            ..EncoderConfig::default()
        },
        branches,
        ..ModelConfig::default()
    };
    Model::new(config, vocab, bank, data.num_identities, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
}

fn dataset() -> caibc::data::DatasetManifest {
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
fn cached_gallery_matches_per_pair_scoring() {
    let data = dataset();
    for branches in [
        BranchConfig::default(),
        BranchConfig {
            clr: false,
            color_prior: false,
            ..BranchConfig::default()
        },
    ] {
        let model = small_model(branches.clone(), &data);
        let index = build_gallery_from_manifest(&model, &data).unwrap();
        let caps = data.captions().unwrap();
        let refs: Vec<_> = caps.iter().collect();
        let ids: Vec<usize> = data.records.iter().map(|r| r.identity).collect();
        let cached = rank_queries(&model, &index, &refs, &ids, ScoreMode::Fused).unwrap();
        let gallery_ids = data.image_identities();

        for (q, (caption, &id)) in caps.iter().zip(&ids).enumerate() {
            let scores: Vec<f64> = data
                .images
                .iter()
                .map(|entry| {
                    let rgb = run_rgb_branch(&model, &entry.image, caption).unwrap();
                    let grs = run_grs_branch(&model, &entry.image, caption, &model.bank).unwrap();
                    let clr = branches.clr.then(|| {
                        let prior = extract_color_prior(caption, &model.bank);
                        run_clr_branch(&model, &rgb, &grs, &prior, branches.color_prior).unwrap()
                    });
                    similarity_bundle(Some(&rgb), Some(&grs), clr.as_ref(), &branches).unwrap().fused
                })
                .collect();
            assert_eq!(cached[q], rank_scores(&scores, &gallery_ids, id));
        }
    }
}

#[test]
fn stale_index_is_rejected() {
    let data = dataset();
    let model = small_model(BranchConfig::default(), &data);
    let index = build_gallery_from_manifest(&model, &data).unwrap();
    let mut other = model.clone();
    other.params.get_mut("clr.text.bias").unwrap().data_mut()[0] += 1.0;
    let caps = data.captions().unwrap();
    let refs: Vec<_> = caps.iter().collect();
    let ids: Vec<usize> = data.records.iter().map(|r| r.identity).collect();
    assert!(rank_queries(&other, &index, &refs, &ids, ScoreMode::Fused).is_err());
}

proptest! {
    #[test]
    fn permuting_the_gallery_keeps_the_first_hit(
        raw in prop::collection::vec((0u32..1_000_000, 0usize..8), 2..40),
        perm_seed in any::<u64>(),
        id in 0usize..8,
    ) {
        // distinct scores
        let scores: Vec<f64> = raw.iter().enumerate().map(|(i, (s, _))| *s as f64 + i as f64 * 1e-7).collect();
        let ids: Vec<usize> = raw.iter().map(|(_, g)| *g).collect();
        let mut perm: Vec<usize> = (0..scores.len()).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(perm_seed));
        let a = rank_scores(&scores, &ids, id);
        let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let pi: Vec<usize> = perm.iter().map(|&i| ids[i]).collect();
        let b = rank_scores(&ps, &pi, id);
        prop_assert_eq!(a.first_correct, b.first_correct);
        let mapped: Vec<usize> = b.order.iter().map(|&j| perm[j]).collect();
        prop_assert_eq!(mapped, a.order);
    }
}
