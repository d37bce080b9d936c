//! Trains the toy configuration on a synthetic split, printing held-out
//! Rank-k accuracy every five epochs and a breakdown of top-1 misses.
//!
//! Usage: `cargo run --release --example toy_run -- [seed] [instance|identity]`

use std::time::Instant;

use caibc::data::{split_dataset, synth_generate, SplitMode, SynthSpec};
use caibc::eval::{build_gallery_from_manifest, evaluate, rank_queries, ScoreMode};
use caibc::trainer::{TrainConfig, Trainer};

const TOY: &str = include_str!("../../../configs/toy.toml");
const TOY_SYNTH: &str = include_str!("../../../configs/toy_synth.toml");

fn main() -> caibc::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = match args.first() {
        Some(s) => s.parse().map_err(|_| caibc::Error::Config(format!("bad seed {s}")))?,
        None => 0,
    };
    let split = match args.get(1).map_or("instance", String::as_str) {
        "identity" => SplitMode::Identity { test_identities: 10, seed },
        _ => SplitMode::Instance { test_images: 1 },
    };

    let data = synth_generate(&SynthSpec {
        seed,
        ..SynthSpec::from_toml(TOY_SYNTH)?
    })?;
    let (train_set, test_set) = split_dataset(&data, split)?;
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::from_toml(TOY)?
    };
    let epochs = cfg.epochs;
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg, &train_set)?;
    for epoch in 1..=epochs {
        let recs = trainer.run_epoch()?;
        let mean = recs.iter().map(|r| r.losses["total"]).sum::<f64>() / recs.len() as f64;
        if epoch % 5 == 0 || epoch == 1 {
            let m = evaluate(&trainer.state().model, &test_set, ScoreMode::Fused)?;
            println!(
                "epoch {epoch:3} loss {mean:9.4} R@1 {:.3} R@5 {:.3} R@10 {:.3} {:.1}s",
                m.r1,
                m.r5,
                m.r10,
                start.elapsed().as_secs_f64()
            );
        }
    }

    let model = &trainer.state().model;
    let index = build_gallery_from_manifest(model, &test_set)?;
    let captions = test_set.captions()?;
    let ids: Vec<usize> = test_set.records.iter().map(|r| r.identity).collect();
    let results = rank_queries(model, &index, &captions.iter().collect::<Vec<_>>(), &ids, ScoreMode::Fused)?;
    let gallery_ids = test_set.image_identities();
    let (mut twin_miss, mut other_miss) = (0, 0);
    for (r, &id) in results.iter().zip(&ids) {
        if r.first_correct != Some(1) {
            if data.twin[id] == Some(gallery_ids[r.order[0]]) {
                twin_miss += 1;
            } else {
                other_miss += 1;
            }
        }
    }
    println!("top-1 misses: {twin_miss} on the color twin, {other_miss} elsewhere");
    let rgb_only = evaluate(model, &test_set, ScoreMode::RgbOnly)?;
    println!("rgb-only scoring R@1 {:.3}", rgb_only.r1);
    Ok(())
}
