//! `caibc` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error,
//! 4 runtime error (divergence, failed audit, numerical failure).

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use caibc::audit::{run_audit, AuditConfig, AuditDims};
use caibc::checkpoint::{load_model, load_state};
use caibc::color_ops::RgbImage;
use caibc::data::{load_manifest, read_ppm, save_manifest, split_dataset, synth_generate, DatasetManifest, SplitMode, SynthSpec};
use caibc::encoders::split_feature_maps;
use caibc::eval::{ablation_run, evaluate, write_response_map, AblationMatrix, RankMetrics, ScoreMode};
use caibc::graph::Graph;
use caibc::trainer::{run, TrainOutputs, Trainer};
use caibc::{branches, Error};
use clap::{Parser, Subcommand, ValueEnum};
use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "caibc", version, about = "Color-aware text-to-image person retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Instance,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScoreArg {
    Fused,
    RgbOnly,
}

impl From<ScoreArg> for ScoreMode {
    fn from(s: ScoreArg) -> Self {
        match s {
            ScoreArg::Fused => ScoreMode::Fused,
            ScoreArg::RgbOnly => ScoreMode::RgbOnly,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write train/test manifests.
    Generate {
        /// Generator spec (TOML).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "instance")]
        split: SplitArg,
        /// Held-out images per identity (instance split).
        #[arg(long, default_value_t = 1)]
        test_images: usize,
        /// Held-out identities (identity split).
        #[arg(long, default_value_t = 10)]
        test_identities: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the run directory.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Training manifest (overrides [data].train).
        #[arg(long)]
        train: Option<PathBuf>,
        /// Test manifest evaluated after training (overrides [data].test).
        #[arg(long)]
        test: Option<PathBuf>,
        /// Resume from a training checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank every caption of a manifest against its images.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fusion_weights: Option<String>,
        #[arg(long, value_enum, default_value = "fused")]
        score: ScoreArg,
        /// Accepted for uniformity; evaluation is deterministic.
        #[arg(long)]
        seed: Option<u64>,
        /// Report file (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every row of an ablation matrix for every seed.
    Ablate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every loss term and encoder op.
    Audit {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export mean-activation response maps of one image.
    Respmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PPM image; alternatively --manifest with --index.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Pixel block size of each map cell in the PGM.
        #[arg(long, default_value_t = 8)]
        scale: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Version { .. } | Error::Partition { .. } | Error::EmptyBank { .. } => 2,
            Error::Data(_)
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::Label { .. }
            | Error::SampleCount(_)
            | Error::EmptySequence => 3,
            _ => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn run_dir(out: &Path) -> CliResult<()> {
    for sub in ["checkpoints", "logs", "reports"] {
        fs::create_dir_all(out.join(sub)).map_err(Error::from)?;
    }
    Ok(())
}

/// Train and optional test manifests from flags, the [data] table, or a
/// generated synthetic dataset.
fn datasets(cfg: &RunConfig, train: Option<PathBuf>, test: Option<PathBuf>) -> CliResult<(DatasetManifest, Option<DatasetManifest>)> {
    let train = train.or_else(|| cfg.data.train.clone());
    let test = test.or_else(|| cfg.data.test.clone());
    if let Some(path) = train {
        let test = test.map(|p| load_manifest(&p)).transpose()?;
        return Ok((load_manifest(&path)?, test));
    }
    if let Some(spec) = &cfg.data.synth {
        let data = synth_generate(spec)?;
        let (tr, te) = split_dataset(&data, cfg.data.split.unwrap_or_default())?;
        return Ok((tr, Some(te)));
    }
    Err(Error::Config("no training data: pass --train or set [data] in the config".into()).into())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

fn print_metrics(label: &str, m: &RankMetrics) {
    println!("{label}: R@1 {:.4}  R@5 {:.4}  R@10 {:.4}", m.r1, m.r5, m.r10);
}

fn generate(
    spec: Option<PathBuf>,
    seed: Option<u64>,
    split: SplitArg,
    test_images: usize,
    test_identities: usize,
    out: &Path,
) -> CliResult<()> {
    let mut spec = match spec {
        Some(p) => {
            let text = fs::read_to_string(&p)
                .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", p.display())))?;
            SynthSpec::from_toml(&text)?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = synth_generate(&spec)?;
    let mode = match split {
        SplitArg::Instance => SplitMode::Instance { test_images },
        SplitArg::Identity => SplitMode::Identity {
            test_identities,
            seed: spec.seed,
        },
    };
    let (train, test) = split_dataset(&data, mode)?;
    fs::create_dir_all(out).map_err(Error::from)?;
    let tr = save_manifest(&train, out, "train.jsonl")?;
    let te = save_manifest(&test, out, "test.jsonl")?;
    let attrs: Vec<_> = data
        .attributes
        .iter()
        .zip(&data.twin)
        .map(|(a, t)| serde_json::json!({ "attributes": a, "twin": t }))
        .collect();
    write_json(&out.join("identities.json"), &attrs)?;
    fs::write(out.join("spec.toml"), toml::to_string_pretty(&spec).map_err(|e| Error::Config(e.to_string()))?)
        .map_err(Error::from)?;
    println!(
        "wrote {} ({} records) and {} ({} records)",
        tr.display(),
        train.records.len(),
        te.display(),
        test.records.len()
    );
    Ok(())
}

fn train_cmd(
    overrides: &Overrides,
    train: Option<PathBuf>,
    test: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: &Path,
) -> CliResult<()> {
    let cfg = RunConfig::layered(overrides)?;
    let (train_set, test_set) = datasets(&cfg, train, test)?;
    run_dir(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(Error::from)?;
    let outputs = TrainOutputs {
        metrics: Some(out.join("logs").join("metrics.jsonl")),
        checkpoints: Some(out.join("checkpoints")),
    };
    let mut trainer = match checkpoint {
        Some(p) => {
            let mut state = load_state(&p)?;
            state.config.epochs = cfg.train.epochs.max(state.epoch);
            Trainer::resume(state, &train_set)?
        }
        None => Trainer::new(cfg.train.clone(), &train_set)?,
    };
    let history = run(&mut trainer, &outputs)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!(
            "trained {} steps: loss {:.4} -> {:.4}",
            history.len(),
            first.losses["total"],
            last.losses["total"]
        );
    }
    if let Some(test_set) = test_set {
        let model = &trainer.state().model;
        let fused = evaluate(model, &test_set, ScoreMode::Fused)?;
        print_metrics("test (fused)", &fused);
        let mut report = serde_json::json!({ "fused": fused });
        if model.config.branches.rgb {
            let rgb = evaluate(model, &test_set, ScoreMode::RgbOnly)?;
            print_metrics("test (rgb only)", &rgb);
            report["rgb_only"] = serde_json::to_value(rgb).map_err(Error::from)?;
        }
        write_json(&out.join("reports").join("metrics.json"), &report)?;
    }
    Ok(())
}

fn eval_cmd(checkpoint: &Path, manifest: &Path, fusion: Option<String>, score: ScoreArg, out: Option<PathBuf>) -> CliResult<()> {
    let mut model = load_model(checkpoint)?;
    if let Some(w) = fusion {
        model.config.branches.fusion = branches::FusionWeights::parse(&w)?;
    }
    let data = load_manifest(manifest)?;
    let m = evaluate(&model, &data, score.into())?;
    print_metrics("eval", &m);
    if let Some(path) = out {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(Error::from)?;
        }
        write_json(&path, &m)?;
    }
    Ok(())
}

fn ablate(overrides: &Overrides, matrix: &Path, seeds: &[u64], train: Option<PathBuf>, test: Option<PathBuf>, out: &Path) -> CliResult<()> {
    let cfg = RunConfig::layered(overrides)?;
    let text = fs::read_to_string(matrix)
        .map_err(|e| Error::Config(format!("cannot read matrix {}: {e}", matrix.display())))?;
    let matrix = AblationMatrix::from_toml(&text)?;
    let (train_set, test_set) = datasets(&cfg, train, test)?;
    let test_set = test_set.ok_or_else(|| Error::Config("ablation needs a test manifest".into()))?;
    run_dir(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(Error::from)?;
    let report = ablation_run(&cfg.train, &matrix, &train_set, &test_set, seeds)?;
    let reports = out.join("reports");
    report.write(&reports.join("ablation.txt"), &reports.join("ablation.jsonl"))?;
    print!("{}", report.table());
    Ok(())
}

fn audit(seed: Option<u64>, out: Option<PathBuf>) -> CliResult<()> {
    let cfg = AuditConfig {
        seed: seed.unwrap_or(0),
        ..AuditConfig::default()
    };
    let report = run_audit(&AuditDims::default(), &cfg)?;
    print!("{}", report.table());
    if let Some(path) = out {
        write_json(&path, &report)?;
    }
    if !report.passed() {
        return Err(Failure {
            code: 4,
            message: format!("gradient audit failed (max relative error {:.3e})", report.max_rel_err()),
        });
    }
    Ok(())
}

fn respmap(checkpoint: &Path, image: Option<PathBuf>, manifest: Option<PathBuf>, index: usize, scale: usize, out: &Path) -> CliResult<()> {
    let model = load_model(checkpoint)?;
    let image: RgbImage = match (image, manifest) {
        (Some(p), _) => read_ppm(&p)?,
        (None, Some(m)) => {
            let data = load_manifest(&m)?;
            data.images
                .get(index)
                .ok_or_else(|| Error::Data(format!("image index {index} out of range ({} images)", data.images.len())))?
                .image
                .clone()
        }
        (None, None) => return Err(Error::Config("pass --image or --manifest".into()).into()),
    };
    let mut g = Graph::new();
    let v = model.forward_visual(&mut g, &[&image])?;
    fs::create_dir_all(out).map_err(Error::from)?;
    let mut maps = Vec::new();
    if let Some(rgb) = &v.rgb {
        maps.push(("rgb", split_feature_maps(g.value(rgb.map)).remove(0)));
    }
    if let Some(grs) = &v.grs {
        maps.push(("grs", split_feature_maps(g.value(grs.map)).remove(0)));
    }
    if let (Some(rgb), Some(grs)) = (&v.rgb, &v.grs) {
        let diff = g.sub(rgb.map, grs.map);
        maps.push(("clr", split_feature_maps(g.value(diff)).remove(0)));
    }
    let mut values = serde_json::Map::new();
    for (name, map) in maps {
        let resp = branches::response_map(&map);
        let path = out.join(format!("{name}.pgm"));
        write_response_map(&resp, &path, scale)?;
        println!("wrote {}", path.display());
        let (h, w) = resp.rows_cols();
        values.insert(name.into(), serde_json::json!({ "height": h, "width": w, "values": resp.data() }));
    }
    write_json(&out.join("maps.json"), &values)
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate {
            spec,
            seed,
            split,
            test_images,
            test_identities,
            out,
        } => generate(spec, seed, split, test_images, test_identities, &out),
        Command::Train {
            overrides,
            train,
            test,
            checkpoint,
            out,
        } => train_cmd(&overrides, train, test, checkpoint, &out),
        Command::Eval {
            checkpoint,
            manifest,
            fusion_weights,
            score,
            seed: _,
            out,
        } => eval_cmd(&checkpoint, &manifest, fusion_weights, score, out),
        Command::Ablate {
            overrides,
            matrix,
            seeds,
            train,
            test,
            out,
        } => ablate(&overrides, &matrix, &seeds, train, test, &out),
        Command::Audit { seed, out } => audit(seed, out),
        Command::Respmap {
            checkpoint,
            image,
            manifest,
            index,
            scale,
            seed: _,
            out,
        } => respmap(&checkpoint, image, manifest, index, scale, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
