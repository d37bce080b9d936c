use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn caibc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caibc"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn caibc")
}

fn small_spec(dir: &Path) {
    fs::write(
        dir.join("spec.toml"),
        "format = \"caibc-synth/1\"\nidentities = 12\nimages_per_identity = 3\ncaptions_per_image = 2\nambiguity = 0.5\nseed = 4\n",
    )
    .unwrap();
    fs::write(
        dir.join("run.toml"),
        "epochs = 1\nbatch_size = 8\nids_per_batch = 4\n\n[model.encoder]\ninput_height = 48\ninput_width = 16\nbackbone_channels = [4, 4, 8, 8]\nbackbone_strides = [2, 2, 2, 1]\nembed_dim = 8\nproj_dim = 8\nparts = 2\n",
    )
    .unwrap();
}

fn generate(dir: &Path) {
    small_spec(dir);
    let out = caibc(&["generate", "--spec", "spec.toml", "--out", "data"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_writes_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path());
    for f in ["train.jsonl", "test.jsonl", "identities.json", "spec.toml"] {
        assert!(tmp.path().join("data").join(f).exists(), "{f} missing");
    }
    let again = tempfile::tempdir().unwrap();
    generate(again.path());
    assert_eq!(
        fs::read(tmp.path().join("data/train.jsonl")).unwrap(),
        fs::read(again.path().join("data/train.jsonl")).unwrap()
    );
}

#[test]
fn training_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    for run in ["a", "b"] {
        let out = caibc(
            &["train", "--config", "run.toml", "--seed", "7", "--train", "data/train.jsonl", "--test", "data/test.jsonl", "--out", run],
            dir,
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read_to_string(dir.join("a/logs/metrics.jsonl")).unwrap();
    let b = fs::read_to_string(dir.join("b/logs/metrics.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_eq!(
        fs::read(dir.join("a/checkpoints/epoch_0001.ckpt")).unwrap(),
        fs::read(dir.join("b/checkpoints/epoch_0001.ckpt")).unwrap()
    );
    assert!(dir.join("a/reports/metrics.json").exists());
    assert!(fs::read_to_string(dir.join("a/config.toml")).unwrap().contains("seed = 7"));

    let ckpt = "a/checkpoints/epoch_0001.ckpt";
    let out = caibc(&["eval", "--checkpoint", ckpt, "--manifest", "data/test.jsonl", "--out", "eval.json"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("eval.json")).unwrap()).unwrap();
    assert!(report["r1"].as_f64().unwrap() <= report["r10"].as_f64().unwrap());

    let out = caibc(&["respmap", "--checkpoint", ckpt, "--manifest", "data/test.jsonl", "--out", "maps"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["rgb.pgm", "grs.pgm", "clr.pgm", "maps.json"] {
        assert!(dir.join("maps").join(f).exists(), "{f} missing");
    }
}

#[test]
fn ablation_writes_one_row_per_entry() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    fs::write(
        dir.join("matrix.toml"),
        "[[row]]\nid = \"rgb\"\nbranches = [\"rgb\"]\n\n[[row]]\nid = \"full\"\nbranches = [\"rgb\", \"grs\", \"clr\"]\n",
    )
    .unwrap();
    let out = caibc(
        &[
            "ablate", "--config", "run.toml", "--matrix", "matrix.toml", "--seeds", "1,2", "--train", "data/train.jsonl", "--test",
            "data/test.jsonl", "--out", "abl",
        ],
        dir,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = fs::read_to_string(dir.join("abl/reports/ablation.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);
    let table = fs::read_to_string(dir.join("abl/reports/ablation.txt")).unwrap();
    assert!(table.contains("rgb") && table.contains("full"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_spec(dir);
    let code = |args: &[&str]| caibc(args, dir).status.code();

    assert_eq!(code(&["train", "--config", "missing.toml", "--out", "x"]), Some(2));
    assert_eq!(code(&["train", "--no-such-flag"]), Some(2));
    fs::write(dir.join("bad.toml"), "epochs = 0\n").unwrap();
    assert_eq!(code(&["train", "--config", "bad.toml", "--out", "x"]), Some(2));
    fs::write(dir.join("broken.jsonl"), "{not json\n").unwrap();
    assert_eq!(code(&["train", "--config", "run.toml", "--train", "broken.jsonl", "--out", "x"]), Some(3));
    assert_eq!(code(&["eval", "--checkpoint", "missing.ckpt", "--manifest", "broken.jsonl"]), Some(3));
    assert_eq!(code(&["audit"]), Some(0));
}
