use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_paramsal");

/// A small synthetic dataset source for command-line runs.
pub const SOURCE: &str = r#"{"source": {"kind": "synth", "num_classes": 4, "per_class": 30, "image_shape": [3, 8, 8],
  "separation": 1.0, "pair_gap": 0.35, "distractor_prob": 0.5, "distractor_strength": 0.9, "noise_std": 0.12, "seed": 4}}"#;

pub fn try_run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).env("RUST_LOG", "warn").output().expect("spawn paramsal")
}

pub fn run(dir: &Path, args: &[&str]) -> Output {
    let out = try_run(dir, args);
    assert!(out.status.success(), "paramsal {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Runs every file-producing command into `dir` (global flags `extra` first) and returns
/// each artifact's bytes, plus each command's standard output, keyed by name.
pub fn pipeline(dir: &Path, extra: &[&str]) -> BTreeMap<String, Vec<u8>> {
    std::fs::write(dir.join("source.json"), SOURCE).unwrap();
    let mut stdout = BTreeMap::new();
    let mut step = |name: &str, args: Vec<&str>| {
        let full = [extra, &args].concat();
        stdout.insert(format!("{name}.stdout"), run(dir, &full).stdout);
    };
    let m: &[&str] = &["--checkpoint", "m.psal", "--dataset", "data.json"];
    let ms: &[&str] = &["--checkpoint", "m.psal", "--dataset", "data.json", "--stats", "stats.json"];

    step("prepare", vec!["prepare-data", "--config", "source.json", "--out", "data.json"]);
    step(
        "train",
        vec!["train", "--dataset", "data.json", "--widths", "4,6", "--epochs", "3", "--seed", "1", "--out", "m.psal", "--history", "history.csv"],
    );
    step("eval", [&["eval"], m, &["--out", "eval.csv"]].concat());
    step("stats", [&["stats"], m, &["--out", "stats.json"]].concat());
    step("profile", [&["profile"], ms, &["--out", "profiles.jsonl"]].concat());
    let eval = String::from_utf8(std::fs::read(dir.join("eval.csv")).unwrap()).unwrap();
    let id = eval.lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    for (name, variant) in [("profile_one", "gradient"), ("profile_smooth", "smoothgrad"), ("profile_adv", "adversarial")] {
        let out = format!("{name}.csv");
        step(name, [&["profile"], ms, &["--sample", &id, "--variant", variant, "--seed", "3", "--out", &out]].concat());
    }
    step("knn", vec!["knn", "--index", "profiles.jsonl", "--sample", &id, "--k", "5", "--out", "knn.csv"]);
    step("prune", [&["exp-prune"], ms, &["--percents", "5,10", "--seed", "1", "--out", "prune.csv"]].concat());
    step("perturb", [&["exp-perturb"], ms, &["--counts", "1,3", "--noise-std", "0.05", "--seed", "1", "--out", "perturb.csv"]].concat());
    step(
        "finetune",
        [&["exp-finetune"], ms, &["--counts", "1,2", "--step-size", "0.5", "--allow-over-cap", "--out", "finetune.csv"]].concat(),
    );
    step("mask", [&["exp-mask"], ms, &["--percent", "10", "--seed", "2", "--out", "mask.csv"]].concat());
    step(
        "input_saliency",
        [&["input-saliency"], ms, &["--sample", &id, "--top-filters", "3", "--out", "map.csv", "--png", "map.png"]].concat(),
    );
    step(
        "sanity",
        [&["sanity-check"], m, &["--samples", "3", "--reference", "8", "--repeats", "2", "--top-filters", "3", "--out", "sanity.csv"]]
            .concat(),
    );

    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        files.insert(entry.file_name().to_string_lossy().into_owned(), std::fs::read(entry.path()).unwrap());
    }
    files.extend(stdout);
    files
}
