mod common;

use std::path::Path;

use common::{pipeline, run, try_run, BIN, SOURCE};
use paramsal::profile_index::ProfileIndex;
use paramsal::saliency::ProfileStats;

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[test]
fn pipeline_is_bit_reproducible_across_runs_and_worker_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let first = pipeline(a.path(), &[]);
    let second = pipeline(b.path(), &[]);
    let single = pipeline(c.path(), &["--workers", "1"]);
    assert!(first.len() > 20, "expected every artifact, got {:?}", first.keys().collect::<Vec<_>>());
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (name, bytes) in &first {
        assert!(second[name] == *bytes, "{name} differs between identical runs");
        assert!(single[name] == *bytes, "{name} differs with one worker");
    }

    // the single-sample profile CSV is the standardization of its raw column
    let stats = ProfileStats::load(&a.path().join("stats.json")).unwrap();
    let rows = csv_rows(&a.path().join("profile_one.csv"));
    assert_eq!(rows.len(), stats.len());
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0].parse::<usize>().unwrap(), i);
        let raw: f64 = row[2].parse().unwrap();
        let z: f64 = row[3].parse().unwrap();
        assert_eq!(z, (raw - stats.mean[i]) / stats.std[i].max(stats.eps), "filter {i}");
    }

    // knn output matches a brute-force scan of the saved index
    let index = ProfileIndex::load(&a.path().join("profiles.jsonl")).unwrap();
    let knn = csv_rows(&a.path().join("knn.csv"));
    let eval = csv_rows(&a.path().join("eval.csv"));
    let query: usize = eval[0][0].parse().unwrap();
    let q = index.profile_of(query).unwrap();
    let mut expected: Vec<(f64, usize)> = index
        .meta()
        .iter()
        .enumerate()
        .filter(|(_, m)| m.sample_id != query)
        .map(|(i, m)| (cosine(q, index.row(i)), m.sample_id))
        .collect();
    expected.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
    assert_eq!(knn.len(), 5);
    for (row, (sim, id)) in knn.iter().zip(&expected) {
        assert_eq!(row[1].parse::<usize>().unwrap(), *id);
        assert!((row[2].parse::<f64>().unwrap() - sim).abs() < 1e-12);
    }
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = try_run(dir.path(), &["eval", "--checkpoint", "nope.psal", "--dataset", "nope.json"]);
    assert_eq!(missing.status.code(), Some(3));

    let unknown_flag = try_run(dir.path(), &["eval", "--bogus"]);
    assert_eq!(unknown_flag.status.code(), Some(2));

    std::fs::write(dir.path().join("source.json"), SOURCE).unwrap();
    run(dir.path(), &["prepare-data", "--config", "source.json", "--out", "data.json"]);
    run(dir.path(), &["train", "--dataset", "data.json", "--widths", "4", "--epochs", "1", "--out", "m.psal"]);
    let bad_split = try_run(dir.path(), &["eval", "--checkpoint", "m.psal", "--dataset", "data.json", "--split", "test"]);
    assert_eq!(bad_split.status.code(), Some(2));

    let zero_workers = try_run(dir.path(), &["--workers", "0", "eval", "--checkpoint", "m.psal", "--dataset", "data.json"]);
    assert_eq!(zero_workers.status.code(), Some(2));

    std::fs::write(dir.path().join("broken.psal"), b"not a checkpoint").unwrap();
    let broken = try_run(dir.path(), &["eval", "--checkpoint", "broken.psal", "--dataset", "data.json"]);
    assert_eq!(broken.status.code(), Some(2));
}

#[test]
fn every_subcommand_has_help() {
    let commands = [
        "prepare-data",
        "train",
        "eval",
        "stats",
        "profile",
        "knn",
        "exp-prune",
        "exp-perturb",
        "exp-finetune",
        "exp-mask",
        "input-saliency",
        "sanity-check",
        "serve",
    ];
    for c in commands {
        let out = std::process::Command::new(BIN).args([c, "--help"]).output().unwrap();
        assert!(out.status.success(), "{c} --help");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{c} --help");
    }
}
