//! Acceptance criterion 10: the full `train` verb with scripted agents
//! and a fixed seed produces byte-identical results files across runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn run_train(config: &Path, out_dir: &Path, seed: u64) {
    let status = Command::new(env!("CARGO_BIN_EXE_commprune"))
        .args([
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
            "--seed",
            &seed.to_string(),
        ])
        .status()
        .expect("spawn commprune");
    assert!(status.success(), "train verb failed");
}

fn collect_files(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) {
    for entry in fs::read_dir(dir).expect("read output dir") {
        let path = entry.expect("dir entry").path();
        if path.is_dir() {
            collect_files(&path, base, out);
        } else {
            out.push(path.strip_prefix(base).expect("prefix").to_path_buf());
        }
    }
}

#[test]
fn criterion_10_train_verb_outputs_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let second = tmp.path().join("second");
    let config = repo_config("train-demo.toml");
    run_train(&config, &first, 7);
    run_train(&config, &second, 7);

    let mut names = Vec::new();
    collect_files(&first, &first, &mut names);
    names.sort();
    assert!(
        names.iter().any(|n| n.ends_with("results.csv")),
        "criterion 10: FAIL - no results files produced"
    );
    for name in &names {
        let a = fs::read(first.join(name)).expect("first file");
        let b = fs::read(second.join(name)).unwrap_or_else(|_| {
            panic!("criterion 10: FAIL - {} missing from the second run", name.display())
        });
        assert!(
            a == b,
            "criterion 10: FAIL - {} differs between runs",
            name.display()
        );
    }
    println!(
        "criterion 10: PASS - {} result files byte-identical across two train runs",
        names.len()
    );
}
