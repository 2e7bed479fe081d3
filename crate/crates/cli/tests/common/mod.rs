#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use targeted_risk::Dataset;

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_targeted-risk"));
    cmd.env_remove("TARGETED_RISK_CONFIG");
    cmd
}

pub fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("the binary runs")
}

pub fn code(output: &Output) -> i32 {
    output.status.code().expect("exited normally")
}

/// Writes `dataset` in the `id,time,event,treatment,x1,…` layout.
pub fn write_csv(dataset: &Dataset, path: &Path) {
    let p = dataset.num_covariates();
    let mut text = String::from("id,time,event,treatment");
    for k in 1..=p {
        let _ = write!(text, ",x{k}");
    }
    text.push('\n');
    for s in dataset.subjects() {
        let _ = write!(text, "{},{:?},{},{}", s.id, s.followup_time, s.event_code, s.treatment);
        for x in &s.covariates {
            let _ = write!(text, ",{x:?}");
        }
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

/// SHA-256 of every file in `dir`, keyed by file name.
pub fn hashes(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path: PathBuf = entry.unwrap().path();
        let digest = Sha256::digest(std::fs::read(&path).unwrap());
        out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), hex::encode(digest));
    }
    out
}

/// Rows of a CSV table keyed by the joined label columns.
pub fn table(path: &Path, label_columns: usize) -> BTreeMap<String, Vec<f64>> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            let label = cells[..label_columns].join(",");
            (label, cells[label_columns..].iter().map(|c| c.parse().unwrap()).collect())
        })
        .collect()
}
