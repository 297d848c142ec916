//! Helpers for driving the `attnvat` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_attnvat");

pub fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("ATTNVAT_SEED")
        .output()
        .expect("spawn attnvat")
}

/// Runs a command that must succeed and returns its stdout.
pub fn ok(args: &[&str]) -> Result<String, String> {
    let out = run(args);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`attnvat {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Synthetic corpora written by `gen-synth`.
pub struct SynthData {
    pub dir: PathBuf,
}

impl SynthData {
    pub fn generate(dir: &Path, seed: u64, extra: &[&str]) -> Result<SynthData, String> {
        let seed = seed.to_string();
        let mut args = vec!["gen-synth", "--out", s(dir), "--seed", &seed];
        args.extend_from_slice(extra);
        ok(&args)?;
        Ok(SynthData { dir: dir.to_path_buf() })
    }

    pub fn path(&self, split: &str) -> String {
        s(&self.dir.join(format!("{split}.jsonl"))).to_string()
    }
}

pub fn json(text: &str) -> Result<serde_json::Value, String> {
    serde_json::from_str(text).map_err(|e| format!("bad JSON output: {e}"))
}
