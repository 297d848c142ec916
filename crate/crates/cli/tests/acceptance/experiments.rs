//! Desk-scale experiments on the synthetic task, run through the CLI.

use std::path::Path;

use crate::cli::{json, ok, s, SynthData};

/// Labeled training examples; the unlabeled counts are 0, 7x and 100x this.
const N_LABELED: usize = 50;
const SEEDS: u64 = 5;

/// Shared model and optimizer settings. Vanilla runs get a longer epoch
/// budget because an epoch over 50 examples is only two steps.
fn write_config(dir: &Path) -> Result<String, String> {
    let config = serde_json::json!({
        "embed_dim": 16,
        "hidden": 8,
        "trainer": {
            "batch_size": 32,
            "optimizer": { "learning_rate": LEARNING_RATE },
            "perturbation": { "epsilon": EPSILON, "lambda": 1.0, "xi": 0.1 },
        }
    });
    let path = dir.join("experiment.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).map_err(|e| e.to_string())?;
    Ok(s(&path).to_string())
}

pub const LEARNING_RATE: f64 = 0.003;
pub const EPSILON: f64 = 5.0;
const VANILLA_BUDGET: [&str; 4] = ["--epochs", "300", "--patience", "50"];
const VAT_BUDGET: [&str; 4] = ["--epochs", "60", "--patience", "15"];

pub struct Setup {
    _tmp: tempfile::TempDir,
    data: SynthData,
    config: String,
    root: std::path::PathBuf,
}

pub fn setup() -> Result<Setup, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path().to_path_buf();
    let data = SynthData::generate(&root.join("data"), 0, &["--n-train", &N_LABELED.to_string()])?;
    let config = write_config(&root)?;
    Ok(Setup {
        _tmp: tmp,
        data,
        config,
        root,
    })
}

fn sweep(
    setup: &Setup,
    technique: &str,
    counts: &str,
    budget: &[&str],
    name: &str,
) -> Result<Vec<(usize, f64, f64)>, String> {
    let out = setup.root.join(name);
    let (train, valid, unlabeled) = (
        setup.data.path("train"),
        setup.data.path("valid"),
        setup.data.path("unlabeled"),
    );
    let mut args = vec![
        "sweep-unlabeled",
        "--config",
        &setup.config,
        "--train",
        &train,
        "--valid",
        &valid,
        "--unlabeled",
        &unlabeled,
        "--technique",
        technique,
        "--counts",
        counts,
        "--n-seeds",
        "5",
        "--seed",
        "0",
        "--out",
        s(&out),
    ];
    args.extend_from_slice(budget);
    ok(&args)?;
    let mut reader = csv::Reader::from_path(&out).map_err(|e| e.to_string())?;
    reader
        .deserialize::<(usize, f64, f64)>()
        .map(|r| r.map_err(|e| e.to_string()))
        .collect()
}

/// Mean validation F1 of attention VAT at 0, 7x and 100x unlabeled data
/// against vanilla training on the labeled set alone.
pub fn semi_supervised_gain(setup: &Setup) -> Result<String, String> {
    let vanilla = sweep(setup, "vanilla", "0", &VANILLA_BUDGET, "vanilla.csv")?[0].1;
    let counts = format!("0,{},{}", 7 * N_LABELED, 100 * N_LABELED);
    let vat = sweep(setup, "attn_vat", &counts, &VAT_BUDGET, "attn_vat.csv")?;
    let (at0, at7, at100) = (vat[0].1, vat[1].1, vat[2].1);
    let msg = format!(
        "vanilla {vanilla:.4}; attn_vat 0x {at0:.4}, 7x {at7:.4}, 100x {at100:.4} (mean valid F1, {SEEDS} seeds)"
    );
    if at7 >= vanilla + 0.02 && at7 >= at0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn train_and_corr(setup: &Setup, technique: &str, seed: u64, budget: &[&str], unlabeled: bool) -> Result<f64, String> {
    let out = setup.root.join(format!("corr-{technique}-{seed}"));
    let (train, valid, pool, test) = (
        setup.data.path("train"),
        setup.data.path("valid"),
        setup.data.path("unlabeled"),
        setup.data.path("test"),
    );
    let seed = seed.to_string();
    let count = (7 * N_LABELED).to_string();
    let mut args = vec![
        "train",
        "--config",
        &setup.config,
        "--train",
        &train,
        "--valid",
        &valid,
        "--technique",
        technique,
        "--seed",
        &seed,
        "--out",
        s(&out),
    ];
    if unlabeled {
        args.extend_from_slice(&["--unlabeled", &pool, "--unlabeled-count", &count]);
    } else {
        args.extend_from_slice(&["--unlabeled", &pool, "--unlabeled-count", "0"]);
    }
    args.extend_from_slice(budget);
    ok(&args)?;
    let report = json(&ok(&[
        "evaluate",
        "--checkpoint",
        s(&out.join("checkpoint")),
        "--test",
        &test,
    ])?)?;
    report["mean_corr"]
        .as_f64()
        .ok_or_else(|| format!("{technique} seed {seed}: correlation undefined"))
}

/// Mean attention/gradient correlation on the test set, attention VAT (7x
/// unlabeled) against vanilla, same seeds.
pub fn interpretability(setup: &Setup) -> Result<String, String> {
    let (mut vanilla, mut vat) = (0.0, 0.0);
    for seed in 0..SEEDS {
        vanilla += train_and_corr(setup, "vanilla", seed, &VANILLA_BUDGET, false)?;
        vat += train_and_corr(setup, "attn_vat", seed, &VAT_BUDGET, true)?;
    }
    let (vanilla, vat) = (vanilla / SEEDS as f64, vat / SEEDS as f64);
    let msg = format!("mean corr attn_vat {vat:.4} vs vanilla {vanilla:.4} ({SEEDS} seeds)");
    if vat >= vanilla {
        Ok(msg)
    } else {
        Err(msg)
    }
}
