#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Output;

use sha2::{Digest, Sha256};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/data")
        .join(name)
}

pub fn mowe(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_mowe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn mowe_ok(args: &[&str]) -> Output {
    let out = mowe(args);
    assert!(
        out.status.success(),
        "mowe {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Artifacts written by [`run_pipeline`], relative to its directory.
pub const PIPELINE_ARTIFACTS: [&str; 11] = [
    "default_vocab.txt",
    "routing/routing_vocab.tsv",
    "routing/hash_table.tsv",
    "routing/frequencies.tsv",
    "plan.toml",
    "pretrain.ckpt",
    "pretrain.csv",
    "finetune.ckpt",
    "finetune.csv",
    "eval.csv",
    "dispatch.csv",
];

/// Every stage on the bundled mini corpus with seed 0.
pub fn run_pipeline(dir: &Path) {
    let cfg = fixture("pipeline.toml");
    let cfg = cfg.to_str().unwrap();
    let p = |f: &str| dir.join(f).to_str().unwrap().to_string();
    let vocab = [
        "--default-vocab".to_string(),
        p("default_vocab.txt"),
        "--routing-dir".into(),
        p("routing"),
    ];
    let vocab: Vec<&str> = vocab.iter().map(String::as_str).collect();
    let run = |sub: &str, extra: &[&str]| {
        let mut args = vec!["--config", cfg, "--seed", "0", sub];
        args.extend_from_slice(extra);
        mowe_ok(&args)
    };
    run("build-default-vocab", &["--out", &p("default_vocab.txt")]);
    run(
        "build-routing-vocab",
        &[
            "--default-vocab",
            &p("default_vocab.txt"),
            "--out",
            &p("routing"),
        ],
    );
    run(
        "plan-buckets",
        &[
            "--freq",
            &p("routing/frequencies.tsv"),
            "--out",
            &p("plan.toml"),
        ],
    );
    let plan = p("plan.toml");
    run(
        "pretrain",
        &[
            &vocab[..],
            &[
                "--plan",
                &plan,
                "--out",
                &p("pretrain.ckpt"),
                "--trace",
                &p("pretrain.csv"),
            ],
        ]
        .concat(),
    );
    run(
        "finetune",
        &[
            &vocab[..],
            &[
                "--checkpoint",
                &p("pretrain.ckpt"),
                "--out",
                &p("finetune.ckpt"),
                "--trace",
                &p("finetune.csv"),
            ],
        ]
        .concat(),
    );
    run(
        "eval",
        &[
            &vocab[..],
            &["--checkpoint", &p("finetune.ckpt"), "--out", &p("eval.csv")],
        ]
        .concat(),
    );
    run(
        "stats",
        &[
            &vocab[..],
            &["--dispatch", "--plan", &plan, "--out", &p("dispatch.csv")],
        ]
        .concat(),
    );
}

pub fn sha256_file(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// `name<TAB>sha256` for each pipeline artifact.
pub fn pipeline_manifest(dir: &Path) -> String {
    PIPELINE_ARTIFACTS
        .iter()
        .map(|a| format!("{a}\t{}\n", sha256_file(&dir.join(a))))
        .collect()
}
