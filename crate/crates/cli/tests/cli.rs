mod common;

use std::path::Path;

use common::{data, fixture, mowe, mowe_ok, pipeline_manifest, run_pipeline};

const SUBCOMMANDS: [&str; 9] = [
    "build-default-vocab",
    "build-routing-vocab",
    "plan-buckets",
    "pretrain",
    "finetune",
    "eval",
    "ablate",
    "stats",
    "probe-deactivation",
];

fn stderr(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn every_subcommand_has_help() {
    for sub in SUBCOMMANDS {
        let out = mowe_ok(&[sub, "--help"]);
        assert!(
            String::from_utf8_lossy(&out.stdout).contains("Usage"),
            "{sub}"
        );
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(mowe(&["pretrain", "--bogus"]).status.code(), Some(1));
    assert_eq!(mowe(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn missing_input_names_the_key() {
    let out = mowe(&[
        "build-default-vocab",
        "--corpus",
        "/no/such/file",
        "--out",
        "/tmp/x",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("paths.corpus"), "{}", stderr(&out));
    let out = mowe(&["plan-buckets", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("paths.freq"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[model]\nd_modle = 8\n").unwrap();
    let out = mowe(&["--config", cfg.to_str().unwrap(), "stats", "--dispatch"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("d_modle"), "{}", stderr(&out));
}

#[test]
fn unknown_sweep_axis_is_a_usage_error() {
    let out = mowe(&["ablate", "--axis", "depth", "--values", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

fn build_vocab_and_plan(dir: &Path) {
    let cfg = fixture("pipeline.toml");
    let cfg = cfg.to_str().unwrap();
    let p = |f: &str| dir.join(f).to_str().unwrap().to_string();
    mowe_ok(&[
        "--config",
        cfg,
        "build-default-vocab",
        "--out",
        &p("dv.txt"),
    ]);
    mowe_ok(&[
        "--config",
        cfg,
        "build-routing-vocab",
        "--default-vocab",
        &p("dv.txt"),
        "--out",
        &p("r"),
    ]);
    mowe_ok(&[
        "--config",
        cfg,
        "plan-buckets",
        "--freq",
        &p("r/frequencies.tsv"),
        "--out",
        &p("plan.toml"),
    ]);
}

#[test]
fn dispatch_stats_on_empty_corpus_has_only_a_header() {
    let dir = tempfile::tempdir().unwrap();
    build_vocab_and_plan(dir.path());
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    let cfg = dir.path().join("c.toml");
    let p = |f: &str| dir.path().join(f).to_str().unwrap().to_string();
    std::fs::write(
        &cfg,
        format!(
            "[paths]\ncorpus = {:?}\ndefault_vocab = {:?}\nrouting_dir = {:?}\nplan = {:?}\n",
            p("empty.txt"),
            p("dv.txt"),
            p("r"),
            p("plan.toml")
        ),
    )
    .unwrap();
    let out = mowe_ok(&["stats", "--dispatch", "--config", cfg.to_str().unwrap()]);
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "batch,num_blocks_touched,total_all2all_payload,drop_count,bypass_count\n"
    );
}

#[test]
fn stats_without_a_report_kind_is_a_usage_error() {
    assert_eq!(mowe(&["stats"]).status.code(), Some(1));
}

#[test]
fn checkpoint_with_other_vocabulary_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path());
    // a second vocabulary of another size invalidates the checkpoint hashes
    let cfg = fixture("pipeline.toml");
    let cfg = cfg.to_str().unwrap();
    let p = |f: &str| dir.path().join(f).to_str().unwrap().to_string();
    mowe_ok(&[
        "--config",
        cfg,
        "build-default-vocab",
        "--size",
        "150",
        "--out",
        &p("dv2.txt"),
    ]);
    mowe_ok(&[
        "--config",
        cfg,
        "build-routing-vocab",
        "--default-vocab",
        &p("dv2.txt"),
        "--out",
        &p("r2"),
    ]);
    let out = mowe(&[
        "--config",
        cfg,
        "eval",
        "--default-vocab",
        &p("dv2.txt"),
        "--routing-dir",
        &p("r2"),
        "--checkpoint",
        &p("finetune.ckpt"),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("hash mismatch"), "{}", stderr(&out));
}

#[test]
fn probe_reports_both_recalls() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path());
    let p = |f: &str| dir.path().join(f).to_str().unwrap().to_string();
    let qa = data("mini_qa.tsv");
    let out = mowe_ok(&[
        "probe-deactivation",
        "--default-vocab",
        &p("default_vocab.txt"),
        "--routing-dir",
        &p("routing"),
        "--checkpoint",
        &p("finetune.ckpt"),
        "--qa",
        qa.to_str().unwrap(),
        "--out",
        &p("flips.csv"),
    ]);
    let line = String::from_utf8(out.stdout).unwrap();
    assert!(line.starts_with("threshold 160 recall_on "), "{line}");
    assert!(std::fs::read_to_string(p("flips.csv"))
        .unwrap()
        .starts_with("question,expected,with_experts,without_experts\n"));
}

#[test]
fn golden_pipeline_matches_committed_hashes() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path());
    let manifest = pipeline_manifest(dir.path());
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/pipeline_sha256.tsv");
    if std::env::var_os("MOWE_BLESS").is_some() {
        std::fs::write(&golden, &manifest).unwrap();
    }
    assert_eq!(manifest, std::fs::read_to_string(&golden).unwrap());
}
