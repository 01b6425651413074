use std::path::Path;
use std::process::{Command, Output};

fn speechssl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_speechssl"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = speechssl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "# tiny corpus and short runs\n\
source_size = 16\n\
target_size = 8\n\
test_size = 4\n\
steps = 4\n\
batch_size = 4\n\
d_ada = 8\n";

#[test]
fn draft_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("c.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = d.join("data");
    ok(&["gen-corpus", "--config", p(&cfg), "--out", p(&data)]);
    for f in ["source.tsv", "target.tsv", "target_test.tsv", "domain.json"] {
        assert!(data.join(f).exists(), "{f} missing");
    }
    // Output directories are created on demand.
    let ck = d.join("ck");
    let (ck1, ck2, ck3) = (ck.join("pre.ckpt"), ck.join("ada.ckpt"), ck.join("ft.ckpt"));
    ok(&[
        "pretrain",
        "--objective",
        "eapc",
        "--config",
        p(&cfg),
        "--manifest",
        p(&data.join("source.tsv")),
        "--out",
        p(&ck1),
    ]);
    let adapt = ok(&[
        "adapt",
        "--mode",
        "draft",
        "--init",
        p(&ck1),
        "--config",
        p(&cfg),
        "--manifest",
        p(&data.join("target.tsv")),
        "--out",
        p(&ck2),
    ]);
    assert!(adapt.contains("θ_ada¹"), "{adapt}");
    ok(&[
        "finetune",
        "--init",
        p(&ck2),
        "--mode",
        "full",
        "--config",
        p(&cfg),
        "--manifest",
        p(&data.join("target.tsv")),
        "--out",
        p(&ck3),
    ]);
    let report = d.join("reports").join("report.json");
    let eval = ok(&[
        "evaluate",
        "--ckpt",
        p(&ck3),
        "--manifest",
        p(&data.join("target_test.tsv")),
        "--report",
        p(&report),
    ]);
    assert!(eval.starts_with("TER "), "{eval}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["utterances"].as_array().unwrap().len(), 4);
    let metrics = std::fs::read_to_string(ck.join("pre.ckpt.metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
}

#[test]
fn waveform_corpus_featurizes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("wav");
    ok(&[
        "gen-corpus",
        "--emit",
        "waveform",
        "--set",
        "source_size=2",
        "--set",
        "target_size=1",
        "--set",
        "test_size=1",
        "--out",
        p(&data),
    ]);
    let feats = d.join("feats");
    ok(&[
        "featurize",
        "--manifest",
        p(&data.join("source.tsv")),
        "--set",
        "n_mels=16",
        "--out",
        p(&feats),
    ]);
    let manifest = std::fs::read_to_string(feats.join("source.tsv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.contains(".feat")).count(), 2);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("c.cfg");
    std::fs::write(
        &cfg,
        format!("{SMALL}pretrain_steps = 2\nadapt_steps = 2\nfinetune_steps = 2\n"),
    )
    .unwrap();
    let data = d.join("data");
    ok(&["gen-corpus", "--config", p(&cfg), "--out", p(&data)]);
    let out = d.join("sweep");
    ok(&[
        "sweep",
        "--config",
        p(&cfg),
        "--key",
        "shift_s",
        "--values",
        "1,2",
        "--source",
        p(&data.join("source.tsv")),
        "--target",
        p(&data.join("target.tsv")),
        "--test",
        p(&data.join("target_test.tsv")),
        "--out",
        p(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(csv.starts_with("shift_s,pipeline,ter"));
    assert!(csv.lines().nth(1).unwrap().starts_with("1,draft,"), "{csv}");
}

#[test]
fn gradcheck_subset_passes() {
    let out = ok(&["gradcheck", "--seeds", "2", "--filter", "ctc"]);
    assert!(out.starts_with("ok"), "{out}");
}

#[test]
fn exit_codes() {
    let usage = speechssl(&["pretrain", "--no-such-flag"]);
    assert_eq!(usage.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&usage.stderr).contains("Usage"));
    assert_eq!(speechssl(&["frobnicate"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.tsv");
    let runtime = speechssl(&["evaluate", "--ckpt", p(&missing), "--manifest", p(&missing)]);
    assert_eq!(runtime.status.code(), Some(1));
    let bad_key = speechssl(&["gen-corpus", "--set", "d_modle=3", "--out", p(dir.path())]);
    assert_eq!(bad_key.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("d_modle"));
}

#[test]
fn help_documents_every_subcommand() {
    let help = ok(&["--help"]);
    for sub in [
        "gen-corpus",
        "featurize",
        "pretrain",
        "adapt",
        "finetune",
        "evaluate",
        "gradcheck",
        "sweep",
    ] {
        assert!(help.contains(sub), "{sub} missing from help");
    }
    let adapt = ok(&["adapt", "--help"]);
    for flag in [
        "--mode",
        "--init",
        "--manifest",
        "--out",
        "--config",
        "--set",
        "--steps",
    ] {
        assert!(adapt.contains(flag), "{flag} missing from adapt help");
    }
}
