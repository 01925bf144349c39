use std::path::Path;
use std::process::{Command, Output};

fn catart(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catart")).args(args).output().unwrap()
}

const SMALL: &[&str] = &[
    "--synth-users",
    "200",
    "--synth-items",
    "80",
    "--synth-density",
    "0.06",
    "--dim",
    "8",
    "--stage1-epochs",
    "2",
    "--stage2-epochs",
    "2",
    "--stage2-batch",
    "32",
    "--stage3-epochs",
    "2",
    "--seeds",
    "1",
];

fn with_out<'a>(cmd: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd, "--out-dir", out];
    v.extend_from_slice(SMALL);
    v.extend_from_slice(extra);
    v
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synth_writes_domain_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = catart(&with_out("synth", out, &["--scenario", "one-noise-domain"]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["d0.tsv", "noise.tsv", "truth.json", "user_latent.tsv"] {
        assert!(dir.path().join("world").join(name).is_file(), "{name}");
    }
    assert!(stdout(&o).contains("noise"));
}

#[test]
fn stage2_without_stage1_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = catart(&with_out("stage2", dir.path().to_str().unwrap(), &[]));
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing"));
}

#[test]
fn bad_values_and_keys_fail() {
    let o = catart(&["stage1", "--tau", "abc"]);
    assert!(!o.status.success());
    let o = catart(&["stage1", "--no-such-flag", "1"]);
    assert!(!o.status.success());
    let o = catart(&["stage1", "--ablation", "+magic"]);
    assert!(!o.status.success());
}

#[test]
fn staged_run_then_eval_and_attention() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = dir.path().join("exp.cfg");
    std::fs::write(&cfg, "scenario = one-noise-domain\nablation = smf,+art\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    for stage in ["stage1", "stage2", "stage3"] {
        let o = catart(&with_out(stage, out, &["--config", cfg]));
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(Path::new(out).join("run-0/stage3/art/attention.tsv").is_file());

    let o = catart(&with_out("eval", out, &["--config", cfg]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("smf") && text.contains("+art") && text.contains("ndcg@10"), "{text}");

    let o = catart(&with_out("report-attention", out, &["--config", cfg]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("target\td0\td1\td2\td3\tnoise"), "{text}");
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn run_all_writes_manifest_and_is_replayable() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut hashes = Vec::new();
    for dir in [&a, &b] {
        let out = dir.path().to_str().unwrap();
        let o = catart(&with_out("run-all", out, &["--ablation", "all"]));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["config"]["ablation"], "smf,+autoencoder,+contrastive,+art,-attention");
        hashes.push(manifest["checkpoints"].clone());
        assert!(dir.path().join("aggregate/negative_transfer.tsv").is_file());
        assert!(dir.path().join("config.txt").is_file());
    }
    assert_eq!(hashes[0], hashes[1]);
    assert!(hashes[0].as_object().unwrap().len() > 20);
}
