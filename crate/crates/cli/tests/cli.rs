use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_driftlab"))
}

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.conf");

#[test]
fn bad_config_exits_with_validation_code() {
    let d = tempfile::tempdir().unwrap();
    let conf = d.path().join("bad.conf");
    fs::write(&conf, "rho = 2\nnot.a.key = 1\n").unwrap();
    let out = bin().arg("--config").arg(&conf).arg("world").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("not.a.key") && err.contains("rho"), "{err}");
}

#[test]
fn unknown_method_exits_with_validation_code() {
    let d = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--config", TINY, "--out"])
        .arg(d.path())
        .args(["finetune", "--method", "greedy"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_without_runs_is_a_runtime_failure() {
    let d = tempfile::tempdir().unwrap();
    let out = bin()
        .arg("--out")
        .arg(d.path().join("missing"))
        .arg("report")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn stage_commands_chain_through_checkpoints() {
    let d = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let out = bin()
            .args(["--config", TINY, "--seed", "2", "--out"])
            .arg(d.path())
            .args(args)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let seed = d.path().join("seed_2");
    run(&["world"]);
    assert!(seed.join("world/mixed_train.tsv").exists());
    run(&["pretrain"]);
    run(&["align"]);
    assert!(seed.join("checkpoints/aligned.params").exists());
    run(&["finetune", "--method", "clip:0.5"]);
    assert!(seed.join("alignment/clip_0.5.json").exists());
    run(&["evaluate"]);
    assert!(seed.join("eval/aligned.json").exists());
}

#[test]
fn align_needs_a_pretrained_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--config", TINY, "--out"])
        .arg(d.path())
        .arg("align")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}
