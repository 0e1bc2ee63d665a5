use std::process::Command;

fn blindeq() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_blindeq"));
    cmd.env_remove("BLINDEQ_WORKERS");
    cmd
}

const TINY: &str = r#"
seed = 5

[channel]
kind = "awgn-isi"
snr_db = 20.0

[modulation]
order = 16

[run]
frame_len = 1000
n_ind = 3
n_run = 1
ma_len = 2
probe_len = 300

[[equalizer]]
kind = "vae-le"
taps = 11
batch = 100
lr = 5e-3

[[equalizer]]
kind = "no-isi"
"#;

#[test]
fn list_recipes_prints_every_name() {
    let out = blindeq().arg("list-recipes").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in blindeq::experiment::RECIPES {
        assert!(text.lines().any(|l| l == name), "{name}");
    }
}

#[test]
fn unknown_recipe_fails_with_names() {
    let out = blindeq().args(["recipe", "nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("fig6-dp"));
}

#[test]
fn bad_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, TINY.replace("seed = 5", "")).unwrap();
    let out = blindeq().arg("run").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("seed"));

    std::fs::write(&path, TINY.replace("taps = 11", "taps = 12")).unwrap();
    let out = blindeq().arg("run").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_writes_identical_summaries_for_any_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = blindeq().arg("run").arg(&path).arg("--out").arg(&a).args(["--workers", "1"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = blindeq()
        .arg("run")
        .arg(&path)
        .arg("--out")
        .arg(&b)
        .env("BLINDEQ_WORKERS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    let sa = std::fs::read(a.join("summary.csv")).unwrap();
    let sb = std::fs::read(b.join("summary.csv")).unwrap();
    assert_eq!(sa, sb);
    let manifest = std::fs::read_to_string(b.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"workers\": 2"));
}

#[test]
fn n_ind_override_changes_frame_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    let out_dir = dir.path().join("o");
    let out = blindeq()
        .arg("run")
        .arg(&path)
        .arg("--out")
        .arg(&out_dir)
        .args(["--n-ind", "4"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let raw = std::fs::read_to_string(out_dir.join("raw.csv")).unwrap();
    // header + 2 equalizers x 4 frames
    assert_eq!(raw.lines().count(), 1 + 2 * 4);
}
