use std::fs;
use std::process::{Command, Output};

fn neurogen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neurogen"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn gen_data_writes_manifest_and_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let r = neurogen(&["gen-data", "--seed", "11", "--out", out]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["manifest.json", "dataset.bin", "config.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let cfg = fs::read_to_string(dir.path().join("config.json")).unwrap();
    assert!(cfg.contains("\"seed\": 11"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(neurogen(&[]).status.code(), Some(2));
    assert_eq!(neurogen(&["train-stage9"]).status.code(), Some(2));
    assert_eq!(neurogen(&["sample", "--seed", "x"]).status.code(), Some(2));
    let help = neurogen(&[]);
    let text =
        String::from_utf8_lossy(&help.stdout).to_string() + &String::from_utf8_lossy(&help.stderr);
    assert!(text.contains("cfg-sweep"));
}

#[test]
fn validation_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"stage2": {"drop_prob": 2.0}}"#).unwrap();
    let broken = dir.path().join("broken.json");
    fs::write(&broken, "{ not json").unwrap();
    for cfg in [&bad, &broken] {
        let r = neurogen(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", out]);
        assert_eq!(r.status.code(), Some(1));
    }
    assert_eq!(neurogen(&["sample", "--out", out]).status.code(), Some(1));
    assert_eq!(neurogen(&["eval-gen", "--out", out]).status.code(), Some(1));
    assert_eq!(
        neurogen(&["grad-check", "--seeds", "0", "--out", out])
            .status
            .code(),
        Some(1)
    );
}
