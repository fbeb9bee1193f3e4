use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn progsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_progsynth")).args(args).output().unwrap()
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

#[test]
fn check_grammar_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = dir.path().join("k.grammar");
    fs::write(&ok, "start K\nrule K a 0.6\nrule K + 0.4 K K\n").unwrap();
    let out = progsynth(&["check-grammar", ok.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("consistent: yes"));

    let bad = dir.path().join("b.grammar");
    fs::write(&bad, "start K\nrule K a 0.4\nrule K + 0.6 K K\n").unwrap();
    let out = progsynth(&["check-grammar", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    let out = progsynth(&["check-grammar", dir.path().join("missing").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn translate_reproduces_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = progsynth(&["translate", golden("fig2b.sexpr").to_str().unwrap(), "--out", d]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = progsynth(&[
        "translate",
        golden("fig5.sexpr").to_str().unwrap(),
        "--schema",
        "var1:numeric,var2:numeric,var3:count",
        "--out",
        d,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["fig2b.vnts", "fig5.vnts"] {
        assert_eq!(fs::read(dir.path().join(name)).unwrap(), fs::read(golden(name)).unwrap(), "{name}");
    }
}

#[test]
fn synth_then_query_on_mixture_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("t.csv");
    let mut csv = String::from("a,b\nnumeric,numeric\n");
    for i in 0..40 {
        let s = if i % 2 == 0 { 5.0 } else { -5.0 };
        csv.push_str(&format!("{},{}\n", s + (i as f64 * 0.37).sin(), s + (i as f64 * 0.71).cos()));
    }
    fs::write(&data, csv).unwrap();
    let ens = dir.path().join("ens.txt");
    let out = progsynth(&[
        "synth", "mixture", data.to_str().unwrap(), "--chains", "4", "--steps", "200", "--out", ens.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = progsynth(&["query", ens.to_str().unwrap(), "--pair", "a", "b", "--kv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains('='), "{stdout}");
}
