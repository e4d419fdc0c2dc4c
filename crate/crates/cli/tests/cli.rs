use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn nlcode(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlcode"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn write_config(dir: &Path) -> PathBuf {
    let text = format!(
        "[model]\nnum_heads = 2\nd_model = 16\nd_ff = 32\n\n\
         [train]\nbatch_size = 4\nmax_steps = 6\neval_every = 3\nbeam = 2\n\n\
         [paths]\nannotated = {:?}\nmined = {:?}\ntest = {:?}\nrun_id = \"cli\"\n",
        fixture("annotated.json"),
        fixture("mined.jsonl"),
        fixture("annotated_test.json"),
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn help_and_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let help = nlcode(&["--help"], tmp.path());
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["tokenizer-train", "train", "evaluate", "translate", "ablation"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    assert_eq!(code(&nlcode(&["frobnicate"], tmp.path())), 1);
    assert_eq!(code(&nlcode(&["ablation", "--axis", "depth"], tmp.path())), 1);
    assert_eq!(code(&nlcode(&["train", "--regime", "bogus"], tmp.path())), 1);
}

#[test]
fn bad_config_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = nlcode(&["train", "--config", "nope.toml"], tmp.path());
    assert_eq!(code(&missing), 1);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.toml"));

    fs::write(tmp.path().join("bad.toml"), "[model]\nnum_heads = 3\nd_model = 16\n").unwrap();
    assert_eq!(code(&nlcode(&["train", "--config", "bad.toml"], tmp.path())), 1);

    fs::write(tmp.path().join("typo.toml"), "[model]\nheads = 2\n").unwrap();
    assert_eq!(code(&nlcode(&["train", "--config", "typo.toml"], tmp.path())), 1);
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir);
    let cfg = cfg.to_str().unwrap();

    // training before the vocabularies exist is rejected up front
    assert_eq!(code(&nlcode(&["train", "--config", cfg], dir)), 1);

    let tok = nlcode(&["tokenizer-train", "--config", cfg], dir);
    assert_eq!(code(&tok), 0, "{}", String::from_utf8_lossy(&tok.stderr));
    assert!(dir.join("runs/vocab").is_dir());

    let train = nlcode(&["train", "--config", cfg, "--regime", "sample", "--alpha", "0.5"], dir);
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    let metrics = fs::read_to_string(dir.join("runs/metrics/cli/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 1);
    assert_eq!(first["mode"], "sample");
    assert!(dir.join("runs/checkpoints/cli/step-3").is_dir());

    let resume = nlcode(
        &["train", "--config", cfg, "--regime", "sample", "--alpha", "0.5", "--max-steps", "8", "--checkpoint", "runs/checkpoints/cli/last"],
        dir,
    );
    assert_eq!(code(&resume), 0, "{}", String::from_utf8_lossy(&resume.stderr));
    let metrics = fs::read_to_string(dir.join("runs/metrics/cli/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 8);

    let eval = nlcode(&["evaluate", "--config", cfg, "--out", "eval"], dir);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(String::from_utf8_lossy(&eval.stdout).contains("BLEU"));
    assert!(dir.join("eval/report.json").is_file());
    assert_eq!(fs::read_to_string(dir.join("eval/examples.jsonl")).unwrap().lines().count(), 8);

    let tr = nlcode(&["translate", "--config", cfg, "--beam", "1", "sort list `a`"], dir);
    assert_eq!(code(&tr), 0, "{}", String::from_utf8_lossy(&tr.stderr));

    let gone = nlcode(&["translate", "--config", cfg, "--checkpoint", "runs/none", "x"], dir);
    assert_eq!(code(&gone), 2);
    assert!(String::from_utf8_lossy(&gone.stderr).contains("runs/none"));
}
