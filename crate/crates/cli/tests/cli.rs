use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
corpus_size = 80
[stage1]
steps = 30
[stage2]
steps = 20
[anchor]
steps = 30
[collect]
k = 4
[uapo]
steps = 6
batch_size = 2
[eval]
reward_rollouts = 2
probes = false
"#;

fn ilab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ilab"))
        .args(args)
        .env("ILAB_THREADS", "1")
        .output()
        .expect("spawn ilab")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, format!("{extra}\n{TINY}")).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn one_error_line(o: &Output, kind: &str) {
    assert!(!o.status.success());
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error: kind={kind} msg=")), "{err}");
}

#[test]
fn gen_corpus_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = ilab(&["gen-corpus", "--config", &cfg, "--seed", "3", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        files.push(std::fs::read(out.join("seed-3/corpus.jsonl")).unwrap());
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(String::from_utf8_lossy(&files[0]).lines().count(), 80);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = ilab(&["eval", "--bogus"]);
    one_error_line(&o, "usage");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_and_bad_configs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    one_error_line(&ilab(&["gen-corpus"]), "contract");
    let missing = dir.path().join("nope.toml");
    one_error_line(&ilab(&["gen-corpus", "--config", missing.to_str().unwrap()]), "io");
    let bad = write_config(dir.path(), "mystery_key = 1");
    one_error_line(&ilab(&["gen-corpus", "--config", &bad]), "format");
}

#[test]
fn staged_commands_chain_and_match_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let staged = dir.path().join("staged");
    let s = staged.to_str().unwrap();
    for cmd in ["train-stage1", "train-stage2", "collect", "uapo-train"] {
        let o = ilab(&[cmd, "--config", &cfg, "--out", s]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let o = ilab(&["eval", "--config", &cfg, "--out", s, "--stage", "stage3"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let piped = dir.path().join("piped");
    let o = ilab(&["pipeline", "--config", &cfg, "--out", piped.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["stage2.ckpt.json", "stage3.ckpt.json", "buffer.jsonl", "rollouts-stage3.jsonl"] {
        assert_eq!(
            std::fs::read(staged.join("seed-0").join(f)).unwrap(),
            std::fs::read(piped.join("seed-0").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn eval_refuses_a_checkpoint_from_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("o");
    let o = ilab(&["train-stage1", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let other = dir.path().join("other.toml");
    std::fs::write(&other, TINY.replace("steps = 20", "steps = 21")).unwrap();
    let o = ilab(&[
        "eval",
        "--config",
        other.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--stage",
        "stage1",
    ]);
    one_error_line(&o, "contract");
}

#[test]
fn untrained_model_is_at_chance_on_style() {
    let dir = tempfile::tempdir().unwrap();
    // One step at a negligible learning rate leaves the initial model in place.
    let p = dir.path().join("untrained.toml");
    std::fs::write(
        &p,
        TINY.replace("[stage1]\nsteps = 30", "[stage1]\nsteps = 1\n[stage1.optimizer]\nlr = 1e-12"),
    )
    .unwrap();
    let cfg = p.to_str().unwrap().to_string();
    let out = dir.path().join("o");
    let s = out.to_str().unwrap();
    assert!(ilab(&["train-stage1", "--config", &cfg, "--out", s]).status.success());
    let o = ilab(&["eval", "--config", &cfg, "--out", s, "--stage", "stage1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let row: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let sa = row["style_agreement"].as_f64().unwrap();
    // Four styles, about 24 held-out utterances of up to 8 tokens.
    assert!((sa - 0.25).abs() < 0.1, "{sa}");
    assert!(out.join("eval-stage1.csv").exists());
}

#[test]
fn ablate_writes_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("o");
    let o = ilab(&["ablate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("ablation.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 12);
}
