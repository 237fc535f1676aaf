//! Drives the built binary through the whole pipeline.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
record_timings = false
[paths]
weights_dir = "w"
output_dir = "o"
[markov]
length = 20000
[model]
hidden_size = 16
num_layers = 1
num_heads = 2
intermediate_size = 32
max_seq_len = 64
[target_train]
train_steps = 20
seq_len = 16
[draft_train]
num_sequences = 16
epochs = 1
seq_len = 16
[router_train]
epochs = 1
[engine]
max_new_tokens = 8
[bench]
num_prompts = 2
prompt_len = 5
[diag]
eval_sequences = 8
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specdraft"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn pipeline_and_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    fs::write(dir.join("tiny.toml"), TINY).unwrap();
    let cfg = ["--config", "tiny.toml"];

    let o = run(dir, &[&cfg[..], &["train-draft"]].concat());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-target"));

    for args in [
        &["train-target"][..],
        &["train-draft", "--method", "hass"],
        &["train-router", "--method", "hass", "--groups", "8"],
        &["generate", "hi", "--method", "hass", "--use-router", "--groups", "8", "--top-n", "2"],
        &["bench", "--method", "hass", "--mode", "tree", "--tree-depth", "3", "--tree-budget", "9"],
        &["diag-infonce", "--method", "hass", "--seed", "0"],
    ] {
        let o = run(dir, &[&cfg[..], args].concat());
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(dir.join("w/router_hass_g8.bin").exists());
    assert!(dir.join("o/bench_hass_tree.json").exists());
    let csv = fs::read_to_string(dir.join("o/infonce_hass.csv")).unwrap();
    assert!(csv.lines().count() > 1);

    let o = run(dir, &[&cfg[..], &["train-draft", "--method", "csra", "--steps", "1"]].concat());
    assert_eq!(code(&o), 2);
    let o = run(dir, &[&cfg[..], &["generate", "x", "--temperature", "-1"]].concat());
    assert_eq!(code(&o), 2);

    fs::write(dir.join("w/draft_csra.bin"), b"garbage").unwrap();
    let o = run(dir, &[&cfg[..], &["generate", "x", "--method", "csra"]].concat());
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}
