use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
seed = 3
[model]
vocab_size = 256
d_model = 16
d_ff = 32
num_layers = 2
num_heads = 2
max_input_len = 32
max_target_len = 8
[model.router]
num_experts = 4
top_k = 2
[train]
learning_rate = 3e-3
batch_size = 4
steps = 6
[synth]
train_per_task = 40
eval_per_task = 4
[eval]
decode = { max_new_tokens = 6 }
"#;

fn moelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moelab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = moelab(args);
    assert!(
        out.status.success(),
        "moelab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.display().to_string()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Relative path → bytes for every file under `root`, except the timing sidecar.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "timing.json" {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_tasks_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-tasks", "--seed", "7", "--out", &s(&a)]);
    ok(&["gen-tasks", "--seed", "7", "--out", &s(&b)]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.contains_key(Path::new("train/kv_lookup.jsonl")));
    assert!(ta.contains_key(Path::new("held-out/suites.json")));
    assert!(ta.contains_key(Path::new("config.resolved.toml")));
    assert!(a.join("timing.json").exists());
    assert_eq!(ta, tb);

    let c = tmp.path().join("c");
    ok(&["gen-tasks", "--seed", "8", "--out", &s(&c)]);
    assert_ne!(ta[Path::new("train/copy.jsonl")], tree(&c)[Path::new("train/copy.jsonl")]);
}

#[test]
fn route_trace_reproduces_the_three_token_plan() {
    let tmp = TempDir::new().unwrap();
    ok(&["route-trace", "--out", &s(tmp.path())]);
    let trace = fs::read_to_string(tmp.path().join("route-trace.jsonl")).unwrap();
    let expected = [
        r#"{"token":0,"experts":[0],"gates":[0.700000],"slots":[0],"dropped":false}"#,
        r#"{"token":1,"experts":[1],"gates":[0.800000],"slots":[0],"dropped":false}"#,
        r#"{"token":2,"experts":[0],"gates":[0.600000],"slots":[1],"dropped":false}"#,
    ];
    assert_eq!(trace.lines().collect::<Vec<_>>(), expected);
    let plan: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["capacity"], 2);
    assert_eq!(plan["dropped"].as_array().unwrap().len(), 0);
}

#[test]
fn route_trace_accepts_a_fixture_file() {
    let tmp = TempDir::new().unwrap();
    let fixture = tmp.path().join("probs.json");
    fs::write(
        &fixture,
        r#"{"probs": [[0.9, 0.1], [0.8, 0.2], [0.7, 0.3]],
            "router": {"strategy": "token-choice-top1", "num_experts": 2, "top_k": 1, "capacity_factor": 0.5}}"#,
    )
    .unwrap();
    let out = tmp.path().join("out");
    ok(&["route-trace", "--from", &s(&fixture), "--out", &s(&out)]);
    let trace = fs::read_to_string(out.join("route-trace.jsonl")).unwrap();
    let dropped: Vec<bool> = trace
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["dropped"].as_bool().unwrap())
        .collect();
    // C = ceil(0.5 * 3 / 2) = 1: only the first claimant of expert 0 fits.
    assert_eq!(dropped, [false, true, true]);
}

#[test]
fn unknown_config_key_is_a_single_line_error() {
    let tmp = TempDir::new().unwrap();
    let out = moelab(&["gen-tasks", "--set", "model.not_a_key=1", "--out", &s(tmp.path())]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    let v: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(v["error"]["kind"], "config");
    assert!(v["error"]["message"].as_str().unwrap().contains("not_a_key"));
}

#[test]
fn unknown_key_in_config_file_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlearning_rat = 0.1\n").unwrap();
    let out = moelab(&["gen-tasks", "--config", &s(&cfg), "--out", &s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn missing_checkpoint_error_names_the_path() {
    let tmp = TempDir::new().unwrap();
    let out = moelab(&["eval", "--from", "/nonexistent/x.ckpt", "--out", &s(tmp.path())]);
    assert!(!out.status.success());
    let v: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert!(v["error"]["message"].as_str().unwrap().contains("/nonexistent/x.ckpt"));
}

#[test]
fn overrides_and_seed_land_in_the_snapshot() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("o");
    ok(&[
        "gen-tasks",
        "--config",
        &cfg,
        "--set",
        "model.d_model=32",
        "--set",
        "eval.split=held-in",
        "--seed",
        "11",
        "--out",
        &s(&out),
    ]);
    let snap: toml::Table = toml::from_str(&fs::read_to_string(out.join("config.resolved.toml")).unwrap()).unwrap();
    assert_eq!(snap["seed"].as_integer(), Some(11));
    assert_eq!(snap["train"]["seed"].as_integer(), Some(11));
    assert_eq!(snap["model"]["d_model"].as_integer(), Some(32));
    assert_eq!(snap["model"]["d_ff"].as_integer(), Some(32));
    assert_eq!(snap["eval"]["split"].as_str(), Some("held-in"));
}

#[test]
fn train_and_eval_are_byte_identical_across_invocations() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        let (train, eval) = (dir.join("train"), dir.join("eval"));
        ok(&[
            "train",
            "--config",
            &cfg,
            "--set",
            "train.checkpoint_every=3",
            "--set",
            "train.average_last_n=2",
            "--out",
            &s(&train),
        ]);
        ok(&["eval", "--config", &cfg, "--from", &s(&train.join("final.ckpt")), "--out", &s(&eval)]);
        trees.push(tree(&dir));
    }
    for f in [
        "train/metrics.jsonl",
        "train/usage.jsonl",
        "train/final.ckpt",
        "train/checkpoints/step-000003.ckpt",
        "train/checkpoints/step-000006.ckpt",
        "eval/report.json",
        "eval/report.txt",
    ] {
        assert!(trees[0].contains_key(Path::new(f)), "missing {f}");
    }
    assert_eq!(trees[0].len(), trees[1].len());
    for (path, bytes) in &trees[0] {
        // Reports carry the checkpoint path as the model id.
        if path.starts_with("eval") {
            continue;
        }
        assert_eq!(Some(bytes), trees[1].get(path), "{} differs", path.display());
    }
    let strip = |t: &BTreeMap<PathBuf, Vec<u8>>| {
        let r: serde_json::Value = serde_json::from_slice(&t[Path::new("eval/report.json")]).unwrap();
        (r["suites"].clone(), r["normalized_average"].clone())
    };
    assert_eq!(strip(&trees[0]), strip(&trees[1]));
    let metrics = String::from_utf8(trees[0][Path::new("train/metrics.jsonl")].clone()).unwrap();
    assert_eq!(metrics.lines().count(), 6);
}

#[test]
fn train_from_checkpoint_continues_and_average_and_report_work() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let first = tmp.path().join("first");
    ok(&["train", "--config", &cfg, "--set", "train.checkpoint_every=3", "--out", &s(&first)]);
    let ckpt = first.join("final.ckpt");

    // Architecture comes from the checkpoint; the config file's model section
    // still applies on top of it.
    let second = tmp.path().join("second");
    ok(&[
        "train",
        "--config",
        &cfg,
        "--from",
        &s(&ckpt),
        "--set",
        "data.train_tasks=[\"copy\"]",
        "--out",
        &s(&second),
    ]);
    assert!(second.join("final.ckpt").exists());

    let avg = tmp.path().join("avg");
    let c3 = first.join("checkpoints/step-000003.ckpt");
    let c6 = first.join("checkpoints/step-000006.ckpt");
    ok(&["average-ckpt", "--from", &s(&c3), &s(&c6), "--out", &s(&avg)]);
    assert!(avg.join("averaged.ckpt").exists());
    // Averaging one checkpoint reproduces it.
    let one = tmp.path().join("one");
    ok(&["average-ckpt", "--from", &s(&c6), "--out", &s(&one)]);
    assert_eq!(fs::read(one.join("averaged.ckpt")).unwrap(), fs::read(&ckpt).unwrap());

    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    ok(&["eval", "--config", &cfg, "--from", &s(&ckpt), "--out", &s(&e1)]);
    ok(&["eval", "--config", &cfg, "--from", &s(&second.join("final.ckpt")), "--out", &s(&e2)]);
    let rep = tmp.path().join("rep");
    ok(&["report", "--from", &s(&e1), &s(&e2.join("report.json")), "--out", &s(&rep)]);
    let table = fs::read_to_string(rep.join("report.txt")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].starts_with("Model"));
    assert!(lines[0].ends_with("Norm. Avg."));
    assert_eq!(lines.len(), 4, "{table}");
}

#[test]
fn ablate_emits_the_six_strategy_rows() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("abl");
    ok(&["ablate", "--config", &cfg, "--set", "train.steps=3", "--out", &s(&out)]);
    let table = fs::read_to_string(out.join("ablation.txt")).unwrap();
    let labels: Vec<&str> = table
        .lines()
        .skip(2)
        .map(|l| l.split("  ").next().unwrap().trim())
        .collect();
    assert_eq!(
        labels,
        ["Baseline", "Freeze-Gate", "Freeze-Expert", "Freeze-MoE", "Z-loss", "Balance-loss"]
    );
    assert!(table.lines().next().unwrap().starts_with("Finetuning Strategy"));
    for dir in ["baseline", "freeze-gate", "freeze-expert", "freeze-moe", "z-loss", "balance-loss"] {
        assert!(out.join(dir).join("report.json").exists(), "{dir}");
        assert!(out.join(dir).join("metrics.jsonl").exists(), "{dir}");
    }
    let snap = fs::read_to_string(out.join("freeze-gate/config.resolved.toml")).unwrap();
    assert!(snap.contains("freeze_mode = \"freeze-gate\""), "{snap}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 6);
}
