use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pess(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pess"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn make_corpus(dir: &Path, n: &str) {
    let out = pess(&["make-corpus", "--dialogues", n, "--traits", "6", "--seed", "3", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

const TINY: [&str; 12] = [
    "--d-model", "16", "--n-heads", "2", "--n-layers", "1", "--ffn-dim", "32", "--max-len", "64", "--dropout", "0",
];

#[test]
fn help_exits_zero() {
    let out = pess(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["make-corpus", "train-extractor", "train-generator", "extract", "respond", "evaluate", "match-debug"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(pess(&["--no-such-flag"]).status.code(), Some(2));
    assert_eq!(pess(&["make-corpus", "--out", "x", "--wat"]).status.code(), Some(2));
}

#[test]
fn too_many_traits_names_inventory_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = pess(&["make-corpus", "--traits", "999", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("20"));
}

#[test]
fn bad_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let ini = dir.path().join("pess.ini");
    fs::write(&ini, "[model]\nwidth = 4\n").unwrap();
    let out = pess(&["train-extractor", "--config", ini.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn make_corpus_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    make_corpus(a.path(), "20");
    make_corpus(b.path(), "20");
    for f in ["train.jsonl", "validation.jsonl", "test.jsonl", "grammar.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn esconv_format_uses_seeker_and_supporter_roles() {
    let dir = tempfile::tempdir().unwrap();
    let out = pess(&[
        "make-corpus", "--dialogues", "10", "--traits", "4", "--format", "esconv", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let first = fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
    let v: Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(v["turns"][0]["role"], "seeker", "{v}");
    assert_eq!(v["turns"][1]["role"], "supporter", "{v}");
}

#[test]
fn match_debug_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.txt");
    let gen = dir.path().join("gen.txt");
    fs::write(&gt, "i love dogs.\ni work as a nurse.\n").unwrap();
    fs::write(&gen, "i work as a nurse.\ni like pizza.\n").unwrap();
    let out = pess(&["match-debug", "--gt", gt.to_str().unwrap(), "--gen", gen.to_str().unwrap()]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_eq!(v["p_con"], serde_json::json!(["i work as a nurse."]));
    assert_eq!(v["p_miss"], serde_json::json!(["i love dogs."]));
    assert_eq!(v["p_new"], serde_json::json!(["i work as a nurse.", "i love dogs."]));
    assert_eq!(v["verdicts"][1]["best_gen_index"], 0);
}

#[test]
fn train_extract_respond_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_corpus(&data, "24");
    let ex_dir = dir.path().join("ex");

    let mut args = vec![
        "train-extractor", "--data", data.to_str().unwrap(), "--run-dir", ex_dir.to_str().unwrap(),
        "--epochs", "2", "--epochs-nll-only", "1", "--ablation", "nll_only",
    ];
    args.extend(TINY);
    let out = pess(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = ex_dir.join("checkpoints").join("best");
    assert_eq!(stdout_json(&out)["checkpoint"], ckpt.to_str().unwrap());

    let log = fs::read_to_string(ex_dir.join("training_log.jsonl")).unwrap();
    assert!(!log.is_empty());
    for line in log.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["l_consist"], 0.0);
        assert_eq!(v["l_complete"], 0.0);
    }
    assert!(ex_dir.join("run.json").exists());

    let test = data.join("test.jsonl");
    let first: Value = serde_json::from_str(fs::read_to_string(&test).unwrap().lines().next().unwrap()).unwrap();
    let id = first["id"].as_str().unwrap();
    let out = pess(&["extract", "--checkpoint", ckpt.to_str().unwrap(), "--data", test.to_str().unwrap(), "--dialogue-id", id]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout_json(&out)["persona"].is_array());

    let out = pess(&["extract", "--checkpoint", ckpt.to_str().unwrap(), "--data", test.to_str().unwrap(), "--dialogue-id", "missing"]);
    assert_eq!(out.status.code(), Some(2));

    let gen_dir = dir.path().join("gen");
    let mut args = vec![
        "train-generator", "--data", data.to_str().unwrap(), "--run-dir", gen_dir.to_str().unwrap(),
        "--extractor", ckpt.to_str().unwrap(), "--epochs", "1", "--epochs-nll-only", "0",
    ];
    args.extend(TINY);
    let out = pess(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let gen_ckpt = gen_dir.join("checkpoints").join("best");

    let out = pess(&[
        "respond", "--generator", gen_ckpt.to_str().unwrap(), "--extractor", ckpt.to_str().unwrap(), "--data",
        test.to_str().unwrap(), "--dialogue-id", id,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout_json(&out)["response"].is_string());

    let out = pess(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--data", test.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    for key in ["rouge_l", "bleu_1", "embed_score", "ppl"] {
        assert!(v[key].is_number(), "missing {key}: {v}");
    }
}

#[test]
fn missing_checkpoint_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    make_corpus(dir.path(), "10");
    let out = pess(&[
        "extract", "--checkpoint", dir.path().join("nope").to_str().unwrap(), "--data",
        dir.path().join("train.jsonl").to_str().unwrap(), "--dialogue-id", "toy-0000",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn training_is_reproducible_and_honours_pess_home() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_corpus(&data, "16");
    let home = dir.path().join("home");
    let mut params = Vec::new();
    for _ in 0..2 {
        let mut args = vec!["train-extractor", "--data", data.to_str().unwrap(), "--epochs", "2", "--epochs-nll-only", "1", "--seed", "4"];
        args.extend(TINY);
        let out = Command::new(env!("CARGO_BIN_EXE_pess"))
            .args(&args)
            .env("PESS_HOME", &home)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let run_dir = stdout_json(&out)["run_dir"].as_str().unwrap().to_string();
        assert!(Path::new(&run_dir).starts_with(home.join("runs")), "{run_dir}");
        assert!(run_dir.contains("seed4"));
        params.push(fs::read(Path::new(&run_dir).join("checkpoints/best/params.bin")).unwrap());
        // run directories are named by second; keep the two apart
        std::thread::sleep(std::time::Duration::from_millis(1100));
    }
    assert_eq!(params[0], params[1]);
}
