use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn maskctc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskctc"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn maskctc")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY_CORPUS: &str = "vocab_size = 6\nfeat_dim = 8\nutt_len = [2, 5]\nseed = 3\n";

fn tiny_train(kind: &str) -> String {
    format!(
        "model_type = \"{kind}\"\nepochs = 2\nbatch_size = 4\nwarmup_steps = 2\nenc_layers = 1\ndec_layers = 1\n\
         heads = 2\nd_model = 16\nd_ff = 32\nkeep_checkpoints = 2\naverage_top = 2\n\
         train_data = \"data/train.mcds\"\ndev_data = \"data/dev.mcds\"\n"
    )
}

/// A directory with tiny generated splits.
fn with_data() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("corpus.toml"), TINY_CORPUS).unwrap();
    let o = maskctc(
        dir.path(),
        &["gen-data", "--config", "corpus.toml", "--out", "data", "--train", "16", "--dev", "4", "--eval", "6"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

fn train(dir: &Path, kind: &str) -> String {
    let cfg = format!("{kind}.toml");
    fs::write(dir.join(&cfg), tiny_train(kind)).unwrap();
    let out = format!("exp_{kind}");
    let o = maskctc(dir, &["train", "--config", &cfg, "--out", &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    format!("{out}/model.mctc")
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&maskctc(dir.path(), &[])), 1);
    assert_eq!(code(&maskctc(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&maskctc(dir.path(), &["decode", "--k", "zero"])), 1);
    assert_eq!(code(&maskctc(dir.path(), &["train", "--seed", "x"])), 1);
    assert_eq!(code(&maskctc(dir.path(), &["--help"])), 0);
    fs::write(dir.path().join("bad.toml"), "epochs = 0\n").unwrap();
    assert_eq!(code(&maskctc(dir.path(), &["train", "--config", "bad.toml"])), 1);
    fs::write(dir.path().join("typo.toml"), "epoch = 3\n").unwrap();
    assert_eq!(code(&maskctc(dir.path(), &["train", "--config", "typo.toml", "--print-config"])), 1);
    assert_eq!(code(&maskctc(dir.path(), &["decode", "--p-thres", "2"])), 1);
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = maskctc(dir.path(), &["train", "--print-config", "--seed", "42"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("seed = 42"));
    assert!(text.contains("model_type = \"maskctc\""));
    fs::write(dir.path().join("printed.toml"), &text).unwrap();
    let again = maskctc(dir.path(), &["train", "--print-config", "--config", "printed.toml"]);
    assert_eq!(stdout(&again), text);
}

#[test]
fn missing_or_corrupt_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = maskctc(dir.path(), &["decode", "--model", "nope.mctc", "--data", "nope.mcds"]);
    assert_eq!(code(&o), 2);
    fs::write(dir.path().join("junk.mcds"), b"MCDSjunk").unwrap();
    fs::write(dir.path().join("t.toml"), "train_data = \"junk.mcds\"\ndev_data = \"junk.mcds\"\n").unwrap();
    assert_eq!(code(&maskctc(dir.path(), &["train", "--config", "t.toml"])), 2);
}

#[test]
fn gen_data_writes_splits_and_manifest() {
    let dir = with_data();
    for f in ["train.mcds", "dev.mcds", "eval.mcds", "manifest.json"] {
        assert!(dir.path().join("data").join(f).is_file(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["corpus"]["vocab_size"], 6);
    assert_eq!(manifest["splits"][2]["utterances"], 6);
    let again = maskctc(
        dir.path(),
        &["gen-data", "--config", "corpus.toml", "--out", "again", "--train", "16", "--dev", "4", "--eval", "6"],
    );
    assert_eq!(code(&again), 0);
    assert_eq!(
        fs::read(dir.path().join("data/train.mcds")).unwrap(),
        fs::read(dir.path().join("again/train.mcds")).unwrap()
    );
    let reseeded = maskctc(dir.path(), &["gen-data", "--config", "corpus.toml", "--seed", "9", "--out", "other"]);
    assert_eq!(code(&reseeded), 0);
    assert_ne!(
        fs::read(dir.path().join("data/eval.mcds")).unwrap(),
        fs::read(dir.path().join("other/eval.mcds")).unwrap()
    );
}

#[test]
fn pipeline_train_decode_eval_bench() {
    let dir = with_data();
    let d = dir.path();
    let mask = train(d, "maskctc");
    let ar = train(d, "ar_joint");
    let csv = fs::read_to_string(d.join("exp_maskctc/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let o = maskctc(
        d,
        &["decode", "--model", &mask, "--data", "data/eval.mcds", "--out", "dec", "--p-thres", "0.999", "--k", "num_mask", "--emit-trace"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(d.join("dec/hyp.txt")).unwrap().lines().count(), 6);
    let traces = fs::read_to_string(d.join("dec/decode.trace.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), 6);
    for line in traces.lines() {
        let t: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["initial_ctc", "masked_string", "fills", "final", "decoder_calls", "encoder_calls", "wall_time"] {
            assert!(t.get(key).is_some(), "trace lacks {key}");
        }
        assert_eq!(t["encoder_calls"], 1);
    }

    let o = maskctc(d, &["decode", "--model", &mask, "--data", "data/eval.mcds", "--out", "plain"]);
    assert_eq!(code(&o), 0);
    assert!(!d.join("plain/decode.trace.jsonl").exists());

    let o = maskctc(d, &["eval", "--model", &mask, "--data", "data/eval.mcds", "--out", "ev"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ev/eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 5);
    assert!(d.join("ev/eval_report.txt").is_file());

    fs::write(
        d.join("bench.toml"),
        format!("model = \"{mask}\"\nmodels = [\"{ar}\"]\ndata = \"data/eval.mcds\"\nrepeats = 2\n"),
    )
    .unwrap();
    let o = maskctc(d, &["bench", "--config", "bench.toml", "--threads", "1", "--out", "bn"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("bn/bench_report.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r["speedup_vs_ar"].is_number()));

    let o = maskctc(d, &["decode", "--model", &ar, "--data", "data/eval.mcds", "--out", "ar", "--emit-trace"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn thread_env_is_honoured() {
    let dir = with_data();
    let d = dir.path();
    let mask = train(d, "maskctc");
    let run = |threads: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_maskctc"))
            .args(["decode", "--model", &mask, "--data", "data/eval.mcds", "--out", out])
            .current_dir(d)
            .env("MASKCTC_THREADS", threads)
            .output()
            .unwrap();
        (code(&o), String::from_utf8_lossy(&o.stderr).into_owned())
    };
    assert_eq!(run("1", "one").0, 0);
    assert_eq!(run("3", "three").0, 0);
    assert_eq!(
        fs::read(d.join("one/hyp.txt")).unwrap(),
        fs::read(d.join("three/hyp.txt")).unwrap()
    );
    assert_eq!(run("zero", "bad").0, 1);
    assert_eq!(run("0", "bad").0, 1);
}

#[test]
fn training_is_reproducible_across_thread_counts() {
    let dir = with_data();
    let d = dir.path();
    fs::write(d.join("m.toml"), tiny_train("maskctc")).unwrap();
    let mut logs = Vec::new();
    for (threads, out) in [("1", "a"), ("2", "b")] {
        let o = Command::new(env!("CARGO_BIN_EXE_maskctc"))
            .args(["train", "--config", "m.toml", "--out", out])
            .current_dir(d)
            .env("MASKCTC_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
        logs.push(fs::read(d.join(out).join("metrics.csv")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}
