//! End-to-end exercises of the `petforge` binary: every subcommand on a tiny
//! corpus, plus the documented exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_petforge");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn petforge")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "petforge failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let cfg = format!(
        r#"{{
        "backbone": {{
            "conv": [{{"kernel": 4, "stride": 2, "channels": 8}}],
            "hidden": 16, "heads": 2, "ffn_dim": 32, "num_layers": 2,
            "sample_rate": 400
        }},
        "method": {{"method": "unipet", "bottleneck": 4, "inter_dim": 8,
                    "prompt_len": 3, "lora_rank": 2}},
        "backend": {{"kind": "linear", "channels": 8, "embed_dim": 8}},
        "corpus": {{"num_speakers": 3, "utts_per_speaker": 4, "sample_rate": 400,
                    "min_duration": 0.3, "max_duration": 0.5}},
        "eval_speakers": 3,
        "data_dir": "{d}/train", "eval_dir": "{d}/eval", "out_dir": "{d}/out",
        "batch_size": 2, "crop_seconds": 0.25, "total_steps": 5,
        "pretrain_steps": 2,
        "num_target_trials": 15, "num_nontarget_trials": 30
    }}"#,
        d = dir.display()
    );
    let path = dir.join("cfg.json");
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();

    let out = stdout(&run(&["gen-data", "--config", cfg]));
    assert!(out.contains("train utterances"), "{out}");
    assert!(dir.path().join("train/manifest.tsv").exists());
    assert!(dir.path().join("eval/manifest.tsv").exists());

    let pre_out = dir.path().join("pre");
    let out = stdout(&run(&["pretrain", "--config", cfg, "--out", pre_out.to_str().unwrap()]));
    assert!(out.contains("pretrained backbone"), "{out}");
    assert!(pre_out.join("pretrained.petw").exists());

    let out = stdout(&run(&["train", "--config", cfg, "--seed", "1"]));
    assert!(out.contains("checkpoint ->"), "{out}");
    let ckpt = dir.path().join("out/checkpoint_final.petw");
    assert!(ckpt.exists());
    let log = fs::read_to_string(dir.path().join("out/train_log.csv")).unwrap();
    assert!(log.starts_with("step,loss,lr_groupA,lr_groupB\n"), "{log}");
    assert_eq!(log.lines().count(), 6, "{log}");

    // eval prints the metric summary and writes scores + metrics
    let out = stdout(&run(&["eval", "--config", cfg, "--seed", "1"]));
    let line = out.lines().last().unwrap();
    let mut parts = line.split_whitespace();
    let eer = parts.next().unwrap();
    let dcf = parts.next().unwrap();
    assert!(eer.starts_with("eer=") && eer[4..].parse::<f64>().is_ok(), "{line}");
    assert!(dcf.starts_with("mindcf=") && dcf[7..].parse::<f64>().is_ok(), "{line}");
    let scores = fs::read_to_string(dir.path().join("out/scores.txt")).unwrap();
    for row in scores.lines() {
        let cols: Vec<&str> = row.split(' ').collect();
        assert_eq!(cols.len(), 3, "{row}");
        assert_eq!(cols[2].split('.').nth(1).unwrap().len(), 6, "{row}");
    }

    let metrics = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert!(metrics.starts_with("metric,value\n"), "{metrics}");
    assert!(metrics.contains("\neer,") && metrics.contains("\nmindcf,"), "{metrics}");

    let out = stdout(&run(&["count-params", "--config", cfg]));
    assert!(out.starts_with("method,trainable,fraction,backend_params"), "{out}");
    assert_eq!(out.lines().count(), 12, "{out}");
    assert!(dir.path().join("out/params.csv").exists());

    let out = stdout(&run(&["export-weights", "--config", cfg]));
    assert!(out.starts_with("layer,weight"), "{out}");
    assert_eq!(out.lines().count(), 3, "{out}");
}

#[test]
fn score_subcommand_matches_hand_example() {
    let dir = tempfile::tempdir().unwrap();
    let trials = dir.path().join("trials.txt");
    let scores = dir.path().join("scores.txt");
    fs::write(&trials, "1 a b\n1 a c\n0 a d\n0 a e\n").unwrap();
    fs::write(&scores, "a b 0.900000\na c 0.800000\na d 0.200000\na e 0.100000\n").unwrap();
    let out = stdout(&run(&[
        "score",
        "--trials",
        trials.to_str().unwrap(),
        "--scores",
        scores.to_str().unwrap(),
    ]));
    assert_eq!(out.trim(), "eer=0.000000 mindcf=0.000000");
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"batch_size": 0}"#).unwrap();
    let out = run(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let unknown = dir.path().join("unknown.json");
    fs::write(&unknown, r#"{"no_such_field": 1}"#).unwrap();
    let out = run(&["gen-data", "--config", unknown.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let out = run(&["train", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
