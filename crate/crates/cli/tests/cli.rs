//! End-to-end checks of the `adaptts` binary: JSON summaries, exit codes,
//! byte-stable outputs, and the full corpus → pretrain → adapt → eval loop
//! at a tiny scale.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adaptts"))
}

fn run_ok(args: &[&str]) -> serde_json::Value {
    let out = bin().args(args).output().expect("spawn");
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).expect("utf-8 stdout");
    serde_json::from_str(stdout.lines().last().expect("summary line")).expect("json summary")
}

fn run_err(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn");
    assert!(!out.status.success(), "command {:?} unexpectedly succeeded", args);
    out
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.json");
    let config = serde_json::json!({
        "model": {
            "d_model": 16,
            "n_heads": 2,
            "n_enc_layers": 1,
            "n_dec_layers": 1,
            "d_ff": 16,
            "d_spk": 8,
            "mel_dim": 6,
            "vocab_size": 40,
            "gst_channels": 6,
            "gst_tokens": 4,
            "gst_heads": 2,
            "aligner_dim": 8
        },
        "pretrain": {"epochs": 2, "batch_size": 4, "lr": 0.002},
        "adapt": {"steps": 5, "batch_size": 2, "lr": 0.002}
    });
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn gen_corpus_default_counts_and_byte_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = dir.path().join("c1.bin");
    let out2 = dir.path().join("c2.bin");
    let summary = run_ok(&["gen-corpus", "--out", out1.to_str().unwrap()]);
    assert_eq!(summary["samples"], 400);
    assert_eq!(summary["speakers"], 8);
    run_ok(&["gen-corpus", "--out", out2.to_str().unwrap()]);
    assert_eq!(fs::read(&out1).unwrap(), fs::read(&out2).unwrap());
    assert_eq!(
        fs::read(out1.with_extension("bin.json")).unwrap(),
        fs::read(out2.with_extension("bin.json")).unwrap()
    );
}

#[test]
fn gen_corpus_zero_speakers_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.bin");
    let result = run_err(&["gen-corpus", "--speakers", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn unknown_strategy_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("missing.ckpt");
    let result = run_err(&[
        "params",
        "--base",
        base.to_str().unwrap(),
        "--strategy",
        "sideband",
    ]);
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"model": {"unknown_key": 1}}"#).unwrap();
    let out = dir.path().join("c.bin");
    let result = run_err(&[
        "gen-corpus",
        "--out",
        out.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn full_pipeline_at_tiny_scale() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let pretrain_corpus = dir.path().join("train.bin");
    let adapt_corpus = dir.path().join("new.bin");
    let base = dir.path().join("base.ckpt");
    let delta = dir.path().join("delta.ckpt");
    let report = dir.path().join("report.json");
    let eval_report = dir.path().join("eval.json");

    run_ok(&[
        "gen-corpus", "--speakers", "2", "--utts", "4", "--seed", "7",
        "--out", pretrain_corpus.to_str().unwrap(), "--config", cfg,
    ]);
    run_ok(&[
        "gen-corpus", "--speakers", "1", "--utts", "4", "--seed", "99", "--role", "adapt",
        "--test-utts", "3", "--out", adapt_corpus.to_str().unwrap(), "--config", cfg,
    ]);

    let summary = run_ok(&[
        "pretrain", "--corpus", pretrain_corpus.to_str().unwrap(),
        "--out", base.to_str().unwrap(), "--seed", "1", "--config", cfg,
    ]);
    assert!(summary["final_loss"].as_f64().unwrap().is_finite());

    let summary = run_ok(&[
        "adapt", "--base", base.to_str().unwrap(), "--strategy", "adapter",
        "--data", adapt_corpus.to_str().unwrap(), "--steps", "5", "--seed", "3",
        "--out", delta.to_str().unwrap(), "--report", report.to_str().unwrap(),
        "--config", cfg,
    ]);
    assert!(summary["params_trainable"].as_u64().unwrap() > 0);
    let report_json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["secs", "cfsd", "mse_p", "mse_d", "mel_mse", "wall_ms"] {
        assert!(report_json.get(key).is_some(), "report missing {key}");
    }
    assert!(report_json["mse_p"].as_f64().unwrap() >= 0.0);
    assert!(report_json["mse_d"].as_f64().unwrap() >= 0.0);

    // eval: adapted and baseline paths both produce reports
    let summary = run_ok(&[
        "eval", "--base", base.to_str().unwrap(), "--delta", delta.to_str().unwrap(),
        "--testset", adapt_corpus.to_str().unwrap(),
        "--report", eval_report.to_str().unwrap(), "--config", cfg,
    ]);
    assert!(summary["mse_p"].as_f64().unwrap() >= 0.0);
    assert!(summary["mse_d"].as_f64().unwrap() >= 0.0);
    run_ok(&[
        "eval", "--base", base.to_str().unwrap(),
        "--testset", adapt_corpus.to_str().unwrap(),
        "--report", eval_report.to_str().unwrap(), "--config", cfg,
    ]);

    // synthesis is byte-stable across invocations
    let mel1 = dir.path().join("m1.bin");
    let mel2 = dir.path().join("m2.bin");
    run_ok(&[
        "synth", "--base", base.to_str().unwrap(), "--text-ids", "1,2,3,4",
        "--speaker", "0", "--out", mel1.to_str().unwrap(),
    ]);
    run_ok(&[
        "synth", "--base", base.to_str().unwrap(), "--text-ids", "1,2,3,4",
        "--speaker", "0", "--out", mel2.to_str().unwrap(),
    ]);
    assert_eq!(fs::read(&mel1).unwrap(), fs::read(&mel2).unwrap());

    // synthesis through the delta works and differs from the base path
    let mel3 = dir.path().join("m3.bin");
    run_ok(&[
        "synth", "--base", base.to_str().unwrap(), "--delta", delta.to_str().unwrap(),
        "--text-ids", "1,2,3,4", "--out", mel3.to_str().unwrap(),
    ]);
    assert_ne!(fs::read(&mel1).unwrap(), fs::read(&mel3).unwrap());

    // a delta applied over a different base is an incompatible-delta error
    let other_base = dir.path().join("other.ckpt");
    run_ok(&[
        "pretrain", "--corpus", pretrain_corpus.to_str().unwrap(),
        "--out", other_base.to_str().unwrap(), "--seed", "2", "--config", cfg,
    ]);
    let result = run_err(&[
        "synth", "--base", other_base.to_str().unwrap(), "--delta", delta.to_str().unwrap(),
        "--text-ids", "1,2", "--out", dir.path().join("m4.bin").to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&result.stderr).contains("incompatible delta"));
}

#[test]
fn sixty_four_bit_mode_round_trips_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run64.json");
    let config = serde_json::json!({
        "model": {
            "d_model": 16, "n_heads": 2, "n_enc_layers": 1, "n_dec_layers": 1,
            "d_ff": 16, "d_spk": 8, "mel_dim": 6, "vocab_size": 40,
            "gst_channels": 6, "gst_tokens": 4, "gst_heads": 2, "aligner_dim": 8,
            "precision": "f64"
        },
        "pretrain": {"epochs": 1, "batch_size": 4, "lr": 0.002}
    });
    fs::write(&cfg_path, serde_json::to_string(&config).unwrap()).unwrap();
    let cfg = cfg_path.to_str().unwrap();

    let corpus = dir.path().join("c64.bin");
    let base = dir.path().join("base64.ckpt");
    let mel = dir.path().join("m64.bin");
    run_ok(&[
        "gen-corpus", "--speakers", "2", "--utts", "3", "--seed", "4",
        "--out", corpus.to_str().unwrap(), "--config", cfg,
    ]);
    run_ok(&[
        "pretrain", "--corpus", corpus.to_str().unwrap(),
        "--out", base.to_str().unwrap(), "--seed", "1", "--config", cfg,
    ]);
    let summary = run_ok(&[
        "synth", "--base", base.to_str().unwrap(), "--text-ids", "1,2",
        "--out", mel.to_str().unwrap(),
    ]);
    assert!(summary["frames"].as_u64().unwrap() >= 2);
}

#[test]
fn params_fractions_at_desk_defaults() {
    // parameter accounting only needs shapes, so an untrained base suffices
    use adaptts_core::config::ModelConfig;
    use adaptts_core::model::Model;

    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base.ckpt");
    let model = Model::<f32>::new(ModelConfig::default(), 8, 1).unwrap();
    adaptts_core::checkpoint::save_base(&base, &model).unwrap();

    let mut sizes = std::collections::BTreeMap::new();
    for strategy in ["adapter", "lora", "prefix", "bitfit", "full"] {
        let summary = run_ok(&["params", "--base", base.to_str().unwrap(), "--strategy", strategy]);
        assert_eq!(summary["strategy"], strategy);
        let fraction = summary["fraction"].as_f64().unwrap();
        let trainable = summary["params_trainable"].as_u64().unwrap();
        sizes.insert(strategy.to_string(), trainable);
        match strategy {
            "adapter" => assert!(fraction < 0.10, "adapter fraction {fraction}"),
            "full" => assert!((fraction - 1.0).abs() < 1e-9),
            _ => assert!(fraction < 0.15, "{strategy} fraction {fraction}"),
        }
    }
    let prefix = sizes["prefix"];
    for (name, size) in &sizes {
        if name != "prefix" && name != "full" {
            assert!(prefix < *size, "prefix {prefix} not smallest vs {name} {size}");
        }
    }
}
