use std::path::Path;
use std::process::{Command, Output};

use coc_core::model::{save_checkpoint, Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn coc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coc"))
        .args(args)
        .env_remove("COC_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn json(out: &Output) -> Value {
    assert_eq!(code(out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A full-size `test_batch.bin` of random pixels with labels cycling 0..10.
fn random_cifar_dir(dir: &Path, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bytes = vec![0u8; 10_000 * 3073];
    for (i, rec) in bytes.chunks_exact_mut(3073).enumerate() {
        rng.fill(&mut rec[1..]);
        rec[0] = (i % 10) as u8;
    }
    std::fs::write(dir.join("test_batch.bin"), bytes).unwrap();
}

fn micro_checkpoint(path: &Path, classes: usize) {
    let mut cfg = ModelConfig::micro32();
    cfg.num_classes = classes;
    save_checkpoint(&Model::<f32>::build(cfg, 1).unwrap(), path).unwrap();
}

#[test]
fn usage_errors_exit_2() {
    let out = coc(&["train", "--epochs", "1"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("COC_DATA_DIR"));
    assert_eq!(code(&coc(&["train", "--data", "/nonexistent/cifar"])), 2);
    assert_eq!(code(&coc(&["eval", "--data", "synthetic:spirals"])), 2);
    assert_eq!(code(&coc(&["params", "--preset", "huge"])), 2);
    assert_eq!(code(&coc(&["params", "--preset", "tiny", "--config", "x.txt"])), 2);
    assert_eq!(code(&coc(&["params", "--ablate", "no-attention"])), 2);
}

#[test]
fn params_reports_tiny_counts() {
    let v = json(&coc(&["params", "--preset", "tiny"]));
    assert_eq!(v["parameters"], 5_576_404);
    assert_eq!(v["macs"]["total"], 1_129_600_512u64);
    let per_stage: u64 = v["stages"].as_array().unwrap().iter().map(|s| s["parameters"].as_u64().unwrap()).sum();
    assert!(per_stage < 5_576_404);
}

#[test]
fn config_file_overrides_preset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.txt");
    std::fs::write(&path, "preset = micro32\nnum_classes = 4\n").unwrap();
    let base = json(&coc(&["params", "--preset", "micro32"]));
    let v = json(&coc(&["params", "--config", path.to_str().unwrap()]));
    assert_eq!(
        base["parameters"].as_u64().unwrap() - v["parameters"].as_u64().unwrap(),
        6 * 257
    );
}

#[test]
fn gradcheck_fault_is_detected() {
    let out = coc(&["gradcheck", "--inject-fault"]);
    assert_eq!(code(&out), 4);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], false);
    let names: Vec<&str> = v["ops"].as_array().unwrap().iter().map(|o| o["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"coc_block"));
    assert!(names.contains(&"matmul"));
}

#[test]
fn eval_of_fresh_model_is_near_chance_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    random_cifar_dir(dir.path(), 5);
    let data = dir.path().to_str().unwrap();
    let mut mean = 0.0;
    for seed in ["0", "1", "2"] {
        let args = ["eval", "--data", data, "--subset", "300", "--seed", seed];
        let a = coc(&args);
        let b = coc(&args);
        assert_eq!(a.stdout, b.stdout);
        let v = json(&a);
        assert_eq!(v["examples"], 300);
        mean += v["accuracy"].as_f64().unwrap() / 3.0;
    }
    assert!((mean - 0.1).abs() < 0.05, "mean accuracy {mean}");
}

#[test]
fn checkpoint_problems_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    random_cifar_dir(dir.path(), 1);
    let data = dir.path().to_str().unwrap();
    let ckpt = dir.path().join("four.ckpt");
    micro_checkpoint(&ckpt, 4);

    let out = coc(&["eval", "--data", data, "--subset", "20", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("head.weight"), "{}", stderr(&out));

    let missing = dir.path().join("none.ckpt");
    let out = coc(&["eval", "--data", data, "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    let out = coc(&["viz", "--checkpoint", missing.to_str().unwrap(), "--image", "synthetic:quadrant"]);
    assert_eq!(code(&out), 3);

    std::fs::write(dir.path().join("test_batch.bin"), [0u8; 100]).unwrap();
    assert_eq!(code(&coc(&["eval", "--data", data])), 3);
}

#[test]
fn viz_writes_one_map_per_head() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    micro_checkpoint(&ckpt, 10);
    let cfg = ModelConfig::micro32();
    let want: usize = cfg.stages.iter().map(|s| s.depth * s.heads).sum();

    for (flag, regions_at_stage0) in [(None, 4), (Some("--no-partition"), 1)] {
        let out_dir = dir.path().join(format!("viz{regions_at_stage0}"));
        let mut args = vec![
            "viz",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--image",
            "synthetic:quadrant",
            "--out",
            out_dir.to_str().unwrap(),
        ];
        args.extend(flag);
        let v = json(&coc(&args));
        assert_eq!(v["count"], want);
        assert_eq!(std::fs::read_dir(&out_dir).unwrap().count(), want);
        let first = &v["files"][0];
        assert_eq!(first["regions"], regions_at_stage0);
        assert!(v["files"].as_array().unwrap().iter().all(|f| f["regions"] == 1 || flag.is_none()));
        let img = coc_core::viz::read_ppm(Path::new(first["file"].as_str().unwrap())).unwrap();
        assert_eq!((img.width, img.height), (32, 32));
    }
}

#[test]
fn train_writes_log_config_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let args = [
        "train",
        "--data",
        "synthetic:quadrant:32",
        "--epochs",
        "1",
        "--batch-size",
        "16",
        "--ablate",
        "no-position",
        "--seed",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ];
    let v = json(&coc(&args));
    assert_eq!(v["epochs_run"], 1);
    let log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    assert!(log.contains("# ablate: no-position"));
    assert!(log.contains("# seed: 3"));
    assert!(out_dir.join("final.ckpt").is_file());
    let config = out_dir.join("config.txt");
    let first = std::fs::read(out_dir.join("final.ckpt")).unwrap();

    let eval = json(&coc(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--data",
        "synthetic:quadrant:32",
        "--checkpoint",
        out_dir.join("final.ckpt").to_str().unwrap(),
        "--seed",
        "3",
    ]));
    assert_eq!(eval["examples"], 8);
    assert_eq!(eval["classes"], 4);

    json(&coc(&args));
    assert_eq!(std::fs::read(out_dir.join("final.ckpt")).unwrap(), first);
}

#[test]
fn bench_divides_similarity_work_by_regions() {
    let v = json(&coc(&["bench", "--repeats", "1"]));
    let settings = v["settings"].as_array().unwrap();
    let base = settings[0]["similarity_macs"].as_u64().unwrap();
    for s in settings {
        let r = s["regions"].as_u64().unwrap();
        assert_eq!(s["similarity_macs"].as_u64().unwrap() * r, base);
        assert_eq!(s["local_centers"].as_u64().unwrap() * r, 256);
    }
    let again = json(&coc(&["bench", "--repeats", "1"]));
    let keys = |v: &Value| v["settings"][0].as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    assert_eq!(keys(&v), keys(&again));
}
