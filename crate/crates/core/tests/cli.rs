use std::path::{Path, PathBuf};
use std::process::Command;

use candle_core::Tensor;
use stylefuse::checkpoint::save_checkpoint;
use stylefuse::cli::{run, EXIT_OK, EXIT_USAGE};
use stylefuse::config::{ModelConfig, RunConfig};
use stylefuse::image_pipeline::{load_image, save_image};
use stylefuse::{DType, ImageTensor, Stage, StyleModel};
use tempfile::TempDir;

fn toy_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        resolution: 16,
        d_latent: 8,
        n_layers: 4,
        ..ModelConfig::default()
    };
    cfg.train.intrinsic_iterations = 2;
    cfg.train.stage2_layers = vec![(2, 2)];
    cfg.train.stage3_iterations = 2;
    cfg.train.batch_size = 2;
    cfg.losses.offset_iterations = 1;
    cfg
}

fn pattern(seed: usize, size: usize) -> ImageTensor {
    let data = (0..3 * size * size)
        .map(|j| (((seed * 37 + j * 11) % 89) as f32 / 44.5 - 1.0) * 0.9)
        .collect();
    ImageTensor::new(data, size).unwrap()
}

fn write_images(dir: &Path, n: usize, size: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        save_image(&pattern(i, size), dir.join(format!("img{i}.png"))).unwrap();
    }
}

fn checkpoint(dir: &Path, model: &StyleModel) -> PathBuf {
    let p = dir.join("model.ckpt");
    save_checkpoint(model, &p).unwrap();
    p
}

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("stylefuse").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn binary_exits_2_on_missing_config() {
    let tmp = TempDir::new().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_stylefuse"))
        .args(["train", "--config"])
        .arg(tmp.path().join("absent.toml"))
        .env_remove("STYLEFUSE_CONFIG")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn stage_three_needs_stage_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = toy_config();
    let mut model = StyleModel::new(&cfg, DType::F32).unwrap();
    model.stage = Stage::I;
    let ckpt = checkpoint(tmp.path(), &model);
    let config = tmp.path().join("run.toml");
    std::fs::write(&config, cfg.to_toml_string()).unwrap();
    write_images(&tmp.path().join("data"), 2, 16);
    let code = cli(&["train", "--config", s(&config), "--stage", "3", "--resume", s(&ckpt)]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn stylize_weight_count_and_zero_weights() {
    let tmp = TempDir::new().unwrap();
    let model = StyleModel::new(&toy_config(), DType::F32).unwrap();
    let ckpt = checkpoint(tmp.path(), &model);
    let input = tmp.path().join("in.png");
    save_image(&pattern(3, 16), &input).unwrap();
    let out = tmp.path().join("out.png");

    let short = vec!["0.5"; model.n_layers() - 1].join(",");
    let code = cli(&["stylize", "--checkpoint", s(&ckpt), "--input", s(&input), "--weights", &short, "--out", s(&out)]);
    assert_eq!(code, EXIT_USAGE);
    assert!(!out.exists());

    let code = cli(&["stylize", "--checkpoint", s(&ckpt), "--input", s(&input), "--weights", "0", "--out", s(&out)]);
    assert_eq!(code, EXIT_OK);
    let intrinsic = model.intrinsic(&load_image(&input, 16).unwrap()).unwrap();
    assert_eq!(load_image(&out, 16).unwrap(), ImageTensor::from_rgb8_bytes(&intrinsic.to_rgb8_bytes(), 16).unwrap());
}

#[test]
fn factorize_reports_known_directions() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = toy_config();
    cfg.model.d_latent = 2;
    cfg.model.mapping_depth = 1;
    let model = StyleModel::new(&cfg, DType::F32).unwrap();
    let diag = Tensor::from_slice(&[3f32, 0.0, 0.0, 1.0], (2, 2), &candle_core::Device::Cpu).unwrap();
    let tensors: Vec<_> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| if n == "generator.mapping.0.weight" { (n, diag.clone()) } else { (n, t.copy().unwrap()) })
        .collect();
    model.load_tensors(&tensors).unwrap();
    let ckpt = checkpoint(tmp.path(), &model);
    let out = tmp.path().join("dirs.json");

    assert_eq!(cli(&["factorize", "--checkpoint", s(&ckpt), "--top", "1", "--out", s(&out)]), EXIT_OK);
    let dirs: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let dirs = dirs.as_array().unwrap();
    assert_eq!(dirs.len(), 1);
    assert!((dirs[0]["eigenvalue"].as_f64().unwrap() - 9.0).abs() < 1e-5);
    let v: Vec<f64> = dirs[0]["vector"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((v[0].abs() - 1.0).abs() < 1e-6 && v[1].abs() < 1e-6, "{v:?}");

    assert_eq!(cli(&["factorize", "--checkpoint", s(&ckpt), "--top", "2", "--out", s(&out)]), EXIT_OK);
    let dirs: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(dirs.as_array().unwrap().len(), 2);

    assert_eq!(cli(&["factorize", "--checkpoint", s(&ckpt), "--top", "0"]), EXIT_USAGE);
    assert_eq!(cli(&["factorize", "--checkpoint", s(&ckpt), "--top", "3"]), EXIT_USAGE);
}

#[test]
fn eval_rejects_empty_directories() {
    let tmp = TempDir::new().unwrap();
    let model = StyleModel::new(&toy_config(), DType::F32).unwrap();
    let ckpt = checkpoint(tmp.path(), &model);
    let (style, test) = (tmp.path().join("style"), tmp.path().join("test"));
    std::fs::create_dir_all(&style).unwrap();
    std::fs::create_dir_all(&test).unwrap();
    let code = cli(&["eval", "--checkpoint", s(&ckpt), "--style-dir", s(&style), "--test-dir", s(&test)]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn eval_writes_both_rows() {
    let tmp = TempDir::new().unwrap();
    let model = StyleModel::new(&toy_config(), DType::F32).unwrap();
    let ckpt = checkpoint(tmp.path(), &model);
    let (style, test) = (tmp.path().join("style"), tmp.path().join("test"));
    write_images(&style, 3, 16);
    write_images(&test, 3, 16);
    let out = tmp.path().join("report.json");
    let code = cli(&["eval", "--checkpoint", s(&ckpt), "--style-dir", s(&style), "--test-dir", s(&test), "--out", s(&out)]);
    assert_eq!(code, EXIT_OK);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn train_all_stages_with_toy_config() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("run.toml");
    std::fs::write(&config, toy_config().to_toml_string()).unwrap();
    write_images(&tmp.path().join("data"), 4, 16);
    assert_eq!(cli(&["train", "--config", s(&config), "--stage", "all"]), EXIT_OK);
    let runs = tmp.path().join("runs");
    for name in ["stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "train_log.jsonl"] {
        assert!(runs.join(name).exists(), "{name} missing");
    }
    let model = stylefuse::checkpoint::load_checkpoint(runs.join("stage3.ckpt")).unwrap();
    assert_eq!(model.stage, Stage::III);
    let stored = std::fs::read(runs.join("stage3.ckpt")).unwrap();
    let again = stylefuse::checkpoint::encode(&model).unwrap();
    assert!(again == stored, "re-encoding the stage-3 checkpoint differs");
}

#[test]
fn init_config_round_trips() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("c.toml");
    assert_eq!(cli(&["init-config", s(&out)]), EXIT_OK);
    let cfg = RunConfig::load(&out).unwrap();
    assert_eq!(cfg, RunConfig::default());
}
