use std::path::{Path, PathBuf};
use std::process::Command;

use sear_cli::commands::{activations_run, plot_run, toy_run, train_run};
use sear_cli::config::{resolve, RewardKind};
use sear_cli::plot::{aggregate, extract, render, Series, BAND, LINE};
use sear_cli::CliError;
use sear_core::agents::{read_metrics, Preset, TrainConfig, Variant, METRICS_FILE};
use sear_core::masktools::MaskMode;
use sear_core::pnm::Image;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn sear(args: &[&str], root: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sear"))
        .args(args)
        .env("SEAR_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

/// Overrides that shrink a run to a few seconds.
fn tiny(extra: &[&str]) -> Vec<String> {
    [
        "env.image_size=24",
        "env.episode_length=20",
        "agent.batch_size=4",
        "agent.seed_frames=40",
        "agent.exploration_steps=20",
        "agent.latent_dim=16",
        "agent.feature_dim=8",
        "agent.hidden_dim=16",
        "agent.replay_capacity=400",
        "total_steps=100",
        "eval_every=50",
        "eval_episodes=2",
    ]
    .iter()
    .chain(extra)
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn empty_file_with_desk_preset_is_complete() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "empty.toml", "");
    let cfg = resolve(Some(&f), Some("desk"), None, &[]).unwrap();
    assert_eq!(cfg.train, TrainConfig::preset(Preset::Desk));
    assert_eq!(cfg.preset, Preset::Desk);
}

#[test]
fn file_values_override_the_preset() {
    let dir = tempfile::tempdir().unwrap();
    let text = "preset = \"paper\"\nseed = 9\nmask_mode = \"noisy\"\n\n[agent]\nvariant = \"drq-ae\"\nc1 = 0.5\nstd_duration = 10\n\n[masks]\nnoise_p = 0.3\n";
    let f = write(dir.path(), "c.toml", text);
    let cfg = resolve(Some(&f), None, None, &[]).unwrap();
    assert_eq!(cfg.preset, Preset::Paper);
    assert_eq!(cfg.train.agent.batch_size, 256);
    assert_eq!(cfg.train.seed, 9);
    assert_eq!(cfg.train.mask_mode, MaskMode::Noisy);
    assert_eq!(cfg.train.agent.variant, Variant::DrqAe);
    assert_eq!(cfg.train.agent.weights.c1, 0.5);
    assert_eq!(cfg.train.agent.std_schedule.duration, 10);
    assert_eq!(cfg.train.masks.noise_p, 0.3);
}

#[test]
fn flags_beat_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(
        dir.path(),
        "c.toml",
        "preset = \"paper\"\nseed = 9\n[agent]\nc1 = 0.5\n",
    );
    let sets = vec!["agent.c1=0.25".to_string(), "agent.variant=drq".to_string()];
    let cfg = resolve(Some(&f), Some("desk"), Some(4), &sets).unwrap();
    assert_eq!(cfg.preset, Preset::Desk);
    assert_eq!(cfg.train.seed, 4);
    assert_eq!(cfg.train.agent.weights.c1, 0.25);
    assert_eq!(cfg.train.agent.variant, Variant::Drq);
}

#[test]
fn later_overrides_win() {
    let sets = vec!["agent.c2=0.1".to_string(), "agent.c2=0.2".to_string()];
    let cfg = resolve(None, None, None, &sets).unwrap();
    assert_eq!(cfg.train.agent.weights.c2, 0.2);
}

#[test]
fn negative_coefficient_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "c.toml", "[agent]\nc2 = -1\n");
    let err = resolve(Some(&f), None, None, &[]).unwrap_err();
    assert!(matches!(err, CliError::Config(ref m) if m.contains("c2")), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn unknown_key_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "c.toml", "seed = 1\n\n[agent]\nc1 = 0.1\nc3 = 0.1\n");
    let err = resolve(Some(&f), None, None, &[]).unwrap_err().to_string();
    assert!(err.contains("line 5") && err.contains("c3"), "{err}");
    let f = write(dir.path(), "d.toml", "[agnet]\nc1 = 0.1\n");
    let err = resolve(Some(&f), None, None, &[]).unwrap_err().to_string();
    assert!(err.contains("line 1") && err.contains("agnet"), "{err}");
}

#[test]
fn type_mismatch_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "c.toml", "seed = 1\n[env]\nimage_size = \"big\"\n");
    let err = resolve(Some(&f), None, None, &[]).unwrap_err().to_string();
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn missing_file_and_bad_preset_are_config_errors() {
    let err = resolve(Some(Path::new("/nonexistent/c.toml")), None, None, &[]).unwrap_err();
    assert!(matches!(err, CliError::Config(_)));
    assert!(matches!(
        resolve(None, Some("huge"), None, &[]),
        Err(CliError::Config(_))
    ));
    assert!(matches!(
        resolve(None, None, None, &["agent.c1".into()]),
        Err(CliError::Config(_))
    ));
}

#[test]
fn env_mistakes_are_config_errors() {
    let err = resolve(None, None, None, &["env.episode_length=7".into()]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn toy_settings_are_read() {
    let sets = vec![
        "toy.seeds=5".to_string(),
        "toy.reward_model=mlp".to_string(),
        "toy.k=5".to_string(),
    ];
    let cfg = resolve(None, None, None, &sets).unwrap();
    assert_eq!(cfg.toy.seeds, 5);
    assert_eq!(cfg.toy.reward_model, RewardKind::Mlp);
    assert_eq!(cfg.toy.resolved().k, 5);
}

#[test]
fn binary_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(
        sear(&["--set", "agent.c2=-1", "train"], root.path()).status.code(),
        Some(2)
    );
    assert_eq!(
        sear(&["--config", "/nonexistent.toml", "toy"], root.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(sear(&["--preset", "nope", "train"], root.path()).status.code(), Some(2));
}

#[test]
fn train_writes_a_manifest_with_every_setting() {
    let root = tempfile::tempdir().unwrap();
    let cfg = resolve(None, None, Some(2), &tiny(&[])).unwrap();
    let out = root.path().join("run");
    train_run(&cfg, &out).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let echoed: TrainConfig = serde_json::from_value(manifest["config"].clone()).unwrap();
    assert_eq!(echoed, cfg.train);
    assert_eq!(manifest["seed"], 2);
    assert!(manifest["code_version"].as_str().unwrap().starts_with("sear-core"));
}

#[test]
fn binary_trains_evaluates_and_dumps_activations() {
    let root = tempfile::tempdir().unwrap();
    let mut args: Vec<String> = ["--seed", "1"].iter().map(|s| s.to_string()).collect();
    for s in tiny(&[]) {
        args.push("--set".into());
        args.push(s);
    }
    let run = |cmd: &[&str]| {
        let mut a: Vec<&str> = args.iter().map(String::as_str).collect();
        a.extend_from_slice(cmd);
        let o = sear(&a, root.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["train"]);
    let train_dir = root.path().join("train-sear-seed1");
    assert!(train_dir.join(METRICS_FILE).exists());
    let ckpt = train_dir.join("checkpoints/final");
    run(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    let eval: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.path().join("eval-sear-seed1/eval.json")).unwrap()).unwrap();
    assert_eq!(eval["returns"].as_array().unwrap().len(), 2);
    run(&["activations", "--checkpoint", ckpt.to_str().unwrap()]);
    let act = root.path().join("activations-sear-seed1");
    let channels = std::fs::read_dir(&act)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("channel-")
        })
        .count();
    assert_eq!(channels, 32);
    let sheet = Image::load(&act.join("contact-sheet.ppm")).unwrap();
    assert_eq!((sheet.width, sheet.height), (8 * 26 + 2, 4 * 26 + 2));
}

#[test]
fn activations_without_checkpoint_emit_32_maps() {
    let root = tempfile::tempdir().unwrap();
    let cfg = resolve(None, None, None, &tiny(&[])).unwrap();
    let report = activations_run(&cfg, None, 2, root.path()).unwrap();
    assert!(report.starts_with("32 channel maps"));
    let img = Image::load(&root.path().join("channel-00.ppm")).unwrap();
    assert_eq!((img.width, img.height, img.channels), (24, 24, 3));
}

#[test]
fn maskdemo_writes_every_mode() {
    let root = tempfile::tempdir().unwrap();
    let o = sear(&["--set", "env.image_size=32", "maskdemo", "--steps", "2"], root.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = root.path().join("maskdemo-sear-seed0");
    for name in ["exact", "preprocessed", "noisy", "approximate", "joint-patches"] {
        let m = Image::load(&dir.join(format!("mask-{name}.pgm"))).unwrap();
        assert_eq!((m.width, m.channels), (32, 1));
        assert!(m.pixels.iter().all(|&v| v == 0 || v == 255));
    }
}

#[test]
fn toy_command_writes_the_table() {
    let root = tempfile::tempdir().unwrap();
    let sets: Vec<String> = [
        "toy.seeds=5",
        "toy.data_episodes=30",
        "toy.eval_episodes=1",
        "toy.candidates=8",
        "toy.horizon=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let cfg = resolve(None, None, None, &sets).unwrap();
    let text = toy_run(&cfg, root.path()).unwrap();
    assert!(text.contains("sigma_E > sigma_R"));
    assert!(root.path().join("table.json").exists());
    assert!(root.path().join("manifest.json").exists());
}

fn metrics_file(dir: &Path, name: &str, evals: &[(u64, f64)]) -> PathBuf {
    let lines: String = evals
        .iter()
        .map(|(s, v)| format!("{{\"kind\":\"eval\",\"step\":{s},\"eval_success\":{v}}}\n"))
        .collect();
    write(
        dir,
        name,
        &format!("{{\"kind\":\"update\",\"step\":1,\"critic_loss\":0.5}}\n{lines}"),
    )
}

#[test]
fn single_file_gives_a_line_without_band() {
    let dir = tempfile::tempdir().unwrap();
    let f = metrics_file(dir.path(), "a.jsonl", &[(0, 0.0), (10, 0.5), (20, 1.0)]);
    let s = extract(&read_metrics(&f).unwrap(), "eval_success", Some("eval")).unwrap();
    let band = aggregate(&[s]);
    assert_eq!(band.lo, band.mean);
    assert_eq!(band.hi, band.mean);
    let img = render(&band, "t", 320, 200);
    let count = |c| {
        (0..200)
            .flat_map(|y| (0..320).map(move |x| (x, y)))
            .filter(|&(x, y)| img.get(x, y) == c)
            .count()
    };
    assert!(count(LINE) > 100);
    assert_eq!(count(BAND), 0);
}

#[test]
fn identical_files_give_a_zero_width_band() {
    let dir = tempfile::tempdir().unwrap();
    let a = metrics_file(dir.path(), "a.jsonl", &[(0, 0.1), (10, 0.7)]);
    let b = metrics_file(dir.path(), "b.jsonl", &[(0, 0.1), (10, 0.7)]);
    let series: Vec<Series> = [a, b]
        .iter()
        .map(|f| extract(&read_metrics(f).unwrap(), "eval_success", Some("eval")).unwrap())
        .collect();
    let band = aggregate(&series);
    assert_eq!(band.hi, band.lo);
}

#[test]
fn mismatched_grids_are_interpolated_onto_the_union() {
    let a = Series::new(vec![(0.0, 0.0), (10.0, 1.0)]);
    let b = Series::new(vec![(0.0, 1.0), (5.0, 1.0), (10.0, 1.0)]);
    let band = aggregate(&[a, b]);
    assert_eq!(band.grid, vec![0.0, 5.0, 10.0]);
    assert_eq!(band.mean, vec![0.5, 0.75, 1.0]);
    assert_eq!(band.hi[0] - band.lo[0], 1.0);
}

#[test]
fn plot_writes_ppm_and_png() {
    let dir = tempfile::tempdir().unwrap();
    let a = metrics_file(dir.path(), "a.jsonl", &[(0, 0.0), (10, 0.5)]);
    let b = metrics_file(dir.path(), "b.jsonl", &[(0, 0.2), (7, 0.4), (10, 0.9)]);
    let ppm = dir.path().join("p.ppm");
    plot_run(&[a.clone(), b.clone()], "eval_success", Some("eval"), &ppm).unwrap();
    let img = Image::load(&ppm).unwrap();
    assert_eq!((img.width, img.height), (640, 400));
    let png = dir.path().join("p.png");
    plot_run(&[a, b], "eval_success", None, &png).unwrap();
    assert_eq!(&std::fs::read(&png).unwrap()[..4], b"\x89PNG");
    assert!(matches!(
        plot_run(&[], "eval_success", None, &ppm),
        Err(CliError::Config(_))
    ));
}

#[test]
fn five_seed_success_curves_render() {
    let root = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for seed in 0..5 {
        let cfg = resolve(None, None, Some(seed), &tiny(&[])).unwrap();
        let out = root.path().join(format!("s{seed}"));
        train_run(&cfg, &out).unwrap();
        files.push(out.join(METRICS_FILE));
    }
    let plot = root.path().join("success.ppm");
    plot_run(&files, "eval_success", Some("eval"), &plot).unwrap();
    assert!(Image::load(&plot).is_ok());
}
