//! One function per subcommand. Each writes into `out` and returns a short
//! human-readable report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sear_core::agents::{code_version, evaluate, read_metrics, train, Agent, MaskSource, MANIFEST_FILE};
use sear_core::envs::Env;
use sear_core::masktools::{Mask, MaskMode};
use sear_core::numerics::Rng;
use sear_core::pnm::Image;
use sear_core::toylab::run_table;
use serde_json::json;

use crate::activations::{channel_images, contact_sheet};
use crate::config::RunConfig;
use crate::plot::{aggregate, extract, render, save};
use crate::CliError;

/// Output root when `SEAR_OUTPUT_ROOT` is unset.
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const OUTPUT_ROOT_VAR: &str = "SEAR_OUTPUT_ROOT";

/// `$SEAR_OUTPUT_ROOT/<name>`, or `runs/<name>`.
pub fn default_out_dir(name: &str) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT), PathBuf::from);
    root.join(name)
}

fn write_manifest(out: &Path, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let manifest = json!({
        "command": command,
        "config": cfg,
        "seed": cfg.train.seed,
        "code_version": code_version(),
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
    Ok(fs::write(out.join(MANIFEST_FILE), text + "\n")?)
}

pub fn train_run(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let summary = train(&cfg.train, out)?;
    let mut s = format!(
        "{} steps, {} updates, {} episodes\n",
        summary.steps, summary.updates, summary.episodes
    );
    if let Some((step, r)) = summary.evals.last() {
        let _ = writeln!(
            s,
            "final eval at step {step}: return {:.3}, success {:.2}",
            r.mean_return(),
            r.success_rate()
        );
    }
    if let Some(dir) = &summary.final_checkpoint {
        let _ = writeln!(s, "checkpoint: {}", dir.display());
    }
    Ok(s)
}

pub fn eval_run(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<String, CliError> {
    let (agent, step) = Agent::load(checkpoint)?;
    let t = &cfg.train;
    let result = evaluate(
        &agent.policy(),
        &agent.env,
        t.mask_mode,
        &t.masks,
        t.eval_episodes,
        t.seed,
    )?;
    write_manifest(out, "eval", cfg)?;
    let report = json!({
        "checkpoint": checkpoint,
        "checkpoint_step": step,
        "episodes": t.eval_episodes,
        "mean_return": result.mean_return(),
        "success_rate": result.success_rate(),
        "returns": result.returns,
    });
    fs::write(
        out.join("eval.json"),
        serde_json::to_string_pretty(&report).map_err(std::io::Error::other)? + "\n",
    )?;
    Ok(format!(
        "{} episodes: return {:.3}, success {:.2}\n",
        t.eval_episodes,
        result.mean_return(),
        result.success_rate()
    ))
}

pub fn toy_run(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let seeds: Vec<u64> = (0..cfg.toy.seeds).collect();
    let table = run_table(&cfg.toy.resolved(), &seeds)?;
    write_manifest(out, "toy", cfg)?;
    table.write(out)?;
    Ok(table.to_text())
}

fn mask_image(mask: &[u8], size: usize) -> Image {
    Image::gray(size, size, mask.iter().map(|&m| m * 255).collect())
}

/// Renders one frame after `steps` random actions and writes it with the
/// mask produced by every mask mode.
pub fn maskdemo_run(cfg: &RunConfig, steps: usize, out: &Path) -> Result<String, CliError> {
    let t = &cfg.train;
    let mut env = Env::new(t.env.clone(), t.seed)?;
    env.reset()?;
    let mut rng = Rng::new(t.seed).split("maskdemo");
    for _ in 0..steps {
        env.step([rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)]);
    }
    write_manifest(out, "maskdemo", cfg)?;
    let n = t.env.image_size;
    let frame = env.latest_frame();
    Image::from_planar_rgb(n, n, &frame.rgb).save(&out.join("frame.ppm"))?;
    let exact = Mask::square(n, frame.mask.clone())?;
    let mut report = String::new();
    for (mode, name) in [
        (MaskMode::Exact, "exact"),
        (MaskMode::Preprocessed, "preprocessed"),
        (MaskMode::Noisy, "noisy"),
        (MaskMode::Approximate, "approximate"),
        (MaskMode::JointPatches, "joint-patches"),
    ] {
        let mut source = MaskSource::new(mode, t.masks.clone(), rng.split(name));
        let m = source.mask(&env)?;
        mask_image(&m, n).save(&out.join(format!("mask-{name}.pgm")))?;
        let iou = exact.iou(&Mask::square(n, m)?);
        let _ = writeln!(report, "{name:<14} IoU vs exact {iou:.3}");
    }
    Ok(report)
}

/// Writes one blended map per channel of the last encoder convolution and
/// a contact sheet. Without a checkpoint the freshly initialised agent of
/// `cfg` is used.
pub fn activations_run(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    steps: usize,
    out: &Path,
) -> Result<String, CliError> {
    let agent = match checkpoint {
        Some(dir) => Agent::load(dir)?.0,
        None => Agent::new(cfg.train.agent.clone(), cfg.train.env.clone(), cfg.train.seed)?,
    };
    let mut env = Env::new(agent.env.clone(), cfg.train.seed)?;
    let mut obs = env.reset()?;
    let mut rng = Rng::new(cfg.train.seed).split("activations");
    for _ in 0..steps {
        obs = env.step([rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)]);
    }
    let (_, features) = agent.encode_with_features(&obs.frames, &obs.masks)?;
    let channels = features.shape()[1];
    let n = agent.env.image_size;
    let frame = Image::from_planar_rgb(n, n, &env.latest_frame().rgb);
    let images = channel_images(features.data(), channels, &frame);
    write_manifest(out, "activations", cfg)?;
    for (c, img) in images.iter().enumerate() {
        img.save(&out.join(format!("channel-{c:02}.ppm")))?;
    }
    frame.save(&out.join("frame.ppm"))?;
    contact_sheet(&images, 8).save(&out.join("contact-sheet.ppm"))?;
    Ok(format!("{channels} channel maps written to {}\n", out.display()))
}

/// Plots `scalar` from records of `kind` across `files` into `output`.
pub fn plot_run(files: &[PathBuf], scalar: &str, kind: Option<&str>, output: &Path) -> Result<String, CliError> {
    if files.is_empty() {
        return Err(CliError::Config("plot needs at least one metrics file".into()));
    }
    let mut series = Vec::new();
    for f in files {
        let records = read_metrics(f).map_err(|e| CliError::Config(format!("{}: {e}", f.display())))?;
        series.push(extract(&records, scalar, kind)?);
    }
    let band = aggregate(&series);
    let title = format!("{scalar} ({} runs)", files.len());
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save(&render(&band, &title, 640, 400).into_image(), output)?;
    Ok(format!("{} points written to {}\n", band.grid.len(), output.display()))
}
