//! The five commands. Everything tensor-valued is generic over the run's
//! numeric precision; the thin orchestration here stays sequential.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use flowe_core::checks::{gradient_suite, warp_algebra_suite, CheckOutcome};
use flowe_core::geometry::{flo_read, FlowField};
use flowe_core::imageio::{load_gray, load_rgb, save_rgb};
use flowe_core::network::{init_params, load_checkpoint, Arch, ModelParams};
use flowe_core::readout::{
    extract_features, overlay, predict, train_linear_readout, ConfusionMatrix, RANDOM_ENCODER,
};
use flowe_core::rngstream::{derive_rng, STREAM_MODEL_INIT};
use flowe_core::synthvid::{gen_dataset, DiskSource, LabelMap, ManifestEntry};
use flowe_core::trainer::{final_checkpoint_path, metrics_path, train_loop};
use flowe_core::{Scalar, Tensor};

use crate::config::{dataset_dir, echo_config, RunConfig};
use crate::{AblationKind, CliError};

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

/// Accept either the manifest file itself or a dataset directory holding
/// `manifest.jsonl`.
fn resolve_manifest(path: &Path) -> Result<PathBuf, CliError> {
    let manifest = if path.is_dir() { path.join("manifest.jsonl") } else { path.to_path_buf() };
    if manifest.is_file() {
        Ok(manifest)
    } else {
        Err(runtime(format!(
            "no dataset manifest at {}; run `flowe gen-data` first or pass --data",
            manifest.display()
        )))
    }
}

fn read_manifest(manifest: &Path) -> Result<Vec<ManifestEntry>, CliError> {
    let text = fs::read_to_string(manifest)
        .map_err(|e| runtime(format!("cannot read {}: {e}", manifest.display())))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| runtime(format!("{}:{}: {e}", manifest.display(), i + 1)))?;
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(runtime(format!("manifest {} lists no frames", manifest.display())));
    }
    Ok(entries)
}

/// Generate the synthetic dataset described by the configuration.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = dataset_dir(cfg);
    let manifest = gen_dataset(
        &cfg.synthvid,
        cfg.seed,
        cfg.dataset.episodes,
        cfg.dataset.frames_per_episode,
        cfg.dataset.frame_gap,
        dir,
    )?;
    echo_config(cfg, dir)?;
    println!(
        "dataset: {} episodes x {} frames ({}x{} px)",
        cfg.dataset.episodes,
        cfg.dataset.frames_per_episode,
        cfg.synthvid.canvas.0,
        cfg.synthvid.canvas.1
    );
    println!("manifest: {}", manifest.display());
    Ok(())
}

/// Options for `flowe train` beyond the run configuration.
#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub data: Option<PathBuf>,
    pub steps: Option<u64>,
    pub resume: Option<PathBuf>,
    pub ablation: Option<AblationKind>,
    pub run_name: Option<String>,
}

/// Self-supervised training over a dataset on disk.
pub fn cmd_train<S: Scalar>(base: &RunConfig, args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = base.clone();
    if let Some(steps) = args.steps {
        cfg.trainer.total_steps = steps;
    }
    match args.ablation {
        Some(AblationKind::PixelBased) => cfg.trainer.ablation.pixel_based = false,
        Some(AblationKind::NoAffine) => cfg.trainer.ablation.use_affine = false,
        Some(AblationKind::NoFlow) => cfg.trainer.ablation.use_flow = false,
        None => {}
    }
    let run_name = args.run_name.clone().unwrap_or_else(|| match args.ablation {
        None => "train".to_string(),
        Some(k) => format!("train-{}", k.key()),
    });
    let run_dir = cfg.out_dir.join(run_name);

    let data_root = args.data.clone().unwrap_or_else(|| dataset_dir(&cfg).to_path_buf());
    let manifest = resolve_manifest(&data_root)?;
    let mut source = DiskSource::<S>::open(&manifest, cfg.synthvid.noise_sigma_flow)?;
    echo_config(&cfg, &run_dir)?;

    let total = cfg.trainer.total_steps;
    let started = Instant::now();
    let state = train_loop(
        &cfg.trainer,
        &Arch::default_desk(),
        &mut source,
        &run_dir,
        args.resume.as_deref(),
        |r| {
            if r.step % 100 == 0 || r.step == total {
                println!(
                    "step {:>6}/{} loss {:.4} valid {:.2} lr {:.5}",
                    r.step, total, r.loss, r.valid_pixel_fraction, r.lr
                );
            }
        },
    )?;
    println!("trained to step {} in {:.1?}", state.step, started.elapsed());
    println!("checkpoint: {}", final_checkpoint_path(&run_dir).display());
    println!("metrics: {}", metrics_path(&run_dir).display());
    Ok(())
}

/// Options for `flowe readout`.
#[derive(Debug, Clone, Default)]
pub struct ReadoutArgs {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<String>,
    pub overlays: bool,
    pub run_name: Option<String>,
}

#[derive(Debug, Serialize)]
struct ReadoutMetrics {
    encoder: String,
    class_count: usize,
    train_frames: usize,
    eval_frames: usize,
    epochs: usize,
    final_train_loss: Option<f64>,
    miou: f64,
    per_class_iou: Vec<Option<f64>>,
    /// Rows = truth, columns = prediction.
    confusion: Vec<Vec<u64>>,
}

fn encoder_tag(src: &str) -> String {
    if src == RANDOM_ENCODER {
        return "random".to_string();
    }
    let stem = Path::new(src).file_stem().and_then(|s| s.to_str()).unwrap_or("trained");
    let safe: String = stem
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect();
    if safe.is_empty() {
        "trained".to_string()
    } else {
        safe
    }
}

fn load_encoder<S: Scalar>(cfg: &RunConfig, arch: &Arch) -> Result<ModelParams<S>, CliError> {
    let src = &cfg.readout.encoder_checkpoint;
    if src == RANDOM_ENCODER {
        // The same initialization training would start from, so the
        // comparison isolates what training added.
        Ok(init_params::<S>(arch, &mut derive_rng(cfg.seed, &[STREAM_MODEL_INIT]))?)
    } else {
        let bytes =
            fs::read(src).map_err(|e| runtime(format!("cannot read checkpoint {src}: {e}")))?;
        Ok(load_checkpoint::<S>(&bytes, arch)?.online)
    }
}

fn load_labels(path: &Path) -> Result<LabelMap, CliError> {
    let (h, w, data) = load_gray(path)?;
    Ok(LabelMap::from_vec(h, w, data)?)
}

/// Train and evaluate the frozen-encoder linear readout; writes a metrics
/// JSON (and optional prediction overlays) under the run directory.
pub fn cmd_readout<S: Scalar>(base: &RunConfig, args: &ReadoutArgs) -> Result<(), CliError> {
    let mut cfg = base.clone();
    if let Some(c) = &args.checkpoint {
        cfg.readout.encoder_checkpoint = c.clone();
    }
    let run_dir = cfg.out_dir.join(args.run_name.as_deref().unwrap_or("readout"));

    let data_root = args.data.clone().unwrap_or_else(|| dataset_dir(&cfg).to_path_buf());
    let manifest = resolve_manifest(&data_root)?;
    let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let entries = read_manifest(&manifest)?;

    let episodes: BTreeSet<usize> = entries.iter().map(|e| e.episode).collect();
    if episodes.len() < 2 {
        return Err(runtime(format!(
            "readout needs at least 2 episodes for a train/eval split, got {}",
            episodes.len()
        )));
    }
    let eval_count = (episodes.len() / 4).max(1);
    let eval_episodes: BTreeSet<usize> =
        episodes.iter().rev().take(eval_count).copied().collect();

    let arch = Arch::default_desk();
    let params = load_encoder::<S>(&cfg, &arch)?;
    let tag = encoder_tag(&cfg.readout.encoder_checkpoint);
    echo_config(&cfg, &run_dir)?;

    let mut train_feats: Vec<Tensor<S>> = Vec::new();
    let mut train_labels: Vec<LabelMap> = Vec::new();
    // (episode, frame, features, labels, image path) per held-out frame.
    let mut eval_set: Vec<(usize, usize, Tensor<S>, LabelMap, PathBuf)> = Vec::new();
    for e in &entries {
        let image_path = root.join(&e.image);
        let image = load_rgb::<S>(&image_path)?;
        let labels = load_labels(&root.join(&e.labels))?;
        let feats = extract_features(&params, &image)?;
        if eval_episodes.contains(&e.episode) {
            eval_set.push((e.episode, e.frame, feats, labels, image_path));
        } else {
            train_feats.push(feats);
            train_labels.push(labels);
        }
    }

    let started = Instant::now();
    let (head, curve) = train_linear_readout(&train_feats, &train_labels, &cfg.readout)?;
    let mut confusion = ConfusionMatrix::new(cfg.readout.class_count);
    for (episode, frame, feats, labels, image_path) in &eval_set {
        let pred = predict(&head, feats, Some(labels.dims()))?;
        confusion.accumulate(&pred, labels)?;
        if args.overlays {
            let image = load_rgb::<S>(image_path)?;
            let blended = overlay(&image, &pred, 0.55)?;
            let name = format!("overlay-{tag}-ep{episode:03}-f{frame:03}.png");
            save_rgb(run_dir.join(name), &blended)?;
        }
    }
    let report = confusion.report();

    let metrics = ReadoutMetrics {
        encoder: cfg.readout.encoder_checkpoint.clone(),
        class_count: cfg.readout.class_count,
        train_frames: train_feats.len(),
        eval_frames: eval_set.len(),
        epochs: cfg.readout.epochs,
        final_train_loss: curve.last().copied(),
        miou: report.miou,
        per_class_iou: report.per_class_iou.clone(),
        confusion: (0..cfg.readout.class_count)
            .map(|t| (0..cfg.readout.class_count).map(|p| report.confusion.count(t, p)).collect())
            .collect(),
    };
    let path = run_dir.join(format!("metrics-{tag}.json"));
    let mut text = serde_json::to_string_pretty(&metrics).map_err(flowe_core::FloweError::from)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;

    println!(
        "encoder {tag}: mIoU {:.4} over {} eval frames ({} train frames, {:.1?})",
        report.miou,
        eval_set.len(),
        train_feats.len(),
        started.elapsed()
    );
    for (k, iou) in report.per_class_iou.iter().enumerate() {
        match iou {
            Some(v) => println!("  class {k}: IoU {v:.4}"),
            None => println!("  class {k}: absent"),
        }
    }
    println!("metrics: {}", path.display());
    Ok(())
}

fn print_outcomes(header: &str, outcomes: &[CheckOutcome], elapsed: std::time::Duration) {
    println!("{header} ({elapsed:.1?}):");
    for o in outcomes {
        println!("  {}: {} ({})", o.name, if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
}

/// Run the warp-algebra and gradient verification suites.
pub fn cmd_check() -> Result<(), CliError> {
    let t0 = Instant::now();
    let warp = warp_algebra_suite()?;
    print_outcomes("warp algebra suite", &warp, t0.elapsed());
    let t1 = Instant::now();
    let grads = gradient_suite()?;
    print_outcomes("gradient suite", &grads, t1.elapsed());

    let failed: Vec<&str> = warp
        .iter()
        .chain(grads.iter())
        .filter(|o| !o.passed)
        .map(|o| o.name)
        .collect();
    if failed.is_empty() {
        println!("all {} checks passed", warp.len() + grads.len());
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("{} check(s) failed: {}", failed.len(), failed.join(", "))))
    }
}

fn read_flo_file(path: &Path) -> Result<FlowField, CliError> {
    let bytes = fs::read(path).map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))?;
    Ok(flo_read(&bytes)?)
}

struct PlaneStats {
    min: f64,
    max: f64,
    mean: f64,
}

fn plane_stats(data: &[f64]) -> PlaneStats {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for &v in data {
        min = min.min(v);
        max = max.max(v);
        sum += v;
    }
    PlaneStats { min, max, mean: sum / data.len() as f64 }
}

/// Print the dimensions and displacement statistics of one flow file.
pub fn cmd_flo_inspect(path: &Path) -> Result<(), CliError> {
    let flow = read_flo_file(path)?;
    let (h, w) = flow.dims();
    println!("{}: {w}x{h} (width x height), {} pixels", path.display(), w * h);
    let u = plane_stats(flow.u_plane());
    let v = plane_stats(flow.v_plane());
    println!("  u: min {:+.4}  max {:+.4}  mean {:+.4}", u.min, u.max, u.mean);
    println!("  v: min {:+.4}  max {:+.4}  mean {:+.4}", v.min, v.max, v.mean);
    let (mut mag_max, mut mag_sum) = (0.0f64, 0.0f64);
    for (uu, vv) in flow.u_plane().iter().zip(flow.v_plane()) {
        let m = (uu * uu + vv * vv).sqrt();
        mag_max = mag_max.max(m);
        mag_sum += m;
    }
    println!("  |flow|: mean {:.4}  max {:.4}", mag_sum / (w * h) as f64, mag_max);
    Ok(())
}

/// Compare two flow files and summarize their differences.
pub fn cmd_flo_diff(a: &Path, b: &Path) -> Result<(), CliError> {
    let fa = read_flo_file(a)?;
    let fb = read_flo_file(b)?;
    if fa.dims() != fb.dims() {
        println!(
            "dimensions differ: {} is {:?}, {} is {:?} (height, width)",
            a.display(),
            fa.dims(),
            b.display(),
            fb.dims()
        );
        return Ok(());
    }
    let (h, w) = fa.dims();
    let mut differing = 0usize;
    let (mut max_du, mut max_dv) = (0.0f64, 0.0f64);
    for i in 0..h * w {
        let du = (fa.u_plane()[i] - fb.u_plane()[i]).abs();
        let dv = (fa.v_plane()[i] - fb.v_plane()[i]).abs();
        if fa.u_plane()[i].to_bits() != fb.u_plane()[i].to_bits()
            || fa.v_plane()[i].to_bits() != fb.v_plane()[i].to_bits()
        {
            differing += 1;
        }
        max_du = max_du.max(du);
        max_dv = max_dv.max(dv);
    }
    if differing == 0 {
        println!("identical: {w}x{h}, all {} pixels match bitwise", w * h);
    } else {
        println!(
            "differs: {differing}/{} pixels ({:.2}%), max |du| {max_du:.6}, max |dv| {max_dv:.6}",
            w * h,
            100.0 * differing as f64 / (w * h) as f64
        );
    }
    Ok(())
}
