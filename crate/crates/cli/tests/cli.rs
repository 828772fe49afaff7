//! End-to-end tests of the `flowe` binary: dataset determinism, training
//! and resume behavior, ablation plumbing, config echo, flow-file tools,
//! and the exit-status discipline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_flowe");

fn flowe(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, want: i32) {
    let got = out.status.code().expect("exited");
    assert_eq!(
        got,
        want,
        "exit {got}, wanted {want}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Overrides that keep every run small enough for a test suite.
fn tiny(out_dir: &Path) -> Vec<String> {
    vec![
        format!("--out-dir={}", out_dir.display()),
        "--dataset.episodes=2".into(),
        "--dataset.frames_per_episode=3".into(),
        "--synthvid.canvas=[48, 64]".into(),
        "--augment.crop_size=[16, 16]".into(),
        "--trainer.batch_size=2".into(),
        "--trainer.checkpoint_every=3".into(),
    ]
}

fn run_tiny(out_dir: &Path, extra: &[&str]) -> Output {
    let mut args: Vec<String> = tiny(out_dir);
    args.extend(extra.iter().map(|s| s.to_string()));
    let argrefs: Vec<&str> = args.iter().map(String::as_str).collect();
    flowe(&argrefs)
}

/// Every file under `root`, keyed by its relative path.
fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_path_buf();
                out.insert(rel, fs::read(&path).expect("readable file"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn gen_data_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_code(&run_tiny(&a, &["gen-data"]), 0);
    assert_code(&run_tiny(&b, &["gen-data"]), 0);

    let ta = tree_bytes(&a.join("dataset"));
    let tb = tree_bytes(&b.join("dataset"));
    let names_a: Vec<_> = ta.keys().cloned().collect();
    let names_b: Vec<_> = tb.keys().cloned().collect();
    assert_eq!(names_a, names_b);
    assert!(ta.keys().any(|p| p.extension().is_some_and(|e| e == "flo")));
    for (name, bytes) in &ta {
        // The config echo records the out_dir, which legitimately differs.
        if name == Path::new("config-resolved.toml") {
            continue;
        }
        assert_eq!(Some(bytes), tb.get(name), "{} differs between runs", name.display());
    }
}

#[test]
fn gen_data_different_seed_changes_frames() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_code(&run_tiny(&a, &["gen-data"]), 0);
    assert_code(&run_tiny(&b, &["--set", "seed=1", "gen-data"]), 0);
    let frame = Path::new("ep000/frame000.png");
    assert_ne!(
        fs::read(a.join("dataset").join(frame)).unwrap(),
        fs::read(b.join("dataset").join(frame)).unwrap()
    );
}

#[test]
fn gen_data_unwritable_out_dir_is_a_runtime_error() {
    let out = run_tiny(Path::new("/dev/null/nope"), &["gen-data"]);
    assert_code(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn train_zero_steps_writes_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    assert_code(&run_tiny(&out_dir, &["gen-data"]), 0);
    assert_code(&run_tiny(&out_dir, &["train", "--steps", "0"]), 0);

    let run_dir = out_dir.join("train");
    assert!(run_dir.join("checkpoint-final.bin").exists());
    assert_eq!(fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap(), "");
    let extras: Vec<_> = fs::read_dir(&run_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("checkpoint-") && n != "checkpoint-final.bin")
        .collect();
    assert!(extras.is_empty(), "unexpected periodic checkpoints: {extras:?}");
}

#[test]
fn resume_reproduces_the_uninterrupted_run_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    assert_code(&run_tiny(&out_dir, &["gen-data"]), 0);

    // One uninterrupted 6-step run; checkpoint_every=3 leaves the state at
    // step 3 behind, standing in for a run killed halfway.
    assert_code(
        &run_tiny(&out_dir, &["train", "--steps", "6", "--run-name", "one-shot"]),
        0,
    );
    let one = out_dir.join("one-shot");
    let metrics = fs::read_to_string(one.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);

    // Same config run twice is bitwise reproducible at the file level.
    assert_code(
        &run_tiny(&out_dir, &["train", "--steps", "6", "--run-name", "replay"]),
        0,
    );
    assert_eq!(
        fs::read(one.join("checkpoint-final.bin")).unwrap(),
        fs::read(out_dir.join("replay").join("checkpoint-final.bin")).unwrap()
    );

    // Resuming from the halfway checkpoint finishes on the same trajectory.
    let resume_arg =
        format!("--resume={}", one.join("checkpoint-000003.bin").display());
    assert_code(
        &run_tiny(
            &out_dir,
            &["train", "--steps", "6", "--run-name", "resumed", &resume_arg],
        ),
        0,
    );
    let resumed = out_dir.join("resumed");
    for file in ["checkpoint-final.bin", "checkpoint-000006.bin"] {
        assert_eq!(
            fs::read(one.join(file)).unwrap(),
            fs::read(resumed.join(file)).unwrap(),
            "{file} differs between the uninterrupted and the resumed run"
        );
    }
    let tail: Vec<&str> = metrics.lines().skip(3).collect();
    let resumed_metrics = fs::read_to_string(resumed.join("metrics.jsonl")).unwrap();
    assert_eq!(resumed_metrics.lines().collect::<Vec<_>>(), tail);
}

#[test]
fn ablation_flag_is_visible_in_the_echoed_config() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    assert_code(&run_tiny(&out_dir, &["gen-data"]), 0);
    assert_code(
        &run_tiny(&out_dir, &["train", "--steps", "1", "--ablation", "no_flow"]),
        0,
    );
    let echoed =
        fs::read_to_string(out_dir.join("train-no_flow").join("config-resolved.toml")).unwrap();
    assert!(echoed.contains("use_flow = false"), "echo:\n{echoed}");
    assert!(echoed.contains("use_affine = true"));
    assert!(echoed.contains("pixel_based = true"));
}

#[test]
fn echoed_config_reloads_to_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    assert_code(&run_tiny(&out_dir, &["--set", "seed=9", "gen-data"]), 0);
    let echo_path = out_dir.join("dataset").join("config-resolved.toml");
    let first_echo = fs::read(&echo_path).unwrap();
    let first_manifest = fs::read(out_dir.join("dataset").join("manifest.jsonl")).unwrap();

    // Re-running from the echoed file alone must reproduce the run.
    let cfg_arg = format!("--config={}", echo_path.display());
    assert_code(&flowe(&[&cfg_arg, "gen-data"]), 0);
    assert_eq!(fs::read(&echo_path).unwrap(), first_echo);
    assert_eq!(fs::read(out_dir.join("dataset").join("manifest.jsonl")).unwrap(), first_manifest);
}

#[test]
fn readout_writes_metrics_json() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    assert_code(&run_tiny(&out_dir, &["gen-data"]), 0);
    assert_code(&run_tiny(&out_dir, &["--set", "readout.epochs=1", "readout"]), 0);
    let path = out_dir.join("readout").join("metrics-random.json");
    let text = fs::read_to_string(&path).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(json["encoder"], "random");
    let miou = json["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou), "mIoU {miou}");
}

#[test]
fn flo_tools_inspect_and_diff() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    assert_code(&run_tiny(&out_dir, &["gen-data"]), 0);
    let flow_a = out_dir.join("dataset").join("ep000").join("flow000.flo");
    let flow_b = out_dir.join("dataset").join("ep001").join("flow000.flo");
    assert!(flow_a.exists() && flow_b.exists());
    let (a, b) = (flow_a.to_str().unwrap(), flow_b.to_str().unwrap());

    let out = flowe(&["flo", "inspect", a]);
    assert_code(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("width x height"));

    let same = flowe(&["flo", "diff", a, a]);
    assert_code(&same, 0);
    assert!(String::from_utf8_lossy(&same.stdout).contains("identical"));

    let diff = flowe(&["flo", "diff", a, b]);
    assert_code(&diff, 0);
    assert!(!String::from_utf8_lossy(&diff.stdout).contains("identical"));
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");

    // Unknown config key -> 2.
    assert_code(&run_tiny(&out_dir, &["--trainer.no_such_knob=1", "gen-data"]), 2);
    // Invalid value -> 2.
    assert_code(&run_tiny(&out_dir, &["--trainer.base_lr=-1", "gen-data"]), 2);
    // Malformed --set -> 2.
    assert_code(&run_tiny(&out_dir, &["--set", "seed", "gen-data"]), 2);
    // Missing dataset -> 1.
    let missing = dir.path().join("missing");
    let data_arg = format!("--data={}", missing.display());
    assert_code(&run_tiny(&out_dir, &["train", &data_arg]), 1);
    // CLI parse error -> 2 (clap's own convention, kept).
    assert_code(&flowe(&["definitely-not-a-command"]), 2);
    // Help -> 0.
    assert_code(&flowe(&["--help"]), 0);
}
