//! End-to-end CLI exercises over a micro pipeline: every subcommand runs,
//! flags are honored, and failures exit with their category codes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_melsynth"))
}

fn write_micro_config(dir: &Path) -> PathBuf {
    let path = dir.join("micro.toml");
    std::fs::write(
        &path,
        r#"
[frame]
sample_rate = 16000
hop = 3200
window = 4096
mel_bins = 32

[dataset]
instruments = 2
corpus_clips = 8
size = 4
augment_fraction = 0.5
notes_min = 1
notes_max = 2
pitch_lo = 55
pitch_hi = 67

[codec]
depth = 2
k_a = 16
iters = 4
max_clips = 4

[model]
preset = "toy"
d_clap = 64

[train]
steps = 2
batch_size = 2
lr = 1e-3
log_every = 0
"#,
    )
    .unwrap();
    path
}

#[test]
fn help_lists_every_subcommand() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "build-dataset",
        "train-codec",
        "train",
        "synthesize",
        "transcribe",
        "evaluate",
        "interpolate-embed",
    ] {
        assert!(text.contains(sub), "--help must list {sub}");
    }
    // every synthesize flag is documented
    let out = bin().args(["synthesize", "--help"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--timbre-audio",
        "--timbre-file",
        "--alpha",
        "--top-p",
        "--gamma",
        "--guidance",
        "--seed",
        "--temperature",
        "--uncond",
    ] {
        assert!(text.contains(flag), "synthesize --help must list {flag}");
    }
}

#[test]
fn micro_pipeline_runs_every_command() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_micro_config(dir);
    let data = dir.join("data");
    let ckpts = dir.join("ckpts");
    let outputs = dir.join("outputs");
    std::fs::create_dir_all(&outputs).unwrap();
    let run = |args: &[&str]| {
        let out = bin()
            .arg("--config")
            .arg(&cfg)
            .args(args)
            .current_dir(dir)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "command {:?} failed:\n{}\n{}",
            args,
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).into_owned()
    };

    let text = run(&["build-dataset", "--out", data.to_str().unwrap()]);
    assert!(text.contains("6 manifest rows"), "4 base + 2 wet rows: {text}");

    run(&[
        "train-codec",
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        ckpts.join("codec.bin").to_str().unwrap(),
    ]);
    for mode in ["cond", "uncond", "transcribe"] {
        run(&[
            "train",
            "--mode",
            mode,
            "--dataset",
            data.to_str().unwrap(),
            "--codec",
            ckpts.join("codec.bin").to_str().unwrap(),
            "--out",
            ckpts.join(format!("{mode}.ckpt")).to_str().unwrap(),
        ]);
    }

    // plain sampling and first-note guidance settings
    run(&[
        "synthesize",
        "--model",
        ckpts.join("cond.ckpt").to_str().unwrap(),
        "--codec",
        ckpts.join("codec.bin").to_str().unwrap(),
        "--midi",
        data.join("0.mid").to_str().unwrap(),
        "--out",
        outputs.join("0_dry.wav").to_str().unwrap(),
        "--timbre-audio",
        data.join("0_ref_dry.wav").to_str().unwrap(),
        "--top-p",
        "0.95",
        "--guidance",
        "none",
        "--seed",
        "11",
    ]);
    let text = run(&[
        "synthesize",
        "--model",
        ckpts.join("cond.ckpt").to_str().unwrap(),
        "--codec",
        ckpts.join("codec.bin").to_str().unwrap(),
        "--uncond",
        ckpts.join("uncond.ckpt").to_str().unwrap(),
        "--midi",
        data.join("0.mid").to_str().unwrap(),
        "--out",
        outputs.join("0_fng.wav").to_str().unwrap(),
        "--timbre-audio",
        data.join("0_ref_dry.wav").to_str().unwrap(),
        "--top-p",
        "0.6",
        "--gamma",
        "1.6",
        "--guidance",
        "first-note",
        "--seed",
        "11",
    ]);
    assert!(text.contains("guided steps: [") && !text.contains("guided steps: []"));

    // reproducibility: same seed, same bytes
    for name in ["rep_a.wav", "rep_b.wav"] {
        run(&[
            "synthesize",
            "--model",
            ckpts.join("cond.ckpt").to_str().unwrap(),
            "--codec",
            ckpts.join("codec.bin").to_str().unwrap(),
            "--midi",
            data.join("1.mid").to_str().unwrap(),
            "--out",
            outputs.join(name).to_str().unwrap(),
            "--timbre-audio",
            data.join("1_ref_dry.wav").to_str().unwrap(),
            "--seed",
            "77",
        ]);
    }
    assert_eq!(
        std::fs::read(outputs.join("rep_a.wav")).unwrap(),
        std::fs::read(outputs.join("rep_b.wav")).unwrap()
    );

    run(&[
        "transcribe",
        "--model",
        ckpts.join("transcribe.ckpt").to_str().unwrap(),
        "--codec",
        ckpts.join("codec.bin").to_str().unwrap(),
        "--audio",
        data.join("0_tgt_dry.wav").to_str().unwrap(),
        "--out",
        outputs.join("0.mid").to_str().unwrap(),
    ]);

    let text = run(&[
        "evaluate",
        "--dataset",
        data.to_str().unwrap(),
        "--outputs",
        outputs.to_str().unwrap(),
        "--codec",
        ckpts.join("codec.bin").to_str().unwrap(),
        "--transcriber",
        ckpts.join("transcribe.ckpt").to_str().unwrap(),
    ]);
    assert!(text.contains("MSS Loss"));
    assert!(outputs.join("report.jsonl").exists());

    // timbre interpolation: file + audio sides
    run(&[
        "interpolate-embed",
        "--timbre-audio",
        data.join("0_ref_dry.wav").to_str().unwrap(),
        "--alpha",
        "0.0",
        "--out",
        outputs.join("e_audio.txt").to_str().unwrap(),
    ]);
    run(&[
        "interpolate-embed",
        "--timbre-audio",
        data.join("1_ref_dry.wav").to_str().unwrap(),
        "--timbre-file",
        outputs.join("e_audio.txt").to_str().unwrap(),
        "--alpha",
        "0.5",
        "--out",
        outputs.join("e_mix.txt").to_str().unwrap(),
    ]);
    assert!(outputs.join("e_mix.txt").exists());
}

#[test]
fn exit_codes_reflect_error_categories() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_micro_config(dir);
    let data = dir.join("data");
    let ckpts = dir.join("ckpts");

    // build a minimal pipeline to get real checkpoints
    let run_ok = |args: &[&str]| {
        let out = bin().arg("--config").arg(&cfg).args(args).current_dir(dir).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run_ok(&["build-dataset", "--out", data.to_str().unwrap()]);
    run_ok(&[
        "train-codec",
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        ckpts.join("codec.bin").to_str().unwrap(),
    ]);
    run_ok(&[
        "train",
        "--mode",
        "transcribe",
        "--dataset",
        data.to_str().unwrap(),
        "--codec",
        ckpts.join("codec.bin").to_str().unwrap(),
        "--out",
        ckpts.join("transcribe.ckpt").to_str().unwrap(),
    ]);

    // evaluate over an empty outputs dir: data error (3), no partial writes
    let empty = dir.join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = bin()
        .arg("--config")
        .arg(&cfg)
        .args([
            "evaluate",
            "--dataset",
            data.to_str().unwrap(),
            "--outputs",
            empty.to_str().unwrap(),
            "--codec",
            ckpts.join("codec.bin").to_str().unwrap(),
        ])
        .current_dir(dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!empty.join("report.jsonl").exists());

    // wrong checkpoint kind for synthesize: checkpoint error (4)
    let out = bin()
        .arg("--config")
        .arg(&cfg)
        .args([
            "synthesize",
            "--model",
            ckpts.join("transcribe.ckpt").to_str().unwrap(),
            "--codec",
            ckpts.join("codec.bin").to_str().unwrap(),
            "--midi",
            data.join("0.mid").to_str().unwrap(),
            "--out",
            dir.join("x.wav").to_str().unwrap(),
            "--timbre-audio",
            data.join("0_ref_dry.wav").to_str().unwrap(),
        ])
        .current_dir(dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    // missing timbre source: usage error (2)
    let out = bin()
        .arg("--config")
        .arg(&cfg)
        .args([
            "synthesize",
            "--model",
            ckpts.join("transcribe.ckpt").to_str().unwrap(),
            "--midi",
            data.join("0.mid").to_str().unwrap(),
            "--out",
            dir.join("x.wav").to_str().unwrap(),
        ])
        .current_dir(dir)
        .output()
        .unwrap();
    assert_ne!(out.status.code(), Some(0));

    // unknown config file: usage error (2)
    let out = bin()
        .args(["--config", "/nonexistent/config.toml", "build-dataset"])
        .current_dir(dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_dir_snapshots_config_and_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_micro_config(dir);
    let run_dir = dir.join("run");
    let out = bin()
        .arg("--config")
        .arg(&cfg)
        .arg("--run-dir")
        .arg(&run_dir)
        .args(["build-dataset", "--out", dir.join("data").to_str().unwrap(), "--seed", "99"])
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let snapshot = std::fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(snapshot.contains("hop = 3200"));
    let seeds = std::fs::read_to_string(run_dir.join("seeds.txt")).unwrap();
    assert!(seeds.contains("build=99"), "flag must override the snapshot seed: {seeds}");
}
