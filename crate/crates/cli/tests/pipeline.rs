//! End-to-end run of the binary: synth, pseudolabel, train, infer, eval,
//! plus the finetune-from-checkpoint path and basic flag validation.

use std::fs;
use std::process::{Command, Output};

fn vsod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vsod"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = "\
precision = f64
seed = 11
input.h = 32
input.w = 32
clip.frames = 2
encoder.dim = 8
encoder.depth = 1
encoder.heads = 2
fusion.token_hidden = 4
fusion.layers = 1
fusion.heads = 2
decoder.width = 8
train.steps = 3
train.clips_per_step = 1
train.checkpoint_every = 2
synth.clips = 2
synth.frames = 2
synth.h = 32
synth.w = 32
";

#[test]
fn full_pipeline_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, TINY).unwrap();
    let cfgs = cfg.to_str().unwrap();
    let data = tmp.path().join("data");
    let labels = tmp.path().join("labels");
    let run = tmp.path().join("run");
    let preds = tmp.path().join("preds");

    let text = ok(&vsod(&[
        "synth",
        "--config",
        cfgs,
        "--out",
        data.to_str().unwrap(),
    ]));
    assert!(text.contains("wrote 2 clips"), "{text}");
    assert!(data.join("clip_000/frames/f000.ppm").exists());
    assert!(data.join("clip_000/points.jsonl").exists());

    let text = ok(&vsod(&[
        "pseudolabel",
        "--config",
        cfgs,
        "--data",
        data.to_str().unwrap(),
        "--out",
        labels.to_str().unwrap(),
    ]));
    assert!(text.contains("wrote 4 labels"), "{text}");
    assert!(labels.join("clip_001/f001.pgm").exists());

    let text = ok(&vsod(&[
        "train",
        "--config",
        cfgs,
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]));
    assert!(run.join("train.log").exists());
    assert!(run.join("ckpt_000002.manifest").exists());
    assert!(run.join("ckpt_final.manifest").exists());
    // Loss lines stream to stdout as six bare columns starting at step 0.
    let first = text.lines().next().unwrap();
    assert!(first.starts_with("0 "), "{first}");
    assert_eq!(first.split(' ').count(), 6);

    let ckpt = run.join("ckpt_final");
    let text = ok(&vsod(&[
        "infer",
        "--config",
        cfgs,
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        preds.to_str().unwrap(),
    ]));
    assert!(text.contains("wrote 4 maps"), "{text}");
    assert!(preds.join("clip_000/f000.pgm").exists());

    let text = ok(&vsod(&[
        "eval",
        "--config",
        cfgs,
        "--pred",
        preds.to_str().unwrap(),
        "--gt",
        data.to_str().unwrap(),
    ]));
    assert!(text.contains("clip,frames,mae,f_beta,s_measure"), "{text}");
    assert!(text.contains("overall,4,"), "{text}");

    // A deleted prediction is listed as unmatched and excluded.
    fs::remove_file(preds.join("clip_000/f000.pgm")).unwrap();
    let text = ok(&vsod(&[
        "eval",
        "--config",
        cfgs,
        "--pred",
        preds.to_str().unwrap(),
        "--gt",
        data.to_str().unwrap(),
    ]));
    assert!(text.contains("1 unmatched frames excluded:"), "{text}");
    assert!(text.contains("clip_000/f000"), "{text}");
    assert!(text.contains("overall,3,"), "{text}");
}

#[test]
fn train_resumes_from_single_frame_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let phase1 = tmp.path().join("phase1");
    let phase2 = tmp.path().join("phase2");

    let cfg1 = tmp.path().join("p1.cfg");
    fs::write(&cfg1, format!("{TINY}train.single_frame = true\n")).unwrap();
    let cfg2 = tmp.path().join("p2.cfg");
    fs::write(&cfg2, TINY).unwrap();

    ok(&vsod(&[
        "synth",
        "--config",
        cfg1.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]));
    ok(&vsod(&[
        "train",
        "--config",
        cfg1.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        phase1.to_str().unwrap(),
    ]));
    let init = phase1.join("ckpt_final");
    let text = ok(&vsod(&[
        "train",
        "--config",
        cfg2.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--init",
        init.to_str().unwrap(),
        "--out",
        phase2.to_str().unwrap(),
    ]));
    assert!(text.contains("initialized from"), "{text}");
    assert!(phase2.join("ckpt_final.manifest").exists());
}

#[test]
fn missing_out_flag_fails_cleanly() {
    let out = vsod(&["synth"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--out"), "{err}");
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, TINY).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&vsod(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "99",
        "--out",
        a.to_str().unwrap(),
    ]));
    ok(&vsod(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
    ]));
    let fa = fs::read(a.join("clip_000/frames/f000.ppm")).unwrap();
    let fb = fs::read(b.join("clip_000/frames/f000.ppm")).unwrap();
    assert_ne!(fa, fb, "different seeds must change the synthesized data");
}
