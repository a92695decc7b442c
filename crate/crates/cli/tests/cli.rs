use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vismem::checkpoint::load_checkpoint;
use vismem::dataio::{load_sequence, read_manifest, read_pgm};
use vismem::model::{threshold_mask, ForwardOptions, ModelParams};
use vismem::tensor::upsample_nearest;

const SMALL: &str = "\
# tiny model and data so every subcommand runs in seconds
d_app = 4
d_mid = 4
d_h = 4
height = 32
width = 32
frames = 20
max_objects = 1
min_size = 5
max_size = 7
crop = 32
batch_frames = 6
log_every = 2
pretrain_lr = 0.003
learning_rate = 0.001
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vismem"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "multi-line error: {err}");
    assert!(err.starts_with("error"), "{err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.cfg");
    fs::write(&p, SMALL).unwrap();
    p
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_deterministic_and_loadable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-data", "--config", s(&cfg), "--out", s(d), "--count", "3", "--seed", "9"]);
    }
    assert_eq!(tree(&a), tree(&b));
    let dirs = read_manifest(&a).unwrap();
    assert_eq!(dirs.len(), 3);
    for d in dirs {
        let v = load_sequence(&d).unwrap();
        assert_eq!((v.len(), v.dims().unwrap()), (20, (32, 32)));
    }
}

#[test]
fn gen_data_zero_count() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("empty");
    ok(&["gen-data", "--out", s(&out), "--count", "0"]);
    assert_eq!(fs::read_to_string(out.join("manifest.txt")).unwrap(), "");
}

#[test]
fn failures_are_single_line() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    let err = fails(&["pretrain", "--data", s(&missing), "--out", s(&tmp.path().join("x.ckpt"))]);
    assert!(err.contains("manifest.txt"), "{err}");

    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "d_h = 4\nwibble = 3\n").unwrap();
    let err = fails(&["gen-data", "--config", s(&bad), "--out", s(tmp.path()), "--count", "1"]);
    assert!(err.contains("wibble") && err.contains("line 2"), "{err}");

    let junk = tmp.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint at all").unwrap();
    fails(&["infer", "--ckpt", s(&junk), "--seq", s(tmp.path()), "--out", s(tmp.path())]);

    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"").unwrap();
    fails(&["gen-data", "--out", s(&blocker.join("sub")), "--count", "1"]);
}

#[test]
fn ablation_audit() {
    let out = ok(&["ablate", "--variant", "no-memory", "--audit-only"]);
    let line = out.lines().find(|l| l.starts_with("audit")).unwrap();
    let field = |k: &str| -> f64 {
        line.split_whitespace()
            .find_map(|kv| kv.strip_prefix(&format!("{k}=")))
            .unwrap()
            .parse()
            .unwrap()
    };
    let (mem, gru) = (field("memory_params"), field("gru_params"));
    assert!((mem - gru).abs() / gru <= 0.05, "{line}");
    assert!(field("rel_diff") <= 0.05);

    let help = ok(&["ablate", "--help"]);
    assert!(help.contains("5%"), "{help}");
    fails(&["ablate", "--variant", "bogus", "--audit-only"]);
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let cfg = small_config(p);
    let c = s(&cfg);
    let data = p.join("data");
    ok(&["gen-data", "--config", c, "--out", s(&data), "--count", "2", "--seed", "1"]);

    let pre = p.join("pre.ckpt");
    let log = ok(&["pretrain", "--config", c, "--data", s(&data), "--out", s(&pre), "--iterations", "4"]);
    assert!(log.lines().any(|l| l.starts_with("iter=3 loss=")), "{log}");

    let model = p.join("model.ckpt");
    let log = ok(&["train", "--config", c, "--data", s(&data), "--init", s(&pre), "--out", s(&model), "--iterations", "4"]);
    assert!(log.contains("tensors_loaded="), "{log}");
    assert!(log.lines().any(|l| l.starts_with("iter=1 loss=") && l.contains(" lr=")), "{log}");

    // Default window covers all 20 frames: identical to one forward pass.
    let seq = read_manifest(&data).unwrap()[0].clone();
    let pred = p.join("pred");
    ok(&["infer", "--ckpt", s(&model), "--seq", s(&seq), "--out", s(&pred), "--record-gates"]);
    let params: ModelParams = load_checkpoint(&model).unwrap();
    let sample = load_sequence(&seq).unwrap();
    let pass = params.forward_video(&sample, ForwardOptions::default()).unwrap();
    for (t, prob) in pass.object_probs().iter().enumerate() {
        let expect = upsample_nearest(&threshold_mask(prob), params.config.stride).unwrap();
        let got = read_pgm(&pred.join(format!("mask_{t:05}.pgm"))).unwrap();
        assert_eq!(got, expect, "frame {t}");
    }
    assert!(pred.join("overlay_t0.ppm").is_file());

    let gates = p.join("gates");
    let log = ok(&["vis-gates", "--records", s(&pred), "--channels", "0,3", "--out", s(&gates)]);
    assert!(log.contains("heatmaps=80"), "{log}");
    assert!(gates.join("gate_inv_z_c3_t19.pgm").is_file());
    fails(&["vis-gates", "--records", s(&pred), "--channels", "4", "--out", s(&gates)]);

    // Ground truth scored against itself.
    let report = p.join("report.txt");
    ok(&["eval", "--pred", s(&seq), "--gt", s(&seq), "--report", s(&report)]);
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("j_mean=1.000000"), "{text}");

    // Whole dataset at once, then scored.
    let all = p.join("all");
    ok(&["infer", "--ckpt", s(&model), "--seq", s(&data), "--out", s(&all), "--no-overlay"]);
    ok(&["eval", "--pred", s(&all), "--gt", s(&data), "--report", s(&report)]);
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains(" j_mean=")).count(), 2, "{text}");

    let abl = p.join("unidir.ckpt");
    let log = ok(&[
        "ablate", "--config", c, "--variant", "unidir", "--data", s(&data), "--init", s(&pre), "--out", s(&abl),
        "--val", s(&data), "--iterations", "2",
    ]);
    assert!(log.contains("variant=unidir val_sequences=2 j_mean="), "{log}");
    let ablated: ModelParams = load_checkpoint(&abl).unwrap();
    assert!(!ablated.config.bidirectional);
}

#[test]
fn training_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let cfg = small_config(p);
    let c = s(&cfg);
    let data = p.join("data");
    ok(&["gen-data", "--config", c, "--out", s(&data), "--count", "2"]);
    let (a, b) = (p.join("a.ckpt"), p.join("b.ckpt"));
    for out in [&a, &b] {
        ok(&["pretrain", "--config", c, "--data", s(&data), "--out", s(out), "--iterations", "3", "--seed", "5"]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}
