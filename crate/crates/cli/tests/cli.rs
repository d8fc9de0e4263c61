use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use priorseg::contrastive::{ContrastiveConfig, Pretrainer};
use priorseg::image::RgbImage;
use priorseg::io::write_rgb_png;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_priorseg"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) {
    let out = run(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<(PathBuf, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .flat_map(|p| {
            if p.is_dir() {
                files(&p)
            } else {
                let bytes = fs::read(&p).unwrap();
                vec![(p.strip_prefix(dir).unwrap().to_path_buf(), bytes)]
            }
        })
        .collect();
    out.sort();
    out
}

const PRETRAIN: &str = r#"{"epochs": 2, "queue_capacity": 64, "patch_queue_capacity": 64}"#;
const EPISODES: &str = r#"{"folds": 2, "map_episodes": 3, "episode": {"train_episodes": 6, "eval_episodes": 12, "hidden": 8}}"#;

/// Dataset, prior checkpoint and trained model in `dir`.
fn pipeline(dir: &Path) {
    fs::write(dir.join("synth.json"), r#"{"count": 40, "classes": 4, "size": 64}"#).unwrap();
    fs::write(dir.join("pretrain.json"), PRETRAIN).unwrap();
    fs::write(dir.join("episodes.json"), EPISODES).unwrap();
    ok(&["synth", "--config", "synth.json", "--seed", "4", "--out", "data"], dir);
    ok(&["pretrain", "--config", "pretrain.json", "--data", "data", "--seed", "2", "--out", "pre"], dir);
    ok(&["train", "--config", "episodes.json", "--data", "data", "--prior", "pre/prior.qgn", "--seed", "3", "--out", "model"], dir);
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("s.json"), r#"{"count": 6, "classes": 2, "size": 32}"#).unwrap();
    ok(&["synth", "--config", "s.json", "--seed", "1", "--out", "a"], d);
    ok(&["synth", "--config", "s.json", "--seed", "1", "--out", "b"], d);
    assert_eq!(files(&d.join("a")), files(&d.join("b")));
    assert_eq!(fs::read_to_string(d.join("a/classes.txt")).unwrap().lines().count(), 6);
}

#[test]
fn patches_on_constant_and_textured_images() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::create_dir(d.join("in")).unwrap();
    write_rgb_png(&d.join("in/flat.png"), &RgbImage::filled(24, 24, [90, 120, 30])).unwrap();
    let textured = RgbImage::from_fn(32, 32, |x, y| if x < 16 { [250, 10, 10] } else { [10, 10, (y * 7) as u8] });
    write_rgb_png(&d.join("in/two.png"), &textured).unwrap();

    ok(&["patches", "--method", "felz", "--out", "f1", "in"], d);
    let (seg, header) = priorseg::patch::PatchSegmentation::load(&d.join("f1"), "flat").unwrap();
    assert_eq!(seg.patch_count(), 1);
    assert_eq!(header.patch_count, 1);
    ok(&["patches", "--method", "felz", "--out", "f2", "in"], d);
    assert_eq!(files(&d.join("f1")), files(&d.join("f2")));

    ok(&["patches", "--method", "slic", "--out", "s1", "in/two.png"], d);
    ok(&["patches", "--method", "slic", "--out", "s2", "in/two.png"], d);
    assert_eq!(files(&d.join("s1")), files(&d.join("s2")));
}

#[test]
fn corrupt_png_leaves_nothing_behind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::create_dir(d.join("in")).unwrap();
    write_rgb_png(&d.join("in/a.png"), &RgbImage::filled(16, 16, [1, 2, 3])).unwrap();
    fs::write(d.join("in/b.png"), b"\x89PNG\r\n\x1a\nnot really").unwrap();
    let out = run(&["patches", "--method", "felz", "--out", "out", "in"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("b.png"));
    assert!(!d.join("out").exists());
}

#[test]
fn config_errors_exit_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.json"), r#"{"aug": {"flip_prob": "often"}}"#).unwrap();
    let out = run(&["pretrain", "--config", "bad.json", "--data", "nowhere", "--out", "o"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("aug.flip_prob"));

    fs::write(d.join("neg.json"), r#"{"tau": 0}"#).unwrap();
    let out = run(&["pretrain", "--config", "neg.json", "--data", "nowhere", "--out", "o"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau"));

    let out = run(&["pretrain", "--data", "nowhere", "--out", "o"], d);
    assert_eq!(out.status.code(), Some(3));
    assert!(!d.join("o").exists());
}

#[test]
fn pretrain_zero_epochs_is_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("s.json"), r#"{"count": 4, "classes": 2, "size": 64}"#).unwrap();
    fs::write(d.join("p.json"), r#"{"epochs": 0}"#).unwrap();
    ok(&["synth", "--config", "s.json", "--out", "data"], d);
    ok(&["pretrain", "--config", "p.json", "--data", "data", "--seed", "9", "--out", "pre"], d);
    let config = ContrastiveConfig { epochs: 0, ..Default::default() };
    let init = Pretrainer::new(config, 9).unwrap().query_encoder().to_checkpoint_bytes();
    assert_eq!(fs::read(d.join("pre/prior.qgn")).unwrap(), init);
    assert_eq!(fs::read_to_string(d.join("pre/stats.csv")).unwrap().lines().count(), 1);
}

#[test]
fn resumed_pretraining_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("s.json"), r#"{"count": 12, "classes": 2, "size": 64}"#).unwrap();
    fs::write(d.join("p.json"), r#"{"epochs": 3, "queue_capacity": 32, "patch_queue_capacity": 32}"#).unwrap();
    ok(&["synth", "--config", "s.json", "--out", "data"], d);
    ok(&["pretrain", "--config", "p.json", "--data", "data", "--seed", "5", "--out", "full"], d);
    ok(&["pretrain", "--config", "p.json", "--data", "data", "--seed", "5", "--out", "part", "--stop-after", "1"], d);
    assert_eq!(fs::read_to_string(d.join("part/stats.csv")).unwrap().lines().count(), 2);
    ok(&["pretrain", "--config", "p.json", "--data", "data", "--seed", "5", "--out", "part", "--resume"], d);
    assert_eq!(files(&d.join("full")), files(&d.join("part")));
    assert_eq!(fs::read_to_string(d.join("full/stats.csv")).unwrap().lines().count(), 4);

    // A different seed cannot resume this state.
    let out = run(&["pretrain", "--config", "p.json", "--data", "data", "--seed", "6", "--out", "part", "--resume"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn maps_and_eval_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    let maps = |out: &str| {
        ok(&["maps", "--config", "episodes.json", "--data", "data", "--prior", "pre/prior.qgn", "--model", "model", "--seed", "8", "--out", out], d)
    };
    maps("m1");
    maps("m2");
    assert_eq!(files(&d.join("m1")), files(&d.join("m2")));
    assert!(d.join("m1/episode_0002_prior.png").exists());
    let map = priorseg::regionmap::RegionMap::from_tensor_bytes(&fs::read(d.join("m1/episode_0000_prior.qgn")).unwrap()).unwrap();
    assert!(map.values().iter().all(|v| (0.0..1.0).contains(v)));

    let eval = |out: &str| {
        ok(&["eval", "--config", "episodes.json", "--data", "data", "--prior", "pre/prior.qgn", "--model", "model", "--seed", "8", "--alpha-sweep", "--out", out], d)
    };
    eval("e1");
    eval("e2");
    assert_eq!(files(&d.join("e1")), files(&d.join("e2")));

    let recall = fs::read_to_string(d.join("e1/recall.csv")).unwrap();
    let alphas: Vec<String> = recall.lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect();
    assert_eq!(alphas, ["0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9"]);

    // mIoU recomputed from the per-episode pixel counts.
    let episodes = fs::read_to_string(d.join("e1/episodes.csv")).unwrap();
    let mut per_class: std::collections::BTreeMap<u64, [u64; 3]> = Default::default();
    for line in episodes.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let c = per_class.entry(f[3].parse().unwrap()).or_default();
        for k in 0..3 {
            c[k] += f[5 + k].parse::<u64>().unwrap();
        }
    }
    let ious: Vec<f64> = per_class
        .values()
        .map(|&[tp, fp, fn_]| if tp + fp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fp + fn_) as f64 })
        .collect();
    let recomputed = ious.iter().sum::<f64>() / ious.len() as f64;
    let metrics = fs::read_to_string(d.join("e1/metrics.csv")).unwrap();
    let reported: f64 = metrics.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert_eq!(reported, recomputed);
    assert!(fs::read_to_string(d.join("e1/summary.json")).unwrap().contains("\"miou\""));
}

#[test]
fn mismatched_checkpoints_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    let tiny = priorseg::nn::Encoder::<f32>::init(priorseg::nn::EncoderArch::tiny(4, 4), 1).unwrap();
    tiny.save(&d.join("tiny.qgn")).unwrap();
    let out = run(&["eval", "--config", "episodes.json", "--data", "data", "--prior", "tiny.qgn", "--model", "model", "--out", "x"], d);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(d.join("junk.qgn"), b"nope").unwrap();
    let out = run(&["maps", "--config", "episodes.json", "--data", "data", "--prior", "junk.qgn", "--model", "model", "--out", "y"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.join("x").exists() && !d.join("y").exists());
}
