use std::path::Path;
use std::process::{Command, Output};

use tfnet_core::boxes::Detection;
use tfnet_core::data::DatasetIndex;
use tfnet_core::dct::read_dctt;
use tfnet_core::head::save_detections;
use tfnet_core::imaging::RgbImage;
use tfnet_core::metrics::parse_report;

fn tfnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfnet"))
        .args(args)
        .env("TFNET_LOG", "quiet")
        .output()
        .expect("binary runs")
}

fn synth(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec!["synth-data", "--seed", "1", "--out", out];
    args.extend_from_slice(extra);
    let o = tfnet(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in std::fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = tfnet(&["eval", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = tfnet(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_log_level_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_tfnet"))
        .args(["synth-data", "--out", "/nonexistent"])
        .env("TFNET_LOG", "loud")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("ERROR 2:"));
}

#[test]
fn gray_image_exports_only_dc_channels() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("gray.png");
    RgbImage::filled(32, 24, [100, 100, 100]).save(&img).unwrap();
    let out = dir.path().join("gray.dctt");
    let o = tfnet(&[
        "dct-export",
        "--image",
        img.to_str().unwrap(),
        "--lambda",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = read_dctt(&mut std::fs::File::open(&out).unwrap()).unwrap();
    assert_eq!(t.shape(), &[192, 3, 4]);
    let plane = 12;
    for c in 0..192 {
        let vals = &t.data()[c * plane..(c + 1) * plane];
        if c % 64 == 0 {
            assert!(vals.iter().all(|v| v.abs() > 1.0), "DC channel {c} is zero");
        } else {
            assert!(vals.iter().all(|v| v.abs() < 1e-9), "AC channel {c} is nonzero");
        }
    }
}

#[test]
fn synthetic_data_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), &[]);
    synth(b.path(), &[]);
    let ta = read_tree(a.path());
    assert!(ta.len() > 20);
    assert_eq!(ta, read_tree(b.path()));
}

#[test]
fn synth_spec_file_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, "classes = 3\nclips_per_class = 1\n").unwrap();
    let data = dir.path().join("d");
    let o = tfnet(&["synth-data", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(DatasetIndex::load(&data, "train").unwrap().videos.len(), 3);
    let o = tfnet(&["synth-data", "--set", "colour=1", "--out", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("ERROR 3:"));
}

#[test]
fn perfect_detections_score_one_and_report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, &["--set", "clips_per_class=3"]);
    let index = DatasetIndex::load(&data, "train").unwrap();
    let dets: Vec<Detection> = index
        .videos
        .iter()
        .flat_map(|v| {
            v.labels.iter().flat_map(move |(n, boxes)| {
                boxes.iter().map(move |b| Detection {
                    frame_id: format!("{}/{n:05}", v.id),
                    class_id: b.class_id,
                    score: 0.9,
                    bbox: b.bbox,
                })
            })
        })
        .collect();
    let dump = dir.path().join("dets.txt");
    save_detections(&dump, &dets).unwrap();
    let report = dir.path().join("report.txt");
    let o = tfnet(&[
        "eval",
        "--dets",
        dump.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(String::from_utf8_lossy(&o.stdout), text);
    assert!(text.contains("mAP 1.000"), "{text}");
    let parsed = parse_report(&text, &report).unwrap();
    assert_eq!(parsed.map, 1.0);
    assert_eq!(tfnet_core::metrics::format_report(&parsed), text);
}

#[test]
fn train_eval_saliency_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, &["--set", "clips_per_class=2"]);
    let run = |name: &str| {
        let ckpt = dir.path().join(name);
        let o = tfnet(&[
            "--threads",
            "1",
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--seed",
            "7",
            "--set",
            "train.max_iterations=4",
            "--set",
            "train.batch_size=2",
            "--set",
            "train.checkpoint_every=2",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        ckpt
    };
    let a = run("a.tfck");
    let b = run("b.tfck");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let log = std::fs::read_to_string(a.with_extension("log")).unwrap();
    assert_eq!(log, std::fs::read_to_string(b.with_extension("log")).unwrap());
    assert_eq!(log.lines().count(), 4);
    for (i, line) in log.lines().enumerate() {
        let f: Vec<&str> = line.split(' ').collect();
        assert_eq!(f.len(), 3);
        assert_eq!(f[0].parse::<usize>().unwrap(), i + 1);
        assert!(f[1].parse::<f64>().unwrap().is_finite());
        assert_eq!(f[2].parse::<f64>().unwrap(), 1e-4);
    }
    assert!(dir.path().join("a.iter000002.tfck").is_file());
    assert!(dir.path().join("a.iter000004.tfck").is_file());

    let report = dir.path().join("r.txt");
    let o = tfnet(&[
        "eval",
        "--ckpt",
        a.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    parse_report(&std::fs::read_to_string(&report).unwrap(), &report).unwrap();

    let clip = data.join("train/drift_down/drift_down_000");
    let sal = dir.path().join("sal");
    let o = tfnet(&[
        "saliency",
        "--ckpt",
        a.to_str().unwrap(),
        "--clip",
        clip.to_str().unwrap(),
        "--out",
        sal.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // 4 frames plus 3 × 16 DCT channels of the micro preset.
    assert_eq!(std::fs::read_dir(&sal).unwrap().count(), 4 + 48);
    assert!(sal.join("frame_00.png").is_file());
    assert!(sal.join("dct_047.png").is_file());
}

#[test]
fn missing_data_and_divergence_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = tfnet(&["train", "--data", dir.path().join("none").to_str().unwrap(), "--out", "x.tfck"]);
    assert_eq!(o.status.code(), Some(3));

    let data = dir.path().join("data");
    synth(&data, &["--set", "clips_per_class=1"]);
    let o = tfnet(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("m.tfck").to_str().unwrap(),
        "--set",
        "train.initial_lr=1e300",
        "--set",
        "train.max_iterations=20",
        "--set",
        "train.batch_size=2",
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("ERROR 4:"), "{err}");
    assert!(err.contains("batch"), "{err}");
}
