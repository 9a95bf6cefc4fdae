use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advla::encoder::EncoderConfig;
use advla::harness::{render_scene, SceneConfig, METRICS_HEADER};
use advla::io::{ImageFile, PerturbationRecord};
use tempfile::TempDir;

fn advla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advla")).args(args).output().unwrap()
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        image_h: 16,
        image_w: 16,
        patch_size: 4,
        embed_dim: 16,
        num_blocks: 1,
        num_heads: 2,
        proj_dim: 8,
        ..Default::default()
    }
}

const SMALL_ENCODER: &str = r#""encoder": {"image_h": 16, "image_w": 16, "patch_size": 4, "embed_dim": 16,
    "num_blocks": 1, "num_heads": 2, "proj_dim": 8}"#;

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn write_scene(dir: &Path, enc: &EncoderConfig) -> PathBuf {
    let scene = SceneConfig {
        agent_radius: 3.0,
        ..Default::default()
    }
    .sample(4, 0.3);
    let path = dir.join("scene.ppm");
    let image = render_scene(&scene, enc).unwrap();
    ImageFile::from_tensor(&image).unwrap().write_ppm(File::create(&path).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_record(dir: &Path) -> PerturbationRecord {
    PerturbationRecord::read(File::open(dir.join("perturbation.bin")).unwrap()).unwrap()
}

#[test]
fn attack_writes_three_files_reproducibly() {
    let tmp = TempDir::new().unwrap();
    let image = write_scene(tmp.path(), &EncoderConfig::default());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = advla(&["attack", "--image", s(&image), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut names: Vec<String> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["adversarial.ppm", "perturbation.bin", "trace.csv"]);
    for name in &names {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let trace = fs::read_to_string(a.join("trace.csv")).unwrap();
    assert!(!trace.contains('\r'));
    // default T = 6: header plus one row per iteration and the initial state
    assert!(trace.lines().count() >= 7, "{trace}");
}

#[test]
fn zero_iterations_stay_inside_the_budget() {
    let tmp = TempDir::new().unwrap();
    let enc = small_encoder();
    let image = write_scene(tmp.path(), &enc);
    let cfg = write_config(
        tmp.path(),
        "c.json",
        &format!(r#"{{{SMALL_ENCODER}, "attack": {{"iterations": 0, "epsilon": "8/255"}}}}"#),
    );
    let out = tmp.path().join("out");
    let o = advla(&["attack", "--config", s(&cfg), "--image", s(&image), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec = read_record(&out);
    assert!(rec.perturbation.max_abs() <= 8.0 / 255.0 + 1e-12);
    assert!(rec.perturbation.max_abs() > 0.0);
}

#[test]
fn tkm_perturbation_stays_inside_the_mask() {
    let tmp = TempDir::new().unwrap();
    let enc = small_encoder();
    let image = write_scene(tmp.path(), &enc);
    let cfg = write_config(
        tmp.path(),
        "c.json",
        &format!(r#"{{{SMALL_ENCODER}, "attack": {{"strategy": "TKM", "topk_ratio": 0.2, "iterations": 3}}}}"#),
    );
    let out = tmp.path().join("out");
    let o = advla(&["attack", "--config", s(&cfg), "--image", s(&image), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec = read_record(&out);
    let hw = rec.height * rec.width;
    let mut inside = 0;
    for (i, &d) in rec.perturbation.data().iter().enumerate() {
        let selected = rec.pixel_mask.data()[i % hw] > 0.0;
        assert!(d == 0.0 || selected, "pixel {i} moved outside the mask");
        inside += (d != 0.0) as usize;
    }
    assert!(inside > 0);

    let o = advla(&["visualize", "--result", s(&out), "--amp", "4"]);
    assert!(o.status.success());
    for name in ["perturbation_amp.ppm", "attention_overlay.ppm", "mask_overlay.ppm", "attention.pgm", "mask.pbm"] {
        assert!(out.join(name).is_file(), "{name}");
    }
}

#[test]
fn visualize_zero_perturbation_is_mid_gray() {
    let tmp = TempDir::new().unwrap();
    let enc = small_encoder();
    let image = write_scene(tmp.path(), &enc);
    let cfg = write_config(
        tmp.path(),
        "c.json",
        &format!(r#"{{{SMALL_ENCODER}, "attack": {{"epsilon": 0, "alpha": 0}}}}"#),
    );
    let out = tmp.path().join("out");
    assert!(advla(&["attack", "--config", s(&cfg), "--image", s(&image), "--out", s(&out)]).status.success());
    assert!(advla(&["visualize", "--result", s(&out)]).status.success());
    let amp = ImageFile::read_ppm(File::open(out.join("perturbation_amp.ppm")).unwrap()).unwrap();
    assert!(amp.samples.iter().all(|&v| v == 128));
    // The exported adversarial image is the clean frame.
    assert_eq!(fs::read(out.join("adversarial.ppm")).unwrap(), fs::read(&image).unwrap());
}

#[test]
fn eval_csv_is_identical_for_any_thread_setting() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        &format!(
            r#"{{{SMALL_ENCODER}, "attack": {{"iterations": 2}},
            "harness": {{"trials": 2, "max_steps": 4, "train_scenes": 200, "conditions": ["CLEAN", "RANDOM", "TKL"],
            "scene": {{"agent_radius": 3}}}}}}"#
        ),
    );
    let mut outputs = Vec::new();
    for extra in [vec![], vec!["--threads", "1"], vec!["--sequential"]] {
        let out = tmp.path().join(format!("out{}", outputs.len()));
        let mut args = vec!["eval", "--config", s(&cfg), "--out", s(&out)];
        args.extend(extra);
        let o = advla(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert_eq!(String::from_utf8(o.stdout).unwrap(), csv);
        outputs.push(csv);
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
    let csv = &outputs[0];
    assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
    // CLEAN, RANDOM and TKL at 3 budgets
    assert_eq!(csv.lines().count(), 1 + 1 + 3 + 3);
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 11);
        assert_eq!(cols[9], "0", "timing column is zeroed by default");
        let (sr, fr): (f64, f64) = (cols[6].parse().unwrap(), cols[7].parse().unwrap());
        assert_eq!(sr + fr, 1.0);
    }
}

#[test]
fn gradcheck_and_bench() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &format!("{{{SMALL_ENCODER}}}"));
    let o = advla(&["gradcheck", "--config", s(&cfg), "--pixels", "20", "--out", s(tmp.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(fs::read_to_string(tmp.path().join("gradcheck.csv")).unwrap().lines().count(), 21);

    let o = advla(&["bench", "--config", s(&cfg), "--repeats", "10"]);
    assert!(o.status.success());
    let csv = String::from_utf8(o.stdout).unwrap();
    assert_eq!(csv.lines().next(), Some("repeat,iterations,total_seconds,mean_iter_seconds"));
    assert_eq!(csv.lines().count(), 11);
    assert!(String::from_utf8(o.stderr).unwrap().contains("0.06"));
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let image = write_scene(tmp.path(), &small_encoder());
    let out = tmp.path().join("out");

    assert_eq!(advla(&["--help"]).status.code(), Some(0));
    assert_eq!(advla(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(advla(&["bench", "--repeats", "3"]).status.code(), Some(1));

    let typo = write_config(tmp.path(), "typo.json", r#"{"attack": {"iteratons": 3}}"#);
    let o = advla(&["attack", "--config", s(&typo), "--image", s(&image), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8(o.stderr).unwrap().contains("iteratons"));

    let bad = write_config(tmp.path(), "bad.json", r#"{"attack": {"alpha": "9/255", "epsilon": "4/255"}}"#);
    assert_eq!(advla(&["gradcheck", "--config", s(&bad)]).status.code(), Some(1));

    // 16x16 image against the default 64x64 encoder
    let o = advla(&["attack", "--image", s(&image), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));

    let garbage = tmp.path().join("garbage.ppm");
    fs::write(&garbage, b"P3\n1 1\n255\n0 0 0\n").unwrap();
    assert_eq!(advla(&["attack", "--image", s(&garbage), "--out", s(&out)]).status.code(), Some(1));

    let missing = tmp.path().join("missing.ppm");
    assert_eq!(advla(&["attack", "--image", s(&missing), "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(advla(&["visualize", "--result", s(&missing)]).status.code(), Some(2));
}
