use std::path::Path;
use std::process::{Command, Output};

fn tfmask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfmask"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Renders a short scene with the given seed into `dir` and returns the mixture path.
fn simulate(dir: &Path, seed: u64) -> std::path::PathBuf {
    let example = tfmask(&["simulate", "--example"]);
    assert!(example.status.success());
    let text = String::from_utf8(example.stdout)
        .unwrap()
        .replace("duration = 4.0", "duration = 1.5")
        .replace("seed = 1", &format!("seed = {seed}"));
    let scene = dir.join(format!("scene{seed}.toml"));
    std::fs::write(&scene, text).unwrap();
    let out = dir.join(format!("sim{seed}"));
    let run = tfmask(&["simulate", "--scene", p(&scene), "--out", p(&out)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    out.join("mixture.wav")
}

#[test]
fn config_init_round_trips_through_enhance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.toml");
    assert!(tfmask(&["config", "init", "--out", p(&cfg)]).status.success());
    assert!(std::fs::read_to_string(&cfg).unwrap().contains("[stft]"));
    // Refuses to overwrite without --force.
    assert_eq!(tfmask(&["config", "init", "--out", p(&cfg)]).status.code(), Some(1));

    let mix = simulate(dir.path(), 3);
    let out = dir.path().join("out");
    let run = tfmask(&["enhance", "--config", p(&cfg), "--out", p(&out), p(&mix)]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(out.join("mixture.enh.wav").exists());
}

#[test]
fn simulate_enhance_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let mix = simulate(dir.path(), 1);
    let sim = mix.parent().unwrap();
    for f in ["target.wav", "noise.wav", "scene.json"] {
        assert!(sim.join(f).exists(), "{f}");
    }
    let out = dir.path().join("out");
    let run = tfmask(&["enhance", "--dump-masks", "--dump-scores", "--out", p(&out), p(&mix)]);
    assert_eq!(run.status.code(), Some(0));
    let enh = out.join("mixture.enh.wav");
    let mask = out.join("mixture.mask");
    assert!(out.join("mixture.srp.csv").exists());

    let report = dir.path().join("metrics.json");
    let eval = tfmask(&[
        "evaluate",
        "--enhanced", p(&enh),
        "--reference", p(&sim.join("target.wav")),
        "--noisy", p(&mix),
        "--mask", p(&mask),
        "--out", p(&report),
    ]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert!(json["si_sdr_improvement"].as_f64().unwrap() > 3.0, "{json}");
    assert_eq!(json["band_stats"].as_array().unwrap().len(), 5);
}

#[test]
fn empty_manifest_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    std::fs::write(&manifest, "[]").unwrap();
    let out = dir.path().join("out");
    let run = tfmask(&["enhance", "--manifest", p(&manifest), "--out", p(&out)]);
    assert_eq!(run.status.code(), Some(0));
    assert!(out.join("report.json").exists());
}

#[test]
fn partial_failure_exits_2_and_strict_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let mix = simulate(dir.path(), 2);
    std::fs::copy(&mix, dir.path().join("good.wav")).unwrap();
    std::fs::write(dir.path().join("bad.wav"), b"not audio").unwrap();
    let manifest = dir.path().join("m.json");
    std::fs::write(
        &manifest,
        r#"[{"id": "bad", "input": "bad.wav"}, {"id": "good", "input": "good.wav"}]"#,
    )
    .unwrap();

    let out = dir.path().join("lenient");
    let run = tfmask(&["enhance", "--manifest", p(&manifest), "--out", p(&out)]);
    assert_eq!(run.status.code(), Some(2));
    assert!(out.join("good.enh.wav").exists());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["items"][0]["status"], "error");

    let strict = dir.path().join("strict");
    let run = tfmask(&["enhance", "--strict", "--manifest", p(&manifest), "--out", p(&strict)]);
    assert_eq!(run.status.code(), Some(1));
}

#[test]
fn missing_inputs_is_a_hard_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = tfmask(&["enhance", "--out", p(dir.path())]);
    assert_eq!(run.status.code(), Some(1));
}

#[test]
fn calibrate_offline_then_online_then_enhance() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), 4);
    let b = simulate(dir.path(), 5);
    let stage1 = dir.path().join("stage1.cal");
    let report = dir.path().join("cal.json");
    let run = tfmask(&[
        "calibrate", "offline",
        "--out", p(&stage1),
        "--report", p(&report),
        p(&a), p(&b),
    ]);
    // Both files are named mixture.wav; ids only matter for the report.
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(stage1.exists());
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);

    let stage2 = dir.path().join("stage2.cal");
    let run = tfmask(&["calibrate", "online", "--stage1", p(&stage1), "--out", p(&stage2), p(&a)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(stage2.exists());

    let out = dir.path().join("out");
    let run = tfmask(&["enhance", "--calib", p(&stage1), "--online", "--out", p(&out), p(&b)]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["items"][0]["diagnostics"]["online_calibrated"], true);
}
