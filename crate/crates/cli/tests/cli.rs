use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glyph-align"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sha(p: &Path) -> String {
    format!("{:x}", Sha256::digest(std::fs::read(p).unwrap()))
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn corpus(dir: &Path, cases: &str, seed: &str) -> std::path::PathBuf {
    let out = dir.join(format!("corpus_{seed}"));
    ok(&["synth", "--cases", cases, "--seed", seed, "--out-dir", s(&out)]);
    out
}

#[test]
fn synth_twice_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["synth", "--cases", "6", "--seed", "7", "--out-dir", s(out)]);
    }
    for rel in ["manifest.json", "run.json", "cases/case_0005.png", "cases/case_0005.gt.json"] {
        assert_eq!(sha(&a.join(rel)), sha(&b.join(rel)), "{rel}");
    }
    let m = json(&a.join("manifest.json"));
    assert_eq!(m["cases"].as_array().unwrap().len(), 6);
}

#[test]
fn eval_gt_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), "4", "3");
    let out = dir.path().join("eval");
    let o = ok(&["eval", "--pred", s(&c.join("cases")), "--gt", s(&c.join("cases")), "--out-dir", s(&out)]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("ALL"));
    let m = json(&out.join("metrics.json"));
    for row in m["overall"].as_array().unwrap() {
        assert_eq!(row["f1"].as_f64(), Some(1.0));
    }
    assert!(out.join("run.json").exists());
}

#[test]
fn single_align_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), "2", "5");
    let args = |out: &Path| {
        vec![
            "align".to_string(),
            "--proto-img".into(),
            s(&c.join("protos/proto_01.png")).into(),
            "--proto-skel".into(),
            s(&c.join("protos/proto_01.json")).into(),
            "--target".into(),
            s(&c.join("cases/case_0001.png")).into(),
            "--seed".into(),
            "3".into(),
            "--svg".into(),
            "--png".into(),
            "--out-dir".into(),
            s(out).into(),
        ]
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let v = args(out);
        ok(&v.iter().map(String::as_str).collect::<Vec<_>>());
    }
    for f in ["alignment.json", "prediction.json", "skeleton.json", "aligned.svg", "aligned.png", "run.json"] {
        assert_eq!(sha(&a.join(f)), sha(&b.join(f)), "{f}");
    }
    let rec = json(&a.join("run.json"));
    assert_eq!(rec["config"]["pipeline"]["seed"].as_u64(), Some(3));
    assert_eq!(rec["inputs"].as_array().unwrap().len(), 3);
    assert_eq!(json(&a.join("alignment.json"))["refined"], Value::Bool(true));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), "1", "2");
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "no_refine = true\nseed = 11\nruns = 2\n").unwrap();
    let out = dir.path().join("out");
    ok(&[
        "align",
        "--proto-img",
        s(&c.join("protos/proto_00.png")),
        "--proto-skel",
        s(&c.join("protos/proto_00.json")),
        "--target",
        s(&c.join("cases/case_0000.png")),
        "--config",
        s(&cfg),
        "--seed",
        "4",
        "--out-dir",
        s(&out),
    ]);
    let rec = json(&out.join("run.json"));
    assert_eq!(rec["config"]["pipeline"]["seed"].as_u64(), Some(4));
    assert_eq!(rec["config"]["pipeline"]["ransac"]["runs"].as_u64(), Some(2));
    assert_eq!(rec["config"]["pipeline"]["no_refine"], Value::Bool(true));
    assert_eq!(json(&out.join("alignment.json"))["refined"], Value::Bool(false));

    std::fs::write(&cfg, "unknown_key = 1\n").unwrap();
    let o = run(&["align", "--manifest", s(&c.join("manifest.json")), "--config", s(&cfg), "--out-dir", s(&out)]);
    assert!(!o.status.success());
}

#[test]
#[ignore = "known failure: refinement drifts off accurate global fits (see README, Known failures)"]
fn refinement_does_not_lower_mean_f1_on_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), "12", "9");
    let manifest = c.join("manifest.json");
    let mut mean20 = Vec::new();
    for (name, extra) in [("full", None), ("global", Some("--no-refine"))] {
        let out = dir.path().join(name);
        let mut args = vec!["align", "--manifest", s(&manifest), "--out-dir", s(&out)];
        args.extend(extra);
        ok(&args);
        let ev = dir.path().join(format!("{name}_eval"));
        ok(&["eval", "--pred", s(&out.join("predictions")), "--gt", s(&c.join("cases")), "--out-dir", s(&ev)]);
        mean20.push(json(&ev.join("metrics.json"))["mean_image_f1"][0].as_f64().unwrap());
    }
    assert!(mean20[0] >= mean20[1], "full {} < global {}", mean20[0], mean20[1]);
}

#[test]
fn missing_input_exits_nonzero_with_stage() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), "1", "1");
    let o = run(&[
        "align",
        "--proto-img",
        s(&c.join("protos/proto_00.png")),
        "--proto-skel",
        s(&dir.path().join("missing.json")),
        "--target",
        s(&c.join("cases/case_0000.png")),
        "--out-dir",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[load]"));
}

#[test]
fn tablet_reports_failed_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), "1", "4");
    let protos = dir.path().join("protos");
    std::fs::create_dir_all(&protos).unwrap();
    let m = json(&c.join("manifest.json"));
    let sign = m["cases"][0]["sign"].as_str().unwrap().to_string();
    std::fs::copy(c.join("protos/proto_00.png"), protos.join(format!("{sign}.png"))).unwrap();
    std::fs::copy(c.join("protos/proto_00.json"), protos.join(format!("{sign}.json"))).unwrap();
    std::fs::copy(c.join("cases/case_0000.png"), dir.path().join("tablet.png")).unwrap();
    let spec = serde_json::json!({
        "image_path": "tablet.png",
        "prototype_dir": "protos",
        "boxes": [
            {"x": 0, "y": 0, "w": 512, "h": 512, "sign_name": sign},
            {"x": 100, "y": 100, "w": 512, "h": 512, "sign_name": sign},
        ],
    });
    let spec_path = dir.path().join("tablet.json");
    std::fs::write(&spec_path, spec.to_string()).unwrap();
    let out = dir.path().join("out");
    let o = run(&["tablet", "--spec", s(&spec_path), "--png", "--no-refine", "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let boxes = json(&out.join("boxes.json"));
    assert_eq!(boxes[0]["ok"], Value::Bool(true));
    assert_eq!(boxes[1]["ok"], Value::Bool(false));
    assert_eq!(boxes[1]["stage"].as_str(), Some("tablet"));
    let svg = std::fs::read_to_string(out.join("hand_copy.svg")).unwrap();
    assert_eq!(svg.matches("<g id=\"box-").count(), 1);
    assert!(out.join("hand_copy.png").exists());
    assert!(out.join("run.json").exists());
}

#[test]
fn features_and_file_backend_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), "1", "6");
    let f = dir.path().join("f");
    ok(&["features", "--image", s(&c.join("protos/proto_00.png")), "--out-dir", s(&f)]);
    ok(&["features", "--image", s(&c.join("cases/case_0000.png")), "--out-dir", s(&f)]);
    let bytes = std::fs::read(f.join("proto_00.fmap")).unwrap();
    assert_eq!(&bytes[..8], b"FMAP0001");

    let common = |out: &Path, backend: &[&str]| {
        let mut v: Vec<String> = [
            "align",
            "--proto-img",
            s(&c.join("protos/proto_00.png")),
            "--proto-skel",
            s(&c.join("protos/proto_00.json")),
            "--target",
            s(&c.join("cases/case_0000.png")),
            "--out-dir",
            s(out),
        ]
        .iter()
        .map(|x| x.to_string())
        .collect();
        v.extend(backend.iter().map(|x| x.to_string()));
        v
    };
    let (fa, fb) = (dir.path().join("file"), dir.path().join("builtin"));
    let file_args = common(
        &fa,
        &[
            "--features",
            "file",
            "--proto-fmap",
            s(&f.join("proto_00.fmap")),
            "--target-fmap",
            s(&f.join("case_0000.fmap")),
        ],
    );
    ok(&file_args.iter().map(String::as_str).collect::<Vec<_>>());
    let builtin_args = common(&fb, &[]);
    ok(&builtin_args.iter().map(String::as_str).collect::<Vec<_>>());
    // The exported file holds exactly the built-in features.
    assert_eq!(sha(&fa.join("prediction.json")), sha(&fb.join("prediction.json")));

    let sal = dir.path().join("sal");
    ok(&[
        "extract-saliency",
        "--proto-img",
        s(&c.join("protos/proto_00.png")),
        "--target",
        s(&c.join("cases/case_0000.png")),
        "--out-dir",
        s(&sal),
    ]);
    let sj = json(&sal.join("saliency.json"));
    let vals = sj["values"].as_array().unwrap();
    assert_eq!(vals.len(), 64 * 64);
    assert!(vals.iter().all(|v| (0.0..=1.0).contains(&v.as_f64().unwrap())));
    assert!(sal.join("saliency.png").exists());
}
