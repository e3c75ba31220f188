use std::path::Path;
use std::process::{Command, Output};

fn gspose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gspose")).args(args).output().expect("spawn gspose")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = gspose(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    if stdout.trim().is_empty() {
        serde_json::Value::Null
    } else {
        serde_json::from_str(stdout.trim()).unwrap()
    }
}

fn fails(args: &[&str]) -> String {
    let out = gspose(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "diagnostic is not one line: {stderr}");
    stderr
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn flat(pose: &serde_json::Value) -> Vec<f64> {
    let mut v: Vec<f64> = pose["R"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap().clone()).map(|x| x.as_f64().unwrap()).collect();
    v.extend(pose["t"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()));
    v
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let scene = d.join("scene");
    let files = ok(&["synth", "--seed", "3", "--out", s(&scene)]);
    let f = |k: &str| files[k].as_str().unwrap().to_string();
    for k in ["object", "query", "mask", "embedding", "intrinsics", "gt_pose", "db", "refs"] {
        assert!(Path::new(&f(k)).exists(), "{k}");
    }

    // rebuild the database from the exported references
    let db = d.join("db");
    let built = ok(&["build-db", "--refs", &f("refs"), "--object", &f("object"), "--out", s(&db)]);
    assert_eq!(built["entries"], 64);

    let init = d.join("init.json");
    let info = ok(&[
        "init-pose", "--db", s(&db), "--mask", &f("mask"), "--embedding", &f("embedding"),
        "--intrinsics", &f("intrinsics"), "--out", s(&init),
    ]);
    assert!(info["reference"].as_u64().unwrap() < 64);
    assert!(read(&init)["t"][2].as_f64().unwrap() > 0.0);

    let refined = d.join("refined.json");
    let trace = d.join("trace.csv");
    let r = ok(&[
        "refine", "--db", s(&db), "--image", &f("query"), "--mask", &f("mask"), "--init", s(&init),
        "--intrinsics", &f("intrinsics"), "--max-steps", "25", "--lr", "5e-3", "--eta", "1e-4",
        "--out", s(&refined), "--trace", s(&trace),
    ]);
    assert!(r["steps"].as_u64().unwrap() <= 25);
    let csv = std::fs::read_to_string(&trace).unwrap();
    assert!(csv.starts_with("step,lr,loss,grad_norm,qw,qx,qy,qz,tx,ty,tz\n"));
    assert_eq!(csv.lines().count() as u64, r["steps"].as_u64().unwrap() + 1);

    let est = d.join("est.json");
    let e = ok(&[
        "estimate", "--db", &f("db"), "--image", &f("query"), "--mask", &f("mask"), "--embedding", &f("embedding"),
        "--intrinsics", &f("intrinsics"), "--out", s(&est), "--max-steps", "15", "--stop-on-absolute",
    ]);
    // the rebuilt database went through JSON poses, float32 sidecars and PLY
    let a = read(&init);
    for (x, y) in flat(&e["initial"]).iter().zip(flat(&a)) {
        assert!((x - y).abs() < 1e-5, "{x} vs {y}");
    }
    assert!(est.exists());

    // evaluation against the ground truth
    let gt = read(Path::new(&f("gt_pose")));
    let pred_rows = format!(
        "{}\n{}\n",
        serde_json::json!({"id": "a", "pred": read(&refined)}),
        serde_json::json!({"id": "b", "pred": gt})
    );
    let gt_rows = format!(
        "{}\n{}\n",
        serde_json::json!({"id": "a", "gt": gt}),
        serde_json::json!({"id": "b", "gt": gt})
    );
    std::fs::write(d.join("pred.jsonl"), pred_rows).unwrap();
    std::fs::write(d.join("gt.jsonl"), gt_rows).unwrap();
    let p = d.join("pred.jsonl");
    let g = d.join("gt.jsonl");
    for metric in ["add", "adds"] {
        let summary = ok(&[
            "eval", "--pred", s(&p), "--gt", s(&g), "--points", &f("object"), "--diameter", "0.17",
            "--metric", metric,
        ]);
        assert_eq!(summary["count"], 2);
        assert_eq!(summary["errors"][1][1], 0.0);
    }
    let proj = ok(&[
        "eval", "--pred", s(&p), "--gt", s(&g), "--points", &f("object"), "--diameter", "0.17", "--metric", "proj",
        "--intrinsics", &f("intrinsics"),
    ]);
    assert!(proj["recall"].as_f64().unwrap() >= 50.0);
    let err = fails(&["eval", "--pred", s(&p), "--gt", s(&g), "--points", &f("object"), "--diameter", "0.17", "--metric", "proj"]);
    assert!(err.contains("intrinsics"), "{err}");

    // rendering the ground truth reproduces the query
    let png = d.join("render.png");
    let pfm = d.join("alpha.pfm");
    ok(&[
        "render", "--object", &f("object"), "--pose", &f("gt_pose"), "--intrinsics", &f("intrinsics"),
        "--out", s(&png), "--alpha", s(&pfm),
    ]);
    assert_eq!(std::fs::read(&png).unwrap(), std::fs::read(f("query")).unwrap());
    assert!(std::fs::read(&pfm).unwrap().starts_with(b"Pf\n640 480\n-1"));
}

#[test]
fn gradcheck_command() {
    let report = ok(&["gradcheck", "--seed", "4"]);
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-3);
    assert_eq!(report["seed"], 4);
}

#[test]
fn errors_are_one_line_and_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let err = fails(&["render", "--object", s(&d.join("missing.ply")), "--pose", "p", "--intrinsics", "k", "--out", "o.png"]);
    assert!(err.starts_with("error: ") && err.contains("missing.ply"), "{err}");

    let err = fails(&["init-pose", "--db", s(d), "--mask", "m", "--embedding", "e", "--intrinsics", "k", "--out", "o"]);
    assert!(err.contains("manifest.json"), "{err}");

    std::fs::write(d.join("bad.ply"), b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n0\n").unwrap();
    let err = fails(&["render", "--object", s(&d.join("bad.ply")), "--pose", "p", "--intrinsics", "k", "--out", "o.png"]);
    assert!(err.contains("malformed splat PLY: missing"), "{err}");

    let out = gspose(&["refine", "--db", "x"]);
    assert!(!out.status.success());
    let out = gspose(&["nonsense"]);
    assert!(!out.status.success());
}

#[test]
fn database_errors_surface() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    ok(&["synth", "--seed", "1", "--out", s(&scene)]);
    let db = scene.join("db");
    let emb = db.join("embeddings.f32");
    let bytes = std::fs::read(&emb).unwrap();
    std::fs::write(&emb, &bytes[..bytes.len() - 4]).unwrap();
    let args = |db: &Path| {
        vec![
            "init-pose".to_string(), "--db".into(), s(db).into(), "--mask".into(), s(&scene.join("mask.png")).into(),
            "--embedding".into(), s(&scene.join("embedding.f32")).into(), "--intrinsics".into(),
            s(&scene.join("intrinsics.json")).into(), "--out".into(), s(&scene.join("o.json")).into(),
        ]
    };
    let a = args(&db);
    let err = fails(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(err.contains("embedding shape mismatch"), "{err}");

    std::fs::write(&emb, &bytes).unwrap();
    let manifest = db.join("manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, text.replace("gspose-db/1", "gspose-db/7")).unwrap();
    let err = fails(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(err.contains("unsupported database version"), "{err}");
}
