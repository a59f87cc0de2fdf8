use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lammvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lammvit")).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("{l}: {e}")))
        .collect()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_flags_with_defaults() {
    let expected: &[(&str, &[&str])] = &[
        ("gen-data", &["--out", "--count", "--fake-ratio", "--seed", "[default: 512]"]),
        ("train", &["--data", "--val", "--config", "--out", "--seed"]),
        ("eval", &["--ckpt", "--data", "--perturb", "--seed", "--report", "[default: none]"]),
        ("masks", &["--landmarks", "--size", "--patch", "--out", "[default: 16]"]),
        ("attn", &["--ckpt", "--image", "--landmarks", "--layer", "--out"]),
        ("gradcheck", &["--preset", "--seed", "[default: toy]"]),
    ];
    for (cmd, flags) in expected {
        let out = lammvit(&[cmd, "--help"]);
        assert_eq!(out.status.code(), Some(0));
        let text = String::from_utf8_lossy(&out.stdout);
        for flag in *flags {
            assert!(text.contains(flag), "{cmd} --help lacks {flag}:\n{text}");
        }
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(lammvit(&["gen-data", "--out", "x", "--bogus"]).status.code(), Some(1));
    assert_eq!(lammvit(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lammvit(&["eval", "--ckpt", "a", "--data", "b", "--perturb", "fog"]).status.code(), Some(1));
    assert_eq!(lammvit(&[]).status.code(), Some(1));
}

#[test]
fn gen_data_writes_manifest_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = lammvit(&["gen-data", "--out", path(d), "--count", "8", "--fake-ratio", "0.5", "--seed", "7"]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let echoed = &stdout_json(&out)[0];
        assert_eq!(echoed["command"], "gen-data");
        assert_eq!(echoed["count"], 8);
        assert_eq!(echoed["image_size"], 64);
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let entries = manifest.as_array().unwrap();
    assert_eq!(entries.len(), 8);
    assert_eq!(entries.iter().filter(|e| e["label"] == 1).count(), 4);
    for e in entries {
        let name = e["image"].as_str().unwrap();
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.bin");
    let out = lammvit(&["eval", "--ckpt", path(&missing), "--data", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr).to_lowercase();
    assert!(err.contains("no such file") || err.contains("not found"), "{err}");

    let garbage = dir.path().join("garbage.bin");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let out = lammvit(&["eval", "--ckpt", path(&garbage), "--data", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));

    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"dimension": 8}"#).unwrap();
    let out = lammvit(&["train", "--data", "d", "--val", "v", "--out", "o", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field dimension"));
}

#[test]
fn masks_exports_one_pgm_per_region_and_level() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(lammvit(&["gen-data", "--out", path(&data), "--count", "2", "--seed", "1"]).status.code(), Some(0));
    let out_dir = dir.path().join("masks");
    let lm = data.join("lm_00000.csv");
    let out = lammvit(&["masks", "--landmarks", path(&lm), "--size", "64", "--patch", "16", "--out", path(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let names: Vec<String> = fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("region_")).count(), 8);
    assert_eq!(names.iter().filter(|n| n.starts_with("patch_")).count(), 8);
    let pgm = fs::read(out_dir.join("patch_04_left_eye.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));

    let out = lammvit(&["masks", "--landmarks", path(&lm), "--size", "32", "--out", path(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_attn_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = (dir.path().join("train"), dir.path().join("val"));
    let gen = |d: &Path, seed: &str| lammvit(&["gen-data", "--out", path(d), "--count", "8", "--seed", seed, "--image-size", "32"]);
    assert_eq!(gen(&train, "1").status.code(), Some(0));
    assert_eq!(gen(&val, "2").status.code(), Some(0));
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"image_size": 32, "dim": 16, "layers": 2, "epochs": 2, "batch_size": 4, "lr": 0.001}"#).unwrap();
    let run = dir.path().join("run");
    let out = lammvit(&["train", "--data", path(&train), "--val", path(&val), "--config", path(&cfg), "--out", path(&run), "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = stdout_json(&out);
    assert_eq!(lines[0]["config"]["seed"], 3);
    assert_eq!(lines[0]["config"]["dim"], 16);
    assert_eq!(lines[0]["config"]["heads"], 8);
    let history = fs::read_to_string(run.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    for key in ["epoch", "train_loss", "ce", "div", "val_acc", "val_ap", "lr"] {
        assert!(history.contains(&format!("\"{key}\"")));
    }

    let ckpt = run.join("model.ckpt");
    let report = dir.path().join("report.json");
    let eval = |perturb: &str| {
        lammvit(&["eval", "--ckpt", path(&ckpt), "--data", path(&val), "--perturb", perturb, "--seed", "4", "--report", path(&report)])
    };
    let first = eval("none");
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(first.stdout, eval("none").stdout);
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(metrics["n"], 8);
    assert_eq!(metrics["perturbation"], "none");
    assert_eq!(eval("combined").status.code(), Some(0));

    let maps = dir.path().join("maps");
    let out = lammvit(&[
        "attn",
        "--ckpt",
        path(&ckpt),
        "--image",
        path(&val.join("img_00000.ppm")),
        "--landmarks",
        path(&val.join("lm_00000.csv")),
        "--layer",
        "1",
        "--out",
        path(&maps),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let diag: serde_json::Value = serde_json::from_slice(&fs::read(maps.join("diagnostics.json")).unwrap()).unwrap();
    let layers = diag["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    for l in layers {
        for key in ["weights", "lambda", "theta"] {
            assert_eq!(l[key].as_array().unwrap().len(), 8);
        }
    }
    assert!(maps.join("combined.pgm").exists());
    assert!(maps.join("head_07.pgm").exists());

    let out = lammvit(&["attn", "--ckpt", path(&ckpt), "--image", path(&val.join("img_00000.ppm")), "--landmarks", path(&val.join("lm_00000.csv")), "--layer", "5", "--out", path(&maps)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_toy_passes() {
    let out = lammvit(&["gradcheck", "--preset", "toy", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = stdout_json(&out);
    assert_eq!(lines[0]["config"]["dim"], 64);
    let max = lines[1]["max_rel_error"].as_f64().unwrap();
    assert!(max <= 1e-4, "{max}");
}
