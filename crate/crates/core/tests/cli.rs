use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[scene]
rows = 160
cols = 160
building_count = 8
tree_count = 16

[sampling]
patch_size = 32
max_shift = 32
val_patches = 4

[train]
epochs = 1
batch_size = 4

[train.model.encoder]
depth = "resnet26"
width = 0.0625

[inference]
tile = 64
stride = 32
"#;

fn mtdsm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtdsm")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mtdsm(args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "{args:?} failed: {stderr}");
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_infer_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = d.join("run.toml");
    fs::write(&config, CONFIG).unwrap();
    let (scene, run, pred, eval) = (d.join("scene"), d.join("run"), d.join("pred"), d.join("eval"));

    ok(&["synth", "--config", s(&config), "--seed", "4", "--out", s(&scene)]);
    for f in ["stereo.tif", "target.tif", "roof.tif", "dem.tif", "polygons.json", "config.toml"] {
        assert!(scene.join(f).exists(), "{f} missing");
    }

    ok(&["train", "--config", s(&config), "--data", s(&scene), "--out", s(&run)]);
    assert!(run.join("best.safetensors").exists());
    assert!(fs::read_to_string(run.join("epochs.csv")).unwrap().lines().count() == 2);

    let best = run.join("best.safetensors");
    let last = run.join("last.safetensors");
    ok(&["infer", "--config", s(&config), "--checkpoint", s(&best), s(&last), "--input", s(&scene.join("stereo.tif")), "--out", s(&pred)]);
    for f in ["dsm_0.tif", "dsm_1.tif", "dsm.tif", "roof.tif", "infer.toml"] {
        assert!(pred.join(f).exists(), "{f} missing");
    }

    let stdout = ok(&[
        "evaluate",
        "--pred",
        s(&pred.join("dsm.tif")),
        "--target",
        s(&scene.join("target.tif")),
        "--pred-roof",
        s(&pred.join("roof.tif")),
        "--target-roof",
        s(&scene.join("roof.tif")),
        "--out",
        s(&eval),
    ]);
    assert!(stdout.contains("rmse"));
    let csv = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    let metrics: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(csv.lines().next(), Some("metric,value,unit"));
    assert_eq!(metrics, ["rmse", "mae", "miou"]);
}

#[test]
fn groundtruth_baseline_and_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = d.join("run.toml");
    fs::write(&config, CONFIG).unwrap();
    let scene = d.join("scene");
    ok(&["synth", "--config", s(&config), "--out", s(&scene)]);

    let gt = d.join("gt");
    ok(&["make-groundtruth", "--polygons", s(&scene.join("polygons.json")), "--dem", s(&scene.join("dem.tif")), "--out", s(&gt)]);
    for f in ["target.tif", "roof.tif", "groundtruth.toml"] {
        assert!(gt.join(f).exists(), "{f} missing");
    }

    let base = d.join("base");
    ok(&["baseline", "--input", s(&scene.join("stereo.tif")), "--variance-window", "5", "--out", s(&base)]);
    assert!(base.join("dsm.tif").exists() && base.join("vegetation.tif").exists());

    let ens = d.join("ens");
    let stereo = scene.join("stereo.tif");
    let filtered = base.join("dsm.tif");
    ok(&["ensemble", "--dsm", s(&stereo), s(&filtered), "--mask", s(&scene.join("roof.tif")), "--out", s(&ens)]);
    assert!(ens.join("dsm.tif").exists() && ens.join("roof.tif").exists());
}

#[test]
fn exit_codes() {
    assert_eq!(mtdsm(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(mtdsm(&["evaluate", "--pred", "a.tif"]).status.code(), Some(2));
    assert_eq!(mtdsm(&["--help"]).status.code(), Some(0));
    let missing = mtdsm(&["evaluate", "--pred", "/nonexistent/a.tif", "--target", "/nonexistent/b.tif"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
}
