use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fan_core::data::manifest::{load_dataset, parse_manifest};
use fan_core::data::pts::parse_pts;
use fan_core::metrics::{ced_grid, nme, CED_MAX, CED_STEP};
use fan_tensor::gradcheck::registered_ops;
use tempfile::TempDir;

fn fan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fan"))
        .args(args)
        .env("FAN_REFERENCE_MODE", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = fan(args);
    assert!(
        out.status.success(),
        "fan {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, count: usize, seed: u64, yaw: f64) -> PathBuf {
    let out = dir.join(name);
    ok(&[
        "--seed",
        &seed.to_string(),
        "synth",
        "--count",
        &count.to_string(),
        "--out",
        p(&out),
        "--landmarks",
        "5",
        "--yaw-min",
        &(-yaw).to_string(),
        "--yaw-max",
        &yaw.to_string(),
    ]);
    out.join("manifest.tsv")
}

/// Small FAN config text; `kind` is fan2d or guided.
fn config(dir: &Path, name: &str, kind: &str, epochs: usize, lr: f64) -> PathBuf {
    let channels = if kind == "guided" { 8 } else { 3 };
    let text = format!(
        "[model]\nkind = \"{kind}\"\n\n[model.fan]\nnum_stacks = 1\nhg_depth = 2\nwidth = 16\n\
         num_landmarks = 5\nin_channels = {channels}\ninput_resolution = 32\nblock = \"hierarchical\"\n\n\
         [train]\nlearning_rate = {lr:e}\ndrop_epochs = [{}]\ndrop_factor = 0.1\nbatch_size = 10\n\
         epochs = {epochs}\naugment = \"none\"\n",
        epochs * 3 / 4
    );
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_count_lines_deterministically() {
    let tmp = TempDir::new().unwrap();
    let a = synth(tmp.path(), "a", 12, 4, 90.0);
    let b = synth(tmp.path(), "b", 12, 4, 90.0);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().filter(|l| !l.trim().is_empty()).count(), 12);
    assert_eq!(tree_bytes(a.parent().unwrap()), tree_bytes(b.parent().unwrap()));

    let root = a.parent().unwrap();
    let on_disk: HashSet<PathBuf> = tree_bytes(root).into_iter().map(|(p, _)| p).collect();
    for r in parse_manifest(&text).unwrap() {
        assert!(on_disk.contains(Path::new(&r.image)));
        assert!(on_disk.contains(Path::new(&r.pts)));
        let depth = r.depth.expect("synthetic data has depth");
        assert!(on_disk.contains(Path::new(&depth)));
        assert_eq!(parse_pts(&fs::read_to_string(root.join(&r.pts)).unwrap()).unwrap().len(), 5);
    }
    assert_eq!(load_dataset(&a).unwrap().len(), 12);
}

#[test]
fn eval_outputs_and_noise_zero_identity() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), "d", 20, 1, 60.0);
    let cfg = config(tmp.path(), "c.toml", "fan2d", 1, 1e-3);
    let ckpt = tmp.path().join("m.ckpt");
    ok(&["--config", p(&cfg), "train", "--kind", "fan2d", "--data", p(&data), "--out", p(&ckpt)]);

    let ced_a = tmp.path().join("a.csv");
    let ced_b = tmp.path().join("b.csv");
    let plain = ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--ced", p(&ced_a)]);
    let zero = ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--noise", "0", "--ced", p(&ced_b)]);
    assert_eq!(plain, zero);
    assert_eq!(fs::read(&ced_a).unwrap(), fs::read(&ced_b).unwrap());

    let rows = fs::read_to_string(&ced_a).unwrap().lines().count() - 1;
    assert_eq!(rows, ced_grid(CED_STEP, CED_MAX).len());
    assert_eq!(rows, 1001);

    let noisy = ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--noise", "0.2"]);
    assert_ne!(plain, noisy);
}

#[test]
fn passthrough_scores_perfectly() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), "d", 15, 2, 90.0);
    let out = ok(&["eval", "--passthrough", "--data", p(&data)]);
    assert!(out.contains("nme 0.000000"), "{out}");
    assert!(out.contains("auc 1.000000"), "{out}");
    assert!(out.contains("failure_rate 0.000000"), "{out}");
}

#[test]
fn training_is_byte_reproducible_and_resume_matches() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), "d", 30, 5, 45.0);
    let cfg = config(tmp.path(), "c.toml", "fan2d", 3, 1e-3);
    let run = |name: &str, extra: &[&str]| {
        let out = tmp.path().join(name);
        let mut args = vec!["--seed", "9", "--config", p(&cfg), "train", "--kind", "fan2d"];
        args.extend_from_slice(&["--data", p(&data), "--out", p(&out)]);
        args.extend_from_slice(extra);
        ok(&args);
        fs::read(&out).unwrap()
    };
    let a = run("a.ckpt", &[]);
    let b = run("b.ckpt", &[]);
    assert_eq!(a, b);

    run("half.ckpt", &["--epochs", "2"]);
    let half = tmp.path().join("half.ckpt");
    let resumed = run("r.ckpt", &["--resume", p(&half), "--epochs", "3"]);
    assert_eq!(resumed, a);
}

#[test]
fn gradcheck_lists_each_op_once_and_catches_a_bad_backward() {
    let out = ok(&["gradcheck", "--cases", "2"]);
    let names: Vec<&str> = out
        .lines()
        .filter(|l| l.ends_with("PASS") || l.ends_with("FAIL"))
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    let expected: Vec<&str> = registered_ops().iter().map(|o| o.name).collect();
    assert_eq!(names, expected);
    assert_eq!(names.iter().collect::<HashSet<_>>().len(), names.len());
    assert!(out.lines().all(|l| !l.ends_with("FAIL")));

    let bad = fan(&["gradcheck", "--cases", "2", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(2));
    let text = String::from_utf8(bad.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("faulty_square") && l.ends_with("FAIL")));
}

#[test]
fn exit_codes_separate_user_and_numerical_errors() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(fan(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(fan(&["eval", "--passthrough", "--data", "missing.tsv"]).status.code(), Some(1));

    let data = synth(tmp.path(), "d", 12, 3, 30.0);
    let train_new = |cfg: &Path, out: &str| {
        fan(&["--config", p(cfg), "train", "--kind", "fan2d", "--data", p(&data), "--out", p(&tmp.path().join(out))])
    };
    assert_eq!(train_new(&config(tmp.path(), "huge.toml", "fan2d", 2, 1e30), "x.ckpt").status.code(), Some(2));

    let good = config(tmp.path(), "c.toml", "fan2d", 1, 1e-3);
    assert!(train_new(&good, "m.ckpt").status.success());
    let ckpt = tmp.path().join("m.ckpt");
    let noise = fan(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--noise", "1.5"]);
    assert_eq!(noise.status.code(), Some(1));

    let d68 = tmp.path().join("d68");
    ok(&["synth", "--count", "3", "--out", p(&d68)]);
    let mismatch = fan(&["eval", "--ckpt", p(&ckpt), "--data", p(&d68.join("manifest.tsv"))]);
    assert_eq!(mismatch.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("contract"));
}

#[test]
fn ablation_tables_have_the_expected_shapes() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), "d", 30, 6, 90.0);
    let cfg = config(tmp.path(), "c.toml", "fan2d", 1, 1e-3);
    let ckpt = tmp.path().join("m.ckpt");
    ok(&["--config", p(&cfg), "train", "--kind", "fan2d", "--data", p(&data), "--out", p(&ckpt)]);
    let shape = |protocol: &str| {
        let out = tmp.path().join(format!("{protocol}.csv"));
        ok(&["ablate", "--protocol", protocol, "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&out)]);
        let text = fs::read_to_string(out).unwrap();
        let rows = text.lines().count() - 1;
        let cols = text.lines().nth(1).unwrap().split(',').count() - 1;
        (rows, cols)
    };
    assert_eq!(shape("yaw"), (1, 3));
    assert_eq!(shape("noise"), (4, 3));
    assert_eq!(shape("resolution"), (6, 3));
}

/// Projected 3D landmarks from the two-network pipeline stay within 0.01 NME
/// of what the 2D network scores on its own.
#[test]
fn annotation_pipeline_is_consistent_with_eval() {
    let tmp = TempDir::new().unwrap();
    let train_data = synth(tmp.path(), "train", 200, 11, 40.0);
    let test_data = synth(tmp.path(), "test", 30, 12, 40.0);
    let c2 = config(tmp.path(), "fan2d.toml", "fan2d", 20, 1e-3);
    let cg = config(tmp.path(), "guided.toml", "guided", 20, 1e-3);
    let m2 = tmp.path().join("fan2d.ckpt");
    let mg = tmp.path().join("guided.ckpt");
    ok(&["--seed", "1", "--config", p(&c2), "train", "--kind", "fan2d", "--data", p(&train_data), "--out", p(&m2)]);
    ok(&["--seed", "2", "--config", p(&cg), "train", "--kind", "guided", "--data", p(&train_data), "--out", p(&mg)]);

    let eval = ok(&["eval", "--ckpt", p(&m2), "--data", p(&test_data)]);
    let eval_nme: f64 = eval
        .lines()
        .find_map(|l| l.strip_prefix("nme "))
        .unwrap()
        .parse()
        .unwrap();

    let out = tmp.path().join("ann");
    let log = ok(&[
        "annotate",
        "--ckpt-2d",
        p(&m2),
        "--ckpt-guided",
        p(&mg),
        "--data",
        p(&test_data),
        "--out",
        p(&out),
    ]);
    let digests: Vec<&str> = log
        .lines()
        .find(|l| l.starts_with("guide digest"))
        .unwrap()
        .split_whitespace()
        .collect();
    assert_eq!(digests[3], digests[5]);

    let truth = load_dataset(&test_data).unwrap();
    let annotated = load_dataset(&out.join("manifest.tsv")).unwrap();
    assert_eq!(annotated.len(), truth.len());
    let mut total = 0.0;
    for (t, a) in truth.iter().zip(&annotated) {
        assert_eq!(a.landmarks.len(), 5);
        assert!(a.landmarks.is_3d());
        total += nme(&t.landmarks, &a.landmarks, &t.bbox).unwrap();
    }
    let ann_nme = total / truth.len() as f64;
    assert!(ann_nme <= eval_nme + 0.01, "annotation {ann_nme} vs eval {eval_nme}");

    let again = tmp.path().join("ann2");
    ok(&[
        "annotate",
        "--ckpt-2d",
        p(&m2),
        "--ckpt-guided",
        p(&mg),
        "--data",
        p(&test_data),
        "--out",
        p(&again),
    ]);
    assert_eq!(tree_bytes(&out), tree_bytes(&again));
}
