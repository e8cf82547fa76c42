use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn mvfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvfuse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mvfuse(args);
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small enough for a full synth → pretrain → train → eval round in seconds.
const TINY: &str = r#"{
  "synth": {"train_scenes": 2, "val_scenes": 1, "frames_per_scene": 4, "point_density": 25.0},
  "net2d": {"model": {"stage_channels": [4, 8, 8], "feature_dim": 8},
            "pretrain": {"epochs": 1, "steps_per_epoch": 2}},
  "lift": {"mlp_channels": [8, 8]},
  "backbone": {"network": {"centroid_counts": [32, 16, 8, 4], "radii": [0.2, 0.4, 0.8, 1.6],
               "group_sizes": [8, 8, 8, 8], "sa_mlps": [[8], [8], [8], [8]],
               "fp_mlps": [[8], [8], [8], [8]], "head_hidden": 8}},
  "train": {"epochs": 2, "chunks_per_epoch": 4, "batch_size": 2, "views_m": 2, "n_rgb": 64,
            "chunk_points": 64, "eval_every": 1},
  "eval": {"stride": 1.0, "keep_ratios": [1.0, 0.5]}
}"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_with_fixed_seed_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["--config", s(&cfg), "synth", "--out", s(&a), "--seed", "7"]);
    ok(&["--config", s(&cfg), "synth", "--out", s(&b), "--seed", "7"]);
    let fa = files(&a);
    assert!(fa.keys().any(|k| k.ends_with("points.bin")));
    assert!(fa.contains_key(Path::new("config.json")));
    assert_eq!(fa, files(&b));
    let snap: Value = serde_json::from_slice(&fa[Path::new("config.json")]).unwrap();
    assert_eq!(snap["synth"]["seed"], 7, "flag overrides the file");
    assert_eq!(snap["synth"]["train_scenes"], 2, "file overrides the default");
}

fn read_points(path: &Path) -> Vec<[f64; 3]> {
    let bytes = fs::read(path).unwrap();
    let v: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Per step, scan every unchosen frame and keep the largest number of newly
/// covered targets, lowest frame id on ties.
fn oracle_order(covered: &[(usize, Vec<usize>)], target: &[usize], m: usize) -> (Vec<usize>, Vec<f64>) {
    let mut seen: Vec<usize> = Vec::new();
    let mut order = Vec::new();
    let mut cov = Vec::new();
    for _ in 0..m {
        let mut best: Option<(usize, usize)> = None;
        for (id, c) in covered {
            if order.contains(id) {
                continue;
            }
            let gain = target.iter().filter(|t| c.contains(t) && !seen.contains(t)).count();
            let better = match best {
                None => true,
                Some((bid, bg)) => gain > bg || (gain == bg && *id < bid),
            };
            if better {
                best = Some((*id, gain));
            }
        }
        let (id, _) = best.unwrap();
        order.push(id);
        let c = &covered.iter().find(|(f, _)| *f == id).unwrap().1;
        seen.extend(target.iter().filter(|t| c.contains(t) && !seen.contains(t)).copied().collect::<Vec<_>>());
        cov.push(seen.len() as f64 / target.len() as f64);
    }
    (order, cov)
}

#[test]
fn views_follow_the_exhaustive_greedy_oracle() {
    let tmp = TempDir::new().unwrap();
    let corpus = tmp.path().join("corpus");
    let cfg = tmp.path().join("toy.json");
    fs::write(&cfg, r#"{"synth": {"train_scenes": 1, "val_scenes": 1, "frames_per_scene": 3, "point_density": 40.0}}"#).unwrap();
    ok(&["--config", s(&cfg), "synth", "--out", s(&corpus)]);
    let scene = corpus.join("train").join("scene_0000");
    let out = tmp.path().join("views");
    ok(&["views", "--scene", s(&scene), "--out", s(&out), "--views", "3", "--stride", "0.75"]);

    let points = read_points(&scene.join("points.bin"));
    let index: Value = serde_json::from_str(&fs::read_to_string(scene.join("coverage.json")).unwrap()).unwrap();
    let coarse: Vec<usize> = serde_json::from_value(index["coarse_ids"].clone()).unwrap();
    let covered: Vec<(usize, Vec<usize>)> = index["frames"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| (f["frame_id"].as_u64().unwrap() as usize, serde_json::from_value(f["covered"].clone()).unwrap()))
        .collect();
    assert_eq!(covered.len(), 3);

    let windows: Vec<Value> = serde_json::from_str(&fs::read_to_string(out.join("views.json")).unwrap()).unwrap();
    assert!(windows.len() > 1);
    for w in &windows {
        let o = [w["origin"][0].as_f64().unwrap(), w["origin"][1].as_f64().unwrap()];
        let target: Vec<usize> = (0..coarse.len())
            .filter(|&j| {
                let p = points[coarse[j]];
                p[0] >= o[0] && p[0] < o[0] + 1.5 && p[1] >= o[1] && p[1] < o[1] + 1.5
            })
            .collect();
        assert_eq!(w["targets"].as_u64().unwrap() as usize, target.len());
        let (order, cov) = oracle_order(&covered, &target, 3);
        let got: Vec<usize> = serde_json::from_value(w["frame_ids"].clone()).unwrap();
        assert_eq!(got, order, "window at {o:?}");
        let got_cov: Vec<f64> = serde_json::from_value(w["coverage"].clone()).unwrap();
        for (g, e) in got_cov.iter().zip(&cov) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }
    let csv = fs::read_to_string(out.join("views.csv")).unwrap();
    assert_eq!(csv.lines().count(), windows.len() + 1);
}

#[test]
fn gradcheck_passes_and_prints_the_table() {
    let tmp = TempDir::new().unwrap();
    let out = ok(&["gradcheck", "--out", s(tmp.path())]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("check"), "{stdout}");
    assert!(stdout.contains("model_early"));
    assert!(!stdout.contains("FAIL"));
    let csv = fs::read_to_string(tmp.path().join("gradcheck.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn bad_config_exits_with_the_field_path() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"sgd": {"lrr": 0.1}}}"#).unwrap();
    let out = mvfuse(&["--config", s(&cfg), "synth", "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[config]") && err.contains("train.sgd.lrr"), "{err}");
    assert!(!tmp.path().join("o").exists(), "nothing runs before validation");

    let missing = mvfuse(&["--config", s(&tmp.path().join("nope.json")), "synth", "--out", s(&tmp.path().join("o"))]);
    assert_eq!(missing.status.code(), Some(2));

    let flag = mvfuse(&["gradcheck", "--out", s(tmp.path()), "--seed", "x"]);
    assert_eq!(flag.status.code(), Some(2), "clap usage errors share the config code");
}

#[test]
fn pipeline_dependencies_and_reproducible_reruns() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    let cfg = tiny_config(t);
    let corpus = t.join("corpus");

    // nothing to read yet
    let out = mvfuse(&["--config", s(&cfg), "train", "--corpus", s(&corpus), "--out", s(&t.join("x"))]);
    assert_eq!(out.status.code(), Some(3));

    ok(&["--config", s(&cfg), "synth", "--out", s(&corpus)]);

    // frozen lifted features without pretrained weights
    let out = mvfuse(&["--config", s(&cfg), "train", "--corpus", s(&corpus), "--out", s(&t.join("x"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[dependency]"));
    let out = mvfuse(&[
        "--config", s(&cfg), "train", "--corpus", s(&corpus), "--out", s(&t.join("x")),
        "--net2d", s(&t.join("missing.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let pre = t.join("pre");
    ok(&["--config", s(&cfg), "--workers", "1", "pretrain2d", "--corpus", s(&corpus), "--out", s(&pre)]);
    let net2d = pre.join("net2d.ckpt");
    assert!(net2d.is_file());

    let run1 = t.join("run1");
    ok(&["--config", s(&cfg), "train", "--corpus", s(&corpus), "--out", s(&run1), "--net2d", s(&net2d), "--seed", "3"]);
    let metrics = fs::read_to_string(run1.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,split,loss,miou,iou_floor"));
    assert_eq!(metrics.lines().filter(|l| l.contains(",val,")).count(), 2);

    // the snapshot carries the seed flag, so no flags are needed to reproduce
    let snap = run1.join("config.json");
    let run2 = t.join("run2");
    ok(&["--config", s(&snap), "train", "--corpus", s(&corpus), "--out", s(&run2), "--net2d", s(&net2d)]);
    assert_eq!(metrics, fs::read_to_string(run2.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(snap).unwrap(), fs::read(run2.join("config.json")).unwrap());

    let eval1 = t.join("eval1");
    let eval2 = t.join("eval2");
    ok(&["--config", s(&cfg), "eval", "--corpus", s(&corpus), "--model", s(&run1.join("model.ckpt")), "--out", s(&eval1)]);
    ok(&["--config", s(&eval1.join("config.json")), "eval", "--corpus", s(&corpus), "--model", s(&run2.join("model.ckpt")), "--out", s(&eval2)]);
    let m1 = fs::read_to_string(eval1.join("metrics.csv")).unwrap();
    assert_eq!(m1, fs::read_to_string(eval2.join("metrics.csv")).unwrap());
    assert!(m1.starts_with("split,scenes,points,oa,miou"));

    let inf = t.join("infer");
    ok(&["--config", s(&cfg), "infer", "--corpus", s(&corpus), "--model", s(&run1.join("model.ckpt")), "--out", s(&inf)]);
    let labels = fs::read(inf.join("predictions").join("scene_0002.labels.bin")).unwrap();
    let points = read_points(&corpus.join("val").join("scene_0002").join("points.bin"));
    assert_eq!(labels.len(), 2 * points.len(), "one label per point");

    let rob = t.join("rob");
    ok(&[
        "--config", s(&cfg), "robustness", "--corpus", s(&corpus), "--out", s(&rob),
        "--model", &format!("early={}", s(&run1.join("model.ckpt"))),
    ]);
    let csv = fs::read_to_string(rob.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("model,ratio,retained"));
    assert_eq!(csv.lines().count(), 3);
    assert!(fs::read_to_string(rob.join("robustness.svg")).unwrap().contains("<svg"));
}
