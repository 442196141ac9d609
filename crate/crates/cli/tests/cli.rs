use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use udaseg::data::{write_raster, Dataset, LoadMode, Raster};
use udaseg::metrics::MetricReport;

fn udaseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_udaseg")).args(args).env("RUST_LOG", "warn").env_remove("UDASEG_CACHE").output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stdout:\n{}\nstderr:\n{}", text(&out.stdout), text(&out.stderr));
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--out", s(out), "--num-images", "16", "--num-test", "4", "--size", "32"];
    args.extend_from_slice(extra);
    udaseg(&args)
}

/// Every file under `root` with its bytes, sorted by path.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Shrinks the generated run config so training takes a few seconds.
fn small_run(dir: &Path, iters: u64) -> PathBuf {
    let path = dir.join("train.toml");
    let mut table: toml::Table = fs::read_to_string(&path).unwrap().parse().unwrap();
    let model = table.entry("model").or_insert(toml::Table::new().into()).as_table_mut().unwrap();
    model.insert("widths".into(), toml::Value::Array(vec![4.into(), 6.into(), 8.into(), 8.into()]));
    for (k, v) in [("decode_dim", 6), ("proj_hidden", 16), ("proj_dim", 8), ("pred_hidden", 4)] {
        model.insert(k.into(), v.into());
    }
    let sched = table["schedule"].as_table_mut().unwrap();
    sched.insert("total_iters".into(), (iters as i64).into());
    sched.insert("warmup_iters".into(), (iters.min(6) as i64 - 1).into());
    let run = table["run"].as_table_mut().unwrap();
    run.insert("batch_source".into(), 2.into());
    run.insert("batch_target".into(), 2.into());
    run.insert("eval_every".into(), 0.into());
    run.insert("checkpoint_every".into(), 0.into());
    let out = dir.join("small.toml");
    fs::write(&out, toml::to_string(&table).unwrap()).unwrap();
    out
}

#[test]
fn synth_writes_both_domains_with_every_class() {
    let dir = tempfile::tempdir().unwrap();
    ok(&synth(dir.path(), &[]));
    for d in ["source", "target"] {
        assert!(dir.path().join(d).join("manifest.tsv").is_file());
        assert!(dir.path().join(d).join("images").is_dir());
        assert!(dir.path().join(d).join("labels").is_dir());
    }
    let ds = Dataset::open(&dir.path().join("source/manifest.tsv")).unwrap();
    let mut hist = [0usize; 4];
    for i in 0..ds.len() {
        for &c in &ds.load_sample::<f32>(i, LoadMode::Eval).unwrap().label.unwrap().data {
            hist[c as usize] += 1;
        }
    }
    assert!(hist.iter().all(|&n| n > 0), "{hist:?}");
}

#[test]
fn synth_is_deterministic_and_refuses_overwrite() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(&synth(a.path(), &["--seed", "3"]));
    ok(&synth(b.path(), &["--seed", "3"]));
    assert_eq!(tree(a.path()), tree(b.path()));

    let again = synth(a.path(), &["--seed", "3"]);
    assert!(!again.status.success());
    assert!(text(&again.stderr).contains("--force"));
    ok(&synth(a.path(), &["--seed", "3", "--force"]));
    assert_eq!(tree(a.path()), tree(b.path()));
}

#[test]
fn flags_take_precedence_over_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cli.toml");
    fs::write(&cfg, "[synth]\nnum-images = 3\nnum-test = 1\nsize = 32\n").unwrap();
    let out = dir.path().join("data");
    ok(&udaseg(&["--config", s(&cfg), "synth", "--out", s(&out), "--num-images", "5"]));
    let ds = Dataset::open(&out.join("source/manifest.tsv")).unwrap();
    assert_eq!(ds.len(), 6);
}

fn write_parent(root: &Path, id: &str, h: usize, w: usize) {
    let r = Raster::new(3, h, w, vec![7; 3 * h * w], Some(vec![1; h * w])).unwrap();
    write_raster(root, id, &r).unwrap();
}

#[test]
fn prepare_data_counts_tiles() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("raw");
    write_parent(&root, "a", 96, 128);
    write_parent(&root, "b", 64, 64);
    fs::write(dir.path().join("train.txt"), "a\n").unwrap();
    fs::write(dir.path().join("test.txt"), "b.png\n").unwrap();
    let out = dir.path().join("prepared");
    let res = udaseg(&[
        "prepare-data", "--root", s(&root), "--crop", "32", "--stride", "32", "--train-list",
        s(&dir.path().join("train.txt")), "--test-list", s(&dir.path().join("test.txt")), "--out", s(&out),
        "--classes", "x,y",
    ]);
    ok(&res);
    assert!(text(&res.stdout).contains("12 train tiles, 4 test tiles"), "{}", text(&res.stdout));
    let ds = Dataset::open(&out.join("manifest.tsv")).unwrap();
    assert_eq!(ds.len(), 16);
    assert_eq!(ds.load_sample::<f32>(0, LoadMode::Eval).unwrap().image.height, 32);
}

#[test]
fn prepare_data_on_an_empty_root_warns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("prepared");
    let res = udaseg(&["prepare-data", "--root", s(dir.path()), "--crop", "32", "--out", s(&out)]);
    ok(&res);
    assert!(text(&res.stderr).contains("empty manifest"), "{}", text(&res.stderr));
    assert!(text(&res.stdout).contains("0 total"));
    assert!(out.join("manifest.tsv").is_file());
}

#[test]
fn prepare_data_names_undersized_images() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("raw");
    write_parent(&root, "tiny_parent", 40, 40);
    let out = dir.path().join("prepared");
    let res = udaseg(&["prepare-data", "--root", s(&root), "--crop", "32", "--stride", "64", "--out", s(&out)]);
    assert!(!res.status.success());
    assert!(text(&res.stderr).contains("tiny_parent"), "{}", text(&res.stderr));
    let res = udaseg(&["prepare-data", "--root", s(&root), "--crop", "64", "--out", s(&out)]);
    assert!(!res.status.success());
    assert!(text(&res.stderr).contains("tiny_parent"));
    let res = udaseg(&["prepare-data", "--root", s(&dir.path().join("missing")), "--out", s(&out)]);
    assert!(!res.status.success());
}

#[test]
fn malformed_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[data.synthetic]\n[optim]\nlr_bakbone = 0.1\n").unwrap();
    let res = udaseg(&["--config", s(&cfg), "train", "--out", s(&dir.path().join("run"))]);
    assert!(!res.status.success());
    assert!(text(&res.stderr).contains("lr_bakbone"), "{}", text(&res.stderr));
}

#[test]
fn train_eval_report_round() {
    let dir = tempfile::tempdir().unwrap();
    ok(&synth(dir.path(), &[]));
    let cfg = small_run(dir.path(), 200);
    let run = dir.path().join("run");
    ok(&udaseg(&["--config", s(&cfg), "train", "--out", s(&run)]));
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201);
    assert!(run.join("checkpoints/final/checkpoint.json").is_file());

    let refused = udaseg(&["--config", s(&cfg), "train", "--out", s(&run)]);
    assert!(!refused.status.success());

    // Pausing and resuming reproduces the uninterrupted metrics.
    let paused = dir.path().join("paused");
    ok(&udaseg(&["--config", s(&cfg), "train", "--out", s(&paused), "--stop-at", "120"]));
    assert_eq!(fs::read_to_string(paused.join("metrics.csv")).unwrap().lines().count(), 121);
    let latest = paused.join("checkpoints/latest");
    ok(&udaseg(&["--config", s(&cfg), "train", "--out", s(&paused), "--resume", s(&latest)]));
    assert_eq!(fs::read_to_string(paused.join("metrics.csv")).unwrap(), csv);

    let ckpt = run.join("checkpoints/final");
    let manifest = dir.path().join("target/manifest.tsv");
    let e1 = dir.path().join("eval1.json");
    let e2 = dir.path().join("eval2.json");
    let res = udaseg(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&e1), "--split", "test"]);
    ok(&res);
    assert!(text(&res.stdout).contains("IoU"));
    ok(&udaseg(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&e2), "--split", "test"]));
    assert_eq!(fs::read(&e1).unwrap(), fs::read(&e2).unwrap());
    let report = MetricReport::from_json(&fs::read_to_string(&e1).unwrap()).unwrap();
    assert_eq!(report.per_class_iou.len(), 4);

    let out = dir.path().join("report");
    ok(&udaseg(&[
        "report", "--metrics", s(&run.join("metrics.csv")), "--evals", s(&e1), "--out", s(&out), "--checkpoint", s(&ckpt),
        "--manifest", s(&manifest), "--overlays", "2", "--palette", concat!(env!("CARGO_MANIFEST_DIR"), "/../../palettes/isprs.txt"),
    ]));
    assert!(fs::metadata(out.join("loss_curves.png")).unwrap().len() > 0);
    assert!(out.join("iou_bars.png").is_file());
    assert!(out.join("overlay_000.png").is_file());
    assert!(fs::read_to_string(out.join("index.html")).unwrap().contains("loss_curves.png"));
}

#[test]
fn eval_rejects_unlabeled_manifests() {
    let dir = tempfile::tempdir().unwrap();
    ok(&synth(dir.path(), &[]));
    let cfg = small_run(dir.path(), 1);
    let run = dir.path().join("run");
    ok(&udaseg(&["--config", s(&cfg), "train", "--out", s(&run)]));
    fs::remove_dir_all(dir.path().join("target/labels")).unwrap();
    let res = udaseg(&[
        "eval", "--checkpoint", s(&run.join("checkpoints/final")), "--manifest", s(&dir.path().join("target/manifest.tsv")),
        "--out", s(&dir.path().join("e.json")),
    ]);
    assert!(!res.status.success());
    assert!(text(&res.stderr).contains("unlabeled"), "{}", text(&res.stderr));
}

#[test]
fn report_with_empty_metrics_has_placeholders() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("metrics.csv");
    fs::write(&csv, "").unwrap();
    let out = dir.path().join("report");
    ok(&udaseg(&["report", "--metrics", s(&csv), "--out", s(&out)]));
    let html = fs::read_to_string(out.join("index.html")).unwrap();
    assert!(html.contains("no data"));
    let missing = udaseg(&["report", "--metrics", s(&dir.path().join("nope.csv")), "--out", s(&out), "--force"]);
    assert!(!missing.status.success());
}

#[test]
fn cache_relocates_synthetic_data_without_changing_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synthetic.toml");
    fs::write(
        &cfg,
        "[data.synthetic]\nnum_images = 6\nnum_test = 2\nshape = { height = 32, width = 32, channels = 3, num_classes = 4 }\n\
         [model]\nwidths = [4, 6, 8, 8]\ndecode_dim = 6\nproj_hidden = 16\nproj_dim = 8\npred_hidden = 4\n\
         [augment.sim]\ncrop_size = [32, 32]\n[schedule]\ntotal_iters = 12\nwarmup_iters = 3\n\
         [run]\nbatch_source = 2\nbatch_target = 2\n",
    )
    .unwrap();
    let plain = dir.path().join("plain");
    ok(&udaseg(&["--config", s(&cfg), "train", "--out", s(&plain)]));

    let cache = dir.path().join("cache");
    let cached = dir.path().join("cached");
    let res = Command::new(env!("CARGO_BIN_EXE_udaseg"))
        .args(["--config", s(&cfg), "train", "--out", s(&cached)])
        .env("UDASEG_CACHE", &cache)
        .output()
        .unwrap();
    ok(&res);
    let entries: Vec<_> = fs::read_dir(cache.join("synth")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(entries.len(), 1);
    assert!(entries[0].join("target/manifest.tsv").is_file());
    assert_eq!(fs::read(plain.join("metrics.csv")).unwrap(), fs::read(cached.join("metrics.csv")).unwrap());
}
