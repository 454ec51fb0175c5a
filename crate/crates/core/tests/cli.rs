use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wsi_mil::fbag::read_bag;
use wsi_mil::metrics::MetricSet;
use wsi_mil::model::checkpoint_len;
use wsi_mil::pipeline::RunConfig;
use wsi_mil::raster::RasterImage;
use wsi_mil::train::CvReport;

fn milcli(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_milcli"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MILCLI_SEED")
        .output()
        .expect("milcli runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).unwrap();
                files.push((p, bytes));
            }
        }
    }
    files.sort();
    files
}

/// Small synthetic benchmark with a fast run config.
fn small_benchmark(dir: &Path) -> PathBuf {
    ok(&milcli(&["synth", "--out", "bench", "--bags", "30", "--instances", "16", "--dim", "8"], dir));
    let run = dir.join("bench/run.json");
    let mut cfg = RunConfig::load(&run).unwrap();
    cfg.manifest = "manifest.csv".into();
    cfg.output_dir = "run".into();
    cfg.train.max_epochs = 2;
    cfg.train.hidden = 8;
    cfg.train.attention = 4;
    std::fs::write(&run, cfg.to_json()).unwrap();
    run
}

#[test]
fn splits_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("labels.txt"), "0\n1\n".repeat(10)).unwrap();
    let args = ["splits", "--n", "20", "--k", "10", "--seed", "42", "--labels", "labels.txt", "--out"];
    ok(&milcli(&[&args[..], &["a.json"]].concat(), dir.path()));
    ok(&milcli(&[&args[..], &["b.json"]].concat(), dir.path()));
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.json")).unwrap());
    let plan: wsi_mil::split::SplitPlan = serde_json::from_slice(&a).unwrap();
    assert_eq!(plan.fold_sizes(), vec![2; 10]);
}

#[test]
fn seed_env_is_overridden_by_flag() {
    let dir = tempfile::tempdir().unwrap();
    let run = |extra: &[&str], env: Option<&str>, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_milcli"));
        cmd.args(["splits", "--n", "30", "--k", "3", "--out", out]).args(extra).current_dir(dir.path());
        match env {
            Some(v) => cmd.env("MILCLI_SEED", v),
            None => cmd.env_remove("MILCLI_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(dir.path().join(out)).unwrap()
    };
    let env7 = run(&[], Some("7"), "e.json");
    let flag7 = run(&["--seed", "7"], Some("8"), "f.json");
    let default = run(&[], None, "d.json");
    assert_eq!(env7, flag7);
    assert_ne!(env7, default);
}

#[test]
fn train_evaluate_and_heatmap_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let run = small_benchmark(dir.path());
    let inputs = snapshot(&dir.path().join("bench/bags"));

    let summary = ok(&milcli(&["train", "--config", run.to_str().unwrap(), "--k", "5"], dir.path()));
    assert!(summary.contains("5 rounds on 30 slides"), "{summary}");
    let out_dir = dir.path().join("bench/run");
    let report: CvReport = serde_json::from_slice(&std::fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.rounds.len(), 5);
    assert_eq!(report.scores.len(), 30);
    for r in 0..5 {
        let len = std::fs::metadata(out_dir.join(format!("round_{r}.milm"))).unwrap().len();
        assert_eq!(len, checkpoint_len(&wsi_mil::model::ModelDims::new(8, 8, 4)));
    }
    assert_eq!(snapshot(&dir.path().join("bench/bags")), inputs, "training modified its inputs");

    // evaluate at the training threshold reproduces the pooled metrics
    ok(&milcli(&["evaluate", "--report", "bench/run", "--out", "m.json", "--roc", "roc.txt"], dir.path()));
    let metrics: MetricSet = serde_json::from_slice(&std::fs::read(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(metrics, report.pooled.metrics);
    let roc = std::fs::read_to_string(dir.path().join("roc.txt")).unwrap();
    assert_eq!(roc.lines().count(), report.pooled.roc.len());

    let strict = ok(&milcli(&["evaluate", "--report", "bench/run/report.json", "--threshold", "0.99"], dir.path()));
    let strict: MetricSet = serde_json::from_str(&strict).unwrap();
    assert_eq!(strict.auroc, report.pooled.metrics.auroc);
    assert!(
        strict.confusion.tp + strict.confusion.fp
            <= report.pooled.metrics.confusion.tp + report.pooled.metrics.confusion.fp
    );

    // 16 patches on a 4x4 grid of 256 px cells: a 64 px thumbnail is scale 16
    let bag = read_bag(&dir.path().join("bench/bags/syn0001.fbag")).unwrap();
    assert_eq!(bag.n(), 16);
    RasterImage::filled(64, 64, [230, 220, 225]).unwrap().save(&dir.path().join("thumb.png")).unwrap();
    let args =
        ["heatmap", "--model", "bench/run/round_0.milm", "--bag", "bench/bags/syn0001.fbag", "--thumb", "thumb.png"];
    ok(&milcli(&[&args[..], &["--out", "h.png"]].concat(), dir.path()));
    let h = RasterImage::load(&dir.path().join("h.png")).unwrap();
    assert_eq!((h.width(), h.height()), (64, 64));
    assert_ne!(h, RasterImage::load(&dir.path().join("thumb.png")).unwrap());

    ok(&milcli(&[&args[..], &["--output-dir", "bench/run"]].concat(), dir.path()));
    let again = std::fs::read(dir.path().join("bench/run/heatmaps/syn0001.png")).unwrap();
    assert_eq!(again, std::fs::read(dir.path().join("h.png")).unwrap());
}

#[test]
fn tile_then_extract() {
    let dir = tempfile::tempdir().unwrap();
    // tissue-coloured left half, white right half
    let slide = RasterImage::from_fn(1024, 512, |x, _| if x < 512 { [190, 80, 150] } else { [250, 250, 250] }).unwrap();
    slide.save(&dir.path().join("slide.png")).unwrap();
    ok(&milcli(&["tile", "--image", "slide.png", "--out", "coords.txt"], dir.path()));
    let coords = std::fs::read_to_string(dir.path().join("coords.txt")).unwrap();
    assert_eq!(coords, "0,0,256\n256,0,256\n0,256,256\n256,256,256\n");

    ok(&milcli(&["extract", "--image", "slide.png", "--coords", "coords.txt", "--out", "s.fbag"], dir.path()));
    let bag = read_bag(&dir.path().join("s.fbag")).unwrap();
    assert_eq!((bag.slide_id.as_str(), bag.n(), bag.dim(), bag.patch_size), ("slide", 4, 32, 256));

    ok(&milcli(&["extract", "--image", "slide.png", "--slide-id", "s2", "--out", "t.fbag"], dir.path()));
    assert_eq!(read_bag(&dir.path().join("t.fbag")).unwrap().coords, bag.coords);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| milcli(args, dir.path()).status.code().unwrap();
    let unknown = milcli(&["bogus"], dir.path());
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));
    assert_eq!(code(&["train"]), 1);
    assert_eq!(code(&["train", "--config", "absent.json"]), 2);
    std::fs::write(dir.path().join("bad.json"), "{\"manifest\": 3}").unwrap();
    assert_eq!(code(&["train", "--config", "bad.json"]), 1);
    assert_eq!(code(&["splits", "--n", "20", "--k", "2", "--out", "s.json"]), 1);
    assert_eq!(code(&["heatmap", "--model", "m", "--bag", "b", "--thumb", "t", "--out", "h.png"]), 2);
    std::fs::write(dir.path().join("junk.milm"), b"not a model").unwrap();
    std::fs::write(dir.path().join("t.png"), b"").unwrap();
    assert_eq!(code(&["heatmap", "--model", "junk.milm", "--bag", "b", "--thumb", "t.png", "--out", "h.png"]), 1);
}
