use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cimnet::checkpoint::save_checkpoint;
use cimnet::image::write_pnm;
use cimnet_core::model::{InputSpec, ModelGraph, ParamStore};
use cimnet_core::train::{PatchSource, SyntheticTextures};
use cimnet_core::Tensor;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cimnet"))
}

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("presets").join(format!("{name}.json"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(p).unwrap();
    r.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect()
}

fn texture(size: usize, seed: u64) -> Tensor<f32> {
    SyntheticTextures::new(1, size, seed).patch(0).unwrap().into_reshape(&[1, 3, size, size]).unwrap()
}

#[test]
fn count_reports_ratio_and_first_layer() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let text = ok(&["count", "--model", s(&preset("cimnet-v1-s8")), "--height", "96", "--width", "96", "--ref", s(&preset("fastdvd-block")), "--out", s(&out)]);
    assert!(text.contains("fastdvd-block"));
    let rows = csv_rows(&out);
    let total = rows.iter().find(|r| r[0] == "total").unwrap();
    assert_eq!(total[6], "9153");
    let ratio = rows.last().unwrap();
    assert_eq!(ratio[0], "ratio_vs_fastdvd-block");
    assert_eq!(ratio[6].parse::<f64>().unwrap(), 9153.0 / 51264.0);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(json["total_mvms"], 9153);

    let out2 = dir.path().join("o1.csv");
    ok(&["count", "--model", s(&preset("o1-s8")), "--height", "96", "--width", "96", "--out", s(&out2)]);
    let rows = csv_rows(&out2);
    assert_eq!(rows[0][..5], ["layer0", "conv", "96", "96", "144"]);

    let out3 = dir.path().join("tiled.csv");
    ok(&["count", "--model", s(&preset("cimnet-v1-s8")), "--height", "96", "--width", "96", "--rows", "128", "--cols", "256", "--out", s(&out3)]);
    assert_eq!(csv_rows(&out3)[0][5..], ["16", "2304"]);
}

#[test]
fn count_missing_model_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let r = run(&["count", "--model", s(&dir.path().join("nope.json")), "--height", "96", "--width", "96", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
    let r = run(&["count", "--model", s(&preset("cimnet-v1-s8")), "--height", "100", "--width", "96", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("layer 0"));
    assert!(!out.exists());
}

fn make_dataset(dir: &Path, n: usize, patch: usize, seed: u64) -> PathBuf {
    let src = dir.join("src");
    std::fs::create_dir_all(&src).unwrap();
    write_pnm(&texture(128, 1), src.join("a.ppm")).unwrap();
    write_pnm(&texture(16, 2), src.join("small.ppm")).unwrap();
    let out = dir.join(format!("data-{seed}"));
    let n = n.to_string();
    let p = patch.to_string();
    let seed = seed.to_string();
    let r = run(&["dataset", "--src", s(&src), "--n", &n, "--patch", &p, "--seed", &seed, "--out", s(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stderr).contains("small.ppm"));
    out
}

#[test]
fn dataset_manifest_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let a = make_dataset(dir.path(), 10, 32, 5);
    let rows = csv_rows(&a.join("manifest.csv"));
    assert_eq!(rows.len(), 10);
    let count = |k: &str| rows.iter().filter(|r| r[5] == k).count();
    assert_eq!((count("train"), count("val"), count("test")), (8, 1, 1));
    assert!(rows.iter().all(|r| r[2] == "a.ppm"));
    let b = dir.path().join("again");
    std::fs::rename(&a, &b).unwrap();
    let a = make_dataset(dir.path(), 10, 32, 5);
    assert_eq!(std::fs::read(a.join("manifest.csv")).unwrap(), std::fs::read(b.join("manifest.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("patch_000003.cimt")).unwrap(), std::fs::read(b.join("patch_000003.cimt")).unwrap());
}

#[test]
fn train_denoise_simulate_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(dir.path(), 10, 32, 1);
    let model = preset("cimnet-v1-tiny-s2");
    let ck1 = dir.path().join("a.cimt");
    let ck2 = dir.path().join("b.cimt");
    for ck in [&ck1, &ck2] {
        ok(&["train", "--model", s(&model), "--data", s(&data), "--epochs", "1", "--batch", "4", "--seed", "3", "--out", s(ck)]);
    }
    assert_eq!(std::fs::read(&ck1).unwrap(), std::fs::read(&ck2).unwrap());
    let m1 = std::fs::read(dir.path().join("a.metrics.csv")).unwrap();
    assert_eq!(m1, std::fs::read(dir.path().join("b.metrics.csv")).unwrap());
    let rows = csv_rows(&dir.path().join("a.metrics.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][1], "2");

    // Denoise a flat gray frame; the noisy column measures the corruption.
    let img = dir.path().join("gray.ppm");
    write_pnm(&Tensor::full(&[1, 3, 96, 96], 0.5), &img).unwrap();
    let out = dir.path().join("out.ppm");
    let metrics = dir.path().join("m.csv");
    ok(&["denoise", "--ckpt", s(&ck1), "--in", s(&img), "--sigma", "15", "--seed", "4", "--out", s(&out), "--metrics", s(&metrics)]);
    assert!(std::fs::read(&out).unwrap().starts_with(b"P6\n96 96\n255\n"));
    let row = &csv_rows(&metrics)[0];
    let noisy: f64 = row[2].parse().unwrap();
    assert!((noisy - 24.61).abs() < 0.1, "{noisy}");

    // Simulation: exact mode reproduces the reference forward.
    let tex = dir.path().join("tex.ppm");
    write_pnm(&texture(32, 9), &tex).unwrap();
    let sim = |bits: [&str; 3], name: &str| -> String {
        let m = dir.path().join(format!("{name}.csv"));
        ok(&[
            "simulate", "--ckpt", s(&ck1), "--in", s(&tex), "--rows", "64", "--cols", "32", "--wbits", bits[0], "--ibits", bits[1],
            "--adcbits", bits[2], "--seed", "0", "--out", s(&dir.path().join(format!("{name}.ppm"))), "--metrics", s(&m),
        ]);
        csv_rows(&m)[0][8].clone()
    };
    assert_eq!(sim(["0", "0", "0"], "exact"), "inf");
    let p8: f64 = sim(["8", "8", "10"], "q8").parse().unwrap();
    assert!(p8.is_finite() && p8 > 20.0, "{p8}");
    let sweep: Vec<f64> = ["4", "6", "8"].iter().map(|b| sim([b, "0", "0"], &format!("w{b}")).parse().unwrap()).collect();
    assert!(sweep.windows(2).all(|w| w[0] <= w[1]), "{sweep:?}");

    let r = run(&["simulate", "--ckpt", s(&ck1), "--in", s(&tex), "--wbits", "1", "--out", s(&out), "--metrics", s(&metrics)]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn denoise_identity_reports_inf() {
    let dir = tempfile::tempdir().unwrap();
    let g = ModelGraph::new("identity", InputSpec { channels: 3, height: 8, width: 8 }, vec![]).unwrap();
    let ck = dir.path().join("id.cimt");
    save_checkpoint(&ck, &g, &ParamStore { layers: vec![] }).unwrap();
    let img = dir.path().join("x.ppm");
    write_pnm(&texture(24, 3), &img).unwrap();
    let m = dir.path().join("m.csv");
    ok(&["denoise", "--ckpt", s(&ck), "--in", s(&img), "--sigma", "0", "--no-noise", "--out", s(&dir.path().join("o.ppm")), "--metrics", s(&m)]);
    let row = &csv_rows(&m)[0];
    assert_eq!(row[2..], ["inf", "inf"]);
}

#[test]
fn denoise_incompatible_dims_name_layer() {
    let dir = tempfile::tempdir().unwrap();
    let g = cimnet::config::load_model(preset("cimnet-v1-tiny-s2")).unwrap();
    let ck = dir.path().join("t.cimt");
    save_checkpoint(&ck, &g, &g.init_params(0)).unwrap();
    let img = dir.path().join("x.ppm");
    write_pnm(&texture(30, 3), &img).unwrap();
    let r = run(&["denoise", "--ckpt", s(&ck), "--in", s(&img), "--out", s(&dir.path().join("o.ppm"))]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("layer 6 (cimconv)"), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn psnr_command() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.pgm");
    let b = dir.path().join("b.pgm");
    let c = dir.path().join("c.ppm");
    // Half the pixels differ by 25 levels and half by 26: MSE ≈ 0.01.
    let mut bytes_a = b"P5\n4 4\n255\n".to_vec();
    let mut bytes_b = bytes_a.clone();
    for i in 0..16u8 {
        bytes_a.push(100);
        bytes_b.push(if i % 2 == 0 { 125 } else { 126 });
    }
    std::fs::write(&a, &bytes_a).unwrap();
    std::fs::write(&b, &bytes_b).unwrap();
    write_pnm(&Tensor::zeros(&[1, 3, 4, 4]), &c).unwrap();
    assert_eq!(ok(&["psnr", s(&a), s(&a)]).trim(), "inf");
    assert_eq!(ok(&["psnr", s(&a), s(&b)]).trim(), "20.00");
    assert_eq!(ok(&["psnr", s(&b), s(&a)]).trim(), "20.00");
    assert_eq!(run(&["psnr", s(&a), s(&c)]).status.code(), Some(2));
    assert_eq!(run(&["psnr", s(&a), s(&dir.path().join("none.pgm"))]).status.code(), Some(3));
}
