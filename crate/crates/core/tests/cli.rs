use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

use smoothtaylor::autodiff::save_model;
use smoothtaylor::toy::{self, Activation};

const SHAPE: [usize; 3] = [1, 48, 48];

fn fixture(dir: &Path, inputs: usize, extra: Value) -> PathBuf {
    fs::create_dir_all(dir.join("inputs")).unwrap();
    save_model(&toy::random_conv_net(1, SHAPE, 3), &dir.join("model.json")).unwrap();
    let paths: Vec<String> = (0..inputs)
        .map(|i| {
            let name = format!("inputs/img{i}.tsr");
            fs::write(dir.join(&name), toy::random_image(10 + i as u64, &SHAPE).to_bytes()).unwrap();
            name
        })
        .collect();
    let mut cfg = json!({
        "schema_version": 1,
        "model_path": "model.json",
        "input_paths": paths,
        "seed": 5,
        "methods": [
            {"method": "ig_zero", "steps": 8},
            {"method": "smoothtaylor", "sigma": 0.4, "roots": 8}
        ],
        "eval": [{"perturbation": {"kernel": 3, "steps": 5, "samples": 4}}],
        "adaptive": {"objective": "autvc", "roots": 6, "max_iterations": 3}
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smoothtaylor"))
        .args(args)
        .arg("--config")
        .arg(config)
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn files_with_ext(dir: &Path, ext: &str) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext))
        .count()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn attribute_writes_one_map_per_method_and_input() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), 3, json!({}));
    ok(&run(&["attribute"], &cfg));
    let dir = tmp.path().join("out/attributions");
    assert_eq!(files_with_ext(&dir, "tsr"), 6);
    assert_eq!(files_with_ext(&dir, "pgm"), 6);
    assert_eq!(files_with_ext(&dir, "json"), 6);
    assert!(dir.join("img1__smoothtaylor-sigma0.4-R8.pgm").exists());
    let meta: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/attribute.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 5);
    assert!(meta["prng"].as_str().unwrap().contains("chacha20"));
}

#[test]
fn missing_model_is_a_config_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), 1, json!({"model_path": "nowhere/model.json"}));
    let out = run(&["attribute"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/model.json"));
}

#[test]
fn unknown_fields_and_bad_schema_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), 1, json!({"sigma": 3}));
    assert_eq!(run(&["attribute"], &cfg).status.code(), Some(2));
    let cfg = fixture(tmp.path(), 1, json!({"schema_version": 9}));
    assert_eq!(run(&["attribute"], &cfg).status.code(), Some(2));
}

#[test]
fn empty_input_list_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), 0, json!({}));
    let out = run(&["gradcheck"], &cfg);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn evaluate_table_is_the_mean_of_per_image_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), 3, json!({}));
    ok(&run(&["evaluate"], &cfg));
    let out = tmp.path().join("out");
    let per_image = csv_rows(&out.join("aupc.csv"));
    let per_image_tv = csv_rows(&out.join("autvc.csv"));
    assert_eq!(per_image.len(), 6);
    let table = csv_rows(&out.join("table.csv"));
    assert_eq!(table.len(), 2);
    for row in &table {
        let mean = |rows: &[Vec<String>]| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r[1] == row[0] && r[2] == row[1])
                .map(|r| r[3].parse().unwrap())
                .collect();
            assert_eq!(v.len(), 3);
            v.iter().sum::<f64>() / 3.0
        };
        assert!((row[2].parse::<f64>().unwrap() - mean(&per_image)).abs() < 1e-9);
        assert!((row[3].parse::<f64>().unwrap() - mean(&per_image_tv)).abs() < 1e-9);
    }
    let curve = csv_rows(&out.join("curves/img0__ig_zero-M8__e0__aupc.csv"));
    assert_eq!(curve.len(), 6);
    assert_eq!(curve[0][1].parse::<f64>().unwrap(), 1.0);
    // 48 -> 32, then 21 is below the minimum size.
    assert_eq!(csv_rows(&out.join("curves/img0__ig_zero-M8__e0__tv.csv")).len(), 2);
}

#[test]
fn evaluate_reuses_stored_attributions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), 1, json!({}));
    ok(&run(&["attribute"], &cfg));
    let path = tmp.path().join("out/attributions/img0__ig_zero-M8.tsr");
    let before = fs::read(&path).unwrap();
    ok(&run(&["evaluate"], &cfg));
    assert_eq!(fs::read(&path).unwrap(), before);
}

#[test]
fn adaptive_never_ends_worse_than_it_started() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), 2, json!({}));
    ok(&run(&["adaptive"], &cfg));
    let out = tmp.path().join("out/adaptive");
    let summary = csv_rows(&out.join("summary.csv"));
    assert_eq!(summary.len(), 2);
    for row in &summary {
        let initial: f64 = row[3].parse().unwrap();
        let best: f64 = row[5].parse().unwrap();
        assert!(best <= initial, "{row:?}");
        let trace = csv_rows(&out.join(format!("{}__trace.csv", row[0])));
        assert!(!trace.is_empty() && trace.len() <= 3);
    }
    assert!(tmp.path().join("out/attributions/img0__adaptive_autvc.tsr").exists());
}

#[test]
fn gradcheck_passes_on_a_smooth_net() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), 2, json!({}));
    let smooth = toy::random_mlp(3, SHAPE.iter().product(), &[12], 3, Activation::Softplus);
    let mut layers = vec![smoothtaylor::autodiff::Layer::Flatten];
    layers.extend(smooth.layers().iter().cloned());
    let model = smoothtaylor::autodiff::Model::new(SHAPE.to_vec(), layers).unwrap();
    save_model(&model, &tmp.path().join("model.json")).unwrap();
    let out = run(&["gradcheck"], &cfg);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/gradcheck.json")).unwrap()).unwrap();
    assert!(report["model_max_rel_err"].as_f64().unwrap() < 1e-3);
    assert_eq!(report["model_skipped"], 0);
}

#[test]
fn report_summarises_previous_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), 1, json!({}));
    ok(&run(&["evaluate"], &cfg));
    ok(&run(&["report"], &cfg));
    let md = fs::read_to_string(tmp.path().join("out/report.md")).unwrap();
    assert!(md.contains("config hash"));
    assert!(md.contains("| method | params | mean_aupc | mean_autvc |"));
    assert!(md.contains("## Adaptive noising\n\nNot run."));
}

#[test]
fn seed_override_changes_noisy_methods_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), 1, json!({}));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let go = |dir: &Path, seed: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_smoothtaylor"))
            .args(["attribute", "--seed", seed, "--config"])
            .arg(&cfg)
            .arg("--output")
            .arg(dir)
            .output()
            .unwrap();
        ok(&out);
    };
    go(&a, "1");
    go(&b, "2");
    let read = |d: &Path, f: &str| fs::read(d.join("attributions").join(f)).unwrap();
    assert_eq!(read(&a, "img0__ig_zero-M8.tsr"), read(&b, "img0__ig_zero-M8.tsr"));
    assert_ne!(
        read(&a, "img0__smoothtaylor-sigma0.4-R8.tsr"),
        read(&b, "img0__smoothtaylor-sigma0.4-R8.tsr")
    );
}

#[test]
fn png_inputs_are_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture(tmp.path(), 0, json!({"input_paths": ["inputs/pic.png"]}));
    let file = fs::File::create(tmp.path().join("inputs/pic.png")).unwrap();
    let mut enc = png::Encoder::new(file, 48, 48);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let pixels: Vec<u8> = (0..48 * 48).map(|i| (i * 7 % 256) as u8).collect();
    enc.write_header().unwrap().write_image_data(&pixels).unwrap();
    ok(&run(&["attribute"], &cfg));
    assert!(tmp.path().join("out/attributions/pic__ig_zero-M8.pgm").exists());
}
