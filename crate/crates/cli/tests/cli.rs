use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn zoo_fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures/zoo")
        .join(format!("{name}.onnx"))
}

/// A cache directory pre-populated with fixture models, so registry names
/// resolve without network access.
fn seeded_cache(names: &[&str]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for name in names {
        std::fs::copy(zoo_fixture(name), dir.path().join(format!("{name}.onnx"))).unwrap();
    }
    dir
}

fn edgecost(cache: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgecost"))
        .arg("--cache-dir")
        .arg(cache)
        .args(args)
        .env_remove("EDGECOST_CACHE")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn analyze_json_by_registry_name() {
    let cache = seeded_cache(&["squeezenet1.0"]);
    let out = edgecost(cache.path(), &["analyze", "squeezenet1.0", "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["model"], "squeezenet1.0");
    assert_eq!(v["input_shape"], serde_json::json!([1, 3, 224, 224]));
    let pbytes = v["totals"]["param_bytes"].as_u64().unwrap();
    assert_eq!(pbytes, 1_248_424 * 4);
    assert!(v["layers"].as_array().unwrap().len() > 50);
    assert!(v["roofline"].is_null());
}

#[test]
fn analyze_file_path_text_report() {
    let cache = tempfile::tempdir().unwrap();
    let path = zoo_fixture("resnet18");
    let out = edgecost(cache.path(), &["analyze", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("resnet18"), "{text}");
    assert!(text.contains("GFLOP"), "{text}");
}

#[test]
fn fp16_halves_every_byte_column() {
    let cache = seeded_cache(&["mobilenetv2", "alexnet"]);
    let run = |dtype: &str| {
        let out = edgecost(cache.path(), &["compare", "mobilenetv2", "alexnet", "--csv", "--dtype", dtype]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        stdout(&out)
    };
    let (fp32, fp16) = (run("fp32"), run("fp16"));
    let header: Vec<&str> = fp32.lines().next().unwrap().split(',').collect();
    for (a, b) in fp32.lines().skip(1).zip(fp16.lines().skip(1)) {
        let (a, b): (Vec<&str>, Vec<&str>) = (a.split(',').collect(), b.split(',').collect());
        for (i, col) in header.iter().enumerate() {
            if col.ends_with("bytes") {
                let (x, y): (u64, u64) = (a[i].parse().unwrap(), b[i].parse().unwrap());
                assert_eq!(x, 2 * y, "{col}");
            } else if col.starts_with("flops") || *col == "macs" {
                assert_eq!(a[i], b[i], "{col}");
            }
        }
    }
}

#[test]
fn missing_file_exits_1() {
    let cache = tempfile::tempdir().unwrap();
    let out = edgecost(cache.path(), &["analyze", "missing.onnx"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("not found"), "{}", stderr(&out));
}

#[test]
fn compare_needs_two_models() {
    let cache = seeded_cache(&["alexnet"]);
    let out = edgecost(cache.path(), &["compare", "alexnet"]);
    assert_eq!(out.status.code(), Some(64));
}

#[test]
fn compare_partial_failure_exits_2_and_keeps_good_rows() {
    let cache = seeded_cache(&["alexnet", "resnet18"]);
    let out = edgecost(cache.path(), &["compare", "alexnet", "nope.onnx", "resnet18", "--json"]);
    assert_eq!(out.status.code(), Some(2));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let models: Vec<&str> = v["models"].as_array().unwrap().iter().map(|m| m["model"].as_str().unwrap()).collect();
    assert_eq!(models, ["alexnet", "resnet18"]);
    assert_eq!(v["errors"][0]["model"], "nope.onnx");
}

#[test]
fn svg_has_one_point_per_model() {
    let names = ["alexnet", "squeezenet1.0", "mobilenetv2", "resnet50"];
    let cache = seeded_cache(&names);
    let svg_path = cache.path().join("plot.svg");
    let mut args = vec!["compare"];
    args.extend(names);
    args.extend(["--svg", svg_path.to_str().unwrap(), "--jobs", "2"]);
    let out = edgecost(cache.path(), &args);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = std::fs::read_to_string(&svg_path).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    let circles = doc.descendants().filter(|n| n.has_tag_name("circle")).count();
    assert_eq!(circles, names.len());
    for name in names {
        assert!(doc.descendants().any(|n| n.has_tag_name("title") && n.text().unwrap_or("").contains(name)));
    }
}

#[test]
fn profile_adds_bound_and_latency() {
    let cache = seeded_cache(&["vgg16"]);
    let out = edgecost(cache.path(), &["analyze", "vgg16", "--json", "--profile", "edge-npu"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["roofline"]["profile"], "edge-npu");
    assert!(["compute", "bandwidth"].contains(&v["roofline"]["bound"].as_str().unwrap()));
    let floor = v["roofline"]["latency_floor_s"].as_f64().unwrap();
    let compute = v["roofline"]["compute_time_s"].as_f64().unwrap();
    let transfer = v["roofline"]["transfer_time_s"].as_f64().unwrap();
    assert_eq!(floor, compute.max(transfer));
}

#[test]
fn unknown_profile_is_usage_error() {
    let cache = seeded_cache(&["alexnet"]);
    let out = edgecost(cache.path(), &["analyze", "alexnet", "--profile", "warp-drive"]);
    assert_eq!(out.status.code(), Some(64));
}

#[test]
fn bad_flags_are_usage_errors() {
    let cache = tempfile::tempdir().unwrap();
    assert_eq!(edgecost(cache.path(), &["analyze", "x.onnx", "--bogus"]).status.code(), Some(64));
    assert_eq!(edgecost(cache.path(), &["--input-shape", "1,0,2", "analyze", "x.onnx"]).status.code(), Some(64));
    assert_eq!(edgecost(cache.path(), &["--dtype", "fp8", "analyze", "x.onnx"]).status.code(), Some(64));
}

#[test]
fn input_shape_override_reaches_report() {
    let cache = seeded_cache(&["resnet18"]);
    let out = edgecost(cache.path(), &["analyze", "resnet18", "--json", "--input-shape", "2,3,160,160"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["input_shape"], serde_json::json!([2, 3, 160, 160]));
}

#[test]
fn profiles_listing() {
    let cache = tempfile::tempdir().unwrap();
    let out = edgecost(cache.path(), &["profiles", "--json"]);
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let names: Vec<&str> = v.as_array().unwrap().iter().map(|p| p["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"edge-npu") && names.contains(&"mobile-gpu"));
}

#[test]
fn output_is_deterministic() {
    let cache = seeded_cache(&["shufflenetv2", "googlenet", "densenet121"]);
    let args = ["compare", "shufflenetv2", "googlenet", "densenet121", "--json", "--jobs", "3"];
    let a = stdout(&edgecost(cache.path(), &args));
    let b = stdout(&edgecost(cache.path(), &args));
    assert_eq!(a, b);
}

#[test]
fn per_layer_csv_ends_with_total() {
    let cache = seeded_cache(&["alexnet"]);
    let out = edgecost(cache.path(), &["analyze", "alexnet", "--csv"]);
    let text = stdout(&out);
    assert!(text.starts_with("node,op,output_shape,"));
    assert!(text.lines().last().unwrap().starts_with("TOTAL,"));
}
