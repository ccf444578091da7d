use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn urbanflow(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_urbanflow"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

fn summary(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap().lines().last().unwrap_or_default().to_string()
}

fn write_graph(dir: &Path) -> (String, String) {
    let roads = dir.join("roads.csv");
    let edges = dir.join("edges.csv");
    let d = [10.0, 10.5, 9.5, 10.2, 30.0, 30.5, 29.5, 30.2];
    let mut r = String::from("road_id,density\n");
    for (i, v) in d.iter().enumerate() {
        r.push_str(&format!("{i},{v}\n"));
    }
    fs::write(&roads, r).unwrap();
    fs::write(&edges, "road_a,road_b\n0,1\n1,2\n2,3\n3,4\n4,5\n5,6\n6,7\n0,2\n5,7\n").unwrap();
    (roads.to_str().unwrap().into(), edges.to_str().unwrap().into())
}

#[test]
fn partition_writes_assignment() {
    let dir = tempfile::tempdir().unwrap();
    let (roads, edges) = write_graph(dir.path());
    let o = urbanflow(dir.path(), &["partition", "--roads", &roads, "--edges", &edges, "--regions", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = summary(&o);
    assert!(line.starts_with("command=partition status=ok roads=8 regions=2 depth=4"), "{line}");
    let csv = fs::read_to_string(dir.path().join("partition.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(labels.len(), 8);
    assert!(labels[..4].iter().all(|l| *l == labels[0]));
    assert!(labels[4..].iter().all(|l| *l == labels[4]));
    assert_ne!(labels[0], labels[4]);
}

#[test]
fn too_many_regions_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let (roads, edges) = write_graph(dir.path());
    let o = urbanflow(dir.path(), &["partition", "--roads", &roads, "--edges", &edges, "--regions", "9"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(summary(&o).contains("status=error code=1"));
}

#[test]
fn malformed_input_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("scatter.csv");
    fs::write(&bad, "region,density,flow\n0,1.0,oops\n").unwrap();
    let o = urbanflow(dir.path(), &["fit-mfd", "--scatter", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let missing = urbanflow(dir.path(), &["fit-mfd", "--scatter", "/nonexistent/scatter.csv"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(summary(&missing).contains("/nonexistent/scatter.csv"));
}

#[test]
fn short_collection_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let o = urbanflow(dir.path(), &["collect", "--config", "stress", "--cycles", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("data.csv").exists());
}

#[test]
fn deepc_without_data_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let o = urbanflow(dir.path(), &["run", "--config", "stress", "--controller", "deepc"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(summary(&o).contains("--data"));
}

#[test]
fn collect_then_fit() {
    let dir = tempfile::tempdir().unwrap();
    let o = urbanflow(dir.path(), &["collect", "--config", "stress"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(summary(&o).contains("pe=pass"));
    let scatter = dir.path().join("scatter.csv");
    let o = urbanflow(dir.path(), &["fit-mfd", "--scatter", scatter.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(dir.path().join("mfd_summary.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(dir.path().join("mfd_curve.csv").exists());
}

#[test]
fn baseline_run_and_constant_split_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let o = urbanflow(dir.path(), &["run", "--config", "stress", "--controller", "baseline"]);
    assert!(o.status.success());
    assert!(summary(&o).contains("gridlock=true"));
    let run = dir.path().join("run_baseline_p1");
    for f in ["cycles.csv", "state.csv", "inputs.csv", "summary.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    // fixed splits leave nothing for PCA to explain
    let o = urbanflow(dir.path(), &["analyze", "--config", "stress", "--run", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(summary(&o).contains("degenerate"));
}
