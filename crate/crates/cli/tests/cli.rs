use std::path::Path;
use std::process::{Command, Output};

fn cremem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cremem")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("valid JSON")
}

const TABLE: [[u64; 5]; 10] = [
    [2, 2, 2, 2, 2],
    [8, 8, 16, 16, 64],
    [20, 90, 342, 342, 5256],
    [8, 18, 36, 36, 144],
    [8, 8, 16, 16, 64],
    [3, 3, 3, 3, 3],
    [9, 9, 19, 17, 71],
    [21, 91, 352, 343, 5311],
    [9, 19, 40, 37, 154],
    [9, 9, 19, 17, 71],
];

#[test]
fn param_count_prints_the_ten_by_five_table() {
    let v = json(&cremem(&["param-count", "--designs", "M1..M5", "--families", "all"]));
    assert_eq!(v["schema"], "cremem.param-count.v1");
    let counts: Vec<Vec<u64>> = serde_json::from_value(v["counts"].clone()).unwrap();
    assert_eq!(counts, TABLE.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
    assert_eq!(v["config"]["mode"], "param_count");
}

fn write_toy(dir: &Path) -> String {
    let mut csv = String::from("y,PT,SM,Am\n");
    let mut k = 0u32;
    for p in 0..8 {
        for s in 0..6 {
            for (m, lvl) in ["a", "b"].iter().enumerate() {
                k += 1;
                let noise = (k.wrapping_mul(2654435761) % 1000) as f64 / 1000.0 - 0.5;
                let y = 0.3 * p as f64 - 0.2 * s as f64 + 0.4 * m as f64 + noise;
                csv.push_str(&format!("{y},P{p},S{s},{lvl}\n"));
            }
        }
    }
    let path = dir.join("d.csv");
    std::fs::write(&path, csv).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn fit_emits_the_documented_keys() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_toy(dir.path());
    let args = ["fit", "--data", &data, "--formula", "y ~ Am + (1|PT|Am) + (1|SM)", "--family", "ganova"];
    let v = json(&cremem(&args));
    for key in ["theta", "beta", "sigma2", "deviance", "anova"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["anova"].as_array().unwrap().len(), 1);
    assert_eq!(v["anova"][0]["effect"], "Am");

    let mut text_args = args.to_vec();
    text_args.extend(["--format", "text"]);
    let out = cremem(&text_args);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("Type III tests"));
}

#[test]
fn simulate_null_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    let mut runs = Vec::new();
    for threads in ["1", "2"] {
        let out = cremem(&[
            "simulate-null", "--design", "M1", "--replicates", "40", "--family", "ganova", "--seed", "7",
            "--threads", threads, "--output", path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        runs.push(std::fs::read(&path).unwrap());
    }
    let [a, b] = &runs[..] else { unreachable!() };
    let strip = |bytes: &[u8]| {
        let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
        v["config"]["threads"] = serde_json::Value::Null;
        v
    };
    assert_eq!(strip(a), strip(b));
    let out = cremem(&[
        "simulate-null", "--design", "M1", "--replicates", "40", "--family", "ganova", "--seed", "7",
        "--threads", "2", "--output", path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(&std::fs::read(&path).unwrap(), b);
    let v: serde_json::Value = serde_json::from_slice(a).unwrap();
    assert_eq!(v["schema"], "cremem.sim-report.v1");
    assert_eq!(v["config"]["gen"]["seed"], 7);
}

#[test]
fn simulate_null_csv_columns() {
    let out = cremem(&["simulate-null", "--replicates", "2", "--family", "ri", "--format", "csv", "--threads", "1"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "structure,include_ps,effect,rate,ci_low,ci_high,n_used,conv_fail_rate"
    );
}

#[test]
fn config_errors_exit_with_two() {
    assert_eq!(cremem(&["param-count", "--families", "nope"]).status.code(), Some(2));
    assert_eq!(cremem(&["simulate-null", "--design", "M3", "--replicates", "1"]).status.code(), Some(2));
    assert_eq!(cremem(&["no-such-command"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"mode":"fit_data"}"#).unwrap();
    assert_eq!(cremem(&["run", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_three() {
    let out = cremem(&["fit", "--data", "/nonexistent/d.csv", "--formula", "y ~ Am + (1|PT) + (1|SM)"]);
    assert_eq!(out.status.code(), Some(3));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    std::fs::write(&path, "y,PT,SM,Am\n1,a,x,u\n,a,y,v\n").unwrap();
    let out = cremem(&["fit", "--data", path.to_str().unwrap(), "--formula", "y ~ Am + (1|PT) + (1|SM)"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing value"));
}

#[test]
fn run_executes_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"mode":"param_count","designs":["M1","M4"],"family":"gANOVA+"}"#).unwrap();
    let v = json(&cremem(&["run", cfg.to_str().unwrap()]));
    assert_eq!(v["counts"], serde_json::json!([[9, 17]]));
}
