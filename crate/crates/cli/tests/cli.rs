use std::process::{Command, Output};

fn padre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_padre")).args(args).env_remove("PADRE_SEED").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn verify_is_green_with_one_line_per_suite() {
    let out = padre(&["verify"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let suites: Vec<&str> = text.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert_eq!(suites.len(), 8);
    assert!(suites.iter().all(|l| l.starts_with("PASS")));
    let grads = text.lines().filter(|l| l.starts_with('{')).count();
    assert_eq!(grads, 4);
}

#[test]
fn each_equivalence_scheme_emits_one_record() {
    for scheme in ["sima", "conv2former", "hyena", "mamba", "castling", "attn-approx"] {
        let out = padre(&["verify", "equivalence", "--scheme", scheme]);
        assert_eq!(out.status.code(), Some(0), "{scheme}");
        let text = stdout(&out);
        assert_eq!(text.lines().count(), 1);
        let record: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(record["scheme"], scheme);
        assert_eq!(record["pass"], true);
        assert!(record["max_deviation"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn expand_dump_respects_degree() {
    let out = padre(&["expand", "--n", "2", "--d", "2", "--channels", "2", "--degree", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(!text.is_empty());
    for line in text.lines() {
        let parts: Vec<&str> = line.split(" | ").collect();
        assert_eq!(parts.len(), 3, "{line}");
        let total: u32 = parts[1]
            .trim_start_matches("k=")
            .split_whitespace()
            .map(|f| f.rsplit('^').next().unwrap().parse::<u32>().unwrap())
            .sum();
        assert!((1..=2).contains(&total), "{line}");
    }
}

#[test]
fn approx_attn_error_column_decreases() {
    let out = padre(&["approx-attn", "--max-degree", "12"]);
    assert_eq!(out.status.code(), Some(0));
    let errors: Vec<f64> = stdout(&out).lines().skip(1).map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(errors.len(), 13);
    assert!(errors.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn gradcheck_emits_json_lines() {
    let out = padre(&["gradcheck", "--seed", "4"]);
    assert_eq!(out.status.code(), Some(0));
    for line in stdout(&out).lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["seed"], 4);
        assert_eq!(v["probes"], 200);
        assert_eq!(v["pass"], true);
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(padre(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(padre(&["bench", "--schemes", "nope"]).status.code(), Some(2));
    assert_eq!(padre(&["bench", "--reps", "2", "--n-list", "8"]).status.code(), Some(2));
    assert_eq!(padre(&["expand", "--n", "2", "--d", "3", "--channels", "2", "--degree", "2"]).status.code(), Some(2));
    assert_eq!(padre(&["verify", "equivalence", "--scheme", "performer"]).status.code(), Some(2));
}

#[test]
fn bench_writes_records_and_fits() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("sweep.csv");
    let out = Command::new(env!("CARGO_BIN_EXE_padre"))
        .args(["bench", "--schemes", "padre,sima", "--degree", "3", "--n-list", "16,32,64,128", "--channels", "8", "--reps", "5"])
        .args(["--seed", "1", "--out"])
        .arg(&out_path)
        .env("PADRE_SEED", "7")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let records = std::fs::read_to_string(&out_path).unwrap();
    let mut lines = records.lines();
    assert_eq!(lines.next(), Some("scheme,N,D,d,flops,median_s,p10_s,p90_s,reps,seed"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r[9] == "7"));
    assert_eq!(rows[0][0], "padre-3");
    let fits = std::fs::read_to_string(dir.path().join("sweep.fits.csv")).unwrap();
    assert_eq!(fits.lines().count(), 3);
}
