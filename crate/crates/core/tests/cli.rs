use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qrlong::io::{Cell, ReportDocument};

fn qrlong(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qrlong"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_panel(path: &Path) {
    let mut text = String::from("id,pain,treat,time\n");
    for i in 0..40 {
        let treat = (i % 2) as f64;
        for j in 0..4 {
            let time = 10.0 * j as f64;
            let noise = (((i * 7 + j * 13) % 11) as f64 - 5.0) / 5.0;
            let pain = 50.0 - 5.0 * treat + 0.3 * time - 0.2 * treat * time + noise;
            text.push_str(&format!("p{i},{pain},{treat},{time}\n"));
        }
    }
    text.push_str("p3,,1,40\n");
    fs::write(path, text).unwrap();
}

#[test]
fn fit_writes_report_and_warns_on_dropped_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("pain.csv");
    let out = dir.path().join("fit.csv");
    write_panel(&data);
    let o = qrlong(&[
        "fit", "--data", data.to_str().unwrap(), "--response", "pain", "--id", "id",
        "--covariates", "treat,time", "--interaction", "treat:time",
        "--tau", "0.25,0.5", "--method", "wi,pqr", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dropped 1"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("treat:time"));

    let doc = ReportDocument::from_csv(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc.rows.len(), 2 * 2 * 4);
    assert_eq!(doc.meta("dropped_rows"), Some("1"));
    assert_eq!(doc.meta("subjects"), Some("40"));
    let se = doc.values("se").unwrap();
    assert!(se.iter().all(|c| c.as_number().is_some_and(|v| v > 0.0)));
    let methods = doc.values("method").unwrap();
    assert!(methods.iter().any(|c| **c == Cell::text("PQR")));
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("pain.csv");
    write_panel(&data);
    let data = data.to_str().unwrap();

    let missing_column = qrlong(&["fit", "--data", data, "--response", "pain", "--id", "id", "--covariates", "dose"]);
    assert_eq!(missing_column.status.code(), Some(2));

    let bad_tau = qrlong(&["fit", "--data", data, "--response", "pain", "--id", "id", "--tau", "1.5"]);
    assert_eq!(bad_tau.status.code(), Some(2));

    let unknown_flag = qrlong(&["simulate", "--bogus"]);
    assert_eq!(unknown_flag.status.code(), Some(2));

    let absent = dir.path().join("absent.csv");
    let no_file = qrlong(&["fit", "--data", absent.to_str().unwrap(), "--response", "pain", "--id", "id"]);
    assert_eq!(no_file.status.code(), Some(3));

    let flat = dir.path().join("flat.csv");
    fs::write(&flat, "id,y,x\na,1,1\na,2,1\nb,3,1\nb,4,1\n").unwrap();
    let collinear = qrlong(&["fit", "--data", flat.to_str().unwrap(), "--response", "y", "--id", "id", "--covariates", "x"]);
    assert_eq!(collinear.status.code(), Some(3));
}

#[test]
fn simulate_is_reproducible_and_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("study.conf");
    fs::write(&config, "case = t\nrho = 0.9\nm = 40\nreps = 4\ntaus = 0.5\nseed = 99\n").unwrap();
    let run = |out: &Path| {
        qrlong(&[
            "simulate", "--config", config.to_str().unwrap(), "--rho", "0.1",
            "--methods", "wi,pqr", "--out", out.to_str().unwrap(),
        ])
    };
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    assert_eq!(run(&a).status.code(), Some(0));
    assert_eq!(run(&b).status.code(), Some(0));
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());

    let doc = ReportDocument::from_csv(&text).unwrap();
    assert_eq!(doc.meta("case"), Some("t"));
    assert_eq!(doc.meta("seed"), Some("99"));
    assert_eq!(doc.meta("m"), Some("40"));
    assert_eq!(doc.rows.len(), 2 * 3);
    let rho = doc.values("rho").unwrap();
    assert!(rho.iter().all(|c| c.as_number() == Some(0.1)));
}
