use std::path::Path;
use std::process::{Command, Output};

const HEADER: &str = "solver,n,sz,P,repeat,runtime_s,points,bytes_per_point,achieved_gbps,pct_peak";

fn tds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tds"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<csv::StringRecord>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r.records().map(Result::unwrap).collect();
    (header, rows)
}

#[test]
fn bench_writes_schema_stable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let o = tds(&[
        "bench",
        "--nx",
        "128",
        "--ny",
        "8",
        "--nz",
        "8",
        "--sz",
        "4",
        "--solver",
        "distd2",
        "--ranks",
        "2",
        "--cyclic",
        "--peak-gbps",
        "1000",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&out);
    assert_eq!(header.join(","), HEADER);
    assert!(rows.len() >= 3);
    for row in &rows {
        assert_eq!(&row[0], "distd2");
        assert_eq!(&row[3], "2");
        assert_eq!(row[6].parse::<usize>().unwrap(), 128 * 64);
        let pct: f64 = row[9].parse().unwrap();
        assert!(pct > 0.0 && pct <= 110.0);
    }
}

#[test]
fn every_solver_runs() {
    for solver in [
        "thomas",
        "periodic_thomas",
        "pdd",
        "modified_thomas",
        "distd2",
    ] {
        let o = tds(&[
            "bench", "--nx", "64", "--ny", "8", "--nz", "8", "--solver", solver,
        ]);
        assert!(
            o.status.success(),
            "{solver}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        let text = String::from_utf8(o.stdout).unwrap();
        assert_eq!(text.lines().next(), Some(HEADER));
        assert!(text.lines().skip(1).all(|l| l.starts_with(solver)));
    }
}

#[test]
fn config_errors_exit_two() {
    assert_eq!(tds(&["bench", "--repeats", "2"]).status.code(), Some(2));
    assert_eq!(tds(&["bench", "--solver", "cr"]).status.code(), Some(2));
    assert_eq!(
        tds(&["bench", "--nx", "64", "--ny", "3", "--nz", "3"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(tds(&["bench", "--sz", "0"]).status.code(), Some(2));
    assert_eq!(tds(&["bench", "--peak-gbps", "-1"]).status.code(), Some(2));
}

#[test]
fn padding_accepts_ragged_transverse_size() {
    let o = tds(&[
        "bench", "--nx", "64", "--ny", "3", "--nz", "3", "--pad", "--solver", "thomas",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn implausible_bandwidth_exits_three() {
    let o = tds(&[
        "bench",
        "--nx",
        "64",
        "--ny",
        "8",
        "--nz",
        "8",
        "--peak-gbps",
        "1e-9",
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn accuracy_table_and_order() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("acc.csv");
    let o = tds(&["accuracy", "--ranks", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&out);
    assert_eq!(
        header.join(","),
        "n,thomas_error,distd2_error,max_abs_diff,max_dropped"
    );
    let ns: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(ns, ["32", "64", "128", "256"]);
    let stderr = String::from_utf8(o.stderr).unwrap();
    let slope: f64 = stderr
        .lines()
        .find_map(|l| l.strip_prefix("fitted order "))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((slope - 6.0).abs() <= 0.2, "{slope}");
}

#[test]
fn scaling_reports_rounds() {
    let o = tds(&[
        "scaling", "--nx", "128", "--ny", "8", "--nz", "8", "--ranks", "4", "--cyclic",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stderr = String::from_utf8(o.stderr).unwrap();
    assert!(stderr.contains("P=1   efficiency 100.0%"), "{stderr}");
    assert!(stderr.contains("P=4") && stderr.contains("rounds/solve 2"));
}

#[test]
fn pde_smoke_at_sixteen() {
    let o = tds(&["pde", "--nx", "16", "--ny", "16", "--nz", "16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stderr = String::from_utf8(o.stderr).unwrap();
    assert!(
        stderr.contains("ledger 171 units, reorder 7.0% (cpu model 12.0%)"),
        "{stderr}"
    );
    assert!(stderr.contains("(pass)"));
}
