use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mixrrm"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// xorshift64*, enough for test data.
struct Gen(u64);

impl Gen {
    fn uniform(&mut self) -> f64 {
        self.0 ^= self.0 >> 12;
        self.0 ^= self.0 << 25;
        self.0 ^= self.0 >> 27;
        (self.0.wrapping_mul(0x2545_f491_4f6c_dd1d) >> 11) as f64 / (1u64 << 53) as f64
    }

    fn normal(&mut self) -> f64 {
        let (u, v) = (self.uniform().max(1e-300), self.uniform());
        (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
    }
}

/// Long file with columns id, cs, altern, choice, total_time, total_cost, ntt.
/// The time coefficient is -exp(ln 0.4 + 0.3 z), so `ntt = -total_time` has a
/// log-normal coefficient.
fn write_data(dir: &Path) -> PathBuf {
    let mut g = Gen(0x9e37_79b9_7f4a_7c15);
    let mut text = String::from("id,cs,altern,choice,total_time,total_cost,ntt\n");
    for id in 1..=80 {
        let b_time = -(0.4f64.ln() + 0.3 * g.normal()).exp();
        for cs in 1..=5 {
            let x: Vec<[f64; 2]> = (0..3).map(|_| [g.uniform() * 6.0, g.uniform() * 8.0]).collect();
            let beta = [b_time, -0.3];
            let regret: Vec<f64> = (0..3)
                .map(|i| {
                    (0..3)
                        .filter(|&j| j != i)
                        .map(|j| (0..2).map(|m| (beta[m] * (x[j][m] - x[i][m])).exp().ln_1p()).sum::<f64>())
                        .sum()
                })
                .collect();
            let e: Vec<f64> = regret.iter().map(|r| (-r).exp()).collect();
            let total: f64 = e.iter().sum();
            let u = g.uniform() * total;
            let chosen = if u < e[0] { 0 } else if u < e[0] + e[1] { 1 } else { 2 };
            for a in 0..3 {
                text += &format!(
                    "{id},{cs},{},{},{},{},{}\n",
                    a + 1,
                    u8::from(a == chosen),
                    x[a][0],
                    x[a][1],
                    -x[a][0]
                );
            }
        }
    }
    let path = dir.join("long.csv");
    fs::write(&path, text).unwrap();
    path
}

const COLUMNS: [&str; 8] = ["--id", "id", "--group", "cs", "--alternatives", "altern", "--choice", "choice"];

fn fit(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["fit", data.to_str().unwrap()];
    args.extend(COLUMNS);
    args.extend(["--nrep", "30", "-o", out.to_str().unwrap()]);
    args.extend(extra);
    run(&args)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_and_bad_arguments() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["fit", "--help"])), 0);
    assert_eq!(code(&run(&["fit"])), 1);
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&["fit", "x.csv", "--robust", "--cluster", "id"])), 1);
}

#[test]
fn missing_input_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fit(&dir.path().join("absent.csv"), &dir.path().join("f.json"), &["--fixed", "total_cost"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).starts_with("error:"));
}

#[test]
fn classical_fit_without_random_attributes() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let path = dir.path().join("c.json");
    let out = fit(&data, &path, &["--fixed", "total_time,total_cost", "--cluster", "id"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("Random regret minimization model"));
    assert!(stdout.contains("80 clusters"));
    let v = json(&path);
    assert_eq!(v["converged"], true);
    assert_eq!(v["covariance_kind"], "cluster");
    let names: Vec<&str> = v["estimates"].as_array().unwrap().iter().map(|e| e["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["total_time", "total_cost", "asc:2", "asc:3"]);
}

#[test]
fn mixed_fit_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let args = ["--fixed", "total_cost", "--rand", "total_time", "--noconstant"];
    assert_eq!(code(&fit(&data, &a, &args)), 0);
    let mut threaded = args.to_vec();
    threaded.extend(["--threads", "2"]);
    assert_eq!(code(&fit(&data, &b, &threaded)), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn iteration_limit_gives_exit_code_two_and_still_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let path = dir.path().join("f.json");
    let out = fit(&data, &path, &["--fixed", "total_cost", "--rand", "total_time", "--max-iter", "1"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("did not converge"));
    assert_eq!(json(&path)["converged"], false);
}

#[test]
fn predict_appends_probabilities() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let path = dir.path().join("f.json");
    assert_eq!(code(&fit(&data, &path, &["--fixed", "total_cost", "--rand", "total_time"])), 0);

    let pred = dir.path().join("pred.csv");
    let out = run(&["predict", data.to_str().unwrap(), "--fit", path.to_str().unwrap(), "-o", pred.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut reader = csv::Reader::from_path(&pred).unwrap();
    assert_eq!(reader.headers().unwrap().iter().last(), Some("pred_p"));
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 80 * 5 * 3);
    for sit in rows.chunks(3) {
        let total: f64 = sit.iter().map(|r| r[7].parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    // a file without the fitted attribute
    let other = dir.path().join("other.csv");
    fs::write(&other, "id,cs,altern,choice,total_cost\n1,1,1,1,2\n1,1,2,0,3\n").unwrap();
    let out = run(&["predict", other.to_str().unwrap(), "--fit", path.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn betas_writes_table_and_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let path = dir.path().join("f.json");
    assert_eq!(code(&fit(&data, &path, &["--fixed", "total_cost", "--rand", "total_time"])), 0);

    let saving = dir.path().join("betas.csv");
    let betas = |extra: &[&str]| {
        let mut args = vec!["betas", data.to_str().unwrap(), "--fit", path.to_str().unwrap()];
        args.extend(["--saving", saving.to_str().unwrap()]);
        args.extend(extra);
        run(&args)
    };
    let out = betas(&["--plot"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&saving).unwrap();
    assert_eq!(text.lines().next(), Some("id,total_time"));
    assert_eq!(text.lines().count(), 81);
    let svg = fs::read_to_string(dir.path().join("total_time_hist.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.contains("Frequency"));

    assert_eq!(code(&betas(&[])), 1);
    assert_eq!(code(&betas(&["--replace"])), 0);

    let classical = dir.path().join("c.json");
    assert_eq!(code(&fit(&data, &classical, &["--fixed", "total_time,total_cost"])), 0);
    let out = run(&[
        "betas",
        data.to_str().unwrap(),
        "--fit",
        classical.to_str().unwrap(),
        "--saving",
        dir.path().join("x.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("no random coefficients"));
}

#[test]
fn lognormal_summary_of_a_negated_attribute() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path());
    let path = dir.path().join("f.json");
    let out = fit(&data, &path, &["--fixed", "total_cost", "--rand", "ntt", "--ln", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let out = run(&["lognormal", "--fit", path.to_str().unwrap(), "ntt", "--json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let median = v["median"]["value"].as_f64().unwrap();
    let mean = v["mean"]["value"].as_f64().unwrap();
    assert!(median > 0.0 && mean >= median);

    let out = run(&["lognormal", "--fit", path.to_str().unwrap(), "ntt", "--negate"]);
    assert_eq!(code(&out), 0);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("sign reversed"));
    assert!(table.contains("median") && table.contains("sd"));

    let out = run(&["lognormal", "--fit", path.to_str().unwrap(), "total_cost"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn reshape_and_draws() {
    let dir = tempfile::tempdir().unwrap();
    let wide = dir.path().join("wide.csv");
    fs::write(&wide, "id,cs,tt1,tt2,tc1,tc2,choice\n1,1,10,20,3,1,2\n1,2,15,12,2,2,1\n").unwrap();
    let long = dir.path().join("long.csv");
    let out = run(&[
        "reshape",
        wide.to_str().unwrap(),
        "-o",
        long.to_str().unwrap(),
        "--stub",
        "total_time=tt",
        "--stub",
        "total_cost=tc",
        "--ids",
        "id,cs",
        "--alternatives",
        "2",
        "--choice",
        "choice",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut reader = csv::Reader::from_path(&long).unwrap();
    let headers = reader.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let chosen: Vec<&str> = rows.iter().map(|r| &r[col("choice")]).collect();
    assert_eq!(chosen, ["0", "1", "1", "0"]);
    assert_eq!(&rows[1][col("total_time")], "20");

    let out = run(&["draws", "--individuals", "3", "--dims", "2", "--nrep", "4"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 2 * 4);
}
