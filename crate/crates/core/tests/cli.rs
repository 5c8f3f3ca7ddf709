use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn mtesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtesim"))
        .args(args)
        .env_remove("MTESIM_SEED")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn intra_overflow_report_matches_golden() {
    let trace = data("intra.mtr");
    let out = mtesim(&["run", trace.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(code(&out), 1);
    let golden = fs::read_to_string(data("intra.report.json")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), golden);
}

#[test]
fn no_tripwires_misses_the_intra_overflow() {
    let trace = data("intra.mtr");
    let out = mtesim(&["run", trace.to_str().unwrap(), "--no-tripwires"]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout_json(&out)["outcome"], "CleanHalt");
}

#[test]
fn benign_trace_is_clean_in_every_mode() {
    let trace = data("benign.mtr");
    for mode in ["off", "async", "sync"] {
        let out = mtesim(&["run", trace.to_str().unwrap(), "--mode", mode]);
        assert_eq!(code(&out), 0, "{mode}");
        let v = stdout_json(&out);
        assert_eq!(v["config"]["mode"], mode);
        let c = &v["counters"];
        assert!(c["traps_delivered"].as_u64() <= c["faults_delivered"].as_u64());
    }
}

#[test]
fn usage_and_parse_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.mtr");
    fs::write(&bad, "mov r0 1\nld r0 [r1, #0] w3 p1\nhalt\n").unwrap();
    let out = mtesim(&["run", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("line 2") && err.contains("invalid width 3"), "{err}");

    assert_eq!(code(&mtesim(&["run", "/nonexistent/x.mtr"])), 2);
    assert_eq!(code(&mtesim(&["run"])), 2);
    assert_eq!(code(&mtesim(&["run", bad.to_str().unwrap(), "--mode", "fast"])), 2);
}

#[test]
fn report_flag_writes_file() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("r.json");
    let trace = data("intra.mtr");
    let out = mtesim(&["run", trace.to_str().unwrap(), "--report", report.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(out.stdout.is_empty());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(v["bug"]["kind"], "IntraGranuleOverflow");
}

#[test]
fn seed_env_is_a_fallback() {
    let trace = data("intra.mtr");
    let run = |env: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mtesim"));
        cmd.args(["run", trace.to_str().unwrap()]).env_remove("MTESIM_SEED");
        if let Some(e) = env {
            cmd.env("MTESIM_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        serde_json::from_slice::<serde_json::Value>(&cmd.output().unwrap().stdout).unwrap()["config"]["seed"].clone()
    };
    assert_eq!(run(Some("11"), None), 11);
    assert_eq!(run(Some("11"), Some("5")), 5);
    assert_eq!(run(None, None), 0);
}

fn gen(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["gen", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    mtesim(&args)
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        assert_eq!(code(&gen(d, &["--kind", "intra", "--count", "100", "--seed", "7"])), 0);
    }
    let fa = read_dir_sorted(&a.path().join("intra"));
    assert_eq!(fa.len(), 101);
    assert_eq!(fa, read_dir_sorted(&b.path().join("intra")));
    let manifest: serde_json::Value = serde_json::from_slice(&fa.last().unwrap().1).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["count"], 100);

    // Every generated program is flagged when run.
    for (name, _) in fa.iter().filter(|(n, _)| n.ends_with(".mtr")).take(10) {
        let path = a.path().join("intra").join(name);
        assert_eq!(code(&mtesim(&["run", path.to_str().unwrap()])), 1, "{name}");
    }
}

#[test]
fn gen_sizes_restrict_allocations() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(tmp.path(), &["--kind", "benign", "--count", "20", "--sizes", "24:1,40:1"])), 0);
    for (name, bytes) in read_dir_sorted(&tmp.path().join("benign")) {
        if !name.ends_with(".mtr") {
            continue;
        }
        for line in String::from_utf8(bytes).unwrap().lines().filter(|l| l.starts_with("alloc")) {
            let size = line.split_whitespace().nth(2).unwrap();
            assert!(size == "24" || size == "40", "{line}");
        }
    }
}

#[test]
fn gen_rejects_impossible_specs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gen(tmp.path(), &["--kind", "intra", "--sizes", "32:1"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8(out.stderr).unwrap().contains("multiple of 16"));

    let file = tmp.path().join("plain-file");
    fs::write(&file, "").unwrap();
    assert_eq!(code(&gen(&file, &["--kind", "benign"])), 2);
}

#[test]
fn exp_outputs_are_reproducible() {
    let args = ["exp", "detection", "--kind", "uaf", "--reuse-cycles", "1", "--trials", "200", "--seed", "4"];
    let a = mtesim(&args);
    let b = mtesim(&args);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let v = stdout_json(&a);
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["name", "trials", "detected", "rate", "wilson_95_ci", "config_echo"]);
    let (lo, hi) = (v["wilson_95_ci"][0].as_f64().unwrap(), v["wilson_95_ci"][1].as_f64().unwrap());
    let rate = v["rate"].as_f64().unwrap();
    assert!(lo <= rate && rate <= hi);
}

#[test]
fn exp_collision_and_overhead() {
    let v = stdout_json(&mtesim(&["exp", "collision", "--trials", "2000", "--exclude", "1,2,3,4,5,6,7,8,9,10,11,12,13,14"]));
    assert_eq!(v["rate"], 1.0);
    let v = stdout_json(&mtesim(&["exp", "overhead"]));
    assert!((v["tag_storage_overhead"].as_f64().unwrap() - 1.0 / 33.0).abs() < 1e-15);
    let v = stdout_json(&mtesim(&["exp", "overhead", "--granule", "1"]));
    assert!((v["tag_storage_overhead"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn exp_transparency_on_a_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(tmp.path(), &["--kind", "benign", "--count", "50"])), 0);
    let dir = tmp.path().join("benign");
    let out = mtesim(&["exp", "transparency", "--corpus", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout_json(&out)["passed"], true);

    let out = mtesim(&["exp", "transparency", "--trials", "0"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8(out.stderr).unwrap().contains("warning"));
}
