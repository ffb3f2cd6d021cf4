//! Binary-level checks: the determinism criterion, the exit-code contract,
//! and the construct -> dim round trip.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use freedim::experiments::ExperimentConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_freedim"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("freedim-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg.to_json()).unwrap()).unwrap();
    path
}

fn simulate(kind: &str, config: &Path, seed: u64, out: &Path) -> Output {
    run(&[
        "simulate",
        kind,
        "--config",
        config.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
    ])
}

fn csv_of(dir: &Path) -> Vec<u8> {
    std::fs::read(dir.join("result.csv")).expect("result.csv written")
}

#[test]
fn criterion_12_determinism() {
    let root = scratch("determinism");
    let mut small_decay = ExperimentConfig::default_decay();
    small_decay.grid = vec![16, 32];
    small_decay.trials = 8;
    let mut small_conc = ExperimentConfig::default_concentration();
    small_conc.grid = vec![16];
    small_conc.trials = 10;
    let mut small_asfree = ExperimentConfig::default_asfree();
    small_asfree.grid = vec![16];
    small_asfree.trials = 4;
    small_asfree.m = 2;
    let mut small_polar = ExperimentConfig::default_polar_compare();
    small_polar.grid = vec![16];
    small_polar.trials = 30;

    let cases: [(&str, &ExperimentConfig); 4] = [
        ("decay", &small_decay),
        ("concentration", &small_conc),
        ("asfree", &small_asfree),
        ("polar-compare", &small_polar),
    ];

    let mut ok = true;
    let mut detail = String::new();
    for (kind, cfg) in cases {
        let dir = root.join(kind);
        std::fs::create_dir_all(&dir).unwrap();
        let config = write_config(&dir, cfg);
        let out_a = dir.join("a");
        let out_b = dir.join("b");
        let ra = simulate(kind, &config, 11, &out_a);
        let rb = simulate(kind, &config, 11, &out_b);
        if code(&ra) != 0 || code(&rb) != 0 {
            ok = false;
            detail = format!(
                "{kind}: nonzero exit ({}, {}): {}",
                code(&ra),
                code(&rb),
                String::from_utf8_lossy(&ra.stderr)
            );
            break;
        }
        let a = csv_of(&out_a);
        let b = csv_of(&out_b);
        if a != b {
            ok = false;
            detail = format!("{kind}: same seed produced different result.csv bytes");
            break;
        }
        if a.is_empty() || !a.starts_with(b"k,trial,label,value\n") {
            ok = false;
            detail = format!("{kind}: result.csv missing or malformed");
            break;
        }
        let out_c = dir.join("c");
        let rc = simulate(kind, &config, 12, &out_c);
        if code(&rc) != 0 || csv_of(&out_c) == a {
            ok = false;
            detail = format!("{kind}: a different seed did not change the samples");
            break;
        }
    }

    println!(
        "criterion 12: {} - {}",
        if ok { "pass" } else { "fail" },
        if ok {
            "rerunning each simulate kind with the same seed reproduces result.csv byte-for-byte"
        } else {
            detail.as_str()
        }
    );
    assert!(ok, "criterion 12 failed: {detail}");
}

#[test]
fn dim_group_prints_exact_report() {
    let out = run(&[
        "dim",
        "group",
        "--expr",
        "(amalgam (cyclic 2) (cyclic 3) over trivial)",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["beta1"], "1/6");
    assert_eq!(v["delta0"], "7/6");
    assert_eq!(v["deltaStar"], "7/6");
}

#[test]
fn construct_then_dim_round_trip() {
    let dir = scratch("roundtrip");
    let out = run(&[
        "construct",
        "bs",
        "--s",
        "3/2",
        "--tol",
        "1/1000000",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("sequence.json").is_file());
    assert!(dir.join("report.json").is_file());

    let expr = dir.join("expr.vn");
    std::fs::write(
        &expr,
        "(amalgam-vn (diffuse) (diffuse) over (hyperfinite sequence.json))\n",
    )
    .unwrap();
    let out = run(&["dim", "vn", "--file", expr.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["delta0"], "3/2");
}

#[test]
fn exit_codes_follow_the_contract() {
    // 1: syntax error in the expression
    let out = run(&["dim", "group", "--expr", "(cyclic"]);
    assert_eq!(code(&out), 1);

    // 1: missing referenced document
    let out = run(&["dim", "vn", "--expr", "(hyperfinite no-such-file.json)"]);
    assert_eq!(code(&out), 1);

    // 2: rule inapplicable (amalgam base with nonvanishing first invariant)
    let out = run(&[
        "dim",
        "group",
        "--expr",
        "(amalgam (free-group 2) (free-group 3) over (free-group 4))",
    ]);
    assert_eq!(code(&out), 2, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // 2: construction parameter out of range
    let out = run(&["construct", "bs", "--s", "5/2", "--tol", "1/1000000"]);
    assert_eq!(code(&out), 2);

    // 3: term budget too small to certify the tolerance
    let out = run(&[
        "construct",
        "bs",
        "--s",
        "7/4",
        "--tol",
        "1/1000000000000",
        "--max-terms",
        "2",
    ]);
    assert_eq!(code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // 4: config schema violation
    let dir = scratch("badconfig");
    let mut cfg = ExperimentConfig::default_decay();
    cfg.trials = 0;
    let config = write_config(&dir, &cfg);
    let out = simulate("decay", &config, 1, &dir.join("out"));
    assert_eq!(code(&out), 4, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // 4: no seed anywhere
    let good = ExperimentConfig::default_decay();
    let config = write_config(&dir, &good);
    let out = run(&[
        "simulate",
        "decay",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.join("out2").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}
