//! Black-box tests of the `mixprec` binary: flows, flag precedence, and
//! the documented exit codes (0 success, 2 infeasible, 3 invalid input).

use std::path::Path;
use std::process::{Command, Output};

fn mixprec(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mixprec"));
    cmd.args(args);
    // The test runner environment must not leak into precedence checks.
    cmd.env_remove("MIXPREC_OUT_DIR");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn mixprec")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_code(out: &Output, want: i32) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "stdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

#[test]
fn help_and_version_exit_zero() {
    assert_code(&mixprec(&["--help"], &[]), 0);
    assert_code(&mixprec(&["--version"], &[]), 0);
    assert_code(&mixprec(&["allocate", "--help"], &[]), 0);
}

#[test]
fn unknown_flag_is_invalid_input() {
    assert_code(&mixprec(&["--bogus"], &[]), 3);
    assert_code(&mixprec(&["gen-traces", "--fraction", "1/3"], &[]), 3);
}

#[test]
fn full_flow_and_deterministic_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = out_dir.to_str().unwrap();
    let fast = ["--samples", "16"];

    let gen = mixprec(
        &[&["gen-traces", "--out-dir", out][..], &fast[..]].concat(),
        &[],
    );
    assert_code(&gen, 0);
    assert!(stdout(&gen).contains("samples 16, seed 7"));
    assert!(out_dir.join("trace/manifest.json").is_file());
    assert!(out_dir.join("trace/trace.bin").is_file());

    assert_code(&mixprec(&["orm", "--out-dir", out], &[]), 0);
    assert!(out_dir.join("orm_report.txt").is_file());

    assert_code(&mixprec(&["aggregate", "--out-dir", out], &[]), 0);

    let allocate = |dir: &Path| {
        mixprec(
            &[
                "allocate",
                "--trace-dir",
                out_dir.join("trace").to_str().unwrap(),
                "--out-dir",
                dir.to_str().unwrap(),
                "--budget-uniform-bits",
                "4",
            ],
            &[],
        )
    };
    assert_code(&allocate(&out_dir), 0);
    let again = tmp.path().join("again");
    assert_code(&allocate(&again), 0);
    for name in ["importance.txt", "allocation.txt", "allocation.json"] {
        assert_eq!(
            std::fs::read(out_dir.join(name)).unwrap(),
            std::fs::read(again.join(name)).unwrap(),
            "{name} differs between identical allocate runs"
        );
    }

    let eval = mixprec(
        &[
            &[
                "quantize-eval",
                "--out-dir",
                out,
                "--allocation",
                out_dir.join("allocation.json").to_str().unwrap(),
            ][..],
            &fast[..],
        ]
        .concat(),
        &[],
    );
    assert_code(&eval, 0);
    assert!(stdout(&eval).contains("mixed"));
    assert!(out_dir.join("eval.txt").is_file());
}

#[test]
fn infeasible_budget_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_code(
        &mixprec(&["gen-traces", "--out-dir", out, "--samples", "8"], &[]),
        0,
    );
    let alloc = mixprec(&["allocate", "--out-dir", out, "--budget-bits", "700"], &[]);
    assert_code(&alloc, 2);
    assert!(stderr(&alloc).contains("infeasible"));
}

#[test]
fn conflicting_budget_flags_exit_three() {
    let out = mixprec(
        &["allocate", "--budget-bits", "100", "--budget-mb", "1"],
        &[],
    );
    assert_code(&out, 3);
    assert!(stderr(&out).contains("exactly one"));
}

#[test]
fn missing_trace_exits_three_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mixprec(
        &[
            "orm",
            "--trace-dir",
            tmp.path().join("nope").to_str().unwrap(),
            "--out-dir",
            tmp.path().to_str().unwrap(),
        ],
        &[],
    );
    assert_code(&out, 3);
    assert!(stderr(&out).contains("nope"));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("mixprec.toml");
    std::fs::write(
        &cfg,
        format!(
            "samples = 8\nseed = 11\nout_dir = \"{}\"\n",
            tmp.path().join("from-file").display()
        ),
    )
    .unwrap();
    let cfg_flag = ["--config", cfg.to_str().unwrap()];

    let from_file = mixprec(&[&["gen-traces"][..], &cfg_flag[..]].concat(), &[]);
    assert_code(&from_file, 0);
    assert!(stdout(&from_file).contains("samples 8, seed 11"));
    assert!(tmp.path().join("from-file/trace/trace.bin").is_file());

    let flag_wins = mixprec(
        &[&["gen-traces", "--seed", "13"][..], &cfg_flag[..]].concat(),
        &[],
    );
    assert_code(&flag_wins, 0);
    assert!(stdout(&flag_wins).contains("samples 8, seed 13"));
}

#[test]
fn env_var_overrides_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let env_dir = tmp.path().join("from-env");
    let out = mixprec(
        &["gen-traces", "--samples", "8"],
        &[("MIXPREC_OUT_DIR", env_dir.to_str().unwrap())],
    );
    assert_code(&out, 0);
    assert!(env_dir.join("trace/trace.bin").is_file());

    // An explicit flag still wins over the environment.
    let flag_dir = tmp.path().join("from-flag");
    let out = mixprec(
        &[
            "gen-traces",
            "--samples",
            "8",
            "--out-dir",
            flag_dir.to_str().unwrap(),
        ],
        &[("MIXPREC_OUT_DIR", env_dir.to_str().unwrap())],
    );
    assert_code(&out, 0);
    assert!(flag_dir.join("trace/trace.bin").is_file());
}

#[test]
fn unknown_config_key_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "bogus_key = 3\n").unwrap();
    let out = mixprec(&["gen-traces", "--config", cfg.to_str().unwrap()], &[]);
    assert_code(&out, 3);
    assert!(stderr(&out).contains("bogus_key"));
}

#[test]
fn sampling_study_runs_with_reduced_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mixprec(
        &[
            "sampling-study",
            "--out-dir",
            tmp.path().to_str().unwrap(),
            "--samples",
            "8",
            "--seeds",
            "3",
            "--fractions",
            "1,1/4",
        ],
        &[],
    );
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(
        text.contains("mode mean"),
        "study defaults to mean mode:\n{text}"
    );
    assert!(text.contains("3 seeds"));
    assert!(tmp.path().join("sampling_study.txt").is_file());
}
