//! End-to-end checks of the binary: file emission, determinism, exit codes
//! and the seed override.

use std::path::{Path, PathBuf};
use std::process::Command;

fn nplab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nplab"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("nplab-cli-test-{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn tiny_pinn_config(out: &Path) -> String {
    format!(
        "[method]\nname=pinn\n[problem]\nname=eikonal\n[training]\nepochs=5\nseed=3\ninterior=32\ninitial=8\nboundary=8\n[output]\npath={}\n",
        out.display()
    )
}

#[test]
fn run_writes_the_three_files_and_is_deterministic() {
    let dir = workdir("deterministic");
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    let cfg_a = write_config(&dir, "a.cfg", &tiny_pinn_config(&out_a));
    let cfg_b = write_config(&dir, "b.cfg", &tiny_pinn_config(&out_b));

    for cfg in [&cfg_a, &cfg_b] {
        let st = nplab()
            .args(["run", cfg.to_str().unwrap(), "--threads", "1"])
            .status()
            .unwrap();
        assert!(st.success());
    }
    let csv_a = std::fs::read(out_a.with_extension("csv")).unwrap();
    let csv_b = std::fs::read(out_b.with_extension("csv")).unwrap();
    assert!(!csv_a.is_empty());
    assert_eq!(csv_a, csv_b, "identical config + seed must emit identical bytes");

    let params_a = std::fs::read(out_a.with_extension("params")).unwrap();
    let params_b = std::fs::read(out_b.with_extension("params")).unwrap();
    assert_eq!(params_a, params_b);

    let json = std::fs::read_to_string(out_a.with_extension("json")).unwrap();
    assert!(json.contains("\"status\": \"ok\""));
    assert!(json.contains("\"seed\": 3"));

    // snapshot is readable and carries the magic
    let named = nplab_core::snapshot::read_named(&out_a.with_extension("params")).unwrap();
    assert!(named.iter().any(|(n, _)| n == "dense0.w"));
}

#[test]
fn zero_epochs_emit_one_initialisation_row() {
    let dir = workdir("zero-epochs");
    let out = dir.join("z");
    let cfg = write_config(
        &dir,
        "z.cfg",
        &format!(
            "[method]\nname=pinn\n[problem]\nname=eikonal\n[training]\nepochs=0\nseed=1\ninterior=16\ninitial=4\nboundary=4\n[output]\npath={}\n",
            out.display()
        ),
    );
    let st = nplab().args(["run", cfg.to_str().unwrap()]).status().unwrap();
    assert!(st.success());
    let csv = std::fs::read_to_string(out.with_extension("csv")).unwrap();
    let epochs: std::collections::BTreeSet<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(epochs.len(), 1);
    assert!(epochs.contains("0"));
}

#[test]
fn parse_errors_exit_with_code_2() {
    let dir = workdir("parse-error");
    let cfg = write_config(
        &dir,
        "bad.cfg",
        "[method]\nname=pinn\n[problem]\nname=eikonal\n[training]\nepochs=-5\nseed=1\n",
    );
    let output = nplab().args(["run", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("line 6"), "stderr: {stderr}");
}

#[test]
fn diverged_runs_exit_with_code_3() {
    // an absurd learning rate reliably blows the loss up to non-finite
    let dir = workdir("diverged");
    let out = dir.join("d");
    let cfg = write_config(
        &dir,
        "d.cfg",
        &format!(
            "[method]\nname=pinn\n[problem]\nname=burgers\n[training]\nepochs=400\nseed=1\ninterior=64\ninitial=8\nboundary=8\nschedule=constant:1e12\n[output]\npath={}\n",
            out.display()
        ),
    );
    let output = nplab().args(["run", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(output.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let json = std::fs::read_to_string(out.with_extension("json")).unwrap();
    assert!(json.contains("diverged"));
}

#[test]
fn nplab_seed_overrides_config_seed() {
    let dir = workdir("env-seed");
    let out_cfg = dir.join("cfgseed");
    let out_env = dir.join("envseed");
    let cfg1 = write_config(&dir, "c1.cfg", &tiny_pinn_config(&out_cfg));
    let text2 = tiny_pinn_config(&out_env).replace("seed=3", "seed=999");
    let cfg2 = write_config(&dir, "c2.cfg", &text2);

    assert!(nplab().args(["run", cfg1.to_str().unwrap()]).status().unwrap().success());
    let st = nplab()
        .args(["run", cfg2.to_str().unwrap()])
        .env("NPLAB_SEED", "3")
        .status()
        .unwrap();
    assert!(st.success());

    let a = std::fs::read(out_cfg.with_extension("params")).unwrap();
    let b = std::fs::read(out_env.with_extension("params")).unwrap();
    assert_eq!(a, b, "NPLAB_SEED=3 must reproduce the seed=3 run");
}

#[test]
fn list_problems_names_every_registry_key() {
    let output = nplab().arg("list-problems").output().unwrap();
    assert!(output.status.success());
    let text = String::from_utf8_lossy(&output.stdout);
    for key in ["burgers", "eikonal", "eikonal-param", "heat", "heat-potential", "lqg-hjb", "allen-cahn"] {
        assert!(text.contains(key), "missing {key} in {text}");
    }
}

#[test]
fn check_grad_passes_for_each_method() {
    let dir = workdir("check-grad");
    let cases = [
        ("pinn", "burgers", ""),
        ("pinn-ident", "eikonal-param", "data=16\n"),
        ("pinn-rk", "burgers", ""),
        ("feynman-kac", "heat", "dim"),
        ("deep-bsde", "lqg-hjb", "dim"),
    ];
    for (method, problem, extra) in cases {
        let dim_line = if extra == "dim" { "dim=3\n" } else { "" };
        let train_extra = if extra != "dim" { extra } else { "" };
        let text = format!(
            "[method]\nname={method}\n[problem]\nname={problem}\n{dim_line}[training]\nepochs=1\nseed=5\n{train_extra}"
        );
        let cfg = write_config(&dir, &format!("{method}.cfg"), &text);
        let output = nplab()
            .args(["check-grad", cfg.to_str().unwrap()])
            .output()
            .unwrap();
        let stdout = String::from_utf8_lossy(&output.stdout);
        assert!(
            output.status.success() && stdout.contains("passed"),
            "{method}: {stdout} {}",
            String::from_utf8_lossy(&output.stderr)
        );
    }
}

#[test]
fn oracle_lqg_runs_at_small_scale() {
    let output = nplab()
        .args(["oracle", "lqg", "--d", "10", "--t", "1", "--samples", "20000", "--seed", "2"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("reference value"), "{text}");
}
