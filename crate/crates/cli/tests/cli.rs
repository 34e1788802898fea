use std::fs;
use std::path::PathBuf;
use std::process::Command;

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("nsldp-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn nsldp(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_nsldp")).args(args).output().unwrap()
}

const SMALL: &str = "seed = 4
threads = 1
[model]
n = 3
dt = 1/16
[malliavin]
betas = 1e-3 1e-2 1e-1
trajectories = 16
blocks = 2
burn_in = 1
bootstrap = 40
";

#[test]
fn check_forcing_prints_decision() {
    let d = scratch("forcing");
    let out = nsldp(&["--out", d.to_str().unwrap(), "check-forcing"]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["condition_H"], serde_json::json!(true));
    assert!(d.join("check-forcing.json").exists());
}

#[test]
fn failing_forcing_is_reported_not_an_error() {
    let d = scratch("forcing-bad");
    let cfg = d.join("c.txt");
    fs::write(&cfg, "[forcing]\nmodes = (1,0) (-1,0)\namplitude = 0.25\n").unwrap();
    let out = nsldp(&["--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap(), "check-forcing"]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["condition_H"], serde_json::json!(false));
}

#[test]
fn validation_errors_exit_one_with_line_numbers() {
    let d = scratch("invalid");
    let cfg = d.join("c.txt");
    fs::write(&cfg, "[model]\ndt = 3e-3\ntypo = 1\n").unwrap();
    let out = nsldp(&["--config", cfg.to_str().unwrap(), "check-forcing"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2: dt must divide 1/2"), "{err}");
    assert!(err.contains("line 3: unknown key 'model.typo'"), "{err}");
}

#[test]
fn unknown_malliavin_task_is_rejected() {
    let out = nsldp(&["malliavin", "nope"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn residual_decay_rows_and_rerun_determinism() {
    let d = scratch("decay");
    let cfg = d.join("c.txt");
    fs::write(&cfg, SMALL).unwrap();
    let run = |sub: &str| {
        let o = d.join(sub);
        let out = nsldp(&["--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap(), "malliavin", "residual-decay"]);
        assert!(matches!(out.status.code(), Some(0) | Some(2)), "{out:?}");
        fs::read(o.join("malliavin-residual-decay.rates.csv")).unwrap()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1 + 3);
    let env: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("a/malliavin-residual-decay.json")).unwrap()).unwrap();
    assert_eq!(env["provenance"][0]["samples"], serde_json::json!(16));
}
