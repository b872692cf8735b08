use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 2
[problem]
kind = "kirchhoff"
[encoder]
kind = "daff"
comp_types = [1]
mn_values = [1]
[network]
layers = 1
units = 8
[optimizer]
epochs = 6
[training]
batch_size = 32
validate_every = 3
grid_n = 9
"#;

fn daffpinn(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_daffpinn"))
        .args(args)
        .env("DAFFPINN_OUT", out)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_validate_explain_export_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("plate.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("runs");
    let o = daffpinn(&["train", "--config", cfg.to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let manifest = text
        .lines()
        .find_map(|l| l.strip_prefix("manifest "))
        .unwrap()
        .to_string();
    assert!(manifest.starts_with(out.to_str().unwrap()));

    let v = daffpinn(&["validate", &manifest, "--grid-n", "11"], &out);
    assert!(v.status.success());
    let line = stdout(&v);
    let bmax: f64 = line.split_whitespace().last().unwrap().parse().unwrap();
    assert!(bmax <= 1e-12, "{line}");

    let e = daffpinn(&["explain", &manifest, "--mode", "features", "--grid-n", "5"], &out);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    assert!(stdout(&e).contains("comp1"));
    let f = daffpinn(&["explain", &manifest, "--mode", "field"], &out);
    assert_eq!(f.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&f.stderr).contains("identity"));

    let x = daffpinn(&["export", &manifest, "--grid-n", "5"], &out);
    assert!(x.status.success());
    assert!(stdout(&x).contains("prediction.pgm"));
}

#[test]
fn out_dir_flag_overrides_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let flag = dir.path().join("flag");
    let o = daffpinn(
        &["eigs", "--grid-n", "8", "--modes", "3", "--out-dir", flag.to_str().unwrap()],
        &dir.path().join("env"),
    );
    assert!(o.status.success());
    assert!(flag.join("modes_dirichlet_n8_k3.txt").exists());
    assert!(!dir.path().join("env").exists());
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("mode ")).count(), 3);
}

#[test]
fn exit_codes_follow_the_error_category() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, CONFIG.replace("epochs = 6", "epochs = 6\nmomentum = 0.9")).unwrap();
    let o = daffpinn(&["train", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("momentum"));

    let missing = dir.path().join("nope.toml");
    let o = daffpinn(&["train", "--config", missing.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(4));

    let o = daffpinn(&["validate", missing.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(4));

    let o = daffpinn(&["eigs", "--bc", "robin"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
