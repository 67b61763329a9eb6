use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;

use mfsvie_cli::{run_experiment, ExperimentConfig};

fn config(recipe: &str, out: &Path, overrides: &[(&str, &str)]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(recipe).unwrap();
    cfg.set("out", out.to_str().unwrap()).unwrap();
    for (k, v) in overrides {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

/// Reference FNV-1a, written out longhand.
fn fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn files_under(root: &Path) -> BTreeSet<PathBuf> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out
}

#[test]
fn kernel_check_reports_closed_forms() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_experiment(&config("kernel-check", dir.path(), &[])).unwrap();
    assert!(m.passed());
    let t = rows(&m.path_of("kernel-check.csv"));
    assert_eq!(t[0], ["quantity", "closed_form", "quadrature", "rel_error"]);
    let value = |name: &str| -> f64 { t.iter().find(|r| r[0] == name).unwrap()[1].parse().unwrap() };
    assert!((value("l2_norm_sq") - 4.0 / 3.0).abs() < 1e-14);
    assert!((value("ess_sup_tail") - 2f64.sqrt()).abs() < 1e-14);
    for r in &t[1..] {
        let rel: f64 = r[3].parse().unwrap();
        assert!(rel <= 1e-8, "{r:?}");
    }
}

#[test]
fn zero_generator_m_residual_column() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_experiment(&config("backward-zero-gen", dir.path(), &[])).unwrap();
    assert!(m.passed(), "{}", m.render());
    let t = rows(&m.path_of("backward-zero-gen.csv"));
    let col = t[0].iter().position(|h| h == "m_residual").unwrap();
    assert_eq!(t.len(), 102);
    for r in &t[1..] {
        let v: f64 = r[col].parse().unwrap();
        assert!(v.is_finite() && v <= 0.1, "{r:?}");
    }
}

#[test]
fn repeated_runs_have_identical_checksums() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let over = [("n", "40"), ("particles", "500")];
    let ma = run_experiment(&config("backward", a.path(), &over)).unwrap();
    let mb = run_experiment(&config("backward", b.path(), &over)).unwrap();
    assert_eq!(ma.files, mb.files);
    assert!(ma.files.len() >= 3);
    for (name, h) in &ma.files {
        let bytes = std::fs::read(ma.path_of(name)).unwrap();
        assert_eq!(fnv(&bytes), *h, "{name}");
    }
}

#[test]
fn manifest_lists_checksums_and_status() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_experiment(&config("partition", dir.path(), &[])).unwrap();
    let text = std::fs::read_to_string(dir.path().join("partition.manifest")).unwrap();
    for (name, h) in &m.files {
        assert!(text.contains(&format!("file.{name} = {h:016x}")), "{text}");
    }
    assert!(text.contains("config.eps = 0.5"));
    assert!(text.lines().last().unwrap() == "status = pass", "{text}");
}

#[test]
fn numbers_carry_seventeen_significant_digits() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_experiment(&config("ito-variance", dir.path(), &[("particles", "1000"), ("n", "8")])).unwrap();
    for r in &rows(&m.path_of("ito-variance.csv"))[1..] {
        let mantissa = r[1].split('e').next().unwrap().trim_start_matches('-');
        assert_eq!(mantissa.chars().filter(char::is_ascii_digit).count(), 17, "{r:?}");
    }
}

#[test]
fn seed_changes_monte_carlo_output() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let over = [("n", "20"), ("particles", "200")];
    let ma = run_experiment(&config("forward", a.path(), &[over[0], over[1], ("sigma", "0.5")])).unwrap();
    let mb = run_experiment(&config("forward", b.path(), &[over[0], over[1], ("sigma", "0.5"), ("seed", "43")])).unwrap();
    assert_ne!(ma.checksum("forward.csv"), mb.checksum("forward.csv"));
}

fn bin(cwd: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mfsvie")).current_dir(cwd).args(args).output().unwrap()
}

#[test]
fn exit_status_follows_checks_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ok = bin(dir.path(), &["kernel-check", "--out", "pass"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("l2_norm_sq: pass"));

    let fail = bin(dir.path(), &["ito-variance", "--out", "fail", "--set", "n=4", "--set", "particles=50", "--set", "rel_tol=1e-12"]);
    assert_eq!(fail.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&fail.stdout).contains("variance: fail"));

    let bad = bin(dir.path(), &["fractional", "--out", "bad", "--set", "gamma=0.4"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("out of range"));

    std::fs::write(dir.path().join("dup.cfg"), "recipe = lq\nn = 3\nn = 4\n").unwrap();
    let dup = bin(dir.path(), &["run", "--config", "dup.cfg"]);
    assert_eq!(dup.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&dup.stderr).contains("lines 2 and 3"));

    // Errors leave nothing behind.
    assert!(!dir.path().join("bad").exists());
}

#[test]
fn writes_stay_under_the_output_prefix() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("k.cfg"), "recipe = kernel-check\nout = nested/runs\n").unwrap();
    let out = bin(dir.path(), &["run", "-c", "k.cfg"]);
    assert_eq!(out.status.code(), Some(0));
    let files = files_under(dir.path());
    for f in &files {
        assert!(f == Path::new("k.cfg") || f.starts_with("nested/runs"), "stray file {}", f.display());
    }
    assert!(files.contains(Path::new("nested/runs/kernel-check.manifest")));
}

#[test]
fn run_with_config_file_uses_its_recipe() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("p.cfg"), "recipe = partition\n[params]\nmode = contraction\n").unwrap();
    let out = bin(dir.path(), &["run", "--config", "p.cfg", "--seed", "3", "-o", "o"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(dir.path().join("o/partition.manifest")).unwrap();
    assert!(manifest.contains("config.mode = contraction"));
    assert!(manifest.contains("config.seed = 3"));

    let mismatch = bin(dir.path(), &["lq", "--config", "p.cfg"]);
    assert_eq!(mismatch.status.code(), Some(2));
}

#[test]
fn list_names_every_recipe() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(dir.path(), &["list"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for r in mfsvie_cli::recipes::all() {
        assert!(text.contains(r.name));
    }
}
