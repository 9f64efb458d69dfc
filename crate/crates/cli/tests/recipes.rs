use std::fs;
use std::path::Path;
use std::process::Command;

use chaoslab_cli::{exit_code, parse_config, run_recipe, Inputs, Recipe, Status};

const SMALL_SDE: &str = r#"
beta = 1.0
[kernel]
family = "log"
[grid]
lo = -6.0
hi = 6.0
n_cells = 256
[dynamics]
kind = "sde"
dt = 0.01
t_end = 0.2
snapshot_dt = 0.1
max_halvings = 0
drift_cap = 1.0
[ensemble]
N = 8
M = 4
master_seed = 42
[initial]
mu = { kind = "gaussian", mean = 0.0, var = 0.5 }
"#;

const SMALL_EQUILIBRIUM: &str = r#"
beta = 1.0
[kernel]
family = "log"
[grid]
n_cells = 128
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chaoslab"))
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "manifest.json" {
                out.push((path.strip_prefix(dir).unwrap().display().to_string(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = parse_config(SMALL_SDE).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_recipe(Recipe::Particles, &cfg, &a, &Inputs::default()).unwrap();
    run_recipe(Recipe::Particles, &cfg, &b, &Inputs::default()).unwrap();
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.iter().any(|(name, _)| name.contains("particles_")));
    assert_eq!(fa, fb);

    let mut other = cfg.clone();
    other.ensemble.master_seed += 1;
    let c = tmp.path().join("c");
    run_recipe(Recipe::Particles, &other, &c, &Inputs::default()).unwrap();
    assert_ne!(files(&c), fa);
}

#[test]
fn particles_run_writes_snapshots_and_marginals() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = parse_config(SMALL_SDE).unwrap();
    run_recipe(Recipe::Particles, &cfg, tmp.path(), &Inputs::default()).unwrap();
    let index = fs::read_to_string(tmp.path().join("snapshots/index.csv")).unwrap();
    let snaps = index.lines().skip(1).count();
    assert_eq!(snaps, 3);
    let marginals = fs::read_to_string(tmp.path().join("marginals.csv")).unwrap();
    assert_eq!(marginals.lines().next().unwrap(), "t,w2,w2_se,tv,kl,tv_floor,samples");
}

#[test]
fn missing_output_directories_are_created() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("deep/nested/out");
    let cfg = parse_config(SMALL_EQUILIBRIUM).unwrap();
    let outcome = run_recipe(Recipe::Equilibrium, &cfg, &out, &Inputs::default()).unwrap();
    assert!(outcome.passed());
    for name in ["manifest.json", "mu_beta.csv", "equilibrium.csv", "perturbations.csv"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["recipe"], "equilibrium");
    assert_eq!(manifest["schema_version"], 1);
}

#[test]
fn unwritable_output_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let cfg = parse_config(SMALL_EQUILIBRIUM).unwrap();
    let err = run_recipe(Recipe::Equilibrium, &cfg, &blocker.join("out"), &Inputs::default()).unwrap_err();
    assert_eq!(exit_code(&err), 1);
}

#[test]
fn audits_are_traceable_to_csv_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = parse_config(SMALL_EQUILIBRIUM).unwrap();
    let outcome = run_recipe(Recipe::Equilibrium, &cfg, tmp.path(), &Inputs::default()).unwrap();
    assert!(!outcome.audits.is_empty());
    for audit in &outcome.audits {
        assert_eq!(audit.status, Status::Pass, "{}", audit.name);
        let (file, column) = audit.source.split_once(':').unwrap();
        let text = fs::read_to_string(tmp.path().join(file)).unwrap();
        assert!(text.lines().next().unwrap().split(',').any(|c| c == column), "{}", audit.source);
    }
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("cfg.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |text: &str, sub: &str| {
        let cfg = write_config(tmp.path(), text);
        bin().args([sub, "--config"]).arg(&cfg).arg("--out").arg(tmp.path().join("out")).output().unwrap()
    };

    let ok = run(SMALL_EQUILIBRIUM, "equilibrium");
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));

    let bad = run("beta = 0.0\n[kernel]\nfamily = \"riesz\"\ns = 1.5\n", "equilibrium");
    assert_eq!(bad.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert!(stderr.contains("kernel.s") && stderr.contains("beta"), "{stderr}");

    // far too few unburnt chain samples to resolve the 1-marginal
    let starved = "beta = 1.0\n[kernel]\nfamily = \"log\"\n[grid]\nn_cells = 64\n[ensemble]\nN = 4\n\
        [sampling]\nis_samples = 1000\nchains = 1\nchain_samples = 300\nburn_in = 0\nthin = 1\n";
    let audit = run(starved, "diagnose");
    assert_eq!(audit.status.code(), Some(chaoslab_cli::EXIT_AUDIT));
    assert!(String::from_utf8_lossy(&audit.stdout).contains("FAIL gibbs_identity_tv"));

    // an unreachable residual target
    let strict = format!("{SMALL_EQUILIBRIUM}\n[tolerances]\nequilibrium = 1e-300\n");
    assert_eq!(run(&strict, "equilibrium").status.code(), Some(3));

    let stuck = "beta = 1.0\n[kernel]\nfamily = \"log\"\n\
        [dynamics]\nkind = \"mala\"\ndt = 50.0\nt_end = 60000.0\nsnapshot_dt = 60000.0\n\
        [ensemble]\nN = 4\nM = 1\n";
    let numerical = run(stuck, "particles");
    assert_eq!(numerical.status.code(), Some(3), "{}", String::from_utf8_lossy(&numerical.stderr));

    let missing = bin().args(["equilibrium", "--config"]).arg(tmp.path().join("nope.toml")).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn show_config_prints_a_parseable_complete_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_SDE);
    let out = bin().args(["show-config", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[sampling]") && text.contains("[tolerances]"), "{text}");
    assert_eq!(parse_config(&text).unwrap().to_toml(), parse_config(SMALL_SDE).unwrap().to_toml());
}
