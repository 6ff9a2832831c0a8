use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
preset = "mnist-mlp"
profile = "small"
workers = 1

[synthetic]
n_train = 400
n_test = 200
noise = 40.0

[split]
cap = 300

[victim]
epochs = 3
lr = 0.05
lr_drops = []
batch_size = 32

[shadow_training]
epochs = 2
lr = 0.05
lr_drops = []
batch_size = 32

[attack]
shadow_count = 4
in_models = 2
jayaraman_t = 5
jayaraman_search = 2
subpop_k = 5
subpop_draws = 5

[bigan]
max_epochs = 2
probe_size = 32

[eval]
cap = 20
"#;

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("tiny.toml");
    let text = format!("output_dir = {:?}\n{TINY}{extra}", dir.join("run").display().to_string());
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn submia(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_submia")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn all_then_cached_attack_then_stale_refusal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = dir.path().join("run");

    let o = submia(&["--config", &cfg, "all"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(run.join("results.csv")).unwrap();
    for attack in ["Yeom et al.", "Watson et al.", "Sablayrolles et al.", "Ours (Black-box)"] {
        assert!(csv.contains(attack), "{attack} missing from results.csv");
    }
    assert!(run.join("config.toml").exists());
    assert!(run.join("cost_ledger.csv").exists());

    let victim = std::fs::read(run.join("victim/victim.ckpt")).unwrap();
    let o = submia(&["--config", &cfg, "attack"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = stderr(&o);
    for stage in ["victim", "shadows", "in_models", "bigan", "craft", "attack"] {
        assert!(log.contains(&format!("{stage}: cached")), "{stage} was not cached:\n{log}");
    }
    assert!(!log.contains(": ran"), "{log}");
    assert_eq!(std::fs::read(run.join("victim/victim.ckpt")).unwrap(), victim);

    let text = std::fs::read_to_string(&cfg).unwrap().replace("[victim]\n", "[victim]\nseed = 99\n");
    std::fs::write(&cfg, text).unwrap();
    let o = submia(&["--config", &cfg, "attack"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("stale"), "{}", stderr(&o));
    assert_eq!(std::fs::read(run.join("victim/victim.ckpt")).unwrap(), victim);

    let o = submia(&["--config", &cfg, "--force", "attack"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("victim: ran"));
    assert_ne!(std::fs::read(run.join("victim/victim.ckpt")).unwrap(), victim);
}

#[test]
fn missing_upstream_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = submia(&["--config", &cfg, "train-victim"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("has not been run"));
    assert!(submia(&["--config", &cfg, "prepare-data"]).status.success());
    let o = submia(&["--config", &cfg, "train-victim"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("| mnist | mlp5 |"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    // lands in the trailing [eval] table
    let cfg = write_config(dir.path(), "bogus_key = 1\n");
    assert_eq!(submia(&["--config", &cfg, "all"]).status.code(), Some(2));
    assert_eq!(submia(&["--config", "no-such-preset", "all"]).status.code(), Some(2));
    assert_eq!(submia(&["--profile", "huge", "all"]).status.code(), Some(2));
    let cfg = write_config(dir.path(), "");
    assert_eq!(submia(&["--config", &cfg, "attack", "not_an_attack"]).status.code(), Some(2));
    assert!(dir.path().join("run").read_dir().is_err(), "nothing may be written on a config error");
}

#[test]
fn presets_are_listed() {
    let o = submia(&["presets"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().any(|l| l == "fmnist-mlp"));
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn same_config_and_seed_reproduce_scores() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let cfg = write_config(d.path(), "");
        let o = submia(&["--config", &cfg, "--seed", "11", "all"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (ra, rb) = (a.path().join("run"), b.path().join("run"));
    let mut compared = 0;
    for entry in std::fs::read_dir(ra.join("scores")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(std::fs::read(ra.join("scores").join(&name)).unwrap(), std::fs::read(rb.join("scores").join(&name)).unwrap());
        compared += 1;
    }
    assert!(compared >= 7);
    for rel in ["data/manifest.json", "data/eval_split.json", "results.csv"] {
        assert_eq!(std::fs::read(ra.join(rel)).unwrap(), std::fs::read(rb.join(rel)).unwrap(), "{rel}");
    }
}
