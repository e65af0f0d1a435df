use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn tsmnet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsmnet")).args(args).current_dir(dir).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn config(dir: &Path, name: &str, text: &str) -> String {
    fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

/// Small generator shared by the tests below.
const SMALL: &str = "seed = 3\n[generator]\nchannels = 6\ntime = 64\nsources = 4\nsource_domains = 5\ntarget_domains = 2\ntrials_per_domain = 20\n\
[model.net]\nchannels = 6\ntime = 64\ntemporal_filters = 2\ntemporal_kernel = 9\nspatio_spectral_filters = 8\nsubspace_dim = 4\n";

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn gen_is_byte_identical_for_equal_seeds() {
    let t = TempDir::new().unwrap();
    let c = config(t.path(), "c.toml", SMALL);
    for out in ["a", "b"] {
        let o = tsmnet(&["gen", "--config", &c, "--out", out], t.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = dir_bytes(&t.path().join("a"));
    assert_eq!(a.len(), 2 + 7, "manifest, resolved config and one file per domain");
    assert_eq!(a, dir_bytes(&t.path().join("b")));

    let o = tsmnet(&["gen", "--config", &c, "--out", "c", "--seed-override", "4"], t.path());
    assert_eq!(code(&o), 0);
    assert_ne!(fs::read(t.path().join("a/domain_000.tsr")).unwrap(), fs::read(t.path().join("c/domain_000.tsr")).unwrap());
}

#[test]
fn sources_exceeding_channels_exit_with_config_code() {
    let t = TempDir::new().unwrap();
    let c = config(t.path(), "c.toml", "seed = 0\n[generator]\nchannels = 4\nsources = 6\n");
    let o = tsmnet(&["gen", "--config", &c, "--out", "x"], t.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sources exceed channels"));
}

#[test]
fn config_errors_are_reported_with_field_names() {
    let t = TempDir::new().unwrap();
    let c = config(t.path(), "c.toml", "seed = 0\n[protocol]\nepochz = 2\n");
    let o = tsmnet(&["train", "--config", &c, "--out", "x"], t.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
    let c = config(t.path(), "d.toml", "[protocol]\nepochs = 2\n");
    let o = tsmnet(&["train", "--config", &c, "--out", "x"], t.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn missing_inputs_are_io_errors_and_corrupt_inputs_format_errors() {
    let t = TempDir::new().unwrap();
    let c = config(t.path(), "c.toml", "seed = 0\n[inputs]\ncheckpoint = \"nope.ckpt\"\n");
    assert_eq!(code(&tsmnet(&["eval", "--config", &c, "--out", "x"], t.path())), 3);
    fs::write(t.path().join("bad.ckpt"), b"TSMNCKPT\x09garbage").unwrap();
    let c = config(t.path(), "d.toml", "seed = 0\n[inputs]\ncheckpoint = \"bad.ckpt\"\n");
    assert_eq!(code(&tsmnet(&["eval", "--config", &c, "--out", "y"], t.path())), 4);
}

#[test]
fn locked_output_directory_is_refused() {
    let t = TempDir::new().unwrap();
    let c = config(t.path(), "c.toml", SMALL);
    fs::create_dir(t.path().join("out")).unwrap();
    fs::write(t.path().join("out/.tsmnet.lock"), b"1").unwrap();
    let o = tsmnet(&["gen", "--config", &c, "--out", "out"], t.path());
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("locked"));
}

#[test]
fn gradcheck_passes_with_a_table() {
    let t = TempDir::new().unwrap();
    let c = config(t.path(), "c.toml", "seed = 0\n");
    let o = tsmnet(&["gradcheck", "--config", &c, "--out", "g"], t.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let table = fs::read_to_string(t.path().join("g/gradcheck.txt")).unwrap();
    assert!(table.contains("net/bimap") && table.contains("end_to_end/euclidean/classifier"));
    assert!(!table.contains(" NO"));
}

#[test]
fn gradcheck_failure_exits_with_its_own_code() {
    let t = TempDir::new().unwrap();
    let c = config(t.path(), "c.toml", "seed = 0\n[experiment.gradcheck]\nlayer_tolerance = 1e-30\n");
    let o = tsmnet(&["gradcheck", "--config", &c, "--out", "g"], t.path());
    assert_eq!(code(&o), 6);
}

#[test]
fn train_eval_round_trip_is_reproducible() {
    let t = TempDir::new().unwrap();
    let c = config(t.path(), "g.toml", SMALL);
    assert_eq!(code(&tsmnet(&["gen", "--config", &c, "--out", "data"], t.path())), 0);
    let run = format!("{SMALL}[inputs]\ndataset = \"data\"\ncheckpoint = \"run/model.ckpt\"\n[protocol]\nepochs = 2\n[protocol.batch]\ndomains_per_batch = 2\ntrials_per_domain = 4\n");
    let c = config(t.path(), "r.toml", &run);
    let o = tsmnet(&["train", "--config", &c, "--out", "run"], t.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.ckpt", "train_log.json", "train_log.csv", "config.resolved.toml"] {
        assert!(t.path().join("run").join(f).exists(), "{f}");
    }
    assert!(!t.path().join("run/.tsmnet.lock").exists());

    for out in ["e1", "e2"] {
        let o = tsmnet(&["eval", "--config", &c, "--out", out], t.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(dir_bytes(&t.path().join("e1")), dir_bytes(&t.path().join("e2")));
    let report = fs::read_to_string(t.path().join("e1/eval_report.json")).unwrap();
    let hash = fs::read_to_string(t.path().join("e1/config.resolved.toml")).unwrap();
    let hash = hash.lines().next().unwrap().split('"').nth(1).unwrap().to_string();
    assert!(report.contains(&hash) && report.contains("\"seed\": 3"));

    // Training again with the same seed reproduces the log and checkpoint.
    assert_eq!(code(&tsmnet(&["train", "--config", &c, "--out", "run2"], t.path())), 0);
    assert_eq!(dir_bytes(&t.path().join("run")), dir_bytes(&t.path().join("run2")));
}

#[test]
fn zero_epoch_checkpoint_evaluates_at_chance() {
    let t = TempDir::new().unwrap();
    let c = config(t.path(), "c.toml", "seed = 1\n[inputs]\ncheckpoint = \"run/model.ckpt\"\n[protocol]\nepochs = 0\n");
    assert_eq!(code(&tsmnet(&["train", "--config", &c, "--out", "run"], t.path())), 0);
    let o = tsmnet(&["eval", "--config", &c, "--out", "ev"], t.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path().join("ev/eval_report.json")).unwrap()).unwrap();
    let acc = report["mean_balanced_accuracy"].as_f64().unwrap();
    assert!((acc - 0.5).abs() <= 0.1, "{acc}");
}
