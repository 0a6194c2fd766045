use serde_json::Value;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn reference_toml() -> String {
    fs::read_to_string(workspace().join("configs/reference.toml")).unwrap()
}

fn arnold(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arnold")).args(args).env("ARNOLD_WORKERS", "2").output().unwrap()
}

fn run(config: &Path, stages: &str, out: &Path) -> Output {
    arnold(&["run", "--config", config.to_str().unwrap(), "--stages", stages, "--out", out.to_str().unwrap()])
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn statuses(dir: &Path) -> Vec<(String, String)> {
    manifest(dir)["stages"].as_array().unwrap().iter().map(|s| (s["stage"].as_str().unwrap().to_string(), s["status"].as_str().unwrap().to_string())).collect()
}

fn status_of(dir: &Path, stage: &str) -> String {
    statuses(dir).into_iter().find(|s| s.0 == stage).map(|s| s.1).unwrap()
}

#[test]
fn full_run_caches_and_invalidates_downstream_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("ref.toml");
    fs::write(&cfg, reference_toml()).unwrap();
    let out = tmp.path().join("out");

    let first = run(&cfg, "all", &out);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert!(statuses(&out).iter().all(|s| s.1 == "ran"), "{:?}", statuses(&out));

    let chain: Value = serde_json::from_str(&fs::read_to_string(out.join("chain/chain.json")).unwrap()).unwrap();
    assert_eq!(chain["complete"], Value::Bool(true));
    let legs = chain["legs"].as_array().unwrap();
    let gain = legs.last().unwrap()["end"][0].as_f64().unwrap() - legs[0]["start"][0].as_f64().unwrap();
    assert!(gain >= (1.9 - 0.6) - 2.0 * 1e-2, "net gain {gain}");

    // Every checksum in the manifest matches the file on disk.
    let m = manifest(&out);
    for f in m["files"].as_array().unwrap() {
        let bytes = fs::read(out.join(f["path"].as_str().unwrap())).unwrap();
        let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(f["sha256"].as_str().unwrap(), hex, "{}", f["path"]);
        assert_eq!(f["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }
    assert!(!out.join(".arnold.lock").exists());

    let again = run(&cfg, "all", &out);
    assert_eq!(code(&again), 0, "{}", stderr(&again));
    assert!(statuses(&out).iter().all(|s| s.1 == "cached"), "{:?}", statuses(&out));

    // Only the stages that read ε rerun.
    fs::write(&cfg, reference_toml().replace("epsilon = 1e-3", "epsilon = 2e-3")).unwrap();
    let edited = run(&cfg, "all", &out);
    assert_eq!(code(&edited), 0, "{}", stderr(&edited));
    for (stage, status) in statuses(&out) {
        let expect = if stage == "chain" || stage == "verify" { "ran" } else { "cached" };
        assert_eq!(status, expect, "{stage}");
    }

    // Plots are reproducible and refuse artifacts of another kind.
    let plot = |input: &str, kind: &str, name: &str| {
        let target = tmp.path().join(name);
        let o = arnold(&["plot", "--in", out.join(input).to_str().unwrap(), "--kind", kind, "--out", target.to_str().unwrap()]);
        (o, target)
    };
    let (o1, p1) = plot("ladder/ladder.json", "ladder", "a.svg");
    let (o2, p2) = plot("ladder/ladder.json", "ladder", "b.svg");
    assert_eq!((code(&o1), code(&o2)), (0, 0));
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    for (input, kind) in [("melnikov/grid.csv", "contour"), ("chain/chain.json", "chain"), ("verify/jump.csv", "jump")] {
        let (o, p) = plot(input, kind, "c.svg");
        assert_eq!(code(&o), 0, "{input}: {}", stderr(&o));
        assert!(fs::read_to_string(&p).unwrap().starts_with("<svg"));
    }
    let (bad, _) = plot("chain/chain.json", "ladder", "d.svg");
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("is not a ladder artifact"), "{}", stderr(&bad));
}

#[test]
fn melnikov_stage_emits_grid_and_contour() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("ref.toml");
    fs::write(&cfg, reference_toml()).unwrap();
    let out = tmp.path().join("out");
    let o = run(&cfg, "model,melnikov", &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("melnikov/grid.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("I,phi,s,L,"));
    assert_eq!(lines.count(), 32 * 32);
    assert!(!csv.contains('\r'));
    let svg = fs::read_to_string(out.join("melnikov/contour.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.matches("<line").count() > 100);
    assert_eq!(statuses(&out).len(), 2);
    assert_eq!(status_of(&out, "melnikov"), "ran");
}

#[test]
fn missing_upstream_is_a_stage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("ref.toml");
    fs::write(&cfg, reference_toml()).unwrap();
    let o = run(&cfg, "chain", &tmp.path().join("empty"));
    assert_eq!(code(&o), 1);
    let msg = stderr(&o);
    assert!(msg.contains("missing upstream artifact") && msg.contains("ladder"), "{msg}");
}

#[test]
fn bad_configs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cases = [
        ("syntax.toml", "[potential\nterms = 1".to_string()),
        ("range.toml", reference_toml().replace("i_range = [0.5, 2.0]", "i_range = [2.0, 0.5]")),
    ];
    for (name, text) in cases {
        let cfg = tmp.path().join(name);
        fs::write(&cfg, text).unwrap();
        let o = run(&cfg, "all", &out);
        assert_eq!(code(&o), 2, "{name}: {}", stderr(&o));
    }
    let cfg = tmp.path().join("ok.toml");
    fs::write(&cfg, reference_toml()).unwrap();
    let o = run(&cfg, "model,nonsense", &out);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = run(&tmp.path().join("absent.toml"), "all", &out);
    assert_eq!(code(&o), 2);
}

#[test]
fn held_lock_refuses_a_second_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("ref.toml");
    fs::write(&cfg, reference_toml()).unwrap();
    let out = tmp.path().join("out");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".arnold.lock"), "1\n").unwrap();
    let o = run(&cfg, "model", &out);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("another run owns this directory"), "{}", stderr(&o));
    assert!(!out.join("manifest.json").exists());
}
