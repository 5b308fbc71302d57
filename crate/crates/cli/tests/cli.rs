use std::path::Path;
use std::process::Command;

use repe_cli::manifest::{self, RunManifest};

fn repe(args: &[&str], out: &Path) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_repe"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("-q")
        .env_remove("REPE_SEED")
        .output()
        .expect("binary runs");
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stderr).into_owned())
}

/// Small but complete run, kept quick for the debug build.
const SMALL: [&str; 6] = [
    "--set",
    "corpus.pairs_per_factor=60",
    "--set",
    "corpus.variants_per_family=4",
    "--set",
    "corpus.families=[\"baseball\",\"promotion\"]",
];

fn with_small<'a>(cmd: &'a str) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend(SMALL);
    v
}

#[test]
fn regress_before_purify_is_missing_input() {
    let tmp = tempfile::tempdir().unwrap();
    for cmd in ["gen", "capture", "scan"] {
        assert_eq!(repe(&with_small(cmd), tmp.path()).0, 0, "{cmd}");
    }
    let (code, err) = repe(&with_small("regress"), tmp.path());
    assert_eq!(code, 4, "{err}");
    assert!(err.contains("purify"), "{err}");
    assert_eq!(repe(&with_small("purify"), tmp.path()).0, 0);
    assert_eq!(repe(&with_small("regress"), tmp.path()).0, 0);
}

#[test]
fn phases_in_order_leave_no_orphans() {
    let tmp = tempfile::tempdir().unwrap();
    for cmd in ["gen", "capture", "scan", "purify", "regress", "steer", "report"] {
        let (code, err) = repe(&with_small(cmd), tmp.path());
        assert_eq!(code, 0, "{cmd}: {err}");
    }
    assert_eq!(manifest::audit(tmp.path()).unwrap(), Vec::<String>::new());
    let m = RunManifest::load(tmp.path()).unwrap().unwrap();
    for f in ["raw", "purified"] {
        assert!(m.bundle_digests.contains_key(f));
    }
    assert!(m.corpus_digests.contains_key("vignettes.jsonl"));
    for stem in ["scan_layers", "regression", "steering", "transfer-weekday"] {
        assert!(m.artifacts.contains_key(&format!("reports/{stem}.svg")));
        assert!(m.artifacts.contains_key(&format!("reports/{stem}.csv")), "{stem} has no sibling table");
    }
}

#[test]
fn all_is_reproducible_and_seed_sensitive() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(repe(&with_small("all"), a.path()).0, 0);
    assert_eq!(repe(&with_small("all"), b.path()).0, 0);
    let mut other = with_small("all");
    other.extend(["--seed", "5"]);
    assert_eq!(repe(&other, c.path()).0, 0);
    let load = |p: &Path| RunManifest::load(p).unwrap().unwrap();
    let (ma, mb, mc) = (load(a.path()), load(b.path()), load(c.path()));
    assert_eq!(ma.report_digest, mb.report_digest);
    assert_eq!(ma.artifacts, mb.artifacts);
    assert_eq!(ma.config_digest, mb.config_digest);
    assert_ne!(ma.report_digest, mc.report_digest);
}

#[test]
fn rerunning_all_replaces_the_previous_run() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(repe(&with_small("all"), tmp.path()).0, 0);
    let mut reseeded = with_small("all");
    reseeded.extend(["--set", "factors=[\"superiority\",\"relevance\",\"weekday\",\"jealousy\"]", "--seed", "2"]);
    assert_eq!(repe(&reseeded, tmp.path()).0, 0);
    assert!(manifest::audit(tmp.path()).unwrap().is_empty());
    // A phase under yet another config must not mix into this run.
    let mut changed = with_small("scan");
    changed.extend(["--seed", "9"]);
    assert_eq!(repe(&changed, tmp.path()).0, 3);
}

#[test]
fn config_errors_and_usage() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(repe(&["all", "--set", "thresholds.stable_accuracy=2"], tmp.path()).0, 3);
    assert_eq!(repe(&["all", "--set", "no_such_key=1"], tmp.path()).0, 3);
    assert_eq!(repe(&["all", "--config", "/no/such.toml"], tmp.path()).0, 3);
    assert_eq!(repe(&["frobnicate"], tmp.path()).0, 2);
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "folds = 3\n[corpus]\npairs_per_factor = 30\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_repe"))
        .args(["config", "--config"])
        .arg(&cfg)
        .env("REPE_CORPUS__PAIRS_PER_FACTOR", "40")
        .output()
        .unwrap();
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("folds = 3"), "{text}");
    assert!(text.contains("pairs_per_factor = 40"), "{text}");
}

#[test]
fn acf_backend_runs_offline_phases_and_refuses_steering() {
    let toy = tempfile::tempdir().unwrap();
    assert_eq!(repe(&with_small("all"), toy.path()).0, 0);
    let acf_in = toy.path().join("acf");
    let acf_in = acf_in.to_str().unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut args = with_small("all");
    args.extend(["--backend", "acf", "--set"]);
    let set = format!("paths.acf_in=\"{acf_in}\"");
    args.push(&set);
    let (code, err) = repe(&args, out.path());
    assert_eq!(code, 0, "{err}");
    let m = RunManifest::load(out.path()).unwrap().unwrap();
    let t = RunManifest::load(toy.path()).unwrap().unwrap();
    assert_eq!(m.bundle_digests, t.bundle_digests);
    assert_eq!(m.artifacts["reports/regression.json"], {
        let mut a = t.artifacts["reports/regression.json"].clone();
        a.stage = "regress".into();
        a
    });
    let mut steer = with_small("steer");
    steer.extend(["--backend", "acf", "--set", &set]);
    let (code, err) = repe(&steer, out.path());
    assert_eq!(code, 7, "{err}");
    let mut tap = with_small("capture");
    tap.extend(["--backend", "tap"]);
    let fresh = tempfile::tempdir().unwrap();
    assert_eq!(repe(&tap, fresh.path()).0, 7);
}
