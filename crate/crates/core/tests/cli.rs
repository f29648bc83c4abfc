//! Runs the `dgvc` binary end to end on a miniature experiment.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn dgvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgvc")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dgvc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "seed = 3\n{extra}\n[train]\niterations = 4\nbatch_size = 2\ncheckpoint_every = 2\n\
         [corpus]\nn_train = 3\nn_test = 2\nframes = 64\n\
         [paths]\ncorpus_dir = {:?}\nout_dir = {:?}\n",
        dir.join("corpus"),
        dir.join("run"),
    );
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn python_sha256(path: &Path) -> String {
    let code = "import hashlib,sys;print(hashlib.sha256(open(sys.argv[1],'rb').read()).hexdigest())";
    let out = Command::new("python3").args(["-c", code]).arg(path).output().unwrap();
    String::from_utf8(out.stdout).unwrap().trim().to_string()
}

#[test]
fn corpus_train_convert_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, "");
    let cfg = cfg.to_str().unwrap();

    ok(&["make-corpus", "--config", cfg]);
    let corpus = dir.join("corpus");
    let features: Vec<_> = files_under(&corpus).into_iter().filter(|p| p.extension().unwrap() == "dgvc").collect();
    assert_eq!(features.len(), 2 * (3 + 2));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(corpus.join("manifest.json")).unwrap()).unwrap();
    let entries = manifest["files"].as_array().unwrap();
    assert_eq!(entries.len(), features.len());
    for e in entries {
        let p = corpus.join(e["path"].as_str().unwrap());
        assert_eq!(e["sha256"].as_str().unwrap(), python_sha256(&p));
    }
    let again = dir.join("corpus2");
    ok(&["make-corpus", "--config", cfg, "--out", again.to_str().unwrap()]);
    for (a, b) in files_under(&corpus).iter().zip(files_under(&again)) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(&b).unwrap(), "{}", a.display());
    }

    let stdout = ok(&["train", "--config", cfg]);
    let run = dir.join("run");
    assert_eq!(PathBuf::from(stdout.trim()), run.join("final.dgck"));
    assert!(run.join("checkpoint-0000002.dgck").exists());
    let metrics = std::fs::read_to_string(run.join("metrics.ndjson")).unwrap();
    assert_eq!(metrics.lines().count(), 2 * 4);
    let rec: Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["step", "direction", "total_g", "total_d", "wall_seconds"] {
        assert!(rec.get(key).is_some(), "{key}");
    }
    let echoed = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echoed.contains("seed = 3"));

    let conv = dir.join("conv");
    let ck = run.join("final.dgck");
    let input = corpus.join("x/test");
    ok(&[
        "convert", "--config", cfg, "--checkpoint", ck.to_str().unwrap(), "--input", input.to_str().unwrap(),
        "--direction", "x2y", "--n-samples", "2", "--out", conv.to_str().unwrap(),
    ]);
    assert!(conv.join("000.s0.dgvc").exists() && conv.join("001.s1.dgvc").exists());

    let eval = dir.join("eval");
    let text = ok(&[
        "evaluate", "--config", cfg, "--converted", conv.to_str().unwrap(), "--reference",
        corpus.join("y/test").to_str().unwrap(), "--source", input.to_str().unwrap(), "--out", eval.to_str().unwrap(),
    ]);
    assert!(text.contains("method=dgvc") && text.contains("method=source"));
    let csv = std::fs::read_to_string(eval.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().split(',').nth(6).is_some_and(|d| !d.is_empty()));

    // Resuming a finished run leaves its final checkpoint unchanged.
    let before = std::fs::read(&ck).unwrap();
    ok(&["train", "--config", cfg, "--checkpoint", run.join("checkpoint-0000002.dgck").to_str().unwrap()]);
    assert_eq!(std::fs::read(&ck).unwrap(), before);

    // A checkpoint trained with another T_diff is refused.
    let other = write_config(dir, "[schedule]\nt_diff = 2\nbeta_min = 0.9\nbeta_max = 0.99");
    let out = dgvc(&[
        "convert", "--config", other.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap(), "--input",
        input.to_str().unwrap(), "--out", dir.join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn failures_have_distinct_codes_and_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = dgvc(&["diffusion-diag", "--config", bad.to_str().unwrap()]);
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[config]: "), "{err}");

    let out = dgvc(&[
        "convert", "--checkpoint", tmp.path().join("missing.dgck").to_str().unwrap(), "--input",
        tmp.path().to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[checkpoint]: "));

    let out = dgvc(&["train", "--out", tmp.path().join("r").to_str().unwrap(), "--config", tmp.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn diffusion_diag_passes_on_default_config() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&["diffusion-diag", "--out", tmp.path().to_str().unwrap()]);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
    assert!(tmp.path().join("config.toml").exists());

    // A schedule that leaves too much signal at T fails the diagnostic.
    let cfg = tmp.path().join("weak.toml");
    std::fs::write(&cfg, "[schedule]\nt_diff = 2\nbeta_min = 0.1\nbeta_max = 0.2\n").unwrap();
    let out = dgvc(&["diffusion-diag", "--config", cfg.to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn help_mentions_every_flag() {
    let mut all = String::new();
    for sub in ["make-corpus", "train", "convert", "evaluate", "diffusion-diag"] {
        all.push_str(&ok(&[sub, "--help"]));
    }
    for flag in ["--config", "--seed", "--out", "--checkpoint", "--direction", "--n-samples", "--iterations"] {
        assert!(all.contains(flag), "{flag}");
    }
}
