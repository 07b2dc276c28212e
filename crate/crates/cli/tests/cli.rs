use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ecaformer::attention::AttentionKind;
use ecaformer::checkpoint::Checkpoint;
use ecaformer::data::{load_image, quantize, MANIFEST_FILE};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ecaformer"));
    c.env_remove("ECAF_SEED").env_remove("RUST_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two 32x32 pairs in `dir/data`; returns the manifest path.
fn synth(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    let o = run(&[
        "synth",
        "--out",
        p(&out),
        "--n",
        "2",
        "--size",
        "32",
        "--seed",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    PathBuf::from(stdout(&o).trim())
}

fn train_args<'a>(manifest: &'a Path, out: &'a Path) -> Vec<&'a str> {
    vec![
        "train",
        "--manifest",
        p(manifest),
        "--out",
        p(out),
        "--patch",
        "32",
        "--c0",
        "4",
        "--batch",
        "1",
    ]
}

#[test]
fn help_exits_zero_everywhere() {
    for sub in [
        &[][..],
        &["synth"],
        &["train"],
        &["enhance"],
        &["eval"],
        &["verify"],
    ] {
        let mut args = sub.to_vec();
        args.push("--help");
        let o = run(&args);
        assert_eq!(code(&o), 0, "{args:?}");
        assert!(stdout(&o).contains("Usage"), "{args:?}");
    }
    let o = run(&["train", "--help"]);
    let text = stdout(&o);
    assert!(
        text.contains("desk default: 2000; full-scale: 250000"),
        "{text}"
    );
    assert!(
        text.contains("full-scale: 256") && text.contains("full-scale: 8"),
        "{text}"
    );
}

#[test]
fn synth_prints_manifest_and_refuses_to_overwrite() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path());
    assert_eq!(manifest, dir.path().join("data").join(MANIFEST_FILE));
    assert!(manifest.exists());

    let again = run(&[
        "synth",
        "--out",
        p(&dir.path().join("data")),
        "--n",
        "2",
        "--size",
        "32",
    ]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));

    let forced = run(&[
        "synth",
        "--out",
        p(&dir.path().join("data")),
        "--n",
        "1",
        "--size",
        "16",
        "--force",
    ]);
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));
}

#[test]
fn missing_required_flag_is_an_argument_error() {
    let o = run(&["synth", "--n", "2"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(code(&run(&["train", "--out", "/tmp/x"])), 2);
    assert_eq!(code(&run(&["enhance", "--ckpt", "a"])), 2);
    assert_eq!(code(&run(&["eval"])), 2);
    assert_eq!(code(&run(&["synth", "--out", "/tmp/x", "--n", "minus"])), 2);
    assert_eq!(code(&run(&["bogus"])), 2);
}

#[test]
fn config_file_sets_flags_and_flags_override_it() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("synth.cfg");
    let out = dir.path().join("fromcfg");
    fs::write(
        &cfg,
        format!("# comment\nout={}\nn=3\nsize = 16\n", out.display()),
    )
    .unwrap();
    let o = run(&["--config", p(&cfg), "synth", "--n", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let listed = fs::read_to_string(out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(listed.lines().filter(|l| !l.trim().is_empty()).count(), 1);
    assert_eq!(
        load_image(&out.join("ref_0000.ppm")).unwrap().shape(),
        &[3, 16, 16]
    );

    fs::write(&cfg, "out=/tmp/never\nlearning-rate=3\n").unwrap();
    let o = run(&["--config", p(&cfg), "synth"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning-rate"), "{}", stderr(&o));

    let o = run(&[
        "--config",
        p(&dir.path().join("absent.cfg")),
        "synth",
        "--out",
        p(&dir.path().join("z")),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = TempDir::new().unwrap();
    let make = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let out = dir.path().join(name);
        let mut c = bin();
        c.args(["synth", "--out", p(&out), "--n", "1", "--size", "16"]);
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        if let Some(e) = env {
            c.env("ECAF_SEED", e);
        }
        let o = c.output().unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read(out.join("ref_0000.ppm")).unwrap()
    };
    let env7 = make("a", Some("7"), None);
    let flag7 = make("b", None, Some("7"));
    let flag_wins = make("c", Some("9"), Some("7"));
    let default = make("d", None, None);
    assert_eq!(env7, flag7);
    assert_eq!(flag_wins, flag7);
    assert_ne!(default, flag7);

    let o = bin()
        .args(["synth", "--out", p(&dir.path().join("e"))])
        .env("ECAF_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn zero_iterations_log_initial_metrics_and_give_an_identity_checkpoint() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path());
    let run_dir = dir.path().join("run");
    let mut args = train_args(&manifest, &run_dir);
    args.extend(["--iters", "0"]);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("full-scale: iters 250000"), "{err}");

    let log = fs::read_to_string(run_dir.join("train.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["iter"], 0);
    assert!(lines[0]["psnr_db"].as_f64().unwrap() > 0.0);

    let ckpt = run_dir.join("latest.ecaf");
    let input = dir.path().join("data").join("low_0000.ppm");
    let output = dir.path().join("out.png");
    let o = run(&[
        "enhance",
        "--ckpt",
        p(&ckpt),
        "--in",
        p(&input),
        "--out",
        p(&output),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains(" s"), "{}", stdout(&o));
    let (a, b) = (load_image(&input).unwrap(), load_image(&output).unwrap());
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!(
            (i32::from(quantize(f64::from(*x))) - i32::from(quantize(f64::from(*y)))).abs() <= 1
        );
    }

    // A config the checkpoint was not built with is named in the error.
    let o = run(&[
        "enhance",
        "--ckpt",
        p(&ckpt),
        "--in",
        p(&input),
        "--out",
        p(&output),
        "--c0",
        "8",
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("c0"), "{}", stderr(&o));

    let o = run(&[
        "enhance",
        "--ckpt",
        p(&dir.path().join("none.ecaf")),
        "--in",
        p(&input),
        "--out",
        p(&output),
    ]);
    assert_eq!(code(&o), 1);

    let o = run(&["eval", "--manifest", p(&manifest), "--ckpt", p(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn short_training_run_logs_json_and_records_ablations() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path());
    let run_dir = dir.path().join("run");
    let mut args = train_args(&manifest, &run_dir);
    args.extend([
        "--iters",
        "4",
        "--log-every",
        "2",
        "--eval-every",
        "4",
        "--ablate",
        "no-dmsa",
        "--seed",
        "1",
    ]);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(run_dir.join("train.jsonl")).unwrap();
    let iters: Vec<u64> = log
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["iter"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(iters, vec![0, 2, 4]);
    let ck = Checkpoint::load(&run_dir.join("latest.ecaf")).unwrap();
    assert_eq!(ck.config.attention, AttentionKind::Single);
    assert!(
        String::from_utf8_lossy(&fs::read(run_dir.join("latest.ecaf")).unwrap())
            .contains("attention=mhsa")
    );

    // Resuming with a different width is refused and names the key.
    let resumed_dir = dir.path().join("run2");
    let ckpt = run_dir.join("latest.ecaf");
    let mut args = vec![
        "train",
        "--manifest",
        p(&manifest),
        "--out",
        p(&resumed_dir),
        "--patch",
        "32",
        "--batch",
        "1",
    ];
    args.extend([
        "--c0",
        "6",
        "--iters",
        "6",
        "--ablate",
        "no-dmsa",
        "--seed",
        "1",
        "--resume",
        p(&ckpt),
    ]);
    let o = run(&args);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("c0"), "{}", stderr(&o));
}

#[test]
fn bad_training_values_are_argument_errors() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path());
    let run_dir = dir.path().join("run");
    for extra in [
        &["--patch", "64"][..],
        &["--lambda", "1.5"],
        &["--ablate", "no-such"],
        &["--heads", "2,2"],
    ] {
        let mut args = train_args(&manifest, &run_dir);
        args.extend(extra);
        let o = run(&args);
        assert_eq!(code(&o), 2, "{extra:?}: {}", stderr(&o));
    }
}

#[test]
fn divergent_training_exits_with_a_diagnostic() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path());
    let run_dir = dir.path().join("run");
    let mut args = train_args(&manifest, &run_dir);
    args.extend(["--iters", "20", "--lr-start", "3e38", "--lr-end", "3e38"]);
    let o = run(&args);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn eval_scores_identity_baseline_and_caps_identical_pairs() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path());
    let o = run(&["eval", "--manifest", p(&manifest)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let json: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert_eq!(json["model"], "identity");
    assert_eq!(json["pairs"].as_array().unwrap().len(), 2);
    assert!(json["mean_psnr_db"].as_f64().unwrap() < 30.0);
    assert!(text.starts_with("pair"));

    let same = dir.path().join("data").join("same.tsv");
    fs::write(&same, "ref_0000.ppm\tref_0000.ppm\n").unwrap();
    let o = run(&["eval", "--manifest", p(&same)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(stdout(&o).lines().last().unwrap()).unwrap();
    assert_eq!(json["mean_psnr_db"].as_f64().unwrap(), 99.0);
    assert_eq!(json["mean_ssim"].as_f64().unwrap(), 1.0);
}

#[test]
fn verify_fails_with_a_planted_gradient_bug() {
    let o = run(&["verify", "--plant-grad-bug"]);
    assert_eq!(code(&o), 1, "{}", stdout(&o));
    assert!(stdout(&o).contains("FAIL  grad conv2d"), "{}", stdout(&o));
}

#[test]
fn verify_passes() {
    let o = run(&["verify"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(!stdout(&o).contains("FAIL"));
}
