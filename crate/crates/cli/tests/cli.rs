use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "epochs": 2,
  "batch_size": 4,
  "splits": { "n_train": 8, "n_val": 4, "n_test": 4 },
  "model": { "base_channels": 4, "depth": 3, "image_size": 32 },
  "data": { "image_size": 32 }
}"#;

fn daunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_daunet"))
        .args(args)
        .env_remove("DAUNET_SEED")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn train_into(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", s(cfg), "--out-dir", s(out)];
    args.extend_from_slice(extra);
    daunet(&args)
}

fn count_ext(dir: &Path, ext: &str) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext))
        .count()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(daunet(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(daunet(&["train"]).status.code(), Some(1));
    assert_eq!(daunet(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = train_into(&cfg, &dir.path().join("r"), &["--set", "model.no_such_key=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.no_such_key"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = daunet(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&dir.path().join("absent.ckpt")),
        "--out-dir",
        s(&dir.path().join("e")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_and_robustness_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b, u) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("u"));

    for out in [&a, &b] {
        let r = train_into(&cfg, out, &[]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    for f in ["manifest.json", "log.csv", "best.ckpt"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    for f in ["log.csv", "best.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let log = std::fs::read_to_string(a.join("log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,step,train_loss,val_dsc"));
    assert_eq!(log.lines().count(), 1 + 2 * 2);

    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["config"]["model"]["base_channels"], 4);
    let hash = manifest["checkpoint_sha256"]["best.ckpt"].as_str().unwrap();
    assert_eq!(hash.len(), 64);

    let r = train_into(&cfg, &u, &["--set", "model.use_deform_bottleneck=false", "--set", "model.use_simam=false"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    let e = dir.path().join("eval");
    let r = daunet(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&a.join("best.ckpt")),
        "--out-dir",
        s(&e),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let metrics = std::fs::read_to_string(e.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 4 * 2);
    assert!(count_ext(&e, "pgm") >= 8);

    let rb = dir.path().join("rob");
    let r = daunet(&[
        "robustness",
        "--config",
        s(&cfg),
        "--daunet",
        s(&a.join("best.ckpt")),
        "--unet",
        s(&u.join("best.ckpt")),
        "--out-dir",
        s(&rb),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let table = std::fs::read_to_string(rb.join("robustness.csv")).unwrap();
    assert_eq!(table.lines().next(), Some("model,condition,mean_dsc,drop"));
    assert_eq!(table.lines().count(), 1 + 2 * 5);
    assert!(count_ext(&rb, "pgm") >= 4);

    // The checkpoint carries its own architecture; only the data must agree.
    let e2 = dir.path().join("eval2");
    let eval_with = |set: &str, out: &Path| {
        daunet(&[
            "eval",
            "--config",
            s(&cfg),
            "--set",
            set,
            "--checkpoint",
            s(&a.join("best.ckpt")),
            "--out-dir",
            s(out),
        ])
    };
    assert!(eval_with("model.base_channels=8", &e2).status.success());
    assert_eq!(std::fs::read_to_string(e2.join("metrics.csv")).unwrap(), metrics);
    let r = eval_with("data.image_size=64", &dir.path().join("bad"));
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn seed_comes_from_the_environment_unless_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = |seed_env: &str, extra: &[&str]| {
        let mut args = vec!["info", "--config", s(&cfg)];
        args.extend_from_slice(extra);
        let out = Command::new(env!("CARGO_BIN_EXE_daunet"))
            .args(&args)
            .env("DAUNET_SEED", seed_env)
            .output()
            .unwrap();
        assert!(out.status.success());
        String::from_utf8(out.stdout).unwrap()
    };
    assert!(run("7", &[]).contains("\"seed\": 7"));
    assert!(run("7", &["--set", "seed=3"]).contains("\"seed\": 3"));
}

#[test]
fn grad_check_reports_every_case() {
    let out = daunet(&["grad-check", "--seeds", "4"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for op in ["conv2d", "conv_transpose2d", "max_pool2d", "deform_conv2d", "simam_attend", "dice_loss"] {
        assert!(text.contains(op), "{op}");
    }
}

#[test]
fn generate_writes_images_and_masks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("g");
    let r = daunet(&["generate", "--config", s(&cfg), "--limit", "2", "--out-dir", s(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("manifest.json").is_file());
    // Three splits, two samples each, an image plus one mask per class.
    assert_eq!(count_ext(&out, "pgm"), 3 * 2 * 3);
}
