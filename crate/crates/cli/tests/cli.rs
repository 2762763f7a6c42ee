use std::path::Path;
use std::process::{Command, Output};

use qfae::config::RunConfig;
use qfae::evaluation::Report;
use qfae::imaging::{load_image, save_image, BitDepth, ImageTensor};
use qfae::synthetic::{generate, SyntheticConfig};

fn qfae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfae"))
        .args(args)
        .env_remove("QFAE_WEIGHTS_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let mut cfg = RunConfig::desk_scale();
    cfg.image_side = 32;
    cfg.decoder.depth = 1;
    cfg.perceptual.layers = vec![1, 3];
    cfg.train.epochs = 1;
    cfg.train.batch_size = 4;
    cfg.train.seeds = vec![1, 2];
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = qfae(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn help_exits_cleanly() {
    let o = qfae(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for sub in ["preprocess-liver", "train", "evaluate", "score", "export-maps", "gradcheck", "synthetic-bench"] {
        assert!(stdout(&o).contains(sub), "{sub} missing from help");
    }
}

#[test]
fn gradcheck_passes() {
    let o = qfae(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let last = stdout(&o).lines().last().unwrap().to_string();
    let value: f64 = last.strip_prefix("max_rel_err ").unwrap().parse().unwrap();
    assert!(value < 1e-4);
}

#[test]
fn config_errors_are_validation_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("[optimizer]\nmax_lr = -1\n", "error[validation]"),
        ("[optimizer]\nmax_lr_typo = 1\n", "error[config]"),
        ("seed = \"x\"\n", "error[config]"),
    ];
    for (i, (text, category)) in cases.iter().enumerate() {
        let path = dir.path().join(format!("c{i}.toml"));
        std::fs::write(&path, text).unwrap();
        let o = qfae(&["--config", path.to_str().unwrap(), "train", "--data", "."]);
        assert_eq!(o.status.code(), Some(3), "{text}: {}", stderr(&o));
        let err = stderr(&o);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(category), "{err}");
    }
    let o = qfae(&["--config", "/nonexistent/x.toml", "train", "--data", "."]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[io]"));
}

#[test]
fn missing_weights_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = qfae(&["--out", dir.path().to_str().unwrap(), "train", "--data", "."]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("not found"), "{}", stderr(&o));
}

#[test]
fn train_evaluate_score_export() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = tiny_config(root);
    let corpus = generate(
        &SyntheticConfig {
            side: 32,
            square: 8,
            n_train: 8,
            n_test_good: 3,
            n_test_bad: 3,
            ..SyntheticConfig::default()
        },
        0,
    )
    .unwrap();
    let data = root.join("data");
    corpus.write(&data).unwrap();
    let data = data.to_str().unwrap();
    let runs = root.join("runs");
    let runs_s = runs.to_str().unwrap();

    let o = qfae(&["--config", &config, "--out", runs_s, "train", "--data", data]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ck1 = runs.join("seed_1.qfae");
    let ck2 = runs.join("seed_2.qfae");
    assert!(ck1.exists() && ck2.exists());
    let log = std::fs::read_to_string(runs.join("seed_1.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let eval_dir = root.join("eval");
    let o = qfae(&[
        "--out",
        eval_dir.to_str().unwrap(),
        "evaluate",
        "--data",
        data,
        "--checkpoint",
        ck1.to_str().unwrap(),
        ck2.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Report = serde_json::from_str(&std::fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.per_seed.len(), 2);
    assert_eq!(report.n_images, 6);
    let (a, b) = (report.per_seed[0].auroc, report.per_seed[1].auroc);
    assert!((report.mean - (a + b) / 2.0).abs() < 1e-12);
    assert!((report.std - (a - b).abs() / 2.0).abs() < 1e-12);
    let printed: Report = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(printed, report);

    let image = std::fs::read_dir(Path::new(data).join("test/ungood")).unwrap().next().unwrap().unwrap().path();
    let score_dir = root.join("score");
    let o = qfae(&[
        "--out",
        score_dir.to_str().unwrap(),
        "score",
        "--image",
        image.to_str().unwrap(),
        "--checkpoint",
        ck1.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let score: f64 = stdout(&o).trim().parse().unwrap();
    assert!(score.is_finite() && (0.0..=2.0).contains(&score));
    let stem = image.file_stem().unwrap().to_str().unwrap();
    let (map, _) = load_image(score_dir.join(format!("{stem}_map.png"))).unwrap();
    assert_eq!((map.height(), map.width()), (32, 32));

    let maps = root.join("maps");
    let o = qfae(&[
        "--out",
        maps.to_str().unwrap(),
        "export-maps",
        "--data",
        data,
        "--checkpoint",
        ck1.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let count = |d: &str| std::fs::read_dir(maps.join(d)).unwrap().count();
    assert_eq!((count("good"), count("ungood")), (6, 6));

    // the brats profile scores at patch sizes that do not divide 32
    let o = qfae(&["score", "--image", image.to_str().unwrap(), "--checkpoint", ck1.to_str().unwrap(), "--profile", "brats"]);
    assert_eq!(o.status.code(), Some(3));
    let o = qfae(&["score", "--image", image.to_str().unwrap(), "--checkpoint", ck1.to_str().unwrap(), "--profile", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn preprocess_liver_keeps_bit_depth() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    std::fs::create_dir(&input).unwrap();
    let slice = ImageTensor::from_fn(1, 300, 40, |_, y, x| {
        if (20..280).contains(&y) && (5..30).contains(&x) {
            0.5
        } else {
            0.0
        }
    })
    .unwrap();
    save_image(&slice, input.join("a.png"), BitDepth::Sixteen).unwrap();
    save_image(&ImageTensor::filled(1, 50, 50, 0.0), input.join("b.png"), BitDepth::Eight).unwrap();
    let out = dir.path().join("out");
    let o = qfae(&["--out", out.to_str().unwrap(), "preprocess-liver", "--in", input.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (a, depth) = load_image(out.join("a.png")).unwrap();
    assert_eq!(depth, BitDepth::Sixteen);
    assert_eq!((a.height(), a.width()), (224, 224));
    let (b, depth) = load_image(out.join("b.png")).unwrap();
    assert_eq!(depth, BitDepth::Eight);
    assert!(b.data().iter().all(|&v| v == 0.0));

    let o = qfae(&["preprocess-liver", "--in", input.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}
