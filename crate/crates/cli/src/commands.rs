use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use qfae::config::RunConfig;
use qfae::evaluation::{
    evaluate, evaluate_matrices, list_images, prepare_for_model, Dataset, PreprocessConfig, ProfileName, Report,
    RunResult, Scorer, TestItem,
};
use qfae::gradcheck::{run_all, TOLERANCE};
use qfae::imaging::{load_image, save_image};
use qfae::perceptual::{save_map_png, write_raw_map};
use qfae::pipeline::{read_checkpoint, Pipeline};
use qfae::synthetic::{generate, SyntheticConfig};
use qfae::{Error, Result};

use crate::{Cli, Command, Common};

pub fn run(cli: Cli) -> Result<ExitCode> {
    let Cli { common, command } = cli;
    match command {
        Command::PreprocessLiver {
            input,
            side,
            no_bilateral,
        } => preprocess_liver(&common, &input, side, !no_bilateral),
        Command::Train { data } => train(&common, &data),
        Command::Evaluate {
            checkpoints,
            data,
            profile,
            maps,
        } => evaluate_checkpoints(&common, &checkpoints, &data, profile, maps),
        Command::Score {
            image,
            checkpoint,
            profile,
        } => score(&common, &image, &checkpoint, profile),
        Command::ExportMaps {
            checkpoint,
            data,
            profile,
        } => export_maps(&common, &checkpoint, &data, profile),
        Command::Gradcheck => gradcheck(&common),
        Command::SyntheticBench { runs, write_corpus } => synthetic_bench(&common, runs, write_corpus),
    }
}

fn load_config(common: &Common, fallback: fn() -> RunConfig) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => fallback(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn preprocess_liver(common: &Common, input: &Path, side: usize, bilateral: bool) -> Result<ExitCode> {
    let cfg = load_config(common, RunConfig::default)?;
    let out = common
        .out
        .as_deref()
        .ok_or_else(|| Error::validation("preprocess-liver needs --out"))?;
    let pre = PreprocessConfig {
        liver_roi: true,
        bilateral,
        ..cfg.preprocess.clone()
    };
    create_dir(out)?;
    let files = list_images(input)?;
    if files.is_empty() {
        return Err(Error::validation(format!("no images found in {}", input.display())));
    }
    for path in &files {
        let (img, depth) = load_image(path)?;
        let processed = pre.apply(&img.to_gray(), side)?;
        let dest = out.join(path.file_name().expect("listed files have names"));
        save_image(&processed, &dest, depth)?;
    }
    eprintln!("wrote {} images to {}", files.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn train(common: &Common, data: &Path) -> Result<ExitCode> {
    let cfg = load_config(common, RunConfig::default)?;
    cfg.validate_files()?;
    let dataset = Dataset::open(data)?;
    if dataset.train.is_empty() {
        return Err(Error::validation(format!("no training images under {}", data.display())));
    }
    let out = cfg.out_dir.clone();
    let seeds = cfg.train.seeds.clone();
    let pipeline = Pipeline::build(cfg)?;
    let images = pipeline.load_training_images(&dataset.train)?;
    create_dir(&out)?;
    for seed in seeds {
        let log_path = out.join(format!("seed_{seed}.log.jsonl"));
        let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        let started = Instant::now();
        let run = pipeline.train(seed, &images, Some(&mut log))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        let ckpt = out.join(format!("seed_{seed}.qfae"));
        run.checkpoint.write(&ckpt)?;
        println!(
            "seed {seed}: {} steps, final loss {:.6}, {:.1}s -> {}",
            run.outcome.steps,
            run.outcome.final_loss,
            started.elapsed().as_secs_f64(),
            ckpt.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn write_maps(scorer: &Scorer<'_>, items: &[TestItem], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for item in items {
        let scored = scorer.score_path(&item.path)?;
        let map = scorer.pixel_map(&scored)?;
        let name = stem(&item.path);
        save_map_png(&map, dir.join(format!("{name}.png")))?;
        write_raw_map(&map, dir.join(format!("{name}.raw")))?;
    }
    Ok(())
}

fn evaluate_checkpoints(
    common: &Common,
    checkpoints: &[PathBuf],
    data: &Path,
    profile: Option<ProfileName>,
    maps: bool,
) -> Result<ExitCode> {
    let dataset = Dataset::open(data)?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    create_dir(&out)?;
    let mut runs: Vec<RunResult> = Vec::new();
    let mut label = None;
    for ckpt in checkpoints {
        let (pipeline, model, info) = read_checkpoint(ckpt)?;
        let prof = pipeline.profile(profile);
        let eval = pipeline.eval_model(&prof)?;
        let scorer = pipeline.scorer(&model, &eval, &prof);
        let run = evaluate(&scorer, &dataset.test, info.seed)?;
        eprintln!("{}: AUROC {:.4}", ckpt.display(), run.auroc);
        if maps {
            write_maps(&scorer, &dataset.test, &out.join(format!("maps_seed_{}", info.seed)))?;
        }
        label.get_or_insert(prof.label());
        runs.push(run);
    }
    let report = Report::from_runs(label.unwrap_or("custom"), &runs)?;
    write_json(&out.join("runs.json"), &runs)?;
    write_json(&out.join("report.json"), &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn score(common: &Common, image: &Path, checkpoint: &Path, profile: Option<ProfileName>) -> Result<ExitCode> {
    let (pipeline, model, _) = read_checkpoint(checkpoint)?;
    let prof = pipeline.profile(profile);
    let eval = pipeline.eval_model(&prof)?;
    let scorer = pipeline.scorer(&model, &eval, &prof);
    let scored = scorer.score_path(image)?;
    let map = scorer.pixel_map(&scored)?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    create_dir(&out)?;
    let name = stem(image);
    let png = out.join(format!("{name}_map.png"));
    save_map_png(&map, &png)?;
    write_raw_map(&map, out.join(format!("{name}_map.raw")))?;
    println!("{}", scored.score);
    eprintln!("map written to {}", png.display());
    Ok(ExitCode::SUCCESS)
}

fn export_maps(common: &Common, checkpoint: &Path, data: &Path, profile: Option<ProfileName>) -> Result<ExitCode> {
    let dataset = Dataset::open(data)?;
    let (pipeline, model, _) = read_checkpoint(checkpoint)?;
    let prof = pipeline.profile(profile);
    let eval = pipeline.eval_model(&prof)?;
    let scorer = pipeline.scorer(&model, &eval, &prof);
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("maps"));
    let (bad, good): (Vec<TestItem>, Vec<TestItem>) = dataset.test.into_iter().partition(|t| t.anomalous);
    write_maps(&scorer, &good, &out.join("good"))?;
    write_maps(&scorer, &bad, &out.join("ungood"))?;
    eprintln!("wrote {} maps to {}", good.len() + bad.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(common: &Common) -> Result<ExitCode> {
    let results = run_all(common.seed.unwrap_or(0))?;
    let mut worst = 0.0f64;
    for r in &results {
        println!("{:<18} {:.3e} ({} entries)", r.name, r.max_rel_err, r.entries);
        worst = worst.max(r.max_rel_err);
    }
    println!("max_rel_err {worst:.3e}");
    if worst < TOLERANCE {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error[gradcheck]: max relative error {worst:.3e} exceeds {TOLERANCE:e}");
        Ok(ExitCode::from(1))
    }
}

fn synthetic_bench(common: &Common, runs: usize, write_corpus: bool) -> Result<ExitCode> {
    let cfg = load_config(common, RunConfig::desk_scale)?;
    if runs == 0 {
        return Err(Error::validation("--runs must be positive"));
    }
    let side = cfg.image_side;
    let corpus_cfg = SyntheticConfig {
        side,
        ..SyntheticConfig::default()
    };
    let corpus = generate(&corpus_cfg, cfg.seed)?;
    let out = cfg.out_dir.clone();
    create_dir(&out)?;
    if write_corpus {
        corpus.write(&out.join("corpus"))?;
    }
    let seeds: Vec<u64> = cfg.train.seeds.iter().copied().take(runs).collect();
    let pipeline = Pipeline::build(cfg)?;
    let prof = pipeline.profile(None);
    let eval = pipeline.eval_model(&prof)?;
    let test = corpus
        .test
        .iter()
        .map(|(img, bad, _)| Ok((prepare_for_model(img, side, &PreprocessConfig::default())?, *bad)))
        .collect::<Result<Vec<_>>>()?;
    let mut results = Vec::new();
    for seed in seeds {
        let started = Instant::now();
        let run = pipeline.train(seed, &corpus.train, None)?;
        let scorer = pipeline.scorer(&run.model, &eval, &prof);
        let result = evaluate_matrices(&scorer, &test, seed)?;
        println!(
            "seed {seed}: AUROC {:.4}, final loss {:.5}, {:.1}s",
            result.auroc,
            run.outcome.final_loss,
            started.elapsed().as_secs_f64()
        );
        results.push(result);
    }
    let report = Report::from_runs("synthetic", &results)?;
    write_json(&out.join("report.json"), &report)?;
    println!("mean AUROC {:.4} +/- {:.4}", report.mean, report.std);
    Ok(ExitCode::SUCCESS)
}
