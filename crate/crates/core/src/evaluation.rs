//! AUROC, evaluation profiles, dataset discovery, scoring and multi-seed reports.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::{Binder, Tape};
use crate::encoder::FrozenBackbone;
use crate::error::{ensure, Error, Result};
use crate::imaging::{
    bilateral_filter, liver_pipeline, load_image, normalize, resize, BilateralParams, ImageTensor,
    NORM_MEAN, NORM_STD,
};
use crate::model::{encoder_features, Qfae};
use crate::perceptual::{
    image_score, pixel_map, AnomalyMapStack, FeaturePyramid, MapMode, PerceptualConfig, PerceptualModel,
    ScoreMode,
};
use crate::tensor::Matrix;

/// Area under the ROC curve via the Mann-Whitney statistic with average
/// ranks, so tied scores count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    ensure!(
        scores.len() == labels.len(),
        "{} scores but {} labels",
        scores.len(),
        labels.len()
    );
    ensure!(scores.iter().all(|s| !s.is_nan()), "scores contain NaN");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    ensure!(n_pos > 0 && n_neg > 0, "AUROC needs both positive and negative labels");
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their average
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileName {
    Brats,
    Resc,
    Rsna,
    Liver,
    Custom,
}

impl std::str::FromStr for ProfileName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "brats" => Self::Brats,
            "resc" => Self::Resc,
            "rsna" => Self::Rsna,
            "liver" => Self::Liver,
            "custom" => Self::Custom,
            other => {
                return Err(Error::validation(format!(
                    "unknown profile `{other}` (expected brats, resc, rsna, liver or custom)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BilateralStage {
    /// Filter the cropped ROI before it is pasted.
    Roi,
    /// Filter the whole canvas after pasting.
    Canvas,
}

/// Optional image preprocessing applied when loading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub liver_roi: bool,
    pub bilateral: bool,
    pub bilateral_stage: BilateralStage,
    pub spatial_sigma: f64,
    pub range_sigma: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        let b = BilateralParams::default();
        Self {
            liver_roi: false,
            bilateral: false,
            bilateral_stage: BilateralStage::Roi,
            spatial_sigma: b.spatial_sigma,
            range_sigma: b.range_sigma,
        }
    }
}

impl PreprocessConfig {
    pub fn liver() -> Self {
        Self {
            liver_roi: true,
            bilateral: true,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.liver_roi && !self.bilateral
    }

    fn bilateral_params(&self) -> BilateralParams {
        BilateralParams {
            spatial_sigma: self.spatial_sigma,
            range_sigma: self.range_sigma,
        }
    }

    /// Applies the configured steps to an unnormalised image. The ROI step
    /// needs a single-channel image and produces a `side x side` canvas.
    pub fn apply(&self, img: &ImageTensor, side: usize) -> Result<ImageTensor> {
        let mut img = img.clone();
        if self.liver_roi {
            let inner = (self.bilateral && self.bilateral_stage == BilateralStage::Roi)
                .then(|| self.bilateral_params());
            img = liver_pipeline(&img, side, inner)?.image;
            if self.bilateral && self.bilateral_stage == BilateralStage::Canvas {
                img = bilateral_filter(&img, self.spatial_sigma, self.range_sigma)?;
            }
        } else if self.bilateral {
            img = bilateral_filter(&img, self.spatial_sigma, self.range_sigma)?;
        }
        Ok(img)
    }
}

/// Per-dataset scoring configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProfile {
    pub name: ProfileName,
    pub perceptual: PerceptualConfig,
    pub preprocess: PreprocessConfig,
}

impl EvalProfile {
    /// Named profile; `custom` starts from `base`.
    pub fn named(name: ProfileName, base: &PerceptualConfig) -> Self {
        let mut perceptual = PerceptualConfig::eval_default();
        let mut preprocess = PreprocessConfig::default();
        match name {
            ProfileName::Brats | ProfileName::Resc => {}
            ProfileName::Rsna => perceptual.score_mode = ScoreMode::MeanThenMax,
            ProfileName::Liver => {
                perceptual.patch_sizes = vec![8, 16];
                preprocess = PreprocessConfig::liver();
            }
            ProfileName::Custom => perceptual = base.clone(),
        }
        Self {
            name,
            perceptual,
            preprocess,
        }
    }

    pub fn label(&self) -> &'static str {
        match self.name {
            ProfileName::Brats => "brats",
            ProfileName::Resc => "resc",
            ProfileName::Rsna => "rsna",
            ProfileName::Liver => "liver",
            ProfileName::Custom => "custom",
        }
    }
}

/// Loads an image for the model: optional preprocessing, gray to RGB, resize,
/// normalise. No stochastic augmentation is involved.
pub fn load_for_model(path: &Path, side: usize, preprocess: &PreprocessConfig) -> Result<Matrix<f32>> {
    let (img, _) = load_image(path)?;
    prepare_for_model(&img, side, preprocess)
}

pub fn prepare_for_model(img: &ImageTensor, side: usize, preprocess: &PreprocessConfig) -> Result<Matrix<f32>> {
    let img = if preprocess.is_identity() {
        img.clone()
    } else {
        let gray = if preprocess.liver_roi { img.to_gray() } else { img.clone() };
        preprocess.apply(&gray, side)?
    };
    let rgb = img.to_rgb();
    Ok(normalize(&resize(&rgb, side, side)?, NORM_MEAN, NORM_STD)?.to_matrix())
}

/// Everything needed to score images with a trained model.
pub struct Scorer<'a> {
    pub encoders: &'a [FrozenBackbone<f32>],
    pub model: &'a Qfae<f32>,
    pub perceptual: &'a PerceptualModel<f32>,
    pub profile: &'a EvalProfile,
    pub side: usize,
}

/// Result of scoring one image.
#[derive(Debug, Clone)]
pub struct Scored {
    pub score: f64,
    pub maps: AnomalyMapStack,
    pub reconstruction: Matrix<f32>,
}

impl Scorer<'_> {
    /// Reconstructs a normalised `C x side²` image and scores it.
    pub fn score_matrix(&self, image: &Matrix<f32>) -> Result<Scored> {
        let tape = Tape::new();
        let b = Binder::frozen(&tape);
        let x = tape.borrowed(image, false);
        let feats = encoder_features(&b, self.encoders, x, self.side)?;
        let recon = self.model.reconstruct_from_features(&b, &feats)?;
        let reconstruction = tape.value(recon).clone();
        drop(b);
        drop(tape);
        let fx: FeaturePyramid<f32> = self.perceptual.features(image)?;
        let fy = self.perceptual.features(&reconstruction)?;
        let maps = AnomalyMapStack::from_pyramids(&fx, &fy)?;
        let score = image_score(&maps, self.profile.perceptual.score_mode)?;
        Ok(Scored {
            score,
            maps,
            reconstruction,
        })
    }

    pub fn score_path(&self, path: &Path) -> Result<Scored> {
        self.score_matrix(&load_for_model(path, self.side, &self.profile.preprocess)?)
    }

    /// Input-resolution anomaly map.
    pub fn pixel_map(&self, scored: &Scored) -> Result<Matrix<f64>> {
        pixel_map(&scored.maps, self.profile.perceptual.map_mode, (self.side, self.side))
    }

    pub fn map_mode(&self) -> MapMode {
        self.profile.perceptual.map_mode
    }
}

/// One labelled test image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestItem {
    pub path: PathBuf,
    pub anomalous: bool,
    #[serde(default)]
    pub mask: Option<PathBuf>,
}

/// A dataset in the `train/good`, `test/good`, `test/ungood` layout, with
/// optional `test/masks` and an optional `index.json` listing the files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub root: PathBuf,
    pub train: Vec<PathBuf>,
    pub test: Vec<TestItem>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    #[serde(default)]
    train: Vec<PathBuf>,
    #[serde(default)]
    test: Vec<TestItem>,
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "tif" | "tiff" | "bmp")
    )
}

/// Sorted image files of `dir`; a missing directory is empty.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && is_image(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        ensure!(root.is_dir(), "dataset root {} is not a directory", root.display());
        let index = root.join("index.json");
        if index.exists() {
            let text = std::fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
            let idx: Index = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", index.display())))?;
            let abs = |p: PathBuf| if p.is_absolute() { p } else { root.join(p) };
            return Ok(Self {
                train: idx.train.into_iter().map(abs).collect(),
                test: idx
                    .test
                    .into_iter()
                    .map(|t| TestItem {
                        path: abs(t.path),
                        anomalous: t.anomalous,
                        mask: t.mask.map(abs),
                    })
                    .collect(),
                root,
            });
        }
        let train = list_images(&root.join("train/good"))?;
        let masks = root.join("test/masks");
        let mut test: Vec<TestItem> = list_images(&root.join("test/good"))?
            .into_iter()
            .map(|path| TestItem {
                path,
                anomalous: false,
                mask: None,
            })
            .collect();
        for path in list_images(&root.join("test/ungood"))? {
            let mask = path.file_name().map(|n| masks.join(n)).filter(|m| m.exists());
            test.push(TestItem {
                path,
                anomalous: true,
                mask,
            });
        }
        Ok(Self { root, train, test })
    }
}

/// Scores and AUROC of one checkpoint on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub auroc: f64,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Scores every test item in parallel; order follows `items`.
pub fn evaluate(scorer: &Scorer<'_>, items: &[TestItem], seed: u64) -> Result<RunResult> {
    use rayon::prelude::*;
    ensure!(!items.is_empty(), "test corpus is empty");
    let scores: Vec<f64> = items
        .par_iter()
        .map(|t| scorer.score_path(&t.path).map(|s| s.score))
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = items.iter().map(|t| t.anomalous).collect();
    Ok(RunResult {
        seed,
        auroc: auroc(&scores, &labels)?,
        scores,
        labels,
    })
}

/// As [`evaluate`] for already-prepared normalised images.
pub fn evaluate_matrices(scorer: &Scorer<'_>, images: &[(Matrix<f32>, bool)], seed: u64) -> Result<RunResult> {
    use rayon::prelude::*;
    ensure!(!images.is_empty(), "test corpus is empty");
    let scores: Vec<f64> = images
        .par_iter()
        .map(|(m, _)| scorer.score_matrix(m).map(|s| s.score))
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = images.iter().map(|(_, l)| *l).collect();
    Ok(RunResult {
        seed,
        auroc: auroc(&scores, &labels)?,
        scores,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAuroc {
    pub seed: u64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub profile: String,
    pub n_images: usize,
    /// Mean AUROC over runs (equal to the single AUROC for one run).
    pub auroc: f64,
    pub per_seed: Vec<SeedAuroc>,
    pub mean: f64,
    /// Population standard deviation over runs.
    pub std: f64,
    pub std_kind: String,
}

impl Report {
    pub fn from_runs(profile: &str, runs: &[RunResult]) -> Result<Self> {
        ensure!(!runs.is_empty(), "no evaluation runs");
        let n_images = runs[0].scores.len();
        ensure!(
            runs.iter().all(|r| r.scores.len() == n_images),
            "runs were evaluated on different test sets"
        );
        let values: Vec<f64> = runs.iter().map(|r| r.auroc).collect();
        let (mean, std) = mean_std(&values);
        Ok(Self {
            profile: profile.to_string(),
            n_images,
            auroc: mean,
            per_seed: runs
                .iter()
                .map(|r| SeedAuroc {
                    seed: r.seed,
                    auroc: r.auroc,
                })
                .collect(),
            mean,
            std,
            std_kind: "population".to_string(),
        })
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_hand_cases() {
        assert_eq!(auroc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auroc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn auroc_matches_pair_count() {
        let s = [0.3, 0.1, 0.3, 0.7, 0.2, 0.3, 0.9];
        let l = [true, false, false, true, true, false, false];
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
                    den += 1.0;
                    num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        assert!((auroc(&s, &l).unwrap() - num / den).abs() < 1e-15);
    }

    #[test]
    fn profiles() {
        let base = PerceptualConfig::train_default();
        assert_eq!(EvalProfile::named(ProfileName::Brats, &base).perceptual, PerceptualConfig::eval_default());
        let rsna = EvalProfile::named(ProfileName::Rsna, &base);
        assert_eq!(rsna.perceptual.score_mode, ScoreMode::MeanThenMax);
        let liver = EvalProfile::named(ProfileName::Liver, &base);
        assert_eq!(liver.perceptual.patch_sizes, vec![8, 16]);
        assert!(liver.preprocess.liver_roi);
        assert_eq!(EvalProfile::named(ProfileName::Custom, &base).perceptual, base);
        assert!("nope".parse::<ProfileName>().is_err());
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn dataset_layout() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::filled(1, 4, 4, 0.5);
        for sub in ["train/good", "test/good", "test/ungood", "test/masks"] {
            std::fs::create_dir_all(dir.path().join(sub)).unwrap();
        }
        for (sub, name) in [("train/good", "b.png"), ("train/good", "a.png"), ("test/good", "c.png"), ("test/ungood", "d.png"), ("test/masks", "d.png")] {
            crate::imaging::save_image(&img, dir.path().join(sub).join(name), crate::imaging::BitDepth::Eight).unwrap();
        }
        std::fs::write(dir.path().join("train/good/notes.txt"), "x").unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.train.len(), 2);
        assert!(ds.train[0].ends_with("a.png"));
        assert_eq!(ds.test.len(), 2);
        assert!(!ds.test[0].anomalous && ds.test[1].anomalous);
        assert!(ds.test[1].mask.is_some());
    }
}
