//! Run configuration: TOML text with defaults for every knob, strict keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::encoder::BackboneSpec;
use crate::error::{ensure, Error, Result};
use crate::evaluation::{PreprocessConfig, ProfileName};
use crate::imaging::AugmentConfig;
use crate::perceptual::{MapMode, PerceptualConfig, ScoreMode};
use crate::qformer::{query_count, QFormerConfig};
use crate::training::{OptimizerConfig, ScheduleConfig, TrainSettings};

/// Environment variable naming the default directory for weight archives.
pub const WEIGHTS_DIR_ENV: &str = "QFAE_WEIGHTS_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    /// Tensor archive on disk.
    Archive,
    /// Seeded random weights (tests and desk-scale runs).
    Toy,
}

/// A frozen backbone: architecture plus where its weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub name: String,
    pub source: WeightSource,
    /// Defaults to `<weights_dir>/<name>.qfa`.
    pub archive: Option<PathBuf>,
    /// Defaults to `<weights_dir>/<name>.manifest.json` when that file exists.
    pub manifest: Option<PathBuf>,
    pub toy_seed: u64,
    /// Scale of the random class and position embeddings of toy weights.
    pub toy_token_std: f64,
    pub spec: BackboneSpec,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::dinov2_large()
    }
}

impl BackboneConfig {
    pub fn dinov2_large() -> Self {
        Self {
            name: "dinov2_vitl14_reg".into(),
            source: WeightSource::Archive,
            archive: None,
            manifest: None,
            toy_seed: 0,
            toy_token_std: 0.02,
            spec: BackboneSpec::vit_large_14_reg(),
        }
    }

    pub fn mae_large() -> Self {
        Self {
            name: "mae_vitl16".into(),
            spec: BackboneSpec::vit_large_16(),
            ..Self::dinov2_large()
        }
    }

    pub fn toy(name: &str, seed: u64, spec: BackboneSpec) -> Self {
        Self {
            name: name.into(),
            source: WeightSource::Toy,
            archive: None,
            manifest: None,
            toy_seed: seed,
            toy_token_std: 0.02,
            spec,
        }
    }

    pub fn archive_path(&self, weights_dir: &Path) -> PathBuf {
        resolve(weights_dir, self.archive.clone(), &format!("{}.qfa", self.name))
    }

    /// Explicit manifest, or the conventional sidecar if present.
    pub fn manifest_path(&self, weights_dir: &Path) -> Option<PathBuf> {
        match &self.manifest {
            Some(p) => Some(resolve(weights_dir, Some(p.clone()), "")),
            None => {
                let p = weights_dir.join(format!("{}.manifest.json", self.name));
                p.exists().then_some(p)
            }
        }
    }
}

fn resolve(dir: &Path, explicit: Option<PathBuf>, fallback: &str) -> PathBuf {
    match explicit {
        Some(p) if p.is_absolute() => p,
        Some(p) => dir.join(p),
        None => dir.join(fallback),
    }
}

/// Perceptual model plus the scoring and loss layer/patch sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualSection {
    /// Scoring layers (0-based block indices).
    pub layers: Vec<usize>,
    /// Scoring patch sizes.
    pub patch_sizes: Vec<usize>,
    pub score_mode: ScoreMode,
    pub map_mode: MapMode,
    pub train_layers: Vec<usize>,
    pub train_patch_sizes: Vec<usize>,
    pub model: BackboneConfig,
}

impl Default for PerceptualSection {
    fn default() -> Self {
        let eval = PerceptualConfig::eval_default();
        let train = PerceptualConfig::train_default();
        Self {
            layers: eval.layers,
            patch_sizes: eval.patch_sizes,
            score_mode: eval.score_mode,
            map_mode: eval.map_mode,
            train_layers: train.layers,
            train_patch_sizes: train.patch_sizes,
            model: BackboneConfig::mae_large(),
        }
    }
}

impl PerceptualSection {
    pub fn eval_config(&self) -> PerceptualConfig {
        PerceptualConfig {
            layers: self.layers.clone(),
            patch_sizes: self.patch_sizes.clone(),
            score_mode: self.score_mode,
            map_mode: self.map_mode,
        }
    }

    pub fn train_config(&self) -> PerceptualConfig {
        PerceptualConfig {
            layers: self.train_layers.clone(),
            patch_sizes: self.train_patch_sizes.clone(),
            score_mode: self.score_mode,
            map_mode: self.map_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// `custom` scores with the `[perceptual]` settings as written.
    pub profile: ProfileName,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            profile: ProfileName::Custom,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub image_side: usize,
    pub out_dir: PathBuf,
    /// Falls back to `$QFAE_WEIGHTS_DIR`, then `weights`.
    pub weights_dir: Option<PathBuf>,
    pub encoders: Vec<BackboneConfig>,
    pub qformer: QFormerConfig,
    pub decoder: DecoderConfig,
    pub perceptual: PerceptualSection,
    pub train: TrainSettings,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub augment: AugmentConfig,
    pub preprocess: PreprocessConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            image_side: 224,
            out_dir: PathBuf::from("runs"),
            weights_dir: None,
            encoders: vec![BackboneConfig::dinov2_large()],
            qformer: QFormerConfig::default(),
            decoder: DecoderConfig::default(),
            perceptual: PerceptualSection::default(),
            train: TrainSettings::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            augment: AugmentConfig::default(),
            preprocess: PreprocessConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML text and validates it. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &span(&e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn weights_dir(&self) -> PathBuf {
        self.weights_dir
            .clone()
            .or_else(|| std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("weights"))
    }

    /// Number of latent queries implied by the image side and decoder patch.
    pub fn query_count(&self) -> Result<usize> {
        query_count(self.image_side, self.decoder.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let side = self.image_side;
        ensure!(side > 0, "image_side must be positive");
        ensure!(!self.encoders.is_empty(), "at least one encoder is required");
        for e in &self.encoders {
            e.spec.validate()?;
            e.spec.grid_for(side)?;
        }
        self.qformer.validate()?;
        self.decoder.validate()?;
        ensure!(self.decoder.channels == 3, "decoder.channels must be 3 (RGB reconstruction)");
        self.query_count()?;
        let pm = &self.perceptual.model.spec;
        pm.validate()?;
        self.perceptual.eval_config().validate(side, pm.depth)?;
        self.perceptual.train_config().validate(side, pm.depth)?;
        self.train.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        self.augment.validate()?;
        ensure!(
            self.preprocess.spatial_sigma > 0.0 && self.preprocess.range_sigma > 0.0,
            "preprocess sigmas must be positive"
        );
        Ok(())
    }

    /// Checks that every archive (and explicit manifest) the config names exists.
    pub fn validate_files(&self) -> Result<()> {
        let dir = self.weights_dir();
        for b in self.encoders.iter().chain(std::iter::once(&self.perceptual.model)) {
            if b.source != WeightSource::Archive {
                continue;
            }
            let a = b.archive_path(&dir);
            ensure!(a.is_file(), "weights archive for `{}` not found at {}", b.name, a.display());
            if let Some(m) = b.manifest_path(&dir) {
                ensure!(m.is_file(), "manifest for `{}` not found at {}", b.name, m.display());
            }
        }
        Ok(())
    }

    /// Small end-to-end configuration on 64x64 inputs with seeded toy
    /// backbones.
    pub fn desk_scale() -> Self {
        let enc = BackboneSpec {
            tap_layers: vec![1, 3],
            ..BackboneSpec::toy()
        };
        Self {
            image_side: 64,
            encoders: vec![BackboneConfig::toy("toy_encoder", 0, enc)],
            qformer: QFormerConfig {
                width: 64,
                heads: 4,
                mlp_ratio: 2.0,
                blocks: 1,
                layer_norm_eps: 1e-6,
            },
            decoder: DecoderConfig {
                width: 64,
                depth: 2,
                heads: 4,
                mlp_ratio: 2.0,
                patch_size: 8,
                channels: 3,
                layer_norm_eps: 1e-6,
            },
            perceptual: PerceptualSection {
                layers: vec![1, 2, 3],
                patch_sizes: vec![8, 16],
                score_mode: ScoreMode::MaxThenMean,
                map_mode: MapMode::Mean,
                train_layers: vec![2, 3],
                train_patch_sizes: vec![8, 16],
                model: BackboneConfig {
                    toy_token_std: 3.0,
                    ..BackboneConfig::toy("toy_perceptual", 1, BackboneSpec::toy())
                },
            },
            train: TrainSettings {
                epochs: 4,
                batch_size: 16,
                augment: false,
                ..TrainSettings::default()
            },
            optimizer: OptimizerConfig {
                max_lr: 1e-3,
                ..OptimizerConfig::default()
            },
            ..Self::default()
        }
    }
}

fn span(e: &toml::de::Error) -> String {
    e.span().map(|s| format!(" (at byte {})", s.start)).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.encoders[0].spec, BackboneSpec::vit_large_14_reg());
        assert_eq!(cfg.query_count().unwrap(), 784);
        assert_eq!(cfg.decoder.patch_size, 8);
        assert_eq!(cfg.optimizer.max_lr, 8e-5);
        assert_eq!(cfg.train.seeds, vec![42, 7, 13, 65, 91]);
    }

    #[test]
    fn roundtrip() {
        for cfg in [RunConfig::default(), RunConfig::desk_scale()] {
            let text = cfg.to_toml().unwrap();
            assert_eq!(RunConfig::parse(&text).unwrap(), cfg, "{text}");
        }
    }

    #[test]
    fn overrides_and_errors() {
        let cfg = RunConfig::parse("[perceptual]\npatch_sizes = [8, 16]\n").unwrap();
        assert_eq!(cfg.perceptual.patch_sizes, vec![8, 16]);
        let e = RunConfig::parse("[optimizer]\nmax_lr = -1\n").unwrap_err();
        assert!(matches!(e, Error::Validation(_)), "{e}");
        assert!(matches!(RunConfig::parse("sed = 1\n").unwrap_err(), Error::Config(_)));
        assert!(matches!(RunConfig::parse("seed = \"x\"\n").unwrap_err(), Error::Config(_)));
        assert!(matches!(RunConfig::parse("[decoder]\npatch_size = 9\n").unwrap_err(), Error::Validation(_)));
        assert!(matches!(RunConfig::load("/nonexistent/run.toml").unwrap_err(), Error::Io { .. }));
    }

    #[test]
    fn two_encoders() {
        let text = r#"
[[encoders]]
name = "a"

[[encoders]]
name = "dino_vitb8"
[encoders.spec]
depth = 12
width = 768
heads = 12
patch_size = 8
special_tokens = 1
mlp_ratio = 4.0
pretrain_grid = 28
layer_scale = false
layer_norm_eps = 1e-6
tap_layers = [8, 10]
channels = 3
"#;
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.encoders.len(), 2);
        assert_eq!(cfg.encoders[1].spec.width, 768);
    }

    #[test]
    fn weight_paths() {
        let b = BackboneConfig::dinov2_large();
        assert_eq!(b.archive_path(Path::new("/w")), PathBuf::from("/w/dinov2_vitl14_reg.qfa"));
        let cfg = RunConfig {
            weights_dir: Some("/definitely/missing".into()),
            ..RunConfig::default()
        };
        assert!(cfg.validate_files().is_err());
        assert!(RunConfig::desk_scale().validate_files().is_ok());
    }
}
