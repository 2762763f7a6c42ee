//! Wiring from a [`RunConfig`] to frozen models, training runs, checkpoints
//! and scorers.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::archive::{format_checksum, Manifest, TensorArchive};
use crate::config::{BackboneConfig, RunConfig, WeightSource};
use crate::encoder::{load_backbone, make_toy_backbone_with, FrozenBackbone};
use crate::error::{ensure, Error, Result};
use crate::evaluation::{EvalProfile, ProfileName, Scorer};
use crate::imaging::{load_image, ImageTensor};
use crate::model::Qfae;
use crate::perceptual::PerceptualModel;
use crate::training::{train, TrainContext, TrainOutcome};

pub const CHECKPOINT_FORMAT: &str = "qfae-checkpoint/1";

/// Builds one frozen backbone from its config.
pub fn load_frozen(cfg: &BackboneConfig, weights_dir: &Path) -> Result<FrozenBackbone<f32>> {
    match cfg.source {
        WeightSource::Toy => make_toy_backbone_with(cfg.toy_seed, &cfg.spec, cfg.toy_token_std),
        WeightSource::Archive => {
            let path = cfg.archive_path(weights_dir);
            let archive = TensorArchive::read(&path)?;
            let manifest = cfg.manifest_path(weights_dir).map(Manifest::read).transpose()?;
            load_backbone(&archive, manifest.as_ref(), &cfg.spec)
        }
    }
}

/// Checksums of every frozen weight set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrozenChecksums {
    pub encoders: Vec<u64>,
    pub perceptual: u64,
}

impl FrozenChecksums {
    fn encoders_text(&self) -> String {
        self.encoders.iter().map(|&c| format_checksum(c)).collect::<Vec<_>>().join(",")
    }
}

/// Frozen parts built from a config.
pub struct Pipeline {
    pub config: RunConfig,
    pub encoders: Vec<FrozenBackbone<f32>>,
    pub perceptual_base: FrozenBackbone<f32>,
    pub loss_model: PerceptualModel<f32>,
}

/// Result of one training run.
pub struct TrainedRun {
    pub model: Qfae<f32>,
    pub outcome: TrainOutcome,
    pub checkpoint: TensorArchive,
}

/// Run facts stored next to the checkpoint tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
}

impl Pipeline {
    pub fn build(config: RunConfig) -> Result<Self> {
        config.validate()?;
        config.validate_files()?;
        let dir = config.weights_dir();
        let encoders = config
            .encoders
            .iter()
            .map(|e| load_frozen(e, &dir))
            .collect::<Result<Vec<_>>>()?;
        let perceptual_base = load_frozen(&config.perceptual.model, &dir)?;
        let t = config.perceptual.train_config();
        let loss_model = PerceptualModel::new(&perceptual_base, &t.layers, &t.patch_sizes, config.image_side)?;
        Ok(Self {
            config,
            encoders,
            perceptual_base,
            loss_model,
        })
    }

    pub fn side(&self) -> usize {
        self.config.image_side
    }

    pub fn frozen_checksums(&self) -> FrozenChecksums {
        FrozenChecksums {
            encoders: self.encoders.iter().map(|e| e.checksum()).collect(),
            perceptual: self.perceptual_base.checksum(),
        }
    }

    /// Errors if any frozen weights differ from the values recorded at load.
    pub fn verify_frozen(&self) -> Result<()> {
        for (e, cfg) in self.encoders.iter().zip(&self.config.encoders) {
            ensure!(
                e.checksum() == e.recorded_checksum(),
                "encoder `{}` weights changed since load",
                cfg.name
            );
        }
        ensure!(
            self.perceptual_base.checksum() == self.perceptual_base.recorded_checksum(),
            "perceptual weights changed since load"
        );
        Ok(())
    }

    /// Freshly initialised trainable model for `seed`.
    pub fn new_model(&self, seed: u64) -> Result<Qfae<f32>> {
        let widths: Vec<usize> = self.encoders.iter().map(|e| e.width()).collect();
        Qfae::new(&widths, &self.config.qformer, &self.config.decoder, self.side(), seed)
    }

    pub fn train_context(&self) -> TrainContext<'_> {
        TrainContext {
            encoders: &self.encoders,
            perceptual: &self.loss_model,
            side: self.side(),
            augment: self.config.augment.clone(),
            settings: &self.config.train,
            optimizer: &self.config.optimizer,
            schedule: &self.config.schedule,
        }
    }

    /// Loads training images and applies the configured preprocessing. Images
    /// stay unnormalised; resizing happens during training.
    pub fn load_training_images(&self, paths: &[PathBuf]) -> Result<Vec<ImageTensor>> {
        use rayon::prelude::*;
        let pre = &self.config.preprocess;
        paths
            .par_iter()
            .map(|p| {
                let (img, _) = load_image(p)?;
                if pre.is_identity() {
                    Ok(img)
                } else {
                    pre.apply(&img, self.side())
                }
            })
            .collect()
    }

    /// Trains a fresh model for `seed` and packs the checkpoint.
    pub fn train(&self, seed: u64, images: &[ImageTensor], log: Option<&mut dyn Write>) -> Result<TrainedRun> {
        let before = self.frozen_checksums();
        let mut model = self.new_model(seed)?;
        let outcome = train(&self.train_context(), &mut model, images, seed, log)?;
        let after = self.frozen_checksums();
        ensure!(before == after, "frozen weights changed during training");
        self.verify_frozen()?;
        let checkpoint = self.checkpoint(&model, seed, &outcome)?;
        Ok(TrainedRun {
            model,
            outcome,
            checkpoint,
        })
    }

    /// Trainable tensors plus the config echo, seed, final loss and frozen
    /// checksums.
    pub fn checkpoint(&self, model: &Qfae<f32>, seed: u64, outcome: &TrainOutcome) -> Result<TensorArchive> {
        let mut a = model.to_archive();
        let sums = self.frozen_checksums();
        a.set_metadata("format", CHECKPOINT_FORMAT);
        a.set_metadata("config", self.config.to_toml()?);
        a.set_metadata("seed", seed.to_string());
        a.set_metadata("steps", outcome.steps.to_string());
        a.set_metadata("final_loss", format!("{:e}", outcome.final_loss));
        a.set_metadata("encoder_checksums", sums.encoders_text());
        a.set_metadata("perceptual_checksum", format_checksum(sums.perceptual));
        Ok(a)
    }

    /// Profile to score with: the named one, or the config's own settings.
    pub fn profile(&self, name: Option<ProfileName>) -> EvalProfile {
        let name = name.unwrap_or(self.config.eval.profile);
        let mut p = EvalProfile::named(name, &self.config.perceptual.eval_config());
        if name == ProfileName::Custom {
            p.preprocess = self.config.preprocess.clone();
        }
        p
    }

    pub fn eval_model(&self, profile: &EvalProfile) -> Result<PerceptualModel<f32>> {
        let c = &profile.perceptual;
        ensure!(
            c.patch_sizes.iter().all(|&p| self.side().is_multiple_of(p)),
            "profile `{}` patch sizes {:?} do not fit image side {}",
            profile.label(),
            c.patch_sizes,
            self.side()
        );
        PerceptualModel::new(&self.perceptual_base, &c.layers, &c.patch_sizes, self.side())
    }

    pub fn scorer<'a>(
        &'a self,
        model: &'a Qfae<f32>,
        perceptual: &'a PerceptualModel<f32>,
        profile: &'a EvalProfile,
    ) -> Scorer<'a> {
        Scorer {
            encoders: &self.encoders,
            model,
            perceptual,
            profile,
            side: self.side(),
        }
    }
}

fn meta<'m>(a: &'m TensorArchive, key: &str) -> Result<&'m str> {
    a.metadata()
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::manifest(key, "missing from checkpoint metadata"))
}

fn parse_meta<T: std::str::FromStr>(a: &TensorArchive, key: &str) -> Result<T> {
    meta(a, key)?
        .parse()
        .map_err(|_| Error::manifest(key, "unparsable checkpoint metadata"))
}

/// Rebuilds the pipeline recorded in a checkpoint and loads the trained
/// weights. Frozen weights must match the recorded checksums.
pub fn open_checkpoint(archive: &TensorArchive) -> Result<(Pipeline, Qfae<f32>, CheckpointInfo)> {
    ensure!(
        meta(archive, "format")? == CHECKPOINT_FORMAT,
        "unsupported checkpoint format `{}`",
        meta(archive, "format")?
    );
    let config = RunConfig::parse(meta(archive, "config")?)?;
    let info = CheckpointInfo {
        seed: parse_meta(archive, "seed")?,
        steps: parse_meta(archive, "steps")?,
        final_loss: parse_meta(archive, "final_loss")?,
    };
    let pipeline = Pipeline::build(config)?;
    let sums = pipeline.frozen_checksums();
    if meta(archive, "encoder_checksums")? != sums.encoders_text() {
        return Err(Error::manifest(
            "encoder_checksums",
            format!(
                "encoder weights {} differ from those used in training {}",
                sums.encoders_text(),
                meta(archive, "encoder_checksums")?
            ),
        ));
    }
    if meta(archive, "perceptual_checksum")? != format_checksum(sums.perceptual) {
        return Err(Error::manifest(
            "perceptual_checksum",
            "perceptual weights differ from those used in training",
        ));
    }
    let mut model = pipeline.new_model(info.seed)?;
    model.load_from_archive(archive)?;
    Ok((pipeline, model, info))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(Pipeline, Qfae<f32>, CheckpointInfo)> {
    open_checkpoint(&TensorArchive::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SyntheticConfig};

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::desk_scale();
        cfg.image_side = 32;
        cfg.decoder.depth = 1;
        cfg.perceptual.layers = vec![1, 3];
        cfg.train.epochs = 1;
        cfg.train.batch_size = 4;
        cfg
    }

    #[test]
    fn checkpoint_roundtrip_and_scoring() {
        let p = Pipeline::build(tiny()).unwrap();
        let data = generate(
            &SyntheticConfig {
                side: 32,
                square: 8,
                n_train: 8,
                n_test_good: 1,
                n_test_bad: 1,
                ..SyntheticConfig::default()
            },
            0,
        )
        .unwrap();
        let run = p.train(5, &data.train, None).unwrap();
        assert_eq!(run.outcome.steps, 2);
        let bytes = run.checkpoint.to_bytes();
        let (p2, model, info) = open_checkpoint(&TensorArchive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(info.seed, 5);
        assert_eq!(info.final_loss, run.outcome.final_loss);
        assert_eq!(model.to_archive().checksum(), run.model.to_archive().checksum());
        let profile = p2.profile(None);
        let eval = p2.eval_model(&profile).unwrap();
        let scorer = p2.scorer(&model, &eval, &profile);
        let img = crate::evaluation::prepare_for_model(&data.test[1].0, 32, &profile.preprocess).unwrap();
        let s = scorer.score_matrix(&img).unwrap();
        assert!(s.score.is_finite() && s.score >= 0.0);
        assert_eq!(scorer.pixel_map(&s).unwrap().shape(), (32, 32));
    }

    #[test]
    fn tampered_checksum_is_rejected() {
        let p = Pipeline::build(tiny()).unwrap();
        let model = p.new_model(1).unwrap();
        let outcome = TrainOutcome {
            records: Vec::new(),
            final_loss: 0.5,
            steps: 0,
        };
        let mut ck = p.checkpoint(&model, 1, &outcome).unwrap();
        ck.set_metadata("perceptual_checksum", "0000000000000000");
        assert!(matches!(open_checkpoint(&ck), Err(Error::Manifest { .. })));
    }

    #[test]
    fn mismatched_profile_is_a_validation_error() {
        let p = Pipeline::build(tiny()).unwrap();
        let profile = p.profile(Some(ProfileName::Brats));
        assert!(p.eval_model(&profile).unwrap_err().is_validation());
    }
}
