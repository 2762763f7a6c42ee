//! Procedural texture corpus with square defects for quick end-to-end runs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::imaging::{save_image, BitDepth, ImageTensor};
use crate::tensor::Fnv1a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub side: usize,
    pub n_train: usize,
    pub n_test_good: usize,
    pub n_test_bad: usize,
    pub square: usize,
    /// Sinusoidal components per texture.
    pub waves: usize,
    /// Largest spatial frequency in cycles per image.
    pub max_cycles: f64,
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            side: 64,
            n_train: 256,
            n_test_good: 64,
            n_test_bad: 64,
            square: 12,
            waves: 3,
            max_cycles: 4.0,
            noise: 0.02,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.side >= 8, "synthetic side must be >= 8");
        ensure!(
            self.square >= 1 && self.square < self.side,
            "square size {} must lie in [1, {})",
            self.square,
            self.side
        );
        ensure!(self.waves >= 1, "synthetic textures need at least one wave");
        ensure!(self.max_cycles > 0.0, "max_cycles must be positive");
        ensure!(self.noise >= 0.0, "noise must be non-negative");
        ensure!(self.n_train > 0, "n_train must be positive");
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub train: Vec<ImageTensor>,
    /// Test images with their label (true = has a square) and defect mask.
    pub test: Vec<(ImageTensor, bool, ImageTensor)>,
}

fn stream(seed: u64, tag: &str, index: usize) -> ChaCha8Rng {
    let mut h = Fnv1a::default();
    h.update(&seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(&(index as u64).to_le_bytes());
    ChaCha8Rng::seed_from_u64(h.finish())
}

/// Sum of random low-frequency plane waves plus a little noise, in [0, 1].
pub fn texture(cfg: &SyntheticConfig, rng: &mut impl Rng) -> Result<ImageTensor> {
    let n = cfg.side;
    let amp = 0.3 / cfg.waves as f64;
    let waves: Vec<(f64, f64, f64)> = (0..cfg.waves)
        .map(|_| {
            let cycles = rng.random_range(1.0..=cfg.max_cycles);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU * cycles / n as f64;
            (k * theta.cos(), k * theta.sin(), phase)
        })
        .collect();
    let noise: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0) * cfg.noise).collect();
    ImageTensor::from_fn(1, n, n, |_, y, x| {
        let v: f64 = waves
            .iter()
            .map(|&(kx, ky, ph)| amp * (kx * x as f64 + ky * y as f64 + ph).sin())
            .sum();
        (0.5 + v + noise[y * n + x]).clamp(0.0, 1.0) as f32
    })
}

/// Pastes a uniform square at a random position, dark on bright background
/// and bright on dark. Returns the image and its binary mask.
pub fn insert_square(img: &ImageTensor, size: usize, rng: &mut impl Rng) -> Result<(ImageTensor, ImageTensor)> {
    let (h, w) = (img.height(), img.width());
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    let inside = |y: usize, x: usize| (top..top + size).contains(&y) && (left..left + size).contains(&x);
    let mut local = 0.0;
    for y in top..top + size {
        for x in left..left + size {
            local += img.get(0, y, x);
        }
    }
    let value = if local / (size * size) as f32 > 0.5 { 0.0 } else { 1.0 };
    let out = ImageTensor::from_fn(img.channels(), h, w, |c, y, x| {
        if inside(y, x) {
            value
        } else {
            img.get(c, y, x)
        }
    })?;
    let mask = ImageTensor::from_fn(1, h, w, |_, y, x| if inside(y, x) { 1.0 } else { 0.0 })?;
    Ok((out, mask))
}

/// Deterministic corpus for `seed`: defect-free training images, then good
/// test images followed by defective ones.
pub fn generate(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let train = (0..cfg.n_train)
        .map(|i| texture(cfg, &mut stream(seed, "train", i)))
        .collect::<Result<_>>()?;
    let empty = ImageTensor::filled(1, cfg.side, cfg.side, 0.0);
    let mut test = Vec::with_capacity(cfg.n_test_good + cfg.n_test_bad);
    for i in 0..cfg.n_test_good {
        test.push((texture(cfg, &mut stream(seed, "good", i))?, false, empty.clone()));
    }
    for i in 0..cfg.n_test_bad {
        let mut rng = stream(seed, "bad", i);
        let base = texture(cfg, &mut rng)?;
        let (img, mask) = insert_square(&base, cfg.square, &mut rng)?;
        test.push((img, true, mask));
    }
    Ok(SyntheticCorpus { train, test })
}

impl SyntheticCorpus {
    /// Writes the corpus in the `train/good`, `test/good`, `test/ungood`,
    /// `test/masks` layout as 8-bit PNG.
    pub fn write(&self, root: &Path) -> Result<()> {
        for sub in ["train/good", "test/good", "test/ungood", "test/masks"] {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| crate::Error::io(&d, e))?;
        }
        for (i, img) in self.train.iter().enumerate() {
            save_image(img, root.join(format!("train/good/{i:04}.png")), BitDepth::Eight)?;
        }
        for (i, (img, bad, mask)) in self.test.iter().enumerate() {
            let name = format!("{i:04}.png");
            if *bad {
                save_image(img, root.join("test/ungood").join(&name), BitDepth::Eight)?;
                save_image(mask, root.join("test/masks").join(&name), BitDepth::Eight)?;
            } else {
                save_image(img, root.join("test/good").join(&name), BitDepth::Eight)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_train: 4,
            n_test_good: 2,
            n_test_bad: 2,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn deterministic_and_labelled() {
        let a = generate(&small(), 3).unwrap();
        let b = generate(&small(), 3).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test.len(), 4);
        assert_eq!(a.test.iter().filter(|t| t.1).count(), 2);
        assert_ne!(generate(&small(), 4).unwrap().train, a.train);
    }

    #[test]
    fn square_has_expected_area_and_contrast() {
        let c = generate(&small(), 0).unwrap();
        for (img, bad, mask) in &c.test {
            let area: f32 = mask.data().iter().sum();
            assert_eq!(area, if *bad { 144.0 } else { 0.0 });
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn writes_dataset_layout() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&small(), 1).unwrap();
        c.write(dir.path()).unwrap();
        let ds = crate::evaluation::Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.train.len(), 4);
        assert_eq!(ds.test.len(), 4);
        assert!(ds.test.iter().filter(|t| t.anomalous).all(|t| t.mask.is_some()));
    }
}
