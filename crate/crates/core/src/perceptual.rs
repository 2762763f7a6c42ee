//! Multi-scale perceptual features, cosine anomaly maps, the hierarchical
//! perceptual loss and map/score reductions.

use std::io::Write;
use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::autograd::{Binder, Tape, Var};
use crate::encoder::FrozenBackbone;
use crate::error::{ensure, Error, Result};
use crate::resample::{resample_matrix, resize_map, Filter};
use crate::tensor::{Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Mean over maps of each map's maximum.
    MaxThenMean,
    /// Maximum over maps of each map's mean.
    MeanThenMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapMode {
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// Per layer: product over scales of resized cosine maps, then mean.
    Hierarchical,
    /// Per layer: one cosine distance between the flattened feature maps at
    /// the first patch size.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptualConfig {
    pub layers: Vec<usize>,
    pub patch_sizes: Vec<usize>,
    pub score_mode: ScoreMode,
    pub map_mode: MapMode,
}

impl PerceptualConfig {
    pub fn train_default() -> Self {
        Self {
            layers: vec![16, 20],
            patch_sizes: vec![32, 56],
            score_mode: ScoreMode::MaxThenMean,
            map_mode: MapMode::Mean,
        }
    }

    pub fn eval_default() -> Self {
        Self {
            layers: vec![12, 16, 20],
            patch_sizes: vec![16, 32, 56],
            score_mode: ScoreMode::MaxThenMean,
            map_mode: MapMode::Mean,
        }
    }

    pub fn validate(&self, side: usize, depth: usize) -> Result<()> {
        ensure!(!self.layers.is_empty(), "perceptual layer set is empty");
        ensure!(!self.patch_sizes.is_empty(), "perceptual patch size set is empty");
        for &l in &self.layers {
            ensure!(l < depth, "perceptual layer {l} outside [0, {depth})");
        }
        for &p in &self.patch_sizes {
            ensure!(p > 0 && side.is_multiple_of(p), "perceptual patch size {p} does not divide side {side}");
        }
        Ok(())
    }
}

/// One frozen backbone variant per patch size, sharing everything but the
/// patch kernel and position grid.
#[derive(Debug, Clone)]
pub struct PerceptualModel<T: Scalar = f32> {
    variants: Vec<FrozenBackbone<T>>,
    layers: Vec<usize>,
    side: usize,
}

impl<T: Scalar> PerceptualModel<T> {
    pub fn new(base: &FrozenBackbone<T>, layers: &[usize], patch_sizes: &[usize], side: usize) -> Result<Self> {
        let cfg = PerceptualConfig {
            layers: layers.to_vec(),
            patch_sizes: patch_sizes.to_vec(),
            score_mode: ScoreMode::MaxThenMean,
            map_mode: MapMode::Mean,
        };
        cfg.validate(side, base.spec().depth)?;
        let variants = patch_sizes
            .iter()
            .map(|&p| base.with_patch_size(p, side)?.with_taps(layers.to_vec()))
            .collect::<Result<_>>()?;
        Ok(Self {
            variants,
            layers: layers.to_vec(),
            side,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn patch_sizes(&self) -> Vec<usize> {
        self.variants.iter().map(|v| v.spec().patch_size).collect()
    }

    /// Grid side for patch-size index `p`.
    pub fn grid(&self, p: usize) -> usize {
        self.side / self.variants[p].spec().patch_size
    }

    /// Finest grid over all patch sizes.
    pub fn finest_grid(&self) -> usize {
        (0..self.variants.len()).map(|p| self.grid(p)).max().expect("non-empty")
    }

    /// Combined checksum of all variants.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::tensor::Fnv1a::default();
        for v in &self.variants {
            h.update(&v.checksum().to_le_bytes());
        }
        h.finish()
    }

    /// Feature tokens indexed `[layer][patch size]`, each `grid² x width`.
    pub fn features_graph<'a>(&'a self, b: &Binder<'_, 'a, T>, image: Var) -> Result<Vec<Vec<Var>>> {
        let mut out = vec![Vec::with_capacity(self.variants.len()); self.layers.len()];
        for v in &self.variants {
            for (i, f) in v.forward_taps(b, image, self.side)?.into_iter().enumerate() {
                out[i].push(f);
            }
        }
        Ok(out)
    }

    /// Plain feature pyramid of a normalised `C x side²` image.
    pub fn features(&self, image: &Matrix<T>) -> Result<FeaturePyramid<T>> {
        let tape = Tape::new();
        let b = Binder::frozen(&tape);
        let x = tape.borrowed(image, false);
        let vars = self.features_graph(&b, x)?;
        let maps = vars
            .iter()
            .map(|per_p| per_p.iter().map(|&v| tape.value(v).clone()).collect())
            .collect();
        let grids = (0..self.variants.len()).map(|p| self.grid(p)).collect();
        Ok(FeaturePyramid { maps, grids })
    }
}

/// Feature maps `[layer][patch size]`, each `grid² x channels` in row-major
/// spatial order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    pub maps: Vec<Vec<Matrix<T>>>,
    pub grids: Vec<usize>,
}

/// `1 - cos` per spatial location of two `grid² x c` feature maps, returned
/// as a `grid x grid` map. Zero-norm locations get distance 1.
pub fn layer_anomaly_map<T: Scalar>(f: &Matrix<T>, g: &Matrix<T>, grid: usize) -> Result<Matrix<f64>> {
    ensure!(f.shape() == g.shape(), "feature shapes differ: {:?} vs {:?}", f.shape(), g.shape());
    ensure!(f.rows() == grid * grid, "{} locations do not form a {grid}x{grid} grid", f.rows());
    let tape = Tape::new();
    let a = tape.borrowed(f, false);
    let b = tape.borrowed(g, false);
    let d = tape.row_cosine_distance(a, b);
    let v = tape.value(d);
    Ok(Matrix::from_vec(grid, grid, v.data().iter().map(|x| x.f64()).collect()))
}

/// Resize every map bilinearly to `target` and multiply elementwise.
pub fn combine_across_scales(maps: &[Matrix<f64>], target: (usize, usize)) -> Result<Matrix<f64>> {
    ensure!(!maps.is_empty(), "no maps to combine");
    let mut out = Matrix::filled(target.0, target.1, 1.0);
    for m in maps {
        let r = resize_map(m, target.0, target.1);
        for (o, v) in out.data_mut().iter_mut().zip(r.data()) {
            *o *= v;
        }
    }
    Ok(out)
}

/// Scalar perceptual loss between two normalised images on the tape.
pub fn perceptual_loss_graph<'a, T: Scalar>(
    b: &Binder<'_, 'a, T>,
    model: &'a PerceptualModel<T>,
    x: Var,
    recon: Var,
    form: LossForm,
) -> Result<Var> {
    let fx = model.features_graph(b, x)?;
    let fy = model.features_graph(b, recon)?;
    loss_from_features(b.tape(), model, &fx, &fy, form)
}

/// As [`perceptual_loss_graph`] with the features of `x` already computed
/// (the perceptual model is frozen, so they can be cached).
pub fn loss_from_features<T: Scalar>(
    tape: &Tape<'_, T>,
    model: &PerceptualModel<T>,
    fx: &[Vec<Var>],
    fy: &[Vec<Var>],
    form: LossForm,
) -> Result<Var> {
    let n_layers = fx.len();
    ensure!(n_layers > 0 && fy.len() == n_layers, "feature layer counts differ");
    let target = model.finest_grid();
    let mut per_layer = Vec::with_capacity(n_layers);
    for (a, c) in fx.iter().zip(fy) {
        match form {
            LossForm::Global => {
                let (l, w) = tape.shape(a[0]);
                let fa = tape.reshape(a[0], 1, l * w);
                let fc = tape.reshape(c[0], 1, l * w);
                per_layer.push(tape.row_cosine_distance(fa, fc));
            }
            LossForm::Hierarchical => {
                let mut combined: Option<Var> = None;
                for (p, (&fa, &fc)) in a.iter().zip(c).enumerate() {
                    let g = model.grid(p);
                    let d = tape.row_cosine_distance(fa, fc);
                    let mut map = tape.reshape(d, g, g);
                    if g != target {
                        let r = tape.constant(resample_matrix::<T>(g, target, Filter::Bilinear, true));
                        let left = tape.matmul(r, map);
                        map = tape.matmul_t(left, false, r, true);
                    }
                    combined = Some(match combined {
                        None => map,
                        Some(acc) => tape.mul(acc, map),
                    });
                }
                per_layer.push(tape.mean(combined.expect("at least one scale")));
            }
        }
    }
    let total = if per_layer.len() == 1 {
        per_layer[0]
    } else {
        let stacked = tape.concat_rows(&per_layer);
        tape.sum(stacked)
    };
    Ok(tape.scale(total, T::of(1.0 / n_layers as f64)))
}

/// Plain hierarchical (or global) perceptual loss.
pub fn perceptual_loss<T: Scalar>(
    model: &PerceptualModel<T>,
    x: &Matrix<T>,
    recon: &Matrix<T>,
    form: LossForm,
) -> Result<f64> {
    ensure!(x.shape() == recon.shape(), "image shapes differ");
    let tape = Tape::new();
    let b = Binder::frozen(&tape);
    let xv = tape.borrowed(x, false);
    let rv = tape.borrowed(recon, false);
    let l = perceptual_loss_graph(&b, model, xv, rv, form)?;
    let v = tape.scalar(l).f64();
    Ok(v)
}

/// Ordered raw anomaly maps.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMapStack {
    pub maps: Vec<Matrix<f64>>,
}

impl AnomalyMapStack {
    pub fn new(maps: Vec<Matrix<f64>>) -> Result<Self> {
        ensure!(!maps.is_empty(), "anomaly map stack is empty");
        Ok(Self { maps })
    }

    /// Raw cosine maps for every (layer, patch size) pair, layer-major.
    pub fn from_pyramids<T: Scalar>(x: &FeaturePyramid<T>, recon: &FeaturePyramid<T>) -> Result<Self> {
        ensure!(x.grids == recon.grids, "pyramid grids differ");
        let mut maps = Vec::new();
        for (fa, fb) in x.maps.iter().zip(&recon.maps) {
            for (p, (a, b)) in fa.iter().zip(fb).enumerate() {
                maps.push(layer_anomaly_map(a, b, x.grids[p])?);
            }
        }
        Self::new(maps)
    }
}

pub fn image_score(stack: &AnomalyMapStack, mode: ScoreMode) -> Result<f64> {
    ensure!(!stack.maps.is_empty(), "anomaly map stack is empty");
    let n = stack.maps.len() as f64;
    Ok(match mode {
        ScoreMode::MaxThenMean => {
            stack
                .maps
                .iter()
                .map(|m| m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .sum::<f64>()
                / n
        }
        ScoreMode::MeanThenMax => stack
            .maps
            .iter()
            .map(|m| m.mean())
            .fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Per-pixel mean or max of all maps after bilinear resizing to `size`.
pub fn pixel_map(stack: &AnomalyMapStack, mode: MapMode, size: (usize, usize)) -> Result<Matrix<f64>> {
    ensure!(!stack.maps.is_empty(), "anomaly map stack is empty");
    ensure!(size.0 > 0 && size.1 > 0, "pixel map size must be positive");
    let resized: Vec<_> = stack.maps.iter().map(|m| resize_map(m, size.0, size.1)).collect();
    let mut out = resized[0].clone();
    for r in &resized[1..] {
        for (o, &v) in out.data_mut().iter_mut().zip(r.data()) {
            match mode {
                MapMode::Mean => *o += v,
                MapMode::Max => *o = o.max(v),
            }
        }
    }
    if mode == MapMode::Mean {
        let n = resized.len() as f64;
        out.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// 8-bit grayscale PNG, min-max normalised per map (a constant map is black).
pub fn save_map_png(map: &Matrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let img = GrayImage::from_fn(map.cols() as u32, map.rows() as u32, |x, y| {
        let v = map.get(y as usize, x as usize);
        let q = if span > 0.0 { (v - lo) / span } else { 0.0 };
        Luma([(q * 255.0).round() as u8])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Raw dump: `u32` height, `u32` width (little-endian), then row-major `f32` values.
pub fn write_raw_map(map: &Matrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(8 + 4 * map.len());
    buf.extend_from_slice(&(map.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(map.cols() as u32).to_le_bytes());
    for &v in map.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_raw_map(path: impl AsRef<Path>) -> Result<Matrix<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ensure!(bytes.len() >= 8, "{}: raw map too short", path.display());
    let h = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    ensure!(bytes.len() == 8 + 4 * h * w, "{}: raw map size mismatch", path.display());
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Matrix::from_vec(h, w, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{make_toy_backbone, BackboneSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, v.to_vec())
    }

    #[test]
    fn cosine_map_cases() {
        let f = m(1, 2, &[1.0, 0.0]);
        assert_eq!(layer_anomaly_map(&f, &m(1, 2, &[0.0, 1.0]), 1).unwrap().data(), &[1.0]);
        assert_eq!(layer_anomaly_map(&f, &f, 1).unwrap().data(), &[0.0]);
        assert_eq!(layer_anomaly_map(&f, &m(1, 2, &[-1.0, 0.0]), 1).unwrap().data(), &[2.0]);
        assert_eq!(layer_anomaly_map(&f, &m(1, 2, &[0.0, 0.0]), 1).unwrap().data(), &[1.0]);
    }

    #[test]
    fn score_examples() {
        let s = AnomalyMapStack::new(vec![m(2, 2, &[0.0, 1.0, 2.0, 3.0]), m(2, 2, &[1.0; 4])]).unwrap();
        assert_eq!(image_score(&s, ScoreMode::MaxThenMean).unwrap(), 2.0);
        assert_eq!(image_score(&s, ScoreMode::MeanThenMax).unwrap(), 1.5);
        assert!(AnomalyMapStack::new(vec![]).is_err());
    }

    #[test]
    fn pixel_map_examples() {
        let s = AnomalyMapStack::new(vec![m(1, 2, &[0.0, 2.0]), m(1, 2, &[2.0, 0.0])]).unwrap();
        assert_eq!(pixel_map(&s, MapMode::Mean, (1, 2)).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(pixel_map(&s, MapMode::Max, (1, 2)).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn combine_examples() {
        let a = Matrix::filled(2, 2, 0.5);
        let b = Matrix::filled(4, 4, 0.2);
        let c = combine_across_scales(&[a.clone(), b], (4, 4)).unwrap();
        assert!(c.data().iter().all(|v| (v - 0.1).abs() < 1e-15));
        let z = combine_across_scales(&[a, Matrix::zeros(4, 4)], (4, 4)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(combine_across_scales(&[], (4, 4)).is_err());
    }

    #[test]
    fn raw_map_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.f32");
        let map = m(2, 3, &[0.0, 0.5, 1.0, 1.5, 2.0, 0.25]);
        write_raw_map(&map, &p).unwrap();
        assert_eq!(read_raw_map(&p).unwrap(), map.cast::<f32>());
        let png = dir.path().join("m.png");
        save_map_png(&map, &png).unwrap();
        let img = image::open(&png).unwrap().to_luma8();
        assert_eq!(img.get_pixel(0, 1).0[0], 191);
        assert_eq!(img.get_pixel(1, 1).0[0], 255);
    }

    #[test]
    fn pyramid_grids_and_zero_loss() {
        let spec = BackboneSpec {
            depth: 3,
            width: 16,
            heads: 2,
            tap_layers: vec![2],
            ..BackboneSpec::toy()
        };
        let base = make_toy_backbone::<f32>(9, &spec).unwrap();
        let model = PerceptualModel::new(&base, &[1, 2], &[8, 16], 32).unwrap();
        let x = Matrix::normal(3, 32 * 32, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let pyr = model.features(&x).unwrap();
        assert_eq!(pyr.grids, vec![4, 2]);
        assert_eq!(pyr.maps[0][1].shape(), (4, 16));
        assert_eq!(perceptual_loss(&model, &x, &x, LossForm::Hierarchical).unwrap(), 0.0);
        assert_eq!(perceptual_loss(&model, &x, &x, LossForm::Global).unwrap(), 0.0);
        assert!(PerceptualModel::new(&base, &[3], &[8], 32).is_err());
        assert!(PerceptualModel::new(&base, &[1], &[12], 32).is_err());
    }
}
