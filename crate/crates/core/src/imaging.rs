//! Image tensors, I/O, resizing, normalisation, patch (un)folding, training
//! augmentation and the LiverCT region-of-interest preprocessing.

use std::path::Path;
use std::sync::Arc;

use image::{DynamicImage, ImageBuffer, Luma};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::resample::{resize_plane, Filter};
use crate::tensor::{Matrix, Scalar};

/// Dataset-wide normalisation constants.
pub const NORM_MEAN: f32 = 0.449;
pub const NORM_STD: f32 = 0.226;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Gray,
    Rgb,
}

/// Channel-first float image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl ImageTensor {
    /// Validates shape and, for unnormalised data, the `[0, 1]` range.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        normalized: bool,
    ) -> Result<Self> {
        ensure!(channels == 1 || channels == 3, "images must have 1 or 3 channels, got {channels}");
        ensure!(height > 0 && width > 0, "image has zero area ({height}x{width})");
        ensure!(
            data.len() == channels * height * width,
            "image data length {} does not match {channels}x{height}x{width}",
            data.len()
        );
        if !normalized {
            ensure!(
                data.iter().all(|v| (0.0..=1.0).contains(v)),
                "unnormalised image values must lie in [0, 1]"
            );
        } else {
            ensure!(data.iter().all(|v| v.is_finite()), "image contains non-finite values");
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            normalized,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width], false)
            .expect("valid constant image")
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data, false)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn colorspace(&self) -> ColorSpace {
        if self.channels == 1 {
            ColorSpace::Gray
        } else {
            ColorSpace::Rgb
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Gray images replicated to three channels; RGB returned unchanged.
    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Self {
            channels: 3,
            data,
            ..*self
        }
    }

    /// Channel average as a single-channel image; gray returned unchanged.
    pub fn to_gray(&self) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.height * self.width;
        let data = (0..n)
            .map(|i| (0..self.channels).map(|c| self.data[c * n + i]).sum::<f32>() / self.channels as f32)
            .collect();
        Self {
            channels: 1,
            data,
            ..*self
        }
    }

    /// Channel-first `C x (H*W)` matrix, the layout used inside the autodiff graph.
    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        Matrix::from_vec(
            self.channels,
            self.height * self.width,
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
    }

    /// Inverse of [`ImageTensor::to_matrix`]; the result is flagged normalised
    /// and only checked for finiteness.
    pub fn from_matrix<T: Scalar>(m: &Matrix<T>, height: usize, width: usize) -> Result<Self> {
        Self::new(
            m.rows(),
            height,
            width,
            m.data().iter().map(|v| v.f64() as f32).collect(),
            true,
        )
    }

    fn with_data(&self, height: usize, width: usize, data: Vec<f32>) -> Self {
        Self {
            channels: self.channels,
            height,
            width,
            data,
            normalized: self.normalized,
        }
    }

    /// Rows reversed (vertical flip).
    pub fn flip_vertical(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            let p = self.plane(c);
            for y in (0..self.height).rev() {
                data.extend_from_slice(&p[y * self.width..(y + 1) * self.width]);
            }
        }
        self.with_data(self.height, self.width, data)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        ensure!(
            height > 0 && width > 0 && top + height <= self.height && left + width <= self.width,
            "crop {height}x{width}+{top}+{left} outside {}x{}",
            self.height,
            self.width
        );
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            let p = self.plane(c);
            for y in top..top + height {
                data.extend_from_slice(&p[y * self.width + left..y * self.width + left + width]);
            }
        }
        Ok(self.with_data(height, width, data))
    }
}

/// Bit depth of a grayscale file, kept so preprocessing can write the same depth back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

fn to_tensor(img: DynamicImage, path: &Path) -> Result<(ImageTensor, BitDepth)> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::validation(format!("{}: image has zero area", path.display())));
    }
    let out = match img {
        DynamicImage::ImageLuma8(b) => (
            ImageTensor::new(1, h, w, b.pixels().map(|p| p.0[0] as f32 / 255.0).collect(), false)?,
            BitDepth::Eight,
        ),
        DynamicImage::ImageLuma16(b) => (
            ImageTensor::new(1, h, w, b.pixels().map(|p| p.0[0] as f32 / 65535.0).collect(), false)?,
            BitDepth::Sixteen,
        ),
        DynamicImage::ImageLumaA8(_) => {
            let g = img.to_luma8();
            (
                ImageTensor::new(1, h, w, g.pixels().map(|p| p.0[0] as f32 / 255.0).collect(), false)?,
                BitDepth::Eight,
            )
        }
        DynamicImage::ImageLumaA16(_) => {
            let g = img.to_luma16();
            (
                ImageTensor::new(1, h, w, g.pixels().map(|p| p.0[0] as f32 / 65535.0).collect(), false)?,
                BitDepth::Sixteen,
            )
        }
        other => {
            let rgb = other.to_rgb8();
            let mut data = vec![0.0f32; 3 * h * w];
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * h * w + i] = p.0[c] as f32 / 255.0;
                }
            }
            (ImageTensor::new(3, h, w, data, false)?, BitDepth::Eight)
        }
    };
    Ok(out)
}

/// Decode an image at native size and channel count, values in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<(ImageTensor, BitDepth)> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    to_tensor(img, path)
}

/// Decode, replicate gray to RGB and resize to `side x side`.
pub fn load_and_resize(path: impl AsRef<Path>, side: usize) -> Result<ImageTensor> {
    ensure!(side > 0, "target side must be positive");
    let (img, _) = load_image(path)?;
    resize(&img.to_rgb(), side, side)
}

/// Write an unnormalised image as 8- or 16-bit PNG (gray or RGB by channel count).
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    ensure!(!img.is_normalized(), "refusing to save a normalised image");
    let (w, h) = (img.width() as u32, img.height() as u32);
    let n = img.height() * img.width();
    let q8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let q16 = |v: f32| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    let dynimg = match (img.channels(), depth) {
        (1, BitDepth::Eight) => DynamicImage::ImageLuma8(
            ImageBuffer::from_raw(w, h, img.data().iter().map(|&v| q8(v)).collect())
                .expect("buffer size"),
        ),
        (1, BitDepth::Sixteen) => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w, h, img.data().iter().map(|&v| q16(v)).collect())
                .expect("buffer size"),
        ),
        (_, BitDepth::Eight) => {
            let mut raw = Vec::with_capacity(3 * n);
            for i in 0..n {
                for c in 0..3 {
                    raw.push(q8(img.data()[c * n + i]));
                }
            }
            DynamicImage::ImageRgb8(ImageBuffer::from_raw(w, h, raw).expect("buffer size"))
        }
        (_, BitDepth::Sixteen) => {
            let mut raw = Vec::with_capacity(3 * n);
            for i in 0..n {
                for c in 0..3 {
                    raw.push(q16(img.data()[c * n + i]));
                }
            }
            DynamicImage::ImageRgb16(ImageBuffer::from_raw(w, h, raw).expect("buffer size"))
        }
    };
    dynimg.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Antialiased bilinear resize. Same-size input is returned unchanged.
pub fn resize(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    ensure!(height > 0 && width > 0, "resize target has zero area");
    if img.height == height && img.width == width {
        return Ok(img.clone());
    }
    let mut data = Vec::with_capacity(img.channels * height * width);
    for c in 0..img.channels {
        let plane: Vec<f64> = img.plane(c).iter().map(|&v| v as f64).collect();
        let out = resize_plane(&plane, img.height, img.width, height, width, Filter::Bilinear, true);
        data.extend(out.into_iter().map(|v| {
            let v = v as f32;
            if img.normalized {
                v
            } else {
                v.clamp(0.0, 1.0)
            }
        }));
    }
    Ok(img.with_data(height, width, data))
}

/// `(x - mean) / std` elementwise; flags the result as normalised.
pub fn normalize(img: &ImageTensor, mean: f32, std: f32) -> Result<ImageTensor> {
    ensure!(std > 0.0 && std.is_finite(), "normalisation std must be positive, got {std}");
    ensure!(!img.normalized, "image is already normalised");
    let data = img.data.iter().map(|&v| (v - mean) / std).collect();
    let mut out = img.with_data(img.height, img.width, data);
    out.normalized = true;
    Ok(out)
}

/// Inverse of [`normalize`], clamped to `[0, 1]`.
pub fn denormalize(img: &ImageTensor, mean: f32, std: f32) -> ImageTensor {
    let data = img
        .data
        .iter()
        .map(|&v| (v * std + mean).clamp(0.0, 1.0))
        .collect();
    let mut out = img.with_data(img.height, img.width, data);
    out.normalized = false;
    out
}

/// Geometry of a patch decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn new(channels: usize, height: usize, width: usize, patch_size: usize) -> Result<Self> {
        ensure!(patch_size > 0, "patch size must be positive");
        ensure!(
            height.is_multiple_of(patch_size) && width.is_multiple_of(patch_size),
            "patch size {patch_size} does not divide {height}x{width}"
        );
        Ok(Self {
            patch_size,
            grid_h: height / patch_size,
            grid_w: width / patch_size,
            channels,
        })
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn height(&self) -> usize {
        self.grid_h * self.patch_size
    }

    pub fn width(&self) -> usize {
        self.grid_w * self.patch_size
    }

    /// For token-major output element `t * token_dim + f`, the index into the
    /// channel-first image buffer. Token order is row-major over the grid;
    /// within a token the layout is (row in patch, column in patch, channel)
    /// with channel fastest.
    pub fn gather_index(&self) -> Arc<[usize]> {
        let (p, c) = (self.patch_size, self.channels);
        let (h, w) = (self.height(), self.width());
        let mut idx = Vec::with_capacity(self.tokens() * self.token_dim());
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                for r in 0..p {
                    for q in 0..p {
                        for ch in 0..c {
                            idx.push((ch * h + gy * p + r) * w + gx * p + q);
                        }
                    }
                }
            }
        }
        idx.into()
    }

    /// Index map for the inverse rearrangement (image element -> token element).
    pub fn scatter_index(&self) -> Arc<[usize]> {
        let fwd = self.gather_index();
        let mut inv = vec![0usize; fwd.len()];
        for (t, &i) in fwd.iter().enumerate() {
            inv[i] = t;
        }
        inv.into()
    }
}

/// Split into non-overlapping patches: `L x (p*p*C)` tokens.
pub fn patchify(img: &ImageTensor, patch_size: usize) -> Result<(Matrix<f32>, PatchGrid)> {
    let grid = PatchGrid::new(img.channels, img.height, img.width, patch_size)?;
    let idx = grid.gather_index();
    let data = idx.iter().map(|&i| img.data[i]).collect();
    Ok((Matrix::from_vec(grid.tokens(), grid.token_dim(), data), grid))
}

/// Exact inverse of [`patchify`]. The result is flagged normalised since token
/// values (e.g. decoder output) are not range-checked.
pub fn unpatchify(tokens: &Matrix<f32>, grid: &PatchGrid) -> Result<ImageTensor> {
    ensure!(
        tokens.rows() == grid.tokens() && tokens.cols() == grid.token_dim(),
        "tokens {}x{} inconsistent with grid {}x{} of patch {} ({} channels)",
        tokens.rows(),
        tokens.cols(),
        grid.grid_h,
        grid.grid_w,
        grid.patch_size,
        grid.channels
    );
    let inv = grid.scatter_index();
    let src = tokens.data();
    let data = inv.iter().map(|&t| src[t]).collect();
    ImageTensor::new(grid.channels, grid.height(), grid.width(), data, true)
}

/// Training-time augmentation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the source area.
    pub crop_scale: [f64; 2],
    /// Crop aspect ratio relative to the source aspect ratio.
    pub crop_aspect: [f64; 2],
    /// Rotation drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub vflip_prob: f64,
    /// Brightness and contrast factors drawn from `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
    pub norm_mean: f32,
    pub norm_std: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: [0.90, 1.00],
            crop_aspect: [0.80, 1.20],
            rotation_deg: 10.0,
            vflip_prob: 0.5,
            jitter: 0.1,
            norm_mean: NORM_MEAN,
            norm_std: NORM_STD,
        }
    }
}

impl AugmentConfig {
    /// No geometric or photometric change: resize and normalise only.
    pub fn identity() -> Self {
        Self {
            crop_scale: [1.0, 1.0],
            crop_aspect: [1.0, 1.0],
            rotation_deg: 0.0,
            vflip_prob: 0.0,
            jitter: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [s0, s1] = self.crop_scale;
        let [a0, a1] = self.crop_aspect;
        ensure!(0.0 < s0 && s0 <= s1 && s1 <= 1.0, "crop_scale must satisfy 0 < lo <= hi <= 1");
        ensure!(0.0 < a0 && a0 <= a1, "crop_aspect must satisfy 0 < lo <= hi");
        ensure!(self.rotation_deg >= 0.0, "rotation_deg must be non-negative");
        ensure!((0.0..=1.0).contains(&self.vflip_prob), "vflip_prob must lie in [0, 1]");
        ensure!((0.0..1.0).contains(&self.jitter), "jitter must lie in [0, 1)");
        ensure!(self.norm_std > 0.0, "norm_std must be positive");
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Random resized crop, rotation, vertical flip and colour jitter followed by
/// normalisation, producing a `side x side` image.
pub fn augment(
    img: &ImageTensor,
    cfg: &AugmentConfig,
    side: usize,
    rng: &mut impl Rng,
) -> Result<ImageTensor> {
    cfg.validate()?;
    ensure!(!img.normalized, "augment expects an unnormalised image");
    let area = uniform(rng, cfg.crop_scale[0], cfg.crop_scale[1]);
    let log_aspect = uniform(rng, cfg.crop_aspect[0].ln(), cfg.crop_aspect[1].ln());
    let aspect = log_aspect.exp();
    let cw = ((img.width as f64 * (area * aspect).sqrt()).round() as usize).clamp(1, img.width);
    let ch = ((img.height as f64 * (area / aspect).sqrt()).round() as usize).clamp(1, img.height);
    let left = rng.random_range(0..=img.width - cw);
    let top = rng.random_range(0..=img.height - ch);
    let angle = uniform(rng, -cfg.rotation_deg, cfg.rotation_deg);
    let flip = rng.random::<f64>() < cfg.vflip_prob;
    let brightness = uniform(rng, 1.0 - cfg.jitter, 1.0 + cfg.jitter) as f32;
    let contrast = uniform(rng, 1.0 - cfg.jitter, 1.0 + cfg.jitter) as f32;

    let cropped = if (ch, cw) == (img.height, img.width) {
        img.clone()
    } else {
        img.crop(top, left, ch, cw)?
    };
    let mut out = resize(&cropped, side, side)?;
    if angle != 0.0 {
        out = rotate(&out, angle);
    }
    if flip {
        out = out.flip_vertical();
    }
    out = color_jitter(&out, brightness, contrast);
    normalize(&out, cfg.norm_mean, cfg.norm_std)
}

/// Rotate about the image centre by `degrees` (counter-clockwise), bilinear
/// sampling, zero fill.
pub fn rotate(img: &ImageTensor, degrees: f64) -> ImageTensor {
    let (h, w) = (img.height, img.width);
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut data = vec![0.0f32; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // inverse mapping: source = R(-θ) · destination
            let sx = c * dx - s * dy + cx;
            let sy = s * dx + c * dy + cy;
            if sx < -1.0 || sy < -1.0 || sx > w as f64 || sy > h as f64 {
                continue;
            }
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            for ch in 0..img.channels {
                let p = img.plane(ch);
                let at = |yy: f64, xx: f64| -> f64 {
                    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                        0.0
                    } else {
                        p[yy as usize * w + xx as usize] as f64
                    }
                };
                let v = at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + at(y0, x0 + 1.0) * fx * (1.0 - fy)
                    + at(y0 + 1.0, x0) * (1.0 - fx) * fy
                    + at(y0 + 1.0, x0 + 1.0) * fx * fy;
                data[(ch * h + y) * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img.with_data(h, w, data)
}

/// Multiplicative brightness, then contrast about the per-image mean, clamped.
pub fn color_jitter(img: &ImageTensor, brightness: f32, contrast: f32) -> ImageTensor {
    let bright: Vec<f32> = img
        .data
        .iter()
        .map(|&v| (v * brightness).clamp(0.0, 1.0))
        .collect();
    let mean = bright.iter().map(|&v| v as f64).sum::<f64>() as f32 / bright.len() as f32;
    let data = bright
        .into_iter()
        .map(|v| (contrast * v + (1.0 - contrast) * mean).clamp(0.0, 1.0))
        .collect();
    img.with_data(img.height, img.width, data)
}

/// Inclusive bounding box of nonzero pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BoundingBox {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }
}

/// Tight box around every pixel with a nonzero value in any channel.
pub fn nonzero_bbox(img: &ImageTensor) -> Option<BoundingBox> {
    let mut rows = (0..img.height).filter(|&y| {
        (0..img.channels).any(|c| (0..img.width).any(|x| img.get(c, y, x) != 0.0))
    });
    let top = rows.next()?;
    let bottom = rows.next_back().unwrap_or(top);
    let cols: Vec<usize> = (0..img.width)
        .filter(|&x| (0..img.channels).any(|c| (top..=bottom).any(|y| img.get(c, y, x) != 0.0)))
        .collect();
    Some(BoundingBox {
        top,
        left: cols[0],
        bottom,
        right: *cols.last().expect("nonempty"),
    })
}

/// Output of [`liver_roi_preprocess`].
#[derive(Debug, Clone)]
pub struct RoiOutput {
    pub image: ImageTensor,
    pub bbox: Option<BoundingBox>,
    /// True when the ROI exceeded the canvas and was downscaled.
    pub scaled: bool,
    pub warning: Option<String>,
}

/// Bilateral smoothing settings applied to the ROI before it is pasted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BilateralParams {
    pub spatial_sigma: f64,
    pub range_sigma: f64,
}

impl Default for BilateralParams {
    fn default() -> Self {
        Self {
            spatial_sigma: 3.0,
            range_sigma: 0.1,
        }
    }
}

/// Crop to the nonzero bounding box and centre on a black `side x side`
/// canvas, downscaling (aspect preserved) only when the ROI does not fit.
pub fn liver_roi_preprocess(img: &ImageTensor, side: usize) -> Result<RoiOutput> {
    liver_pipeline(img, side, None)
}

/// [`liver_roi_preprocess`] with an optional bilateral filter applied to the
/// cropped (and possibly downscaled) ROI before pasting.
pub fn liver_pipeline(
    img: &ImageTensor,
    side: usize,
    bilateral: Option<BilateralParams>,
) -> Result<RoiOutput> {
    ensure!(img.channels == 1, "liver ROI preprocessing expects a single-channel image");
    ensure!(!img.normalized, "liver ROI preprocessing expects an unnormalised image");
    ensure!(side > 0, "canvas side must be positive");
    let Some(bbox) = nonzero_bbox(img) else {
        let warning = "all-zero slice; emitting a black canvas".to_string();
        log::warn!("{warning}");
        return Ok(RoiOutput {
            image: ImageTensor::filled(1, side, side, 0.0),
            bbox: None,
            scaled: false,
            warning: Some(warning),
        });
    };
    let mut roi = img.crop(bbox.top, bbox.left, bbox.height(), bbox.width())?;
    let scaled = roi.height > side || roi.width > side;
    if scaled {
        let scale = side as f64 / roi.height.max(roi.width) as f64;
        let nh = ((roi.height as f64 * scale).round() as usize).clamp(1, side);
        let nw = ((roi.width as f64 * scale).round() as usize).clamp(1, side);
        roi = resize(&roi, nh, nw)?;
    }
    if let Some(p) = bilateral {
        roi = bilateral_filter(&roi, p.spatial_sigma, p.range_sigma)?;
    }
    let top = (side - roi.height) / 2;
    let left = (side - roi.width) / 2;
    let mut canvas = vec![0.0f32; side * side];
    for y in 0..roi.height {
        canvas[(top + y) * side + left..(top + y) * side + left + roi.width]
            .copy_from_slice(&roi.data[y * roi.width..(y + 1) * roi.width]);
    }
    Ok(RoiOutput {
        image: ImageTensor::new(1, side, side, canvas, false)?,
        bbox: Some(bbox),
        scaled,
        warning: None,
    })
}

/// Edge-preserving smoothing. Window radius is `ceil(3 * spatial_sigma)`;
/// neighbours outside the image are skipped, so every output is a convex
/// combination of input values. Channels are filtered independently.
pub fn bilateral_filter(img: &ImageTensor, spatial_sigma: f64, range_sigma: f64) -> Result<ImageTensor> {
    ensure!(
        spatial_sigma > 0.0 && range_sigma > 0.0,
        "bilateral sigmas must be positive (spatial {spatial_sigma}, range {range_sigma})"
    );
    let radius = (3.0 * spatial_sigma).ceil() as isize;
    let (h, w) = (img.height as isize, img.width as isize);
    let span = (2 * radius + 1) as usize;
    let mut spatial = vec![0.0f64; span * span];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let d2 = (dx * dx + dy * dy) as f64;
            spatial[((dy + radius) as usize) * span + (dx + radius) as usize] =
                (-d2 / (2.0 * spatial_sigma * spatial_sigma)).exp();
        }
    }
    let inv_r = 1.0 / (2.0 * range_sigma * range_sigma);
    let mut data = Vec::with_capacity(img.data.len());
    for c in 0..img.channels {
        let p = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let center = p[(y * w + x) as usize] as f64;
                let (mut num, mut den) = (0.0, 0.0);
                for dy in -radius..=radius {
                    let yy = y + dy;
                    if yy < 0 || yy >= h {
                        continue;
                    }
                    for dx in -radius..=radius {
                        let xx = x + dx;
                        if xx < 0 || xx >= w {
                            continue;
                        }
                        let v = p[(yy * w + xx) as usize] as f64;
                        let diff = v - center;
                        let wt = spatial[((dy + radius) as usize) * span + (dx + radius) as usize]
                            * (-diff * diff * inv_r).exp();
                        num += wt * v;
                        den += wt;
                    }
                }
                data.push((num / den) as f32);
            }
        }
    }
    let mut out = img.with_data(img.height, img.width, data);
    if !out.normalized {
        for v in &mut out.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(c: usize, h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(c, h, w, |ch, y, x| {
            ((ch * 7 + y * 3 + x) % 17) as f32 / 16.0
        })
        .unwrap()
    }

    #[test]
    fn normalize_examples() {
        let img = ImageTensor::new(1, 1, 3, vec![0.449, 0.675, 0.0], false).unwrap();
        let n = normalize(&img, 0.449, 0.226).unwrap();
        assert_eq!(n.data()[0], 0.0);
        assert!((n.data()[1] - 1.0).abs() < 1e-6);
        assert!((n.data()[2] as f64 - (-0.449 / 0.226)).abs() < 1e-6);
        assert!(n.is_normalized());
        assert!(normalize(&img, 0.449, 0.0).is_err());
        assert!(normalize(&n, 0.449, 0.226).is_err());
    }

    #[test]
    fn patchify_enumeration_order() {
        let img = ImageTensor::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4], false).unwrap();
        let (tokens, grid) = patchify(&img, 1).unwrap();
        assert_eq!(tokens.shape(), (4, 1));
        assert_eq!(tokens.data(), &[0.1, 0.2, 0.3, 0.4]);
        let back = unpatchify(&tokens, &grid).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn patchify_shapes_and_errors() {
        let img = ImageTensor::filled(3, 224, 224, 0.5);
        let (t, g) = patchify(&img, 8).unwrap();
        assert_eq!(t.shape(), (784, 192));
        assert_eq!((g.grid_h, g.grid_w), (28, 28));
        let (t, _) = patchify(&img, 56).unwrap();
        assert_eq!(t.shape(), (16, 9408));
        assert!(patchify(&img, 10).is_err());
        let bad = Matrix::<f32>::zeros(783, 192);
        assert!(unpatchify(&bad, &g).is_err());
    }

    #[test]
    fn unpatchify_restores_224_from_784_tokens() {
        let grid = PatchGrid::new(3, 224, 224, 8).unwrap();
        let tokens = Matrix::<f32>::zeros(784, 192);
        let img = unpatchify(&tokens, &grid).unwrap();
        assert_eq!((img.channels(), img.height(), img.width()), (3, 224, 224));
    }

    #[test]
    fn resize_constant_and_identity() {
        let c = ImageTensor::filled(3, 37, 53, 0.5);
        for side in [1, 7, 64, 224] {
            let r = resize(&c, side, side).unwrap();
            assert!(r.data().iter().all(|&v| v == 0.5), "side {side}");
        }
        let img = ramp(3, 24, 24);
        assert_eq!(resize(&img, 24, 24).unwrap(), img);
    }

    #[test]
    fn degenerate_augment_is_resize_then_normalize() {
        let img = ramp(3, 40, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(&img, &AugmentConfig::identity(), 32, &mut rng).unwrap();
        let want = normalize(&resize(&img, 32, 32).unwrap(), NORM_MEAN, NORM_STD).unwrap();
        assert_eq!(out, want);
    }

    #[test]
    fn forced_flip_reverses_rows() {
        let img = ramp(1, 16, 16);
        let cfg = AugmentConfig {
            vflip_prob: 1.0,
            ..AugmentConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = augment(&img, &cfg, 16, &mut rng).unwrap();
        let want = normalize(&img.flip_vertical(), NORM_MEAN, NORM_STD).unwrap();
        assert_eq!(out, want);
    }

    #[test]
    fn augment_is_seed_deterministic() {
        let img = ramp(3, 48, 48);
        let cfg = AugmentConfig::default();
        let a = augment(&img, &cfg, 32, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = augment(&img, &cfg, 32, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c = augment(&img, &cfg, 32, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn roi_example_block() {
        let img = ImageTensor::from_fn(1, 512, 512, |_, y, x| {
            if (100..=150).contains(&y) && (200..=260).contains(&x) {
                0.25 + ((x + y) % 7) as f32 / 10.0
            } else {
                0.0
            }
        })
        .unwrap();
        let out = liver_roi_preprocess(&img, 224).unwrap();
        let bbox = out.bbox.unwrap();
        assert_eq!((bbox.height(), bbox.width()), (51, 61));
        assert!(!out.scaled);
        let (top, left) = ((224 - 51) / 2, (224 - 61) / 2);
        for y in 0..51 {
            for x in 0..61 {
                assert_eq!(out.image.get(0, top + y, left + x), img.get(0, 100 + y, 200 + x));
            }
        }
        let nonzero = out.image.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 51 * 61);
    }

    #[test]
    fn roi_full_frame_and_empty() {
        let full = ImageTensor::filled(1, 512, 512, 0.7);
        let out = liver_roi_preprocess(&full, 224).unwrap();
        assert!(out.scaled);
        assert_eq!((out.image.height(), out.image.width()), (224, 224));
        assert!(out.image.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));

        let empty = ImageTensor::filled(1, 512, 512, 0.0);
        let out = liver_roi_preprocess(&empty, 224).unwrap();
        assert!(out.warning.is_some());
        assert!(out.image.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.image.height(), 224);
    }

    #[test]
    fn roi_wide_region_keeps_aspect() {
        let img = ImageTensor::from_fn(1, 300, 500, |_, y, x| {
            if (50..150).contains(&y) && (10..460).contains(&x) { 0.5 } else { 0.0 }
        })
        .unwrap();
        let out = liver_roi_preprocess(&img, 224).unwrap();
        assert!(out.scaled);
        let bbox = nonzero_bbox(&out.image).unwrap();
        assert_eq!(bbox.width(), 224);
        // 100 * 224 / 450 = 49.8 -> 50 rows
        assert_eq!(bbox.height(), 50);
    }

    #[test]
    fn bilateral_constant_and_errors() {
        let c = ImageTensor::filled(1, 20, 20, 0.3);
        let out = bilateral_filter(&c, 3.0, 0.1).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-7));
        assert!(bilateral_filter(&c, 0.0, 0.1).is_err());
        assert!(bilateral_filter(&c, 1.0, -1.0).is_err());
    }

    #[test]
    fn rotation_by_zero_is_identity_like() {
        let img = ramp(1, 9, 9);
        let r = rotate(&img, 0.0);
        for (a, b) in r.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
