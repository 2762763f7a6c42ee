//! Frozen ViT backbones with hidden-state taps, per-encoder projections and
//! context-token assembly.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Manifest, Tensor, TensorArchive};
use crate::autograd::{Binder, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::imaging::PatchGrid;
use crate::nn::{mlp_hidden, Attention, Block, LayerNorm, Linear, Mlp, Params};
use crate::resample::{resample_matrix, Filter};
use crate::tensor::{Fnv1a, Matrix, Scalar};

/// Architecture of a pre-norm ViT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_size: usize,
    /// Class token plus register tokens prepended to the patch sequence.
    pub special_tokens: usize,
    pub mlp_ratio: f64,
    /// Side of the token grid the position embeddings were trained for.
    pub pretrain_grid: usize,
    pub layer_scale: bool,
    pub layer_norm_eps: f64,
    /// 0-based block indices whose outputs are returned.
    pub tap_layers: Vec<usize>,
    pub channels: usize,
}

impl BackboneSpec {
    /// ViT-L/14 with four registers.
    pub fn vit_large_14_reg() -> Self {
        Self {
            depth: 24,
            width: 1024,
            heads: 16,
            patch_size: 14,
            special_tokens: 5,
            mlp_ratio: 4.0,
            pretrain_grid: 37,
            layer_scale: true,
            layer_norm_eps: 1e-6,
            tap_layers: vec![20, 22],
            channels: 3,
        }
    }

    /// ViT-L/16 as used by masked-autoencoder pretraining.
    pub fn vit_large_16() -> Self {
        Self {
            depth: 24,
            width: 1024,
            heads: 16,
            patch_size: 16,
            special_tokens: 1,
            mlp_ratio: 4.0,
            pretrain_grid: 14,
            layer_scale: false,
            layer_norm_eps: 1e-6,
            tap_layers: vec![16, 20],
            channels: 3,
        }
    }

    /// Small randomly initialised backbone for desk-scale runs.
    pub fn toy() -> Self {
        Self {
            depth: 4,
            width: 64,
            heads: 4,
            patch_size: 8,
            special_tokens: 1,
            mlp_ratio: 4.0,
            pretrain_grid: 8,
            layer_scale: false,
            layer_norm_eps: 1e-6,
            tap_layers: vec![1, 3],
            channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.depth > 0, "backbone depth must be positive");
        ensure!(
            self.heads > 0 && self.width.is_multiple_of(self.heads),
            "heads ({}) must divide width ({})",
            self.heads,
            self.width
        );
        ensure!(self.patch_size > 0, "patch size must be positive");
        ensure!(self.special_tokens >= 1, "a class token is required (special_tokens >= 1)");
        ensure!(self.pretrain_grid > 0, "pretrain_grid must be positive");
        ensure!(self.mlp_ratio > 0.0, "mlp_ratio must be positive");
        ensure!(self.channels == 1 || self.channels == 3, "channels must be 1 or 3");
        ensure!(!self.tap_layers.is_empty(), "at least one tap layer is required");
        for &t in &self.tap_layers {
            ensure!(t < self.depth, "tap layer {t} outside [0, {})", self.depth);
        }
        Ok(())
    }

    pub fn registers(&self) -> usize {
        self.special_tokens - 1
    }

    pub fn grid_for(&self, side: usize) -> Result<usize> {
        ensure!(
            side > 0 && side.is_multiple_of(self.patch_size),
            "input side {side} is not divisible by patch size {}",
            self.patch_size
        );
        Ok(side / self.patch_size)
    }
}

/// Frozen ViT. Weights are private and only read after construction.
#[derive(Debug, Clone)]
pub struct FrozenBackbone<T: Scalar = f32> {
    spec: BackboneSpec,
    /// `[width, p*p*C]` with input features in (row, column, channel) order.
    patch_embed: Linear<T>,
    cls_token: Matrix<T>,
    registers: Option<Matrix<T>>,
    /// `(1 + grid*grid) x width`, class position first.
    pos_embed: Matrix<T>,
    blocks: Vec<Block<T>>,
    recorded_checksum: u64,
}

struct Weights<'s, T: Scalar>(&'s FrozenBackbone<T>);

impl<T: Scalar> Params<T> for Weights<'_, T> {
    fn visit<'v>(&'v self, prefix: &str, f: &mut dyn FnMut(&str, &'v Matrix<T>)) {
        let b = self.0;
        b.patch_embed.visit(&crate::nn::join(prefix, "patch_embed"), f);
        f(&crate::nn::join(prefix, "cls_token"), &b.cls_token);
        b.registers.visit(&crate::nn::join(prefix, "register_tokens"), f);
        f(&crate::nn::join(prefix, "pos_embed"), &b.pos_embed);
        b.blocks.visit(&crate::nn::join(prefix, "block"), f);
    }
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Matrix<T>)) {
        unreachable!("frozen backbone weights are never mutated")
    }
}

/// Token sequence of one tapped layer (special tokens removed).
pub type HiddenStates = Vec<Var>;

impl<T: Scalar> FrozenBackbone<T> {
    fn assemble(
        spec: BackboneSpec,
        patch_embed: Linear<T>,
        cls_token: Matrix<T>,
        registers: Option<Matrix<T>>,
        pos_embed: Matrix<T>,
        blocks: Vec<Block<T>>,
    ) -> Self {
        let mut b = Self {
            spec,
            patch_embed,
            cls_token,
            registers,
            pos_embed,
            blocks,
            recorded_checksum: 0,
        };
        b.recorded_checksum = b.checksum();
        b
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    /// FNV-1a 64 over all weights (little-endian bytes) in a fixed order.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::default();
        Weights(self).visit("", &mut |_, m| h.update(&m.le_bytes()));
        h.finish()
    }

    /// Checksum computed when the backbone was built.
    pub fn recorded_checksum(&self) -> u64 {
        self.recorded_checksum
    }

    pub fn param_count(&self) -> usize {
        Weights(self).param_count()
    }

    /// Replace the tap list (e.g. evaluation taps differ from training taps).
    pub fn with_taps(mut self, taps: Vec<usize>) -> Result<Self> {
        self.spec.tap_layers = taps;
        self.spec.validate()?;
        Ok(self)
    }

    /// Position embeddings for a `grid x grid` token layout, bicubically
    /// interpolated when the grid differs from the pretraining grid.
    pub fn position_embedding(&self, grid: usize) -> Matrix<T> {
        interpolate_pos_embed(&self.pos_embed, self.spec.pretrain_grid, grid)
    }

    /// Runs blocks up to the deepest tap on a `C x (side*side)` image and
    /// returns the tapped token sequences (`grid² x width`) in tap order.
    pub fn forward_taps<'a>(
        &'a self,
        binder: &Binder<'_, 'a, T>,
        image: Var,
        side: usize,
    ) -> Result<HiddenStates> {
        let tape = binder.tape();
        let spec = &self.spec;
        let grid = spec.grid_for(side)?;
        ensure!(
            tape.shape(image) == (spec.channels, side * side),
            "image shape {:?} does not match {} channels at side {side}",
            tape.shape(image),
            spec.channels
        );
        let pgrid = PatchGrid::new(spec.channels, side, side, spec.patch_size)?;
        let patches = tape.gather(image, pgrid.gather_index(), pgrid.tokens(), pgrid.token_dim());
        let tokens = self.patch_embed.forward(binder, patches);
        let pos = if grid == spec.pretrain_grid {
            binder.param(&self.pos_embed)
        } else {
            tape.constant(self.position_embedding(grid))
        };
        let cls = tape.add(binder.param(&self.cls_token), tape.slice_rows(pos, 0, 1));
        let body = tape.add(tokens, tape.slice_rows(pos, 1, grid * grid));
        let mut parts = vec![cls];
        if let Some(r) = &self.registers {
            parts.push(binder.param(r));
        }
        parts.push(body);
        let mut x = tape.concat_rows(&parts);
        let last = *spec.tap_layers.iter().max().expect("validated nonempty");
        let mut outputs = vec![None; spec.tap_layers.len()];
        for (i, block) in self.blocks.iter().enumerate().take(last + 1) {
            x = block.forward(binder, x);
            for (slot, &t) in spec.tap_layers.iter().enumerate() {
                if t == i {
                    outputs[slot] = Some(tape.slice_rows(x, spec.special_tokens, grid * grid));
                }
            }
        }
        Ok(outputs.into_iter().map(|o| o.expect("every tap reached")).collect())
    }

    /// Adapts the backbone to a different patch size: the patch kernel is
    /// bicubically resampled (scaled so a constant patch keeps its
    /// embedding) and position embeddings are re-gridded for `side`.
    pub fn with_patch_size(&self, patch_size: usize, side: usize) -> Result<Self> {
        ensure!(patch_size > 0, "patch size must be positive");
        ensure!(side.is_multiple_of(patch_size), "patch size {patch_size} does not divide side {side}");
        let grid = side / patch_size;
        let mut spec = self.spec.clone();
        let (p0, c) = (spec.patch_size, spec.channels);
        let weight = if patch_size == p0 {
            self.patch_embed.weight.clone()
        } else {
            let r = resample_matrix::<f64>(p0, patch_size, Filter::Bicubic, true);
            let gain = (p0 * p0) as f64 / (patch_size * patch_size) as f64;
            let mut w = Matrix::zeros(spec.width, patch_size * patch_size * c);
            for d in 0..spec.width {
                let row = self.patch_embed.weight.row(d);
                for ch in 0..c {
                    // out[y][x] = gain * Σ_ij r[y][i] r[x][j] k[i][j]
                    for y in 0..patch_size {
                        for x in 0..patch_size {
                            let mut acc = 0.0;
                            for i in 0..p0 {
                                let ry = r.get(y, i);
                                if ry == 0.0 {
                                    continue;
                                }
                                for j in 0..p0 {
                                    acc += ry * r.get(x, j) * row[(i * p0 + j) * c + ch].f64();
                                }
                            }
                            w.set(d, (y * patch_size + x) * c + ch, T::of(gain * acc));
                        }
                    }
                }
            }
            w
        };
        let pos_embed = self.position_embedding(grid);
        spec.patch_size = patch_size;
        spec.pretrain_grid = grid;
        spec.validate()?;
        Ok(Self::assemble(
            spec,
            Linear::new(weight, self.patch_embed.bias.clone()),
            self.cls_token.clone(),
            self.registers.clone(),
            pos_embed,
            self.blocks.clone(),
        ))
    }

    /// Serialises into the role layout read by [`load_backbone`].
    pub fn to_archive(&self) -> TensorArchive {
        let s = &self.spec;
        let (d, p, c, g) = (s.width, s.patch_size, s.channels, s.pretrain_grid);
        let mut a = TensorArchive::new();
        let f32s = |m: &Matrix<T>| m.data().iter().map(|v| v.f64() as f32).collect::<Vec<_>>();
        let put = |a: &mut TensorArchive, name: String, shape: Vec<usize>, data: Vec<f32>| {
            a.insert(name, Tensor::new(crate::archive::Dtype::F32, shape, data).expect("shape"));
        };
        // [D, (r, q, ch)] -> [D, ch, r, q]
        let mut kernel = vec![0.0f32; d * c * p * p];
        for o in 0..d {
            let row = self.patch_embed.weight.row(o);
            for r in 0..p {
                for q in 0..p {
                    for ch in 0..c {
                        kernel[((o * c + ch) * p + r) * p + q] = row[(r * p + q) * c + ch].f64() as f32;
                    }
                }
            }
        }
        put(&mut a, "patch_embed.weight".into(), vec![d, c, p, p], kernel);
        if let Some(b) = &self.patch_embed.bias {
            put(&mut a, "patch_embed.bias".into(), vec![d], f32s(b));
        }
        put(&mut a, "cls_token".into(), vec![1, 1, d], f32s(&self.cls_token));
        if let Some(r) = &self.registers {
            put(&mut a, "register_tokens".into(), vec![1, r.rows(), d], f32s(r));
        }
        put(&mut a, "pos_embed".into(), vec![1, 1 + g * g, d], f32s(&self.pos_embed));
        for (i, blk) in self.blocks.iter().enumerate() {
            let pre = format!("block.{i}");
            let at = &blk.attn;
            let mut qkv = f32s(&at.q.weight);
            qkv.extend(f32s(&at.k.weight));
            qkv.extend(f32s(&at.v.weight));
            put(&mut a, format!("{pre}.attn.qkv.weight"), vec![3 * d, d], qkv);
            let bias = |l: &Linear<T>| l.bias.as_ref().map(f32s).unwrap_or_else(|| vec![0.0; d]);
            let mut qkv_b = bias(&at.q);
            qkv_b.extend(bias(&at.k));
            qkv_b.extend(bias(&at.v));
            put(&mut a, format!("{pre}.attn.qkv.bias"), vec![3 * d], qkv_b);
            put(&mut a, format!("{pre}.attn.proj.weight"), vec![d, d], f32s(&at.proj.weight));
            put(&mut a, format!("{pre}.attn.proj.bias"), vec![d], bias(&at.proj));
            for (n, ln) in [("norm1", &blk.norm1), ("norm2", &blk.norm2)] {
                put(&mut a, format!("{pre}.{n}.weight"), vec![d], f32s(&ln.weight));
                put(&mut a, format!("{pre}.{n}.bias"), vec![d], f32s(&ln.bias));
            }
            let h = blk.mlp.fc1.out_dim();
            put(&mut a, format!("{pre}.mlp.fc1.weight"), vec![h, d], f32s(&blk.mlp.fc1.weight));
            put(&mut a, format!("{pre}.mlp.fc1.bias"), vec![h], bias_or_zero(&blk.mlp.fc1));
            put(&mut a, format!("{pre}.mlp.fc2.weight"), vec![d, h], f32s(&blk.mlp.fc2.weight));
            put(&mut a, format!("{pre}.mlp.fc2.bias"), vec![d], bias_or_zero(&blk.mlp.fc2));
            for (n, ls) in [("ls1", &blk.ls1), ("ls2", &blk.ls2)] {
                if let Some(g) = ls {
                    put(&mut a, format!("{pre}.{n}.gamma"), vec![d], f32s(g));
                }
            }
        }
        a
    }
}

fn bias_or_zero<T: Scalar>(l: &Linear<T>) -> Vec<f32> {
    match &l.bias {
        Some(b) => b.data().iter().map(|v| v.f64() as f32).collect(),
        None => vec![0.0; l.out_dim()],
    }
}

/// Bicubic re-gridding of `(1 + g0²) x D` position embeddings to `(1 + g²) x D`.
pub fn interpolate_pos_embed<T: Scalar>(pos: &Matrix<T>, from: usize, to: usize) -> Matrix<T> {
    if from == to {
        return pos.clone();
    }
    let d = pos.cols();
    let r = resample_matrix::<f64>(from, to, Filter::Bicubic, false);
    let mut out = Matrix::zeros(1 + to * to, d);
    out.row_mut(0).copy_from_slice(pos.row(0));
    let mut tmp = vec![0.0f64; to * from * d];
    // rows first: tmp[y][j] = Σ_i r[y][i] p[i][j]
    for y in 0..to {
        for i in 0..from {
            let w = r.get(y, i);
            if w == 0.0 {
                continue;
            }
            for j in 0..from {
                let src = pos.row(1 + i * from + j);
                let dst = &mut tmp[(y * from + j) * d..(y * from + j + 1) * d];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += w * s.f64();
                }
            }
        }
    }
    for y in 0..to {
        for x in 0..to {
            let dst = out.row_mut(1 + y * to + x);
            for j in 0..from {
                let w = r.get(x, j);
                if w == 0.0 {
                    continue;
                }
                let src = &tmp[(y * from + j) * d..(y * from + j + 1) * d];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o = T::of(o.f64() + w * s);
                }
            }
        }
    }
    out
}

/// Seeded random backbone. Same seed and spec give identical weights.
pub fn make_toy_backbone<T: Scalar>(seed: u64, spec: &BackboneSpec) -> Result<FrozenBackbone<T>> {
    make_toy_backbone_with(seed, spec, 0.02)
}

/// As [`make_toy_backbone`] with class, register and position embeddings
/// drawn with standard deviation `token_std`.
pub fn make_toy_backbone_with<T: Scalar>(seed: u64, spec: &BackboneSpec, token_std: f64) -> Result<FrozenBackbone<T>> {
    spec.validate()?;
    ensure!(token_std >= 0.0 && token_std.is_finite(), "token_std must be finite and non-negative");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, p, c, g) = (spec.width, spec.patch_size, spec.channels, spec.pretrain_grid);
    let patch_embed = Linear::xavier(p * p * c, d, &mut rng);
    let cls_token = Matrix::normal(1, d, token_std, &mut rng);
    let registers = (spec.registers() > 0).then(|| Matrix::normal(spec.registers(), d, token_std, &mut rng));
    let pos_embed = Matrix::normal(1 + g * g, d, token_std, &mut rng);
    let blocks = (0..spec.depth)
        .map(|_| {
            let mut b = Block::new(d, spec.heads, spec.mlp_ratio, spec.layer_norm_eps, &mut rng);
            if spec.layer_scale {
                b.ls1 = Some(Matrix::filled(1, d, T::of(0.1)));
                b.ls2 = Some(Matrix::filled(1, d, T::of(0.1)));
            }
            b
        })
        .collect();
    Ok(FrozenBackbone::assemble(spec.clone(), patch_embed, cls_token, registers, pos_embed, blocks))
}

/// Builds a backbone from `archive`, resolving roles through `manifest` when
/// given. Every expected tensor must be present with the expected shape; a
/// manifest with recorded checksums is verified first.
pub fn load_backbone<T: Scalar>(
    archive: &TensorArchive,
    manifest: Option<&Manifest>,
    spec: &BackboneSpec,
) -> Result<FrozenBackbone<T>> {
    spec.validate()?;
    if let Some(m) = manifest {
        m.verify(archive)?;
    }
    let resolve = |role: &str| -> String {
        manifest.map(|m| m.resolve(role).to_string()).unwrap_or_else(|| role.to_string())
    };
    let fetch = |role: &str, shape: &[usize]| -> Result<Matrix<T>> {
        let name = resolve(role);
        let t = archive.expect(&name, shape)?;
        if !t.data.iter().all(|v| v.is_finite()) {
            return Err(Error::manifest(name, "contains non-finite values"));
        }
        let n = t.data.len();
        Ok(Matrix::from_vec(1, n, t.data.iter().map(|&v| T::of(v as f64)).collect()))
    };
    let (d, p, c, g) = (spec.width, spec.patch_size, spec.channels, spec.pretrain_grid);
    let h = mlp_hidden(d, spec.mlp_ratio);

    let kernel = fetch("patch_embed.weight", &[d, c, p, p])?;
    let mut pw = Matrix::zeros(d, p * p * c);
    for o in 0..d {
        for ch in 0..c {
            for r in 0..p {
                for q in 0..p {
                    pw.set(o, (r * p + q) * c + ch, kernel.data()[((o * c + ch) * p + r) * p + q]);
                }
            }
        }
    }
    let patch_embed = Linear::new(pw, Some(fetch("patch_embed.bias", &[d])?));
    let cls_token = fetch("cls_token", &[1, 1, d])?;
    let registers = if spec.registers() > 0 {
        Some(fetch("register_tokens", &[1, spec.registers(), d])?.reshape(spec.registers(), d))
    } else {
        None
    };
    let pos_embed = fetch("pos_embed", &[1, 1 + g * g, d])?.reshape(1 + g * g, d);
    let mut blocks = Vec::with_capacity(spec.depth);
    for i in 0..spec.depth {
        let pre = format!("block.{i}");
        let qkv = fetch(&format!("{pre}.attn.qkv.weight"), &[3 * d, d])?.reshape(3 * d, d);
        let qkv_b = fetch(&format!("{pre}.attn.qkv.bias"), &[3 * d])?;
        let split = |k: usize| {
            Linear::new(
                Matrix::from_vec(d, d, qkv.data()[k * d * d..(k + 1) * d * d].to_vec()),
                Some(Matrix::from_vec(1, d, qkv_b.data()[k * d..(k + 1) * d].to_vec())),
            )
        };
        let attn = Attention {
            q: split(0),
            k: split(1),
            v: split(2),
            proj: Linear::new(
                fetch(&format!("{pre}.attn.proj.weight"), &[d, d])?.reshape(d, d),
                Some(fetch(&format!("{pre}.attn.proj.bias"), &[d])?),
            ),
            heads: spec.heads,
        };
        let norm = |n: &str| -> Result<LayerNorm<T>> {
            Ok(LayerNorm {
                weight: fetch(&format!("{pre}.{n}.weight"), &[d])?,
                bias: fetch(&format!("{pre}.{n}.bias"), &[d])?,
                eps: spec.layer_norm_eps,
            })
        };
        let mlp = Mlp {
            fc1: Linear::new(
                fetch(&format!("{pre}.mlp.fc1.weight"), &[h, d])?.reshape(h, d),
                Some(fetch(&format!("{pre}.mlp.fc1.bias"), &[h])?),
            ),
            fc2: Linear::new(
                fetch(&format!("{pre}.mlp.fc2.weight"), &[d, h])?.reshape(d, h),
                Some(fetch(&format!("{pre}.mlp.fc2.bias"), &[d])?),
            ),
        };
        let (ls1, ls2) = if spec.layer_scale {
            (
                Some(fetch(&format!("{pre}.ls1.gamma"), &[d])?),
                Some(fetch(&format!("{pre}.ls2.gamma"), &[d])?),
            )
        } else {
            (None, None)
        };
        blocks.push(Block {
            norm1: norm("norm1")?,
            attn,
            norm2: norm("norm2")?,
            mlp,
            ls1,
            ls2,
        });
    }
    Ok(FrozenBackbone::assemble(
        spec.clone(),
        patch_embed,
        cls_token,
        registers,
        pos_embed,
        blocks,
    ))
}

/// Tapped hidden states of `image` (normalised `C x side²` matrix) as plain
/// matrices, one per tap layer.
pub fn extract_hidden_states<T: Scalar>(
    backbone: &FrozenBackbone<T>,
    image: &Matrix<T>,
    side: usize,
) -> Result<Vec<Matrix<T>>> {
    let tape = Tape::new();
    let binder = Binder::frozen(&tape);
    let x = tape.borrowed(image, false);
    let taps = backbone.forward_taps(&binder, x, side)?;
    Ok(taps.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Location of one (encoder, tap) segment inside the concatenated context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub encoder: usize,
    pub tap: usize,
    pub offset: usize,
    pub len: usize,
}

/// Concatenated, projected context tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextTokens<T: Scalar> {
    pub tokens: Matrix<T>,
    pub layout: Vec<Segment>,
}

fn check_widths<T: Scalar>(shapes: &[Vec<(usize, usize)>], projs: &[Linear<T>]) -> Result<()> {
    ensure!(!shapes.is_empty(), "at least one encoder is required");
    ensure!(
        shapes.len() == projs.len(),
        "{} feature sets but {} projections",
        shapes.len(),
        projs.len()
    );
    let out = projs[0].out_dim();
    for (e, (taps, proj)) in shapes.iter().zip(projs).enumerate() {
        ensure!(proj.out_dim() == out, "projection {e} outputs {} but projection 0 outputs {out}", proj.out_dim());
        for (t, &(_, w)) in taps.iter().enumerate() {
            ensure!(
                w == proj.in_dim(),
                "encoder {e} tap {t} has width {w} but its projection expects {}",
                proj.in_dim()
            );
        }
    }
    Ok(())
}

/// Graph form of [`project_concat`]: returns the context tokens and their layout.
pub fn project_concat_graph<'a, T: Scalar>(
    binder: &Binder<'_, 'a, T>,
    features: &[Vec<Var>],
    projs: &'a [Linear<T>],
) -> Result<(Var, Vec<Segment>)> {
    let tape = binder.tape();
    let shapes: Vec<Vec<_>> = features
        .iter()
        .map(|taps| taps.iter().map(|&v| tape.shape(v)).collect())
        .collect();
    check_widths(&shapes, projs)?;
    let mut parts = Vec::new();
    let mut layout = Vec::new();
    let mut offset = 0;
    for (e, (taps, proj)) in features.iter().zip(projs).enumerate() {
        for (t, &f) in taps.iter().enumerate() {
            let len = tape.shape(f).0;
            parts.push(proj.forward(binder, f));
            layout.push(Segment {
                encoder: e,
                tap: t,
                offset,
                len,
            });
            offset += len;
        }
    }
    ensure!(offset > 0, "no context tokens");
    let tokens = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)
    };
    Ok((tokens, layout))
}

/// Projects every tapped sequence with its encoder's projection and
/// concatenates in encoder, tap, then spatial order.
pub fn project_concat<T: Scalar>(
    features: &[Vec<Matrix<T>>],
    projs: &[Linear<T>],
) -> Result<ContextTokens<T>> {
    let tape = Tape::new();
    let binder = Binder::frozen(&tape);
    let vars: Vec<Vec<Var>> = features
        .iter()
        .map(|taps| taps.iter().map(|m| tape.borrowed(m, false)).collect())
        .collect();
    let (tokens, layout) = project_concat_graph(&binder, &vars, projs)?;
    let tokens = tape.value(tokens).clone();
    Ok(ContextTokens { tokens, layout })
}

/// Shared, immutable handle used by training and evaluation.
pub type SharedBackbone = Arc<FrozenBackbone<f32>>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ImageTensor;

    fn image(side: usize) -> Matrix<f32> {
        ImageTensor::from_fn(3, side, side, |c, y, x| ((c + 2 * y + 3 * x) % 11) as f32 / 10.0)
            .unwrap()
            .to_matrix()
    }

    #[test]
    fn toy_token_counts() {
        let b = make_toy_backbone::<f32>(42, &BackboneSpec::toy()).unwrap();
        let taps = extract_hidden_states(&b, &image(64), 64).unwrap();
        assert_eq!(taps.len(), 2);
        for t in &taps {
            assert_eq!(t.shape(), (64, 64));
        }
        assert!(extract_hidden_states(&b, &image(60), 60).is_err());
    }

    #[test]
    fn special_tokens_are_stripped_for_any_count() {
        for special in [1, 2, 5] {
            let spec = BackboneSpec {
                special_tokens: special,
                ..BackboneSpec::toy()
            };
            let b = make_toy_backbone::<f32>(1, &spec).unwrap();
            let taps = extract_hidden_states(&b, &image(32), 32).unwrap();
            assert_eq!(taps[0].rows(), 16);
        }
    }

    #[test]
    fn checksum_is_seeded() {
        let s = BackboneSpec::toy();
        let a = make_toy_backbone::<f32>(42, &s).unwrap();
        let b = make_toy_backbone::<f32>(42, &s).unwrap();
        let c = make_toy_backbone::<f32>(7, &s).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert_eq!(a.checksum(), a.recorded_checksum());
    }

    #[test]
    fn archive_roundtrip_preserves_forward() {
        let spec = BackboneSpec {
            special_tokens: 3,
            layer_scale: true,
            ..BackboneSpec::toy()
        };
        let b = make_toy_backbone::<f32>(3, &spec).unwrap();
        let archive = b.to_archive();
        let manifest = Manifest::for_archive("toy", &archive);
        let loaded: FrozenBackbone<f32> = load_backbone(&archive, Some(&manifest), &spec).unwrap();
        assert_eq!(loaded.checksum(), b.checksum());
        let x = image(32);
        assert_eq!(
            extract_hidden_states(&b, &x, 32).unwrap(),
            extract_hidden_states(&loaded, &x, 32).unwrap()
        );
    }

    #[test]
    fn missing_tensor_is_named() {
        let spec = BackboneSpec::toy();
        let mut archive = make_toy_backbone::<f32>(3, &spec).unwrap().to_archive();
        archive.remove("block.2.attn.qkv.bias");
        let err = load_backbone::<f32>(&archive, None, &spec).unwrap_err();
        assert!(err.to_string().contains("block.2.attn.qkv.bias"), "{err}");
        assert_eq!(err.category(), "manifest");
    }

    #[test]
    fn projection_width_is_checked() {
        let f = vec![vec![Matrix::<f32>::zeros(4, 8)]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = vec![Linear::xavier(6, 5, &mut rng)];
        assert!(project_concat(&f, &bad).is_err());
        let id = vec![Linear::identity(8)];
        let f = vec![vec![Matrix::from_fn(4, 8, |r, c| (r * 8 + c) as f32)]];
        let ctx = project_concat(&f, &id).unwrap();
        assert_eq!(ctx.tokens, f[0][0]);
    }

    #[test]
    fn pos_embed_interpolation_keeps_constants() {
        let pos = Matrix::<f64>::filled(1 + 16, 3, 0.25);
        let out = interpolate_pos_embed(&pos, 4, 7);
        assert_eq!(out.shape(), (50, 3));
        assert!(out.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn kernel_resampling_preserves_constant_patch_response() {
        let mut b = make_toy_backbone::<f64>(5, &BackboneSpec::toy()).unwrap();
        for d in 0..b.width() {
            for (k, w) in b.patch_embed.weight.row_mut(d).iter_mut().enumerate() {
                *w = 0.01 * (d + k % 3) as f64;
            }
        }
        for p in [4, 16] {
            let v = b.with_patch_size(p, 64).unwrap();
            assert_eq!(v.spec().patch_size, p);
            for d in 0..b.width() {
                let s0: f64 = b.patch_embed.weight.row(d).iter().sum();
                let s1: f64 = v.patch_embed.weight.row(d).iter().sum();
                assert!((s0 - s1).abs() < 1e-9, "{s0} vs {s1}");
            }
        }
    }
}
