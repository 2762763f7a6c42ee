//! Transformer decoder from latent tokens to image patches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Binder, Tape, Var};
use crate::error::{ensure, Result};
use crate::imaging::{unpatchify, ImageTensor, PatchGrid};
use crate::nn::{impl_params, Block, LayerNorm, Linear};
use crate::tensor::{Matrix, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    pub channels: usize,
    pub layer_norm_eps: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            width: 768,
            depth: 6,
            heads: 12,
            mlp_ratio: 4.0,
            patch_size: 8,
            channels: 3,
            layer_norm_eps: 1e-6,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.width > 0, "decoder width must be positive");
        ensure!(
            self.heads > 0 && self.width.is_multiple_of(self.heads),
            "decoder heads ({}) must divide width ({})",
            self.heads,
            self.width
        );
        ensure!(self.patch_size > 0, "decoder patch size must be positive");
        ensure!(self.channels == 1 || self.channels == 3, "decoder channels must be 1 or 3");
        ensure!(self.mlp_ratio > 0.0, "decoder mlp_ratio must be positive");
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<T> {
    /// Present only when the latent width differs from the decoder width.
    pub embed: Option<Linear<T>>,
    pub pos_embed: Option<Matrix<T>>,
    pub blocks: Vec<Block<T>>,
    pub norm: Option<LayerNorm<T>>,
    pub head: Linear<T>,
    pub patch_size: usize,
    pub channels: usize,
}
impl_params!(Decoder { embed, pos_embed, blocks, norm, head });

impl<T: Scalar> Decoder<T> {
    /// `tokens` latent tokens of width `latent_width`. A zero-depth decoder is
    /// the linear head alone.
    pub fn new(
        cfg: &DecoderConfig,
        latent_width: usize,
        tokens: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        ensure!(tokens > 0, "decoder needs at least one token");
        let grid = (tokens as f64).sqrt().round() as usize;
        ensure!(grid * grid == tokens, "decoder token count {tokens} is not a square grid");
        let deep = cfg.depth > 0;
        let width = if deep { cfg.width } else { latent_width };
        let embed = (deep && latent_width != cfg.width).then(|| Linear::xavier(latent_width, cfg.width, rng));
        let pos_embed = deep.then(|| Matrix::normal(tokens, cfg.width, 0.02, rng));
        let blocks = (0..cfg.depth)
            .map(|_| Block::new(cfg.width, cfg.heads, cfg.mlp_ratio, cfg.layer_norm_eps, rng))
            .collect();
        let norm = deep.then(|| LayerNorm::new(cfg.width, cfg.layer_norm_eps));
        Ok(Self {
            embed,
            pos_embed,
            blocks,
            norm,
            head: Linear::xavier(width, cfg.head_width(), rng),
            patch_size: cfg.patch_size,
            channels: cfg.channels,
        })
    }

    pub fn latent_width(&self) -> usize {
        match &self.embed {
            Some(e) => e.in_dim(),
            None => self.head.in_dim(),
        }
    }

    /// Patch grid implied by `tokens` latent tokens.
    pub fn grid(&self, tokens: usize) -> Result<PatchGrid> {
        let g = (tokens as f64).sqrt().round() as usize;
        ensure!(g * g == tokens && g > 0, "latent length {tokens} is not a square grid");
        if let Some(p) = &self.pos_embed {
            ensure!(
                p.rows() == tokens,
                "latent length {tokens} does not match the decoder's {} positions",
                p.rows()
            );
        }
        PatchGrid::new(self.channels, g * self.patch_size, g * self.patch_size, self.patch_size)
    }

    /// Patch tokens (`m x p²C`) from latent `Z` (`m x D`).
    pub fn decode<'a>(&'a self, b: &Binder<'_, 'a, T>, z: Var) -> Result<Var> {
        let tape = b.tape();
        let (m, w) = tape.shape(z);
        self.grid(m)?;
        ensure!(
            w == self.latent_width(),
            "latent width {w} does not match decoder input width {}",
            self.latent_width()
        );
        let mut x = match &self.embed {
            Some(e) => e.forward(b, z),
            None => z,
        };
        if let Some(p) = &self.pos_embed {
            x = tape.add(x, b.param(p));
        }
        for block in &self.blocks {
            x = block.forward(b, x);
        }
        if let Some(n) = &self.norm {
            x = n.forward(b, x);
        }
        Ok(self.head.forward(b, x))
    }

    /// Reconstructed image as a `C x side²` graph node.
    pub fn reconstruct<'a>(&'a self, b: &Binder<'_, 'a, T>, z: Var) -> Result<(Var, PatchGrid)> {
        let tokens = self.decode(b, z)?;
        let grid = self.grid(b.tape().shape(z).0)?;
        let side = grid.height();
        let img = b.tape().gather(tokens, grid.scatter_index(), grid.channels, side * side);
        Ok((img, grid))
    }
}

/// Plain decode of a latent matrix.
pub fn decode<T: Scalar>(z: &Matrix<T>, decoder: &Decoder<T>) -> Result<Matrix<T>> {
    let tape = Tape::new();
    let b = Binder::frozen(&tape);
    let zv = tape.borrowed(z, false);
    let out = decoder.decode(&b, zv)?;
    let m = tape.value(out).clone();
    Ok(m)
}

/// `unpatchify(decode(z))`.
pub fn reconstruct(z: &Matrix<f32>, decoder: &Decoder<f32>) -> Result<ImageTensor> {
    let tokens = decode(z, decoder)?;
    let grid = decoder.grid(z.rows())?;
    unpatchify(&tokens, &grid)
}
