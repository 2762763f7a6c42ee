//! Learnable query bank and the Q-Former bottleneck: queries self-attend,
//! cross-attend over the context tokens, then pass through an MLP.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Binder, Tape, Var};
use crate::error::{ensure, Result};
use crate::nn::{impl_params, Attention, LayerNorm, Mlp};
use crate::tensor::{Matrix, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QFormerConfig {
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub blocks: usize,
    pub layer_norm_eps: f64,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self {
            width: 768,
            heads: 8,
            mlp_ratio: 4.0,
            blocks: 1,
            layer_norm_eps: 1e-6,
        }
    }
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.width > 0, "qformer width must be positive");
        ensure!(
            self.heads > 0 && self.width.is_multiple_of(self.heads),
            "qformer heads ({}) must divide width ({})",
            self.heads,
            self.width
        );
        ensure!(self.blocks >= 1, "qformer needs at least one block");
        ensure!(self.mlp_ratio > 0.0, "qformer mlp_ratio must be positive");
        Ok(())
    }
}

/// `m x D` learnable query tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBank<T> {
    pub queries: Matrix<T>,
}
impl_params!(QueryBank { queries });

impl<T: Scalar> QueryBank<T> {
    pub fn len(&self) -> usize {
        self.queries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.queries.cols()
    }
}

/// Query count for a decoder that emits `(side / patch)²` patches.
pub fn query_count(side: usize, decoder_patch: usize) -> Result<usize> {
    ensure!(
        decoder_patch > 0 && side.is_multiple_of(decoder_patch),
        "decoder patch {decoder_patch} does not divide side {side}"
    );
    Ok((side / decoder_patch).pow(2))
}

/// Seeded `N(0, 0.02²)` query initialisation.
pub fn init_queries<T: Scalar>(m: usize, width: usize, seed: u64) -> Result<QueryBank<T>> {
    ensure!(m > 0 && width > 0, "query bank must be non-empty ({m} x {width})");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(QueryBank {
        queries: Matrix::normal(m, width, 0.02, &mut rng),
    })
}

#[derive(Debug, Clone)]
pub struct QFormerBlock<T> {
    pub norm1: LayerNorm<T>,
    pub self_attn: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub norm_context: LayerNorm<T>,
    pub cross_attn: Attention<T>,
    pub norm3: LayerNorm<T>,
    pub mlp: Mlp<T>,
}
impl_params!(QFormerBlock { norm1, self_attn, norm2, norm_context, cross_attn, norm3, mlp });

impl<T: Scalar> QFormerBlock<T> {
    pub fn new(cfg: &QFormerConfig, rng: &mut impl rand::Rng) -> Self {
        let (d, eps) = (cfg.width, cfg.layer_norm_eps);
        Self {
            norm1: LayerNorm::new(d, eps),
            self_attn: Attention::new(d, cfg.heads, rng),
            norm2: LayerNorm::new(d, eps),
            norm_context: LayerNorm::new(d, eps),
            cross_attn: Attention::new(d, cfg.heads, rng),
            norm3: LayerNorm::new(d, eps),
            mlp: Mlp::new(d, cfg.mlp_ratio, rng),
        }
    }

    /// Returns the updated queries and the per-head cross-attention
    /// probabilities (`m x |context|`).
    pub fn forward<'a>(
        &'a self,
        b: &Binder<'_, 'a, T>,
        q: Var,
        context: Var,
    ) -> (Var, Vec<Matrix<T>>) {
        let tape = b.tape();
        let h = self.norm1.forward(b, q);
        let q = tape.add(q, self.self_attn.forward(b, h, h));
        let h = self.norm2.forward(b, q);
        let ctx = self.norm_context.forward(b, context);
        let (c, weights) = self.cross_attn.forward_with_weights(b, h, ctx);
        let q = tape.add(q, c);
        let h = self.norm3.forward(b, q);
        (tape.add(q, self.mlp.forward(b, h)), weights)
    }
}

#[derive(Debug, Clone)]
pub struct QFormer<T> {
    pub blocks: Vec<QFormerBlock<T>>,
}
impl_params!(QFormer { blocks });

impl<T: Scalar> QFormer<T> {
    pub fn new(cfg: &QFormerConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            blocks: (0..cfg.blocks).map(|_| QFormerBlock::new(cfg, rng)).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.blocks[0].self_attn.dim()
    }

    /// Latent code `Z` (`m x D`) from queries `m x D` and context `L x D`.
    pub fn forward<'a>(&'a self, b: &Binder<'_, 'a, T>, queries: Var, context: Var) -> Result<Var> {
        Ok(self.forward_with_weights(b, queries, context)?.0)
    }

    /// As [`QFormer::forward`], also returning cross-attention probabilities
    /// per block and head.
    pub fn forward_with_weights<'a>(
        &'a self,
        b: &Binder<'_, 'a, T>,
        queries: Var,
        context: Var,
    ) -> Result<(Var, Vec<Vec<Matrix<T>>>)> {
        let tape = b.tape();
        let d = self.width();
        let (qs, cs) = (tape.shape(queries), tape.shape(context));
        ensure!(qs.1 == d, "query width {} does not match qformer width {d}", qs.1);
        ensure!(cs.1 == d, "context width {} does not match qformer width {d}", cs.1);
        ensure!(qs.0 > 0 && cs.0 > 0, "queries and context must be non-empty");
        let mut z = queries;
        let mut all = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, w) = block.forward(b, z, context);
            z = next;
            all.push(w);
        }
        Ok((z, all))
    }
}

/// Plain evaluation of the bottleneck.
pub fn qformer_forward<T: Scalar>(
    bank: &QueryBank<T>,
    context: &Matrix<T>,
    qformer: &QFormer<T>,
) -> Result<Matrix<T>> {
    let tape = Tape::new();
    let b = Binder::frozen(&tape);
    let q = b.param(&bank.queries);
    let c = tape.borrowed(context, false);
    let z = qformer.forward(&b, q, c)?;
    let out = tape.value(z).clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Params};

    fn small(width: usize, heads: usize) -> QFormer<f64> {
        let cfg = QFormerConfig {
            width,
            heads,
            mlp_ratio: 2.0,
            blocks: 1,
            layer_norm_eps: 1e-6,
        };
        QFormer::new(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn query_counts() {
        assert_eq!(query_count(224, 8).unwrap(), 784);
        assert_eq!(query_count(224, 32).unwrap(), 49);
        assert!(query_count(224, 10).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = init_queries::<f32>(4, 8, 1).unwrap();
        assert_eq!(a, init_queries(4, 8, 1).unwrap());
        assert_ne!(a, init_queries(4, 8, 2).unwrap());
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let qf = small(8, 2);
        let bank = init_queries::<f64>(3, 8, 0).unwrap();
        assert!(qformer_forward(&bank, &Matrix::zeros(5, 6), &qf).is_err());
    }

    #[test]
    fn hand_computed_single_token_case() {
        // Identity-like weights, one head, one query, one context token: the
        // cross-attention softmax over a single key is exactly 1, so the
        // cross-attention output is proj(v(LN(c))).
        let d = 2;
        let mut qf = small(d, 1);
        let blk = &mut qf.blocks[0];
        for a in [&mut blk.self_attn, &mut blk.cross_attn] {
            a.q = Linear::identity(d);
            a.k = Linear::identity(d);
            a.v = Linear::identity(d);
            a.proj = Linear::identity(d);
        }
        blk.mlp.fc2.weight = Matrix::zeros(d, blk.mlp.fc2.in_dim());
        blk.mlp.fc2.bias = Some(Matrix::zeros(1, d));
        let q = Matrix::from_vec(1, 2, vec![1.0, 3.0]);
        let c = Matrix::from_vec(1, 2, vec![-2.0, 5.0]);
        let z = qformer_forward(&QueryBank { queries: q }, &c, &qf).unwrap();
        // LN of a 2-vector (a, b) with a < b is (-1, 1) up to eps
        let ln = |x: [f64; 2]| {
            let m = (x[0] + x[1]) / 2.0;
            let v = ((x[0] - m).powi(2) + (x[1] - m).powi(2)) / 2.0;
            let r = 1.0 / (v + 1e-6).sqrt();
            [(x[0] - m) * r, (x[1] - m) * r]
        };
        let s = ln([1.0, 3.0]);
        let q1 = [1.0 + s[0], 3.0 + s[1]];
        let cc = ln([-2.0, 5.0]);
        let want = [q1[0] + cc[0], q1[1] + cc[1]];
        assert!((z.get(0, 0) - want[0]).abs() < 1e-12);
        assert!((z.get(0, 1) - want[1]).abs() < 1e-12);
    }

    #[test]
    fn cross_attention_rows_are_distributions() {
        let qf = small(8, 2);
        let tape = Tape::new();
        let b = Binder::frozen(&tape);
        let q = tape.leaf(Matrix::<f64>::normal(5, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(1)), false);
        let c = tape.leaf(Matrix::normal(7, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(2)), false);
        let (_, w) = qf.forward_with_weights(&b, q, c).unwrap();
        for head in &w[0] {
            assert_eq!(head.shape(), (5, 7));
            for r in 0..5 {
                let s: f64 = head.row(r).iter().sum();
                assert!(head.row(r).iter().all(|&p| p >= 0.0));
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parameter_names() {
        let qf = small(4, 1);
        let mut names = Vec::new();
        qf.visit("qformer", &mut |n, _| names.push(n.to_string()));
        assert!(names.contains(&"qformer.blocks.0.cross_attn.q.weight".to_string()));
        assert!(names.contains(&"qformer.blocks.0.norm_context.bias".to_string()));
    }
}
