//! Transformer building blocks shared by the backbones, the Q-Former and the decoder.

use rand::Rng;

use crate::autograd::{Binder, Var};
use crate::tensor::{Matrix, Scalar};

/// Named traversal over a module's weights. `visit` and `visit_mut` must walk
/// the same tensors in the same order.
pub trait Params<T: Scalar> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s Matrix<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar> Params<T> for Matrix<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s Matrix<T>)) {
        f(prefix, self)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix<T>)) {
        f(prefix, self)
    }
}

impl<T: Scalar, P: Params<T>> Params<T> for Option<P> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s Matrix<T>)) {
        if let Some(p) = self {
            p.visit(prefix, f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix<T>)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f)
        }
    }
}

impl<T: Scalar, P: Params<T>> Params<T> for Vec<P> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s Matrix<T>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix<T>)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f)
        }
    }
}

/// Implements [`Params`] by visiting the listed fields under their own names.
macro_rules! impl_params {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::tensor::Scalar> $crate::nn::Params<T> for $ty<T> {
            fn visit<'s>(
                &'s self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &'s $crate::tensor::Matrix<T>),
            ) {
                $( $crate::nn::Params::visit(&self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &mut $crate::tensor::Matrix<T>),
            ) {
                $( $crate::nn::Params::visit_mut(&mut self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_params;

/// Affine map `y = x Wᵀ + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Option<Matrix<T>>,
}
impl_params!(Linear { weight, bias });

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Matrix<T>, bias: Option<Matrix<T>>) -> Self {
        if let Some(b) = &bias {
            assert_eq!(b.shape(), (1, weight.rows()), "bias shape");
        }
        Self { weight, bias }
    }

    pub fn xavier(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self::new(
            Matrix::xavier(out_dim, in_dim, rng),
            Some(Matrix::zeros(1, out_dim)),
        )
    }

    /// Uniform in `±1/sqrt(in_dim)` for weight and bias.
    pub fn fan_in_uniform(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::new(
            Matrix::uniform(out_dim, in_dim, bound, rng),
            Some(Matrix::uniform(1, out_dim, bound, rng)),
        )
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(Matrix::identity(dim), None)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward<'a>(&'a self, b: &Binder<'_, 'a, T>, x: Var) -> Var {
        let tape = b.tape();
        let w = b.param(&self.weight);
        let y = tape.matmul_t(x, false, w, true);
        match &self.bias {
            Some(bias) => tape.add_row(y, b.param(bias)),
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
    pub eps: f64,
}
impl_params!(LayerNorm { weight, bias });

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize, eps: f64) -> Self {
        Self {
            weight: Matrix::filled(1, dim, T::one()),
            bias: Matrix::zeros(1, dim),
            eps,
        }
    }

    pub fn forward<'a>(&'a self, b: &Binder<'_, 'a, T>, x: Var) -> Var {
        b.tape()
            .layer_norm(x, b.param(&self.weight), b.param(&self.bias), self.eps)
    }
}

/// Multi-head scaled dot-product attention with separate q/k/v projections.
#[derive(Debug, Clone)]
pub struct Attention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
}
impl_params!(Attention { q, k, v, proj });

impl<T: Scalar> Attention<T> {
    pub fn new(dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "heads must divide width");
        Self {
            q: Linear::xavier(dim, dim, rng),
            k: Linear::xavier(dim, dim, rng),
            v: Linear::xavier(dim, dim, rng),
            proj: Linear::xavier(dim, dim, rng),
            heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.q.out_dim()
    }

    /// Attend from `x` (queries) over `ctx` (keys and values).
    pub fn forward<'a>(&'a self, b: &Binder<'_, 'a, T>, x: Var, ctx: Var) -> Var {
        self.forward_inner(b, x, ctx, None)
    }

    /// As [`Attention::forward`], also returning the per-head attention
    /// probabilities (`queries x keys`, rows sum to one).
    pub fn forward_with_weights<'a>(
        &'a self,
        b: &Binder<'_, 'a, T>,
        x: Var,
        ctx: Var,
    ) -> (Var, Vec<Matrix<T>>) {
        let mut weights = Vec::with_capacity(self.heads);
        let out = self.forward_inner(b, x, ctx, Some(&mut weights));
        (out, weights)
    }

    fn forward_inner<'a>(
        &'a self,
        b: &Binder<'_, 'a, T>,
        x: Var,
        ctx: Var,
        mut weights: Option<&mut Vec<Matrix<T>>>,
    ) -> Var {
        let tape = b.tape();
        let q = self.q.forward(b, x);
        let k = self.k.forward(b, ctx);
        let v = self.v.forward(b, ctx);
        let dim = self.dim();
        let hd = dim / self.heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * hd, hd),
                    tape.slice_cols(k, h * hd, hd),
                    tape.slice_cols(v, h * hd, hd),
                )
            };
            let logits = tape.matmul_t(qh, false, kh, true);
            let logits = tape.scale(logits, scale);
            let p = tape.softmax(logits);
            if let Some(w) = weights.as_deref_mut() {
                w.push(tape.value(p).clone());
            }
            outs.push(tape.matmul(p, vh));
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        };
        self.proj.forward(b, merged)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}
impl_params!(Mlp { fc1, fc2 });

impl<T: Scalar> Mlp<T> {
    pub fn new(dim: usize, ratio: f64, rng: &mut impl Rng) -> Self {
        let hidden = mlp_hidden(dim, ratio);
        Self {
            fc1: Linear::xavier(dim, hidden, rng),
            fc2: Linear::xavier(hidden, dim, rng),
        }
    }

    pub fn forward<'a>(&'a self, b: &Binder<'_, 'a, T>, x: Var) -> Var {
        let h = self.fc1.forward(b, x);
        let h = b.tape().gelu(h);
        self.fc2.forward(b, h)
    }
}

pub fn mlp_hidden(dim: usize, ratio: f64) -> usize {
    ((dim as f64) * ratio).round().max(1.0) as usize
}

/// Pre-norm transformer block with optional per-channel layer scale.
#[derive(Debug, Clone)]
pub struct Block<T> {
    pub norm1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: Mlp<T>,
    pub ls1: Option<Matrix<T>>,
    pub ls2: Option<Matrix<T>>,
}
impl_params!(Block { norm1, attn, norm2, mlp, ls1, ls2 });

impl<T: Scalar> Block<T> {
    pub fn new(dim: usize, heads: usize, mlp_ratio: f64, eps: f64, rng: &mut impl Rng) -> Self {
        Self {
            norm1: LayerNorm::new(dim, eps),
            attn: Attention::new(dim, heads, rng),
            norm2: LayerNorm::new(dim, eps),
            mlp: Mlp::new(dim, mlp_ratio, rng),
            ls1: None,
            ls2: None,
        }
    }

    pub fn forward<'a>(&'a self, b: &Binder<'_, 'a, T>, x: Var) -> Var {
        let tape = b.tape();
        let h = self.norm1.forward(b, x);
        let mut a = self.attn.forward(b, h, h);
        if let Some(g) = &self.ls1 {
            a = tape.mul_row(a, b.param(g));
        }
        let x = tape.add(x, a);
        let h = self.norm2.forward(b, x);
        let mut m = self.mlp.forward(b, h);
        if let Some(g) = &self.ls2 {
            m = tape.mul_row(m, b.param(g));
        }
        tape.add(x, m)
    }
}

/// Collects gradients for every parameter of `module` in visit order; unused
/// parameters get zeros.
pub fn collect_grads<T: Scalar>(
    module: &impl Params<T>,
    binder: &Binder<'_, '_, T>,
    grads: &crate::autograd::Gradients<T>,
) -> Vec<Matrix<T>> {
    let mut out = Vec::new();
    module.visit("", &mut |_, m| {
        let g = binder
            .lookup(m)
            .and_then(|v| grads.get(v).cloned())
            .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()));
        out.push(g);
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let attn = Attention::<f64>::new(8, 2, &mut rng);
        let x = Matrix::<f64>::normal(3, 8, 1.0, &mut rng);
        let ctx = Matrix::<f64>::normal(7, 8, 1.0, &mut rng);
        let tape = Tape::new();
        let b = Binder::frozen(&tape);
        let (xv, cv) = (tape.constant(x), tape.constant(ctx));
        let (out, w) = attn.forward_with_weights(&b, xv, cv);
        assert_eq!(tape.shape(out), (3, 8));
        assert_eq!(w.len(), 2);
        for head in &w {
            assert_eq!(head.shape(), (3, 7));
            for r in 0..3 {
                let s: f64 = head.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(head.row(r).iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn visit_names_are_hierarchical() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut block = Block::<f32>::new(4, 2, 2.0, 1e-6, &mut rng);
        block.ls1 = Some(Matrix::filled(1, 4, 0.1));
        let mut names = Vec::new();
        block.visit("blocks.0", &mut |n, _| names.push(n.to_string()));
        assert!(names.contains(&"blocks.0.attn.q.weight".to_string()));
        assert!(names.contains(&"blocks.0.mlp.fc2.bias".to_string()));
        assert!(names.contains(&"blocks.0.ls1".to_string()));
        assert!(!names.iter().any(|n| n.ends_with("ls2")));
        let mut count = 0;
        block.visit_mut("blocks.0", &mut |_, _| count += 1);
        assert_eq!(count, names.len());
    }
}
