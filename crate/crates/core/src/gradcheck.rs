//! Central finite-difference checks of reverse-mode gradients in `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Binder, Tape, Var};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{make_toy_backbone, project_concat_graph, BackboneSpec};
use crate::error::{ensure, Result};
use crate::nn::{collect_grads, join, Linear, Params};
use crate::perceptual::{loss_from_features, LossForm, PerceptualModel};
use crate::qformer::{QFormer, QFormerConfig, QueryBank};
use crate::tensor::Matrix;

/// Default tolerance on [`relative_error`].
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    /// Largest per-tensor relative error.
    pub max_rel_err: f64,
    /// Number of scalar entries checked.
    pub entries: usize,
}

/// `max |a - n| / max(max |a|, max |n|, floor)`, zero when the denominator
/// is zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let scale = abs_max(analytic).max(abs_max(numeric)).max(floor);
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

fn abs_max(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Fraction of the module-wide gradient scale below which a tensor's own
/// scale is not used as the denominator. Tensors whose exact gradient is zero
/// (a key bias under softmax) otherwise divide rounding noise by itself.
pub const SCALE_FLOOR: f64 = 1e-3;

fn nudge<M: Params<f64>>(module: &mut M, tensor: usize, entry: usize, delta: f64) {
    let mut i = 0;
    module.visit_mut("", &mut |_, m| {
        if i == tensor {
            m.data_mut()[entry] += delta;
        }
        i += 1;
    });
}

/// Compares the analytic gradient of `loss` with respect to every parameter
/// of `module` against central differences with step `h`. `loss` returns the
/// value and one gradient per parameter tensor in visiting order.
pub fn check_module<M: Params<f64>>(
    name: &str,
    module: &mut M,
    h: f64,
    loss: impl Fn(&M) -> Result<(f64, Vec<Matrix<f64>>)>,
) -> Result<GradCheck> {
    let (_, analytic) = loss(module)?;
    let mut sizes = Vec::new();
    module.visit("", &mut |_, m| sizes.push(m.len()));
    ensure!(sizes.len() == analytic.len(), "gradient count does not match parameter count");
    let mut numerics = Vec::with_capacity(sizes.len());
    for (t, &n) in sizes.iter().enumerate() {
        let mut numeric = Vec::with_capacity(n);
        for j in 0..n {
            nudge(module, t, j, h);
            let up = loss(module)?.0;
            nudge(module, t, j, -2.0 * h);
            let down = loss(module)?.0;
            nudge(module, t, j, h);
            numeric.push((up - down) / (2.0 * h));
        }
        numerics.push(numeric);
    }
    let module_scale = analytic
        .iter()
        .map(|a| abs_max(a.data()))
        .chain(numerics.iter().map(|n| abs_max(n)))
        .fold(0.0, f64::max);
    let worst = analytic
        .iter()
        .zip(&numerics)
        .map(|(a, n)| relative_error(a.data(), n, SCALE_FLOOR * module_scale))
        .fold(0.0, f64::max);
    let entries = sizes.iter().sum();
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_err: worst,
        entries,
    })
}

/// `sum(out * weights)`: a scalar that exercises every output entry.
fn probe(tape: &Tape<'_, f64>, out: Var, weights: &Matrix<f64>) -> Var {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w);
    tape.sum(p)
}

struct QFormerCase {
    bank: QueryBank<f64>,
    qformer: QFormer<f64>,
}

impl Params<f64> for QFormerCase {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s Matrix<f64>)) {
        self.bank.visit(&join(prefix, "queries"), f);
        self.qformer.visit(&join(prefix, "qformer"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix<f64>)) {
        self.bank.visit_mut(&join(prefix, "queries"), f);
        self.qformer.visit_mut(&join(prefix, "qformer"), f);
    }
}

/// Q-Former (queries and all block weights), width 16.
pub fn check_qformer(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = QFormerConfig {
        width: 16,
        heads: 2,
        mlp_ratio: 2.0,
        blocks: 1,
        layer_norm_eps: 1e-6,
    };
    let mut case = QFormerCase {
        bank: QueryBank {
            queries: Matrix::normal(4, 16, 1.0, &mut rng),
        },
        qformer: QFormer::new(&cfg, &mut rng)?,
    };
    let context = Matrix::normal(6, 16, 1.0, &mut rng);
    let weights = Matrix::normal(4, 16, 1.0, &mut rng);
    check_module("qformer", &mut case, 1e-5, |c| {
        let tape = Tape::new();
        let b = Binder::trainable(&tape);
        let ctx = tape.borrowed(&context, false);
        let q = b.param(&c.bank.queries);
        let z = c.qformer.forward(&b, q, ctx)?;
        let l = probe(&tape, z, &weights);
        let v = tape.scalar(l);
        let g = collect_grads(c, &b, &tape.backward(l));
        Ok((v, g))
    })
}

/// Decoder with an input embedding, one block and the patch head, through
/// the reconstruction gather.
pub fn check_decoder(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DecoderConfig {
        width: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2.0,
        patch_size: 2,
        channels: 3,
        layer_norm_eps: 1e-6,
    };
    let mut dec = Decoder::<f64>::new(&cfg, 12, 4, &mut rng)?;
    let z = Matrix::normal(4, 12, 1.0, &mut rng);
    let weights = Matrix::normal(3, 16, 1.0, &mut rng);
    check_module("decoder", &mut dec, 1e-5, |d| {
        let tape = Tape::new();
        let b = Binder::trainable(&tape);
        let zv = tape.borrowed(&z, false);
        let (img, _) = d.reconstruct(&b, zv)?;
        let l = probe(&tape, img, &weights);
        let v = tape.scalar(l);
        let g = collect_grads(d, &b, &tape.backward(l));
        Ok((v, g))
    })
}

/// Per-encoder projections feeding the concatenated context (two encoders,
/// two taps each).
pub fn check_projection(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut projs = vec![
        Linear::<f64>::fan_in_uniform(10, 16, &mut rng),
        Linear::<f64>::fan_in_uniform(12, 16, &mut rng),
    ];
    let feats = [
        vec![Matrix::normal(4, 10, 1.0, &mut rng), Matrix::normal(4, 10, 1.0, &mut rng)],
        vec![Matrix::normal(9, 12, 1.0, &mut rng), Matrix::normal(9, 12, 1.0, &mut rng)],
    ];
    let weights = Matrix::normal(26, 16, 1.0, &mut rng);
    check_module("projection", &mut projs, 1e-5, |p| {
        let tape = Tape::new();
        let b = Binder::trainable(&tape);
        let vars: Vec<Vec<Var>> = feats
            .iter()
            .map(|taps| taps.iter().map(|m| tape.borrowed(m, false)).collect())
            .collect();
        let (ctx, _) = project_concat_graph(&b, &vars, p)?;
        let l = probe(&tape, ctx, &weights);
        let v = tape.scalar(l);
        let g = collect_grads(p, &b, &tape.backward(l));
        Ok((v, g))
    })
}

/// Perceptual loss with respect to the reconstruction, on a two-layer toy
/// model at two patch sizes.
pub fn check_perceptual(seed: u64, form: LossForm) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = BackboneSpec {
        depth: 2,
        width: 16,
        heads: 2,
        patch_size: 4,
        special_tokens: 1,
        mlp_ratio: 2.0,
        pretrain_grid: 4,
        layer_scale: false,
        layer_norm_eps: 1e-6,
        tap_layers: vec![0, 1],
        channels: 3,
    };
    let base = make_toy_backbone::<f64>(seed, &spec)?;
    let model = PerceptualModel::new(&base, &[0, 1], &[4, 8], 16)?;
    let x = Matrix::normal(3, 256, 1.0, &mut rng);
    let mut recon = Matrix::normal(3, 256, 1.0, &mut rng);
    let name = match form {
        LossForm::Hierarchical => "perceptual",
        LossForm::Global => "perceptual_global",
    };
    check_module(name, &mut recon, 1e-5, |r| {
        let tape = Tape::new();
        let fb = Binder::frozen(&tape);
        let tb = Binder::trainable(&tape);
        let xv = tape.borrowed(&x, false);
        let rv = tb.param(r);
        let fx = model.features_graph(&fb, xv)?;
        let fy = model.features_graph(&fb, rv)?;
        let l = loss_from_features(&tape, &model, &fx, &fy, form)?;
        let v = tape.scalar(l);
        let g = collect_grads(r, &tb, &tape.backward(l));
        Ok((v, g))
    })
}

/// Every standard check.
pub fn run_all(seed: u64) -> Result<Vec<GradCheck>> {
    Ok(vec![
        check_qformer(seed)?,
        check_decoder(seed)?,
        check_projection(seed)?,
        check_perceptual(seed, LossForm::Hierarchical)?,
        check_perceptual(seed, LossForm::Global)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_scaling() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0], 0.0), 0.0);
        assert_eq!(relative_error(&[2.0, 1.0], &[2.0, 0.0], 0.0), 0.5);
        assert_eq!(relative_error(&[0.0], &[1e-10], 1e-3), 1e-7);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut w = Matrix::<f64>::from_vec(1, 2, vec![0.3, -0.7]);
        let r = check_module("square", &mut w, 1e-5, |m| {
            let d = m.data();
            // true gradient is 2w; report 3w
            Ok((d[0] * d[0] + d[1] * d[1], vec![Matrix::from_vec(1, 2, vec![3.0 * d[0], 3.0 * d[1]])]))
        })
        .unwrap();
        assert!(r.max_rel_err > 0.3);
    }

    #[test]
    fn projection_gradients_match() {
        let r = check_projection(0).unwrap();
        assert!(r.max_rel_err < TOLERANCE, "{r:?}");
    }
}
