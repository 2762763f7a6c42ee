//! The trainable part of the autoencoder (projections, queries, Q-Former,
//! decoder) and the end-to-end forward pass around the frozen encoders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archive::TensorArchive;
use crate::autograd::{Binder, Var};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{project_concat_graph, FrozenBackbone};
use crate::error::{ensure, Error, Result};
use crate::nn::{join, Linear, Params};
use crate::qformer::{init_queries, query_count, QFormer, QFormerConfig, QueryBank};
use crate::tensor::{Matrix, Scalar};

#[derive(Debug, Clone)]
pub struct Qfae<T> {
    pub projections: Vec<Linear<T>>,
    pub queries: QueryBank<T>,
    pub qformer: QFormer<T>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> Params<T> for Qfae<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s Matrix<T>)) {
        self.projections.visit(&join(prefix, "projection"), f);
        f(&join(prefix, "queries"), &self.queries.queries);
        self.qformer.visit(&join(prefix, "qformer"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix<T>)) {
        self.projections.visit_mut(&join(prefix, "projection"), f);
        f(&join(prefix, "queries"), &mut self.queries.queries);
        self.qformer.visit_mut(&join(prefix, "qformer"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

impl<T: Scalar> Qfae<T> {
    /// Seeded initialisation for encoders of the given hidden widths.
    pub fn new(
        encoder_widths: &[usize],
        qcfg: &QFormerConfig,
        dcfg: &DecoderConfig,
        side: usize,
        seed: u64,
    ) -> Result<Self> {
        ensure!(!encoder_widths.is_empty(), "at least one encoder is required");
        qcfg.validate()?;
        dcfg.validate()?;
        let m = query_count(side, dcfg.patch_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projections = encoder_widths
            .iter()
            .map(|&w| Linear::fan_in_uniform(w, qcfg.width, &mut rng))
            .collect();
        let queries = init_queries(m, qcfg.width, rng.random())?;
        let qformer = QFormer::new(qcfg, &mut rng)?;
        let decoder = Decoder::new(dcfg, qcfg.width, m, &mut rng)?;
        Ok(Self {
            projections,
            queries,
            qformer,
            decoder,
        })
    }

    /// Reconstruction (`C x side²`) from per-encoder tapped features.
    pub fn reconstruct_from_features<'a>(
        &'a self,
        b: &Binder<'_, 'a, T>,
        features: &[Vec<Var>],
    ) -> Result<Var> {
        let (ctx, _) = project_concat_graph(b, features, &self.projections)?;
        let q = b.param(&self.queries.queries);
        let z = self.qformer.forward(b, q, ctx)?;
        Ok(self.decoder.reconstruct(b, z)?.0)
    }

    /// Named tensors for a checkpoint.
    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        self.visit("", &mut |name, m| a.insert_matrix(name, m));
        a
    }

    /// Overwrites every parameter from `archive`; names and shapes must match.
    pub fn load_from_archive(&mut self, archive: &TensorArchive) -> Result<()> {
        let mut err = None;
        let mut seen = 0;
        self.visit_mut("", &mut |name, m| {
            if err.is_some() {
                return;
            }
            match archive.get(name) {
                None => err = Some(Error::manifest(name, "missing from checkpoint")),
                Some(t) if t.shape != [m.rows(), m.cols()] => {
                    err = Some(Error::manifest(
                        name,
                        format!("checkpoint shape {:?} but model expects {:?}", t.shape, m.shape()),
                    ))
                }
                Some(t) => {
                    for (dst, &src) in m.data_mut().iter_mut().zip(&t.data) {
                        *dst = T::of(src as f64);
                    }
                    seen += 1;
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        ensure!(
            seen == archive.len(),
            "checkpoint holds {} tensors but the model has {seen}",
            archive.len()
        );
        Ok(())
    }
}

/// Tapped features of every encoder for one image node.
pub fn encoder_features<'a, T: Scalar>(
    b: &Binder<'_, 'a, T>,
    encoders: &'a [FrozenBackbone<T>],
    image: Var,
    side: usize,
) -> Result<Vec<Vec<Var>>> {
    encoders.iter().map(|e| e.forward_taps(b, image, side)).collect()
}
