//! Separable 1-D resampling kernels shared by image resizing, anomaly-map
//! resizing, position-embedding interpolation and patch-kernel resampling.
//!
//! Output sample `i` is centred at `(i + 0.5) * in / out` in input pixel
//! coordinates (half-pixel convention). Windows are clipped at the borders and
//! the remaining weights renormalised, so constant signals stay constant.

use crate::tensor::{Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filter {
    Bilinear,
    /// Cubic convolution with `a = -0.75`.
    Bicubic,
}

impl Filter {
    fn support(self) -> f64 {
        match self {
            Filter::Bilinear => 1.0,
            Filter::Bicubic => 2.0,
        }
    }

    fn eval(self, x: f64) -> f64 {
        let x = x.abs();
        match self {
            Filter::Bilinear => (1.0 - x).max(0.0),
            Filter::Bicubic => {
                let a = -0.75;
                if x < 1.0 {
                    ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
                } else if x < 2.0 {
                    (((x - 5.0) * x + 8.0) * x - 4.0) * a
                } else {
                    0.0
                }
            }
        }
    }
}

/// Sparse row of resampling weights: `out[i] = Σ_k weights[k] * in[start + k]`.
#[derive(Debug, Clone)]
pub struct Taps {
    pub start: usize,
    pub weights: Vec<f64>,
}

/// Per-output-sample weights for resampling a length-`in_len` signal to `out_len`.
///
/// With `antialias`, downsampling widens the kernel by the scale factor.
pub fn taps(in_len: usize, out_len: usize, filter: Filter, antialias: bool) -> Vec<Taps> {
    assert!(in_len > 0 && out_len > 0, "resample lengths must be positive");
    if in_len == out_len {
        return (0..out_len)
            .map(|i| Taps {
                start: i,
                weights: vec![1.0],
            })
            .collect();
    }
    let scale = in_len as f64 / out_len as f64;
    let stretch = if antialias && scale > 1.0 { scale } else { 1.0 };
    let support = filter.support() * stretch;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support).floor().max(0.0)) as usize;
            let hi = ((center + support).ceil() as usize).min(in_len);
            let mut weights: Vec<f64> = (lo..hi)
                .map(|j| filter.eval((j as f64 + 0.5 - center) / stretch))
                .collect();
            // trim zero tails so `start` points at the first contributing sample
            let first = weights.iter().position(|&w| w != 0.0).unwrap_or(0);
            let last = weights.iter().rposition(|&w| w != 0.0).unwrap_or(0);
            weights = weights[first..=last].to_vec();
            let total: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= total;
            }
            Taps {
                start: lo + first,
                weights,
            }
        })
        .collect()
}

/// Dense `out_len x in_len` resampling operator.
pub fn resample_matrix<T: Scalar>(
    in_len: usize,
    out_len: usize,
    filter: Filter,
    antialias: bool,
) -> Matrix<T> {
    let mut m = Matrix::zeros(out_len, in_len);
    for (i, t) in taps(in_len, out_len, filter, antialias).iter().enumerate() {
        for (k, &w) in t.weights.iter().enumerate() {
            m.set(i, t.start + k, T::of(w));
        }
    }
    m
}

/// Resize a row-major `h x w` plane.
pub fn resize_plane(
    src: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    filter: Filter,
    antialias: bool,
) -> Vec<f64> {
    assert_eq!(src.len(), h * w, "plane size mismatch");
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let tx = taps(w, out_w, filter, antialias);
    let ty = taps(h, out_h, filter, antialias);
    let mut tmp = vec![0.0; h * out_w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (x, t) in tx.iter().enumerate() {
            tmp[y * out_w + x] = t
                .weights
                .iter()
                .enumerate()
                .map(|(k, &wt)| wt * row[t.start + k])
                .sum();
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for (y, t) in ty.iter().enumerate() {
        for (k, &wt) in t.weights.iter().enumerate() {
            let src_row = &tmp[(t.start + k) * out_w..(t.start + k + 1) * out_w];
            for (o, &s) in out[y * out_w..(y + 1) * out_w].iter_mut().zip(src_row) {
                *o += wt * s;
            }
        }
    }
    out
}

/// Bilinear resize of a map matrix (`h x w`).
pub fn resize_map<T: Scalar>(m: &Matrix<T>, out_h: usize, out_w: usize) -> Matrix<T> {
    if m.shape() == (out_h, out_w) {
        return m.clone();
    }
    let src: Vec<f64> = m.data().iter().map(|v| v.f64()).collect();
    let out = resize_plane(&src, m.rows(), m.cols(), out_h, out_w, Filter::Bilinear, true);
    Matrix::from_vec(out_h, out_w, out.into_iter().map(T::of).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_one() {
        for (i, o) in [(4, 7), (7, 4), (16, 37), (37, 16), (5, 5), (1, 3), (3, 1)] {
            for f in [Filter::Bilinear, Filter::Bicubic] {
                for aa in [false, true] {
                    let m = resample_matrix::<f64>(i, o, f, aa);
                    for r in 0..o {
                        let s: f64 = m.row(r).iter().sum();
                        assert!((s - 1.0).abs() < 1e-12, "{i}->{o} {f:?} {aa}");
                    }
                }
            }
        }
    }

    #[test]
    fn upsampling_matches_clamped_half_pixel_bilinear() {
        let (n_in, n_out) = (4usize, 7usize);
        let m = resample_matrix::<f64>(n_in, n_out, Filter::Bilinear, true);
        for i in 0..n_out {
            let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
            let j0 = (src.floor() as usize).min(n_in - 1);
            let j1 = (j0 + 1).min(n_in - 1);
            let t = src - j0 as f64;
            let mut want = vec![0.0; n_in];
            want[j0] += 1.0 - t;
            want[j1] += t;
            for j in 0..n_in {
                assert!((m.get(i, j) - want[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_size_is_identity() {
        let m = resample_matrix::<f32>(6, 6, Filter::Bicubic, false);
        assert_eq!(m, Matrix::identity(6));
    }
}
