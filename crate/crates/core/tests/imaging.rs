use proptest::prelude::*;
use qfae::imaging::{
    augment, bilateral_filter, liver_roi_preprocess, normalize, patchify, resize, unpatchify, AugmentConfig,
    ImageTensor, NORM_MEAN, NORM_STD,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(c: usize, h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..c * h * w).map(|_| rng.random::<f32>()).collect();
    ImageTensor::new(c, h, w, data, false).unwrap()
}

/// Truncated Gaussian average over in-bounds neighbours, written out directly.
fn gaussian_oracle(img: &ImageTensor, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let (h, w) = (img.height() as i64, img.width() as i64);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (mut num, mut den) = (0.0, 0.0);
            for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                    let d2 = ((yy - y).pow(2) + (xx - x).pow(2)) as f64;
                    let k = (-d2 / (2.0 * sigma * sigma)).exp();
                    num += k * img.get(0, yy as usize, xx as usize) as f64;
                    den += k;
                }
            }
            out.push(num / den);
        }
    }
    out
}

/// Bilateral sum evaluated pixel by pixel in `f64`.
fn bilateral_oracle(img: &ImageTensor, ss: f64, sr: f64) -> Vec<f64> {
    let r = (3.0 * ss).ceil() as i64;
    let (h, w) = (img.height() as i64, img.width() as i64);
    let at = |y: i64, x: i64| img.get(0, y as usize, x as usize) as f64;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (mut num, mut den) = (0.0, 0.0);
            for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                    let d2 = ((yy - y).pow(2) + (xx - x).pow(2)) as f64;
                    let dv = at(yy, xx) - at(y, x);
                    let k = (-d2 / (2.0 * ss * ss) - dv * dv / (2.0 * sr * sr)).exp();
                    num += k * at(yy, xx);
                    den += k;
                }
            }
            out.push(num / den);
        }
    }
    out
}

#[test]
fn bilateral_with_huge_range_sigma_is_gaussian_blur() {
    let img = random_image(1, 23, 31, 1);
    for sigma in [1.0, 2.5] {
        let got = bilateral_filter(&img, sigma, 1e9).unwrap();
        let want = gaussian_oracle(&img, sigma);
        let worst = got
            .data()
            .iter()
            .zip(&want)
            .map(|(&g, &w)| (g as f64 - w).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "sigma {sigma}: max diff {worst}");
    }
}

#[test]
fn bilateral_keeps_step_edge_location() {
    let (h, w, edge) = (12, 40, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = ImageTensor::from_fn(1, h, w, |_, _, x| {
        let base = if x < edge { 0.2 } else { 0.8 };
        base + rng.random_range(-0.02..0.02)
    })
    .unwrap();
    let got = bilateral_filter(&img, 3.0, 0.05).unwrap();
    let want = bilateral_oracle(&img, 3.0, 0.05);
    for (g, o) in got.data().iter().zip(&want) {
        assert!((*g as f64 - o).abs() < 1e-6);
    }
    for y in 0..h {
        let argmax = |f: &dyn Fn(usize) -> f64| {
            (1..w)
                .max_by(|&a, &b| (f(a) - f(a - 1)).abs().total_cmp(&(f(b) - f(b - 1)).abs()))
                .unwrap()
        };
        let before = argmax(&|x| img.get(0, y, x) as f64);
        let after = argmax(&|x| got.get(0, y, x) as f64);
        assert_eq!(before, edge);
        assert_eq!(after, edge, "row {y}");
    }
}

/// Scans every pixel for the nonzero extremes.
fn scan_bbox(img: &ImageTensor) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for y in 0..img.height() {
        for x in 0..img.width() {
            if img.get(0, y, x) != 0.0 {
                b = Some(match b {
                    None => (y, x, y, x),
                    Some((t, l, bo, r)) => (t.min(y), l.min(x), bo.max(y), r.max(x)),
                });
            }
        }
    }
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn patchify_roundtrip(gh in 1usize..5, gw in 1usize..5, p in 1usize..9, c in prop::sample::select(vec![1usize, 3]), seed in any::<u64>()) {
        let img = random_image(c, gh * p, gw * p, seed);
        let (tokens, grid) = patchify(&img, p).unwrap();
        prop_assert_eq!(tokens.rows(), gh * gw);
        prop_assert_eq!(tokens.cols(), p * p * c);
        let back = unpatchify(&tokens, &grid).unwrap();
        prop_assert_eq!(back.data(), img.data());
    }

    #[test]
    fn bilateral_stays_in_input_range(h in 3usize..14, w in 3usize..14, ss in 0.5f64..3.0, sr in 0.01f64..1.0, seed in any::<u64>()) {
        let img = random_image(1, h, w, seed);
        let lo = img.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = img.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let out = bilateral_filter(&img, ss, sr).unwrap();
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
        prop_assert_eq!(&out, &bilateral_filter(&img, ss, sr).unwrap());
    }

    #[test]
    fn roi_matches_scan_and_keeps_values(h in 8usize..300, w in 8usize..300, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, l) = (rng.random_range(0..h), rng.random_range(0..w));
        let (b, r) = (rng.random_range(t..h), rng.random_range(l..w));
        let img = ImageTensor::from_fn(1, h, w, |_, y, x| {
            if (t..=b).contains(&y) && (l..=r).contains(&x) && rng.random::<f32>() < 0.7 { rng.random_range(0.01..1.0) } else { 0.0 }
        }).unwrap();
        let out = liver_roi_preprocess(&img, 224).unwrap();
        prop_assert_eq!((out.image.height(), out.image.width()), (224, 224));
        let want = scan_bbox(&img);
        let got = out.bbox.map(|bb| (bb.top, bb.left, bb.bottom, bb.right));
        prop_assert_eq!(got, want);
        if let Some((t, l, b, r)) = want {
            let (rh, rw) = (b - t + 1, r - l + 1);
            if rh <= 224 && rw <= 224 {
                let (ot, ol) = ((224 - rh) / 2, (224 - rw) / 2);
                for y in 0..rh {
                    for x in 0..rw {
                        prop_assert_eq!(out.image.get(0, ot + y, ol + x), img.get(0, t + y, l + x));
                    }
                }
            }
        }
    }

    #[test]
    fn degenerate_augment_equals_resize_normalize(h in 8usize..40, w in 8usize..40, side in 8usize..33, seed in any::<u64>()) {
        let img = random_image(3, h, w, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = augment(&img, &AugmentConfig::identity(), side, &mut rng).unwrap();
        let b = normalize(&resize(&img, side, side).unwrap(), NORM_MEAN, NORM_STD).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn augment_is_a_function_of_the_seed(seed in any::<u64>()) {
        let img = random_image(3, 20, 24, 9);
        let run = |s| augment(&img, &AugmentConfig::default(), 16, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        prop_assert_eq!(run(seed), run(seed));
    }
}
