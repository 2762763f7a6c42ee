use proptest::prelude::*;
use qfae::archive::{Dtype, Tensor, TensorArchive};
use qfae::autograd::{Binder, Tape};
use qfae::config::RunConfig;
use qfae::evaluation::{auroc, evaluate_matrices, prepare_for_model, PreprocessConfig};
use qfae::imaging::{load_image, ImageTensor};
use qfae::perceptual::{read_raw_map, save_map_png, write_raw_map, LossForm};
use qfae::pipeline::Pipeline;
use qfae::synthetic::{generate, SyntheticConfig};
use qfae::tensor::Matrix;
use qfae::training::{onecycle_lr, reconstruction_loss, LossMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn desk() -> Pipeline {
    Pipeline::build(RunConfig::desk_scale()).unwrap()
}

fn corpus(n_train: usize, n_test: usize, seed: u64) -> qfae::synthetic::SyntheticCorpus {
    let cfg = SyntheticConfig {
        n_train,
        n_test_good: n_test,
        n_test_bad: n_test,
        ..SyntheticConfig::default()
    };
    generate(&cfg, seed).unwrap()
}

#[test]
fn combined_loss_is_the_sum_of_its_parts() {
    let p = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Matrix::<f32>::normal(3, 64 * 64, 1.0, &mut rng);
    let recon = Matrix::<f32>::normal(3, 64 * 64, 1.0, &mut rng);
    let value = |mode| {
        let tape = Tape::new();
        let fb = Binder::frozen(&tape);
        let xv = tape.borrowed(&x, false);
        let rv = tape.borrowed(&recon, false);
        let fx = p.loss_model.features_graph(&fb, xv).unwrap();
        let l = reconstruction_loss(&tape, &fb, &p.loss_model, xv, &fx, rv, mode, LossForm::Hierarchical).unwrap();
        tape.scalar(l)
    };
    let mae = value(LossMode::Mae);
    let perc = value(LossMode::Perceptual);
    assert!(mae > 0.0 && perc > 0.0);
    assert_eq!(value(LossMode::MaePerceptual), mae + perc);
}

#[test]
fn training_reduces_the_loss() {
    let mut cfg = RunConfig::desk_scale();
    cfg.train.batch_size = 4;
    cfg.train.max_steps = Some(200);
    cfg.train.epochs = 100;
    let p = Pipeline::build(cfg).unwrap();
    let data = corpus(64, 0, 5);
    let run = p.train(0, &data.train, None).unwrap();
    let losses = run.outcome.losses();
    assert_eq!(losses.len(), 200);
    let head = losses[..10].iter().sum::<f64>() / 10.0;
    let tail = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(run.outcome.final_loss < losses[0], "{} vs {}", run.outcome.final_loss, losses[0]);
    assert!(tail < head, "first ten {head}, last ten {tail}");
}

#[test]
fn empty_and_non_finite_training_data_are_rejected() {
    let p = desk();
    assert!(p.train(0, &[], None).is_err());
    let nan = ImageTensor::new(3, 4, 4, vec![f32::NAN; 48], false);
    assert!(matches!(nan, Err(e) if e.is_validation()));
    let nan = ImageTensor::new(3, 4, 4, vec![f32::NAN; 48], true);
    assert!(matches!(nan, Err(e) if e.is_validation()));
}

#[test]
fn repeated_evaluation_is_identical() {
    let p = desk();
    let model = p.new_model(3).unwrap();
    let profile = p.profile(None);
    let eval = p.eval_model(&profile).unwrap();
    let scorer = p.scorer(&model, &eval, &profile);
    let data = corpus(1, 6, 8);
    let test: Vec<_> = data
        .test
        .iter()
        .map(|(img, bad, _)| (prepare_for_model(img, 64, &PreprocessConfig::default()).unwrap(), *bad))
        .collect();
    let a = evaluate_matrices(&scorer, &test, 1).unwrap();
    let b = evaluate_matrices(&scorer, &test, 1).unwrap();
    assert_eq!(a, b);
}

#[test]
fn map_export_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let map = Matrix::<f64>::from_fn(9, 13, |y, x| (y * 13 + x) as f64 * 0.25 - 3.0);
    let raw = dir.path().join("map.raw");
    write_raw_map(&map, &raw).unwrap();
    let back = read_raw_map(&raw).unwrap();
    assert_eq!(back.shape(), (9, 13));
    for (a, b) in map.data().iter().zip(back.data()) {
        assert_eq!(*a as f32, *b);
    }
    let png = dir.path().join("map.png");
    save_map_png(&map, &png).unwrap();
    let (img, _) = load_image(&png).unwrap();
    assert_eq!((img.height(), img.width()), (9, 13));
    assert_eq!(img.get(0, 0, 0), 0.0);
    assert_eq!(img.get(0, 8, 12), 1.0);
    let c = Matrix::<f64>::filled(4, 4, 0.7);
    save_map_png(&c, &png).unwrap();
    assert!(load_image(&png).unwrap().0.data().iter().all(|&v| v == 0.0));
}

#[test]
fn onecycle_endpoints() {
    let max = 8e-5;
    assert!((onecycle_lr(0, 1000, max).unwrap() - max / 25.0).abs() < 1e-18);
    assert!((onecycle_lr(300, 1000, max).unwrap() - max).abs() < 1e-18);
    assert!((onecycle_lr(999, 1000, max).unwrap() - max / 1e4).abs() < 1e-18);
    assert!(onecycle_lr(1000, 1000, max).is_err());
}

fn tensor_strategy() -> impl Strategy<Value = (String, bool, Vec<usize>, u64)> {
    (
        "[a-z][a-z0-9_.]{0,15}",
        any::<bool>(),
        prop::collection::vec(1usize..6, 0..4),
        any::<u64>(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auroc_of_negated_scores_is_complementary(scores in prop::collection::vec(-5.0f64..5.0, 2..40), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<bool> = scores.iter().map(|_| rand::Rng::random(&mut rng)).collect();
        labels[0] = true;
        labels[1] = false;
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = auroc(&scores, &labels).unwrap() + auroc(&neg, &labels).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn onecycle_stays_between_its_bounds(total in 2usize..2000, frac in 0.0f64..1.0, max in 1e-6f64..1.0) {
        let step = ((total - 1) as f64 * frac) as usize;
        let lr = onecycle_lr(step, total, max).unwrap();
        prop_assert!(lr >= max / 1e4 * (1.0 - 1e-12) && lr <= max * (1.0 + 1e-12));
    }

    #[test]
    fn onecycle_rises_then_falls(total in 10usize..2000, max in 1e-6f64..1.0) {
        let lrs: Vec<f64> = (0..total).map(|s| onecycle_lr(s, total, max).unwrap()).collect();
        let peak = lrs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert!(lrs[..=peak].windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(lrs[peak..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn archive_roundtrips(entries in prop::collection::vec(tensor_strategy(), 0..6), meta in prop::collection::btree_map("[a-z]{1,8}", ".{0,12}", 0..4)) {
        let mut archive = TensorArchive::new();
        for (name, half, shape, seed) in &entries {
            let n: usize = shape.iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let data: Vec<f32> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -1e3f32..1e3)).collect();
            let dtype = if *half { Dtype::F16 } else { Dtype::F32 };
            archive.insert(name.clone(), Tensor::new(dtype, shape.clone(), data).unwrap());
        }
        for (k, v) in &meta {
            archive.set_metadata(k.clone(), v.clone());
        }
        let back = TensorArchive::from_bytes(&archive.to_bytes()).unwrap();
        prop_assert_eq!(&back, &archive);
        prop_assert_eq!(back.checksum(), archive.checksum());
    }
}
