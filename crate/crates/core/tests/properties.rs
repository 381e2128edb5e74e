//! Property tests for the invariants each module promises.

mod common;

use common::grads::*;
use common::{brute_nearest, sq_dist};
use kbdm::classifier::{
    embed_text, retrieve, retrieve_dc, Fusion, PromptComponents, TokenClassifier, TokenLogits, DEFAULT_TEXT_DIM,
};
use kbdm::codebook::{
    assign_indices, codebook_loss_and_grad, init_kmeanspp, one_hot, pairwise_sq_distance, quantize, train_codebook,
    Codebook, CodebookConfig, FeatureExtractor, ImageFeatureGrid,
};
use kbdm::diffusion::{add_noise, make_schedule, predict_z0};
use kbdm::dynmask::{
    build_soft_mask, compute_gate, masked_attention_cached, pose_to_mask, GateNetwork, MaskMode, TimestepEmbedding,
};
use kbdm::harness::{eval_frechet_proxy, eval_pose_pck};
use kbdm::numerics::{cross_entropy, matmul, randn, softmax_rows, Parameterized, RngState, Tensor};
use kbdm::synthdata::{extract_keypoints, generate_corpus, mean_keypoint_error, SynthConfig};
use proptest::prelude::*;

fn shape(rng: &mut RngState, max: usize) -> usize {
    1 + rng.below(max)
}

fn binary(rows: usize, cols: usize, p: f64, rng: &mut RngState) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| if rng.bernoulli(p) { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    // Logit gaps stay below ~36 so no entry rounds to exactly 0 or 1 in f64.
    fn softmax_rows_are_distributions(seed in any::<u64>(), spread in 0.1f64..5.0) {
        let mut rng = RngState::new(seed);
        let (r, c) = (shape(&mut rng, 8), shape(&mut rng, 8));
        let y = softmax_rows(&randn(&[r, c], &mut rng).scale(spread));
        for i in 0..r {
            let row = y.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0 || c == 1 && v == 1.0));
        }
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let (a, b, c, d) = (shape(&mut rng, 8), shape(&mut rng, 8), shape(&mut rng, 8), shape(&mut rng, 8));
        let x = randn(&[a, b], &mut rng);
        let y = randn(&[b, c], &mut rng);
        let z = randn(&[c, d], &mut rng);
        let left = matmul(&matmul(&x, &y).unwrap(), &z).unwrap();
        let right = matmul(&x, &matmul(&y, &z).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) <= 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences(seed in 0u64..1_000_000) {
        prop_assert!(codebook_loss_check(seed) <= 1e-6);
        prop_assert!(classifier_check(seed) <= 1e-6);
        prop_assert!(gate_check(seed) <= 1e-5);
        prop_assert!(attention_check(seed, MaskMode::Multiplicative) <= 1e-5);
        prop_assert!(denoiser_check(seed, MaskMode::Multiplicative) <= 1e-5);
    }

    #[test]
    fn distances_and_quantization_match_brute_force(seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let (n, k, c) = (shape(&mut rng, 16), 1 + shape(&mut rng, 15), shape(&mut rng, 16));
        let z = ImageFeatureGrid::from_rows(randn(&[n, c], &mut rng)).unwrap();
        let cb = Codebook::new(randn(&[k, c], &mut rng)).unwrap();
        let d = pairwise_sq_distance(&z, &cb).unwrap();
        let idx = assign_indices(&d);
        let q = quantize(&one_hot(&idx, k).unwrap(), &cb).unwrap();
        for i in 0..n {
            for j in 0..k {
                prop_assert!((d.0.get(i, j) - sq_dist(z.features.row(i), cb.entries.value.row(j))).abs() <= 1e-10);
            }
            let b = brute_nearest(z.features.row(i), &cb.entries.value);
            prop_assert_eq!(idx.0[i], b);
            prop_assert_eq!(q.row(i), cb.entries.value.row(b));
        }
    }

    #[test]
    fn batch_gradient_ignores_sample_order(seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let (b, n, k, c) = (1 + shape(&mut rng, 7), shape(&mut rng, 6), 1 + shape(&mut rng, 6), shape(&mut rng, 6));
        let cb = Codebook::new(randn(&[k, c], &mut rng)).unwrap();
        let batch: Vec<ImageFeatureGrid> =
            (0..b).map(|_| ImageFeatureGrid::from_rows(randn(&[n, c], &mut rng)).unwrap()).collect();
        let summed = |order: &[usize]| {
            let mut g = Tensor::zeros(&[k, c]);
            for &i in order {
                let a = assign_indices(&pairwise_sq_distance(&batch[i], &cb).unwrap());
                let (_, grad) = codebook_loss_and_grad(&one_hot(&a, k).unwrap(), &cb, &batch[i]).unwrap();
                g.add_assign(&grad).unwrap();
            }
            g
        };
        let forward: Vec<usize> = (0..b).collect();
        let mut shuffled = forward.clone();
        for i in (1..b).rev() {
            shuffled.swap(i, rng.below(i + 1));
        }
        prop_assert!(summed(&forward).max_abs_diff(&summed(&shuffled)) <= 1e-12);
    }

    #[test]
    fn retrieval_argmax_is_shift_and_scale_invariant(seed in any::<u64>(), shift in -100.0f64..100.0, scale in 0.01f64..100.0) {
        let mut rng = RngState::new(seed);
        let (n, k) = (shape(&mut rng, 8), 1 + shape(&mut rng, 8));
        let logits = TokenLogits(randn(&[n, k], &mut rng));
        let base = logits.indices();
        prop_assert_eq!(&TokenLogits(logits.0.map(|v| v + shift)).indices(), &base);
        prop_assert_eq!(&TokenLogits(logits.0.scale(scale)).indices(), &base);
    }

    #[test]
    fn soft_mask_has_two_magnitudes(seed in any::<u64>(), g in 0.0f64..1.0) {
        let mut rng = RngState::new(seed);
        let (gh, gw) = (shape(&mut rng, 4), shape(&mut rng, 4));
        let pose = binary(2 * gh, 2 * gw, 0.3, &mut rng);
        let mask = build_soft_mask(&pose_to_mask(&pose, (gh, gw)).unwrap(), g);
        prop_assert!(mask.values.data().iter().all(|&v| v == 0.0 || v == 1.0 + g));
    }

    #[test]
    fn background_keys_get_the_zero_logit_weight(seed in any::<u64>(), g in 0.0f64..1.0) {
        let mut rng = RngState::new(seed);
        let (n, d) = (1 + shape(&mut rng, 8), shape(&mut rng, 6));
        let pose = binary(n, 1, 0.5, &mut rng);
        let mask = build_soft_mask(&pose_to_mask(&pose, (n, 1)).unwrap(), g);
        let q = randn(&[n, d], &mut rng);
        let k = randn(&[n, d], &mut rng);
        let v = randn(&[n, d], &mut rng);
        let cache = masked_attention_cached(&q, &k, &v, &mask, MaskMode::Multiplicative).unwrap();
        for r in 0..n {
            let row = cache.logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|l| (l - max).exp()).sum();
            for c in (0..n).filter(|&c| mask.values.data()[c] == 0.0) {
                prop_assert_eq!(row[c], 0.0);
                prop_assert_eq!(cache.weights.get(r, c), (-max).exp() / total);
            }
        }
    }

    #[test]
    fn oracle_inversion_recovers_latent(seed in any::<u64>(), t in 0usize..1000) {
        let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
        let mut rng = RngState::new(seed);
        let z0 = randn(&[6, 4], &mut rng);
        let eps = randn(&[6, 4], &mut rng);
        let zt = add_noise(&z0, t, &eps, &sched).unwrap();
        prop_assert!(predict_z0(&zt, sched.alpha_bars[t], &eps).unwrap().max_abs_diff(&z0) <= 1e-9);
    }

    #[test]
    fn corpus_is_a_pure_function_of_config(seed in any::<u64>(), jitter in 0i64..3) {
        let config = SynthConfig { count: 12, seed, jitter, ..Default::default() };
        prop_assert_eq!(generate_corpus(&config).unwrap(), generate_corpus(&config).unwrap());
    }

    #[test]
    fn pck_is_monotone_in_threshold(seed in any::<u64>(), lo in 0.0f64..4.0, extra in 0.0f64..4.0) {
        let corpus = generate_corpus(&SynthConfig { count: 8, seed, ..Default::default() }).unwrap();
        let mut rng = RngState::new(seed);
        // Noisy copies so some joints fall between the two radii.
        let images: Vec<Tensor> = corpus
            .iter()
            .map(|s| s.image.zip_map(&randn(&[32, 32], &mut rng), "noise", |a, b| (a + 0.3 * b).clamp(0.0, 1.0)).unwrap())
            .collect();
        let kps: Vec<_> = corpus.iter().map(|s| s.keypoints.clone()).collect();
        let classes: Vec<_> = corpus.iter().map(|s| s.class).collect();
        let a = eval_pose_pck(&images, &kps, &classes, lo).unwrap();
        let b = eval_pose_pck(&images, &kps, &classes, lo + extra).unwrap();
        prop_assert!(a <= b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn single_component_dc_is_plain_retrieval(seed in any::<u64>(), word in "[a-z]{1,10}") {
        let mut rng = RngState::new(seed);
        let clf = TokenClassifier::init(DEFAULT_TEXT_DIM, 8, 4, 5, &mut rng);
        let cb = Codebook::new(randn(&[5, 3], &mut rng)).unwrap();
        let prompt = PromptComponents::new(vec![word.clone()]).unwrap();
        let plain = retrieve(&embed_text(&word), &clf, &cb).unwrap();
        for fusion in [Fusion::Mean, Fusion::Sum, Fusion::Nearest] {
            let dc = retrieve_dc(&prompt, &clf, &cb, fusion).unwrap();
            prop_assert!(dc.data().iter().zip(plain.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn frechet_proxy_is_symmetric(a in any::<u64>(), b in any::<u64>()) {
        let fx = FeatureExtractor::new(4, 16, 7);
        let imgs = |seed| -> Vec<Tensor> {
            generate_corpus(&SynthConfig { count: 6, seed, ..Default::default() })
                .unwrap()
                .into_iter()
                .map(|s| s.image)
                .collect()
        };
        let (x, y) = (imgs(a), imgs(b));
        let ab = eval_frechet_proxy(&x, &y, &fx).unwrap();
        let ba = eval_frechet_proxy(&y, &x, &fx).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9);
        prop_assert!(eval_frechet_proxy(&x, &x, &fx).unwrap() <= 1e-6);
    }

    #[test]
    fn clean_samples_sit_at_the_keypoint_noise_floor(seed in any::<u64>()) {
        let corpus = generate_corpus(&SynthConfig { count: 16, seed, ..Default::default() }).unwrap();
        let mut total = 0.0;
        for s in &corpus {
            let (err, failed) = mean_keypoint_error(&extract_keypoints(&s.image, s.class), &s.keypoints);
            prop_assert_eq!(failed, 0);
            total += err;
        }
        let mean = total / corpus.len() as f64;
        prop_assert!(mean <= 1.0, "mean error {}", mean);
    }
}

#[test]
fn gate_stays_in_open_unit_interval() {
    let mut rng = RngState::new(17);
    for _ in 0..10_000 {
        let dim = 2 * (1 + rng.below(8));
        let mut gate = GateNetwork::init(dim, 1 + rng.below(8), &mut rng);
        for p in gate.params_mut() {
            p.value = randn(p.value.shape(), &mut rng);
        }
        let g = compute_gate(&TimestepEmbedding::new(rng.below(1000), dim), &gate).unwrap();
        assert!(g > 0.0 && g < 1.0, "gate {g}");
    }
}

#[test]
fn confident_cross_entropy_vanishes() {
    let mut logits = Tensor::zeros(&[3, 4]);
    let targets = [2, 0, 3];
    for (r, &t) in targets.iter().enumerate() {
        logits.set(r, t, 30.0);
    }
    assert!(cross_entropy(&logits, &targets).unwrap() < 1e-12);
}

#[test]
fn codebook_training_is_bit_reproducible() {
    let run = || {
        let mut rng = RngState::new(4);
        let corpus: Vec<ImageFeatureGrid> =
            (0..20).map(|_| ImageFeatureGrid::from_rows(randn(&[4, 3], &mut rng)).unwrap()).collect();
        let mut cb = init_kmeanspp(&corpus, 6, 4).unwrap();
        let config = CodebookConfig {
            entries: 6,
            epochs: 7,
            batch_size: 3,
            seed: 4,
            ..Default::default()
        };
        train_codebook(&corpus, &mut cb, &config).unwrap();
        cb.entries.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
