use gmparse::experiment::shuffle_targets;
use gmparse::labels::{ArchitectureTargets, LossTargets, DISCRETE_CARDINALITIES, NUM_CONTINUOUS, NUM_DISCRETE};
use gmparse::metrics::{aggregate_predictions, auc, f1_score, Decision};
use gmparse::spectral::{dft2, high_pass, idft2, low_pass, window_mask, Spectrum};
use gmparse::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn labels(classes: usize, len: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..classes, len)
}

proptest! {
    #[test]
    fn macro_f1_ignores_consistent_relabeling(
        (pred, target) in (1usize..40).prop_flat_map(|n| (labels(4, n), labels(4, n))),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let a = f1_score(&pred, &target, 4).unwrap();
        let rp: Vec<usize> = pred.iter().map(|&l| perm[l]).collect();
        let rt: Vec<usize> = target.iter().map(|&l| perm[l]).collect();
        let b = f1_score(&rp, &rt, 4).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn auc_ignores_monotone_transforms(
        scores in prop::collection::vec(-5.0f64..5.0, 4..60),
        seed in any::<u64>(),
    ) {
        let n = scores.len();
        let mut labels: Vec<bool> = (0..n).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
        labels[0] = true;
        labels[1] = false;
        let a = auc(&scores, &labels).unwrap();
        let exp: Vec<f64> = scores.iter().map(|&s| (0.5 * s).exp() * 3.0 + 1.0).collect();
        let cube: Vec<f64> = scores.iter().map(|&s| s * s * s - 7.0).collect();
        prop_assert!((a - auc(&exp, &labels).unwrap()).abs() < 1e-12);
        prop_assert!((a - auc(&cube, &labels).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
        // flipping the labels mirrors the curve
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        prop_assert!((a + auc(&scores, &flipped).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregating_copies_returns_the_prediction(
        cont in prop::array::uniform9(0.0f64..1.0),
        disc in prop::array::uniform6(0usize..2),
        coarse in prop::array::uniform3(any::<bool>()),
        fine in prop::array::uniform8(any::<bool>()),
        n in 1usize..12,
    ) {
        let d = Decision { continuous: cont, discrete: disc, coarse, fine };
        let agg = aggregate_predictions(&vec![d.clone(); n], n).unwrap();
        prop_assert_eq!(agg.discrete, d.discrete);
        prop_assert_eq!(agg.coarse, d.coarse);
        prop_assert_eq!(agg.fine, d.fine);
        for (a, c) in agg.continuous.iter().zip(&cont) {
            prop_assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn shuffle_preserves_every_marginal(n in 2usize..14, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<(ArchitectureTargets, LossTargets)> = (0..n)
            .map(|i| {
                let arch = ArchitectureTargets {
                    continuous_raw: std::array::from_fn(|j| (i * 31 + j * 7) as f64),
                    discrete: std::array::from_fn(|k| (i + k) % DISCRETE_CARDINALITIES[k]),
                };
                let fine = std::array::from_fn(|m| m == 0 || (i >> (m % 3)) & 1 == 1);
                (arch, LossTargets::from_fine(fine).unwrap())
            })
            .collect();
        let shuffled = shuffle_targets(&targets, &mut rng);
        prop_assert_eq!(shuffled.len(), n);
        prop_assert!(shuffled != targets);
        for j in 0..NUM_CONTINUOUS {
            let mut a: Vec<f64> = targets.iter().map(|t| t.0.continuous_raw[j]).collect();
            let mut b: Vec<f64> = shuffled.iter().map(|t| t.0.continuous_raw[j]).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
        for k in 0..NUM_DISCRETE {
            let mut a: Vec<usize> = targets.iter().map(|t| t.0.discrete[k]).collect();
            let mut b: Vec<usize> = shuffled.iter().map(|t| t.0.discrete[k]).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }
        let mut a: Vec<_> = targets.iter().map(|t| t.1.fine).collect();
        let mut b: Vec<_> = shuffled.iter().map(|t| t.1.fine).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }
}

fn image(h: usize, w: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-1.0f64..1.0, h * w).prop_map(move |v| Tensor::new(vec![h, w], v).unwrap())
}

fn sized_image() -> impl Strategy<Value = Tensor<f64>> {
    (prop::sample::select(vec![2usize, 3, 4, 5, 8]), prop::sample::select(vec![2usize, 4, 6, 7, 8]))
        .prop_flat_map(|(h, w)| image(h, w))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Brute-force centered DFT used as the oracle.
fn direct_dft(x: &Tensor<f64>) -> Spectrum<f64> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let mut s = Spectrum::zeros(h, w);
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let ang = -2.0 * std::f64::consts::PI * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                    let p = x.data()[r * w + c];
                    re += p * ang.cos();
                    im += p * ang.sin();
                }
            }
            s.set((u + h / 2) % h, (v + w / 2) % w, re, im);
        }
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dft_matches_the_direct_transform(x in sized_image()) {
        let fast = dft2(&x).unwrap();
        let slow = direct_dft(&x);
        for i in 0..fast.re.len() {
            prop_assert!(close(fast.re[i], slow.re[i], 1e-9));
            prop_assert!(close(fast.im[i], slow.im[i], 1e-9));
        }
    }

    #[test]
    fn round_trip_and_parseval(x in sized_image()) {
        let s = dft2(&x).unwrap();
        let y = idft2(&s).unwrap();
        prop_assert!(x.max_abs_diff(&y) <= 1e-6 * x.data().iter().fold(1.0f64, |m, v| m.max(v.abs())));
        let spatial: f64 = x.data().iter().map(|v| v * v).sum();
        let n = x.numel() as f64;
        prop_assert!(close(spatial, s.energy() / n, 1e-6));
    }

    #[test]
    fn dft_is_linear(
        (x, y) in (prop::sample::select(vec![4usize, 5, 8]))
            .prop_flat_map(|s| (image(s, s), image(s, s))),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let combo = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect(),
        ).unwrap();
        let (sx, sy, sc) = (dft2(&x).unwrap(), dft2(&y).unwrap(), dft2(&combo).unwrap());
        for i in 0..sc.re.len() {
            prop_assert!((sc.re[i] - (a * sx.re[i] + b * sy.re[i])).abs() < 1e-6);
            prop_assert!((sc.im[i] - (a * sx.im[i] + b * sy.im[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn real_input_gives_hermitian_spectrum(x in sized_image()) {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let s = dft2(&x).unwrap();
        // unshifted bin (u, v) sits at ((u + h/2) % h, (v + w/2) % w)
        let at = |u: usize, v: usize| s.get((u + h / 2) % h, (v + w / 2) % w);
        for u in 0..h {
            for v in 0..w {
                let (re, im) = at(u, v);
                let (cre, cim) = at((h - u) % h, (w - v) % w);
                prop_assert!((re - cre).abs() < 1e-9 && (im + cim).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pass_filters_split_the_spectrum(x in sized_image(), k in 1usize..9) {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let k = k.min(h.min(w));
        let s = dft2(&x).unwrap();
        let lo = low_pass(&s, k).unwrap();
        let hi = high_pass(&s, k).unwrap();
        // complementary, exclusive and idempotent, bit for bit
        for i in 0..s.re.len() {
            prop_assert_eq!(lo.re[i] + hi.re[i], s.re[i]);
            prop_assert_eq!(lo.im[i] + hi.im[i], s.im[i]);
            prop_assert!(lo.re[i] == 0.0 || hi.re[i] == 0.0);
        }
        prop_assert_eq!(&low_pass(&lo, k).unwrap().re, &lo.re);
        prop_assert_eq!(&high_pass(&hi, k).unwrap().im, &hi.im);
        let mask = window_mask(h, w, k).unwrap();
        let inside = mask.iter().filter(|&&m| m).count();
        prop_assert_eq!(inside, k * k);
        prop_assert!(close(s.energy(), lo.energy() + hi.energy(), 1e-9));
    }
}
