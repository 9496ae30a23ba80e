use gmparse::apps::{train_classifier, AppTrainConfig, ConvHead, FingerprintClassifier, LabeledImages};
use gmparse::fingerprint::{Fen, FenConfig};
use gmparse::zoo::procedural::sample_batch;
use gmparse::zoo::ContentFamily;
use gmparse::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 16;

fn detector() -> FingerprintClassifier {
    let fen = Fen::new(FenConfig::compact(SIDE, SIDE, 1)).unwrap();
    let head = ConvHead::detector(fen.config.input_shape()).unwrap();
    FingerprintClassifier::new(fen, head).unwrap()
}

/// Genuine procedural samples against the same content carrying a
/// period-two checkerboard, the trace a transposed convolution leaves.
fn toy_detection_data(n: usize, seed: u64) -> LabeledImages {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let genuine: Tensor<f32> = sample_batch(ContentFamily::Blobs, [1, SIDE, SIDE], n, &mut rng);
    let clean: Tensor<f32> = sample_batch(ContentFamily::Blobs, [1, SIDE, SIDE], n, &mut rng);
    let fake = Tensor::from_fn(clean.shape(), |i| {
        let (r, c) = ((i / SIDE) % SIDE, i % SIDE);
        clean.data()[i] + if (r + c) % 2 == 0 { 0.15 } else { -0.15 }
    });
    LabeledImages::genuine_vs(&genuine, &[fake], true).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn detector_loss_decreases_over_training() {
    let model = detector();
    let decreased = (0..20u64)
        .filter(|&seed| {
            let data = toy_detection_data(16, 50 + seed);
            let cfg = AppTrainConfig {
                steps: 200,
                batch: 8,
                seed,
                ..AppTrainConfig::default()
            };
            let mut w = model.init::<f32>(seed);
            let log = train_classifier(&model, &mut w, &data, &cfg).unwrap();
            let total: Vec<f64> = log.iter().map(|l| l.total).collect();
            mean(&total[180..]) < mean(&total[..20])
        })
        .count();
    assert!(decreased >= 18, "{decreased}/20");
}

#[test]
fn detector_training_is_deterministic() {
    let model = detector();
    let data = toy_detection_data(8, 3);
    let cfg = AppTrainConfig {
        steps: 5,
        batch: 8,
        seed: 4,
        ..AppTrainConfig::default()
    };
    let run = || {
        let mut w = model.init::<f32>(1);
        let log = train_classifier(&model, &mut w, &data, &cfg).unwrap();
        (log, model.detect(&w, &data.images).unwrap())
    };
    let (la, pa) = run();
    let (lb, pb) = run();
    assert_eq!(la, lb);
    assert_eq!(pa, pb);
    assert!(pa.iter().all(|p| (0.0..=1.0).contains(p)));
}
