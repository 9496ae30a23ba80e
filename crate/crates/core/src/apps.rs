//! Transfer applications on top of the FEN: genuine-vs-fake detection,
//! closed-set attribution and a content-family probe. Heads consume only the
//! fingerprint, never the raw image.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fingerprint::{self, Fen, FingerprintLossWeights};
use crate::nn::{Bound, Conv, Ctx, Dense, Mode, ParamStore};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::parser::{FEN_LR, PN_LR};
use crate::rng::rng_for;
use crate::tensor::{Scalar, Tensor};

/// Convolutional classifier over a fingerprint: `conv -> pool -> relu`
/// stages, then two fully connected layers producing logits.
#[derive(Clone, Debug)]
pub struct ConvHead {
    pub input: [usize; 3],
    pub classes: usize,
    convs: Vec<Conv>,
    pool: Vec<bool>,
    flat: usize,
    fc: [Dense; 2],
}

impl ConvHead {
    pub fn new(prefix: &str, input: [usize; 3], channels: &[usize], hidden: usize, classes: usize) -> Result<Self> {
        let [c, h, w] = input;
        if h != w || c == 0 || h == 0 {
            return Err(Error::invalid(format!("head input must be square, got {input:?}")));
        }
        if classes < 2 || channels.is_empty() {
            return Err(Error::invalid("a head needs at least one conv layer and two classes"));
        }
        let (mut side, mut cin) = (h, c);
        let mut convs = Vec::new();
        let mut pool = Vec::new();
        for (i, &cout) in channels.iter().enumerate() {
            convs.push(Conv::same(format!("{prefix}.conv{i}"), cin, cout));
            let p = side >= 2 && side % 2 == 0;
            if p {
                side /= 2;
            }
            pool.push(p);
            cin = cout;
        }
        let flat = cin * side * side;
        Ok(ConvHead {
            input,
            classes,
            convs,
            pool,
            flat,
            fc: [
                Dense::new(format!("{prefix}.fc0"), flat, hidden),
                Dense::new(format!("{prefix}.fc1"), hidden, classes),
            ],
        })
    }

    /// Five convolutions and two dense layers to two logits.
    pub fn detector(input: [usize; 3]) -> Result<Self> {
        Self::new("det", input, &[8, 16, 16, 32, 32], 64, 2)
    }

    /// Two convolutions and two dense layers to `gms + 1` logits.
    pub fn attribution(input: [usize; 3], gms: usize) -> Result<Self> {
        Self::new("attr", input, &[16, 32], 64, gms + 1)
    }

    pub fn conv_layers(&self) -> usize {
        self.convs.len()
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut s = ParamStore::new();
        for c in &self.convs {
            c.init(&mut s, seed);
        }
        for d in &self.fc {
            d.init(&mut s, seed);
        }
        s
    }

    /// Fingerprint `[N, C, H, W]` -> logits `[N, classes]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, fingerprint: Var) -> Result<Var> {
        let s = g.shape(fingerprint).to_vec();
        let [c, h, w] = self.input;
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::shape("head.input", format!("expected [N, {c}, {h}, {w}], got {s:?}")));
        }
        let mut y = fingerprint;
        for (conv, &pool) in self.convs.iter().zip(&self.pool) {
            y = conv.forward(g, p, y)?;
            if pool {
                y = g.max_pool(y, 2)?;
            }
            y = g.relu(y)?;
        }
        y = g.reshape(y, &[s[0], self.flat])?;
        y = self.fc[0].forward(g, p, y)?;
        y = g.relu(y)?;
        self.fc[1].forward(g, p, y)
    }
}

/// Mean softmax cross-entropy of `logits [N, M]` against `labels`.
pub fn softmax_ce<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("softmax_ce", format!("logits {s:?} for {} labels", labels.len())));
    }
    let m = s[1];
    if let Some(&l) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::invalid(format!("label {l} outside {m} classes")));
    }
    let mut onehot = vec![T::zero(); labels.len() * m];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * m + l] = T::one();
    }
    let y = g.input(Tensor::new(s.clone(), onehot)?);
    let lp = g.log_softmax(logits)?;
    let picked = g.mul(lp, y)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / labels.len() as f64)
}

pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<Vec<f64>> {
    logits
        .chunks(classes)
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppTrainConfig {
    pub fingerprint: FingerprintLossWeights,
    pub fen_adam: AdamConfig,
    pub head_adam: AdamConfig,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for AppTrainConfig {
    fn default() -> Self {
        AppTrainConfig {
            fingerprint: FingerprintLossWeights::default(),
            fen_adam: AdamConfig::with_lr(FEN_LR),
            head_adam: AdamConfig::with_lr(PN_LR),
            steps: 200,
            batch: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppStepLosses {
    pub ce: f64,
    pub fingerprint: f64,
    pub total: f64,
    /// Per-sample `J_f` after its sample weight; zero for exempt samples.
    pub weighted_fingerprint: Vec<f64>,
}

/// Images with class labels and a per-sample weight on the fingerprint
/// constraints (zero exempts genuine images).
#[derive(Clone, Debug)]
pub struct LabeledImages {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub fingerprint_weight: Vec<f64>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> LabeledImages {
        LabeledImages {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            fingerprint_weight: idx.iter().map(|&i| self.fingerprint_weight[i]).collect(),
        }
    }

    /// Genuine images as class 0 (exempt from the constraints), each fake
    /// set as classes `1..`.
    pub fn genuine_vs(genuine: &Tensor<f32>, fakes: &[Tensor<f32>], collapse_fakes: bool) -> Result<Self> {
        let mut parts = vec![genuine.clone()];
        let mut labels = vec![0; genuine.shape()[0]];
        let mut weights = vec![0.0; genuine.shape()[0]];
        for (i, f) in fakes.iter().enumerate() {
            parts.push(f.clone());
            let class = if collapse_fakes { 1 } else { i + 1 };
            labels.extend(std::iter::repeat_n(class, f.shape()[0]));
            weights.extend(std::iter::repeat_n(1.0, f.shape()[0]));
        }
        Ok(LabeledImages {
            images: Tensor::concat(&parts)?,
            labels,
            fingerprint_weight: weights,
        })
    }
}

/// FEN plus a classification head trained jointly.
#[derive(Clone, Debug)]
pub struct FingerprintClassifier {
    pub fen: Fen,
    pub head: ConvHead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierWeights<T> {
    pub fen: ParamStore<T>,
    pub head: ParamStore<T>,
}

impl<T: Scalar> ClassifierWeights<T> {
    /// One store for checkpointing; the FEN keeps its `fen.` prefix.
    pub fn merged(&self) -> ParamStore<T> {
        let mut s = self.fen.clone();
        s.merge(self.head.clone());
        s
    }

    pub fn split(store: &ParamStore<T>) -> Self {
        let w = crate::parser::ParsingWeights::split(store);
        ClassifierWeights { fen: w.fen, head: w.pn }
    }
}

pub struct ClassifierOptimizers<T> {
    pub fen: AdamState<T>,
    pub head: AdamState<T>,
}

impl<T: Scalar> ClassifierOptimizers<T> {
    pub fn new(config: &AppTrainConfig) -> Self {
        ClassifierOptimizers {
            fen: AdamState::new(config.fen_adam),
            head: AdamState::new(config.head_adam),
        }
    }
}

impl FingerprintClassifier {
    pub fn new(fen: Fen, head: ConvHead) -> Result<Self> {
        if fen.config.input_shape() != head.input {
            return Err(Error::invalid("FEN output and head input shapes differ"));
        }
        Ok(FingerprintClassifier { fen, head })
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> ClassifierWeights<T> {
        ClassifierWeights {
            fen: self.fen.init(seed),
            head: self.head.init(seed),
        }
    }

    /// `J = CE(all images) + J_f(weighted per sample)`, one Adam step on both parts.
    pub fn train_step<T: Scalar>(
        &self,
        weights: &mut ClassifierWeights<T>,
        opts: &mut ClassifierOptimizers<T>,
        batch: &LabeledImages,
        config: &AppTrainConfig,
    ) -> Result<AppStepLosses> {
        let mut g = Graph::new();
        let fen_p = weights.fen.bind(&mut g);
        let head_p = weights.head.bind(&mut g);
        let mut ctx = Ctx::new(Mode::Train);
        let x = g.input(batch.images.cast::<T>());
        let f = self.fen.forward(&mut g, &fen_p, &weights.fen, x, &mut ctx)?;
        let [_, h, w] = self.head.input;
        let terms = fingerprint::fingerprint_terms(&mut g, f, config.fingerprint.resolve_k(h, w))?;
        let per = fingerprint::combine_terms(&mut g, &terms, &config.fingerprint)?;
        let j_f = fingerprint::batch_reduce(&mut g, per, Some(&batch.fingerprint_weight))?;
        let logits = self.head.forward(&mut g, &head_p, f)?;
        let ce = softmax_ce(&mut g, logits, &batch.labels)?;
        let total = g.add(ce, j_f)?;
        let val = |v: Var| g.value(v).item().f64();
        let losses = AppStepLosses {
            ce: val(ce),
            fingerprint: val(j_f),
            total: val(total),
            weighted_fingerprint: g
                .value(per)
                .data()
                .iter()
                .zip(&batch.fingerprint_weight)
                .map(|(v, w)| v.f64() * w)
                .collect(),
        };
        if !losses.total.is_finite() {
            return Err(Error::NonFinite {
                node: "application loss".into(),
            });
        }
        let grads = g.backward(total)?;
        adam_step(&mut weights.fen, &fen_p.collect(&g, &grads), &mut opts.fen)?;
        adam_step(&mut weights.head, &head_p.collect(&g, &grads), &mut opts.head)?;
        weights.fen.update_running_stats(&ctx.stats)?;
        Ok(losses)
    }

    /// Class probabilities per image (softmax over the logits).
    pub fn probabilities<T: Scalar>(&self, weights: &ClassifierWeights<T>, images: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let fen_p = weights.fen.bind_frozen(&mut g);
        let head_p = weights.head.bind_frozen(&mut g);
        let x = g.input(images.cast::<T>());
        let f = self.fen.forward(&mut g, &fen_p, &weights.fen, x, &mut Ctx::new(Mode::Eval))?;
        let logits = self.head.forward(&mut g, &head_p, f)?;
        let flat: Vec<f64> = g.value(logits).data().iter().map(|v| v.f64()).collect();
        Ok(softmax_rows(&flat, self.head.classes))
    }

    /// Probability of the fake class (index 1) for a two-class detector.
    pub fn detect<T: Scalar>(&self, weights: &ClassifierWeights<T>, images: &Tensor<f32>) -> Result<Vec<f64>> {
        if self.head.classes != 2 {
            return Err(Error::invalid("detection needs a two-class head"));
        }
        Ok(self.probabilities(weights, images)?.into_iter().map(|p| p[1]).collect())
    }

    /// Predicted class and probabilities per image.
    pub fn attribute<T: Scalar>(&self, weights: &ClassifierWeights<T>, images: &Tensor<f32>) -> Result<Vec<(usize, Vec<f64>)>> {
        Ok(self
            .probabilities(weights, images)?
            .into_iter()
            .map(|p| (crate::parser::argmax(&p), p))
            .collect())
    }
}

/// Random batch containing at least two classes; batches drawn from a
/// single class are resampled.
pub fn sample_mixed_batch<R: rand::Rng>(labels: &[usize], size: usize, rng: &mut R) -> Result<Vec<usize>> {
    let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 {
        return Err(Error::Coverage("training data has a single class".into()));
    }
    let size = size.min(labels.len()).max(2);
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    loop {
        idx.shuffle(rng);
        let pick = &idx[..size];
        if pick.iter().any(|&i| labels[i] != labels[pick[0]]) {
            return Ok(pick.to_vec());
        }
    }
}

/// Train a fingerprint classifier for `config.steps` minibatch steps.
pub fn train_classifier(
    model: &FingerprintClassifier,
    weights: &mut ClassifierWeights<f32>,
    data: &LabeledImages,
    config: &AppTrainConfig,
) -> Result<Vec<AppStepLosses>> {
    let mut opts = ClassifierOptimizers::new(config);
    let mut rng = rng_for(config.seed, "app-batches");
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx = sample_mixed_batch(&data.labels, config.batch, &mut rng)?;
        let l = model.train_step(weights, &mut opts, &data.select(&idx), config).map_err(|e| match e {
            Error::NonFinite { node } => Error::Divergence {
                component: node,
                step,
                seed: config.seed,
            },
            e => e,
        })?;
        log.push(l);
    }
    Ok(log)
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if pred.is_empty() {
        return f64::NAN;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / pred.len() as f64
}

/// Wilson score 95% interval for `k` successes in `n` trials.
pub fn binomial_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959963984540054;
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let denom = 1.0 + z * z / n_f;
    let centre = (p + z * z / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z * z / (4.0 * n_f * n_f)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_images: usize,
    pub test_images: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub chance: f64,
    pub interval: (f64, f64),
    pub within_chance: bool,
}

/// Train a shallow head on frozen fingerprints to predict a label (e.g. the
/// content family) and test whether held-out accuracy is consistent with chance.
pub fn content_probe(
    train: (&Tensor<f32>, &[usize]),
    test: (&Tensor<f32>, &[usize]),
    classes: usize,
    steps: usize,
    seed: u64,
) -> Result<ProbeReport> {
    let s = train.0.shape();
    if s.len() != 4 {
        return Err(Error::shape("probe", format!("{s:?}")));
    }
    let head = ConvHead::new("probe", [s[1], s[2], s[3]], &[16, 32], 64, classes)?;
    let mut w = head.init::<f32>(seed);
    let mut opt = AdamState::new(AdamConfig::with_lr(PN_LR));
    let mut rng = rng_for(seed, "probe-batches");
    for _ in 0..steps {
        let idx = sample_mixed_batch(train.1, 32, &mut rng)?;
        let labels: Vec<usize> = idx.iter().map(|&i| train.1[i]).collect();
        let mut g = Graph::new();
        let p = w.bind(&mut g);
        let x = g.input(train.0.select_rows(&idx));
        let logits = head.forward(&mut g, &p, x)?;
        let loss = softmax_ce(&mut g, logits, &labels)?;
        let grads = g.backward(loss)?;
        adam_step(&mut w, &p.collect(&g, &grads), &mut opt)?;
    }
    let mut g = Graph::new();
    let p = w.bind_frozen(&mut g);
    let x = g.input(test.0.clone());
    let logits = head.forward(&mut g, &p, x)?;
    let flat: Vec<f64> = g.value(logits).data().iter().map(|&v| v as f64).collect();
    let pred: Vec<usize> = softmax_rows(&flat, classes).iter().map(|r| crate::parser::argmax(r)).collect();
    let correct = pred.iter().zip(test.1).filter(|(p, l)| p == l).count();
    let n = test.1.len();
    let interval = binomial_interval(correct, n);
    // chance = majority-class rate of the held-out labels
    let mut counts = vec![0usize; classes];
    for &l in test.1 {
        counts[l] += 1;
    }
    let chance = *counts.iter().max().unwrap_or(&0) as f64 / n.max(1) as f64;
    Ok(ProbeReport {
        train_images: train.1.len(),
        test_images: n,
        correct,
        accuracy: correct as f64 / n.max(1) as f64,
        chance,
        interval,
        within_chance: interval.0 <= chance && chance <= interval.1,
    })
}

/// `path,score,label` rows for external ROC tooling.
pub fn scores_csv(rows: &[(String, f64, usize)]) -> String {
    let mut out = String::from("path,score,label\n");
    for (p, s, l) in rows {
        out.push_str(&format!("{p},{s:.8},{l}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::FenConfig;

    fn toy_data(n: usize, seed: u64) -> LabeledImages {
        use rand::Rng;
        let mut rng = rng_for(seed, "toy");
        let genuine = Tensor::from_fn(&[n, 1, 8, 8], |_| rng.gen_range(-0.3f32..0.3));
        let fake = Tensor::from_fn(&[n, 1, 8, 8], |i| if (i / 8 + i) % 2 == 0 { 0.5 } else { -0.5 } + rng.gen_range(-0.1f32..0.1));
        LabeledImages::genuine_vs(&genuine, &[fake], true).unwrap()
    }

    fn detector() -> FingerprintClassifier {
        let fen = Fen::new(FenConfig::compact(8, 8, 1)).unwrap();
        FingerprintClassifier::new(fen, ConvHead::detector([1, 8, 8]).unwrap()).unwrap()
    }

    #[test]
    fn head_shapes() {
        let d = ConvHead::detector([1, 16, 16]).unwrap();
        assert_eq!(d.conv_layers(), 5);
        assert_eq!(d.classes, 2);
        let a = ConvHead::attribution([1, 16, 16], 4).unwrap();
        assert_eq!((a.conv_layers(), a.classes), (2, 5));
        let w = a.init::<f64>(1);
        let mut g = Graph::new();
        let p = w.bind_frozen(&mut g);
        let x = g.input(Tensor::zeros(&[3, 1, 16, 16]));
        let y = a.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[3, 5]);
        let bad = g.input(Tensor::zeros(&[3, 3, 16, 16]));
        assert!(a.forward(&mut g, &p, bad).is_err());
    }

    #[test]
    fn softmax_ce_hand_value() {
        let mut g = Graph::<f64>::new();
        let z = g.input(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let l = softmax_ce(&mut g, z, &[1]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn genuine_images_exempt_from_constraints() {
        let model = detector();
        let mut w = model.init::<f32>(3);
        let data = toy_data(4, 1);
        let mut opts = ClassifierOptimizers::new(&AppTrainConfig::default());
        let l = model.train_step(&mut w, &mut opts, &data, &AppTrainConfig::default()).unwrap();
        for (v, &lab) in l.weighted_fingerprint.iter().zip(&data.labels) {
            if lab == 0 {
                assert_eq!(*v, 0.0);
            } else {
                assert!(*v > 0.0);
            }
        }
    }

    #[test]
    fn probabilities_normalized_and_deterministic() {
        let model = detector();
        let w = model.init::<f32>(5);
        let data = toy_data(3, 2);
        let p = model.probabilities(&w, &data.images).unwrap();
        for r in &p {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let run = || {
            let mut w = model.init::<f32>(5);
            let cfg = AppTrainConfig {
                steps: 3,
                batch: 4,
                ..Default::default()
            };
            train_classifier(&model, &mut w, &data, &cfg).unwrap();
            model.detect(&w, &data.images).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_class_is_rejected() {
        let mut rng = rng_for(0, "x");
        assert!(sample_mixed_batch(&[1, 1, 1], 2, &mut rng).is_err());
        let b = sample_mixed_batch(&[0, 0, 0, 0, 0, 1], 2, &mut rng).unwrap();
        assert!(b.contains(&5));
    }

    #[test]
    fn wilson_interval() {
        let (lo, hi) = binomial_interval(50, 100);
        assert!((lo - 0.4038).abs() < 1e-3 && (hi - 0.5962).abs() < 1e-3);
        assert_eq!(binomial_interval(0, 0), (0.0, 1.0));
    }
}
