//! Parsing network (PN): a shared convolutional encoder over the fingerprint
//! feeding a continuous regression head, six discrete classifiers and the
//! coarse/fine loss-type heads, plus end-to-end training with the FEN.
//!
//! All classifiers score each class with a sigmoid. The six architecture
//! classifiers use the weighted one-hot form `-sum(w * y * log(sigmoid(z)))`.
//! Each loss-type flag is a two-class classifier whose class scores are
//! `(1 - p, p)`, so the same one-hot form becomes a class-weighted binary
//! cross-entropy.

use serde::{Deserialize, Serialize};

pub use crate::labels::{ArchitectureTargets, LossTargets};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fingerprint::{self, Fen, FingerprintLossWeights};
use crate::labels::{DISCRETE_CARDINALITIES, DISCRETE_NAMES, FINE_GROUP, NUM_COARSE, NUM_CONTINUOUS, NUM_DISCRETE, NUM_FINE};
use crate::nn::{Bound, Conv, Ctx, Dense, GradMap, Mode, ParamStore};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{Scalar, Tensor};

pub const FEATURE_DIM: usize = 512;
/// Floor applied inside every classification log.
pub const LOG_FLOOR: f64 = 1e-12;
pub const FEN_LR: f64 = 1e-4;
pub const PN_LR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PnConfig {
    /// `[C, H, W]` of the fingerprint.
    pub input: [usize; 3],
    pub conv_channels: [usize; 5],
    pub feature_dim: usize,
    pub continuous_hidden: usize,
    pub classifier_hidden: [usize; 2],
}

impl PnConfig {
    pub fn new(input: [usize; 3]) -> Self {
        PnConfig {
            input,
            conv_channels: [16, 32, 64, 128, 128],
            feature_dim: FEATURE_DIM,
            continuous_hidden: 64,
            classifier_hidden: [64, 32],
        }
    }

    /// Narrow encoder for single-core experiments; the feature stays 512-D.
    pub fn compact(input: [usize; 3]) -> Self {
        PnConfig {
            conv_channels: [8, 16, 16, 32, 32],
            ..Self::new(input)
        }
    }
}

/// Three-layer classifier head.
#[derive(Clone, Debug)]
struct Classifier {
    layers: [Dense; 3],
}

impl Classifier {
    fn new(name: &str, fin: usize, hidden: [usize; 2], classes: usize) -> Self {
        Classifier {
            layers: [
                Dense::new(format!("{name}.fc0"), fin, hidden[0]),
                Dense::new(format!("{name}.fc1"), hidden[0], hidden[1]),
                Dense::new(format!("{name}.fc2"), hidden[1], classes),
            ],
        }
    }

    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        for d in &self.layers {
            d.init(store, seed);
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut y = x;
        for (i, d) in self.layers.iter().enumerate() {
            y = d.forward(g, p, y)?;
            if i < 2 {
                y = g.relu(y)?;
            }
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Pn {
    pub config: PnConfig,
    convs: Vec<Conv>,
    /// Whether each block pools; pooling stops once the map is 1x1.
    pool: Vec<bool>,
    flat: usize,
    fc: [Dense; 2],
    continuous: [Dense; 2],
    discrete: Vec<Classifier>,
    coarse: Classifier,
    fine: Classifier,
}

/// Head outputs for a batch.
#[derive(Clone, Debug)]
pub struct PnOutputs {
    pub feature: Var,
    /// `[N, 9]`
    pub continuous: Var,
    /// Six `[N, M_k]` logit blocks.
    pub discrete: Vec<Var>,
    /// `[N, 3]`
    pub coarse: Var,
    /// `[N, 8]`
    pub fine: Var,
}

impl Pn {
    pub fn new(config: PnConfig) -> Result<Self> {
        let [c, h, w] = config.input;
        if h != w || h == 0 || c == 0 {
            return Err(Error::invalid(format!("PN input must be square, got {:?}", config.input)));
        }
        let mut side = h;
        let mut cin = c;
        let mut convs = Vec::new();
        let mut pool = Vec::new();
        for (i, &cout) in config.conv_channels.iter().enumerate() {
            convs.push(Conv::same(format!("pn.conv{i}"), cin, cout));
            let p = side >= 2 && side % 2 == 0;
            if p {
                side /= 2;
            }
            pool.push(p);
            cin = cout;
        }
        let flat = cin * side * side;
        let f = config.feature_dim;
        let hid = config.classifier_hidden;
        Ok(Pn {
            convs,
            pool,
            flat,
            fc: [Dense::new("pn.fc0", flat, f), Dense::new("pn.fc1", f, f)],
            continuous: [
                Dense::new("pn.cont.fc0", f, config.continuous_hidden),
                Dense::new("pn.cont.fc1", config.continuous_hidden, NUM_CONTINUOUS),
            ],
            discrete: DISCRETE_NAMES
                .iter()
                .zip(DISCRETE_CARDINALITIES)
                .map(|(n, m)| Classifier::new(&format!("pn.{n}"), f, hid, m))
                .collect(),
            coarse: Classifier::new("pn.coarse", f, hid, NUM_COARSE),
            fine: Classifier::new("pn.fine", f, hid, NUM_FINE),
            config,
        })
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut s = ParamStore::new();
        for c in &self.convs {
            c.init(&mut s, seed);
        }
        for d in self.fc.iter().chain(&self.continuous) {
            d.init(&mut s, seed);
        }
        for c in self.discrete.iter().chain([&self.coarse, &self.fine]) {
            c.init(&mut s, seed);
        }
        s
    }

    /// Fingerprint `[N, C, H, W]` -> feature `[N, feature_dim]`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let [c, h, w] = self.config.input;
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::shape("pn.input", format!("expected [N, {c}, {h}, {w}], got {s:?}")));
        }
        let mut y = x;
        for (conv, &pool) in self.convs.iter().zip(&self.pool) {
            y = conv.forward(g, p, y)?;
            if pool {
                y = g.max_pool(y, 2)?;
            }
            y = g.relu(y)?;
        }
        y = g.reshape(y, &[s[0], self.flat])?;
        for d in &self.fc {
            y = d.forward(g, p, y)?;
            y = g.relu(y)?;
        }
        Ok(y)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<PnOutputs> {
        let feature = self.encode(g, p, x)?;
        let h = self.continuous[0].forward(g, p, feature)?;
        let h = g.relu(h)?;
        let continuous = self.continuous[1].forward(g, p, h)?;
        let discrete = self
            .discrete
            .iter()
            .map(|c| c.forward(g, p, feature))
            .collect::<Result<Vec<_>>>()?;
        Ok(PnOutputs {
            feature,
            continuous,
            discrete,
            coarse: self.coarse.forward(g, p, feature)?,
            fine: self.fine.forward(g, p, feature)?,
        })
    }
}

/// Run the encoder alone in inference on a fingerprint batch.
pub fn encoder_forward<T: Scalar>(fingerprint: &Tensor<T>, pn: &Pn, weights: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = weights.bind_frozen(&mut g);
    let x = g.input(fingerprint.clone());
    let f = pn.encode(&mut g, &p, x)?;
    Ok(g.value(f).clone())
}

// ---------------------------------------------------------------- losses

/// `J_nc`: per-sample sum of squared differences, batch mean. `pred`, `target` are `[N, 9]`.
pub fn continuous_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape(
            "continuous_loss",
            format!("{:?} vs {:?}", g.shape(pred), g.shape(target)),
        ));
    }
    let n = g.shape(pred)[0];
    let d = g.sub(pred, target)?;
    let sq = g.square(d)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / n as f64)
}

/// Per-classifier class weights `w = N / N_c`; binary flags use two classes (absent, present).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub discrete: Vec<Vec<f64>>,
    pub coarse: Vec<[f64; 2]>,
    pub fine: Vec<[f64; 2]>,
}

/// `w_c = N / N_c` for one classifier.
pub fn compute_class_weights(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l >= classes {
            return Err(Error::invalid(format!("label {l} >= {classes} classes")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Coverage(format!(
            "class {c} has no training examples; redesign the split so every class is in training"
        )));
    }
    Ok(counts.iter().map(|&n| labels.len() as f64 / n as f64).collect())
}

impl ClassWeights {
    /// From per-example training labels.
    pub fn from_training<'a>(
        examples: impl IntoIterator<Item = (&'a ArchitectureTargets, &'a LossTargets)> + Clone,
    ) -> Result<Self> {
        let named = |name: String, r: Result<Vec<f64>>| {
            r.map_err(|e| match e {
                Error::Coverage(m) => Error::Coverage(format!("{name}: {m}")),
                other => other,
            })
        };
        let discrete = (0..NUM_DISCRETE)
            .map(|k| {
                let labels: Vec<usize> = examples.clone().into_iter().map(|(a, _)| a.discrete[k]).collect();
                named(DISCRETE_NAMES[k].into(), compute_class_weights(&labels, DISCRETE_CARDINALITIES[k]))
            })
            .collect::<Result<_>>()?;
        let binary = |name: String, get: &dyn Fn(&LossTargets) -> bool| -> Result<[f64; 2]> {
            let labels: Vec<usize> = examples.clone().into_iter().map(|(_, l)| get(l) as usize).collect();
            let w = named(name, compute_class_weights(&labels, 2))?;
            Ok([w[0], w[1]])
        };
        let coarse = (0..NUM_COARSE)
            .map(|m| binary(format!("coarse {}", crate::labels::COARSE_NAMES[m]), &|l| l.coarse[m]))
            .collect::<Result<_>>()?;
        let fine = (0..NUM_FINE)
            .map(|m| binary(format!("loss {}", crate::labels::FINE_NAMES[m]), &|l| l.fine[m]))
            .collect::<Result<_>>()?;
        Ok(ClassWeights { discrete, coarse, fine })
    }

    /// All-ones weights: plain (unweighted) cross-entropy.
    pub fn uniform() -> Self {
        ClassWeights {
            discrete: DISCRETE_CARDINALITIES.iter().map(|&m| vec![1.0; m]).collect(),
            coarse: vec![[1.0; 2]; NUM_COARSE],
            fine: vec![[1.0; 2]; NUM_FINE],
        }
    }
}

/// `-sum(w ⊙ y ⊙ log(sigmoid(z)))` for one classifier, batch mean; `logits` `[N, M]`.
pub fn weighted_sigmoid_ce<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
    let (n, m) = match *g.shape(logits) {
        [n, m] => (n, m),
        ref s => return Err(Error::shape("weighted_sigmoid_ce", format!("logits {s:?}"))),
    };
    if labels.len() != n || weights.len() != m {
        return Err(Error::shape(
            "weighted_sigmoid_ce",
            format!("{n}x{m} logits, {} labels, {} weights", labels.len(), weights.len()),
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::invalid(format!("label {l} >= {m} classes")));
    }
    let mut mask = vec![T::zero(); n * m];
    for (i, &l) in labels.iter().enumerate() {
        mask[i * m + l] = T::c(weights[l]);
    }
    let mask = g.input(Tensor::new(vec![n, m], mask)?);
    let p = g.sigmoid(logits)?;
    let lp = g.log(p, LOG_FLOOR)?;
    let wl = g.mul(lp, mask)?;
    let s = g.sum(wl)?;
    g.scale(s, -1.0 / n as f64)
}

/// `J_nd` summed over the six classifiers. `labels[i]` holds sample i's six labels.
pub fn discrete_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: &[Var],
    labels: &[[usize; NUM_DISCRETE]],
    weights: &ClassWeights,
) -> Result<Var> {
    if logits.len() != NUM_DISCRETE {
        return Err(Error::shape("discrete_loss", format!("{} classifiers", logits.len())));
    }
    let mut total: Option<Var> = None;
    for (k, &z) in logits.iter().enumerate() {
        if g.shape(z).get(1) != Some(&DISCRETE_CARDINALITIES[k]) {
            return Err(Error::shape(
                "discrete_loss",
                format!("{} expects {} classes, logits {:?}", DISCRETE_NAMES[k], DISCRETE_CARDINALITIES[k], g.shape(z)),
            ));
        }
        let lk: Vec<usize> = labels.iter().map(|l| l[k]).collect();
        let term = weighted_sigmoid_ce(g, z, &lk, &weights.discrete[k])?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("six classifiers"))
}

/// Class-weighted two-class CE on probabilities `p` (`[N, F]`) against binary flags.
fn binary_flag_ce<T: Scalar>(g: &mut Graph<T>, p: Var, flags: &[Vec<bool>], weights: &[[f64; 2]]) -> Result<Var> {
    let (n, f) = match *g.shape(p) {
        [n, f] => (n, f),
        ref s => return Err(Error::shape("flag_ce", format!("{s:?}"))),
    };
    if flags.len() != n || weights.len() != f || flags.iter().any(|r| r.len() != f) {
        return Err(Error::shape("flag_ce", format!("{n}x{f} scores vs {} targets", flags.len())));
    }
    let mut on = vec![T::zero(); n * f];
    let mut off = vec![T::zero(); n * f];
    for (i, row) in flags.iter().enumerate() {
        for (j, &y) in row.iter().enumerate() {
            if y {
                on[i * f + j] = T::c(weights[j][1]);
            } else {
                off[i * f + j] = T::c(weights[j][0]);
            }
        }
    }
    let on = g.input(Tensor::new(vec![n, f], on)?);
    let off = g.input(Tensor::new(vec![n, f], off)?);
    let lp = g.log(p, LOG_FLOOR)?;
    let q = g.scale(p, -1.0)?;
    let q = g.add_scalar(q, 1.0)?;
    let lq = g.log(q, LOG_FLOOR)?;
    let a = g.mul(lp, on)?;
    let b = g.mul(lq, off)?;
    let s = g.add(a, b)?;
    let s = g.sum(s)?;
    g.scale(s, -1.0 / n as f64)
}

/// `J_lg` over the three coarse groups; `logits` `[N, 3]`.
pub fn coarse_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[[bool; NUM_COARSE]], weights: &[[f64; 2]]) -> Result<Var> {
    let p = g.sigmoid(logits)?;
    let flags: Vec<Vec<bool>> = targets.iter().map(|t| t.to_vec()).collect();
    binary_flag_ce(g, p, &flags, weights)
}

/// `p_m = sigmoid(coarse)_{group(m)} * sigmoid(fine)_m`, `[N, 8]`.
pub fn hierarchical_compose<T: Scalar>(g: &mut Graph<T>, coarse: Var, fine: Var) -> Result<Var> {
    let pc = g.sigmoid(coarse)?;
    let pc = g.index_select(pc, &FINE_GROUP)?;
    let pf = g.sigmoid(fine)?;
    g.mul(pc, pf)
}

/// `J_l` on composed probabilities `[N, 8]`.
pub fn fine_loss<T: Scalar>(g: &mut Graph<T>, composed: Var, targets: &[[bool; NUM_FINE]], weights: &[[f64; 2]]) -> Result<Var> {
    let flags: Vec<Vec<bool>> = targets.iter().map(|t| t.to_vec()).collect();
    binary_flag_ce(g, composed, &flags, weights)
}

/// `J_n = J_nc + J_nd`.
pub fn architecture_loss<T: Scalar>(g: &mut Graph<T>, j_nc: Var, j_nd: Var) -> Result<Var> {
    g.add(j_nc, j_nd)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gammas {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

impl Default for Gammas {
    fn default() -> Self {
        Gammas {
            gamma1: 5.0,
            gamma2: 5.0,
            gamma3: 5.0,
        }
    }
}

/// `J_p = g1 J_n + g2 J_lg + g3 J_l`.
pub fn parsing_loss<T: Scalar>(g: &mut Graph<T>, j_n: Var, j_lg: Var, j_l: Var, gammas: &Gammas) -> Result<Var> {
    let a = g.scale(j_n, gammas.gamma1)?;
    let b = g.scale(j_lg, gammas.gamma2)?;
    let c = g.scale(j_l, gammas.gamma3)?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

// ---------------------------------------------------------- full model

/// FEN followed by PN.
#[derive(Clone, Debug)]
pub struct ParsingModel {
    pub fen: Fen,
    pub pn: Pn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsingWeights<T> {
    pub fen: ParamStore<T>,
    pub pn: ParamStore<T>,
}

impl<T: Scalar> ParsingWeights<T> {
    pub fn merged(&self) -> ParamStore<T> {
        let mut s = self.fen.clone();
        s.merge(self.pn.clone());
        s
    }

    /// Split a merged store back by name prefix.
    pub fn split(store: &ParamStore<T>) -> Self {
        let mut fen = ParamStore::new();
        let mut pn = ParamStore::new();
        for (n, t) in store.params() {
            let dst = if n.starts_with("fen.") { &mut fen } else { &mut pn };
            dst.insert_param(n.clone(), t.clone());
        }
        for (n, t) in store.buffers() {
            let dst = if n.starts_with("fen.") { &mut fen } else { &mut pn };
            dst.insert_buffer(n.clone(), t.clone());
        }
        ParsingWeights { fen, pn }
    }
}

/// One training batch. Continuous targets are already normalized.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub continuous: Tensor<T>,
    pub discrete: Vec<[usize; NUM_DISCRETE]>,
    pub coarse: Vec<[bool; NUM_COARSE]>,
    pub fine: Vec<[bool; NUM_FINE]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub fingerprint: FingerprintLossWeights,
    pub gammas: Gammas,
    pub fen_adam: AdamConfig,
    pub pn_adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            fingerprint: FingerprintLossWeights::default(),
            gammas: Gammas::default(),
            fen_adam: AdamConfig::with_lr(FEN_LR),
            pn_adam: AdamConfig::with_lr(PN_LR),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub magnitude: f64,
    pub spectrum: f64,
    pub repetitive: f64,
    pub energy: f64,
    pub fingerprint: f64,
    pub continuous: f64,
    pub discrete: f64,
    pub architecture: f64,
    pub coarse: f64,
    pub fine: f64,
    pub parsing: f64,
    pub total: f64,
}

pub struct Optimizers<T> {
    pub fen: AdamState<T>,
    pub pn: AdamState<T>,
}

impl<T: Scalar> Optimizers<T> {
    pub fn new(config: &TrainConfig) -> Self {
        Optimizers {
            fen: AdamState::new(config.fen_adam),
            pn: AdamState::new(config.pn_adam),
        }
    }
}

/// Graph nodes of every loss component.
pub struct LossNodes {
    pub terms: fingerprint::FingerprintTerms,
    pub fingerprint: Var,
    pub continuous: Var,
    pub discrete: Var,
    pub architecture: Var,
    pub coarse: Var,
    pub fine: Var,
    pub parsing: Var,
    pub total: Var,
}

impl LossNodes {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> StepLosses {
        let v = |x: Var| g.value(x).item().f64();
        let mean = |x: Var| {
            let t = g.value(x);
            t.sum().f64() / t.numel() as f64
        };
        StepLosses {
            magnitude: mean(self.terms.magnitude),
            spectrum: mean(self.terms.spectrum),
            repetitive: mean(self.terms.repetitive),
            energy: mean(self.terms.energy),
            fingerprint: v(self.fingerprint),
            continuous: v(self.continuous),
            discrete: v(self.discrete),
            architecture: v(self.architecture),
            coarse: v(self.coarse),
            fine: v(self.fine),
            parsing: v(self.parsing),
            total: v(self.total),
        }
    }
}

impl ParsingModel {
    pub fn new(fen: Fen, pn: Pn) -> Result<Self> {
        if fen.config.input_shape() != pn.config.input {
            return Err(Error::invalid("FEN output and PN input shapes differ"));
        }
        Ok(ParsingModel { fen, pn })
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> ParsingWeights<T> {
        ParsingWeights {
            fen: self.fen.init(seed),
            pn: self.pn.init(seed),
        }
    }

    /// Build every loss node for a batch. `fen_p`/`pn_p` come from binding the stores.
    #[allow(clippy::too_many_arguments)]
    pub fn losses<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        fen_p: &Bound,
        pn_p: &Bound,
        weights: &ParsingWeights<T>,
        batch: &Batch<T>,
        class_weights: &ClassWeights,
        config: &TrainConfig,
        ctx: &mut Ctx<T>,
    ) -> Result<LossNodes> {
        let n = batch.images.shape()[0];
        if batch.discrete.len() != n || batch.coarse.len() != n || batch.fine.len() != n {
            return Err(Error::shape("batch", "label counts differ from image count"));
        }
        let x = g.input(batch.images.clone());
        let f = self.fen.forward(g, fen_p, &weights.fen, x, ctx)?;
        let [_, h, w] = self.pn.config.input;
        let terms = fingerprint::fingerprint_terms(g, f, config.fingerprint.resolve_k(h, w))?;
        let per = fingerprint::combine_terms(g, &terms, &config.fingerprint)?;
        let j_f = fingerprint::batch_reduce(g, per, None)?;

        let out = self.pn.forward(g, pn_p, f)?;
        let target = g.input(batch.continuous.clone());
        let j_nc = continuous_loss(g, out.continuous, target)?;
        let j_nd = discrete_loss(g, &out.discrete, &batch.discrete, class_weights)?;
        let j_n = architecture_loss(g, j_nc, j_nd)?;
        let j_lg = coarse_loss(g, out.coarse, &batch.coarse, &class_weights.coarse)?;
        let composed = hierarchical_compose(g, out.coarse, out.fine)?;
        let j_l = fine_loss(g, composed, &batch.fine, &class_weights.fine)?;
        let j_p = parsing_loss(g, j_n, j_lg, j_l, &config.gammas)?;
        let total = g.add(j_f, j_p)?;
        Ok(LossNodes {
            terms,
            fingerprint: j_f,
            continuous: j_nc,
            discrete: j_nd,
            architecture: j_n,
            coarse: j_lg,
            fine: j_l,
            parsing: j_p,
            total,
        })
    }

    /// Loss values and gradients of `J_f + J_p` without updating anything.
    pub fn gradients<T: Scalar>(
        &self,
        weights: &ParsingWeights<T>,
        batch: &Batch<T>,
        class_weights: &ClassWeights,
        config: &TrainConfig,
    ) -> Result<(StepLosses, GradMap<T>, GradMap<T>, Ctx<T>)> {
        let mut g = Graph::new();
        let fen_p = weights.fen.bind(&mut g);
        let pn_p = weights.pn.bind(&mut g);
        let mut ctx = Ctx::new(Mode::Train);
        let nodes = self.losses(&mut g, &fen_p, &pn_p, weights, batch, class_weights, config, &mut ctx)?;
        let values = nodes.values(&g);
        check_finite(&values)?;
        let grads = g.backward(nodes.total)?;
        Ok((values, fen_p.collect(&g, &grads), pn_p.collect(&g, &grads), ctx))
    }

    /// One Adam step on FEN and PN against `J_f + J_p`.
    pub fn train_step<T: Scalar>(
        &self,
        weights: &mut ParsingWeights<T>,
        optimizers: &mut Optimizers<T>,
        batch: &Batch<T>,
        class_weights: &ClassWeights,
        config: &TrainConfig,
    ) -> Result<StepLosses> {
        let (values, fen_g, pn_g, ctx) = self.gradients(weights, batch, class_weights, config)?;
        adam_step(&mut weights.fen, &fen_g, &mut optimizers.fen)?;
        adam_step(&mut weights.pn, &pn_g, &mut optimizers.pn)?;
        weights.fen.update_running_stats(&ctx.stats)?;
        Ok(values)
    }

    /// Inference on a batch of images `[N, C, H, W]`.
    pub fn predict<T: Scalar>(&self, weights: &ParsingWeights<T>, images: &Tensor<T>) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let fen_p = weights.fen.bind_frozen(&mut g);
        let pn_p = weights.pn.bind_frozen(&mut g);
        let x = g.input(images.clone());
        let mut ctx = Ctx::new(Mode::Eval);
        let f = self.fen.forward(&mut g, &fen_p, &weights.fen, x, &mut ctx)?;
        let out = self.pn.forward(&mut g, &pn_p, f)?;
        let composed = hierarchical_compose(&mut g, out.coarse, out.fine)?;
        let n = images.shape()[0];
        let rows = |v: Var| -> Vec<Vec<f64>> {
            let t = g.value(v);
            let m = t.shape()[1];
            t.data().chunks(m).map(|r| r.iter().map(|x| x.f64()).collect()).collect()
        };
        let cont = rows(out.continuous);
        let disc: Vec<Vec<Vec<f64>>> = out.discrete.iter().map(|&v| rows(v)).collect();
        let coarse = rows(out.coarse);
        let fine = rows(composed);
        Ok((0..n)
            .map(|i| {
                let logits: Vec<Vec<f64>> = disc.iter().map(|d| d[i].clone()).collect();
                Prediction {
                    continuous: cont[i].clone().try_into().expect("9 outputs"),
                    discrete: std::array::from_fn(|k| argmax(&logits[k])),
                    discrete_probs: logits
                        .iter()
                        .map(|l| l.iter().map(|&z| crate::autodiff::sigmoid(z)).collect())
                        .collect(),
                    coarse: std::array::from_fn(|m| crate::autodiff::sigmoid(coarse[i][m])),
                    fine: fine[i].clone().try_into().expect("8 outputs"),
                }
            })
            .collect())
    }
}

fn check_finite(v: &StepLosses) -> Result<()> {
    let named = [
        ("J_m", v.magnitude),
        ("J_s", v.spectrum),
        ("J_r", v.repetitive),
        ("J_e", v.energy),
        ("J_nc", v.continuous),
        ("J_nd", v.discrete),
        ("J_lg", v.coarse),
        ("J_l", v.fine),
        ("total", v.total),
    ];
    match named.iter().find(|(_, x)| !x.is_finite()) {
        Some((name, _)) => Err(Error::NonFinite {
            node: format!("loss component {name}"),
        }),
        None => Ok(()),
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Normalized space.
    pub continuous: [f64; NUM_CONTINUOUS],
    pub discrete: [usize; NUM_DISCRETE],
    /// Sigmoid class scores per classifier.
    pub discrete_probs: Vec<Vec<f64>>,
    pub coarse: [f64; NUM_COARSE],
    /// Composed fine probabilities.
    pub fine: [f64; NUM_FINE],
}

impl Prediction {
    pub fn fine_flags(&self) -> [bool; NUM_FINE] {
        self.fine.map(|p| p > 0.5)
    }

    pub fn coarse_flags(&self) -> [bool; NUM_COARSE] {
        self.coarse.map(|p| p > 0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::FenConfig;

    fn scalar(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).item()
    }

    fn row(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.input(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn continuous_cases() {
        let mut g = Graph::new();
        let t: Vec<f64> = (0..9).map(|i| i as f64 / 10.0).collect();
        let p: Vec<f64> = t.iter().map(|v| v + 0.1).collect();
        let (tv, pv) = (row(&mut g, &t), row(&mut g, &p));
        let l = continuous_loss(&mut g, pv, tv).unwrap();
        assert!((scalar(&g, l) - 0.09).abs() < 1e-12);
        let r = continuous_loss(&mut g, tv, pv).unwrap();
        assert_eq!(scalar(&g, l), scalar(&g, r));
        let z = continuous_loss(&mut g, tv, tv).unwrap();
        assert_eq!(scalar(&g, z), 0.0);
        let short = row(&mut g, &[0.0; 8]);
        assert!(continuous_loss(&mut g, short, tv).is_err());
    }

    #[test]
    fn class_weight_cases() {
        let labels: Vec<usize> = (0..100).map(|i| (i >= 80) as usize).collect();
        assert_eq!(compute_class_weights(&labels, 2).unwrap(), vec![1.25, 5.0]);
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        assert_eq!(compute_class_weights(&labels, 2).unwrap(), vec![2.0, 2.0]);
        assert!(matches!(compute_class_weights(&[1; 10], 2), Err(Error::Coverage(_))));
    }

    #[test]
    fn weighted_ce_cases() {
        let mut g = Graph::new();
        let z = row(&mut g, &[0.0, 3.0, -1.0]);
        let l = weighted_sigmoid_ce(&mut g, z, &[0], &[2.5, 1.0, 1.0]).unwrap();
        assert!((scalar(&g, l) - 2.5 * 2f64.ln()).abs() < 1e-12);
        let z = row(&mut g, &[60.0, 0.0]);
        let l = weighted_sigmoid_ce(&mut g, z, &[0], &[1.0, 1.0]).unwrap();
        assert!(scalar(&g, l) < 1e-20);
        let z = row(&mut g, &[0.3, -0.7, 1.1, 0.0]);
        let a = weighted_sigmoid_ce(&mut g, z, &[2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = weighted_sigmoid_ce(&mut g, z, &[2], &[2.0, 4.0, 6.0, 8.0]).unwrap();
        assert!((2.0 * scalar(&g, a) - scalar(&g, b)).abs() < 1e-12);
    }

    #[test]
    fn coarse_and_fine_cases() {
        let mut g = Graph::new();
        let z = row(&mut g, &[0.0; 3]);
        let l = coarse_loss(&mut g, z, &[[true; 3]], &[[1.0; 2]; 3]).unwrap();
        assert!((scalar(&g, l) - 3.0 * 2f64.ln()).abs() < 1e-12);
        let z = row(&mut g, &[60.0, -60.0, 60.0]);
        let l = coarse_loss(&mut g, z, &[[true, false, true]], &[[1.0; 2]; 3]).unwrap();
        assert!(scalar(&g, l) < 1e-20);

        let p = row(&mut g, &[0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let mut t = [true; 8];
        t[0] = true;
        let w = [[1.0, 3.0]; 8];
        let l = fine_loss(&mut g, p, &[t], &w).unwrap();
        assert!((scalar(&g, l) - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn compose_cases() {
        let mut g = Graph::new();
        let fine_logits = [0.3, -1.0, 2.0, 0.0, 1.0, -2.0, 0.5, 4.0];
        let fine = row(&mut g, &fine_logits);
        let c = row(&mut g, &[60.0, 60.0, 60.0]);
        let p = hierarchical_compose(&mut g, c, fine).unwrap();
        for (m, &z) in fine_logits.iter().enumerate() {
            assert!((g.value(p).data()[m] - crate::autodiff::sigmoid(z)).abs() < 1e-12);
        }
        let c = row(&mut g, &[-60.0, 60.0, 60.0]);
        let p = hierarchical_compose(&mut g, c, fine).unwrap();
        assert!(g.value(p).data()[..4].iter().all(|&v| v < 1e-20));
        let logit08 = (0.8f64 / 0.2).ln();
        let fine = row(&mut g, &[logit08, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let c = row(&mut g, &[0.0, 60.0, 60.0]);
        let p = hierarchical_compose(&mut g, c, fine).unwrap();
        assert!((g.value(p).data()[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn parsing_combination() {
        let mut g = Graph::new();
        let a = g.input(Tensor::scalar(0.1));
        let b = g.input(Tensor::scalar(0.2));
        let c = g.input(Tensor::scalar(0.3));
        let j = parsing_loss(&mut g, a, b, c, &Gammas::default()).unwrap();
        assert!((scalar(&g, j) - 3.0).abs() < 1e-12);
        let x = g.input(Tensor::scalar(0.5));
        let y = g.input(Tensor::scalar(1.5));
        let n = architecture_loss(&mut g, x, y).unwrap();
        assert_eq!(scalar(&g, n), 2.0);
    }

    fn tiny_model() -> ParsingModel {
        let fen = Fen::new(FenConfig::compact(8, 8, 1)).unwrap();
        let mut cfg = PnConfig::compact([1, 8, 8]);
        cfg.conv_channels = [2, 2, 2, 2, 2];
        cfg.feature_dim = 512;
        ParsingModel::new(fen, Pn::new(cfg).unwrap()).unwrap()
    }

    #[test]
    fn encoder_contract() {
        let m = tiny_model();
        let w = m.pn.init::<f32>(3);
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| ((i * 7) % 11) as f32 / 11.0 - 0.5);
        let f = encoder_forward(&x, &m.pn, &w).unwrap();
        assert_eq!(f.shape(), &[2, 512]);
        assert_eq!(f, encoder_forward(&x, &m.pn, &w).unwrap());
        let mut zero = w.clone();
        for (_, t) in zero.params_mut() {
            t.data_mut().fill(0.0);
        }
        assert!(encoder_forward(&x, &m.pn, &zero).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(encoder_forward(&Tensor::zeros(&[1, 1, 4, 4]), &m.pn, &w).is_err());
    }
}
