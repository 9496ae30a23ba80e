//! Fingerprint estimation network (FEN) and the four fingerprint constraints.
//!
//! The FEN is a DnCNN-style stack: stem convolutions, then conv, batch-norm
//! and ReLU blocks, then a linear output convolution back to the input channel
//! count. Its output has exactly the input's shape.
//!
//! All loss terms are computed per sample and averaged over channels:
//!
//! * magnitude `J_m = ||F||^2`
//! * spectrum `J_s = ||low_pass(DFT(F), k)||^2`
//! * repetitive `J_r = -max |high_pass(DFT(F), k)|`
//! * energy `J_e = ||DFT(F) - DFT(F)^T||^2`

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NormKind, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Conv, Ctx, Mode, Norm, ParamStore};
use crate::spectral;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FenConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stem_convs: usize,
    pub blocks: usize,
    pub features: usize,
}

impl Default for FenConfig {
    fn default() -> Self {
        FenConfig {
            height: 16,
            width: 16,
            channels: 1,
            stem_convs: 2,
            blocks: 8,
            features: 64,
        }
    }
}

impl FenConfig {
    /// Narrow, shallow variant used by the single-core experiment suite.
    pub fn compact(height: usize, width: usize, channels: usize) -> Self {
        FenConfig {
            height,
            width,
            channels,
            stem_convs: 2,
            blocks: 2,
            features: 8,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

#[derive(Clone, Debug)]
pub struct Fen {
    pub config: FenConfig,
    stem: Vec<Conv>,
    blocks: Vec<(Conv, Norm)>,
    out: Conv,
}

impl Fen {
    pub fn new(config: FenConfig) -> Result<Self> {
        if config.stem_convs == 0 || config.features == 0 || config.channels == 0 {
            return Err(Error::invalid("FEN needs at least one stem conv, feature and channel"));
        }
        let f = config.features;
        let stem = (0..config.stem_convs)
            .map(|i| Conv::same(format!("fen.stem{i}"), if i == 0 { config.channels } else { f }, f))
            .collect();
        let blocks = (0..config.blocks)
            .map(|i| {
                (
                    Conv::same(format!("fen.block{i}.conv"), f, f),
                    Norm::new(format!("fen.block{i}.bn"), NormKind::Batch, f),
                )
            })
            .collect();
        let out = Conv::same("fen.out", f, config.channels);
        Ok(Fen {
            config,
            stem,
            blocks,
            out,
        })
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for c in &self.stem {
            c.init(&mut store, seed);
        }
        for (c, n) in &self.blocks {
            c.init(&mut store, seed);
            n.init(&mut store);
        }
        self.out.init(&mut store, seed);
        store
    }

    /// `x [N, C, H, W]` -> fingerprint of the same shape.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        store: &ParamStore<T>,
        x: Var,
        ctx: &mut Ctx<T>,
    ) -> Result<Var> {
        let [c, h, w] = self.config.input_shape();
        let s = g.shape(x);
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::shape("fen.input", format!("expected [N, {c}, {h}, {w}], got {s:?}")));
        }
        let mut y = x;
        for conv in &self.stem {
            y = conv.forward(g, p, y)?;
            y = Activation::Relu.apply(g, y)?;
        }
        for (conv, norm) in &self.blocks {
            y = conv.forward(g, p, y)?;
            y = norm.forward(g, p, store, y, ctx)?;
            y = g.relu(y)?;
        }
        self.out.forward(g, p, y)
    }
}

/// Run the FEN in eval mode on a batch `[N, C, H, W]`.
pub fn fen_forward<T: Scalar>(images: &Tensor<T>, fen: &Fen, weights: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = weights.bind_frozen(&mut g);
    let x = g.input(images.clone());
    let mut ctx = Ctx::new(Mode::Eval);
    let f = fen.forward(&mut g, &p, weights, x, &mut ctx)?;
    Ok(g.value(f).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FingerprintLossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    /// Window size for the spectrum and repetitive terms; `None` scales with image size.
    pub k: Option<usize>,
}

impl Default for FingerprintLossWeights {
    fn default() -> Self {
        FingerprintLossWeights {
            lambda1: 0.05,
            lambda2: 0.001,
            lambda3: 0.1,
            lambda4: 1.0,
            k: None,
        }
    }
}

/// Reference window size at the reference side length.
pub const REFERENCE_K: f64 = 50.0;
pub const REFERENCE_SIDE: f64 = 128.0;

/// `round(50/128 * min(H, W))`, clamped to `1..min(H, W)`.
pub fn default_k(height: usize, width: usize) -> usize {
    let side = height.min(width);
    let k = (REFERENCE_K / REFERENCE_SIDE * side as f64).round() as usize;
    k.clamp(1, side.saturating_sub(1).max(1))
}

impl FingerprintLossWeights {
    pub fn zero() -> Self {
        FingerprintLossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            k: None,
        }
    }

    pub fn resolve_k(&self, height: usize, width: usize) -> usize {
        self.k.unwrap_or_else(|| default_k(height, width))
    }

    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if l.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!("loss weights must be nonnegative, got {l:?}")));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4]
            .iter()
            .all(|&v| v == 0.0)
    }
}

/// Per-sample loss terms, each a `[N]` graph node.
#[derive(Clone, Copy, Debug)]
pub struct FingerprintTerms {
    pub magnitude: Var,
    pub spectrum: Var,
    pub repetitive: Var,
    pub energy: Var,
}

fn fingerprint_dims<T: Scalar>(g: &Graph<T>, f: Var) -> Result<(usize, usize, usize, usize)> {
    match *g.shape(f) {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape("fingerprint", format!("expected [N, C, H, W], got {s:?}"))),
    }
}

/// Constant `[N, C, H, W, 2]` mask selecting (or excluding) the centered window.
fn spectral_mask<T: Scalar>(n: usize, c: usize, h: usize, w: usize, k: usize, inside: bool) -> Result<Tensor<T>> {
    let plane = spectral::window_mask(h, w, k)?;
    let mut data = Vec::with_capacity(n * c * h * w * 2);
    for _ in 0..n * c {
        for &m in &plane {
            let v = if m == inside { T::one() } else { T::zero() };
            data.push(v);
            data.push(v);
        }
    }
    Tensor::new(vec![n, c, h, w, 2], data)
}

/// `J_m` per sample.
pub fn magnitude_loss<T: Scalar>(g: &mut Graph<T>, f: Var) -> Result<Var> {
    let (_, c, _, _) = fingerprint_dims(g, f)?;
    let sq = g.square(f)?;
    let s = g.sum_trailing(sq, 3)?;
    g.scale(s, 1.0 / c as f64)
}

/// `J_s` per sample, from a centered spectrum `[N, C, H, W, 2]`.
pub fn spectrum_loss_from_spectrum<T: Scalar>(g: &mut Graph<T>, spec: Var, k: usize) -> Result<Var> {
    let (n, c, h, w) = spectrum_dims(g, spec)?;
    let mask = g.input(spectral_mask(n, c, h, w, k, true)?);
    let low = g.mul(spec, mask)?;
    let sq = g.square(low)?;
    let s = g.sum_trailing(sq, 4)?;
    g.scale(s, 1.0 / c as f64)
}

/// `J_r` per sample. The max is over bin magnitudes; ties pick the first bin
/// in row-major order.
pub fn repetitive_loss_from_spectrum<T: Scalar>(g: &mut Graph<T>, spec: Var, k: usize) -> Result<Var> {
    let (n, c, h, w) = spectrum_dims(g, spec)?;
    if k >= h.min(w) {
        return Err(Error::invalid(format!("repetitive loss needs k < {}, got {k}", h.min(w))));
    }
    let mask = g.input(spectral_mask(n, c, h, w, k, false)?);
    let high = g.mul(spec, mask)?;
    let mag = g.magnitude(high)?;
    let peak = g.max_trailing(mag, 2)?;
    let s = g.sum_trailing(peak, 1)?;
    g.scale(s, -1.0 / c as f64)
}

/// `J_e` per sample.
pub fn energy_loss_from_spectrum<T: Scalar>(g: &mut Graph<T>, spec: Var) -> Result<Var> {
    let (_, c, h, w) = spectrum_dims(g, spec)?;
    if h != w {
        return Err(Error::invalid(format!("energy loss needs a square spectrum, got {h}x{w}")));
    }
    let t = g.swap_axes(spec, 2, 3)?;
    let d = g.sub(spec, t)?;
    let sq = g.square(d)?;
    let s = g.sum_trailing(sq, 4)?;
    g.scale(s, 1.0 / c as f64)
}

fn spectrum_dims<T: Scalar>(g: &Graph<T>, spec: Var) -> Result<(usize, usize, usize, usize)> {
    match *g.shape(spec) {
        [n, c, h, w, 2] => Ok((n, c, h, w)),
        ref s => Err(Error::shape("spectrum", format!("expected [N, C, H, W, 2], got {s:?}"))),
    }
}

pub fn spectrum_loss<T: Scalar>(g: &mut Graph<T>, f: Var, k: usize) -> Result<Var> {
    fingerprint_dims(g, f)?;
    let spec = g.dft2(f)?;
    spectrum_loss_from_spectrum(g, spec, k)
}

pub fn repetitive_loss<T: Scalar>(g: &mut Graph<T>, f: Var, k: usize) -> Result<Var> {
    fingerprint_dims(g, f)?;
    let spec = g.dft2(f)?;
    repetitive_loss_from_spectrum(g, spec, k)
}

pub fn energy_loss<T: Scalar>(g: &mut Graph<T>, f: Var) -> Result<Var> {
    fingerprint_dims(g, f)?;
    let spec = g.dft2(f)?;
    energy_loss_from_spectrum(g, spec)
}

/// All four per-sample terms, sharing one DFT.
pub fn fingerprint_terms<T: Scalar>(g: &mut Graph<T>, f: Var, k: usize) -> Result<FingerprintTerms> {
    let (_, _, h, w) = fingerprint_dims(g, f)?;
    if k == 0 || k >= h.min(w) {
        return Err(Error::invalid(format!("k must lie in 1..{}, got {k}", h.min(w))));
    }
    let magnitude = magnitude_loss(g, f)?;
    let spec = g.dft2(f)?;
    Ok(FingerprintTerms {
        magnitude,
        spectrum: spectrum_loss_from_spectrum(g, spec, k)?,
        repetitive: repetitive_loss_from_spectrum(g, spec, k)?,
        energy: energy_loss_from_spectrum(g, spec)?,
    })
}

/// Per-sample `J_f = l1 J_m + l2 J_s + l3 J_r + l4 J_e`, shape `[N]`.
pub fn combine_terms<T: Scalar>(
    g: &mut Graph<T>,
    terms: &FingerprintTerms,
    weights: &FingerprintLossWeights,
) -> Result<Var> {
    let parts = [
        (terms.magnitude, weights.lambda1),
        (terms.spectrum, weights.lambda2),
        (terms.repetitive, weights.lambda3),
        (terms.energy, weights.lambda4),
    ];
    let mut acc = g.scale(parts[0].0, parts[0].1)?;
    for &(v, l) in &parts[1..] {
        let s = g.scale(v, l)?;
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

/// Weighted batch average of a per-sample vector. `sample_weights` of `None`
/// is the plain mean; zero weights exempt samples entirely.
pub fn batch_reduce<T: Scalar>(g: &mut Graph<T>, per_sample: Var, sample_weights: Option<&[f64]>) -> Result<Var> {
    let n = g.shape(per_sample)[0];
    let w: Vec<f64> = match sample_weights {
        None => vec![1.0; n],
        Some(w) if w.len() == n => w.to_vec(),
        Some(w) => return Err(Error::shape("batch_reduce", format!("{} weights for {n} samples", w.len()))),
    };
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        let zero = g.scale(per_sample, 0.0)?;
        return g.sum(zero);
    }
    let wt = g.input(Tensor::new(vec![n], w.iter().map(|v| T::c(v / total)).collect())?);
    let p = g.mul(per_sample, wt)?;
    g.sum(p)
}

/// Batch-mean fingerprint objective.
pub fn fingerprint_loss<T: Scalar>(g: &mut Graph<T>, f: Var, weights: &FingerprintLossWeights) -> Result<Var> {
    weights.validate()?;
    let (_, _, h, w) = fingerprint_dims(g, f)?;
    let terms = fingerprint_terms(g, f, weights.resolve_k(h, w))?;
    let per = combine_terms(g, &terms, weights)?;
    batch_reduce(g, per, None)
}

/// Evaluated (batch-mean) values of the four terms and the weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FingerprintLossValues {
    pub magnitude: f64,
    pub spectrum: f64,
    pub repetitive: f64,
    pub energy: f64,
    pub total: f64,
}

pub fn evaluate_losses<T: Scalar>(f: &Tensor<T>, weights: &FingerprintLossWeights) -> Result<FingerprintLossValues> {
    weights.validate()?;
    let mut g = Graph::new();
    let fv = g.input(f.clone());
    let (_, _, h, w) = fingerprint_dims(&g, fv)?;
    let terms = fingerprint_terms(&mut g, fv, weights.resolve_k(h, w))?;
    let per = combine_terms(&mut g, &terms, weights)?;
    let total = batch_reduce(&mut g, per, None)?;
    let mean = |g: &Graph<T>, v: Var| {
        let t = g.value(v);
        t.sum().f64() / t.numel() as f64
    };
    Ok(FingerprintLossValues {
        magnitude: mean(&g, terms.magnitude),
        spectrum: mean(&g, terms.spectrum),
        repetitive: mean(&g, terms.repetitive),
        energy: mean(&g, terms.energy),
        total: g.value(total).item().f64(),
    })
}

/// Finite-difference checks of the four terms (64-bit) on random inputs.
pub fn loss_gradient_suite(trials: usize, seed: u64) -> Result<Vec<crate::autodiff::OpCheck>> {
    use crate::autodiff::{check_gradients, gradcheck::DEFAULT_EPS, OpCheck};
    use rand::Rng;

    let mut rng = crate::rng::rng_for(seed, "fingerprint-gradcheck");
    let k = 3;
    type Term = fn(&mut Graph<f64>, Var, usize) -> Result<Var>;
    let terms: [(&str, Term); 4] = [
        ("magnitude_loss", |g, f, _| magnitude_loss(g, f)),
        ("spectrum_loss", spectrum_loss),
        ("repetitive_loss", repetitive_loss),
        ("energy_loss", |g, f, _| energy_loss_from_spectrum(g, f)),
    ];
    terms
        .iter()
        .map(|(name, term)| {
            let mut worst = 0.0f64;
            for _ in 0..trials {
                // The energy term only sees x - x^T, so its gradient on the image
                // diagonal is exactly zero and a finite difference there measures
                // pure round-off. Check it on a general complex spectrum instead.
                let on_spectrum = *name == "energy_loss";
                let shape: &[usize] = if on_spectrum { &[2, 1, 8, 8, 2] } else { &[2, 1, 8, 8] };
                let f = Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
                let r = check_gradients(
                    |g, v| {
                        let per = term(g, v[0], k)?;
                        g.sum(per)
                    },
                    &[f],
                    DEFAULT_EPS,
                )?;
                worst = worst.max(r.max_rel_error);
            }
            Ok(OpCheck {
                name: name.to_string(),
                max_rel_error: worst,
                trials,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{adam_step, AdamConfig, AdamState};
    use crate::rng::rng_for;
    use rand::Rng;

    fn eval_term(f: &Tensor<f64>, which: &str, k: usize) -> f64 {
        let mut g = Graph::new();
        let v = g.input(f.clone());
        let out = match which {
            "m" => magnitude_loss(&mut g, v),
            "s" => spectrum_loss(&mut g, v, k),
            "r" => repetitive_loss(&mut g, v, k),
            _ => energy_loss(&mut g, v),
        }
        .unwrap();
        g.value(out).sum()
    }

    fn checkerboard(n: usize) -> Tensor<f64> {
        Tensor::from_fn(&[1, 1, n, n], |i| if (i / n + i % n).is_multiple_of(2) { 1.0 } else { -1.0 })
    }

    #[test]
    fn magnitude_cases() {
        assert_eq!(eval_term(&Tensor::zeros(&[1, 1, 4, 4]), "m", 1), 0.0);
        let f = Tensor::full(&[1, 1, 2, 2], 0.1);
        assert!((eval_term(&f, "m", 1) - 0.04).abs() < 1e-12);
        let r = eval_term(&f.map(|v| 2.0 * v), "m", 1) / eval_term(&f, "m", 1);
        assert!((r - 4.0).abs() < 1e-12);
    }

    #[test]
    fn spectrum_cases() {
        assert_eq!(eval_term(&Tensor::zeros(&[1, 1, 4, 4]), "s", 2), 0.0);
        let c = 0.3;
        let f = Tensor::full(&[1, 1, 4, 4], c);
        for k in 1..=4 {
            let expect = (c * 16.0f64).powi(2);
            assert!((eval_term(&f, "s", k) - expect).abs() < 1e-9);
        }
        // checkerboard: all energy at the Nyquist corner bin (0, 0) after the shift.
        assert!(eval_term(&checkerboard(4), "s", 1).abs() < 1e-20);
    }

    #[test]
    fn repetitive_cases() {
        assert_eq!(eval_term(&Tensor::zeros(&[1, 1, 4, 4]), "r", 2), 0.0);
        assert!(eval_term(&Tensor::full(&[1, 1, 4, 4], 0.7), "r", 1).abs() < 1e-12);
        // direct DFT oracle: a +-1 checkerboard of side n has one bin of magnitude n^2.
        assert!((eval_term(&checkerboard(4), "r", 1) + 16.0).abs() < 1e-9);
        let mut g = Graph::new();
        let v = g.input(Tensor::<f64>::zeros(&[1, 1, 4, 4]));
        assert!(repetitive_loss(&mut g, v, 4).is_err());
    }

    #[test]
    fn energy_cases() {
        let sym = Tensor::from_fn(&[1, 1, 4, 4], |i| {
            let (r, c) = (i / 4, i % 4);
            (r * c) as f64 + (r + c) as f64 * 0.5
        });
        assert!(eval_term(&sym, "e", 0) < 1e-18);
        // constructed spectrum [[0, 1], [0, 0]]
        let mut g = Graph::<f64>::new();
        let spec = g.input(Tensor::new(vec![1, 1, 2, 2, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let e = energy_loss_from_spectrum(&mut g, spec).unwrap();
        assert!((g.value(e).item() - 2.0).abs() < 1e-15);
        let mut g = Graph::new();
        let v = g.input(Tensor::<f64>::zeros(&[1, 1, 4, 6]));
        assert!(energy_loss(&mut g, v).is_err());
    }

    #[test]
    fn energy_split_identity() {
        let mut rng = rng_for(1, "split");
        let f = Tensor::from_fn(&[1, 1, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let spec = spectral::dft2(&f.clone().reshape(&[8, 8]).unwrap()).unwrap();
        let high = spectral::high_pass(&spec, 3).unwrap();
        let js = eval_term(&f, "s", 3);
        assert!(((spec.energy() - js - high.energy()) / spec.energy()).abs() < 1e-6);
    }

    #[test]
    fn combination_and_selectors() {
        let mut rng = rng_for(2, "combo");
        let f = Tensor::from_fn(&[1, 1, 16, 16], |_| rng.gen_range(-0.5..0.5));
        let w = FingerprintLossWeights::default();
        let v = evaluate_losses(&f, &w).unwrap();
        let k = w.resolve_k(16, 16);
        assert_eq!(k, 6);
        let hand = 0.05 * eval_term(&f, "m", k)
            + 0.001 * eval_term(&f, "s", k)
            + 0.1 * eval_term(&f, "r", k)
            + 1.0 * eval_term(&f, "e", k);
        assert!((v.total - hand).abs() < 1e-10);
        assert_eq!(evaluate_losses(&f, &FingerprintLossWeights::zero()).unwrap().total, 0.0);
        let sel = FingerprintLossWeights {
            lambda1: 1.0,
            ..FingerprintLossWeights::zero()
        };
        let v1 = evaluate_losses(&f, &sel).unwrap();
        assert_eq!(v1.total, v1.magnitude);
        assert!(v.magnitude >= 0.0 && v.spectrum >= 0.0 && v.energy >= 0.0 && v.repetitive <= 0.0);
    }

    #[test]
    fn negative_weights_rejected() {
        let w = FingerprintLossWeights {
            lambda2: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn multi_channel_terms_average_channels() {
        let one = Tensor::full(&[1, 1, 4, 4], 0.2);
        let two = Tensor::full(&[1, 2, 4, 4], 0.2);
        assert!((eval_term(&one, "m", 1) - eval_term(&two, "m", 1)).abs() < 1e-12);
    }

    #[test]
    fn fen_shape_zero_output_and_determinism() {
        let cfg = FenConfig::compact(16, 16, 1);
        let fen = Fen::new(cfg).unwrap();
        let w = fen.init::<f32>(9);
        let mut rng = rng_for(3, "img");
        let x = Tensor::from_fn(&[2, 1, 16, 16], |_| rng.gen_range(-1.0f32..1.0));
        let f1 = fen_forward(&x, &fen, &w).unwrap();
        assert_eq!(f1.shape(), x.shape());
        assert_eq!(f1, fen_forward(&x, &fen, &fen.init::<f32>(9)).unwrap());
        let mut zeroed = w.clone();
        zeroed.param_mut("fen.out.w").unwrap().data_mut().fill(0.0);
        assert!(fen_forward(&x, &fen, &zeroed).unwrap().data().iter().all(|&v| v == 0.0));
        let bad = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(fen_forward(&bad, &fen, &w).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for row in loss_gradient_suite(5, 4).unwrap() {
            assert!(row.max_rel_error < 1e-4, "{}: {:e}", row.name, row.max_rel_error);
        }
    }

    #[test]
    fn training_on_fingerprint_objective_decreases_it() {
        let fen = Fen::new(FenConfig::compact(8, 8, 1)).unwrap();
        let mut w = fen.init::<f32>(5);
        let weights = FingerprintLossWeights::default();
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-3));
        let mut rng = rng_for(6, "batch");
        let x = Tensor::from_fn(&[4, 1, 8, 8], |_| rng.gen_range(-1.0f32..1.0));
        let mut history = Vec::new();
        for _ in 0..200 {
            let mut g = Graph::new();
            let p = w.bind(&mut g);
            let xv = g.input(x.clone());
            let mut ctx = Ctx::new(Mode::Train);
            let f = fen.forward(&mut g, &p, &w, xv, &mut ctx).unwrap();
            let l = fingerprint_loss(&mut g, f, &weights).unwrap();
            history.push(g.value(l).item());
            let grads = p.collect(&g, &g.backward(l).unwrap());
            adam_step(&mut w, &grads, &mut adam).unwrap();
            w.update_running_stats(&ctx.stats).unwrap();
        }
        let first: f32 = history[..20].iter().sum::<f32>() / 20.0;
        let last: f32 = history[180..].iter().sum::<f32>() / 20.0;
        assert!(last < first, "{first} -> {last}");
    }
}
