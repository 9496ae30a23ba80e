//! Training a toy generator on exactly its declared loss set, and sampling.
//!
//! Pixel losses (L1, L2, MSE) pair a fixed set of latents with procedural
//! targets. MMD compares random Fourier features of generated and real
//! batches. WGAN and Adversarial train a small 3-layer critic/discriminator
//! alongside. KL turns the generator into a VAE decoder with a learned
//! encoder. CE conditions the latent on a binary attribute (left-vs-right
//! brightness) scored by a fixed linear classifier.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::generator::Generator;
use super::procedural::sample_batch;
use super::GmSpec;
use crate::autodiff::{Graph, Var};
use crate::checkpoint::{self, NamedOptimizer};
use crate::error::{Error, Result};
use crate::labels::LossType;
use crate::nn::{Activation, Bound, Conv, Ctx, Dense, Mode, ParamStore};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// Fixed (latent, target) pairs per generator.
pub const PAIRED_SET: usize = 64;
pub const TRAIN_BATCH: usize = 16;
/// Batch size used when sampling; batch-normalized generators use batch statistics.
pub const SAMPLE_BATCH: usize = 32;
const MMD_FEATURES: usize = 64;
const CRITIC_CLIP: f32 = 0.1;
const ENCODER_HIDDEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyGenerator {
    pub spec: GmSpec,
    pub weights: ParamStore<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Loss terms the loop actually optimized, in fine-label order.
    pub active_losses: Vec<LossType>,
    pub generator_loss: Vec<f64>,
    pub initial_mse: f64,
    pub final_mse: f64,
}

impl ToyGenerator {
    pub fn new(spec: &GmSpec) -> Result<Self> {
        let gen = Generator::new(spec)?;
        Ok(ToyGenerator {
            spec: spec.clone(),
            weights: gen.init(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let opt = [NamedOptimizer {
            name: "generator".into(),
            adam: AdamConfig::with_lr(self.spec.lr),
        }];
        checkpoint::save(path, &self.weights, &opt, self.spec.seed)
    }

    pub fn load(path: &Path, spec: &GmSpec) -> Result<Self> {
        let (weights, header) = checkpoint::load(path)?;
        let expected = Generator::new(spec)?.init::<f32>();
        let names_match = expected.params().map(|(n, t)| (n, t.shape())).eq(weights.params().map(|(n, t)| (n, t.shape())));
        if !names_match || header.master_seed != spec.seed {
            return Err(Error::Format(format!("{} does not hold generator {}", path.display(), spec.id)));
        }
        Ok(ToyGenerator {
            spec: spec.clone(),
            weights,
        })
    }
}

/// Three-layer convolutional critic: two stride-2 convs and a linear score.
struct Critic {
    c1: Conv,
    c2: Conv,
    fc: Dense,
}

impl Critic {
    fn new(prefix: &str, image: [usize; 3]) -> Self {
        let [c, h, w] = image;
        let conv = |name: &str, cin, cout| Conv {
            name: format!("{prefix}.{name}"),
            cin,
            cout,
            k: 3,
            stride: 2,
            pad: 1,
        };
        Critic {
            c1: conv("c1", c, 8),
            c2: conv("c2", 8, 16),
            fc: Dense::new(format!("{prefix}.fc"), 16 * (h / 4) * (w / 4), 1),
        }
    }

    fn init(&self, seed: u64) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        self.c1.init(&mut s, seed);
        self.c2.init(&mut s, seed);
        self.fc.init(&mut s, seed);
        s
    }

    /// `[N, C, H, W]` -> scores `[N]`.
    fn forward(&self, g: &mut Graph<f32>, p: &Bound, x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let mut y = self.c1.forward(g, p, x)?;
        y = Activation::LeakyRelu.apply(g, y)?;
        y = self.c2.forward(g, p, y)?;
        y = Activation::LeakyRelu.apply(g, y)?;
        y = g.reshape(y, &[n, self.fc.fin])?;
        y = self.fc.forward(g, p, y)?;
        g.reshape(y, &[n])
    }
}

struct Encoder {
    fc0: Dense,
    fc1: Dense,
    latent: usize,
}

impl Encoder {
    fn new(spec: &GmSpec) -> Self {
        let pixels = spec.image.iter().product();
        Encoder {
            fc0: Dense::new("enc.fc0", pixels, ENCODER_HIDDEN),
            fc1: Dense::new("enc.fc1", ENCODER_HIDDEN, 2 * spec.latent_dim),
            latent: spec.latent_dim,
        }
    }

    fn init(&self, seed: u64) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        self.fc0.init(&mut s, seed);
        self.fc1.init(&mut s, seed);
        s
    }

    /// Returns the reparameterized latent and the batch-mean KL to N(0, I).
    fn forward(&self, g: &mut Graph<f32>, p: &Bound, x_flat: Var, eps: Var) -> Result<(Var, Var)> {
        let n = g.shape(x_flat)[0];
        let h = self.fc0.forward(g, p, x_flat)?;
        let h = g.relu(h)?;
        let h = self.fc1.forward(g, p, h)?;
        let mu_idx: Vec<usize> = (0..self.latent).collect();
        let lv_idx: Vec<usize> = (self.latent..2 * self.latent).collect();
        let mu = g.index_select(h, &mu_idx)?;
        let logvar = g.index_select(h, &lv_idx)?;
        let half = g.scale(logvar, 0.5)?;
        let std = g.exp(half)?;
        let noise = g.mul(std, eps)?;
        let z = g.add(mu, noise)?;
        // 0.5 * sum(mu^2 + exp(lv) - lv - 1)
        let mu2 = g.square(mu)?;
        let var = g.exp(logvar)?;
        let a = g.add(mu2, var)?;
        let b = g.sub(a, logvar)?;
        let b = g.add_scalar(b, -1.0)?;
        let s = g.sum(b)?;
        let kl = g.scale(s, 0.5 / n as f64)?;
        Ok((z, kl))
    }
}

fn normal_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
}

fn divergence<'a>(spec: &'a GmSpec, component: &str, step: usize) -> impl Fn(Error) -> Error + 'a {
    let component = format!("{}/{component}", spec.id);
    move |e| match e {
        Error::NonFinite { node } => Error::Divergence {
            component: format!("{component} ({node})"),
            step,
            seed: spec.seed,
        },
        other => other,
    }
}

struct Setup {
    latents: Tensor<f32>,
    targets: Tensor<f32>,
    /// +1 / -1 attribute per paired latent (sign of its first coordinate).
    attribute: Vec<f32>,
    mmd_w: Tensor<f32>,
    mmd_b: Tensor<f32>,
    ce_direction: Tensor<f32>,
}

fn setup(spec: &GmSpec) -> Setup {
    let [c, h, w] = spec.image;
    let pixels = c * h * w;
    let mut rng = rng_for(spec.seed, "paired-set");
    let latents = normal_tensor(&[PAIRED_SET, spec.latent_dim], &mut rng);
    let targets = sample_batch(spec.family, spec.image, PAIRED_SET, &mut rng);
    let attribute = (0..PAIRED_SET)
        .map(|i| if latents.row(i)[0] > 0.0 { 1.0 } else { -1.0 })
        .collect();
    // Bandwidth ~ typical distance between images in [-1, 1].
    let inv_bw = 1.0 / (pixels as f32 * 0.5).sqrt();
    let mut rng = rng_for(spec.seed, "mmd-features");
    let mmd_w = normal_tensor(&[MMD_FEATURES, pixels], &mut rng).map(|v| v * inv_bw);
    let mmd_b = Tensor::from_fn(&[MMD_FEATURES], |_| rng.gen_range(0.0..std::f32::consts::TAU));
    // Left half bright vs right half bright.
    let ce_direction = Tensor::from_fn(&[1, pixels], |i| {
        let col = i % w;
        let s = if col < w / 2 { 1.0 } else { -1.0 };
        s * 8.0 / (pixels as f32)
    });
    Setup {
        latents,
        targets,
        attribute,
        mmd_w,
        mmd_b,
        ce_direction,
    }
}

fn loss_weight(l: LossType) -> f64 {
    match l {
        LossType::Mmd => 10.0,
        LossType::Kl => 0.05,
        _ => 1.0,
    }
}

fn reconstruction_mse(gen: &Generator, weights: &ParamStore<f32>, s: &Setup) -> Result<f64> {
    let mut g = Graph::new();
    let p = weights.bind_frozen(&mut g);
    let z = g.input(s.latents.clone());
    let y = gen.forward(&mut g, &p, weights, z, &mut Ctx::new(Mode::Eval))?;
    let y = g.value(y);
    let se: f64 = y
        .data()
        .iter()
        .zip(s.targets.data())
        .map(|(&a, &b)| ((a.clamp(-1.0, 1.0) - b) as f64).powi(2))
        .sum();
    Ok(se / y.numel() as f64)
}

fn clip(store: &mut ParamStore<f32>, c: f32) {
    for (_, t) in store.params_mut() {
        for v in t.data_mut() {
            *v = v.clamp(-c, c);
        }
    }
}

/// Train on the spec's declared losses for `spec.steps` steps.
pub fn train_toy_gm(spec: &GmSpec) -> Result<(ToyGenerator, TrainLog)> {
    let gen = Generator::new(spec)?;
    let mut weights = gen.init::<f32>();
    let s = setup(spec);
    let [c, h, w] = spec.image;
    let pixels = c * h * w;
    let mut losses = spec.losses.clone();
    losses.sort_by_key(|l| l.index());
    losses.dedup();
    let has = |l: LossType| losses.contains(&l);

    let critic = Critic::new("critic", spec.image);
    let disc = Critic::new("disc", spec.image);
    let encoder = Encoder::new(spec);
    let mut critic_w = critic.init(rng_for(spec.seed, "critic").gen());
    clip(&mut critic_w, CRITIC_CLIP);
    let mut disc_w = disc.init(rng_for(spec.seed, "disc").gen());
    let mut enc_w = encoder.init(rng_for(spec.seed, "encoder").gen());

    let adam = AdamConfig::with_lr(spec.lr);
    let mut gen_opt = AdamState::new(adam);
    let mut enc_opt = AdamState::new(adam);
    let mut critic_opt = AdamState::new(adam);
    let mut disc_opt = AdamState::new(adam);

    let initial_mse = reconstruction_mse(&gen, &weights, &s)?;
    let mut rng = rng_for(spec.seed, "batches");
    let mut history = Vec::with_capacity(spec.steps);
    let mut active = Vec::new();

    for step in 0..spec.steps {
        let err = divergence(spec, "generator", step);
        let idx: Vec<usize> = sample(&mut rng, PAIRED_SET, TRAIN_BATCH).into_vec();
        let x_batch = s.targets.select_rows(&idx);
        let x_flat = x_batch.clone().reshape(&[TRAIN_BATCH, pixels])?;
        let eps = normal_tensor(&[TRAIN_BATCH, spec.latent_dim], &mut rng);

        let mut g = Graph::new();
        let pg = weights.bind(&mut g);
        let mut kl_term = None;
        let mut pe = None;
        let z = if has(LossType::Kl) {
            let b = enc_w.bind(&mut g);
            let xf = g.input(x_flat.clone());
            let e = g.input(eps);
            let (z, kl) = encoder.forward(&mut g, &b, xf, e).map_err(&err)?;
            kl_term = Some(kl);
            pe = Some(b);
            z
        } else {
            g.input(s.latents.select_rows(&idx))
        };
        let y = gen.forward(&mut g, &pg, &weights, z, &mut Ctx::new(Mode::Train)).map_err(&err)?;
        let x = g.input(x_batch.clone());
        let mut terms: Vec<(LossType, Var)> = Vec::new();
        for &l in &losses {
            let t = match l {
                LossType::L1 => {
                    let d = g.sub(y, x)?;
                    let a = g.abs(d)?;
                    g.mean(a)?
                }
                LossType::L2 => {
                    // per-image Euclidean norm, scaled to RMS units
                    let d = g.sub(y, x)?;
                    let sq = g.square(d)?;
                    let ss = g.sum_trailing(sq, 3)?;
                    let ss = g.add_scalar(ss, 1e-8)?;
                    let ln = g.log(ss, 1e-12)?;
                    let half = g.scale(ln, 0.5)?;
                    let norm = g.exp(half)?;
                    let m = g.mean(norm)?;
                    g.scale(m, 1.0 / (pixels as f64).sqrt())?
                }
                LossType::Mse => {
                    let d = g.sub(y, x)?;
                    let sq = g.square(d)?;
                    g.mean(sq)?
                }
                LossType::Mmd => {
                    let wv = g.input(s.mmd_w.clone());
                    let bv = g.input(s.mmd_b.clone());
                    let ones = g.input(Tensor::full(&[1, TRAIN_BATCH], 1.0 / TRAIN_BATCH as f32));
                    let scale = (2.0 / MMD_FEATURES as f64).sqrt();
                    let embed = |g: &mut Graph<f32>, v: Var| -> Result<Var> {
                        let f = g.reshape(v, &[TRAIN_BATCH, pixels])?;
                        let proj = g.linear(f, wv, Some(bv))?;
                        let phi = g.cos(proj)?;
                        let phi = g.scale(phi, scale)?;
                        g.matmul(ones, phi)
                    };
                    let fake = embed(&mut g, y)?;
                    let real = embed(&mut g, x)?;
                    let d = g.sub(fake, real)?;
                    let sq = g.square(d)?;
                    g.sum(sq)?
                }
                LossType::Wgan => {
                    let pc = critic_w.bind_frozen(&mut g);
                    let score = critic.forward(&mut g, &pc, y)?;
                    let m = g.mean(score)?;
                    g.scale(m, -1.0)?
                }
                LossType::Adversarial => {
                    let pd = disc_w.bind_frozen(&mut g);
                    let score = disc.forward(&mut g, &pd, y)?;
                    let ls = g.log_sigmoid(score)?;
                    let m = g.mean(ls)?;
                    g.scale(m, -1.0)?
                }
                LossType::Kl => kl_term.expect("encoder built when KL is declared"),
                LossType::Ce => {
                    let f = g.reshape(y, &[TRAIN_BATCH, pixels])?;
                    let dir = g.input(s.ce_direction.clone());
                    let logit = g.linear(f, dir, None)?;
                    let logit = g.reshape(logit, &[TRAIN_BATCH])?;
                    let sign: Vec<f32> = idx.iter().map(|&i| s.attribute[i]).collect();
                    let sign = g.input(Tensor::new(vec![TRAIN_BATCH], sign)?);
                    let signed = g.mul(logit, sign)?;
                    let ls = g.log_sigmoid(signed)?;
                    let m = g.mean(ls)?;
                    g.scale(m, -1.0)?
                }
            };
            terms.push((l, t));
        }
        if step == 0 {
            active = terms.iter().map(|(l, _)| *l).collect();
        }
        let mut total = g.scale(terms[0].1, loss_weight(terms[0].0)).map_err(&err)?;
        for &(l, t) in &terms[1..] {
            let s = g.scale(t, loss_weight(l))?;
            total = g.add(total, s).map_err(&err)?;
        }
        let loss_value = g.value(total).item() as f64;
        if !loss_value.is_finite() {
            return Err(err(Error::NonFinite { node: "total".into() }));
        }
        history.push(loss_value);
        let grads = g.backward(total).map_err(&err)?;
        let fake = g.value(y).clone();
        adam_step(&mut weights, &pg.collect(&g, &grads), &mut gen_opt)?;
        if let Some(b) = &pe {
            adam_step(&mut enc_w, &b.collect(&g, &grads), &mut enc_opt)?;
        }

        if has(LossType::Wgan) {
            let err = divergence(spec, "critic", step);
            let mut g = Graph::new();
            let p = critic_w.bind(&mut g);
            let fv = g.input(fake.clone());
            let rv = g.input(x_batch.clone());
            let sf = critic.forward(&mut g, &p, fv)?;
            let sr = critic.forward(&mut g, &p, rv)?;
            let mf = g.mean(sf)?;
            let mr = g.mean(sr)?;
            let loss = g.sub(mf, mr).map_err(&err)?;
            let grads = g.backward(loss)?;
            adam_step(&mut critic_w, &p.collect(&g, &grads), &mut critic_opt)?;
            clip(&mut critic_w, CRITIC_CLIP);
        }
        if has(LossType::Adversarial) {
            let err = divergence(spec, "discriminator", step);
            let mut g = Graph::new();
            let p = disc_w.bind(&mut g);
            let fv = g.input(fake);
            let rv = g.input(x_batch);
            let sf = disc.forward(&mut g, &p, fv)?;
            let sr = disc.forward(&mut g, &p, rv)?;
            let nf = g.scale(sf, -1.0)?;
            let lf = g.log_sigmoid(nf)?;
            let lr = g.log_sigmoid(sr)?;
            let a = g.mean(lf)?;
            let b = g.mean(lr)?;
            let s = g.add(a, b)?;
            let loss = g.scale(s, -1.0).map_err(&err)?;
            let grads = g.backward(loss)?;
            adam_step(&mut disc_w, &p.collect(&g, &grads), &mut disc_opt)?;
        }
    }

    let final_mse = reconstruction_mse(&gen, &weights, &s)?;
    Ok((
        ToyGenerator {
            spec: spec.clone(),
            weights,
        },
        TrainLog {
            active_losses: active,
            generator_loss: history,
            initial_mse,
            final_mse,
        },
    ))
}

/// `n` images `[n, C, H, W]` clamped to [-1, 1], deterministic in `(weights, seed)`.
pub fn sample_images(gen: &ToyGenerator, n: usize, seed: u64) -> Result<Tensor<f32>> {
    let [c, h, w] = gen.spec.image;
    if n == 0 {
        return Tensor::new(vec![0, c, h, w], Vec::new());
    }
    let net = Generator::new(&gen.spec)?;
    let mut rng = rng_for(seed, &format!("sample/{}", gen.spec.id));
    let mut chunks = Vec::new();
    let mut done = 0;
    while done < n {
        let b = SAMPLE_BATCH.min(n - done);
        let z = normal_tensor(&[b, gen.spec.latent_dim], &mut rng);
        let mut g = Graph::new();
        let p = gen.weights.bind_frozen(&mut g);
        let zv = g.input(z);
        let y = net.forward(&mut g, &p, &gen.weights, zv, &mut Ctx::new(Mode::Eval))?;
        chunks.push(g.value(y).map(|v| v.clamp(-1.0, 1.0)));
        done += b;
    }
    Tensor::concat(&chunks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::ZooConfig;

    fn quick(i: usize, steps: usize) -> GmSpec {
        let mut s = ZooConfig::default().specs[i].clone();
        s.steps = steps;
        s
    }

    #[test]
    fn l2_only_reduces_reconstruction_error() {
        let mut spec = quick(0, 120);
        spec.losses = vec![LossType::L2];
        let (_, log) = train_toy_gm(&spec).unwrap();
        assert!(log.final_mse < log.initial_mse, "{} -> {}", log.initial_mse, log.final_mse);
        assert_eq!(log.active_losses, vec![LossType::L2]);
    }

    #[test]
    fn active_losses_match_declared_for_every_zoo_spec() {
        for i in 0..12 {
            let spec = quick(i, 2);
            let (_, log) = train_toy_gm(&spec).unwrap();
            let mut declared = spec.losses.clone();
            declared.sort_by_key(|l| l.index());
            assert_eq!(log.active_losses, declared, "{}", spec.id);
        }
    }

    #[test]
    fn deterministic_training_and_sampling() {
        let spec = quick(1, 5);
        let (a, _) = train_toy_gm(&spec).unwrap();
        let (b, _) = train_toy_gm(&spec).unwrap();
        assert_eq!(a, b);
        let s1 = sample_images(&a, 40, 3).unwrap();
        assert_eq!(s1.shape(), &[40, 1, 16, 16]);
        assert_eq!(s1, sample_images(&a, 40, 3).unwrap());
        assert!(s1.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(sample_images(&a, 0, 3).unwrap().numel(), 0);
    }
}
