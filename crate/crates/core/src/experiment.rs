//! End-to-end experiment plumbing: zoo dataset generation, leave-GMs-out
//! parser training and evaluation, the shuffled-label and random-guess
//! baselines, and the transfer-application desk experiments.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apps::{self, AppTrainConfig, ConvHead, FingerprintClassifier, LabeledImages, ProbeReport};
use crate::dataset::{self, GmEntry, Manifest, NormalizationStats, SplitPlan, MANIFEST_VERSION};
use crate::error::{Error, Result};
use crate::fingerprint::{self, Fen, FenConfig, FingerprintLossWeights};
use crate::labels::{
    ArchitectureTargets, LossTargets, COARSE_NAMES, CONTINUOUS_NAMES, DISCRETE_CARDINALITIES, DISCRETE_NAMES,
    FINE_NAMES, NUM_COARSE, NUM_CONTINUOUS, NUM_DISCRETE, NUM_FINE,
};
use crate::metrics::{self, ConfusionMatrix, Decision, L1Report, SimilarityMatrix};
use crate::parser::{
    Batch, ClassWeights, ParsingModel, ParsingWeights, Pn, PnConfig, Prediction, StepLosses, TrainConfig,
};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;
use crate::zoo::procedural::sample_batch;
use crate::zoo::{self, ContentFamily, TrainLog, ZooConfig};
use crate::checkpoint;

/// Run `f` over `items` on a pool of `jobs` threads, preserving order.
pub fn par_map<I: Sync, O: Send>(jobs: usize, items: &[I], f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

// ------------------------------------------------------------------ zoo data

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZooBuildSummary {
    pub gms: usize,
    pub images_per_gm: usize,
    pub logs: Vec<(String, TrainLog)>,
}

/// Train every toy GM, sample `images_per_gm` images each and write images,
/// checkpoints and `manifest.json` under `out`.
pub fn build_zoo_dataset(out: &Path, config: &ZooConfig, images_per_gm: usize, jobs: usize) -> Result<(Manifest, ZooBuildSummary)> {
    let specs = zoo::build_zoo(config)?;
    if images_per_gm == 0 {
        return Err(Error::invalid("images_per_gm must be positive"));
    }
    fs::create_dir_all(out.join("checkpoints"))?;
    let results = par_map(jobs, &specs, |spec| {
        let (gen, log) = zoo::train_toy_gm(spec)?;
        let images = zoo::sample_images(&gen, images_per_gm, derive_seed(spec.seed, "images"))?;
        let dir = out.join("images").join(&spec.id);
        fs::create_dir_all(&dir)?;
        let ext = if spec.image[0] == 1 { "pgm" } else { "ppm" };
        let per = images.numel() / images_per_gm;
        let mut rels = Vec::with_capacity(images_per_gm);
        for i in 0..images_per_gm {
            let rel = PathBuf::from("images").join(&spec.id).join(format!("{i:04}.{ext}"));
            dataset::write_image(&out.join(&rel), spec.image, &images.data()[i * per..(i + 1) * per])?;
            rels.push(rel);
        }
        let ckpt = PathBuf::from("checkpoints").join(format!("{}.ckpt", spec.id));
        gen.save(&out.join(&ckpt))?;
        let (architecture, losses) = zoo::ground_truth_vector(spec)?;
        Ok((
            GmEntry {
                id: spec.id.clone(),
                family: spec.family,
                architecture,
                losses,
                images: rels,
                checkpoint: Some(ckpt),
                spec: Some(spec.clone()),
            },
            log,
        ))
    })?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        image_shape: specs[0].image,
        seed: config.seed,
        gms: results.iter().map(|(e, _)| e.clone()).collect(),
    };
    dataset::write_manifest(&out.join("manifest.json"), &manifest)?;
    let summary = ZooBuildSummary {
        gms: specs.len(),
        images_per_gm,
        logs: results.into_iter().map(|(e, l)| (e.id, l)).collect(),
    };
    Ok((manifest, summary))
}

/// A manifest with every GM's images resident in memory.
#[derive(Clone, Debug)]
pub struct ZooData {
    pub manifest: Manifest,
    pub images: Vec<Tensor<f32>>,
}

impl ZooData {
    pub fn load(manifest_path: &Path, limit: Option<usize>) -> Result<Self> {
        let manifest = dataset::read_manifest(manifest_path)?;
        let images = manifest
            .gms
            .iter()
            .map(|g| dataset::load_gm_images(manifest_path, &manifest, g, limit))
            .collect::<Result<_>>()?;
        Ok(ZooData { manifest, images })
    }

    pub fn index(&self, id: &str) -> Result<usize> {
        self.manifest
            .gms
            .iter()
            .position(|g| g.id == id)
            .ok_or_else(|| Error::invalid(format!("unknown GM {id}")))
    }

    pub fn available(&self, gm: usize) -> usize {
        self.images[gm].shape()[0]
    }

    pub fn true_targets(&self) -> Vec<(ArchitectureTargets, LossTargets)> {
        self.manifest.gms.iter().map(|g| (g.architecture.clone(), g.losses.clone())).collect()
    }

    /// Images `[start, start + n)` of one GM.
    pub fn slice(&self, gm: usize, start: usize, n: usize) -> Result<Tensor<f32>> {
        if start + n > self.available(gm) {
            return Err(Error::invalid(format!(
                "{} has {} images, {} requested",
                self.manifest.gms[gm].id,
                self.available(gm),
                start + n
            )));
        }
        Ok(self.images[gm].select_rows(&(start..start + n).collect::<Vec<_>>()))
    }
}

/// Procedural target samples standing in for real images, alternating
/// between `families`.
pub fn genuine_images(image: [usize; 3], families: &[ContentFamily], n: usize, seed: u64) -> Result<(Tensor<f32>, Vec<usize>)> {
    if families.is_empty() {
        return Err(Error::invalid("no content families"));
    }
    let mut rng = rng_for(seed, "genuine");
    let mut parts = Vec::new();
    let mut fams = Vec::new();
    for i in 0..n {
        let f = families[i % families.len()];
        parts.push(sample_batch::<f32, _>(f, image, 1, &mut rng));
        fams.push(f.index());
    }
    Ok((Tensor::concat(&parts)?, fams))
}

// ------------------------------------------------------------ parsing runs

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParseConfig {
    pub seed: u64,
    pub folds: usize,
    pub test_gms: usize,
    pub fen: FenConfig,
    pub compact_pn: bool,
    pub train: TrainConfig,
    /// Inverse-frequency class weights; `false` gives plain cross-entropy.
    pub class_weighting: bool,
    pub steps: usize,
    pub batch: usize,
    pub train_images_per_gm: usize,
    pub test_images_per_gm: usize,
    pub aggregate_images: usize,
    pub aggregate_repeats: usize,
    pub random_gt_repeats: usize,
    pub random_guess_draws: usize,
}

impl ParseConfig {
    pub fn desk(image: [usize; 3], seed: u64) -> Self {
        ParseConfig {
            seed,
            folds: 6,
            test_gms: 2,
            fen: FenConfig::compact(image[1], image[2], image[0]),
            compact_pn: true,
            train: TrainConfig::default(),
            class_weighting: true,
            steps: 300,
            batch: 32,
            train_images_per_gm: 64,
            test_images_per_gm: 32,
            aggregate_images: 10,
            aggregate_repeats: 10,
            random_gt_repeats: 3,
            random_guess_draws: 1_000_000,
        }
    }

    pub fn model(&self) -> Result<ParsingModel> {
        let input = self.fen.input_shape();
        let pn = Pn::new(if self.compact_pn { PnConfig::compact(input) } else { PnConfig::new(input) })?;
        ParsingModel::new(Fen::new(self.fen.clone())?, pn)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.train_images_per_gm == 0 || self.test_images_per_gm == 0 {
            return Err(Error::invalid("steps, batch and image counts must be positive"));
        }
        if self.aggregate_images == 0 || self.aggregate_images > self.test_images_per_gm {
            return Err(Error::invalid("aggregate_images must lie in 1..=test_images_per_gm"));
        }
        self.train.fingerprint.validate()
    }
}

/// Weights and normalization learned on one fold.
#[derive(Clone, Debug)]
pub struct TrainedParser {
    pub weights: ParsingWeights<f32>,
    pub stats: NormalizationStats,
    pub class_weights: ClassWeights,
    pub first: StepLosses,
    pub last: StepLosses,
}

/// Per-parameter shuffle of targets across GMs, preserving each parameter's
/// multiset of values. The loss flags move as one vector so each GM keeps a
/// consistent flag set. At least one GM's targets differ from the input.
pub fn shuffle_targets<R: Rng>(targets: &[(ArchitectureTargets, LossTargets)], rng: &mut R) -> Vec<(ArchitectureTargets, LossTargets)> {
    let n = targets.len();
    loop {
        let mut out = targets.to_vec();
        for j in 0..NUM_CONTINUOUS {
            let p = metrics::non_identity_permutation(n, rng);
            for (i, &src) in p.iter().enumerate() {
                out[i].0.continuous_raw[j] = targets[src].0.continuous_raw[j];
            }
        }
        for k in 0..NUM_DISCRETE {
            let p = metrics::non_identity_permutation(n, rng);
            for (i, &src) in p.iter().enumerate() {
                out[i].0.discrete[k] = targets[src].0.discrete[k];
            }
        }
        let p = metrics::non_identity_permutation(n, rng);
        for (i, &src) in p.iter().enumerate() {
            out[i].1 = targets[src].1.clone();
        }
        if n < 2 || out.iter().zip(targets).any(|(a, b)| a != b) {
            return out;
        }
    }
}

fn divergence(seed: u64, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { node } => Error::Divergence {
            component: node,
            step,
            seed,
        },
        e => e,
    }
}

/// Train FEN + PN on the training GMs' images against `targets` (indexed like
/// the manifest).
pub fn train_parser(
    data: &ZooData,
    train_ids: &[String],
    targets: &[(ArchitectureTargets, LossTargets)],
    config: &ParseConfig,
    seed: u64,
) -> Result<TrainedParser> {
    config.validate()?;
    let model = config.model()?;
    let gms: Vec<usize> = train_ids.iter().map(|id| data.index(id)).collect::<Result<_>>()?;
    let stats = NormalizationStats::from_targets(gms.iter().map(|&g| &targets[g].0))?;
    let per = config.train_images_per_gm;
    let images = Tensor::concat(&gms.iter().map(|&g| data.slice(g, 0, per)).collect::<Result<Vec<_>>>()?)?;
    let owner: Vec<usize> = gms.iter().flat_map(|&g| std::iter::repeat_n(g, per)).collect();
    let class_weights = if config.class_weighting {
        ClassWeights::from_training(owner.iter().map(|&g| (&targets[g].0, &targets[g].1)))?
    } else {
        ClassWeights::uniform()
    };
    let norm: Vec<[f64; NUM_CONTINUOUS]> = targets.iter().map(|t| stats.normalize(&t.0.continuous_raw)).collect();

    let mut weights = model.init::<f32>(seed);
    let mut opts = crate::parser::Optimizers::new(&config.train);
    let mut rng = rng_for(seed, "parse-batches");
    let mut order: Vec<usize> = (0..owner.len()).collect();
    let mut cursor = order.len();
    let (mut first, mut last) = (None, StepLosses::default());
    for step in 0..config.steps {
        let b = config.batch.min(order.len());
        if cursor + b > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + b];
        cursor += b;
        let batch = Batch {
            images: images.select_rows(idx),
            continuous: Tensor::new(vec![b, NUM_CONTINUOUS], idx.iter().flat_map(|&i| norm[owner[i]].map(|v| v as f32)).collect())?,
            discrete: idx.iter().map(|&i| targets[owner[i]].0.discrete).collect(),
            coarse: idx.iter().map(|&i| targets[owner[i]].1.coarse).collect(),
            fine: idx.iter().map(|&i| targets[owner[i]].1.fine).collect(),
        };
        last = model
            .train_step(&mut weights, &mut opts, &batch, &class_weights, &config.train)
            .map_err(divergence(seed, step))?;
        first.get_or_insert(last);
    }
    Ok(TrainedParser {
        weights,
        stats,
        class_weights,
        first: first.unwrap_or_default(),
        last,
    })
}

pub fn predict_all(model: &ParsingModel, weights: &ParsingWeights<f32>, images: &Tensor<f32>) -> Result<Vec<Prediction>> {
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(64) {
        let idx: Vec<usize> = (start..(start + 64).min(n)).collect();
        out.extend(model.predict(weights, &images.select_rows(&idx))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub samples: usize,
    pub l1: L1Report,
    pub discrete_f1: [f64; NUM_DISCRETE],
    pub discrete_f1_mean: f64,
    pub coarse_f1: [f64; NUM_COARSE],
    pub coarse_f1_mean: f64,
    pub fine_f1: [f64; NUM_FINE],
    pub fine_f1_mean: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Metrics of decisions against `(normalized continuous, targets)` pairs.
pub fn score_decisions(decisions: &[Decision], truth: &[([f64; NUM_CONTINUOUS], &ArchitectureTargets, &LossTargets)]) -> Result<EvalMetrics> {
    let pred: Vec<[f64; NUM_CONTINUOUS]> = decisions.iter().map(|d| d.continuous.map(|v| v.clamp(0.0, 1.0))).collect();
    let tgt: Vec<[f64; NUM_CONTINUOUS]> = truth.iter().map(|t| t.0).collect();
    let l1 = metrics::l1_error(&pred, &tgt)?;
    let discrete_f1: [f64; NUM_DISCRETE] = std::array::from_fn(|k| {
        let p: Vec<usize> = decisions.iter().map(|d| d.discrete[k]).collect();
        let t: Vec<usize> = truth.iter().map(|x| x.1.discrete[k]).collect();
        metrics::f1_score(&p, &t, DISCRETE_CARDINALITIES[k]).unwrap_or(f64::NAN)
    });
    let flag_f1 = |get_p: &dyn Fn(&Decision) -> bool, get_t: &dyn Fn(&LossTargets) -> bool| {
        let p: Vec<bool> = decisions.iter().map(get_p).collect();
        let t: Vec<bool> = truth.iter().map(|x| get_t(x.2)).collect();
        metrics::f1_flags(&p, &t).unwrap_or(f64::NAN)
    };
    let coarse_f1: [f64; NUM_COARSE] = std::array::from_fn(|m| flag_f1(&|d| d.coarse[m], &|l| l.coarse[m]));
    let fine_f1: [f64; NUM_FINE] = std::array::from_fn(|m| flag_f1(&|d| d.fine[m], &|l| l.fine[m]));
    Ok(EvalMetrics {
        samples: decisions.len(),
        l1,
        discrete_f1_mean: mean(&discrete_f1),
        discrete_f1,
        coarse_f1_mean: mean(&coarse_f1),
        coarse_f1,
        fine_f1_mean: mean(&fine_f1),
        fine_f1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test: Vec<String>,
    pub train_images: usize,
    pub first_step: StepLosses,
    pub last_step: StepLosses,
    pub single: EvalMetrics,
    pub aggregated: EvalMetrics,
    pub confusion: Vec<ConfusionMatrix>,
    /// Per classifier: every test image received the same class although the
    /// test GMs span several classes.
    pub collapsed: Vec<bool>,
    pub random_guess_l1: f64,
    pub random_guess_f1: f64,
}

/// Evaluate a trained parser on the fold's test GMs (true labels).
pub fn evaluate_fold(
    model: &ParsingModel,
    trained: &TrainedParser,
    data: &ZooData,
    fold: usize,
    test_ids: &[String],
    config: &ParseConfig,
) -> Result<FoldResult> {
    let per = config.test_images_per_gm;
    let start = |g: usize| data.available(g).saturating_sub(per);
    let gms: Vec<usize> = test_ids.iter().map(|id| data.index(id)).collect::<Result<_>>()?;
    let norm_of = |g: usize| trained.stats.normalize(&data.manifest.gms[g].architecture.continuous_raw);
    let mut decisions = Vec::new();
    let mut truth = Vec::new();
    let mut agg_decisions = Vec::new();
    let mut agg_truth = Vec::new();
    let mut rng = rng_for(derive_seed(config.seed, &format!("aggregate/{fold}")), "aggregate");
    for &g in &gms {
        let e = &data.manifest.gms[g];
        let images = data.slice(g, start(g), per)?;
        let preds: Vec<Decision> = predict_all(model, &trained.weights, &images)?.iter().map(Decision::from).collect();
        for _ in 0..config.aggregate_repeats {
            let mut pick = preds.clone();
            pick.shuffle(&mut rng);
            agg_decisions.push(metrics::aggregate_predictions(&pick, config.aggregate_images)?);
            agg_truth.push((norm_of(g), &e.architecture, &e.losses));
        }
        truth.extend(std::iter::repeat_n((norm_of(g), &e.architecture, &e.losses), preds.len()));
        decisions.extend(preds);
    }
    let single = score_decisions(&decisions, &truth)?;
    let aggregated = score_decisions(&agg_decisions, &agg_truth)?;
    let mut confusion = Vec::new();
    let mut collapsed = Vec::new();
    for k in 0..NUM_DISCRETE {
        let p: Vec<usize> = decisions.iter().map(|d| d.discrete[k]).collect();
        let t: Vec<usize> = truth.iter().map(|x| x.1.discrete[k]).collect();
        let m = metrics::confusion(&p, &t, DISCRETE_CARDINALITIES[k])?;
        let spans = m.truth_counts().iter().filter(|&&c| c > 0).count() > 1;
        collapsed.push(spans && m.collapsed());
        confusion.push(m);
    }
    let tgt: Vec<[f64; NUM_CONTINUOUS]> = truth.iter().map(|t| t.0).collect();
    let guess_seed = derive_seed(config.seed, &format!("random-guess/{fold}"));
    let random_guess_l1 = metrics::random_guess_l1(&tgt, config.random_guess_draws, guess_seed)?;
    let mut f1s = Vec::new();
    for k in 0..NUM_DISCRETE {
        let t: Vec<usize> = truth.iter().map(|x| x.1.discrete[k]).collect();
        let draws = (config.random_guess_draws / t.len().max(1)).clamp(1, 1000);
        f1s.push(metrics::random_guess_f1(&t, DISCRETE_CARDINALITIES[k], draws, derive_seed(guess_seed, DISCRETE_NAMES[k]))?);
    }
    Ok(FoldResult {
        fold,
        test: test_ids.to_vec(),
        train_images: 0,
        first_step: trained.first,
        last_step: trained.last,
        single,
        aggregated,
        confusion,
        collapsed,
        random_guess_l1,
        random_guess_f1: mean(&f1s),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Sample standard deviation (zero for a single value).
    pub fn of(v: &[f64]) -> Self {
        let n = v.len();
        let m = mean(v);
        let var = if n > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        MeanStd { mean: m, std: var.sqrt(), n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub l1: MeanStd,
    pub l1_per_parameter: Vec<(String, MeanStd)>,
    pub discrete_f1: MeanStd,
    pub discrete_f1_per_parameter: Vec<(String, MeanStd)>,
    pub coarse_f1: MeanStd,
    pub coarse_f1_per_type: Vec<(String, MeanStd)>,
    pub fine_f1: MeanStd,
    pub fine_f1_per_type: Vec<(String, MeanStd)>,
}

impl Summary {
    pub fn of(metrics: &[&EvalMetrics]) -> Self {
        let col = |f: &dyn Fn(&EvalMetrics) -> f64| MeanStd::of(&metrics.iter().map(|m| f(m)).collect::<Vec<_>>());
        Summary {
            l1: col(&|m| m.l1.mean),
            l1_per_parameter: (0..NUM_CONTINUOUS)
                .map(|j| (CONTINUOUS_NAMES[j].to_string(), col(&|m| m.l1.per_parameter[j])))
                .collect(),
            discrete_f1: col(&|m| m.discrete_f1_mean),
            discrete_f1_per_parameter: (0..NUM_DISCRETE)
                .map(|k| (DISCRETE_NAMES[k].to_string(), col(&|m| m.discrete_f1[k])))
                .collect(),
            coarse_f1: col(&|m| m.coarse_f1_mean),
            coarse_f1_per_type: (0..NUM_COARSE)
                .map(|k| (COARSE_NAMES[k].to_string(), col(&|m| m.coarse_f1[k])))
                .collect(),
            fine_f1: col(&|m| m.fine_f1_mean),
            fine_f1_per_type: (0..NUM_FINE).map(|k| (FINE_NAMES[k].to_string(), col(&|m| m.fine_f1[k]))).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub folds: Vec<FoldResult>,
    pub single: Summary,
    pub aggregated: Summary,
}

impl VariantReport {
    pub fn new(name: &str, folds: Vec<FoldResult>) -> Self {
        let single = Summary::of(&folds.iter().map(|f| &f.single).collect::<Vec<_>>());
        let aggregated = Summary::of(&folds.iter().map(|f| &f.aggregated).collect::<Vec<_>>());
        VariantReport {
            name: name.into(),
            folds,
            single,
            aggregated,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoFingerprint,
    Unweighted,
    RandomGroundTruth { repeat: usize },
}

impl Variant {
    pub fn name(self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::NoFingerprint => "no_fingerprint".into(),
            Variant::Unweighted => "unweighted_ce".into(),
            Variant::RandomGroundTruth { repeat } => format!("random_ground_truth_{repeat}"),
        }
    }

    pub fn apply(self, config: &ParseConfig) -> ParseConfig {
        let mut c = config.clone();
        match self {
            Variant::NoFingerprint => c.train.fingerprint = FingerprintLossWeights::zero(),
            Variant::Unweighted => c.class_weighting = false,
            _ => {}
        }
        c
    }
}

/// Targets used for training under `variant`: shuffled copies for the
/// random-ground-truth baseline (re-drawn until every fold keeps class coverage).
pub fn variant_targets(data: &ZooData, plan: &SplitPlan, config: &ParseConfig, variant: Variant) -> Result<Vec<(ArchitectureTargets, LossTargets)>> {
    let truth = data.true_targets();
    let Variant::RandomGroundTruth { repeat } = variant else {
        return Ok(truth);
    };
    let mut rng = rng_for(derive_seed(config.seed, &format!("shuffle/{repeat}")), "shuffle");
    for _ in 0..10_000 {
        let shuffled = shuffle_targets(&truth, &mut rng);
        let mut m = data.manifest.clone();
        for (g, t) in m.gms.iter_mut().zip(&shuffled) {
            g.architecture = t.0.clone();
            g.losses = t.1.clone();
        }
        if plan.folds.iter().all(|f| dataset::training_gaps(&m, &f.train).is_empty()) {
            return Ok(shuffled);
        }
    }
    Err(Error::Coverage("no label shuffle keeps class coverage in every training split".into()))
}

/// Train and evaluate one variant on the selected folds (all when `folds` is
/// `None`), optionally saving each fold's parser under `save_dir`.
pub fn run_variant_on(
    data: &ZooData,
    plan: &SplitPlan,
    config: &ParseConfig,
    variant: Variant,
    folds: Option<&[usize]>,
    save_dir: Option<&Path>,
    jobs: usize,
) -> Result<VariantReport> {
    let cfg = variant.apply(config);
    let targets = variant_targets(data, plan, &cfg, variant)?;
    let model = cfg.model()?;
    let folds: Vec<usize> = folds.map_or_else(|| (0..plan.folds.len()).collect(), <[usize]>::to_vec);
    if let Some(&k) = folds.iter().find(|&&k| k >= plan.folds.len()) {
        return Err(Error::invalid(format!("fold {k} out of range ({} folds)", plan.folds.len())));
    }
    let results = par_map(jobs, &folds, |&k| {
        let fold = &plan.folds[k];
        let seed = derive_seed(cfg.seed, &format!("parse/{}/{k}", variant.name()));
        let trained = train_parser(data, &fold.train, &targets, &cfg, seed)?;
        if let Some(dir) = save_dir {
            save_parser(dir, k, fold, &trained, &cfg, seed)?;
        }
        let mut r = evaluate_fold(&model, &trained, data, k, &fold.test, &cfg)?;
        r.train_images = fold.train.len() * cfg.train_images_per_gm;
        Ok(r)
    })?;
    Ok(VariantReport::new(&variant.name(), results))
}

pub fn run_variant(data: &ZooData, plan: &SplitPlan, config: &ParseConfig, variant: Variant, jobs: usize) -> Result<VariantReport> {
    run_variant_on(data, plan, config, variant, None, None, jobs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub name: String,
    pub l1: MeanStd,
    pub discrete_f1: MeanStd,
    pub coarse_f1: MeanStd,
    pub fine_f1: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ParseConfig,
    pub splits: SplitPlan,
    pub method: VariantReport,
    pub baselines: Vec<BaselineRow>,
    pub random_ground_truth: Vec<VariantReport>,
}

impl EvalReport {
    pub fn baseline(&self, name: &str) -> Option<&BaselineRow> {
        self.baselines.iter().find(|b| b.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Per-fold average over shuffle repeats, summarized across folds.
pub fn random_ground_truth_row(repeats: &[VariantReport]) -> Result<BaselineRow> {
    let Some(first) = repeats.first() else {
        return Err(Error::invalid("random ground truth needs at least one repeat"));
    };
    let per_fold = |f: &dyn Fn(&EvalMetrics) -> f64| {
        let v: Vec<f64> = (0..first.folds.len())
            .map(|k| mean(&repeats.iter().map(|r| f(&r.folds[k].single)).collect::<Vec<_>>()))
            .collect();
        MeanStd::of(&v)
    };
    Ok(BaselineRow {
        name: "random_ground_truth".into(),
        l1: per_fold(&|m| m.l1.mean),
        discrete_f1: per_fold(&|m| m.discrete_f1_mean),
        coarse_f1: per_fold(&|m| m.coarse_f1_mean),
        fine_f1: per_fold(&|m| m.fine_f1_mean),
    })
}

pub fn random_guess_row(method: &VariantReport) -> BaselineRow {
    let nan = MeanStd {
        mean: f64::NAN,
        std: f64::NAN,
        n: 0,
    };
    BaselineRow {
        name: "random_guess".into(),
        l1: MeanStd::of(&method.folds.iter().map(|f| f.random_guess_l1).collect::<Vec<_>>()),
        discrete_f1: MeanStd::of(&method.folds.iter().map(|f| f.random_guess_f1).collect::<Vec<_>>()),
        coarse_f1: nan,
        fine_f1: nan,
    }
}

/// The parsing evaluation: method, random-guess level and (optionally) the
/// shuffled-label baseline.
pub fn parse_report(data: &ZooData, config: &ParseConfig, with_random_gt: bool, jobs: usize) -> Result<EvalReport> {
    let plan = dataset::make_splits(&data.manifest, config.folds, config.test_gms, config.seed)?;
    let method = run_variant(data, &plan, config, Variant::Full, jobs)?;
    let mut baselines = vec![random_guess_row(&method)];
    let mut random_ground_truth = Vec::new();
    if with_random_gt {
        for repeat in 0..config.random_gt_repeats {
            random_ground_truth.push(run_variant(data, &plan, config, Variant::RandomGroundTruth { repeat }, jobs)?);
        }
        baselines.push(random_ground_truth_row(&random_ground_truth)?);
    }
    Ok(EvalReport {
        config: config.clone(),
        splits: plan,
        method,
        baselines,
        random_ground_truth,
    })
}

// -------------------------------------------------------- parser artifacts

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldArtifact {
    pub fold: usize,
    pub test: Vec<String>,
    pub train: Vec<String>,
    pub stats: NormalizationStats,
    pub fen: FenConfig,
    pub compact_pn: bool,
    pub checkpoint: PathBuf,
}

impl FoldArtifact {
    pub fn model(&self) -> Result<ParsingModel> {
        let input = self.fen.input_shape();
        let pn = Pn::new(if self.compact_pn { PnConfig::compact(input) } else { PnConfig::new(input) })?;
        ParsingModel::new(Fen::new(self.fen.clone())?, pn)
    }
}

pub fn save_parser(
    dir: &Path,
    fold: usize,
    f: &dataset::Fold,
    trained: &TrainedParser,
    cfg: &ParseConfig,
    seed: u64,
) -> Result<FoldArtifact> {
    fs::create_dir_all(dir)?;
    let ckpt = PathBuf::from(format!("fold{fold}.ckpt"));
    checkpoint::save(&dir.join(&ckpt), &trained.weights.merged(), &[], seed)?;
    let art = FoldArtifact {
        fold,
        test: f.test.clone(),
        train: f.train.clone(),
        stats: trained.stats.clone(),
        fen: cfg.fen.clone(),
        compact_pn: cfg.compact_pn,
        checkpoint: ckpt,
    };
    fs::write(dir.join(format!("fold{fold}.json")), serde_json::to_string_pretty(&art)? + "\n")?;
    Ok(art)
}

pub fn load_parser(dir: &Path, fold: usize) -> Result<(FoldArtifact, ParsingWeights<f32>)> {
    let meta = dir.join(format!("fold{fold}.json"));
    if !meta.exists() {
        return Err(Error::MissingFile(meta));
    }
    let art: FoldArtifact = serde_json::from_slice(&fs::read(&meta)?)?;
    let (store, _) = checkpoint::load::<f32>(&dir.join(&art.checkpoint))?;
    Ok((art, ParsingWeights::split(&store)))
}

// ---------------------------------------------------------------- heatmaps

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum HeatmapTarget {
    Continuous(usize),
    Discrete(usize),
    Coarse(usize),
    Fine(usize),
}

impl HeatmapTarget {
    pub fn parse(name: &str) -> Result<Self> {
        let find = |names: &[&str]| names.iter().position(|n| n.eq_ignore_ascii_case(name));
        find(&CONTINUOUS_NAMES)
            .map(HeatmapTarget::Continuous)
            .or_else(|| find(&DISCRETE_NAMES).map(HeatmapTarget::Discrete))
            .or_else(|| find(&COARSE_NAMES).map(HeatmapTarget::Coarse))
            .or_else(|| find(&FINE_NAMES).map(HeatmapTarget::Fine))
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    /// Per-image degradation: L1 error for continuous parameters, one minus
    /// the ground-truth probability otherwise.
    pub fn score(self, p: &Prediction, norm: &[f64; NUM_CONTINUOUS], arch: &ArchitectureTargets, losses: &LossTargets) -> f64 {
        let flag = |prob: f64, on: bool| 1.0 - if on { prob } else { 1.0 - prob };
        match self {
            HeatmapTarget::Continuous(j) => (p.continuous[j].clamp(0.0, 1.0) - norm[j]).abs(),
            HeatmapTarget::Discrete(k) => 1.0 - p.discrete_probs[k][arch.discrete[k]],
            HeatmapTarget::Coarse(m) => flag(p.coarse[m], losses.coarse[m]),
            HeatmapTarget::Fine(m) => flag(p.fine[m], losses.fine[m]),
        }
    }
}

/// Occlusion heatmap of a trained parser over `count` random images of the
/// given GMs, filled with the mean pixel of those images.
#[allow(clippy::too_many_arguments)]
pub fn parser_heatmap(
    model: &ParsingModel,
    weights: &ParsingWeights<f32>,
    stats: &NormalizationStats,
    data: &ZooData,
    gms: &[String],
    target: HeatmapTarget,
    patch: usize,
    count: usize,
    seed: u64,
) -> Result<metrics::Heatmap> {
    let mut pool = Vec::new();
    for id in gms {
        let g = data.index(id)?;
        pool.extend((0..data.available(g)).map(|i| (g, i)));
    }
    let mut rng = rng_for(seed, "heatmap");
    pool.shuffle(&mut rng);
    pool.truncate(count);
    if pool.is_empty() {
        return Err(Error::invalid("no images for the heatmap"));
    }
    let images = Tensor::concat(&pool.iter().map(|&(g, i)| data.slice(g, i, 1)).collect::<Result<Vec<_>>>()?)?;
    let fill = images.data().iter().map(|&v| v as f64).sum::<f64>() / images.numel() as f64;
    let owners: Vec<&GmEntry> = pool.iter().map(|&(g, _)| &data.manifest.gms[g]).collect();
    metrics::occlusion_heatmap(&images, patch, metrics::Fill::Value(fill as f32), |batch| {
        let preds = predict_all(model, weights, batch)?;
        Ok(preds
            .iter()
            .zip(&owners)
            .map(|(p, e)| target.score(p, &stats.normalize(&e.architecture.continuous_raw), &e.architecture, &e.losses))
            .collect())
    })
}

// --------------------------------------------------------------- similarity

/// Fingerprints of the first `per_gm` images of every GM under a FEN.
pub fn fingerprints(data: &ZooData, fen: &Fen, weights: &crate::nn::ParamStore<f32>, per_gm: usize) -> Result<Vec<Tensor<f32>>> {
    data.images
        .iter()
        .enumerate()
        .map(|(g, _)| {
            let n = per_gm.min(data.available(g));
            fingerprint::fen_forward(&data.slice(g, 0, n)?, fen, weights)
        })
        .collect()
}

pub fn similarity(data: &ZooData, fen: &Fen, weights: &crate::nn::ParamStore<f32>, per_gm: usize, pairs: usize, seed: u64) -> Result<SimilarityMatrix> {
    let fps = fingerprints(data, fen, weights, per_gm)?;
    let ids: Vec<String> = data.manifest.gms.iter().map(|g| g.id.clone()).collect();
    metrics::similarity_matrix(&ids, &fps, pairs, seed)
}

// ----------------------------------------------------- transfer applications

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepfakeReport {
    pub train_gms: Vec<String>,
    pub test_gms: Vec<String>,
    pub train_images: usize,
    pub test_images: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub auc: f64,
    pub untrained_auc: f64,
    pub scores: Vec<(String, f64, usize)>,
}

fn families(data: &ZooData) -> Vec<ContentFamily> {
    data.manifest
        .gms
        .iter()
        .map(|g| g.family)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Detector training and test sets: genuine samples (class 0) against the
/// first `images_per_gm` images of `train_gms` / `test_gms` (class 1). Also
/// returns a name per test image.
pub fn deepfake_data(
    data: &ZooData,
    train_gms: &[String],
    test_gms: &[String],
    images_per_gm: usize,
    seed: u64,
) -> Result<(LabeledImages, LabeledImages, Vec<String>)> {
    let image = data.manifest.image_shape;
    let fams = families(data);
    let take = |ids: &[String]| -> Result<Vec<Tensor<f32>>> {
        ids.iter()
            .map(|id| {
                let g = data.index(id)?;
                data.slice(g, 0, images_per_gm.min(data.available(g)))
            })
            .collect()
    };
    let train_fakes = take(train_gms)?;
    let n_fake: usize = train_fakes.iter().map(|t| t.shape()[0]).sum();
    let (genuine, _) = genuine_images(image, &fams, n_fake, derive_seed(seed, "genuine-train"))?;
    let test_fakes = take(test_gms)?;
    let n_test_fake: usize = test_fakes.iter().map(|t| t.shape()[0]).sum();
    let (genuine_test, _) = genuine_images(image, &fams, n_test_fake, derive_seed(seed, "genuine-test"))?;
    let mut names: Vec<String> = (0..n_test_fake).map(|i| format!("genuine/{i:04}")).collect();
    for (id, t) in test_gms.iter().zip(&test_fakes) {
        names.extend((0..t.shape()[0]).map(|i| format!("{id}/{i:04}")));
    }
    Ok((
        LabeledImages::genuine_vs(&genuine, &train_fakes, true)?,
        LabeledImages::genuine_vs(&genuine_test, &test_fakes, true)?,
        names,
    ))
}

/// Held-out AUC of a detector and the `(name, score, label)` rows.
pub fn deepfake_eval(
    model: &FingerprintClassifier,
    weights: &apps::ClassifierWeights<f32>,
    test: &LabeledImages,
    names: &[String],
) -> Result<(f64, Vec<(String, f64, usize)>)> {
    let scores = model.detect(weights, &test.images)?;
    let labels: Vec<bool> = test.labels.iter().map(|&l| l == 1).collect();
    let auc = metrics::auc(&scores, &labels)?;
    let rows = names.iter().cloned().zip(scores).zip(&test.labels).map(|((n, s), &l)| (n, s, l)).collect();
    Ok((auc, rows))
}

/// Genuine-vs-fake detector trained on `train_gms` and scored on fresh
/// genuine samples plus the unseen `test_gms`.
pub fn deepfake_experiment(
    data: &ZooData,
    train_gms: &[String],
    test_gms: &[String],
    fen: FenConfig,
    app: &AppTrainConfig,
    images_per_gm: usize,
) -> Result<(DeepfakeReport, FingerprintClassifier, apps::ClassifierWeights<f32>)> {
    let (train, test, names) = deepfake_data(data, train_gms, test_gms, images_per_gm, app.seed)?;
    let model = FingerprintClassifier::new(Fen::new(fen)?, ConvHead::detector(data.manifest.image_shape)?)?;
    let mut weights = model.init::<f32>(app.seed);
    let (untrained_auc, _) = deepfake_eval(&model, &weights, &test, &names)?;
    let log = apps::train_classifier(&model, &mut weights, &train, app)?;
    let (auc, scores) = deepfake_eval(&model, &weights, &test, &names)?;
    let report = DeepfakeReport {
        train_gms: train_gms.to_vec(),
        test_gms: test_gms.to_vec(),
        train_images: train.len(),
        test_images: test.len(),
        first_loss: log.first().map_or(f64::NAN, |l| l.total),
        last_loss: log.last().map_or(f64::NAN, |l| l.total),
        auc,
        untrained_auc,
        scores,
    };
    Ok((report, model, weights))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    /// Class 0 is genuine; class `i + 1` is `gms[i]`.
    pub gms: Vec<String>,
    pub train_images: usize,
    pub test_images: usize,
    pub accuracy: f64,
    pub untrained_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Attribution sets: class 0 genuine, class `i + 1` the images of `gms[i]`;
/// the test set uses each GM's images after the training ones.
pub fn attribution_data(
    data: &ZooData,
    gms: &[String],
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<(LabeledImages, LabeledImages)> {
    let image = data.manifest.image_shape;
    let fams = families(data);
    let mut train_sets = Vec::new();
    let mut test_sets = Vec::new();
    for id in gms {
        let g = data.index(id)?;
        train_sets.push(data.slice(g, 0, train_per_class)?);
        test_sets.push(data.slice(g, train_per_class, test_per_class)?);
    }
    let (genuine, _) = genuine_images(image, &fams, train_per_class, derive_seed(seed, "genuine-train"))?;
    let (genuine_test, _) = genuine_images(image, &fams, test_per_class, derive_seed(seed, "genuine-test"))?;
    Ok((
        LabeledImages::genuine_vs(&genuine, &train_sets, false)?,
        LabeledImages::genuine_vs(&genuine_test, &test_sets, false)?,
    ))
}

/// Accuracy and confusion matrix on a labeled test set.
pub fn attribution_eval(
    model: &FingerprintClassifier,
    weights: &apps::ClassifierWeights<f32>,
    test: &LabeledImages,
) -> Result<(f64, ConfusionMatrix)> {
    let pred: Vec<usize> = model.attribute(weights, &test.images)?.into_iter().map(|(c, _)| c).collect();
    Ok((apps::accuracy(&pred, &test.labels), metrics::confusion(&pred, &test.labels, model.head.classes)?))
}

/// Closed-set attribution over `gms` plus a genuine class, evaluated on
/// held-out images of the same GMs.
pub fn attribution_experiment(
    data: &ZooData,
    gms: &[String],
    fen: FenConfig,
    app: &AppTrainConfig,
    train_per_class: usize,
    test_per_class: usize,
) -> Result<(AttributionReport, FingerprintClassifier, apps::ClassifierWeights<f32>)> {
    let (train, test) = attribution_data(data, gms, train_per_class, test_per_class, app.seed)?;
    let model = FingerprintClassifier::new(Fen::new(fen)?, ConvHead::attribution(data.manifest.image_shape, gms.len())?)?;
    let mut weights = model.init::<f32>(app.seed);
    let (untrained_accuracy, _) = attribution_eval(&model, &weights, &test)?;
    apps::train_classifier(&model, &mut weights, &train, app)?;
    let (accuracy, confusion) = attribution_eval(&model, &weights, &test)?;
    let report = AttributionReport {
        gms: gms.to_vec(),
        train_images: train.len(),
        test_images: test.len(),
        accuracy,
        untrained_accuracy,
        confusion,
    };
    Ok((report, model, weights))
}

/// Content-family probe on fingerprints of a parsing-trained FEN: train on
/// the training GMs' images, test on the held-out GMs' images.
#[allow(clippy::too_many_arguments)]
pub fn content_probe_experiment(
    data: &ZooData,
    fen: &Fen,
    fen_weights: &crate::nn::ParamStore<f32>,
    train_gms: &[String],
    test_gms: &[String],
    images_per_gm: usize,
    steps: usize,
    seed: u64,
) -> Result<ProbeReport> {
    let collect = |ids: &[String]| -> Result<(Tensor<f32>, Vec<usize>)> {
        let mut fps = Vec::new();
        let mut labels = Vec::new();
        for id in ids {
            let g = data.index(id)?;
            let n = images_per_gm.min(data.available(g));
            fps.push(fingerprint::fen_forward(&data.slice(g, 0, n)?, fen, fen_weights)?);
            labels.extend(std::iter::repeat_n(data.manifest.gms[g].family.index(), n));
        }
        Ok((Tensor::concat(&fps)?, labels))
    };
    let (train_x, train_y) = collect(train_gms)?;
    let (test_x, test_y) = collect(test_gms)?;
    // compact class ids over the families present
    let present: Vec<usize> = train_y.iter().chain(&test_y).copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let remap = |v: &[usize]| -> Vec<usize> { v.iter().map(|l| present.iter().position(|p| p == l).unwrap_or(0)).collect() };
    apps::content_probe((&train_x, &remap(&train_y)), (&test_x, &remap(&test_y)), present.len().max(2), steps, seed)
}
