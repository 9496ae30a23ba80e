//! Command bodies and the serialized run configuration behind every output
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use gmparse::apps::{AppTrainConfig, ClassifierWeights, ConvHead, FingerprintClassifier};
use gmparse::autodiff::op_suite;
use gmparse::dataset::{self, make_splits};
use gmparse::experiment::{self as exp, HeatmapTarget, ParseConfig, Variant, VariantReport, ZooData};
use gmparse::fingerprint::{self, Fen, FenConfig};
use gmparse::labels::class_names;
use gmparse::nn::ParamStore;
use gmparse::parser::{ClassWeights, StepLosses};
use gmparse::zoo::ZooConfig;
use gmparse::{checkpoint, labels, spectral, Tensor};

pub const DEFAULT_SEED: u64 = 2021;
pub const SEED_ENV: &str = "GMPARSE_SEED";
/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// `--seed` if given, else `GMPARSE_SEED`, else the default.
pub fn master_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

// ------------------------------------------------------------------ configs

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZooBuildConfig {
    pub out: PathBuf,
    pub images_per_gm: usize,
    pub zoo: ZooConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParseTrainConfig {
    pub out: PathBuf,
    pub manifest: PathBuf,
    pub parse: ParseConfig,
    pub variant: Variant,
    /// Empty means every fold.
    pub folds: Vec<usize>,
    pub baselines: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParseEvalConfig {
    pub out: PathBuf,
    pub manifest: Option<PathBuf>,
    pub run: PathBuf,
    pub images_per_gm: usize,
    /// Fold whose parser predicts `images`.
    pub fold: usize,
    pub images: Vec<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub out: PathBuf,
    pub run: PathBuf,
    pub fold: usize,
    pub images: Vec<PathBuf>,
    pub spectrum: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RandomGtConfig {
    pub out: PathBuf,
    pub manifest: PathBuf,
    pub parse: ParseConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub out: PathBuf,
    pub manifest: PathBuf,
    pub run: PathBuf,
    pub fold: usize,
    pub pairs: usize,
    pub images_per_gm: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeepfakeTrainConfig {
    pub out: PathBuf,
    pub manifest: PathBuf,
    pub train_gms: Vec<String>,
    pub test_gms: Vec<String>,
    pub fen: FenConfig,
    pub app: AppTrainConfig,
    pub images_per_gm: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttributeTrainConfig {
    pub out: PathBuf,
    pub manifest: PathBuf,
    pub gms: Vec<String>,
    pub fen: FenConfig,
    pub app: AppTrainConfig,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppKind {
    Deepfake,
    Attribution,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AppEvalConfig {
    pub out: PathBuf,
    pub kind: AppKind,
    pub run: PathBuf,
    pub manifest: Option<PathBuf>,
    pub images: Vec<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeatmapConfig {
    pub out: PathBuf,
    pub manifest: PathBuf,
    pub run: PathBuf,
    pub fold: usize,
    pub parameter: String,
    pub patch: usize,
    pub count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub out: Option<PathBuf>,
    pub trials: usize,
    pub seed: u64,
}

/// Snapshot written as `config.json` into every run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    ZooBuild(ZooBuildConfig),
    ParseTrain(ParseTrainConfig),
    ParseEval(ParseEvalConfig),
    FingerprintExtract(ExtractConfig),
    BaselineRandomGt(RandomGtConfig),
    Similarity(SimilarityConfig),
    DeepfakeTrain(DeepfakeTrainConfig),
    AttributeTrain(AttributeTrainConfig),
    AppEval(AppEvalConfig),
    Heatmap(HeatmapConfig),
    Gradcheck(GradcheckConfig),
}

impl RunConfig {
    fn out(&self) -> Option<&Path> {
        Some(match self {
            RunConfig::ZooBuild(c) => &c.out,
            RunConfig::ParseTrain(c) => &c.out,
            RunConfig::ParseEval(c) => &c.out,
            RunConfig::FingerprintExtract(c) => &c.out,
            RunConfig::BaselineRandomGt(c) => &c.out,
            RunConfig::Similarity(c) => &c.out,
            RunConfig::DeepfakeTrain(c) => &c.out,
            RunConfig::AttributeTrain(c) => &c.out,
            RunConfig::AppEval(c) => &c.out,
            RunConfig::Heatmap(c) => &c.out,
            RunConfig::Gradcheck(c) => return c.out.as_deref(),
        })
    }

    fn set_out(&mut self, out: PathBuf) {
        match self {
            RunConfig::ZooBuild(c) => c.out = out,
            RunConfig::ParseTrain(c) => c.out = out,
            RunConfig::ParseEval(c) => c.out = out,
            RunConfig::FingerprintExtract(c) => c.out = out,
            RunConfig::BaselineRandomGt(c) => c.out = out,
            RunConfig::Similarity(c) => c.out = out,
            RunConfig::DeepfakeTrain(c) => c.out = out,
            RunConfig::AttributeTrain(c) => c.out = out,
            RunConfig::AppEval(c) => c.out = out,
            RunConfig::Heatmap(c) => c.out = out,
            RunConfig::Gradcheck(c) => c.out = Some(out),
        }
    }

    /// Load a snapshot and redirect its output.
    pub fn replay(path: &Path, out: PathBuf) -> Result<Self> {
        let mut c: RunConfig = read_json(path)?;
        c.set_out(out);
        Ok(c)
    }
}

/// Write `config.json` and run. Returns `false` when the command completed
/// but reported a failed check.
pub fn execute(config: &RunConfig, jobs: usize) -> Result<bool> {
    if let Some(out) = config.out() {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_json(&out.join("config.json"), config)?;
    }
    match config {
        RunConfig::ZooBuild(c) => zoo_build(c, jobs),
        RunConfig::ParseTrain(c) => parse_train(c, jobs),
        RunConfig::ParseEval(c) => parse_eval(c, jobs),
        RunConfig::FingerprintExtract(c) => extract(c),
        RunConfig::BaselineRandomGt(c) => random_gt(c, jobs),
        RunConfig::Similarity(c) => similarity(c),
        RunConfig::DeepfakeTrain(c) => deepfake_train(c),
        RunConfig::AttributeTrain(c) => attribute_train(c),
        RunConfig::AppEval(c) => app_eval(c),
        RunConfig::Heatmap(c) => heatmap(c),
        RunConfig::Gradcheck(c) => run_gradcheck(c),
    }
}

// --------------------------------------------------------------------- args

#[derive(Args, Debug)]
pub struct ZooBuildArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 128)]
    images_per_gm: usize,
    /// JSON zoo definition replacing the built-in 12-GM table.
    #[arg(long)]
    zoo_config: Option<PathBuf>,
    /// Override every GM's training steps.
    #[arg(long)]
    gm_steps: Option<usize>,
}

impl ZooBuildArgs {
    pub fn resolve(self) -> Result<RunConfig> {
        let seed = master_seed(self.seed)?;
        let mut zoo = match &self.zoo_config {
            Some(p) => read_json(p)?,
            None => ZooConfig::standard(seed, [1, 16, 16]),
        };
        if let Some(s) = self.gm_steps {
            zoo.specs.iter_mut().for_each(|spec| spec.steps = s);
        }
        Ok(RunConfig::ZooBuild(ZooBuildConfig {
            out: self.out,
            images_per_gm: self.images_per_gm,
            zoo,
        }))
    }
}

#[derive(Args, Debug)]
pub struct ParseArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON parse configuration (overrides the flags below).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 64)]
    train_images_per_gm: usize,
    #[arg(long, default_value_t = 32)]
    test_images_per_gm: usize,
    #[arg(long, default_value_t = 6)]
    folds: usize,
    #[arg(long, default_value_t = 2)]
    test_gms: usize,
    /// Use the full-width FEN and PN instead of the compact desk networks.
    #[arg(long)]
    full_size: bool,
}

impl ParseArgs {
    fn parse_config(&self) -> Result<ParseConfig> {
        if let Some(p) = &self.config {
            return read_json(p);
        }
        let image = dataset::read_manifest(&self.manifest)?.image_shape;
        let mut c = ParseConfig::desk(image, master_seed(self.seed)?);
        c.steps = self.steps;
        c.batch = self.batch;
        c.train_images_per_gm = self.train_images_per_gm;
        c.test_images_per_gm = self.test_images_per_gm;
        c.folds = self.folds;
        c.test_gms = self.test_gms;
        if self.full_size {
            c.fen = FenConfig {
                height: image[1],
                width: image[2],
                channels: image[0],
                ..FenConfig::default()
            };
            c.compact_pn = false;
        }
        c.aggregate_images = c.aggregate_images.min(c.test_images_per_gm);
        Ok(c)
    }
}

#[derive(Args, Debug)]
pub struct ParseTrainArgs {
    #[command(flatten)]
    common: ParseArgs,
    /// Train without the fingerprint constraints.
    #[arg(long)]
    no_fingerprint: bool,
    /// Plain cross-entropy instead of class-weighted.
    #[arg(long)]
    unweighted: bool,
    /// Only these folds (repeatable); default all.
    #[arg(long = "fold")]
    fold: Vec<usize>,
    /// Also run the shuffled-label baseline and include it in report.json.
    #[arg(long)]
    baselines: bool,
}

impl ParseTrainArgs {
    pub fn resolve(self) -> Result<RunConfig> {
        ensure!(!(self.no_fingerprint && self.unweighted), "--no-fingerprint and --unweighted are separate runs");
        let variant = if self.no_fingerprint {
            Variant::NoFingerprint
        } else if self.unweighted {
            Variant::Unweighted
        } else {
            Variant::Full
        };
        Ok(RunConfig::ParseTrain(ParseTrainConfig {
            parse: self.common.parse_config()?,
            out: self.common.out,
            manifest: self.common.manifest,
            variant,
            folds: self.fold,
            baselines: self.baselines,
        }))
    }
}

#[derive(Args, Debug)]
pub struct ParseEvalArgs {
    /// Re-evaluate every saved fold on its held-out GMs.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory written by `parse train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Images aggregated per prediction (mean / majority vote).
    #[arg(long, default_value_t = 1)]
    images_per_gm: usize,
    /// Fold whose parser predicts the given images.
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// PGM/PPM images to parse into predictions.json.
    images: Vec<PathBuf>,
}

impl ParseEvalArgs {
    pub fn resolve(self) -> Result<RunConfig> {
        ensure!(self.images_per_gm > 0, "--images-per-gm must be positive");
        ensure!(
            self.manifest.is_some() || !self.images.is_empty(),
            "give --manifest for held-out evaluation or image paths to parse"
        );
        Ok(RunConfig::ParseEval(ParseEvalConfig {
            out: self.out,
            manifest: self.manifest,
            run: self.run,
            images_per_gm: self.images_per_gm,
            fold: self.fold,
            images: self.images,
        }))
    }
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// A parse, deepfake or attribute training run.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write the log-magnitude spectrum as a PGM.
    #[arg(long)]
    spectrum: bool,
    /// PGM/PPM images.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

impl ExtractArgs {
    pub fn resolve(self) -> Result<RunConfig> {
        Ok(RunConfig::FingerprintExtract(ExtractConfig {
            out: self.out,
            run: self.run,
            fold: self.fold,
            images: self.images,
            spectrum: self.spectrum,
        }))
    }
}

#[derive(Args, Debug)]
pub struct RandomGtArgs {
    #[command(flatten)]
    common: ParseArgs,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

impl RandomGtArgs {
    pub fn resolve(self) -> Result<RunConfig> {
        ensure!(self.repeats > 0, "--repeats must be positive");
        let mut parse = self.common.parse_config()?;
        parse.random_gt_repeats = self.repeats;
        Ok(RunConfig::BaselineRandomGt(RandomGtConfig {
            out: self.common.out,
            manifest: self.common.manifest,
            parse,
        }))
    }
}

#[derive(Args, Debug)]
pub struct SimilarityArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pairs: usize,
    #[arg(long, default_value_t = 32)]
    images_per_gm: usize,
    #[arg(long)]
    seed: Option<u64>,
}

impl SimilarityArgs {
    pub fn resolve(self) -> Result<RunConfig> {
        Ok(RunConfig::Similarity(SimilarityConfig {
            seed: master_seed(self.seed)?,
            out: self.out,
            manifest: self.manifest,
            run: self.run,
            fold: self.fold,
            pairs: self.pairs,
            images_per_gm: self.images_per_gm,
        }))
    }
}

#[derive(Args, Debug)]
pub struct AppArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

impl AppArgs {
    fn app(&self) -> Result<AppTrainConfig> {
        Ok(AppTrainConfig {
            steps: self.steps,
            batch: self.batch,
            seed: master_seed(self.seed)?,
            ..AppTrainConfig::default()
        })
    }

    fn fen(&self, image: [usize; 3]) -> FenConfig {
        FenConfig::compact(image[1], image[2], image[0])
    }
}

#[derive(Args, Debug)]
pub struct DeepfakeTrainArgs {
    #[command(flatten)]
    common: AppArgs,
    /// Held-out GMs (comma separated); default the first leave-out fold.
    #[arg(long, value_delimiter = ',')]
    test_gms: Vec<String>,
    #[arg(long, default_value_t = 64)]
    images_per_gm: usize,
}

impl DeepfakeTrainArgs {
    pub fn resolve(self) -> Result<RunConfig> {
        let m = dataset::read_manifest(&self.common.manifest)?;
        let app = self.common.app()?;
        let test_gms = if self.test_gms.is_empty() {
            make_splits(&m, 1, 2, app.seed)?.folds[0].test.clone()
        } else {
            self.test_gms
        };
        for id in &test_gms {
            m.gm(id)?;
        }
        let train_gms = m.gms.iter().map(|g| g.id.clone()).filter(|id| !test_gms.contains(id)).collect();
        Ok(RunConfig::DeepfakeTrain(DeepfakeTrainConfig {
            fen: self.common.fen(m.image_shape),
            app,
            out: self.common.out,
            manifest: self.common.manifest,
            train_gms,
            test_gms,
            images_per_gm: self.images_per_gm,
        }))
    }
}

#[derive(Args, Debug)]
pub struct AttributeTrainArgs {
    #[command(flatten)]
    common: AppArgs,
    /// GMs of the closed set (comma separated); default two per content family.
    #[arg(long, value_delimiter = ',')]
    gms: Vec<String>,
    #[arg(long, default_value_t = 64)]
    train_per_class: usize,
    #[arg(long, default_value_t = 32)]
    test_per_class: usize,
}

/// Two GMs of every content family, in manifest order.
pub fn default_attribution_gms(m: &dataset::Manifest) -> Vec<String> {
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeMap::new();
    for g in &m.gms {
        let n = seen.entry(g.family).or_insert(0);
        if *n < 2 {
            out.push(g.id.clone());
            *n += 1;
        }
    }
    out
}

impl AttributeTrainArgs {
    pub fn resolve(self) -> Result<RunConfig> {
        let m = dataset::read_manifest(&self.common.manifest)?;
        let gms = if self.gms.is_empty() { default_attribution_gms(&m) } else { self.gms };
        ensure!(!gms.is_empty(), "attribution needs at least one GM");
        for id in &gms {
            m.gm(id)?;
        }
        Ok(RunConfig::AttributeTrain(AttributeTrainConfig {
            fen: self.common.fen(m.image_shape),
            app: self.common.app()?,
            out: self.common.out,
            manifest: self.common.manifest,
            gms,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
        }))
    }
}

#[derive(Args, Debug)]
pub struct AppEvalArgs {
    /// Directory written by the matching `train` command.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Re-run the held-out evaluation against this manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Score these PGM/PPM images instead.
    images: Vec<PathBuf>,
}

impl AppEvalArgs {
    pub fn resolve(self, kind: AppKind) -> Result<RunConfig> {
        ensure!(
            self.manifest.is_some() || !self.images.is_empty(),
            "give --manifest for held-out evaluation or image paths to score"
        );
        Ok(RunConfig::AppEval(AppEvalConfig {
            out: self.out,
            kind,
            run: self.run,
            manifest: self.manifest,
            images: self.images,
        }))
    }
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Parameter or loss-type name, e.g. `parameters`, `normalization`, `pixel`, `L1`.
    #[arg(long)]
    parameter: String,
    #[arg(long, default_value_t = 5)]
    patch: usize,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

impl HeatmapArgs {
    pub fn resolve(self) -> Result<RunConfig> {
        HeatmapTarget::parse(&self.parameter)?;
        Ok(RunConfig::Heatmap(HeatmapConfig {
            seed: master_seed(self.seed)?,
            out: self.out,
            manifest: self.manifest,
            run: self.run,
            fold: self.fold,
            parameter: self.parameter,
            patch: self.patch,
            count: self.count,
        }))
    }
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 3)]
    trials: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl GradcheckArgs {
    pub fn resolve(self) -> Result<RunConfig> {
        ensure!(self.trials > 0, "--trials must be positive");
        Ok(RunConfig::Gradcheck(GradcheckConfig {
            out: self.out,
            trials: self.trials,
            seed: master_seed(self.seed)?,
        }))
    }
}

// ----------------------------------------------------------------- commands

fn zoo_build(c: &ZooBuildConfig, jobs: usize) -> Result<bool> {
    let (manifest, summary) = exp::build_zoo_dataset(&c.out, &c.zoo, c.images_per_gm, jobs)?;
    write_json(&c.out.join("zoo_log.json"), &summary)?;
    println!("built {} GMs x {} images -> {}", manifest.gms.len(), c.images_per_gm, c.out.join("manifest.json").display());
    for (id, log) in &summary.logs {
        println!("  {id}: mse {:.4} -> {:.4}", log.initial_mse, log.final_mse);
    }
    Ok(true)
}

fn print_variant(r: &VariantReport) {
    let s = &r.single;
    println!(
        "{:<22} L1 {:.4} ± {:.4}   discrete F1 {:.4} ± {:.4}   coarse F1 {:.4}   fine F1 {:.4}",
        r.name, s.l1.mean, s.l1.std, s.discrete_f1.mean, s.discrete_f1.std, s.coarse_f1.mean, s.fine_f1.mean
    );
}

fn write_confusions(out: &Path, r: &VariantReport) -> Result<()> {
    for f in &r.folds {
        for (k, m) in f.confusion.iter().enumerate() {
            let path = out.join(format!("confusion_fold{}_{}.csv", f.fold, labels::DISCRETE_NAMES[k]));
            fs::write(path, m.to_csv(class_names(k)))?;
        }
    }
    Ok(())
}

fn parse_train(c: &ParseTrainConfig, jobs: usize) -> Result<bool> {
    let data = ZooData::load(&c.manifest, None)?;
    let plan = make_splits(&data.manifest, c.parse.folds, c.parse.test_gms, c.parse.seed)?;
    write_json(&c.out.join("splits.json"), &plan)?;
    let folds = (!c.folds.is_empty()).then_some(c.folds.as_slice());
    let method = exp::run_variant_on(&data, &plan, &c.parse, c.variant, folds, Some(&c.out), jobs)?;
    let mut baselines = vec![exp::random_guess_row(&method)];
    let mut shuffled = Vec::new();
    if c.baselines {
        for repeat in 0..c.parse.random_gt_repeats {
            let v = Variant::RandomGroundTruth { repeat };
            shuffled.push(exp::run_variant_on(&data, &plan, &c.parse, v, folds, None, jobs)?);
        }
        baselines.push(exp::random_ground_truth_row(&shuffled)?);
    }
    write_confusions(&c.out, &method)?;
    print_variant(&method);
    for b in &baselines {
        println!("{:<22} L1 {:.4}   discrete F1 {:.4}", b.name, b.l1.mean, b.discrete_f1.mean);
    }
    let report = exp::EvalReport {
        config: c.parse.clone(),
        splits: plan,
        method,
        baselines,
        random_ground_truth: shuffled,
    };
    fs::write(c.out.join("report.json"), report.to_json()?)?;
    Ok(true)
}

fn parse_run_config(run: &Path) -> Result<ParseTrainConfig> {
    match read_json::<RunConfig>(&run.join("config.json"))? {
        RunConfig::ParseTrain(c) => Ok(c),
        _ => bail!("{} is not a `parse train` run", run.display()),
    }
}

fn parse_eval(c: &ParseEvalConfig, jobs: usize) -> Result<bool> {
    if !c.images.is_empty() {
        parse_images(c)?;
    }
    let Some(manifest) = &c.manifest else { return Ok(true) };
    let train = parse_run_config(&c.run)?;
    let mut cfg = train.parse.clone();
    cfg.aggregate_images = c.images_per_gm;
    cfg.test_images_per_gm = cfg.test_images_per_gm.max(c.images_per_gm);
    let data = ZooData::load(manifest, None)?;
    let model = cfg.model()?;
    let folds: Vec<usize> = (0..cfg.folds).filter(|k| c.run.join(format!("fold{k}.json")).exists()).collect();
    ensure!(!folds.is_empty(), "no fold checkpoints in {}", c.run.display());
    let results = exp::par_map(jobs, &folds, |&k| {
        let (art, weights) = exp::load_parser(&c.run, k)?;
        let trained = exp::TrainedParser {
            weights,
            stats: art.stats,
            class_weights: ClassWeights::uniform(),
            first: StepLosses::default(),
            last: StepLosses::default(),
        };
        exp::evaluate_fold(&model, &trained, &data, k, &art.test, &cfg)
    })?;
    let report = VariantReport::new(&format!("{}@{}", train.variant.name(), c.images_per_gm), results);
    write_confusions(&c.out, &report)?;
    let shown = if c.images_per_gm > 1 { &report.aggregated } else { &report.single };
    println!(
        "{} images per prediction: L1 {:.4} ± {:.4}   discrete F1 {:.4} ± {:.4}   fine F1 {:.4}",
        c.images_per_gm, shown.l1.mean, shown.l1.std, shown.discrete_f1.mean, shown.discrete_f1.std, shown.fine_f1.mean
    );
    write_json(&c.out.join("report.json"), &report)?;
    Ok(true)
}

/// One record of `predictions.json`.
#[derive(Serialize)]
struct PredictionRecord {
    /// Normalized to the training range.
    continuous: indexmap::IndexMap<&'static str, f64>,
    continuous_raw: indexmap::IndexMap<&'static str, f64>,
    discrete: indexmap::IndexMap<&'static str, &'static str>,
    coarse: indexmap::IndexMap<&'static str, f64>,
    fine: indexmap::IndexMap<&'static str, f64>,
}

fn parse_images(c: &ParseEvalConfig) -> Result<()> {
    let (art, weights) = exp::load_parser(&c.run, c.fold)?;
    let model = art.model()?;
    let mut records = indexmap::IndexMap::new();
    for path in &c.images {
        let img = dataset::read_image(path)?;
        let s = img.shape().to_vec();
        let p = model
            .predict(&weights, &img.reshape(&[1, s[0], s[1], s[2]])?)
            .with_context(|| format!("parsing {}", path.display()))?
            .remove(0);
        let norm = p.continuous.map(|v| v.clamp(0.0, 1.0));
        let raw = art.stats.denormalize(&norm);
        let named = |names: &[&'static str], v: &[f64]| names.iter().copied().zip(v.iter().copied()).collect();
        let rec = PredictionRecord {
            continuous: named(&labels::CONTINUOUS_NAMES, &norm),
            continuous_raw: named(&labels::CONTINUOUS_NAMES, &raw),
            discrete: (0..labels::NUM_DISCRETE)
                .map(|k| (labels::DISCRETE_NAMES[k], class_names(k)[p.discrete[k]]))
                .collect(),
            coarse: named(&labels::COARSE_NAMES, &p.coarse),
            fine: named(&labels::FINE_NAMES, &p.fine),
        };
        println!("{}: {:?}", path.display(), rec.discrete);
        records.insert(path.display().to_string(), rec);
    }
    write_json(&c.out.join("predictions.json"), &records)
}

/// The FEN of any training run.
fn load_fen(run: &Path, fold: usize) -> Result<(Fen, ParamStore<f32>)> {
    match read_json::<RunConfig>(&run.join("config.json"))? {
        RunConfig::ParseTrain(c) => {
            let (_, w) = exp::load_parser(run, fold)?;
            Ok((Fen::new(c.parse.fen)?, w.fen))
        }
        RunConfig::DeepfakeTrain(DeepfakeTrainConfig { fen, .. }) | RunConfig::AttributeTrain(AttributeTrainConfig { fen, .. }) => {
            let (store, _) = checkpoint::load::<f32>(&run.join("model.ckpt"))?;
            Ok((Fen::new(fen)?, ClassifierWeights::split(&store).fen))
        }
        _ => bail!("{} holds no trained FEN", run.display()),
    }
}

fn extract(c: &ExtractConfig) -> Result<bool> {
    #[derive(Serialize)]
    struct Sidecar<'a> {
        source: &'a Path,
        shape: [usize; 3],
        dtype: &'static str,
        layout: &'static str,
        byte_order: &'static str,
    }
    let (fen, weights) = load_fen(&c.run, c.fold)?;
    for path in &c.images {
        let img = dataset::read_image(path)?;
        let s = img.shape().to_vec();
        ensure!(
            s[..] == fen.config.input_shape()[..],
            "{} is {s:?}, the FEN expects {:?}",
            path.display(),
            fen.config.input_shape()
        );
        let f = fingerprint::fen_forward(&img.reshape(&[1, s[0], s[1], s[2]])?, &fen, &weights)?;
        let stem = path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        let bytes: Vec<u8> = f.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(c.out.join(format!("{stem}.f32")), bytes)?;
        write_json(
            &c.out.join(format!("{stem}.json")),
            &Sidecar {
                source: path,
                shape: [s[0], s[1], s[2]],
                dtype: "f32",
                layout: "row-major",
                byte_order: "little",
            },
        )?;
        if c.spectrum {
            let (h, w) = (s[1], s[2]);
            let ch0 = Tensor::new(vec![h, w], f.data()[..h * w].iter().map(|&v| v as f64).collect())?;
            let mag = spectral::spectrum_magnitude_image(&spectral::dft2(&ch0)?, true);
            dataset::write_normalized_pgm(&c.out.join(format!("{stem}.spectrum.pgm")), h, w, mag.data())?;
        }
        println!("{} -> {stem}.f32", path.display());
    }
    Ok(true)
}

fn random_gt(c: &RandomGtConfig, jobs: usize) -> Result<bool> {
    let data = ZooData::load(&c.manifest, None)?;
    let plan = make_splits(&data.manifest, c.parse.folds, c.parse.test_gms, c.parse.seed)?;
    let repeats = (0..c.parse.random_gt_repeats)
        .map(|repeat| exp::run_variant(&data, &plan, &c.parse, Variant::RandomGroundTruth { repeat }, jobs))
        .collect::<gmparse::Result<Vec<_>>>()?;
    let row = exp::random_ground_truth_row(&repeats)?;
    println!(
        "random ground truth ({} shuffles): L1 {:.4} ± {:.4}   discrete F1 {:.4} ± {:.4}",
        repeats.len(),
        row.l1.mean,
        row.l1.std,
        row.discrete_f1.mean,
        row.discrete_f1.std
    );
    #[derive(Serialize)]
    struct Out<'a> {
        row: &'a exp::BaselineRow,
        repeats: &'a [VariantReport],
    }
    write_json(&c.out.join("report.json"), &Out { row: &row, repeats: &repeats })?;
    Ok(true)
}

fn similarity(c: &SimilarityConfig) -> Result<bool> {
    let data = ZooData::load(&c.manifest, None)?;
    let (fen, weights) = load_fen(&c.run, c.fold)?;
    let m = exp::similarity(&data, &fen, &weights, c.images_per_gm, c.pairs, c.seed)?;
    if m.skipped_pairs > 0 {
        eprintln!("warning: {} zero-norm fingerprint pairs skipped", m.skipped_pairs);
    }
    fs::write(c.out.join("similarity.csv"), m.to_csv())?;
    write_json(&c.out.join("similarity.json"), &m)?;
    println!(
        "mean diagonal {:.4}   mean off-diagonal {:.4}",
        m.diagonal_mean(),
        m.off_diagonal_mean()
    );
    Ok(true)
}


fn app_model(kind: AppKind, fen: &FenConfig, classes: usize) -> Result<FingerprintClassifier> {
    let input = fen.input_shape();
    let head = match kind {
        AppKind::Deepfake => ConvHead::detector(input)?,
        AppKind::Attribution => ConvHead::attribution(input, classes - 1)?,
    };
    Ok(FingerprintClassifier::new(Fen::new(fen.clone())?, head)?)
}

fn deepfake_train(c: &DeepfakeTrainConfig) -> Result<bool> {
    let data = ZooData::load(&c.manifest, None)?;
    let (report, _, weights) = exp::deepfake_experiment(&data, &c.train_gms, &c.test_gms, c.fen.clone(), &c.app, c.images_per_gm)?;
    checkpoint::save(&c.out.join("model.ckpt"), &weights.merged(), &[], c.app.seed)?;
    fs::write(c.out.join("scores.csv"), gmparse::apps::scores_csv(&report.scores))?;
    write_json(&c.out.join("report.json"), &report)?;
    println!(
        "held-out AUC {:.4} (untrained {:.4}); loss {:.4} -> {:.4}",
        report.auc, report.untrained_auc, report.first_loss, report.last_loss
    );
    Ok(true)
}

fn attribute_train(c: &AttributeTrainConfig) -> Result<bool> {
    let data = ZooData::load(&c.manifest, None)?;
    let (report, _, weights) =
        exp::attribution_experiment(&data, &c.gms, c.fen.clone(), &c.app, c.train_per_class, c.test_per_class)?;
    checkpoint::save(&c.out.join("model.ckpt"), &weights.merged(), &[], c.app.seed)?;
    write_json(&c.out.join("report.json"), &report)?;
    fs::write(c.out.join("confusion.csv"), report.confusion.to_csv(&attribution_names(&c.gms)))?;
    println!("held-out accuracy {:.4} (untrained {:.4})", report.accuracy, report.untrained_accuracy);
    Ok(true)
}

fn attribution_names(gms: &[String]) -> Vec<&str> {
    std::iter::once("genuine").chain(gms.iter().map(String::as_str)).collect()
}

fn app_eval(c: &AppEvalConfig) -> Result<bool> {
    let (model, weights, run) = match (c.kind, read_json::<RunConfig>(&c.run.join("config.json"))?) {
        (AppKind::Deepfake, RunConfig::DeepfakeTrain(r)) => (app_model(c.kind, &r.fen, 2)?, load_app(&c.run)?, RunConfig::DeepfakeTrain(r)),
        (AppKind::Attribution, RunConfig::AttributeTrain(r)) => {
            (app_model(c.kind, &r.fen, r.gms.len() + 1)?, load_app(&c.run)?, RunConfig::AttributeTrain(r))
        }
        _ => bail!("{} is not a matching training run", c.run.display()),
    };
    if !c.images.is_empty() {
        let imgs = c.images.iter().map(|p| dataset::read_image(p)).collect::<gmparse::Result<Vec<_>>>()?;
        let batch = Tensor::stack(&imgs)?;
        let probs = model.probabilities(&weights, &batch)?;
        let mut csv = String::from("path,class,probabilities\n");
        for (p, row) in c.images.iter().zip(&probs) {
            let class = gmparse::parser::argmax(row);
            let joined = row.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(";");
            csv.push_str(&format!("{},{class},{joined}\n", p.display()));
            println!("{}: class {class} (p = {:.4})", p.display(), row[class]);
        }
        fs::write(c.out.join("predictions.csv"), csv)?;
    }
    if let Some(manifest) = &c.manifest {
        let data = ZooData::load(manifest, None)?;
        match run {
            RunConfig::DeepfakeTrain(r) => {
                let (_, test, names) = exp::deepfake_data(&data, &r.train_gms, &r.test_gms, r.images_per_gm, r.app.seed)?;
                let (auc, rows) = exp::deepfake_eval(&model, &weights, &test, &names)?;
                fs::write(c.out.join("scores.csv"), gmparse::apps::scores_csv(&rows))?;
                write_json(&c.out.join("report.json"), &serde_json::json!({ "auc": auc, "test_images": test.len() }))?;
                println!("held-out AUC {auc:.4}");
            }
            RunConfig::AttributeTrain(r) => {
                let (_, test) = exp::attribution_data(&data, &r.gms, r.train_per_class, r.test_per_class, r.app.seed)?;
                let (acc, confusion) = exp::attribution_eval(&model, &weights, &test)?;
                fs::write(c.out.join("confusion.csv"), confusion.to_csv(&attribution_names(&r.gms)))?;
                write_json(&c.out.join("report.json"), &serde_json::json!({ "accuracy": acc, "test_images": test.len() }))?;
                println!("held-out accuracy {acc:.4}");
            }
            _ => unreachable!(),
        }
    }
    Ok(true)
}

fn load_app(run: &Path) -> Result<ClassifierWeights<f32>> {
    let (store, _) = checkpoint::load::<f32>(&run.join("model.ckpt"))?;
    Ok(ClassifierWeights::split(&store))
}

fn heatmap(c: &HeatmapConfig) -> Result<bool> {
    let train = parse_run_config(&c.run)?;
    let model = train.parse.model()?;
    let (art, weights) = exp::load_parser(&c.run, c.fold)?;
    let data = ZooData::load(&c.manifest, None)?;
    let target = HeatmapTarget::parse(&c.parameter)?;
    let h = exp::parser_heatmap(&model, &weights, &art.stats, &data, &art.test, target, c.patch, c.count, c.seed)?;
    fs::write(c.out.join("heatmap.csv"), h.to_csv())?;
    dataset::write_normalized_pgm(&c.out.join("heatmap.pgm"), h.height, h.width, &h.values)?;
    write_json(&c.out.join("heatmap.json"), &h)?;
    let max = h.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("{}: baseline {:.4}, worst occlusion {:.4}", c.parameter, h.baseline, max);
    Ok(true)
}

fn run_gradcheck(c: &GradcheckConfig) -> Result<bool> {
    let mut rows = op_suite(c.trials, c.seed)?;
    rows.extend(fingerprint::loss_gradient_suite(c.trials, c.seed)?);
    let mut ok = true;
    for r in &rows {
        let pass = r.max_rel_error < GRADCHECK_TOLERANCE;
        ok &= pass;
        println!("{:<24} {:.3e}  {}", r.name, r.max_rel_error, if pass { "ok" } else { "FAIL" });
    }
    if let Some(out) = &c.out {
        let json: Vec<_> = rows
            .iter()
            .map(|r| serde_json::json!({ "op": r.name, "max_rel_error": r.max_rel_error, "trials": r.trials }))
            .collect();
        write_json(&out.join("gradcheck.json"), &json)?;
    }
    Ok(ok)
}
