//! A zoo of small generators with exactly known hyperparameters.
//!
//! Each [`GmSpec`] fixes an architecture and a training-loss set. The
//! generator maps a latent vector through fully connected layers, optional
//! average pooling, convolution blocks (the first two upsample ×2) and an
//! output convolution. Ground truth is computed in closed form here and
//! cross-checked by a walk over the instantiated layers in [`generator`].

pub mod generator;
pub mod procedural;
pub mod train;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{
    class_names, ArchitectureTargets, BlockNonlinearity, LastNonlinearity, LossTargets, LossType, NormType,
    Upsampling, DISCRETE_CARDINALITIES, DISCRETE_NAMES, FINE_NAMES, NUM_DISCRETE, NUM_FINE,
};
use crate::rng::derive_seed;

pub use generator::{Generator, LayerDesc, LayerKind};
pub use procedural::ContentFamily;
pub use train::{sample_images, train_toy_gm, ToyGenerator, TrainLog};

/// Width of hidden fully connected layers in the generator.
pub const FC_HIDDEN: usize = 32;
/// Number of upsampling blocks; the block stack starts at a quarter of the output size.
pub const UPSAMPLING_BLOCKS: usize = 2;
pub const MIN_ZOO_SIZE: usize = 8;
pub const MAX_TRAIN_STEPS: usize = 5000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmSpec {
    pub id: String,
    pub family: ContentFamily,
    /// `[C, H, W]` of generated images.
    pub image: [usize; 3],
    pub latent_dim: usize,
    pub fc_layers: usize,
    /// Average-pooling layers after the fully connected stack; nonzero iff downsampling.
    pub pool_layers: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub norm: NormType,
    pub block_nonlinearity: BlockNonlinearity,
    pub last_nonlinearity: LastNonlinearity,
    pub upsampling: Upsampling,
    pub skip: bool,
    pub filters: usize,
    pub losses: Vec<LossType>,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl GmSpec {
    pub fn downsampling(&self) -> bool {
        self.pool_layers > 0
    }

    /// Spatial side of the first block's input.
    pub fn start_side(&self) -> usize {
        self.image[1] >> UPSAMPLING_BLOCKS
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image;
        let bad = |m: String| Err(Error::invalid(format!("{}: {m}", self.id)));
        if c == 0 || h != w || h % (1 << UPSAMPLING_BLOCKS) != 0 || h < 8 {
            return bad(format!("image {:?} must be square with side a multiple of 4 and >= 8", self.image));
        }
        if self.latent_dim == 0 || self.filters == 0 {
            return bad("latent_dim and filters must be positive".into());
        }
        if !(1..=2).contains(&self.fc_layers) {
            return bad(format!("fc_layers {} outside 1..=2", self.fc_layers));
        }
        if self.pool_layers > 2 {
            return bad(format!("pool_layers {} > 2", self.pool_layers));
        }
        if self.blocks < UPSAMPLING_BLOCKS || self.layers_per_block == 0 {
            return bad(format!("needs >= {UPSAMPLING_BLOCKS} blocks of >= 1 layer"));
        }
        if self.skip && self.layers_per_block < 2 {
            return bad("skip connections need >= 2 layers per block".into());
        }
        if self.losses.is_empty() {
            return bad("empty loss set".into());
        }
        if self.losses.contains(&LossType::Kl) && !self.losses.iter().any(|l| l.is_pixel()) {
            return bad("KL needs a pixel reconstruction loss alongside it".into());
        }
        if self.steps == 0 || self.steps > MAX_TRAIN_STEPS || !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("training budget {} steps at lr {}", self.steps, self.lr));
        }
        Ok(())
    }

    pub fn discrete_labels(&self) -> [usize; NUM_DISCRETE] {
        [
            self.norm.label(),
            self.block_nonlinearity.label(),
            self.last_nonlinearity.label(),
            self.upsampling.label(),
            self.skip as usize,
            self.downsampling() as usize,
        ]
    }
}

/// Closed-form ground truth; see [`generator::layer_walk_counts`] for the
/// independent count over the instantiated network.
pub fn ground_truth_vector(spec: &GmSpec) -> Result<(ArchitectureTargets, LossTargets)> {
    spec.validate()?;
    let [c, _, _] = spec.image;
    let f = spec.filters;
    let block_layers = spec.blocks * spec.layers_per_block;
    let fc_side = spec.start_side() << spec.pool_layers;
    let fc_out = f * fc_side * fc_side;
    let fc_params = if spec.fc_layers == 1 {
        spec.latent_dim * fc_out + fc_out
    } else {
        spec.latent_dim * FC_HIDDEN + FC_HIDDEN + FC_HIDDEN * fc_out + fc_out
    };
    let conv_params = block_layers * (9 * f * f + f) + 9 * f * c + c;
    let norm_layers = if spec.norm == NormType::None { 0 } else { block_layers };
    let norm_params = norm_layers * 2 * f;
    let continuous_raw = [
        (spec.fc_layers + block_layers + 1) as f64,
        (block_layers + 1) as f64,
        spec.fc_layers as f64,
        spec.pool_layers as f64,
        norm_layers as f64,
        (block_layers * f + c) as f64,
        (fc_params + conv_params + norm_params) as f64,
        spec.blocks as f64,
        spec.layers_per_block as f64,
    ];
    let arch = ArchitectureTargets {
        continuous_raw,
        discrete: spec.discrete_labels(),
    };
    Ok((arch, LossTargets::from_losses(&spec.losses)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZooConfig {
    pub seed: u64,
    pub specs: Vec<GmSpec>,
}

pub const DEFAULT_ZOO_SEED: u64 = 2021;

impl Default for ZooConfig {
    fn default() -> Self {
        Self::standard(DEFAULT_ZOO_SEED, [1, 16, 16])
    }
}

impl ZooConfig {
    /// The 12-model table: 6 blob and 6 stripe generators. Skip connections
    /// (10:2) and downsampling (8:4) are deliberately imbalanced.
    pub fn standard(seed: u64, image: [usize; 3]) -> Self {
        use BlockNonlinearity as B;
        use ContentFamily::{Blobs, Stripes};
        use LastNonlinearity as L;
        use LossType::*;
        use NormType as N;
        use Upsampling::{NearestConv as Near, Transposed as Tr};

        #[rustfmt::skip]
        let table: [(ContentFamily, usize, usize, usize, usize, NormType, BlockNonlinearity, LastNonlinearity, Upsampling, bool, usize, &[LossType]); 12] = [
            // family  fc pool blk lpb norm         block         last         up    skip   f  losses
            (Blobs,    1, 0,   2,  1,  N::None,     B::Relu,      L::Tanh,     Near, false, 4, &[L1]),
            (Blobs,    1, 1,   2,  2,  N::Batch,    B::LeakyRelu, L::Sigmoid,  Tr,   false, 6, &[L2, Adversarial]),
            (Blobs,    2, 0,   3,  2,  N::Instance, B::Tanh,      L::Linear,   Near, true,  8, &[Mse, Kl]),
            (Blobs,    1, 0,   2,  3,  N::Layer,    B::Sigmoid,   L::Relu,     Tr,   false, 4, &[Mmd]),
            (Blobs,    2, 2,   3,  1,  N::Batch,    B::Relu,      L::Tanh,     Tr,   false, 6, &[Wgan]),
            (Blobs,    1, 0,   4,  1,  N::None,     B::LeakyRelu, L::Sigmoid,  Near, false, 8, &[L1, Ce]),
            (Stripes,  1, 0,   2,  2,  N::Instance, B::LeakyRelu, L::Tanh,     Tr,   false, 4, &[Adversarial]),
            (Stripes,  2, 1,   2,  1,  N::Layer,    B::Tanh,      L::Sigmoid,  Near, false, 6, &[L2, Ce]),
            (Stripes,  1, 0,   3,  1,  N::None,     B::Sigmoid,   L::Linear,   Tr,   false, 8, &[Mse, Mmd]),
            (Stripes,  1, 0,   2,  2,  N::Batch,    B::Relu,      L::Relu,     Near, true,  6, &[L1, Wgan]),
            (Stripes,  2, 2,   3,  2,  N::Layer,    B::Tanh,      L::Tanh,     Tr,   false, 4, &[L2, Kl]),
            (Stripes,  1, 0,   2,  3,  N::Instance, B::Sigmoid,   L::Linear,   Near, false, 8, &[Ce]),
        ];
        let specs = table
            .iter()
            .enumerate()
            .map(|(i, &(family, fc, pool, blocks, lpb, norm, bnl, lnl, up, skip, f, losses))| {
                let id = format!("gm{i:02}");
                let adversarial = losses.iter().any(|l| matches!(l, Wgan | Adversarial));
                GmSpec {
                    seed: derive_seed(seed, &id),
                    id,
                    family,
                    image,
                    latent_dim: 8,
                    fc_layers: fc,
                    pool_layers: pool,
                    blocks,
                    layers_per_block: lpb,
                    norm,
                    block_nonlinearity: bnl,
                    last_nonlinearity: lnl,
                    upsampling: up,
                    skip,
                    filters: f,
                    losses: losses.to_vec(),
                    steps: 200,
                    lr: if adversarial { 1e-3 } else { 2e-3 },
                }
            })
            .collect();
        ZooConfig { seed, specs }
    }
}

/// Validate a zoo configuration and return its spec list.
pub fn build_zoo(config: &ZooConfig) -> Result<Vec<GmSpec>> {
    let specs = &config.specs;
    if specs.len() < MIN_ZOO_SIZE {
        return Err(Error::invalid(format!("zoo needs >= {MIN_ZOO_SIZE} specs, got {}", specs.len())));
    }
    let mut ids = BTreeSet::new();
    for s in specs {
        s.validate()?;
        if !ids.insert(&s.id) {
            return Err(Error::invalid(format!("duplicate GM id {}", s.id)));
        }
        if s.image != specs[0].image {
            return Err(Error::invalid(format!("{}: image shape differs from {}", s.id, specs[0].id)));
        }
    }
    let missing = coverage_gaps(specs, 2);
    if !missing.is_empty() {
        return Err(Error::Coverage(format!("classes with < 2 models: {}", missing.join(", "))));
    }
    Ok(specs.clone())
}

/// Discrete classes and fine-flag values (present/absent) held by fewer than
/// `min_count` of `specs`.
pub fn coverage_gaps(specs: &[GmSpec], min_count: usize) -> Vec<String> {
    let mut missing = Vec::new();
    for k in 0..NUM_DISCRETE {
        for c in 0..DISCRETE_CARDINALITIES[k] {
            let n = specs.iter().filter(|s| s.discrete_labels()[k] == c).count();
            if n < min_count {
                missing.push(format!("{}={}", DISCRETE_NAMES[k], class_names(k)[c]));
            }
        }
    }
    for m in 0..NUM_FINE {
        let on = specs.iter().filter(|s| s.losses.iter().any(|l| l.index() == m)).count();
        if on < min_count {
            missing.push(format!("loss {} present", FINE_NAMES[m]));
        }
        if specs.len() - on < min_count {
            missing.push(format!("loss {} absent", FINE_NAMES[m]));
        }
    }
    missing
}
