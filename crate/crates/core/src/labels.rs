//! Ground-truth schema: nine continuous architecture counts, six discrete
//! architecture classifiers and the eight training-loss types with their three
//! coarse groups. The zoo owns the class dictionaries defined here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CONTINUOUS: usize = 9;
pub const NUM_DISCRETE: usize = 6;
pub const NUM_FINE: usize = 8;
pub const NUM_COARSE: usize = 3;

pub const CONTINUOUS_NAMES: [&str; NUM_CONTINUOUS] = [
    "layers",
    "conv_layers",
    "fc_layers",
    "pooling_layers",
    "norm_layers",
    "filters",
    "parameters",
    "blocks",
    "layers_per_block",
];

pub const DISCRETE_NAMES: [&str; NUM_DISCRETE] = [
    "normalization",
    "block_nonlinearity",
    "last_nonlinearity",
    "upsampling",
    "skip_connection",
    "downsampling",
];

pub const DISCRETE_CARDINALITIES: [usize; NUM_DISCRETE] = [4, 4, 4, 2, 2, 2];

pub const FINE_NAMES: [&str; NUM_FINE] = ["L1", "L2", "MSE", "MMD", "WGAN", "KL", "Adversarial", "CE"];
pub const COARSE_NAMES: [&str; NUM_COARSE] = ["pixel", "discriminator", "classification"];

/// Coarse group of each fine loss type.
pub const FINE_GROUP: [usize; NUM_FINE] = [0, 0, 0, 0, 1, 1, 1, 2];

/// Class names per discrete classifier, in label order.
pub fn class_names(classifier: usize) -> &'static [&'static str] {
    match classifier {
        0 => &["none", "batch", "instance", "layer"],
        1 => &["relu", "leaky_relu", "tanh", "sigmoid"],
        2 => &["tanh", "sigmoid", "linear", "relu"],
        3 => &["nearest_conv", "transposed_conv"],
        4 => &["no_skip", "skip"],
        _ => &["no_downsampling", "downsampling"],
    }
}

macro_rules! label_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident = $label:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn label(self) -> usize {
                match self { $($name::$variant => $label),+ }
            }

            pub fn from_label(label: usize) -> Result<Self> {
                Self::ALL
                    .get(label)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("{} label {label} out of range", stringify!($name))))
            }
        }
    };
}

label_enum!(NormType { None = 0, Batch = 1, Instance = 2, Layer = 3 });
label_enum!(BlockNonlinearity { Relu = 0, LeakyRelu = 1, Tanh = 2, Sigmoid = 3 });
label_enum!(
    /// Output-layer nonlinearity; all but `Linear` are rescaled to [-1, 1].
    LastNonlinearity { Tanh = 0, Sigmoid = 1, Linear = 2, Relu = 3 }
);
label_enum!(Upsampling { NearestConv = 0, Transposed = 1 });
label_enum!(LossType { L1 = 0, L2 = 1, Mse = 2, Mmd = 3, Wgan = 4, Kl = 5, Adversarial = 6, Ce = 7 });

impl LossType {
    pub fn index(self) -> usize {
        self.label()
    }

    pub fn name(self) -> &'static str {
        FINE_NAMES[self.index()]
    }

    pub fn group(self) -> usize {
        FINE_GROUP[self.index()]
    }

    pub fn is_pixel(self) -> bool {
        self.group() == 0 && self != LossType::Mmd
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureTargets {
    pub continuous_raw: [f64; NUM_CONTINUOUS],
    pub discrete: [usize; NUM_DISCRETE],
}

impl ArchitectureTargets {
    pub fn validate(&self) -> Result<()> {
        for (k, (&l, &m)) in self.discrete.iter().zip(&DISCRETE_CARDINALITIES).enumerate() {
            if l >= m {
                return Err(Error::invalid(format!("{} label {l} >= cardinality {m}", DISCRETE_NAMES[k])));
            }
        }
        if self.continuous_raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite continuous target"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTargets {
    pub fine: [bool; NUM_FINE],
    pub coarse: [bool; NUM_COARSE],
}

impl LossTargets {
    /// Coarse flags are the OR of each group's fine flags.
    pub fn from_fine(fine: [bool; NUM_FINE]) -> Result<Self> {
        if !fine.iter().any(|&f| f) {
            return Err(Error::invalid("a model needs at least one loss type"));
        }
        let mut coarse = [false; NUM_COARSE];
        for (m, &f) in fine.iter().enumerate() {
            coarse[FINE_GROUP[m]] |= f;
        }
        Ok(LossTargets { fine, coarse })
    }

    pub fn from_losses(losses: &[LossType]) -> Result<Self> {
        let mut fine = [false; NUM_FINE];
        for l in losses {
            fine[l.index()] = true;
        }
        Self::from_fine(fine)
    }

    pub fn validate(&self) -> Result<()> {
        let derived = Self::from_fine(self.fine)?;
        if derived.coarse != self.coarse {
            return Err(Error::invalid("coarse flags disagree with the group-OR of fine flags"));
        }
        Ok(())
    }

    pub fn losses(&self) -> Vec<LossType> {
        LossType::ALL.iter().copied().filter(|l| self.fine[l.index()]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_or() {
        let t = LossTargets::from_losses(&[LossType::L2, LossType::Adversarial]).unwrap();
        assert_eq!(t.fine, [false, true, false, false, false, false, true, false]);
        assert_eq!(t.coarse, [true, true, false]);
        assert!(LossTargets::from_fine([false; 8]).is_err());
    }

    #[test]
    fn dictionaries_match_cardinalities() {
        for (k, &m) in DISCRETE_CARDINALITIES.iter().enumerate() {
            assert_eq!(class_names(k).len(), m);
        }
        assert_eq!(NormType::ALL.len(), 4);
        assert_eq!(Upsampling::from_label(1).unwrap(), Upsampling::Transposed);
        assert!(Upsampling::from_label(2).is_err());
    }
}
