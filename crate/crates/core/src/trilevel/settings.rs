use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{CodeMode, Head};

/// Form of the Siamese (stage-one) loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    /// `−[A·log f + (1 − A)·log(1 − f)]`
    Bce,
    /// `−A·log f` only. Minimized by `f → 1` wherever `A > 0`.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictMode {
    /// Every training example is a candidate.
    Soft,
    /// Only the `k` examples with the highest Siamese probability.
    TopK(usize),
}

/// Which similarity functions run on binary codes instead of cosines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Lbe,
    FastT,
    FastS,
    FastTS,
}

impl Variant {
    pub fn hashes_siamese(self) -> bool {
        matches!(self, Variant::FastT | Variant::FastTS)
    }

    pub fn hashes_matching(self) -> bool {
        matches!(self, Variant::FastS | Variant::FastTS)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lbe => "lbe",
            Variant::FastT => "fast-T",
            Variant::FastS => "fast-S",
            Variant::FastTS => "fast-TS",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "lbe" => Variant::Lbe,
            "fast-T" => Variant::FastT,
            "fast-S" => Variant::FastS,
            "fast-TS" => Variant::FastTS,
            _ => return Err(Error::Config(format!("unknown variant {s:?}"))),
        })
    }
}

/// How the virtual-step learning rates `ξ_T`, `ξ_S` are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum XiPolicy {
    /// Follow the current scheduled learning rate of each network.
    Scheduled,
    Fixed {
        t: f64,
        s: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimInit {
    /// All logits zero.
    Uniform,
    /// Logits `±2` from label agreement.
    Labels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
}

/// Everything [`train_lbe`](super::train_lbe) needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbeConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub tau: f64,
    pub gumbel_temp: f64,
    pub code_bits: usize,
    pub variant: Variant,
    pub tie_weights: bool,
    pub loss_mode: LossMode,
    pub predict_mode: PredictMode,
    pub allow_self_match: bool,
    /// Hard codes with straight-through gradients during training instead of
    /// the relaxed bits.
    pub straight_through: bool,
    /// Sample codes at evaluation time instead of thresholding at 0.5.
    pub stochastic_eval: bool,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a lower validation loss; 0 disables.
    pub patience: usize,
    pub opt_t: SgdConfig,
    pub opt_s: SgdConfig,
    pub opt_a: AdamConfig,
    pub xi: XiPolicy,
    pub sim_init: SimInit,
    /// Keep `A` at its initial value (skips the hypergradient).
    pub freeze_a: bool,
    pub seed: u64,
}

impl Default for LbeConfig {
    fn default() -> Self {
        let sgd = SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 3e-4,
        };
        LbeConfig {
            hidden: vec![16],
            embed_dim: 8,
            tau: 1.0,
            gumbel_temp: 0.5,
            code_bits: 32,
            variant: Variant::Lbe,
            tie_weights: false,
            loss_mode: LossMode::Bce,
            predict_mode: PredictMode::Soft,
            allow_self_match: false,
            straight_through: false,
            stochastic_eval: false,
            epochs: 500,
            batch_size: 32,
            patience: 0,
            opt_t: sgd,
            opt_s: sgd,
            opt_a: AdamConfig {
                lr: 1e-3,
                weight_decay: 1e-3,
            },
            xi: XiPolicy::Scheduled,
            sim_init: SimInit::Uniform,
            freeze_a: false,
            seed: 1,
        }
    }
}

impl LbeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be >= 0, got {v}")))
            }
        };
        positive("tau", self.tau)?;
        positive("gumbel_temp", self.gumbel_temp)?;
        for (name, o) in [("optimizer.t", &self.opt_t), ("optimizer.s", &self.opt_s)] {
            positive(&format!("{name}.lr"), o.lr)?;
            non_negative(&format!("{name}.weight_decay"), o.weight_decay)?;
            if !(0.0..1.0).contains(&o.momentum) {
                return Err(Error::Config(format!(
                    "{name}.momentum must be in [0, 1), got {}",
                    o.momentum
                )));
            }
        }
        positive("optimizer.a.lr", self.opt_a.lr)?;
        non_negative("optimizer.a.weight_decay", self.opt_a.weight_decay)?;
        if let XiPolicy::Fixed { t, s } = self.xi {
            positive("xi.t", t)?;
            positive("xi.s", s)?;
        }
        if self.embed_dim == 0 || self.code_bits == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "embed_dim, code_bits and batch_size must be positive".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if let PredictMode::TopK(0) = self.predict_mode {
            return Err(Error::Config("predict.k must be at least 1".into()));
        }
        if self.tie_weights
            && self.variant.hashes_siamese() != self.variant.hashes_matching()
            && self.code_bits != self.embed_dim
        {
            return Err(Error::Config(format!(
                "tied weights with variant {} need code_bits == embed_dim",
                self.variant.name()
            )));
        }
        Ok(())
    }

    pub fn siamese_head(&self) -> Head {
        self.head(self.variant.hashes_siamese())
    }

    pub fn matching_head(&self) -> Head {
        self.head(self.variant.hashes_matching())
    }

    fn head(&self, hashed: bool) -> Head {
        if hashed {
            Head::Hash {
                code_bits: self.code_bits,
                gumbel_temp: self.gumbel_temp,
            }
        } else {
            Head::Cosine
        }
    }

    pub fn output_dim(&self, head: Head) -> usize {
        match head {
            Head::Cosine => self.embed_dim,
            Head::Hash { code_bits, .. } => code_bits,
        }
    }

    pub fn train_code_mode(&self) -> CodeMode {
        if self.straight_through {
            CodeMode::StraightThrough
        } else {
            CodeMode::Soft
        }
    }
}
