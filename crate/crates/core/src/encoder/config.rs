use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention activation of the slot layer. Each pairs an elementwise
/// strictly positive function with optional normalization over slots and
/// optional normalization over set elements.
///
/// | name           | elementwise        | over slots | over set |
/// |----------------|--------------------|------------|----------|
/// | `slot-sigmoid` | sigmoid            | yes        | no       |
/// | `slot-softmax` | exp                | yes        | yes      |
/// | `softmax`      | exp                | no         | yes      |
/// | `slot-exp`     | exp(a - max_slots) | no         | yes      |
/// | `sigmoid`      | sigmoid            | no         | yes      |
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    SlotSigmoid,
    SlotSoftmax,
    Softmax,
    SlotExp,
    Sigmoid,
}

impl Activation {
    pub const ALL: [Activation; 5] = [
        Activation::SlotSigmoid,
        Activation::SlotSoftmax,
        Activation::Softmax,
        Activation::SlotExp,
        Activation::Sigmoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::SlotSigmoid => "slot-sigmoid",
            Activation::SlotSoftmax => "slot-softmax",
            Activation::Softmax => "softmax",
            Activation::SlotExp => "slot-exp",
            Activation::Sigmoid => "sigmoid",
        }
    }

    /// Column normalization over the `k` slots.
    pub fn normalizes_slots(self) -> bool {
        matches!(self, Activation::SlotSigmoid | Activation::SlotSoftmax)
    }

    /// Division by the per-slot sum of weights over all set elements.
    pub fn normalizes_over_set(self) -> bool {
        !matches!(self, Activation::SlotSigmoid)
    }

    /// Weights are `exp` of an unbounded per-row quantity, so accumulated
    /// sums carry a running per-slot max shift. The shift cancels in the
    /// set normalization. Slot-normalized and sigmoid weights are bounded
    /// in (0, 1] and need no shift.
    pub fn row_shifted(self) -> bool {
        matches!(self, Activation::Softmax | Activation::SlotExp)
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown activation {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotMode {
    /// A learned `k x d_s` slot matrix.
    #[default]
    Deterministic,
    /// All slots drawn i.i.d. from one learned diagonal Gaussian.
    StochasticIid,
    /// Slot `i` drawn from its own learned diagonal Gaussian.
    StochasticPerSlot,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UmbcConfig {
    /// Number of slots `k`.
    pub slots: usize,
    /// Slot dimension `d_s`.
    pub slot_dim: usize,
    /// Attention / output dimension `d`.
    pub attn_dim: usize,
    /// Per-element feature dimension `d_h`; filled in from the feature
    /// extractor when the layer is built as part of a stack.
    #[serde(default)]
    pub feature_dim: usize,
    pub activation: Activation,
    #[serde(default)]
    pub slot_mode: SlotMode,
    /// Defaults to whatever the activation requires.
    #[serde(default)]
    pub normalize_over_set: Option<bool>,
    #[serde(default)]
    pub qkv_bias: bool,
    #[serde(default = "default_true")]
    pub ln_affine: bool,
}

impl UmbcConfig {
    pub fn new(slots: usize, slot_dim: usize, attn_dim: usize, feature_dim: usize, activation: Activation) -> Self {
        Self {
            slots,
            slot_dim,
            attn_dim,
            feature_dim,
            activation,
            slot_mode: SlotMode::Deterministic,
            normalize_over_set: None,
            qkv_bias: false,
            ln_affine: true,
        }
    }

    pub fn with_slot_mode(mut self, mode: SlotMode) -> Self {
        self.slot_mode = mode;
        self
    }

    pub fn normalizes_over_set(&self) -> bool {
        self.normalize_over_set
            .unwrap_or_else(|| self.activation.normalizes_over_set())
    }

    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 || self.attn_dim == 0 || self.slot_dim == 0 || self.feature_dim == 0 {
            return Err(Error::Config(format!(
                "slot layer dimensions must be positive (k={}, d_s={}, d={}, d_h={})",
                self.slots, self.slot_dim, self.attn_dim, self.feature_dim
            )));
        }
        if self.normalizes_over_set() != self.activation.normalizes_over_set() {
            return Err(Error::Config(format!(
                "normalize_over_set must be {} for activation {}",
                self.activation.normalizes_over_set(),
                self.activation
            )));
        }
        Ok(())
    }
}
