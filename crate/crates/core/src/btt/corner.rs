use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Orientation;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSide {
    /// Train `R`, freeze `L`.
    Input,
    /// Train `L`, freeze `R`.
    Output,
    /// Train every core.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SPlacement {
    /// `S` is its own trainable vector.
    Separate,
    /// `diag(S)` folded into the frozen core.
    MergedToFrozen,
    /// `diag(S)` folded into the trainable core.
    MergedToTrainable,
}

/// Which cores train and where the singular values live.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "CornerInput", into = "CornerRepr")]
pub struct DesignCorner {
    pub side: TrainableSide,
    pub placement: SPlacement,
}

#[derive(Serialize, Deserialize)]
struct CornerRepr {
    trainable_side: TrainableSide,
    s_placement: SPlacement,
}

/// Configs may name a corner by its id instead of spelling out both fields.
#[derive(Deserialize)]
#[serde(untagged)]
enum CornerInput {
    Id(String),
    Fields(CornerRepr),
}

impl TryFrom<CornerInput> for DesignCorner {
    type Error = Error;

    fn try_from(r: CornerInput) -> Result<Self> {
        match r {
            CornerInput::Id(id) => id.parse(),
            CornerInput::Fields(r) => DesignCorner::new(r.trainable_side, r.s_placement),
        }
    }
}

impl From<DesignCorner> for CornerRepr {
    fn from(c: DesignCorner) -> Self {
        CornerRepr { trainable_side: c.side, s_placement: c.placement }
    }
}

impl DesignCorner {
    /// Freeze `L`, train `S` and `R` separately.
    pub const DEFAULT: DesignCorner = DesignCorner { side: TrainableSide::Input, placement: SPlacement::Separate };

    pub const FULL: DesignCorner = DesignCorner { side: TrainableSide::All, placement: SPlacement::Separate };

    /// The six parameter-efficient corners: three input-side, three output-side.
    pub const PEFT: [DesignCorner; 6] = [
        DesignCorner::DEFAULT,
        DesignCorner { side: TrainableSide::Input, placement: SPlacement::MergedToFrozen },
        DesignCorner { side: TrainableSide::Input, placement: SPlacement::MergedToTrainable },
        DesignCorner { side: TrainableSide::Output, placement: SPlacement::Separate },
        DesignCorner { side: TrainableSide::Output, placement: SPlacement::MergedToTrainable },
        DesignCorner { side: TrainableSide::Output, placement: SPlacement::MergedToFrozen },
    ];

    pub fn new(side: TrainableSide, placement: SPlacement) -> Result<Self> {
        if side == TrainableSide::All && placement != SPlacement::Separate {
            return Err(Error::Contract("a fully trainable layer keeps S separate".into()));
        }
        Ok(Self { side, placement })
    }

    pub fn l_trainable(&self) -> bool {
        matches!(self.side, TrainableSide::Output | TrainableSide::All)
    }

    pub fn r_trainable(&self) -> bool {
        matches!(self.side, TrainableSide::Input | TrainableSide::All)
    }

    pub fn has_separate_s(&self) -> bool {
        self.placement == SPlacement::Separate
    }

    /// Orientation under which this corner preserves a nontrivial subspace.
    pub fn natural_orientation(&self) -> Orientation {
        match self.side {
            TrainableSide::Output => Orientation::RowSliced,
            _ => Orientation::ColumnSliced,
        }
    }

    /// Core that absorbs `diag(S)` for merged placements: `true` means `L`.
    pub(crate) fn s_folds_into_l(&self) -> Option<bool> {
        match (self.side, self.placement) {
            (_, SPlacement::Separate) => None,
            (TrainableSide::Input, SPlacement::MergedToFrozen) => Some(true),
            (TrainableSide::Input, SPlacement::MergedToTrainable) => Some(false),
            (TrainableSide::Output, SPlacement::MergedToFrozen) => Some(false),
            (TrainableSide::Output, SPlacement::MergedToTrainable) => Some(true),
            (TrainableSide::All, _) => None,
        }
    }

    /// Compact core notation; brackets mark frozen cores, parentheses a merge.
    pub fn notation(&self) -> &'static str {
        use SPlacement::*;
        use TrainableSide::*;
        match (self.side, self.placement) {
            (Input, Separate) => "[L] S R",
            (Input, MergedToFrozen) => "[LS] R",
            (Input, MergedToTrainable) => "[L] (SR)",
            (Output, Separate) => "L S [R]",
            (Output, MergedToTrainable) => "(LS) [R]",
            (Output, MergedToFrozen) => "L [SR]",
            (All, _) => "L S R",
        }
    }

    /// Stable identifier used by the CLI and config files.
    pub fn id(&self) -> &'static str {
        use SPlacement::*;
        use TrainableSide::*;
        match (self.side, self.placement) {
            (Input, Separate) => "input-separate",
            (Input, MergedToFrozen) => "input-merged-frozen",
            (Input, MergedToTrainable) => "input-merged-trainable",
            (Output, Separate) => "output-separate",
            (Output, MergedToTrainable) => "output-merged-trainable",
            (Output, MergedToFrozen) => "output-merged-frozen",
            (All, _) => "full",
        }
    }
}

impl Default for DesignCorner {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl fmt::Display for DesignCorner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for DesignCorner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "default" {
            return Ok(Self::DEFAULT);
        }
        Self::PEFT
            .iter()
            .chain(std::iter::once(&Self::FULL))
            .find(|c| c.id() == s)
            .copied()
            .ok_or_else(|| Error::Domain(format!("unknown corner `{s}`")))
    }
}
