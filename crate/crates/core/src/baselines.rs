//! Comparison strategies built on the same stage machinery as CSIL.
//!
//! Every strategy keeps the extractor frozen after stage 0. They differ
//! only in how the head grows, which fingerprints may move, and which loss
//! terms are switched on:
//!
//! | strategy      | growth              | old fingerprints | KD | EWC |
//! |---------------|---------------------|------------------|----|-----|
//! | `csil`        | new channels        | trainable        | ✓  | ✓   |
//! | `finetune`    | full-width rows     | frozen           |    |     |
//! | `lwf`         | full-width rows     | trainable        | ✓  |     |
//! | `ewc`         | full-width rows     | trainable        |    | ✓   |
//! | `csil-no-cs`  | full-width rows     | trainable        | ✓  | ✓   |
//! | `csil-no-kd`  | new channels        | trainable        |    | ✓   |
//! | `csil-no-ewc` | new channels        | trainable        | ✓  |     |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::csil::{prepare_stage, train_stage, StageContext, StageLog, StageRecipe, TrainOptions};
use crate::error::{invalid, Error, Result};
use crate::model::{Inputs, LabelledSet, Model};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Csil,
    Finetune,
    Lwf,
    Ewc,
    CsilNoCs,
    CsilNoKd,
    CsilNoEwc,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Csil,
        Strategy::Finetune,
        Strategy::Lwf,
        Strategy::Ewc,
        Strategy::CsilNoCs,
        Strategy::CsilNoKd,
        Strategy::CsilNoEwc,
    ];

    /// The comparison set used by `bench`.
    pub const BENCH: [Strategy; 4] = [Strategy::Csil, Strategy::Finetune, Strategy::Lwf, Strategy::Ewc];

    /// Full CSIL and its three single-component removals.
    pub const ABLATION: [Strategy; 4] = [
        Strategy::Csil,
        Strategy::CsilNoCs,
        Strategy::CsilNoEwc,
        Strategy::CsilNoKd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Csil => "csil",
            Strategy::Finetune => "finetune",
            Strategy::Lwf => "lwf",
            Strategy::Ewc => "ewc",
            Strategy::CsilNoCs => "csil-no-cs",
            Strategy::CsilNoKd => "csil-no-kd",
            Strategy::CsilNoEwc => "csil-no-ewc",
        }
    }

    /// Default recipe for the tag.
    pub fn recipe(self) -> StageRecipe {
        let base = StageRecipe::CSIL;
        match self {
            Strategy::Csil => base,
            Strategy::Finetune => StageRecipe {
                channel_separation: false,
                train_old_fingerprints: false,
                kd: false,
                ewc: false,
            },
            Strategy::Lwf => StageRecipe {
                channel_separation: false,
                ewc: false,
                ..base
            },
            Strategy::Ewc => StageRecipe {
                channel_separation: false,
                kd: false,
                ..base
            },
            Strategy::CsilNoCs => StageRecipe {
                channel_separation: false,
                ..base
            },
            Strategy::CsilNoKd => StageRecipe { kd: false, ..base },
            Strategy::CsilNoEwc => StageRecipe { ewc: false, ..base },
        }
    }

    /// Whether the tag belongs to the CSIL family, whose old-fingerprint
    /// trainability is configurable.
    pub fn is_csil_family(self) -> bool {
        matches!(
            self,
            Strategy::Csil | Strategy::CsilNoCs | Strategy::CsilNoKd | Strategy::CsilNoEwc
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Strategy::ALL.iter().map(|t| t.name()).collect();
                invalid(format!("unknown strategy {s:?}; expected one of {}", known.join(", ")))
            })
    }
}

/// A strategy tag with the recipe it runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub recipe: StageRecipe,
}

impl StrategyConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            recipe: strategy.recipe(),
        }
    }

    /// CSIL-family strategies only: override old-fingerprint trainability.
    pub fn with_old_fingerprints(mut self, trainable: bool) -> Self {
        if self.strategy.is_csil_family() {
            self.recipe.train_old_fingerprints = trainable;
        }
        self
    }

    /// The recipe must be the tag's default, up to the old-fingerprint
    /// switch of the CSIL family.
    pub fn validate(&self) -> Result<()> {
        let mut expected = self.strategy.recipe();
        if self.strategy.is_csil_family() {
            expected.train_old_fingerprints = self.recipe.train_old_fingerprints;
        }
        if expected != self.recipe {
            return Err(invalid(format!(
                "recipe {:?} does not match strategy {}",
                self.recipe, self.strategy
            )));
        }
        Ok(())
    }
}

/// Grows and trains `model` for one incremental stage under `cfg`.
#[allow(clippy::too_many_arguments)]
pub fn run_stage<T: Scalar, R: Rng>(
    cfg: &StrategyConfig,
    model: &Model<T>,
    ctx: &StageContext<T>,
    new_classes: usize,
    train: &LabelledSet<T>,
    val: Option<&LabelledSet<T>>,
    fisher_set: &Inputs<T>,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<(Model<T>, StageContext<T>, StageLog)> {
    cfg.validate()?;
    let (grown, next) = prepare_stage(model, ctx, new_classes, train, fisher_set, cfg.recipe, rng)?;
    let (trained, log) = train_stage(&grown, &next, train, val, opts, rng)?;
    Ok((trained, next, log))
}

fn expect(ctx_recipe: &StageRecipe, strategy: Strategy) -> Result<()> {
    if *ctx_recipe != strategy.recipe() {
        return Err(invalid(format!("stage context was prepared for a different recipe than {strategy}")));
    }
    Ok(())
}

/// Only the new full-width fingerprint rows train, on cross-entropy alone.
pub fn finetune_stage<T: Scalar, R: Rng>(
    model: &Model<T>,
    ctx: &StageContext<T>,
    train: &LabelledSet<T>,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<(Model<T>, StageLog)> {
    expect(&ctx.recipe, Strategy::Finetune)?;
    train_stage(model, ctx, train, None, opts, rng)
}

/// The whole fingerprint matrix trains on cross-entropy plus distillation.
pub fn lwf_stage<T: Scalar, R: Rng>(
    model: &Model<T>,
    ctx: &StageContext<T>,
    train: &LabelledSet<T>,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<(Model<T>, StageLog)> {
    expect(&ctx.recipe, Strategy::Lwf)?;
    train_stage(model, ctx, train, None, opts, rng)
}

/// The whole fingerprint matrix trains on cross-entropy plus consolidation.
pub fn ewc_stage<T: Scalar, R: Rng>(
    model: &Model<T>,
    ctx: &StageContext<T>,
    train: &LabelledSet<T>,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<(Model<T>, StageLog)> {
    expect(&ctx.recipe, Strategy::Ewc)?;
    train_stage(model, ctx, train, None, opts, rng)
}
