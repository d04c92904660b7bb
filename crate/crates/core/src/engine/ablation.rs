use std::fmt;

use fsar_tensor::Scalar;
use serde::Serialize;

use super::evaluate::{evaluate, EvalReport};
use super::model::Model;
use super::train::{train, TrainState};
use crate::config::{Components, ModelConfig};
use crate::dataset::{EmbeddingStore, Manifest, Split};
use crate::error::Result;
use crate::fusion::FusionStrategy;
use crate::spm::ConstraintMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationTable {
    /// Component toggles.
    Components,
    /// Fusion strategies.
    Fusion,
    /// Consistency constraint placement.
    Constraint,
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationTable::Components => "components",
            AblationTable::Fusion => "fusion",
            AblationTable::Constraint => "constraint",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub table: AblationTable,
    pub label: String,
    pub config: ModelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationResult {
    pub table: AblationTable,
    pub label: String,
    pub accuracy: f64,
    /// Empty when undefined.
    pub ci95: Option<f64>,
    pub episodes: usize,
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// The 8 component combinations, then 3 fusion strategies and 4 constraint
/// placements with every component on. Rows derive from `base`.
pub fn ablation_grid(base: &ModelConfig) -> Vec<AblationRow> {
    let mut rows = Vec::with_capacity(15);
    for bits in 0..8u8 {
        let components = Components { hsmr: bits & 1 != 0, spm: bits & 2 != 0, padm: bits & 4 != 0 };
        let mut config = base.clone();
        config.components = components;
        let label = format!(
            "hsmr={} spm={} padm={}",
            on_off(components.hsmr),
            on_off(components.spm),
            on_off(components.padm)
        );
        rows.push(AblationRow { table: AblationTable::Components, label, config });
    }
    for (strategy, label) in [
        (FusionStrategy::Concat, "concat"),
        (FusionStrategy::ConcatSum, "concat+sum"),
        (FusionStrategy::ConcatSumGate, "concat+sum+gate"),
    ] {
        let mut config = base.clone();
        config.components = Components::default();
        config.fusion.strategy = strategy;
        rows.push(AblationRow { table: AblationTable::Fusion, label: label.into(), config });
    }
    for (mode, label) in [
        (ConstraintMode::None, "none"),
        (ConstraintMode::Support, "support"),
        (ConstraintMode::Query, "query"),
        (ConstraintMode::Both, "both"),
    ] {
        let mut config = base.clone();
        config.components = Components::default();
        config.constraint = mode;
        rows.push(AblationRow { table: AblationTable::Constraint, label: label.into(), config });
    }
    rows
}

/// Trains a fresh model per row for `train_episodes` and evaluates it on the
/// test split. `done` sees each result as it completes.
pub fn run_ablation<S: Scalar>(
    rows: &[AblationRow],
    manifest: &Manifest,
    store: &EmbeddingStore,
    train_episodes: usize,
    eval_episodes: usize,
    mut done: impl FnMut(&AblationResult),
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let mut state = TrainState::new(Model::<S>::new(row.config.clone())?);
        train(&mut state, manifest, store, train_episodes, |_| {})?;
        let EvalReport { mean, ci95, episodes, .. } =
            evaluate(&state.model, manifest, store, Split::Test, eval_episodes, row.config.seeds.eval)?;
        let r = AblationResult { table: row.table, label: row.label.clone(), accuracy: mean, ci95, episodes };
        done(&r);
        out.push(r);
    }
    Ok(out)
}
