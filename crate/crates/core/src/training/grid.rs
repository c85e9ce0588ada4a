use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{evaluate, train_multistage, AdamConfig, Confusion, Prepared, TrainConfig};
use crate::catalog::{CategoryId, Dataset, Split};
use crate::error::Result;
use crate::exec::{self, Execution};
use crate::gat::Variant;
use crate::moe::{FeatureMask, Subset};

/// One column of the results table. Text baselines carry no subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub variant: Variant,
    pub subset: Option<Subset>,
}

impl GridCell {
    pub fn mask(&self) -> FeatureMask {
        self.subset.map_or(FeatureMask::FULL, Subset::mask)
    }
}

/// Both text baselines, then every (variant, subset) pair.
pub fn grid_cells() -> Vec<GridCell> {
    let mut cells = vec![
        GridCell { variant: Variant::TextOnlyQ, subset: None },
        GridCell { variant: Variant::TextOnlyQa, subset: None },
    ];
    for variant in [Variant::MlpConcat, Variant::MlpMoe, Variant::SpqiConcat, Variant::SpqiMoe] {
        for subset in Subset::ALL {
            cells.push(GridCell { variant, subset: Some(subset) });
        }
    }
    cells
}

/// One trained and evaluated cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub variant: Variant,
    pub subset: Option<Subset>,
    /// Feature types actually used.
    pub mask: FeatureMask,
    pub seed: u64,
    pub split: Split,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
    pub per_category_f1: BTreeMap<CategoryId, f64>,
    pub best_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: String,
    pub adam: AdamConfig,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
}

/// Trains and tests every cell once per seed. Cells run as independent
/// jobs; records come back in (cell, seed) order.
pub fn run_ablation_grid(
    ds: &Dataset,
    prep: &Prepared,
    base: &TrainConfig,
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<GridRecord>> {
    let jobs: Vec<(GridCell, u64)> = grid_cells()
        .into_iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    exec::map_slice(exec, &jobs, |&(cell, seed)| -> Result<GridRecord> {
        let cfg = TrainConfig {
            variant: cell.variant,
            features: cell.mask(),
            seed,
            ..base.clone()
        };
        let run = train_multistage(ds, prep, &cfg, Execution::Sequential)?;
        let test = evaluate(ds, prep, &run.params, &run.spec, Split::Test, &cfg, Execution::Sequential)?;
        let m = test.metrics;
        Ok(GridRecord {
            variant: cell.variant,
            subset: cell.subset,
            mask: run.spec.mask,
            seed,
            split: Split::Test,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            confusion: m.confusion,
            per_category_f1: m.per_category_f1,
            best_epoch: run.best_epoch,
            epochs: run.history.len(),
            batch_size: cfg.batch_size,
            optimizer: "adam".into(),
            adam: cfg.adam,
            stage1_lr: cfg.stage1_lr,
            stage2_lr: cfg.stage2_lr,
        })
    })
    .into_iter()
    .collect()
}
