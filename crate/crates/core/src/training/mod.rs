//! Multi-stage training, evaluation and the ablation grid.

mod grid;
mod metrics;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{CategoryId, Dataset, Split, DEFAULT_WINDOW_DAYS};
use crate::embeddings::{build_inputs, BehavioralEmbeddings, CatalogIndex, QuestionInputs, TextEncoder};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::gat::{bind, forward_inputs, ModelConfig, ModelSpec, SpqiParams, Variant};
use crate::graph::{component_chunks, epoch_batches, product_adjacency, SamplingStrategy};
use crate::moe::FeatureMask;
use crate::numerics::{Tape, Tensor, BCE_EPS};
use crate::params::Group;

pub use grid::{grid_cells, run_ablation_grid, GridCell, GridRecord};
pub use metrics::{
    chance_f1, paired_significance, Confusion, Metrics, Significance, MIN_CATEGORY_QUESTIONS, THRESHOLD,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub features: FeatureMask,
    pub model: ModelConfig,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub stage1_epochs: usize,
    pub early_stop_patience: usize,
    /// Hard cap on stage-2 epochs.
    pub max_stage2_epochs: usize,
    pub batch_size: usize,
    /// Same-product questions kept together by bucketed sampling.
    pub bucket_size: usize,
    pub sampling: SamplingStrategy,
    /// Evaluation batches: `product_bucketed` packs whole product groups
    /// into batches of at most `eval_batch_size`; `uniform` cuts the split
    /// in order.
    pub eval_batching: SamplingStrategy,
    pub eval_batch_size: usize,
    pub adam: AdamConfig,
    pub window_days: i64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::SpqiMoe,
            features: FeatureMask::FULL,
            model: ModelConfig::default(),
            stage1_lr: 1e-3,
            stage2_lr: 3e-5,
            stage1_epochs: 1,
            early_stop_patience: 3,
            max_stage2_epochs: 100,
            batch_size: 32,
            bucket_size: 4,
            sampling: SamplingStrategy::ProductBucketed,
            eval_batching: SamplingStrategy::Uniform,
            eval_batch_size: 32,
            adam: AdamConfig::default(),
            window_days: DEFAULT_WINDOW_DAYS,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.stage1_lr > 0.0 && self.stage2_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.bucket_size == 0 {
            return bad("batch_size, eval_batch_size and bucket_size must be positive");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return bad("adam betas must be in [0, 1) and eps positive");
        }
        if self.window_days <= 0 {
            return bad("window_days must be positive");
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(self.variant, self.features, self.model.clone())
    }
}

/// Model-independent per-question inputs for a dataset.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub index: CatalogIndex,
    pub inputs: Vec<QuestionInputs>,
    /// Skip-gram table, `(products + 1) x d`.
    pub behavior: Tensor,
    pub labels: Vec<Option<bool>>,
    pub categories: Vec<CategoryId>,
    pub text_dim: usize,
}

impl Prepared {
    pub fn new(
        ds: &Dataset,
        emb: &BehavioralEmbeddings,
        encoder: &dyn TextEncoder,
        window_days: i64,
    ) -> Result<Self> {
        let index = CatalogIndex::new(&ds.catalog)?;
        let behavior = index.behavior_table(emb)?;
        Self::with_behavior(ds, index, behavior, encoder, window_days)
    }

    /// Uses an existing `(products + 1) x d` behavior table, such as the
    /// fine-tuned one stored with a trained model.
    pub fn with_behavior(
        ds: &Dataset,
        index: CatalogIndex,
        behavior: Tensor,
        encoder: &dyn TextEncoder,
        window_days: i64,
    ) -> Result<Self> {
        if behavior.shape().len() != 2 || behavior.rows() != index.n_products() + 1 {
            return Err(Error::shape("behavior table", behavior.shape(), &[index.n_products() + 1]));
        }
        let inputs = build_inputs(ds, &index, encoder, window_days)?;
        let categories = ds
            .questions
            .iter()
            .map(|q| ds.catalog.category_of(q.product))
            .collect::<Result<_>>()?;
        Ok(Self {
            index,
            inputs,
            behavior,
            labels: ds.questions.iter().map(|q| q.label.map(|l| l.is_spq())).collect(),
            categories,
            text_dim: encoder.dim(),
        })
    }
}

/// Adam with per-tensor state; tensors are addressed by their position in
/// the parameter visiting order.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    state: Vec<Option<Moments>>,
}

/// First and second moments and the step count of one tensor.
type Moments = (Vec<f64>, Vec<f64>, u64);

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, state: Vec::new() }
    }

    pub fn step(&mut self, slot: usize, param: &mut [f64], grad: &[f64], lr: f64) {
        if self.state.len() <= slot {
            self.state.resize(slot + 1, None);
        }
        let (m, v, t) = self.state[slot].get_or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()], 0));
        *t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(*t as i32);
        let c2 = 1.0 - beta2.powi(*t as i32);
        for i in 0..param.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            param[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
}

/// Stops once the monitored loss has not improved on its best for
/// `patience` consecutive observations.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
    seen: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    /// New best; keep these parameters.
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
            seen: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> StopDecision {
        self.seen += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.seen;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    /// 1-based index of the best observation.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    /// 1-based across both stages.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metrics: Metrics,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub spec: ModelSpec,
    /// Parameters at `best_epoch`.
    pub params: SpqiParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub loss: f64,
    /// In split order.
    pub probs: Vec<f64>,
    pub nodes: Vec<usize>,
}

fn batch_probs(
    tape: &mut Tape,
    ds: &Dataset,
    prep: &Prepared,
    nodes: &[usize],
    p: &SpqiParams<crate::numerics::Var>,
    spec: &ModelSpec,
) -> Result<crate::numerics::Var> {
    let products: Vec<_> = nodes.iter().map(|&i| ds.questions[i].product).collect();
    let adj = Arc::new(product_adjacency(&products));
    let refs: Vec<&QuestionInputs> = nodes.iter().map(|&i| &prep.inputs[i]).collect();
    forward_inputs(tape, &refs, &adj, p, spec)
}

fn labels_of(prep: &Prepared, nodes: &[usize]) -> Result<Vec<bool>> {
    nodes
        .iter()
        .map(|&i| prep.labels[i].ok_or_else(|| Error::Contract(format!("question at {i} is unlabeled"))))
        .collect()
}

/// Predicts every question of `nodes` in deterministic batches.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    ds: &Dataset,
    prep: &Prepared,
    params: &SpqiParams,
    spec: &ModelSpec,
    nodes: &[usize],
    batching: SamplingStrategy,
    batch_size: usize,
    exec: Execution,
) -> Result<Vec<f64>> {
    let chunks = match batching {
        SamplingStrategy::ProductBucketed => component_chunks(ds, nodes, batch_size),
        SamplingStrategy::Uniform => nodes.chunks(batch_size).map(<[usize]>::to_vec).collect(),
    };
    let per_chunk = exec::map_slice(exec, &chunks, |chunk| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let pv = bind(&mut tape, params, &|_, _| false);
        let out = batch_probs(&mut tape, ds, prep, chunk, &pv, spec)?;
        Ok(tape.value(out).data().to_vec())
    });
    let pos: std::collections::HashMap<usize, usize> = nodes.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let mut probs = vec![f64::NAN; nodes.len()];
    for (chunk, res) in chunks.iter().zip(per_chunk) {
        for (&i, p) in chunk.iter().zip(res?) {
            probs[pos[&i]] = p;
        }
    }
    Ok(probs)
}

fn bce(p: f64, y: bool) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Metrics and mean BCE over a labeled split.
pub fn evaluate(
    ds: &Dataset,
    prep: &Prepared,
    params: &SpqiParams,
    spec: &ModelSpec,
    split: Split,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<Evaluation> {
    let nodes = ds.split_indices(split);
    if nodes.is_empty() {
        return Err(Error::Empty("split"));
    }
    let labels = labels_of(prep, &nodes)?;
    let probs = predict(ds, prep, params, spec, &nodes, cfg.eval_batching, cfg.eval_batch_size, exec)?;
    let loss = probs.iter().zip(&labels).map(|(&p, &y)| bce(p, y)).sum::<f64>() / nodes.len() as f64;
    let categories: Vec<CategoryId> = nodes.iter().map(|&i| prep.categories[i]).collect();
    Ok(Evaluation {
        metrics: Metrics::from_scores(&probs, &labels, &categories)?,
        loss,
        probs,
        nodes,
    })
}

/// Runs one epoch of updates; returns the mean training loss.
#[allow(clippy::too_many_arguments)]
fn train_epoch(
    ds: &Dataset,
    prep: &Prepared,
    params: &mut SpqiParams,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    adam: &mut Adam,
    lr: f64,
    trainable: &dyn Fn(&str, Group) -> bool,
    rng: &mut ChaCha8Rng,
    stage: u8,
    epoch: usize,
) -> Result<f64> {
    let batches = epoch_batches(ds, Split::Train, cfg.batch_size, cfg.sampling, cfg.bucket_size, rng)?;
    let (mut total, mut count) = (0.0, 0usize);
    for nodes in &batches {
        let labels: Vec<f64> = labels_of(prep, nodes)?.into_iter().map(f64::from).collect();
        let mut tape = Tape::new();
        let pv = bind(&mut tape, params, trainable);
        let diverge = |e: Error| match e {
            Error::NonFinite(_) => Error::Divergence { stage, epoch },
            e => e,
        };
        let probs = batch_probs(&mut tape, ds, prep, nodes, &pv, spec).map_err(diverge)?;
        let loss = tape.bce_loss(probs, Arc::new(labels)).map_err(diverge)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Divergence { stage, epoch });
        }
        let grads = tape.backward(loss).map_err(diverge)?;
        let mut vars = Vec::new();
        pv.map(&mut |_, _, v| vars.push(*v));
        let mut slot = 0;
        let mut diverged = false;
        params.visit_mut(&mut |name, g, t| {
            let var = vars[slot];
            if trainable(name, g) {
                if let Some(grad) = grads.raw(var) {
                    diverged |= grad.iter().any(|x| !x.is_finite());
                    adam.step(slot, t.data_mut(), grad, lr);
                }
            }
            slot += 1;
        });
        if diverged {
            return Err(Error::Divergence { stage, epoch });
        }
        total += value * nodes.len() as f64;
        count += nodes.len();
    }
    Ok(total / count as f64)
}

/// Stage 1 trains only randomly initialized parameters; stage 2 fine-tunes
/// everything until validation loss stops improving. Returns the parameters
/// with the lowest validation loss seen in either stage.
pub fn train_multistage(ds: &Dataset, prep: &Prepared, cfg: &TrainConfig, exec: Execution) -> Result<TrainRun> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    if prep.text_dim != spec.config.text_dim {
        return Err(Error::Config(format!(
            "text encoder width {} does not match model text_dim {}",
            prep.text_dim, spec.config.text_dim
        )));
    }
    if ds.questions.len() != prep.inputs.len() {
        return Err(Error::Contract("prepared inputs do not match the dataset".into()));
    }
    for split in [Split::Train, Split::Validation] {
        let idx = ds.split_indices(split);
        if idx.is_empty() {
            return Err(Error::Empty(if split == Split::Train { "train split" } else { "validation split" }));
        }
        labels_of(prep, &idx)?;
    }

    let mut params = SpqiParams::init(&spec, &prep.index, prep.behavior.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0ba7_c4e5);
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut best = params.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;

    let stage1 = |_: &str, g: Group| g == Group::Random;
    let stage2 = |_: &str, _: Group| true;
    let plan = [(1u8, cfg.stage1_epochs, cfg.stage1_lr), (2u8, cfg.max_stage2_epochs, cfg.stage2_lr)];
    'stages: for (stage, epochs, lr) in plan {
        let trainable: &dyn Fn(&str, Group) -> bool = if stage == 1 { &stage1 } else { &stage2 };
        let mut adam = Adam::new(cfg.adam);
        for _ in 0..epochs {
            let epoch = history.len() + 1;
            let train_loss = train_epoch(ds, prep, &mut params, &spec, cfg, &mut adam, lr, trainable, &mut rng, stage, epoch)?;
            let val = evaluate(ds, prep, &params, &spec, Split::Validation, cfg, exec)?;
            if !val.loss.is_finite() {
                return Err(Error::Divergence { stage, epoch });
            }
            history.push(EpochRecord {
                stage,
                epoch,
                train_loss,
                val_loss: val.loss,
                val_metrics: val.metrics,
            });
            match stopper.observe(val.loss) {
                StopDecision::Improved => best = params.clone(),
                StopDecision::Continue => {}
                // Stage 1 always runs its fixed epochs.
                StopDecision::Stop if stage == 2 => {
                    stopped_early = true;
                    break 'stages;
                }
                StopDecision::Stop => {}
            }
        }
    }
    Ok(TrainRun {
        spec,
        params: best,
        history,
        best_epoch: stopper.best_epoch(),
        stopped_early,
    })
}

#[cfg(test)]
mod tests;
