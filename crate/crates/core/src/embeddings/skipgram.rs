//! User/product skip-gram with negative sampling.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{ProductId, PurchaseEvent, UserId};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Starting learning rate; decays linearly to `lr * 1e-4`.
    pub lr: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            dim: 50,
            negatives: 5,
            epochs: 5,
            lr: 0.05,
            seed: 11,
        }
    }
}

/// Trained user and product vectors. Ids are kept sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct BehavioralEmbeddings {
    pub dim: usize,
    pub users: Vec<UserId>,
    pub products: Vec<ProductId>,
    pub user_vectors: Tensor,
    pub product_vectors: Tensor,
}

impl BehavioralEmbeddings {
    pub fn product_vector(&self, id: ProductId) -> Option<&[f64]> {
        self.products
            .binary_search(&id)
            .ok()
            .map(|i| self.product_vectors.row(i))
    }

    pub fn user_vector(&self, id: UserId) -> Option<&[f64]> {
        self.users.binary_search(&id).ok().map(|i| self.user_vectors.row(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkipGramRun {
    pub embeddings: BehavioralEmbeddings,
    /// Mean negative-sampling loss per epoch, measured while training.
    pub epoch_losses: Vec<f64>,
}

fn index<K: Ord + Copy>(keys: impl Iterator<Item = K>) -> (Vec<K>, BTreeMap<K, usize>) {
    let map: BTreeMap<K, usize> = keys.map(|k| (k, 0)).collect();
    let sorted: Vec<K> = map.keys().copied().collect();
    let map = sorted.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    (sorted, map)
}

/// Trains vectors so that `sigmoid(u . p)` is high for observed
/// `(user, product)` pairs and low for products drawn from the unigram
/// distribution raised to 3/4.
pub fn train_skipgram(events: &[PurchaseEvent], cfg: &SkipGramConfig) -> Result<SkipGramRun> {
    if events.is_empty() {
        return Err(Error::Empty("purchase log"));
    }
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
    if cfg.dim == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("skip-gram dim and lr must be positive".into()));
    }
    let d = cfg.dim;
    let (users, uidx) = index(events.iter().map(|e| e.user));
    let (products, pidx) = index(events.iter().map(|e| e.product));
    let pairs: Vec<(usize, usize)> = events.iter().map(|e| (uidx[&e.user], pidx[&e.product])).collect();

    let mut counts = vec![0.0f64; products.len()];
    for &(_, p) in &pairs {
        counts[p] += 1.0;
    }
    let noise = WeightedIndex::new(counts.iter().map(|c| c.powf(0.75)))
        .map_err(|e| Error::Contract(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 0.5 / (d as f64).sqrt();
    let mut uvec: Vec<f64> = (0..users.len() * d).map(|_| rng.random_range(-scale..scale)).collect();
    let mut pvec: Vec<f64> = (0..products.len() * d).map(|_| rng.random_range(-scale..scale)).collect();

    let total = (cfg.epochs * pairs.len()).max(1) as f64;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut grad_u = vec![0.0; d];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        for &i in &order {
            let lr = cfg.lr * (1.0 - step as f64 / total).max(1e-4);
            step += 1;
            let (u, p) = pairs[i];
            grad_u.iter_mut().for_each(|g| *g = 0.0);
            let urow = u * d..(u + 1) * d;
            for k in 0..=cfg.negatives {
                let (target, label) = if k == 0 {
                    (p, 1.0)
                } else {
                    (noise.sample(&mut rng), 0.0)
                };
                if k > 0 && target == p {
                    continue;
                }
                let prow = target * d..(target + 1) * d;
                let score: f64 = uvec[urow.clone()]
                    .iter()
                    .zip(&pvec[prow.clone()])
                    .map(|(a, b)| a * b)
                    .sum();
                let s = sigmoid(score);
                loss -= if label == 1.0 { s.max(1e-12).ln() } else { (1.0 - s).max(1e-12).ln() };
                let g = lr * (label - s);
                for (j, gu) in grad_u.iter_mut().enumerate() {
                    *gu += g * pvec[target * d + j];
                    pvec[target * d + j] += g * uvec[u * d + j];
                }
            }
            for (j, gu) in grad_u.iter().enumerate() {
                uvec[u * d + j] += gu;
            }
        }
        let mean = loss / pairs.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("skip-gram loss"));
        }
        epoch_losses.push(mean);
    }

    Ok(SkipGramRun {
        embeddings: BehavioralEmbeddings {
            dim: d,
            user_vectors: Tensor::matrix(users.len(), d, uvec)?,
            product_vectors: Tensor::matrix(products.len(), d, pvec)?,
            users,
            products,
        },
        epoch_losses,
    })
}
