//! Question graphs over batches: nodes are questions, edges join questions
//! about the same product, and every node has a self-loop.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Dataset, ProductId, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    Uniform,
    #[default]
    ProductBucketed,
}

/// A batch of questions and their induced same-product subgraph.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGraph {
    /// Positions in `Dataset::questions`; batch-local index is the position
    /// in this list.
    pub nodes: Vec<usize>,
    pub products: Vec<ProductId>,
    /// Row-major `n x n`.
    pub adjacency: Arc<Vec<bool>>,
    /// 1.0 for SPQ, 0.0 for NSPQ; present when every node is labeled.
    pub labels: Option<Arc<Vec<f64>>>,
}

impl BatchGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a * self.len() + b]
    }

    /// Non-self neighbors of node `a`.
    pub fn degree(&self, a: usize) -> usize {
        let n = self.len();
        self.adjacency[a * n..(a + 1) * n].iter().filter(|&&e| e).count() - 1
    }
}

/// Same-product adjacency with self-loops, built from product buckets in
/// `O(n + sum of bucket sizes squared)`.
pub fn product_adjacency(products: &[ProductId]) -> Vec<bool> {
    let n = products.len();
    let mut buckets: BTreeMap<ProductId, Vec<usize>> = BTreeMap::new();
    for (i, &p) in products.iter().enumerate() {
        buckets.entry(p).or_default().push(i);
    }
    let mut adj = vec![false; n * n];
    for members in buckets.values() {
        for &a in members {
            for &b in members {
                adj[a * n + b] = true;
            }
        }
    }
    adj
}

/// Builds the graph over `nodes` (positions in `ds.questions`).
pub fn build_edges(ds: &Dataset, nodes: Vec<usize>) -> Result<BatchGraph> {
    if nodes.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut products = Vec::with_capacity(nodes.len());
    let mut labels = Vec::with_capacity(nodes.len());
    for &i in &nodes {
        let q = ds
            .questions
            .get(i)
            .ok_or_else(|| Error::Contract(format!("question position {i} out of range")))?;
        products.push(q.product);
        labels.push(q.label.map(|l| l.as_f64()));
    }
    let labels: Option<Vec<f64>> = labels.into_iter().collect();
    Ok(BatchGraph {
        adjacency: Arc::new(product_adjacency(&products)),
        nodes,
        products,
        labels: labels.map(Arc::new),
    })
}

fn buckets_of(ds: &Dataset, members: &[usize]) -> Vec<Vec<usize>> {
    let mut by_product: BTreeMap<ProductId, Vec<usize>> = BTreeMap::new();
    for &i in members {
        by_product.entry(ds.questions[i].product).or_default().push(i);
    }
    by_product.into_values().collect()
}

/// Draws one batch from `split`. `Uniform` samples questions without
/// replacement; `ProductBucketed` samples products, then up to
/// `bucket_size` questions of each, until the batch is full.
pub fn sample_batch(
    ds: &Dataset,
    split: Split,
    batch_size: usize,
    strategy: SamplingStrategy,
    bucket_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BatchGraph> {
    let members = ds.split_indices(split);
    if batch_size == 0 || batch_size > members.len() {
        return Err(Error::Contract(format!(
            "batch size {batch_size} not in 1..={} for the {split:?} split",
            members.len()
        )));
    }
    let nodes = match strategy {
        SamplingStrategy::Uniform => rand::seq::index::sample(rng, members.len(), batch_size)
            .into_iter()
            .map(|i| members[i])
            .collect(),
        SamplingStrategy::ProductBucketed => {
            let mut buckets = buckets_of(ds, &members);
            let mut nodes = Vec::with_capacity(batch_size);
            while nodes.len() < batch_size {
                let b = rng.random_range(0..buckets.len());
                let bucket = &mut buckets[b];
                bucket.shuffle(rng);
                let take = bucket_size.max(1).min(bucket.len()).min(batch_size - nodes.len());
                nodes.extend(bucket.drain(..take));
                if bucket.is_empty() {
                    buckets.swap_remove(b);
                }
            }
            nodes
        }
    };
    build_edges(ds, nodes)
}

/// Partitions a split into training batches for one epoch. Bucketed
/// batching groups up to `bucket_size` same-product questions together.
pub fn epoch_batches(
    ds: &Dataset,
    split: Split,
    batch_size: usize,
    strategy: SamplingStrategy,
    bucket_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut members = ds.split_indices(split);
    if members.is_empty() {
        return Err(Error::Empty("split"));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let order = match strategy {
        SamplingStrategy::Uniform => {
            members.shuffle(rng);
            members
        }
        SamplingStrategy::ProductBucketed => {
            let mut chunks = Vec::new();
            for mut bucket in buckets_of(ds, &members) {
                bucket.shuffle(rng);
                chunks.extend(bucket.chunks(bucket_size.max(1)).map(<[usize]>::to_vec));
            }
            chunks.shuffle(rng);
            chunks.concat()
        }
    };
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Groups `members` so that every product's questions land in the same
/// chunk: whole product buckets are packed in order into chunks of at most
/// `max_nodes` (larger buckets get their own chunk). Since GAT messages only
/// cross edges, evaluating these chunks reproduces a single graph over all
/// of `members`.
pub fn component_chunks(ds: &Dataset, members: &[usize], max_nodes: usize) -> Vec<Vec<usize>> {
    let mut chunks: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    for bucket in buckets_of(ds, members) {
        if !current.is_empty() && current.len() + bucket.len() > max_nodes {
            chunks.push(std::mem::take(&mut current));
        }
        current.extend(bucket);
    }
    if !current.is_empty() {
        chunks.push(current);
    }
    chunks
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;

    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};

    fn brute_force(products: &[ProductId]) -> Vec<bool> {
        let n = products.len();
        let mut adj = vec![false; n * n];
        for a in 0..n {
            for b in 0..n {
                adj[a * n + b] = a == b || products[a] == products[b];
            }
        }
        adj
    }

    fn ids(v: &[u32]) -> Vec<ProductId> {
        v.iter().map(|&p| ProductId(p)).collect()
    }

    fn small_ds() -> Dataset {
        generate_dataset(&SynthConfig {
            n_users: 300,
            n_products: 40,
            n_categories: 8,
            taxonomy_branching: 4,
            n_questions: 1_500,
            seed: 21,
            ..SynthConfig::default()
        })
        .unwrap()
        .dataset
    }

    #[test]
    fn adjacency_examples() {
        let adj = product_adjacency(&ids(&[1, 2, 3, 4]));
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(adj[a * 4 + b], a == b);
            }
        }
        assert_eq!(product_adjacency(&ids(&[5, 5])), vec![true; 4]);
        let mixed = ids(&[3, 1, 3, 2, 1, 3, 9]);
        assert_eq!(product_adjacency(&mixed), brute_force(&mixed));
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(build_edges(&small_ds(), vec![]).is_err());
    }

    #[test]
    fn sampling_contracts() {
        let ds = small_ds();
        let n_val = ds.split_indices(Split::Validation).len();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for strategy in [SamplingStrategy::Uniform, SamplingStrategy::ProductBucketed] {
            let g = sample_batch(&ds, Split::Validation, n_val, strategy, 4, &mut rng).unwrap();
            let mut got = g.nodes.clone();
            got.sort_unstable();
            assert_eq!(got, ds.split_indices(Split::Validation));
            assert!(sample_batch(&ds, Split::Validation, n_val + 1, strategy, 4, &mut rng).is_err());
            let a = sample_batch(&ds, Split::Train, 16, strategy, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let b = sample_batch(&ds, Split::Train, 16, strategy, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn bucketed_batches_have_neighbors() {
        let ds = small_ds();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut with, mut total) = (0, 0);
        for _ in 0..50 {
            let g = sample_batch(&ds, Split::Train, 16, SamplingStrategy::ProductBucketed, 4, &mut rng).unwrap();
            with += (0..g.len()).filter(|&a| g.degree(a) > 0).count();
            total += g.len();
        }
        let frac = with as f64 / total as f64;
        assert!(frac >= 0.75, "{frac}");
    }

    #[test]
    fn epoch_batches_cover_split_once() {
        let ds = small_ds();
        for strategy in [SamplingStrategy::Uniform, SamplingStrategy::ProductBucketed] {
            let batches = epoch_batches(&ds, Split::Train, 32, strategy, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let mut all: Vec<usize> = batches.concat();
            all.sort_unstable();
            assert_eq!(all, ds.split_indices(Split::Train));
            assert!(batches.iter().all(|b| b.len() <= 32));
        }
    }

    #[test]
    fn component_chunks_keep_products_together() {
        let ds = small_ds();
        let members = ds.split_indices(Split::Test);
        let chunks = component_chunks(&ds, &members, 64);
        let mut seen = BTreeMap::new();
        for (c, chunk) in chunks.iter().enumerate() {
            for &i in chunk {
                let prev = seen.insert(ds.questions[i].product, c);
                assert!(prev.is_none_or(|p| p == c));
            }
        }
        assert_eq!(chunks.iter().map(Vec::len).sum::<usize>(), members.len());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn bucketed_matches_brute_force(
            n in 1usize..=512,
            n_products in 1u32..64,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let products: Vec<ProductId> = (0..n).map(|_| ProductId(rand::Rng::random_range(&mut rng, 0..n_products))).collect();
            let adj = product_adjacency(&products);
            prop_assert_eq!(&adj, &brute_force(&products));

            // Relabeling the inputs relabels the adjacency.
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let permuted: Vec<ProductId> = perm.iter().map(|&i| products[i]).collect();
            let padj = product_adjacency(&permuted);
            for a in 0..n {
                for b in 0..n {
                    prop_assert_eq!(padj[a * n + b], adj[perm[a] * n + perm[b]]);
                }
            }
        }
    }
}
