//! Feature families: behavioral similarity features over skip-gram vectors,
//! categorical embedding tables and hashed text vectors.

mod skipgram;
mod text;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{CategoryId, Dataset, ProductCatalog, ProductId, Question};
use crate::error::{Error, Result};
use crate::numerics::{cosine, dot, Reduce, Tape, Tensor, Var};
use crate::params::{join, Group};

pub use skipgram::{train_skipgram, BehavioralEmbeddings, SkipGramConfig, SkipGramRun};
pub use text::{encode_text, token_hash, HashedBagEncoder, TextEncoder, MIN_TEXT_DIM};

pub const N_BEHAVIOR: usize = 6;
pub const TABLE_INIT: f64 = 0.05;

/// The six expert inputs, in their fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureType {
    TextQ,
    TextA,
    Product,
    Category,
    ParentCategory,
    Behavior,
}

impl FeatureType {
    pub const ALL: [FeatureType; 6] = [
        FeatureType::TextQ,
        FeatureType::TextA,
        FeatureType::Product,
        FeatureType::Category,
        FeatureType::ParentCategory,
        FeatureType::Behavior,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureType::TextQ => "text_q",
            FeatureType::TextA => "text_a",
            FeatureType::Product => "product",
            FeatureType::Category => "category",
            FeatureType::ParentCategory => "parent_category",
            FeatureType::Behavior => "behavior",
        }
    }
}

/// Row numbers for catalog ids. The row after the last id is the shared
/// unknown row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogIndex {
    products: BTreeMap<ProductId, usize>,
    categories: BTreeMap<CategoryId, usize>,
    parent_row: Vec<usize>,
}

impl CatalogIndex {
    pub fn new(catalog: &ProductCatalog) -> Result<Self> {
        let products = catalog.products().enumerate().map(|(i, p)| (p.id, i)).collect();
        let categories: BTreeMap<CategoryId, usize> =
            catalog.categories().enumerate().map(|(i, c)| (c.id, i)).collect();
        let mut parent_row = Vec::with_capacity(categories.len());
        for c in catalog.categories() {
            parent_row.push(categories[&catalog.parent_of(c.id)?]);
        }
        Ok(Self {
            products,
            categories,
            parent_row,
        })
    }

    pub fn n_products(&self) -> usize {
        self.products.len()
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn product_row(&self, id: ProductId) -> usize {
        self.products.get(&id).copied().unwrap_or(self.products.len())
    }

    pub fn category_row(&self, id: CategoryId) -> usize {
        self.categories.get(&id).copied().unwrap_or(self.categories.len())
    }

    /// Parent row of a category row; the unknown row maps to itself.
    pub fn parent_row(&self, category_row: usize) -> usize {
        self.parent_row.get(category_row).copied().unwrap_or(self.categories.len())
    }

    /// Skip-gram product vectors laid out by catalog row, with zero rows for
    /// products the embeddings never saw and for the unknown row.
    pub fn behavior_table(&self, emb: &BehavioralEmbeddings) -> Result<Tensor> {
        let d = emb.dim;
        let mut data = vec![0.0; (self.products.len() + 1) * d];
        for (id, &row) in &self.products {
            if let Some(v) = emb.product_vector(*id) {
                data[row * d..(row + 1) * d].copy_from_slice(v);
            }
        }
        Tensor::matrix(self.products.len() + 1, d, data)
    }
}

/// Product, category and parent-category tables, each with one trailing
/// unknown row.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalTables<T = Tensor> {
    pub product: T,
    pub category: T,
    pub parent: T,
}

impl CategoricalTables<Tensor> {
    /// Uniform init in `[-TABLE_INIT, TABLE_INIT]`.
    pub fn init(index: &CatalogIndex, k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut table = |rows: usize| {
            let data = (0..rows * k).map(|_| rng.random_range(-TABLE_INIT..=TABLE_INIT)).collect();
            Tensor::matrix(rows, k, data)
        };
        Ok(Self {
            product: table(index.n_products() + 1)?,
            category: table(index.n_categories() + 1)?,
            parent: table(index.n_categories() + 1)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.product.cols()
    }
}

impl<T> CategoricalTables<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, Group, &T) -> U) -> CategoricalTables<U> {
        CategoricalTables {
            product: f(&join(prefix, "product"), Group::Random, &self.product),
            category: f(&join(prefix, "category"), Group::Random, &self.category),
            parent: f(&join(prefix, "parent"), Group::Random, &self.parent),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Group, &mut T)) {
        f(&join(prefix, "product"), Group::Random, &mut self.product);
        f(&join(prefix, "category"), Group::Random, &mut self.category);
        f(&join(prefix, "parent"), Group::Random, &mut self.parent);
    }
}

/// Row of `table` for `row`, falling back to the trailing unknown row.
pub fn lookup_categorical(row: Option<usize>, table: &Tensor) -> &[f64] {
    let unknown = table.rows() - 1;
    table.row(row.filter(|&r| r < unknown).unwrap_or(unknown))
}

/// `[avg_dot, max_dot, sum_dot, avg_cos, max_cos, sum_cos]` between the
/// queried vector and each history vector. Empty history gives zeros.
pub fn similarity_features<'a>(queried: &[f64], history: impl IntoIterator<Item = &'a [f64]>) -> [f64; 6] {
    let (mut n, mut sd, mut sc) = (0usize, 0.0, 0.0);
    let (mut md, mut mc) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for h in history {
        let (d, c) = (dot(queried, h), cosine(queried, h));
        n += 1;
        sd += d;
        sc += c;
        md = md.max(d);
        mc = mc.max(c);
    }
    if n == 0 {
        return [0.0; 6];
    }
    let k = n as f64;
    [sd / k, md, sd, sc / k, mc, sc]
}

/// Behavioral features by product id; ids without a vector use the zero
/// unknown vector.
pub fn behavioral_features(queried: ProductId, history: &[ProductId], emb: &BehavioralEmbeddings) -> [f64; 6] {
    let zero = vec![0.0; emb.dim];
    let vec_of = |id| emb.product_vector(id).unwrap_or(&zero);
    similarity_features(vec_of(queried), history.iter().map(|&id| vec_of(id)))
}

/// The six feature vectors of one question before projection.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub question_text_vec: Vec<f64>,
    pub answer_text_vec: Vec<f64>,
    pub product_vec: Vec<f64>,
    pub category_vec: Vec<f64>,
    pub parent_category_vec: Vec<f64>,
    pub behavior_vec: [f64; 6],
}

impl FeatureBundle {
    pub fn get(&self, t: FeatureType) -> &[f64] {
        match t {
            FeatureType::TextQ => &self.question_text_vec,
            FeatureType::TextA => &self.answer_text_vec,
            FeatureType::Product => &self.product_vec,
            FeatureType::Category => &self.category_vec,
            FeatureType::ParentCategory => &self.parent_category_vec,
            FeatureType::Behavior => &self.behavior_vec,
        }
    }
}

/// Parameter-independent inputs of one question: frozen text vectors and
/// table rows.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionInputs {
    pub text_q: Vec<f64>,
    pub text_a: Vec<f64>,
    pub product: usize,
    pub category: usize,
    pub parent: usize,
    /// Product rows bought in the history window, in time order.
    pub history: Vec<usize>,
}

impl QuestionInputs {
    pub fn build(
        q: &Question,
        ds: &Dataset,
        index: &CatalogIndex,
        encoder: &dyn TextEncoder,
        window_days: i64,
    ) -> Result<Self> {
        let category = match ds.catalog.category_of(q.product) {
            Ok(c) => index.category_row(c),
            Err(Error::UnknownProduct(_)) => index.n_categories(),
            Err(e) => return Err(e),
        };
        Ok(Self {
            text_q: encoder.encode(&q.question),
            text_a: encoder.encode(&q.answer),
            product: index.product_row(q.product),
            category,
            parent: index.parent_row(category),
            history: ds
                .purchases
                .history_window(q.user, q.ts, window_days)
                .into_iter()
                .map(|p| index.product_row(p))
                .collect(),
        })
    }

    /// Materializes the bundle for the given tables and behavior table.
    pub fn bundle(&self, tables: &CategoricalTables, behavior: &Tensor) -> FeatureBundle {
        FeatureBundle {
            question_text_vec: self.text_q.clone(),
            answer_text_vec: self.text_a.clone(),
            product_vec: lookup_categorical(Some(self.product), &tables.product).to_vec(),
            category_vec: lookup_categorical(Some(self.category), &tables.category).to_vec(),
            parent_category_vec: lookup_categorical(Some(self.parent), &tables.parent).to_vec(),
            behavior_vec: similarity_features(
                behavior.row(self.product),
                self.history.iter().map(|&h| behavior.row(h)),
            ),
        }
    }
}

/// Builds inputs for every question of a dataset.
pub fn build_inputs(
    ds: &Dataset,
    index: &CatalogIndex,
    encoder: &dyn TextEncoder,
    window_days: i64,
) -> Result<Vec<QuestionInputs>> {
    ds.questions
        .iter()
        .map(|q| QuestionInputs::build(q, ds, index, encoder, window_days))
        .collect()
}

/// Batched feature tensors on a tape: six `B x dim` variables in
/// [`FeatureType::ALL`] order. Text vectors enter as constants; table and
/// behavior rows are gathered so gradients reach the touched rows.
pub fn feature_vars(
    tape: &mut Tape,
    batch: &[&QuestionInputs],
    tables: &CategoricalTables<Var>,
    behavior: Var,
) -> Result<[Var; 6]> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Empty("feature batch"));
    }
    let text = |tape: &mut Tape, f: fn(&QuestionInputs) -> &Vec<f64>| -> Result<Var> {
        let cols = f(batch[0]).len();
        let mut data = Vec::with_capacity(b * cols);
        for q in batch {
            let v = f(q);
            if v.len() != cols {
                return Err(Error::shape("text features", &[cols], &[v.len()]));
            }
            data.extend_from_slice(v);
        }
        Ok(tape.constant(Tensor::matrix(b, cols, data)?))
    };
    let tq = text(tape, |q| &q.text_q)?;
    let ta = text(tape, |q| &q.text_a)?;
    let rows = |f: fn(&QuestionInputs) -> usize| Arc::new(batch.iter().map(|q| f(q)).collect::<Vec<_>>());
    let product = tape.gather_rows(tables.product, rows(|q| q.product))?;
    let category = tape.gather_rows(tables.category, rows(|q| q.category))?;
    let parent = tape.gather_rows(tables.parent, rows(|q| q.parent))?;
    let behavior = behavior_vars(tape, batch, behavior)?;
    Ok([tq, ta, product, category, parent, behavior])
}

/// `B x 6` behavioral features differentiable in the behavior table.
pub fn behavior_vars(tape: &mut Tape, batch: &[&QuestionInputs], behavior: Var) -> Result<Var> {
    let mut offsets = Vec::with_capacity(batch.len() + 1);
    let (mut queried, mut hist) = (Vec::new(), Vec::new());
    offsets.push(0);
    for q in batch {
        for &h in &q.history {
            queried.push(q.product);
            hist.push(h);
        }
        offsets.push(hist.len());
    }
    if hist.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[batch.len(), N_BEHAVIOR])));
    }
    let offsets = Arc::new(offsets);
    let qv = tape.gather_rows(behavior, Arc::new(queried))?;
    let hv = tape.gather_rows(behavior, Arc::new(hist))?;
    let dots = tape.row_dot(qv, hv)?;
    let coss = tape.row_cosine(qv, hv)?;
    let mut cols = Vec::with_capacity(N_BEHAVIOR);
    for x in [dots, coss] {
        for kind in [Reduce::Mean, Reduce::Max, Reduce::Sum] {
            cols.push(tape.segment_reduce(x, offsets.clone(), kind)?);
        }
    }
    tape.concat_cols(&cols)
}
