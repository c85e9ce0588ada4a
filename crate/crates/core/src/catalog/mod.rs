//! Users, products, the category taxonomy, purchase logs and questions.

mod analysis;
mod io;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use analysis::{
    category_spq_rates, pearson, purchase_window_correlations, user_pair_correlation,
    window_indicators, WindowCorrelations, WindowIndicators,
};
pub use io::{CatalogRecord, CATALOG_FILE, PURCHASES_FILE, QUESTIONS_FILE};

pub const SECONDS_PER_DAY: i64 = 86_400;
pub const DEFAULT_WINDOW_DAYS: i64 = 28;

macro_rules! id_type {
    ($name:ident) => {
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

id_type!(UserId);
id_type!(ProductId);
id_type!(CategoryId);
id_type!(QuestionId);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
    pub parent: Option<CategoryId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Product {
    pub id: ProductId,
    pub name: String,
    pub category: CategoryId,
}

/// Products and a category forest. Validated on construction.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProductCatalog {
    categories: BTreeMap<CategoryId, Category>,
    products: BTreeMap<ProductId, Product>,
}

impl ProductCatalog {
    pub fn new(categories: Vec<Category>, products: Vec<Product>) -> Result<Self> {
        let mut cats = BTreeMap::new();
        for c in categories {
            let id = c.id;
            if cats.insert(id, c).is_some() {
                return Err(Error::Catalog(format!("duplicate category {id}")));
            }
        }
        for c in cats.values() {
            if let Some(p) = c.parent {
                if !cats.contains_key(&p) {
                    return Err(Error::UnknownCategory(p.0));
                }
            }
        }
        // Walk each parent chain; a chain longer than the category count is a cycle.
        for c in cats.values() {
            let mut cur = c.parent;
            let mut steps = 0;
            while let Some(p) = cur {
                steps += 1;
                if p == c.id || steps > cats.len() {
                    return Err(Error::Catalog(format!("category cycle through {}", c.id)));
                }
                cur = cats[&p].parent;
            }
        }
        let mut prods = BTreeMap::new();
        for p in products {
            if !cats.contains_key(&p.category) {
                return Err(Error::UnknownCategory(p.category.0));
            }
            let id = p.id;
            if prods.insert(id, p).is_some() {
                return Err(Error::Catalog(format!("duplicate product {id}")));
            }
        }
        Ok(Self {
            categories: cats,
            products: prods,
        })
    }

    pub fn product(&self, id: ProductId) -> Result<&Product> {
        self.products.get(&id).ok_or(Error::UnknownProduct(id.0))
    }

    pub fn category(&self, id: CategoryId) -> Result<&Category> {
        self.categories.get(&id).ok_or(Error::UnknownCategory(id.0))
    }

    pub fn category_of(&self, id: ProductId) -> Result<CategoryId> {
        Ok(self.product(id)?.category)
    }

    /// Immediate parent; a root is its own parent.
    pub fn parent_of(&self, id: CategoryId) -> Result<CategoryId> {
        Ok(self.category(id)?.parent.unwrap_or(id))
    }

    pub fn products(&self) -> impl Iterator<Item = &Product> {
        self.products.values()
    }

    pub fn categories(&self) -> impl Iterator<Item = &Category> {
        self.categories.values()
    }

    pub fn n_products(&self) -> usize {
        self.products.len()
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurchaseEvent {
    pub user: UserId,
    pub product: ProductId,
    /// Seconds since the epoch.
    pub ts: i64,
}

/// Purchases grouped by user, each list sorted ascending by time.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PurchaseLog {
    by_user: BTreeMap<UserId, Vec<PurchaseEvent>>,
}

impl PurchaseLog {
    /// Groups and stably sorts events; ties keep their input order.
    pub fn new(events: impl IntoIterator<Item = PurchaseEvent>) -> Result<Self> {
        let mut by_user: BTreeMap<UserId, Vec<PurchaseEvent>> = BTreeMap::new();
        for e in events {
            if e.ts < 0 {
                return Err(Error::Catalog(format!("negative timestamp {}", e.ts)));
            }
            by_user.entry(e.user).or_default().push(e);
        }
        for list in by_user.values_mut() {
            list.sort_by_key(|e| e.ts);
        }
        Ok(Self { by_user })
    }

    pub fn for_user(&self, user: UserId) -> &[PurchaseEvent] {
        self.by_user.get(&user).map_or(&[], Vec::as_slice)
    }

    pub fn events(&self) -> impl Iterator<Item = &PurchaseEvent> {
        self.by_user.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.by_user.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_user.is_empty()
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.by_user.keys().copied()
    }

    /// Products the user bought in `[t - window_days, t)`, in time order,
    /// duplicates kept.
    pub fn history_window(&self, user: UserId, t: i64, window_days: i64) -> Vec<ProductId> {
        events_in(self.for_user(user), t - window_days * SECONDS_PER_DAY, t)
            .iter()
            .map(|e| e.product)
            .collect()
    }
}

/// Events with `lo <= ts < hi` from a time-sorted slice.
pub(crate) fn events_in(events: &[PurchaseEvent], lo: i64, hi: i64) -> &[PurchaseEvent] {
    let a = events.partition_point(|e| e.ts < lo);
    let b = events.partition_point(|e| e.ts < hi);
    &events[a..b.max(a)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Spq,
    Nspq,
}

impl Label {
    pub fn is_spq(self) -> bool {
        self == Label::Spq
    }

    pub fn as_f64(self) -> f64 {
        if self.is_spq() {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One voice product question; the classification unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: QuestionId,
    pub user: UserId,
    pub product: ProductId,
    pub ts: i64,
    pub split: Split,
    #[serde(default)]
    pub label: Option<Label>,
    pub question: Vec<String>,
    pub answer: Vec<String>,
}

/// SPQ iff the user bought the queried product, or any product in the same
/// leaf category, in `(q.ts, q.ts + window_days]`.
pub fn label_question(
    q: &Question,
    purchases: &[PurchaseEvent],
    catalog: &ProductCatalog,
    window_days: i64,
) -> Result<Label> {
    let cat = catalog.category_of(q.product)?;
    let window = events_in(purchases, q.ts + 1, q.ts + window_days * SECONDS_PER_DAY + 1);
    for e in window {
        if e.product == q.product || catalog.category_of(e.product)? == cat {
            return Ok(Label::Spq);
        }
    }
    Ok(Label::Nspq)
}

/// Catalog, purchase log and questions. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub catalog: ProductCatalog,
    pub purchases: PurchaseLog,
    pub questions: Vec<Question>,
}

impl Dataset {
    pub fn new(
        catalog: ProductCatalog,
        purchases: PurchaseLog,
        questions: Vec<Question>,
    ) -> Result<Self> {
        for e in purchases.events() {
            catalog.product(e.product)?;
        }
        let mut seen = std::collections::HashSet::new();
        for q in &questions {
            catalog.product(q.product)?;
            if !seen.insert(q.id) {
                return Err(Error::Catalog(format!("duplicate question {}", q.id)));
            }
            if q.ts < 0 {
                return Err(Error::Catalog(format!("question {} has negative timestamp", q.id)));
            }
            for tok in q.question.iter().chain(&q.answer) {
                if tok.is_empty() || tok.chars().any(char::is_uppercase) {
                    return Err(Error::Catalog(format!(
                        "question {} has token {tok:?}; tokens must be non-empty lowercase",
                        q.id
                    )));
                }
            }
        }
        Ok(Self {
            catalog,
            purchases,
            questions,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Question> {
        self.questions.iter().filter(|q| q.split == split).collect()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.questions.len())
            .filter(|&i| self.questions[i].split == split)
            .collect()
    }

    pub fn label(&self, q: &Question, window_days: i64) -> Result<Label> {
        label_question(q, self.purchases.for_user(q.user), &self.catalog, window_days)
    }

    pub fn history(&self, q: &Question, window_days: i64) -> Vec<ProductId> {
        self.purchases.history_window(q.user, q.ts, window_days)
    }
}
