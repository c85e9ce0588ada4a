//! Newline-delimited JSON dataset files.
//!
//! A dataset directory holds three UTF-8 files, one JSON object per line,
//! keys in the order shown:
//!
//! * `catalog.jsonl`: categories first, then products
//!   - `{"kind":"category","id":3,"name":"cat3","parent":0}` (`parent` is `null` for roots)
//!   - `{"kind":"product","id":17,"name":"prod17","category":3}`
//! * `purchases.jsonl`: `{"user":5,"product":17,"ts":1600000000}`, grouped by
//!   user ascending, time-sorted within each user
//! * `questions.jsonl`: `{"id":0,"user":5,"product":17,"ts":1600086400,
//!   "split":"train","label":"spq","question":["how",...],"answer":["ok",...]}`
//!   where `split` is `train|validation|test` and `label` is `spq|nspq|null`
//!
//! Timestamps are integer seconds since the epoch.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Category, CategoryId, Dataset, Product, ProductCatalog, PurchaseEvent, PurchaseLog, Question};
use crate::error::{Error, Result};

pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const PURCHASES_FILE: &str = "purchases.jsonl";
pub const QUESTIONS_FILE: &str = "questions.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CatalogRecord {
    Category {
        id: CategoryId,
        name: String,
        parent: Option<CategoryId>,
    },
    Product {
        id: super::ProductId,
        name: String,
        category: CategoryId,
    },
}

fn write_lines<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_lines<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            what,
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

impl Dataset {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let cats = self.catalog.categories().map(|c| CatalogRecord::Category {
            id: c.id,
            name: c.name.clone(),
            parent: c.parent,
        });
        let prods = self.catalog.products().map(|p| CatalogRecord::Product {
            id: p.id,
            name: p.name.clone(),
            category: p.category,
        });
        write_lines(&dir.join(CATALOG_FILE), cats.chain(prods))?;
        write_lines(&dir.join(PURCHASES_FILE), self.purchases.events())?;
        write_lines(&dir.join(QUESTIONS_FILE), self.questions.iter())?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let records: Vec<CatalogRecord> = read_lines(&dir.join(CATALOG_FILE), "catalog record")?;
        let mut cats = Vec::new();
        let mut prods = Vec::new();
        for r in records {
            match r {
                CatalogRecord::Category { id, name, parent } => cats.push(Category { id, name, parent }),
                CatalogRecord::Product { id, name, category } => {
                    prods.push(Product { id, name, category })
                }
            }
        }
        let catalog = ProductCatalog::new(cats, prods)?;
        let events: Vec<PurchaseEvent> = read_lines(&dir.join(PURCHASES_FILE), "purchase record")?;
        let purchases = PurchaseLog::new(events)?;
        let questions: Vec<Question> = read_lines(&dir.join(QUESTIONS_FILE), "question record")?;
        Dataset::new(catalog, purchases, questions)
    }
}
