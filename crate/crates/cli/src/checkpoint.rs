//! Binary container for trained models and skip-gram vectors.
//!
//! Layout: magic `SPQ1`, format version (u32 LE), metadata length (u64 LE),
//! UTF-8 JSON metadata, then every section as little-endian f64 in
//! directory order. Section offsets are relative to the first section byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use spqi::catalog::{ProductId, UserId};
use spqi::embeddings::{BehavioralEmbeddings, CatalogIndex};
use spqi::gat::{ModelConfig, ModelSpec, SpqiParams, Variant};
use spqi::moe::FeatureMask;
use spqi::numerics::Tensor;
use spqi::params::Group;
use spqi::Error;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"SPQ1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Model,
    Embeddings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Section {
    pub name: String,
    pub group: Option<Group>,
    pub shape: Vec<usize>,
    /// In bytes.
    pub offset: u64,
    /// In f64 values.
    pub len: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub skipgram: u64,
    pub train: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInfo {
    pub variant: Variant,
    pub features: FeatureMask,
    pub dims: ModelConfig,
    pub n_products: usize,
    pub n_categories: usize,
    pub behavior_dim: usize,
    pub text_seed: u64,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingInfo {
    pub dim: usize,
    pub users: Vec<u32>,
    pub products: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub kind: Kind,
    pub seeds: Seeds,
    pub model: Option<ModelInfo>,
    pub embeddings: Option<EmbeddingInfo>,
    pub config: RunConfig,
    pub sections: Vec<Section>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Metadata,
    /// Aligned with `meta.sections`.
    pub tensors: Vec<Tensor>,
}

fn incompatible(msg: impl Into<String>) -> CliError {
    CliError::Core(Error::Incompatible(msg.into()))
}

fn directory(named: &[(String, Option<Group>, &Tensor)]) -> Vec<Section> {
    let mut offset = 0u64;
    named
        .iter()
        .map(|(name, group, t)| {
            let s = Section {
                name: name.clone(),
                group: *group,
                shape: t.shape().to_vec(),
                offset,
                len: t.numel() as u64,
            };
            offset += 8 * s.len;
            s
        })
        .collect()
}

impl Checkpoint {
    fn assemble(
        kind: Kind,
        seeds: Seeds,
        model: Option<ModelInfo>,
        embeddings: Option<EmbeddingInfo>,
        config: RunConfig,
        named: Vec<(String, Option<Group>, Tensor)>,
    ) -> Self {
        let refs: Vec<_> = named.iter().map(|(n, g, t)| (n.clone(), *g, t)).collect();
        let sections = directory(&refs);
        Self {
            meta: Metadata {
                kind,
                seeds,
                model,
                embeddings,
                config,
                sections,
            },
            tensors: named.into_iter().map(|(_, _, t)| t).collect(),
        }
    }

    pub fn from_model(params: &SpqiParams, info: ModelInfo, seeds: Seeds, config: RunConfig) -> Self {
        let mut named = Vec::new();
        params.map(&mut |name, g, t| named.push((name.to_string(), Some(g), t.clone())));
        Self::assemble(Kind::Model, seeds, Some(info), None, config, named)
    }

    pub fn from_embeddings(emb: &BehavioralEmbeddings, seeds: Seeds, config: RunConfig) -> Self {
        let info = EmbeddingInfo {
            dim: emb.dim,
            users: emb.users.iter().map(|u| u.0).collect(),
            products: emb.products.iter().map(|p| p.0).collect(),
        };
        let named = vec![
            ("skipgram.users".to_string(), None, emb.user_vectors.clone()),
            ("skipgram.products".to_string(), None, emb.product_vectors.clone()),
        ];
        Self::assemble(Kind::Embeddings, seeds, None, Some(info), config, named)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(Error::from)?;
        let values: usize = self.tensors.iter().map(Tensor::numel).sum();
        let mut out = Vec::with_capacity(16 + meta.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(incompatible("not an SPQ1 checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(incompatible(format!("format version {version}, expected {VERSION}")));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let body = 16usize
            .checked_add(usize::try_from(meta_len).map_err(|_| incompatible("metadata length overflows"))?)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| incompatible("truncated metadata"))?;
        let meta: Metadata = serde_json::from_slice(&bytes[16..body])
            .map_err(|e| incompatible(format!("metadata: {e}")))?;
        let data = &bytes[body..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(meta.sections.len());
        for s in &meta.sections {
            if s.offset != expected {
                return Err(incompatible(format!("section {} at offset {}, expected {expected}", s.name, s.offset)));
            }
            if s.shape.iter().product::<usize>() as u64 != s.len {
                return Err(incompatible(format!("section {} shape {:?} holds {} values", s.name, s.shape, s.len)));
            }
            let end = s.offset + 8 * s.len;
            if end > data.len() as u64 {
                return Err(incompatible(format!("section {} runs past the end of the file", s.name)));
            }
            let raw = &data[s.offset as usize..end as usize];
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::new(s.shape.clone(), values)?);
            expected = end;
        }
        if expected != data.len() as u64 {
            return Err(incompatible("trailing bytes after the last section"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.meta.kind != kind {
            return Err(incompatible(format!("expected a {kind:?} file, found {:?}", self.meta.kind)));
        }
        Ok(())
    }

    pub fn model_info(&self) -> Result<&ModelInfo> {
        self.expect_kind(Kind::Model)?;
        self.meta.model.as_ref().ok_or_else(|| incompatible("model metadata missing"))
    }

    /// Rebuilds the model against the catalog of a dataset; catalog sizes and
    /// every tensor shape must match.
    pub fn to_model(&self, index: &CatalogIndex) -> Result<(ModelSpec, SpqiParams)> {
        let info = self.model_info()?;
        if info.n_products != index.n_products() || info.n_categories != index.n_categories() {
            return Err(incompatible(format!(
                "model was trained on {} products / {} categories, dataset has {} / {}",
                info.n_products,
                info.n_categories,
                index.n_products(),
                index.n_categories()
            )));
        }
        let spec = ModelSpec::new(info.variant, info.features, info.dims.clone())?;
        let behavior = Tensor::zeros(&[info.n_products + 1, info.behavior_dim]);
        let mut params = SpqiParams::init(&spec, index, behavior, 0)?;
        let mut problem = None;
        let mut used = 0;
        params.visit_mut(&mut |name, _, t| {
            match self.meta.sections.iter().position(|s| s.name == name) {
                Some(k) if self.tensors[k].shape() == t.shape() => {
                    *t = self.tensors[k].clone();
                    used += 1;
                }
                Some(k) => {
                    problem.get_or_insert(format!(
                        "{name}: stored shape {:?}, model expects {:?}",
                        self.tensors[k].shape(),
                        t.shape()
                    ));
                }
                None => {
                    problem.get_or_insert(format!("{name} missing"));
                }
            }
        });
        if let Some(p) = problem {
            return Err(incompatible(p));
        }
        if used != self.tensors.len() {
            return Err(incompatible("checkpoint holds tensors the model does not use"));
        }
        Ok((spec, params))
    }

    pub fn to_embeddings(&self) -> Result<BehavioralEmbeddings> {
        self.expect_kind(Kind::Embeddings)?;
        let info = self.meta.embeddings.as_ref().ok_or_else(|| incompatible("embedding metadata missing"))?;
        let [users, products] = self.tensors.as_slice() else {
            return Err(incompatible("embedding file needs exactly two sections"));
        };
        if users.shape() != [info.users.len(), info.dim] || products.shape() != [info.products.len(), info.dim] {
            return Err(incompatible("embedding sections do not match the id lists"));
        }
        Ok(BehavioralEmbeddings {
            dim: info.dim,
            users: info.users.iter().map(|&u| UserId(u)).collect(),
            products: info.products.iter().map(|&p| ProductId(p)).collect(),
            user_vectors: users.clone(),
            product_vectors: products.clone(),
        })
    }
}
