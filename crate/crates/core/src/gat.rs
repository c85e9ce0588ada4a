//! Graph attention layers, the full classifier and the baseline forward
//! paths.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{feature_vars, CatalogIndex, CategoricalTables, FeatureBundle, FeatureType, QuestionInputs, N_BEHAVIOR};
use crate::error::{Error, Result};
use crate::moe::{glorot, moe_mix_vars, project_vars, FeatureMask, MoeNorm, MoeParams, N_TYPES};
use crate::numerics::{Activation, Tape, Tensor, Var};
use crate::params::{join, Group};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    #[default]
    Gat,
    /// Mean aggregation over neighbors.
    Gcn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Question text only.
    TextOnlyQ,
    /// Question and answer text.
    TextOnlyQa,
    MlpConcat,
    MlpMoe,
    SpqiConcat,
    SpqiMoe,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::TextOnlyQ,
        Variant::TextOnlyQa,
        Variant::MlpConcat,
        Variant::MlpMoe,
        Variant::SpqiConcat,
        Variant::SpqiMoe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TextOnlyQ => "text-only-q",
            Variant::TextOnlyQa => "text-only-qa",
            Variant::MlpConcat => "mlp-concat",
            Variant::MlpMoe => "mlp-moe",
            Variant::SpqiConcat => "spqi-concat",
            Variant::SpqiMoe => "spqi-moe",
        }
    }

    pub fn is_graph(self) -> bool {
        matches!(self, Variant::SpqiConcat | Variant::SpqiMoe)
    }

    pub fn is_text_only(self) -> bool {
        matches!(self, Variant::TextOnlyQ | Variant::TextOnlyQa)
    }

    /// The mask the variant actually uses.
    pub fn effective_mask(self, requested: FeatureMask) -> FeatureMask {
        match self {
            Variant::TextOnlyQ => FeatureMask::from_types(&[FeatureType::TextQ]).expect("nonempty"),
            Variant::TextOnlyQa => {
                FeatureMask::from_types(&[FeatureType::TextQ, FeatureType::TextA]).expect("nonempty")
            }
            _ => requested,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .or(match s {
                "text-only" => Some(Variant::TextOnlyQ),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Common projection width and node dimension.
    pub dim: usize,
    pub text_dim: usize,
    /// Width of the categorical tables.
    pub table_dim: usize,
    /// Gate hidden width; 0 means `dim / 4`.
    pub gate_hidden: usize,
    /// Graph layers.
    pub layers: usize,
    /// Hidden layers of the MLP variants.
    pub mlp_layers: usize,
    pub heads: usize,
    pub leaky_slope: f64,
    pub layer_kind: LayerKind,
    pub moe_norm: MoeNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            text_dim: 32,
            table_dim: 16,
            gate_hidden: 0,
            layers: 4,
            mlp_layers: 1,
            heads: 1,
            leaky_slope: 0.2,
            layer_kind: LayerKind::Gat,
            moe_norm: MoeNorm::Softmax,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 || self.table_dim == 0 || self.layers == 0 || self.mlp_layers == 0 || self.heads == 0 {
            return bad("dim, table_dim, layers, mlp_layers and heads must be positive");
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad("dim must be divisible by heads");
        }
        if self.text_dim < crate::embeddings::MIN_TEXT_DIM {
            return bad("text_dim must be at least 8");
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad("leaky_slope must be in (0, 1)");
        }
        Ok(())
    }
}

/// Variant, effective mask and dimensions: everything that fixes the
/// parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub mask: FeatureMask,
    pub config: ModelConfig,
}

impl ModelSpec {
    pub fn new(variant: Variant, mask: FeatureMask, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            variant,
            mask: variant.effective_mask(mask),
            config,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatHead<T = Tensor> {
    /// `d_in x d_head`.
    pub w: T,
    /// `d_head x 1`, applied to the receiving node.
    pub a_src: T,
    /// `d_head x 1`, applied to the neighbor.
    pub a_dst: T,
}

/// One graph layer; heads are concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayerParams<T = Tensor> {
    pub heads: Vec<GatHead<T>>,
}

impl GatLayerParams<Tensor> {
    pub fn init(d_in: usize, d_out: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let d_head = d_out / heads;
        Self {
            heads: (0..heads)
                .map(|_| GatHead {
                    w: glorot(d_in, d_head, rng),
                    a_src: glorot(d_head, 1, rng),
                    a_dst: glorot(d_head, 1, rng),
                })
                .collect(),
        }
    }
}

impl<T> GatLayerParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, Group, &T) -> U) -> GatLayerParams<U> {
        let g = Group::Random;
        GatLayerParams {
            heads: self
                .heads
                .iter()
                .enumerate()
                .map(|(k, h)| GatHead {
                    w: f(&join(prefix, &format!("head{k}.w")), g, &h.w),
                    a_src: f(&join(prefix, &format!("head{k}.a_src")), g, &h.a_src),
                    a_dst: f(&join(prefix, &format!("head{k}.a_dst")), g, &h.a_dst),
                })
                .collect(),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Group, &mut T)) {
        let g = Group::Random;
        for (k, h) in self.heads.iter_mut().enumerate() {
            f(&join(prefix, &format!("head{k}.w")), g, &mut h.w);
            f(&join(prefix, &format!("head{k}.a_src")), g, &mut h.a_src);
            f(&join(prefix, &format!("head{k}.a_dst")), g, &mut h.a_dst);
        }
    }
}

/// Every trainable tensor of a model. Only the parts a variant uses are
/// populated: `layers` for graph variants, `dense` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct SpqiParams<T = Tensor> {
    pub tables: CategoricalTables<T>,
    /// Skip-gram product vectors by catalog row (pretrained).
    pub behavior: T,
    pub moe: MoeParams<T>,
    pub layers: Vec<GatLayerParams<T>>,
    pub dense: Vec<T>,
    /// `dim x 1`.
    pub theta: T,
}

impl SpqiParams<Tensor> {
    pub fn init(spec: &ModelSpec, index: &CatalogIndex, behavior: Tensor, seed: u64) -> Result<Self> {
        let c = &spec.config;
        if behavior.rows() != index.n_products() + 1 {
            return Err(Error::shape("behavior table", behavior.shape(), &[index.n_products() + 1]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tables = CategoricalTables::init(index, c.table_dim, &mut rng)?;
        let k = c.table_dim;
        let moe = MoeParams::init([c.text_dim, c.text_dim, k, k, k, N_BEHAVIOR], c.dim, c.gate_hidden, seed ^ 0x5eed)?;
        let (mut layers, mut dense) = (Vec::new(), Vec::new());
        if spec.variant.is_graph() {
            layers = (0..c.layers).map(|_| GatLayerParams::init(c.dim, c.dim, c.heads, &mut rng)).collect();
        } else {
            let n_dense = if spec.variant.is_text_only() { 1 } else { c.mlp_layers };
            for l in 0..n_dense {
                let d_in = if l == 0 && spec.variant == Variant::MlpConcat {
                    spec.mask.count() * c.dim
                } else {
                    c.dim
                };
                dense.push(glorot(d_in, c.dim, &mut rng));
            }
        }
        Ok(Self {
            tables,
            behavior,
            moe,
            layers,
            dense,
            theta: glorot(c.dim, 1, &mut rng),
        })
    }

    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut(&mut |_, _, t| t.data_mut().fill(0.0));
        out
    }

    pub fn n_values(&self) -> usize {
        let mut n = 0;
        self.map(&mut |_, _, t| n += t.numel());
        n
    }
}

impl<T> SpqiParams<T> {
    /// Visits tensors in a fixed order with hierarchical names.
    pub fn map<U>(&self, f: &mut dyn FnMut(&str, Group, &T) -> U) -> SpqiParams<U> {
        SpqiParams {
            tables: self.tables.map("tables", f),
            behavior: f("behavior", Group::Pretrained, &self.behavior),
            moe: self.moe.map("moe", f),
            layers: self.layers.iter().enumerate().map(|(l, p)| p.map(&format!("gat{l}"), f)).collect(),
            dense: self
                .dense
                .iter()
                .enumerate()
                .map(|(l, t)| f(&format!("dense{l}.w"), Group::Random, t))
                .collect(),
            theta: f("theta", Group::Random, &self.theta),
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Group, &mut T)) {
        self.tables.visit_mut("tables", f);
        f("behavior", Group::Pretrained, &mut self.behavior);
        self.moe.visit_mut("moe", f);
        for (l, p) in self.layers.iter_mut().enumerate() {
            p.visit_mut(&format!("gat{l}"), f);
        }
        for (l, t) in self.dense.iter_mut().enumerate() {
            f(&format!("dense{l}.w"), Group::Random, t);
        }
        f("theta", Group::Random, &mut self.theta);
    }
}

/// Binds parameters to a tape; tensors rejected by `trainable` become
/// constants.
pub fn bind(tape: &mut Tape, p: &SpqiParams, trainable: &dyn Fn(&str, Group) -> bool) -> SpqiParams<Var> {
    p.map(&mut |name, g, t| {
        if trainable(name, g) {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    })
}

/// Row-normalized adjacency.
fn mean_weights(adj: &[bool], n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for (row, out) in adj.chunks(n).zip(data.chunks_mut(n)) {
        let k = row.iter().filter(|&&e| e).count() as f64;
        for (o, &e) in out.iter_mut().zip(row) {
            if e {
                *o = 1.0 / k;
            }
        }
    }
    Tensor::matrix(n, n, data).expect("square")
}

/// One layer: `z = H W`, `e_ij = leaky_relu(a_src . z_i + a_dst . z_j)`,
/// `alpha = masked_softmax(e, adj)`, `out = elu(alpha z)`, heads concatenated.
/// Returns the output and each head's attention matrix.
pub fn gat_layer_vars(
    tape: &mut Tape,
    h: Var,
    adj: &Arc<Vec<bool>>,
    p: &GatLayerParams<Var>,
    kind: LayerKind,
    slope: f64,
) -> Result<(Var, Vec<Var>)> {
    let n = tape.value(h).rows();
    if adj.len() != n * n {
        return Err(Error::shape("gat_layer adjacency", &[n, n], &[adj.len()]));
    }
    if (0..n).any(|i| !adj[i * n + i]) {
        return Err(Error::Contract("adjacency diagonal must be true".into()));
    }
    let mut outs = Vec::with_capacity(p.heads.len());
    let mut alphas = Vec::with_capacity(p.heads.len());
    for head in &p.heads {
        let z = tape.matmul(h, head.w)?;
        let alpha = match kind {
            LayerKind::Gat => {
                let s = tape.matmul(z, head.a_src)?;
                let d = tape.matmul(z, head.a_dst)?;
                let e = tape.outer_add(s, d)?;
                let e = tape.activation(Activation::LeakyRelu(slope), e)?;
                tape.masked_softmax(e, adj.clone())?
            }
            LayerKind::Gcn => tape.constant(mean_weights(adj, n)),
        };
        let agg = tape.matmul(alpha, z)?;
        outs.push(tape.activation(Activation::Elu, agg)?);
        alphas.push(alpha);
    }
    let out = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((out, alphas))
}

/// Plain-tensor form of [`gat_layer_vars`].
pub fn gat_layer(h: &Tensor, adj: &[bool], p: &GatLayerParams, kind: LayerKind, slope: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let pv = p.map("", &mut |_, _, t| tape.constant(t.clone()));
    let (out, _) = gat_layer_vars(&mut tape, hv, &Arc::new(adj.to_vec()), &pv, kind, slope)?;
    Ok(tape.value(out).clone())
}

/// Probabilities (`B x 1`) from the six batched feature variables.
pub fn forward_features(
    tape: &mut Tape,
    feats: &[Var; N_TYPES],
    adj: &Arc<Vec<bool>>,
    p: &SpqiParams<Var>,
    spec: &ModelSpec,
) -> Result<Var> {
    let b = tape.value(feats[0]).rows();
    let c = &spec.config;
    let types = spec.mask.types();
    let projected = project_vars(tape, feats, &p.moe, &types)?;
    let h = match spec.variant {
        Variant::MlpMoe | Variant::SpqiMoe => {
            let mut all = Vec::with_capacity(N_TYPES);
            let mut it = projected.iter();
            for t in FeatureType::ALL {
                all.push(if spec.mask.contains(t) {
                    *it.next().expect("projection per active type")
                } else {
                    tape.constant(Tensor::zeros(&[b, c.dim]))
                });
            }
            let all: [Var; N_TYPES] = all.try_into().expect("six");
            moe_mix_vars(tape, &all, &p.moe, spec.mask, c.moe_norm)?.0
        }
        Variant::MlpConcat => tape.concat_cols(&projected)?,
        Variant::SpqiConcat | Variant::TextOnlyQ | Variant::TextOnlyQa => {
            let mut acc = projected[0];
            for &x in &projected[1..] {
                acc = tape.add(acc, x)?;
            }
            tape.scale(acc, 1.0 / projected.len() as f64)
        }
    };
    let mut h = h;
    if spec.variant.is_graph() {
        for layer in &p.layers {
            h = gat_layer_vars(tape, h, adj, layer, c.layer_kind, c.leaky_slope)?.0;
        }
    } else {
        for &w in &p.dense {
            let x = tape.matmul(h, w)?;
            h = tape.activation(Activation::Elu, x)?;
        }
    }
    let logits = tape.matmul(h, p.theta)?;
    tape.activation(Activation::Sigmoid, logits)
}

/// Forward pass over prepared question inputs.
pub fn forward_inputs(
    tape: &mut Tape,
    inputs: &[&QuestionInputs],
    adj: &Arc<Vec<bool>>,
    p: &SpqiParams<Var>,
    spec: &ModelSpec,
) -> Result<Var> {
    let feats = feature_vars(tape, inputs, &p.tables, p.behavior)?;
    forward_features(tape, &feats, adj, p, spec)
}

/// Probabilities for materialized bundles over an adjacency. Runs every
/// variant; graph layers are skipped by the non-graph ones.
pub fn spqi_forward(adj: &[bool], bundles: &[FeatureBundle], p: &SpqiParams, spec: &ModelSpec) -> Result<Vec<f64>> {
    let b = bundles.len();
    if b == 0 {
        return Err(Error::Empty("bundles"));
    }
    if adj.len() != b * b {
        return Err(Error::shape("spqi_forward", &[b, b], &[adj.len()]));
    }
    let mut tape = Tape::new();
    let vars = p.map(&mut |_, _, t| tape.constant(t.clone()));
    let mut feats = Vec::with_capacity(N_TYPES);
    for t in FeatureType::ALL {
        let cols = bundles[0].get(t).len();
        let mut data = Vec::with_capacity(b * cols);
        for bundle in bundles {
            let v = bundle.get(t);
            if v.len() != cols {
                return Err(Error::shape("bundle feature", &[cols], &[v.len()]));
            }
            data.extend_from_slice(v);
        }
        feats.push(tape.constant(Tensor::matrix(b, cols, data)?));
    }
    let feats: [Var; N_TYPES] = feats.try_into().expect("six");
    let out = forward_features(&mut tape, &feats, &Arc::new(adj.to_vec()), &vars, spec)?;
    Ok(tape.value(out).data().to_vec())
}

/// Baseline entry point; identical to [`spqi_forward`] with a non-graph
/// or concatenating variant in `spec`.
pub fn baseline_forward(adj: &[bool], bundles: &[FeatureBundle], p: &SpqiParams, spec: &ModelSpec) -> Result<Vec<f64>> {
    if spec.variant == Variant::SpqiMoe {
        return Err(Error::Config("spqi-moe is not a baseline variant".into()));
    }
    spqi_forward(adj, bundles, p, spec)
}
