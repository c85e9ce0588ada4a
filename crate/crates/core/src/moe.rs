//! Per-feature projection to a common width and mixture-of-experts mixing.
//!
//! A batch of `B` questions is handled in one pass. The six projections
//! (`B x n` each) are stacked type-major into `S: 6 x (B*n)`, so column
//! `b*n + z` holds dimension `z` of question `b` for every feature type.
//! Gate scores use the same layout and are normalized down each column.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{FeatureBundle, FeatureType};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Tape, Tensor, Var};
use crate::params::{join, Group};

pub const N_TYPES: usize = 6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoeNorm {
    #[default]
    Softmax,
    RawRatio,
}

/// Feature types that take part in a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureMask([bool; N_TYPES]);

impl FeatureMask {
    pub const FULL: FeatureMask = FeatureMask([true; N_TYPES]);

    pub fn from_types(types: &[FeatureType]) -> Result<Self> {
        let mut m = [false; N_TYPES];
        for t in types {
            m[t.index()] = true;
        }
        let mask = FeatureMask(m);
        if mask.count() == 0 {
            return Err(Error::Config("feature mask is empty".into()));
        }
        Ok(mask)
    }

    pub fn contains(self, t: FeatureType) -> bool {
        self.0[t.index()]
    }

    pub fn count(self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn as_slice(&self) -> &[bool; N_TYPES] {
        &self.0
    }

    pub fn types(self) -> Vec<FeatureType> {
        FeatureType::ALL.into_iter().filter(|t| self.contains(*t)).collect()
    }

    fn family(name: &str) -> Option<&'static [FeatureType]> {
        use FeatureType::*;
        Some(match name {
            "text" => &[TextQ, TextA],
            "product" => &[Product, Category, ParentCategory],
            "behavior" => &[Behavior],
            "full" => &FeatureType::ALL,
            "text_q" => &[TextQ],
            "text_a" => &[TextA],
            "product_id" => &[Product],
            "category" => &[Category],
            "parent_category" => &[ParentCategory],
            _ => return None,
        })
    }
}

/// Comma-separated families (`text`, `product`, `behavior`, `full`) or
/// single types (`text_q`, `text_a`, `product_id`, `category`,
/// `parent_category`).
impl FromStr for FeatureMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut types = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let fam = Self::family(part)
                .ok_or_else(|| Error::Config(format!("unknown feature {part:?}")))?;
            types.extend_from_slice(fam);
        }
        Self::from_types(&types)
    }
}

impl fmt::Display for FeatureMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.types().iter().map(|t| t.name()).collect();
        f.write_str(&names.join(","))
    }
}

impl Serialize for FeatureMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.types().iter().map(|t| t.name()))
    }
}

impl<'de> Deserialize<'de> for FeatureMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        names.join(",").parse().map_err(serde::de::Error::custom)
    }
}

/// The ablation columns: feature families a model may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Behavior,
    Product,
    TextProduct,
    TextBehavior,
    ProductBehavior,
    Full,
}

impl Subset {
    pub const ALL: [Subset; 6] = [
        Subset::Behavior,
        Subset::Product,
        Subset::TextProduct,
        Subset::TextBehavior,
        Subset::ProductBehavior,
        Subset::Full,
    ];

    pub fn mask(self) -> FeatureMask {
        let spec = match self {
            Subset::Behavior => "behavior",
            Subset::Product => "product",
            Subset::TextProduct => "text,product",
            Subset::TextBehavior => "text,behavior",
            Subset::ProductBehavior => "product,behavior",
            Subset::Full => "full",
        };
        spec.parse().expect("static subset")
    }
}

/// Six affine+ELU projections and the gate of the mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams<T = Tensor> {
    /// `in_j x n` per feature type.
    pub ffn_w: Vec<T>,
    /// `1 x n` per feature type.
    pub ffn_b: Vec<T>,
    /// `n x i`.
    pub we: T,
    /// `n x i`.
    pub we2: T,
    /// `1 x i`.
    pub c1: T,
    /// `6 x n`, one bias per (feature type, dimension).
    pub c2: T,
}

pub(crate) fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

impl MoeParams<Tensor> {
    /// Glorot-uniform weights, zero biases. `gate_hidden` of 0 means `n / 4`.
    pub fn init(in_dims: [usize; N_TYPES], n: usize, gate_hidden: usize, seed: u64) -> Result<Self> {
        if n == 0 || in_dims.contains(&0) {
            return Err(Error::Config("projection dims must be positive".into()));
        }
        let i = if gate_hidden == 0 { (n / 4).max(1) } else { gate_hidden };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            ffn_w: in_dims.iter().map(|&d| glorot(d, n, &mut rng)).collect(),
            ffn_b: (0..N_TYPES).map(|_| Tensor::zeros(&[1, n])).collect(),
            we: glorot(n, i, &mut rng),
            we2: glorot(n, i, &mut rng),
            c1: Tensor::zeros(&[1, i]),
            c2: Tensor::zeros(&[N_TYPES, n]),
        })
    }

    pub fn dim(&self) -> usize {
        self.c2.cols()
    }

    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut("", &mut |_, _, t| t.data_mut().fill(0.0));
        out
    }
}

impl<T> MoeParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, Group, &T) -> U) -> MoeParams<U> {
        let g = Group::Random;
        MoeParams {
            ffn_w: self.ffn_w.iter().enumerate().map(|(j, t)| f(&join(prefix, &format!("ffn{j}.w")), g, t)).collect(),
            ffn_b: self.ffn_b.iter().enumerate().map(|(j, t)| f(&join(prefix, &format!("ffn{j}.b")), g, t)).collect(),
            we: f(&join(prefix, "gate.we"), g, &self.we),
            we2: f(&join(prefix, "gate.we2"), g, &self.we2),
            c1: f(&join(prefix, "gate.c1"), g, &self.c1),
            c2: f(&join(prefix, "gate.c2"), g, &self.c2),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Group, &mut T)) {
        let g = Group::Random;
        for (j, t) in self.ffn_w.iter_mut().enumerate() {
            f(&join(prefix, &format!("ffn{j}.w")), g, t);
        }
        for (j, t) in self.ffn_b.iter_mut().enumerate() {
            f(&join(prefix, &format!("ffn{j}.b")), g, t);
        }
        f(&join(prefix, "gate.we"), g, &mut self.we);
        f(&join(prefix, "gate.we2"), g, &mut self.we2);
        f(&join(prefix, "gate.c1"), g, &mut self.c1);
        f(&join(prefix, "gate.c2"), g, &mut self.c2);
    }
}

/// Binds every tensor as a trainable tape parameter.
pub fn bind_moe(tape: &mut Tape, p: &MoeParams) -> MoeParams<Var> {
    p.map("", &mut |_, _, t| tape.param(t.clone()))
}

/// `elu(x W_j + b_j)` for each feature type `j` in `types`.
pub fn project_vars(tape: &mut Tape, inputs: &[Var; N_TYPES], p: &MoeParams<Var>, types: &[FeatureType]) -> Result<Vec<Var>> {
    types
        .iter()
        .map(|t| {
            let j = t.index();
            let x = tape.matmul(inputs[j], p.ffn_w[j])?;
            let x = tape.add_row(x, p.ffn_b[j])?;
            tape.activation(Activation::Elu, x)
        })
        .collect()
}

/// Mixes six `B x n` projections into `h: B x n`. Also returns the gate
/// weights `Lambda: 6 x (B*n)`. Masked types get zero weight and are left
/// out of the normalization.
pub fn moe_mix_vars(
    tape: &mut Tape,
    projected: &[Var; N_TYPES],
    p: &MoeParams<Var>,
    mask: FeatureMask,
    norm: MoeNorm,
) -> Result<(Var, Var)> {
    let (b, n) = (tape.value(projected[0]).rows(), tape.value(projected[0]).cols());
    let stacked = tape.stack_rows(projected)?;
    let rows = tape.reshape(stacked, &[N_TYPES * b, n])?;
    let hidden = tape.matmul(rows, p.we)?;
    let hidden = tape.add_row(hidden, p.c1)?;
    let we2t = tape.transpose(p.we2);
    let scores = tape.matmul(hidden, we2t)?;
    let tiled = tape.gather_rows(p.c2, Arc::new((0..N_TYPES * b).map(|r| r / b).collect()))?;
    let scores = tape.add(scores, tiled)?;
    let scores = tape.reshape(scores, &[N_TYPES, b * n])?;
    let active = Some(Arc::new(mask.as_slice().to_vec()));
    let lambda = match norm {
        MoeNorm::Softmax => tape.softmax_axis0(scores, active)?,
        MoeNorm::RawRatio => tape.ratio_axis0(scores, active)?,
    };
    let weighted = tape.mul(stacked, lambda)?;
    let h = tape.sum_axis0(weighted);
    let h = tape.reshape(h, &[b, n])?;
    Ok((h, lambda))
}

/// Projects one bundle: row `j` of the result is `FFN_j(feature_j)`.
pub fn project_features(bundle: &FeatureBundle, p: &MoeParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = p.map("", &mut |_, _, t| tape.constant(t.clone()));
    let mut inputs = Vec::with_capacity(N_TYPES);
    for t in FeatureType::ALL {
        let v = bundle.get(t);
        if v.len() != p.ffn_w[t.index()].rows() {
            return Err(Error::shape("project_features", &[v.len()], p.ffn_w[t.index()].shape()));
        }
        inputs.push(tape.constant(Tensor::matrix(1, v.len(), v.to_vec())?));
    }
    let inputs: [Var; N_TYPES] = inputs.try_into().expect("six inputs");
    let rows = project_vars(&mut tape, &inputs, &vars, &FeatureType::ALL)?;
    let out = tape.stack_rows(&rows)?;
    Ok(tape.value(out).clone())
}

/// Mixes one question's projected features `F: 6 x n` into `(h, Lambda)`.
pub fn moe_mix(f: &Tensor, p: &MoeParams, mask: FeatureMask, norm: MoeNorm) -> Result<(Vec<f64>, Tensor)> {
    if f.shape() != [N_TYPES, p.dim()] {
        return Err(Error::shape("moe_mix", f.shape(), &[N_TYPES, p.dim()]));
    }
    if !f.is_finite() {
        return Err(Error::NonFinite("moe_mix input"));
    }
    let mut tape = Tape::new();
    let vars = p.map("", &mut |_, _, t| tape.constant(t.clone()));
    let rows: Vec<Var> = (0..N_TYPES)
        .map(|j| tape.constant(Tensor::matrix(1, p.dim(), f.row(j).to_vec()).expect("row")))
        .collect();
    let rows: [Var; N_TYPES] = rows.try_into().expect("six rows");
    let (h, lambda) = moe_mix_vars(&mut tape, &rows, &vars, mask, norm)?;
    Ok((tape.value(h).data().to_vec(), tape.value(lambda).clone()))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::numerics::grad_check;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rand::Rng::random_range(rng, -scale..scale)).collect()).unwrap()
    }

    fn random_params(n: usize, seed: u64) -> MoeParams {
        let mut p = MoeParams::init([n; 6], n, 0, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 99);
        p.c1 = random(1, p.c1.cols(), &mut rng, 0.5);
        p.c2 = random(6, n, &mut rng, 0.5);
        p
    }

    /// Straight-line evaluation of the gate and mix for one question.
    fn reference_mix(f: &Tensor, p: &MoeParams, mask: FeatureMask) -> (Vec<f64>, Vec<Vec<f64>>) {
        let (n, i) = (p.dim(), p.we.cols());
        let mut g = vec![vec![0.0; n]; 6];
        for j in 0..6 {
            let hidden: Vec<f64> = (0..i)
                .map(|c| (0..n).map(|z| f.get(j, z) * p.we.get(z, c)).sum::<f64>() + p.c1.get(0, c))
                .collect();
            for z in 0..n {
                g[j][z] = (0..i).map(|c| hidden[c] * p.we2.get(z, c)).sum::<f64>() + p.c2.get(j, z);
            }
        }
        let mut lambda = vec![vec![0.0; n]; 6];
        let mut h = vec![0.0; n];
        for z in 0..n {
            let on: Vec<usize> = (0..6).filter(|&j| mask.as_slice()[j]).collect();
            let max = on.iter().map(|&j| g[j][z]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = on.iter().map(|&j| (g[j][z] - max).exp()).sum();
            for &j in &on {
                lambda[j][z] = (g[j][z] - max).exp() / total;
                h[z] += f.get(j, z) * lambda[j][z];
            }
        }
        (h, lambda)
    }

    #[test]
    fn projection_examples() {
        let n = 4;
        let p = MoeParams::init([3, 3, 4, 4, 4, 6], n, 0, 1).unwrap();
        let bundle = FeatureBundle {
            question_text_vec: vec![0.1, 0.2, 0.3],
            answer_text_vec: vec![0.0, -0.5, 0.3],
            product_vec: vec![1.0, 2.0, 3.0, 4.0],
            category_vec: vec![0.3; 4],
            parent_category_vec: vec![-0.3; 4],
            behavior_vec: [0.5, 1.0, 1.0, 0.5, 1.0, 1.0],
        };
        let zero = project_features(&bundle, &p.zeroed()).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let mut ident = p.zeroed();
        ident.ffn_w[2] = Tensor::eye(4);
        let out = project_features(&bundle, &ident).unwrap();
        assert_eq!(out.row(2), &[1.0, 2.0, 3.0, 4.0]);

        let out = project_features(&bundle, &p).unwrap();
        for t in FeatureType::ALL {
            let j = t.index();
            let x = bundle.get(t);
            for z in 0..n {
                let pre: f64 = x.iter().enumerate().map(|(r, v)| v * p.ffn_w[j].get(r, z)).sum::<f64>() + p.ffn_b[j].get(0, z);
                let want = if pre > 0.0 { pre } else { pre.exp_m1() };
                assert!((out.get(j, z) - want).abs() < 1e-14);
            }
        }
        let mut short = bundle.clone();
        short.product_vec.pop();
        assert!(project_features(&short, &p).is_err());
    }

    #[test]
    fn equal_scores_give_uniform_weights() {
        let p = random_params(4, 2).zeroed();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random(6, 4, &mut rng, 1.0);
        let (h, lambda) = moe_mix(&f, &p, FeatureMask::FULL, MoeNorm::Softmax).unwrap();
        for v in lambda.data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
        for z in 0..4 {
            let mean = (0..6).map(|j| f.get(j, z)).sum::<f64>() / 6.0;
            assert!((h[z] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn random_case_matches_reference() {
        let p = random_params(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = random(6, 4, &mut rng, 1.0);
        let mask: FeatureMask = "text,behavior".parse().unwrap();
        for m in [FeatureMask::FULL, mask] {
            let (h, lambda) = moe_mix(&f, &p, m, MoeNorm::Softmax).unwrap();
            let (rh, rl) = reference_mix(&f, &p, m);
            for z in 0..4 {
                assert!((h[z] - rh[z]).abs() < 1e-12);
                let col: f64 = (0..6).map(|j| lambda.get(j, z)).sum();
                assert!((col - 1.0).abs() < 1e-12);
                for j in 0..6 {
                    assert!((lambda.get(j, z) - rl[j][z]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_survivor_passes_through() {
        let p = random_params(4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random(6, 4, &mut rng, 1.0);
        for t in FeatureType::ALL {
            let m = FeatureMask::from_types(&[t]).unwrap();
            for norm in [MoeNorm::Softmax, MoeNorm::RawRatio] {
                let (h, lambda) = moe_mix(&f, &p, m, norm).unwrap();
                assert_eq!(h, f.row(t.index()), "{t:?} {norm:?}");
                assert!(lambda.row(t.index()).iter().all(|&v| v == 1.0));
            }
        }
    }

    #[test]
    fn raw_ratio_is_literal_ratio() {
        let mut p = random_params(2, 9).zeroed();
        p.c2 = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0], vec![0.0; 2], vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]]).unwrap();
        let f = Tensor::full(&[6, 2], 1.0);
        let (_, lambda) = moe_mix(&f, &p, FeatureMask::FULL, MoeNorm::RawRatio).unwrap();
        assert_eq!(lambda.get(0, 0), 0.25);
        assert_eq!(lambda.get(1, 0), 0.75);
        // An all-zero column hits the denominator floor instead of dividing by zero.
        assert!(lambda.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mix_gradients() {
        let p = random_params(4, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f: Vec<Tensor> = (0..6).map(|_| random(3, 4, &mut rng, 1.0)).collect();
        for mask in [FeatureMask::FULL, "product,behavior".parse().unwrap()] {
            let mut inputs = f.clone();
            inputs.extend([p.we.clone(), p.we2.clone(), p.c1.clone(), p.c2.clone()]);
            let err = grad_check(
                |tape, v| {
                    let rows: [Var; 6] = v[..6].try_into().unwrap();
                    let q = MoeParams {
                        ffn_w: vec![],
                        ffn_b: vec![],
                        we: v[6],
                        we2: v[7],
                        c1: v[8],
                        c2: v[9],
                    };
                    let (h, _) = moe_mix_vars(tape, &rows, &q, mask, MoeNorm::Softmax)?;
                    let w = tape.constant(Tensor::matrix(4, 1, vec![0.7, -1.3, 0.4, 0.9])?);
                    let y = tape.matmul(h, w)?;
                    let y = tape.activation(Activation::Sigmoid, y)?;
                    Ok(tape.sum_all(y))
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{mask}: {err}");
        }
    }

    #[test]
    fn mask_parsing() {
        let m: FeatureMask = "text,behavior".parse().unwrap();
        assert_eq!(m.types(), vec![FeatureType::TextQ, FeatureType::TextA, FeatureType::Behavior]);
        assert_eq!(m.to_string(), "text_q,text_a,behavior");
        assert_eq!("full".parse::<FeatureMask>().unwrap(), FeatureMask::FULL);
        assert!("".parse::<FeatureMask>().is_err());
        assert!("colour".parse::<FeatureMask>().is_err());
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<FeatureMask>(&json).unwrap(), m);
        assert_eq!(Subset::ALL.iter().map(|s| s.mask()).collect::<std::collections::BTreeSet<_>>().len(), 6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn normalization_and_dominance(seed in any::<u64>(), winner in 0usize..6, margin_dim in 0usize..4) {
            let p = random_params(4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let f = random(6, 4, &mut rng, 2.0);
            let (_, lambda) = moe_mix(&f, &p, FeatureMask::FULL, MoeNorm::Softmax).unwrap();
            for z in 0..4 {
                let col: f64 = (0..6).map(|j| lambda.get(j, z)).sum();
                prop_assert!((col - 1.0).abs() < 1e-12);
            }
            prop_assert!(lambda.data().iter().all(|&v| v > 0.0));

            // Dominance: push one type's scores 20 above every other.
            let mut q = p.zeroed();
            q.ffn_w = p.ffn_w.clone();
            let mut c2 = vec![0.0; 24];
            for z in 0..4 {
                c2[winner * 4 + z] = 20.0;
            }
            q.c2 = Tensor::matrix(6, 4, c2).unwrap();
            let (h, _) = moe_mix(&f, &q, FeatureMask::FULL, MoeNorm::Softmax).unwrap();
            prop_assert!((h[margin_dim] - f.get(winner, margin_dim)).abs() < 1e-6);
        }
    }
}
