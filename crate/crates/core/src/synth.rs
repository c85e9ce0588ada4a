//! Deterministic synthetic shopping world with planted intent signals.
//!
//! Generation runs in three phases:
//!
//! 1. **Latents**: taxonomy, product and category latents, user preferences
//!    and one latent record per question (prior purchase indicator, text
//!    sign, noise, Bernoulli uniform). These do not depend on the signal
//!    weights, so calibration can re-resolve them cheaply.
//! 2. **Resolution**: intent is `u < sigmoid(logit)` with
//!    `logit = b + w_prior (2x - 1) + w_cat g u_c + w_prod kappa_p + w_text s + noise e`.
//!    The intercept `b` is bisected to hit the target SPQ rate and the
//!    category scale `g` is grown until per-category rates reach the
//!    requested spread.
//! 3. **Emission**: purchases are laid out in four 28-day windows around each
//!    question so that the labeling rule recovers the resolved intent and the
//!    T-1 window indicator equals the planted prior purchase.
//!
//! All randomness comes from ChaCha8 streams keyed by the seed.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::catalog::{
    label_question, pearson, purchase_window_correlations, Category, CategoryId, Dataset, Label,
    Product, ProductCatalog, ProductId, PurchaseEvent, PurchaseLog, Question, QuestionId, Split,
    UserId, WindowCorrelations, DEFAULT_WINDOW_DAYS, SECONDS_PER_DAY,
};
use crate::error::{Error, Result};
use crate::numerics::sigmoid;

const WINDOW: i64 = DEFAULT_WINDOW_DAYS * SECONDS_PER_DAY;
const EPISODE: i64 = 150 * SECONDS_PER_DAY;
const BASE_TS: i64 = 1_500_000_000;
/// Allowed gap between realized and target SPQ rate.
pub const RATE_TOLERANCE: f64 = 0.02;
/// Categories with fewer questions are ignored by the spread check.
pub const SPREAD_MIN_QUESTIONS: usize = 20;
pub const CALIBRATION_PROBE: usize = 20_000;

const WH_WORDS: [&str; 6] = ["what", "how", "is", "can", "does", "where"];
const FILLERS: [&str; 6] = ["the", "a", "my", "for", "of", "about"];
const SHOPPING_PHRASES: [&str; 5] = ["price", "deal", "order", "cost", "delivery"];
const INFO_PHRASES: [&str; 5] = ["history", "recipe", "made", "meaning", "work"];
const ACKS: [&str; 4] = ["ok", "sure", "here's", "sorry"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalStrengths {
    pub prior_purchase_weight: f64,
    pub category_weight: f64,
    /// Per-product latent shared by every question about the product. It
    /// also raises the chance of a prior purchase, so other questions about
    /// the same product carry evidence about it.
    pub product_weight: f64,
    pub text_weight: f64,
    pub noise: f64,
}

impl Default for SignalStrengths {
    fn default() -> Self {
        Self {
            prior_purchase_weight: 2.6,
            category_weight: 4.0,
            product_weight: 3.0,
            text_weight: 0.3,
            noise: 0.3,
        }
    }
}

impl SignalStrengths {
    pub fn zero() -> Self {
        Self {
            prior_purchase_weight: 0.0,
            category_weight: 0.0,
            product_weight: 0.0,
            text_weight: 0.0,
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_products: usize,
    /// Leaf categories; parents are added on top.
    pub n_categories: usize,
    /// Leaf categories per parent.
    pub taxonomy_branching: usize,
    pub n_questions: usize,
    pub target_spq_rate: f64,
    pub signal_strengths: SignalStrengths,
    pub category_spq_rate_spread: f64,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    /// Mean background purchases per user per 28-day window.
    pub background_rate: f64,
    pub preferred_categories: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 4_000,
            n_products: 400,
            n_categories: 40,
            taxonomy_branching: 5,
            n_questions: 24_000,
            target_spq_rate: 0.5,
            signal_strengths: SignalStrengths::default(),
            category_spq_rate_spread: 0.5,
            train_fraction: 20.0 / 24.0,
            validation_fraction: 2.0 / 24.0,
            background_rate: 2.0,
            preferred_categories: 3,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let s = &self.signal_strengths;
        if !(self.target_spq_rate > 0.0 && self.target_spq_rate < 1.0) {
            return bad(format!("target_spq_rate {} outside (0,1)", self.target_spq_rate));
        }
        for (name, w) in [
            ("prior_purchase_weight", s.prior_purchase_weight),
            ("category_weight", s.category_weight),
            ("product_weight", s.product_weight),
            ("text_weight", s.text_weight),
            ("noise", s.noise),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {w}"));
            }
        }
        if self.n_categories == 0 || self.n_users == 0 || self.n_questions == 0 {
            return bad("n_users, n_categories and n_questions must be positive".into());
        }
        if self.n_products < self.n_categories {
            return bad(format!(
                "n_products ({}) must be >= n_categories ({})",
                self.n_products, self.n_categories
            ));
        }
        if self.taxonomy_branching == 0 {
            return bad("taxonomy_branching must be positive".into());
        }
        if !(0.0..1.0).contains(&self.category_spq_rate_spread) {
            return bad("category_spq_rate_spread must be in [0,1)".into());
        }
        if self.category_spq_rate_spread > 0.0 && s.category_weight == 0.0 {
            return bad("category_spq_rate_spread > 0 needs category_weight > 0".into());
        }
        let (tr, va) = (self.train_fraction, self.validation_fraction);
        if !(tr > 0.0 && va >= 0.0 && tr + va <= 1.0) {
            return bad(format!("split fractions {tr}/{va} invalid"));
        }
        if self.preferred_categories == 0 || self.preferred_categories > self.n_categories {
            return bad("preferred_categories must be in 1..=n_categories".into());
        }
        if !(self.background_rate >= 0.0 && self.background_rate.is_finite()) {
            return bad("background_rate must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LatentQuestion {
    user: u32,
    leaf: usize,
    product: u32,
    ts: i64,
    prior: bool,
    far2: bool,
    far3: bool,
    text_sign: f64,
    noise: f64,
    uniform: f64,
    split: Split,
}

/// Everything drawn before the signal weights matter.
struct Latents {
    n_parents: usize,
    leaf_latent: Vec<f64>,
    kappa: Vec<f64>,
    products_by_leaf: Vec<Vec<u32>>,
    popularity: Vec<WeightedIndex<f64>>,
    prefs: Vec<Vec<usize>>,
    questions: Vec<LatentQuestion>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Latents {
    fn draw(cfg: &SynthConfig) -> Result<Self> {
        let mut world = stream(cfg.seed, 1);
        let n_leaf = cfg.n_categories;
        let n_parents = n_leaf.div_ceil(cfg.taxonomy_branching);

        // Evenly spaced category latents in [-1, 1], shuffled.
        let mut leaf_latent: Vec<f64> = (0..n_leaf)
            .map(|i| {
                if n_leaf == 1 {
                    0.0
                } else {
                    -1.0 + 2.0 * i as f64 / (n_leaf - 1) as f64
                }
            })
            .collect();
        for i in (1..n_leaf).rev() {
            let j = world.random_range(0..=i);
            leaf_latent.swap(i, j);
        }

        let kappa: Vec<f64> = (0..cfg.n_products)
            .map(|_| world.sample::<f64, _>(StandardNormal))
            .collect();
        let mut products_by_leaf = vec![Vec::new(); n_leaf];
        for p in 0..cfg.n_products {
            products_by_leaf[p % n_leaf].push(p as u32);
        }
        let popularity = products_by_leaf
            .iter()
            .map(|ps| {
                WeightedIndex::new((0..ps.len()).map(|r| 1.0 / (r as f64 + 1.0)))
                    .map_err(|e| Error::Generation(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let prefs: Vec<Vec<usize>> = (0..cfg.n_users)
            .map(|_| rand::seq::index::sample(&mut world, n_leaf, cfg.preferred_categories).into_vec())
            .collect();
        let user_offset: Vec<i64> = (0..cfg.n_users)
            .map(|_| world.random_range(0..EPISODE))
            .collect();

        let mut qrng = stream(cfg.seed, 2);
        let mut episodes = vec![0i64; cfg.n_users];
        let mut questions = Vec::with_capacity(cfg.n_questions);
        for _ in 0..cfg.n_questions {
            let user = qrng.random_range(0..cfg.n_users);
            let leaf = if qrng.random_bool(0.6) {
                prefs[user][qrng.random_range(0..prefs[user].len())]
            } else {
                qrng.random_range(0..n_leaf)
            };
            let product = products_by_leaf[leaf][popularity[leaf].sample(&mut qrng)];
            let episode = episodes[user];
            episodes[user] += 1;
            let ts = BASE_TS
                + user_offset[user]
                + episode * EPISODE
                + 3 * WINDOW
                + qrng.random_range(0..2 * SECONDS_PER_DAY);
            let prior = qrng.random_bool(sigmoid(kappa[product as usize]));
            let far_p = if prior { 0.5 } else { 0.25 };
            let split = {
                let u: f64 = qrng.random();
                if u < cfg.train_fraction {
                    Split::Train
                } else if u < cfg.train_fraction + cfg.validation_fraction {
                    Split::Validation
                } else {
                    Split::Test
                }
            };
            questions.push(LatentQuestion {
                user: user as u32,
                leaf,
                product,
                ts,
                prior,
                far2: qrng.random_bool(far_p),
                far3: qrng.random_bool(far_p),
                text_sign: if qrng.random_bool(0.5) { 1.0 } else { -1.0 },
                noise: qrng.sample(StandardNormal),
                uniform: qrng.random(),
                split,
            });
        }
        Ok(Self {
            n_parents,
            leaf_latent,
            kappa,
            products_by_leaf,
            popularity,
            prefs,
            questions,
        })
    }

    fn base_logits(&self, s: &SignalStrengths, category_scale: f64) -> Vec<f64> {
        self.questions
            .iter()
            .map(|q| {
                let x = if q.prior { 1.0 } else { -1.0 };
                s.prior_purchase_weight * x
                    + s.category_weight * category_scale * self.leaf_latent[q.leaf]
                    + s.product_weight * self.kappa[q.product as usize]
                    + s.text_weight * q.text_sign
                    + s.noise * q.noise
            })
            .collect()
    }

    fn realize(&self, base: &[f64], intercept: f64) -> Vec<bool> {
        self.questions
            .iter()
            .zip(base)
            .map(|(q, b)| q.uniform < sigmoid(b + intercept))
            .collect()
    }
}

/// Intent assignments plus the solved intercept and category scale.
#[derive(Debug, Clone)]
struct Resolution {
    intents: Vec<bool>,
    intercept: f64,
    category_scale: f64,
}

fn rate(intents: &[bool]) -> f64 {
    intents.iter().filter(|&&b| b).count() as f64 / intents.len() as f64
}

fn solve_intercept(lat: &Latents, base: &[f64], target: f64) -> Result<(f64, Vec<bool>)> {
    let (mut lo, mut hi) = (-60.0, 60.0);
    let mut best = (0.0, lat.realize(base, 0.0));
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let intents = lat.realize(base, mid);
        let r = rate(&intents);
        if (r - target).abs() < (rate(&best.1) - target).abs() {
            best = (mid, intents);
        }
        if (r - target).abs() <= 1e-3 {
            break;
        }
        if r < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r = rate(&best.1);
    if (r - target).abs() > RATE_TOLERANCE {
        return Err(Error::Generation(format!(
            "cannot reach SPQ rate {target} (closest {r:.4})"
        )));
    }
    Ok(best)
}

fn leaf_rates(lat: &Latents, intents: &[bool]) -> Vec<(usize, f64)> {
    let mut acc = vec![(0usize, 0usize); lat.leaf_latent.len()];
    for (q, &i) in lat.questions.iter().zip(intents) {
        acc[q.leaf].0 += 1;
        acc[q.leaf].1 += i as usize;
    }
    acc.into_iter()
        .map(|(n, s)| (n, if n == 0 { 0.0 } else { s as f64 / n as f64 }))
        .collect()
}

fn spread_ok(lat: &Latents, intents: &[bool], target: f64, spread: f64) -> bool {
    if spread == 0.0 {
        return true;
    }
    let rates: Vec<f64> = leaf_rates(lat, intents)
        .into_iter()
        .filter(|(n, _)| *n >= SPREAD_MIN_QUESTIONS)
        .map(|(_, r)| r)
        .collect();
    if rates.is_empty() {
        return true;
    }
    let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    lo <= target - spread / 2.0 && hi >= target + spread / 2.0
}

fn resolve(lat: &Latents, cfg: &SynthConfig) -> Result<Resolution> {
    let mut scale = 1.0;
    for _ in 0..12 {
        let base = lat.base_logits(&cfg.signal_strengths, scale);
        let (intercept, intents) = solve_intercept(lat, &base, cfg.target_spq_rate)?;
        if spread_ok(lat, &intents, cfg.target_spq_rate, cfg.category_spq_rate_spread) {
            return Ok(Resolution {
                intents,
                intercept,
                category_scale: scale,
            });
        }
        scale *= 1.5;
    }
    Err(Error::Generation(format!(
        "per-category SPQ rates cannot reach spread {}",
        cfg.category_spq_rate_spread
    )))
}

fn prior_correlation(lat: &Latents, res: &Resolution) -> Result<f64> {
    let x: Vec<f64> = lat.questions.iter().map(|q| q.prior as u8 as f64).collect();
    let y: Vec<f64> = res.intents.iter().map(|&b| b as u8 as f64).collect();
    pearson(&x, &y)
}

/// Summary of a generated dataset, written next to the data files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub seed: u64,
    pub n_questions: usize,
    pub n_purchases: usize,
    pub spq_rate: f64,
    pub intercept: f64,
    pub category_scale: f64,
    pub correlations: WindowCorrelations,
    pub split_sizes: BTreeMap<Split, usize>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub struct Generated {
    pub dataset: Dataset,
    pub manifest: Manifest,
}

impl Generated {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        self.dataset.write_dir(dir)?;
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

/// Builds a dataset from `cfg`. A pure function of the configuration (seed
/// included).
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Generated> {
    cfg.validate()?;
    let lat = Latents::draw(cfg)?;
    let res = resolve(&lat, cfg)?;
    let dataset = emit(cfg, &lat, &res)?;
    let correlations = purchase_window_correlations(&dataset)?;
    let mut split_sizes = BTreeMap::new();
    for q in &dataset.questions {
        *split_sizes.entry(q.split).or_insert(0) += 1;
    }
    let manifest = Manifest {
        config: cfg.clone(),
        seed: cfg.seed,
        n_questions: dataset.questions.len(),
        n_purchases: dataset.purchases.len(),
        spq_rate: rate(&res.intents),
        intercept: res.intercept,
        category_scale: res.category_scale,
        correlations,
        split_sizes,
    };
    Ok(Generated { dataset, manifest })
}

fn emit(cfg: &SynthConfig, lat: &Latents, res: &Resolution) -> Result<Dataset> {
    let n_leaf = cfg.n_categories;
    let mut cats = Vec::with_capacity(lat.n_parents + n_leaf);
    for p in 0..lat.n_parents {
        cats.push(Category {
            id: CategoryId(p as u32),
            name: format!("dept{p}"),
            parent: None,
        });
    }
    let leaf_id = |leaf: usize| CategoryId((lat.n_parents + leaf) as u32);
    for leaf in 0..n_leaf {
        cats.push(Category {
            id: leaf_id(leaf),
            name: format!("cat{leaf}"),
            parent: Some(CategoryId((leaf / cfg.taxonomy_branching) as u32)),
        });
    }
    let prods = (0..cfg.n_products)
        .map(|p| Product {
            id: ProductId(p as u32),
            name: format!("prod{p}"),
            category: leaf_id(p % n_leaf),
        })
        .collect();
    let catalog = ProductCatalog::new(cats, prods)?;

    let mut rng = stream(cfg.seed, 3);
    let background = if cfg.background_rate > 0.0 {
        Some(Poisson::new(cfg.background_rate).map_err(|e| Error::Generation(e.to_string()))?)
    } else {
        None
    };
    let mut events = Vec::new();
    let mut questions = Vec::with_capacity(lat.questions.len());
    for (idx, (q, &intent)) in lat.questions.iter().zip(&res.intents).enumerate() {
        let user = UserId(q.user);
        let pick_in = |leaf: usize, rng: &mut ChaCha8Rng| {
            ProductId(lat.products_by_leaf[leaf][lat.popularity[leaf].sample(rng)])
        };
        // [lo, hi) windows before the question, (t, t + w] after it.
        let windows = [
            (q.ts - 3 * WINDOW, q.ts - 2 * WINDOW),
            (q.ts - 2 * WINDOW, q.ts - WINDOW),
            (q.ts - WINDOW, q.ts),
            (q.ts + 1, q.ts + WINDOW + 1),
        ];
        let planted = [q.far3, q.far2, q.prior, intent];
        for (&(lo, hi), &hit) in windows.iter().zip(&planted) {
            if hit {
                let product = if hi > q.ts && rng.random_bool(0.6) {
                    ProductId(q.product)
                } else {
                    pick_in(q.leaf, &mut rng)
                };
                events.push(PurchaseEvent {
                    user,
                    product,
                    ts: rng.random_range(lo..hi),
                });
            }
            let k = background.map_or(0, |d| d.sample(&mut rng) as usize);
            for _ in 0..k {
                let prefs = &lat.prefs[q.user as usize];
                let leaf = loop {
                    let leaf = if rng.random_bool(0.8) {
                        prefs[rng.random_range(0..prefs.len())]
                    } else {
                        rng.random_range(0..n_leaf)
                    };
                    if leaf != q.leaf || n_leaf == 1 {
                        break leaf;
                    }
                };
                if leaf == q.leaf {
                    break;
                }
                events.push(PurchaseEvent {
                    user,
                    product: pick_in(leaf, &mut rng),
                    ts: rng.random_range(lo..hi),
                });
            }
        }

        let leaf_words = |rng: &mut ChaCha8Rng| format!("c{}w{}", q.leaf, rng.random_range(0..3));
        let mut question = vec![WH_WORDS[rng.random_range(0..WH_WORDS.len())].to_string()];
        for _ in 0..rng.random_range(1..=2) {
            question.push(FILLERS[rng.random_range(0..FILLERS.len())].to_string());
        }
        question.push(leaf_words(&mut rng));
        if rng.random_bool(0.5) {
            question.push(leaf_words(&mut rng));
        }
        if rng.random_bool(0.5) {
            question.push(format!("prod{}", q.product));
        }
        let phrases = if q.text_sign > 0.0 {
            &SHOPPING_PHRASES
        } else {
            &INFO_PHRASES
        };
        question.push(phrases[rng.random_range(0..phrases.len())].to_string());

        let mut answer = vec![ACKS[rng.random_range(0..ACKS.len())].to_string(), leaf_words(&mut rng)];
        let p_avail = if q.text_sign > 0.0 { 0.6 } else { 0.4 };
        answer.push(if rng.random_bool(p_avail) { "available" } else { "information" }.to_string());

        questions.push(Question {
            id: QuestionId(idx as u32),
            user,
            product: ProductId(q.product),
            ts: q.ts,
            split: q.split,
            label: None,
            question,
            answer,
        });
    }

    let purchases = PurchaseLog::new(events)?;
    for (q, &intent) in questions.iter_mut().zip(&res.intents) {
        let label = label_question(q, purchases.for_user(q.user), &catalog, DEFAULT_WINDOW_DAYS)?;
        if label.is_spq() != intent {
            return Err(Error::Generation(format!(
                "question {} labels {label:?} but planted intent is {intent}",
                q.id
            )));
        }
        q.label = Some(label);
    }
    Dataset::new(catalog, purchases, questions)
}

/// Bisects `prior_purchase_weight` until the planted prior-purchase/SPQ
/// correlation on a 20k-question probe is within 0.01 of `target_r`.
pub fn calibrate_signal(cfg: &SynthConfig, target_r: f64) -> Result<SynthConfig> {
    if !(0.0..0.95).contains(&target_r) {
        return Err(Error::Config(format!("target_r {target_r} outside [0, 0.95)")));
    }
    let mut probe = cfg.clone();
    probe.n_questions = CALIBRATION_PROBE;
    probe.validate()?;
    let lat = Latents::draw(&probe)?;
    let measure = |w: f64| -> Result<f64> {
        let mut c = probe.clone();
        c.signal_strengths.prior_purchase_weight = w;
        let res = resolve(&lat, &c)?;
        prior_correlation(&lat, &res)
    };
    let with_weight = |w: f64| {
        let mut out = cfg.clone();
        out.signal_strengths.prior_purchase_weight = w;
        out
    };

    let tol = 0.01;
    let r0 = measure(0.0)?;
    if r0 >= target_r - tol {
        return Ok(with_weight(0.0));
    }
    let mut hi = 1.0;
    while measure(hi)? < target_r {
        hi *= 2.0;
        if hi > 256.0 {
            return Err(Error::Calibration(format!(
                "correlation {target_r} not reachable by prior_purchase_weight"
            )));
        }
    }
    let mut lo = 0.0;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let r = measure(mid)?;
        if (r - target_r).abs() <= tol {
            return Ok(with_weight(mid));
        }
        if r < target_r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Calibration(format!(
        "no prior_purchase_weight in [{lo}, {hi}] reaches r = {target_r} within {tol}"
    )))
}

/// Planted co-purchase pairs: distinct products sharing a leaf category.
pub fn same_category_pairs(ds: &Dataset) -> Vec<(ProductId, ProductId)> {
    let mut by_cat: BTreeMap<CategoryId, Vec<ProductId>> = BTreeMap::new();
    for p in ds.catalog.products() {
        by_cat.entry(p.category).or_default().push(p.id);
    }
    let mut out = Vec::new();
    for ps in by_cat.values() {
        for i in 0..ps.len() {
            for j in i + 1..ps.len() {
                out.push((ps[i], ps[j]));
            }
        }
    }
    out
}

/// Convenience for tests and reports: label counts per split.
pub fn split_balance(ds: &Dataset, split: Split) -> (usize, usize) {
    ds.questions
        .iter()
        .filter(|q| q.split == split)
        .fold((0, 0), |(s, n), q| match q.label {
            Some(Label::Spq) => (s + 1, n),
            _ => (s, n + 1),
        })
}
