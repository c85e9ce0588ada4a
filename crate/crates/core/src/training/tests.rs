use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::embeddings::{train_skipgram, HashedBagEncoder, SkipGramConfig};
use crate::synth::{generate_dataset, SynthConfig};

fn small() -> (Dataset, Prepared) {
    let ds = generate_dataset(&SynthConfig {
        n_users: 300,
        n_products: 40,
        n_categories: 8,
        taxonomy_branching: 4,
        n_questions: 1_500,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap()
    .dataset;
    let events: Vec<_> = ds.purchases.events().copied().collect();
    let emb = train_skipgram(&events, &SkipGramConfig { epochs: 1, dim: 8, ..SkipGramConfig::default() })
        .unwrap()
        .embeddings;
    let prep = Prepared::new(&ds, &emb, &HashedBagEncoder::new(8, 3).unwrap(), 28).unwrap();
    (ds, prep)
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            dim: 16,
            text_dim: 8,
            table_dim: 4,
            layers: 2,
            ..ModelConfig::default()
        },
        max_stage2_epochs: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn early_stopping_on_scripted_losses() {
    let mut s = EarlyStopper::new(3);
    let seq = [1.0, 0.9, 0.91, 0.92, 0.93];
    let decisions: Vec<StopDecision> = seq.iter().map(|&l| s.observe(l)).collect();
    use StopDecision::*;
    assert_eq!(decisions, vec![Improved, Improved, Continue, Continue, Stop]);
    assert_eq!(s.best_epoch(), 2);
    assert_eq!(s.best(), 0.9);

    // Equal losses count as not decreasing.
    let mut s = EarlyStopper::new(1);
    assert_eq!(s.observe(0.5), Improved);
    assert_eq!(s.observe(0.5), Stop);
}

#[test]
fn adam_first_step() {
    let mut adam = Adam::new(AdamConfig::default());
    let mut p = [1.0, -1.0];
    adam.step(0, &mut p, &[2.0, -0.5], 0.1);
    assert!((p[0] - (1.0 - 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
    assert!((p[1] - (-1.0 + 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
}

#[test]
fn metric_examples() {
    let cats = vec![CategoryId(1); 100];
    let labels: Vec<bool> = (0..100).map(|i| i % 2 == 0).collect();
    let perfect: Vec<f64> = labels.iter().map(|&y| if y { 0.9 } else { 0.1 }).collect();
    let m = Metrics::from_scores(&perfect, &labels, &cats).unwrap();
    assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
    assert_eq!(m.per_category_f1[&CategoryId(1)], 1.0);

    let m = Metrics::from_scores(&[0.7; 100], &labels, &cats).unwrap();
    assert_eq!(m.precision, 0.5);
    assert_eq!(m.recall, 1.0);
    assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
    assert!((chance_f1(0.5) - 2.0 / 3.0).abs() < 1e-15);

    let c = Confusion { tp: 903, fp: 97, tn: 0, fn_: 83 };
    assert!((c.precision() - 0.903).abs() < 1e-12);
    assert!((c.recall() - 903.0 / 986.0).abs() < 1e-12);
    assert!((c.f1() - 1806.0 / 1986.0).abs() < 1e-12);
    assert!((c.f1() - 0.909).abs() < 5e-4);

    assert_eq!(Confusion::default().f1(), 0.0);
    assert!(Metrics::from_scores(&[], &[], &[]).is_err());
}

#[test]
fn per_category_aggregates() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 400;
    let probs: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
    let labels: Vec<bool> = (0..n).map(|_| rand::Rng::random_bool(&mut rng, 0.5)).collect();
    let cats: Vec<CategoryId> = (0..n).map(|i| CategoryId(if i < 30 { 9 } else { (i % 3) as u32 })).collect();
    let m = Metrics::from_scores(&probs, &labels, &cats).unwrap();
    let mut sum = Confusion::default();
    for c in m.per_category.values() {
        sum.tp += c.tp;
        sum.fp += c.fp;
        sum.tn += c.tn;
        sum.fn_ += c.fn_;
    }
    assert_eq!(sum, m.confusion);
    assert_eq!(m.confusion.total(), n);
    assert!(!m.per_category_f1.contains_key(&CategoryId(9)));
    assert_eq!(m.per_category_f1.len(), 3);
    let (p, r) = (m.precision, m.recall);
    assert!((m.f1 - 2.0 * p * r / (p + r)).abs() < 1e-15);
}

#[test]
fn paired_t_test() {
    // Reference values from a standard statistics library.
    let s = paired_significance(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
    assert!((s.t - 4.242640687119285).abs() < 1e-12);
    assert!((s.p_value - 0.013235599563682695).abs() < 1e-9);
    assert_eq!(s.df, 4);

    let a = [0.8, 0.82, 0.79, 0.85, 0.81];
    let b = [0.7, 0.73, 0.71, 0.74, 0.7];
    let s = paired_significance(&a, &b).unwrap();
    assert!((s.p_value - 7.34554103258446e-05).abs() < 1e-10);
    assert!(s.p_value < 0.05);

    let s = paired_significance(&a, &a).unwrap();
    assert!(s.degenerate);
    assert_eq!(s.p_value, 1.0);

    assert!(paired_significance(&[1.0], &[0.0]).is_err());
    assert!(paired_significance(&[1.0, 2.0], &[0.0]).is_err());
}

#[test]
fn null_p_values_are_roughly_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let normal = rand_distr::Normal::new(0.0, 0.01).unwrap();
    let reps = 2_000;
    let mut small = 0;
    let mut total = 0.0;
    for _ in 0..reps {
        let a: Vec<f64> = (0..5).map(|_| 0.8 + rand::Rng::sample(&mut rng, normal)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + rand::Rng::sample(&mut rng, normal)).collect();
        let p = paired_significance(&a, &b).unwrap().p_value;
        small += usize::from(p < 0.05);
        total += p;
    }
    let rate = small as f64 / reps as f64;
    let mean = total / reps as f64;
    assert!((0.03..=0.07).contains(&rate), "{rate}");
    assert!((mean - 0.5).abs() < 0.03, "{mean}");
}

#[test]
fn grid_enumeration() {
    let cells = grid_cells();
    assert_eq!(cells.len(), 26);
    let distinct: std::collections::BTreeSet<String> =
        cells.iter().map(|c| format!("{:?}/{:?}", c.variant, c.subset)).collect();
    assert_eq!(distinct.len(), 26);
    assert_eq!(cells.iter().filter(|c| c.variant.is_text_only()).count(), 2);
}

#[test]
fn stage_one_freezes_pretrained() {
    let (ds, prep) = small();
    let cfg = TrainConfig { max_stage2_epochs: 0, ..tiny_cfg() };
    let run = train_multistage(&ds, &prep, &cfg, Execution::Sequential).unwrap();
    assert_eq!(run.history.len(), 1);
    assert_eq!(run.params.behavior, prep.behavior);
    let init = SpqiParams::init(&run.spec, &prep.index, prep.behavior.clone(), cfg.seed).unwrap();
    assert_ne!(run.params.theta, init.theta);
    assert_ne!(run.params.tables.product, init.tables.product);

    let cfg = TrainConfig { max_stage2_epochs: 1, stage2_lr: 1e-2, ..tiny_cfg() };
    let run = train_multistage(&ds, &prep, &cfg, Execution::Sequential).unwrap();
    if run.best_epoch == 2 {
        assert_ne!(run.params.behavior, prep.behavior);
    }
}

#[test]
fn training_is_deterministic_and_returns_best() {
    let (ds, prep) = small();
    let cfg = tiny_cfg();
    let a = train_multistage(&ds, &prep, &cfg, Execution::Parallel).unwrap();
    let b = train_multistage(&ds, &prep, &cfg, Execution::Sequential).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);

    let best = a
        .history
        .iter()
        .min_by(|x, y| x.val_loss.partial_cmp(&y.val_loss).unwrap())
        .unwrap();
    assert_eq!(best.epoch, a.best_epoch);
    // The returned parameters reproduce the best epoch's validation record.
    let val = evaluate(&ds, &prep, &a.params, &a.spec, Split::Validation, &cfg, Execution::Parallel).unwrap();
    assert_eq!(val.loss, best.val_loss);
    assert_eq!(val.metrics, best.val_metrics);
}

#[test]
fn training_learns_planted_signal() {
    let (ds, prep) = small();
    let cfg = TrainConfig { stage1_epochs: 3, ..tiny_cfg() };
    let run = train_multistage(&ds, &prep, &cfg, Execution::Parallel).unwrap();
    let test = evaluate(&ds, &prep, &run.params, &run.spec, Split::Test, &cfg, Execution::Parallel).unwrap();
    let labels = labels_of(&prep, &test.nodes).unwrap();
    let pi = labels.iter().filter(|&&y| y).count() as f64 / labels.len() as f64;
    assert!(test.metrics.f1 > chance_f1(pi), "{} vs {}", test.metrics.f1, chance_f1(pi));
    assert!(run.history[0].train_loss.is_finite());
}

#[test]
fn divergence_names_the_epoch() {
    let (ds, mut prep) = small();
    prep.behavior.data_mut()[0] = f64::NAN;
    for row in &mut prep.inputs {
        row.history.push(0);
    }
    match train_multistage(&ds, &prep, &tiny_cfg(), Execution::Sequential) {
        Err(Error::Divergence { stage, epoch }) => assert_eq!((stage, epoch), (1, 1)),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn bucketed_evaluation_matches_one_graph() {
    let (ds, prep) = small();
    let cfg = tiny_cfg();
    let spec = cfg.spec().unwrap();
    let params = SpqiParams::init(&spec, &prep.index, prep.behavior.clone(), 3).unwrap();
    let nodes = ds.split_indices(Split::Test);
    let chunked = predict(&ds, &prep, &params, &spec, &nodes, SamplingStrategy::ProductBucketed, 16, Execution::Parallel).unwrap();
    let whole = predict(&ds, &prep, &params, &spec, &nodes, SamplingStrategy::ProductBucketed, nodes.len(), Execution::Sequential).unwrap();
    for (a, b) in chunked.iter().zip(&whole) {
        assert!((a - b).abs() < 1e-12);
    }
    let uniform = predict(&ds, &prep, &params, &spec, &nodes, SamplingStrategy::Uniform, 16, Execution::Sequential).unwrap();
    assert_eq!(uniform.len(), nodes.len());
    assert!(uniform.iter().all(|p| *p > 0.0 && *p < 1.0));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { stage1_lr: 0.0, ..TrainConfig::default() },
        TrainConfig { early_stop_patience: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
    let json = serde_json::to_string(&TrainConfig::default()).unwrap();
    let back: TrainConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, TrainConfig::default());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 1}"#).is_err());
    let _: BTreeMap<String, f64> = BTreeMap::new();
}
