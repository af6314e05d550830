use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::*;
use crate::graph::{build_knn_graph, KnnOptions, WsiGraph};
use crate::ingest::{PatchRecord, ConceptLabels, ConceptVocabulary, DemographicRecord, Sample, StudyDataset, SurvivalRecord};
use crate::nn::gradcheck::grad_check;
use crate::nn::{bce_with_logits, Parameterized};
use crate::rng::{Rng, SeedStream};

fn vocab(k: usize) -> ConceptVocabulary {
    ConceptVocabulary::new((0..k).map(|i| format!("c{i}")).collect()).unwrap()
}

fn random_graph(rng: &mut Rng, id: &str, n: usize, d: usize, shift: f64) -> WsiGraph {
    let patches: Vec<PatchRecord> = (0..n)
        .map(|i| PatchRecord {
            patch_id: format!("{id}_{i}"),
            x: rng.random_range(0.0..100.0),
            y: rng.random_range(0.0..100.0),
            features: (0..d).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect(),
        })
        .collect();
    build_knn_graph(id, &patches, KnnOptions { k: 3, ..KnnOptions::default() }).unwrap()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 6,
        output_dim: Some(4),
        attention_dim: 3,
    }
}

fn dataset(graphs: Vec<WsiGraph>, labels: Vec<Vec<Option<bool>>>, k: usize) -> StudyDataset {
    let samples = graphs
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (g, l))| {
            let pid = format!("P{i:03}");
            Sample {
                patient_id: pid.clone(),
                slide_id: g.slide_id.clone(),
                labels: ConceptLabels {
                    slide_id: g.slide_id.clone(),
                    labels: l,
                },
                outcome: SurvivalRecord::new(pid.clone(), 10.0 + i as f64, i % 3 != 0),
                demographics: DemographicRecord::unknown(pid),
                graph: Some(Arc::new(g)),
            }
        })
        .collect();
    StudyDataset {
        vocabulary: vocab(k),
        samples,
    }
}

#[test]
fn forward_shapes_and_normalisation() {
    let mut rng = SeedStream::new(1).rng("t");
    let g = random_graph(&mut rng, "s", 9, 5, 0.0);
    let model = CbmModel::new(ModelConfig { hidden_dim: 8, output_dim: None, attention_dim: 4 }, vocab(30), 5, 3).unwrap();
    let out = cbm_forward(&model, &g).unwrap();
    assert_eq!(out.logits.len(), 30);
    assert!(out.logits.iter().all(|z| z.is_finite()));
    for row in &out.attention {
        assert_eq!(row.len(), 9);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let single = random_graph(&mut rng, "one", 1, 5, 0.0);
    let out = cbm_forward(&model, &single).unwrap();
    assert!(out.attention.iter().all(|r| r == &vec![1.0]));
    let wrong = random_graph(&mut rng, "w", 4, 6, 0.0);
    assert!(cbm_forward(&model, &wrong).is_err());
}

#[test]
fn permutation_invariance() {
    let mut rng = SeedStream::new(2).rng("t");
    let g = random_graph(&mut rng, "s", 12, 4, 0.0);
    let model = CbmModel::new(small_config(), vocab(3), 4, 7).unwrap();
    let mut perm: Vec<usize> = (0..12).collect();
    perm.reverse();
    perm.swap(0, 5);
    let a = cbm_forward(&model, &g).unwrap();
    let b = cbm_forward(&model, &g.permuted(&perm)).unwrap();
    for (x, y) in a.logits.iter().zip(&b.logits) {
        assert!((x - y).abs() <= 1e-9);
    }
    for (ra, rb) in a.attention.iter().zip(&b.attention) {
        for (new, &old) in perm.iter().enumerate() {
            assert!((rb[new] - ra[old]).abs() <= 1e-12);
        }
    }
}

#[test]
fn disjoint_duplicate_halves_attention() {
    let mut rng = SeedStream::new(3).rng("t");
    let g = random_graph(&mut rng, "s", 7, 4, 0.0);
    let model = CbmModel::new(small_config(), vocab(2), 4, 1).unwrap();
    let a = cbm_forward(&model, &g).unwrap();
    let b = cbm_forward(&model, &g.replicated(2)).unwrap();
    for (x, y) in a.logits.iter().zip(&b.logits) {
        assert!((x - y).abs() <= 1e-12);
    }
    for (ra, rb) in a.attention.iter().zip(&b.attention) {
        for i in 0..7 {
            assert!((rb[i] - ra[i] / 2.0).abs() <= 1e-12);
            assert!((rb[i + 7] - ra[i] / 2.0).abs() <= 1e-12);
        }
    }
}

/// Whole-model BCE as a function of every parameter.
#[test]
fn whole_model_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let mut rng = SeedStream::new(seed).rng("t");
        let graph = random_graph(&mut rng, "s", 6, 3, 0.3);
        let model = CbmModel::new(small_config(), vocab(3), 3, seed).unwrap();
        let mut probe = CbmLossProbe {
            model,
            graph,
            labels: vec![Some(true), None, Some(false)],
        };
        let report = grad_check(&mut probe, 1e-4).unwrap();
        assert!(report.passed, "seed {seed}: {report:?}");
    }
}

#[test]
fn missing_concept_gets_no_gradient() {
    let mut rng = SeedStream::new(4).rng("t");
    let graph = random_graph(&mut rng, "s", 6, 3, 0.0);
    let model = CbmModel::new(small_config(), vocab(3), 3, 0).unwrap();
    let labels = vec![Some(true), None, Some(false)];
    let trace = model.trace(&graph).unwrap();
    let lg = bce_with_logits(&trace.logits, &labels).unwrap();
    let grads = model.backprop(&graph, &trace, &lg.grad).unwrap();
    for ((name, _), g) in model.params().iter().zip(&grads) {
        if name.starts_with("concept1.") {
            assert!(g.values().iter().all(|&v| v == 0.0), "{name}");
        }
    }
}

fn mean_feature_dataset(seed: u64) -> StudyDataset {
    let mut rng = SeedStream::new(seed).rng("data");
    let mut graphs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..8 {
        let shift = if i % 2 == 0 { 0.8 } else { -0.8 };
        let g = random_graph(&mut rng, &format!("s{i}"), 10, 4, shift);
        let mean = g.node_features.values().iter().sum::<f64>() / g.node_features.values().len() as f64;
        labels.push(vec![Some(mean > 0.0), Some(mean <= 0.0)]);
        graphs.push(g);
    }
    dataset(graphs, labels, 2)
}

#[test]
fn overfits_eight_graphs() {
    let data = mean_feature_dataset(5);
    let mut model = CbmModel::new(ModelConfig { hidden_dim: 16, output_dim: Some(4), attention_dim: 8 }, vocab(2), 4, 11).unwrap();
    let config = TrainConfig {
        steps: 200,
        base_lr: 1e-2,
        seed: 3,
        ..TrainConfig::default()
    };
    let report = train_cbm(&mut model, &data, &config).unwrap();
    assert_eq!(report.loss_trace.len(), 200);
    let first: f64 = report.loss_trace[..5].iter().sum::<f64>() / 5.0;
    let last: f64 = report.loss_trace[195..].iter().sum::<f64>() / 5.0;
    assert!(last < first);
    let graphs: Vec<&WsiGraph> = (0..data.len()).map(|i| data.graph(i).unwrap()).collect();
    let mut total = 0.0;
    for (p, s) in predict_concepts(&model, &graphs).unwrap().iter().zip(&data.samples) {
        total += bce_with_logits(&p.logits, &s.labels.labels).unwrap().value;
    }
    assert!(total / 8.0 < 0.05, "final BCE {}", total / 8.0);
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let data = mean_feature_dataset(6);
    let config = TrainConfig {
        steps: 4,
        batch_size: 3,
        base_lr: 1e-2,
        seed: 9,
        ..TrainConfig::default()
    };
    let mut a = CbmModel::new(small_config(), vocab(2), 4, 2).unwrap();
    let mut b = a.clone();
    let ra = train_cbm(&mut a, &data, &config).unwrap();
    let rb = train_cbm(&mut b, &data, &config).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ra.optimizer_steps, 4 * 3);
    let mut buf = Vec::new();
    save_cbm(&a, &mut buf).unwrap();
    let back = load_cbm(buf.as_slice()).unwrap();
    assert_eq!(back.params().len(), a.params().len());
    for ((_, x), (_, y)) in back.params().iter().zip(a.params()) {
        assert_eq!(x.value, y.value);
    }
    let g = data.graph(0).unwrap();
    assert_eq!(cbm_forward(&back, g).unwrap(), cbm_forward(&a, g).unwrap());
}

#[test]
fn batch_unit_counts_single_updates() {
    let data = mean_feature_dataset(7);
    let config = TrainConfig {
        steps: 5,
        step_unit: StepUnit::Batches,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let mut m = CbmModel::new(small_config(), vocab(2), 4, 2).unwrap();
    let r = train_cbm(&mut m, &data, &config).unwrap();
    assert_eq!(r.loss_trace.len(), 5);
    assert_eq!(r.optimizer_steps, 5);
}

#[test]
fn prediction_threshold_is_inclusive() {
    let p = ConceptPrediction::from_logits(vec![0.0, 50.0, -50.0]);
    assert_eq!(p.soft[0], 0.5);
    assert_eq!(p.hard, vec![true, true, false]);
    assert!(p.soft[1] > 1.0 - 1e-12 && p.soft[2] < 1e-12);
    assert!(p.soft.iter().all(|s| s.is_finite()));
}

#[test]
fn attention_map_matches_forward() {
    let mut rng = SeedStream::new(8).rng("t");
    let g = random_graph(&mut rng, "s", 5, 3, 0.0);
    let model = CbmModel::new(small_config(), vocab(2), 3, 4).unwrap();
    let out = cbm_forward(&model, &g).unwrap();
    for k in 0..2 {
        let map = attention_map(&model, &g, k).unwrap();
        let w: Vec<f64> = map.iter().map(|p| p.weight).collect();
        assert_eq!(w, out.attention[k]);
        assert_eq!([map[0].x, map[0].y], g.node_centroids[0]);
    }
    assert!(attention_map(&model, &g, 2).is_err());
}

#[test]
fn risk_model_learns_an_ordering() {
    let mut rng = SeedStream::new(9).rng("t");
    let mut graphs = Vec::new();
    for i in 0..8 {
        graphs.push(random_graph(&mut rng, &format!("s{i}"), 8, 3, if i < 4 { 1.0 } else { -1.0 }));
    }
    let mut data = dataset(graphs, vec![vec![Some(true)]; 8], 1);
    for (i, s) in data.samples.iter_mut().enumerate() {
        // High-shift graphs die first.
        s.outcome = SurvivalRecord::new(s.patient_id.clone(), 1.0 + i as f64, true);
    }
    let mut model = RiskModel::new(small_config(), 3, 4, 0).unwrap();
    let config = TrainConfig {
        steps: 200,
        base_lr: 1e-2,
        ..TrainConfig::default()
    };
    let r = train_risk_model(&mut model, &data, &config).unwrap();
    let first: f64 = r.loss_trace[..5].iter().sum::<f64>() / 5.0;
    let last: f64 = r.loss_trace[195..].iter().sum::<f64>() / 5.0;
    assert!(last < first);
    let graphs: Vec<&WsiGraph> = (0..8).map(|i| data.graph(i).unwrap()).collect();
    let risks = predict_risks(&model, &graphs).unwrap();
    let c = crate::metrics::harrell_cindex(&risks, &data.outcomes()).unwrap();
    assert!(c > 0.8, "c = {c}");
}

#[test]
fn pooled_features_have_encoder_width() {
    let mut rng = SeedStream::new(10).rng("t");
    let g = random_graph(&mut rng, "s", 5, 3, 0.0);
    let model = RiskModel::new(small_config(), 3, 9, 0).unwrap();
    assert_eq!(model.pooled_features(&g).unwrap().len(), 4);
}
