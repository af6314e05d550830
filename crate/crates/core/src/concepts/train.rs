use std::io::{BufRead, Write};

use log::debug;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::WsiGraph;
use crate::ingest::{ConceptVocabulary, StudyDataset};
use crate::nn::checkpoint::{read_checkpoint, restore_params, write_checkpoint};
use crate::nn::gradcheck::Differentiable;
use crate::nn::{bce_with_logits, cox_partial_likelihood_loss, sigmoid, AdamConfig, AdamState, CosineSchedule, DenseMatrix, Parameterized};
use crate::rng::SeedStream;

use super::model::{cbm_forward, CbmModel, ModelConfig, RiskModel};

/// What one unit of [`TrainConfig::steps`] means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StepUnit {
    /// A full pass over shuffled mini-batches.
    #[default]
    Epochs,
    /// A single optimizer update.
    Batches,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub step_unit: StepUnit,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Learning rate reached at the end of the cosine schedule.
    pub floor_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            step_unit: StepUnit::Epochs,
            batch_size: 32,
            base_lr: 3e-4,
            weight_decay: 1e-5,
            floor_lr: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput("steps and batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.floor_lr >= 0.0) {
            return Err(Error::InvalidInput("learning rates must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }

    /// Mini-batches for the whole run, grouped by trace entry.
    fn plan(&self, n: usize) -> Vec<Vec<Vec<usize>>> {
        let mut rng = SeedStream::new(self.seed).rng("shuffle");
        let mut order: Vec<usize> = (0..n).collect();
        let mut epoch = || {
            order.shuffle(&mut rng);
            order.chunks(self.batch_size).map(<[usize]>::to_vec).collect::<Vec<_>>()
        };
        match self.step_unit {
            StepUnit::Epochs => (0..self.steps).map(|_| epoch()).collect(),
            StepUnit::Batches => {
                let mut pending = Vec::new();
                let mut out = Vec::with_capacity(self.steps);
                while out.len() < self.steps {
                    if pending.is_empty() {
                        pending = epoch();
                        pending.reverse();
                    }
                    out.push(vec![pending.pop().expect("epoch is non-empty")]);
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// One mean batch loss per configured step.
    pub loss_trace: Vec<f64>,
    pub optimizer_steps: usize,
}

fn sum_gradients(per_graph: Vec<Vec<DenseMatrix>>) -> Result<Option<Vec<DenseMatrix>>> {
    let mut iter = per_graph.into_iter();
    let Some(mut total) = iter.next() else {
        return Ok(None);
    };
    for g in iter {
        for (t, x) in total.iter_mut().zip(&g) {
            t.add_assign(x)?;
        }
    }
    Ok(Some(total))
}

fn set_gradients<M: Parameterized>(model: &mut M, grads: &[DenseMatrix], scale: f64) {
    for ((_, p), g) in model.params_mut().into_iter().zip(grads) {
        p.grad = g.clone();
        p.grad.scale(scale);
    }
}

/// Generic loop: `batch_step` returns `(loss, summed gradients, divisor)`
/// or `None` to skip a batch.
fn run_training<M, F>(model: &mut M, n: usize, config: &TrainConfig, mut batch_step: F) -> Result<TrainReport>
where
    M: Parameterized,
    F: FnMut(&M, &[usize]) -> Result<Option<(f64, Vec<DenseMatrix>, f64)>>,
{
    config.validate()?;
    if n == 0 {
        return Err(Error::EmptyInput("training set".into()));
    }
    let plan = config.plan(n);
    let total: usize = plan.iter().map(Vec::len).sum();
    let schedule = CosineSchedule {
        base_lr: config.base_lr,
        total_steps: total,
        floor_lr: config.floor_lr,
    };
    let mut adam = AdamState::new(
        model,
        AdamConfig {
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
    );
    let mut t = 0;
    let mut trace = Vec::with_capacity(plan.len());
    for batches in &plan {
        let mut losses = Vec::new();
        for batch in batches {
            let lr = schedule.lr(t);
            if let Some((loss, grads, divisor)) = batch_step(model, batch)? {
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step: t });
                }
                set_gradients(model, &grads, 1.0 / divisor);
                adam.step(model, lr)?;
                losses.push(loss);
            }
            t += 1;
        }
        let mean = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        debug!("trace entry {}: loss {mean:.6}", trace.len());
        trace.push(mean);
    }
    Ok(TrainReport {
        loss_trace: trace,
        optimizer_steps: total,
    })
}

/// Mini-batch AdamW on the mean per-concept BCE. Each graph is processed on
/// its own and gradients are averaged over the graphs of a batch that carry
/// at least one label.
pub fn train_cbm(model: &mut CbmModel, dataset: &StudyDataset, config: &TrainConfig) -> Result<TrainReport> {
    if dataset.num_concepts() != model.num_concepts() {
        return Err(Error::Shape {
            op: "train_cbm",
            detail: format!("dataset has {} concepts, model {}", dataset.num_concepts(), model.num_concepts()),
        });
    }
    let graphs: Vec<&WsiGraph> = (0..dataset.len()).map(|i| dataset.graph(i)).collect::<Result<_>>()?;
    let labels: Vec<&[Option<bool>]> = dataset.samples.iter().map(|s| s.labels.labels.as_slice()).collect();
    run_training(model, dataset.len(), config, |m, batch| {
        let results: Vec<Option<(f64, Vec<DenseMatrix>)>> = batch
            .par_iter()
            .map(|&i| {
                if labels[i].iter().all(Option::is_none) {
                    return Ok(None);
                }
                let trace = m.trace(graphs[i])?;
                let lg = bce_with_logits(&trace.logits, labels[i])?;
                Ok(Some((lg.value, m.backprop(graphs[i], &trace, &lg.grad)?)))
            })
            .collect::<Result<_>>()?;
        let (losses, grads): (Vec<f64>, Vec<Vec<DenseMatrix>>) = results.into_iter().flatten().unzip();
        let count = losses.len() as f64;
        Ok(sum_gradients(grads)?.map(|g| (losses.iter().sum::<f64>() / count, g, count)))
    })
}

/// Mini-batch AdamW on the negative Breslow partial likelihood, with risk
/// sets formed inside each batch. Batches without an event are skipped.
pub fn train_risk_model(model: &mut RiskModel, dataset: &StudyDataset, config: &TrainConfig) -> Result<TrainReport> {
    let graphs: Vec<&WsiGraph> = (0..dataset.len()).map(|i| dataset.graph(i)).collect::<Result<_>>()?;
    let outcomes = dataset.outcomes();
    run_training(model, dataset.len(), config, |m, batch| {
        if !batch.iter().any(|&i| outcomes[i].event) {
            return Ok(None);
        }
        let traces = batch.par_iter().map(|&i| m.trace(graphs[i])).collect::<Result<Vec<_>>>()?;
        let risks: Vec<f64> = traces.iter().map(|t| t.risk).collect();
        let times: Vec<f64> = batch.iter().map(|&i| outcomes[i].time).collect();
        let events: Vec<bool> = batch.iter().map(|&i| outcomes[i].event).collect();
        let lg = cox_partial_likelihood_loss(&risks, &times, &events)?;
        let grads = batch
            .par_iter()
            .zip(traces.par_iter())
            .zip(lg.grad.par_iter())
            .map(|((&i, t), &d)| m.backprop(graphs[i], t, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(sum_gradients(grads)?.map(|g| (lg.value, g, 1.0)))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptPrediction {
    pub logits: Vec<f64>,
    pub soft: Vec<f64>,
    /// `soft ≥ 0.5`.
    pub hard: Vec<bool>,
}

impl ConceptPrediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let soft: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let hard = soft.iter().map(|&p| p >= 0.5).collect();
        Self { logits, soft, hard }
    }
}

pub fn predict_concepts(model: &CbmModel, graphs: &[&WsiGraph]) -> Result<Vec<ConceptPrediction>> {
    graphs
        .par_iter()
        .map(|g| Ok(ConceptPrediction::from_logits(model.trace(g)?.logits)))
        .collect()
}

/// Risk scores for every graph.
pub fn predict_risks(model: &RiskModel, graphs: &[&WsiGraph]) -> Result<Vec<f64>> {
    graphs.par_iter().map(|g| model.risk(g)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionPoint {
    pub x: f64,
    pub y: f64,
    pub weight: f64,
}

/// Attention weights of one concept head, paired with node centroids.
pub fn attention_map(model: &CbmModel, graph: &WsiGraph, concept: usize) -> Result<Vec<AttentionPoint>> {
    if concept >= model.num_concepts() {
        return Err(Error::InvalidInput(format!(
            "concept index {concept} out of range for {} concepts",
            model.num_concepts()
        )));
    }
    let out = cbm_forward(model, graph)?;
    Ok(graph
        .node_centroids
        .iter()
        .zip(&out.attention[concept])
        .map(|(c, &weight)| AttentionPoint {
            x: c[0],
            y: c[1],
            weight,
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct CbmHeader {
    kind: String,
    input_dim: usize,
    config: ModelConfig,
    concepts: Vec<String>,
}

pub fn save_cbm<W: Write>(model: &CbmModel, w: W) -> Result<()> {
    let header = CbmHeader {
        kind: "cbm".into(),
        input_dim: model.input_dim(),
        config: model.config.clone(),
        concepts: model.vocabulary.names().to_vec(),
    };
    write_checkpoint(w, &serde_json::to_value(header)?, &model.params())
}

pub fn load_cbm<R: BufRead>(r: R) -> Result<CbmModel> {
    let ckpt = read_checkpoint(r)?;
    let header: CbmHeader = serde_json::from_value(ckpt.header.clone())?;
    if header.kind != "cbm" {
        return Err(Error::Format(format!("expected a cbm checkpoint, found {:?}", header.kind)));
    }
    let vocabulary = ConceptVocabulary::new(header.concepts)?;
    let mut model = CbmModel::new(header.config, vocabulary, header.input_dim, 0)?;
    restore_params(&ckpt, model.params_mut())?;
    Ok(model)
}

/// Mean BCE of one graph as a function of every model parameter, in
/// [`Parameterized::params`] order.
pub struct CbmLossProbe {
    pub model: CbmModel,
    pub graph: WsiGraph,
    pub labels: Vec<Option<bool>>,
}

impl Differentiable for CbmLossProbe {
    fn coordinates(&self) -> Vec<f64> {
        self.model
            .params()
            .iter()
            .flat_map(|(_, p)| p.value.values().to_vec())
            .collect()
    }

    fn set_coordinates(&mut self, coords: &[f64]) {
        let mut offset = 0;
        for (_, p) in self.model.params_mut() {
            let len = p.value.values().len();
            p.value.values_mut().copy_from_slice(&coords[offset..offset + len]);
            offset += len;
        }
    }

    fn loss(&self) -> Result<f64> {
        let out = cbm_forward(&self.model, &self.graph)?;
        Ok(bce_with_logits(&out.logits, &self.labels)?.value)
    }

    fn gradient(&self) -> Result<Vec<f64>> {
        let trace = self.model.trace(&self.graph)?;
        let lg = bce_with_logits(&trace.logits, &self.labels)?;
        let grads = self.model.backprop(&self.graph, &trace, &lg.grad)?;
        Ok(grads.iter().flat_map(|g| g.values().to_vec()).collect())
    }
}
