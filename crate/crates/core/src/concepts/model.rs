use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Neighbourhoods, WsiGraph};
use crate::ingest::ConceptVocabulary;
use crate::nn::{
    gat_backward, gat_layer, gated_attention_pool, gated_attention_pool_backward, linear, linear_backward, relu,
    relu_backward, DenseMatrix, GatCache, ParamTensor, Parameterized, PoolOutput,
};
use crate::rng::{Rng, SeedStream};

/// Architecture hyperparameters; the input width comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    /// Encoder output width; `None` means one unit per concept.
    pub output_dim: Option<usize>,
    /// Width of the gated attention projections in each pool.
    pub attention_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            output_dim: None,
            attention_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn output_width(&self, num_concepts: usize) -> usize {
        self.output_dim.unwrap_or(num_concepts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.attention_dim == 0 || self.output_dim == Some(0) {
            return Err(Error::InvalidInput("model widths must be positive".into()));
        }
        Ok(())
    }
}

/// Two blocks of Linear → ReLU → GAT.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    lin1_w: ParamTensor,
    lin1_b: ParamTensor,
    gat1_w: ParamTensor,
    gat1_a: ParamTensor,
    lin2_w: ParamTensor,
    lin2_b: ParamTensor,
    gat2_w: ParamTensor,
    gat2_a: ParamTensor,
}

pub(crate) struct EncoderTrace {
    nbrs: Neighbourhoods,
    z1: DenseMatrix,
    r1: DenseMatrix,
    c1: GatCache,
    g1: DenseMatrix,
    z2: DenseMatrix,
    r2: DenseMatrix,
    c2: GatCache,
    pub(crate) out: DenseMatrix,
}

impl Encoder {
    fn new(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            lin1_w: ParamTensor::glorot(input, hidden, input, hidden, rng),
            lin1_b: ParamTensor::zeros(1, hidden),
            gat1_w: ParamTensor::glorot(hidden, hidden, hidden, hidden, rng),
            gat1_a: ParamTensor::glorot(1, 2 * hidden, 2 * hidden, 1, rng),
            lin2_w: ParamTensor::glorot(hidden, hidden, hidden, hidden, rng),
            lin2_b: ParamTensor::zeros(1, hidden),
            gat2_w: ParamTensor::glorot(hidden, output, hidden, output, rng),
            gat2_a: ParamTensor::glorot(1, 2 * output, 2 * output, 1, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.lin1_w.value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.gat2_w.value.cols()
    }

    fn named(&self) -> Vec<(&'static str, &ParamTensor)> {
        vec![
            ("lin1.w", &self.lin1_w),
            ("lin1.b", &self.lin1_b),
            ("gat1.w", &self.gat1_w),
            ("gat1.a", &self.gat1_a),
            ("lin2.w", &self.lin2_w),
            ("lin2.b", &self.lin2_b),
            ("gat2.w", &self.gat2_w),
            ("gat2.a", &self.gat2_a),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut ParamTensor)> {
        vec![
            ("lin1.w", &mut self.lin1_w),
            ("lin1.b", &mut self.lin1_b),
            ("gat1.w", &mut self.gat1_w),
            ("gat1.a", &mut self.gat1_a),
            ("lin2.w", &mut self.lin2_w),
            ("lin2.b", &mut self.lin2_b),
            ("gat2.w", &mut self.gat2_w),
            ("gat2.a", &mut self.gat2_a),
        ]
    }

    pub(crate) fn forward(&self, graph: &WsiGraph) -> Result<EncoderTrace> {
        if graph.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                slide: graph.slide_id.clone(),
                expected: self.input_dim(),
                found: graph.dim(),
            });
        }
        if graph.num_nodes() == 0 {
            return Err(Error::EmptyInput(format!("graph {}", graph.slide_id)));
        }
        let nbrs = graph.neighbourhoods();
        let z1 = linear(&graph.node_features, &self.lin1_w.value, self.lin1_b.value.values())?;
        let r1 = relu(&z1);
        let (g1, c1) = gat_layer(&nbrs, &r1, &self.gat1_w.value, self.gat1_a.value.values())?;
        let z2 = linear(&g1, &self.lin2_w.value, self.lin2_b.value.values())?;
        let r2 = relu(&z2);
        let (out, c2) = gat_layer(&nbrs, &r2, &self.gat2_w.value, self.gat2_a.value.values())?;
        Ok(EncoderTrace {
            nbrs,
            z1,
            r1,
            c1,
            g1,
            z2,
            r2,
            c2,
            out,
        })
    }

    /// Parameter gradients in [`Encoder::named`] order.
    pub(crate) fn backward(&self, graph: &WsiGraph, t: &EncoderTrace, dout: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        let g2 = gat_backward(&t.nbrs, &t.r2, &self.gat2_w.value, self.gat2_a.value.values(), &t.c2, dout)?;
        let dz2 = relu_backward(&t.z2, &g2.dh);
        let l2 = linear_backward(&t.g1, &self.lin2_w.value, &dz2)?;
        let g1 = gat_backward(&t.nbrs, &t.r1, &self.gat1_w.value, self.gat1_a.value.values(), &t.c1, &l2.dx)?;
        let dz1 = relu_backward(&t.z1, &g1.dh);
        let l1 = linear_backward(&graph.node_features, &self.lin1_w.value, &dz1)?;
        Ok(vec![
            l1.dw,
            DenseMatrix::row_vector(&l1.db),
            g1.dw,
            DenseMatrix::row_vector(&g1.da),
            l2.dw,
            DenseMatrix::row_vector(&l2.db),
            g2.dw,
            DenseMatrix::row_vector(&g2.da),
        ])
    }
}

/// A gated attention pool followed by a scalar linear read-out.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    v: ParamTensor,
    u: ParamTensor,
    w: ParamTensor,
    out_w: ParamTensor,
    out_b: Option<ParamTensor>,
}

impl AttentionHead {
    fn new(width: usize, attention: usize, bias: bool, rng: &mut Rng) -> Self {
        Self {
            v: ParamTensor::glorot(width, attention, width, attention, rng),
            u: ParamTensor::glorot(width, attention, width, attention, rng),
            w: ParamTensor::glorot(attention, 1, attention, 1, rng),
            out_w: ParamTensor::glorot(width, 1, width, 1, rng),
            out_b: bias.then(|| ParamTensor::zeros(1, 1)),
        }
    }

    fn named(&self) -> Vec<(&'static str, &ParamTensor)> {
        let mut v = vec![
            ("pool.v", &self.v),
            ("pool.u", &self.u),
            ("pool.w", &self.w),
            ("out.w", &self.out_w),
        ];
        if let Some(b) = &self.out_b {
            v.push(("out.b", b));
        }
        v
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut ParamTensor)> {
        let mut v = vec![
            ("pool.v", &mut self.v),
            ("pool.u", &mut self.u),
            ("pool.w", &mut self.w),
            ("out.w", &mut self.out_w),
        ];
        if let Some(b) = &mut self.out_b {
            v.push(("out.b", b));
        }
        v
    }

    fn forward(&self, h: &DenseMatrix) -> Result<(PoolOutput, f64)> {
        let pool = gated_attention_pool(h, &self.v.value, &self.u.value, self.w.value.values())?;
        let mut y: f64 = pool.pooled.iter().zip(self.out_w.value.values()).map(|(a, b)| a * b).sum();
        if let Some(b) = &self.out_b {
            y += b.value.values()[0];
        }
        Ok((pool, y))
    }

    /// Returns `dh` and parameter gradients in [`AttentionHead::named`] order.
    fn backward(&self, h: &DenseMatrix, pool: &PoolOutput, dy: f64) -> Result<(DenseMatrix, Vec<DenseMatrix>)> {
        let dpooled: Vec<f64> = self.out_w.value.values().iter().map(|w| w * dy).collect();
        let g = gated_attention_pool_backward(h, &self.v.value, &self.u.value, self.w.value.values(), pool, &dpooled, None)?;
        let d_out_w: Vec<f64> = pool.pooled.iter().map(|p| p * dy).collect();
        let mut grads = vec![
            g.dv,
            g.du,
            DenseMatrix::from_vec(g.dw.len(), 1, g.dw)?,
            DenseMatrix::from_vec(d_out_w.len(), 1, d_out_w)?,
        ];
        if self.out_b.is_some() {
            grads.push(DenseMatrix::from_vec(1, 1, vec![dy])?);
        }
        Ok((g.dh, grads))
    }
}

/// Concept logits and per-concept attention over the nodes of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct CbmOutput {
    pub logits: Vec<f64>,
    /// `K` rows of node weights, each summing to one.
    pub attention: Vec<Vec<f64>>,
}

pub(crate) struct CbmTrace {
    encoder: EncoderTrace,
    pools: Vec<PoolOutput>,
    pub(crate) logits: Vec<f64>,
}

/// Concept bottleneck model: a shared graph encoder feeding one attention
/// head and scalar classifier per concept.
#[derive(Debug, Clone, PartialEq)]
pub struct CbmModel {
    pub config: ModelConfig,
    pub vocabulary: ConceptVocabulary,
    encoder: Encoder,
    heads: Vec<AttentionHead>,
}

impl CbmModel {
    /// Glorot-initialised weights drawn from the `init` substream of `seed`.
    pub fn new(config: ModelConfig, vocabulary: ConceptVocabulary, input_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::InvalidInput("input dimension must be positive".into()));
        }
        let k = vocabulary.len();
        let out = config.output_width(k);
        let mut rng = SeedStream::new(seed).rng("init");
        let encoder = Encoder::new(input_dim, config.hidden_dim, out, &mut rng);
        let heads = (0..k)
            .map(|_| AttentionHead::new(out, config.attention_dim, true, &mut rng))
            .collect();
        Ok(Self {
            config,
            vocabulary,
            encoder,
            heads,
        })
    }

    pub fn num_concepts(&self) -> usize {
        self.heads.len()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub(crate) fn trace(&self, graph: &WsiGraph) -> Result<CbmTrace> {
        let encoder = self.encoder.forward(graph)?;
        let mut pools = Vec::with_capacity(self.heads.len());
        let mut logits = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (pool, y) = head.forward(&encoder.out)?;
            pools.push(pool);
            logits.push(y);
        }
        Ok(CbmTrace { encoder, pools, logits })
    }

    /// Parameter gradients, in [`Parameterized::params`] order, given the
    /// upstream gradient on the logits.
    pub(crate) fn backprop(&self, graph: &WsiGraph, trace: &CbmTrace, dlogits: &[f64]) -> Result<Vec<DenseMatrix>> {
        let h = &trace.encoder.out;
        let mut dh = DenseMatrix::zeros(h.rows(), h.cols());
        let mut head_grads = Vec::new();
        for ((head, pool), &dy) in self.heads.iter().zip(&trace.pools).zip(dlogits) {
            let (dhk, g) = head.backward(h, pool, dy)?;
            dh.add_assign(&dhk)?;
            head_grads.extend(g);
        }
        let mut grads = self.encoder.backward(graph, &trace.encoder, &dh)?;
        grads.extend(head_grads);
        Ok(grads)
    }
}

impl Parameterized for CbmModel {
    fn params(&self) -> Vec<(String, &ParamTensor)> {
        let mut v: Vec<(String, &ParamTensor)> =
            self.encoder.named().into_iter().map(|(n, p)| (format!("encoder.{n}"), p)).collect();
        for (k, head) in self.heads.iter().enumerate() {
            v.extend(head.named().into_iter().map(|(n, p)| (format!("concept{k}.{n}"), p)));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut ParamTensor)> {
        let mut v: Vec<(String, &mut ParamTensor)> = self
            .encoder
            .named_mut()
            .into_iter()
            .map(|(n, p)| (format!("encoder.{n}"), p))
            .collect();
        for (k, head) in self.heads.iter_mut().enumerate() {
            v.extend(head.named_mut().into_iter().map(|(n, p)| (format!("concept{k}.{n}"), p)));
        }
        v
    }
}

pub fn cbm_forward(model: &CbmModel, graph: &WsiGraph) -> Result<CbmOutput> {
    let t = model.trace(graph)?;
    Ok(CbmOutput {
        attention: t.pools.into_iter().map(|p| p.weights).collect(),
        logits: t.logits,
    })
}

/// Graph encoder with a single attention head producing a Cox risk score.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskModel {
    pub config: ModelConfig,
    encoder: Encoder,
    head: AttentionHead,
}

pub(crate) struct RiskTrace {
    encoder: EncoderTrace,
    pool: PoolOutput,
    pub(crate) risk: f64,
}

impl RiskModel {
    /// `output_dim` defaults to `default_width` when unset.
    pub fn new(config: ModelConfig, input_dim: usize, default_width: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || default_width == 0 {
            return Err(Error::InvalidInput("model widths must be positive".into()));
        }
        let out = config.output_width(default_width);
        let mut rng = SeedStream::new(seed).rng("init");
        let encoder = Encoder::new(input_dim, config.hidden_dim, out, &mut rng);
        let head = AttentionHead::new(out, config.attention_dim, false, &mut rng);
        Ok(Self { config, encoder, head })
    }

    pub(crate) fn trace(&self, graph: &WsiGraph) -> Result<RiskTrace> {
        let encoder = self.encoder.forward(graph)?;
        let (pool, risk) = self.head.forward(&encoder.out)?;
        Ok(RiskTrace { encoder, pool, risk })
    }

    pub(crate) fn backprop(&self, graph: &WsiGraph, trace: &RiskTrace, drisk: f64) -> Result<Vec<DenseMatrix>> {
        let (dh, head_grads) = self.head.backward(&trace.encoder.out, &trace.pool, drisk)?;
        let mut grads = self.encoder.backward(graph, &trace.encoder, &dh)?;
        grads.extend(head_grads);
        Ok(grads)
    }

    pub fn risk(&self, graph: &WsiGraph) -> Result<f64> {
        Ok(self.trace(graph)?.risk)
    }

    /// The attention-pooled encoder output that feeds the risk read-out.
    pub fn pooled_features(&self, graph: &WsiGraph) -> Result<Vec<f64>> {
        Ok(self.trace(graph)?.pool.pooled)
    }
}

impl Parameterized for RiskModel {
    fn params(&self) -> Vec<(String, &ParamTensor)> {
        let mut v: Vec<(String, &ParamTensor)> =
            self.encoder.named().into_iter().map(|(n, p)| (format!("encoder.{n}"), p)).collect();
        v.extend(self.head.named().into_iter().map(|(n, p)| (format!("risk.{n}"), p)));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut ParamTensor)> {
        let mut v: Vec<(String, &mut ParamTensor)> = self
            .encoder
            .named_mut()
            .into_iter()
            .map(|(n, p)| (format!("encoder.{n}"), p))
            .collect();
        v.extend(self.head.named_mut().into_iter().map(|(n, p)| (format!("risk.{n}"), p)));
        v
    }
}
