//! The concept bottleneck model: graph encoder, per-concept attention heads
//! and classifiers, plus the end-to-end risk variant.

mod model;
mod train;

pub use model::{cbm_forward, AttentionHead, CbmModel, CbmOutput, Encoder, ModelConfig, RiskModel};
pub use train::{
    attention_map, load_cbm, CbmLossProbe, predict_concepts, predict_risks, save_cbm, train_cbm, train_risk_model, AttentionPoint,
    ConceptPrediction, StepUnit, TrainConfig, TrainReport,
};

#[cfg(test)]
mod tests;
