//! Unified fusion head: concatenation, two dense layers, sigmoid.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::ParamStore;

pub const THRESHOLD: f64 = 0.5;

pub fn declare(store: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    nn::declare_linear(store, "head.l1", cfg.head_width(), cfg.d_fused, true)?;
    nn::declare_linear(store, "head.l2", cfg.d_fused, 1, true)
}

pub struct HeadOut {
    /// Pre-sigmoid score, shape `[1]`.
    pub logit: Var,
    /// Probability of the flood class, shape `[1]`.
    pub prob: Var,
}

/// Concatenates the fusion vectors in order (attention fusion, joint fusion,
/// harmonized refinement) and maps them to a probability.
pub fn forward(g: &mut Graph, store: &ParamStore, parts: &[Var]) -> Result<HeadOut> {
    if parts.is_empty() {
        return Err(Error::Contract("classification head needs at least one feature vector".into()));
    }
    let cat = if parts.len() == 1 { parts[0] } else { g.concat(parts, 0)? };
    let n = g.shape(cat)[0];
    let row = g.reshape(cat, &[1, n])?;
    let h = nn::linear(g, store, "head.l1", row)?;
    let h = g.relu(h);
    let z = nn::linear(g, store, "head.l2", h)?;
    let logit = g.flatten(z)?;
    let prob = g.sigmoid(logit);
    Ok(HeadOut { logit, prob })
}

/// 1 iff `p ≥ 0.5`.
pub fn predict(p: f64) -> u8 {
    u8::from(p >= THRESHOLD)
}
