//! Reference-logit fixtures emitted next to converted checkpoints, used to
//! cross-check this forward pass against the source implementation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{forward, token_embedding_graph, TransformerConfig};
use crate::error::{LamoError, Result};
use crate::params::{ParamBinder, WeightStore};

/// Logits recorded at one prompt position. Either the full row or the top
/// entries (`ids` with matching `values`) may be stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionLogits {
    pub ids: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLogits {
    pub source: String,
    pub prompt: String,
    pub token_ids: Vec<usize>,
    pub positions: Vec<PositionLogits>,
}

impl ReferenceLogits {
    pub fn load(path: &Path) -> Result<Self> {
        let f: ReferenceLogits = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_ids.is_empty() || self.positions.len() > self.token_ids.len() {
            return Err(LamoError::invalid("fixture needs tokens and at most one logit row per token"));
        }
        if self.positions.iter().any(|p| p.ids.len() != p.values.len()) {
            return Err(LamoError::invalid("fixture ids and values differ in length"));
        }
        Ok(())
    }
}

/// Full-vocabulary logits `[len, vocab]` for one token sequence.
pub fn prompt_logits(weights: &WeightStore<f32>, config: &TransformerConfig, ids: &[usize]) -> Result<Vec<Vec<f32>>> {
    let mut b = ParamBinder::frozen(weights, None);
    let x = token_embedding_graph(&mut b, config, &[ids])?;
    let emb = b.graph.value(x).clone().reshape(&[1, ids.len(), config.d_model])?;
    let hidden = forward(weights, config, &emb, None)?;
    let logits = crate::backbone::lm_logits(weights, &hidden)?;
    Ok(logits.data().chunks(config.vocab_size).map(|r| r.to_vec()).collect())
}

/// Largest absolute difference between recorded and recomputed logits.
pub fn max_logit_error(weights: &WeightStore<f32>, config: &TransformerConfig, fixture: &ReferenceLogits) -> Result<f64> {
    fixture.validate()?;
    let rows = prompt_logits(weights, config, &fixture.token_ids)?;
    let mut worst = 0.0f64;
    for (row, rec) in rows.iter().zip(&fixture.positions) {
        for (&id, &v) in rec.ids.iter().zip(&rec.values) {
            let ours = row.get(id).ok_or_else(|| LamoError::invalid(format!("fixture id {id} outside vocab")))?;
            worst = worst.max((f64::from(*ours) - f64::from(v)).abs());
        }
    }
    Ok(worst)
}
