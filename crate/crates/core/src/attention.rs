//! Scaled dot-product attention and captured attention weights.

use da3_tensor::{Graph, NodeId, Tensor};
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// `softmax(Q K^T / sqrt(d_k)) V` over the last two dimensions of
/// `q [.., t_q, d_k]`, `k [.., t, d_k]`, `v [.., t, d_v]`. Returns the
/// output and the weights `[.., t_q, t]`.
pub fn scaled_dot_attention(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId) -> Result<(NodeId, NodeId)> {
    let d_k = g.shape(q).last().copied().unwrap_or(0);
    if d_k == 0 {
        return Err(CoreError::Config("attention key width must be positive".into()));
    }
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = g.softmax_rows(scores)?;
    let out = g.batch_matmul(weights, v, false)?;
    Ok((out, weights))
}

/// Attention weights of one forward pass on a single observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    /// `T + 1`.
    pub tokens: usize,
    /// Side of the token grid, `floor(R / P)`.
    pub grid: usize,
    /// `layers[l][h]` is head `h`'s row-major `(T+1) x (T+1)` matrix in loop
    /// iteration `l`.
    pub layers: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduce {
    PerHead,
    Mean,
}

impl AttentionRecord {
    /// Builds a record from `[1, h, T+1, T+1]` weight tensors.
    pub fn from_weights<'a>(weights: impl IntoIterator<Item = &'a Tensor>, grid: usize) -> Result<Self> {
        let mut layers = Vec::new();
        let mut tokens = 0;
        for w in weights {
            let s = w.shape();
            if s.len() != 4 || s[0] != 1 || s[2] != s[3] || s[2] != grid * grid + 1 {
                return Err(CoreError::Config(format!(
                    "attention weights {s:?} are not a full square capture for a {grid}x{grid} grid"
                )));
            }
            tokens = s[2];
            layers.push(w.data().chunks(tokens * tokens).map(<[f64]>::to_vec).collect());
        }
        if layers.is_empty() {
            return Err(CoreError::Config("empty attention record".into()));
        }
        Ok(Self { tokens, grid, layers })
    }

    pub fn heads(&self) -> usize {
        self.layers[0].len()
    }

    /// Saliency query row (token 0) of head `head` in the final iteration.
    pub fn saliency_row(&self, head: usize) -> &[f64] {
        &self.layers[self.layers.len() - 1][head][..self.tokens]
    }

    /// Largest deviation of any captured row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .flat_map(|m| m.chunks(self.tokens))
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Saliency-row heatmaps of the final iteration: columns `1..=T` reshaped
/// row-major to `grid x grid`. `PerHead` gives one grid per head, `Mean` a
/// single grid averaged over heads.
pub fn extract_heatmap(record: &AttentionRecord, reduce: Reduce) -> Vec<Vec<f64>> {
    let per_head: Vec<Vec<f64>> = (0..record.heads())
        .map(|h| record.saliency_row(h)[1..].to_vec())
        .collect();
    match reduce {
        Reduce::PerHead => per_head,
        Reduce::Mean => {
            let n = per_head.len() as f64;
            let mut mean = vec![0.0; record.tokens - 1];
            for row in &per_head {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            vec![mean]
        }
    }
}
