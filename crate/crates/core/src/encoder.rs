//! Embedding layer and bidirectional self-attention blocks.

use crate::data::PAD;
use crate::diff::{Graph, NodeId, Tensor};
use crate::error::Result;
use crate::model::{BlockParams, Model};

/// Added to attention logits of padding keys.
pub const MASK_LOGIT: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct EncodedSequence {
    /// `t × d` input: item embeddings plus positional embeddings.
    pub e: NodeId,
    /// Attention output of every block.
    pub s: Vec<NodeId>,
    /// Attention weights of every block (`t × t`, rows are queries).
    pub attention: Vec<NodeId>,
    /// Final `t × d` representation.
    pub f: NodeId,
    /// `1 × d` user embedding.
    pub user: NodeId,
    /// `1 × t` additive key mask, absent when nothing needs masking.
    pub key_mask: Option<NodeId>,
    /// Positions holding real items, in order.
    pub real: Vec<usize>,
}

/// Additive `1 × t` mask with [`MASK_LOGIT`] at padding positions.
///
/// Returns `None` when the window has no padding, or only padding (masking
/// every key would leave the softmax undefined; it degrades to uniform
/// attention over the padded positions instead).
pub fn key_mask(g: &mut Graph, window: &[usize]) -> Option<NodeId> {
    let pads = window.iter().filter(|&&i| i == PAD).count();
    if pads == 0 || pads == window.len() {
        return None;
    }
    let row = window
        .iter()
        .map(|&i| if i == PAD { MASK_LOGIT } else { 0.0 })
        .collect();
    Some(g.constant(Tensor::row(row)))
}

/// `E = E_item[window] + P`, and the user's embedding row.
pub fn embed_sequence(g: &mut Graph, model: &Model, window: &[usize], user: usize) -> Result<(NodeId, NodeId)> {
    model.check_window(window, user)?;
    let items = g.gather_param(model.params.item_emb, window)?;
    let pos = g.param(model.params.pos_emb);
    let e = g.add(items, pos)?;
    let u = g.gather_param(model.params.user_emb, &[user])?;
    Ok((e, u))
}

/// Single-head `softmax(QKᵀ/√d + mask) V`. Returns `(S, weights)`.
pub fn self_attention(
    g: &mut Graph,
    block: &BlockParams,
    e: NodeId,
    key_mask: Option<NodeId>,
) -> Result<(NodeId, NodeId)> {
    let d = g.shape(e).1;
    let (wq, wk, wv) = (g.param(block.w_q), g.param(block.w_k), g.param(block.w_v));
    let q = g.matmul(e, wq)?;
    let k = g.matmul(e, wk)?;
    let v = g.matmul(e, wv)?;
    let logits = g.matmul_t(q, k)?;
    let mut logits = g.scale(logits, 1.0 / (d as f64).sqrt())?;
    if let Some(m) = key_mask {
        logits = g.add_row(logits, m)?;
    }
    let weights = g.softmax(logits)?;
    let s = g.matmul(weights, v)?;
    Ok((s, weights))
}

/// Row-wise `ReLU(S W1 + b1) W2 + b2`.
pub fn ffn(g: &mut Graph, block: &BlockParams, s: NodeId) -> Result<NodeId> {
    let (w1, b1, w2, b2) = (
        g.param(block.w_1),
        g.param(block.b_1),
        g.param(block.w_2),
        g.param(block.b_2),
    );
    let h = g.matmul(s, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h)?;
    let f = g.matmul(h, w2)?;
    Ok(g.add_row(f, b2)?)
}

pub fn encode(g: &mut Graph, model: &Model, window: &[usize], user: usize) -> Result<EncodedSequence> {
    let (e, u) = embed_sequence(g, model, window, user)?;
    let mask = key_mask(g, window);
    let mut x = e;
    let mut s_out = Vec::with_capacity(model.params.blocks.len());
    let mut att = Vec::with_capacity(model.params.blocks.len());
    for block in &model.params.blocks {
        let (s, w) = self_attention(g, block, x, mask)?;
        s_out.push(s);
        att.push(w);
        x = ffn(g, block, s)?;
    }
    Ok(EncodedSequence {
        e,
        s: s_out,
        attention: att,
        f: x,
        user: u,
        key_mask: mask,
        real: window
            .iter()
            .enumerate()
            .filter(|(_, &i)| i != PAD)
            .map(|(p, _)| p)
            .collect(),
    })
}
