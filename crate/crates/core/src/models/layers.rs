//! Layer building blocks recorded on a [`Tape`]. Each function takes bound
//! variables, so the same code serves training, evaluation, gradient checks
//! and explanation (where parameters are bound as constants).

use std::sync::Arc;

use crate::graph::DirectedEdges;
use crate::numerics::{CsrMatrix, NumericsError, Tape, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

/// `Â H W`, with `relu` when `activate`.
pub fn gcn_layer(tape: &mut Tape, h: Var, adj: &Arc<CsrMatrix>, w: Var, activate: bool) -> Result<Var, NumericsError> {
    let hw = tape.matmul(h, w)?;
    let out = tape.spmm(adj.clone(), hw)?;
    if activate {
        tape.relu(out)
    } else {
        Ok(out)
    }
}

/// Per-edge logits `e_ij = LeakyReLU(aᵀ[W_Z z_i ‖ W_Z z_j])` for every
/// directed edge in `edges`. Returns `(Z W_Z, e)`, with `e` of shape `E×1`.
///
/// `a` is split into halves `a₁, a₂` so the scores are formed per vertex
/// (`H a₁`, `H a₂`) and only scalars are gathered per edge.
pub fn edge_attention(tape: &mut Tape, z: Var, edges: &DirectedEdges, w_z: Var, a: Var) -> Result<(Var, Var), NumericsError> {
    let h = tape.matmul(z, w_z)?;
    let dh = tape.value(h).cols();
    let a1 = tape.slice_rows(a, 0, dh)?;
    let a2 = tape.slice_rows(a, dh, 2 * dh)?;
    let s = tape.matmul(h, a1)?;
    let t = tape.matmul(h, a2)?;
    let es = tape.gather_rows(s, edges.src.clone())?;
    let ed = tape.gather_rows(t, edges.dst.clone())?;
    let raw = tape.add(es, ed)?;
    let e = tape.leaky_relu(raw, LEAKY_SLOPE)?;
    Ok((h, e))
}

/// Softmax of edge logits within each source vertex's neighbourhood.
pub fn attention_softmax(tape: &mut Tape, e: Var, edges: &DirectedEdges) -> Result<Var, NumericsError> {
    tape.segment_softmax(e, edges.offsets.clone())
}

/// Linear-time all-pair propagation with diffusivity `s_ij = 1 + q̂_i·k̂_j`:
///
/// ```text
/// P_i = (Σ_j v_j + q̂_i (K̂ᵀV)) / (N + q̂_i (K̂ᵀ1))
/// ```
///
/// Cost is `O(N d²)`; the `N×N` weight matrix is never formed.
pub fn difformer_s_propagate(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var, NumericsError> {
    let n = tape.value(q).rows() as f64;
    let qh = tape.row_l2_normalize(q)?;
    let kh = tape.row_l2_normalize(k)?;
    let kv = tape.matmul_t(kh, true, v, false)?;
    let vsum = tape.sum_rows(v)?;
    let qkv = tape.matmul(qh, kv)?;
    let num = tape.add(qkv, vsum)?;
    let ksum = tape.sum_rows(kh)?;
    let qk = tape.matmul_t(qh, false, ksum, true)?;
    let den = tape.add_scalar(qk, n)?;
    tape.div(num, den)
}

/// Bound parameters of one attention head.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    /// `(W_Z, a)` for the edge-attention term, DIFFormer-attn only.
    pub attn: Option<(Var, Var)>,
}

/// Graph term added to the all-pair propagation of each head.
pub enum GraphTerm<'a> {
    None,
    /// `Â V` with a fixed normalized adjacency.
    Fixed(&'a Arc<CsrMatrix>),
    /// `D^{-1/2}(α⊙A)D^{-1/2} V`: `norm` holds `w_ij/√(d_i d_j)` per directed edge (`E×1`).
    Attention { edges: &'a DirectedEdges, norm: Var },
}

/// Propagated values `P̄` of all heads, concatenated to `heads · head_dim` columns.
pub fn difformer_propagation(tape: &mut Tape, z: Var, heads: &[HeadVars], term: &GraphTerm<'_>) -> Result<Var, NumericsError> {
    let mut outs = Vec::with_capacity(heads.len());
    for head in heads {
        let q = tape.matmul(z, head.w_q)?;
        let k = tape.matmul(z, head.w_k)?;
        let v = tape.matmul(z, head.w_v)?;
        let p = difformer_s_propagate(tape, q, k, v)?;
        let p = match term {
            GraphTerm::None => p,
            GraphTerm::Fixed(adj) => {
                let s = tape.spmm((*adj).clone(), v)?;
                tape.add(p, s)?
            }
            GraphTerm::Attention { edges, norm } => {
                let (w_z, a) = head.attn.ok_or_else(|| NumericsError::InvalidArgument("attention head lacks W_Z/a".into()))?;
                let (_, e) = edge_attention(tape, z, edges, w_z, a)?;
                let alpha = attention_softmax(tape, e, edges)?;
                let coef = tape.mul(alpha, *norm)?;
                let s = tape.edge_aggregate(coef, v, edges.src.clone(), edges.dst.clone())?;
                tape.add(p, s)?
            }
        };
        outs.push(p);
    }
    concat(tape, &outs)
}

/// `α·z + (1−α)·prop`.
pub fn residual_mix(tape: &mut Tape, z: Var, prop: Var, alpha: f64) -> Result<Var, NumericsError> {
    let a = tape.scale(z, alpha)?;
    let b = tape.scale(prop, 1.0 - alpha)?;
    tape.add(a, b)
}

/// Multi-head graph attention over `edges` (which should include self-loops):
/// `Z'_i = Σ_j α_ij W_Z z_j` per head, heads concatenated, `relu` when `activate`.
pub fn gat_layer(tape: &mut Tape, z: Var, edges: &DirectedEdges, heads: &[(Var, Var)], activate: bool) -> Result<Var, NumericsError> {
    let mut outs = Vec::with_capacity(heads.len());
    for &(w_z, a) in heads {
        let (h, e) = edge_attention(tape, z, edges, w_z, a)?;
        let alpha = attention_softmax(tape, e, edges)?;
        outs.push(tape.edge_aggregate(alpha, h, edges.src.clone(), edges.dst.clone())?);
    }
    let out = concat(tape, &outs)?;
    if activate {
        tape.relu(out)
    } else {
        Ok(out)
    }
}

fn concat(tape: &mut Tape, parts: &[Var]) -> Result<Var, NumericsError> {
    match parts {
        [] => Err(NumericsError::InvalidArgument("no heads".into())),
        [one] => Ok(*one),
        many => tape.concat_cols(many),
    }
}
