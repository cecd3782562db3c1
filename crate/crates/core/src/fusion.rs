//! Hierarchical gated fusion: local syntactic fusion, intermediate semantic
//! integration, global knowledge incorporation, cross-modal enhancement and
//! the learnable combination of the three levels.

use alloc::format;
use alloc::vec::Vec;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::CoreError;
use crate::matrix::Matrix;
use crate::nn::{affine, multi_head_attention, AttnVars, ProjVars};
use crate::Result;

/// Gate parameters: `sigmoid([a; b] . weight + bias)` with `weight 2d x d`.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub weight: Var,
    pub bias: Var,
}

/// Layer-norm gain/bias (`1 x d` each).
#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

/// Two-layer feed-forward parameters with a ReLU between.
#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub inner: ProjVars,
    pub outer: ProjVars,
}

/// Convex per-dimension combination of two views under a learned sigmoid
/// gate: `G (.) a + (1 - G) (.) b`. Returns `(fused, gate)`.
pub fn gated_fuse<F: Float>(
    tape: &mut Tape<F>,
    a: Var,
    b: Var,
    gate: &GateVars,
) -> Result<(Var, Var)> {
    let (n, d) = tape.shape(a);
    if tape.shape(b) != (n, d) {
        return Err(CoreError::config(format!(
            "gated_fuse inputs differ: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    if tape.shape(gate.weight) != (2 * d, d) || tape.shape(gate.bias) != (1, d) {
        return Err(CoreError::config(format!(
            "gated_fuse expects a {}x{d} gate weight and 1x{d} bias, got {:?} and {:?}",
            2 * d,
            tape.shape(gate.weight),
            tape.shape(gate.bias)
        )));
    }
    let cat = tape.concat_cols(&[a, b]);
    let pre = tape.matmul(cat, gate.weight);
    let pre = tape.add_row(pre, gate.bias);
    let g = tape.sigmoid(pre);
    let ga = tape.hadamard(g, a);
    let neg_g = tape.neg(g);
    let one_minus = tape.add_scalar(neg_g, F::one());
    let gb = tape.hadamard(one_minus, b);
    let fused = tape.add(ga, gb);
    Ok((fused, g))
}

fn attend_residual_norm<F: Float>(
    tape: &mut Tape<F>,
    query: Var,
    keys: Var,
    attn: &AttnVars,
    norm: &NormVars,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let out = multi_head_attention(tape, query, keys, keys, attn, heads, mask)?;
    let residual = tape.add(query, out.output);
    Ok(tape.layer_norm(residual, norm.gain, norm.bias))
}

/// Level 1: gate the constituency and dependency encodings, refine with
/// self-attention, residual and layer norm. Returns `(h_syn, gate)`.
pub fn level1_syntactic_fusion<F: Float>(
    tape: &mut Tape<F>,
    h_con: Var,
    h_dep: Var,
    gate: &GateVars,
    attn: &AttnVars,
    norm: &NormVars,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let (fused, g) = gated_fuse(tape, h_con, h_dep, gate)?;
    let h_syn = attend_residual_norm(tape, fused, fused, attn, norm, heads, mask)?;
    Ok((h_syn, g))
}

/// Two affine maps with a ReLU between.
pub fn feed_forward<F: Float>(tape: &mut Tape<F>, x: Var, ffn: &FfnVars) -> Result<Var> {
    let hidden = affine(tape, x, &ffn.inner)?;
    let activated = tape.relu(hidden);
    affine(tape, activated, &ffn.outer)
}

/// Output of [`level2_semantic_integration`].
pub struct Level2Out {
    pub h_inter: Var,
    /// Gate values when the AMR branch participates.
    pub gate: Option<Var>,
}

/// Level 2: gate the semantic and AMR encodings (when the AMR branch is
/// enabled), cross-attend against the syntactic representation, then fuse
/// `[h_syn; refined; h_bert]` through the feed-forward network.
#[allow(clippy::too_many_arguments)]
pub fn level2_semantic_integration<F: Float>(
    tape: &mut Tape<F>,
    h_sem: Var,
    h_amr: Option<(Var, &GateVars)>,
    h_syn: Var,
    h_bert: Var,
    attn: &AttnVars,
    norm: &NormVars,
    ffn: &FfnVars,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Level2Out> {
    let (fused_sem, gate) = match h_amr {
        Some((amr, gate_vars)) => {
            let (f, g) = gated_fuse(tape, h_sem, amr, gate_vars)?;
            (f, Some(g))
        }
        None => (h_sem, None),
    };
    let refined = attend_residual_norm(tape, fused_sem, h_syn, attn, norm, heads, mask)?;
    let cat = tape.concat_cols(&[h_syn, refined, h_bert]);
    let h_inter = feed_forward(tape, cat, ffn)?;
    Ok(Level2Out { h_inter, gate })
}

/// Level 3: project raw knowledge vectors to the model width, gate them
/// against the intermediate representation, cross-attend with intermediate
/// keys/values, residual and layer norm. Returns `(h_global, gate)`.
#[allow(clippy::too_many_arguments)]
pub fn level3_knowledge_integration<F: Float>(
    tape: &mut Tape<F>,
    h_inter: Var,
    h_kg_raw: Var,
    project: &ProjVars,
    gate: &GateVars,
    attn: &AttnVars,
    norm: &NormVars,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let h_kg = affine(tape, h_kg_raw, project)?;
    let (fused, g) = gated_fuse(tape, h_inter, h_kg, gate)?;
    let h_global = attend_residual_norm(tape, fused, h_inter, attn, norm, heads, mask)?;
    Ok((h_global, g))
}

/// Cross-modal parameters: both sides project to `d/2`, attention runs in
/// the low-dimensional space with graph-side queries, and the result is
/// projected back and added to the global representation.
#[derive(Clone, Copy, Debug)]
pub struct CrossModalVars {
    pub text_down: ProjVars,
    pub graph_down: ProjVars,
    pub attn: AttnVars,
    pub up: ProjVars,
}

/// Cross-modal enhancement of the global representation with the
/// contextual embeddings. Pure residual when all projections are zero.
pub fn cross_modal_enhance<F: Float>(
    tape: &mut Tape<F>,
    h_bert: Var,
    h_global: Var,
    vars: &CrossModalVars,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let text = affine(tape, h_bert, &vars.text_down)?;
    let graph = affine(tape, h_global, &vars.graph_down)?;
    let out = multi_head_attention(tape, graph, text, text, &vars.attn, heads, mask)?;
    let back = affine(tape, out.output, &vars.up)?;
    Ok(tape.add(h_global, back))
}

/// Final combination: `h_final = a1 h_syn + a2 h_inter + a3 h_enhanced`
/// with `a = softmax(logits)` shared across tokens. Returns
/// `(h_final, alpha)` where `alpha` is the `1 x 3` probability vector.
pub fn hierarchical_combine<F: Float>(
    tape: &mut Tape<F>,
    h_syn: Var,
    h_inter: Var,
    h_enhanced: Var,
    level_logits: Var,
) -> Result<(Var, Var)> {
    if tape.shape(level_logits) != (1, 3) {
        return Err(CoreError::config(format!(
            "hierarchical combine expects 1x3 logits, got {:?}",
            tape.shape(level_logits)
        )));
    }
    let shape = tape.shape(h_syn);
    if tape.shape(h_inter) != shape || tape.shape(h_enhanced) != shape {
        return Err(CoreError::config(
            "hierarchical combine inputs must share one shape",
        ));
    }
    let alpha = tape.row_softmax(level_logits, None);
    let s = tape.scale_by_entry(h_syn, alpha, 0);
    let i = tape.scale_by_entry(h_inter, alpha, 1);
    let e = tape.scale_by_entry(h_enhanced, alpha, 2);
    let si = tape.add(s, i);
    Ok((tape.add(si, e), alpha))
}

/// Per-level gate values captured for inspection; levels disabled by
/// ablation flags are absent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateTrace {
    pub syn: Option<Matrix<f64>>,
    pub sem: Option<Matrix<f64>>,
    pub kg: Option<Matrix<f64>>,
}

/// Per-token representations at every fusion stage of one example, plus the
/// gate values and level weights. Serializable for regression snapshots.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionTrace {
    pub h_syn: Matrix<f64>,
    pub h_inter: Matrix<f64>,
    pub h_global: Matrix<f64>,
    pub h_enhanced: Matrix<f64>,
    pub h_final: Matrix<f64>,
    pub gate_values: GateTrace,
    pub alpha: Vec<f64>,
}
