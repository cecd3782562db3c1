//! Importance-based landmark selection and the structure-aware contrastive
//! objectives: margin losses over the syntactic and AMR neighbourhoods and
//! an InfoNCE alignment between dependency-encoded text and knowledge
//! vectors, combined into one weighted regularizer.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::CoreError;
use crate::graphs::{ViewGraphs, AMR_NONE};
use crate::matrix::Matrix;
use crate::nn::{affine, ProjVars};
use crate::Result;

/// Margin, normalizer and branch weights of the combined contrastive loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    /// Margin the positive/negative distance gap must clear.
    pub margin: f64,
    /// Divisor applied to the hinge value.
    pub normalizer: f64,
    pub lambda_syn: f64,
    pub lambda_amr: f64,
    pub lambda_kg: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            margin: 0.2,
            normalizer: 10.0,
            lambda_syn: 0.5,
            lambda_amr: 0.2,
            lambda_kg: 0.5,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin < 0.0 {
            return Err(CoreError::config("contrastive margin must be >= 0"));
        }
        if self.normalizer <= 0.0 {
            return Err(CoreError::config("contrastive normalizer must be > 0"));
        }
        if self.lambda_syn < 0.0 || self.lambda_amr < 0.0 || self.lambda_kg < 0.0 {
            return Err(CoreError::config("contrastive weights must be >= 0"));
        }
        Ok(())
    }
}

/// The anchors selected for one example.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub k: usize,
    /// Selected token indices, ascending.
    pub indices: Vec<usize>,
    /// Importance score per token.
    pub importance: Vec<f64>,
}

/// Landmark budget: `max(1, floor(log10(max(2, n))^2))`.
pub fn landmark_count(n: usize) -> usize {
    let base = (n.max(2)) as f64;
    let squared = Float::powi(Float::log10(base), 2);
    (Float::floor(squared) as usize).max(1)
}

/// Per-token importance from the row-stochastic semantic adjacency: the row
/// mean plus the row maximum. (Over a stochastic matrix the mean term is
/// the constant `1/n`, so ranking is carried by the row maximum.)
pub fn importance_scores<F: Float>(a_sem: &Matrix<F>) -> Vec<f64> {
    let (n, cols) = a_sem.shape();
    debug_assert_eq!(n, cols);
    (0..n)
        .map(|i| {
            let row = a_sem.row(i);
            let mut sum = 0.0;
            let mut max = f64::NEG_INFINITY;
            for v in row {
                let x = v.to_f64().expect("finite attention");
                sum += x;
                if x > max {
                    max = x;
                }
            }
            sum / n as f64 + max
        })
        .collect()
}

/// Select the top-k tokens by importance, ties broken toward lower indices;
/// the returned indices are sorted ascending.
pub fn select_landmarks(importance: &[f64]) -> LandmarkSet {
    let n = importance.len();
    let k = landmark_count(n).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        importance[b]
            .partial_cmp(&importance[a])
            .expect("finite importance")
            .then(a.cmp(&b))
    });
    let mut indices: Vec<usize> = order.into_iter().take(k).collect();
    indices.sort_unstable();
    LandmarkSet {
        k,
        indices,
        importance: importance.to_vec(),
    }
}

/// Which structural neighbourhood defines an anchor's positive set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StructuralView {
    /// Dependency neighbours, plus tokens grouped with the anchor in the
    /// finest constituency slice but not dependency-linked, plus the anchor.
    Syntactic,
    /// Tokens with a non-`none` AMR cell in either direction, anchor excluded.
    Amr,
}

/// Positive token set for an anchor under the given view.
pub fn positive_sets(anchor: usize, graphs: &ViewGraphs, view: StructuralView) -> BTreeSet<usize> {
    let n = graphs.n;
    let mut set = BTreeSet::new();
    match view {
        StructuralView::Syntactic => {
            for j in 0..n {
                if graphs.a_dep.get(anchor, j) == 1 {
                    set.insert(j);
                }
            }
            if let Some(finest) = graphs.a_con.first() {
                for j in 0..n {
                    if finest.get(anchor, j) == 1 && graphs.a_dep.get(anchor, j) == 0 {
                        set.insert(j);
                    }
                }
            }
            set.insert(anchor);
        }
        StructuralView::Amr => {
            for j in 0..n {
                if j != anchor
                    && (graphs.a_amr.get(anchor, j) != AMR_NONE
                        || graphs.a_amr.get(j, anchor) != AMR_NONE)
                {
                    set.insert(j);
                }
            }
        }
    }
    set
}

/// Hinge arithmetic of the margin loss on plain numbers; the differentiable
/// path below must agree with this.
pub fn margin_from_distances(d_pos: f64, d_neg: f64, config: &ContrastiveConfig) -> f64 {
    (d_pos - d_neg + config.margin).max(0.0) / config.normalizer
}

/// Margin loss for one anchor over cosine distances on `reps` rows:
/// `relu(mean_pos_dist - mean_neg_dist + margin) / normalizer`. The
/// anchor-to-itself pair is excluded from the positive mean unless the
/// anchor is its sole positive (then the positive distance is exactly 0).
/// Returns a constant 0 when positives or negatives are empty.
pub fn margin_view_loss<F: Float>(
    tape: &mut Tape<F>,
    anchor: usize,
    reps: Var,
    positives: &BTreeSet<usize>,
    config: &ContrastiveConfig,
) -> Result<Var> {
    let (n, _) = tape.shape(reps);
    if anchor >= n {
        return Err(CoreError::config(format!(
            "margin loss anchor {anchor} out of {n} tokens"
        )));
    }
    let pos_wo_anchor: Vec<usize> = positives.iter().copied().filter(|&j| j != anchor).collect();
    let negatives: Vec<usize> = (0..n)
        .filter(|j| !positives.contains(j) && *j != anchor)
        .collect();
    if positives.is_empty() || negatives.is_empty() {
        return Ok(tape.scalar(0.0));
    }

    let normalized = tape.l2_normalize_rows(reps);
    let anchor_row = tape.gather_rows(normalized, &[anchor]);
    let sims = tape.matmul_nt(anchor_row, normalized); // 1 x n cosines

    let mean_distance = |tape: &mut Tape<F>, members: &[usize]| -> Var {
        let entries: Vec<(usize, usize)> = members.iter().map(|&j| (0, j)).collect();
        let picked = tape.gather(sims, &entries);
        let mean_sim = tape.mean_all(picked);
        let neg = tape.neg(mean_sim);
        tape.add_scalar(neg, F::one())
    };

    let d_pos = if pos_wo_anchor.is_empty() {
        tape.scalar(0.0) // anchor is its own sole positive
    } else {
        mean_distance(tape, &pos_wo_anchor)
    };
    let d_neg = mean_distance(tape, &negatives);
    let diff = tape.sub(d_pos, d_neg);
    let margined = tape.add_scalar(diff, crate::cast(config.margin));
    let hinged = tape.relu(margined);
    Ok(tape.scale(hinged, crate::cast(1.0 / config.normalizer)))
}

/// Outcome of the knowledge InfoNCE: the loss plus a flag marking the
/// degenerate fewer-than-two-candidates case (loss fixed at 0).
pub struct KgInfonce {
    pub loss: Var,
    pub degenerate: bool,
}

/// InfoNCE over matched (text token, knowledge vector) pairs pooled across
/// the batch. Text rows are projected into the knowledge space and
/// L2-normalized; knowledge rows are L2-normalized as well, so the softmax
/// runs over cosine similarities (temperature 1). Same-position pairs are
/// the positives.
pub fn kg_infonce<F: Float>(
    tape: &mut Tape<F>,
    text_reps: Var,
    kg_reps: &Matrix<f64>,
    projection: &ProjVars,
) -> Result<KgInfonce> {
    let (n, _) = tape.shape(text_reps);
    if kg_reps.rows() != n {
        return Err(CoreError::config(format!(
            "kg rows {} do not match {n} pooled text rows",
            kg_reps.rows()
        )));
    }
    if n < 2 {
        return Ok(KgInfonce {
            loss: tape.scalar(0.0),
            degenerate: true,
        });
    }
    let mut kg_normalized = Matrix::zeros(n, kg_reps.cols());
    for i in 0..n {
        let norm = kg_reps.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            return Err(CoreError::config(format!(
                "kg row {i} has zero norm; zero rows must be filtered before the loss"
            )));
        }
        for (j, v) in kg_reps.row(i).iter().enumerate() {
            kg_normalized.set(i, j, crate::cast(v / norm));
        }
    }
    let projected = affine(tape, text_reps, projection)?;
    let z = tape.l2_normalize_rows(projected);
    let kg_const = tape.constant(kg_normalized);
    let sims = tape.matmul_nt(z, kg_const);
    let log_probs = tape.log_row_softmax(sims, None);
    let diagonal: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let matched = tape.gather(log_probs, &diagonal);
    let mean = tape.mean_all(matched);
    Ok(KgInfonce {
        loss: tape.neg(mean),
        degenerate: false,
    })
}

/// Weighted combination of the per-anchor margin losses (summed over the
/// batch's anchors) and the knowledge loss. Branches with zero weight or no
/// terms contribute exactly nothing.
pub fn combined_scl<F: Float>(
    tape: &mut Tape<F>,
    syn_losses: &[Var],
    amr_losses: &[Var],
    kg_loss: Option<Var>,
    config: &ContrastiveConfig,
) -> Var {
    let mut parts: Vec<Var> = Vec::new();
    if config.lambda_syn > 0.0 && !syn_losses.is_empty() {
        let sum = tape.add_n(syn_losses);
        parts.push(tape.scale(sum, crate::cast(config.lambda_syn)));
    }
    if config.lambda_amr > 0.0 && !amr_losses.is_empty() {
        let sum = tape.add_n(amr_losses);
        parts.push(tape.scale(sum, crate::cast(config.lambda_amr)));
    }
    if config.lambda_kg > 0.0 {
        if let Some(kg) = kg_loss {
            parts.push(tape.scale(kg, crate::cast(config.lambda_kg)));
        }
    }
    if parts.is_empty() {
        tape.scalar(0.0)
    } else {
        tape.add_n(&parts)
    }
}
