//! Full-model assembly: dimension/flag configuration, parameter
//! registration, tape binding and the per-example / per-batch forward
//! passes producing classification probabilities and all loss terms.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::contrastive::{
    importance_scores, kg_infonce, margin_view_loss, positive_sets, select_landmarks,
    ContrastiveConfig, LandmarkSet, StructuralView,
};
use crate::error::CoreError;
use crate::fusion::{
    cross_modal_enhance, hierarchical_combine, level1_syntactic_fusion,
    level2_semantic_integration, level3_knowledge_integration, CrossModalVars, FfnVars,
    FusionTrace, GateTrace, GateVars, NormVars,
};
use crate::graphs::{ParsedExample, ViewGraphs};
use crate::matrix::Matrix;
use crate::nn::{
    affine, build_semantic_adjacency, encode_view, AttnVars, ProjVars, QkVars, ViewAdjacency,
};
use crate::params::{Init, ParameterStore};
use crate::Result;

/// Probability floor guarding `log` in the cross-entropy loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Model widths and per-view GCN depths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Hidden width shared by the encoders and fusion stack.
    pub d: usize,
    /// Native knowledge-vector width (projected to `d` inside level 3).
    pub d_kg: usize,
    /// Attention head count (must divide both `d` and `d/2`).
    pub heads: usize,
    pub layers_amr: usize,
    pub layers_dep: usize,
    pub layers_con: usize,
    pub layers_sem: usize,
}

impl ModelDims {
    /// Small configuration for desk-scale tests.
    pub fn desk_default() -> Self {
        ModelDims {
            d: 16,
            d_kg: 100,
            heads: 4,
            layers_amr: 2,
            layers_dep: 2,
            layers_con: 2,
            layers_sem: 2,
        }
    }

    /// Paper-parity widths and the Restaurant14 depth preset.
    pub fn restaurant14() -> Self {
        ModelDims {
            d: 768,
            d_kg: 100,
            heads: 4,
            layers_amr: 1,
            layers_dep: 5,
            layers_con: 3,
            layers_sem: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.d % 2 != 0 {
            return Err(CoreError::config(format!(
                "hidden width d={} must be an even number >= 2",
                self.d
            )));
        }
        if self.heads == 0 || self.d % self.heads != 0 || (self.d / 2) % self.heads != 0 {
            return Err(CoreError::config(format!(
                "head count {} must divide both d={} and d/2",
                self.heads, self.d
            )));
        }
        if self.d_kg == 0 {
            return Err(CoreError::config("knowledge width d_kg must be >= 1"));
        }
        for (name, layers) in [
            ("amr", self.layers_amr),
            ("dep", self.layers_dep),
            ("con", self.layers_con),
            ("sem", self.layers_sem),
        ] {
            if layers == 0 {
                return Err(CoreError::config(format!(
                    "{name} view needs at least one GCN layer"
                )));
            }
        }
        Ok(())
    }
}

/// Component toggles for the ablation grids. The semantic attention stream
/// is the backbone and is always active; `view_syn` covers both syntactic
/// encoders plus level-1 fusion, `view_kg` covers level 3. Losses that
/// consume a disabled view's representations are forced off with it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub view_amr: bool,
    pub view_syn: bool,
    pub view_kg: bool,
    pub cross_modal: bool,
    pub loss_scl: bool,
    pub loss_syn: bool,
    pub loss_amr: bool,
    pub loss_kg: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            view_amr: true,
            view_syn: true,
            view_kg: true,
            cross_modal: true,
            loss_scl: true,
            loss_syn: true,
            loss_amr: true,
            loss_kg: true,
        }
    }
}

impl AblationFlags {
    pub fn syn_loss_active(&self) -> bool {
        self.loss_scl && self.loss_syn && self.view_syn
    }

    pub fn amr_loss_active(&self) -> bool {
        self.loss_scl && self.loss_amr && self.view_amr
    }

    /// The knowledge InfoNCE needs dependency-GCN text features and the
    /// knowledge branch itself.
    pub fn kg_loss_active(&self) -> bool {
        self.loss_scl && self.loss_kg && self.view_kg && self.view_syn
    }

    fn any_margin_loss(&self) -> bool {
        self.syn_loss_active() || self.amr_loss_active()
    }
}

/// One example ready for the encoder: validated input, compiled graphs,
/// contextual embeddings and optional knowledge vectors (model width rows).
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub id: String,
    pub example: ParsedExample,
    pub graphs: ViewGraphs,
    /// `n x d` contextual token embeddings.
    pub embeddings: Matrix<f64>,
    /// `n x d_kg` knowledge vectors; `None` rows are treated as zero.
    pub kg: Option<Matrix<f64>>,
}

impl PreparedExample {
    pub fn check_dims(&self, dims: &ModelDims) -> Result<()> {
        let n = self.example.token_count();
        if self.embeddings.shape() != (n, dims.d) {
            return Err(CoreError::config(format!(
                "example {:?}: embeddings {:?} do not match {n} tokens x d={}",
                self.id,
                self.embeddings.shape(),
                dims.d
            )));
        }
        if let Some(kg) = &self.kg {
            if kg.shape() != (n, dims.d_kg) {
                return Err(CoreError::config(format!(
                    "example {:?}: kg vectors {:?} do not match {n} tokens x d_kg={}",
                    self.id,
                    kg.shape(),
                    dims.d_kg
                )));
            }
        }
        Ok(())
    }
}

fn register_proj<F: Float>(
    store: &mut ParameterStore<F>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
) -> Result<()> {
    store.register(
        &format!("{prefix}.weight"),
        d_in,
        d_out,
        Init::Uniform { fan_in: d_in },
    )?;
    store.register(
        &format!("{prefix}.bias"),
        1,
        d_out,
        Init::Uniform { fan_in: d_in },
    )
}

fn register_attn<F: Float>(store: &mut ParameterStore<F>, prefix: &str, d: usize) -> Result<()> {
    register_proj(store, &format!("{prefix}.query"), d, d)?;
    register_proj(store, &format!("{prefix}.key"), d, d)?;
    register_proj(store, &format!("{prefix}.value"), d, d)?;
    register_proj(store, &format!("{prefix}.out"), d, d)
}

fn register_gate<F: Float>(store: &mut ParameterStore<F>, prefix: &str, d: usize) -> Result<()> {
    store.register(
        &format!("{prefix}.weight"),
        2 * d,
        d,
        Init::Uniform { fan_in: 2 * d },
    )?;
    store.register(
        &format!("{prefix}.bias"),
        1,
        d,
        Init::Uniform { fan_in: 2 * d },
    )
}

fn register_norm<F: Float>(store: &mut ParameterStore<F>, prefix: &str, d: usize) -> Result<()> {
    store.register(&format!("{prefix}.gain"), 1, d, Init::Ones)?;
    store.register(&format!("{prefix}.bias"), 1, d, Init::Zeros)
}

fn register_gcn<F: Float>(
    store: &mut ParameterStore<F>,
    prefix: &str,
    layers: usize,
    d: usize,
) -> Result<()> {
    for layer in 0..layers {
        store.register(
            &format!("{prefix}.layer{layer}.weight"),
            d,
            d,
            Init::Uniform { fan_in: d },
        )?;
    }
    Ok(())
}

/// Register every parameter of the enabled components. Branches switched
/// off by the flags register nothing, so their parameters cannot receive
/// gradients or occupy checkpoint space.
pub fn register_parameters<F: Float>(
    store: &mut ParameterStore<F>,
    dims: &ModelDims,
    flags: &AblationFlags,
) -> Result<()> {
    dims.validate()?;
    let d = dims.d;

    // Semantic backbone: attention-derived adjacency (query/key only — the
    // score maps are the product, so value/output projections would be
    // unreachable parameters here) and the semantic GCN stack.
    register_proj(store, "semadj.query", d, d)?;
    register_proj(store, "semadj.key", d, d)?;
    register_gcn(store, "semgcn", dims.layers_sem, d)?;

    if flags.view_syn {
        register_gcn(store, "congcn", dims.layers_con, d)?;
        register_gcn(store, "depgcn", dims.layers_dep, d)?;
        register_gate(store, "fuse.syn.gate", d)?;
        register_attn(store, "fuse.syn.attn", d)?;
        register_norm(store, "fuse.syn.norm", d)?;
    }
    if flags.view_amr {
        register_gcn(store, "amrgcn", dims.layers_amr, d)?;
        register_gate(store, "fuse.sem.gate", d)?;
    }
    register_attn(store, "fuse.sem.attn", d)?;
    register_norm(store, "fuse.sem.norm", d)?;
    register_proj(store, "fuse.ffn.inner", 3 * d, 2 * d)?;
    register_proj(store, "fuse.ffn.outer", 2 * d, d)?;

    if flags.view_kg {
        register_proj(store, "fuse.kg.project", dims.d_kg, d)?;
        register_gate(store, "fuse.kg.gate", d)?;
        register_attn(store, "fuse.kg.attn", d)?;
        register_norm(store, "fuse.kg.norm", d)?;
    }
    if flags.cross_modal {
        register_proj(store, "crossmodal.text_down", d, d / 2)?;
        register_proj(store, "crossmodal.graph_down", d, d / 2)?;
        register_attn(store, "crossmodal.attn", d / 2)?;
        register_proj(store, "crossmodal.up", d / 2, d)?;
    }

    store.register("combine.level_logits", 1, 3, Init::Zeros)?;
    register_proj(store, "classifier", d, 3)?;

    if flags.kg_loss_active() {
        register_proj(store, "contrastive.kg_proj", d, dims.d_kg)?;
    }
    Ok(())
}

fn bind_proj<F: Float>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
) -> Result<ProjVars> {
    Ok(ProjVars {
        weight: tape.param(store, &format!("{prefix}.weight"))?,
        bias: tape.param(store, &format!("{prefix}.bias"))?,
    })
}

fn bind_attn<F: Float>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
) -> Result<AttnVars> {
    Ok(AttnVars {
        qk: QkVars {
            query: bind_proj(tape, store, &format!("{prefix}.query"))?,
            key: bind_proj(tape, store, &format!("{prefix}.key"))?,
        },
        value: bind_proj(tape, store, &format!("{prefix}.value"))?,
        output: bind_proj(tape, store, &format!("{prefix}.out"))?,
    })
}

fn bind_gate<F: Float>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
) -> Result<GateVars> {
    Ok(GateVars {
        weight: tape.param(store, &format!("{prefix}.weight"))?,
        bias: tape.param(store, &format!("{prefix}.bias"))?,
    })
}

fn bind_norm<F: Float>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
) -> Result<NormVars> {
    Ok(NormVars {
        gain: tape.param(store, &format!("{prefix}.gain"))?,
        bias: tape.param(store, &format!("{prefix}.bias"))?,
    })
}

fn bind_gcn<F: Float>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    layers: usize,
) -> Result<Vec<Var>> {
    (0..layers)
        .map(|layer| tape.param(store, &format!("{prefix}.layer{layer}.weight")))
        .collect()
}

/// Syntactic branch parameters.
pub struct SynVars {
    pub congcn: Vec<Var>,
    pub depgcn: Vec<Var>,
    pub gate: GateVars,
    pub attn: AttnVars,
    pub norm: NormVars,
}

/// AMR branch parameters.
pub struct AmrVars {
    pub gcn: Vec<Var>,
    pub gate: GateVars,
}

/// Knowledge branch (level 3) parameters.
pub struct KgVars {
    pub project: ProjVars,
    pub gate: GateVars,
    pub attn: AttnVars,
    pub norm: NormVars,
}

/// Every enabled parameter bound as tape leaves; built once per tape and
/// shared by all examples of a batch so gradients accumulate per parameter.
pub struct BoundParams {
    pub semadj: QkVars,
    pub semgcn: Vec<Var>,
    pub syn: Option<SynVars>,
    pub amr: Option<AmrVars>,
    pub level2_attn: AttnVars,
    pub level2_norm: NormVars,
    pub level2_ffn: FfnVars,
    pub kg: Option<KgVars>,
    pub crossmodal: Option<CrossModalVars>,
    pub combine_logits: Var,
    pub classifier: ProjVars,
    pub kg_proj: Option<ProjVars>,
}

/// Bind all registered parameters on a tape. Fails with a missing-parameter
/// error when the store does not match the flags (e.g. a checkpoint saved
/// under different ablation settings).
pub fn bind_parameters<F: Float>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    dims: &ModelDims,
    flags: &AblationFlags,
) -> Result<BoundParams> {
    Ok(BoundParams {
        semadj: QkVars {
            query: bind_proj(tape, store, "semadj.query")?,
            key: bind_proj(tape, store, "semadj.key")?,
        },
        semgcn: bind_gcn(tape, store, "semgcn", dims.layers_sem)?,
        syn: if flags.view_syn {
            Some(SynVars {
                congcn: bind_gcn(tape, store, "congcn", dims.layers_con)?,
                depgcn: bind_gcn(tape, store, "depgcn", dims.layers_dep)?,
                gate: bind_gate(tape, store, "fuse.syn.gate")?,
                attn: bind_attn(tape, store, "fuse.syn.attn")?,
                norm: bind_norm(tape, store, "fuse.syn.norm")?,
            })
        } else {
            None
        },
        amr: if flags.view_amr {
            Some(AmrVars {
                gcn: bind_gcn(tape, store, "amrgcn", dims.layers_amr)?,
                gate: bind_gate(tape, store, "fuse.sem.gate")?,
            })
        } else {
            None
        },
        level2_attn: bind_attn(tape, store, "fuse.sem.attn")?,
        level2_norm: bind_norm(tape, store, "fuse.sem.norm")?,
        level2_ffn: FfnVars {
            inner: bind_proj(tape, store, "fuse.ffn.inner")?,
            outer: bind_proj(tape, store, "fuse.ffn.outer")?,
        },
        kg: if flags.view_kg {
            Some(KgVars {
                project: bind_proj(tape, store, "fuse.kg.project")?,
                gate: bind_gate(tape, store, "fuse.kg.gate")?,
                attn: bind_attn(tape, store, "fuse.kg.attn")?,
                norm: bind_norm(tape, store, "fuse.kg.norm")?,
            })
        } else {
            None
        },
        crossmodal: if flags.cross_modal {
            Some(CrossModalVars {
                text_down: bind_proj(tape, store, "crossmodal.text_down")?,
                graph_down: bind_proj(tape, store, "crossmodal.graph_down")?,
                attn: bind_attn(tape, store, "crossmodal.attn")?,
                up: bind_proj(tape, store, "crossmodal.up")?,
            })
        } else {
            None
        },
        combine_logits: tape.param(store, "combine.level_logits")?,
        classifier: bind_proj(tape, store, "classifier")?,
        kg_proj: if flags.kg_loss_active() {
            Some(bind_proj(tape, store, "contrastive.kg_proj")?)
        } else {
            None
        },
    })
}

/// Forward-pass knobs that live outside the dimensions/flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardOptions {
    /// Optional semantic-adjacency sparsification (keep top-p, renormalize).
    pub semantic_top_p: Option<usize>,
    /// How the aspect span is pooled before classification.
    pub aspect_pooling: AspectPooling,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            semantic_top_p: None,
            aspect_pooling: AspectPooling::Mean,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AspectPooling {
    Mean,
    #[serde(rename = "first-token")]
    FirstToken,
}

/// Tape handles for every stage of one example's forward pass.
pub struct ExampleForward {
    /// `1 x 3` class probabilities for the aspect.
    pub probs: Var,
    /// Cross-entropy term (present when losses were requested).
    pub ce: Option<Var>,
    /// Per-anchor margin losses.
    pub syn_losses: Vec<Var>,
    pub amr_losses: Vec<Var>,
    /// Final dependency-GCN encoding, kept for the batch-level InfoNCE.
    pub h_dep: Option<Var>,
    pub landmarks: Option<LandmarkSet>,
    pub a_sem: Var,
    pub h_syn: Var,
    pub h_inter: Var,
    pub h_global: Var,
    pub h_enhanced: Var,
    pub h_final: Var,
    pub gate_syn: Option<Var>,
    pub gate_sem: Option<Var>,
    pub gate_kg: Option<Var>,
    pub alpha: Var,
}

impl ExampleForward {
    /// Snapshot the fusion stages into a serializable trace.
    pub fn trace<F: Float>(&self, tape: &Tape<F>) -> FusionTrace {
        FusionTrace {
            h_syn: tape.value(self.h_syn).to_f64(),
            h_inter: tape.value(self.h_inter).to_f64(),
            h_global: tape.value(self.h_global).to_f64(),
            h_enhanced: tape.value(self.h_enhanced).to_f64(),
            h_final: tape.value(self.h_final).to_f64(),
            gate_values: GateTrace {
                syn: self.gate_syn.map(|g| tape.value(g).to_f64()),
                sem: self.gate_sem.map(|g| tape.value(g).to_f64()),
                kg: self.gate_kg.map(|g| tape.value(g).to_f64()),
            },
            alpha: tape.value(self.alpha).to_f64().data().to_vec(),
        }
    }
}

/// Run one example through the full enabled stack.
pub fn forward_example<F: Float>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    prep: &PreparedExample,
    dims: &ModelDims,
    flags: &AblationFlags,
    contrastive: &ContrastiveConfig,
    options: &ForwardOptions,
    with_losses: bool,
) -> Result<ExampleForward> {
    prep.check_dims(dims)?;
    let n = prep.example.token_count();
    let h_bert = tape.constant_f64(&prep.embeddings);

    // Semantic backbone.
    let a_sem = build_semantic_adjacency(
        tape,
        h_bert,
        &bound.semadj,
        dims.heads,
        None,
        options.semantic_top_p,
    )?;
    let h_sem = encode_view(tape, h_bert, &ViewAdjacency::Shared(a_sem), &bound.semgcn)?;

    // Syntactic branch (falls back to the contextual embeddings when off).
    let mut h_dep_final = None;
    let (h_syn, gate_syn) = match &bound.syn {
        Some(syn) => {
            let a_dep = tape.constant(prep.graphs.a_dep.map(|v| {
                if v != 0 {
                    F::one()
                } else {
                    F::zero()
                }
            }));
            let slices: Vec<Var> = prep
                .graphs
                .a_con
                .iter()
                .map(|slice| {
                    tape.constant(slice.map(|v| if v != 0 { F::one() } else { F::zero() }))
                })
                .collect();
            let h_con = encode_view(tape, h_bert, &ViewAdjacency::PerLayer(slices), &syn.congcn)?;
            let h_dep = encode_view(tape, h_bert, &ViewAdjacency::Shared(a_dep), &syn.depgcn)?;
            h_dep_final = Some(h_dep);
            let (fused, gate) = level1_syntactic_fusion(
                tape, h_con, h_dep, &syn.gate, &syn.attn, &syn.norm, dims.heads, None,
            )?;
            (fused, Some(gate))
        }
        None => (h_bert, None),
    };

    // AMR branch feeding level 2.
    let h_amr = match &bound.amr {
        Some(amr) => {
            let a_amr = tape.constant(prep.graphs.amr_mask::<F>());
            Some(encode_view(
                tape,
                h_bert,
                &ViewAdjacency::Shared(a_amr),
                &amr.gcn,
            )?)
        }
        None => None,
    };
    let level2 = level2_semantic_integration(
        tape,
        h_sem,
        match (&bound.amr, h_amr) {
            (Some(amr), Some(h)) => Some((h, &amr.gate)),
            _ => None,
        },
        h_syn,
        h_bert,
        &bound.level2_attn,
        &bound.level2_norm,
        &bound.level2_ffn,
        dims.heads,
        None,
    )?;
    let h_inter = level2.h_inter;

    // Level 3: knowledge incorporation (missing vectors enter as zeros).
    let (h_global, gate_kg) = match &bound.kg {
        Some(kg_vars) => {
            let raw = match &prep.kg {
                Some(kg) => tape.constant_f64(kg),
                None => tape.constant(Matrix::zeros(n, dims.d_kg)),
            };
            let (h_global, gate) = level3_knowledge_integration(
                tape,
                h_inter,
                raw,
                &kg_vars.project,
                &kg_vars.gate,
                &kg_vars.attn,
                &kg_vars.norm,
                dims.heads,
                None,
            )?;
            (h_global, Some(gate))
        }
        None => (h_inter, None),
    };

    let h_enhanced = match &bound.crossmodal {
        Some(cm) => cross_modal_enhance(tape, h_bert, h_global, cm, dims.heads, None)?,
        None => h_global,
    };

    let (h_final, alpha) =
        hierarchical_combine(tape, h_syn, h_inter, h_enhanced, bound.combine_logits)?;

    // Aspect classification.
    let (start, end) = prep.example.aspect_span;
    let span: Vec<usize> = (start..end).collect();
    let pooled = match options.aspect_pooling {
        AspectPooling::Mean => tape.mean_rows(h_final, &span),
        AspectPooling::FirstToken => tape.gather_rows(h_final, &[start]),
    };
    let logits = affine(tape, pooled, &bound.classifier)?;
    let probs = tape.row_softmax(logits, None);

    let mut out = ExampleForward {
        probs,
        ce: None,
        syn_losses: Vec::new(),
        amr_losses: Vec::new(),
        h_dep: h_dep_final,
        landmarks: None,
        a_sem,
        h_syn,
        h_inter,
        h_global,
        h_enhanced,
        h_final,
        gate_syn,
        gate_sem: level2.gate,
        gate_kg,
        alpha,
    };
    if !with_losses {
        return Ok(out);
    }

    let label = prep.example.label.index();
    let picked = tape.gather(probs, &[(0, label)]);
    let floored = tape.clamp_min(picked, crate::cast(PROB_FLOOR));
    let log_p = tape.ln(floored);
    out.ce = Some(tape.neg(log_p));

    if flags.loss_scl && flags.any_margin_loss() {
        let landmarks = select_landmarks(&importance_scores(tape.value(a_sem)));
        tape.note_selection(&landmarks.indices);
        for &anchor in &landmarks.indices {
            if flags.syn_loss_active() && contrastive.lambda_syn > 0.0 {
                let positives = positive_sets(anchor, &prep.graphs, StructuralView::Syntactic);
                out.syn_losses
                    .push(margin_view_loss(tape, anchor, h_syn, &positives, contrastive)?);
            }
            if let (true, Some(h)) = (flags.amr_loss_active(), h_amr) {
                if contrastive.lambda_amr > 0.0 {
                    let positives = positive_sets(anchor, &prep.graphs, StructuralView::Amr);
                    out.amr_losses
                        .push(margin_view_loss(tape, anchor, h, &positives, contrastive)?);
                }
            }
        }
        out.landmarks = Some(landmarks);
    } else if flags.loss_scl && flags.kg_loss_active() {
        // Landmarks are still reported for inspection even when only the
        // knowledge loss is active.
        let landmarks = select_landmarks(&importance_scores(tape.value(a_sem)));
        out.landmarks = Some(landmarks);
    }

    Ok(out)
}

/// Loss values of one batch (plain numbers, for logging).
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub scl: f64,
}

/// Batch forward output: the differentiable total plus per-example handles.
pub struct BatchForward {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub examples: Vec<ExampleForward>,
}

/// Mean cross-entropy over per-example probability rows, with the
/// probability floor applied inside each term.
pub fn ce_loss<F: Float>(tape: &mut Tape<F>, probs: &[Var], labels: &[usize]) -> Result<Var> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(CoreError::config(format!(
            "cross-entropy needs matching non-empty probs/labels, got {}/{}",
            probs.len(),
            labels.len()
        )));
    }
    let mut terms = Vec::with_capacity(probs.len());
    for (&p, &label) in probs.iter().zip(labels) {
        if tape.shape(p) != (1, 3) {
            return Err(CoreError::config("class probabilities must be 1x3"));
        }
        let picked = tape.gather(p, &[(0, label)]);
        let floored = tape.clamp_min(picked, crate::cast(PROB_FLOOR));
        let log_p = tape.ln(floored);
        terms.push(tape.neg(log_p));
    }
    let sum = tape.add_n(&terms);
    Ok(tape.scale(sum, crate::cast(1.0 / probs.len() as f64)))
}

/// The training objective: cross-entropy plus the contrastive regularizer
/// (whose branch weights live inside the regularizer itself).
pub fn total_loss<F: Float>(tape: &mut Tape<F>, ce: Var, scl: Var) -> Var {
    tape.add(ce, scl)
}

/// Run a whole batch: per-example forwards, mean cross-entropy, and the
/// contrastive terms pooled across the batch (anchors for the margin
/// losses, matched token/knowledge pairs for the InfoNCE).
pub fn forward_batch<'a, F: Float>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    batch: &[&'a PreparedExample],
    dims: &ModelDims,
    flags: &AblationFlags,
    contrastive: &ContrastiveConfig,
    options: &ForwardOptions,
    warnings: &mut Vec<String>,
) -> Result<BatchForward> {
    if batch.is_empty() {
        return Err(CoreError::config("cannot run an empty batch"));
    }
    let mut examples = Vec::with_capacity(batch.len());
    for prep in batch {
        examples.push(forward_example(
            tape,
            bound,
            prep,
            dims,
            flags,
            contrastive,
            options,
            true,
        )?);
    }

    let ces: Vec<Var> = examples
        .iter()
        .map(|e| e.ce.expect("loss-mode forward"))
        .collect();
    let ce_sum = tape.add_n(&ces);
    let ce = tape.scale(ce_sum, crate::cast(1.0 / batch.len() as f64));

    let syn_losses: Vec<Var> = examples.iter().flat_map(|e| e.syn_losses.clone()).collect();
    let amr_losses: Vec<Var> = examples.iter().flat_map(|e| e.amr_losses.clone()).collect();

    let kg_loss = if flags.kg_loss_active() && contrastive.lambda_kg > 0.0 {
        build_batch_infonce(tape, bound, batch, &examples, warnings)?
    } else {
        None
    };

    let scl = crate::contrastive::combined_scl(tape, &syn_losses, &amr_losses, kg_loss, contrastive);
    let total = total_loss(tape, ce, scl);
    let breakdown = LossBreakdown {
        total: tape.scalar_value(total).to_f64().unwrap_or(f64::NAN),
        ce: tape.scalar_value(ce).to_f64().unwrap_or(f64::NAN),
        scl: tape.scalar_value(scl).to_f64().unwrap_or(f64::NAN),
    };
    Ok(BatchForward {
        total,
        breakdown,
        examples,
    })
}

/// Pool dependency-encoded tokens with non-zero knowledge rows across the
/// batch and apply the InfoNCE. Returns `None` (with a recorded warning)
/// when fewer than two matched pairs exist.
fn build_batch_infonce<F: Float>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    batch: &[&PreparedExample],
    examples: &[ExampleForward],
    warnings: &mut Vec<String>,
) -> Result<Option<Var>> {
    let projection = match &bound.kg_proj {
        Some(p) => *p,
        None => return Ok(None),
    };
    let mut text_parts: Vec<Var> = Vec::new();
    let mut kg_rows: Vec<Vec<f64>> = Vec::new();
    for (prep, fwd) in batch.iter().zip(examples) {
        let (Some(kg), Some(h_dep)) = (&prep.kg, fwd.h_dep) else {
            continue;
        };
        let valid: Vec<usize> = (0..kg.rows())
            .filter(|&i| kg.row(i).iter().any(|&v| v != 0.0))
            .collect();
        if valid.is_empty() {
            continue;
        }
        text_parts.push(tape.gather_rows(h_dep, &valid));
        for &i in &valid {
            kg_rows.push(kg.row(i).to_vec());
        }
    }
    let pooled = kg_rows.len();
    if pooled < 2 {
        warnings.push(format!(
            "knowledge InfoNCE skipped: {pooled} matched token/vector pair(s) in batch (needs >= 2)"
        ));
        return Ok(None);
    }
    let text = tape.concat_rows(&text_parts);
    let kg = Matrix::from_vec(
        pooled,
        kg_rows[0].len(),
        kg_rows.into_iter().flatten().collect(),
    )?;
    let out = kg_infonce(tape, text, &kg, &projection)?;
    Ok(Some(out.loss))
}

/// Positive sets per landmark anchor, for the landmark debugging dump.
pub fn landmark_positive_sets(
    graphs: &ViewGraphs,
    landmarks: &LandmarkSet,
) -> (Vec<BTreeSet<usize>>, Vec<BTreeSet<usize>>) {
    let syn = landmarks
        .indices
        .iter()
        .map(|&a| positive_sets(a, graphs, StructuralView::Syntactic))
        .collect();
    let amr = landmarks
        .indices
        .iter()
        .map(|&a| positive_sets(a, graphs, StructuralView::Amr))
        .collect();
    (syn, amr)
}
