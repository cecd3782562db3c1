//! Shared differentiable blocks: affine projections, the unified GCN layer,
//! multi-head attention and the attention-derived semantic adjacency.

use alloc::format;
use alloc::vec::Vec;
use num_traits::Float;

use crate::autodiff::{Tape, Var};
use crate::error::CoreError;
use crate::matrix::Matrix;
use crate::Result;

/// Affine projection parameters (`x . weight + bias`), bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ProjVars {
    pub weight: Var,
    pub bias: Var,
}

/// Query/key projections; enough to produce attention score maps.
#[derive(Clone, Copy, Debug)]
pub struct QkVars {
    pub query: ProjVars,
    pub key: ProjVars,
}

/// Full attention block parameters.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub qk: QkVars,
    pub value: ProjVars,
    pub output: ProjVars,
}

/// Attention outputs: the projected result plus the per-head score maps.
/// `probs` rows are the post-softmax attention distributions; `logits` are
/// the scaled pre-softmax scores the semantic adjacency averages.
pub struct Attention {
    pub output: Var,
    pub probs: Vec<Var>,
    pub logits: Vec<Var>,
}

/// `x . W + b` with shape validation.
pub fn affine<F: Float>(tape: &mut Tape<F>, x: Var, proj: &ProjVars) -> Result<Var> {
    let (_, xc) = tape.shape(x);
    let (wr, wc) = tape.shape(proj.weight);
    let bias_shape = tape.shape(proj.bias);
    if xc != wr || bias_shape != (1, wc) {
        return Err(CoreError::config(format!(
            "affine shapes do not conform: x cols {xc}, weight {wr}x{wc}, bias {bias_shape:?}"
        )));
    }
    let xw = tape.matmul(x, proj.weight);
    Ok(tape.add_row(xw, proj.bias))
}

/// One unified GCN layer: `relu(rowscale(A.H.W + H.W))` where row `i` is
/// scaled by `1/(deg_i + 1)` and `deg_i` is the row sum of `A`.
///
/// The degree factors are treated as constants of the layer: every adjacency
/// fed through here is either a fixed graph or a row-stochastic attention
/// matrix whose row sums are identically 1, so the factors carry no gradient
/// either way.
pub fn gcn_layer<F: Float>(tape: &mut Tape<F>, h: Var, a: Var, w: Var) -> Result<Var> {
    let (n, d) = tape.shape(h);
    if tape.shape(a) != (n, n) {
        return Err(CoreError::config(format!(
            "gcn_layer adjacency must be {n}x{n}, got {:?}",
            tape.shape(a)
        )));
    }
    if tape.shape(w) != (d, d) {
        return Err(CoreError::config(format!(
            "gcn_layer weight must be {d}x{d}, got {:?}",
            tape.shape(w)
        )));
    }
    let hw = tape.matmul(h, w);
    let ahw = tape.matmul(a, hw);
    let summed = tape.add(ahw, hw);
    let mut recip = Matrix::zeros(n, 1);
    for i in 0..n {
        let mut deg = F::zero();
        for j in 0..n {
            deg = deg + tape.value(a).get(i, j);
        }
        recip.set(i, 0, F::one() / (deg + F::one()));
    }
    let recip = tape.constant(recip);
    let scaled = tape.mul_col(summed, recip);
    Ok(tape.relu(scaled))
}

/// The adjacency input to a GCN stack: one shared matrix for the
/// dependency/semantic/AMR views, or one slice per layer for the
/// constituency view (finest depth at layer 0, coarsening upward).
pub enum ViewAdjacency {
    Shared(Var),
    PerLayer(Vec<Var>),
}

/// Run a stack of GCN layers; `weights.len()` is the view's depth.
pub fn encode_view<F: Float>(
    tape: &mut Tape<F>,
    h0: Var,
    adjacency: &ViewAdjacency,
    weights: &[Var],
) -> Result<Var> {
    if weights.is_empty() {
        return Err(CoreError::config("encode_view needs at least one layer"));
    }
    if let ViewAdjacency::PerLayer(slices) = adjacency {
        if slices.len() != weights.len() {
            return Err(CoreError::config(format!(
                "encode_view has {} adjacency slices for {} layers",
                slices.len(),
                weights.len()
            )));
        }
    }
    let mut h = h0;
    for (layer, &w) in weights.iter().enumerate() {
        let a = match adjacency {
            ViewAdjacency::Shared(a) => *a,
            ViewAdjacency::PerLayer(slices) => slices[layer],
        };
        h = gcn_layer(tape, h, a, w)?;
    }
    Ok(h)
}

fn validate_attention<F: Float>(
    tape: &Tape<F>,
    q_in: Var,
    k_in: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<(usize, usize)> {
    let (_, d) = tape.shape(q_in);
    let (nk, dk) = tape.shape(k_in);
    if dk != d {
        return Err(CoreError::config(format!(
            "attention query width {d} does not match key width {dk}"
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(CoreError::config(format!(
            "attention width {d} is not divisible into {heads} heads"
        )));
    }
    if let Some(mask) = mask {
        if mask.len() != nk {
            return Err(CoreError::config(format!(
                "attention mask length {} does not match {nk} key positions",
                mask.len()
            )));
        }
        if !mask.iter().any(|&b| b) {
            return Err(CoreError::config("attention mask leaves no valid position"));
        }
    }
    Ok((d, d / heads))
}

/// Per-head scaled dot-product score maps (`1/sqrt(d_head)` scaling).
pub fn attention_scores<F: Float>(
    tape: &mut Tape<F>,
    q_in: Var,
    k_in: Var,
    qk: &QkVars,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Vec<Var>> {
    let (_, d_head) = validate_attention(tape, q_in, k_in, heads, mask)?;
    let q = affine(tape, q_in, &qk.query)?;
    let k = affine(tape, k_in, &qk.key)?;
    let scale: F = crate::cast(1.0 / (d_head as f64).sqrt());
    let mut logits = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d_head, d_head);
        let kh = tape.slice_cols(k, h * d_head, d_head);
        let raw = tape.matmul_nt(qh, kh);
        logits.push(tape.scale(raw, scale));
    }
    Ok(logits)
}

/// Multi-head scaled dot-product attention with a validity mask over key
/// positions. Returns the projected output together with both score maps.
pub fn multi_head_attention<F: Float>(
    tape: &mut Tape<F>,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    vars: &AttnVars,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Attention> {
    if tape.shape(k_in) != tape.shape(v_in) {
        return Err(CoreError::config(format!(
            "attention key shape {:?} does not match value shape {:?}",
            tape.shape(k_in),
            tape.shape(v_in)
        )));
    }
    let (_, d_head) = validate_attention(tape, q_in, k_in, heads, mask)?;
    let logits = attention_scores(tape, q_in, k_in, &vars.qk, heads, mask)?;
    let v = affine(tape, v_in, &vars.value)?;
    let mut probs = Vec::with_capacity(heads);
    let mut head_outputs = Vec::with_capacity(heads);
    for (h, &l) in logits.iter().enumerate() {
        let p = tape.row_softmax(l, mask);
        let vh = tape.slice_cols(v, h * d_head, d_head);
        head_outputs.push(tape.matmul(p, vh));
        probs.push(p);
    }
    let concat = tape.concat_cols(&head_outputs);
    let output = affine(tape, concat, &vars.output)?;
    Ok(Attention {
        output,
        probs,
        logits,
    })
}

/// Build the row-stochastic semantic adjacency from self-attention scores:
/// head-averaged pre-softmax maps, row softmax over valid positions, and an
/// optional keep-top-`p`-then-renormalize sparsification (off by default).
/// The diagonal participates in the softmax, so self-links are always
/// present without a separate step.
pub fn build_semantic_adjacency<F: Float>(
    tape: &mut Tape<F>,
    h_bert: Var,
    qk: &QkVars,
    heads: usize,
    mask: Option<&[bool]>,
    top_p: Option<usize>,
) -> Result<Var> {
    let logits = attention_scores(tape, h_bert, h_bert, qk, heads, mask)?;
    let summed = tape.add_n(&logits);
    let averaged = tape.scale(summed, crate::cast(1.0 / heads as f64));
    let sem = tape.row_softmax(averaged, mask);
    match top_p {
        None => Ok(sem),
        Some(p) => {
            let (_, n) = tape.shape(sem);
            if p == 0 || p > n {
                return Err(CoreError::config(format!(
                    "semantic sparsification keep-count {p} out of 1..={n}"
                )));
            }
            Ok(tape.row_topk_renormalize(sem, p))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParameterStore};

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        use crate::embed::{splitmix64, unit_interval};
        Matrix::from_fn(rows, cols, |r, c| {
            unit_interval(splitmix64(seed ^ ((r * 131 + c) as u64))) - 0.5
        })
    }

    fn proj(tape: &mut Tape<f64>, d_in: usize, d_out: usize, seed: u64) -> ProjVars {
        let weight = tape.constant(rand_mat(d_in, d_out, seed));
        let bias = tape.constant(rand_mat(1, d_out, seed ^ 0xBEEF));
        ProjVars { weight, bias }
    }

    fn attn_vars(tape: &mut Tape<f64>, d: usize, seed: u64) -> AttnVars {
        AttnVars {
            qk: QkVars {
                query: proj(tape, d, d, seed),
                key: proj(tape, d, d, seed ^ 1),
            },
            value: proj(tape, d, d, seed ^ 2),
            output: proj(tape, d, d, seed ^ 3),
        }
    }

    /// Scalar-loop evaluation of the GCN layer update, kept deliberately
    /// independent of the tape implementation.
    fn gcn_oracle(h: &Matrix<f64>, a: &Matrix<f64>, w: &Matrix<f64>) -> Matrix<f64> {
        let (n, d) = h.shape();
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            let mut deg = 0.0;
            for j in 0..n {
                deg += a.get(i, j);
            }
            for f in 0..d {
                let mut agg = 0.0;
                for j in 0..n {
                    let mut hjw = 0.0;
                    for t in 0..d {
                        hjw += h.get(j, t) * w.get(t, f);
                    }
                    agg += a.get(i, j) * hjw;
                }
                let mut hiw = 0.0;
                for t in 0..d {
                    hiw += h.get(i, t) * w.get(t, f);
                }
                let v = (agg + hiw) / (deg + 1.0);
                out.set(i, f, v.max(0.0));
            }
        }
        out
    }

    #[test]
    fn gcn_single_node_identity_weight() {
        let mut tape: Tape<f64> = Tape::new();
        let h = tape.constant(Matrix::from_vec(1, 2, vec![-1.0, 2.0]).unwrap());
        let a = tape.constant(Matrix::from_vec(1, 1, vec![1.0]).unwrap());
        let w = tape.constant(Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let out = gcn_layer(&mut tape, h, a, w).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 2.0]);
    }

    #[test]
    fn gcn_zero_adjacency_is_relu_hw() {
        let mut tape: Tape<f64> = Tape::new();
        let h0 = rand_mat(4, 3, 21);
        let h = tape.constant(h0.clone());
        let a = tape.constant(Matrix::zeros(4, 4));
        let w = tape.constant(Matrix::from_fn(3, 3, |r, c| f64::from(u8::from(r == c))));
        let out = gcn_layer(&mut tape, h, a, w).unwrap();
        let expect = h0.map(|v| v.max(0.0));
        assert_eq!(tape.value(out), &expect);
    }

    #[test]
    fn gcn_matches_scalar_oracle() {
        for case in 0..24u64 {
            let n = 1 + (case as usize % 8);
            let d = 1 + ((case / 8) as usize % 4);
            let h0 = rand_mat(n, d, case * 7 + 1);
            let a0 = rand_mat(n, n, case * 7 + 2).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let w0 = rand_mat(d, d, case * 7 + 3);
            let mut tape: Tape<f64> = Tape::new();
            let h = tape.constant(h0.clone());
            let a = tape.constant(a0.clone());
            let w = tape.constant(w0.clone());
            let out = gcn_layer(&mut tape, h, a, w).unwrap();
            let expect = gcn_oracle(&h0, &a0, &w0);
            for (got, want) in tape.value(out).data().iter().zip(expect.data()) {
                assert!((got - want).abs() < 1e-9, "case {case}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn encode_view_single_layer_equals_gcn_layer() {
        let h0 = rand_mat(3, 4, 31);
        let a0 = rand_mat(3, 3, 32).map(f64::abs);
        let w0 = rand_mat(4, 4, 33);
        let mut tape: Tape<f64> = Tape::new();
        let h = tape.constant(h0);
        let a = tape.constant(a0);
        let w = tape.constant(w0);
        let direct = gcn_layer(&mut tape, h, a, w).unwrap();
        let stacked = encode_view(&mut tape, h, &ViewAdjacency::Shared(a), &[w]).unwrap();
        assert_eq!(tape.value(direct), tape.value(stacked));
    }

    #[test]
    fn encode_view_identity_fixed_point() {
        // Identity adjacency and identity weights leave non-negative
        // features unchanged at any depth: each layer is relu(h).
        let h0 = rand_mat(4, 3, 41).map(f64::abs);
        let mut tape: Tape<f64> = Tape::new();
        let h = tape.constant(h0.clone());
        let eye_a = tape.constant(Matrix::from_fn(4, 4, |r, c| f64::from(u8::from(r == c))));
        let eye_w = tape.constant(Matrix::from_fn(3, 3, |r, c| f64::from(u8::from(r == c))));
        let out = encode_view(
            &mut tape,
            h,
            &ViewAdjacency::Shared(eye_a),
            &[eye_w, eye_w, eye_w],
        )
        .unwrap();
        for (got, want) in tape.value(out).data().iter().zip(h0.data()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_view_rejects_slice_mismatch() {
        let mut tape: Tape<f64> = Tape::new();
        let h = tape.constant(rand_mat(2, 2, 1));
        let a = tape.constant(rand_mat(2, 2, 2).map(f64::abs));
        let w = tape.constant(rand_mat(2, 2, 3));
        let err = encode_view(&mut tape, h, &ViewAdjacency::PerLayer(vec![a]), &[w, w]);
        assert!(matches!(err, Err(CoreError::Config(_))));
    }

    #[test]
    fn mha_single_token_weight_one() {
        let d = 8;
        let mut tape: Tape<f64> = Tape::new();
        let x0 = rand_mat(1, d, 51);
        let x = tape.constant(x0.clone());
        let vars = attn_vars(&mut tape, d, 52);
        let attn = multi_head_attention(&mut tape, x, x, x, &vars, 4, None).unwrap();
        for p in &attn.probs {
            assert_eq!(tape.value(*p).data(), &[1.0]);
        }
        // With weight exactly 1 the output is the value projection passed
        // through the output projection.
        let v = affine(&mut tape, x, &vars.value).unwrap();
        let manual = affine(&mut tape, v, &vars.output).unwrap();
        for (got, want) in tape
            .value(attn.output)
            .data()
            .iter()
            .zip(tape.value(manual).data())
        {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mha_prob_rows_sum_to_one() {
        let d = 8;
        let n = 6;
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(rand_mat(n, d, 61));
        let vars = attn_vars(&mut tape, d, 62);
        let attn = multi_head_attention(&mut tape, x, x, x, &vars, 2, None).unwrap();
        assert_eq!(attn.probs.len(), 2);
        for p in &attn.probs {
            for i in 0..n {
                let sum: f64 = tape.value(*p).row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mha_is_permutation_equivariant() {
        let d = 8;
        let n = 5;
        let x0 = rand_mat(n, d, 71);
        let perm = [3usize, 0, 4, 1, 2];

        let run = |input: Matrix<f64>| {
            let mut tape: Tape<f64> = Tape::new();
            let x = tape.constant(input);
            let vars = attn_vars(&mut tape, d, 72);
            let attn = multi_head_attention(&mut tape, x, x, x, &vars, 4, None).unwrap();
            tape.value(attn.output).clone()
        };

        let base = run(x0.clone());
        let permuted_in = Matrix::from_fn(n, d, |r, c| x0.get(perm[r], c));
        let permuted_out = run(permuted_in);
        for r in 0..n {
            for c in 0..d {
                let a = base.get(perm[r], c);
                let b = permuted_out.get(r, c);
                assert!((a - b).abs() < 1e-9, "row {r} col {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn mha_rejects_empty_mask_and_bad_heads() {
        let d = 8;
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(rand_mat(2, d, 81));
        let vars = attn_vars(&mut tape, d, 82);
        let mask = vec![false, false];
        assert!(multi_head_attention(&mut tape, x, x, x, &vars, 4, Some(&mask)).is_err());
        assert!(multi_head_attention(&mut tape, x, x, x, &vars, 3, None).is_err());
    }

    #[test]
    fn semantic_adjacency_single_token() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(rand_mat(1, 8, 91));
        let qk = QkVars {
            query: proj(&mut tape, 8, 8, 92),
            key: proj(&mut tape, 8, 8, 93),
        };
        let sem = build_semantic_adjacency(&mut tape, x, &qk, 4, None, None).unwrap();
        assert_eq!(tape.value(sem).data(), &[1.0]);
    }

    #[test]
    fn semantic_adjacency_rows_stochastic_and_positive() {
        let n = 7;
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(rand_mat(n, 8, 101));
        let qk = QkVars {
            query: proj(&mut tape, 8, 8, 102),
            key: proj(&mut tape, 8, 8, 103),
        };
        let sem = build_semantic_adjacency(&mut tape, x, &qk, 4, None, None).unwrap();
        for i in 0..n {
            let row = tape.value(sem).row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn semantic_adjacency_sparsified_keeps_top_p() {
        let n = 5;
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(rand_mat(n, 8, 111));
        let qk = QkVars {
            query: proj(&mut tape, 8, 8, 112),
            key: proj(&mut tape, 8, 8, 113),
        };
        let sem = build_semantic_adjacency(&mut tape, x, &qk, 4, None, Some(2)).unwrap();
        for i in 0..n {
            let row = tape.value(sem).row(i);
            assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), 2);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gcn_params_receive_gradients() {
        let mut store: ParameterStore<f64> = ParameterStore::new(7);
        store
            .register("g.w", 3, 3, Init::Uniform { fan_in: 3 })
            .unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(rand_mat(4, 3, 121));
        let a = tape.constant(rand_mat(4, 4, 122).map(f64::abs));
        let w = tape.param(&store, "g.w").unwrap();
        let out = gcn_layer(&mut tape, h, a, w).unwrap();
        let loss = tape.mean_all(out);
        tape.backward_into(loss, &mut store).unwrap();
        assert!(store.grad("g.w").unwrap().data().iter().any(|&v| v != 0.0));
    }
}
