//! Pre-parsed sentence ingestion and compilation of the linguistic view
//! graphs: the integer-labeled AMR adjacency, the symmetric dependency
//! adjacency and the depth-layered constituency tensor. The semantic
//! adjacency is attention-derived and is produced in [`crate::nn`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::matrix::Matrix;
use crate::Result;

/// Sentiment class, in the fixed persisted order
/// (`positive`, `neutral`, `negative`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Neutral,
    Negative,
}

impl Polarity {
    pub const CLASS_ORDER: [Polarity; 3] =
        [Polarity::Positive, Polarity::Neutral, Polarity::Negative];

    pub fn index(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Neutral => 1,
            Polarity::Negative => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Polarity> {
        Self::CLASS_ORDER.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Neutral => "neutral",
            Polarity::Negative => "negative",
        }
    }
}

/// Directed dependency edge `(head index, dependent index, relation)`.
pub type DepEdge = (usize, usize, String);
/// Constituent `(start, end, label, depth from the leaves)`, half-open span.
pub type Constituent = (usize, usize, String, usize);
/// Directed AMR edge `(source index, relation, target index)`.
pub type AmrEdge = (usize, String, usize);

/// One pre-parsed sentence with its aspect span, gold label and the three
/// externally produced parse structures. Token indices everywhere refer to
/// positions in `tokens`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParsedExample {
    pub tokens: Vec<String>,
    /// Half-open `[start, end)` interval of the aspect term.
    pub aspect_span: (usize, usize),
    pub label: Polarity,
    #[serde(default)]
    pub dep_edges: Vec<DepEdge>,
    #[serde(default)]
    pub constituents: Vec<Constituent>,
    #[serde(default)]
    pub amr_edges: Vec<AmrEdge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kg_ref: Option<String>,
}

impl ParsedExample {
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    /// Check every structural invariant; the message names the offending
    /// field and entry so loaders can report precise record errors.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(CoreError::validation("tokens: sentence is empty"));
        }
        let (start, end) = self.aspect_span;
        if start >= end || end > n {
            return Err(CoreError::validation(format!(
                "aspect_span: [{start}, {end}) is not a non-empty interval within [0, {n})"
            )));
        }
        for (i, (head, dep, rel)) in self.dep_edges.iter().enumerate() {
            if *head >= n || *dep >= n {
                return Err(CoreError::validation(format!(
                    "dep_edges[{i}]: ({head}, {dep}, {rel:?}) has a token index outside [0, {n})"
                )));
            }
        }
        for (i, (s, e, label, depth)) in self.constituents.iter().enumerate() {
            if *s >= *e || *e > n {
                return Err(CoreError::validation(format!(
                    "constituents[{i}]: {label:?} span [{s}, {e}) is not a non-empty interval within [0, {n})"
                )));
            }
            if *depth == 0 {
                return Err(CoreError::validation(format!(
                    "constituents[{i}]: {label:?} has depth_from_leaves 0 (must be >= 1)"
                )));
            }
        }
        for (i, (src, rel, tgt)) in self.amr_edges.iter().enumerate() {
            if *src >= n || *tgt >= n {
                return Err(CoreError::validation(format!(
                    "amr_edges[{i}]: ({src}, {rel:?}, {tgt}) has a token index outside [0, {n})"
                )));
            }
        }
        Ok(())
    }
}

/// Reserved vocabulary index meaning "no edge".
pub const AMR_NONE: u32 = 0;
/// Reserved vocabulary index for diagonal self-loops.
pub const AMR_SELF: u32 = 1;
/// Reserved vocabulary index for relations outside the vocabulary.
pub const AMR_UNKNOWN: u32 = 2;

/// Names of the three reserved entries, in index order.
pub const AMR_RESERVED: [&str; 3] = ["none", "self", "unknown"];

/// Ordered map from canonical AMR relation to a dense integer index.
/// Indices 0/1/2 are reserved for `none`/`self`/`unknown`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, u32>", into = "BTreeMap<String, u32>")]
pub struct AmrVocab {
    by_name: BTreeMap<String, u32>,
}

impl AmrVocab {
    /// Canonical relations installed by [`AmrVocab::default`], in index
    /// order starting at 3: argument roles, common modifiers/operators and
    /// the preposition names produced by the `:prep-*` transform.
    pub const DEFAULT_RELATIONS: [&'static str; 21] = [
        ":ARG0", ":ARG1", ":ARG2", ":ARG3", ":ARG4", ":ARG5", ":mod", ":manner", ":time",
        ":op1", ":op2", "with", "in", "on", "at", "for", "to", "from", "by", "as", "against",
    ];

    /// Build a vocabulary from explicit entries. The three reserved entries
    /// must be present at their fixed indices and indices must be dense.
    pub fn from_entries(entries: BTreeMap<String, u32>) -> Result<Self> {
        for (name, idx) in AMR_RESERVED.iter().zip(0u32..) {
            match entries.get(*name) {
                Some(&found) if found == idx => {}
                Some(&found) => {
                    return Err(CoreError::validation(format!(
                        "vocabulary: reserved entry {name:?} must have index {idx}, found {found}"
                    )))
                }
                None => {
                    return Err(CoreError::validation(format!(
                        "vocabulary: reserved entry {name:?} (index {idx}) is missing"
                    )))
                }
            }
        }
        let mut seen = vec![false; entries.len()];
        for (name, &idx) in &entries {
            let slot = seen.get_mut(idx as usize).ok_or_else(|| {
                CoreError::validation(format!(
                    "vocabulary: entry {name:?} index {idx} is out of the dense range 0..{}",
                    entries.len()
                ))
            })?;
            if *slot {
                return Err(CoreError::validation(format!(
                    "vocabulary: index {idx} assigned to more than one relation"
                )));
            }
            *slot = true;
        }
        Ok(AmrVocab { by_name: entries })
    }

    /// Index of a canonical relation, if present.
    pub fn index(&self, relation: &str) -> Option<u32> {
        self.by_name.get(relation).copied()
    }

    /// Index for a canonical relation, falling back to `unknown`.
    pub fn index_or_unknown(&self, relation: &str) -> u32 {
        self.index(relation).unwrap_or(AMR_UNKNOWN)
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved entries are always present
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, u32)> {
        self.by_name.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl Default for AmrVocab {
    fn default() -> Self {
        let mut entries = BTreeMap::new();
        for (idx, name) in AMR_RESERVED.iter().enumerate() {
            entries.insert(String::from(*name), idx as u32);
        }
        for (offset, name) in Self::DEFAULT_RELATIONS.iter().enumerate() {
            entries.insert(String::from(*name), (AMR_RESERVED.len() + offset) as u32);
        }
        AmrVocab { by_name: entries }
    }
}

impl TryFrom<BTreeMap<String, u32>> for AmrVocab {
    type Error = CoreError;

    fn try_from(entries: BTreeMap<String, u32>) -> Result<Self> {
        AmrVocab::from_entries(entries)
    }
}

impl From<AmrVocab> for BTreeMap<String, u32> {
    fn from(v: AmrVocab) -> Self {
        v.by_name
    }
}

/// The compiled adjacency structures for one sentence. `a_sem` is attached
/// after the attention forward pass; graph compilation leaves it `None`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViewGraphs {
    pub n: usize,
    /// Integer-labeled AMR adjacency (vocabulary indices, `self` diagonal).
    pub a_amr: Matrix<u32>,
    /// Symmetric binary dependency adjacency with unit diagonal.
    pub a_dep: Matrix<u8>,
    /// One binary slice per selected constituency depth, finest first.
    pub a_con: Vec<Matrix<u8>>,
    /// The depths (distance from leaves) the slices were sampled at.
    pub depth_slices: Vec<usize>,
    /// Row-stochastic semantic adjacency, populated by the encoder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_sem: Option<Matrix<f64>>,
}

impl ViewGraphs {
    /// Binarized AMR adjacency (`nonzero -> 1`) used as the GCN propagation
    /// matrix; the labeled matrix is retained for the contrastive module.
    pub fn amr_mask<F: Float>(&self) -> Matrix<F> {
        self.a_amr
            .map(|v| if v != AMR_NONE { F::one() } else { F::zero() })
    }
}

/// Rewrite an AMR relation to its canonical form.
///
/// Inverse relations (`:R-of`) strip the suffix and flip edge direction;
/// prepositional relations (`:prep-X`) rewrite to the bare preposition.
/// Anything else (including already-canonical output) passes through.
pub fn normalize_amr_relation(relation: &str) -> (&str, bool) {
    let (base, flip) = match relation.strip_suffix("-of") {
        Some(base) if base.starts_with(':') && !base.is_empty() => (base, true),
        _ => (relation, false),
    };
    match base.strip_prefix(":prep-") {
        Some(prep) if !prep.is_empty() => (prep, flip),
        _ => (base, flip),
    }
}

/// Compile the integer-labeled AMR adjacency (vocabulary indices; the
/// diagonal is forced to `self` after all edges are placed, and for
/// duplicate directed cells the last edge in input order wins).
pub fn build_amr_adjacency(example: &ParsedExample, vocab: &AmrVocab) -> Result<Matrix<u32>> {
    let n = example.token_count();
    let mut adj: Matrix<u32> = Matrix::new(n, n); // zero == AMR_NONE
    for (i, (src, rel, tgt)) in example.amr_edges.iter().enumerate() {
        if *src >= n || *tgt >= n {
            return Err(CoreError::validation(format!(
                "amr_edges[{i}]: ({src}, {rel:?}, {tgt}) has a token index outside [0, {n})"
            )));
        }
        let (canonical, flip) = normalize_amr_relation(rel);
        let (from, to) = if flip { (*tgt, *src) } else { (*src, *tgt) };
        adj.set(from, to, vocab.index_or_unknown(canonical));
    }
    for i in 0..n {
        adj.set(i, i, AMR_SELF);
    }
    Ok(adj)
}

/// Compile the symmetric binary dependency adjacency with unit diagonal;
/// relation labels are discarded.
pub fn build_dep_adjacency(example: &ParsedExample) -> Result<Matrix<u8>> {
    let n = example.token_count();
    let mut adj: Matrix<u8> = Matrix::new(n, n);
    for (i, (head, dep, rel)) in example.dep_edges.iter().enumerate() {
        if *head >= n || *dep >= n {
            return Err(CoreError::validation(format!(
                "dep_edges[{i}]: ({head}, {dep}, {rel:?}) has a token index outside [0, {n})"
            )));
        }
        adj.set(*head, *dep, 1);
        adj.set(*dep, *head, 1);
    }
    for i in 0..n {
        adj.set(i, i, 1);
    }
    Ok(adj)
}

/// Choose `layers` constituency depths evenly spaced over `[1, max_depth]`
/// (nearest-integer rounding, ascending, duplicates allowed when `layers`
/// exceeds `max_depth`). A single layer samples the deepest (coarsest)
/// level; two or more always include both depth 1 and `max_depth`.
pub fn select_constituency_depths(max_depth: usize, layers: usize) -> Vec<usize> {
    debug_assert!(max_depth >= 1 && layers >= 1);
    if layers == 1 {
        return vec![max_depth];
    }
    let span = (max_depth - 1) as f64;
    let steps = (layers - 1) as f64;
    (0..layers)
        .map(|i| {
            let d = 1.0 + span * i as f64 / steps;
            let rounded = Float::round(d) as usize;
            rounded.clamp(1, max_depth)
        })
        .collect()
}

/// Compile one binary slice per selected depth: entry `[i][j]` is 1 iff some
/// constituent at exactly that depth contains both tokens; diagonals are
/// forced to 1, so a depth with no constituents yields the identity slice.
pub fn build_constituency_tensor(example: &ParsedExample, depths: &[usize]) -> Vec<Matrix<u8>> {
    let n = example.token_count();
    depths
        .iter()
        .map(|&depth| {
            let mut slice: Matrix<u8> = Matrix::new(n, n);
            for (s, e, _, d) in &example.constituents {
                if *d != depth {
                    continue;
                }
                for i in *s..*e {
                    for j in *s..*e {
                        slice.set(i, j, 1);
                    }
                }
            }
            for i in 0..n {
                slice.set(i, i, 1);
            }
            slice
        })
        .collect()
}

/// Validate an example and compile all parser-derived adjacency structures;
/// `con_layers` is the ConGCN depth (one tensor slice per layer).
pub fn compile_view_graphs(
    example: &ParsedExample,
    vocab: &AmrVocab,
    con_layers: usize,
) -> Result<ViewGraphs> {
    if con_layers == 0 {
        return Err(CoreError::config("constituency layer count must be >= 1"));
    }
    example.validate()?;
    let max_depth = example
        .constituents
        .iter()
        .map(|(_, _, _, d)| *d)
        .max()
        .unwrap_or(1);
    let depth_slices = select_constituency_depths(max_depth, con_layers);
    Ok(ViewGraphs {
        n: example.token_count(),
        a_amr: build_amr_adjacency(example, vocab)?,
        a_dep: build_dep_adjacency(example)?,
        a_con: build_constituency_tensor(example, &depth_slices),
        depth_slices,
        a_sem: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example(n: usize) -> ParsedExample {
        ParsedExample {
            tokens: (0..n).map(|i| format!("w{i}")).collect(),
            aspect_span: (0, 1),
            label: Polarity::Neutral,
            dep_edges: vec![],
            constituents: vec![],
            amr_edges: vec![],
            embedding_ref: None,
            kg_ref: None,
        }
    }

    #[test]
    fn normalize_rewrites_inverse_and_prepositions() {
        assert_eq!(normalize_amr_relation(":ARG0-of"), (":ARG0", true));
        assert_eq!(normalize_amr_relation(":prep-with"), ("with", false));
        assert_eq!(normalize_amr_relation(":mod"), (":mod", false));
        assert_eq!(normalize_amr_relation(":prep-with-of"), ("with", true));
    }

    #[test]
    fn normalize_is_idempotent_on_canonical_output() {
        for rel in [":ARG0-of", ":prep-with", ":mod", ":time-of", ":prep-at"] {
            let (c1, _) = normalize_amr_relation(rel);
            let (c2, flip2) = normalize_amr_relation(c1);
            assert_eq!(c1, c2);
            assert!(!flip2);
        }
    }

    #[test]
    fn amr_adjacency_direct_edge() {
        let vocab = AmrVocab::default();
        let mut ex = example(3);
        ex.amr_edges = vec![(2, String::from(":ARG1"), 0)];
        let v_arg1 = vocab.index(":ARG1").unwrap();
        let adj = build_amr_adjacency(&ex, &vocab).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j {
                    AMR_SELF
                } else if (i, j) == (2, 0) {
                    v_arg1
                } else {
                    AMR_NONE
                };
                assert_eq!(adj.get(i, j), expect, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn amr_adjacency_flips_inverse_relations() {
        // (0, :ARG0-of, 2) is the inverse of (2, :ARG0, 0): the stored cell
        // is [2][0] with the canonical :ARG0 index.
        let vocab = AmrVocab::default();
        let mut ex = example(3);
        ex.amr_edges = vec![(0, String::from(":ARG0-of"), 2)];
        let adj = build_amr_adjacency(&ex, &vocab).unwrap();
        assert_eq!(adj.get(2, 0), vocab.index(":ARG0").unwrap());
        assert_eq!(adj.get(0, 2), AMR_NONE);
        assert_eq!(adj.get(0, 0), AMR_SELF);
    }

    #[test]
    fn amr_adjacency_empty_edges_is_self_diagonal() {
        let adj = build_amr_adjacency(&example(2), &AmrVocab::default()).unwrap();
        assert_eq!(adj.data(), &[1, 0, 0, 1]);
    }

    #[test]
    fn amr_adjacency_unknown_relation_and_last_wins() {
        let vocab = AmrVocab::default();
        let mut ex = example(2);
        ex.amr_edges = vec![
            (0, String::from(":made-up"), 1),
            (0, String::from(":ARG2"), 1),
        ];
        let adj = build_amr_adjacency(&ex, &vocab).unwrap();
        assert_eq!(adj.get(0, 1), vocab.index(":ARG2").unwrap());

        ex.amr_edges = vec![(0, String::from(":made-up"), 1)];
        let adj = build_amr_adjacency(&ex, &vocab).unwrap();
        assert_eq!(adj.get(0, 1), AMR_UNKNOWN);
    }

    #[test]
    fn amr_adjacency_rejects_bad_index() {
        let mut ex = example(2);
        ex.amr_edges = vec![(0, String::from(":ARG0"), 5)];
        let err = build_amr_adjacency(&ex, &AmrVocab::default()).unwrap_err();
        assert!(matches!(err, CoreError::Validation(msg) if msg.contains("amr_edges[0]")));
    }

    #[test]
    fn dep_adjacency_symmetrizes() {
        let mut ex = example(3);
        ex.dep_edges = vec![(0, 1, String::from("amod"))];
        let adj = build_dep_adjacency(&ex).unwrap();
        assert_eq!(adj.data(), &[1, 1, 0, 1, 1, 0, 0, 0, 1]);
    }

    #[test]
    fn dep_adjacency_single_token() {
        let adj = build_dep_adjacency(&example(1)).unwrap();
        assert_eq!(adj.data(), &[1]);
    }

    #[test]
    fn depth_selection_spacing() {
        assert_eq!(select_constituency_depths(9, 3), vec![1, 5, 9]);
        assert_eq!(select_constituency_depths(2, 3), vec![1, 2, 2]);
        assert_eq!(select_constituency_depths(5, 1), vec![5]);
        assert_eq!(select_constituency_depths(1, 4), vec![1, 1, 1, 1]);
        // Endpoints always present when layers >= 2.
        for d in 1..12 {
            for l in 2..8 {
                let picks = select_constituency_depths(d, l);
                assert_eq!(picks.len(), l);
                assert_eq!(picks[0], 1);
                assert_eq!(*picks.last().unwrap(), d);
                assert!(picks.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn constituency_tensor_two_level_tree() {
        // (S (NP w0 w1) (VP w2)) with depths [1, 2].
        let mut ex = example(3);
        ex.constituents = vec![
            (0, 2, String::from("NP"), 1),
            (2, 3, String::from("VP"), 1),
            (0, 3, String::from("S"), 2),
        ];
        let slices = build_constituency_tensor(&ex, &[1, 2]);
        assert_eq!(slices[0].data(), &[1, 1, 0, 1, 1, 0, 0, 0, 1]);
        assert_eq!(slices[1].data(), &[1; 9]);
    }

    #[test]
    fn constituency_tensor_empty_depth_is_identity() {
        let mut ex = example(4);
        ex.constituents = vec![(0, 4, String::from("S"), 2)];
        let slices = build_constituency_tensor(&ex, &[1]);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(slices[0].get(i, j), u8::from(i == j));
            }
        }
    }

    #[test]
    fn validate_rejects_bad_records() {
        let mut ex = example(3);
        ex.aspect_span = (2, 2);
        assert!(ex.validate().is_err());

        let mut ex = example(3);
        ex.dep_edges = vec![(0, 3, String::from("x"))];
        assert!(ex.validate().is_err());

        let mut ex = example(3);
        ex.constituents = vec![(0, 2, String::from("NP"), 0)];
        assert!(ex.validate().is_err());
    }

    #[test]
    fn vocab_requires_reserved_entries() {
        let mut entries = BTreeMap::new();
        entries.insert(String::from("none"), 0u32);
        entries.insert(String::from("self"), 1);
        assert!(AmrVocab::from_entries(entries.clone()).is_err());
        entries.insert(String::from("unknown"), 2);
        entries.insert(String::from(":ARG0"), 3);
        assert!(AmrVocab::from_entries(entries.clone()).is_ok());
        entries.insert(String::from(":ARG1"), 5); // gap at 4
        assert!(AmrVocab::from_entries(entries).is_err());
    }

    proptest! {
        #[test]
        fn dep_is_symmetric_with_unit_diagonal(
            n in 1usize..10,
            edges in proptest::collection::vec((0usize..10, 0usize..10), 0..16),
        ) {
            let mut ex = example(n);
            ex.dep_edges = edges
                .into_iter()
                .map(|(h, d)| (h % n, d % n, String::from("dep")))
                .collect();
            let adj = build_dep_adjacency(&ex).unwrap();
            for i in 0..n {
                prop_assert_eq!(adj.get(i, i), 1);
                for j in 0..n {
                    prop_assert_eq!(adj.get(i, j), adj.get(j, i));
                }
            }
        }

        #[test]
        fn amr_diagonal_is_self_and_entries_in_vocab(
            n in 1usize..10,
            edges in proptest::collection::vec((0usize..10, 0usize..10, 0usize..6), 0..12),
        ) {
            let vocab = AmrVocab::default();
            let rels = [":ARG0", ":ARG1-of", ":prep-with", ":mod", ":weird", ":op1"];
            let mut ex = example(n);
            ex.amr_edges = edges
                .into_iter()
                .map(|(s, t, r)| (s % n, String::from(rels[r]), t % n))
                .collect();
            let adj = build_amr_adjacency(&ex, &vocab).unwrap();
            for i in 0..n {
                prop_assert_eq!(adj.get(i, i), AMR_SELF);
                for j in 0..n {
                    prop_assert!((adj.get(i, j) as usize) < vocab.len());
                }
            }
        }

        #[test]
        fn con_slices_are_reflexive_and_symmetric(
            n in 2usize..10,
            split in 1usize..9,
            layers in 1usize..5,
        ) {
            let split = split.min(n - 1);
            let mut ex = example(n);
            ex.constituents = vec![
                (0, split, String::from("NP"), 1),
                (split, n, String::from("VP"), 1),
                (0, n, String::from("S"), 2),
            ];
            let graphs = compile_view_graphs(&ex, &AmrVocab::default(), layers).unwrap();
            prop_assert_eq!(graphs.a_con.len(), layers);
            for slice in &graphs.a_con {
                for i in 0..n {
                    prop_assert_eq!(slice.get(i, i), 1);
                    for j in 0..n {
                        prop_assert_eq!(slice.get(i, j), slice.get(j, i));
                    }
                }
            }
        }
    }
}
