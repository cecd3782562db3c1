//! Seeded synthetic fixture corpus.
//!
//! Sentences carry one aspect token and two opinion tokens of different
//! polarities. The gold label is the polarity of the opinion token linked
//! to the aspect by AMR edges; the dependency tree always attaches the
//! aspect to the *other* opinion token, and examples come in pairs that are
//! identical except for those AMR links (and therefore the label). Any
//! model blind to the AMR view produces the same prediction for both
//! members of a pair, so it can label at most half of a pair correctly,
//! while the AMR links fully determine the gold labels.
//!
//! Token embeddings are emitted as an artifact keyed by `embedding_ref`,
//! with each row a pure function of the token *string*, so lexical identity
//! (not position) carries the signal.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{splitmix64, token_identity_vector};
use crate::graphs::{AmrVocab, ParsedExample, Polarity};
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub examples: usize,
    pub seed: u64,
    /// Width of the emitted embedding rows.
    pub embedding_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            examples: 30,
            seed: 2024,
            embedding_dim: 16,
        }
    }
}

/// A generated corpus plus its embedding artifact and vocabulary.
pub struct SynthCorpus {
    pub examples: Vec<ParsedExample>,
    /// `embedding_ref -> n x d` rows, one entry per example.
    pub embeddings: BTreeMap<String, Matrix<f64>>,
    pub vocab: AmrVocab,
}

const ASPECTS: [&str; 8] = [
    "battery", "screen", "keyboard", "service", "pasta", "camera", "staff", "interface",
];
const POSITIVE_WORDS: [&str; 5] = ["excellent", "delightful", "superb", "lovely", "great"];
const NEGATIVE_WORDS: [&str; 5] = ["terrible", "awful", "disappointing", "bland", "poor"];
const NEUTRAL_WORDS: [&str; 5] = ["average", "ordinary", "standard", "typical", "plain"];
const FILLERS: [&str; 6] = ["really", "overall", "quite", "frankly", "honestly", "somewhat"];

const POLARITY_PAIRS: [(Polarity, Polarity); 6] = [
    (Polarity::Positive, Polarity::Negative),
    (Polarity::Negative, Polarity::Neutral),
    (Polarity::Neutral, Polarity::Positive),
    (Polarity::Negative, Polarity::Positive),
    (Polarity::Positive, Polarity::Neutral),
    (Polarity::Neutral, Polarity::Negative),
];

fn opinion_word(rng: &mut ChaCha8Rng, polarity: Polarity) -> &'static str {
    let pool: &[&str] = match polarity {
        Polarity::Positive => &POSITIVE_WORDS,
        Polarity::Negative => &NEGATIVE_WORDS,
        Polarity::Neutral => &NEUTRAL_WORDS,
    };
    pool[rng.gen_range(0..pool.len())]
}

struct SentenceLayout {
    tokens: Vec<String>,
    aspect: usize,
    first_opinion: usize,
    second_opinion: usize,
    dep_edges: Vec<(usize, usize, String)>,
    constituents: Vec<(usize, usize, String, usize)>,
}

/// Sentence template: `the ASPECT was OP1 but also OP2 [fillers...]`.
/// The dependency tree attaches the aspect to the *second* opinion token
/// (`amod`), which is the misleading signal.
fn build_sentence(rng: &mut ChaCha8Rng, pair_index: usize) -> SentenceLayout {
    let aspect_word = ASPECTS[pair_index % ASPECTS.len()];
    let (pol_a, pol_b) = POLARITY_PAIRS[pair_index % POLARITY_PAIRS.len()];
    let op1 = opinion_word(rng, pol_a);
    let op2 = opinion_word(rng, pol_b);

    let mut tokens: Vec<String> = vec![
        "the".to_string(),
        aspect_word.to_string(),
        "was".to_string(),
        op1.to_string(),
        "but".to_string(),
        "also".to_string(),
        op2.to_string(),
    ];
    let extra = rng.gen_range(0..=3usize);
    for _ in 0..extra {
        tokens.push(FILLERS[rng.gen_range(0..FILLERS.len())].to_string());
    }
    let n = tokens.len();

    let mut dep_edges = vec![
        (1, 0, "det".to_string()),
        (2, 1, "nsubj".to_string()),
        (2, 3, "acomp".to_string()),
        (3, 4, "cc".to_string()),
        (3, 6, "conj".to_string()),
        (6, 5, "advmod".to_string()),
        (1, 6, "amod".to_string()), // misleading aspect attachment
    ];
    for filler in 7..n {
        dep_edges.push((filler - 1, filler, "dep".to_string()));
    }

    let constituents = vec![
        (0, 2, "NP".to_string(), 1),
        (2, n, "VP".to_string(), 1),
        (0, n, "S".to_string(), 2),
    ];

    SentenceLayout {
        tokens,
        aspect: 1,
        first_opinion: 3,
        second_opinion: 6,
        dep_edges,
        constituents,
    }
}

fn polarity_of(word: &str) -> Polarity {
    if POSITIVE_WORDS.contains(&word) {
        Polarity::Positive
    } else if NEGATIVE_WORDS.contains(&word) {
        Polarity::Negative
    } else {
        Polarity::Neutral
    }
}

fn member(layout: &SentenceLayout, linked: usize, index: usize) -> ParsedExample {
    let label = polarity_of(&layout.tokens[linked]);
    ParsedExample {
        tokens: layout.tokens.clone(),
        aspect_span: (layout.aspect, layout.aspect + 1),
        label,
        dep_edges: layout.dep_edges.clone(),
        constituents: layout.constituents.clone(),
        amr_edges: vec![
            (layout.aspect, ":mod".to_string(), linked),
            (linked, ":ARG1".to_string(), layout.aspect),
        ],
        embedding_ref: Some(format!("ex{index:03}")),
        kg_ref: None,
    }
}

/// Generate the fixture corpus: `examples` sentences in AMR-contradiction
/// pairs, plus the token-identity embedding artifact.
pub fn generate_corpus(config: &SynthConfig) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed));
    let mut examples = Vec::with_capacity(config.examples);
    let mut embeddings = BTreeMap::new();
    let mut pair_index = 0usize;
    while examples.len() < config.examples {
        let layout = build_sentence(&mut rng, pair_index);
        let links = [layout.first_opinion, layout.second_opinion];
        for &linked in &links {
            if examples.len() == config.examples {
                break;
            }
            let index = examples.len();
            let ex = member(&layout, linked, index);
            let d = config.embedding_dim;
            let mut data = Vec::with_capacity(ex.tokens.len() * d);
            for token in &ex.tokens {
                data.extend(token_identity_vector(config.seed, token, d));
            }
            let rows = Matrix::from_vec(ex.tokens.len(), d, data).expect("row layout");
            embeddings.insert(ex.embedding_ref.clone().unwrap(), rows);
            examples.push(ex);
        }
        pair_index += 1;
    }
    SynthCorpus {
        examples,
        embeddings,
        vocab: AmrVocab::default(),
    }
}
