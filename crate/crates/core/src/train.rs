//! Training configuration, the optimizer, the seeded training loop,
//! evaluation metrics and the ablation harness.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::contrastive::ContrastiveConfig;
use crate::embed::splitmix64;
use crate::error::CoreError;
use crate::graphs::Polarity;
use crate::matrix::Matrix;
use crate::model::{
    bind_parameters, forward_batch, forward_example, register_parameters, AblationFlags,
    AspectPooling, ExampleForward, ForwardOptions, ModelDims, PreparedExample,
};
use crate::params::ParameterStore;
use crate::Result;

/// Everything a training run depends on. Runs with equal configs and seeds
/// are bit-reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dims: ModelDims,
    pub contrastive: ContrastiveConfig,
    pub ablation: AblationFlags,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Records longer than this are rejected at load time.
    pub max_len: usize,
    pub semantic_top_p: Option<usize>,
    pub aspect_pooling: AspectPooling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dims: ModelDims::desk_default(),
            contrastive: ContrastiveConfig::default(),
            ablation: AblationFlags::default(),
            epochs: 15,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 42,
            max_len: 100,
            semantic_top_p: None,
            aspect_pooling: AspectPooling::Mean,
        }
    }
}

impl TrainConfig {
    /// Paper-parity preset for the Restaurant14 configuration.
    pub fn restaurant14() -> Self {
        TrainConfig {
            dims: ModelDims::restaurant14(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.contrastive.validate()?;
        if self.epochs == 0 {
            return Err(CoreError::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(CoreError::config("batch size must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(CoreError::config("learning rate must be finite and >= 0"));
        }
        if self.max_len == 0 {
            return Err(CoreError::config("max sequence length must be >= 1"));
        }
        Ok(())
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            semantic_top_p: self.semantic_top_p,
            aspect_pooling: self.aspect_pooling,
        }
    }
}

/// Adaptive moment estimation with bias correction; update order follows
/// the store's path order, so steps are deterministic.
pub struct Adam<F> {
    learning_rate: F,
    beta1: F,
    beta2: F,
    epsilon: F,
    step_count: i32,
    first_moment: BTreeMap<String, Matrix<F>>,
    second_moment: BTreeMap<String, Matrix<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate: crate::cast(learning_rate),
            beta1: crate::cast(0.9),
            beta2: crate::cast(0.999),
            epsilon: crate::cast(1e-8),
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Apply one update from the store's accumulated gradients.
    pub fn step(&mut self, store: &mut ParameterStore<F>) -> Result<()> {
        self.step_count += 1;
        let bias1 = F::one() - self.beta1.powi(self.step_count);
        let bias2 = F::one() - self.beta2.powi(self.step_count);
        for path in store.paths() {
            let grad = store.grad(&path)?.clone();
            let m = self
                .first_moment
                .entry(path.clone())
                .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
            for (mv, gv) in m.data_mut().iter_mut().zip(grad.data()) {
                *mv = self.beta1 * *mv + (F::one() - self.beta1) * *gv;
            }
            let v = self
                .second_moment
                .entry(path.clone())
                .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
            for (vv, gv) in v.data_mut().iter_mut().zip(grad.data()) {
                *vv = self.beta2 * *vv + (F::one() - self.beta2) * *gv * *gv;
            }
            let m = self.first_moment[&path].clone();
            let v = self.second_moment[&path].clone();
            let value = store.get_mut(&path)?;
            for ((pv, mv), vv) in value.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv = *pv - self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// The epoch's example order: a pure function of `(seed, epoch)`.
pub fn epoch_permutation(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(
        seed ^ 0x5AFE_C0DE ^ (epoch as u64).wrapping_mul(0x9E37_79B9),
    ));
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Per-class precision/recall/F1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Classification quality over one dataset. Rows of `confusion` are gold
/// classes, columns predictions, in the fixed class order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: [ClassMetrics; 3],
    pub confusion: [[usize; 3]; 3],
}

/// Metrics from a confusion matrix; per-class F1 is 0 when precision and
/// recall are both 0.
pub fn eval_report_from_confusion(confusion: [[usize; 3]; 3]) -> EvalReport {
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..3).map(|c| confusion[c][c]).sum();
    let mut per_class = [ClassMetrics {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    }; 3];
    for c in 0..3 {
        let tp = confusion[c][c] as f64;
        let gold: usize = confusion[c].iter().sum();
        let predicted: usize = (0..3).map(|g| confusion[g][c]).sum();
        let precision = if predicted > 0 {
            tp / predicted as f64
        } else {
            0.0
        };
        let recall = if gold > 0 { tp / gold as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class[c] = ClassMetrics {
            precision,
            recall,
            f1,
        };
    }
    EvalReport {
        total,
        accuracy: if total > 0 {
            correct as f64 / total as f64
        } else {
            0.0
        },
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / 3.0,
        per_class,
        confusion,
    }
}

/// Deterministic forward passes over a dataset; argmax class per example
/// (ties resolved toward the lower class index).
pub fn evaluate<F: Float>(
    store: &ParameterStore<F>,
    config: &TrainConfig,
    dataset: &[PreparedExample],
) -> Result<EvalReport> {
    let options = config.forward_options();
    let mut confusion = [[0usize; 3]; 3];
    for prep in dataset {
        let mut tape: Tape<F> = Tape::new();
        let bound = bind_parameters(&mut tape, store, &config.dims, &config.ablation)?;
        let fwd = forward_example(
            &mut tape,
            &bound,
            prep,
            &config.dims,
            &config.ablation,
            &config.contrastive,
            &options,
            false,
        )?;
        let predicted = argmax_class(tape.value(fwd.probs));
        confusion[prep.example.label.index()][predicted] += 1;
    }
    Ok(eval_report_from_confusion(confusion))
}

fn argmax_class<F: Float>(probs: &Matrix<F>) -> usize {
    let mut best = 0usize;
    for c in 1..probs.cols() {
        if probs.get(0, c) > probs.get(0, best) {
            best = c;
        }
    }
    best
}

/// Forward one example without losses and return the predicted class, the
/// probability row and the full fusion trace (for the debug dumps).
pub fn predict<F: Float>(
    store: &ParameterStore<F>,
    config: &TrainConfig,
    prep: &PreparedExample,
) -> Result<Prediction> {
    let options = config.forward_options();
    let mut tape: Tape<F> = Tape::new();
    let bound = bind_parameters(&mut tape, store, &config.dims, &config.ablation)?;
    let fwd = forward_example(
        &mut tape,
        &bound,
        prep,
        &config.dims,
        &config.ablation,
        &config.contrastive,
        &options,
        false,
    )?;
    let probs = tape.value(fwd.probs).to_f64();
    let predicted =
        Polarity::from_index(argmax_class(tape.value(fwd.probs))).expect("three classes");
    let trace = ExampleForward::trace(&fwd, &tape);
    let importance = crate::contrastive::importance_scores(tape.value(fwd.a_sem));
    let landmarks = crate::contrastive::select_landmarks(&importance);
    let a_sem = tape.value(fwd.a_sem).to_f64();
    Ok(Prediction {
        predicted,
        probabilities: [probs.get(0, 0), probs.get(0, 1), probs.get(0, 2)],
        trace,
        landmarks,
        a_sem,
    })
}

/// Output of [`predict`].
pub struct Prediction {
    pub predicted: Polarity,
    pub probabilities: [f64; 3],
    pub trace: crate::fusion::FusionTrace,
    pub landmarks: crate::contrastive::LandmarkSet,
    pub a_sem: Matrix<f64>,
}

/// One epoch's log entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean total loss over the epoch's batches.
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_scl: f64,
    pub dev: EvalReport,
    pub is_best: bool,
}

/// Result of a training run: the final parameters, the best-dev snapshot
/// and the per-epoch log.
pub struct TrainOutcome<F> {
    pub store: ParameterStore<F>,
    pub best_store: ParameterStore<F>,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub log: Vec<EpochLog>,
    pub warnings: Vec<String>,
}

/// Train with adaptive-moment updates over seeded shuffled mini-batches,
/// evaluating on `dev_set` after each epoch and tracking the best-accuracy
/// snapshot. Single-threaded and bit-reproducible under a fixed seed.
pub fn train(
    config: &TrainConfig,
    train_set: &[PreparedExample],
    dev_set: &[PreparedExample],
) -> Result<TrainOutcome<f32>> {
    config.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(CoreError::config("train and dev sets must be non-empty"));
    }
    for prep in train_set.iter().chain(dev_set) {
        prep.check_dims(&config.dims)?;
    }

    let options = config.forward_options();
    let mut store: ParameterStore<f32> = ParameterStore::new(config.seed);
    register_parameters(&mut store, &config.dims, &config.ablation)?;
    let mut optimizer: Adam<f32> = Adam::new(config.learning_rate);
    let mut warnings: Vec<String> = Vec::new();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best_store = store.clone();
    let mut best_epoch = 0usize;
    let mut best_accuracy = f64::NEG_INFINITY;

    for epoch in 0..config.epochs {
        let order = epoch_permutation(config.seed, epoch, train_set.len());
        let mut epoch_loss = 0.0;
        let mut epoch_ce = 0.0;
        let mut epoch_scl = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            store.zero_grads();
            let mut tape: Tape<f32> = Tape::new();
            let bound = bind_parameters(&mut tape, &store, &config.dims, &config.ablation)?;
            let out = forward_batch(
                &mut tape,
                &bound,
                &batch,
                &config.dims,
                &config.ablation,
                &config.contrastive,
                &options,
                &mut warnings,
            )?;
            if !out.breakdown.total.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|p| p.id.as_str()).collect();
                return Err(CoreError::numeric(format!(
                    "non-finite loss at epoch {epoch} (ce {}, scl {}) on batch {ids:?}",
                    out.breakdown.ce, out.breakdown.scl
                )));
            }
            tape.backward_into(out.total, &mut store)?;
            optimizer.step(&mut store)?;
            epoch_loss += out.breakdown.total;
            epoch_ce += out.breakdown.ce;
            epoch_scl += out.breakdown.scl;
            batches += 1;
        }
        let dev = evaluate(&store, config, dev_set)?;
        let is_best = dev.accuracy > best_accuracy;
        if is_best {
            best_accuracy = dev.accuracy;
            best_epoch = epoch;
            best_store = store.clone();
        }
        log.push(EpochLog {
            epoch,
            train_loss: epoch_loss / batches as f64,
            train_ce: epoch_ce / batches as f64,
            train_scl: epoch_scl / batches as f64,
            dev,
            is_best,
        });
    }

    warnings.dedup();
    Ok(TrainOutcome {
        store,
        best_store,
        best_epoch,
        best_dev_accuracy: best_accuracy,
        log,
        warnings,
    })
}

/// One ablation-grid cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub view_amr: bool,
    pub view_syn: bool,
    pub view_kg: bool,
    /// Which loss term the cell removes, if any.
    pub removed_loss: Option<String>,
    pub train: EvalReport,
    pub dev: EvalReport,
}

/// The two ablation grids: the seven non-empty view subsets and the four
/// loss-removal rows.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub view_rows: Vec<AblationCell>,
    pub loss_rows: Vec<AblationCell>,
}

/// View subsets in grid order: each single view, each pair, then all three.
pub const VIEW_GRID: [(bool, bool, bool); 7] = [
    (true, false, false),
    (false, true, false),
    (false, false, true),
    (true, true, false),
    (true, false, true),
    (false, true, true),
    (true, true, true),
];

/// Loss-removal rows in grid order.
pub const LOSS_GRID: [&str; 4] = ["scl", "amr", "syn", "kg"];

fn view_label(amr: bool, syn: bool, kg: bool) -> String {
    let mut parts = Vec::new();
    if amr {
        parts.push("amr");
    }
    if syn {
        parts.push("syn");
    }
    if kg {
        parts.push("kg");
    }
    parts.join("+")
}

/// Train and evaluate every cell of both grids with a shared seed. Each
/// cell trains from scratch; reports cover the train and dev sets with the
/// final parameters.
pub fn ablate(
    config: &TrainConfig,
    train_set: &[PreparedExample],
    dev_set: &[PreparedExample],
) -> Result<AblationTable> {
    let mut view_rows = Vec::with_capacity(VIEW_GRID.len());
    for &(amr, syn, kg) in VIEW_GRID.iter() {
        let cell_config = TrainConfig {
            ablation: AblationFlags {
                view_amr: amr,
                view_syn: syn,
                view_kg: kg,
                ..config.ablation
            },
            ..config.clone()
        };
        let outcome = train(&cell_config, train_set, dev_set)?;
        view_rows.push(AblationCell {
            label: view_label(amr, syn, kg),
            view_amr: amr,
            view_syn: syn,
            view_kg: kg,
            removed_loss: None,
            train: evaluate(&outcome.store, &cell_config, train_set)?,
            dev: evaluate(&outcome.store, &cell_config, dev_set)?,
        });
    }

    let mut loss_rows = Vec::with_capacity(LOSS_GRID.len());
    for &removed in LOSS_GRID.iter() {
        let ablation = AblationFlags {
            loss_scl: removed != "scl",
            loss_amr: removed != "amr",
            loss_syn: removed != "syn",
            loss_kg: removed != "kg",
            ..config.ablation
        };
        let cell_config = TrainConfig {
            ablation,
            ..config.clone()
        };
        let outcome = train(&cell_config, train_set, dev_set)?;
        loss_rows.push(AblationCell {
            label: format!("w/o L_{removed}"),
            view_amr: cell_config.ablation.view_amr,
            view_syn: cell_config.ablation.view_syn,
            view_kg: cell_config.ablation.view_kg,
            removed_loss: Some(removed.to_string()),
            train: evaluate(&outcome.store, &cell_config, train_set)?,
            dev: evaluate(&outcome.store, &cell_config, dev_set)?,
        });
    }

    Ok(AblationTable {
        view_rows,
        loss_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::model::ce_loss;

    #[test]
    fn ce_loss_cases() {
        let mut tape: Tape<f64> = Tape::new();
        // Perfect one-hot prediction.
        let perfect = tape.constant(Matrix::from_vec(1, 3, alloc::vec![1.0, 0.0, 0.0]).unwrap());
        let loss = ce_loss(&mut tape, &[perfect], &[0]).unwrap();
        assert!(tape.scalar_value(loss).abs() <= 1e-10);

        // Uniform prediction: ln 3 for any label.
        let uniform = tape.constant(Matrix::from_fn(1, 3, |_, _| 1.0 / 3.0));
        let loss = ce_loss(&mut tape, &[uniform], &[2]).unwrap();
        assert!((tape.scalar_value(loss) - 3f64.ln()).abs() < 1e-12);

        // Batch of two: mean of the per-example terms.
        let a = tape.constant(Matrix::from_vec(1, 3, alloc::vec![0.5, 0.25, 0.25]).unwrap());
        let b = tape.constant(Matrix::from_vec(1, 3, alloc::vec![0.1, 0.8, 0.1]).unwrap());
        let loss = ce_loss(&mut tape, &[a, b], &[0, 1]).unwrap();
        let expect = (-(0.5f64.ln()) + -(0.8f64.ln())) / 2.0;
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn ce_loss_floors_zero_probability() {
        let mut tape: Tape<f64> = Tape::new();
        let zero = tape.constant(Matrix::from_vec(1, 3, alloc::vec![0.0, 1.0, 0.0]).unwrap());
        let loss = ce_loss(&mut tape, &[zero], &[0]).unwrap();
        let v = tape.scalar_value(loss);
        assert!(v.is_finite());
        assert!((v - (-(1e-12f64).ln())).abs() < 1e-6);
    }

    #[test]
    fn total_loss_hand_sum() {
        let mut tape: Tape<f64> = Tape::new();
        let ce = tape.scalar(1.0986);
        let scl = tape.scalar(0.55);
        let total = crate::model::total_loss(&mut tape, ce, scl);
        assert!((tape.scalar_value(total) - 1.6486).abs() < 1e-12);
    }

    #[test]
    fn eval_report_hand_confusion() {
        // Rows gold, columns predicted.
        let confusion = [[5, 0, 0], [0, 0, 5], [0, 0, 5]];
        let report = eval_report_from_confusion(confusion);
        assert!((report.accuracy - 10.0 / 15.0).abs() < 1e-12);
        assert!((report.per_class[0].f1 - 1.0).abs() < 1e-12);
        assert_eq!(report.per_class[1].f1, 0.0);
        assert!((report.per_class[2].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((report.macro_f1 - (1.0 + 0.0 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn eval_report_matches_scalar_reimplementation() {
        // Independent oracle: recompute all metrics from scratch on random
        // confusion matrices.
        use crate::embed::splitmix64;
        for seed in 0..100u64 {
            let mut confusion = [[0usize; 3]; 3];
            for (g, row) in confusion.iter_mut().enumerate() {
                for (p, cell) in row.iter_mut().enumerate() {
                    *cell = (splitmix64(seed * 97 + (g * 3 + p) as u64) % 17) as usize;
                }
            }
            let report = eval_report_from_confusion(confusion);

            let total: usize = confusion.iter().flatten().sum();
            if total == 0 {
                continue;
            }
            let accuracy =
                (confusion[0][0] + confusion[1][1] + confusion[2][2]) as f64 / total as f64;
            assert!((report.accuracy - accuracy).abs() < 1e-12);
            let mut f1_sum = 0.0;
            for c in 0..3 {
                let tp = confusion[c][c] as f64;
                let fp: usize = (0..3).filter(|&g| g != c).map(|g| confusion[g][c]).sum();
                let fn_: usize = (0..3).filter(|&p| p != c).map(|p| confusion[c][p]).sum();
                let precision = if tp + fp as f64 > 0.0 {
                    tp / (tp + fp as f64)
                } else {
                    0.0
                };
                let recall = if tp + fn_ as f64 > 0.0 {
                    tp / (tp + fn_ as f64)
                } else {
                    0.0
                };
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                assert!((report.per_class[c].precision - precision).abs() < 1e-12);
                assert!((report.per_class[c].recall - recall).abs() < 1e-12);
                f1_sum += f1;
            }
            assert!((report.macro_f1 - f1_sum / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_is_pure_function_of_seed_and_epoch() {
        assert_eq!(epoch_permutation(5, 3, 20), epoch_permutation(5, 3, 20));
        assert_ne!(epoch_permutation(5, 3, 20), epoch_permutation(5, 4, 20));
        assert_ne!(epoch_permutation(6, 3, 20), epoch_permutation(5, 3, 20));
        let mut sorted = epoch_permutation(9, 0, 31);
        sorted.sort_unstable();
        assert_eq!(sorted, (0..31).collect::<Vec<_>>());
    }

    fn tiny_sets() -> (TrainConfig, Vec<PreparedExample>, Vec<PreparedExample>) {
        use crate::graphs::compile_view_graphs;
        let config = TrainConfig {
            dims: ModelDims {
                d: 8,
                d_kg: 8,
                heads: 2,
                layers_amr: 1,
                layers_dep: 1,
                layers_con: 1,
                layers_sem: 1,
            },
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let corpus = crate::synth::generate_corpus(&crate::synth::SynthConfig {
            examples: 8,
            seed: 7,
            embedding_dim: 8,
        });
        let prepared: Vec<PreparedExample> = corpus
            .examples
            .iter()
            .enumerate()
            .map(|(i, ex)| PreparedExample {
                id: format!("s{i}"),
                graphs: compile_view_graphs(ex, &corpus.vocab, config.dims.layers_con).unwrap(),
                embeddings: corpus.embeddings[ex.embedding_ref.as_ref().unwrap()].clone(),
                example: ex.clone(),
                kg: None,
            })
            .collect();
        (config, prepared.clone(), prepared)
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (mut config, train_set, dev_set) = tiny_sets();
        config.learning_rate = 0.0;
        config.epochs = 3;
        let outcome = train(&config, &train_set, &dev_set).unwrap();
        let mut reference: ParameterStore<f32> = ParameterStore::new(config.seed);
        register_parameters(&mut reference, &config.dims, &config.ablation).unwrap();
        for path in reference.paths() {
            assert_eq!(
                outcome.store.get(&path).unwrap(),
                reference.get(&path).unwrap(),
                "{path} moved under lr=0"
            );
        }
        let first = outcome.log.first().unwrap().train_loss;
        for entry in &outcome.log {
            assert!((entry.train_loss - first).abs() < 1e-6);
        }
    }

    #[test]
    fn training_is_seed_reproducible() {
        let (config, train_set, dev_set) = tiny_sets();
        let a = train(&config, &train_set, &dev_set).unwrap();
        let b = train(&config, &train_set, &dev_set).unwrap();
        assert_eq!(a.log.len(), b.log.len());
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.dev.accuracy.to_bits(), y.dev.accuracy.to_bits());
        }
        for path in a.store.paths() {
            assert_eq!(a.store.get(&path).unwrap(), b.store.get(&path).unwrap());
        }
    }

    #[test]
    fn training_reduces_loss_on_tiny_corpus() {
        let (mut config, train_set, dev_set) = tiny_sets();
        config.epochs = 12;
        config.learning_rate = 5e-3;
        let outcome = train(&config, &train_set, &dev_set).unwrap();
        let first = outcome.log.first().unwrap().train_loss;
        let last = outcome.log.last().unwrap().train_loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn evaluation_is_order_invariant() {
        let (config, train_set, _) = tiny_sets();
        let outcome = train(&config, &train_set, &train_set).unwrap();
        let forward = evaluate(&outcome.store, &config, &train_set).unwrap();
        let mut reversed_set = train_set.clone();
        reversed_set.reverse();
        let reversed = evaluate(&outcome.store, &config, &reversed_set).unwrap();
        assert_eq!(forward.accuracy, reversed.accuracy);
        assert_eq!(forward.confusion, reversed.confusion);
    }
}
