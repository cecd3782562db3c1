//! Central-difference verification of the complete model: every enabled
//! parameter of the full stack (all views, all losses) on one small example
//! batch, in double precision.

use aspectfuse_core::autodiff::Tape;
use aspectfuse_core::contrastive::ContrastiveConfig;
use aspectfuse_core::embed::{splitmix64, stub_embeddings, unit_interval};
use aspectfuse_core::gradcheck::{gradient_check, GradCheckConfig, GradMode};
use aspectfuse_core::graphs::{compile_view_graphs, AmrVocab, ParsedExample, Polarity};
use aspectfuse_core::matrix::Matrix;
use aspectfuse_core::model::{
    bind_parameters, forward_batch, register_parameters, AblationFlags, ForwardOptions,
    ModelDims, PreparedExample,
};
use aspectfuse_core::params::ParameterStore;

fn six_token_example() -> ParsedExample {
    ParsedExample {
        tokens: ["the", "pasta", "was", "bland", "but", "cheap"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        aspect_span: (1, 2),
        label: Polarity::Negative,
        dep_edges: vec![
            (1, 0, "det".to_string()),
            (3, 1, "nsubj".to_string()),
            (3, 2, "cop".to_string()),
            (3, 5, "conj".to_string()),
            (5, 4, "cc".to_string()),
        ],
        constituents: vec![
            (0, 2, "NP".to_string(), 1),
            (2, 6, "VP".to_string(), 1),
            (0, 6, "S".to_string(), 2),
        ],
        amr_edges: vec![
            (3, ":ARG1".to_string(), 1),
            (1, ":mod".to_string(), 3),
            (5, ":ARG1-of".to_string(), 1),
            (3, ":prep-with".to_string(), 4),
        ],
        embedding_ref: None,
        kg_ref: None,
    }
}

fn fixture(dims: &ModelDims) -> PreparedExample {
    let example = six_token_example();
    let n = example.token_count();
    let graphs = compile_view_graphs(&example, &AmrVocab::default(), dims.layers_con).unwrap();
    let embeddings = stub_embeddings(99, "gradcheck", n, dims.d);
    let kg = Matrix::from_fn(n, dims.d_kg, |r, c| {
        unit_interval(splitmix64(0xD15C ^ ((r * 613 + c) as u64))) - 0.4
    });
    PreparedExample {
        id: "gradcheck".to_string(),
        example,
        graphs,
        embeddings,
        kg: Some(kg),
    }
}

#[test]
fn full_model_gradients_match_central_differences() {
    let dims = ModelDims {
        d: 8,
        d_kg: 12,
        heads: 4,
        layers_amr: 1,
        layers_dep: 2,
        layers_con: 2,
        layers_sem: 1,
    };
    let flags = AblationFlags::default();
    let contrastive = ContrastiveConfig::default();
    let options = ForwardOptions::default();
    let prep = fixture(&dims);

    let mut store: ParameterStore<f64> = ParameterStore::new(4242);
    register_parameters(&mut store, &dims, &flags).unwrap();

    let cfg = GradCheckConfig {
        epsilon: 1e-4,
        tolerance: 1e-3,
        max_samples: 600,
        sample_seed: 11,
    };
    let report = gradient_check(&mut store, &cfg, |store, mode| {
        let mut tape: Tape<f64> = Tape::new();
        let bound = bind_parameters(&mut tape, store, &dims, &flags)?;
        let mut warnings = Vec::new();
        let out = forward_batch(
            &mut tape,
            &bound,
            &[&prep],
            &dims,
            &flags,
            &contrastive,
            &options,
            &mut warnings,
        )?;
        if mode == GradMode::WithGradients {
            tape.backward_into(out.total, store)?;
        }
        Ok((tape.scalar_value(out.total), tape.discrete_trace().clone()))
    })
    .unwrap();

    assert!(
        report.passed,
        "max rel err {} at {:?} (checked {}, skipped {})",
        report.max_rel_err, report.worst, report.checked, report.skipped_nonsmooth
    );
    assert!(report.checked > 400, "checked only {}", report.checked);
}
