//! Backbone, pre-training, prompts and the downstream head against
//! independent reference computations.

use std::sync::Arc;

use gsp_core::backbone::BackboneError;
use gsp_core::downstream::{aggregate_runs, evaluate, predict, HeadParams, Prompt};
use gsp_core::graph::{normalize_adjacency, synthesize_sbm, GraphBatch, SbmConfig};
use gsp_core::optim::{TrainableState, TuneTask};
use gsp_core::pretrain::{edge_scores, pretrain, PretrainConfig};
use gsp_core::prompt::{
    apply_gpf, apply_gpfplus, basis_sparsity, scores, vector_sparsity, PromptBasis, PromptVector,
};
use gsp_core::{Dataset, DenseMatrix, FewShotSplit, FrozenBackbone, Graph, TaskKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn ring(n: usize, dim: usize, classes: usize, rng: &mut impl Rng) -> Graph {
    let mut edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    edges.push((0, n / 2));
    let labels = (0..n).map(|i| Some(i % classes)).collect();
    Graph::from_edges(n, &edges, random(n, dim, rng), Some(labels), None).unwrap()
}

// ---- backbone -------------------------------------------------------------

#[test]
fn saved_backbone_reproduces_forward_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let backbone = FrozenBackbone::init_uniform(4, 6, 3, &mut rng)
        .with_adapter(Some(random(5, 4, &mut rng)))
        .unwrap();
    let g = ring(9, 4, 2, &mut rng);
    let adj = Arc::new(normalize_adjacency(g.adjacency()).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.json");
    backbone.save_weights(&path).unwrap();
    let loaded = FrozenBackbone::load_weights(&path).unwrap();
    assert_eq!(loaded, backbone);
    let a = backbone.embed(&adj, g.features()).unwrap();
    let b = loaded.embed(&adj, g.features()).unwrap();
    assert!(a.bitwise_eq(&b));
}

#[test]
fn truncated_and_inconsistent_weight_files_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let text = FrozenBackbone::init_uniform(3, 4, 3, &mut rng).to_json();
    let truncated = &text[..text.len() / 2];
    assert!(matches!(FrozenBackbone::from_json(truncated), Err(BackboneError::Parse { .. })));

    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["weights"].as_array_mut().unwrap().pop();
    let missing_block = value.to_string();
    assert!(matches!(FrozenBackbone::from_json(&missing_block), Err(BackboneError::Invalid(_))));

    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["format_version"] = 99.into();
    assert!(matches!(
        FrozenBackbone::from_json(&value.to_string()),
        Err(BackboneError::Version { found: 99 })
    ));
}

/// Plain dense re-implementation of the layer stack.
fn reference_forward(backbone: &FrozenBackbone, adj: &DenseMatrix, x: &DenseMatrix) -> DenseMatrix {
    let mut h = x.clone();
    let n = backbone.num_layers();
    for (i, layer) in backbone.layers().iter().enumerate() {
        h = adj.matmul(&h.matmul(&layer.weight).unwrap()).unwrap();
        if i + 1 < n {
            h = h.map(|v| v.max(0.0));
        }
    }
    h
}

#[test]
fn forward_matches_dense_reference() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = FrozenBackbone::init_uniform(3, 5, 3, &mut rng);
        let g = ring(8, 3, 2, &mut rng);
        let adj = normalize_adjacency(g.adjacency()).unwrap();
        let got = backbone.embed(&Arc::new(adj.clone()), g.features()).unwrap();
        let want = reference_forward(&backbone, &adj.to_dense(), g.features());
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }
}

// ---- pre-training ---------------------------------------------------------

fn two_cliques() -> Graph {
    let mut config = SbmConfig::new(vec![15, 15], 0.9, 0.02, 8, 5);
    config.signal = 1.5;
    synthesize_sbm(&config).unwrap().graphs()[0].clone()
}

fn pretrain_config() -> PretrainConfig {
    PretrainConfig {
        epochs: 150,
        learning_rate: 0.05,
        layers: 2,
        hidden_dim: 16,
        seed: 3,
        ..PretrainConfig::default()
    }
}

#[test]
fn pretraining_separates_edges_from_non_edges() {
    let g = two_cliques();
    let out = pretrain(&g, &pretrain_config()).unwrap();
    let positives = g.edges();
    let labels = g.node_labels().unwrap();
    let negatives: Vec<_> = (0..g.num_nodes())
        .flat_map(|u| (u + 1..g.num_nodes()).map(move |v| (u, v)))
        .filter(|&(u, v)| labels[u] != labels[v] && g.adjacency().get(u, v) == 0.0)
        .collect();
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let pos = mean(edge_scores(&out.backbone, &g, &positives).unwrap());
    let neg = mean(edge_scores(&out.backbone, &g, &negatives).unwrap());
    assert!(pos > neg, "positive {pos} vs negative {neg}");
}

#[test]
fn pretraining_loss_decreases_and_output_round_trips() {
    let g = two_cliques();
    let out = pretrain(&g, &pretrain_config()).unwrap();
    assert_eq!(out.losses.len(), 150);
    assert!(out.losses.last().unwrap() < &out.losses[0]);
    let back = FrozenBackbone::from_json(&out.backbone.to_json()).unwrap();
    assert_eq!(back, out.backbone);
}

#[test]
fn pretraining_is_deterministic_in_seed() {
    let g = two_cliques();
    let a = pretrain(&g, &pretrain_config()).unwrap().backbone.to_json();
    let b = pretrain(&g, &pretrain_config()).unwrap().backbone.to_json();
    let c = pretrain(&g, &PretrainConfig { seed: 4, ..pretrain_config() }).unwrap().backbone.to_json();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

// ---- prompts --------------------------------------------------------------

#[test]
fn shared_prompt_shifts_every_row_by_the_same_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(7, 5, &mut rng);
    let p = PromptVector::new((0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let prompted = apply_gpf(&x, &p).unwrap();
    for i in 0..7 {
        for j in 0..5 {
            // exact construction: one addition per entry
            assert_eq!(prompted.get(i, j).to_bits(), (x.get(i, j) + p.values()[j]).to_bits());
            let diff = prompted.get(i, j) - x.get(i, j);
            let first = prompted.get(0, j) - x.get(0, j);
            assert!((diff - first).abs() <= 1e-15 * (1.0 + first.abs()) * 4.0);
        }
    }
}

#[test]
fn attention_matches_scalar_formula() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(4, 3, &mut rng).scale(2.0);
        let b = random(3, 3, &mut rng);
        let basis = PromptBasis::new(random(3, 3, &mut rng), b.clone()).unwrap();
        let s = scores(&x, &basis).unwrap();
        for i in 0..4 {
            let logit = |j: usize| (0..3).map(|t| b.get(t, j) * x.get(i, t)).sum::<f64>();
            let total: f64 = (0..3).map(|l| logit(l).exp()).sum();
            for j in 0..3 {
                assert!((s.get(i, j) - logit(j).exp() / total).abs() <= 1e-12);
            }
            let row_sum: f64 = s.row(i).iter().sum();
            assert!((row_sum - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn attention_is_shift_invariant_per_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // A constant first feature lets a constant row shift enter through B.
    let mut x = random(5, 3, &mut rng);
    for i in 0..5 {
        x.set(i, 0, 1.0);
    }
    let b = random(3, 4, &mut rng);
    let mut shifted = b.clone();
    for j in 0..4 {
        shifted.set(0, j, b.get(0, j) + 2.5);
    }
    let p = random(3, 4, &mut rng);
    let s1 = scores(&x, &PromptBasis::new(p.clone(), b).unwrap()).unwrap();
    let s2 = scores(&x, &PromptBasis::new(p, shifted).unwrap()).unwrap();
    assert!(s1.max_abs_diff(&s2) <= 1e-12);
}

#[test]
fn zero_rows_of_p_give_zero_columns_of_prompt() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d, k) = (6, 5, 3);
        let mut p = random(d, k, &mut rng);
        let zero_rows: Vec<usize> = (0..d).filter(|_| rng.random_bool(0.4)).collect();
        for &r in &zero_rows {
            p.row_mut(r).fill(0.0);
        }
        let basis = PromptBasis::new(p, random(d, k, &mut rng)).unwrap();
        let x = random(n, d, &mut rng);
        let delta = apply_gpfplus(&x, &basis).unwrap().sub(&x).unwrap();
        for &r in &zero_rows {
            assert!((0..n).all(|i| delta.get(i, r) == 0.0));
        }
        let s = scores(&x, &basis).unwrap();
        assert!(s.values().iter().all(|&v| v > 0.0));
        let report = basis_sparsity(&basis, &s, 0.0).unwrap();
        assert_eq!(report.zero_rows, Some(zero_rows.len()));
        assert_eq!(report.zero_columns, Some(zero_rows.len()));
    }
}

#[test]
fn sparsity_report_examples() {
    let p = PromptVector::new(vec![0.5, 0.0, -2.0]).unwrap();
    let r = vector_sparsity(&p, 0.0);
    assert_eq!((r.nnz, r.zero_dims, r.dims), (2, 1, 3));
    assert_eq!(vector_sparsity(&PromptVector::zeros(4), 0.0).nnz, 0);
    assert_eq!(vector_sparsity(&p, 0.5).nnz, 1);
}

// ---- downstream -----------------------------------------------------------

fn node_dataset(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset::new(TaskKind::Node, 3, vec![ring(6, 3, 3, &mut rng)]).unwrap()
}

fn graph_dataset(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graphs = (0..4)
        .map(|i| {
            let g = ring(3 + i, 3, 2, &mut rng);
            Graph::new(g.adjacency().clone(), g.features().clone(), None, Some(i % 2)).unwrap()
        })
        .collect();
    Dataset::new(TaskKind::Graph, 2, graphs).unwrap()
}

fn all_train(dataset: &Dataset) -> FewShotSplit {
    FewShotSplit {
        train: (0..dataset.num_items()).collect(),
        val: vec![],
        test: vec![],
        shots: 1,
        seed: 0,
    }
}

/// Every trainable matrix of `state`, in a fixed order.
fn flatten(state: &TrainableState) -> Vec<DenseMatrix> {
    let mut out = vec![state.head.classifier.clone()];
    match &state.prompt {
        Prompt::Vector(p) => out.push(p.to_row()),
        Prompt::Basis(b) => {
            out.push(b.p.clone());
            out.push(b.b.clone());
        }
        Prompt::None => {}
    }
    out.extend(state.head.adapter.clone());
    out
}

fn rebuild(template: &TrainableState, parts: &[DenseMatrix]) -> TrainableState {
    let mut s = template.clone();
    let mut it = parts.iter().cloned();
    s.head.classifier = it.next().unwrap();
    s.prompt = match &template.prompt {
        Prompt::Vector(_) => Prompt::Vector(PromptVector::from_row(&it.next().unwrap()).unwrap()),
        Prompt::Basis(_) => {
            let p = it.next().unwrap();
            Prompt::Basis(PromptBasis::new(p, it.next().unwrap()).unwrap())
        }
        Prompt::None => Prompt::None,
    };
    if s.head.adapter.is_some() {
        s.head.adapter = it.next();
    }
    s
}

fn pipeline_gradient_error(dataset: &Dataset, basis: bool, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = FrozenBackbone::init_uniform(4, 5, 3, &mut rng);
    let task = TuneTask::new(dataset, all_train(dataset)).unwrap();
    let prompt = if basis {
        Prompt::Basis(PromptBasis::new(random(4, 2, &mut rng), random(4, 2, &mut rng)).unwrap())
    } else {
        Prompt::Vector(PromptVector::new((0..4).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap())
    };
    let state = TrainableState {
        prompt,
        head: HeadParams {
            adapter: Some(random(3, 4, &mut rng)),
            adapter_trainable: true,
            classifier: random(5, dataset.classes(), &mut rng),
        },
    };
    let (_, grads, _) = task.loss_and_gradients(&backbone, &state).unwrap();
    let mut analytic = vec![grads.classifier];
    analytic.extend(grads.prompt_vector);
    analytic.extend(grads.basis_p);
    analytic.extend(grads.basis_b);
    analytic.extend(grads.adapter);

    let params = flatten(&state);
    assert_eq!(params.len(), analytic.len());
    let h = 1e-6;
    let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
    for (which, g) in analytic.iter().enumerate() {
        for idx in 0..g.len() {
            let mut plus = params.clone();
            plus[which].values_mut()[idx] += h;
            let mut minus = params.clone();
            minus[which].values_mut()[idx] -= h;
            let fp = task.data_loss(&backbone, &rebuild(&state, &plus)).unwrap();
            let fm = task.data_loss(&backbone, &rebuild(&state, &minus)).unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            let a = g.values()[idx];
            diff += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
    }
    diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(1e-12)
}

#[test]
fn full_pipeline_gradients_match_finite_differences() {
    for seed in 0..5 {
        for basis in [false, true] {
            let node = pipeline_gradient_error(&node_dataset(seed), basis, seed);
            assert!(node <= 1e-5, "node task seed {seed} basis {basis}: {node:e}");
            let graph = pipeline_gradient_error(&graph_dataset(seed), basis, seed);
            assert!(graph <= 1e-5, "graph task seed {seed} basis {basis}: {graph:e}");
        }
    }
}

#[test]
fn zero_classifier_gives_ln_c_loss() {
    let dataset = node_dataset(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let backbone = FrozenBackbone::init_uniform(3, 4, 3, &mut rng);
    let task = TuneTask::new(&dataset, all_train(&dataset)).unwrap();
    let state = TrainableState {
        prompt: Prompt::Vector(PromptVector::zeros(3)),
        head: HeadParams {
            adapter: None,
            adapter_trainable: false,
            classifier: DenseMatrix::zeros(4, 3),
        },
    };
    let loss = task.data_loss(&backbone, &state).unwrap();
    assert!((loss - 3f64.ln()).abs() <= 1e-15);
}

#[test]
fn identity_pipeline_is_a_linear_model_on_prompted_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 5;
    let x = random(n, 3, &mut rng);
    // no edges, so the normalized adjacency is the identity
    let g = Graph::from_edges(n, &[], x.clone(), None, None).unwrap();
    let batch = GraphBatch::node_level(&g).unwrap();
    let backbone = FrozenBackbone::new(vec![DenseMatrix::identity(3)], None).unwrap();
    let classifier = random(3, 2, &mut rng);
    let head = HeadParams {
        adapter: Some(DenseMatrix::identity(3)),
        adapter_trainable: false,
        classifier: classifier.clone(),
    };
    let p = PromptVector::new(vec![0.3, -0.2, 0.9]).unwrap();
    let logits = predict(&backbone, &head, &batch, &Prompt::Vector(p.clone())).unwrap();
    let want = apply_gpf(&x, &p).unwrap().matmul(&classifier).unwrap();
    assert!(logits.max_abs_diff(&want) <= 1e-15);
}

#[test]
fn rescaled_features_with_compensating_adapter_keep_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = ring(8, 3, 2, &mut rng);
    let backbone = FrozenBackbone::init_uniform(4, 5, 3, &mut rng);
    let adapter = random(3, 4, &mut rng);
    let head = HeadParams {
        adapter: Some(adapter.clone()),
        adapter_trainable: false,
        classifier: random(5, 2, &mut rng),
    };
    let prompt = Prompt::Vector(PromptVector::new(vec![0.1, -0.4, 0.2, 0.05]).unwrap());
    let base = predict(&backbone, &head, &GraphBatch::node_level(&g).unwrap(), &prompt).unwrap();

    for c in [4.0, 3.0, 0.1] {
        let scaled = Graph::new(g.adjacency().clone(), g.features().scale(c), None, None).unwrap();
        let compensated = HeadParams {
            adapter: Some(adapter.scale(1.0 / c)),
            ..head.clone()
        };
        let logits = predict(&backbone, &compensated, &GraphBatch::node_level(&scaled).unwrap(), &prompt).unwrap();
        assert!(logits.max_abs_diff(&base) <= 1e-12 * (1.0 + base.frobenius_norm()), "scale {c}");
        if c == 4.0 {
            assert!(logits.bitwise_eq(&base), "power-of-two rescaling is exact");
        }
    }
}

#[test]
fn accuracy_matches_recount() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 30;
        let logits = DenseMatrix::from_fn(n, 4, |_, _| rng.random_range(0..3) as f64);
        let labels: Vec<Option<usize>> = (0..n).map(|_| Some(rng.random_range(0..4))).collect();
        let ids: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.6)).collect();
        if ids.is_empty() {
            continue;
        }
        let mut correct = 0;
        for &i in &ids {
            let row = logits.row(i);
            let mut best = 0;
            for j in 1..4 {
                if row[j] > row[best] {
                    best = j;
                }
            }
            correct += (Some(best) == labels[i]) as usize;
        }
        let acc = evaluate(&logits, &labels, &ids).unwrap();
        assert_eq!(acc, correct as f64 / ids.len() as f64);
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn aggregate_matches_two_pass_computation() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..rng.random_range(2..9)).map(|_| rng.random_range(0.0..1.0)).collect();
        let n = values.len() as f64;
        let mut mean = 0.0;
        for v in &values {
            mean += v;
        }
        mean /= n;
        let mut ss = 0.0;
        for v in &values {
            ss += (v - mean) * (v - mean);
        }
        let std = (ss / (n - 1.0)).sqrt();
        let s = aggregate_runs(&values).unwrap();
        assert!((s.mean - mean).abs() <= 1e-12);
        assert!((s.std - std).abs() <= 1e-12);
        assert_eq!(s.percent_cell(), format!("{:.2} ± {:.2}", mean * 100.0, std * 100.0));
    }
}
