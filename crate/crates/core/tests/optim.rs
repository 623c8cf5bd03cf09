//! Proximal operators and tuning loops.

use gsp_core::downstream::Prompt;
use gsp_core::graph::{kshot_split, synthesize_sbm, SbmConfig};
use gsp_core::optim::{
    nonzero_rows, prox_l1, prox_l21, train_gsfp, train_gsmfp, tune, tune_observed, Method,
    ProxEvent, ProxScaling, TrainError, TrainObserver, TrainableState, TuneConfig, TuneTask,
};
use gsp_core::pretrain::{pretrain, PretrainConfig};
use gsp_core::{Dataset, DenseMatrix, FrozenBackbone};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- proximal operators ---------------------------------------------------

fn l1_objective(z: &[f64], y: &[f64], tau: f64) -> f64 {
    let fit: f64 = z.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
    0.5 * fit + tau * z.iter().map(|v| v.abs()).sum::<f64>()
}

fn l21_objective(z: &DenseMatrix, y: &DenseMatrix, tau: f64) -> f64 {
    let fit = z.sub(y).unwrap().frobenius_norm().powi(2);
    0.5 * fit + tau * (0..z.rows()).map(|i| z.row_norm(i)).sum::<f64>()
}

/// Soft-thresholding written out one scalar at a time.
fn scalar_soft_threshold(y: f64, tau: f64) -> f64 {
    if y > tau {
        y - tau
    } else if y < -tau {
        y + tau
    } else {
        0.0
    }
}

/// Row shrinkage written out one row at a time.
fn scalar_group_shrink(row: &[f64], tau: f64) -> Vec<f64> {
    let mut sq = 0.0;
    for v in row {
        sq += v * v;
    }
    let norm = sq.sqrt();
    if tau < norm {
        row.iter().map(|v| v * (norm - tau) / norm).collect()
    } else {
        vec![0.0; row.len()]
    }
}

#[test]
fn prox_l1_is_the_argmin_and_matches_scalar_form() {
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let d = rng.random_range(1..8);
        let y: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tau = rng.random_range(0.0..2.0);
        let z = prox_l1(&y, tau).unwrap();
        for (zi, yi) in z.iter().zip(&y) {
            assert!((zi - scalar_soft_threshold(*yi, tau)).abs() <= 1e-12);
        }
        let best = l1_objective(&z, &y, tau);
        for _ in 0..10_000 {
            let c: Vec<f64> = y
                .iter()
                .zip(&z)
                .map(|(yi, zi)| if rng.random_bool(0.5) { zi + rng.random_range(-0.5..0.5) } else { yi * rng.random_range(-1.0..1.5) })
                .collect();
            assert!(best <= l1_objective(&c, &y, tau) + 1e-12, "case {case}");
        }
    }
}

#[test]
fn prox_l21_is_the_argmin_and_matches_scalar_form() {
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
        let (d, k) = (rng.random_range(1..6), rng.random_range(1..4));
        let y = DenseMatrix::from_fn(d, k, |_, _| rng.random_range(-2.0..2.0));
        let tau = rng.random_range(0.0..2.5);
        let z = prox_l21(&y, tau).unwrap();
        for i in 0..d {
            for (a, b) in z.row(i).iter().zip(scalar_group_shrink(y.row(i), tau)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        let best = l21_objective(&z, &y, tau);
        for _ in 0..10_000 {
            let c = DenseMatrix::from_fn(d, k, |i, j| {
                if rng.random_bool(0.5) {
                    z.get(i, j) + rng.random_range(-0.5..0.5)
                } else {
                    y.get(i, j) * rng.random_range(-1.0..1.5)
                }
            });
            assert!(best <= l21_objective(&c, &y, tau) + 1e-12, "case {case}");
        }
    }
}

// ---- training loops -------------------------------------------------------

struct Fixture {
    dataset: Dataset,
    backbone: FrozenBackbone,
}

fn fixture(feature_dim: usize) -> Fixture {
    let mut sbm = SbmConfig::new(vec![20, 20, 20], 0.25, 0.02, feature_dim, 17);
    sbm.informative_dims = Some(feature_dim / 2);
    let dataset = synthesize_sbm(&sbm).unwrap();
    let backbone = pretrain(
        &dataset.graphs()[0],
        &PretrainConfig {
            epochs: 20,
            learning_rate: 0.01,
            hidden_dim: 16,
            seed: 1,
            ..PretrainConfig::default()
        },
    )
    .unwrap()
    .backbone;
    Fixture { dataset, backbone }
}

fn config(lambda: f64, epochs: usize) -> TuneConfig {
    TuneConfig {
        lambda,
        eta: 0.05,
        epochs,
        seed: 5,
        basis_count: 4,
        ..TuneConfig::default()
    }
}

/// Records every parameter state and every proximal step.
#[derive(Default)]
struct Recorder {
    states: Vec<TrainableState>,
    prox: Vec<(DenseMatrix, DenseMatrix, f64)>,
}

impl TrainObserver for Recorder {
    fn on_prox(&mut self, e: &ProxEvent<'_>) {
        self.prox.push((e.input.clone(), e.output.clone(), e.threshold));
    }

    fn on_epoch_end(&mut self, _epoch: usize, state: &TrainableState) {
        self.states.push(state.clone());
    }
}

fn run(f: &Fixture, method: Method, cfg: &TuneConfig) -> (gsp_core::optim::TuneOutcome, Recorder) {
    let split = kshot_split(&f.dataset, 3, 2).unwrap();
    let task = TuneTask::new(&f.dataset, split).unwrap();
    let mut rec = Recorder::default();
    let out = tune_observed(&task, &f.backbone, method, cfg, &mut rec).unwrap();
    (out, rec)
}

fn state_bits(s: &TrainableState) -> Vec<u64> {
    let mut bits: Vec<u64> = s.head.classifier.values().iter().map(|v| v.to_bits()).collect();
    match &s.prompt {
        Prompt::Vector(p) => bits.extend(p.values().iter().map(|v| v.to_bits())),
        Prompt::Basis(b) => {
            bits.extend(b.p.values().iter().map(|v| v.to_bits()));
            bits.extend(b.b.values().iter().map(|v| v.to_bits()));
        }
        Prompt::None => {}
    }
    bits
}

#[test]
fn zero_lambda_reproduces_dense_baselines_bitwise() {
    let f = fixture(10);
    for (sparse, dense) in [(Method::Gsfp, Method::Gpf), (Method::Gsmfp, Method::Gpfplus)] {
        for scaling in [ProxScaling::PaperLiteral, ProxScaling::StepScaled] {
            let cfg = TuneConfig { prox_scaling: scaling, ..config(0.0, 50) };
            let (a, ra) = run(&f, sparse, &cfg);
            let (b, rb) = run(&f, dense, &cfg);
            assert_eq!(ra.states.len(), 50);
            for (x, y) in ra.states.iter().zip(&rb.states) {
                assert_eq!(state_bits(x), state_bits(y), "{sparse} vs {dense}");
            }
            assert_eq!(a.val_accuracy.map(f64::to_bits), b.val_accuracy.map(f64::to_bits));
            assert_eq!(a.test_accuracy.map(f64::to_bits), b.test_accuracy.map(f64::to_bits));
            assert_eq!(a.best_epoch, b.best_epoch);
        }
    }
}

#[test]
fn huge_lambda_keeps_prompt_at_zero() {
    let f = fixture(10);
    let (out, rec) = run(&f, Method::Gsfp, &config(1e3, 30));
    assert!(rec.states.iter().all(|s| match &s.prompt {
        Prompt::Vector(p) => p.values().iter().all(|&v| v == 0.0),
        _ => false,
    }));
    assert_eq!(out.sparsity.unwrap().nnz, 0);

    let (_, rec) = run(&f, Method::Gsmfp, &config(1e3, 30));
    for s in &rec.states {
        let Prompt::Basis(b) = &s.prompt else { panic!("basis prompt expected") };
        assert_eq!(nonzero_rows(&b.p), 0);
    }
    // the returned snapshot may be the untrained start, so inspect the last state
    let split = kshot_split(&f.dataset, 3, 2).unwrap();
    let task = TuneTask::new(&f.dataset, split).unwrap();
    let report = task.sparsity(rec.states.last().unwrap(), 0.0).unwrap().unwrap();
    assert_eq!(report.zero_rows, Some(10));
    assert_eq!(report.zero_columns, Some(10));
}

#[test]
fn composite_objective_decreases_for_every_method() {
    let f = fixture(10);
    for method in [Method::Gpf, Method::Gpfplus, Method::Gsfp, Method::Gsmfp, Method::FtHeadOnly] {
        let (out, _) = run(&f, method, &config(1e-3, 100));
        let obj = out.trace.objectives();
        assert_eq!(obj.len(), 100);
        assert!(obj[99] < obj[0], "{method}: {} -> {}", obj[0], obj[99]);
    }
}

#[test]
fn nonzero_rows_nonincreasing_over_lambda_grid() {
    let f = fixture(12);
    let mut previous = usize::MAX;
    for lambda in [0.0, 1e-4, 1e-3, 1e-2] {
        let (_, rec) = run(&f, Method::Gsmfp, &config(lambda, 60));
        let Prompt::Basis(b) = &rec.states.last().unwrap().prompt else { panic!() };
        let rows = nonzero_rows(&b.p);
        assert!(rows <= previous, "lambda {lambda}: {rows} nonzero rows after {previous}");
        previous = rows;
    }
}

#[test]
fn each_prox_call_is_monotone_in_threshold() {
    let f = fixture(10);
    let (_, rec) = run(&f, Method::Gsmfp, &config(1e-3, 20));
    for (input, _, tau) in &rec.prox {
        let mut last = usize::MAX;
        for scale in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let rows = nonzero_rows(&prox_l21(input, tau * scale).unwrap());
            assert!(rows <= last);
            last = rows;
        }
    }
}

#[test]
fn backbone_is_untouched_by_tuning() {
    let f = fixture(10);
    let before = f.backbone.to_json();
    for method in Method::ALL {
        run(&f, method, &config(1e-3, 10));
    }
    assert_eq!(f.backbone.to_json(), before);
}

#[test]
fn tuning_is_deterministic() {
    let f = fixture(10);
    let (a, _) = run(&f, Method::Gsmfp, &config(1e-3, 30));
    let (b, _) = run(&f, Method::Gsmfp, &config(1e-3, 30));
    assert_eq!(a, b);
}

#[test]
fn trace_length_equals_epochs_and_snapshot_is_best() {
    let f = fixture(10);
    let (out, _) = run(&f, Method::Gpf, &config(0.0, 40));
    assert_eq!(out.trace.len(), 40);
    // candidates are the states after 1..=40 updates
    let recorded: Vec<f64> = out.trace.records[1..].iter().map(|r| r.val_accuracy.unwrap()).collect();
    let best = out.val_accuracy.unwrap();
    assert!(out.best_epoch >= 1);
    assert!(recorded.iter().all(|&a| a <= best));
    if let Some(first) = recorded.iter().position(|&a| a == best) {
        assert_eq!(out.best_epoch, first + 1);
    } else {
        assert_eq!(out.best_epoch, 40);
    }
}

#[test]
fn convenience_entry_points_match_tune() {
    let f = fixture(10);
    let split = kshot_split(&f.dataset, 3, 2).unwrap();
    let task = TuneTask::new(&f.dataset, split.clone()).unwrap();
    let cfg = config(1e-3, 15);
    let a = train_gsfp(&f.dataset, &split, &f.backbone, &cfg).unwrap();
    assert_eq!(a, tune(&task, &f.backbone, Method::Gsfp, &cfg).unwrap());
    let b = train_gsmfp(&f.dataset, &split, &f.backbone, &cfg, 3).unwrap();
    assert_eq!(b.prompt_basis().unwrap().k(), 3);
}

#[test]
fn divergence_is_reported_with_epoch() {
    let f = fixture(10);
    let err = run_err(&f, TuneConfig { eta: 1e200, ..config(0.0, 10) });
    assert!(matches!(err, TrainError::Divergence { .. }), "{err}");
}

fn run_err(f: &Fixture, cfg: TuneConfig) -> TrainError {
    let split = kshot_split(&f.dataset, 3, 2).unwrap();
    let task = TuneTask::new(&f.dataset, split).unwrap();
    tune(&task, &f.backbone, Method::Gpf, &cfg).unwrap_err()
}

#[test]
fn invalid_configs_are_rejected() {
    let f = fixture(10);
    for cfg in [
        TuneConfig { lambda: -1.0, ..config(0.0, 5) },
        TuneConfig { eta: 0.0, ..config(0.0, 5) },
        TuneConfig { epochs: 0, ..config(0.0, 5) },
        TuneConfig { basis_count: 0, ..config(0.0, 5) },
    ] {
        assert!(matches!(run_err(&f, cfg), TrainError::Config(_)));
    }
}
