use std::sync::OnceLock;

use avtta::adapt::*;
use avtta::data::{corrupt_stream, CorruptionKind, CorruptionSpec};
use avtta::experiment::{prepare_bench, Bench, ExperimentConfig};
use avtta::model::VideoClip;
use avtta::Error;

fn bench() -> &'static (Bench, Vec<VideoClip>) {
    static B: OnceLock<(Bench, Vec<VideoClip>)> = OnceLock::new();
    B.get_or_init(|| {
        let cfg = ExperimentConfig::from_json(
            r#"{"dataset": {"num_classes": 4, "train_per_class": 6, "test_per_class": 5,
                            "clip": {"t_total": 32, "h": 4, "w": 4, "c_in": 3}},
                "source": {"layer_widths": [6], "epochs": 4}}"#,
        )
        .unwrap();
        let bench = prepare_bench(&cfg, 0).unwrap();
        let stream = corrupt_stream(&bench.dataset.test, CorruptionSpec { kind: CorruptionKind::Gaussian, severity: 5 }, 1).unwrap();
        (bench, stream)
    })
}

fn adapter(cfg: AdaptConfig) -> Adapter {
    let (b, _) = bench();
    Adapter::new(b.model.clone(), &b.train_stats, cfg).unwrap()
}

fn source_predictions() -> Vec<usize> {
    let (b, stream) = bench();
    stream.iter().map(|c| b.model.predict(c).unwrap()).collect()
}

#[test]
fn fixed_cycle_always_runs_tau_steps() {
    let (_, stream) = bench();
    let mut a = adapter(AdaptConfig { tau: 3, cycle: CycleMode::Fixed, lr: 1e-3, ..AdaptConfig::default() });
    let m = run_online(&mut a, stream, &mut OracleLabels, 1.0, 4).unwrap();
    assert!(m.records.iter().all(|r| r.aborted || r.steps_used == 3));
    assert_eq!(m.steps_histogram.len(), 4);
}

#[test]
fn flexible_cycle_stays_within_bounds() {
    let (_, stream) = bench();
    for tau in [1, 4] {
        let mut a = adapter(AdaptConfig { tau, ..AdaptConfig::default() });
        let m = run_online(&mut a, stream, &mut NoLabels, 1.0, 4).unwrap();
        assert!(m.records.iter().all(|r| (1..=tau).contains(&r.steps_used)));
        assert!(m.records.iter().all(|r| r.loss_trace.len() == r.steps_used));
        if tau == 1 {
            assert_eq!(m.mean_steps, 1.0);
        }
    }
}

#[test]
fn availability_gates_pseudo_labels() {
    let (_, stream) = bench();
    let mut a = adapter(AdaptConfig::default());
    let none = run_online(&mut a, stream, &mut OracleLabels, 0.0, 4).unwrap();
    assert_eq!(none.pseudo_used, 0);
    let all = run_online(&mut a, stream, &mut OracleLabels, 1.0, 4).unwrap();
    assert_eq!(all.pseudo_used, stream.len());
    assert_eq!(all.pseudo_correct, stream.len());
    let half = run_online(&mut a, stream, &mut OracleLabels, 0.5, 4).unwrap();
    assert!(half.pseudo_used > 0 && half.pseudo_used < stream.len());
}

#[test]
fn runs_reset_and_repeat_exactly() {
    let (_, stream) = bench();
    let mut a = adapter(AdaptConfig::default());
    let first = run_online(&mut a, stream, &mut OracleLabels, 0.7, 9).unwrap();
    let second = run_online(&mut a, stream, &mut OracleLabels, 0.7, 9).unwrap();
    assert_eq!(first, second);
}

#[test]
fn delayed_window_covering_the_stream_predicts_like_the_source() {
    let (_, stream) = bench();
    let mut a = adapter(AdaptConfig { s: stream.len(), ..AdaptConfig::default() });
    let m = run_delayed(&mut a, stream, &mut OracleLabels, 1.0, 2).unwrap();
    let preds: Vec<usize> = m.records.iter().map(|r| r.final_prediction).collect();
    assert_eq!(preds, source_predictions());
    assert!(m.records.iter().all(|r| r.steps_used >= 1));
}

#[test]
fn delayed_single_window_predicts_before_adapting() {
    let (_, stream) = bench();
    let mut a = adapter(AdaptConfig { s: 1, ..AdaptConfig::default() });
    let m = run_delayed(&mut a, stream, &mut OracleLabels, 1.0, 2).unwrap();
    assert_eq!(m.records[0].final_prediction, source_predictions()[0]);
    assert!(m.records.iter().all(|r| r.final_prediction == r.pred_before));
}

#[test]
fn invalid_loop_settings_are_config_errors() {
    let (_, stream) = bench();
    let mut a = adapter(AdaptConfig::default());
    assert!(matches!(run_delayed(&mut a, stream, &mut NoLabels, 1.0, 0), Err(Error::Config { .. })));
    assert!(matches!(run_online(&mut a, stream, &mut NoLabels, 1.5, 0), Err(Error::Config { .. })));
}
