mod common;

use lamo_core::backbone::TransformerConfig;
use lamo_core::corpus::{synthetic_text, Corpus};
use lamo_core::data::{ContextWindow, RtgConvention, WindowSampler};
use lamo_core::envs::{generate_dataset, make_env, reference_scores};
use lamo_core::experiment::{build_model, train_bc_baseline, ModelSpec};
use lamo_core::train::{
    aggregate, evaluate, next_conditioning, train, Aggregate, EvalSetup, MetricsLog, TrainConfig,
};
use lamo_core::LamoError;

fn small_backbone() -> TransformerConfig {
    common::backbone(2, 16, 257)
}

fn quick(steps: usize, interval: usize) -> TrainConfig {
    TrainConfig { steps, eval_interval: interval, batch_size: 8, lr: 1e-3, eval_episodes: 3, ..TrainConfig::desk_scale() }
}

#[test]
fn tiny_model_overfits_five_trajectories() {
    let data = common::random_dataset(5, 8, 3, 2, 21);
    let cfg = common::model_config(small_backbone(), 3, 2, 8);
    let model = lamo_core::model::LamoModel::from_backbone(
        cfg.clone(),
        lamo_core::backbone::init_weights(&cfg.backbone, 0, false).unwrap(),
        lamo_core::model::AdaptSpec { mode: lamo_core::lora::AdaptMode::Full, ..lamo_core::model::AdaptSpec::lora(2, 0) },
    )
    .unwrap();
    let windows: Vec<ContextWindow> = data
        .trajectories()
        .iter()
        .map(|t| {
            let rtg = lamo_core::data::compute_returns_to_go(t, RtgConvention::Exclusive).unwrap();
            ContextWindow::from_trajectory(t, &rtg, 0, 8)
        })
        .collect();
    let initial = model.window_loss(&windows).unwrap();
    let tc = TrainConfig { steps: 1500, eval_interval: 1500, batch_size: 5, lr: 3e-3, weight_decay: 0.0, grad_clip: Some(1.0), ..TrainConfig::desk_scale() };
    let out = train(model, &data, None, &tc, None, None).unwrap();
    let last = out.model.window_loss(&windows).unwrap();
    assert!(last < 0.01 * initial, "initial {initial}, final {last}");
}

#[test]
fn runs_are_deterministic_per_seed() {
    let mut env = make_env("point-reacher").unwrap();
    let data = generate_dataset(env.as_mut(), 0.5, 20, 3).unwrap();
    let corpus = Corpus::from_text(&synthetic_text(20_000, 1));
    let eval = EvalSetup { env: "point-reacher".into(), targets: vec![1.0], normalization: Some(reference_scores("point-reacher").unwrap()) };
    let run = || {
        let model = build_model(&ModelSpec::lamo(2, 5), &small_backbone(), None, &data, 100, 0);
        assert!(matches!(model, Err(LamoError::Config(_))));
        let bb = lamo_core::backbone::init_weights(&small_backbone(), 9, true).unwrap();
        let model = build_model(&ModelSpec::lamo(2, 5), &small_backbone(), Some(&bb), &data, 100, 0).unwrap();
        let tc = TrainConfig { lambda: 0.1, ..quick(40, 20) };
        let out = train(model, &data, Some(&corpus), &tc, Some(&eval), None).unwrap();
        let mut csv = Vec::new();
        out.log.write_csv(&mut csv).unwrap();
        (csv, out.model)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert!(ma.weights.bitwise_eq(&mb.weights));
    let log = MetricsLog::read_csv(a.as_slice()).unwrap();
    assert_eq!(log.rows.len(), 2);
    assert!(log.rows.iter().all(|r| r.language_loss.is_some_and(|l| l > 0.0)));
}

#[test]
fn aggregates_recompute_from_the_logged_csv() {
    let mut env = make_env("grid-quest").unwrap();
    let data = generate_dataset(env.as_mut(), 0.5, 10, 4).unwrap();
    let spec = ModelSpec { head_layers: 1, ..ModelSpec::scratch_dt(4) };
    let model = build_model(&spec, &small_backbone(), None, &data, 100, 1).unwrap();
    let eval = EvalSetup { env: "grid-quest".into(), targets: vec![3.0], normalization: Some(reference_scores("grid-quest").unwrap()) };
    let out = train(model, &data, None, &quick(50, 10), Some(&eval), None).unwrap();
    let mut csv = Vec::new();
    out.log.write_csv(&mut csv).unwrap();
    let reread = MetricsLog::read_csv(csv.as_slice()).unwrap();
    let from_evals: Vec<(usize, f64)> = out.evals.iter().map(|e| (e.step, e.best().score())).collect();
    assert_eq!(reread.scores(), from_evals);
    for mode in [Aggregate::LastWindow { fraction: 0.2 }, Aggregate::TopK { k: 3 }] {
        assert_eq!(aggregate(&reread.scores(), mode).unwrap(), aggregate(&from_evals, mode).unwrap());
    }
}

#[test]
fn evaluation_leaves_the_model_untouched_and_repeats() {
    let mut env = make_env("lin-control").unwrap();
    let data = generate_dataset(env.as_mut(), 0.5, 5, 2).unwrap();
    let model = build_model(&ModelSpec::scratch_dt(5), &small_backbone(), None, &data, 50, 2).unwrap();
    let snapshot = model.clone();
    let a = evaluate(&model, "lin-control", -50.0, 4, 7, None).unwrap();
    let b = evaluate(&model, "lin-control", -50.0, 4, 7, None).unwrap();
    assert_eq!(a, b);
    assert!(model.weights.bitwise_eq(&snapshot.weights));
    assert_eq!(model, snapshot);
    assert_eq!(a.returns.len(), 4);
    assert!(matches!(evaluate(&model, "point-reacher", 1.0, 1, 0, None), Err(LamoError::Shape(_))));
}

#[test]
fn conditioning_decrements_by_reward() {
    assert_eq!(next_conditioning(10.0, 3.0), 7.0);
    let mut r = 5.0;
    for _ in 0..10 {
        r = next_conditioning(r, 0.0);
    }
    assert_eq!(r, 5.0);
}

#[test]
fn behavior_cloning_ignores_rewards() {
    let mut env = make_env("point-reacher-dense").unwrap();
    let data = generate_dataset(env.as_mut(), 0.5, 6, 8).unwrap();
    let relabeled = data.map_rewards(|r| 3.0 * r + 1.0);
    let tc = quick(30, 30);
    let a = train_bc_baseline(&data, &small_backbone(), &tc, 5, None).unwrap();
    let b = train_bc_baseline(&relabeled, &small_backbone(), &tc, 5, None).unwrap();
    assert!(a.model.weights.bitwise_eq(&b.model.weights));
    assert_eq!(a.model.config().tokens_per_step(), 2);
}

#[test]
fn zero_lambda_never_touches_language() {
    let data = common::random_dataset(4, 10, 3, 2, 5);
    let corpus = Corpus::from_text(&synthetic_text(5_000, 2));
    let cfg = common::model_config(small_backbone(), 3, 2, 4);
    let tc = quick(20, 10);
    let with = train(common::lora_model(cfg.clone(), 2, 1), &data, Some(&corpus), &tc, None, None).unwrap();
    let without = train(common::lora_model(cfg, 2, 1), &data, None, &tc, None, None).unwrap();
    let d = |o: &lamo_core::train::TrainOutcome| o.losses.iter().map(|l| l.decision).collect::<Vec<_>>();
    assert_eq!(d(&with), d(&without));
    assert!(with.losses.iter().all(|l| l.language.is_none() && l.joint == l.decision));
}

#[test]
fn divergence_is_reported_as_numeric() {
    let data = common::random_dataset(3, 6, 3, 2, 0);
    let mut m = common::lora_model(common::model_config(small_backbone(), 3, 2, 4), 2, 0);
    m.set_input_scaling(None, 1e-38).unwrap();
    let err = train(m, &data, None, &quick(5, 5), None, None).unwrap_err();
    assert!(matches!(err, LamoError::Numeric(_)), "{err:?}");
}

#[test]
fn window_sampler_is_seeded() {
    let data = common::random_dataset(5, 9, 3, 2, 0);
    let a = WindowSampler::new(&data, 4, RtgConvention::Exclusive, 1).unwrap().sample_batch(10);
    let b = WindowSampler::new(&data, 4, RtgConvention::Exclusive, 1).unwrap().sample_batch(10);
    assert_eq!(a, b);
}
