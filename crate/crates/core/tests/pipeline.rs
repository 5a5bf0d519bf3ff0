use safectx::env::{observe_context, simulate_episode, ObservationChannel, DEFAULT_CHIRP};
use safectx::harness::{run_algorithm1, run_classify, ClassifyConfig};
use safectx::identify::{identify, subsample};
use safectx::io::{load_library, read_dataset_csv, save_library, write_dataset_csv};
use safectx::{
    ClassifierModel, ContextLibrary, ExperimentConfig, KernelSpec, LabeledObservation, Scenario,
    SubsampleConfig,
};

#[test]
fn classified_path_takes_over_in_long_runs() {
    let cfg = ExperimentConfig {
        iterations: 1000,
        ..ExperimentConfig::default()
    };
    let m = run_algorithm1(&cfg, 0).unwrap().metrics;
    let q = &m.identification_fraction_by_quartile;
    assert_eq!(q.len(), 4);
    assert!(q.windows(2).all(|w| w[1] < w[0]), "{q:?}");
    assert!(m.per_context.values().all(|c| c.incorrect == 0));
    assert!(m.classified_path_used);
    assert!(m.classified_episodes > 0);
    assert_eq!(m.failures, 0);
    assert_eq!(m.identification_errors, 0);
    assert_eq!(
        m.identification_episodes + m.classified_episodes,
        m.episodes
    );
}

#[test]
fn identified_labels_feed_a_working_classifier() {
    let cfg = ExperimentConfig::default();
    let dynamics = cfg.pendulum.build().unwrap();
    let channel = ObservationChannel::heights(&cfg.heights, cfg.observation_noise).unwrap();

    let ep = simulate_episode(&dynamics, 0, &[0.7], 2500, DEFAULT_CHIRP, 1).unwrap();
    let first = subsample(&ep.trajectory, cfg.identification.shift).unwrap();
    let kernel = cfg.identification.kernel_for(&first).unwrap();
    let mut lib = ContextLibrary::new(kernel, cfg.identification.shift).unwrap();

    let sub = SubsampleConfig::new(cfg.identification.shift, cfg.epsilon).unwrap();
    let mut data = Vec::new();
    for (i, truth) in [0, 1, 2, 0, 2, 1, 1, 0].into_iter().enumerate() {
        let seed = 100 + i as u64;
        let ep = simulate_episode(&dynamics, truth, &[0.7], 2500, DEFAULT_CHIRP, seed).unwrap();
        let res = identify(&ep.trajectory, &mut lib, &sub, cfg.delta_mmd_prime).unwrap();
        let y = observe_context(&channel, truth, seed).unwrap();
        data.push(LabeledObservation::identified(
            y,
            res.verdict.context(),
            res.delta_mmd,
        ));
    }
    assert_eq!(lib.len(), 3);
    for id in lib.ids() {
        let truths: Vec<_> = data
            .iter()
            .zip([0, 1, 2, 0, 2, 1, 1, 0])
            .filter(|(o, _)| o.context == id)
            .map(|(_, t)| t)
            .collect();
        assert!(
            truths.windows(2).all(|w| w[0] == w[1]),
            "context {id} mixes {truths:?}"
        );
    }

    let dir = tempfile::tempdir().unwrap();
    save_library(dir.path(), &lib).unwrap();
    assert_eq!(load_library(dir.path()).unwrap(), lib);

    let model = ClassifierModel::fit(
        &data,
        cfg.classifier.kernel,
        cfg.classifier.lam,
        cfg.classifier.gamma,
    )
    .unwrap();
    assert_eq!(model.n(), data.len());
    assert_eq!(model.m(), 3);
    let p = model.predict_raw(&data[0].y).unwrap();
    let own = model
        .contexts()
        .iter()
        .position(|&c| c == data[0].context)
        .unwrap();
    assert!(p.iter().enumerate().all(|(j, &v)| j == own || v < p[own]));
}

#[test]
fn classify_reads_dataset_relative_to_config() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<_> = (0..60)
        .map(|i| {
            LabeledObservation::ground_truth(vec![2.0 * (i % 2) as f64 + 0.001 * i as f64], i % 2)
        })
        .collect();
    write_dataset_csv(&dir.path().join("train.csv"), &data).unwrap();
    assert_eq!(
        read_dataset_csv(&dir.path().join("train.csv")).unwrap(),
        data
    );

    let mut cfg = ExperimentConfig::default();
    cfg.classifier.kernel = KernelSpec::gaussian(0.5, 1.0).unwrap();
    cfg.classifier.lam = 1e-3;
    cfg.classify = Some(ClassifyConfig {
        dataset: "train.csv".into(),
        queries: vec![vec![0.03], vec![2.03], vec![1.0]],
    });
    let rows = run_classify(&cfg, dir.path()).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].best_context, 0);
    assert_eq!(rows[1].best_context, 1);
    assert!(rows.iter().all(|r| r.total > 0.0 && r.rho >= 0.0));
    assert!(rows[2].best_lower_bound < rows[0].best_lower_bound);

    assert!(run_classify(&cfg, &dir.path().join("missing")).is_err());
}

#[test]
fn pure_safeopt_and_always_identify_share_the_episode_stream() {
    let base = ExperimentConfig {
        iterations: 20,
        ..ExperimentConfig::default()
    };
    let pure = run_algorithm1(
        &ExperimentConfig {
            scenario: Scenario::PureSafeopt,
            ..base.clone()
        },
        7,
    )
    .unwrap();
    let ai = run_algorithm1(
        &ExperimentConfig {
            scenario: Scenario::AlwaysIdentify,
            ..base
        },
        7,
    )
    .unwrap();
    let truths = |o: &safectx::harness::LoopOutput| {
        o.episodes
            .iter()
            .map(|e| e.context_truth)
            .collect::<Vec<_>>()
    };
    assert_eq!(truths(&pure), truths(&ai));
    assert_eq!(pure.metrics.identification_episodes, 0);
    assert_eq!(ai.metrics.identification_episodes, 20);
    assert!(pure
        .episodes
        .iter()
        .all(|e| e.context_decided.is_none() && e.decision_path.is_none()));
}
