//! Experiment runner: the classify-or-identify loop around the safe
//! optimizer, the safety-probability accounting, and the calibration
//! experiments (threshold sweep, logistic bound coverage, MMD test demo).
//!
//! Every iteration of the loop samples a true context and a noisy context
//! observation. If the classifier's lower bound for some context exceeds
//! `p_safe` the optimizer runs in that context. Otherwise an identification
//! experiment under the seed gain labels the observation, the classifier is
//! refit, and the optimizer runs in the identified context.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cme::{
    decide_from_lower_bounds, BoundBreakdown, ClassifierModel, ContextDecision, ContextId,
    LabeledObservation, OffsetConvention,
};
use crate::env::{
    logistic_inputs, logistic_labels, observe_context_with, simulate_episode, DecisionPath,
    Excitation, LogisticOracle, ObservationChannel, PendulumParams, DEFAULT_CHIRP,
    DEFAULT_SEED_GAIN,
};
use crate::error::{check_open_unit, Error, Result};
use crate::identify::{
    self, accept_threshold, delta_mmd, estimate_mixing_shift, median_heuristic_lengthscale,
    mmd_squared, mmd_squared_unbiased, required_eta, subsample, ContextLibrary, IdentifyVerdict,
    SubsampleConfig,
};
use crate::kernel::KernelSpec;
use crate::safeopt::{linear_grid, ObjectiveObservation, SafeOptConfig, SafeOptState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    #[default]
    FullLoop,
    /// Contexts hidden: one optimizer model for all contexts.
    PureSafeopt,
    /// Identification experiment before every optimizer episode.
    AlwaysIdentify,
    Sensitivity,
    LogisticBounds,
    MmdDemo,
}

impl Scenario {
    pub fn is_loop(self) -> bool {
        matches!(
            self,
            Scenario::FullLoop | Scenario::PureSafeopt | Scenario::AlwaysIdentify
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub kernel: KernelSpec,
    pub lam: f64,
    pub gamma: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            kernel: KernelSpec::gaussian(0.3, 0.1).expect("valid default kernel"),
            lam: 1e-4,
            gamma: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentificationConfig {
    /// Magnitude of the Gaussian MMD kernel; the kernel bound is its square.
    pub kernel_magnitude: f64,
    /// Fixed lengthscale, or `null` for the median heuristic on the first stored data.
    pub lengthscale: Option<f64>,
    pub shift: usize,
    pub steps: usize,
    pub excitation: Excitation,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        IdentificationConfig {
            kernel_magnitude: 120.0,
            lengthscale: None,
            shift: 50,
            steps: 2500,
            excitation: DEFAULT_CHIRP,
        }
    }
}

impl IdentificationConfig {
    pub fn kernel_for(&self, data: &[Vec<f64>]) -> Result<KernelSpec> {
        let ls = self
            .lengthscale
            .unwrap_or_else(|| median_heuristic_lengthscale(data));
        KernelSpec::gaussian(ls, self.kernel_magnitude)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub param_kernel: KernelSpec,
    pub context_kernel: KernelSpec,
    pub noise_std: f64,
    pub beta: f64,
    pub intersect: bool,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_points: usize,
    /// Parameter known to be safe in every context; must lie on the grid.
    pub seed_gain: f64,
    /// Factor applied to episode rewards before they reach the optimizer.
    pub reward_scale: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let d = SafeOptConfig::default();
        OptimizerConfig {
            param_kernel: KernelSpec::matern52(0.15, 1.0).expect("valid default kernel"),
            context_kernel: d.context_kernel,
            noise_std: 0.01,
            beta: 4.0,
            intersect: false,
            grid_lo: 0.0,
            grid_hi: 1.0,
            grid_points: 101,
            seed_gain: DEFAULT_SEED_GAIN,
            reward_scale: 0.01,
        }
    }
}

impl OptimizerConfig {
    pub fn safeopt_config(&self) -> SafeOptConfig {
        SafeOptConfig {
            param_kernel: self.param_kernel,
            context_kernel: self.context_kernel,
            noise_std: self.noise_std,
            beta: self.beta,
            intersect: self.intersect,
        }
    }

    pub fn grid(&self) -> Vec<Vec<f64>> {
        linear_grid(self.grid_lo, self.grid_hi, self.grid_points)
    }

    /// Grid point nearest to `seed_gain`.
    pub fn seed_point(&self) -> Vec<f64> {
        self.grid()
            .into_iter()
            .min_by(|a, b| {
                (a[0] - self.seed_gain)
                    .abs()
                    .total_cmp(&(b[0] - self.seed_gain).abs())
            })
            .expect("grid has points")
    }

    pub fn new_state(&self) -> Result<SafeOptState> {
        SafeOptState::new(self.grid(), &[self.seed_point()], 1, self.safeopt_config())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    pub heights: Vec<f64>,
    pub observation_noise: f64,
    pub train_per_context: usize,
    pub queries: usize,
    pub thresholds: Vec<f64>,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        SensitivityConfig {
            heights: vec![1.0, 2.0, 2.5, 2.75, 2.875],
            observation_noise: 0.1,
            train_per_context: 400,
            queries: 2000,
            thresholds: vec![0.5, 0.6, 0.7, 0.8, 0.9],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticConfig {
    pub kernel: KernelSpec,
    pub lam: f64,
    pub gamma: f64,
    pub delta_class: f64,
    pub queries: usize,
    pub query_lo: f64,
    pub query_hi: f64,
    /// Label resamples for the coverage estimate.
    pub resamples: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            kernel: KernelSpec::gaussian(1.0, 1.0).expect("valid default kernel"),
            lam: 1e-3,
            gamma: 2.0,
            delta_class: 0.1,
            queries: 100,
            query_lo: -6.0,
            query_hi: 7.0,
            resamples: 500,
        }
    }
}

impl LogisticConfig {
    pub fn query_points(&self) -> Vec<f64> {
        if self.queries == 1 {
            return vec![self.query_lo];
        }
        (0..self.queries)
            .map(|i| {
                self.query_lo
                    + (self.query_hi - self.query_lo) * i as f64 / (self.queries - 1) as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmdDemoConfig {
    pub runs: usize,
    /// Trajectories per context pooled for the population MMD estimate.
    pub reference_trajectories: usize,
    pub mixing_a_max: usize,
}

impl Default for MmdDemoConfig {
    fn default() -> Self {
        MmdDemoConfig {
            runs: 100,
            reference_trajectories: 20,
            mixing_a_max: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    /// Dataset CSV, relative to the config file.
    pub dataset: PathBuf,
    pub queries: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    pub iterations: usize,
    pub p_safe: f64,
    pub delta_class: f64,
    pub delta_mmd_prime: f64,
    pub epsilon: f64,
    /// Failure probability of the optimizer, taken as configured.
    pub delta_safe: f64,
    pub offset_convention: OffsetConvention,
    pub classifier: ClassifierConfig,
    pub identification: IdentificationConfig,
    pub optimizer: OptimizerConfig,
    pub episode_steps: usize,
    pub episode_excitation: Excitation,
    pub pendulum: PendulumParams,
    pub heights: Vec<f64>,
    pub observation_noise: f64,
    pub sensitivity: SensitivityConfig,
    pub logistic: LogisticConfig,
    pub mmd_demo: MmdDemoConfig,
    pub classify: Option<ClassifyConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: Scenario::FullLoop,
            seeds: vec![0],
            iterations: 200,
            p_safe: 0.8,
            delta_class: 0.1,
            delta_mmd_prime: 0.05,
            epsilon: 0.01,
            delta_safe: 0.05,
            offset_convention: OffsetConvention::MismatchRate,
            classifier: ClassifierConfig::default(),
            identification: IdentificationConfig::default(),
            optimizer: OptimizerConfig::default(),
            episode_steps: 2500,
            episode_excitation: DEFAULT_CHIRP,
            pendulum: PendulumParams::default(),
            heights: vec![1.0, 2.0, 3.0],
            observation_noise: 0.1,
            sensitivity: SensitivityConfig::default(),
            logistic: LogisticConfig::default(),
            mmd_demo: MmdDemoConfig::default(),
            classify: None,
        }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Input(m) => Error::Config(m),
        other => other,
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn delta_mmd(&self) -> f64 {
        delta_mmd(self.delta_mmd_prime, self.epsilon)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("p_safe", self.p_safe),
            ("delta_class", self.delta_class),
            ("delta_mmd_prime", self.delta_mmd_prime),
            ("epsilon", self.epsilon),
            ("delta_safe", self.delta_safe),
            ("logistic.delta_class", self.logistic.delta_class),
        ] {
            check_open_unit(name, v).map_err(config_err)?;
        }
        if self.delta_mmd() >= 0.5 {
            return Err(Error::config(
                "delta_mmd = (delta_mmd_prime + 2 epsilon)/3 must stay below 1/2",
            ));
        }
        if self.iterations < 1 {
            return Err(Error::config("iterations must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.episode_steps < 1 || self.identification.steps < 1 {
            return Err(Error::config("episodes need at least one step"));
        }
        if self.identification.shift < 1 || self.identification.shift > self.identification.steps {
            return Err(Error::config("identification shift must lie in [1, steps]"));
        }
        if !(self.identification.kernel_magnitude > 0.0) {
            return Err(Error::config(
                "identification kernel magnitude must be positive",
            ));
        }
        if let Some(ls) = self.identification.lengthscale {
            if !(ls > 0.0 && ls.is_finite()) {
                return Err(Error::config("identification lengthscale must be positive"));
            }
        }
        self.classifier.kernel.validate().map_err(config_err)?;
        self.logistic.kernel.validate().map_err(config_err)?;
        for (name, v) in [
            ("classifier.lam", self.classifier.lam),
            ("classifier.gamma", self.classifier.gamma),
            ("logistic.lam", self.logistic.lam),
            ("logistic.gamma", self.logistic.gamma),
            ("optimizer.reward_scale", self.optimizer.reward_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        self.optimizer
            .safeopt_config()
            .validate()
            .map_err(config_err)?;
        if self.optimizer.grid_points < 1 || !(self.optimizer.grid_hi >= self.optimizer.grid_lo) {
            return Err(Error::config("invalid optimizer grid"));
        }
        let dynamics = self.pendulum.build().map_err(config_err)?;
        if self.heights.len() != dynamics.n_contexts() {
            return Err(Error::config(format!(
                "{} heights for {} pendulum contexts",
                self.heights.len(),
                dynamics.n_contexts()
            )));
        }
        ObservationChannel::heights(&self.heights, self.observation_noise).map_err(config_err)?;
        ObservationChannel::heights(
            &self.sensitivity.heights,
            self.sensitivity.observation_noise,
        )
        .map_err(config_err)?;
        if self.sensitivity.train_per_context < 1 || self.sensitivity.queries < 1 {
            return Err(Error::config("sensitivity needs training data and queries"));
        }
        if self
            .sensitivity
            .thresholds
            .iter()
            .any(|&p| !(p > 0.0 && p < 1.0))
        {
            return Err(Error::config("sensitivity thresholds must lie in (0, 1)"));
        }
        if self.logistic.queries < 1 || !(self.logistic.query_hi >= self.logistic.query_lo) {
            return Err(Error::config("invalid logistic query range"));
        }
        if self.mmd_demo.runs < 1 || self.mmd_demo.reference_trajectories < 1 {
            return Err(Error::config(
                "mmd demo needs at least one run and reference trajectory",
            ));
        }
        Ok(())
    }
}

/// Failure probabilities entering the end-to-end safety probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyDeltas {
    pub delta_safe: f64,
    pub delta_class: f64,
    pub delta_mmd: f64,
}

/// Probability that an experiment is safe, by the path that chose its context.
pub fn theorem2_probability(d: &SafetyDeltas, p_safe: f64, path: DecisionPath) -> f64 {
    match path {
        DecisionPath::Identified => (1.0 - d.delta_safe) * (1.0 - d.delta_mmd),
        DecisionPath::Classified => {
            (1.0 - d.delta_safe) * p_safe * (1.0 - d.delta_class) * (1.0 - d.delta_mmd)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassificationCounts {
    pub correct: usize,
    pub incorrect: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scenario: Scenario,
    pub seed: u64,
    pub failures: usize,
    pub episodes: usize,
    pub identification_episodes: usize,
    pub classified_episodes: usize,
    pub total_samples: usize,
    /// Simulated time in seconds, `total_samples · dt`.
    pub training_time_s: f64,
    /// Confident decisions by true context.
    pub per_context: BTreeMap<ContextId, ClassificationCounts>,
    /// Identifications that matched a stored context of another true context.
    pub identification_errors: usize,
    /// New library entries created for an already stored true context.
    pub duplicate_contexts: usize,
    pub contexts_stored: usize,
    pub identification_fraction_by_quartile: Vec<f64>,
    pub p_safe: f64,
    pub beta: f64,
    pub delta_safe: f64,
    pub delta_class: f64,
    pub delta_mmd: f64,
    pub classified_path_used: bool,
    pub theorem2_probability: f64,
    pub theorem2_identified_path: f64,
    pub theorem2_classified_path: f64,
    /// Classified path without the identification factor (all labels ground truth).
    pub theorem2_classified_ground_truth: f64,
}

/// One row per loop iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub seed: u64,
    pub iteration: usize,
    pub context_truth: ContextId,
    pub observation: f64,
    pub decision_path: Option<DecisionPath>,
    pub context_decided: Option<ContextId>,
    pub best_lower_bound: Option<f64>,
    pub identification_new: Option<bool>,
    pub identification_failed: Option<bool>,
    pub parameter: f64,
    pub reward: f64,
    pub constraint: f64,
    pub failed: bool,
    pub samples: usize,
}

/// Classifier bound evaluated for one observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundLog {
    pub seed: u64,
    pub iteration: usize,
    pub observation: f64,
    pub rho: f64,
    pub term_estimation: f64,
    pub term_measurement: f64,
    pub term_context_id: f64,
    pub offset_context_id: f64,
    pub total: f64,
    pub confidence: f64,
    pub best_context: ContextId,
    pub best_lower_bound: f64,
    pub confident: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopOutput {
    pub metrics: RunMetrics,
    pub episodes: Vec<EpisodeLog>,
    pub bounds: Vec<BoundLog>,
}

fn decision_parts(d: &ContextDecision) -> (ContextId, f64, bool) {
    match *d {
        ContextDecision::Confident {
            context,
            lower_bound,
        } => (context, lower_bound, true),
        ContextDecision::Uncertain {
            best_context,
            best_lower_bound,
        } => (best_context, best_lower_bound, false),
    }
}

/// Runs the decision loop for one seed under `config.scenario`.
pub fn run_algorithm1(config: &ExperimentConfig, seed: u64) -> Result<LoopOutput> {
    config.validate()?;
    let scenario = config.scenario;
    if !scenario.is_loop() {
        return Err(Error::config(format!(
            "{scenario:?} is not a loop scenario"
        )));
    }
    let dynamics = config.pendulum.build()?;
    let channel = ObservationChannel::heights(&config.heights, config.observation_noise)?;
    let delta_mmd = config.delta_mmd();
    let sub_cfg = SubsampleConfig::new(config.identification.shift, config.epsilon)?;
    let seed_point = config.optimizer.seed_point();
    let mut optimizer = config.optimizer.new_state()?;
    let mut library: Option<ContextLibrary> = None;
    let mut training: Vec<LabeledObservation> = Vec::new();
    let mut classifier: Option<ClassifierModel> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let n_ctx = dynamics.n_contexts();
    let mut per_context: BTreeMap<ContextId, ClassificationCounts> = (0..n_ctx)
        .map(|c| (c, ClassificationCounts::default()))
        .collect();
    let mut failures = 0;
    let mut total_samples = 0;
    let mut identification_episodes = 0;
    let mut identification_errors = 0;
    let mut duplicate_contexts = 0;
    let mut quartile_ident = [0usize; 4];
    let mut quartile_total = [0usize; 4];
    let mut episodes = Vec::with_capacity(config.iterations);
    let mut bounds = Vec::new();

    for it in 0..config.iterations {
        let truth = rng.random_range(0..n_ctx);
        let y = observe_context_with(&channel, truth, &mut rng)?;
        let id_seed: u64 = rng.random();
        let episode_seed: u64 = rng.random();

        let mut log = EpisodeLog {
            seed,
            iteration: it,
            context_truth: truth,
            observation: y[0],
            decision_path: None,
            context_decided: None,
            best_lower_bound: None,
            identification_new: None,
            identification_failed: None,
            parameter: f64::NAN,
            reward: f64::NAN,
            constraint: f64::NAN,
            failed: false,
            samples: 0,
        };

        let mut classified = None;
        if scenario == Scenario::FullLoop {
            if let Some(model) = &classifier {
                let (lower, bound) = model.lower_bounds(
                    &y,
                    config.delta_class,
                    delta_mmd,
                    config.offset_convention,
                )?;
                let decision =
                    decide_from_lower_bounds(model.contexts(), lower.as_slice(), config.p_safe);
                let (best, lb, confident) = decision_parts(&decision);
                log.best_lower_bound = Some(lb);
                bounds.push(bound_log(seed, it, y[0], &bound, best, lb, confident));
                classified = decision.confident_context();
            }
        }

        let context = match (scenario, classified) {
            (Scenario::PureSafeopt, _) => 0,
            (_, Some(c)) => {
                log.decision_path = Some(DecisionPath::Classified);
                let lib = library.as_ref().expect("classifier implies a library");
                let counts = per_context.entry(truth).or_default();
                if lib.truth_of(c) == Some(truth) {
                    counts.correct += 1;
                } else {
                    counts.incorrect += 1;
                }
                c
            }
            (_, None) => {
                log.decision_path = Some(DecisionPath::Identified);
                identification_episodes += 1;
                quartile_ident[it * 4 / config.iterations] += 1;
                let ep = simulate_episode(
                    &dynamics,
                    truth,
                    &seed_point,
                    config.identification.steps,
                    config.identification.excitation,
                    id_seed,
                )?;
                total_samples += ep.trajectory.steps();
                failures += usize::from(ep.failed);
                log.identification_failed = Some(ep.failed);
                if library.is_none() {
                    let data = subsample(&ep.trajectory, sub_cfg.shift)?;
                    library = Some(ContextLibrary::new(
                        config.identification.kernel_for(&data)?,
                        sub_cfg.shift,
                    )?);
                }
                let lib = library.as_mut().expect("library initialized");
                let known: BTreeSet<ContextId> =
                    lib.ids().filter_map(|id| lib.truth_of(id)).collect();
                let outcome =
                    identify::identify(&ep.trajectory, lib, &sub_cfg, config.delta_mmd_prime)?;
                let c = outcome.verdict.context();
                match outcome.verdict {
                    IdentifyVerdict::Known(c) => {
                        identification_errors += usize::from(lib.truth_of(c) != Some(truth));
                        log.identification_new = Some(false);
                    }
                    IdentifyVerdict::New(_) => {
                        duplicate_contexts += usize::from(known.contains(&truth));
                        log.identification_new = Some(true);
                    }
                }
                if scenario == Scenario::FullLoop {
                    training.push(LabeledObservation::identified(y.clone(), c, delta_mmd));
                    classifier = Some(ClassifierModel::fit(
                        &training,
                        config.classifier.kernel,
                        config.classifier.lam,
                        config.classifier.gamma,
                    )?);
                }
                c
            }
        };
        quartile_total[it * 4 / config.iterations] += 1;
        if scenario != Scenario::PureSafeopt {
            log.context_decided = Some(context);
        }

        let params = optimizer.propose(context);
        let ep = simulate_episode(
            &dynamics,
            truth,
            &params,
            config.episode_steps,
            config.episode_excitation,
            episode_seed,
        )?;
        total_samples += ep.trajectory.steps();
        failures += usize::from(ep.failed);
        optimizer.observe(ObjectiveObservation {
            a: params.clone(),
            c: context,
            f_meas: ep.reward * config.optimizer.reward_scale,
            g_meas: ep.constraints.clone(),
        })?;
        log.parameter = params[0];
        log.reward = ep.reward;
        log.constraint = ep.constraints[0];
        log.failed = ep.failed || log.identification_failed == Some(true);
        log.samples = total_samples;
        episodes.push(log);
    }

    let deltas = SafetyDeltas {
        delta_safe: config.delta_safe,
        delta_class: config.delta_class,
        delta_mmd,
    };
    let classified_episodes = config.iterations - identification_episodes;
    let classified_path_used = scenario == Scenario::FullLoop && classified_episodes > 0;
    let identified = theorem2_probability(&deltas, config.p_safe, DecisionPath::Identified);
    let classified = theorem2_probability(&deltas, config.p_safe, DecisionPath::Classified);
    let metrics = RunMetrics {
        scenario,
        seed,
        failures,
        episodes: config.iterations,
        identification_episodes,
        classified_episodes,
        total_samples,
        training_time_s: total_samples as f64 * dynamics.dt,
        per_context,
        identification_errors,
        duplicate_contexts,
        contexts_stored: library.as_ref().map_or(0, ContextLibrary::len),
        identification_fraction_by_quartile: quartile_ident
            .iter()
            .zip(&quartile_total)
            .map(|(&i, &t)| if t == 0 { 0.0 } else { i as f64 / t as f64 })
            .collect(),
        p_safe: config.p_safe,
        beta: config.optimizer.beta,
        delta_safe: config.delta_safe,
        delta_class: config.delta_class,
        delta_mmd,
        classified_path_used,
        theorem2_probability: if classified_path_used {
            classified
        } else {
            identified
        },
        theorem2_identified_path: identified,
        theorem2_classified_path: classified,
        theorem2_classified_ground_truth: (1.0 - deltas.delta_safe)
            * config.p_safe
            * (1.0 - deltas.delta_class),
    };
    Ok(LoopOutput {
        metrics,
        episodes,
        bounds,
    })
}

fn bound_log(
    seed: u64,
    iteration: usize,
    y: f64,
    b: &BoundBreakdown,
    best: ContextId,
    lb: f64,
    confident: bool,
) -> BoundLog {
    BoundLog {
        seed,
        iteration,
        observation: y,
        rho: b.rho,
        term_estimation: b.term_estimation,
        term_measurement: b.term_measurement,
        term_context_id: b.term_context_id,
        offset_context_id: b.offset_context_id,
        total: b.total,
        confidence: b.confidence,
        best_context: best,
        best_lower_bound: lb,
        confident,
    }
}

/// Decision counts for one threshold and true context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub p_safe: f64,
    pub context: ContextId,
    pub height: f64,
    pub queries: usize,
    pub confident: usize,
    pub correct: usize,
    pub incorrect: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRow {
    pub p_safe: f64,
    pub truth: ContextId,
    pub decided: ContextId,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityOutput {
    pub rows: Vec<SensitivityRow>,
    pub confusion: Vec<ConfusionRow>,
}

/// One ground-truth classifier, one fixed query set, every threshold.
pub fn run_sensitivity(config: &ExperimentConfig, seed: u64) -> Result<SensitivityOutput> {
    config.validate()?;
    let sc = &config.sensitivity;
    let channel = ObservationChannel::heights(&sc.heights, sc.observation_noise)?;
    let n_ctx = channel.n_contexts();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(n_ctx * sc.train_per_context);
    for c in 0..n_ctx {
        for _ in 0..sc.train_per_context {
            train.push(LabeledObservation::ground_truth(
                observe_context_with(&channel, c, &mut rng)?,
                c,
            ));
        }
    }
    let model = ClassifierModel::fit_with_contexts(
        &train,
        (0..n_ctx).collect(),
        config.classifier.kernel,
        config.classifier.lam,
        config.classifier.gamma,
    )?;

    let mut queries = Vec::with_capacity(sc.queries);
    for _ in 0..sc.queries {
        let truth = rng.random_range(0..n_ctx);
        let y = observe_context_with(&channel, truth, &mut rng)?;
        let (lower, _) = model.lower_bounds(
            &y,
            config.delta_class,
            config.delta_mmd(),
            config.offset_convention,
        )?;
        queries.push((truth, lower));
    }

    let mut rows = Vec::new();
    let mut confusion = Vec::new();
    for &p in &sc.thresholds {
        let mut conf = vec![vec![0usize; n_ctx]; n_ctx];
        let mut asked = vec![0usize; n_ctx];
        for (truth, lower) in &queries {
            asked[*truth] += 1;
            if let Some(c) =
                decide_from_lower_bounds(model.contexts(), lower.as_slice(), p).confident_context()
            {
                conf[*truth][c] += 1;
            }
        }
        for truth in 0..n_ctx {
            let confident: usize = conf[truth].iter().sum();
            rows.push(SensitivityRow {
                p_safe: p,
                context: truth,
                height: sc.heights[truth],
                queries: asked[truth],
                confident,
                correct: conf[truth][truth],
                incorrect: confident - conf[truth][truth],
            });
            for (decided, &count) in conf[truth].iter().enumerate() {
                confusion.push(ConfusionRow {
                    p_safe: p,
                    truth,
                    decided,
                    count,
                });
            }
        }
    }
    Ok(SensitivityOutput { rows, confusion })
}

/// Estimate, bound and truth at one query of the logistic problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRow {
    pub y: f64,
    pub p_hat_0: f64,
    pub p_hat_1: f64,
    pub truth_0: f64,
    pub truth_1: f64,
    pub rho: f64,
    pub term_estimation: f64,
    pub term_measurement: f64,
    pub total: f64,
    pub confidence: f64,
    pub covered: bool,
}

fn logistic_model(cfg: &LogisticConfig, data: &[LabeledObservation]) -> Result<ClassifierModel> {
    ClassifierModel::fit_with_contexts(data, vec![0, 1], cfg.kernel, cfg.lam, cfg.gamma)
}

fn logistic_covered(raw: &nalgebra::DVector<f64>, total: f64, y: f64) -> bool {
    let o = LogisticOracle;
    (0..2).all(|c| (raw[c] - o.probability(c, y)).abs() <= total)
}

pub fn run_logistic_bounds(config: &ExperimentConfig, seed: u64) -> Result<Vec<LogisticRow>> {
    config.validate()?;
    let cfg = &config.logistic;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = logistic_inputs(&mut rng);
    let data = logistic_labels(&inputs, &mut rng);
    let model = logistic_model(cfg, &data)?;
    let oracle = LogisticOracle;
    cfg.query_points()
        .into_iter()
        .map(|y| {
            let raw = model.predict_raw(&[y])?;
            let b = model.total_bound_with(
                &[y],
                cfg.delta_class,
                config.delta_mmd(),
                config.offset_convention,
            )?;
            Ok(LogisticRow {
                y,
                p_hat_0: raw[0],
                p_hat_1: raw[1],
                truth_0: oracle.p0(y),
                truth_1: oracle.p1(y),
                rho: b.rho,
                term_estimation: b.term_estimation,
                term_measurement: b.term_measurement,
                total: b.total,
                confidence: b.confidence,
                covered: logistic_covered(&raw, b.total, y),
            })
        })
        .collect()
}

/// Fraction of label resamples whose bound envelope contains the truth, per query.
pub fn logistic_coverage(config: &ExperimentConfig, seed: u64) -> Result<Vec<f64>> {
    config.validate()?;
    let cfg = &config.logistic;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = logistic_inputs(&mut rng);
    let queries = cfg.query_points();
    let mut hits = vec![0usize; queries.len()];
    for _ in 0..cfg.resamples {
        let model = logistic_model(cfg, &logistic_labels(&inputs, &mut rng))?;
        for (h, &y) in hits.iter_mut().zip(&queries) {
            let raw = model.predict_raw(&[y])?;
            let b = model.total_bound_with(
                &[y],
                cfg.delta_class,
                config.delta_mmd(),
                config.offset_convention,
            )?;
            *h += usize::from(logistic_covered(&raw, b.total, y));
        }
    }
    Ok(hits
        .iter()
        .map(|&h| h as f64 / cfg.resamples as f64)
        .collect())
}

/// One two-sample test in the calibration demo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdTestRow {
    pub run: usize,
    pub candidate: ContextId,
    pub reference: ContextId,
    pub mmd_sq: f64,
    pub threshold: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdPairRow {
    pub a: ContextId,
    pub b: ContextId,
    pub population_mmd_sq: f64,
    pub required_eta: f64,
    pub separated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdDemoSummary {
    pub lengthscale: f64,
    pub k_bound: f64,
    pub r: usize,
    pub accept_threshold: f64,
    pub required_eta: f64,
    pub delta_mmd: f64,
    pub same_context_tests: usize,
    pub wrong_rejects: usize,
    pub wrong_reject_rate: f64,
    pub cross_context_tests: usize,
    pub wrong_accepts: usize,
    pub wrong_accept_rate: f64,
    pub mixing_shift: usize,
    pub mixing_converged: bool,
    pub all_pairs_separated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdDemoOutput {
    pub summary: MmdDemoSummary,
    pub pairs: Vec<MmdPairRow>,
    pub tests: Vec<MmdTestRow>,
}

/// Calibration of the identification test on the pendulum: every context's
/// fresh trajectory is tested against a fresh reference of every context.
pub fn run_mmd_demo(config: &ExperimentConfig, seed: u64) -> Result<MmdDemoOutput> {
    config.validate()?;
    let dynamics = config.pendulum.build()?;
    let idc = &config.identification;
    let seed_point = config.optimizer.seed_point();
    let n_ctx = dynamics.n_contexts();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thinned = |c: ContextId, rng: &mut ChaCha8Rng| -> Result<Vec<Vec<f64>>> {
        let ep = simulate_episode(
            &dynamics,
            c,
            &seed_point,
            idc.steps,
            idc.excitation,
            rng.random(),
        )?;
        subsample(&ep.trajectory, idc.shift)
    };

    let mut pooled: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_ctx);
    for c in 0..n_ctx {
        let mut all = Vec::new();
        for _ in 0..config.mmd_demo.reference_trajectories {
            all.extend(thinned(c, &mut rng)?);
        }
        pooled.push(all);
    }
    let r = pooled[0].len() / config.mmd_demo.reference_trajectories;
    let first: Vec<Vec<f64>> = pooled.iter().flat_map(|p| p[..r].iter().cloned()).collect();
    let kernel = idc.kernel_for(&first)?;
    let k_bound = kernel.diag();
    let d_mmd = config.delta_mmd();
    let eta = required_eta(r, k_bound, d_mmd);
    let threshold = accept_threshold(r, k_bound, config.delta_mmd_prime);

    let mut pairs = Vec::new();
    for a in 0..n_ctx {
        for b in a + 1..n_ctx {
            let pop = mmd_squared_unbiased(&pooled[a], &pooled[b], &kernel)?;
            pairs.push(MmdPairRow {
                a,
                b,
                population_mmd_sq: pop,
                required_eta: eta,
                separated: pop >= eta,
            });
        }
    }

    let mut tests = Vec::new();
    let (mut same, mut wrong_rejects, mut cross, mut wrong_accepts) = (0, 0, 0, 0);
    for run in 0..config.mmd_demo.runs {
        let refs = (0..n_ctx)
            .map(|c| thinned(c, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let cands = (0..n_ctx)
            .map(|c| thinned(c, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        for (candidate, cand) in cands.iter().enumerate() {
            for (reference, refd) in refs.iter().enumerate() {
                let m = mmd_squared(cand, refd, &kernel)?;
                let accepted = m < threshold;
                if candidate == reference {
                    same += 1;
                    wrong_rejects += usize::from(!accepted);
                } else {
                    cross += 1;
                    wrong_accepts += usize::from(accepted);
                }
                tests.push(MmdTestRow {
                    run,
                    candidate,
                    reference,
                    mmd_sq: m,
                    threshold,
                    accepted,
                });
            }
        }
    }

    let t1 = simulate_episode(
        &dynamics,
        0,
        &seed_point,
        idc.steps,
        idc.excitation,
        rng.random(),
    )?;
    let t2 = simulate_episode(
        &dynamics,
        0,
        &seed_point,
        idc.steps,
        idc.excitation,
        rng.random(),
    )?;
    let mixing = estimate_mixing_shift(
        &t1.trajectory,
        &t2.trajectory,
        &kernel,
        config.mmd_demo.mixing_a_max,
        config.delta_mmd_prime,
    )?;

    Ok(MmdDemoOutput {
        summary: MmdDemoSummary {
            lengthscale: kernel.lengthscale,
            k_bound,
            r,
            accept_threshold: threshold,
            required_eta: eta,
            delta_mmd: d_mmd,
            same_context_tests: same,
            wrong_rejects,
            wrong_reject_rate: wrong_rejects as f64 / same.max(1) as f64,
            cross_context_tests: cross,
            wrong_accepts,
            wrong_accept_rate: wrong_accepts as f64 / cross.max(1) as f64,
            mixing_shift: mixing.shift,
            mixing_converged: mixing.converged,
            all_pairs_separated: pairs.iter().all(|p| p.separated),
        },
        pairs,
        tests,
    })
}

/// Decision and bound for one ad-hoc query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRow {
    pub query: usize,
    pub y_0: f64,
    pub best_context: ContextId,
    pub best_lower_bound: f64,
    pub confident: bool,
    pub rho: f64,
    pub term_estimation: f64,
    pub term_measurement: f64,
    pub term_context_id: f64,
    pub offset_context_id: f64,
    pub total: f64,
    pub confidence: f64,
}

/// Fits the classifier on `classify.dataset` (resolved against `base_dir`) and
/// evaluates every query.
pub fn run_classify(config: &ExperimentConfig, base_dir: &Path) -> Result<Vec<ClassifyRow>> {
    config.validate()?;
    let cc = config
        .classify
        .as_ref()
        .ok_or_else(|| Error::config("missing `classify` section"))?;
    let data = crate::io::read_dataset_csv(&base_dir.join(&cc.dataset))?;
    let model = ClassifierModel::fit(
        &data,
        config.classifier.kernel,
        config.classifier.lam,
        config.classifier.gamma,
    )?;
    cc.queries
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let (lower, b) = model.lower_bounds(
                y,
                config.delta_class,
                config.delta_mmd(),
                config.offset_convention,
            )?;
            let decision =
                decide_from_lower_bounds(model.contexts(), lower.as_slice(), config.p_safe);
            let (best, lb, confident) = decision_parts(&decision);
            Ok(ClassifyRow {
                query: i,
                y_0: y.first().copied().unwrap_or(f64::NAN),
                best_context: best,
                best_lower_bound: lb,
                confident,
                rho: b.rho,
                term_estimation: b.term_estimation,
                term_measurement: b.term_measurement,
                term_context_id: b.term_context_id,
                offset_context_id: b.offset_context_id,
                total: b.total,
                confidence: b.confidence,
            })
        })
        .collect()
}
