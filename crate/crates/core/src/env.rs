//! Simulated context-dependent systems and observation channels.
//!
//! The default system is a linearized rotary inverted pendulum (arm angle,
//! pole angle and their rates) whose pole mass and length change with the
//! context. A scalar "weight height" channel reveals the context through
//! noisy measurements.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cme::{ContextId, LabeledObservation};
use crate::error::{check_dim, Error, Result};
use crate::identify::Trajectory;

/// Reward assigned when the state diverges.
pub const REWARD_FLOOR: f64 = -1e6;
/// Lowest value of the normalized failure margin.
pub const MARGIN_FLOOR: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Excitation {
    #[default]
    None,
    /// `amplitude · sin(2π (f0 + (f1 − f0) k / (2 steps)) k dt)` on every input.
    Chirp { f0: f64, f1: f64, amplitude: f64 },
}

impl Excitation {
    pub fn value(&self, k: usize, steps: usize, dt: f64) -> f64 {
        match *self {
            Excitation::None => 0.0,
            Excitation::Chirp { f0, f1, amplitude } => {
                let kf = k as f64;
                let freq = f0 + (f1 - f0) * kf / (2.0 * steps as f64);
                amplitude * (2.0 * std::f64::consts::PI * freq * kf * dt).sin()
            }
        }
    }
}

/// Fails when `|x[state_index]| > limit`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailurePredicate {
    pub state_index: usize,
    pub limit: f64,
}

/// State feedback `F` whose entries at `tuned` are `offset + slope · a_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSchedule {
    /// Row-major `m × ℓ` base gain.
    pub base: Vec<Vec<f64>>,
    /// `(input row, state column, offset, slope)` per tuned parameter.
    pub tuned: Vec<(usize, usize, f64, f64)>,
}

impl GainSchedule {
    pub fn n_params(&self) -> usize {
        self.tuned.len()
    }

    pub fn matrix(&self, params: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.tuned.len(), params.len())?;
        let rows = self.base.len();
        let cols = self.base.first().map_or(0, Vec::len);
        let mut f = DMatrix::from_fn(rows, cols, |i, j| self.base[i][j]);
        for (&(i, j, offset, slope), &a) in self.tuned.iter().zip(params) {
            f[(i, j)] = offset + slope * a;
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearSystem {
    /// Zero-order-hold discretization of `ẋ = A x + B u`.
    pub fn discretize(a_c: &DMatrix<f64>, b_c: &DMatrix<f64>, dt: f64) -> Self {
        let l = a_c.nrows();
        let m = b_c.ncols();
        let mut aug = DMatrix::zeros(l + m, l + m);
        aug.view_mut((0, 0), (l, l)).copy_from(&(a_c * dt));
        aug.view_mut((0, l), (l, m)).copy_from(&(b_c * dt));
        let e = aug.exp();
        LinearSystem {
            a: e.view((0, 0), (l, l)).into_owned(),
            b: e.view((0, l), (l, m)).into_owned(),
        }
    }
}

/// Discrete-time linear systems, one per context, with shared shape and noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextDynamics {
    pub systems: Vec<LinearSystem>,
    pub process_noise: Vec<f64>,
    pub dt: f64,
    pub failure: FailurePredicate,
    pub gain: GainSchedule,
    pub initial_state: Vec<f64>,
}

impl ContextDynamics {
    pub fn new(
        systems: Vec<LinearSystem>,
        process_noise: Vec<f64>,
        dt: f64,
        failure: FailurePredicate,
        gain: GainSchedule,
    ) -> Result<Self> {
        if systems.len() < 2 {
            return Err(Error::input("at least two contexts are required"));
        }
        let l = systems[0].a.nrows();
        let m = systems[0].b.ncols();
        for s in &systems {
            if s.a.nrows() != l || s.a.ncols() != l || s.b.nrows() != l || s.b.ncols() != m {
                return Err(Error::input(
                    "all contexts must share state and input dimensions",
                ));
            }
        }
        check_dim(l, process_noise.len())?;
        if process_noise.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::input("process noise must be finite and nonnegative"));
        }
        if !(dt > 0.0) {
            return Err(Error::input("dt must be positive"));
        }
        if failure.state_index >= l || !(failure.limit > 0.0) {
            return Err(Error::input("invalid failure predicate"));
        }
        check_dim(m, gain.base.len())?;
        for row in &gain.base {
            check_dim(l, row.len())?;
        }
        if gain.tuned.iter().any(|&(i, j, _, _)| i >= m || j >= l) {
            return Err(Error::input("tuned gain entry out of range"));
        }
        Ok(ContextDynamics {
            systems,
            process_noise,
            dt,
            failure,
            gain,
            initial_state: vec![0.0; l],
        })
    }

    pub fn n_contexts(&self) -> usize {
        self.systems.len()
    }

    pub fn state_dim(&self) -> usize {
        self.systems[0].a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.systems[0].b.ncols()
    }

    fn system(&self, c: ContextId) -> Result<&LinearSystem> {
        self.systems
            .get(c)
            .ok_or_else(|| Error::input(format!("unknown context {c}")))
    }

    /// `A_c − B_c F(params)`.
    pub fn closed_loop(&self, c: ContextId, params: &[f64]) -> Result<DMatrix<f64>> {
        let s = self.system(c)?;
        Ok(&s.a - &s.b * self.gain.matrix(params)?)
    }

    pub fn closed_loop_spectral_radius(&self, c: ContextId, params: &[f64]) -> Result<f64> {
        let m = self.closed_loop(c, params)?;
        Ok(m.complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecisionPath {
    Classified,
    Identified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub trajectory: Trajectory,
    pub reward: f64,
    /// Normalized margin to the failure limit, minimized over the episode.
    pub constraints: Vec<f64>,
    pub failed: bool,
    pub context_truth: ContextId,
    /// `None` while undecided or for a context the identifier just created.
    pub context_decided: Option<ContextId>,
    pub decision_path: Option<DecisionPath>,
}

/// Closed-loop rollout `u = −F x + e(k)`. The episode stops at the first
/// failure; a diverged state floors the margin and the reward.
pub fn simulate_episode(
    dynamics: &ContextDynamics,
    c: ContextId,
    params: &[f64],
    steps: usize,
    excitation: Excitation,
    seed: u64,
) -> Result<EpisodeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_episode_with(dynamics, c, params, steps, excitation, &mut rng)
}

pub fn simulate_episode_with<R: Rng + ?Sized>(
    dynamics: &ContextDynamics,
    c: ContextId,
    params: &[f64],
    steps: usize,
    excitation: Excitation,
    rng: &mut R,
) -> Result<EpisodeRecord> {
    if steps < 1 {
        return Err(Error::input("an episode needs at least one step"));
    }
    let sys = dynamics.system(c)?;
    let f = dynamics.gain.matrix(params)?;
    let l = dynamics.state_dim();
    let FailurePredicate { state_index, limit } = dynamics.failure;

    let mut x = DVector::from_column_slice(&dynamics.initial_state);
    let mut samples = Vec::with_capacity(steps + 1);
    samples.push(x.as_slice().to_vec());
    let mut margin = (limit - x[state_index].abs()) / limit;
    let mut sq_sum = 0.0;
    let mut failed = false;
    for k in 0..steps {
        let e = excitation.value(k, steps, dynamics.dt);
        let u = (-&f * &x).add_scalar(e);
        let mut next = &sys.a * &x + &sys.b * u;
        for i in 0..l {
            let s = dynamics.process_noise[i];
            if s > 0.0 {
                next[i] += s * rng.sample::<f64, _>(StandardNormal);
            }
        }
        x = next;
        samples.push(x.as_slice().to_vec());
        if x.iter().any(|v| !v.is_finite()) {
            margin = MARGIN_FLOOR;
            sq_sum = f64::INFINITY;
            failed = true;
            break;
        }
        sq_sum += x.norm_squared();
        margin = margin.min((limit - x[state_index].abs()) / limit);
        if x[state_index].abs() > limit {
            failed = true;
            break;
        }
    }
    let simulated = samples.len() - 1;
    let reward = (-sq_sum / simulated as f64).max(REWARD_FLOOR);
    Ok(EpisodeRecord {
        trajectory: Trajectory::new(samples, dynamics.dt, Some(c))?,
        reward,
        constraints: vec![margin.max(MARGIN_FLOOR)],
        failed,
        context_truth: c,
        context_decided: None,
        decision_path: None,
    })
}

/// Per-context mean observation plus isotropic Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationChannel {
    pub means: Vec<Vec<f64>>,
    pub noise_std: f64,
}

impl ObservationChannel {
    pub fn new(means: Vec<Vec<f64>>, noise_std: f64) -> Result<Self> {
        let ch = ObservationChannel { means, noise_std };
        ch.validate()?;
        Ok(ch)
    }

    /// Scalar channel with one height per context.
    pub fn heights(heights: &[f64], noise_std: f64) -> Result<Self> {
        Self::new(heights.iter().map(|&h| vec![h]).collect(), noise_std)
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.is_empty() {
            return Err(Error::input(
                "observation channel needs at least one context",
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::input("noise std must be finite and nonnegative"));
        }
        let d = self.means[0].len();
        for m in &self.means {
            check_dim(d, m.len())?;
        }
        Ok(())
    }

    pub fn n_contexts(&self) -> usize {
        self.means.len()
    }
}

pub fn observe_context(channel: &ObservationChannel, c: ContextId, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    observe_context_with(channel, c, &mut rng)
}

pub fn observe_context_with<R: Rng + ?Sized>(
    channel: &ObservationChannel,
    c: ContextId,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mean = channel
        .means
        .get(c)
        .ok_or_else(|| Error::input(format!("unknown context {c}")))?;
    Ok(mean
        .iter()
        .map(|&m| m + channel.noise_std * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// Ranges the synthetic logistic inputs are drawn from, 50 points each.
pub const LOGISTIC_BANDS: [(f64, f64); 3] = [(-6.0, -4.7), (0.5, 1.78), (5.7, 7.0)];
pub const LOGISTIC_POINTS_PER_BAND: usize = 50;

/// True class probabilities of the synthetic logistic problem.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LogisticOracle;

impl LogisticOracle {
    /// Probability of class 0, `1 / (1 + e^{1 − y})`.
    pub fn p0(&self, y: f64) -> f64 {
        1.0 / (1.0 + (1.0 - y).exp())
    }

    pub fn p1(&self, y: f64) -> f64 {
        1.0 - self.p0(y)
    }

    pub fn probability(&self, c: ContextId, y: f64) -> f64 {
        if c == 0 {
            self.p0(y)
        } else {
            self.p1(y)
        }
    }
}

pub fn logistic_inputs<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    LOGISTIC_BANDS
        .iter()
        .flat_map(|&(lo, hi)| (0..LOGISTIC_POINTS_PER_BAND).map(move |_| (lo, hi)))
        .map(|(lo, hi)| rng.random_range(lo..=hi))
        .collect()
}

/// Bernoulli labels for fixed inputs: context 0 with probability `p0(y)`.
pub fn logistic_labels<R: Rng + ?Sized>(inputs: &[f64], rng: &mut R) -> Vec<LabeledObservation> {
    let oracle = LogisticOracle;
    inputs
        .iter()
        .map(|&y| {
            let c = usize::from(rng.random::<f64>() >= oracle.p0(y));
            LabeledObservation::ground_truth(vec![y], c)
        })
        .collect()
}

pub fn logistic_generator(seed: u64) -> (Vec<LabeledObservation>, LogisticOracle) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = logistic_inputs(&mut rng);
    (logistic_labels(&inputs, &mut rng), LogisticOracle)
}

/// Physical constants of the rotary pendulum and the context scalings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    /// Arm inertia about the motor axis [kg m²].
    pub arm_inertia: f64,
    /// Arm length [m].
    pub arm_length: f64,
    /// Nominal pole mass [kg].
    pub pole_mass: f64,
    /// Nominal pole length [m].
    pub pole_length: f64,
    pub gravity: f64,
    pub arm_damping: f64,
    pub pole_damping: f64,
    pub dt: f64,
    /// Factor applied to both pole mass and length, one per context.
    pub context_scales: Vec<f64>,
    /// Std of the per-step noise on each state.
    pub process_noise: Vec<f64>,
    /// Pole-angle failure limit [rad].
    pub failure_limit: f64,
    /// Feedback on `[arm angle, pole angle, arm rate, pole rate]`.
    pub base_gain: Vec<f64>,
    /// Pole-angle gain is `pole_gain_offset + pole_gain_slope · a`.
    pub pole_gain_offset: f64,
    pub pole_gain_slope: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            arm_inertia: 5.7e-5,
            arm_length: 0.085,
            pole_mass: 0.024,
            pole_length: 0.129,
            gravity: 9.81,
            arm_damping: 5e-4,
            pole_damping: 5e-5,
            dt: 1.0 / 200.0,
            context_scales: vec![1.0, 1.3, 1.6],
            process_noise: vec![0.0, 0.0, 0.02, 0.02],
            failure_limit: 0.5,
            base_gain: vec![-0.1, 0.0, -0.05, -0.09],
            pole_gain_offset: -0.2,
            pole_gain_slope: -1.0,
        }
    }
}

impl PendulumParams {
    /// Continuous-time `(A, B)` for one pole scaling.
    pub fn continuous(&self, scale: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mp = self.pole_mass * scale;
        let len = self.pole_length * scale;
        let lp = 0.5 * len;
        let jp = mp * len * len / 12.0;
        let lr = self.arm_length;
        let mass = DMatrix::from_row_slice(
            2,
            2,
            &[
                self.arm_inertia + mp * lr * lr,
                mp * lr * lp,
                mp * lr * lp,
                jp + mp * lp * lp,
            ],
        );
        let inv = mass
            .try_inverse()
            .expect("pendulum mass matrix is positive definite");
        let mut a = DMatrix::zeros(4, 4);
        a[(0, 2)] = 1.0;
        a[(1, 3)] = 1.0;
        let mut b = DMatrix::zeros(4, 1);
        for r in 0..2 {
            a[(2 + r, 1)] = inv[(r, 1)] * mp * self.gravity * lp;
            a[(2 + r, 2)] = -inv[(r, 0)] * self.arm_damping;
            a[(2 + r, 3)] = -inv[(r, 1)] * self.pole_damping;
            b[(2 + r, 0)] = inv[(r, 0)];
        }
        (a, b)
    }

    pub fn build(&self) -> Result<ContextDynamics> {
        if self.base_gain.len() != 4 {
            return Err(Error::input("pendulum gain must have four entries"));
        }
        let systems = self
            .context_scales
            .iter()
            .map(|&s| {
                let (a, b) = self.continuous(s);
                LinearSystem::discretize(&a, &b, self.dt)
            })
            .collect();
        ContextDynamics::new(
            systems,
            self.process_noise.clone(),
            self.dt,
            FailurePredicate {
                state_index: 1,
                limit: self.failure_limit,
            },
            GainSchedule {
                base: vec![self.base_gain.clone()],
                tuned: vec![(0, 1, self.pole_gain_offset, self.pole_gain_slope)],
            },
        )
    }
}

/// Three pendulum contexts with pole mass and length scaled by 1.0, 1.3 and 1.6.
pub fn default_pendulum_contexts() -> ContextDynamics {
    PendulumParams::default()
        .build()
        .expect("default pendulum parameters are valid")
}

/// Tuning parameter that keeps every default context stable with margin.
pub const DEFAULT_SEED_GAIN: f64 = 0.7;

/// Chirp used for identification experiments on the default pendulum.
pub const DEFAULT_CHIRP: Excitation = Excitation::Chirp {
    f0: 0.5,
    f1: 5.0,
    amplitude: 0.08,
};

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn noiseless() -> ContextDynamics {
        let mut d = default_pendulum_contexts();
        d.process_noise = vec![0.0; 4];
        d
    }

    #[test]
    fn equilibrium_stays_at_zero() {
        let d = noiseless();
        let ep = simulate_episode(&d, 0, &[DEFAULT_SEED_GAIN], 500, Excitation::None, 1).unwrap();
        assert!(ep
            .trajectory
            .samples
            .iter()
            .all(|s| s.iter().all(|&v| v == 0.0)));
        assert_eq!(ep.reward, 0.0);
        assert!(!ep.failed);
        assert_eq!(ep.constraints, vec![1.0]);
    }

    #[test]
    fn destabilizing_gain_fails() {
        let d = default_pendulum_contexts();
        // Zero pole feedback beyond the offset leaves the heaviest pole unstable.
        assert!(d.closed_loop_spectral_radius(2, &[0.0]).unwrap() > 1.0);
        let ep = simulate_episode(&d, 2, &[0.0], 2500, DEFAULT_CHIRP, 3).unwrap();
        assert!(ep.failed);
        assert!(ep.constraints[0] < 0.0);
        assert!(ep.trajectory.steps() < 2500);
    }

    #[test]
    fn seed_gain_stabilizes_every_context() {
        let d = default_pendulum_contexts();
        for c in 0..3 {
            assert!(
                d.closed_loop_spectral_radius(c, &[DEFAULT_SEED_GAIN])
                    .unwrap()
                    < 1.0
            );
        }
    }

    #[test]
    fn seed_gain_is_safe_in_all_contexts() {
        let d = default_pendulum_contexts();
        for seed in 0..100 {
            for c in 0..3 {
                let ep = simulate_episode(&d, c, &[DEFAULT_SEED_GAIN], 2500, DEFAULT_CHIRP, seed)
                    .unwrap();
                assert!(!ep.failed, "context {c} seed {seed}");
            }
        }
    }

    #[test]
    fn episode_shape() {
        let d = default_pendulum_contexts();
        assert_relative_eq!(d.dt, 0.005);
        let ep = simulate_episode(&d, 1, &[0.5], 2500, DEFAULT_CHIRP, 9).unwrap();
        assert_eq!(ep.trajectory.steps(), 2500);
        assert_eq!(ep.trajectory.samples.len(), 2501);
        assert_eq!(ep.trajectory.context_truth, Some(1));
    }

    #[test]
    fn deterministic_given_seed() {
        let d = default_pendulum_contexts();
        let a = simulate_episode(&d, 2, &[0.6], 800, DEFAULT_CHIRP, 42).unwrap();
        let b = simulate_episode(&d, 2, &[0.6], 800, DEFAULT_CHIRP, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate_episode(&d, 2, &[0.6], 800, DEFAULT_CHIRP, 43).unwrap();
        assert_ne!(a.trajectory, c.trajectory);
    }

    #[test]
    fn failure_matches_margin_sign() {
        let d = default_pendulum_contexts();
        for i in 0..40 {
            let a = i as f64 / 39.0;
            for c in 0..3 {
                let ep = simulate_episode(&d, c, &[a], 1500, DEFAULT_CHIRP, i).unwrap();
                assert_eq!(ep.failed, ep.constraints[0] < 0.0, "a={a} c={c}");
                assert!(ep.constraints[0] >= MARGIN_FLOOR);
                assert!(ep.reward.is_finite());
            }
        }
    }

    #[test]
    fn heavier_poles_need_more_gain() {
        let d = default_pendulum_contexts();
        let lowest_stable = |c: usize| {
            (0..=100)
                .map(|i| i as f64 / 100.0)
                .find(|&a| d.closed_loop_spectral_radius(c, &[a]).unwrap() < 1.0)
                .unwrap()
        };
        let (a0, a1, a2) = (lowest_stable(0), lowest_stable(1), lowest_stable(2));
        assert!(a0 < a1 && a1 < a2, "{a0} {a1} {a2}");
    }

    #[test]
    fn discretization_of_integrator() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let s = LinearSystem::discretize(&a, &b, 0.1);
        assert_relative_eq!(s.a[(0, 1)], 0.1, epsilon = 1e-14);
        assert_relative_eq!(s.b[(0, 0)], 0.005, epsilon = 1e-14);
        assert_relative_eq!(s.b[(1, 0)], 0.1, epsilon = 1e-14);
    }

    #[test]
    fn stationary_halves_agree() {
        let d = default_pendulum_contexts();
        let ep =
            simulate_episode(&d, 0, &[DEFAULT_SEED_GAIN], 400_000, Excitation::None, 5).unwrap();
        let s = &ep.trajectory.samples[1..];
        let (h1, h2) = s.split_at(s.len() / 2);
        let stats = |h: &[Vec<f64>], i: usize| {
            let n = h.len() as f64;
            let m = h.iter().map(|x| x[i]).sum::<f64>() / n;
            let v = h.iter().map(|x| (x[i] - m).powi(2)).sum::<f64>() / n;
            (m, v)
        };
        for i in 0..4 {
            let (m1, v1) = stats(h1, i);
            let (m2, v2) = stats(h2, i);
            let sd = v1.max(v2).sqrt();
            assert!(
                (m1 - m2).abs() <= 0.1 * sd,
                "state {i}: means {m1} {m2} sd {sd}"
            );
            assert!(
                (v1 - v2).abs() <= 0.1 * v1.max(v2),
                "state {i}: vars {v1} {v2}"
            );
        }
    }

    #[test]
    fn chirp_values() {
        let e = Excitation::Chirp {
            f0: 0.5,
            f1: 5.0,
            amplitude: 2.0,
        };
        assert_eq!(e.value(0, 100, 0.01), 0.0);
        let k = 37;
        let f = 0.5 + 4.5 * 37.0 / 200.0;
        assert_relative_eq!(
            e.value(k, 100, 0.01),
            2.0 * (2.0 * std::f64::consts::PI * f * 0.37).sin()
        );
        assert_eq!(Excitation::None.value(5, 10, 0.1), 0.0);
    }

    #[test]
    fn observation_channel() {
        let ch = ObservationChannel::heights(&[1.0, 2.0, 2.5, 2.75, 2.875], 0.0).unwrap();
        for c in 0..5 {
            assert_eq!(observe_context(&ch, c, 7).unwrap(), ch.means[c]);
        }
        assert!(observe_context(&ch, 5, 0).is_err());
        assert!(ObservationChannel::heights(&[1.0], -0.1).is_err());

        let noisy = ObservationChannel::heights(&[1.0, 2.0], 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| observe_context_with(&noisy, 1, &mut rng).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - 2.0).abs() < 0.004, "{mean}");
        assert_eq!(
            observe_context(&noisy, 0, 3).unwrap(),
            observe_context(&noisy, 0, 3).unwrap()
        );
    }

    #[test]
    fn logistic_oracle_and_generator() {
        let o = LogisticOracle;
        assert_eq!(o.p0(1.0), 0.5);
        assert!(o.p0(50.0) > 1.0 - 1e-12);
        assert_relative_eq!(o.p0(3.0) + o.p1(3.0), 1.0);
        let (data, _) = logistic_generator(4);
        assert_eq!(data.len(), 150);
        for (i, obs) in data.iter().enumerate() {
            let (lo, hi) = LOGISTIC_BANDS[i / 50];
            assert!(obs.y[0] >= lo && obs.y[0] <= hi);
            assert!(obs.context <= 1);
        }
        assert_eq!(logistic_generator(4).0, data);
    }

    #[test]
    fn logistic_label_frequency_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let y = 1.3;
        let n = 20_000;
        let labels = logistic_labels(&vec![y; n], &mut rng);
        let freq = labels.iter().filter(|o| o.context == 0).count() as f64 / n as f64;
        let p = LogisticOracle.p0(y);
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() < 4.0 * se, "{freq} vs {p}");
    }
}
