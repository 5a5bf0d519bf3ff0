//! Context identification from trajectory data with a kernel two-sample test.
//!
//! Trajectories are thinned with a mixing shift so the kept samples are
//! close to independent, then compared to every stored context with the
//! biased squared-MMD estimator. A stored context is accepted when the
//! statistic falls below
//!
//! ```text
//! 2 √(2K/r) (1 + √(2 ln(2/δ′)))
//! ```
//!
//! where `0 ≤ k ≤ K` bounds the kernel and `r` is the number of kept samples.
//! The guarantee binds once contexts are separated by
//! `η = 4 √(2K/r) (1 + √(2 ln(2/δ_MMD)))` with `δ_MMD = (δ′ + 2ε)/3`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::cme::ContextId;
use crate::error::{check_dim, check_open_unit, Error, Result};
use crate::kernel::{sq_dist, KernelSpec};

/// Stability window used by [`estimate_mixing_shift`].
pub const MIXING_WINDOW: usize = 10;

/// Uniformly sampled state trajectory. Sample 0 is the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<Vec<f64>>,
    pub dt: f64,
    pub context_truth: Option<ContextId>,
}

impl Trajectory {
    pub fn new(samples: Vec<Vec<f64>>, dt: f64, context_truth: Option<ContextId>) -> Result<Self> {
        let t = Trajectory {
            samples,
            dt,
            context_truth,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.len() < 2 {
            return Err(Error::input("a trajectory needs at least two samples"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::input(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        let dim = self.samples[0].len();
        for s in &self.samples {
            check_dim(dim, s.len())?;
        }
        Ok(())
    }

    /// Number of transitions, i.e. samples after the initial state.
    pub fn steps(&self) -> usize {
        self.samples.len() - 1
    }

    pub fn state_dim(&self) -> usize {
        self.samples[0].len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsampleConfig {
    pub shift: usize,
    /// Probability that thinned same-context data still looks different.
    pub epsilon: f64,
}

impl SubsampleConfig {
    pub fn new(shift: usize, epsilon: f64) -> Result<Self> {
        if shift < 1 {
            return Err(Error::input("sub-sampling shift must be at least 1"));
        }
        check_open_unit("epsilon", epsilon)?;
        Ok(SubsampleConfig { shift, epsilon })
    }
}

/// Outcome of one two-sample test against a stored context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdTestResult {
    pub mmd_sq: f64,
    pub accept_threshold: f64,
    pub eta_required: f64,
    pub accepted: bool,
    pub r: usize,
    pub delta_mmd: f64,
    pub delta_mmd_prime: f64,
}

impl MmdTestResult {
    pub fn new(mmd_sq: f64, r: usize, k_bound: f64, delta_prime: f64, epsilon: f64) -> Self {
        let threshold = accept_threshold(r, k_bound, delta_prime);
        let delta = delta_mmd(delta_prime, epsilon);
        MmdTestResult {
            mmd_sq,
            accept_threshold: threshold,
            eta_required: required_eta(r, k_bound, delta),
            accepted: mmd_sq < threshold,
            r,
            delta_mmd: delta,
            delta_mmd_prime: delta_prime,
        }
    }
}

/// δ_MMD = (δ′ + 2ε) / 3.
pub fn delta_mmd(delta_prime: f64, epsilon: f64) -> f64 {
    (delta_prime + 2.0 * epsilon) / 3.0
}

/// Acceptance threshold on the squared MMD.
pub fn accept_threshold(r: usize, k_bound: f64, delta_prime: f64) -> f64 {
    2.0 * (2.0 * k_bound / r as f64).sqrt() * (1.0 + (2.0 * (2.0 / delta_prime).ln()).sqrt())
}

/// Context separation needed for the test to distinguish contexts at `r`.
pub fn required_eta(r: usize, k_bound: f64, delta_mmd: f64) -> f64 {
    4.0 * (2.0 * k_bound / r as f64).sqrt() * (1.0 + (2.0 * (2.0 / delta_mmd).ln()).sqrt())
}

/// Biased (V-statistic) squared MMD before clamping; can be slightly negative.
pub fn mmd_squared_unclamped(x: &[Vec<f64>], xc: &[Vec<f64>], kernel: &KernelSpec) -> Result<f64> {
    let r = x.len();
    if r == 0 || xc.len() != r {
        return Err(Error::input(format!(
            "MMD needs equal nonempty sample counts, got {} and {}",
            r,
            xc.len()
        )));
    }
    let dim = x[0].len();
    for p in x.iter().chain(xc) {
        check_dim(dim, p.len())?;
    }
    let self_sum = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            let mut row = 0.0;
            for j in 0..i {
                row += kernel.from_sq_dist(sq_dist(&s[i], &s[j]));
            }
            acc += 2.0 * row + kernel.from_sq_dist(0.0);
        }
        acc
    };
    let mut cross = 0.0;
    for a in x {
        let mut row = 0.0;
        for b in xc {
            row += kernel.from_sq_dist(sq_dist(a, b));
        }
        cross += row;
    }
    let r2 = (r * r) as f64;
    Ok((self_sum(x) + self_sum(xc) - 2.0 * cross) / r2)
}

/// Biased squared-MMD estimate, clamped at zero.
pub fn mmd_squared(x: &[Vec<f64>], xc: &[Vec<f64>], kernel: &KernelSpec) -> Result<f64> {
    Ok(mmd_squared_unclamped(x, xc, kernel)?.max(0.0))
}

/// Unbiased (U-statistic) squared MMD; sample counts may differ (each ≥ 2).
pub fn mmd_squared_unbiased(x: &[Vec<f64>], xc: &[Vec<f64>], kernel: &KernelSpec) -> Result<f64> {
    let (m, n) = (x.len(), xc.len());
    if m < 2 || n < 2 {
        return Err(Error::input(
            "unbiased MMD needs at least two samples per set",
        ));
    }
    let dim = x[0].len();
    for p in x.iter().chain(xc) {
        check_dim(dim, p.len())?;
    }
    let off_diag = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..i {
                acc += kernel.from_sq_dist(sq_dist(&s[i], &s[j]));
            }
        }
        2.0 * acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in x {
        for b in xc {
            cross += kernel.from_sq_dist(sq_dist(a, b));
        }
    }
    Ok(off_diag(x) + off_diag(xc) - 2.0 * cross / (m * n) as f64)
}

/// Kernel `N(x − y; 0, γ²)`, the normalization used by the closed forms below.
pub fn normalized_gaussian_kernel(gamma: f64) -> Result<KernelSpec> {
    KernelSpec::gaussian(gamma, (2.0 * PI * gamma * gamma).powf(-0.25))
}

/// Population squared MMD between `N(μ_a, σ_a²)` and `N(μ_b, σ_b²)` under
/// [`normalized_gaussian_kernel`]. Self terms carry no mean dependence and
/// the cross term decays with `|μ_a − μ_b|²`.
pub fn closed_form_gaussian_mmd(
    mu_a: f64,
    sigma_a: f64,
    mu_b: f64,
    sigma_b: f64,
    gamma: f64,
) -> f64 {
    let (va, vb, g2) = (sigma_a * sigma_a, sigma_b * sigma_b, gamma * gamma);
    let self_a = 1.0 / (2.0 * PI * (2.0 * va + g2)).sqrt();
    let self_b = 1.0 / (2.0 * PI * (2.0 * vb + g2)).sqrt();
    let s = va + vb + g2;
    let d = mu_a - mu_b;
    let cross = (-d * d / (2.0 * s)).exp() / (2.0 * PI * s).sqrt();
    self_a + self_b - 2.0 * cross
}

/// The same expression with positive exponents in `|μ_a|²`, `|μ_b|²` and
/// `|μ_a + μ_b|²`. Agrees with [`closed_form_gaussian_mmd`] only when both
/// means are zero; kept to document the discrepancy.
pub fn closed_form_gaussian_mmd_positive_exponents(
    mu_a: f64,
    sigma_a: f64,
    mu_b: f64,
    sigma_b: f64,
    gamma: f64,
) -> f64 {
    let (va, vb, g2) = (sigma_a * sigma_a, sigma_b * sigma_b, gamma * gamma);
    let sa = 2.0 * va + g2;
    let sb = 2.0 * vb + g2;
    let s = va + vb + g2;
    let first = (2.0 * mu_a * mu_a / (2.0 * sa)).exp() / (2.0 * PI * sa).sqrt();
    let second = (2.0 * mu_b * mu_b / (2.0 * sb)).exp() / (2.0 * PI * sb).sqrt();
    let m = mu_a + mu_b;
    let cross = 2.0 * (m * m / (2.0 * s)).exp() / (2.0 * PI * s).sqrt();
    first + second - cross
}

/// Rows at sample indices `shift, 2·shift, …` up to the last transition.
pub fn subsample(traj: &Trajectory, shift: usize) -> Result<Vec<Vec<f64>>> {
    if shift < 1 {
        return Err(Error::input("sub-sampling shift must be at least 1"));
    }
    let rows = traj.steps() / shift;
    Ok((1..=rows)
        .map(|k| traj.samples[k * shift].clone())
        .collect())
}

fn truncated<'a>(a: &'a [Vec<f64>], b: &'a [Vec<f64>]) -> (&'a [Vec<f64>], &'a [Vec<f64>]) {
    let r = a.len().min(b.len());
    (&a[..r], &b[..r])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingShiftEstimate {
    pub shift: usize,
    /// False when no stable shift was found up to `a_max`.
    pub converged: bool,
    /// `(a, mmd², threshold)` for every tested shift.
    pub curve: Vec<(usize, f64, f64)>,
}

/// Smallest shift whose MMD between two same-context trajectories stays below
/// the acceptance threshold for the following [`MIXING_WINDOW`] shifts.
pub fn estimate_mixing_shift(
    traj1: &Trajectory,
    traj2: &Trajectory,
    kernel: &KernelSpec,
    a_max: usize,
    delta_prime: f64,
) -> Result<MixingShiftEstimate> {
    if a_max < 1 {
        return Err(Error::input("a_max must be at least 1"));
    }
    check_open_unit("delta_prime", delta_prime)?;
    let a_max = a_max.min(traj1.steps().min(traj2.steps()));
    let k_bound = kernel.diag();
    let mut curve = Vec::with_capacity(a_max);
    for a in 1..=a_max {
        let s1 = subsample(traj1, a)?;
        let s2 = subsample(traj2, a)?;
        let (s1, s2) = truncated(&s1, &s2);
        let mmd = mmd_squared(s1, s2, kernel)?;
        curve.push((a, mmd, accept_threshold(s1.len(), k_bound, delta_prime)));
    }
    let below: Vec<bool> = curve.iter().map(|&(_, m, t)| m < t).collect();
    for a in 1..=a_max {
        let end = (a + MIXING_WINDOW).min(a_max);
        if below[a - 1..end].iter().all(|&b| b) {
            return Ok(MixingShiftEstimate {
                shift: a,
                converged: true,
                curve,
            });
        }
    }
    log::warn!("no stable mixing shift found up to {a_max}");
    Ok(MixingShiftEstimate {
        shift: a_max,
        converged: false,
        curve,
    })
}

/// Median pairwise distance between rows, ignoring coincident pairs; 1 if all coincide.
pub fn median_heuristic_lengthscale(data: &[Vec<f64>]) -> f64 {
    let mut d: Vec<f64> = Vec::new();
    for i in 0..data.len() {
        for j in 0..i {
            let v = sq_dist(&data[i], &data[j]).sqrt();
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    }
}

/// Thinned reference data per known context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextLibrary {
    entries: BTreeMap<ContextId, Vec<Vec<f64>>>,
    /// Simulation-only ground truth of the trajectory each entry came from.
    truth: BTreeMap<ContextId, Option<ContextId>>,
    pub kernel: KernelSpec,
    pub k_bound: f64,
    pub shift: usize,
}

impl ContextLibrary {
    /// Empty library; the kernel bound is `magnitude²`.
    pub fn new(kernel: KernelSpec, shift: usize) -> Result<Self> {
        kernel.validate()?;
        if shift < 1 {
            return Err(Error::input("sub-sampling shift must be at least 1"));
        }
        Ok(ContextLibrary {
            entries: BTreeMap::new(),
            truth: BTreeMap::new(),
            kernel,
            k_bound: kernel.diag(),
            shift,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = ContextId> + '_ {
        self.entries.keys().copied()
    }

    pub fn get(&self, id: ContextId) -> Option<&[Vec<f64>]> {
        self.entries.get(&id).map(Vec::as_slice)
    }

    pub fn truth_of(&self, id: ContextId) -> Option<ContextId> {
        self.truth.get(&id).copied().flatten()
    }

    pub fn next_id(&self) -> ContextId {
        self.entries.keys().next_back().map_or(0, |&k| k + 1)
    }

    /// Stores thinned data under a fresh id and returns the id.
    pub fn insert(&mut self, data: Vec<Vec<f64>>, truth: Option<ContextId>) -> Result<ContextId> {
        let id = self.next_id();
        self.insert_with_id(id, data, truth)?;
        Ok(id)
    }

    pub fn insert_with_id(
        &mut self,
        id: ContextId,
        data: Vec<Vec<f64>>,
        truth: Option<ContextId>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::input("cannot store an empty context entry"));
        }
        let dim = data[0].len();
        for row in &data {
            check_dim(dim, row.len())?;
        }
        if let Some(existing) = self.entries.values().next() {
            check_dim(existing[0].len(), dim)?;
        }
        for a in &data {
            for b in &data {
                let k = self.kernel.eval_unchecked(a, b);
                if k > self.k_bound * (1.0 + 1e-12) || k < 0.0 {
                    return Err(Error::input("kernel value outside [0, K] on stored data"));
                }
            }
        }
        self.entries.insert(id, data);
        self.truth.insert(id, truth);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "context", rename_all = "kebab-case")]
pub enum IdentifyVerdict {
    Known(ContextId),
    /// No stored context accepted; the data was stored under this new id.
    New(ContextId),
}

impl IdentifyVerdict {
    pub fn context(&self) -> ContextId {
        match *self {
            IdentifyVerdict::Known(c) | IdentifyVerdict::New(c) => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifyOutcome {
    pub tests: Vec<(ContextId, MmdTestResult)>,
    pub verdict: IdentifyVerdict,
    pub delta_mmd: f64,
}

/// Tests `current` against the library in ascending id order; the first
/// accepted context wins. Unmatched data becomes a new library entry.
pub fn identify(
    current: &Trajectory,
    library: &mut ContextLibrary,
    config: &SubsampleConfig,
    delta_prime: f64,
) -> Result<IdentifyOutcome> {
    check_open_unit("delta_prime", delta_prime)?;
    let data = subsample(current, config.shift)?;
    if data.is_empty() {
        return Err(Error::input(
            "trajectory too short for the sub-sampling shift",
        ));
    }
    let tests = test_against_library(&data, library, config, delta_prime)?;
    let verdict = match tests.iter().find(|(_, t)| t.accepted) {
        Some(&(id, _)) => IdentifyVerdict::Known(id),
        None => IdentifyVerdict::New(library.insert(data, current.context_truth)?),
    };
    Ok(IdentifyOutcome {
        tests,
        verdict,
        delta_mmd: delta_mmd(delta_prime, config.epsilon),
    })
}

/// Runs the test against every stored context without modifying the library.
pub fn test_against_library(
    data: &[Vec<f64>],
    library: &ContextLibrary,
    config: &SubsampleConfig,
    delta_prime: f64,
) -> Result<Vec<(ContextId, MmdTestResult)>> {
    library
        .entries
        .iter()
        .map(|(&id, stored)| {
            let (a, b) = truncated(data, stored);
            let mmd = mmd_squared(a, b, &library.kernel)?;
            Ok((
                id,
                MmdTestResult::new(mmd, a.len(), library.k_bound, delta_prime, config.epsilon),
            ))
        })
        .collect()
}
