//! Contextual safe Bayesian optimization over a finite parameter grid.
//!
//! Reward and every constraint get their own zero-mean GP over
//! `(parameter, context)` with the product kernel `k_A(a, a′) · k_C(c, c′)`.
//! All GPs share inputs and hyperparameters, so one Cholesky factor serves
//! them all. Confidence intervals `μ ± β σ` are intersected with the
//! previous ones, so they never widen.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cme::ContextId;
use crate::error::{check_dim, Error, Result};
use crate::kernel::{KernelSpec, SpdFactor};

/// Floor on the GP noise variance so noiseless configs stay factorizable.
pub const MIN_NOISE_VAR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveObservation {
    pub a: Vec<f64>,
    pub c: ContextId,
    pub f_meas: f64,
    pub g_meas: Vec<f64>,
}

impl ObjectiveObservation {
    pub fn validate(&self, dim: usize, q: usize) -> Result<()> {
        check_dim(dim, self.a.len())?;
        check_dim(q, self.g_meas.len())?;
        if !self.f_meas.is_finite() || self.a.iter().chain(&self.g_meas).any(|v| !v.is_finite()) {
            return Err(Error::input("observation contains non-finite values"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Reward,
    Constraint(usize),
}

impl Objective {
    fn index(self) -> usize {
        match self {
            Objective::Reward => 0,
            Objective::Constraint(i) => i + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafeOptConfig {
    pub param_kernel: KernelSpec,
    pub context_kernel: KernelSpec,
    pub noise_std: f64,
    pub beta: f64,
    /// Intersect each new confidence interval with the previous one. When
    /// off, intervals are the current posterior's.
    #[serde(default = "default_intersect")]
    pub intersect: bool,
}

fn default_intersect() -> bool {
    true
}

impl Default for SafeOptConfig {
    fn default() -> Self {
        SafeOptConfig {
            param_kernel: KernelSpec::matern52(0.1, 1.0).expect("valid default kernel"),
            context_kernel: KernelSpec::gaussian(1.0, 1.0).expect("valid default kernel"),
            noise_std: 0.05,
            beta: 3.0,
            intersect: true,
        }
    }
}

impl SafeOptConfig {
    pub fn validate(&self) -> Result<()> {
        self.param_kernel.validate()?;
        self.context_kernel.validate()?;
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std must be finite and nonnegative"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta must be positive"));
        }
        Ok(())
    }

    fn kernel(&self, a1: &[f64], c1: ContextId, a2: &[f64], c2: ContextId) -> f64 {
        self.param_kernel.eval_unchecked(a1, a2)
            * self
                .context_kernel
                .eval_unchecked(&[c1 as f64], &[c2 as f64])
    }

    fn prior_var(&self) -> f64 {
        self.param_kernel.diag() * self.context_kernel.diag()
    }
}

/// Confidence intervals and set masks for one context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSets {
    /// `lower[f][i]` for function `f` (reward first) at grid point `i`.
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
    pub safe: Vec<bool>,
    pub maximizers: Vec<bool>,
    pub expanders: Vec<bool>,
}

impl ContextSets {
    fn unbounded(n_functions: usize, n_grid: usize) -> Self {
        ContextSets {
            lower: vec![vec![f64::NEG_INFINITY; n_grid]; n_functions],
            upper: vec![vec![f64::INFINITY; n_grid]; n_functions],
            safe: vec![false; n_grid],
            maximizers: vec![false; n_grid],
            expanders: vec![false; n_grid],
        }
    }

    /// Largest interval width over all functions at grid point `i`.
    pub fn width(&self, i: usize) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u[i] - l[i])
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone)]
struct GpCache {
    factor: SpdFactor,
    /// `(K + σ²I)⁻¹ y` per function.
    alpha: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SafeOptState {
    pub grid: Vec<Vec<f64>>,
    pub n_constraints: usize,
    pub config: SafeOptConfig,
    /// Grid indices known to be safe in every context.
    pub seeds: Vec<usize>,
    pub data: Vec<ObjectiveObservation>,
    pub contexts: BTreeMap<ContextId, ContextSets>,
    #[serde(skip)]
    cache: Option<GpCache>,
}

impl PartialEq for SafeOptState {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid
            && self.n_constraints == other.n_constraints
            && self.config == other.config
            && self.seeds == other.seeds
            && self.data == other.data
            && self.contexts == other.contexts
    }
}

/// Evenly spaced 1-D grid on `[lo, hi]`.
pub fn linear_grid(lo: f64, hi: f64, points: usize) -> Vec<Vec<f64>> {
    if points == 1 {
        return vec![vec![lo]];
    }
    (0..points)
        .map(|i| vec![lo + (hi - lo) * i as f64 / (points - 1) as f64])
        .collect()
}

impl SafeOptState {
    /// Every seed must coincide with a grid point.
    pub fn new(
        grid: Vec<Vec<f64>>,
        seeds: &[Vec<f64>],
        n_constraints: usize,
        config: SafeOptConfig,
    ) -> Result<Self> {
        config.validate()?;
        if grid.is_empty() {
            return Err(Error::input("parameter grid is empty"));
        }
        if n_constraints < 1 {
            return Err(Error::input("at least one constraint is required"));
        }
        let dim = grid[0].len();
        for p in &grid {
            check_dim(dim, p.len())?;
        }
        if seeds.is_empty() {
            return Err(Error::input("at least one safe seed is required"));
        }
        let mut seed_idx = Vec::new();
        for s in seeds {
            check_dim(dim, s.len())?;
            let idx = grid
                .iter()
                .position(|g| g.iter().zip(s).all(|(a, b)| (a - b).abs() <= 1e-12))
                .ok_or_else(|| Error::input(format!("seed {s:?} is not a grid point")))?;
            if !seed_idx.contains(&idx) {
                seed_idx.push(idx);
            }
        }
        Ok(SafeOptState {
            grid,
            n_constraints,
            config,
            seeds: seed_idx,
            data: Vec::new(),
            contexts: BTreeMap::new(),
            cache: None,
        })
    }

    pub fn param_dim(&self) -> usize {
        self.grid[0].len()
    }

    fn n_functions(&self) -> usize {
        self.n_constraints + 1
    }

    pub fn sets(&self, c: ContextId) -> Option<&ContextSets> {
        self.contexts.get(&c)
    }

    fn targets(&self, f: usize) -> DVector<f64> {
        DVector::from_iterator(
            self.data.len(),
            self.data
                .iter()
                .map(|o| if f == 0 { o.f_meas } else { o.g_meas[f - 1] }),
        )
    }

    fn build_cache(&self) -> Result<Option<GpCache>> {
        let n = self.data.len();
        if n == 0 {
            return Ok(None);
        }
        let k = DMatrix::from_fn(n, n, |i, j| {
            let (a, b) = (&self.data[i], &self.data[j]);
            self.config.kernel(&a.a, a.c, &b.a, b.c)
        });
        let factor = SpdFactor::new(&k, self.config.noise_std.powi(2).max(MIN_NOISE_VAR))?;
        let alpha = (0..self.n_functions())
            .map(|f| factor.solve_vec(&self.targets(f)))
            .collect();
        Ok(Some(GpCache { factor, alpha }))
    }

    /// Rebuilds the GP factorization, e.g. after deserializing a snapshot.
    pub fn refresh(&mut self) -> Result<()> {
        self.cache = self.build_cache()?;
        Ok(())
    }

    fn with_cache<T>(&self, f: impl FnOnce(Option<&GpCache>) -> T) -> Result<T> {
        if self.cache.is_some() || self.data.is_empty() {
            return Ok(f(self.cache.as_ref()));
        }
        let cache = self.build_cache()?;
        Ok(f(cache.as_ref()))
    }

    fn cross(&self, a: &[f64], c: ContextId) -> DVector<f64> {
        DVector::from_iterator(
            self.data.len(),
            self.data
                .iter()
                .map(|o| self.config.kernel(a, c, &o.a, o.c)),
        )
    }

    /// GP posterior mean and variance of one function at `(a, c)`.
    pub fn posterior(&self, a: &[f64], c: ContextId, function: Objective) -> Result<(f64, f64)> {
        check_dim(self.param_dim(), a.len())?;
        let f = function.index();
        if f >= self.n_functions() {
            return Err(Error::input(format!("no such constraint {f}")));
        }
        let prior = self.config.prior_var();
        self.with_cache(|cache| match cache {
            None => (0.0, prior),
            Some(cache) => {
                let k = self.cross(a, c);
                let mean = k.dot(&cache.alpha[f]);
                let var = (prior - cache.factor.quad_form(&k)).max(0.0);
                (mean, var)
            }
        })
    }

    /// Means per function and the posterior covariance over the grid in context `c`.
    fn grid_posterior(&self, c: ContextId) -> Result<(Vec<DVector<f64>>, DMatrix<f64>)> {
        let g = self.grid.len();
        let prior = DMatrix::from_fn(g, g, |i, j| {
            self.config.kernel(&self.grid[i], c, &self.grid[j], c)
        });
        self.with_cache(|cache| match cache {
            None => (vec![DVector::zeros(g); self.n_functions()], prior.clone()),
            Some(cache) => {
                let n = self.data.len();
                let ks = DMatrix::from_fn(n, g, |j, i| {
                    let o = &self.data[j];
                    self.config.kernel(&self.grid[i], c, &o.a, o.c)
                });
                let means = cache.alpha.iter().map(|al| ks.tr_mul(al)).collect();
                let v = cache.factor.whiten(&ks);
                (means, &prior - v.tr_mul(&v))
            }
        })
    }

    /// Intersects the intervals of context `c` with the current posterior and
    /// recomputes the safe set, maximizers and expanders.
    pub fn update_sets(&mut self, c: ContextId) -> Result<()> {
        let (means, cov) = self.grid_posterior(c)?;
        let beta = self.config.beta;
        let intersect = self.config.intersect;
        let g = self.grid.len();
        let q = self.n_constraints;
        let noise_var = self.config.noise_std.powi(2).max(MIN_NOISE_VAR);
        let seeds = self.seeds.clone();
        let nf = self.n_functions();
        let sets = self
            .contexts
            .entry(c)
            .or_insert_with(|| ContextSets::unbounded(nf, g));

        for (f, mean) in means.iter().enumerate() {
            for i in 0..g {
                let sd = cov[(i, i)].max(0.0).sqrt();
                let (lo, hi) = (mean[i] - beta * sd, mean[i] + beta * sd);
                if !intersect {
                    sets.lower[f][i] = lo;
                    sets.upper[f][i] = hi;
                    continue;
                }
                let lo = sets.lower[f][i].max(lo);
                let hi = sets.upper[f][i].min(hi);
                if lo <= hi {
                    sets.lower[f][i] = lo;
                    sets.upper[f][i] = hi;
                } else {
                    let mid = (0.5 * (lo + hi)).clamp(sets.lower[f][i], sets.upper[f][i]);
                    sets.lower[f][i] = mid;
                    sets.upper[f][i] = mid;
                }
            }
        }

        let constraint_safe =
            |sets: &ContextSets, i: usize| (1..=q).all(|f| sets.lower[f][i] >= 0.0);
        for i in 0..g {
            sets.safe[i] = constraint_safe(sets, i) || seeds.contains(&i);
        }

        let best_lower = (0..g)
            .filter(|&i| sets.safe[i])
            .map(|i| sets.lower[0][i])
            .fold(f64::NEG_INFINITY, f64::max);
        for i in 0..g {
            sets.maximizers[i] = sets.safe[i] && sets.upper[0][i] >= best_lower;
        }

        let unsafe_points: Vec<usize> = (0..g).filter(|&i| !sets.safe[i]).collect();
        for x in 0..g {
            sets.expanders[x] = sets.safe[x] && {
                let denom = cov[(x, x)].max(0.0) + noise_var;
                denom > 0.0
                    && unsafe_points.iter().any(|&z| {
                        let gain = cov[(z, x)] / denom;
                        let var = (cov[(z, z)] - gain * cov[(z, x)]).max(0.0);
                        (1..=q).all(|f| {
                            let optimistic = means[f][z] + gain * (sets.upper[f][x] - means[f][x]);
                            sets.lower[f][z].max(optimistic - beta * var.sqrt()) >= 0.0
                        })
                    })
            };
        }
        Ok(())
    }

    /// Grid index to evaluate next in context `c`.
    pub fn propose_index(&self, c: ContextId) -> usize {
        let Some(sets) = self.contexts.get(&c) else {
            return self.best_seed(c);
        };
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.grid.len() {
            if sets.maximizers[i] || sets.expanders[i] {
                let w = sets.width(i);
                if best.is_none_or(|(_, bw)| w > bw) {
                    best = Some((i, w));
                }
            }
        }
        best.map_or_else(|| self.best_seed(c), |(i, _)| i)
    }

    pub fn propose(&self, c: ContextId) -> Vec<f64> {
        self.grid[self.propose_index(c)].clone()
    }

    /// Seed with the highest reward lower bound in context `c`.
    pub fn best_seed(&self, c: ContextId) -> usize {
        let lower = |i: usize| {
            self.contexts
                .get(&c)
                .map_or(f64::NEG_INFINITY, |s| s.lower[0][i])
        };
        let mut best = self.seeds[0];
        for &s in &self.seeds[1..] {
            if lower(s) > lower(best) {
                best = s;
            }
        }
        best
    }

    /// Safe grid point with the highest reward lower bound.
    pub fn best_safe_index(&self, c: ContextId) -> usize {
        let Some(sets) = self.contexts.get(&c) else {
            return self.best_seed(c);
        };
        let mut best = self.best_seed(c);
        for i in 0..self.grid.len() {
            if sets.safe[i] && sets.lower[0][i] > sets.lower[0][best] {
                best = i;
            }
        }
        best
    }

    /// Appends an observation and refreshes every tracked context.
    pub fn observe(&mut self, obs: ObjectiveObservation) -> Result<()> {
        obs.validate(self.param_dim(), self.n_constraints)?;
        let c = obs.c;
        self.data.push(obs);
        if let Err(e) = self.refresh() {
            self.data.pop();
            self.cache = self.build_cache().ok().flatten();
            return Err(e);
        }
        self.contexts
            .entry(c)
            .or_insert_with(|| ContextSets::unbounded(self.n_constraints + 1, self.grid.len()));
        let tracked: Vec<ContextId> = self.contexts.keys().copied().collect();
        for ctx in tracked {
            self.update_sets(ctx)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut state: SafeOptState = serde_json::from_str(s)?;
        state.config.validate()?;
        state.refresh()?;
        Ok(state)
    }
}
