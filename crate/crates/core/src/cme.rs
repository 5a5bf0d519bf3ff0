//! Multi-class context classifier based on conditional mean embeddings.
//!
//! The estimate for context `c` is kernel ridge regression on one-hot labels,
//! `p̂_c(y) = 𝟙_cᵀ (K + nλI)⁻¹ K_y`. Every query also gets a frequentist
//! error bound made of three parts:
//!
//! * estimation: `√Γ ρ(y)`, the error of regressing the true probability
//!   function from finitely many points;
//! * measurement: `ρ(y) / (4√(nλ)) · √(log det(K + λ̄I) − 2 ln δ_class)`,
//!   from observing Bernoulli labels instead of probabilities;
//! * context identification: a sub-Gaussian term of the same shape plus an
//!   offset, paid only when some labels came from an identification
//!   experiment rather than ground truth.
//!
//! `ρ(y) = √(k(y,y) − K_yᵀ(K + nλI)⁻¹K_y)` is the power function and
//! `λ̄ = max{1, nλ}`.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_open_unit, Error, Result};
use crate::kernel::{gram, GramMatrix, KernelSpec, SpdFactor};

/// Context id as used by the classifier, the identifier and the optimizer.
pub type ContextId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    GroundTruth,
    /// Label produced by an MMD identification run with the given δ_MMD.
    Identified {
        delta_mmd: f64,
    },
}

impl Provenance {
    pub fn is_ground_truth(&self) -> bool {
        matches!(self, Provenance::GroundTruth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledObservation {
    pub y: Vec<f64>,
    pub context: ContextId,
    pub provenance: Provenance,
}

impl LabeledObservation {
    pub fn ground_truth(y: Vec<f64>, context: ContextId) -> Self {
        LabeledObservation {
            y,
            context,
            provenance: Provenance::GroundTruth,
        }
    }

    pub fn identified(y: Vec<f64>, context: ContextId, delta_mmd: f64) -> Self {
        LabeledObservation {
            y,
            context,
            provenance: Provenance::Identified { delta_mmd },
        }
    }
}

/// How the offset of the identification term is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OffsetConvention {
    /// `(1 − δ_MMD) · 𝟏ᵀ(K + nλI)⁻¹K_y` with the all-ones vector.
    ///
    /// Since the one-hot rows sum to one, `𝟏ᵀw = Σ_c p̂_c`, so the lower
    /// bound `p̂_c − total` never exceeds `δ_MMD · p̂_c` when the other
    /// estimates are nonnegative: with this offset a confident decision is
    /// unreachable for any `p_safe ≥ δ_MMD`.
    #[default]
    AsPrinted,
    /// `δ_MMD · Σ_{j identified} |w_j|` with `w = (K + nλI)⁻¹K_y`: each
    /// identified label is wrong with probability at most δ_MMD, which
    /// bounds the mean shift of the regression output by this sum.
    MismatchRate,
}

/// Per-query decomposition of the classification error bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundBreakdown {
    pub rho: f64,
    pub term_estimation: f64,
    pub term_measurement: f64,
    pub term_context_id: f64,
    pub offset_context_id: f64,
    pub total: f64,
    pub delta_class: f64,
    pub delta_mmd: f64,
    /// Probability with which `total` holds.
    pub confidence: f64,
}

impl BoundBreakdown {
    /// `total` as a sum of the stored terms.
    pub fn recompute_total(&self) -> f64 {
        self.term_estimation + self.term_measurement + self.term_context_id + self.offset_context_id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum ContextDecision {
    Confident {
        context: ContextId,
        lower_bound: f64,
    },
    Uncertain {
        best_context: ContextId,
        best_lower_bound: f64,
    },
}

impl ContextDecision {
    pub fn confident_context(&self) -> Option<ContextId> {
        match *self {
            ContextDecision::Confident { context, .. } => Some(context),
            ContextDecision::Uncertain { .. } => None,
        }
    }
}

/// Measurement (label noise) term for a given power-function value.
pub fn measurement_term(rho: f64, logdet_bar: f64, n_lam: f64, delta_class: f64) -> f64 {
    rho / (4.0 * n_lam.sqrt()) * (logdet_bar - 2.0 * delta_class.ln()).max(0.0).sqrt()
}

/// Sub-Gaussian constant of a label that is wrong with probability δ.
pub fn identification_subgaussian_constant(delta_mmd: f64) -> f64 {
    (1.0 - 2.0 * delta_mmd) / (2.0 * ((1.0 - delta_mmd).ln() - delta_mmd.ln()))
}

/// Scaled-by-ρ identification term (the first summand, without the offset).
pub fn context_id_term(rho: f64, logdet_bar: f64, n_lam: f64, delta_mmd: f64) -> f64 {
    rho * identification_subgaussian_constant(delta_mmd)
        * (logdet_bar - 2.0 * delta_mmd.ln()).max(0.0).sqrt()
        / n_lam.sqrt()
}

/// Fitted classifier. Immutable; refits produce new models.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    inputs: Vec<Vec<f64>>,
    labels: Vec<ContextId>,
    provenance: Vec<Provenance>,
    /// Column `i` of the one-hot matrix corresponds to `contexts[i]`.
    contexts: Vec<ContextId>,
    labels_onehot: DMatrix<f64>,
    kernel: KernelSpec,
    lam: f64,
    gamma: f64,
    gram: GramMatrix,
    factor: SpdFactor,
    /// (K + nλI)⁻¹ · labels_onehot
    weights: DMatrix<f64>,
    logdet_bar: f64,
}

impl ClassifierModel {
    pub fn fit(
        data: &[LabeledObservation],
        kernel: KernelSpec,
        lam: f64,
        gamma: f64,
    ) -> Result<Self> {
        let contexts: BTreeSet<ContextId> = data.iter().map(|o| o.context).collect();
        Self::fit_with_contexts(data, contexts.into_iter().collect(), kernel, lam, gamma)
    }

    /// Fit with an explicit column order; every label must appear in `contexts`.
    pub fn fit_with_contexts(
        data: &[LabeledObservation],
        contexts: Vec<ContextId>,
        kernel: KernelSpec,
        lam: f64,
        gamma: f64,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::input("classifier needs at least one observation"));
        }
        if contexts.iter().collect::<BTreeSet<_>>().len() != contexts.len() {
            return Err(Error::input("duplicate context ids"));
        }
        kernel.validate()?;
        if !(lam > 0.0 && lam.is_finite()) {
            return Err(Error::input(format!("λ must be positive, got {lam}")));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::input(format!("Γ must be positive, got {gamma}")));
        }
        for o in data {
            if let Provenance::Identified { delta_mmd } = o.provenance {
                check_open_unit("delta_mmd", delta_mmd)?;
            }
            if o.y.iter().any(|v| !v.is_finite()) {
                return Err(Error::input("non-finite measurement"));
            }
        }
        let n = data.len();
        let inputs: Vec<Vec<f64>> = data.iter().map(|o| o.y.clone()).collect();
        let gram = gram(&kernel, &inputs)?;
        let labels: Vec<ContextId> = data.iter().map(|o| o.context).collect();
        let col_of = |c: ContextId| contexts.iter().position(|&x| x == c);
        let mut labels_onehot = DMatrix::zeros(n, contexts.len());
        for (j, &c) in labels.iter().enumerate() {
            let col = col_of(c).ok_or_else(|| Error::input(format!("unknown context {c}")))?;
            labels_onehot[(j, col)] = 1.0;
        }
        let n_lam = n as f64 * lam;
        let factor = SpdFactor::new(&gram.values, n_lam)?;
        let weights = factor.solve(&labels_onehot);
        let lam_bar = n_lam.max(1.0);
        let logdet_bar = SpdFactor::new(&gram.values, lam_bar)?.log_det();
        let gram = GramMatrix {
            jitter_added: factor.jitter(),
            ..gram
        };
        Ok(ClassifierModel {
            inputs,
            labels,
            provenance: data.iter().map(|o| o.provenance).collect(),
            contexts,
            labels_onehot,
            kernel,
            lam,
            gamma,
            gram,
            factor,
            weights,
            logdet_bar,
        })
    }

    pub fn n(&self) -> usize {
        self.inputs.len()
    }

    /// Number of contexts (columns of the label matrix).
    pub fn m(&self) -> usize {
        self.contexts.len()
    }

    pub fn contexts(&self) -> &[ContextId] {
        &self.contexts
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn lam(&self) -> f64 {
        self.lam
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn n_lam(&self) -> f64 {
        self.n() as f64 * self.lam
    }

    pub fn lam_bar(&self) -> f64 {
        self.n_lam().max(1.0)
    }

    pub fn logdet_bar(&self) -> f64 {
        self.logdet_bar
    }

    pub fn gram(&self) -> &GramMatrix {
        &self.gram
    }

    pub fn labels_onehot(&self) -> &DMatrix<f64> {
        &self.labels_onehot
    }

    pub fn observations(&self) -> Vec<LabeledObservation> {
        self.inputs
            .iter()
            .zip(&self.labels)
            .zip(&self.provenance)
            .map(|((y, &context), &provenance)| LabeledObservation {
                y: y.clone(),
                context,
                provenance,
            })
            .collect()
    }

    pub fn all_ground_truth(&self) -> bool {
        self.provenance.iter().all(Provenance::is_ground_truth)
    }

    fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    fn k_y(&self, y: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.input_dim(), y.len())?;
        self.kernel.cross(&self.inputs, y)
    }

    /// Raw CME estimates, one per context in [`Self::contexts`] order.
    pub fn predict_raw(&self, y: &[f64]) -> Result<DVector<f64>> {
        let k_y = self.k_y(y)?;
        Ok(self.weights.tr_mul(&k_y))
    }

    /// Raw estimates clipped to [0, 1] and renormalized to sum to one.
    pub fn predict_normalized(&self, y: &[f64]) -> Result<DVector<f64>> {
        Ok(normalize_probabilities(&self.predict_raw(y)?))
    }

    pub fn power_function(&self, y: &[f64]) -> Result<f64> {
        let k_y = self.k_y(y)?;
        Ok(self.power_from_k_y(y, &k_y))
    }

    fn power_from_k_y(&self, y: &[f64], k_y: &DVector<f64>) -> f64 {
        let kyy = self.kernel.eval_unchecked(y, y);
        (kyy - self.factor.quad_form(k_y)).max(0.0).sqrt()
    }

    pub fn bound_estimation(&self, y: &[f64]) -> Result<f64> {
        Ok(self.gamma.sqrt() * self.power_function(y)?)
    }

    pub fn bound_measurement(&self, y: &[f64], delta_class: f64) -> Result<f64> {
        check_open_unit("delta_class", delta_class)?;
        let rho = self.power_function(y)?;
        Ok(measurement_term(
            rho,
            self.logdet_bar,
            self.n_lam(),
            delta_class,
        ))
    }

    /// Identification term and its (as-printed) offset.
    pub fn bound_context_id(&self, y: &[f64], delta_mmd: f64) -> Result<(f64, f64)> {
        self.bound_context_id_with(y, delta_mmd, OffsetConvention::AsPrinted)
    }

    pub fn bound_context_id_with(
        &self,
        y: &[f64],
        delta_mmd: f64,
        convention: OffsetConvention,
    ) -> Result<(f64, f64)> {
        check_half_open(delta_mmd)?;
        let k_y = self.k_y(y)?;
        let rho = self.power_from_k_y(y, &k_y);
        Ok(self.context_id_parts(rho, &k_y, delta_mmd, convention))
    }

    fn context_id_parts(
        &self,
        rho: f64,
        k_y: &DVector<f64>,
        delta_mmd: f64,
        convention: OffsetConvention,
    ) -> (f64, f64) {
        let term = context_id_term(rho, self.logdet_bar, self.n_lam(), delta_mmd);
        let w = self.factor.solve_vec(k_y);
        let offset = match convention {
            OffsetConvention::AsPrinted => (1.0 - delta_mmd) * w.sum(),
            OffsetConvention::MismatchRate => {
                delta_mmd
                    * w.iter()
                        .zip(&self.provenance)
                        .filter(|(_, p)| !p.is_ground_truth())
                        .map(|(wj, _)| wj.abs())
                        .sum::<f64>()
            }
        };
        (term, offset)
    }

    /// Full bound with the as-printed identification offset.
    pub fn total_bound(
        &self,
        y: &[f64],
        delta_class: f64,
        delta_mmd: f64,
    ) -> Result<BoundBreakdown> {
        self.total_bound_with(y, delta_class, delta_mmd, OffsetConvention::AsPrinted)
    }

    /// Full bound. When every label is ground truth the identification
    /// term and offset are zero and the bound holds with `1 − δ_class`.
    pub fn total_bound_with(
        &self,
        y: &[f64],
        delta_class: f64,
        delta_mmd: f64,
        convention: OffsetConvention,
    ) -> Result<BoundBreakdown> {
        check_open_unit("delta_class", delta_class)?;
        let ground_truth = self.all_ground_truth();
        if !ground_truth {
            check_half_open(delta_mmd)?;
        }
        let k_y = self.k_y(y)?;
        let rho = self.power_from_k_y(y, &k_y);
        let term_estimation = self.gamma.sqrt() * rho;
        let term_measurement = measurement_term(rho, self.logdet_bar, self.n_lam(), delta_class);
        let (term_context_id, offset_context_id, confidence) = if ground_truth {
            (0.0, 0.0, 1.0 - delta_class)
        } else {
            let (t, o) = self.context_id_parts(rho, &k_y, delta_mmd, convention);
            (t, o, (1.0 - delta_mmd) * (1.0 - delta_class))
        };
        Ok(BoundBreakdown {
            rho,
            term_estimation,
            term_measurement,
            term_context_id,
            offset_context_id,
            total: term_estimation + term_measurement + term_context_id + offset_context_id,
            delta_class,
            delta_mmd,
            confidence,
        })
    }

    /// Lower confidence bounds `p̂_c − total` per context.
    pub fn lower_bounds(
        &self,
        y: &[f64],
        delta_class: f64,
        delta_mmd: f64,
        convention: OffsetConvention,
    ) -> Result<(DVector<f64>, BoundBreakdown)> {
        let raw = self.predict_raw(y)?;
        let bound = self.total_bound_with(y, delta_class, delta_mmd, convention)?;
        Ok((raw.add_scalar(-bound.total), bound))
    }

    pub fn decide(
        &self,
        y: &[f64],
        p_safe: f64,
        delta_class: f64,
        delta_mmd: f64,
    ) -> Result<ContextDecision> {
        self.decide_with(
            y,
            p_safe,
            delta_class,
            delta_mmd,
            OffsetConvention::AsPrinted,
        )
    }

    pub fn decide_with(
        &self,
        y: &[f64],
        p_safe: f64,
        delta_class: f64,
        delta_mmd: f64,
        convention: OffsetConvention,
    ) -> Result<ContextDecision> {
        check_open_unit("p_safe", p_safe)?;
        let (lower, _) = self.lower_bounds(y, delta_class, delta_mmd, convention)?;
        Ok(decide_from_lower_bounds(
            &self.contexts,
            lower.as_slice(),
            p_safe,
        ))
    }

    /// New model with one more context whose observations are `data`.
    pub fn add_context(&self, data: &[LabeledObservation]) -> Result<Self> {
        let Some(first) = data.first() else {
            return Err(Error::input("a new context needs at least one observation"));
        };
        let new_id = first.context;
        if data.iter().any(|o| o.context != new_id) {
            return Err(Error::input(
                "all observations of a new context must share its id",
            ));
        }
        if self.contexts.contains(&new_id) {
            return Err(Error::input(format!("context {new_id} already exists")));
        }
        let mut all = self.observations();
        all.extend_from_slice(data);
        let mut contexts = self.contexts.clone();
        contexts.push(new_id);
        Self::fit_with_contexts(&all, contexts, self.kernel, self.lam, self.gamma)
    }

    /// Refit on existing plus `data`; unseen context ids are appended as new columns.
    pub fn with_observations(&self, data: &[LabeledObservation]) -> Result<Self> {
        let mut all = self.observations();
        all.extend_from_slice(data);
        let mut contexts = self.contexts.clone();
        for o in data {
            if !contexts.contains(&o.context) {
                contexts.push(o.context);
            }
        }
        Self::fit_with_contexts(&all, contexts, self.kernel, self.lam, self.gamma)
    }

    /// Coefficients of the representer for context column `col`.
    pub fn representer_weights(&self, col: usize) -> DVector<f64> {
        self.weights.column(col).into_owned()
    }
}

fn check_half_open(delta_mmd: f64) -> Result<()> {
    if !(delta_mmd > 0.0 && delta_mmd < 0.5) {
        return Err(Error::input(format!(
            "delta_mmd must lie in (0, 1/2) for the identification term, got {delta_mmd}"
        )));
    }
    Ok(())
}

/// Clip to [0, 1] and renormalize; all-zero input maps to the uniform vector.
pub fn normalize_probabilities(raw: &DVector<f64>) -> DVector<f64> {
    let clipped = raw.map(|v| v.clamp(0.0, 1.0));
    let sum = clipped.sum();
    if sum > 0.0 {
        clipped / sum
    } else {
        DVector::from_element(raw.len(), 1.0 / raw.len() as f64)
    }
}

/// Gate on `lower > p_safe`; ties go to the larger bound, then the smaller id.
pub fn decide_from_lower_bounds(
    contexts: &[ContextId],
    lower: &[f64],
    p_safe: f64,
) -> ContextDecision {
    let mut best: Option<(ContextId, f64)> = None;
    for (&c, &lb) in contexts.iter().zip(lower) {
        best = match best {
            None => Some((c, lb)),
            Some((bc, blb)) if lb > blb || (lb == blb && c < bc) => Some((c, lb)),
            keep => keep,
        };
    }
    let (context, lower_bound) = best.expect("at least one context");
    if lower_bound > p_safe {
        ContextDecision::Confident {
            context,
            lower_bound,
        }
    } else {
        ContextDecision::Uncertain {
            best_context: context,
            best_lower_bound: lower_bound,
        }
    }
}

/// RKHS norm `√(αᵀKα)` of `Σ α_i k(y_i, ·)`.
pub fn estimate_rkhs_norm(alpha: &DVector<f64>, k: &GramMatrix) -> Result<f64> {
    check_dim(k.n(), alpha.len())?;
    Ok(alpha.dot(&(&k.values * alpha)).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn g11() -> KernelSpec {
        KernelSpec::gaussian(1.0, 1.0).unwrap()
    }

    fn single(lam: f64) -> ClassifierModel {
        ClassifierModel::fit(
            &[LabeledObservation::ground_truth(vec![0.0], 0)],
            g11(),
            lam,
            2.0,
        )
        .unwrap()
    }

    #[test]
    fn single_point_model() {
        let m = single(0.5);
        assert_eq!(m.gram().values, DMatrix::from_element(1, 1, 1.0));
        assert_relative_eq!(
            m.predict_raw(&[0.0]).unwrap()[0],
            2.0 / 3.0,
            epsilon = 1e-14
        );
        assert_relative_eq!(
            m.power_function(&[0.0]).unwrap(),
            (1.0f64 / 3.0).sqrt(),
            epsilon = 1e-14
        );
        assert_relative_eq!(m.power_function(&[0.0]).unwrap(), 0.5774, epsilon = 1e-4);
        // far away: K_y underflows to zero
        assert_eq!(m.predict_raw(&[1e3]).unwrap()[0], 0.0);
        assert_relative_eq!(m.power_function(&[1e3]).unwrap(), 1.0);
    }

    #[test]
    fn power_vanishes_as_regularization_vanishes() {
        let rho: Vec<f64> = [1e-2, 1e-4, 1e-8]
            .iter()
            .map(|&l| single(l).power_function(&[0.0]).unwrap())
            .collect();
        assert!(rho[0] > rho[1] && rho[1] > rho[2]);
        assert!(rho[2] < 1e-3);
    }

    #[test]
    fn empty_and_invalid_fits() {
        assert!(matches!(
            ClassifierModel::fit(&[], g11(), 0.1, 1.0),
            Err(Error::Input(_))
        ));
        let d = [LabeledObservation::ground_truth(vec![0.0], 0)];
        assert!(ClassifierModel::fit(&d, g11(), 0.0, 1.0).is_err());
        assert!(ClassifierModel::fit(&d, g11(), 0.1, -1.0).is_err());
        let mixed = [
            LabeledObservation::ground_truth(vec![0.0], 0),
            LabeledObservation::ground_truth(vec![0.0, 1.0], 1),
        ];
        assert!(matches!(
            ClassifierModel::fit(&mixed, g11(), 0.1, 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn conflicting_duplicates_average() {
        let d = [
            LabeledObservation::ground_truth(vec![0.0], 0),
            LabeledObservation::ground_truth(vec![0.0], 1),
        ];
        let m = ClassifierModel::fit(&d, g11(), 0.5, 1.0).unwrap();
        // (K + I)⁻¹ [1, 1]ᵀ = [1/3, 1/3] with K = 𝟏𝟏ᵀ
        let p = m.predict_raw(&[0.0]).unwrap();
        assert_relative_eq!(p[0], 1.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(p[1], 1.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn symmetric_placement_gives_equal_scores() {
        let d = [
            LabeledObservation::ground_truth(vec![-1.0], 0),
            LabeledObservation::ground_truth(vec![1.0], 1),
        ];
        let m = ClassifierModel::fit(&d, g11(), 0.01, 1.0).unwrap();
        let p = m.predict_raw(&[0.0]).unwrap();
        assert_relative_eq!(p[0], p[1], epsilon = 1e-14);
        assert!(p[0] > 0.0);
    }

    #[test]
    fn context_ids_are_remapped_to_columns() {
        let d = [
            LabeledObservation::ground_truth(vec![-3.0], 7),
            LabeledObservation::ground_truth(vec![3.0], 2),
        ];
        let m = ClassifierModel::fit(&d, g11(), 0.01, 1.0).unwrap();
        assert_eq!(m.contexts(), &[2, 7]);
        let p = m.predict_raw(&[3.0]).unwrap();
        assert!(p[0] > 0.9 && p[1].abs() < 1e-3);
        let dec = m
            .decide_with(&[3.0], 0.99, 0.1, 0.05, OffsetConvention::AsPrinted)
            .unwrap();
        assert!(matches!(
            dec,
            ContextDecision::Uncertain {
                best_context: 2,
                ..
            }
        ));
    }

    #[test]
    fn normalization_examples() {
        let n = normalize_probabilities(&DVector::from_vec(vec![0.6, 0.6]));
        assert_eq!(n.as_slice(), &[0.5, 0.5]);
        let n = normalize_probabilities(&DVector::from_vec(vec![-0.1, 0.55]));
        assert_eq!(n.as_slice(), &[0.0, 1.0]);
        let n = normalize_probabilities(&DVector::zeros(4));
        assert_eq!(n.as_slice(), &[0.25; 4]);
    }

    #[test]
    fn estimation_term_examples() {
        let m = single(0.5);
        let rho = m.power_function(&[0.0]).unwrap();
        assert_relative_eq!(
            m.bound_estimation(&[0.0]).unwrap(),
            2f64.sqrt() * rho,
            epsilon = 1e-15
        );
        assert_eq!(m.bound_estimation(&[1e3]).unwrap(), 2f64.sqrt());
    }

    #[test]
    fn measurement_term_examples() {
        // n = 1, λ = 1, K = [[1]]: λ̄ = 1, log det(K + I) = ln 2
        let m = single(1.0);
        assert_relative_eq!(m.logdet_bar(), 2f64.ln(), epsilon = 1e-15);
        let delta = (-1.0f64).exp();
        let v = m.bound_measurement(&[1e3], delta).unwrap();
        assert_relative_eq!(v, 0.25 * (2f64.ln() + 2.0).sqrt(), epsilon = 1e-14);
        assert_relative_eq!(v, 0.4102, epsilon = 1e-4);
        assert_eq!(measurement_term(0.0, 3.0, 1.0, 0.1), 0.0);
        assert!(measurement_term(1.0, 0.0, 1.0, 1.0 - 1e-12) < 1e-5);
        assert!(m.bound_measurement(&[0.0], 1.0).is_err());
        assert!(m.bound_measurement(&[0.0], 0.0).is_err());
    }

    #[test]
    fn context_id_term_examples() {
        // factor by factor for δ = 0.05, λ̄ = 1, K = [[1]], nλ = 1, ρ = 1
        let delta: f64 = 0.05;
        let root = (2f64.ln() - 2.0 * delta.ln()).sqrt();
        assert_relative_eq!(root, 2.585_46, epsilon = 1e-5);
        let denom = 2.0 * ((1.0 - delta).ln() - delta.ln());
        assert_relative_eq!(denom, 2.0 * 19f64.ln(), epsilon = 1e-14);
        let first = context_id_term(1.0, 2f64.ln(), 1.0, delta);
        assert_relative_eq!(first, 0.9 * root / denom, epsilon = 1e-15);
        assert_relative_eq!(first, 0.3951, epsilon = 1e-4);

        let d = [LabeledObservation::identified(vec![0.0], 0, delta)];
        let m = ClassifierModel::fit(&d, g11(), 1.0, 2.0).unwrap();
        let (t, offset) = m.bound_context_id(&[0.0], delta).unwrap();
        assert_relative_eq!(offset, 0.95 * 0.5, epsilon = 1e-15);
        let rho = (0.5f64).sqrt();
        assert_relative_eq!(t, rho * first, epsilon = 1e-14);

        let (t, o) = m.bound_context_id(&[1e3], delta).unwrap();
        assert_eq!((t, o), (first, 0.0));
        assert!(m.bound_context_id(&[0.0], 0.5).is_err());
    }

    #[test]
    fn ground_truth_labels_skip_identification_terms() {
        let m = single(0.5);
        let b = m.total_bound(&[0.3], 0.1, 0.05).unwrap();
        assert_eq!(b.term_context_id, 0.0);
        assert_eq!(b.offset_context_id, 0.0);
        assert_relative_eq!(b.confidence, 0.9);
        // δ_MMD is not validated when it plays no role
        assert!(m.total_bound(&[0.3], 0.1, 0.9).is_ok());
    }

    #[test]
    fn far_query_limits() {
        let d = [LabeledObservation::identified(vec![0.0], 0, 0.05)];
        let m = ClassifierModel::fit(&d, g11(), 1e-4, 2.0).unwrap();
        let b = m.total_bound(&[1e3], 0.1, 0.05).unwrap();
        assert_eq!(b.rho, 1.0);
        assert_eq!(b.term_estimation, 2f64.sqrt());
        assert_eq!(b.offset_context_id, 0.0);
        assert_relative_eq!(
            b.term_context_id,
            context_id_term(1.0, m.logdet_bar(), m.n_lam(), 0.05)
        );
        assert_relative_eq!(b.confidence, 0.95 * 0.9, epsilon = 1e-15);
    }

    #[test]
    fn decide_examples() {
        let ids = [0, 1];
        assert_eq!(
            decide_from_lower_bounds(&ids, &[0.85, -0.2], 0.8),
            ContextDecision::Confident {
                context: 0,
                lower_bound: 0.85
            }
        );
        assert_eq!(
            decide_from_lower_bounds(&ids, &[0.5, 0.7], 0.8),
            ContextDecision::Uncertain {
                best_context: 1,
                best_lower_bound: 0.7
            }
        );
        assert_eq!(
            decide_from_lower_bounds(&[0, 1, 2], &[0.1, 0.9, 0.9], 0.8),
            ContextDecision::Confident {
                context: 1,
                lower_bound: 0.9
            }
        );
        // exactly p_safe is not enough
        assert!(matches!(
            decide_from_lower_bounds(&ids, &[0.8, 0.0], 0.8),
            ContextDecision::Uncertain { .. }
        ));
    }

    fn bands(n_per: usize, provenance: Provenance) -> Vec<LabeledObservation> {
        (0..3)
            .flat_map(|c| {
                (0..n_per).map(move |i| LabeledObservation {
                    y: vec![c as f64 * 2.0 + 0.4 * i as f64 / n_per as f64],
                    context: c,
                    provenance,
                })
            })
            .collect()
    }

    #[test]
    fn as_printed_offset_blocks_confident_decisions() {
        let data = bands(60, Provenance::Identified { delta_mmd: 0.05 });
        let m = ClassifierModel::fit(&data, KernelSpec::gaussian(0.3, 1.0).unwrap(), 1e-4, 2.0)
            .unwrap();
        for q in [0.1, 2.2, 4.3] {
            let p = m.predict_raw(&[q]).unwrap();
            let (lower, b) = m
                .lower_bounds(&[q], 0.1, 0.05, OffsetConvention::AsPrinted)
                .unwrap();
            assert_relative_eq!(b.offset_context_id, 0.95 * p.sum(), epsilon = 1e-9);
            for c in 0..3 {
                assert!(lower[c] <= 0.05 * p[c] + 1e-9);
            }
            assert!(m
                .decide(&[q], 0.5, 0.1, 0.05)
                .unwrap()
                .confident_context()
                .is_none());
        }
    }

    #[test]
    fn mismatch_offset_scales_with_delta_and_ignores_ground_truth_rows() {
        let mut data = bands(20, Provenance::Identified { delta_mmd: 0.05 });
        let m = ClassifierModel::fit(&data, g11(), 1e-3, 2.0).unwrap();
        let (_, a) = m
            .bound_context_id_with(&[0.2], 0.05, OffsetConvention::MismatchRate)
            .unwrap();
        let (_, b) = m
            .bound_context_id_with(&[0.2], 0.1, OffsetConvention::MismatchRate)
            .unwrap();
        assert_relative_eq!(b, 2.0 * a, epsilon = 1e-12);
        for o in data.iter_mut() {
            if o.context == 0 {
                o.provenance = Provenance::GroundTruth;
            }
        }
        let mixed = ClassifierModel::fit(&data, g11(), 1e-3, 2.0).unwrap();
        let (_, c) = mixed
            .bound_context_id_with(&[0.2], 0.05, OffsetConvention::MismatchRate)
            .unwrap();
        assert!(c < a);
    }

    #[test]
    fn total_recomputes_from_fields() {
        let data = bands(4, Provenance::Identified { delta_mmd: 0.05 });
        let m = ClassifierModel::fit(&data, g11(), 1e-4, 2.0).unwrap();
        for conv in [OffsetConvention::AsPrinted, OffsetConvention::MismatchRate] {
            for q in [-1.0, 0.2, 1.7, 3.3, 9.0] {
                let b = m.total_bound_with(&[q], 0.05, 0.05, conv).unwrap();
                assert!((b.total - b.recompute_total()).abs() <= 1e-12 * b.total.max(1.0));
                let rho_part = b.rho
                    * (m.gamma().sqrt()
                        + measurement_term(1.0, m.logdet_bar(), m.n_lam(), 0.05)
                        + context_id_term(1.0, m.logdet_bar(), m.n_lam(), 0.05));
                assert!(
                    (b.total - (rho_part + b.offset_context_id)).abs() <= 1e-12 * b.total.max(1.0)
                );
            }
        }
    }

    #[test]
    fn add_context_widens_labels_and_matches_fresh_fit() {
        let data = bands(5, Provenance::GroundTruth);
        let two: Vec<_> = data.iter().filter(|o| o.context < 2).cloned().collect();
        let third: Vec<_> = data.iter().filter(|o| o.context == 2).cloned().collect();
        let base = ClassifierModel::fit(&two, g11(), 1e-3, 2.0).unwrap();
        assert_eq!(base.m(), 2);
        let grown = base.add_context(&third).unwrap();
        assert_eq!(grown.m(), 3);
        assert_eq!(grown.labels_onehot().ncols(), 3);
        for j in 0..two.len() {
            assert_eq!(grown.labels_onehot()[(j, 2)], 0.0);
        }
        for j in two.len()..data.len() {
            assert_eq!(grown.labels_onehot()[(j, 2)], 1.0);
        }
        let fresh = ClassifierModel::fit(&data, g11(), 1e-3, 2.0).unwrap();
        for q in [0.1, 1.0, 2.3, 4.1] {
            let a = grown.predict_raw(&[q]).unwrap();
            let b = fresh.predict_raw(&[q]).unwrap();
            assert!((a - b).amax() < 1e-12);
        }
        assert!(base.add_context(&[]).is_err());
        assert!(base.add_context(&two[..1]).is_err());
    }

    #[test]
    fn rkhs_norm_examples() {
        let k = GramMatrix::from_matrix(DMatrix::from_element(1, 1, 4.0)).unwrap();
        assert_eq!(estimate_rkhs_norm(&DVector::zeros(1), &k).unwrap(), 0.0);
        assert_eq!(
            estimate_rkhs_norm(&DVector::from_element(1, 1.0), &k).unwrap(),
            2.0
        );
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.7]).collect();
        let g = gram(&g11(), &pts).unwrap();
        let alpha = DVector::from_vec(vec![0.3, -1.0, 0.5, 2.0, -0.1]);
        let mut quad = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                quad += alpha[i] * alpha[j] * g.values[(i, j)];
            }
        }
        assert_relative_eq!(
            estimate_rkhs_norm(&alpha, &g).unwrap(),
            quad.sqrt(),
            epsilon = 1e-13
        );
    }

    /// Centered Bernoulli MGF against the Gaussian MGF with sub-Gaussian
    /// parameter 1/2 (variance proxy 1/4).
    #[test]
    fn centered_bernoulli_is_subgaussian_with_variance_proxy_quarter() {
        let mut violated_with_parameter_quarter = false;
        for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
            for i in 0..=400 {
                let s = -10.0 + 0.05 * i as f64;
                let mgf = p * (s * (1.0 - p)).exp() + (1.0 - p) * (-s * p).exp();
                assert!(
                    mgf <= (s * s * 0.25 / 2.0).exp() * (1.0 + 1e-12),
                    "p={p} s={s}"
                );
                if mgf > (s * s * 0.0625 / 2.0).exp() {
                    violated_with_parameter_quarter = true;
                }
            }
        }
        // reading 1/4 as the MGF exponent parameter itself does not hold
        assert!(violated_with_parameter_quarter);
    }

    proptest! {
        #[test]
        fn power_function_bounds_and_monotone_in_data(
            ys in prop::collection::vec(-4.0f64..4.0, 1..20),
            extra in -4.0f64..4.0, q in -6.0f64..6.0, lam in 1e-4f64..0.5
        ) {
            let kernel = KernelSpec::gaussian(0.8, 1.5).unwrap();
            let data: Vec<_> = ys.iter().enumerate()
                .map(|(i, &y)| LabeledObservation::ground_truth(vec![y], i % 2)).collect();
            let m = ClassifierModel::fit(&data, kernel, lam, 1.0).unwrap();
            let rho = m.power_function(&[q]).unwrap();
            prop_assert!(rho >= 0.0 && rho <= kernel.diag().sqrt() + 1e-12);
            // Adding a point with the regularizer nλ held fixed cannot raise ρ.
            let n_lam = m.n_lam();
            let mut more = data.clone();
            more.push(LabeledObservation::ground_truth(vec![extra], 0));
            let m2 = ClassifierModel::fit(&more, kernel, n_lam / more.len() as f64, 1.0).unwrap();
            prop_assert!(m2.power_function(&[q]).unwrap() <= rho + 1e-9);
        }

        #[test]
        fn normalized_predictions_are_distributions(raw in prop::collection::vec(-2.0f64..2.0, 1..6)) {
            let p = normalize_probabilities(&DVector::from_vec(raw));
            prop_assert!((p.sum() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn raising_p_safe_never_creates_confidence(
            ys in prop::collection::vec(-3.0f64..3.0, 2..15), q in -3.0f64..3.0,
            p1 in 0.01f64..0.99, p2 in 0.01f64..0.99
        ) {
            let data: Vec<_> = ys.iter()
                .map(|&y| LabeledObservation::ground_truth(vec![y], usize::from(y > 0.0))).collect();
            let m = ClassifierModel::fit(&data, KernelSpec::gaussian(0.5, 1.0).unwrap(), 1e-4, 0.1).unwrap();
            let (lo, hi) = if p1 < p2 { (p1, p2) } else { (p2, p1) };
            let at_hi = m.decide(&[q], hi, 0.5, 0.1).unwrap();
            let at_lo = m.decide(&[q], lo, 0.5, 0.1).unwrap();
            if at_hi.confident_context().is_some() {
                prop_assert_eq!(at_hi.confident_context(), at_lo.confident_context());
            }
        }
    }
}
