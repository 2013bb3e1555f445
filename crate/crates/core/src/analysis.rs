//! Off-line schedulability analysis for FMC task sets under EDF-VD.
//!
//! The virtual-deadline factor is fixed at `x = u_HI^LO / (1 − u_LO^LO)`,
//! which saturates the LO-mode utilization test. Every HI task gets a
//! discriminant
//!
//! ```text
//! φ(τ) = (u_τ^LO / u_HI^LO)(1 − u_LO^LO) − u_τ^HI
//! ```
//!
//! Tasks with `φ > 0` are *margin* tasks: their overrun is absorbed by slack.
//! The rest are *compensation* tasks and force the LO utilization down by
//! `φ / (1 − x)` when they switch. Because each switch contributes an
//! independent term, the admissible LO utilization after any set of switches
//! has a closed form that does not depend on the switch order.
//!
//! All comparisons are exact.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::model::{McTaskSet, ModelError};
use crate::rational::Rational;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnalysisError {
    #[error("task set has no HI tasks")]
    NoHiTasks,
    #[error("LO-mode utilization u_LO^LO = {0} is not below 1")]
    InfeasibleLoMode(Rational),
    #[error("virtual-deadline factor x = {0} is outside (0, 1)")]
    FactorOutOfRange(Rational),
    #[error("LO-mode test fails at x = {0}")]
    LoModeTestFailed(Rational),
    #[error("service map has {got} entries, expected one per LO task ({expected})")]
    ServiceMapSize { expected: usize, got: usize },
    #[error("service map is missing LO task `{0}`")]
    MissingServiceLevel(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `x = u_HI^LO / (1 − u_LO^LO)`.
pub fn compute_x(set: &McTaskSet) -> Result<Rational, AnalysisError> {
    if set.hi_indices().is_empty() {
        return Err(AnalysisError::NoHiTasks);
    }
    let one = Rational::one();
    if *set.u_lo_lo() >= one {
        return Err(AnalysisError::InfeasibleLoMode(set.u_lo_lo().clone()));
    }
    Ok(set.u_hi_lo() / (one - set.u_lo_lo()))
}

/// `u_LO^LO + u_HI^LO / x ≤ 1`.
pub fn lo_mode_test(set: &McTaskSet, x: &Rational) -> bool {
    if !x.is_positive() {
        return false;
    }
    set.u_lo_lo() + set.u_hi_lo() / x <= Rational::one()
}

/// Classic EDF-VD acceptance (baseline): the prescribed `x` satisfies
/// `x·u_LO^LO + u_HI^HI ≤ 1`, or plain worst-case EDF already fits.
pub fn classic_edfvd_test(set: &McTaskSet) -> bool {
    let one = Rational::one();
    if worst_case_edf_fits(set) {
        return true;
    }
    if *set.u_lo_lo() >= one {
        return false;
    }
    let x = set.u_hi_lo() / (&one - set.u_lo_lo());
    if x >= one {
        return false;
    }
    &x * set.u_lo_lo() + set.u_hi_hi() <= one
}

/// `u_LO^LO + u_HI^HI ≤ 1`: worst-case reservation under plain EDF suffices.
pub fn worst_case_edf_fits(set: &McTaskSet) -> bool {
    set.u_lo_lo() + set.u_hi_hi() <= Rational::one()
}

/// Off-line analysis state for one task set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalysisContext {
    x: Rational,
    one_minus_x: Rational,
    /// Indexed by task position; `None` for LO tasks.
    phi: Vec<Option<Rational>>,
    margin: Vec<usize>,
    compensation: Vec<usize>,
    u_lo_man: Rational,
}

impl AnalysisContext {
    /// Computes `x` and builds the context in one step.
    pub fn for_set(set: &McTaskSet) -> Result<Self, AnalysisError> {
        let x = compute_x(set)?;
        build_context(set, x)
    }

    pub fn x(&self) -> &Rational {
        &self.x
    }

    pub fn one_minus_x(&self) -> &Rational {
        &self.one_minus_x
    }

    /// `φ` of the task at `index`, or `None` for a LO task.
    pub fn phi(&self, index: usize) -> Option<&Rational> {
        self.phi.get(index).and_then(Option::as_ref)
    }

    pub fn phi_map(&self, set: &McTaskSet) -> BTreeMap<String, Rational> {
        set.hi_indices()
            .iter()
            .map(|&i| (set.task(i).id.clone(), self.phi[i].clone().expect("HI task has φ")))
            .collect()
    }

    /// HI task indices with `φ > 0`.
    pub fn margin_set(&self) -> &[usize] {
        &self.margin
    }

    /// HI task indices with `φ ≤ 0`.
    pub fn compensation_set(&self) -> &[usize] {
        &self.compensation
    }

    pub fn is_compensation(&self, index: usize) -> bool {
        matches!(self.phi(index), Some(p) if !p.is_positive())
    }

    pub fn u_lo_man(&self) -> &Rational {
        &self.u_lo_man
    }

    /// Overrides the mandatory utilization taken from the task set.
    pub fn with_mandatory_utilization(mut self, u_lo_man: Rational) -> Self {
        self.u_lo_man = u_lo_man;
        self
    }

    fn hi_phi(&self, set: &McTaskSet, index: usize) -> Result<&Rational, AnalysisError> {
        if index >= set.len() {
            return Err(ModelError::UnknownTask(format!("#{index}")).into());
        }
        self.phi(index)
            .ok_or_else(|| ModelError::NotHi(set.task(index).id.clone()).into())
    }

    /// `(1−x)(u_LO^LO − u_LO^man) + Σ_{compensation} φ ≥ 0`.
    pub fn feasibility_margin(&self, set: &McTaskSet) -> Rational {
        let sum: Rational = self.compensation.iter().map(|&i| self.phi[i].as_ref().unwrap()).sum();
        &self.one_minus_x * (set.u_lo_lo() - &self.u_lo_man) + sum
    }

    pub fn feasibility_test(&self, set: &McTaskSet) -> bool {
        !self.feasibility_margin(set).is_negative()
    }

    /// Maximum admissible `u_LO^k` once exactly the tasks in `switched`
    /// (indices) have overrun.
    pub fn direct_utilization_bound(&self, set: &McTaskSet, switched: &[usize]) -> Result<Rational, AnalysisError> {
        let mut sum = Rational::zero();
        for &i in switched {
            let phi = self.hi_phi(set, i)?;
            if !phi.is_positive() {
                sum += phi;
            }
        }
        Ok(set.u_lo_lo() + sum / &self.one_minus_x)
    }

    /// [`Self::direct_utilization_bound`] addressed by task id.
    pub fn direct_utilization_bound_by_id<'a, I>(&self, set: &McTaskSet, switched: I) -> Result<Rational, AnalysisError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let idx = switched.into_iter().map(|id| set.require(id)).collect::<Result<Vec<_>, _>>()?;
        self.direct_utilization_bound(set, &idx)
    }

    /// The smallest direct bound over all switched sets of size `k`.
    pub fn worst_case_bound(&self, set: &McTaskSet, k: usize) -> Rational {
        let mut phis: Vec<&Rational> = self.compensation.iter().map(|&i| self.phi[i].as_ref().unwrap()).collect();
        phis.sort();
        let sum: Rational = phis.into_iter().take(k).sum();
        set.u_lo_lo() + sum / &self.one_minus_x
    }

    /// `δ = φ(τ) / (1 − x)`: the admissible change of `u_LO` at a switch of
    /// `τ`. Positive for margin tasks.
    pub fn per_switch_reduction_bound(&self, set: &McTaskSet, overrun: usize) -> Result<Rational, AnalysisError> {
        Ok(self.hi_phi(set, overrun)? / &self.one_minus_x)
    }

    /// Checks a proposed service-level update at one switch:
    /// levels never rise, stay at or above their mandatory floor, and the new
    /// LO utilization is within `u_LO^{k−1} + δ`.
    ///
    /// Both level maps are positional over [`McTaskSet::lo_indices`].
    pub fn validate_service_assignment(
        &self,
        set: &McTaskSet,
        prev_z: &[Rational],
        new_z: &[Rational],
        overrun: usize,
    ) -> Result<bool, AnalysisError> {
        let expected = set.lo_indices().len();
        for got in [prev_z.len(), new_z.len()] {
            if got != expected {
                return Err(AnalysisError::ServiceMapSize { expected, got });
            }
        }
        let delta = self.per_switch_reduction_bound(set, overrun)?;
        let mut u_prev = Rational::zero();
        let mut u_new = Rational::zero();
        for (pos, &ti) in set.lo_indices().iter().enumerate() {
            let task = set.task(ti);
            if new_z[pos] > prev_z[pos] || new_z[pos] < task.z_mandatory {
                return Ok(false);
            }
            let u = task.u_lo();
            u_prev += &prev_z[pos] * &u;
            u_new += &new_z[pos] * &u;
        }
        Ok(u_new <= u_prev + delta)
    }

    /// [`Self::validate_service_assignment`] over id-keyed maps.
    pub fn validate_service_assignment_by_id(
        &self,
        set: &McTaskSet,
        prev_z: &BTreeMap<String, Rational>,
        new_z: &BTreeMap<String, Rational>,
        overrun: &str,
    ) -> Result<bool, AnalysisError> {
        let prev = positional(set, prev_z)?;
        let new = positional(set, new_z)?;
        let overrun = set.require(overrun)?;
        self.validate_service_assignment(set, &prev, &new, overrun)
    }

    /// Cumulative admissibility: levels at or above their floors and
    /// `u_LO^k` within the closed-form bound for `switched`.
    pub fn closed_form_admissible(&self, set: &McTaskSet, switched: &[usize], z: &[Rational]) -> Result<bool, AnalysisError> {
        let bound = self.direct_utilization_bound(set, switched)?;
        let mut u = Rational::zero();
        for (pos, &ti) in set.lo_indices().iter().enumerate() {
            let task = set.task(ti);
            if z[pos] < task.z_mandatory {
                return Ok(false);
            }
            u += &z[pos] * task.u_lo();
        }
        Ok(u <= bound)
    }
}

fn positional(set: &McTaskSet, map: &BTreeMap<String, Rational>) -> Result<Vec<Rational>, AnalysisError> {
    if map.len() != set.lo_indices().len() {
        return Err(AnalysisError::ServiceMapSize { expected: set.lo_indices().len(), got: map.len() });
    }
    set.lo_indices()
        .iter()
        .map(|&i| {
            let id = &set.task(i).id;
            map.get(id).cloned().ok_or_else(|| AnalysisError::MissingServiceLevel(id.clone()))
        })
        .collect()
}

/// Builds the discriminants and the margin/compensation partition at `x`.
pub fn build_context(set: &McTaskSet, x: Rational) -> Result<AnalysisContext, AnalysisError> {
    if set.hi_indices().is_empty() {
        return Err(AnalysisError::NoHiTasks);
    }
    let one = Rational::one();
    if !x.is_positive() || x >= one {
        return Err(AnalysisError::FactorOutOfRange(x));
    }
    if !lo_mode_test(set, &x) {
        return Err(AnalysisError::LoModeTestFailed(x));
    }
    let slack = &one - set.u_lo_lo();
    let mut phi = vec![None; set.len()];
    let mut margin = Vec::new();
    let mut compensation = Vec::new();
    for &i in set.hi_indices() {
        let t = set.task(i);
        let p = t.u_lo() / set.u_hi_lo() * &slack - t.u_hi();
        if p.is_positive() {
            margin.push(i);
        } else {
            compensation.push(i);
        }
        phi[i] = Some(p);
    }
    Ok(AnalysisContext {
        one_minus_x: &one - &x,
        x,
        phi,
        margin,
        compensation,
        u_lo_man: set.u_lo_man().clone(),
    })
}

/// Serializable summary of the off-line analysis.
#[derive(Debug, Clone, Serialize)]
pub struct AnalysisSummary {
    pub u_lo_lo: Rational,
    pub u_hi_lo: Rational,
    pub u_hi_hi: Rational,
    pub u_lo_man: Rational,
    pub x: Option<Rational>,
    pub phi: BTreeMap<String, Rational>,
    pub margin_set: Vec<String>,
    pub compensation_set: Vec<String>,
    pub lo_mode_test: bool,
    pub feasibility_margin: Option<Rational>,
    pub feasibility_test: bool,
    pub classic_edfvd_test: bool,
    pub worst_case_edf_fits: bool,
    /// Worst-case admissible `u_LO^k` for `k = 0..=|HI|`.
    pub direct_bounds: Vec<Rational>,
    pub error: Option<String>,
}

impl AnalysisSummary {
    pub fn schedulable(&self) -> bool {
        self.lo_mode_test && self.feasibility_test
    }
}

/// Runs every off-line test; `u_lo_man` overrides the set's mandatory
/// utilization when given.
pub fn analyze(set: &McTaskSet, u_lo_man: Option<Rational>) -> AnalysisSummary {
    let ids = |v: &[usize]| v.iter().map(|&i| set.task(i).id.clone()).collect::<Vec<_>>();
    let mut summary = AnalysisSummary {
        u_lo_lo: set.u_lo_lo().clone(),
        u_hi_lo: set.u_hi_lo().clone(),
        u_hi_hi: set.u_hi_hi().clone(),
        u_lo_man: u_lo_man.clone().unwrap_or_else(|| set.u_lo_man().clone()),
        x: None,
        phi: BTreeMap::new(),
        margin_set: Vec::new(),
        compensation_set: Vec::new(),
        lo_mode_test: false,
        feasibility_margin: None,
        feasibility_test: false,
        classic_edfvd_test: classic_edfvd_test(set),
        worst_case_edf_fits: worst_case_edf_fits(set),
        direct_bounds: Vec::new(),
        error: None,
    };
    let x = match compute_x(set) {
        Ok(x) => x,
        Err(e) => {
            summary.error = Some(e.to_string());
            return summary;
        }
    };
    summary.lo_mode_test = lo_mode_test(set, &x);
    summary.x = Some(x.clone());
    let ctx = match build_context(set, x) {
        Ok(ctx) => ctx,
        Err(e) => {
            summary.lo_mode_test = false;
            summary.error = Some(e.to_string());
            return summary;
        }
    };
    let ctx = match u_lo_man {
        Some(u) => ctx.with_mandatory_utilization(u),
        None => ctx,
    };
    summary.phi = ctx.phi_map(set);
    summary.margin_set = ids(ctx.margin_set());
    summary.compensation_set = ids(ctx.compensation_set());
    summary.feasibility_margin = Some(ctx.feasibility_margin(set));
    summary.feasibility_test = ctx.feasibility_test(set);
    summary.direct_bounds = (0..=set.hi_indices().len()).map(|k| ctx.worst_case_bound(set, k)).collect();
    summary
}
