//! Run-time service-level tuning at mode-switch points.
//!
//! A tuner is asked for new LO service levels every time a HI task
//! overruns. Three strategies are provided:
//!
//! * [`UniformTuner`]: every LO task shares one level, lowered by
//!   `min(0, φ / ((1 − x)·u_LO^LO))` per switch.
//! * [`DropOffTuner`]: LO tasks are dropped to their mandatory level in
//!   ascending-utilization order until the required reduction is met. The
//!   choice is a binary search over precomputed prefix sums.
//! * [`StaticTuner`]: a baseline that, on the first overrun of a busy window,
//!   lowers every LO task to the level that would be needed if all
//!   compensation tasks overran.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{AnalysisContext, AnalysisError};
use crate::model::{McTaskSet, ModelError};
use crate::rational::Rational;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TuningError {
    #[error("task set has no LO utilization to tune")]
    NoLoTasks,
    #[error("required reduction {required} exceeds droppable utilization {available}")]
    InsufficientDroppable { required: Rational, available: Rational },
    #[error("uniform level {level} is below the mandatory level of `{task}`")]
    MandatoryViolated { task: String, level: Rational },
    #[error("assignment after switch of `{task}` violates the admissibility condition")]
    Inadmissible { task: String },
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl From<ModelError> for TuningError {
    fn from(e: ModelError) -> Self {
        TuningError::Analysis(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Uniform,
    Drop,
    Static,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::Uniform, StrategyKind::Drop, StrategyKind::Static];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Uniform => "uniform",
            StrategyKind::Drop => "drop",
            StrategyKind::Static => "static",
        }
    }

    /// Builds a fresh tuner for `set`.
    pub fn tuner(self, ctx: &AnalysisContext, set: &McTaskSet) -> Result<Box<dyn ServiceTuner>, TuningError> {
        Ok(match self {
            StrategyKind::Uniform => Box::new(UniformTuner::new(ctx, set)),
            StrategyKind::Drop => Box::new(DropOffTuner::new(ctx, set)),
            StrategyKind::Static => Box::new(StaticTuner::new(ctx, set)),
        })
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(StrategyKind::Uniform),
            "drop" | "dropping-off" | "drop-off" => Ok(StrategyKind::Drop),
            "static" | "imc" => Ok(StrategyKind::Static),
            other => Err(format!("unknown strategy `{other}` (expected uniform, drop or static)")),
        }
    }
}

/// Which condition a tuner's assignments are certified against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admissibility {
    /// Each switch individually: `u_LO^k ≤ u_LO^{k−1} + φ/(1−x)`.
    PerSwitch,
    /// Cumulatively: `u_LO^k` within the closed-form bound of the switched set.
    ClosedForm,
}

/// A service-level change produced at a mode switch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LevelUpdate {
    Unchanged,
    /// Every LO task gets this level.
    Uniform(Rational),
    /// `(LO position, new level)` pairs; untouched tasks keep their level.
    Lowered(Vec<(usize, Rational)>),
}

/// A run-time tuning strategy. Called after the switching task has been
/// recorded in `state`, so `state.k()` is the new switch count.
pub trait ServiceTuner: Send {
    fn kind(&self) -> StrategyKind;

    fn admissibility(&self) -> Admissibility {
        Admissibility::PerSwitch
    }

    fn on_switch(&mut self, state: &ModeState, overrun: usize) -> Result<LevelUpdate, TuningError>;

    /// The system went idle and returned to LO mode.
    fn on_switch_back(&mut self) {}
}

/// The `k`-level HI mode: which HI tasks switched, and current LO levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeState {
    switched: Vec<(usize, Rational)>,
    switched_flag: Vec<bool>,
    z: Vec<Rational>,
    u_lo_k: Rational,
}

impl ModeState {
    /// LO mode: `k = 0`, all levels 1.
    pub fn initial(set: &McTaskSet) -> Self {
        ModeState {
            switched: Vec::new(),
            switched_flag: vec![false; set.len()],
            z: vec![Rational::one(); set.lo_indices().len()],
            u_lo_k: set.u_lo_lo().clone(),
        }
    }

    pub fn k(&self) -> usize {
        self.switched.len()
    }

    /// `(task index, switch time)` in switch order.
    pub fn switched(&self) -> &[(usize, Rational)] {
        &self.switched
    }

    pub fn switched_indices(&self) -> Vec<usize> {
        self.switched.iter().map(|(i, _)| *i).collect()
    }

    pub fn has_switched(&self, task: usize) -> bool {
        self.switched_flag[task]
    }

    /// Levels, positional over [`McTaskSet::lo_indices`].
    pub fn z(&self) -> &[Rational] {
        &self.z
    }

    pub fn u_lo_k(&self) -> &Rational {
        &self.u_lo_k
    }

    pub fn record_switch(&mut self, task: usize, time: Rational) {
        assert!(!self.switched_flag[task], "a task switches at most once per busy window");
        self.switched_flag[task] = true;
        self.switched.push((task, time));
    }

    pub fn switch_back(&mut self, set: &McTaskSet) {
        for (i, _) in self.switched.drain(..) {
            self.switched_flag[i] = false;
        }
        for z in &mut self.z {
            *z = Rational::one();
        }
        self.u_lo_k = set.u_lo_lo().clone();
    }

    /// Applies `update`, returning `(LO position, previous level)` for every
    /// level that changed.
    pub fn apply(&mut self, set: &McTaskSet, update: &LevelUpdate) -> Vec<(usize, Rational)> {
        match update {
            LevelUpdate::Unchanged => Vec::new(),
            LevelUpdate::Uniform(level) => {
                let mut changed = Vec::new();
                for (pos, z) in self.z.iter_mut().enumerate() {
                    if z != level {
                        changed.push((pos, std::mem::replace(z, level.clone())));
                    }
                }
                self.u_lo_k = level * set.u_lo_lo();
                changed
            }
            LevelUpdate::Lowered(pairs) => {
                let lo = set.lo_indices();
                let mut changed = Vec::with_capacity(pairs.len());
                for (pos, level) in pairs {
                    if self.z[*pos] != *level {
                        let u = set.task(lo[*pos]).u_lo();
                        self.u_lo_k += (level - &self.z[*pos]) * u;
                        changed.push((*pos, std::mem::replace(&mut self.z[*pos], level.clone())));
                    }
                }
                changed
            }
        }
    }

    /// Checks that moving from `prev` to `self` after the switch of
    /// `overrun` is admissible under `rule`. Linear in the number of LO tasks.
    pub fn certify(
        &self,
        prev: &ModeState,
        ctx: &AnalysisContext,
        set: &McTaskSet,
        overrun: usize,
        rule: Admissibility,
    ) -> Result<bool, TuningError> {
        match rule {
            Admissibility::PerSwitch => Ok(ctx.validate_service_assignment(set, &prev.z, &self.z, overrun)?),
            Admissibility::ClosedForm => {
                let nonincreasing = prev.z.iter().zip(&self.z).all(|(a, b)| b <= a);
                Ok(nonincreasing && ctx.closed_form_admissible(set, &self.switched_indices(), &self.z)?)
            }
        }
    }
}

fn lo_utilization_or_err(set: &McTaskSet) -> Result<&Rational, TuningError> {
    if set.u_lo_lo().is_positive() {
        Ok(set.u_lo_lo())
    } else {
        Err(TuningError::NoLoTasks)
    }
}

/// Next uniform level: `max(0, z_prev + min(0, φ / ((1−x)·u_LO^LO)))`.
pub fn uniform_next_level(
    ctx: &AnalysisContext,
    set: &McTaskSet,
    z_prev: &Rational,
    overrun: usize,
) -> Result<Rational, TuningError> {
    let u_lo = lo_utilization_or_err(set)?;
    let phi = ctx.per_switch_reduction_bound(set, overrun)?;
    let step = (phi / u_lo).min(Rational::zero());
    Ok((z_prev + step).max(Rational::zero()))
}

/// Worst-case uniform level of the static baseline,
/// `clamp(1 + Σ_{compensation} φ / ((1−x)·u_LO^LO), 0, 1)`.
pub fn static_degradation_level(ctx: &AnalysisContext, set: &McTaskSet) -> Result<Rational, TuningError> {
    let u_lo = lo_utilization_or_err(set)?;
    let sum: Rational = ctx.compensation_set().iter().map(|&i| ctx.phi(i).unwrap()).sum();
    let level = Rational::one() + sum / (ctx.one_minus_x() * u_lo);
    Ok(level.clamp(Rational::zero(), Rational::one()))
}

/// Reduction of `u_LO` needed when `overrun` switches: `max(0, −φ/(1−x))`.
pub fn required_reduction(ctx: &AnalysisContext, set: &McTaskSet, overrun: usize) -> Result<Rational, TuningError> {
    let delta = ctx.per_switch_reduction_bound(set, overrun)?;
    Ok((-delta).max(Rational::zero()))
}

/// The off-line table of LO tasks in ascending utilization (ties by id),
/// with prefix sums of droppable utilization `(1 − z^man)·u^LO`.
#[derive(Debug, Clone)]
pub struct DropOffTable {
    order: Vec<usize>,
    prefix: Vec<Rational>,
}

impl DropOffTable {
    pub fn build(set: &McTaskSet) -> Self {
        let lo = set.lo_indices();
        let utils: Vec<Rational> = lo.iter().map(|&i| set.task(i).u_lo()).collect();
        let mut order: Vec<usize> = (0..lo.len()).collect();
        order.sort_by(|&a, &b| match utils[a].cmp(&utils[b]) {
            Ordering::Equal => set.task(lo[a]).id.cmp(&set.task(lo[b]).id),
            o => o,
        });
        let mut prefix = Vec::with_capacity(order.len() + 1);
        let mut acc = Rational::zero();
        prefix.push(acc.clone());
        for &pos in &order {
            let floor = &set.task(lo[pos]).z_mandatory;
            acc += (Rational::one() - floor) * &utils[pos];
            prefix.push(acc.clone());
        }
        DropOffTable { order, prefix }
    }

    /// LO positions in drop order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Given that the first `dropped` table entries are already dropped,
    /// returns the end of the shortest further prefix whose droppable
    /// utilization reaches `required`. Binary search; `O(log n)` comparisons.
    pub fn select(&self, dropped: usize, required: &Rational) -> Result<usize, TuningError> {
        if !required.is_positive() {
            return Ok(dropped);
        }
        let target = &self.prefix[dropped] + required;
        let total = self.prefix.last().expect("prefix has a leading zero");
        if *total < target {
            return Err(TuningError::InsufficientDroppable {
                required: required.clone(),
                available: total - &self.prefix[dropped],
            });
        }
        let offset = self.prefix[dropped..].partition_point(|p| *p < target);
        Ok(dropped + offset)
    }
}

/// Reduction still needed after `state`'s latest switch: how far `u_LO^k`
/// sits above the closed-form bound of the switched set. Equals
/// [`required_reduction`] while earlier switches shed exactly their share.
pub fn outstanding_reduction(ctx: &AnalysisContext, set: &McTaskSet, state: &ModeState) -> Result<Rational, TuningError> {
    let bound = ctx.direct_utilization_bound(set, &state.switched_indices())?;
    Ok((state.u_lo_k() - bound).max(Rational::zero()))
}

/// Dropping-off over an arbitrary current state that already records the
/// switch of `overrun`: drops the shortest table prefix whose current
/// droppable utilization `(z − z^man)·u^LO` covers the outstanding
/// reduction. Returns the complete new level map.
pub fn dropping_off_next(
    ctx: &AnalysisContext,
    set: &McTaskSet,
    state: &ModeState,
    overrun: usize,
    table: &DropOffTable,
) -> Result<Vec<Rational>, TuningError> {
    assert!(state.has_switched(overrun), "state must include the overrun");
    let required = outstanding_reduction(ctx, set, state)?;
    let mut z = state.z().to_vec();
    if !required.is_positive() {
        return Ok(z);
    }
    let lo = set.lo_indices();
    let mut prefix = Vec::with_capacity(table.len() + 1);
    let mut acc = Rational::zero();
    prefix.push(acc.clone());
    for &pos in table.order() {
        let task = set.task(lo[pos]);
        let mass = (&z[pos] - &task.z_mandatory).max(Rational::zero()) * task.u_lo();
        acc += mass;
        prefix.push(acc.clone());
    }
    if acc < required {
        return Err(TuningError::InsufficientDroppable { required, available: acc });
    }
    let end = prefix.partition_point(|p| *p < required);
    for &pos in &table.order()[..end] {
        let floor = &set.task(lo[pos]).z_mandatory;
        if z[pos] > *floor {
            z[pos] = floor.clone();
        }
    }
    Ok(z)
}

/// Uniform tuning with per-task steps precomputed off-line; `O(1)` per switch.
#[derive(Debug, Clone)]
pub struct UniformTuner {
    /// `min(0, φ/((1−x)·u_LO^LO))` per task index; `None` for LO tasks.
    steps: Vec<Option<Rational>>,
    level: Rational,
    max_mandatory: (Rational, String),
}

impl UniformTuner {
    pub fn new(ctx: &AnalysisContext, set: &McTaskSet) -> Self {
        let u_lo = set.u_lo_lo();
        let steps = (0..set.len())
            .map(|i| {
                let phi = ctx.phi(i)?;
                if !u_lo.is_positive() {
                    return Some(Rational::zero());
                }
                Some((phi / (ctx.one_minus_x() * u_lo)).min(Rational::zero()))
            })
            .collect();
        let max_mandatory = set
            .lo_indices()
            .iter()
            .map(|&i| (set.task(i).z_mandatory.clone(), set.task(i).id.clone()))
            .max_by(|a, b| a.0.cmp(&b.0))
            .unwrap_or((Rational::zero(), String::new()));
        UniformTuner { steps, level: Rational::one(), max_mandatory }
    }

    pub fn level(&self) -> &Rational {
        &self.level
    }
}

impl ServiceTuner for UniformTuner {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Uniform
    }

    fn on_switch(&mut self, _state: &ModeState, overrun: usize) -> Result<LevelUpdate, TuningError> {
        let step = self.steps[overrun].as_ref().expect("overrun task is HI");
        if step.is_zero() {
            return Ok(LevelUpdate::Unchanged);
        }
        let next = (&self.level + step).max(Rational::zero());
        if next < self.max_mandatory.0 {
            return Err(TuningError::MandatoryViolated { task: self.max_mandatory.1.clone(), level: next });
        }
        self.level = next.clone();
        Ok(LevelUpdate::Uniform(next))
    }

    fn on_switch_back(&mut self) {
        self.level = Rational::one();
    }
}

/// Dropping-off with a persistent cursor into the off-line table.
///
/// Dropping whole tasks usually sheds more than one switch requires; the
/// surplus is credited to later switches by sizing each reduction against
/// the closed-form bound of the switched set, which is also what the
/// assignments are certified against.
#[derive(Debug, Clone)]
pub struct DropOffTuner {
    table: DropOffTable,
    /// `min(0, φ/(1−x))` per task index; `None` for LO tasks.
    deltas: Vec<Option<Rational>>,
    floors: Vec<Rational>,
    initial_bound: Rational,
    bound: Rational,
    dropped: usize,
}

impl DropOffTuner {
    pub fn new(ctx: &AnalysisContext, set: &McTaskSet) -> Self {
        let deltas = (0..set.len())
            .map(|i| ctx.phi(i).map(|phi| (phi / ctx.one_minus_x()).min(Rational::zero())))
            .collect();
        let floors = set.lo_indices().iter().map(|&i| set.task(i).z_mandatory.clone()).collect();
        DropOffTuner {
            table: DropOffTable::build(set),
            deltas,
            floors,
            initial_bound: set.u_lo_lo().clone(),
            bound: set.u_lo_lo().clone(),
            dropped: 0,
        }
    }

    pub fn table(&self) -> &DropOffTable {
        &self.table
    }

    /// Number of table entries dropped in the current busy window.
    pub fn dropped(&self) -> usize {
        self.dropped
    }
}

impl ServiceTuner for DropOffTuner {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Drop
    }

    fn admissibility(&self) -> Admissibility {
        Admissibility::ClosedForm
    }

    fn on_switch(&mut self, state: &ModeState, overrun: usize) -> Result<LevelUpdate, TuningError> {
        self.bound += self.deltas[overrun].as_ref().expect("overrun task is HI");
        let required = (state.u_lo_k() - &self.bound).max(Rational::zero());
        let end = self.table.select(self.dropped, &required)?;
        if end == self.dropped {
            return Ok(LevelUpdate::Unchanged);
        }
        let pairs = self.table.order[self.dropped..end]
            .iter()
            .map(|&pos| (pos, self.floors[pos].clone()))
            .collect();
        self.dropped = end;
        Ok(LevelUpdate::Lowered(pairs))
    }

    fn on_switch_back(&mut self) {
        self.dropped = 0;
        self.bound = self.initial_bound.clone();
    }
}

/// Static-degradation baseline: one drop to the worst-case level per busy
/// window.
#[derive(Debug, Clone)]
pub struct StaticTuner {
    level: Option<Rational>,
}

impl StaticTuner {
    pub fn new(ctx: &AnalysisContext, set: &McTaskSet) -> Self {
        StaticTuner { level: static_degradation_level(ctx, set).ok() }
    }
}

impl ServiceTuner for StaticTuner {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Static
    }

    fn admissibility(&self) -> Admissibility {
        Admissibility::ClosedForm
    }

    fn on_switch(&mut self, state: &ModeState, _overrun: usize) -> Result<LevelUpdate, TuningError> {
        match &self.level {
            Some(level) if state.k() == 1 && *level < Rational::one() => Ok(LevelUpdate::Uniform(level.clone())),
            _ => Ok(LevelUpdate::Unchanged),
        }
    }
}
