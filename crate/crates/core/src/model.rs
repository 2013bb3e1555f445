//! The mixed-criticality sporadic task model and its utilization aggregates.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::rational::Rational;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Criticality {
    #[serde(rename = "LO")]
    Lo,
    #[serde(rename = "HI")]
    Hi,
}

impl fmt::Display for Criticality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criticality::Lo => "LO",
            Criticality::Hi => "HI",
        })
    }
}

/// An implicit-deadline sporadic task: the period doubles as the relative
/// deadline and the minimum inter-arrival time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McTask {
    pub id: String,
    pub period: Rational,
    pub criticality: Criticality,
    pub wcet_lo: Rational,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wcet_hi: Option<Rational>,
    /// Mandatory service level; meaningful for LO tasks only.
    #[serde(default, skip_serializing_if = "Rational::is_zero")]
    pub z_mandatory: Rational,
}

impl McTask {
    pub fn hi(id: impl Into<String>, period: impl Into<Rational>, wcet_lo: impl Into<Rational>, wcet_hi: impl Into<Rational>) -> Self {
        McTask {
            id: id.into(),
            period: period.into(),
            criticality: Criticality::Hi,
            wcet_lo: wcet_lo.into(),
            wcet_hi: Some(wcet_hi.into()),
            z_mandatory: Rational::zero(),
        }
    }

    pub fn lo(id: impl Into<String>, period: impl Into<Rational>, wcet_lo: impl Into<Rational>) -> Self {
        McTask {
            id: id.into(),
            period: period.into(),
            criticality: Criticality::Lo,
            wcet_lo: wcet_lo.into(),
            wcet_hi: None,
            z_mandatory: Rational::zero(),
        }
    }

    pub fn with_mandatory(mut self, z: Rational) -> Self {
        self.z_mandatory = z;
        self
    }

    pub fn is_hi(&self) -> bool {
        self.criticality == Criticality::Hi
    }

    pub fn u_lo(&self) -> Rational {
        &self.wcet_lo / &self.period
    }

    /// High utilization; zero for LO tasks.
    pub fn u_hi(&self) -> Rational {
        match &self.wcet_hi {
            Some(c) => c / &self.period,
            None => Rational::zero(),
        }
    }

    fn violations(&self, out: &mut Vec<Violation>) {
        let id = || self.id.clone();
        if !self.period.is_positive() {
            out.push(Violation::NonPositivePeriod(id()));
        }
        if !self.wcet_lo.is_positive() {
            out.push(Violation::NonPositiveWcetLo(id()));
        }
        if self.period.is_positive() && self.wcet_lo > self.period {
            out.push(Violation::WcetLoExceedsPeriod(id()));
        }
        match (self.criticality, &self.wcet_hi) {
            (Criticality::Hi, None) => out.push(Violation::MissingWcetHi(id())),
            (Criticality::Hi, Some(hi)) => {
                if *hi <= self.wcet_lo {
                    out.push(Violation::WcetHiNotAboveWcetLo(id()));
                }
                if *hi > self.period {
                    out.push(Violation::WcetHiExceedsPeriod(id()));
                }
            }
            (Criticality::Lo, Some(_)) => out.push(Violation::UnexpectedWcetHi(id())),
            (Criticality::Lo, None) => {}
        }
        let zero = Rational::zero();
        let in_range = self.z_mandatory >= zero && self.z_mandatory <= Rational::one();
        if self.criticality == Criticality::Lo && !in_range {
            out.push(Violation::MandatoryOutOfRange(id()));
        }
        if self.criticality == Criticality::Hi && !self.z_mandatory.is_zero() {
            out.push(Violation::MandatoryOnHiTask(id()));
        }
    }
}

/// One violated model invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    EmptyTaskSet,
    DuplicateId(String),
    NonPositivePeriod(String),
    NonPositiveWcetLo(String),
    WcetLoExceedsPeriod(String),
    MissingWcetHi(String),
    UnexpectedWcetHi(String),
    WcetHiNotAboveWcetLo(String),
    WcetHiExceedsPeriod(String),
    MandatoryOutOfRange(String),
    MandatoryOnHiTask(String),
    AggregateMismatch(&'static str),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyTaskSet => write!(f, "task set is empty"),
            Violation::DuplicateId(id) => write!(f, "{id}: duplicate task id"),
            Violation::NonPositivePeriod(id) => write!(f, "{id}: period > 0 required"),
            Violation::NonPositiveWcetLo(id) => write!(f, "{id}: C^LO > 0 required"),
            Violation::WcetLoExceedsPeriod(id) => write!(f, "{id}: C^LO ≤ T required"),
            Violation::MissingWcetHi(id) => write!(f, "{id}: HI task requires C^HI"),
            Violation::UnexpectedWcetHi(id) => write!(f, "{id}: LO task must not define C^HI"),
            Violation::WcetHiNotAboveWcetLo(id) => write!(f, "{id}: C^LO < C^HI required"),
            Violation::WcetHiExceedsPeriod(id) => write!(f, "{id}: C^HI ≤ T required"),
            Violation::MandatoryOutOfRange(id) => write!(f, "{id}: z^man ∈ [0,1] required"),
            Violation::MandatoryOnHiTask(id) => write!(f, "{id}: z^man applies to LO tasks only"),
            Violation::AggregateMismatch(name) => write!(f, "stored {name} differs from recomputation"),
        }
    }
}

/// Every violated invariant of a task collection; empty iff valid.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid task set: {0}")]
    Invalid(ValidationReport),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("task `{0}` is not a HI task")]
    NotHi(String),
    #[error("task `{0}` is not a LO task")]
    NotLo(String),
    #[error("task-set JSON: {0}")]
    Json(String),
}

/// Validates a raw task collection without constructing a set.
pub fn validate_tasks(tasks: &[McTask]) -> ValidationReport {
    let mut violations = Vec::new();
    if tasks.is_empty() {
        violations.push(Violation::EmptyTaskSet);
    }
    let mut seen = HashSet::new();
    for t in tasks {
        if !seen.insert(t.id.as_str()) {
            violations.push(Violation::DuplicateId(t.id.clone()));
        }
        t.violations(&mut violations);
    }
    ValidationReport { violations }
}

/// A validated task set with its exact utilization aggregates.
///
/// Immutable after construction; the aggregates always equal a
/// recomputation from the tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct McTaskSet {
    tasks: Vec<McTask>,
    u_lo_lo: Rational,
    u_hi_lo: Rational,
    u_hi_hi: Rational,
    u_lo_man: Rational,
    hi: Vec<usize>,
    lo: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TaskSetFile {
    tasks: Vec<McTask>,
}

impl McTaskSet {
    /// Validates `tasks` and computes `u_LO^LO`, `u_HI^LO`, `u_HI^HI` and
    /// `u_LO^man`.
    pub fn new(tasks: Vec<McTask>) -> Result<Self, ModelError> {
        let report = validate_tasks(&tasks);
        if !report.is_valid() {
            return Err(ModelError::Invalid(report));
        }
        let (u_lo_lo, u_hi_lo, u_hi_hi, u_lo_man) = aggregates(&tasks);
        let hi = (0..tasks.len()).filter(|&i| tasks[i].is_hi()).collect();
        let lo = (0..tasks.len()).filter(|&i| !tasks[i].is_hi()).collect();
        Ok(McTaskSet { tasks, u_lo_lo, u_hi_lo, u_hi_hi, u_lo_man, hi, lo })
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let file: TaskSetFile = serde_json::from_str(s).map_err(|e| ModelError::Json(e.to_string()))?;
        Self::new(file.tasks)
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            tasks: &'a [McTask],
        }
        serde_json::to_string_pretty(&Out { tasks: &self.tasks }).expect("task sets always serialize")
    }

    pub fn tasks(&self) -> &[McTask] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task(&self, index: usize) -> &McTask {
        &self.tasks[index]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.id == id)
    }

    pub fn require(&self, id: &str) -> Result<usize, ModelError> {
        self.index_of(id).ok_or_else(|| ModelError::UnknownTask(id.to_owned()))
    }

    /// Indices of HI tasks, in set order.
    pub fn hi_indices(&self) -> &[usize] {
        &self.hi
    }

    /// Indices of LO tasks, in set order. Per-LO-task maps elsewhere in the
    /// crate are positional over this slice.
    pub fn lo_indices(&self) -> &[usize] {
        &self.lo
    }

    pub fn u_lo_lo(&self) -> &Rational {
        &self.u_lo_lo
    }

    pub fn u_hi_lo(&self) -> &Rational {
        &self.u_hi_lo
    }

    pub fn u_hi_hi(&self) -> &Rational {
        &self.u_hi_hi
    }

    pub fn u_lo_man(&self) -> &Rational {
        &self.u_lo_man
    }

    /// Re-checks every invariant, including that the stored aggregates
    /// equal a fresh recomputation.
    pub fn validate(&self) -> ValidationReport {
        let mut report = validate_tasks(&self.tasks);
        let (a, b, c, d) = aggregates(&self.tasks);
        for (stored, fresh, name) in [
            (&self.u_lo_lo, a, "u_LO^LO"),
            (&self.u_hi_lo, b, "u_HI^LO"),
            (&self.u_hi_hi, c, "u_HI^HI"),
            (&self.u_lo_man, d, "u_LO^man"),
        ] {
            if *stored != fresh {
                report.violations.push(Violation::AggregateMismatch(name));
            }
        }
        report
    }
}

fn aggregates(tasks: &[McTask]) -> (Rational, Rational, Rational, Rational) {
    let mut u_lo_lo = Rational::zero();
    let mut u_hi_lo = Rational::zero();
    let mut u_hi_hi = Rational::zero();
    let mut u_lo_man = Rational::zero();
    for t in tasks {
        let u = t.u_lo();
        if t.is_hi() {
            u_hi_hi += t.u_hi();
            u_hi_lo += u;
        } else {
            u_lo_man += &t.z_mandatory * &u;
            u_lo_lo += u;
        }
    }
    (u_lo_lo, u_hi_lo, u_hi_hi, u_lo_man)
}

/// Builds a task set, computing its utilization aggregates exactly.
pub fn compute_utilizations(tasks: Vec<McTask>) -> Result<McTaskSet, ModelError> {
    McTaskSet::new(tasks)
}

/// Validation entry point over an already constructed set.
pub fn validate_task_set(set: &McTaskSet) -> ValidationReport {
    set.validate()
}

/// The four-HI/two-LO example set used throughout the documentation.
pub fn example_task_set() -> McTaskSet {
    let mut tasks: Vec<McTask> = (1..=4).map(|i| McTask::hi(format!("t{i}"), 40, 3, 8)).collect();
    tasks.push(McTask::lo("t5", 200, 30));
    tasks.push(McTask::lo("t6", 300, 75));
    McTaskSet::new(tasks).expect("example set is valid")
}
