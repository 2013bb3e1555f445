//! Deterministic event-driven execution of a workload trace under
//! FMC-EDF-VD.
//!
//! Time is continuous and exact. At any instant events are handled in the
//! order completion/overrun, deadline expiry, arrival, idle detection,
//! dispatch. Dispatch is preemptive EDF on effective deadlines with ties
//! broken by task index and then arrival.
//!
//! Mode semantics:
//!
//! * A HI job of a task that has not switched in the current busy window
//!   runs against the virtual deadline `a + x·T` with budget `C^LO`. When it
//!   reaches `C^LO` with demand left, only that task switches: its job gets
//!   the real deadline and budget `C^HI`, and later jobs of the task are
//!   admitted that way until switch-back.
//! * At every switch the tuner produces new LO levels, which are certified
//!   before use. Active LO jobs that already executed at least their new
//!   budget are suspended until their next period.
//! * The first instant with no ready job returns the system to LO mode.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::analysis::AnalysisContext;
use crate::model::{Criticality, McTaskSet};
use crate::rational::Rational;
use crate::tracegen::{TraceError, WorkloadTrace};
use crate::tuning::{Admissibility, ModeState, ServiceTuner, StrategyKind, TuningError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Tuning(#[from] TuningError),
    #[error("inadmissible service levels after switch {k} of `{task}` at t={time}")]
    Inadmissible { time: Rational, task: String, k: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimOptions {
    /// Re-validate every switch against the full admissibility condition
    /// in addition to the incremental check (linear in LO tasks).
    pub audit: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MissDetail {
    pub time: Rational,
    pub task: String,
    pub arrival: Rational,
    pub executed: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModeSwitchEvent {
    pub time: Rational,
    pub task: String,
    pub k: usize,
    pub u_lo_k: Rational,
}

/// Service received by one LO job, as a fraction of `C^LO`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ServiceSample {
    /// Index into the task set.
    pub task: usize,
    pub level: Rational,
    /// The task's service level `z^k` when the sample was taken.
    pub floor: Rational,
    /// The level before the switch that suspended the job (`z^{k−1}`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior: Option<Rational>,
    pub suspended: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub strategy: StrategyKind,
    pub horizon: Rational,
    pub end_time: Rational,
    pub hi_jobs: u64,
    pub lo_jobs: u64,
    pub hi_deadline_misses: u64,
    pub first_hi_miss: Option<MissDetail>,
    pub lo_budget_misses: u64,
    pub first_lo_miss: Option<MissDetail>,
    /// LO jobs with a deadline inside the horizon.
    pub lo_jobs_counted: u64,
    /// Of those, jobs that executed their full demand.
    pub lo_jobs_finished: u64,
    pub pfj: f64,
    pub context_switches: u64,
    pub per_k_service_samples: BTreeMap<usize, Vec<ServiceSample>>,
    pub mode_switch_events: Vec<ModeSwitchEvent>,
    pub switch_backs: u64,
    pub max_k: usize,
}

impl SimReport {
    pub fn is_safe(&self) -> bool {
        self.hi_deadline_misses == 0 && self.lo_budget_misses == 0
    }
}

/// One line of the optional event log.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SimEvent {
    Arrival { time: Rational, task: String, deadline: Rational, budget: Rational },
    Dispatch { time: Rational, task: String, arrival: Rational },
    Completion { time: Rational, task: String, arrival: Rational, executed: Rational },
    ModeSwitch { time: Rational, task: String, k: usize, u_lo_k: Rational },
    Suspension { time: Rational, task: String, arrival: Rational, executed: Rational },
    DeadlineMiss { time: Rational, task: String, arrival: Rational, criticality: Criticality },
    SwitchBack { time: Rational },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Ready,
    Suspended,
}

#[derive(Debug, Clone)]
struct Job {
    task: usize,
    arrival: Rational,
    abs_deadline: Rational,
    eff_deadline: Rational,
    demand: Rational,
    executed: Rational,
    budget: Rational,
    status: Status,
}

struct TaskInfo {
    period: Rational,
    virtual_deadline: Rational,
    wcet_lo: Rational,
    wcet_hi: Rational,
    hi: bool,
    lo_pos: Option<usize>,
    floor: Rational,
    delta: Rational,
}

type Sink<'s> = Option<&'s mut dyn FnMut(SimEvent)>;

struct Engine<'a, 's> {
    set: &'a McTaskSet,
    ctx: &'a AnalysisContext,
    tuner: &'a mut dyn ServiceTuner,
    options: &'a SimOptions,
    info: Vec<TaskInfo>,
    state: ModeState,
    closed_bound: Rational,
    active: Vec<Job>,
    now: Rational,
    last_dispatched: Option<(usize, Rational)>,
    report: SimReport,
    sink: Sink<'s>,
}

impl Engine<'_, '_> {
    fn emit(&mut self, event: impl FnOnce(&McTaskSet) -> SimEvent) {
        if let Some(sink) = self.sink.as_mut() {
            sink(event(self.set));
        }
    }

    fn id(&self, task: usize) -> String {
        self.set.task(task).id.clone()
    }

    /// Execution point at which the job next needs attention: its overrun
    /// point for a HI job still on `C^LO`, otherwise its completion.
    fn target(&self, job: &Job) -> Rational {
        job.demand.clone().min(job.budget.clone())
    }

    fn record_sample(&mut self, job: &Job, suspended: bool, prior: Option<Rational>) {
        let info = &self.info[job.task];
        let Some(pos) = info.lo_pos else { return };
        let sample = ServiceSample {
            task: job.task,
            level: &job.executed / &info.wcet_lo,
            floor: self.state.z()[pos].clone(),
            prior,
            suspended,
        };
        self.report.per_k_service_samples.entry(self.state.k()).or_default().push(sample);
    }

    fn complete(&mut self, idx: usize) {
        let job = self.active.swap_remove(idx);
        let info = &self.info[job.task];
        if !info.hi {
            if job.abs_deadline <= self.report.horizon && job.executed == job.demand {
                self.report.lo_jobs_finished += 1;
            }
            self.record_sample(&job, false, None);
        }
        let now = self.now.clone();
        self.emit(|set| SimEvent::Completion {
            time: now,
            task: set.task(job.task).id.clone(),
            arrival: job.arrival.clone(),
            executed: job.executed.clone(),
        });
    }

    fn expire_deadlines(&mut self) {
        let mut i = 0;
        while i < self.active.len() {
            if self.active[i].abs_deadline > self.now {
                i += 1;
                continue;
            }
            let job = self.active.swap_remove(i);
            if job.status == Status::Suspended {
                continue;
            }
            let detail = MissDetail {
                time: self.now.clone(),
                task: self.id(job.task),
                arrival: job.arrival.clone(),
                executed: job.executed.clone(),
            };
            let criticality = self.set.task(job.task).criticality;
            if self.info[job.task].hi {
                self.report.hi_deadline_misses += 1;
                self.report.first_hi_miss.get_or_insert(detail);
            } else {
                self.report.lo_budget_misses += 1;
                self.report.first_lo_miss.get_or_insert(detail);
            }
            let now = self.now.clone();
            self.emit(|set| SimEvent::DeadlineMiss {
                time: now,
                task: set.task(job.task).id.clone(),
                arrival: job.arrival.clone(),
                criticality,
            });
        }
    }

    fn admit(&mut self, task: usize, arrival: Rational, demand: Rational) {
        let info = &self.info[task];
        let abs_deadline = &arrival + &info.period;
        let (eff_deadline, budget) = if info.hi {
            self.report.hi_jobs += 1;
            if self.state.has_switched(task) {
                (abs_deadline.clone(), info.wcet_hi.clone())
            } else {
                (&arrival + &info.virtual_deadline, info.wcet_lo.clone())
            }
        } else {
            self.report.lo_jobs += 1;
            if abs_deadline <= self.report.horizon {
                self.report.lo_jobs_counted += 1;
            }
            let pos = info.lo_pos.expect("LO task has a position");
            (abs_deadline.clone(), &self.state.z()[pos] * &info.wcet_lo)
        };
        let job = Job {
            task,
            arrival,
            abs_deadline,
            eff_deadline,
            demand,
            executed: Rational::zero(),
            budget,
            status: Status::Ready,
        };
        let now = self.now.clone();
        self.emit(|set| SimEvent::Arrival {
            time: now,
            task: set.task(task).id.clone(),
            deadline: job.eff_deadline.clone(),
            budget: job.budget.clone(),
        });
        if job.budget.is_zero() {
            self.active.push(job);
            let idx = self.active.len() - 1;
            self.complete(idx);
        } else {
            self.active.push(job);
        }
    }

    fn switch_back(&mut self) {
        self.state.switch_back(self.set);
        self.tuner.on_switch_back();
        self.closed_bound = self.set.u_lo_lo().clone();
        self.report.switch_backs += 1;
        let now = self.now.clone();
        self.emit(|_| SimEvent::SwitchBack { time: now });
    }

    fn mode_switch(&mut self, idx: usize) -> Result<(), SimError> {
        let task = self.active[idx].task;
        let info = &self.info[task];
        self.active[idx].eff_deadline = self.active[idx].abs_deadline.clone();
        self.active[idx].budget = info.wcet_hi.clone();
        let delta = info.delta.clone();

        let prev = self.options.audit.then(|| self.state.clone());
        let u_prev = self.state.u_lo_k().clone();
        self.state.record_switch(task, self.now.clone());
        let k = self.state.k();
        self.report.max_k = self.report.max_k.max(k);
        if !delta.is_positive() {
            self.closed_bound += &delta;
        }

        let update = self.tuner.on_switch(&self.state, task)?;
        let changed = self.state.apply(self.set, &update);
        let rule = self.tuner.admissibility();
        let mut ok = changed.iter().all(|(pos, old)| {
            let new = &self.state.z()[*pos];
            new <= old && *new >= self.info[self.set.lo_indices()[*pos]].floor
        });
        ok &= match rule {
            Admissibility::PerSwitch => *self.state.u_lo_k() <= u_prev + &delta,
            Admissibility::ClosedForm => *self.state.u_lo_k() <= self.closed_bound,
        };
        if let Some(prev) = prev {
            let audited = self.state.certify(&prev, self.ctx, self.set, task, rule)?;
            debug_assert_eq!(audited, ok, "incremental and full admissibility checks disagree");
            ok &= audited;
        }
        if !ok {
            return Err(SimError::Inadmissible { time: self.now.clone(), task: self.id(task), k });
        }

        let event = ModeSwitchEvent {
            time: self.now.clone(),
            task: self.id(task),
            k,
            u_lo_k: self.state.u_lo_k().clone(),
        };
        self.report.mode_switch_events.push(event.clone());
        self.emit(|_| SimEvent::ModeSwitch { time: event.time, task: event.task, k, u_lo_k: event.u_lo_k });

        if changed.is_empty() {
            return Ok(());
        }
        for i in 0..self.active.len() {
            let job = &self.active[i];
            if job.status != Status::Ready {
                continue;
            }
            let info = &self.info[job.task];
            let Some(pos) = info.lo_pos else { continue };
            let budget = &self.state.z()[pos] * &info.wcet_lo;
            if budget == job.budget {
                continue;
            }
            let prior = &job.budget / &info.wcet_lo;
            if job.executed >= budget {
                self.active[i].budget = budget;
                self.active[i].status = Status::Suspended;
                let job = self.active[i].clone();
                self.record_sample(&job, true, Some(prior));
                let now = self.now.clone();
                self.emit(|set| SimEvent::Suspension {
                    time: now,
                    task: set.task(job.task).id.clone(),
                    arrival: job.arrival.clone(),
                    executed: job.executed.clone(),
                });
            } else {
                self.active[i].budget = budget;
            }
        }
        Ok(())
    }

    fn pick(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, job) in self.active.iter().enumerate() {
            if job.status != Status::Ready {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let cur = &self.active[b];
                    let key = (&job.eff_deadline, job.task, &job.arrival);
                    if key < (&cur.eff_deadline, cur.task, &cur.arrival) {
                        Some(i)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        best
    }

    fn run(&mut self, jobs: Vec<crate::tracegen::ResolvedJob>) -> Result<(), SimError> {
        let mut pending = jobs.into_iter().peekable();
        loop {
            self.expire_deadlines();
            while let Some(job) = pending.next_if(|j| j.arrival <= self.now) {
                self.admit(job.task, job.arrival, job.demand);
            }

            let running = self.pick();
            match running {
                None => {
                    if self.state.k() > 0 {
                        self.switch_back();
                    }
                    self.last_dispatched = None;
                }
                Some(i) => {
                    let id = (self.active[i].task, self.active[i].arrival.clone());
                    if self.last_dispatched.as_ref() != Some(&id) {
                        self.report.context_switches += 1;
                        let now = self.now.clone();
                        self.emit(|set| SimEvent::Dispatch { time: now, task: set.task(id.0).id.clone(), arrival: id.1.clone() });
                        self.last_dispatched = Some(id);
                    }
                }
            }

            let mut next: Option<Rational> = pending.peek().map(|j| j.arrival.clone());
            let mut consider = |t: &Rational| {
                if next.as_ref().is_none_or(|n| t < n) {
                    next = Some(t.clone());
                }
            };
            for job in &self.active {
                consider(&job.abs_deadline);
            }
            let finish = running.map(|i| {
                let job = &self.active[i];
                &self.now + (self.target(job) - &job.executed)
            });
            if let Some(f) = &finish {
                consider(f);
            }
            let Some(next) = next else { break };

            if let Some(i) = running {
                let elapsed = &next - &self.now;
                self.active[i].executed += elapsed;
            }
            self.now = next;

            if let Some(i) = running {
                let job = &self.active[i];
                if job.executed == self.target(job) {
                    let info = &self.info[job.task];
                    if info.hi && job.demand > job.budget && !self.state.has_switched(job.task) {
                        self.mode_switch(i)?;
                    } else {
                        self.complete(i);
                    }
                }
            }
        }
        self.report.end_time = self.now.clone();
        self.report.pfj = if self.report.lo_jobs_counted == 0 {
            100.0
        } else {
            100.0 * self.report.lo_jobs_finished as f64 / self.report.lo_jobs_counted as f64
        };
        Ok(())
    }
}

/// Simulates `trace` with a fresh tuner of the given strategy.
pub fn simulate(
    set: &McTaskSet,
    ctx: &AnalysisContext,
    trace: &WorkloadTrace,
    strategy: StrategyKind,
) -> Result<SimReport, SimError> {
    let mut tuner = strategy.tuner(ctx, set)?;
    simulate_with(set, ctx, trace, tuner.as_mut(), &SimOptions::default(), None)
}

/// Simulates with an explicit tuner, options and optional event sink.
pub fn simulate_with(
    set: &McTaskSet,
    ctx: &AnalysisContext,
    trace: &WorkloadTrace,
    tuner: &mut dyn ServiceTuner,
    options: &SimOptions,
    sink: Option<&mut dyn FnMut(SimEvent)>,
) -> Result<SimReport, SimError> {
    let jobs = trace.resolve(set)?;
    let info = set
        .tasks()
        .iter()
        .enumerate()
        .map(|(i, t)| TaskInfo {
            period: t.period.clone(),
            virtual_deadline: ctx.x() * &t.period,
            wcet_lo: t.wcet_lo.clone(),
            wcet_hi: t.wcet_hi.clone().unwrap_or_else(|| t.wcet_lo.clone()),
            hi: t.is_hi(),
            lo_pos: set.lo_indices().iter().position(|&j| j == i),
            floor: t.z_mandatory.clone(),
            delta: ctx.phi(i).map(|p| p / ctx.one_minus_x()).unwrap_or_default(),
        })
        .collect();
    let strategy = tuner.kind();
    let mut engine = Engine {
        set,
        ctx,
        tuner,
        options,
        info,
        state: ModeState::initial(set),
        closed_bound: set.u_lo_lo().clone(),
        active: Vec::new(),
        now: Rational::zero(),
        last_dispatched: None,
        report: SimReport {
            strategy,
            horizon: trace.horizon.clone(),
            end_time: Rational::zero(),
            hi_jobs: 0,
            lo_jobs: 0,
            hi_deadline_misses: 0,
            first_hi_miss: None,
            lo_budget_misses: 0,
            first_lo_miss: None,
            lo_jobs_counted: 0,
            lo_jobs_finished: 0,
            pfj: 100.0,
            context_switches: 0,
            per_k_service_samples: BTreeMap::new(),
            mode_switch_events: Vec::new(),
            switch_backs: 0,
            max_k: 0,
        },
        sink,
    };
    engine.run(jobs)?;
    Ok(engine.report)
}

/// Where a replayed report first differs from the original.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("determinism violation at `{path}`: expected {expected}, replay produced {actual}")]
pub struct ReplayMismatch {
    pub path: String,
    pub expected: String,
    pub actual: String,
}

fn first_divergence(path: &str, a: &serde_json::Value, b: &serde_json::Value) -> Option<ReplayMismatch> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for (key, va) in x {
                match y.get(key) {
                    Some(vb) => {
                        if let Some(m) = first_divergence(&format!("{path}.{key}"), va, vb) {
                            return Some(m);
                        }
                    }
                    None => {
                        return Some(ReplayMismatch { path: format!("{path}.{key}"), expected: va.to_string(), actual: "<missing>".into() })
                    }
                }
            }
            y.keys().find(|k| !x.contains_key(*k)).map(|k| ReplayMismatch {
                path: format!("{path}.{k}"),
                expected: "<missing>".into(),
                actual: y[k].to_string(),
            })
        }
        (Value::Array(x), Value::Array(y)) => {
            for (i, (va, vb)) in x.iter().zip(y).enumerate() {
                if let Some(m) = first_divergence(&format!("{path}[{i}]"), va, vb) {
                    return Some(m);
                }
            }
            (x.len() != y.len()).then(|| ReplayMismatch {
                path: format!("{path}.len()"),
                expected: x.len().to_string(),
                actual: y.len().to_string(),
            })
        }
        _ => (a != b).then(|| ReplayMismatch { path: path.to_owned(), expected: a.to_string(), actual: b.to_string() }),
    }
}

/// Re-runs the simulation and requires a byte-identical serialized report.
pub fn replay_check(
    set: &McTaskSet,
    ctx: &AnalysisContext,
    trace: &WorkloadTrace,
    strategy: StrategyKind,
    report: &SimReport,
) -> Result<(), ReplayMismatch> {
    let replay = simulate(set, ctx, trace, strategy).map_err(|e| ReplayMismatch {
        path: "$".into(),
        expected: "a report".into(),
        actual: e.to_string(),
    })?;
    let original = serde_json::to_string(report).expect("reports serialize");
    let again = serde_json::to_string(&replay).expect("reports serialize");
    if original == again {
        return Ok(());
    }
    let a: serde_json::Value = serde_json::from_str(&original).unwrap();
    let b: serde_json::Value = serde_json::from_str(&again).unwrap();
    Err(first_divergence("$", &a, &b).unwrap_or(ReplayMismatch {
        path: "$".into(),
        expected: original,
        actual: again,
    }))
}
