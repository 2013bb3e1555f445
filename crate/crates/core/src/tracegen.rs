//! Seeded random task sets and pre-generated workload traces.
//!
//! All randomness comes from [`RNG_ALGORITHM`] seeded through
//! [`mix_seed`], so a `(params, seed)` pair always yields the same output.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{McTask, McTaskSet, ModelError};
use crate::rational::Rational;

/// Name of the generator recorded in trace metadata and `--version`.
pub const RNG_ALGORITHM: &str = "ChaCha8 (rand_chacha 0.9), seeds mixed with SplitMix64";

/// SplitMix64 finalizer folded over `parts`; used to derive independent
/// per-set and per-trace seeds from a master seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        state ^= p;
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenerationError {
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("no task set found within {0} candidate tasks")]
    RetryBudgetExhausted(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorParams {
    pub u_bound: Rational,
    pub period_range: (i64, i64),
    pub u_lo_range: (f64, f64),
    pub ratio_range: (f64, f64),
    pub p_cri: f64,
    pub min_hi_tasks: usize,
    pub seed: u64,
    /// Total candidate tasks drawn before giving up.
    pub max_candidates: usize,
    /// Consecutive rejected candidates after which the partial set is
    /// discarded and generation starts over.
    pub restart_after: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            u_bound: Rational::new(17, 20),
            period_range: (20, 150),
            u_lo_range: (0.05, 0.15),
            ratio_range: (2.0, 3.0),
            p_cri: 0.5,
            min_hi_tasks: 3,
            seed: 0,
            max_candidates: 100_000,
            restart_after: 1_000,
        }
    }
}

impl GeneratorParams {
    pub fn with_bound(u_bound: Rational, seed: u64) -> Self {
        GeneratorParams { u_bound, seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        let bad = |m: &str| Err(GenerationError::InvalidParams(m.to_owned()));
        if self.period_range.0 < 1 || self.period_range.0 > self.period_range.1 {
            return bad("period range must be a nonempty interval of positive integers");
        }
        let (a, b) = self.u_lo_range;
        if !(a > 0.0 && a <= b && b <= 1.0) {
            return bad("u_lo range must be a nonempty interval within (0, 1]");
        }
        let (a, b) = self.ratio_range;
        if !(a > 1.0 && a <= b) {
            return bad("ratio range must be a nonempty interval above 1");
        }
        if !(0.0..=1.0).contains(&self.p_cri) {
            return bad("p_cri must be a probability");
        }
        if !self.u_bound.is_positive() {
            return bad("u_bound must be positive");
        }
        if self.max_candidates == 0 || self.restart_after == 0 {
            return bad("retry budgets must be positive");
        }
        Ok(())
    }

    fn window_low(&self) -> Rational {
        &self.u_bound - Rational::new(1, 20)
    }
}

fn draw_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws one candidate; `None` when flooring produced an unusable WCET.
fn draw_candidate(rng: &mut ChaCha8Rng, params: &GeneratorParams, id: String) -> Option<McTask> {
    let period = rng.random_range(params.period_range.0..=params.period_range.1);
    let u = draw_range(rng, params.u_lo_range);
    let hi = rng.random_bool(params.p_cri);
    let c_lo = (u * period as f64).floor() as i64;
    if c_lo <= 0 {
        return None;
    }
    if hi {
        let ratio = draw_range(rng, params.ratio_range);
        let c_hi = (u * ratio * period as f64).floor() as i64;
        if c_hi <= c_lo || c_hi > period {
            return None;
        }
        Some(McTask::hi(id, period, c_lo, c_hi))
    } else {
        Some(McTask::lo(id, period, c_lo))
    }
}

/// Adds tasks one at a time until `u_B − 0.05 ≤ max{u_LO^LO + u_HI^LO,
/// u_HI^HI} ≤ u_B` and enough HI tasks exist. A candidate that pushes the
/// maximum above `u_B` is discarded and redrawn.
pub fn generate_task_set(params: &GeneratorParams) -> Result<McTaskSet, GenerationError> {
    params.validate()?;
    let mut rng = rng_from_seed(params.seed);
    let low = params.window_low();
    let mut drawn = 0usize;
    'restart: loop {
        let mut tasks: Vec<McTask> = Vec::new();
        let mut u_total = Rational::zero();
        let mut u_hi_hi = Rational::zero();
        let mut hi_count = 0usize;
        let mut rejected_in_a_row = 0usize;
        loop {
            if drawn >= params.max_candidates {
                return Err(GenerationError::RetryBudgetExhausted(params.max_candidates));
            }
            if rejected_in_a_row >= params.restart_after {
                continue 'restart;
            }
            drawn += 1;
            let Some(task) = draw_candidate(&mut rng, params, format!("t{}", tasks.len() + 1)) else {
                rejected_in_a_row += 1;
                continue;
            };
            let next_total = &u_total + task.u_lo();
            let next_hi = &u_hi_hi + task.u_hi();
            let peak = next_total.clone().max(next_hi.clone());
            if peak > params.u_bound {
                rejected_in_a_row += 1;
                continue;
            }
            rejected_in_a_row = 0;
            hi_count += task.is_hi() as usize;
            tasks.push(task);
            u_total = next_total;
            u_hi_hi = next_hi;
            if peak >= low && hi_count >= params.min_hi_tasks {
                return Ok(McTaskSet::new(tasks)?);
            }
        }
    }
}

/// One pre-generated job.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceJob {
    pub task: String,
    pub arrival: Rational,
    pub demand: Rational,
    #[serde(default)]
    pub overrun: bool,
}

/// Pre-generated arrivals, demands and overrun flags, shared by every
/// strategy that is compared on a task set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorkloadTrace {
    pub horizon: Rational,
    pub jobs: Vec<TraceJob>,
    #[serde(default)]
    pub overrun_prob: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub rng: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceError {
    #[error("trace job {index} references unknown task `{task}`")]
    UnknownTask { index: usize, task: String },
    #[error("trace job {index} is out of (arrival, task) order")]
    Unsorted { index: usize },
    #[error("trace job {index} of `{task}` arrives before its period has elapsed")]
    ArrivalTooEarly { index: usize, task: String },
    #[error("trace job {index} of `{task}` has an invalid demand {demand}")]
    InvalidDemand { index: usize, task: String, demand: Rational },
    #[error("trace job {index} has an overrun flag inconsistent with its demand")]
    OverrunFlag { index: usize },
    #[error("trace job {index} arrives before time 0")]
    NegativeArrival { index: usize },
    #[error("trace horizon must be positive")]
    Horizon,
    #[error("trace JSON: {0}")]
    Json(String),
}

/// A trace job bound to a task index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedJob {
    pub task: usize,
    pub arrival: Rational,
    pub demand: Rational,
    pub overrun: bool,
}

impl WorkloadTrace {
    pub fn from_json(s: &str) -> Result<Self, TraceError> {
        serde_json::from_str(s).map_err(|e| TraceError::Json(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("traces always serialize")
    }

    /// Binds jobs to task indices, checking the sporadic model: sorted
    /// arrivals, inter-arrival at least one period, `0 < demand ≤` the
    /// task's largest WCET, and `overrun` set exactly when a HI demand
    /// exceeds `C^LO`.
    pub fn resolve(&self, set: &McTaskSet) -> Result<Vec<ResolvedJob>, TraceError> {
        if !self.horizon.is_positive() {
            return Err(TraceError::Horizon);
        }
        let ids: HashMap<&str, usize> = set.tasks().iter().enumerate().map(|(i, t)| (t.id.as_str(), i)).collect();
        let mut last_arrival: Vec<Option<&Rational>> = vec![None; set.len()];
        let mut out = Vec::with_capacity(self.jobs.len());
        for (index, job) in self.jobs.iter().enumerate() {
            let &task = ids
                .get(job.task.as_str())
                .ok_or_else(|| TraceError::UnknownTask { index, task: job.task.clone() })?;
            if job.arrival.is_negative() {
                return Err(TraceError::NegativeArrival { index });
            }
            if index > 0 {
                let prev = &self.jobs[index - 1];
                if (&prev.arrival, &prev.task) > (&job.arrival, &job.task) {
                    return Err(TraceError::Unsorted { index });
                }
            }
            let t = set.task(task);
            if let Some(prev) = last_arrival[task] {
                if &job.arrival - prev < t.period {
                    return Err(TraceError::ArrivalTooEarly { index, task: job.task.clone() });
                }
            }
            last_arrival[task] = Some(&job.arrival);
            let cap = t.wcet_hi.as_ref().unwrap_or(&t.wcet_lo);
            if !job.demand.is_positive() || job.demand > *cap {
                return Err(TraceError::InvalidDemand { index, task: job.task.clone(), demand: job.demand.clone() });
            }
            if job.overrun != (job.demand > t.wcet_lo) {
                return Err(TraceError::OverrunFlag { index });
            }
            out.push(ResolvedJob { task, arrival: job.arrival.clone(), demand: job.demand.clone(), overrun: job.overrun });
        }
        Ok(out)
    }

    /// Stable fingerprint used to check that strategies share one trace.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.hash(&mut h);
        h.finish()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceOptions {
    /// Adds a uniform integer delay in `[0, slack]` to every inter-arrival
    /// gap. Off (pure minimum inter-arrival) by default.
    pub sporadic_slack: Option<u32>,
}

/// Releases every task at `0, T, 2T, … < horizon` (plus optional slack),
/// flags each HI job as an overrun with probability `overrun_prob`, and
/// gives it `C^HI` if flagged or `C^LO` otherwise.
pub fn generate_trace(set: &McTaskSet, horizon: &Rational, overrun_prob: f64, seed: u64) -> WorkloadTrace {
    generate_trace_with(set, horizon, overrun_prob, seed, &TraceOptions::default())
}

pub fn generate_trace_with(
    set: &McTaskSet,
    horizon: &Rational,
    overrun_prob: f64,
    seed: u64,
    options: &TraceOptions,
) -> WorkloadTrace {
    assert!((0.0..=1.0).contains(&overrun_prob), "overrun probability must be in [0, 1]");
    let mut rng = rng_from_seed(seed);
    let mut arrivals: Vec<(Rational, usize)> = Vec::new();
    for (i, task) in set.tasks().iter().enumerate() {
        let mut t = Rational::zero();
        while t < *horizon {
            arrivals.push((t.clone(), i));
            t += &task.period;
            if let Some(slack) = options.sporadic_slack {
                t += Rational::from_integer(rng.random_range(0..=slack) as i64);
            }
        }
    }
    arrivals.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| set.task(a.1).id.cmp(&set.task(b.1).id)));
    let jobs = arrivals
        .into_iter()
        .map(|(arrival, i)| {
            let task = set.task(i);
            let overrun = task.is_hi() && rng.random_bool(overrun_prob);
            let demand = if overrun { task.wcet_hi.clone().unwrap() } else { task.wcet_lo.clone() };
            TraceJob { task: task.id.clone(), arrival, demand, overrun }
        })
        .collect();
    WorkloadTrace {
        horizon: horizon.clone(),
        jobs,
        overrun_prob: Some(format!("{overrun_prob}")),
        seed: Some(seed),
        rng: Some(RNG_ALGORITHM.to_owned()),
    }
}

/// A trace with explicit overrun flags: `overrun(i)` decides the flag of
/// the `i`-th HI job in arrival order.
pub fn trace_with_overruns(set: &McTaskSet, horizon: &Rational, mut overrun: impl FnMut(usize) -> bool) -> WorkloadTrace {
    let mut trace = generate_trace(set, horizon, 0.0, 0);
    let mut hi_seen = 0usize;
    for job in &mut trace.jobs {
        let task = &set.tasks()[set.index_of(&job.task).unwrap()];
        if task.is_hi() {
            if overrun(hi_seen) {
                job.overrun = true;
                job.demand = task.wcet_hi.clone().unwrap();
            }
            hi_seen += 1;
        }
    }
    trace.overrun_prob = None;
    trace.seed = None;
    trace
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::example_task_set;
    use crate::rational::q;

    #[test]
    fn generation_is_deterministic() {
        let params = GeneratorParams::with_bound(q(17, 20), 42);
        let a = generate_task_set(&params).unwrap();
        let b = generate_task_set(&params).unwrap();
        assert_eq!(a, b);
        let c = generate_task_set(&GeneratorParams::with_bound(q(17, 20), 43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generated_sets_respect_window() {
        for seed in 0..200 {
            let params = GeneratorParams::with_bound(q(17, 20), seed);
            let set = generate_task_set(&params).unwrap();
            let peak = (set.u_lo_lo() + set.u_hi_lo()).max(set.u_hi_hi().clone());
            assert!(peak >= q(4, 5) && peak <= q(17, 20), "seed {seed}: {peak}");
            assert!(set.hi_indices().len() >= 3);
            for t in set.tasks() {
                let p = t.period.to_i64().unwrap();
                assert!((20..=150).contains(&p));
                // Flooring only ever lowers the drawn utilization.
                assert!(t.u_lo() <= q(15, 100));
            }
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        let mut p = GeneratorParams::default();
        p.p_cri = 1.5;
        assert!(matches!(generate_task_set(&p), Err(GenerationError::InvalidParams(_))));
        let mut p = GeneratorParams::default();
        p.period_range = (50, 20);
        assert!(generate_task_set(&p).is_err());
    }

    #[test]
    fn impossible_window_exhausts_budget() {
        let mut p = GeneratorParams::with_bound(q(1, 100), 1);
        p.max_candidates = 500;
        assert_eq!(generate_task_set(&p), Err(GenerationError::RetryBudgetExhausted(500)));
    }

    #[test]
    fn trace_structure() {
        let set = example_task_set();
        let trace = generate_trace(&set, &Rational::from_integer(1200), 0.0, 7);
        assert!(trace.jobs.iter().all(|j| !j.overrun));
        // ceil(1200/40) × 4 + ceil(1200/200) + ceil(1200/300)
        assert_eq!(trace.jobs.len(), 4 * 30 + 6 + 4);
        assert!(trace.resolve(&set).is_ok());
        let again = generate_trace(&set, &Rational::from_integer(1200), 0.0, 7);
        assert_eq!(trace.to_json(), again.to_json());
    }

    #[test]
    fn trace_counts_and_overrun_frequency() {
        let set = example_task_set();
        let horizon = Rational::from_integer(2_000_000);
        let trace = generate_trace(&set, &horizon, 0.1, 11);
        let hi: Vec<_> = trace.jobs.iter().filter(|j| set.task(set.index_of(&j.task).unwrap()).is_hi()).collect();
        assert_eq!(hi.len(), 4 * 50_000);
        let flagged = hi.iter().filter(|j| j.overrun).count() as f64 / hi.len() as f64;
        assert!((flagged - 0.1).abs() <= 0.01, "{flagged}");
        for j in &trace.jobs {
            let t = set.task(set.index_of(&j.task).unwrap());
            let expected = if j.overrun { t.wcet_hi.clone().unwrap() } else { t.wcet_lo.clone() };
            assert_eq!(j.demand, expected);
        }
    }

    #[test]
    fn resolve_rejects_bad_traces() {
        let set = example_task_set();
        let mut trace = generate_trace(&set, &Rational::from_integer(400), 0.0, 1);
        trace.jobs[0].task = "ghost".into();
        assert!(matches!(trace.resolve(&set), Err(TraceError::UnknownTask { .. })));

        let mut trace = generate_trace(&set, &Rational::from_integer(400), 0.0, 1);
        trace.jobs.swap(0, 10);
        assert!(matches!(trace.resolve(&set), Err(TraceError::Unsorted { .. })));

        let mut trace = generate_trace(&set, &Rational::from_integer(400), 0.0, 1);
        trace.jobs[0].overrun = true;
        assert!(matches!(trace.resolve(&set), Err(TraceError::OverrunFlag { .. })));

        let mut trace = generate_trace(&set, &Rational::from_integer(400), 0.0, 1);
        let pos = trace.jobs.iter().position(|j| j.task == "t1" && j.arrival == Rational::from_integer(40)).unwrap();
        trace.jobs[pos].arrival = Rational::from_integer(39);
        trace.jobs.sort_by(|a, b| (&a.arrival, &a.task).cmp(&(&b.arrival, &b.task)));
        assert!(matches!(trace.resolve(&set), Err(TraceError::ArrivalTooEarly { .. })));
    }

    #[test]
    fn slack_only_widens_gaps() {
        let set = example_task_set();
        let opts = TraceOptions { sporadic_slack: Some(5) };
        let trace = generate_trace_with(&set, &Rational::from_integer(2000), 0.2, 3, &opts);
        assert!(trace.resolve(&set).is_ok());
        assert!(trace.jobs.len() < generate_trace(&set, &Rational::from_integer(2000), 0.2, 3).jobs.len());
    }

    #[test]
    fn seed_mixing_separates_streams() {
        assert_ne!(mix_seed(&[1, 0, 0]), mix_seed(&[1, 0, 1]));
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_eq!(mix_seed(&[5, 6, 7]), mix_seed(&[5, 6, 7]));
    }
}
