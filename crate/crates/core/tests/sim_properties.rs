//! Scheduling invariants checked against the event log of random runs.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::Rng;

use fmc::analysis::AnalysisContext;
use fmc::sim::{simulate_with, SimEvent, SimOptions, SimReport};
use fmc::tracegen::{rng_from_seed, trace_with_overruns};
use fmc::{analyze, McTask, McTaskSet, Rational, StrategyKind};

fn feasible_set(seed: u64) -> McTaskSet {
    const PERIODS: [i64; 6] = [10, 20, 25, 40, 50, 100];
    let mut rng = rng_from_seed(seed);
    loop {
        let n = rng.random_range(2..=6usize);
        let n_hi = rng.random_range(1..n);
        let tasks: Vec<McTask> = (0..n)
            .map(|i| {
                let t = PERIODS[rng.random_range(0..PERIODS.len())];
                if i < n_hi {
                    let c = rng.random_range(1..=t / 5);
                    McTask::hi(format!("h{i}"), t, c, rng.random_range(c + 1..=(3 * c).min(t)))
                } else {
                    McTask::lo(format!("l{i}"), t, rng.random_range(1..=t / 3))
                }
            })
            .collect();
        if let Ok(set) = McTaskSet::new(tasks) {
            if analyze(&set, None).schedulable() {
                return set;
            }
        }
    }
}

fn run(set: &McTaskSet, overruns: &[bool], strategy: StrategyKind) -> (SimReport, Vec<SimEvent>) {
    let ctx = AnalysisContext::for_set(set).unwrap();
    let horizon = Rational::from_integer(400);
    let trace = trace_with_overruns(set, &horizon, |i| overruns[i % overruns.len()]);
    let mut events = Vec::new();
    let mut sink = |e: SimEvent| events.push(e);
    let mut tuner = strategy.tuner(&ctx, set).unwrap();
    let report = simulate_with(set, &ctx, &trace, tuner.as_mut(), &SimOptions { audit: true }, Some(&mut sink)).unwrap();
    (report, events)
}

fn time_of(e: &SimEvent) -> &Rational {
    match e {
        SimEvent::Arrival { time, .. }
        | SimEvent::Dispatch { time, .. }
        | SimEvent::Completion { time, .. }
        | SimEvent::ModeSwitch { time, .. }
        | SimEvent::Suspension { time, .. }
        | SimEvent::DeadlineMiss { time, .. }
        | SimEvent::SwitchBack { time } => time,
    }
}

/// Replays the log and checks, at the end of every instant, that the
/// running job is the EDF choice among ready jobs and that the processor
/// never idles with a ready job.
fn check_edf_and_work_conservation(set: &McTaskSet, events: &[SimEvent]) -> Result<(), String> {
    // (task index, arrival) -> effective deadline
    let mut ready: BTreeMap<(usize, Rational), Rational> = BTreeMap::new();
    let mut running: Option<(usize, Rational)> = None;
    let mut i = 0;
    while i < events.len() {
        let now = time_of(&events[i]).clone();
        while i < events.len() && *time_of(&events[i]) == now {
            match &events[i] {
                SimEvent::Arrival { task, time, deadline, .. } => {
                    ready.insert((set.index_of(task).unwrap(), time.clone()), deadline.clone());
                }
                SimEvent::Completion { task, arrival, .. } | SimEvent::Suspension { task, arrival, .. } | SimEvent::DeadlineMiss { task, arrival, .. } => {
                    let key = (set.index_of(task).unwrap(), arrival.clone());
                    ready.remove(&key);
                    if running.as_ref() == Some(&key) {
                        running = None;
                    }
                }
                SimEvent::ModeSwitch { task, .. } => {
                    let idx = set.index_of(task).unwrap();
                    let key = running.clone().filter(|(t, _)| *t == idx).ok_or("switch of a job that is not running")?;
                    ready.insert(key.clone(), &key.1 + &set.task(idx).period);
                }
                SimEvent::Dispatch { task, arrival, .. } => running = Some((set.index_of(task).unwrap(), arrival.clone())),
                SimEvent::SwitchBack { .. } => {
                    if !ready.is_empty() {
                        return Err(format!("switch-back at {now} with ready jobs"));
                    }
                }
            }
            i += 1;
        }
        let best = ready.iter().map(|((t, a), d)| (d.clone(), *t, a.clone())).min();
        match (&best, &running) {
            (None, _) => running = None,
            (Some(_), None) => return Err(format!("idle at {now} with ready jobs")),
            (Some((d, t, a)), Some(key)) => {
                let cur = ready.get(key).ok_or(format!("running job {key:?} not ready at {now}"))?;
                if (cur, key.0, &key.1) != (d, *t, a) {
                    return Err(format!("at {now} running {key:?} (deadline {cur}) but EDF picks task {t} arrival {a} (deadline {d})"));
                }
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn run_time_invariants(seed in any::<u64>(), overruns in proptest::collection::vec(any::<bool>(), 1..40), s in 0usize..3) {
        let set = feasible_set(seed);
        let strategy = StrategyKind::ALL[s];
        let (report, events) = run(&set, &overruns, strategy);

        prop_assert!(report.is_safe(), "{:?} {:?}", report.first_hi_miss, report.first_lo_miss);
        prop_assert!((0.0..=100.0).contains(&report.pfj));
        check_edf_and_work_conservation(&set, &events).map_err(TestCaseError::fail)?;

        // k climbs by one per switch and restarts at 1 after switch-back;
        // LO utilization never rises within a busy window.
        let n_hi = set.hi_indices().len();
        let mut k = 0;
        let mut u = set.u_lo_lo().clone();
        for e in &events {
            match e {
                SimEvent::ModeSwitch { k: next, u_lo_k, .. } => {
                    prop_assert_eq!(*next, k + 1);
                    prop_assert!(*next <= n_hi);
                    prop_assert!(*u_lo_k <= u);
                    k = *next;
                    u = u_lo_k.clone();
                }
                SimEvent::SwitchBack { .. } => {
                    prop_assert!(k > 0);
                    k = 0;
                    u = set.u_lo_lo().clone();
                }
                _ => {}
            }
        }

        // After a switch-back the next LO arrival gets its full budget.
        let mut after_back = false;
        for e in &events {
            match e {
                SimEvent::SwitchBack { .. } => after_back = true,
                SimEvent::ModeSwitch { .. } => after_back = false,
                SimEvent::Arrival { task, budget, .. } if after_back => {
                    let t = set.task(set.index_of(task).unwrap());
                    if !t.is_hi() {
                        prop_assert_eq!(budget, &t.wcet_lo);
                    }
                }
                _ => {}
            }
        }

        for (k, samples) in &report.per_k_service_samples {
            for sample in samples {
                prop_assert!(sample.level >= sample.floor && sample.level <= Rational::one(), "k={} {:?}", k, sample);
                if sample.suspended {
                    prop_assert!(sample.prior.as_ref().is_some_and(|p| sample.level < *p));
                }
            }
        }
    }
}
