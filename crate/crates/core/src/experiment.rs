//! Batch experiments: random task sets per utilization bound, off-line
//! acceptance per strategy, and simulation of the sets every strategy
//! accepts on one shared trace per set.
//!
//! Seeds: set `j` of bound `i` is generated from
//! `mix_seed([master, i, j, attempt])` and its trace from
//! `mix_seed([master, i, j, TRACE_STREAM])`, so any single set can be
//! re-run in isolation.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{analyze, AnalysisContext};
use crate::model::McTaskSet;
use crate::rational::Rational;
use crate::sim::{simulate, SimError, SimReport, ServiceSample};
use crate::tracegen::{generate_task_set, generate_trace, mix_seed, GenerationError, GeneratorParams, WorkloadTrace};
use crate::tuning::{uniform_next_level, StrategyKind, TuningError};

const TRACE_STREAM: u64 = 0x7472_6163_65;

/// Attempts per set when a fixed HI task count is requested.
const HI_COUNT_ATTEMPTS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub u_bounds: Vec<Rational>,
    pub sets_per_bound: usize,
    pub horizon: Rational,
    pub overrun_prob: f64,
    pub strategies: Vec<StrategyKind>,
    pub master_seed: u64,
    /// Keep only generated sets with exactly this many HI tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi_task_count: Option<usize>,
    /// Generator settings; `u_bound` and `seed` are overridden per set.
    #[serde(default)]
    pub generator: GeneratorParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            u_bounds: ["3/4", "4/5", "17/20", "9/10"].iter().map(|s| s.parse().unwrap()).collect(),
            sets_per_bound: 50,
            horizon: Rational::from_integer(1_000_000),
            overrun_prob: 0.1,
            strategies: vec![StrategyKind::Uniform, StrategyKind::Drop, StrategyKind::Static],
            master_seed: 1,
            hi_task_count: None,
            generator: GeneratorParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self, ExperimentError> {
        let config: ExperimentConfig = serde_json::from_str(s).map_err(|e| ExperimentError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_owned()));
        if self.u_bounds.is_empty() || self.u_bounds.iter().any(|u| !u.is_positive()) {
            return bad("u_bounds must be a nonempty list of positive values");
        }
        if self.sets_per_bound == 0 {
            return bad("sets_per_bound must be positive");
        }
        if !self.horizon.is_positive() {
            return bad("horizon must be positive");
        }
        if !(0.0..=1.0).contains(&self.overrun_prob) {
            return bad("overrun_prob must be in [0, 1]");
        }
        if self.strategies.is_empty() {
            return bad("strategies must not be empty");
        }
        let mut generator = self.generator.clone();
        generator.u_bound = self.u_bounds[0].clone();
        generator.validate().map_err(|e| ExperimentError::Config(e.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("set {set} of u_bound {u_bound}: {source}")]
    Generation { u_bound: Rational, set: usize, source: GenerationError },
    #[error("set {set} of u_bound {u_bound}: no set with {wanted} HI tasks in {HI_COUNT_ATTEMPTS} attempts")]
    HiCount { u_bound: Rational, set: usize, wanted: usize },
    #[error("set {set} of u_bound {u_bound}, strategy {strategy}: {source}")]
    Simulation { u_bound: Rational, set: usize, strategy: StrategyKind, source: SimError },
    #[error("set {set} of u_bound {u_bound}: strategies saw different traces")]
    TraceMismatch { u_bound: Rational, set: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ExperimentError {
    /// Errors that indicate a broken invariant rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(
            self,
            ExperimentError::Simulation { source: SimError::Inadmissible { .. } | SimError::Tuning(_), .. }
                | ExperimentError::TraceMismatch { .. }
        )
    }
}

/// Outcome of one generated set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SetOutcome {
    pub u_bound: Rational,
    pub set_index: usize,
    pub seed: u64,
    pub tasks: usize,
    pub hi_tasks: usize,
    pub accepted: BTreeMap<StrategyKind, bool>,
    /// Present when every strategy accepted the set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_fingerprint: Option<u64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub runs: BTreeMap<StrategyKind, RunMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub pfj: f64,
    pub context_switches: u64,
    pub hi_deadline_misses: u64,
    pub lo_budget_misses: u64,
    pub mode_switches: usize,
    pub max_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub u_bound: Rational,
    pub strategy: StrategyKind,
    pub sets: usize,
    pub accepted: usize,
    pub acceptance_ratio: f64,
    /// Sets accepted by every strategy, over which the means are taken.
    pub common_schedulable: usize,
    pub mean_pfj: Option<f64>,
    pub mean_ctx_switches: Option<f64>,
    pub hi_deadline_misses: u64,
    pub lo_budget_misses: u64,
}

/// Pooled service samples of one `k`, kept as exact value counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LevelHistogram {
    counts: BTreeMap<Rational, u64>,
    total: u64,
    degraded: u64,
}

impl LevelHistogram {
    pub fn add(&mut self, level: &Rational) {
        *self.counts.entry(level.clone()).or_default() += 1;
        self.total += 1;
        if *level < Rational::one() {
            self.degraded += 1;
        }
    }

    pub fn merge(&mut self, other: &LevelHistogram) {
        for (level, n) in &other.counts {
            *self.counts.entry(level.clone()).or_default() += n;
        }
        self.total += other.total;
        self.degraded += other.degraded;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn degraded(&self) -> u64 {
        self.degraded
    }

    pub fn min(&self) -> Option<&Rational> {
        self.counts.keys().next()
    }

    pub fn max(&self) -> Option<&Rational> {
        self.counts.keys().next_back()
    }

    /// The `rank`-th smallest sample (0-based).
    fn order_stat(&self, rank: u64) -> &Rational {
        let mut seen = 0;
        for (level, n) in &self.counts {
            seen += n;
            if rank < seen {
                return level;
            }
        }
        panic!("rank {rank} out of range for {} samples", self.total)
    }

    /// Quantile with linear interpolation between order statistics.
    pub fn quantile(&self, p: f64) -> Option<f64> {
        if self.total == 0 {
            return None;
        }
        let pos = p.clamp(0.0, 1.0) * (self.total - 1) as f64;
        let lo = pos.floor() as u64;
        let hi = pos.ceil() as u64;
        let a = self.order_stat(lo).to_f64();
        let b = self.order_stat(hi).to_f64();
        Some(a + (b - a) * (pos - lo as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegradationRow {
    pub k: usize,
    pub samples: u64,
    pub degraded: u64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Fraction of all degraded samples (over every `k`) taken at this `k`.
    pub job_share: f64,
}

pub fn degradation_rows(histograms: &BTreeMap<usize, LevelHistogram>) -> Vec<DegradationRow> {
    let all_degraded: u64 = histograms.values().map(|h| h.degraded).sum();
    histograms
        .iter()
        .filter(|(_, h)| h.total > 0)
        .map(|(&k, h)| DegradationRow {
            k,
            samples: h.total,
            degraded: h.degraded,
            min: h.min().unwrap().to_f64(),
            q1: h.quantile(0.25).unwrap(),
            median: h.quantile(0.5).unwrap(),
            q3: h.quantile(0.75).unwrap(),
            max: h.max().unwrap().to_f64(),
            job_share: if all_degraded == 0 { 0.0 } else { h.degraded as f64 / all_degraded as f64 },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub summary: Vec<SummaryRow>,
    /// Pooled service-level distribution per strategy.
    pub degradation: BTreeMap<StrategyKind, Vec<DegradationRow>>,
    pub sets: Vec<SetOutcome>,
}

impl ExperimentResult {
    /// The strategy whose profile goes to `degradation.csv`: uniform when
    /// it was run, otherwise the first configured strategy.
    pub fn profile_strategy(&self) -> StrategyKind {
        if self.config.strategies.contains(&StrategyKind::Uniform) {
            StrategyKind::Uniform
        } else {
            self.config.strategies[0]
        }
    }

    pub fn row(&self, u_bound: &Rational, strategy: StrategyKind) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| &r.u_bound == u_bound && r.strategy == strategy)
    }
}

struct SetRun {
    outcome: SetOutcome,
    histograms: BTreeMap<StrategyKind, BTreeMap<usize, LevelHistogram>>,
}

fn generate_for(config: &ExperimentConfig, ub_idx: usize, set_idx: usize) -> Result<(McTaskSet, u64), ExperimentError> {
    let u_bound = &config.u_bounds[ub_idx];
    let attempts = if config.hi_task_count.is_some() { HI_COUNT_ATTEMPTS } else { 1 };
    for attempt in 0..attempts {
        let seed = mix_seed(&[config.master_seed, ub_idx as u64, set_idx as u64, attempt]);
        let params = GeneratorParams { u_bound: u_bound.clone(), seed, ..config.generator.clone() };
        let set = generate_task_set(&params).map_err(|source| ExperimentError::Generation {
            u_bound: u_bound.clone(),
            set: set_idx,
            source,
        })?;
        match config.hi_task_count {
            Some(n) if set.hi_indices().len() != n => continue,
            _ => return Ok((set, seed)),
        }
    }
    Err(ExperimentError::HiCount { u_bound: u_bound.clone(), set: set_idx, wanted: config.hi_task_count.unwrap() })
}

/// Off-line acceptance of `strategy`. All strategies share the
/// schedulability test; the static baseline is gated with no mandatory
/// service.
pub fn accepts(set: &McTaskSet, strategy: StrategyKind) -> bool {
    let u_man = match strategy {
        StrategyKind::Static => Some(Rational::zero()),
        StrategyKind::Uniform | StrategyKind::Drop => None,
    };
    analyze(set, u_man).schedulable()
}

fn run_set(config: &ExperimentConfig, ub_idx: usize, set_idx: usize) -> Result<SetRun, ExperimentError> {
    let u_bound = config.u_bounds[ub_idx].clone();
    let (set, seed) = generate_for(config, ub_idx, set_idx)?;
    let accepted: BTreeMap<StrategyKind, bool> = config.strategies.iter().map(|&s| (s, accepts(&set, s))).collect();
    let mut outcome = SetOutcome {
        u_bound: u_bound.clone(),
        set_index: set_idx,
        seed,
        tasks: set.len(),
        hi_tasks: set.hi_indices().len(),
        accepted,
        trace_fingerprint: None,
        runs: BTreeMap::new(),
    };
    let mut histograms = BTreeMap::new();
    if !outcome.accepted.values().all(|&a| a) {
        return Ok(SetRun { outcome, histograms });
    }

    let ctx = AnalysisContext::for_set(&set).expect("accepted sets have an analysis context");
    let trace_seed = mix_seed(&[config.master_seed, ub_idx as u64, set_idx as u64, TRACE_STREAM]);
    let trace = generate_trace(&set, &config.horizon, config.overrun_prob, trace_seed);
    let fingerprint = trace.fingerprint();
    outcome.trace_fingerprint = Some(fingerprint);
    for &strategy in &config.strategies {
        let report = simulate(&set, &ctx, &trace, strategy).map_err(|source| ExperimentError::Simulation {
            u_bound: u_bound.clone(),
            set: set_idx,
            strategy,
            source,
        })?;
        if trace.fingerprint() != fingerprint {
            return Err(ExperimentError::TraceMismatch { u_bound, set: set_idx });
        }
        let mut per_k: BTreeMap<usize, LevelHistogram> = BTreeMap::new();
        for (&k, samples) in &report.per_k_service_samples {
            let h = per_k.entry(k).or_default();
            for s in samples {
                h.add(&s.level);
            }
        }
        histograms.insert(strategy, per_k);
        outcome.runs.insert(
            strategy,
            RunMetrics {
                pfj: report.pfj,
                context_switches: report.context_switches,
                hi_deadline_misses: report.hi_deadline_misses,
                lo_budget_misses: report.lo_budget_misses,
                mode_switches: report.mode_switch_events.len(),
                max_k: report.max_k,
            },
        );
    }
    Ok(SetRun { outcome, histograms })
}

/// Runs the whole experiment. Sets are processed in parallel on the current
/// rayon pool; results do not depend on the pool size.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    config.validate()?;
    let jobs: Vec<(usize, usize)> = (0..config.u_bounds.len())
        .flat_map(|i| (0..config.sets_per_bound).map(move |j| (i, j)))
        .collect();
    let runs: Vec<SetRun> = jobs
        .par_iter()
        .map(|&(i, j)| run_set(config, i, j))
        .collect::<Result<_, _>>()?;

    let mut summary = Vec::new();
    for u_bound in &config.u_bounds {
        let group: Vec<&SetOutcome> = runs.iter().map(|r| &r.outcome).filter(|o| &o.u_bound == u_bound).collect();
        let common: Vec<&&SetOutcome> = group.iter().filter(|o| !o.runs.is_empty()).collect();
        for &strategy in &config.strategies {
            let accepted = group.iter().filter(|o| o.accepted[&strategy]).count();
            let metrics: Vec<&RunMetrics> = common.iter().map(|o| &o.runs[&strategy]).collect();
            let mean = |f: &dyn Fn(&RunMetrics) -> f64| {
                (!metrics.is_empty()).then(|| metrics.iter().map(|m| f(m)).sum::<f64>() / metrics.len() as f64)
            };
            summary.push(SummaryRow {
                u_bound: u_bound.clone(),
                strategy,
                sets: group.len(),
                accepted,
                acceptance_ratio: accepted as f64 / group.len() as f64,
                common_schedulable: common.len(),
                mean_pfj: mean(&|m| m.pfj),
                mean_ctx_switches: mean(&|m| m.context_switches as f64),
                hi_deadline_misses: metrics.iter().map(|m| m.hi_deadline_misses).sum(),
                lo_budget_misses: metrics.iter().map(|m| m.lo_budget_misses).sum(),
            });
        }
    }

    let mut pooled: BTreeMap<StrategyKind, BTreeMap<usize, LevelHistogram>> = BTreeMap::new();
    for run in &runs {
        for (&strategy, per_k) in &run.histograms {
            let target = pooled.entry(strategy).or_default();
            for (&k, h) in per_k {
                target.entry(k).or_default().merge(h);
            }
        }
    }
    let degradation = pooled.iter().map(|(&s, h)| (s, degradation_rows(h))).collect();

    Ok(ExperimentResult {
        config: config.clone(),
        summary,
        degradation,
        sets: runs.into_iter().map(|r| r.outcome).collect(),
    })
}

/// Formats like C's `%.6g`.
pub fn format_g6(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    let strip = |s: &str| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_owned()
        } else {
            s.to_owned()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", strip(mantissa), exp.abs())
    } else {
        strip(&format!("{v:.*}", (5 - exp) as usize))
    }
}

fn opt_g6(v: Option<f64>) -> String {
    v.map(format_g6).unwrap_or_else(|| "nan".into())
}

pub fn write_summary_csv<W: io::Write>(result: &ExperimentResult, out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["u_bound", "strategy", "acceptance_ratio", "mean_pfj", "mean_ctx_switches"])?;
    for row in &result.summary {
        w.write_record([
            format_g6(row.u_bound.to_f64()),
            row.strategy.to_string(),
            format_g6(row.acceptance_ratio),
            opt_g6(row.mean_pfj),
            opt_g6(row.mean_ctx_switches),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_degradation_csv<W: io::Write>(rows: &[DegradationRow], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "min", "q1", "median", "q3", "max", "job_share"])?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            format_g6(r.min),
            format_g6(r.q1),
            format_g6(r.median),
            format_g6(r.q3),
            format_g6(r.max),
            format_g6(r.job_share),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `summary.csv`, `degradation.csv` and `result.json` into `dir`.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir)?;
    write_summary_csv(result, std::fs::File::create(dir.join("summary.csv"))?)?;
    let rows = result.degradation.get(&result.profile_strategy()).map(Vec::as_slice).unwrap_or(&[]);
    write_degradation_csv(rows, std::fs::File::create(dir.join("degradation.csv"))?)?;
    let json = serde_json::to_string_pretty(result).expect("results serialize");
    std::fs::write(dir.join("result.json"), json + "\n")?;
    Ok(())
}

/// Samples of one `k` with the analytic bounds of the uniform strategy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileLevel {
    pub k: usize,
    pub samples: Vec<ServiceSample>,
    /// Worst-case uniform level after `k` switches.
    pub lower: Rational,
    /// Worst-case uniform level after `k − 1` switches (1 at `k = 0`).
    pub upper: Rational,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegradationProfile {
    pub strategy: StrategyKind,
    pub levels: Vec<ProfileLevel>,
}

/// A sample outside its bounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundViolation {
    pub k: usize,
    pub sample: ServiceSample,
}

impl DegradationProfile {
    /// Every sample must lie in `[z^k, 1]`, where `z^k` is the level in
    /// force when it was taken; suspended samples must also lie below the
    /// level they were suspended from.
    pub fn violations(&self) -> Vec<BoundViolation> {
        let one = Rational::one();
        let mut out = Vec::new();
        for level in &self.levels {
            for s in &level.samples {
                let mut ok = s.level >= s.floor && s.level <= one;
                if s.suspended {
                    ok &= s.prior.as_ref().is_some_and(|p| s.level < *p);
                }
                if !ok {
                    out.push(BoundViolation { k: level.k, sample: s.clone() });
                }
            }
        }
        out
    }

    pub fn histograms(&self) -> BTreeMap<usize, LevelHistogram> {
        self.levels
            .iter()
            .map(|l| {
                let mut h = LevelHistogram::default();
                l.samples.iter().for_each(|s| h.add(&s.level));
                (l.k, h)
            })
            .collect()
    }
}

/// Worst-case uniform levels `z^0..=z^{|HI|}`: switches taken in order of
/// increasing discriminant, which lowers the level fastest.
pub fn uniform_level_lines(ctx: &AnalysisContext, set: &McTaskSet) -> Result<Vec<Rational>, TuningError> {
    let mut hi = set.hi_indices().to_vec();
    hi.sort_by(|&a, &b| ctx.phi(a).cmp(&ctx.phi(b)).then(a.cmp(&b)));
    let mut lines = vec![Rational::one()];
    for &i in &hi {
        let next = uniform_next_level(ctx, set, lines.last().unwrap(), i)?;
        lines.push(next);
    }
    Ok(lines)
}

/// Collects per-`k` samples from running `strategy` on every trace.
pub fn degradation_profile(
    set: &McTaskSet,
    ctx: &AnalysisContext,
    traces: &[WorkloadTrace],
    strategy: StrategyKind,
) -> Result<DegradationProfile, SimError> {
    let lines = uniform_level_lines(ctx, set)?;
    let mut pooled: BTreeMap<usize, Vec<ServiceSample>> = BTreeMap::new();
    for trace in traces {
        let report: SimReport = simulate(set, ctx, trace, strategy)?;
        for (k, samples) in report.per_k_service_samples {
            pooled.entry(k).or_default().extend(samples);
        }
    }
    let levels = pooled
        .into_iter()
        .map(|(k, samples)| ProfileLevel {
            k,
            samples,
            lower: lines.get(k).cloned().unwrap_or_else(Rational::zero),
            upper: if k == 0 { Rational::one() } else { lines.get(k - 1).cloned().unwrap_or_else(Rational::zero) },
        })
        .collect();
    Ok(DegradationProfile { strategy, levels })
}
