//! Concordance, per-horizon discrimination, bootstrap intervals and
//! stratified reports.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipelines::{Density, StrategyKind};
use crate::risk::{RiskOutput, SurvivalLabel};

pub const DEFAULT_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub risk: RiskOutput,
    pub label: SurvivalLabel,
    pub density: Option<Density>,
    pub strategy: StrategyKind,
}

impl EvalRecord {
    fn prob_at(&self, t: usize) -> f64 {
        self.risk.prob[t - 1]
    }

    /// Horizon (1-based) at which the event is counted.
    fn event_horizon(&self) -> Option<usize> {
        match self.label.years_to_cancer {
            Some(ttc) if self.label.is_case() => Some((ttc as usize).max(1)),
            _ => None,
        }
    }

    fn y(&self, t: usize) -> bool {
        self.label.y[t - 1] > 0.5
    }

    fn observed(&self, t: usize) -> bool {
        self.label.delta[t - 1] > 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricWithCI {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub resamples: usize,
    pub undefined: usize,
}

fn check_horizon(records: &[EvalRecord], t: usize) -> Result<()> {
    for r in records {
        if t == 0 || t > r.risk.prob.len() || t > r.label.y.len() {
            return Err(Error::config(format!("horizon {t} outside 1..={}", r.risk.prob.len().min(r.label.y.len()))));
        }
    }
    Ok(())
}

fn concordance(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else if a == b {
        0.5
    } else {
        0.0
    }
}

/// Harrell's concordance on the discrete horizon grid.
pub fn c_index(records: &[EvalRecord]) -> Result<f64> {
    let mut num = 0.0;
    let mut pairs = 0usize;
    for (i, ri) in records.iter().enumerate() {
        let Some(t) = ri.event_horizon() else { continue };
        check_horizon(std::slice::from_ref(ri), t)?;
        for (j, rj) in records.iter().enumerate() {
            if i == j || !rj.observed(t) || rj.y(t) {
                continue;
            }
            num += concordance(ri.prob_at(t), rj.prob_at(t));
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::UndefinedMetric("c-index: no comparable pairs".into()));
    }
    Ok(num / pairs as f64)
}

/// Mann-Whitney AUC of prob(t) among records observed at `t`.
pub fn auc_at_horizon(records: &[EvalRecord], t: usize) -> Result<f64> {
    check_horizon(records, t)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for r in records.iter().filter(|r| r.observed(t)) {
        if r.y(t) {
            pos.push(r.prob_at(t));
        } else {
            neg.push(r.prob_at(t));
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedMetric(format!("auc at year {t}: single class")));
    }
    // midranks over the pooled scores
    let mut pooled: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += pooled[i..=j].iter().filter(|p| p.1).count() as f64 * mid;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecisionRecall {
    /// `None` when nothing is predicted positive.
    pub precision: Option<f64>,
    /// `None` when there are no positives.
    pub recall: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn precision_recall_at_horizon(records: &[EvalRecord], t: usize, threshold: f64) -> Result<PrecisionRecall> {
    check_horizon(records, t)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    let mut seen = false;
    for r in records.iter().filter(|r| r.observed(t)) {
        seen = true;
        match (r.prob_at(t) >= threshold, r.y(t)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    if !seen {
        return Err(Error::UndefinedMetric(format!("precision/recall at year {t}: no observed records")));
    }
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    Ok(PrecisionRecall { precision: ratio(tp, fp), recall: ratio(tp, fn_), tp, fp, fn_, tn })
}

/// Precision and recall over a list of thresholds.
pub fn threshold_sweep(records: &[EvalRecord], t: usize, thresholds: &[f64]) -> Result<Vec<(f64, PrecisionRecall)>> {
    thresholds.iter().map(|&th| Ok((th, precision_recall_at_horizon(records, t, th)?))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    CIndex,
    Auc(usize),
    Precision { t: usize, threshold: f64 },
    Recall { t: usize, threshold: f64 },
}

impl Metric {
    pub fn compute(&self, records: &[EvalRecord]) -> Result<f64> {
        let undefined = |what: &str| Error::UndefinedMetric(what.to_string());
        match *self {
            Metric::CIndex => c_index(records),
            Metric::Auc(t) => auc_at_horizon(records, t),
            Metric::Precision { t, threshold } => {
                precision_recall_at_horizon(records, t, threshold)?.precision.ok_or_else(|| undefined("precision: no predicted positives"))
            }
            Metric::Recall { t, threshold } => {
                precision_recall_at_horizon(records, t, threshold)?.recall.ok_or_else(|| undefined("recall: no positives"))
            }
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::CIndex => write!(f, "c_index"),
            Metric::Auc(t) => write!(f, "auc_{t}y"),
            Metric::Precision { t, threshold } => write!(f, "precision_{t}y@{threshold}"),
            Metric::Recall { t, threshold } => write!(f, "recall_{t}y@{threshold}"),
        }
    }
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap over records. Resample `k` draws from its own
/// ChaCha stream, so the result does not depend on thread scheduling.
pub fn bootstrap_ci(records: &[EvalRecord], metric: Metric, resamples: usize, seed: u64) -> Result<MetricWithCI> {
    if resamples == 0 {
        return Err(Error::config("resamples must be >= 1"));
    }
    let point = metric.compute(records)?;
    let n = records.len();
    let draws: Vec<Option<f64>> = (0..resamples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let sample: Vec<EvalRecord> = (0..n).map(|_| records[rng.gen_range(0..n)].clone()).collect();
            metric.compute(&sample).ok()
        })
        .collect();
    let mut values: Vec<f64> = draws.iter().flatten().copied().collect();
    let undefined = resamples - values.len();
    if undefined * 2 > resamples {
        return Err(Error::BootstrapInstability { undefined, resamples });
    }
    values.sort_by(f64::total_cmp);
    Ok(MetricWithCI { point, ci_low: quantile(&values, 0.025), ci_high: quantile(&values, 0.975), resamples, undefined })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKey {
    Density,
    Strategy,
    /// Rows are AUC at each horizon 1..=t_max; the metric list is ignored.
    Horizon,
}

impl std::str::FromStr for GroupKey {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "density" => Ok(GroupKey::Density),
            "strategy" => Ok(GroupKey::Strategy),
            "horizon" => Ok(GroupKey::Horizon),
            other => Err(Error::config(format!("unknown group key '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportConfig {
    pub resamples: usize,
    pub seed: u64,
    pub min_group_size: usize,
    /// Groups to report even when empty; others present in the data are
    /// appended.
    pub groups: Vec<String>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { resamples: DEFAULT_RESAMPLES, seed: 0, min_group_size: 10, groups: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub metric: String,
    pub group: String,
    pub point: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n: usize,
    pub note: String,
}

impl ReportRow {
    fn from_result(metric: String, group: String, n: usize, small: bool, res: Result<MetricWithCI>) -> Self {
        let mut note = if small { "small_group".to_string() } else { String::new() };
        match res {
            Ok(m) => ReportRow { metric, group, point: Some(m.point), ci_low: Some(m.ci_low), ci_high: Some(m.ci_high), n, note },
            Err(e) => {
                if !note.is_empty() {
                    note.push(';');
                }
                note.push_str(&format!("undefined: {e}"));
                ReportRow { metric, group, point: None, ci_low: None, ci_high: None, n, note }
            }
        }
    }
}

fn density_group(d: Option<Density>) -> String {
    d.map_or_else(|| "unknown".to_string(), |d| d.to_string())
}

/// Metric table with bootstrap CIs, one row per (group, metric).
pub fn stratified_report(records: &[EvalRecord], key: GroupKey, metrics: &[Metric], cfg: &ReportConfig) -> Vec<ReportRow> {
    let small = |n: usize| n < cfg.min_group_size;
    if key == GroupKey::Horizon {
        let t_max = records.iter().map(|r| r.risk.prob.len()).min().unwrap_or(0);
        return (1..=t_max)
            .map(|t| {
                let res = bootstrap_ci(records, Metric::Auc(t), cfg.resamples, cfg.seed);
                ReportRow::from_result(Metric::Auc(t).to_string(), format!("year_{t}"), records.len(), small(records.len()), res)
            })
            .collect();
    }
    let mut groups: BTreeMap<String, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        let g = match key {
            GroupKey::Density => density_group(r.density),
            _ => r.strategy.to_string(),
        };
        groups.entry(g).or_default().push(r.clone());
    }
    let mut order: Vec<String> = cfg.groups.clone();
    order.extend(groups.keys().filter(|g| !cfg.groups.contains(g)).cloned());
    let mut rows = Vec::new();
    for g in order {
        match groups.get(&g) {
            None => rows.push(ReportRow {
                metric: String::new(),
                group: g.clone(),
                point: None,
                ci_low: None,
                ci_high: None,
                n: 0,
                note: "empty group".into(),
            }),
            Some(members) => {
                for m in metrics {
                    let res = bootstrap_ci(members, *m, cfg.resamples, cfg.seed);
                    rows.push(ReportRow::from_result(m.to_string(), g.clone(), members.len(), small(members.len()), res));
                }
            }
        }
    }
    rows
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Writes rows as CSV with columns metric, group, point, ci_low, ci_high, n, note.
pub fn write_report_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "group", "point", "ci_low", "ci_high", "n", "note"])?;
    for r in rows {
        w.write_record([
            r.metric.clone(),
            r.group.clone(),
            fmt_opt(r.point),
            fmt_opt(r.ci_low),
            fmt_opt(r.ci_high),
            r.n.to_string(),
            r.note.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<report>", e))?;
    Ok(())
}
