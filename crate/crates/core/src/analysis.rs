//! Probe traces: joining, latency distributions, ICI clusters and summary statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::percentile_bound;
use crate::time::TimeNs;

/// One probe dump line: sequence number and egress timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub seq: u32,
    pub egress_ns: TimeNs,
}

pub const PROBE_HEADER: &str = "seq,egress_ns";
pub const DISTRIBUTION_HEADER: &str = "x_ns,probability";
pub const CLUSTER_HEADER: &str = "k,fraction";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: expected header `{expected}`")]
    Header { path: String, expected: &'static str },
    #[error("{path}: negative timestamp on line {line}")]
    Negative { path: String, line: u64 },
}

/// Reads a probe CSV with header `seq,egress_ns`.
pub fn read_probes(path: &Path) -> Result<Vec<ProbeRecord>, TraceError> {
    let shown = path.display().to_string();
    let csv_err = |source| TraceError::Csv {
        path: shown.clone(),
        source,
    };
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    if rd.headers().map_err(csv_err)? != vec!["seq", "egress_ns"] {
        return Err(TraceError::Header {
            path: shown,
            expected: PROBE_HEADER,
        });
    }
    let mut out = Vec::new();
    for rec in rd.deserialize::<(u32, u64)>() {
        let (seq, ts) = rec.map_err(csv_err)?;
        let ts = i64::try_from(ts).map_err(|_| TraceError::Negative {
            path: shown.clone(),
            line: out.len() as u64 + 2,
        })?;
        out.push(ProbeRecord {
            seq,
            egress_ns: TimeNs(ts),
        });
    }
    Ok(out)
}

/// Probe CSV text. Negative timestamps cannot be represented and are a caller bug.
pub fn format_probes(records: &[ProbeRecord]) -> String {
    let mut s = String::with_capacity(24 * records.len() + 16);
    s.push_str(PROBE_HEADER);
    s.push('\n');
    for r in records {
        assert!(!r.egress_ns.is_negative(), "negative probe timestamp");
        let _ = writeln!(s, "{},{}", r.seq, r.egress_ns.ns());
    }
    s
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub cycle: Option<TimeNs>,
    pub delta: Option<TimeNs>,
    pub window: Option<TimeNs>,
    pub run_id: Option<String>,
}

/// Per-packet latencies sorted by sequence number.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySeries {
    pub points: Vec<(u32, TimeNs)>,
    pub meta: SeriesMeta,
}

impl LatencySeries {
    pub fn from_points(mut points: Vec<(u32, TimeNs)>) -> Self {
        points.sort_unstable();
        LatencySeries {
            points,
            meta: SeriesMeta::default(),
        }
    }

    pub fn delays(&self) -> impl Iterator<Item = TimeNs> + '_ {
        self.points.iter().map(|p| p.1)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JoinError {
    #[error("sequence number {seq} appears twice in the {side} trace")]
    DuplicateSeq { side: &'static str, seq: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Join {
    pub series: LatencySeries,
    /// Sequence numbers present in only one trace.
    pub losses: Vec<u32>,
    /// Pairs with `sl < ms`, excluded from the series.
    pub negative: Vec<(u32, TimeNs)>,
}

fn index(side: &'static str, records: &[ProbeRecord]) -> Result<BTreeMap<u32, TimeNs>, JoinError> {
    let mut m = BTreeMap::new();
    for r in records {
        if m.insert(r.seq, r.egress_ns).is_some() {
            return Err(JoinError::DuplicateSeq { side, seq: r.seq });
        }
    }
    Ok(m)
}

/// Inner join on sequence number, `D_emp = sl - ms`.
pub fn join_probes(ms: &[ProbeRecord], sl: &[ProbeRecord]) -> Result<Join, JoinError> {
    let ms = index("MS", ms)?;
    let sl = index("SL", sl)?;
    let mut points = Vec::new();
    let mut negative = Vec::new();
    let mut losses = BTreeSet::new();
    for (&seq, &t_ms) in &ms {
        match sl.get(&seq) {
            Some(&t_sl) if t_sl >= t_ms => points.push((seq, t_sl - t_ms)),
            Some(&t_sl) => negative.push((seq, t_sl - t_ms)),
            None => {
                losses.insert(seq);
            }
        }
    }
    losses.extend(sl.keys().filter(|s| !ms.contains_key(s)));
    Ok(Join {
        series: LatencySeries::from_points(points),
        losses: losses.into_iter().collect(),
        negative,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("latency series is empty")]
    EmptySeries,
    #[error("grid step must be positive")]
    BadGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Cdf,
    Ccdf,
}

/// Empirical CDF or CCDF sampled on multiples of `step` covering the data range.
pub fn distribution(series: &LatencySeries, mode: Mode, step: TimeNs) -> Result<Vec<(TimeNs, f64)>, AnalysisError> {
    if step <= TimeNs::ZERO {
        return Err(AnalysisError::BadGrid);
    }
    let mut d: Vec<TimeNs> = series.delays().collect();
    if d.is_empty() {
        return Err(AnalysisError::EmptySeries);
    }
    d.sort_unstable();
    let n = d.len() as f64;
    let lo = d[0].div_floor(step);
    let hi = -((-d[d.len() - 1].ns()).div_euclid(step.ns()));
    let mut out = Vec::with_capacity((hi - lo + 1) as usize);
    let mut below = 0usize;
    for i in lo..=hi {
        let x = step * i;
        while below < d.len() && d[below] <= x {
            below += 1;
        }
        let cdf = below as f64 / n;
        out.push((
            x,
            match mode {
                Mode::Cdf => cdf,
                Mode::Ccdf => 1.0 - cdf,
            },
        ));
    }
    Ok(out)
}

pub fn format_distribution(points: &[(TimeNs, f64)]) -> String {
    let mut s = String::from(DISTRIBUTION_HEADER);
    s.push('\n');
    for (x, y) in points {
        let _ = writeln!(s, "{},{}", x.ns(), y);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IciReport {
    pub baseline: TimeNs,
    /// `(k, fraction)` in increasing `k`.
    pub clusters: Vec<(i64, f64)>,
    pub unclassified: f64,
}

impl IciReport {
    pub fn fraction(&self, k: i64) -> f64 {
        self.clusters.iter().find(|c| c.0 == k).map_or(0.0, |c| c.1)
    }

    /// Fraction of packets that landed one or more cycles late.
    pub fn jumped(&self) -> f64 {
        self.clusters.iter().filter(|c| c.0 >= 1).fold(0.0, |a, c| a + c.1)
    }
}

/// Assigns each latency to `k = round((d - baseline) / T_C)`; latencies further than `tol`
/// from `baseline + k*T_C` stay unclassified. The baseline is the median of the cluster
/// within `T_C / 4` of the minimum. `tol` defaults to `T_C / 4`.
pub fn detect_ici_jumps(series: &LatencySeries, cycle: TimeNs, tol: Option<TimeNs>) -> Result<IciReport, AnalysisError> {
    if cycle <= TimeNs::ZERO {
        return Err(AnalysisError::BadGrid);
    }
    let mut d: Vec<TimeNs> = series.delays().collect();
    if d.is_empty() {
        return Err(AnalysisError::EmptySeries);
    }
    d.sort_unstable();
    let edge = d[0] + TimeNs(cycle.ns() / 4);
    let low = d.partition_point(|&x| x <= edge);
    let baseline = d[(low - 1) / 2];
    let tol = tol.unwrap_or(TimeNs(cycle.ns() / 4));

    let n = d.len() as f64;
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    let mut unclassified = 0usize;
    for x in d {
        let off = (x - baseline).ns();
        let k = (off as f64 / cycle.ns() as f64).round() as i64;
        if (off - k * cycle.ns()).abs() < tol.ns() {
            *counts.entry(k).or_default() += 1;
        } else {
            unclassified += 1;
        }
    }
    Ok(IciReport {
        baseline,
        clusters: counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect(),
        unclassified: unclassified as f64 / n,
    })
}

pub fn format_clusters(report: &IciReport) -> String {
    let mut s = String::from(CLUSTER_HEADER);
    s.push('\n');
    for (k, f) in &report.clusters {
        let _ = writeln!(s, "{k},{f}");
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean_ns: f64,
    pub min: TimeNs,
    pub max: TimeNs,
    pub p50: TimeNs,
    pub p99: TimeNs,
    pub p999: TimeNs,
}

pub fn summarize(series: &LatencySeries) -> Result<Summary, AnalysisError> {
    let d: Vec<TimeNs> = series.delays().collect();
    if d.is_empty() {
        return Err(AnalysisError::EmptySeries);
    }
    let pct = |p| percentile_bound(&d, p).expect("non-empty samples, valid p");
    let sum: i128 = d.iter().map(|t| t.ns() as i128).sum();
    Ok(Summary {
        count: d.len(),
        mean_ns: sum as f64 / d.len() as f64,
        min: *d.iter().min().unwrap(),
        max: *d.iter().max().unwrap(),
        p50: pct(0.5),
        p99: pct(0.99),
        p999: pct(0.999),
    })
}
