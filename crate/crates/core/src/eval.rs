//! Detection accuracy bookkeeping and pipeline latency reports.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use crate::detect::Detection;
use crate::geometry::OrientedBox3D;
use crate::wire::PhaseStamps;

pub const DEFAULT_MATCH_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("no stamped frames to report on")]
    Empty,
    #[error("counts file line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// Always 0: there are no negative proposals to reject.
    pub tn: u64,
    pub ground_truth_total: u64,
}

impl ConfusionCounts {
    /// Counts as tabulated from a ground-truth total; `fn_` is derived.
    pub fn from_totals(tp: u64, fp: u64, ground_truth_total: u64) -> Result<Self, EvalError> {
        if tp > ground_truth_total {
            return Err(EvalError::Domain(format!(
                "tp {tp} exceeds ground truth total {ground_truth_total}"
            )));
        }
        Ok(Self {
            tp,
            fp,
            fn_: ground_truth_total - tp,
            tn: 0,
            ground_truth_total,
        })
    }

    pub fn is_consistent(&self) -> bool {
        self.tp + self.fn_ == self.ground_truth_total
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
        self.ground_truth_total += o.ground_truth_total;
    }
}

/// Greedy one-to-one matching by ascending center ground distance. Ties
/// break by ground-truth index, then detection index.
pub fn match_detections(
    gt: &[OrientedBox3D],
    dets: &[Detection],
    dist_threshold: f64,
) -> Result<ConfusionCounts, EvalError> {
    Ok(match_pairs(gt, dets, dist_threshold)?.0)
}

/// Same as [`match_detections`], also returning the matched `(gt, det)` pairs.
pub fn match_pairs(
    gt: &[OrientedBox3D],
    dets: &[Detection],
    dist_threshold: f64,
) -> Result<(ConfusionCounts, Vec<(usize, usize)>), EvalError> {
    if !(dist_threshold > 0.0 && dist_threshold.is_finite()) {
        return Err(EvalError::Domain(format!(
            "match threshold {dist_threshold} must be positive"
        )));
    }
    let mut cand = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        for (j, d) in dets.iter().enumerate() {
            let dist = g.ground_distance(&d.bbox);
            if dist <= dist_threshold {
                cand.push((dist, i, j));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt.len()];
    let mut det_used = vec![false; dets.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in cand {
        if !gt_used[i] && !det_used[j] {
            gt_used[i] = true;
            det_used[j] = true;
            pairs.push((i, j));
        }
    }
    let tp = pairs.len() as u64;
    let counts = ConfusionCounts {
        tp,
        fp: dets.len() as u64 - tp,
        fn_: gt.len() as u64 - tp,
        tn: 0,
        ground_truth_total: gt.len() as u64,
    };
    Ok((counts, pairs))
}

/// A ratio, or a marker for a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Defined(f64),
    Undefined,
}

impl Metric {
    fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            Metric::Undefined
        } else {
            Metric::Defined(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Metric::Defined(v) => Some(v),
            Metric::Undefined => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Defined(v) => write!(f, "{:.2}%", v * 100.0),
            Metric::Undefined => f.write_str("undefined"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub precision: Metric,
    pub recall: Metric,
    /// Missed ground truth over all ground truth.
    pub miss: Metric,
}

pub fn compute_metrics(c: &ConfusionCounts) -> MetricReport {
    MetricReport {
        precision: Metric::ratio(c.tp, c.tp + c.fp),
        recall: Metric::ratio(c.tp, c.ground_truth_total),
        miss: Metric::ratio(c.fn_, c.ground_truth_total),
    }
}

/// Parses `key = value` counts (`tp`, `fp`, `gt`; optional `fn`).
pub fn parse_counts(text: &str) -> Result<ConfusionCounts, EvalError> {
    let mut vals: HashMap<String, u64> = HashMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with('[') {
            continue;
        }
        let (key, val) = line
            .split_once(['=', ':'])
            .ok_or_else(|| EvalError::Parse {
                line: k + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
        let key = key.trim().to_ascii_lowercase();
        let key = match key.as_str() {
            "ground_truth" | "ground_truth_total" | "gt" => "gt".to_string(),
            "fn_" => "fn".to_string(),
            _ => key,
        };
        if !["tp", "fp", "gt", "fn", "tn"].contains(&key.as_str()) {
            return Err(EvalError::Parse {
                line: k + 1,
                message: format!("unknown key {key:?}"),
            });
        }
        let v = val.trim().parse::<u64>().map_err(|e| EvalError::Parse {
            line: k + 1,
            message: format!("{key}: {e}"),
        })?;
        vals.insert(key, v);
    }
    let need = |k: &str| {
        vals.get(k).copied().ok_or(EvalError::Parse {
            line: 0,
            message: format!("missing key {k:?}"),
        })
    };
    let tp = need("tp")?;
    let fp = need("fp")?;
    let gt = match (vals.get("gt"), vals.get("fn")) {
        (Some(&g), _) => g,
        (None, Some(&f)) => tp + f,
        (None, None) => return Err(need("gt").unwrap_err()),
    };
    let c = ConfusionCounts::from_totals(tp, fp, gt)?;
    if let Some(&f) = vals.get("fn") {
        if f != c.fn_ {
            return Err(EvalError::Domain(format!(
                "fn {f} inconsistent with gt - tp = {}",
                c.fn_
            )));
        }
    }
    Ok(c)
}

/// Clock domain (one per process) each stamp was taken in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClockDomains {
    pub sensor: u32,
    pub edge_in: u32,
    pub edge_out: u32,
    pub onboard: u32,
}

impl Default for ClockDomains {
    /// Sensor and edge share the edge host's clock; onboard has its own.
    fn default() -> Self {
        Self {
            sensor: 0,
            edge_in: 0,
            edge_out: 0,
            onboard: 1,
        }
    }
}

impl ClockDomains {
    pub fn single() -> Self {
        Self {
            sensor: 0,
            edge_in: 0,
            edge_out: 0,
            onboard: 0,
        }
    }
}

/// Per-frame durations of the edge-side stages, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub preprocessing: f64,
    pub detection: f64,
    pub tracking: f64,
    pub geolocalization: f64,
    pub encoding: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.preprocessing + self.detection + self.tracking + self.geolocalization + self.encoding
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseStat {
    pub median_ms: f64,
    pub p95_ms: f64,
    pub samples: usize,
    /// Endpoints lie in different clock domains; offsets are not removed.
    pub skew_uncertain: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    /// Sensor to edge ingest.
    pub phase1: Option<PhaseStat>,
    /// Edge processing.
    pub phase2: Option<PhaseStat>,
    /// Edge output to onboard receipt.
    pub phase3: Option<PhaseStat>,
    /// Sum of the phase medians.
    pub total_ms: f64,
    pub total_skew_uncertain: bool,
    /// Median per-stage durations in ms, in pipeline order.
    pub stages_ms: Vec<(&'static str, f64)>,
    pub frames: usize,
    pub throughput_hz: Option<f64>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn stat(mut xs: Vec<f64>, skew: bool) -> Option<PhaseStat> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    Some(PhaseStat {
        median_ms: percentile(&xs, 0.5) * 1e3,
        p95_ms: percentile(&xs, 0.95) * 1e3,
        samples: xs.len(),
        skew_uncertain: skew,
    })
}

fn median_ms(xs: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = xs.collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    percentile(&v, 0.5) * 1e3
}

/// Builds the three-phase report. Throughput is frames per second over the
/// span of edge-output stamps.
pub fn latency_report(
    stamps: &[PhaseStamps],
    stage_timers: &[StageTimings],
    domains: ClockDomains,
) -> Result<LatencyReport, EvalError> {
    if stamps.is_empty() {
        return Err(EvalError::Empty);
    }
    let gap = |a: fn(&PhaseStamps) -> Option<f64>, b: fn(&PhaseStamps) -> Option<f64>| {
        stamps
            .iter()
            .filter_map(|s| Some(b(s)? - a(s)?))
            .collect::<Vec<_>>()
    };
    let phase1 = stat(
        gap(|s| s.t_sensor, |s| s.t_edge_in),
        domains.sensor != domains.edge_in,
    );
    let phase2 = stat(
        gap(|s| s.t_edge_in, |s| s.t_edge_out),
        domains.edge_in != domains.edge_out,
    );
    let phase3 = stat(
        gap(|s| s.t_edge_out, |s| s.t_onboard),
        domains.edge_out != domains.onboard,
    );
    let phases = [phase1, phase2, phase3];
    let total_ms = phases.iter().flatten().map(|p| p.median_ms).sum();
    let total_skew_uncertain = phases.iter().flatten().any(|p| p.skew_uncertain);
    let stages_ms = if stage_timers.is_empty() {
        Vec::new()
    } else {
        vec![
            (
                "preprocessing",
                median_ms(stage_timers.iter().map(|s| s.preprocessing)),
            ),
            (
                "detection",
                median_ms(stage_timers.iter().map(|s| s.detection)),
            ),
            (
                "tracking",
                median_ms(stage_timers.iter().map(|s| s.tracking)),
            ),
            (
                "geolocalization",
                median_ms(stage_timers.iter().map(|s| s.geolocalization)),
            ),
            (
                "encoding",
                median_ms(stage_timers.iter().map(|s| s.encoding)),
            ),
        ]
    };
    let mut outs: Vec<f64> = stamps.iter().filter_map(|s| s.t_edge_out).collect();
    outs.sort_by(f64::total_cmp);
    let throughput_hz = match outs.as_slice() {
        [first, .., last] if last > first => Some((outs.len() - 1) as f64 / (last - first)),
        _ => None,
    };
    Ok(LatencyReport {
        phase1,
        phase2,
        phase3,
        total_ms,
        total_skew_uncertain,
        stages_ms,
        frames: stamps.len(),
        throughput_hz,
    })
}

/// Counts frames where a ground-truth agent's matched track id differs from
/// the id it was last matched to.
#[derive(Debug, Clone, Default)]
pub struct IdSwitchCounter {
    last: HashMap<i64, i64>,
    pub switches: u64,
}

impl IdSwitchCounter {
    /// `pairs` holds (ground-truth agent id, track id) matches for one frame.
    pub fn update(&mut self, pairs: &[(i64, i64)]) {
        for &(agent, track) in pairs {
            if track < 0 {
                continue;
            }
            if let Some(prev) = self.last.insert(agent, track) {
                if prev != track {
                    self.switches += 1;
                }
            }
        }
    }
}

fn opt_ms(p: &Option<PhaseStat>) -> String {
    p.map_or_else(|| "n/a".into(), |p| format!("{:.3}", p.median_ms))
}

/// Human-readable report.
pub fn format_report_text(
    counts: Option<&ConfusionCounts>,
    latency: Option<&LatencyReport>,
    id_switches: Option<u64>,
) -> String {
    let mut s = String::new();
    if let Some(c) = counts {
        let m = compute_metrics(c);
        let _ = writeln!(s, "ground truth   {}", c.ground_truth_total);
        let _ = writeln!(s, "true positive  {}", c.tp);
        let _ = writeln!(s, "false positive {}", c.fp);
        let _ = writeln!(s, "false negative {}", c.fn_);
        let _ = writeln!(s, "precision      {}", m.precision);
        let _ = writeln!(s, "recall         {}", m.recall);
        let _ = writeln!(s, "miss           {}", m.miss);
    }
    if let Some(n) = id_switches {
        let _ = writeln!(s, "id switches    {n}");
    }
    if let Some(l) = latency {
        let _ = writeln!(s, "frames         {}", l.frames);
        for (name, p) in [
            ("phase 1 (sensor)", &l.phase1),
            ("phase 2 (edge)", &l.phase2),
            ("phase 3 (cloud+onboard)", &l.phase3),
        ] {
            match p {
                Some(p) => {
                    let _ = writeln!(
                        s,
                        "{name:<24} median {:.3} ms  p95 {:.3} ms{}",
                        p.median_ms,
                        p.p95_ms,
                        if p.skew_uncertain {
                            "  [clock skew uncertain]"
                        } else {
                            ""
                        }
                    );
                }
                None => {
                    let _ = writeln!(s, "{name:<24} not stamped");
                }
            }
        }
        for (stage, ms) in &l.stages_ms {
            let _ = writeln!(s, "  {stage:<22} median {ms:.3} ms");
        }
        let _ = writeln!(
            s,
            "total                    {:.3} ms{}",
            l.total_ms,
            if l.total_skew_uncertain {
                "  [clock skew uncertain]"
            } else {
                ""
            }
        );
        match l.throughput_hz {
            Some(hz) => {
                let _ = writeln!(s, "throughput               {hz:.2} Hz");
            }
            None => {
                let _ = writeln!(s, "throughput               n/a");
            }
        }
    }
    s
}

/// Machine-readable `key = value` report; undefined values are written as
/// the string "undefined".
pub fn format_report_kv(
    counts: Option<&ConfusionCounts>,
    latency: Option<&LatencyReport>,
    id_switches: Option<u64>,
) -> String {
    let mut s = String::new();
    let metric = |m: Metric| {
        m.value()
            .map_or_else(|| "\"undefined\"".to_string(), |v| format!("{v:.6}"))
    };
    if let Some(c) = counts {
        let m = compute_metrics(c);
        let _ = writeln!(s, "[detection]");
        let _ = writeln!(s, "ground_truth = {}", c.ground_truth_total);
        let _ = writeln!(s, "tp = {}", c.tp);
        let _ = writeln!(s, "fp = {}", c.fp);
        let _ = writeln!(s, "fn = {}", c.fn_);
        let _ = writeln!(s, "tn = {}", c.tn);
        let _ = writeln!(s, "precision = {}", metric(m.precision));
        let _ = writeln!(s, "recall = {}", metric(m.recall));
        let _ = writeln!(s, "miss = {}", metric(m.miss));
        if let Some(n) = id_switches {
            let _ = writeln!(s, "id_switches = {n}");
        }
    }
    if let Some(l) = latency {
        let _ = writeln!(s, "[latency]");
        let _ = writeln!(s, "frames = {}", l.frames);
        for (key, p) in [
            ("phase1", &l.phase1),
            ("phase2", &l.phase2),
            ("phase3", &l.phase3),
        ] {
            let _ = writeln!(
                s,
                "{key}_median_ms = {}",
                opt_ms(p).replace("n/a", "\"n/a\"")
            );
            if let Some(p) = p {
                let _ = writeln!(s, "{key}_p95_ms = {:.3}", p.p95_ms);
                let _ = writeln!(s, "{key}_skew_uncertain = {}", p.skew_uncertain);
            }
        }
        let _ = writeln!(s, "total_ms = {:.3}", l.total_ms);
        for (stage, ms) in &l.stages_ms {
            let _ = writeln!(s, "stage_{stage}_ms = {ms:.3}");
        }
        match l.throughput_hz {
            Some(hz) => {
                let _ = writeln!(s, "throughput_hz = {hz:.3}");
            }
            None => {
                let _ = writeln!(s, "throughput_hz = \"n/a\"");
            }
        }
    }
    s
}
