//! Relating statistic trajectories to caption scores.
//!
//! * [`pearson`] / [`spearman`] and [`correlate_run`] measure how closely a
//!   run's kurtosis and skewness track a metric across epochs.
//! * [`rank_models`] orders candidate encoders by their statistics, higher
//!   first.
//! * [`stop_check`] fires once both statistics have stopped moving by more
//!   than `epsilon` for `window` consecutive epochs.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_stats::{format_sig9, StatPoint};
use crate::tensor_store::RunManifest;

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_WINDOW: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("series is constant")]
    ConstantSeries,
    #[error("series contains a non-finite value")]
    NonFinite,
    #[error("only {found} epochs have both statistics and scores, need 2")]
    InsufficientOverlap { found: usize },
    #[error("no candidates to rank")]
    EmptyCandidateList,
    #[error("candidate {0:?} has an empty trajectory")]
    EmptyTrajectory(String),
    #[error("candidate {tag:?} has {len} epochs, index {index} requested")]
    IndexOutOfRange {
        tag: String,
        index: usize,
        len: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("scores csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("scores csv has no column {0:?}")]
    MissingColumn(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMethod {
    Pearson,
    Spearman,
}

impl CorrelationMethod {
    pub fn name(self) -> &'static str {
        match self {
            CorrelationMethod::Pearson => "pearson",
            CorrelationMethod::Spearman => "spearman",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrelationResult {
    pub method: CorrelationMethod,
    pub coefficient: f64,
    pub n_points: usize,
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(AnalysisError::TooFewPoints(x.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    Ok(())
}

fn pearson_unchecked(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::ConstantSeries);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<CorrelationResult, AnalysisError> {
    check_pair(x, y)?;
    if is_constant(x) || is_constant(y) {
        return Err(AnalysisError::ConstantSeries);
    }
    Ok(CorrelationResult {
        method: CorrelationMethod::Pearson,
        coefficient: pearson_unchecked(x, y)?,
        n_points: x.len(),
    })
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Spearman's rho: Pearson on average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<CorrelationResult, AnalysisError> {
    check_pair(x, y)?;
    if is_constant(x) || is_constant(y) {
        return Err(AnalysisError::ConstantSeries);
    }
    Ok(CorrelationResult {
        method: CorrelationMethod::Spearman,
        coefficient: pearson_unchecked(&average_ranks(x), &average_ranks(y))?,
        n_points: x.len(),
    })
}

pub fn correlate(
    x: &[f64],
    y: &[f64],
    method: CorrelationMethod,
) -> Result<CorrelationResult, AnalysisError> {
    match method {
        CorrelationMethod::Pearson => pearson(x, y),
        CorrelationMethod::Spearman => spearman(x, y),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunCorrelation {
    pub kurtosis: CorrelationResult,
    pub skewness: CorrelationResult,
}

/// Correlates both statistics with `scores` over the epochs present in both.
pub fn correlate_run(
    traj: &[StatPoint],
    scores: &[(u64, f64)],
    method: CorrelationMethod,
) -> Result<RunCorrelation, AnalysisError> {
    let by_epoch: BTreeMap<u64, f64> = scores.iter().copied().collect();
    let mut kurt = Vec::new();
    let mut skew = Vec::new();
    let mut score = Vec::new();
    for p in traj {
        if let Some(&s) = by_epoch.get(&p.epoch) {
            kurt.push(p.kurtosis);
            skew.push(p.skewness);
            score.push(s);
        }
    }
    if score.len() < 2 {
        return Err(AnalysisError::InsufficientOverlap { found: score.len() });
    }
    Ok(RunCorrelation {
        kurtosis: correlate(&kurt, &score, method)?,
        skewness: correlate(&skew, &score, method)?,
    })
}

// ---------------------------------------------------------------------------
// Scores CSV
// ---------------------------------------------------------------------------

/// Per-epoch metric table read from `epoch,<metric>,...` CSV.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub metrics: Vec<String>,
    /// epoch → one optional value per metric column.
    pub rows: Vec<(u64, Vec<Option<f64>>)>,
}

impl ScoreTable {
    pub fn parse<R: BufRead>(r: R) -> Result<Self, AnalysisError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(r);
        let bad = |line: usize, message: String| AnalysisError::Csv { line, message };
        let headers = reader.headers().map_err(|e| bad(1, e.to_string()))?.clone();
        let epoch_col = headers
            .iter()
            .position(|h| h == "epoch")
            .ok_or_else(|| AnalysisError::MissingColumn("epoch".into()))?;
        let metric_cols: Vec<usize> = (0..headers.len()).filter(|&i| i != epoch_col).collect();
        let metrics = metric_cols
            .iter()
            .map(|&i| headers[i].to_string())
            .collect();
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| bad(line, e.to_string()))?;
            let epoch: u64 = rec[epoch_col]
                .parse()
                .map_err(|_| bad(line, format!("bad epoch {:?}", &rec[epoch_col])))?;
            let values = metric_cols
                .iter()
                .map(|&c| match rec.get(c).unwrap_or("") {
                    "" => Ok(None),
                    v => v
                        .parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .map(Some)
                        .ok_or_else(|| bad(line, format!("bad value {v:?}"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push((epoch, values));
        }
        Ok(Self { metrics, rows })
    }

    pub fn load(path: &Path) -> Result<Self, AnalysisError> {
        let f = std::fs::File::open(path).map_err(|e| AnalysisError::Csv {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Self::parse(std::io::BufReader::new(f))
    }

    /// Scores recorded in a run manifest, one column per metric name seen.
    pub fn from_manifest(m: &RunManifest) -> Self {
        let metrics: Vec<String> = m
            .entries
            .iter()
            .flat_map(|e| e.scores.iter().flat_map(|s| s.keys().cloned()))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let rows = m
            .entries
            .iter()
            .map(|e| (e.epoch, metrics.iter().map(|k| e.score(k)).collect()))
            .collect();
        Self { metrics, rows }
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "epoch")?;
        for m in &self.metrics {
            write!(w, ",{m}")?;
        }
        writeln!(w)?;
        for (epoch, vals) in &self.rows {
            write!(w, "{epoch}")?;
            for v in vals {
                match v {
                    Some(x) => write!(w, ",{}", format_sig9(*x))?,
                    None => write!(w, ",")?,
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// `(epoch, value)` pairs of one metric, skipping blank cells.
    pub fn series(&self, metric: &str) -> Result<Vec<(u64, f64)>, AnalysisError> {
        let col = self
            .metrics
            .iter()
            .position(|m| m == metric)
            .ok_or_else(|| AnalysisError::MissingColumn(metric.into()))?;
        Ok(self
            .rows
            .iter()
            .filter_map(|(e, vals)| vals[col].map(|v| (*e, v)))
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Ranking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankStatistic {
    #[default]
    Kurtosis,
    Skewness,
    /// Mean of the across-candidate z-scores of kurtosis and skewness.
    Combined,
}

/// Which epoch of each trajectory the ranking reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum EpochPick {
    #[default]
    Final,
    /// Maximum of each statistic over the trajectory.
    Best,
    /// Position `k` in the trajectory (not the epoch label).
    Index(usize),
}

impl std::str::FromStr for EpochPick {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "final" => Ok(EpochPick::Final),
            "best" => Ok(EpochPick::Best),
            k => k
                .parse()
                .map(EpochPick::Index)
                .map_err(|_| format!("expected final, best or an index, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub encoder_tag: String,
    pub points: Vec<StatPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedModel {
    pub encoder_tag: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelRanking {
    pub statistic: RankStatistic,
    pub entries: Vec<RankedModel>,
}

fn pick(c: &Candidate, at: EpochPick) -> Result<(f64, f64), AnalysisError> {
    let pts = &c.points;
    match at {
        EpochPick::Final => {
            let p = pts.last().expect("non-empty");
            Ok((p.kurtosis, p.skewness))
        }
        EpochPick::Best => Ok((
            pts.iter()
                .map(|p| p.kurtosis)
                .fold(f64::NEG_INFINITY, f64::max),
            pts.iter()
                .map(|p| p.skewness)
                .fold(f64::NEG_INFINITY, f64::max),
        )),
        EpochPick::Index(k) => pts.get(k).map(|p| (p.kurtosis, p.skewness)).ok_or_else(|| {
            AnalysisError::IndexOutOfRange {
                tag: c.encoder_tag.clone(),
                index: k,
                len: pts.len(),
            }
        }),
    }
}

fn z_scores(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - mean) / sd).collect()
}

/// Orders candidates by descending statistic, ties broken by tag.
pub fn rank_models(
    candidates: &[Candidate],
    at: EpochPick,
    statistic: RankStatistic,
) -> Result<ModelRanking, AnalysisError> {
    if candidates.is_empty() {
        return Err(AnalysisError::EmptyCandidateList);
    }
    if let Some(c) = candidates.iter().find(|c| c.points.is_empty()) {
        return Err(AnalysisError::EmptyTrajectory(c.encoder_tag.clone()));
    }
    let picked = candidates
        .iter()
        .map(|c| pick(c, at))
        .collect::<Result<Vec<_>, _>>()?;
    let values: Vec<f64> = match statistic {
        RankStatistic::Kurtosis => picked.iter().map(|p| p.0).collect(),
        RankStatistic::Skewness => picked.iter().map(|p| p.1).collect(),
        RankStatistic::Combined => {
            let zk = z_scores(&picked.iter().map(|p| p.0).collect::<Vec<_>>());
            let zs = z_scores(&picked.iter().map(|p| p.1).collect::<Vec<_>>());
            // Snap to 1e-12 so exact ties (e.g. z = ±1 with two candidates)
            // are not ordered by rounding noise.
            zk.iter()
                .zip(&zs)
                .map(|(a, b)| ((a + b) / 2.0 * 1e12).round() / 1e12 + 0.0)
                .collect()
        }
    };
    let mut entries: Vec<RankedModel> = candidates
        .iter()
        .zip(values)
        .map(|(c, value)| RankedModel {
            encoder_tag: c.encoder_tag.clone(),
            value: value + 0.0,
        })
        .collect();
    entries.sort_by(|a, b| match b.value.total_cmp(&a.value) {
        Ordering::Equal => a.encoder_tag.cmp(&b.encoder_tag),
        o => o,
    });
    Ok(ModelRanking { statistic, entries })
}

// ---------------------------------------------------------------------------
// Stopping rule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StopDecision {
    pub should_stop: bool,
    /// Trajectory position the rule fired at.
    pub stop_index: Option<usize>,
    /// Epoch label at `stop_index`.
    pub stop_epoch: Option<u64>,
    pub window: usize,
    pub epsilon: f64,
}

/// Stops at the first index `i ≥ window` where the last `window`
/// consecutive changes of both kurtosis and skewness are all `≤ epsilon`.
pub fn stop_check(
    traj: &[StatPoint],
    epsilon: f64,
    window: usize,
) -> Result<StopDecision, AnalysisError> {
    if window < 2 {
        return Err(AnalysisError::InvalidParameter(format!(
            "window {window} < 2"
        )));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(AnalysisError::InvalidParameter(format!(
            "epsilon {epsilon} must be > 0"
        )));
    }
    let calm = |j: usize| {
        (traj[j].kurtosis - traj[j - 1].kurtosis).abs() <= epsilon
            && (traj[j].skewness - traj[j - 1].skewness).abs() <= epsilon
    };
    // run = number of consecutive calm deltas ending at i
    let mut run = 0;
    let mut stop_index = None;
    for i in 1..traj.len() {
        run = if calm(i) { run + 1 } else { 0 };
        if run >= window {
            stop_index = Some(i);
            break;
        }
    }
    Ok(StopDecision {
        should_stop: stop_index.is_some(),
        stop_index,
        stop_epoch: stop_index.map(|i| traj[i].epoch),
        window,
        epsilon,
    })
}
