//! Epoch-level kurtosis/skewness of time × batch × channel feature tensors.
//!
//! The statistic is taken along the channel axis of every `(t, b)` frame,
//! the frame values are averaged into one entry per batch item, and the
//! epoch scalar is the mean of those per-batch entries. [`TimeMode`] selects
//! the alternative reading where each batch item contributes a single
//! statistic over all of its `T·C` values.

use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::moments::{MomentAccumulator, MomentsError, StatDefinition};
use crate::tensor_store::{
    read_tensor_file, FeatureTensor, ManifestError, ReadMode, RunManifest, TensorError,
};

#[derive(Debug, Error)]
pub enum FeatureStatsError {
    #[error("channel axis has {channels} values, need at least {need}")]
    ChannelTooSmall { channels: usize, need: usize },
    #[error("batch item {batch} has no frame with non-zero variance")]
    AllFramesDegenerate { batch: usize },
    #[error("epoch {epoch} ({path}): {source}")]
    Epoch {
        epoch: u64,
        path: PathBuf,
        #[source]
        source: Box<FeatureStatsError>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("stats csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl FeatureStatsError {
    /// Epoch the error was raised for, if any.
    pub fn epoch(&self) -> Option<u64> {
        match self {
            FeatureStatsError::Epoch { epoch, .. } => Some(*epoch),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeMode {
    /// One statistic per `(t, b)` channel slice, averaged over time.
    #[default]
    PerFrame,
    /// One statistic per batch item over all `T·C` values.
    FlattenTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStat {
    pub epoch: u64,
    pub kurtosis: f64,
    pub skewness: f64,
    pub per_batch_kurtosis: Vec<f64>,
    pub per_batch_skewness: Vec<f64>,
    /// `(t, b)` frames skipped because their variance was zero.
    pub degenerate_frames: usize,
    /// `(t, b)` frames skipped because they held NaN or infinity (lenient reads).
    pub non_finite_frames: usize,
}

impl EpochStat {
    pub fn point(&self) -> StatPoint {
        StatPoint {
            epoch: self.epoch,
            kurtosis: self.kurtosis,
            skewness: self.skewness,
            degenerate_frames: self.degenerate_frames,
        }
    }
}

/// The scalar columns of an [`EpochStat`], as stored in the stats CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatPoint {
    pub epoch: u64,
    pub kurtosis: f64,
    pub skewness: f64,
    pub degenerate_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatTrajectory {
    pub encoder_tag: String,
    pub definition: StatDefinition,
    pub epochs: Vec<EpochStat>,
}

impl StatTrajectory {
    pub fn points(&self) -> Vec<StatPoint> {
        self.epochs.iter().map(EpochStat::point).collect()
    }
}

enum Slice {
    Stat(f64, f64),
    Degenerate,
    NonFinite,
}

fn slice_stat<I: IntoIterator<Item = f64>>(values: I, def: StatDefinition) -> Slice {
    let mut acc = MomentAccumulator::new();
    for x in values {
        if acc.update(x).is_err() {
            return Slice::NonFinite;
        }
    }
    match acc.finalize(def) {
        Ok((k, s)) => Slice::Stat(k, s),
        Err(MomentsError::ZeroVariance) => Slice::Degenerate,
        // Counts are checked up front and inputs are finite here.
        Err(e) => unreachable!("{e}"),
    }
}

struct BatchResult {
    kurtosis: f64,
    skewness: f64,
    degenerate: usize,
    non_finite: usize,
}

fn batch_stat(
    t: &FeatureTensor,
    b: usize,
    def: StatDefinition,
    mode: TimeMode,
) -> Result<BatchResult, FeatureStatsError> {
    let dims = t.dims();
    let mut k_sum = 0.0;
    let mut s_sum = 0.0;
    let mut used = 0usize;
    let mut degenerate = 0;
    let mut non_finite = 0;
    match mode {
        TimeMode::PerFrame => {
            for ti in 0..dims.time {
                let values = (0..dims.channel).map(|c| t.get(ti, b, c));
                match slice_stat(values, def) {
                    Slice::Stat(k, s) => {
                        k_sum += k;
                        s_sum += s;
                        used += 1;
                    }
                    Slice::Degenerate => degenerate += 1,
                    Slice::NonFinite => non_finite += 1,
                }
            }
        }
        TimeMode::FlattenTime => {
            let values =
                (0..dims.time).flat_map(|ti| (0..dims.channel).map(move |c| t.get(ti, b, c)));
            match slice_stat(values, def) {
                Slice::Stat(k, s) => {
                    k_sum = k;
                    s_sum = s;
                    used = 1;
                }
                Slice::Degenerate => degenerate = dims.time,
                Slice::NonFinite => non_finite = dims.time,
            }
        }
    }
    if used == 0 {
        return Err(FeatureStatsError::AllFramesDegenerate { batch: b });
    }
    Ok(BatchResult {
        kurtosis: k_sum / used as f64,
        skewness: s_sum / used as f64,
        degenerate,
        non_finite,
    })
}

/// Mean summed in ascending order, so any permutation of `xs` gives the
/// same bits.
fn order_free_mean(xs: &[f64]) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum::<f64>() / xs.len() as f64
}

/// Computes the epoch statistic of one tensor. The returned `epoch` is 0;
/// [`run_trajectory`] fills in the manifest epoch.
pub fn epoch_statistic(
    t: &FeatureTensor,
    def: StatDefinition,
    mode: TimeMode,
) -> Result<EpochStat, FeatureStatsError> {
    let dims = t.dims();
    let need = def.min_count() as usize;
    let slice_len = match mode {
        TimeMode::PerFrame => dims.channel,
        TimeMode::FlattenTime => dims.time * dims.channel,
    };
    if dims.channel < 2 || slice_len < need {
        return Err(FeatureStatsError::ChannelTooSmall {
            channels: dims.channel,
            need,
        });
    }

    let batches: Vec<BatchResult> = (0..dims.batch)
        .into_par_iter()
        .map(|b| batch_stat(t, b, def, mode))
        .collect::<Result<_, _>>()?;

    let per_batch_kurtosis: Vec<f64> = batches.iter().map(|r| r.kurtosis).collect();
    let per_batch_skewness: Vec<f64> = batches.iter().map(|r| r.skewness).collect();
    Ok(EpochStat {
        epoch: 0,
        kurtosis: order_free_mean(&per_batch_kurtosis),
        skewness: order_free_mean(&per_batch_skewness),
        per_batch_kurtosis,
        per_batch_skewness,
        degenerate_frames: batches.iter().map(|r| r.degenerate).sum(),
        non_finite_frames: batches.iter().map(|r| r.non_finite).sum(),
    })
}

/// Statistic for every manifest epoch, read with `read_mode`.
pub fn run_trajectory_with(
    m: &RunManifest,
    def: StatDefinition,
    mode: TimeMode,
    read_mode: ReadMode,
) -> Result<StatTrajectory, FeatureStatsError> {
    let epochs = m
        .entries
        .par_iter()
        .map(|entry| {
            let path = m.resolve(entry);
            let tag = |source: FeatureStatsError| FeatureStatsError::Epoch {
                epoch: entry.epoch,
                path: path.clone(),
                source: Box::new(source),
            };
            let report = read_tensor_file(&path, read_mode).map_err(|e| tag(e.into()))?;
            let mut stat = epoch_statistic(&report.tensor, def, mode).map_err(tag)?;
            stat.epoch = entry.epoch;
            Ok(stat)
        })
        .collect::<Result<Vec<_>, FeatureStatsError>>()?;
    Ok(StatTrajectory {
        encoder_tag: m.encoder_tag().unwrap_or_default().to_string(),
        definition: def,
        epochs,
    })
}

pub fn run_trajectory(
    m: &RunManifest,
    def: StatDefinition,
    mode: TimeMode,
) -> Result<StatTrajectory, FeatureStatsError> {
    run_trajectory_with(m, def, mode, ReadMode::Strict)
}

// ---------------------------------------------------------------------------
// Stats CSV
// ---------------------------------------------------------------------------

pub const STATS_CSV_HEADER: &str = "epoch,kurtosis,skewness,degenerate_frames";

/// Formats `x` with 9 significant digits, like C's `%.9g`.
pub fn format_sig9(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!(
            "{}e{}{:02}",
            trim_zeros(mantissa.to_string()),
            if exp < 0 { '-' } else { '+' },
            exp.abs()
        )
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn write_stats_csv<W: Write>(points: &[StatPoint], mut w: W) -> io::Result<()> {
    writeln!(w, "{STATS_CSV_HEADER}")?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{}",
            p.epoch,
            format_sig9(p.kurtosis),
            format_sig9(p.skewness),
            p.degenerate_frames
        )?;
    }
    w.flush()
}

pub fn read_stats_csv<R: BufRead>(r: R) -> Result<Vec<StatPoint>, FeatureStatsError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r);
    let bad = |line: usize, message: String| FeatureStatsError::Csv { line, message };
    let headers = reader.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| bad(1, format!("missing column {name:?}")))
    };
    let (ie, ik, is) = (col("epoch")?, col("kurtosis")?, col("skewness")?);
    let id = headers.iter().position(|h| h == "degenerate_frames");

    let mut points: Vec<StatPoint> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| bad(line, e.to_string()))?;
        let field = |j: usize| record.get(j).unwrap_or("");
        let epoch: u64 = field(ie)
            .parse()
            .map_err(|_| bad(line, format!("bad epoch {:?}", field(ie))))?;
        let float = |j: usize| -> Result<f64, FeatureStatsError> {
            field(j)
                .parse()
                .map_err(|_| bad(line, format!("bad number {:?}", field(j))))
        };
        let degenerate_frames = match id {
            Some(j) if !field(j).is_empty() => field(j)
                .parse()
                .map_err(|_| bad(line, format!("bad count {:?}", field(j))))?,
            _ => 0,
        };
        if let Some(prev) = points.last() {
            if epoch <= prev.epoch {
                return Err(bad(
                    line,
                    format!("epoch {epoch} does not follow {}", prev.epoch),
                ));
            }
        }
        points.push(StatPoint {
            epoch,
            kurtosis: float(ik)?,
            skewness: float(is)?,
            degenerate_frames,
        });
    }
    Ok(points)
}

pub fn load_stats_csv(path: &Path) -> Result<Vec<StatPoint>, FeatureStatsError> {
    let f = std::fs::File::open(path)?;
    read_stats_csv(io::BufReader::new(f))
}
