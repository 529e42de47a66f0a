//! `featmoments` command line.
//!
//! Exit codes: 0 success (and "stop" for `stopcheck`), 1 `stopcheck` found no
//! stopping point, 2 usage or input error.

mod chart;
mod config;

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use featmoments::analysis::{
    correlate_run, rank_models, stop_check, Candidate, CorrelationMethod, EpochPick, RankStatistic,
    ScoreTable, DEFAULT_EPSILON, DEFAULT_WINDOW,
};
use featmoments::caption_metrics::{evaluate, load_corpus, load_spice, Metric};
use featmoments::feature_stats::{
    load_stats_csv, run_trajectory_with, write_stats_csv, StatPoint, TimeMode,
};
use featmoments::synthgen::{generate_run, TrajectorySpec, DEFAULT_DIMS};
use featmoments::tensor_store::{load_manifest, Dims, ReadMode};
use featmoments::{KurtosisKind, SkewnessKind, StatDefinition};

#[derive(Parser, Debug)]
#[command(
    name = "featmoments",
    version,
    about = "Kurtosis/skewness profiling of encoder features and caption scoring"
)]
struct Cli {
    /// JSON file of default flag values, keyed by long flag name.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-epoch kurtosis and skewness of a run, as CSV.
    Stats {
        manifest: PathBuf,
        /// Comma list of fisher-excess | pearson-beta2 | biased-g1 | sample-std.
        #[arg(long, default_value = "fisher-excess,biased-g1")]
        definition: String,
        #[arg(long, value_enum, default_value_t = TimeModeArg::PerFrame)]
        time_mode: TimeModeArg,
        /// Skip frames with NaN/infinity instead of failing.
        #[arg(long)]
        lenient: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Caption metrics for a JSON-lines corpus.
    Eval {
        corpus: PathBuf,
        #[arg(long, default_value = "bleu1,bleu2,bleu3,bleu4,rouge_l,cider,spider")]
        metrics: String,
        /// JSON object mapping item id to SPICE score.
        #[arg(long)]
        spice: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlates a stats CSV with a scores CSV.
    Correlate {
        stats_csv: PathBuf,
        scores_csv: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::Spearman)]
        method: MethodArg,
        /// Scores column to correlate against.
        #[arg(long, default_value = "spider")]
        metric: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exits 0 once both statistics have settled, 1 otherwise.
    Stopcheck {
        stats_csv: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
    },
    /// Ranks runs by their statistics, highest first.
    Rank {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = StatisticArg::Kurtosis)]
        statistic: StatisticArg,
        /// final | best | trajectory index.
        #[arg(long, default_value = "final")]
        at: String,
        #[arg(long, default_value = "fisher-excess,biased-g1")]
        definition: String,
        #[arg(long, value_enum, default_value_t = TimeModeArg::PerFrame)]
        time_mode: TimeModeArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes a synthetic run from a trajectory spec.
    Synth {
        spec: PathBuf,
        /// Tensor shape as TxBxC.
        #[arg(long)]
        dims: Option<Dims>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Stats CSV, scores, correlations and SVG charts for a run directory.
    Report {
        run_dir: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, default_value = "spider")]
        metric: String,
        #[arg(long, default_value = "fisher-excess,biased-g1")]
        definition: String,
        #[arg(long, value_enum, default_value_t = TimeModeArg::PerFrame)]
        time_mode: TimeModeArg,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TimeModeArg {
    PerFrame,
    FlattenTime,
}

impl From<TimeModeArg> for TimeMode {
    fn from(m: TimeModeArg) -> Self {
        match m {
            TimeModeArg::PerFrame => TimeMode::PerFrame,
            TimeModeArg::FlattenTime => TimeMode::FlattenTime,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Pearson,
    Spearman,
    Both,
}

impl MethodArg {
    fn methods(self) -> &'static [CorrelationMethod] {
        match self {
            MethodArg::Pearson => &[CorrelationMethod::Pearson],
            MethodArg::Spearman => &[CorrelationMethod::Spearman],
            MethodArg::Both => &[CorrelationMethod::Pearson, CorrelationMethod::Spearman],
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StatisticArg {
    Kurtosis,
    Skewness,
    Combined,
}

impl From<StatisticArg> for RankStatistic {
    fn from(s: StatisticArg) -> Self {
        match s {
            StatisticArg::Kurtosis => RankStatistic::Kurtosis,
            StatisticArg::Skewness => RankStatistic::Skewness,
            StatisticArg::Combined => RankStatistic::Combined,
        }
    }
}

fn parse_definition(list: &str) -> Result<StatDefinition> {
    let mut def = StatDefinition::default();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match name {
            "fisher-excess" => def.kurtosis = KurtosisKind::FisherExcess,
            "pearson-beta2" => def.kurtosis = KurtosisKind::PearsonBeta2,
            "biased-g1" => def.skewness = SkewnessKind::BiasedG1,
            "sample-std" => def.skewness = SkewnessKind::SampleStd,
            other => bail!(
                "unknown definition {other:?} (expected fisher-excess, pearson-beta2, biased-g1 or sample-std)"
            ),
        }
    }
    Ok(def)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn json_text(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn stats_csv_text(points: &[StatPoint]) -> String {
    let mut buf = Vec::new();
    write_stats_csv(points, &mut buf).expect("in-memory write");
    String::from_utf8(buf).expect("ascii csv")
}

fn trajectory_points(
    manifest: &Path,
    def: StatDefinition,
    mode: TimeMode,
    read: ReadMode,
) -> Result<(String, Vec<StatPoint>)> {
    let m = load_manifest(manifest)
        .with_context(|| format!("reading manifest {}", manifest.display()))?;
    let traj = run_trajectory_with(&m, def, mode, read)?;
    Ok((traj.encoder_tag.clone(), traj.points()))
}

fn correlation_json(
    points: &[StatPoint],
    scores: &[(u64, f64)],
    methods: &[CorrelationMethod],
) -> Result<Value> {
    let mut kurt = Map::new();
    let mut skew = Map::new();
    for &method in methods {
        let r = correlate_run(points, scores, method)?;
        kurt.insert(method.name().into(), json!(r.kurtosis.coefficient));
        kurt.insert("n_points".into(), json!(r.kurtosis.n_points));
        skew.insert(method.name().into(), json!(r.skewness.coefficient));
        skew.insert("n_points".into(), json!(r.skewness.n_points));
    }
    Ok(json!({ "kurtosis": kurt, "skewness": skew }))
}

fn cmd_stats(
    manifest: &Path,
    definition: &str,
    mode: TimeMode,
    lenient: bool,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let def = parse_definition(definition)?;
    let read = if lenient {
        ReadMode::Lenient
    } else {
        ReadMode::Strict
    };
    let (_, points) = trajectory_points(manifest, def, mode, read)?;
    emit(out, &stats_csv_text(&points))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(
    corpus: &Path,
    metrics: &str,
    spice: Option<&Path>,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let metrics = Metric::parse_list(metrics)?;
    if metrics.is_empty() {
        bail!("no metrics requested");
    }
    let records =
        load_corpus(corpus).with_context(|| format!("reading corpus {}", corpus.display()))?;
    let spice = spice
        .map(|p| load_spice(p).with_context(|| format!("reading SPICE scores {}", p.display())))
        .transpose()?;
    let report = evaluate(&records, &metrics, spice.as_ref())?;
    for d in &report.diagnostics {
        eprintln!("note: {d}");
    }
    emit(out, &json_text(&json!(report.scores)))?;
    Ok(ExitCode::SUCCESS)
}

fn load_scores(path: &Path, metric: &str) -> Result<Vec<(u64, f64)>> {
    let table =
        ScoreTable::load(path).with_context(|| format!("reading scores {}", path.display()))?;
    Ok(table.series(metric)?)
}

fn cmd_correlate(
    stats: &Path,
    scores: &Path,
    method: MethodArg,
    metric: &str,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let points =
        load_stats_csv(stats).with_context(|| format!("reading stats {}", stats.display()))?;
    let scores = load_scores(scores, metric)?;
    let v = correlation_json(&points, &scores, method.methods())?;
    emit(out, &json_text(&v))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_stopcheck(stats: &Path, epsilon: f64, window: usize) -> Result<ExitCode> {
    let points =
        load_stats_csv(stats).with_context(|| format!("reading stats {}", stats.display()))?;
    let d = stop_check(&points, epsilon, window)?;
    match d.stop_epoch {
        Some(epoch) => {
            emit(
                None,
                &format!("{}\n", json!({ "stop": true, "epoch": epoch })),
            )?;
            Ok(ExitCode::SUCCESS)
        }
        None => {
            emit(None, &format!("{}\n", json!({ "stop": false })))?;
            Ok(ExitCode::from(1))
        }
    }
}

fn cmd_rank(
    manifests: &[PathBuf],
    statistic: RankStatistic,
    at: &str,
    definition: &str,
    mode: TimeMode,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let at: EpochPick = at.parse().map_err(|e: String| anyhow!("--at: {e}"))?;
    let def = parse_definition(definition)?;
    let mut candidates = Vec::new();
    for path in manifests {
        let (tag, points) = trajectory_points(path, def, mode, ReadMode::Strict)?;
        let tag = if tag.is_empty() {
            fallback_tag(path)
        } else {
            tag
        };
        candidates.push(Candidate {
            encoder_tag: tag,
            points,
        });
    }
    let ranking = rank_models(&candidates, at, statistic)?;
    let entries: Vec<Value> = ranking
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| json!({ "rank": i + 1, "encoder": e.encoder_tag, "value": e.value }))
        .collect();
    let v = json!({ "statistic": ranking.statistic, "ranking": entries });
    emit(out, &json_text(&v))?;
    Ok(ExitCode::SUCCESS)
}

/// Run directory name, or the manifest path when it has none.
fn fallback_tag(manifest: &Path) -> String {
    manifest
        .parent()
        .and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| manifest.display().to_string())
}

fn cmd_synth(spec: &Path, dims: Option<Dims>, out_dir: &Path) -> Result<ExitCode> {
    let text =
        fs::read_to_string(spec).with_context(|| format!("reading spec {}", spec.display()))?;
    let spec: TrajectorySpec =
        serde_json::from_str(&text).with_context(|| format!("parsing spec {}", spec.display()))?;
    let m = generate_run(&spec, dims.unwrap_or(DEFAULT_DIMS), out_dir)?;
    let v = json!({
        "epochs": m.len(),
        "manifest": out_dir.join("manifest.jsonl"),
        "scores": out_dir.join("scores.csv"),
    });
    emit(None, &json_text(&v))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(
    run_dir: &Path,
    out_dir: Option<&Path>,
    metric: &str,
    definition: &str,
    mode: TimeMode,
) -> Result<ExitCode> {
    let def = parse_definition(definition)?;
    let out_dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join("report"));
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let manifest_path = run_dir.join("manifest.jsonl");
    let m = load_manifest(&manifest_path)
        .with_context(|| format!("reading manifest {}", manifest_path.display()))?;
    let traj = run_trajectory_with(&m, def, mode, ReadMode::Strict)?;
    let points = traj.points();
    let table = ScoreTable::from_manifest(&m);

    let mut index = Map::new();
    let write = |name: &str, text: &str| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    };

    write("stats.csv", &stats_csv_text(&points))?;
    index.insert("stats".into(), json!("stats.csv"));

    let score_rows: Vec<Value> = table
        .rows
        .iter()
        .map(|(epoch, vals)| {
            let mut row = Map::new();
            row.insert("epoch".into(), json!(epoch));
            for (name, v) in table.metrics.iter().zip(vals) {
                if let Some(v) = v {
                    row.insert(name.clone(), json!(v));
                }
            }
            Value::Object(row)
        })
        .collect();
    write(
        "scores.json",
        &json_text(&json!({ "metrics": table.metrics, "epochs": score_rows })),
    )?;
    index.insert("scores".into(), json!("scores.json"));

    let series = table.series(metric).unwrap_or_default();
    if series.is_empty() {
        index.insert("correlation".into(), Value::Null);
    } else {
        let corr = match correlation_json(&points, &series, MethodArg::Both.methods()) {
            Ok(v) => v,
            Err(e) => json!({ "error": e.to_string() }),
        };
        write("correlation.json", &json_text(&corr))?;
        index.insert("correlation".into(), json!("correlation.json"));
    }

    let epochs: Vec<u64> = points.iter().map(|p| p.epoch).collect();
    let score = (!series.is_empty()).then_some((metric, series.as_slice()));
    let mut charts = Vec::new();
    for (name, values) in [
        (
            "kurtosis",
            points.iter().map(|p| p.kurtosis).collect::<Vec<_>>(),
        ),
        ("skewness", points.iter().map(|p| p.skewness).collect()),
    ] {
        let title = if traj.encoder_tag.is_empty() {
            name.to_string()
        } else {
            format!("{name} of {}", traj.encoder_tag)
        };
        let file = format!("{name}.svg");
        write(
            &file,
            &chart::twin_axis_chart(&title, &epochs, (name, &values), score),
        )?;
        charts.push(json!(file));
    }
    index.insert("charts".into(), Value::Array(charts));
    write("index.json", &json_text(&Value::Object(index)))?;
    emit(None, &format!("{}\n", out_dir.join("index.json").display()))?;
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Stats {
            manifest,
            definition,
            time_mode,
            lenient,
            out,
        } => cmd_stats(
            &manifest,
            &definition,
            time_mode.into(),
            lenient,
            out.as_deref(),
        ),
        Command::Eval {
            corpus,
            metrics,
            spice,
            out,
        } => cmd_eval(&corpus, &metrics, spice.as_deref(), out.as_deref()),
        Command::Correlate {
            stats_csv,
            scores_csv,
            method,
            metric,
            out,
        } => cmd_correlate(&stats_csv, &scores_csv, method, &metric, out.as_deref()),
        Command::Stopcheck {
            stats_csv,
            epsilon,
            window,
        } => cmd_stopcheck(&stats_csv, epsilon, window),
        Command::Rank {
            manifests,
            statistic,
            at,
            definition,
            time_mode,
            out,
        } => cmd_rank(
            &manifests,
            statistic.into(),
            &at,
            &definition,
            time_mode.into(),
            out.as_deref(),
        ),
        Command::Synth {
            spec,
            dims,
            out_dir,
        } => cmd_synth(&spec, dims, &out_dir),
        Command::Report {
            run_dir,
            out_dir,
            metric,
            definition,
            time_mode,
        } => cmd_report(
            &run_dir,
            out_dir.as_deref(),
            &metric,
            &definition,
            time_mode.into(),
        ),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let args = match config::apply(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Known long flags per subcommand, for config merging.
pub(crate) fn subcommand_flags() -> HashMap<String, Vec<(String, bool)>> {
    use clap::CommandFactory;
    let cmd = Cli::command();
    cmd.get_subcommands()
        .map(|sub| {
            let flags = sub
                .get_arguments()
                .filter_map(|a| {
                    let takes_value = a.get_action().takes_values();
                    a.get_long().map(|l| (l.to_string(), takes_value))
                })
                .collect();
            (sub.get_name().to_string(), flags)
        })
        .collect()
}
