//! Caption tokenization and corpus-level captioning metrics.
//!
//! BLEU-n, ROUGE-L and CIDEr-D follow the conventions of the COCO caption
//! evaluation toolkit (ROUGE-L β = 1.2, CIDEr-D σ = 6 with clipping and the
//! ×10 scale). SPICE is not computed here; when per-item SPICE scores are
//! supplied, SPIDEr is their mean with CIDEr-D, otherwise CIDEr-D alone is
//! reported as `spider_lite`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_MAX_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("caption {0:?} is empty after tokenization")]
    EmptyAfterTokenization(String),
    #[error("item {0:?} has no references")]
    NoReferences(String),
    #[error("BLEU order must be 1..=4, got {0}")]
    InvalidOrder(usize),
    #[error("CIDEr needs at least 2 corpus items, got {0}")]
    CorpusTooSmall(usize),
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("no SPICE score for item {0:?}")]
    MissingSpice(String),
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("malformed SPICE file: {0}")]
    MalformedSpice(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Lower-cases `raw`, turns every character other than `[a-z0-9']` into a
/// separator and splits on whitespace. `<sos>`/`<eos>` markers are dropped.
pub fn tokenize(raw: &str) -> Result<Vec<String>, CaptionError> {
    let lowered = raw
        .to_lowercase()
        .replace("<sos>", " ")
        .replace("<eos>", " ");
    let cleaned: String = lowered
        .chars()
        .map(|ch| match ch {
            'a'..='z' | '0'..='9' | '\'' => ch,
            _ => ' ',
        })
        .collect();
    let tokens: Vec<String> = cleaned.split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        return Err(CaptionError::EmptyAfterTokenization(raw.to_string()));
    }
    Ok(tokens)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord {
    pub item_id: String,
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl CaptionRecord {
    pub fn new(
        item_id: impl Into<String>,
        hypothesis: Vec<String>,
        references: Vec<Vec<String>>,
    ) -> Result<Self, CaptionError> {
        let item_id = item_id.into();
        if references.is_empty() {
            return Err(CaptionError::NoReferences(item_id));
        }
        if hypothesis.is_empty() || references.iter().any(Vec::is_empty) {
            return Err(CaptionError::EmptyAfterTokenization(item_id));
        }
        Ok(Self {
            item_id,
            hypothesis,
            references,
        })
    }

    pub fn from_raw<S: AsRef<str>>(
        item_id: impl Into<String>,
        hypothesis: &str,
        references: &[S],
    ) -> Result<Self, CaptionError> {
        let hyp = tokenize(hypothesis)?;
        let refs = references
            .iter()
            .map(|r| tokenize(r.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(item_id, hyp, refs)
    }
}

#[derive(Deserialize)]
struct CorpusLine {
    id: String,
    hyp: String,
    refs: Vec<String>,
}

/// Parses `{"id": ..., "hyp": ..., "refs": [...]}` JSON lines.
pub fn parse_corpus<R: BufRead>(r: R) -> Result<Vec<CaptionRecord>, CaptionError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| CaptionError::MalformedLine {
            line: line_no,
            message,
        };
        let parsed: CorpusLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let record = CaptionRecord::from_raw(parsed.id, &parsed.hyp, &parsed.refs)
            .map_err(|e| bad(e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<CaptionRecord>, CaptionError> {
    parse_corpus(BufReader::new(File::open(path)?))
}

/// Reads a JSON object mapping item id to SPICE score.
pub fn load_spice(path: &Path) -> Result<HashMap<String, f64>, CaptionError> {
    let text = std::fs::read_to_string(path)?;
    let map: HashMap<String, f64> =
        serde_json::from_str(&text).map_err(|e| CaptionError::MalformedSpice(e.to_string()))?;
    if let Some((id, v)) = map.iter().find(|(_, v)| !v.is_finite()) {
        return Err(CaptionError::MalformedSpice(format!("{id}: {v}")));
    }
    Ok(map)
}

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts<'_> {
    let mut counts = Counts::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BleuScore {
    pub score: f64,
    /// Clipped precision per order 1..=n.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hypothesis_length: usize,
    pub reference_length: usize,
    /// Some order had no matched n-gram, forcing the score to 0.
    pub zero_precision: bool,
}

fn closest_ref_len(hyp_len: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(hyp_len), r))
        .unwrap_or(0)
}

/// Corpus BLEU with uniform weights over orders `1..=n` and no smoothing.
pub fn bleu_n(corpus: &[CaptionRecord], n: usize) -> Result<BleuScore, CaptionError> {
    if !(1..=4).contains(&n) {
        return Err(CaptionError::InvalidOrder(n));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let mut hyp_len = 0;
    let mut ref_len = 0;

    for rec in corpus {
        hyp_len += rec.hypothesis.len();
        ref_len += closest_ref_len(rec.hypothesis.len(), &rec.references);
        for k in 1..=n {
            let hyp = ngram_counts(&rec.hypothesis, k);
            let mut max_ref: Counts = Counts::new();
            for r in &rec.references {
                for (gram, c) in ngram_counts(r, k) {
                    let slot = max_ref.entry(gram).or_insert(0);
                    *slot = (*slot).max(c);
                }
            }
            for (gram, c) in &hyp {
                matched[k - 1] += (*c).min(max_ref.get(gram).copied().unwrap_or(0));
                total[k - 1] += c;
            }
        }
    }

    let precisions: Vec<f64> = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let zero_precision = precisions.contains(&0.0);
    let score = if zero_precision {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / n as f64;
        brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty,
        hypothesis_length: hyp_len,
        reference_length: ref_len,
        zero_precision,
    })
}

// ---------------------------------------------------------------------------
// ROUGE-L
// ---------------------------------------------------------------------------

/// Corpus mean plus the per-item values it was averaged from.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemScores {
    pub corpus: f64,
    pub per_item: Vec<f64>,
}

impl ItemScores {
    fn from_items(per_item: Vec<f64>) -> Self {
        let corpus = if per_item.is_empty() {
            0.0
        } else {
            per_item.iter().sum::<f64>() / per_item.len() as f64
        };
        Self { corpus, per_item }
    }
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_l_item(rec: &CaptionRecord) -> f64 {
    let beta2 = ROUGE_BETA * ROUGE_BETA;
    rec.references
        .iter()
        .map(|r| {
            let lcs = lcs_len(&rec.hypothesis, r) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let p = lcs / rec.hypothesis.len() as f64;
            let rc = lcs / r.len() as f64;
            (1.0 + beta2) * p * rc / (rc + beta2 * p)
        })
        .fold(0.0, f64::max)
}

pub fn rouge_l(corpus: &[CaptionRecord]) -> ItemScores {
    ItemScores::from_items(corpus.par_iter().map(rouge_l_item).collect())
}

// ---------------------------------------------------------------------------
// CIDEr-D
// ---------------------------------------------------------------------------

struct TfIdf {
    /// Per order: n-gram → tf·idf.
    vec: Vec<BTreeMap<Vec<String>, f64>>,
    norm: Vec<f64>,
    len: usize,
}

fn tfidf(tokens: &[String], df: &HashMap<Vec<String>, usize>, log_n: f64) -> TfIdf {
    let mut vec = Vec::with_capacity(CIDER_MAX_ORDER);
    let mut norm = Vec::with_capacity(CIDER_MAX_ORDER);
    for n in 1..=CIDER_MAX_ORDER {
        let mut v = BTreeMap::new();
        let mut sq = 0.0;
        for (gram, tf) in ngram_counts(tokens, n) {
            let d = df.get(gram).copied().unwrap_or(0).max(1) as f64;
            let w = tf as f64 * (log_n - d.ln());
            sq += w * w;
            v.insert(gram.to_vec(), w);
        }
        vec.push(v);
        norm.push(sq.sqrt());
    }
    TfIdf {
        vec,
        norm,
        len: tokens.len(),
    }
}

fn cider_sim(hyp: &TfIdf, reference: &TfIdf) -> f64 {
    let delta = hyp.len as f64 - reference.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..CIDER_MAX_ORDER {
        let mut val = 0.0;
        for (gram, &wh) in &hyp.vec[n] {
            if let Some(&wr) = reference.vec[n].get(gram) {
                val += wh.min(wr) * wr;
            }
        }
        if hyp.norm[n] != 0.0 && reference.norm[n] != 0.0 {
            val /= hyp.norm[n] * reference.norm[n];
        }
        total += val * penalty;
    }
    total / CIDER_MAX_ORDER as f64
}

/// CIDEr-D with document frequencies taken over each item's reference set.
pub fn cider(corpus: &[CaptionRecord]) -> Result<ItemScores, CaptionError> {
    if corpus.len() < 2 {
        return Err(CaptionError::CorpusTooSmall(corpus.len()));
    }
    let mut df: HashMap<Vec<String>, usize> = HashMap::new();
    for rec in corpus {
        let mut seen: BTreeMap<&[String], ()> = BTreeMap::new();
        for r in &rec.references {
            for n in 1..=CIDER_MAX_ORDER {
                for gram in ngram_counts(r, n).into_keys() {
                    seen.insert(gram, ());
                }
            }
        }
        for gram in seen.into_keys() {
            *df.entry(gram.to_vec()).or_insert(0) += 1;
        }
    }
    let log_n = (corpus.len() as f64).ln();

    let per_item = corpus
        .par_iter()
        .map(|rec| {
            let hyp = tfidf(&rec.hypothesis, &df, log_n);
            let sum: f64 = rec
                .references
                .iter()
                .map(|r| cider_sim(&hyp, &tfidf(r, &df, log_n)))
                .sum();
            10.0 * sum / rec.references.len() as f64
        })
        .collect();
    Ok(ItemScores::from_items(per_item))
}

// ---------------------------------------------------------------------------
// SPIDEr and reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpiderScore {
    /// `"spider"` when SPICE was supplied, `"spider_lite"` otherwise.
    pub key: &'static str,
    pub value: f64,
}

pub fn spider(cider_score: f64, spice_score: Option<f64>) -> SpiderScore {
    match spice_score {
        Some(spice) => SpiderScore {
            key: "spider",
            value: (cider_score + spice) / 2.0,
        },
        None => SpiderScore {
            key: "spider_lite",
            value: cider_score,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Bleu(usize),
    RougeL,
    Cider,
    Spider,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Bleu(1),
        Metric::Bleu(2),
        Metric::Bleu(3),
        Metric::Bleu(4),
        Metric::RougeL,
        Metric::Cider,
        Metric::Spider,
    ];

    pub fn parse(name: &str) -> Result<Self, CaptionError> {
        let lower = name.trim().to_ascii_lowercase();
        match lower.as_str() {
            "rouge_l" | "rouge-l" | "rougel" => Ok(Metric::RougeL),
            "cider" | "cider_d" | "cider-d" => Ok(Metric::Cider),
            "spider" | "spider_lite" => Ok(Metric::Spider),
            _ => lower
                .strip_prefix("bleu")
                .map(|d| d.trim_start_matches(['_', '-']))
                .and_then(|d| d.parse::<usize>().ok())
                .filter(|n| (1..=4).contains(n))
                .map(Metric::Bleu)
                .ok_or_else(|| CaptionError::UnknownMetric(name.to_string())),
        }
    }

    pub fn parse_list(list: &str) -> Result<Vec<Self>, CaptionError> {
        list.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(Self::parse)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub scores: BTreeMap<String, f64>,
    pub per_item_cider: Vec<(String, f64)>,
    pub per_item_rouge_l: Vec<(String, f64)>,
    pub diagnostics: Vec<String>,
}

/// Scores `corpus` on `metrics`. `spice` maps item id to SPICE score and,
/// when present, must cover every item.
pub fn evaluate(
    corpus: &[CaptionRecord],
    metrics: &[Metric],
    spice: Option<&HashMap<String, f64>>,
) -> Result<MetricReport, CaptionError> {
    let mut report = MetricReport::default();
    let ids = || corpus.iter().map(|r| r.item_id.clone());
    let mut cider_scores: Option<ItemScores> = None;

    for &metric in metrics {
        match metric {
            Metric::Bleu(n) => {
                let b = bleu_n(corpus, n)?;
                if b.zero_precision {
                    report.diagnostics.push(format!(
                        "bleu{n}: an n-gram order had no matches, score is 0"
                    ));
                }
                report.scores.insert(format!("bleu{n}"), b.score);
            }
            Metric::RougeL => {
                let r = rouge_l(corpus);
                report.scores.insert("rouge_l".into(), r.corpus);
                report.per_item_rouge_l = ids().zip(r.per_item).collect();
            }
            Metric::Cider | Metric::Spider => {
                if cider_scores.is_none() {
                    cider_scores = Some(cider(corpus)?);
                }
                let c = cider_scores.as_ref().unwrap();
                if metric == Metric::Cider {
                    report.scores.insert("cider".into(), c.corpus);
                    report.per_item_cider = ids().zip(c.per_item.iter().copied()).collect();
                    continue;
                }
                let spice_mean = match spice {
                    Some(map) => {
                        let mut total = 0.0;
                        for rec in corpus {
                            total += map
                                .get(&rec.item_id)
                                .ok_or_else(|| CaptionError::MissingSpice(rec.item_id.clone()))?;
                        }
                        Some(total / corpus.len() as f64)
                    }
                    None => None,
                };
                let s = spider(c.corpus, spice_mean);
                report.scores.insert(s.key.into(), s.value);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn rec(id: &str, hyp: &str, refs: &[&str]) -> CaptionRecord {
        CaptionRecord::new(id, toks(hyp), refs.iter().map(|r| toks(r)).collect()).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("A Dog barks!").unwrap(), toks("a dog barks"));
        assert_eq!(
            tokenize("Water,  running—fast").unwrap(),
            toks("water running fast")
        );
        assert_eq!(
            tokenize("<sos> a bird's song <eos>").unwrap(),
            toks("a bird's song")
        );
        assert!(matches!(
            tokenize("..."),
            Err(CaptionError::EmptyAfterTokenization(_))
        ));
        assert!(tokenize("   ").is_err());
    }

    #[test]
    fn record_invariants() {
        assert!(matches!(
            CaptionRecord::from_raw::<&str>("x", "a b", &[]),
            Err(CaptionError::NoReferences(_))
        ));
        assert!(CaptionRecord::from_raw("x", "a b", &["!!"]).is_err());
    }

    #[test]
    fn bleu_identity_is_one() {
        let corpus = vec![
            rec(
                "1",
                "a man is talking to a crowd",
                &["a man is talking to a crowd", "someone speaks loudly"],
            ),
            rec(
                "2",
                "rain falls on a tin roof",
                &["heavy rain hits the roof", "rain falls on a tin roof"],
            ),
        ];
        for n in 1..=4 {
            assert_eq!(bleu_n(&corpus, n).unwrap().score, 1.0);
        }
    }

    #[test]
    fn bleu_brevity_penalty_case() {
        let corpus = vec![rec("1", "the cat sat", &["the cat sat on the mat"])];
        let b = bleu_n(&corpus, 3).unwrap();
        assert_eq!(b.precisions, vec![1.0, 1.0, 1.0]);
        assert!((b.score - (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn bleu_disjoint_is_zero_with_flag() {
        let corpus = vec![rec("1", "birds chirp", &["a car engine idles"])];
        let b = bleu_n(&corpus, 2).unwrap();
        assert_eq!(b.score, 0.0);
        assert!(b.zero_precision);
        assert!(bleu_n(&corpus, 5).is_err());
        assert!(bleu_n(&corpus, 0).is_err());
    }

    #[test]
    fn bleu_clipping() {
        // "the the the" against "the cat": unigram precision 1/3
        let corpus = vec![rec("1", "the the the", &["the cat"])];
        let b = bleu_n(&corpus, 1).unwrap();
        assert!((b.precisions[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn closest_reference_length_prefers_shorter_on_tie() {
        assert_eq!(closest_ref_len(4, &[toks("a b c d e"), toks("a b c")]), 3);
        assert_eq!(closest_ref_len(4, &[toks("a b c"), toks("a b c d e")]), 3);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&[rec("1", "a b c", &["a b c"])]).corpus, 1.0);
        assert_eq!(rouge_l(&[rec("1", "a b c", &["x y"])]).corpus, 0.0);
        let r = rouge_l(&[rec("1", "a b c d", &["a c b d"])]);
        assert!((r.corpus - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rouge_takes_best_reference() {
        let r = rouge_l(&[rec("1", "a b c d", &["x y z", "a c b d"])]);
        assert!((r.per_item[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn cider_needs_two_items() {
        assert!(matches!(
            cider(&[rec("1", "a b", &["a b"])]),
            Err(CaptionError::CorpusTooSmall(1))
        ));
    }

    #[test]
    fn cider_identity_disjoint_vocab_is_ten() {
        let corpus = vec![
            rec(
                "1",
                "a dog barks at the mailman",
                &["a dog barks at the mailman"],
            ),
            rec(
                "2",
                "wind blows through tall grass",
                &["wind blows through tall grass"],
            ),
        ];
        let c = cider(&corpus).unwrap();
        for s in &c.per_item {
            assert!((s - 10.0).abs() < 1e-9);
        }
        assert!((c.corpus - 10.0).abs() < 1e-9);
    }

    #[test]
    fn cider_no_overlap_is_zero() {
        let corpus = vec![
            rec("1", "zz yy xx", &["a dog barks"]),
            rec("2", "wind blows hard", &["wind blows hard"]),
        ];
        let c = cider(&corpus).unwrap();
        assert_eq!(c.per_item[0], 0.0);
    }

    #[test]
    fn cider_length_penalty() {
        // Item 1: hyp "b c" against "b c d e f g h i" (len 8). Every n-gram
        // has df = 1 over two items, so all weights are tf·ln 2.
        let corpus = vec![
            rec("1", "b c", &["b c d e f g h i"]),
            rec("2", "q r s", &["q r s"]),
        ];
        let c = cider(&corpus).unwrap();
        // unigram: hyp vec (ln2, ln2) norm √2·ln2; ref has 8 unigrams each ln2,
        // norm √8·ln2; dot = 2·ln2² → cos = 2 / (√2·√8) = 0.5
        // bigram: hyp 1 gram, ref 7 grams: cos = 1/√7; trigram/4-gram: 0
        let pen = (-(36.0f64) / 72.0).exp();
        let expected = 10.0 * pen * (0.5 + 1.0 / 7f64.sqrt()) / 4.0;
        assert!(
            (c.per_item[0] - expected).abs() < 1e-12,
            "{} vs {}",
            c.per_item[0],
            expected
        );
    }

    #[test]
    fn spider_composition() {
        assert_eq!(
            spider(1.0, Some(0.5)),
            SpiderScore {
                key: "spider",
                value: 0.75
            }
        );
        assert_eq!(spider(0.0, Some(0.0)).value, 0.0);
        assert_eq!(
            spider(0.84, None),
            SpiderScore {
                key: "spider_lite",
                value: 0.84
            }
        );
    }

    #[test]
    fn metric_names() {
        assert_eq!(Metric::parse("bleu4").unwrap(), Metric::Bleu(4));
        assert_eq!(Metric::parse("BLEU_2").unwrap(), Metric::Bleu(2));
        assert_eq!(Metric::parse("rouge_l").unwrap(), Metric::RougeL);
        assert!(Metric::parse("bleu5").is_err());
        assert!(Metric::parse("meteor").is_err());
        assert_eq!(
            Metric::parse_list("bleu4,rouge_l").unwrap(),
            vec![Metric::Bleu(4), Metric::RougeL]
        );
    }

    #[test]
    fn evaluate_with_and_without_spice() {
        let corpus = vec![
            rec("a", "a dog barks loudly", &["a dog barks loudly"]),
            rec("b", "birds sing in trees", &["birds sing in trees"]),
        ];
        let r = evaluate(&corpus, &[Metric::Bleu(4), Metric::RougeL], None).unwrap();
        assert_eq!(r.scores.len(), 2);
        assert_eq!(r.scores["bleu4"], 1.0);
        assert_eq!(r.scores["rouge_l"], 1.0);

        let lite = evaluate(&corpus, &[Metric::Spider], None).unwrap();
        assert!(lite.scores.contains_key("spider_lite"));
        let spice = HashMap::from([("a".to_string(), 0.2), ("b".to_string(), 0.4)]);
        let full = evaluate(&corpus, &[Metric::Cider, Metric::Spider], Some(&spice)).unwrap();
        let expected = (full.scores["cider"] + 0.3) / 2.0;
        assert!((full.scores["spider"] - expected).abs() < 1e-12);

        let partial = HashMap::from([("a".to_string(), 0.2)]);
        assert!(matches!(
            evaluate(&corpus, &[Metric::Spider], Some(&partial)),
            Err(CaptionError::MissingSpice(id)) if id == "b"
        ));
    }

    #[test]
    fn corpus_jsonl() {
        let src = "{\"id\":\"x\",\"hyp\":\"A dog!\",\"refs\":[\"a dog\",\"the Dog.\"]}\n\n{\"id\":\"y\",\"hyp\":\"rain\",\"refs\":[\"rain\"]}\n";
        let c = parse_corpus(src.as_bytes()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].references[1], toks("the dog"));
        let bad = "{\"id\":\"x\",\"hyp\":\"a\",\"refs\":[\"a\"]}\n{\"id\":\"y\"}\n";
        assert!(matches!(
            parse_corpus(bad.as_bytes()),
            Err(CaptionError::MalformedLine { line: 2, .. })
        ));
        let empty = "{\"id\":\"x\",\"hyp\":\"?!\",\"refs\":[\"a\"]}\n";
        assert!(matches!(
            parse_corpus(empty.as_bytes()),
            Err(CaptionError::MalformedLine { line: 1, .. })
        ));
    }

    fn word() -> impl Strategy<Value = String> {
        prop::sample::select(vec![
            "a", "dog", "barks", "the", "rain", "falls", "car", "loud", "bird", "sings",
        ])
        .prop_map(str::to_string)
    }

    fn sentence() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(word(), 1..10)
    }

    fn item() -> impl Strategy<Value = (Vec<String>, Vec<Vec<String>>)> {
        (sentence(), prop::collection::vec(sentence(), 1..5))
    }

    fn corpus() -> impl Strategy<Value = Vec<CaptionRecord>> {
        prop::collection::vec(item(), 2..6).prop_map(|items| {
            items
                .into_iter()
                .enumerate()
                .map(|(i, (h, r))| CaptionRecord::new(i.to_string(), h, r).unwrap())
                .collect()
        })
    }

    #[test]
    fn higher_bleu_order_can_score_higher() {
        // Equal-length pairs, brevity penalty 1: p = (0.9, 5/7, 0.75, 1.0).
        let c: Vec<CaptionRecord> = [
            ("a a a", "a dog a"),
            ("bird car dog bird", "bird car dog bird"),
            ("a a a", "a a a"),
        ]
        .iter()
        .enumerate()
        .map(|(i, (h, r))| CaptionRecord::new(i.to_string(), toks(h), vec![toks(r)]).unwrap())
        .collect();
        let b3 = bleu_n(&c, 3).unwrap();
        let b4 = bleu_n(&c, 4).unwrap();
        assert_eq!(b4.precisions, vec![0.9, 5.0 / 7.0, 0.75, 1.0]);
        assert!((b3.score - 0.784_136_937_862_065_3).abs() < 1e-12);
        assert!((b4.score - 0.833_285_710_203_537_4).abs() < 1e-12);
        assert!(b4.score > b3.score);
    }

    #[test]
    fn cider_copy_of_one_reference_can_score_lower() {
        let refs = || vec![toks("barks"), toks("a"), toks("a")];
        let corpus = |hyp: &str| {
            vec![
                CaptionRecord::new("0", toks("x"), vec![toks("x")]).unwrap(),
                CaptionRecord::new("1", toks(hyp), refs()).unwrap(),
            ]
        };
        let mixed = cider(&corpus("barks a")).unwrap().per_item[1];
        let copied = cider(&corpus("barks")).unwrap().per_item[1];
        assert!(copied < mixed, "{copied} vs {mixed}");
    }

    proptest! {
        #[test]
        fn scores_stay_in_range(c in corpus()) {
            for n in 1..=4 {
                let b = bleu_n(&c, n).unwrap().score;
                prop_assert!((0.0..=1.0).contains(&b));
            }
            let r = rouge_l(&c);
            prop_assert!(r.per_item.iter().all(|x| (0.0..=1.0 + 1e-12).contains(x)));
            let ci = cider(&c).unwrap();
            prop_assert!(ci.per_item.iter().all(|x| (0.0..=10.0 + 1e-9).contains(x)));
        }

        #[test]
        fn invariant_under_reordering(c in corpus(), rot in 0usize..5) {
            let mut shuffled: Vec<CaptionRecord> = c.iter().rev().cloned().collect();
            for rec in &mut shuffled {
                let k = rot % rec.references.len();
                rec.references.rotate_left(k);
            }
            for n in 1..=4 {
                let a = bleu_n(&c, n).unwrap().score;
                let b = bleu_n(&shuffled, n).unwrap().score;
                prop_assert!((a - b).abs() <= 1e-12);
            }
            prop_assert!((rouge_l(&c).corpus - rouge_l(&shuffled).corpus).abs() <= 1e-12);
            prop_assert!((cider(&c).unwrap().corpus - cider(&shuffled).unwrap().corpus).abs() <= 1e-9);
        }

        #[test]
        fn copying_a_reference_never_hurts(c in corpus(), which in 0usize..6, pick in 0usize..5) {
            let i = which % c.len();
            let mut improved = c.clone();
            let r = pick % c[i].references.len();
            improved[i].hypothesis = c[i].references[r].clone();
            prop_assert!(rouge_l(&improved).per_item[i] + 1e-12 >= rouge_l(&c).per_item[i]);
            // CIDEr-D averages over references, so the copy only dominates with a single reference.
            if c[i].references.len() == 1 {
                prop_assert!(cider(&improved).unwrap().per_item[i] + 1e-9 >= cider(&c).unwrap().per_item[i]);
            }
            for n in 1..=improved[i].hypothesis.len().min(4) {
                let single = |v: &CaptionRecord| bleu_n(std::slice::from_ref(v), n).unwrap().score;
                prop_assert!(single(&improved[i]) + 1e-12 >= single(&c[i]));
            }
        }
    }
}
