//! Presentation-attack-detection metrics.
//!
//! Scores are liveness probabilities: a sample is classified bona fide when
//! `score >= threshold`. APCER is the fraction of attacks accepted, BPCER the
//! fraction of bona fide presentations rejected, ACER their mean.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("scored set is empty")]
    Empty,
    #[error("scored set needs both bona fide and attack entries")]
    SingleClass,
    #[error("non-finite score for `{0}`")]
    NonFinite(String),
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("no reports to aggregate")]
    NoReports,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    BonaFide,
    Attack,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::BonaFide => "real",
            Label::Attack => "attack",
        }
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" | "bonafide" | "bona_fide" | "live" | "1" => Ok(Label::BonaFide),
            "attack" | "fake" | "spoof" | "0" => Ok(Label::Attack),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub video_id: String,
    pub score: f64,
    pub label: Label,
    pub pai: Option<String>,
    pub subprotocol: Option<String>,
}

impl ScoredEntry {
    pub fn new(video_id: impl Into<String>, score: f64, label: Label) -> Self {
        Self {
            video_id: video_id.into(),
            score,
            label,
            pai: None,
            subprotocol: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredSet {
    pub entries: Vec<ScoredEntry>,
}

impl ScoredSet {
    pub fn new(entries: Vec<ScoredEntry>) -> Self {
        Self { entries }
    }

    /// Convenience constructor from bare bona fide and attack scores.
    pub fn from_scores(bona_fide: &[f64], attack: &[f64]) -> Self {
        let mut entries = Vec::with_capacity(bona_fide.len() + attack.len());
        for (i, &s) in bona_fide.iter().enumerate() {
            entries.push(ScoredEntry::new(format!("bf{i}"), s, Label::BonaFide));
        }
        for (i, &s) in attack.iter().enumerate() {
            entries.push(ScoredEntry::new(format!("at{i}"), s, Label::Attack));
        }
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    /// Entries grouped by sub-protocol id (entries without one under `""`).
    pub fn by_subprotocol(&self) -> BTreeMap<String, ScoredSet> {
        let mut out: BTreeMap<String, ScoredSet> = BTreeMap::new();
        for e in &self.entries {
            out.entry(e.subprotocol.clone().unwrap_or_default())
                .or_default()
                .entries
                .push(e.clone());
        }
        out
    }

    fn validate(&self) -> Result<(), MetricsError> {
        if self.entries.is_empty() {
            return Err(MetricsError::Empty);
        }
        if let Some(e) = self.entries.iter().find(|e| !e.score.is_finite()) {
            return Err(MetricsError::NonFinite(e.video_id.clone()));
        }
        if self.count(Label::BonaFide) == 0 || self.count(Label::Attack) == 0 {
            return Err(MetricsError::SingleClass);
        }
        Ok(())
    }
}

/// How APCER combines attack species.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApcerMode {
    /// All attacks pooled into one population.
    #[default]
    Pooled,
    /// Worst APCER over presentation attack instruments.
    MaxOverPai,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

impl Rates {
    pub fn new(apcer: f64, bpcer: f64) -> Self {
        Self {
            apcer,
            bpcer,
            acer: (apcer + bpcer) / 2.0,
        }
    }
}

pub fn rates_at(set: &ScoredSet, threshold: f64) -> Result<Rates, MetricsError> {
    rates_at_with(set, threshold, ApcerMode::Pooled)
}

pub fn rates_at_with(set: &ScoredSet, threshold: f64, mode: ApcerMode) -> Result<Rates, MetricsError> {
    set.validate()?;
    let accepted = |e: &ScoredEntry| e.score >= threshold;
    let bona: Vec<&ScoredEntry> = set.entries.iter().filter(|e| e.label == Label::BonaFide).collect();
    let bpcer = bona.iter().filter(|e| !accepted(e)).count() as f64 / bona.len() as f64;

    let attacks: Vec<&ScoredEntry> = set.entries.iter().filter(|e| e.label == Label::Attack).collect();
    let apcer = match mode {
        ApcerMode::Pooled => attacks.iter().filter(|e| accepted(e)).count() as f64 / attacks.len() as f64,
        ApcerMode::MaxOverPai => {
            let mut per: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
            for e in &attacks {
                let slot = per.entry(e.pai.as_deref().unwrap_or("")).or_default();
                slot.1 += 1;
                if accepted(e) {
                    slot.0 += 1;
                }
            }
            per.values()
                .map(|&(acc, n)| acc as f64 / n as f64)
                .fold(0.0, f64::max)
        }
    };
    Ok(Rates::new(apcer, bpcer))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC with bona fide as the positive class, ordered by decreasing threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }
}

pub fn roc(set: &ScoredSet) -> Result<RocCurve, MetricsError> {
    set.validate()?;
    let n_pos = set.count(Label::BonaFide) as f64;
    let n_neg = set.count(Label::Attack) as f64;
    let mut sorted: Vec<(f64, Label)> = set.entries.iter().map(|e| (e.score, e.label)).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            match sorted[i].1 {
                Label::BonaFide => tp += 1,
                Label::Attack => fp += 1,
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_neg,
            tpr: tp as f64 / n_pos,
            threshold: s,
        });
    }
    points.push(RocPoint {
        fpr: 1.0,
        tpr: 1.0,
        threshold: f64::NEG_INFINITY,
    });
    points.dedup_by(|b, a| a.fpr == b.fpr && a.tpr == b.tpr);
    Ok(RocCurve { points })
}

/// Highest TPR among operating points with `fpr <= target`, read directly
/// off the curve without interpolation.
pub fn tpr_at_fpr(curve: &RocCurve, target: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.fpr <= target)
        .map(|p| p.tpr)
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator), 0 for one value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub apcer: MeanStd,
    pub bpcer: MeanStd,
    pub acer: MeanStd,
    pub count: usize,
}

/// Mean ± sample std of each rate across sub-protocol reports.
pub fn aggregate(reports: &[Rates]) -> Result<Aggregate, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::NoReports);
    }
    let col = |f: fn(&Rates) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(Aggregate {
        apcer: col(|r| r.apcer),
        bpcer: col(|r| r.bpcer),
        acer: col(|r| r.acer),
        count: reports.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub threshold: f64,
    pub rates: Rates,
    pub roc: RocCurve,
    pub auc: f64,
    /// `(target fpr, tpr)` pairs.
    pub tpr_at: Vec<(f64, f64)>,
    pub bona_fide: usize,
    pub attacks: usize,
}

pub fn evaluate(
    set: &ScoredSet,
    threshold: f64,
    mode: ApcerMode,
    fpr_targets: &[f64],
) -> Result<MetricReport, MetricsError> {
    let rates = rates_at_with(set, threshold, mode)?;
    let curve = roc(set)?;
    Ok(MetricReport {
        threshold,
        rates,
        auc: curve.auc(),
        tpr_at: fpr_targets.iter().map(|&t| (t, tpr_at_fpr(&curve, t))).collect(),
        roc: curve,
        bona_fide: set.count(Label::BonaFide),
        attacks: set.count(Label::Attack),
    })
}

pub const SCORE_HEADER: &str = "video_id,score,label,pai,subprotocol";

/// Reads `video_id,score,label,pai,subprotocol` lines. A header line and
/// `#` comment lines are skipped; `pai` and `subprotocol` may be empty.
pub fn read_scores<R: Read>(input: R) -> Result<ScoredSet, MetricsError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.get(0) == Some("video_id") {
            continue;
        }
        if rec.len() < 3 {
            return Err(MetricsError::Parse {
                line,
                msg: format!("expected at least 3 fields, got {}", rec.len()),
            });
        }
        let score: f64 = rec[1].parse().map_err(|_| MetricsError::Parse {
            line,
            msg: format!("bad score `{}`", &rec[1]),
        })?;
        if !score.is_finite() {
            return Err(MetricsError::Parse {
                line,
                msg: "non-finite score".into(),
            });
        }
        let label = rec[2].parse().map_err(|msg| MetricsError::Parse { line, msg })?;
        let opt = |i: usize| rec.get(i).filter(|s| !s.is_empty()).map(str::to_string);
        entries.push(ScoredEntry {
            video_id: rec[0].to_string(),
            score,
            label,
            pai: opt(3),
            subprotocol: opt(4),
        });
    }
    Ok(ScoredSet { entries })
}

pub fn write_scores<W: Write>(mut out: W, set: &ScoredSet, comment: Option<&str>) -> Result<(), MetricsError> {
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "{SCORE_HEADER}")?;
    for e in &set.entries {
        writeln!(
            out,
            "{},{:.17},{},{},{}",
            e.video_id,
            e.score,
            e.label.as_str(),
            e.pai.as_deref().unwrap_or(""),
            e.subprotocol.as_deref().unwrap_or("")
        )?;
    }
    Ok(())
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Human-readable table: one row per sub-protocol plus an `Avg±Std` row.
pub fn format_table(rows: &[(String, Rates)]) -> Result<String, MetricsError> {
    let agg = aggregate(&rows.iter().map(|r| r.1).collect::<Vec<_>>())?;
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:>12} {:>12} {:>12}", "Prot.", "APCER(%)", "BPCER(%)", "ACER(%)");
    for (name, r) in rows {
        let _ = writeln!(s, "{:<12} {:>12} {:>12} {:>12}", name, pct(r.apcer), pct(r.bpcer), pct(r.acer));
    }
    let ms = |m: MeanStd| format!("{}±{}", pct(m.mean), pct(m.std));
    let _ = writeln!(s, "{:<12} {:>12} {:>12} {:>12}", "Avg±Std", ms(agg.apcer), ms(agg.bpcer), ms(agg.acer));
    Ok(s)
}

/// Machine-readable `key=value` records, one line per metric.
pub fn format_records(rows: &[(String, Rates)]) -> Result<String, MetricsError> {
    let agg = aggregate(&rows.iter().map(|r| r.1).collect::<Vec<_>>())?;
    let mut s = String::new();
    for (name, r) in rows {
        for (metric, v) in [("apcer", r.apcer), ("bpcer", r.bpcer), ("acer", r.acer)] {
            let _ = writeln!(s, "subprotocol={name} metric={metric} value={v:.6}");
        }
    }
    for (metric, m) in [("apcer", agg.apcer), ("bpcer", agg.bpcer), ("acer", agg.acer)] {
        let _ = writeln!(
            s,
            "subprotocol=avg metric={metric} mean={:.6} std={:.6} n={}",
            m.mean, m.std, agg.count
        );
    }
    Ok(s)
}
