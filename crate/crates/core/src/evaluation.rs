//! Accuracy reporting over match results.
//!
//! Two headline numbers are reported side by side:
//!
//! * rank-1 accuracy: the best gallery subject equals the true subject,
//!   regardless of the threshold;
//! * thresholded accuracy: rank-1 correct *and* accepted.
//!
//! The threshold sweep scores verification decisions instead: a probe's
//! decision at threshold `t` is right when a correct rank-1 match is
//! accepted or an incorrect one is rejected. Its maximum therefore equals
//! [`calibrate_threshold`](crate::matcher::calibrate_threshold) run on the
//! same scores.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::atomic_write;
use crate::matcher::{candidate_thresholds, MatchResult};

pub const DEFAULT_SPLIT_RATIO: f64 = 0.8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("probe '{0}' has no ground-truth subject")]
    UnknownProbe(String),
    #[error("need at least 2 subjects to split, got {0}")]
    TooFewSubjects(usize),
    #[error("split ratio {0} is outside (0, 1)")]
    InvalidRatio(f64),
    #[error("match results use different thresholds ({0} and {1})")]
    MixedThresholds(f64, f64),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("epoch {found} follows epoch {previous}; epochs must count up from 1")]
    NonConsecutiveEpochs { previous: u32, found: u32 },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// One comparison row from a published results table. These are fixed
/// figures for context only; none of these methods run here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub study: String,
    pub technique: String,
    /// The result exactly as published.
    pub result: String,
    /// The same result as a fraction in [0, 1].
    pub score: f64,
}

impl ReferenceRow {
    pub fn label(&self) -> String {
        format!("{} {}", self.technique, self.result)
    }
}

/// (study, technique, published result, fraction)
const REFERENCE_TABLE: &[(&str, &str, &str, f64)] = &[
    ("Current Study", "Cosine Similarity", "95 %", 0.95),
    ("[11]", "SSIM", "0.5773", 0.5773),
    ("[11]", "FSM", "0.8661", 0.8661),
    ("[11]", "FSIM", "0.2803", 0.2803),
    ("[26]", "SVC", "70 %", 0.70),
    ("[26]", "LDA", "72 %", 0.72),
    ("[26]", "K-NN", "46 %", 0.46),
    ("[26]", "DT", "37 %", 0.37),
    ("[26]", "LR", "78 %", 0.78),
    ("[26]", "NB", "65 %", 0.65),
    ("[10]", "HOG", "85.0 %", 0.85),
    ("[10]", "LBP", "82.5 %", 0.825),
    ("[10]", "HOG & LBP", "82.5 %", 0.825),
    ("[10]", "Harris", "77.5 %", 0.775),
    ("[10]", "Surf", "55.0 %", 0.55),
    ("[10]", "PCA", "72.5 %", 0.725),
    ("[10]", "K-NN", "85 %", 0.85),
];

pub fn reference_rows() -> Vec<ReferenceRow> {
    REFERENCE_TABLE
        .iter()
        .map(|&(study, technique, result, score)| ReferenceRow {
            study: study.into(),
            technique: technique.into(),
            result: result.into(),
            score,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub probe_id: String,
    pub true_subject: String,
    pub predicted_subject: Option<String>,
    pub similarity: f64,
    /// Rank-1 correctness.
    pub correct: bool,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_probes: usize,
    /// `None` when there are no probes.
    pub rank1_accuracy: Option<f64>,
    pub thresholded_accuracy: Option<f64>,
    pub threshold_used: Option<f64>,
    pub per_probe: Vec<ProbeOutcome>,
    pub sweep: Vec<SweepPoint>,
    pub reference_rows: Vec<ReferenceRow>,
}

/// Scores match results against ground truth (`probe_id -> subject`).
pub fn evaluate(results: &[MatchResult], truth: &HashMap<String, String>) -> Result<EvalReport, EvalError> {
    let mut threshold_used: Option<f64> = None;
    let mut per_probe = Vec::with_capacity(results.len());
    for r in results {
        let true_subject = truth.get(&r.probe_id).ok_or_else(|| EvalError::UnknownProbe(r.probe_id.clone()))?;
        match threshold_used {
            Some(t) if t != r.threshold => return Err(EvalError::MixedThresholds(t, r.threshold)),
            _ => threshold_used = Some(r.threshold),
        }
        let correct = r.best_subject.as_deref() == Some(true_subject.as_str());
        per_probe.push(ProbeOutcome {
            probe_id: r.probe_id.clone(),
            true_subject: true_subject.clone(),
            predicted_subject: r.best_subject.clone(),
            similarity: r.similarity,
            correct,
            accepted: r.accepted,
        });
    }

    let n = per_probe.len();
    let frac = |count: usize| (n > 0).then(|| count as f64 / n as f64);
    let rank1 = per_probe.iter().filter(|p| p.correct).count();
    let thresholded = per_probe.iter().filter(|p| p.correct && p.accepted).count();

    let sweep = if n == 0 {
        Vec::new()
    } else {
        candidate_thresholds(per_probe.iter().map(|p| p.similarity))
            .into_iter()
            .map(|t| {
                let right = per_probe.iter().filter(|p| (p.similarity >= t) == p.correct).count();
                SweepPoint { threshold: t, accuracy: right as f64 / n as f64 }
            })
            .collect()
    };

    Ok(EvalReport {
        n_probes: n,
        rank1_accuracy: frac(rank1),
        thresholded_accuracy: frac(thresholded),
        threshold_used,
        per_probe,
        sweep,
        reference_rows: reference_rows(),
    })
}

/// Splits subjects into train and validation sets with a seeded shuffle.
/// The train side gets `round(ratio * n)` subjects, kept within `1..n`.
pub fn split_pairs(subjects: &[String], ratio: f64, seed: u64) -> Result<(Vec<String>, Vec<String>), EvalError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(EvalError::InvalidRatio(ratio));
    }
    let unique: BTreeSet<&String> = subjects.iter().collect();
    if unique.len() < 2 {
        return Err(EvalError::TooFewSubjects(unique.len()));
    }
    let mut shuffled: Vec<String> = unique.into_iter().cloned().collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let validation = shuffled.split_off(n_train);
    Ok((shuffled, validation))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: u32,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Per-epoch training metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveLog {
    pub rows: Vec<CurveRow>,
}

const CURVE_HEADER: [&str; 5] = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"];

impl CurveLog {
    pub fn new(rows: Vec<CurveRow>) -> Result<Self, EvalError> {
        let mut previous = 0;
        for r in &rows {
            if r.epoch != previous + 1 {
                return Err(EvalError::NonConsecutiveEpochs { previous, found: r.epoch });
            }
            previous = r.epoch;
        }
        Ok(Self { rows })
    }

    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| EvalError::Parse(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != CURVE_HEADER {
            return Err(EvalError::Parse(format!("expected header {}, got {:?}", CURVE_HEADER.join(","), headers)));
        }
        let rows = reader
            .deserialize()
            .collect::<Result<Vec<CurveRow>, _>>()
            .map_err(|e| EvalError::Parse(e.to_string()))?;
        if rows.is_empty() {
            return Err(EvalError::Parse("curve log has no rows".into()));
        }
        Self::new(rows)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}

pub fn load_curve_log(path: &Path) -> Result<CurveLog, EvalError> {
    CurveLog::from_csv(&fs::read_to_string(path)?)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2} %", 100.0 * x))
}

/// Plain-text summary with the comparison table.
pub fn render_text(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "probes:               {}", report.n_probes);
    let _ = writeln!(s, "rank-1 accuracy:      {}", pct(report.rank1_accuracy));
    let _ = writeln!(s, "thresholded accuracy: {}", pct(report.thresholded_accuracy));
    let _ = writeln!(
        s,
        "threshold:            {}",
        report.threshold_used.map_or_else(|| "n/a".to_string(), |t| format!("{t:.4}"))
    );
    if let Some(best) = report.sweep.iter().max_by(|a, b| a.accuracy.total_cmp(&b.accuracy)) {
        let _ = writeln!(
            s,
            "best sweep threshold: {:.4} ({})",
            best.threshold,
            pct(Some(best.accuracy))
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<16}{:<24}Results", "Study", "Used techniques");
    let _ = writeln!(s, "{:<16}{:<24}{} (rank-1)", "This run", "Cosine Similarity", pct(report.rank1_accuracy));
    for row in &report.reference_rows {
        let _ = writeln!(s, "{:<16}{:<24}{}", row.study, row.technique, row.result);
    }
    s
}

/// Writes `report.json`, `report.txt` and, with a curve log, `curves.csv`
/// into `dir`.
pub fn render_report(report: &EvalReport, curve: Option<&CurveLog>, dir: &Path) -> Result<(), EvalError> {
    let json = serde_json::to_vec_pretty(report).map_err(|e| EvalError::Parse(e.to_string()))?;
    atomic_write(&dir.join("report.json"), &json)?;
    atomic_write(&dir.join("report.txt"), render_text(report).as_bytes())?;
    if let Some(c) = curve {
        atomic_write(&dir.join("curves.csv"), c.to_csv().as_bytes())?;
    }
    Ok(())
}
