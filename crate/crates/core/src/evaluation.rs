//! Top-1 retrieval and the metrics built on it: P@1, coverage at a target
//! precision and the correct/incorrect score histogram.

use serde::{Deserialize, Serialize};

use crate::diffmath::ParamStore;
use crate::encoder::Features;
use crate::mining::Dataset;
use crate::model::AlcModel;

pub const DEFAULT_BINS: usize = 50;
pub const SCORES_HEADER: &str = "query_id\tlabel_id\tscore\tcorrect";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("no labels to retrieve from")]
    EmptyLabelSpace,
    #[error("no predictions")]
    EmptyPredictions,
    #[error("embedding {index} has length {actual}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("histogram needs at least one bin")]
    NoBins,
    #[error("scores line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub query_id: u64,
    pub label_id: u64,
    pub score: f64,
    pub correct: bool,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Exhaustive top-1 search by cosine similarity. Returns the winning label
/// position and score per query; ties go to the lowest position.
pub fn retrieve_top1(
    query_embeddings: &[Vec<f64>],
    label_embeddings: &[Vec<f64>],
) -> Result<Vec<(usize, f64)>, EvalError> {
    let first = label_embeddings.first().ok_or(EvalError::EmptyLabelSpace)?;
    let d = first.len();
    for (index, e) in label_embeddings.iter().chain(query_embeddings).enumerate() {
        if e.len() != d {
            return Err(EvalError::DimensionMismatch {
                index,
                expected: d,
                actual: e.len(),
            });
        }
    }
    Ok(query_embeddings
        .iter()
        .map(|q| {
            let mut best = (0, f64::NEG_INFINITY);
            for (l, e) in label_embeddings.iter().enumerate() {
                let s = cosine(q, e);
                if s > best.1 {
                    best = (l, s);
                }
            }
            best
        })
        .collect())
}

/// Embeds every query and label of `dataset` and scores each query's top-1
/// label. Labels must be in ascending id order (as [`Dataset`] keeps them)
/// for ties to resolve to the lowest id.
pub fn predict(
    model: &AlcModel,
    params: &ParamStore,
    dataset: &Dataset,
) -> Result<Vec<ScoredPrediction>, EvalError> {
    let qf: Vec<Features> = dataset
        .queries
        .iter()
        .map(|q| model.encoder.featurize(&q.text))
        .collect();
    let lf: Vec<Features> = dataset
        .labels
        .iter()
        .map(|l| model.encoder.featurize(&l.text))
        .collect();
    let q_embs = model
        .encoder
        .embed_all(params, &qf.iter().collect::<Vec<_>>());
    let l_embs = model
        .encoder
        .embed_all(params, &lf.iter().collect::<Vec<_>>());
    let top = retrieve_top1(&q_embs, &l_embs)?;
    Ok(top
        .into_iter()
        .enumerate()
        .map(|(q, (l, score))| ScoredPrediction {
            query_id: dataset.queries[q].id,
            label_id: dataset.labels[l].id,
            score,
            correct: dataset.is_positive(q, l),
        })
        .collect())
}

pub fn precision_at_1(preds: &[ScoredPrediction]) -> Result<f64, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptyPredictions);
    }
    Ok(preds.iter().filter(|p| p.correct).count() as f64 / preds.len() as f64)
}

/// Largest accepted fraction whose precision reaches `target_precision`.
///
/// Acceptance sets have the form `{score ≥ τ}`, so tied scores are taken or
/// left together. Returns the coverage and τ (the lowest accepted score),
/// or `(0, None)` when no acceptance set is precise enough.
pub fn coverage_at_target(preds: &[ScoredPrediction], target_precision: f64) -> (f64, Option<f64>) {
    assert!(
        target_precision > 0.0 && target_precision <= 1.0,
        "target precision must be in (0, 1], got {target_precision}"
    );
    let mut rows: Vec<(f64, bool)> = preds.iter().map(|p| (p.score, p.correct)).collect();
    rows.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best = (0usize, None);
    let (mut accepted, mut correct) = (0usize, 0usize);
    let mut i = 0;
    while i < rows.len() {
        let score = rows[i].0;
        while i < rows.len() && rows[i].0 == score {
            accepted += 1;
            correct += usize::from(rows[i].1);
            i += 1;
        }
        if correct as f64 / accepted as f64 >= target_precision {
            best = (accepted, Some(score));
        }
    }
    if preds.is_empty() {
        return (0.0, None);
    }
    (best.0 as f64 / preds.len() as f64, best.1)
}

/// Fraction of rows a fixed threshold accepts (0 without a threshold).
pub fn coverage_at_threshold(preds: &[ScoredPrediction], threshold: Option<f64>) -> f64 {
    match threshold {
        Some(t) if !preds.is_empty() => {
            preds.iter().filter(|p| p.score >= t).count() as f64 / preds.len() as f64
        }
        _ => 0.0,
    }
}

/// Precision among the rows a threshold accepts, if it accepts any.
pub fn precision_at_threshold(preds: &[ScoredPrediction], threshold: f64) -> Option<f64> {
    let accepted: Vec<_> = preds.iter().filter(|p| p.score >= threshold).collect();
    if accepted.is_empty() {
        None
    } else {
        Some(accepted.iter().filter(|p| p.correct).count() as f64 / accepted.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    /// `bins + 1` uniform edges over the observed score range.
    pub edges: Vec<f64>,
    pub correct_counts: Vec<usize>,
    pub incorrect_counts: Vec<usize>,
    /// `Σ_b min(p⁺_b, p⁻_b)` over the per-class normalized bin masses; 0
    /// when either class is empty.
    pub overlap: f64,
}

pub fn score_histogram(
    preds: &[ScoredPrediction],
    bins: usize,
) -> Result<ScoreHistogram, EvalError> {
    if bins == 0 {
        return Err(EvalError::NoBins);
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyPredictions);
    }
    let lo = preds.iter().map(|p| p.score).fold(f64::INFINITY, f64::min);
    let hi = preds
        .iter()
        .map(|p| p.score)
        .fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|b| if b == bins { hi } else { lo + width * b as f64 })
        .collect();
    let mut correct_counts = vec![0usize; bins];
    let mut incorrect_counts = vec![0usize; bins];
    for p in preds {
        let b = if width > 0.0 {
            (((p.score - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        if p.correct {
            correct_counts[b] += 1;
        } else {
            incorrect_counts[b] += 1;
        }
    }
    let nc: usize = correct_counts.iter().sum();
    let ni: usize = incorrect_counts.iter().sum();
    let overlap = if nc == 0 || ni == 0 {
        0.0
    } else {
        correct_counts
            .iter()
            .zip(&incorrect_counts)
            .map(|(&c, &i)| (c as f64 / nc as f64).min(i as f64 / ni as f64))
            .sum()
    };
    Ok(ScoreHistogram {
        edges,
        correct_counts,
        incorrect_counts,
        overlap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub p_at_1: f64,
    pub c_at_1: f64,
    pub threshold: Option<f64>,
    pub target_precision: f64,
    pub histogram: ScoreHistogram,
}

impl EvalReport {
    /// Metrics with the threshold chosen on `preds` itself.
    pub fn new(
        preds: &[ScoredPrediction],
        target_precision: f64,
        bins: usize,
    ) -> Result<Self, EvalError> {
        let (c_at_1, threshold) = coverage_at_target(preds, target_precision);
        Ok(Self {
            p_at_1: precision_at_1(preds)?,
            c_at_1,
            threshold,
            target_precision,
            histogram: score_histogram(preds, bins)?,
        })
    }

    /// Metrics on `preds` with the threshold chosen on `calibration`.
    pub fn calibrated(
        preds: &[ScoredPrediction],
        calibration: &[ScoredPrediction],
        target_precision: f64,
        bins: usize,
    ) -> Result<Self, EvalError> {
        let (_, threshold) = coverage_at_target(calibration, target_precision);
        Ok(Self {
            p_at_1: precision_at_1(preds)?,
            c_at_1: coverage_at_threshold(preds, threshold),
            threshold,
            target_precision,
            histogram: score_histogram(preds, bins)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

pub fn write_scores(preds: &[ScoredPrediction]) -> String {
    let mut out = String::from(SCORES_HEADER);
    out.push('\n');
    for p in preds {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            p.query_id,
            p.label_id,
            p.score,
            u8::from(p.correct)
        ));
    }
    out
}

pub fn read_scores(text: &str) -> Result<Vec<ScoredPrediction>, EvalError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == SCORES_HEADER => {}
        _ => {
            return Err(EvalError::Parse {
                line: 1,
                message: format!("expected header `{SCORES_HEADER}`"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Parse {
            line: i + 1,
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(err(format!("expected 4 columns, got {}", cols.len())));
        }
        let query_id = cols[0].parse().map_err(|e| err(format!("query_id: {e}")))?;
        let label_id = cols[1].parse().map_err(|e| err(format!("label_id: {e}")))?;
        let score: f64 = cols[2].parse().map_err(|e| err(format!("score: {e}")))?;
        if !score.is_finite() {
            return Err(err("score is not finite".into()));
        }
        let correct = match cols[3].trim_end() {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("correct must be 0 or 1, got `{other}`"))),
        };
        out.push(ScoredPrediction {
            query_id,
            label_id,
            score,
            correct,
        });
    }
    Ok(out)
}
