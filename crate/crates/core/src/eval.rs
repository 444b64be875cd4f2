//! ROC-AUC, ROC curves, PCA projection of hidden states, and report export.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    (pos, labels.len() - pos)
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Evaluation(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Evaluation("NaN score".into()));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::Evaluation("AUC needs both classes present".into()));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve by the Mann-Whitney rank statistic; tied
/// scores share their average rank, so each positive/negative tie counts 1/2.
/// Label 1 is the positive (anomalous) class.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 averaged
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// ROC points `(fpr, tpr)` at every distinct score threshold, from `(0, 0)` to `(1, 1)`.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (idx, &k) in order.iter().enumerate() {
        if labels[k] == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order.get(idx + 1).is_none_or(|&next| scores[next] != scores[k]);
        if last_of_tie {
            points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        }
    }
    Ok(points)
}

/// Trapezoidal area under a ROC polyline.
pub fn trapezoid_auc(roc: &[(f64, f64)]) -> f64 {
    roc.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

const PCA_TOL: f64 = 1e-10;
const PCA_MAX_ITER: usize = 10_000;

fn mat_vec(cov: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|i| cov[i * d..(i + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Top eigenvector of a symmetric PSD matrix by power iteration.
fn power_iteration(cov: &[f64], d: usize) -> (f64, Vec<f64>) {
    // deterministic start that is unlikely to be orthogonal to anything
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i * 7919) % 101) as f64 / 101.0).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..PCA_MAX_ITER {
        let mut next = mat_vec(cov, &v);
        lambda = normalize(&mut next);
        if lambda == 0.0 {
            return (0.0, v);
        }
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = next;
        if delta < PCA_TOL {
            break;
        }
    }
    (lambda, v)
}

/// Projects rows onto their top two principal directions.
///
/// Each direction is oriented so its largest-magnitude entry is positive.
/// Rank-one data gets a zero second coordinate.
pub fn pca_project(rows: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Evaluation("PCA needs at least two points".into()));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Evaluation("PCA rows have different widths".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();

    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for i in 0..d {
            if r[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                cov[i * d + j] += r[i] * r[j];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    let scale = (0..d).map(|i| cov[i * d + i]).fold(0.0, f64::max);

    let mut directions = Vec::with_capacity(2);
    for _ in 0..2 {
        let (lambda, mut v) = power_iteration(&cov, d);
        if lambda <= PCA_TOL * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        let (imax, _) = v.iter().enumerate().fold((0, 0.0), |best, (i, &x)| if x.abs() > best.1 { (i, x.abs()) } else { best });
        if v[imax] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        directions.push(v);
    }

    let project = |r: &[f64], k: usize| -> f64 {
        directions.get(k).map_or(0.0, |v: &Vec<f64>| r.iter().zip(v).map(|(a, b)| a * b).sum())
    };
    Ok(centered.iter().map(|r| (project(r, 0), project(r, 1))).collect())
}

/// One scored candidate, keyed by the external node names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub candidate: usize,
    pub src: String,
    pub dst: String,
    pub snapshot: usize,
    pub score: f64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub roc: Vec<(f64, f64)>,
    pub scores: Vec<ScoreRow>,
    /// PCA of final hidden states: `(x, y, label)` per candidate.
    pub embedding: Vec<(f64, f64, u8)>,
}

impl EvalReport {
    pub fn build(scores: Vec<ScoreRow>, hiddens: &[Vec<f64>]) -> Result<Self> {
        let s: Vec<f64> = scores.iter().map(|r| r.score).collect();
        let l: Vec<u8> = scores.iter().map(|r| r.label).collect();
        let auc = roc_auc(&s, &l)?;
        let roc = roc_curve(&s, &l)?;
        let embedding = pca_project(hiddens)?
            .into_iter()
            .zip(&l)
            .map(|((x, y), &label)| (x, y, label))
            .collect();
        Ok(Self { auc, roc, scores, embedding })
    }

    pub fn positives(&self) -> usize {
        self.scores.iter().filter(|r| r.label == 1).count()
    }
}

#[derive(Serialize)]
struct Metrics<'a, C: Serialize> {
    auc: f64,
    trapezoid_auc: f64,
    candidates: usize,
    anomalies: usize,
    normals: usize,
    config: &'a C,
}

/// Writes `metrics.json`, `roc.csv`, `embedding.csv` and `scores.csv` into `out_dir`.
pub fn export_report<C: Serialize>(report: &EvalReport, config: &C, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let anomalies = report.positives();
    let metrics = Metrics {
        auc: report.auc,
        trapezoid_auc: trapezoid_auc(&report.roc),
        candidates: report.scores.len(),
        anomalies,
        normals: report.scores.len() - anomalies,
        config,
    };
    let mut json = serde_json::to_string_pretty(&metrics)?;
    json.push('\n');
    fs::write(dir.join("metrics.json"), json)?;

    let mut roc = csv::Writer::from_path(dir.join("roc.csv"))?;
    roc.write_record(["fpr", "tpr"])?;
    for (fpr, tpr) in &report.roc {
        roc.write_record([fpr.to_string(), tpr.to_string()])?;
    }
    roc.flush()?;

    let mut emb = csv::Writer::from_path(dir.join("embedding.csv"))?;
    emb.write_record(["x", "y", "label"])?;
    for (x, y, label) in &report.embedding {
        emb.write_record([x.to_string(), y.to_string(), label.to_string()])?;
    }
    emb.flush()?;

    write_scores(dir.join("scores.csv"), &report.scores)
}

pub fn write_scores(path: impl AsRef<Path>, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
