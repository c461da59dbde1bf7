//! Retrieval metrics over full Hamming rankings.
//!
//! A ranking is judged as a boolean relevance list over the whole database,
//! best first. With `R` relevant items in total and `R_k` of them in the top
//! `k`:
//!
//! ```text
//! AP = (1 / R) * sum_k (R_k / k) * rel_k
//! ```
//!
//! MAP averages AP over every query that has at least one relevant item
//! (queries without one are skipped and counted). PR curves are 11-point
//! interpolated per query, then averaged; top-K precision is `R_K / K`,
//! averaged over the same queries.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::dataio::{Dataset, FeatureMatrix, LabelMatrix, Split};
use crate::error::{Error, Result};
use crate::graph::{build_knn_graph, Metric};
use crate::index::{encode_corpus, search, PackedCodes};
use crate::net::HashNet;
use crate::Direction;

/// Standard recall levels 0.0, 0.1, ..., 1.0.
pub const PR_LEVELS: usize = 11;

/// True iff two multi-hot rows share a class.
pub fn relevance_judgment(a: &[u8], b: &[u8]) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
            context: "label row lengths",
        });
    }
    Ok(a.iter().zip(b).any(|(&x, &y)| x != 0 && y != 0))
}

/// AP of one ranking, or `None` when nothing in it is relevant.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Mean AP over the rankings that contain at least one relevant item.
pub fn mean_average_precision(rankings: &[Vec<bool>]) -> Result<f64> {
    let aps: Vec<f64> = rankings.iter().filter_map(|r| average_precision(r)).collect();
    if aps.is_empty() {
        return Err(Error::NoValidQueries);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// `(recall, precision)` at every rank holding a relevant item.
pub fn precision_recall_points(relevant: &[bool]) -> Result<Vec<(f64, f64)>> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(Error::NoValidQueries);
    }
    let mut hits = 0usize;
    let mut points = Vec::with_capacity(total);
    for (i, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            points.push((hits as f64 / total as f64, hits as f64 / (i + 1) as f64));
        }
    }
    Ok(points)
}

/// Interpolated precision at the 11 standard recall levels: the best
/// precision reached at any recall at or above the level.
pub fn interpolated_precision(relevant: &[bool]) -> Result<[f64; PR_LEVELS]> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(Error::NoValidQueries);
    }
    // precision at each hit, then a suffix max so entry h holds the best
    // precision at recall >= h / total
    let mut best: Vec<f64> = Vec::with_capacity(total);
    for (i, &rel) in relevant.iter().enumerate() {
        if rel {
            best.push((best.len() + 1) as f64 / (i + 1) as f64);
        }
    }
    for h in (0..total - 1).rev() {
        best[h] = best[h].max(best[h + 1]);
    }
    let mut out = [0.0; PR_LEVELS];
    for (level, slot) in out.iter_mut().enumerate() {
        // first hit count h with h / total >= level / 10, in integers
        let h = (level * total).div_ceil(10).max(1);
        *slot = best[h - 1];
    }
    Ok(out)
}

/// Averages interpolated precision pointwise over the rankings with a relevant item.
pub fn precision_recall_curve(rankings: &[Vec<bool>]) -> Result<Vec<(f64, f64)>> {
    let curves: Vec<[f64; PR_LEVELS]> = rankings
        .iter()
        .filter(|r| r.iter().any(|&x| x))
        .map(|r| interpolated_precision(r))
        .collect::<Result<_>>()?;
    if curves.is_empty() {
        return Err(Error::NoValidQueries);
    }
    Ok((0..PR_LEVELS)
        .map(|l| {
            let mean = curves.iter().map(|c| c[l]).sum::<f64>() / curves.len() as f64;
            (l as f64 / 10.0, mean)
        })
        .collect())
}

/// `precision@K = R_K / K`, averaged over all given rankings.
pub fn topk_precision(rankings: &[Vec<bool>], ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    if rankings.is_empty() {
        return Err(Error::NoValidQueries);
    }
    ks.iter()
        .map(|&k| {
            let mut sum = 0.0;
            for r in rankings {
                if k == 0 || k > r.len() {
                    return Err(Error::invalid(format!("K = {k} outside 1..={}", r.len())));
                }
                sum += r[..k].iter().filter(|&&x| x).count() as f64 / k as f64;
            }
            Ok((k, sum / rankings.len() as f64))
        })
        .collect()
}

/// All metrics for one retrieval direction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: Direction,
    pub bits: usize,
    pub map: f64,
    pub pr_points: Vec<(f64, f64)>,
    pub topk_points: Vec<(usize, f64)>,
    pub num_queries_evaluated: usize,
    /// Queries with nothing relevant in the database (including all-zero label rows).
    pub num_queries_skipped: usize,
}

/// Ranks the whole database for every query code and scores the result.
pub fn evaluate_codes(
    task: Direction,
    query_codes: &PackedCodes,
    db_codes: &PackedCodes,
    query_labels: &LabelMatrix,
    db_labels: &LabelMatrix,
    ks: &[usize],
) -> Result<EvalReport> {
    if query_codes.bits() != db_codes.bits() {
        return Err(Error::DimensionMismatch {
            expected: db_codes.bits(),
            actual: query_codes.bits(),
            context: "query code bits vs database code bits",
        });
    }
    if query_labels.rows() != query_codes.rows() || db_labels.rows() != db_codes.rows() {
        return Err(Error::invalid("label rows do not match code rows"));
    }
    let rankings: Vec<Vec<bool>> = (0..query_codes.rows())
        .into_par_iter()
        .map(|q| -> Result<Vec<bool>> {
            let ranked = search(db_codes, query_codes.row(q), None)?;
            ranked
                .iter()
                .map(|hit| relevance_judgment(query_labels.row(q), db_labels.row(hit.index)))
                .collect()
        })
        .collect::<Result<_>>()?;
    let valid: Vec<Vec<bool>> = rankings.into_iter().filter(|r| r.iter().any(|&x| x)).collect();
    let skipped = query_codes.rows() - valid.len();
    Ok(EvalReport {
        task,
        bits: db_codes.bits(),
        map: mean_average_precision(&valid)?,
        pr_points: precision_recall_curve(&valid)?,
        topk_points: topk_precision(&valid, ks)?,
        num_queries_evaluated: valid.len(),
        num_queries_skipped: skipped,
    })
}

/// Encodes the query and database sides of `split` with `net` and scores `task`.
pub fn evaluate_task(net: &HashNet, dataset: &Dataset, split: &Split, task: Direction, ks: &[usize]) -> Result<EvalReport> {
    let labels = dataset.labels().ok_or(Error::MissingLabels)?;
    let queries = dataset.features(task.query_modality()).gather(&split.query)?;
    let db = dataset.features(task.target_modality()).gather(&split.db)?;
    let query_codes = encode_corpus(net, &queries, task.query_modality())?;
    let db_codes = encode_corpus(net, &db, task.target_modality())?;
    evaluate_codes(
        task,
        &query_codes,
        &db_codes,
        &labels.gather(&split.query)?,
        &labels.gather(&split.db)?,
        ks,
    )
}

/// Default top-K cut-offs, clipped to the database size.
pub fn default_ks(db_size: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = [1, 5, 10, 20, 50, 100, 200, 500, 1000]
        .into_iter()
        .filter(|&k| k <= db_size)
        .collect();
    if ks.last() != Some(&db_size) && db_size > 0 {
        ks.push(db_size);
    }
    ks
}

pub fn write_pr_csv<W: Write>(mut out: W, report: &EvalReport) -> io::Result<()> {
    writeln!(out, "recall,precision")?;
    for (r, p) in &report.pr_points {
        writeln!(out, "{r:.1},{p:.6}")?;
    }
    Ok(())
}

pub fn write_topk_csv<W: Write>(mut out: W, report: &EvalReport) -> io::Result<()> {
    writeln!(out, "k,precision")?;
    for (k, p) in &report.topk_points {
        writeln!(out, "{k},{p:.6}")?;
    }
    Ok(())
}

/// Leave-one-out kNN classification accuracy on raw features.
///
/// Each row is predicted as the class with the most votes among its `k`
/// Euclidean neighbors (ties go to the lower class id) and counts as correct
/// when that class is among its own labels. A yardstick for how separable a
/// dataset is before any hashing.
pub fn knn_classifier_accuracy(features: &FeatureMatrix, labels: &LabelMatrix, k: usize) -> Result<f64> {
    if features.rows() != labels.rows() {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            actual: labels.rows(),
            context: "feature rows vs label rows",
        });
    }
    let graph = build_knn_graph(features, k, Metric::Euclidean)?;
    let classes = labels.num_classes();
    let correct = (0..features.rows())
        .filter(|&q| {
            let mut votes = vec![0usize; classes];
            for &p in graph.neighbors(q) {
                for (v, &l) in votes.iter_mut().zip(labels.row(p)) {
                    *v += usize::from(l != 0);
                }
            }
            let best = (0..classes).rev().max_by_key(|&c| votes[c]).unwrap_or(0);
            labels.row(q).get(best).is_some_and(|&l| l != 0)
        })
        .count();
    Ok(correct as f64 / features.rows() as f64)
}
