//! Test-phase encoding, nearest-neighbour retrieval and ranking metrics.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::model::{CodeLayout, CodeMatrix, Dictionary, FeatureMatrix, Matrix, Vector};
use crate::sparse_coding::LassoEncoder;

/// LASSO code of every column of `f` against `d`.
pub fn encode_gallery(d: &Dictionary, f: &FeatureMatrix, alpha: f64) -> Result<CodeMatrix> {
    ensure!(
        d.dim() == f.dim(),
        Dimension,
        "dictionary height {} vs feature dimension {}",
        d.dim(),
        f.dim()
    );
    let encoder = LassoEncoder::new(d.matrix(), alpha)?;
    let columns: Vec<Vector> = (0..f.len())
        .into_par_iter()
        .map(|j| encoder.encode(f.matrix().column(j)))
        .collect::<Result<_>>()?;
    CodeMatrix::new(
        CodeLayout::Single(f.modality()),
        Matrix::from_columns(&columns),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// The `k` gallery columns closest to `query` in Euclidean distance, ties to the lower
/// index.
pub fn knn_retrieve(query: &Vector, gallery: &Matrix, k: usize) -> Result<Vec<Neighbor>> {
    ensure!(gallery.ncols() > 0, Data, "empty gallery");
    ensure!(
        query.len() == gallery.nrows(),
        Dimension,
        "query length {} vs gallery code height {}",
        query.len(),
        gallery.nrows()
    );
    ensure!(
        k <= gallery.ncols(),
        InvalidArgument,
        "k = {k} exceeds gallery size {}",
        gallery.ncols()
    );
    let mut all: Vec<Neighbor> = gallery
        .column_iter()
        .enumerate()
        .map(|(index, col)| Neighbor {
            index,
            distance: (col - query).norm(),
        })
        .collect();
    all.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.index.cmp(&b.index))
    });
    all.truncate(k);
    Ok(all)
}

/// Fraction of queries whose nearest gallery column is their true match.
pub fn recognition_rate(queries: &Matrix, gallery: &Matrix, true_match: &[usize]) -> Result<f64> {
    ensure!(queries.ncols() > 0, Data, "no queries");
    ensure!(
        true_match.len() == queries.ncols(),
        Data,
        "{} ground-truth matches for {} queries",
        true_match.len(),
        queries.ncols()
    );
    let hits = queries
        .column_iter()
        .zip(true_match)
        .map(|(q, &t)| {
            let nn = knn_retrieve(&q.into_owned(), gallery, 1)?;
            Ok(usize::from(nn[0].index == t))
        })
        .sum::<Result<usize>>()?;
    Ok(hits as f64 / queries.ncols() as f64)
}

fn relevant_set(relevant: &[usize]) -> Result<HashSet<usize>> {
    let set: HashSet<usize> = relevant.iter().copied().collect();
    ensure!(!set.is_empty(), Data, "relevant set is empty");
    Ok(set)
}

/// Mean over relevant items of the precision at their ranks; relevant items missing from
/// `ranking` contribute zero.
pub fn average_precision(ranking: &[usize], relevant: &[usize]) -> Result<f64> {
    let set = relevant_set(relevant)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, id) in ranking.iter().enumerate() {
        if set.contains(id) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / set.len() as f64)
}

/// `(recall, precision)` after every rank.
pub fn precision_recall_curve(ranking: &[usize], relevant: &[usize]) -> Result<Vec<(f64, f64)>> {
    let set = relevant_set(relevant)?;
    let total = set.len() as f64;
    let mut hits = 0usize;
    Ok(ranking
        .iter()
        .enumerate()
        .map(|(r, id)| {
            hits += usize::from(set.contains(id));
            (hits as f64 / total, hits as f64 / (r + 1) as f64)
        })
        .collect())
}

pub fn mean_average_precision(aps: &[f64]) -> Result<f64> {
    ensure!(!aps.is_empty(), Data, "no queries to average");
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Pointwise mean of per-query curves, truncated to the shortest one.
pub fn macro_pr_curve(curves: &[Vec<(f64, f64)>]) -> Vec<(f64, f64)> {
    let Some(len) = curves.iter().map(Vec::len).min() else {
        return Vec::new();
    };
    let n = curves.len() as f64;
    (0..len)
        .map(|r| {
            let (re, pr) = curves
                .iter()
                .fold((0.0, 0.0), |(a, b), c| (a + c[r].0, b + c[r].1));
            (re / n, pr / n)
        })
        .collect()
}

/// One row of a results file.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub query_id: usize,
    /// 1-based rank.
    pub rank: usize,
    pub gallery_id: usize,
    pub distance: f64,
    pub relevant: bool,
}

/// Ranks the gallery for every query column; relevance is same-label.
pub fn retrieve_all(
    queries: &Matrix,
    gallery: &Matrix,
    query_labels: &[usize],
    gallery_labels: &[usize],
    k: usize,
) -> Result<Vec<ResultRow>> {
    ensure!(
        query_labels.len() == queries.ncols() && gallery_labels.len() == gallery.ncols(),
        Data,
        "labels cover ({}, {}) items, expected ({}, {})",
        query_labels.len(),
        gallery_labels.len(),
        queries.ncols(),
        gallery.ncols()
    );
    let per_query: Vec<Vec<ResultRow>> = (0..queries.ncols())
        .into_par_iter()
        .map(|q| {
            let hits = knn_retrieve(&queries.column(q).into_owned(), gallery, k)?;
            Ok(hits
                .into_iter()
                .enumerate()
                .map(|(r, nb)| ResultRow {
                    query_id: q,
                    rank: r + 1,
                    gallery_id: nb.index,
                    distance: nb.distance,
                    relevant: gallery_labels[nb.index] == query_labels[q],
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_query.into_iter().flatten().collect())
}

pub const RESULTS_HEADER: &str = "query_id,rank,gallery_id,distance,relevant";

pub fn format_results(rows: &[ResultRow]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:?},{}\n",
            r.query_id,
            r.rank,
            r.gallery_id,
            r.distance,
            u8::from(r.relevant)
        ));
    }
    out
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == RESULTS_HEADER => {}
        _ => {
            return Err(Error::Format(format!(
                "results file must start with {RESULTS_HEADER:?}"
            )))
        }
    }
    lines
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Format(format!("line {}: malformed result row {line:?}", n + 1));
            ensure!(f.len() == 5, Format, "line {}: expected 5 fields", n + 1);
            let relevant = match f[4] {
                "1" | "true" => true,
                "0" | "false" => false,
                _ => return Err(bad()),
            };
            Ok(ResultRow {
                query_id: f[0].parse().map_err(|_| bad())?,
                rank: f[1].parse().map_err(|_| bad())?,
                gallery_id: f[2].parse().map_err(|_| bad())?,
                distance: f[3].parse().map_err(|_| bad())?,
                relevant,
            })
        })
        .collect()
}

/// Metrics computed from a results file.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// `(query_id, AP)`; queries without any relevant result are skipped.
    pub per_query_ap: Vec<(usize, f64)>,
    pub map: f64,
    /// Mean AP per query label, when labels are known.
    pub per_class_ap: BTreeMap<usize, f64>,
    pub pr_curves: Vec<(usize, Vec<(f64, f64)>)>,
    pub macro_pr: Vec<(f64, f64)>,
    /// Rank-1 accuracy against ground-truth matches, when given.
    pub recognition_rate: Option<f64>,
}

/// AP per query from its ranked rows. The relevant count is the number of rows flagged
/// relevant, so results should cover the whole gallery.
pub fn evaluate_results(
    rows: &[ResultRow],
    query_labels: Option<&[usize]>,
    true_match: Option<&BTreeMap<usize, usize>>,
) -> Result<Evaluation> {
    let mut by_query: BTreeMap<usize, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        by_query.entry(r.query_id).or_default().push(r);
    }
    ensure!(!by_query.is_empty(), Data, "results file has no rows");

    let mut per_query_ap = Vec::new();
    let mut pr_curves = Vec::new();
    let mut class_sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut rank1_hits = 0usize;
    for (&q, list) in &mut by_query {
        list.sort_by_key(|r| r.rank);
        if let Some(t) = true_match {
            let want = t
                .get(&q)
                .ok_or_else(|| Error::Data(format!("no ground-truth match for query {q}")))?;
            rank1_hits += usize::from(list[0].gallery_id == *want);
        }
        let ranking: Vec<usize> = list.iter().map(|r| r.gallery_id).collect();
        let relevant: Vec<usize> = list
            .iter()
            .filter(|r| r.relevant)
            .map(|r| r.gallery_id)
            .collect();
        if relevant.is_empty() {
            continue;
        }
        let ap = average_precision(&ranking, &relevant)?;
        per_query_ap.push((q, ap));
        pr_curves.push((q, precision_recall_curve(&ranking, &relevant)?));
        if let Some(labels) = query_labels {
            let label = *labels
                .get(q)
                .ok_or_else(|| Error::Data(format!("no label for query {q}")))?;
            let e = class_sums.entry(label).or_insert((0.0, 0));
            e.0 += ap;
            e.1 += 1;
        }
    }
    let aps: Vec<f64> = per_query_ap.iter().map(|(_, ap)| *ap).collect();
    let map = mean_average_precision(&aps)?;
    let curves: Vec<Vec<(f64, f64)>> = pr_curves.iter().map(|(_, c)| c.clone()).collect();
    Ok(Evaluation {
        map,
        per_class_ap: class_sums
            .into_iter()
            .map(|(c, (s, n))| (c, s / n as f64))
            .collect(),
        macro_pr: macro_pr_curve(&curves),
        pr_curves,
        per_query_ap,
        recognition_rate: true_match.map(|_| rank1_hits as f64 / by_query.len() as f64),
    })
}
