//! Exact brute-force open-set retrieval metrics.
//!
//! AP@k is normalized by `min(R, k)`, where `R` is the number of relevant
//! index items, so a perfect ranking scores exactly 1. Queries without any
//! relevant index item are excluded from the mean. Similarity ties are
//! broken by ascending item id.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::io::Write;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Query and index sides of a retrieval evaluation.
#[derive(Debug, Clone)]
pub struct RetrievalSplit {
    pub query_embeddings: Array2<f64>,
    pub query_labels: Vec<u64>,
    pub query_ids: Vec<u64>,
    pub index_embeddings: Array2<f64>,
    pub index_labels: Vec<u64>,
    pub index_ids: Vec<u64>,
}

impl RetrievalSplit {
    pub fn validate(&self) -> Result<()> {
        let q = self.query_embeddings.nrows();
        let i = self.index_embeddings.nrows();
        if q == 0 {
            return Err(Error::EmptyDataset("retrieval queries".into()));
        }
        if i == 0 {
            return Err(Error::EmptyIndex);
        }
        if self.query_labels.len() != q || self.query_ids.len() != q {
            return Err(Error::ShapeMismatch("query labels/ids do not match query rows".into()));
        }
        if self.index_labels.len() != i || self.index_ids.len() != i {
            return Err(Error::ShapeMismatch("index labels/ids do not match index rows".into()));
        }
        if self.query_embeddings.ncols() != self.index_embeddings.ncols() {
            return Err(Error::ShapeMismatch("query and index dimensions differ".into()));
        }
        for ids in [&self.query_ids, &self.index_ids] {
            let mut seen = HashSet::with_capacity(ids.len());
            if let Some(&dup) = ids.iter().find(|&&id| !seen.insert(id)) {
                return Err(Error::DuplicateId(dup));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub map_at_k: f64,
    pub k: usize,
    /// One entry per query; `None` for queries excluded for having no relevant item.
    pub per_query_ap: Vec<Option<f64>>,
    pub num_valid_queries: usize,
}

/// Index positions sorted by descending dot product with `query`, ties by ascending id.
pub fn rank(query: ArrayView1<f64>, index: ArrayView2<f64>, index_ids: &[u64]) -> Result<Vec<usize>> {
    if index.nrows() == 0 {
        return Err(Error::EmptyIndex);
    }
    if index_ids.len() != index.nrows() {
        return Err(Error::ShapeMismatch("index ids do not match index rows".into()));
    }
    if query.len() != index.ncols() {
        return Err(Error::ShapeMismatch("query and index dimensions differ".into()));
    }
    let sims = index.dot(&query);
    Ok(rank_scores(sims.as_slice().expect("contiguous"), index_ids))
}

fn rank_scores(sims: &[f64], ids: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    // Finite scores only, so partial_cmp is total here and 0.0 ties with -0.0.
    order.sort_by(|&a, &b| {
        sims[b].partial_cmp(&sims[a]).unwrap_or(Ordering::Equal).then(ids[a].cmp(&ids[b]))
    });
    order
}

/// `AP@k = (1/min(R,k)) * sum_{i<=k} rel(i) * precision@i`.
pub fn average_precision_at_k(relevance: &[bool], num_relevant: usize, k: usize) -> Result<f64> {
    if num_relevant == 0 {
        return Err(Error::NoRelevantItems);
    }
    if k == 0 {
        return Err(Error::ConfigInvalid("k must be >= 1".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / num_relevant.min(k) as f64)
}

/// mAP@k over all queries with at least one relevant index item.
pub fn map_at_k(split: &RetrievalSplit, k: usize) -> Result<MetricReport> {
    split.validate()?;
    if k == 0 {
        return Err(Error::ConfigInvalid("k must be >= 1".into()));
    }
    let mut label_counts: HashMap<u64, usize> = HashMap::new();
    for &l in &split.index_labels {
        *label_counts.entry(l).or_default() += 1;
    }
    let sims = split.query_embeddings.dot(&split.index_embeddings.t());
    let mut per_query_ap = Vec::with_capacity(split.query_ids.len());
    for (q, row) in sims.outer_iter().enumerate() {
        let label = split.query_labels[q];
        let num_relevant = label_counts.get(&label).copied().unwrap_or(0);
        if num_relevant == 0 {
            per_query_ap.push(None);
            continue;
        }
        let order = rank_scores(row.as_slice().expect("contiguous"), &split.index_ids);
        let flags: Vec<bool> =
            order.iter().take(k).map(|&i| split.index_labels[i] == label).collect();
        per_query_ap.push(Some(average_precision_at_k(&flags, num_relevant, k)?));
    }
    let valid: Vec<f64> = per_query_ap.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::NoValidQueries);
    }
    let map = valid.iter().sum::<f64>() / valid.len() as f64;
    Ok(MetricReport { map_at_k: map, k, per_query_ap, num_valid_queries: valid.len() })
}

/// Fraction of rows of `view_a` whose nearest row of `view_b` (ties to the lower
/// position) is the row at the same position.
pub fn recall_at_1_paired(view_a: ArrayView2<f64>, view_b: ArrayView2<f64>) -> Result<f64> {
    if view_a.dim() != view_b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "paired views {:?} vs {:?}",
            view_a.dim(),
            view_b.dim()
        )));
    }
    if view_a.nrows() == 0 {
        return Err(Error::EmptyDataset("paired views".into()));
    }
    let sims = view_a.dot(&view_b.t());
    let hits = sims
        .outer_iter()
        .enumerate()
        .filter(|(i, row)| {
            let mut best = 0;
            for (j, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = j;
                }
            }
            best == *i
        })
        .count();
    Ok(hits as f64 / view_a.nrows() as f64)
}

/// Mean of the in-domain and out-of-domain scores.
pub fn composite_score(in_domain: f64, out_of_domain: f64) -> f64 {
    0.5 * (in_domain + out_of_domain)
}

/// One line of a metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub step: usize,
    pub split_name: String,
    pub metric_name: String,
    pub k: usize,
    pub value: f64,
}

/// Writes rows with the header `run_id,step,split_name,metric_name,k,value`.
pub fn write_metric_rows<W: Write>(w: W, rows: &[MetricRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}
