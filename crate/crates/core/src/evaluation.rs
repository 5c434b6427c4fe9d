//! Link metrics: micro precision/recall/F1, crossing-conflict rate and
//! recall by entity distance.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::docmodel::Document;
use crate::error::{Error, Result};
use crate::geometry::{distance, segments_cross};

pub type LinkSet = BTreeSet<(usize, usize)>;

/// Default bucket edges over normalized center distance.
pub const DEFAULT_BUCKETS: [f64; 4] = [0.0, 0.15, 0.3, std::f64::consts::SQRT_2];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl LinkCounts {
    pub fn of(pred: &LinkSet, gold: &LinkSet) -> Self {
        let tp = pred.intersection(gold).count() as u64;
        LinkCounts {
            tp,
            fp: pred.len() as u64 - tp,
            fn_: gold.len() as u64 - tp,
        }
    }

    pub fn add(&mut self, other: LinkCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `(precision, recall, f1)`; empty denominators give 0.
    pub fn prf(&self) -> (f64, f64, f64) {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f)
    }
}

pub fn link_f1(pred: &LinkSet, gold: &LinkSet) -> (f64, f64, f64) {
    LinkCounts::of(pred, gold).prf()
}

/// `(crossing pairs, total pairs)` over unordered pairs of distinct
/// predicted links, using segments between entity centers.
pub fn crossing_counts(pred: &LinkSet, doc: &Document) -> (u64, u64) {
    let seg = |&(i, j): &(usize, usize)| (doc.entities[i].bbox.center(), doc.entities[j].bbox.center());
    let links: Vec<_> = pred.iter().filter(|&&(i, j)| i < doc.len() && j < doc.len()).map(seg).collect();
    let mut crossing = 0;
    let mut total = 0;
    for a in 0..links.len() {
        for b in a + 1..links.len() {
            total += 1;
            let ((p1, p2), (q1, q2)) = (links[a], links[b]);
            if segments_cross(p1, p2, q1, q2) {
                crossing += 1;
            }
        }
    }
    (crossing, total)
}

/// Fraction of predicted link pairs that properly cross; 0 for fewer than
/// two links.
pub fn crossing_rate(pred: &LinkSet, doc: &Document) -> f64 {
    let (c, t) = crossing_counts(pred, doc);
    if t == 0 {
        0.0
    } else {
        c as f64 / t as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceBucket {
    pub lo: f64,
    pub hi: f64,
    pub gold: u64,
    pub recovered: u64,
    /// `None` when the bucket holds no gold link.
    pub recall: Option<f64>,
}

pub fn validate_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 || edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "bucket edges must be at least two finite, strictly ascending values, got {edges:?}"
        )));
    }
    Ok(())
}

/// Bucket index of `d`: left-closed, right-open, last bucket right-closed.
fn bucket_of(edges: &[f64], d: f64) -> Option<usize> {
    let last = edges.len() - 2;
    (0..=last).find(|&b| d >= edges[b] && (d < edges[b + 1] || (b == last && d <= edges[b + 1])))
}

fn bucket_counts(pred: &LinkSet, gold: &LinkSet, doc: &Document, edges: &[f64], into: &mut [(u64, u64)]) {
    for &(i, j) in gold {
        let d = distance(doc.entities[i].bbox.center(), doc.entities[j].bbox.center());
        if let Some(b) = bucket_of(edges, d) {
            into[b].0 += 1;
            if pred.contains(&(i, j)) {
                into[b].1 += 1;
            }
        }
    }
}

fn finish_buckets(edges: &[f64], counts: &[(u64, u64)]) -> Vec<DistanceBucket> {
    counts
        .iter()
        .enumerate()
        .map(|(b, &(gold, recovered))| DistanceBucket {
            lo: edges[b],
            hi: edges[b + 1],
            gold,
            recovered,
            recall: (gold > 0).then(|| recovered as f64 / gold as f64),
        })
        .collect()
}

pub fn recall_by_distance(
    pred: &LinkSet,
    gold: &LinkSet,
    doc: &Document,
    edges: &[f64],
) -> Result<Vec<DistanceBucket>> {
    validate_edges(edges)?;
    let mut counts = vec![(0, 0); edges.len() - 1];
    bucket_counts(pred, gold, doc, edges, &mut counts);
    Ok(finish_buckets(edges, &counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Crossing pairs over link pairs, pooled across documents.
    pub crossing_conflict_rate: f64,
    pub recall_by_distance: Vec<DistanceBucket>,
    pub counts: LinkCounts,
    pub n_docs: usize,
}

impl MetricsReport {
    /// Recall of the last (farthest) bucket.
    pub fn far_recall(&self) -> Option<f64> {
        self.recall_by_distance.last().and_then(|b| b.recall)
    }
}

/// Micro-averaged report over documents paired with their predictions.
pub fn evaluate(docs: &[Document], preds: &[LinkSet], edges: &[f64]) -> Result<MetricsReport> {
    validate_edges(edges)?;
    if docs.len() != preds.len() {
        return Err(Error::Contract(format!(
            "{} documents but {} prediction sets",
            docs.len(),
            preds.len()
        )));
    }
    let mut counts = LinkCounts::default();
    let (mut crossing, mut pairs) = (0, 0);
    let mut buckets = vec![(0, 0); edges.len() - 1];
    for (doc, pred) in docs.iter().zip(preds) {
        counts.add(LinkCounts::of(pred, &doc.links));
        let (c, t) = crossing_counts(pred, doc);
        crossing += c;
        pairs += t;
        bucket_counts(pred, &doc.links, doc, edges, &mut buckets);
    }
    let (precision, recall, f1) = counts.prf();
    Ok(MetricsReport {
        precision,
        recall,
        f1,
        crossing_conflict_rate: if pairs == 0 { 0.0 } else { crossing as f64 / pairs as f64 },
        recall_by_distance: finish_buckets(edges, &buckets),
        counts,
        n_docs: docs.len(),
    })
}

/// One CSV row per labelled report; bucket recall columns follow the first
/// report's edges, empty buckets are left blank.
pub fn write_csv<W: Write>(rows: &[(String, MetricsReport)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["run", "precision", "recall", "f1", "crossing_conflict_rate", "tp", "fp", "fn", "n_docs"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if let Some((_, first)) = rows.first() {
        header.extend(first.recall_by_distance.iter().map(|b| format!("recall_{:.4}_{:.4}", b.lo, b.hi)));
    }
    w.write_record(&header)?;
    for (label, r) in rows {
        let mut rec = vec![
            label.clone(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.f1.to_string(),
            r.crossing_conflict_rate.to_string(),
            r.counts.tp.to_string(),
            r.counts.fp.to_string(),
            r.counts.fn_.to_string(),
            r.n_docs.to_string(),
        ];
        rec.extend(r.recall_by_distance.iter().map(|b| b.recall.map(|x| x.to_string()).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Predicted links keyed by document id, as read by `eval --pred`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub predictions: BTreeMap<String, Vec<(usize, usize)>>,
}

impl PredictionFile {
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            location: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    /// Link sets aligned with `docs`; a document without an entry predicts
    /// nothing. Out-of-range ids are rejected.
    pub fn align(&self, docs: &[Document]) -> Result<Vec<LinkSet>> {
        let known: BTreeSet<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
        if let Some(extra) = self.predictions.keys().find(|k| !known.contains(k.as_str())) {
            return Err(Error::Validation(format!("prediction for unknown document `{extra}`")));
        }
        docs.iter()
            .map(|d| {
                let links: LinkSet = self.predictions.get(&d.doc_id).into_iter().flatten().copied().collect();
                if let Some(&(i, j)) = links.iter().find(|&&(i, j)| i >= d.len() || j >= d.len()) {
                    return Err(Error::Validation(format!(
                        "prediction ({i}, {j}) out of range for `{}` with {} entities",
                        d.doc_id,
                        d.len()
                    )));
                }
                Ok(links)
            })
            .collect()
    }

    pub fn from_sets(docs: &[Document], preds: &[LinkSet]) -> Self {
        PredictionFile {
            predictions: docs
                .iter()
                .zip(preds)
                .map(|(d, p)| (d.doc_id.clone(), p.iter().copied().collect()))
                .collect(),
        }
    }
}
