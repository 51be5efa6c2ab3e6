//! Multi-label ranking metrics and the closed/open-world evaluation protocols.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identify::IdentificationIndex;
use crate::tensor::Matrix;
use crate::trace::{remap_labels, Dataset, LabelSet};

pub const DEFAULT_RECALL_KS: [usize; 6] = [5, 10, 15, 20, 25, 30];
pub const DEFAULT_AP_KS: [usize; 5] = [1, 2, 3, 4, 5];

fn hits(truth: &LabelSet, ranking: &[usize], k: usize) -> usize {
    ranking.iter().take(k).filter(|&&j| j < truth.width() && truth.contains(j)).count()
}

fn check(truth: &LabelSet, k: usize) -> Result<()> {
    if truth.is_empty() {
        return Err(Error::Invariant("metric needs a non-empty truth label set".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    Ok(())
}

/// `|y ∩ top-k| / |y|`.
pub fn recall_at_k(truth: &LabelSet, ranking: &[usize], k: usize) -> Result<f64> {
    check(truth, k)?;
    Ok(hits(truth, ranking, k) as f64 / truth.popcount() as f64)
}

/// `|y ∩ top-t| / t`. Zero when `t` is zero.
pub fn precision_at_t(truth: &LabelSet, ranking: &[usize], t: usize) -> f64 {
    if t == 0 {
        return 0.0;
    }
    hits(truth, ranking, t) as f64 / t as f64
}

/// Sum of `Precision@t` for `t = 1..=k`, divided by `min(k, |y|)`.
///
/// There is no relevance indicator on each term, so a ranking that places
/// the truth early can score above 1 when `k > |y|`.
pub fn ap_at_k(truth: &LabelSet, ranking: &[usize], k: usize) -> Result<f64> {
    check(truth, k)?;
    let sum: f64 = (1..=k).map(|t| precision_at_t(truth, ranking, t)).sum();
    Ok(sum / k.min(truth.popcount()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    #[default]
    Closed,
    Open,
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "closed" => Ok(Protocol::Closed),
            "open" => Ok(Protocol::Open),
            other => Err(format!("unknown protocol {other:?} (closed, open)")),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Closed => "closed",
            Protocol::Open => "open",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricAt {
    pub k: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub samples: usize,
    pub recall: Vec<MetricAt>,
    pub ap: Vec<MetricAt>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|m| m.k == k).map(|m| m.value)
    }

    pub fn ap_at(&self, k: usize) -> Option<f64> {
        self.ap.iter().find(|m| m.k == k).map(|m| m.value)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "protocol: {}", self.protocol);
        let _ = writeln!(s, "samples: {}", self.samples);
        for m in &self.recall {
            let _ = writeln!(s, "Recall@{:<3} {:.4}", m.k, m.value);
        }
        for m in &self.ap {
            let _ = writeln!(s, "AP@{:<7} {:.4}", m.k, m.value);
        }
        s
    }
}

/// Averages per-sample metrics over `(truth, ranking)` pairs.
pub fn report_from_rankings(
    rows: &[(LabelSet, Vec<usize>)],
    recall_ks: &[usize],
    ap_ks: &[usize],
    protocol: Protocol,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = rows
        .par_iter()
        .map(|(truth, ranking)| {
            let r = recall_ks.iter().map(|&k| recall_at_k(truth, ranking, k)).collect::<Result<_>>()?;
            let a = ap_ks.iter().map(|&k| ap_at_k(truth, ranking, k)).collect::<Result<_>>()?;
            Ok((r, a))
        })
        .collect::<Result<_>>()?;
    let n = per_sample.len();
    let mean = |pick: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_sample.iter().map(pick).sum::<f64>() / n as f64
        }
    };
    let recall = recall_ks
        .iter()
        .enumerate()
        .map(|(i, &k)| MetricAt { k, value: mean(&|s| s.0[i]) })
        .collect();
    let ap = ap_ks
        .iter()
        .enumerate()
        .map(|(i, &k)| MetricAt { k, value: mean(&|s| s.1[i]) })
        .collect();
    Ok(EvalReport {
        protocol,
        samples: n,
        recall,
        ap,
        config,
    })
}

/// Maps test labels into the index catalog. Closed world requires every test
/// class to be known; open world sends unknown classes to the sentinel.
pub fn align_to_index(index: &IdentificationIndex, test: &Dataset, protocol: Protocol) -> Result<Dataset> {
    let open = protocol == Protocol::Open;
    if open && index.catalog().sentinel_index().is_none() {
        return Err(Error::Catalog("open-world evaluation needs a catalog with an unmonitored class".into()));
    }
    if test.catalog == *index.catalog() {
        return Ok(test.clone());
    }
    remap_labels(test, index.catalog(), open)
}

/// Scores already-embedded test samples against the index.
pub fn evaluate_embedded(
    index: &IdentificationIndex,
    embeddings: &Matrix,
    labels: &[LabelSet],
    recall_ks: &[usize],
    ap_ks: &[usize],
    protocol: Protocol,
    config: serde_json::Value,
) -> Result<EvalReport> {
    if embeddings.rows() != labels.len() {
        return Err(Error::Shape {
            expected: format!("{} label sets", embeddings.rows()),
            got: labels.len().to_string(),
        });
    }
    let rows: Vec<(LabelSet, Vec<usize>)> = (0..labels.len())
        .into_par_iter()
        .map(|i| {
            let d = index.combine_and_decide(embeddings.row(i))?;
            Ok((labels[i].clone(), d.ranking))
        })
        .collect::<Result<_>>()?;
    report_from_rankings(&rows, recall_ks, ap_ks, protocol, config)
}

/// Anything that maps a dataset to one embedding row per trace.
pub trait Embedder {
    fn embed(&self, dataset: &Dataset) -> Result<Matrix>;
}

pub fn evaluate(
    index: &IdentificationIndex,
    embedder: &dyn Embedder,
    test: &Dataset,
    recall_ks: &[usize],
    ap_ks: &[usize],
    protocol: Protocol,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let test = align_to_index(index, test, protocol)?;
    let embeddings = embedder.embed(&test)?;
    let labels: Vec<LabelSet> = test.traces.iter().map(|t| t.labels().clone()).collect();
    evaluate_embedded(index, &embeddings, &labels, recall_ks, ap_ks, protocol, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const A: usize = 0;
    const B: usize = 1;

    fn truth(ids: &[usize]) -> LabelSet {
        LabelSet::from_indices(8, ids)
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&truth(&[A, B]), &[A, 2, 3, 4, 5, B], 5).unwrap(), 0.5);
        assert_eq!(recall_at_k(&truth(&[A, B]), &[B, A, 2], 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&truth(&[A]), &[1, 2, A], 2).unwrap(), 0.0);
        assert!(recall_at_k(&truth(&[]), &[0], 1).is_err());
        assert!(recall_at_k(&truth(&[A]), &[0], 0).is_err());
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision_at_t(&truth(&[A]), &[A, 1], 1), 1.0);
        assert_eq!(precision_at_t(&truth(&[A]), &[1, A], 2), 0.5);
        assert_eq!(precision_at_t(&truth(&[A, B]), &[A, B], 2), 1.0);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(ap_at_k(&truth(&[A]), &[A, 1], 1).unwrap(), 1.0);
        assert_abs_diff_eq!(ap_at_k(&truth(&[A]), &[1, A], 2).unwrap(), 0.5);
        assert_eq!(ap_at_k(&truth(&[A, B]), &[A, B, 2], 2).unwrap(), 1.0);
        assert!(ap_at_k(&truth(&[]), &[A], 1).is_err());
    }

    #[test]
    fn report_averages_over_samples() {
        let rows = vec![
            (truth(&[A]), vec![A, 1, 2]),
            (truth(&[A, B]), vec![2, 3, 4, 5, 6, A, B]),
        ];
        let r = report_from_rankings(&rows, &[5], &[1], Protocol::Closed, serde_json::Value::Null).unwrap();
        assert_eq!(r.samples, 2);
        assert_eq!(r.recall_at(5), Some(0.5));
        assert_eq!(r.ap_at(1), Some(0.5));
        assert!(r.to_text().contains("Recall@5"));
    }

    #[test]
    fn protocol_parses() {
        assert_eq!("open".parse::<Protocol>().unwrap(), Protocol::Open);
        assert!("half".parse::<Protocol>().is_err());
    }
}
