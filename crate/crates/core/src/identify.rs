//! Dual k-NN webpage identification.
//!
//! A target embedding retrieves its `b` nearest proxies and its `b` nearest
//! reference samples by cosine distance. Each retrieved proxy adds
//! `1 / distance` to its own class; each retrieved sample adds `1 / distance`
//! to every class it is labelled with. The final score is
//! `proxy + theta * sample`; classes whose max-normalised score reaches `tau`
//! are reported.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::loss::{cosine_similarity, ProxySet, NORM_FLOOR};
use crate::tensor::{dot, norm, Matrix};
use crate::trace::{ClassCatalog, LabelSet};

pub const DEFAULT_NEIGHBORS: usize = 40;
pub const DEFAULT_SCORE_WEIGHT: f64 = 2.0;
pub const DEFAULT_THRESHOLD: f64 = 0.3;
/// Smallest distance used in reciprocal scores.
pub const DISTANCE_FLOOR: f64 = 1e-8;

pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_similarity(u, v)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifyConfig {
    /// Neighbours retrieved from each of the proxy and sample sets.
    pub neighbors: usize,
    pub score_weight: f64,
    pub threshold: f64,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        Self {
            neighbors: DEFAULT_NEIGHBORS,
            score_weight: DEFAULT_SCORE_WEIGHT,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl IdentifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neighbors == 0 {
            return Err(Error::Config("neighbour count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if !(self.score_weight >= 0.0 && self.score_weight.is_finite()) {
            return Err(Error::Config(format!("score weight {} must be >= 0", self.score_weight)));
        }
        Ok(())
    }
}

/// Non-negative per-class scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(pub Vec<f64>);

impl ScoreVector {
    pub fn zeros(classes: usize) -> Self {
        Self(vec![0.0; classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Classes by descending score, ties broken by class index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.0.len()).collect();
        order.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        order
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub proxy: ScoreVector,
    pub sample: ScoreVector,
    pub combined: ScoreVector,
    pub ranking: Vec<usize>,
    /// Classes whose score divided by the maximum score is at least the threshold.
    pub predicted: Vec<usize>,
}

/// Proxies plus labelled reference embeddings, immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentificationIndex {
    catalog: ClassCatalog,
    proxies: Option<ProxySet>,
    references: Matrix,
    reference_norms: Vec<f64>,
    reference_labels: Vec<LabelSet>,
    config: IdentifyConfig,
}

/// A retrieved neighbour: index into the proxy or reference set and its distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

fn by_distance(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index))
}

impl IdentificationIndex {
    pub fn new(
        catalog: ClassCatalog,
        proxies: Option<ProxySet>,
        references: Matrix,
        reference_labels: Vec<LabelSet>,
        config: IdentifyConfig,
    ) -> Result<Self> {
        config.validate()?;
        let width = catalog.width();
        if references.rows() != reference_labels.len() {
            return Err(Error::Shape {
                expected: format!("{} reference label sets", references.rows()),
                got: format!("{}", reference_labels.len()),
            });
        }
        if let Some(l) = reference_labels.iter().find(|l| l.width() != width) {
            return Err(Error::Shape {
                expected: format!("label width {width}"),
                got: format!("{}", l.width()),
            });
        }
        if let Some(p) = &proxies {
            if p.classes() != width {
                return Err(Error::Shape {
                    expected: format!("{width} proxies"),
                    got: format!("{}", p.classes()),
                });
            }
            if references.rows() > 0 && p.dim() != references.cols() {
                return Err(Error::Shape {
                    expected: format!("proxy dim {}", references.cols()),
                    got: format!("{}", p.dim()),
                });
            }
        }
        if proxies.is_none() && references.rows() == 0 {
            return Err(Error::Config("index needs proxies or reference samples".into()));
        }
        let reference_norms = references.iter_rows().map(norm).collect();
        Ok(Self {
            catalog,
            proxies,
            references,
            reference_norms,
            reference_labels,
            config,
        })
    }

    pub fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    pub fn config(&self) -> &IdentifyConfig {
        &self.config
    }

    pub fn with_config(mut self, config: IdentifyConfig) -> Result<Self> {
        config.validate()?;
        self.config = config;
        Ok(self)
    }

    pub fn proxies(&self) -> Option<&ProxySet> {
        self.proxies.as_ref()
    }

    pub fn references(&self) -> &Matrix {
        &self.references
    }

    pub fn reference_labels(&self) -> &[LabelSet] {
        &self.reference_labels
    }

    pub fn classes(&self) -> usize {
        self.catalog.width()
    }

    pub fn dim(&self) -> usize {
        self.proxies
            .as_ref()
            .map(ProxySet::dim)
            .unwrap_or_else(|| self.references.cols())
    }

    fn check_target(&self, target: &[f64]) -> Result<()> {
        if target.len() != self.dim() {
            return Err(Error::Shape {
                expected: format!("embedding of length {}", self.dim()),
                got: format!("length {}", target.len()),
            });
        }
        Ok(())
    }

    /// The `b` nearest items among `rows`, closest first. Fewer are returned
    /// when the set is smaller than `b`.
    fn nearest<'a>(&self, target: &[f64], rows: impl Iterator<Item = (&'a [f64], f64)>) -> Vec<Neighbor> {
        let nt = norm(target).max(NORM_FLOOR);
        let mut all: Vec<Neighbor> = rows
            .enumerate()
            .map(|(index, (row, nr))| {
                let sim = (dot(target, row) / (nt * nr.max(NORM_FLOOR))).clamp(-1.0, 1.0);
                Neighbor {
                    index,
                    distance: 1.0 - sim,
                }
            })
            .collect();
        let b = self.config.neighbors.min(all.len());
        if b == 0 {
            return Vec::new();
        }
        if b < all.len() {
            all.select_nth_unstable_by(b - 1, by_distance);
            all.truncate(b);
        }
        all.sort_by(by_distance);
        all
    }

    pub fn nearest_proxies(&self, target: &[f64]) -> Vec<Neighbor> {
        match &self.proxies {
            Some(p) => self.nearest(target, p.matrix().iter_rows().map(|r| (r, norm(r)))),
            None => Vec::new(),
        }
    }

    pub fn nearest_samples(&self, target: &[f64]) -> Vec<Neighbor> {
        self.nearest(
            target,
            self.references.iter_rows().zip(self.reference_norms.iter().copied()),
        )
    }

    pub fn proxy_scores(&self, target: &[f64]) -> Result<ScoreVector> {
        self.check_target(target)?;
        let mut scores = ScoreVector::zeros(self.classes());
        for n in self.nearest_proxies(target) {
            scores.0[n.index] = 1.0 / n.distance.max(DISTANCE_FLOOR);
        }
        Ok(scores)
    }

    pub fn sample_scores(&self, target: &[f64]) -> Result<ScoreVector> {
        self.check_target(target)?;
        let mut scores = ScoreVector::zeros(self.classes());
        for n in self.nearest_samples(target) {
            let s = 1.0 / n.distance.max(DISTANCE_FLOOR);
            for j in self.reference_labels[n.index].indices() {
                scores.0[j] += s;
            }
        }
        Ok(scores)
    }

    pub fn combine_and_decide(&self, target: &[f64]) -> Result<Decision> {
        let proxy = self.proxy_scores(target)?;
        let sample = self.sample_scores(target)?;
        let theta = self.config.score_weight;
        let combined = ScoreVector(
            proxy
                .0
                .iter()
                .zip(&sample.0)
                .map(|(p, s)| p + theta * s)
                .collect(),
        );
        let ranking = combined.ranking();
        let predicted = threshold_classes(&combined, self.config.threshold);
        Ok(Decision {
            proxy,
            sample,
            combined,
            ranking,
            predicted,
        })
    }

    pub fn save(&self, path: &Path, echo: serde_json::Value) -> Result<()> {
        let header = serde_json::json!({
            "catalog": self.catalog,
            "identify": self.config,
            "has_proxies": self.proxies.is_some(),
            "echo": echo,
        });
        let mut c = Container::new("index", header);
        if let Some(p) = &self.proxies {
            c.push("proxies", vec![p.classes(), p.dim()], p.matrix().as_slice().to_vec());
        }
        c.push(
            "references",
            vec![self.references.rows(), self.references.cols()],
            self.references.as_slice().to_vec(),
        );
        let width = self.classes();
        let labels: Vec<f64> = self
            .reference_labels
            .iter()
            .flat_map(|l| l.as_bits().iter().map(|b| if *b { 1.0 } else { 0.0 }))
            .collect();
        c.push("reference_labels", vec![self.reference_labels.len(), width], labels);
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        if c.kind != "index" {
            return Err(Error::Checkpoint(format!("{} holds a {:?}, not an index", path.display(), c.kind)));
        }
        let catalog: ClassCatalog = serde_json::from_value(c.config["catalog"].clone())?;
        let config: IdentifyConfig = serde_json::from_value(c.config["identify"].clone())?;
        let proxies = match c.get("proxies") {
            Some(t) => Some(ProxySet::from_matrix(Matrix::from_vec(t.shape[0], t.shape[1], t.values.clone())?)?),
            None => None,
        };
        let refs = c.require("references")?;
        let references = Matrix::from_vec(refs.shape[0], refs.shape[1], refs.values.clone())?;
        let lab = c.require("reference_labels")?;
        let width = lab.shape[1];
        let reference_labels = lab
            .values
            .chunks(width.max(1))
            .take(lab.shape[0])
            .map(|row| {
                let idx: Vec<usize> = row.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, _)| j).collect();
                LabelSet::from_indices(width, &idx)
            })
            .collect();
        Self::new(catalog, proxies, references, reference_labels, config)
    }
}

/// Classes whose score, divided by the largest score, is at least `threshold`.
/// Empty when every score is zero.
pub fn threshold_classes(scores: &ScoreVector, threshold: f64) -> Vec<usize> {
    let max = scores.max();
    if max <= 0.0 {
        log::warn!("all class scores are zero; predicting nothing");
        return Vec::new();
    }
    (0..scores.0.len())
        .filter(|&j| scores.0[j] / max >= threshold)
        .collect()
}
