//! Multi-label metric-learning objective.
//!
//! Each webpage owns a learnable proxy. A sample is pulled towards the proxies
//! of every page it contains and pushed below `margin` similarity from all
//! other proxies, with positive and negative terms averaged separately. A
//! second term pushes apart multi-label samples whose label sets are disjoint.
//! Gradients are computed analytically for both the embeddings and proxies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Matrix};
use crate::trace::LabelSet;

pub const DEFAULT_MARGIN: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 4.5;

/// Norms below this are clamped before dividing.
pub const NORM_FLOOR: f64 = 1e-8;

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            expected: format!("length {}", u.len()),
            got: format!("length {}", v.len()),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine similarity with both norms floored at [`NORM_FLOOR`].
pub(crate) fn guarded_cosine(u: &[f64], v: &[f64]) -> f64 {
    Cosine::new(u, v).sim
}

struct Cosine {
    sim: f64,
    nu: f64,
    nv: f64,
    u_floored: bool,
    v_floored: bool,
}

impl Cosine {
    fn new(u: &[f64], v: &[f64]) -> Self {
        let (ru, rv) = (norm(u), norm(v));
        let nu = ru.max(NORM_FLOOR);
        let nv = rv.max(NORM_FLOOR);
        Self {
            sim: dot(u, v) / (nu * nv),
            nu,
            nv,
            u_floored: ru < NORM_FLOOR,
            v_floored: rv < NORM_FLOOR,
        }
    }

    /// Adds `upstream * d(sim)/du` to `du` and likewise for `v`.
    fn backprop(&self, upstream: f64, u: &[f64], v: &[f64], du: &mut [f64], dv: &mut [f64]) {
        let inv = upstream / (self.nu * self.nv);
        let su = if self.u_floored { 0.0 } else { upstream * self.sim / (self.nu * self.nu) };
        let sv = if self.v_floored { 0.0 } else { upstream * self.sim / (self.nv * self.nv) };
        for k in 0..u.len() {
            du[k] += inv * v[k] - su * u[k];
            dv[k] += inv * u[k] - sv * v[k];
        }
    }
}

/// One learnable vector per class, row `j` for label index `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxySet {
    matrix: Matrix,
}

impl ProxySet {
    /// Unit-length random directions, deterministic per seed.
    pub fn random(classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut matrix = Matrix::zeros(classes, dim);
        for j in 0..classes {
            let row = matrix.row_mut(j);
            for x in row.iter_mut() {
                *x = StandardNormal.sample(&mut rng);
            }
            let n = norm(row).max(NORM_FLOOR);
            row.iter_mut().for_each(|x| *x /= n);
        }
        Self { matrix }
    }

    pub fn from_matrix(matrix: Matrix) -> Result<Self> {
        if matrix.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(Error::Invariant("proxy matrix has non-finite entries".into()));
        }
        Ok(Self { matrix })
    }

    pub fn classes(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.matrix.row(j)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.matrix.as_mut_slice()
    }

    /// Mean cosine similarity over all distinct proxy pairs.
    pub fn mean_pairwise_similarity(&self) -> f64 {
        let w = self.classes();
        let mut total = 0.0;
        let mut count = 0usize;
        for a in 0..w {
            for b in a + 1..w {
                total += guarded_cosine(self.row(a), self.row(b));
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

/// Which terms of the objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossTerms {
    #[default]
    Combined,
    ProxyOnly,
    SampleOnly,
}

impl std::str::FromStr for LossTerms {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "combined" => Ok(LossTerms::Combined),
            "proxy-only" => Ok(LossTerms::ProxyOnly),
            "sample-only" => Ok(LossTerms::SampleOnly),
            other => Err(format!("unknown loss terms {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Shared by negative proxy pairs and irrelevant sample pairs.
    pub margin: f64,
    pub beta: f64,
    #[serde(default)]
    pub terms: LossTerms,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            beta: DEFAULT_BETA,
            terms: LossTerms::Combined,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin {} must be >= 0", self.margin)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta {} must be >= 0", self.beta)));
        }
        Ok(())
    }
}

fn check_batch(embeddings: &Matrix, labels: &[LabelSet]) -> Result<()> {
    if embeddings.rows() != labels.len() {
        return Err(Error::Shape {
            expected: format!("{} label sets", embeddings.rows()),
            got: format!("{}", labels.len()),
        });
    }
    Ok(())
}

fn check_proxies(embeddings: &Matrix, labels: &[LabelSet], proxies: &ProxySet) -> Result<()> {
    if proxies.dim() != embeddings.cols() {
        return Err(Error::Shape {
            expected: format!("proxy dim {}", embeddings.cols()),
            got: format!("{}", proxies.dim()),
        });
    }
    if let Some(l) = labels.iter().find(|l| l.width() != proxies.classes()) {
        return Err(Error::Shape {
            expected: format!("label width {}", proxies.classes()),
            got: format!("{}", l.width()),
        });
    }
    Ok(())
}

/// All pairs `(i, j)`, `i < j`, of samples with more than one label each and
/// no label in common.
pub fn mine_irrelevant_pairs(labels: &[LabelSet]) -> Vec<(usize, usize)> {
    let multi: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].popcount() > 1).collect();
    let mut pairs = Vec::new();
    for (a, &i) in multi.iter().enumerate() {
        for &j in &multi[a + 1..] {
            if labels[i].dot(&labels[j]) == 0 {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Loss value split into its parts, with the pair counts used to average them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub proxy: f64,
    pub sample: f64,
    pub total: f64,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    pub irrelevant_pairs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGradients {
    /// d(loss)/d(embeddings), same shape as the embedding batch.
    pub embeddings: Matrix,
    /// d(loss)/d(proxies), `classes x dim`.
    pub proxies: Matrix,
}

struct ProxyTerm {
    value: f64,
    positive: usize,
    negative: usize,
}

fn proxy_term(
    embeddings: &Matrix,
    labels: &[LabelSet],
    proxies: &ProxySet,
    margin: f64,
    mut grads: Option<(&mut Matrix, &mut Matrix, f64)>,
) -> Result<ProxyTerm> {
    let positive: usize = labels.iter().map(LabelSet::popcount).sum();
    let negative = labels.len() * proxies.classes() - positive;
    if positive == 0 {
        return Err(Error::NoProxyPairs("positive"));
    }
    if negative == 0 {
        return Err(Error::NoProxyPairs("negative"));
    }
    let (wp, wn) = (1.0 / positive as f64, 1.0 / negative as f64);
    let (mut pos_sum, mut neg_sum) = (0.0, 0.0);
    for (i, y) in labels.iter().enumerate() {
        let x = embeddings.row(i);
        for j in 0..proxies.classes() {
            let p = proxies.row(j);
            let c = Cosine::new(x, p);
            let upstream = if y.contains(j) {
                pos_sum += 1.0 - c.sim;
                -wp
            } else if c.sim > margin {
                neg_sum += c.sim - margin;
                wn
            } else {
                0.0
            };
            if let Some((ge, gp, scale)) = grads.as_mut() {
                if upstream != 0.0 {
                    c.backprop(upstream * *scale, x, p, ge.row_mut(i), gp.row_mut(j));
                }
            }
        }
    }
    Ok(ProxyTerm {
        value: pos_sum * wp + neg_sum * wn,
        positive,
        negative,
    })
}

fn sample_term(
    embeddings: &Matrix,
    pairs: &[(usize, usize)],
    margin: f64,
    grads: Option<(&mut Matrix, f64)>,
) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let w = 1.0 / pairs.len() as f64;
    let mut sum = 0.0;
    let mut terms = Vec::new();
    for &(a, b) in pairs {
        let c = Cosine::new(embeddings.row(a), embeddings.row(b));
        if c.sim > margin {
            sum += c.sim - margin;
            terms.push((a, b, c));
        }
    }
    if let Some((ge, scale)) = grads {
        let cols = embeddings.cols();
        let mut du = vec![0.0; cols];
        let mut dv = vec![0.0; cols];
        for (a, b, c) in terms {
            du.iter_mut().for_each(|x| *x = 0.0);
            dv.iter_mut().for_each(|x| *x = 0.0);
            c.backprop(w * scale, embeddings.row(a), embeddings.row(b), &mut du, &mut dv);
            ge.row_mut(a).iter_mut().zip(&du).for_each(|(g, d)| *g += d);
            ge.row_mut(b).iter_mut().zip(&dv).for_each(|(g, d)| *g += d);
        }
    }
    sum * w
}

pub fn proxy_loss(embeddings: &Matrix, labels: &[LabelSet], proxies: &ProxySet, config: &LossConfig) -> Result<f64> {
    check_batch(embeddings, labels)?;
    check_proxies(embeddings, labels, proxies)?;
    Ok(proxy_term(embeddings, labels, proxies, config.margin, None)?.value)
}

/// Mean hinge over mined irrelevant pairs; zero when nothing is mined.
pub fn sample_loss(embeddings: &Matrix, labels: &[LabelSet], config: &LossConfig) -> Result<f64> {
    check_batch(embeddings, labels)?;
    Ok(sample_term(embeddings, &mine_irrelevant_pairs(labels), config.margin, None))
}

/// `proxy_loss + beta * sample_loss`, ignoring [`LossConfig::terms`].
pub fn combined_loss(embeddings: &Matrix, labels: &[LabelSet], proxies: &ProxySet, config: &LossConfig) -> Result<f64> {
    let full = LossConfig {
        terms: LossTerms::Combined,
        ..config.clone()
    };
    Ok(loss_and_gradients(embeddings, labels, proxies, &full, false)?.0.total)
}

/// Evaluates the configured objective and, when `with_gradients` is set, its
/// gradient with respect to every embedding and proxy.
pub fn loss_and_gradients(
    embeddings: &Matrix,
    labels: &[LabelSet],
    proxies: &ProxySet,
    config: &LossConfig,
    with_gradients: bool,
) -> Result<(LossBreakdown, Option<LossGradients>)> {
    check_batch(embeddings, labels)?;
    check_proxies(embeddings, labels, proxies)?;
    let mut ge = Matrix::zeros(embeddings.rows(), embeddings.cols());
    let mut gp = Matrix::zeros(proxies.classes(), proxies.dim());

    let mut out = LossBreakdown::default();
    let use_proxy = config.terms != LossTerms::SampleOnly;
    let use_sample = config.terms != LossTerms::ProxyOnly;

    if use_proxy {
        let g = with_gradients.then_some((&mut ge, &mut gp, 1.0));
        let term = proxy_term(embeddings, labels, proxies, config.margin, g)?;
        out.proxy = term.value;
        out.positive_pairs = term.positive;
        out.negative_pairs = term.negative;
    }
    let pairs = mine_irrelevant_pairs(labels);
    out.irrelevant_pairs = pairs.len();
    if use_sample {
        let weight = if config.terms == LossTerms::SampleOnly { 1.0 } else { config.beta };
        let g = with_gradients.then_some((&mut ge, weight));
        out.sample = sample_term(embeddings, &pairs, config.margin, g);
        out.total = out.proxy + weight * out.sample;
    } else {
        out.sample = sample_term(embeddings, &pairs, config.margin, None);
        out.total = out.proxy;
    }
    let grads = with_gradients.then_some(LossGradients {
        embeddings: ge,
        proxies: gp,
    });
    Ok((out, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ls(width: usize, idx: &[usize]) -> LabelSet {
        LabelSet::from_indices(width, idx)
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap(),
            0.7071,
            epsilon = 1e-4
        );
        assert_abs_diff_eq!(
            cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn mining_examples() {
        assert!(mine_irrelevant_pairs(&[ls(4, &[0]), ls(4, &[0, 1])]).is_empty());
        assert_eq!(mine_irrelevant_pairs(&[ls(4, &[0, 1]), ls(4, &[2, 3])]), vec![(0, 1)]);
        assert!(mine_irrelevant_pairs(&[ls(4, &[0, 1]), ls(4, &[1, 2])]).is_empty());
    }

    #[test]
    fn proxy_loss_zero_when_on_proxy() {
        let proxies = ProxySet::from_matrix(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let emb = Matrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let l = proxy_loss(&emb, &[ls(2, &[0])], &proxies, &LossConfig::default()).unwrap();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn proxy_loss_positive_term() {
        // cos = 0.6 to the relevant proxy, 0 to the other
        let proxies = ProxySet::from_matrix(Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap()).unwrap();
        let emb = Matrix::from_rows(&[vec![0.6, 0.8, 0.0]]).unwrap();
        let l = proxy_loss(&emb, &[ls(2, &[0])], &proxies, &LossConfig::default()).unwrap();
        assert_abs_diff_eq!(l, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn negative_pair_below_margin_contributes_nothing() {
        let proxies = ProxySet::from_matrix(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.05, (1.0f64 - 0.0025).sqrt()]]).unwrap()).unwrap();
        let emb = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let l = proxy_loss(&emb, &[ls(2, &[0])], &proxies, &LossConfig::default()).unwrap();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn proxy_loss_needs_both_kinds_of_pairs() {
        let proxies = ProxySet::random(2, 3, 1);
        let emb = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            proxy_loss(&emb, &[ls(2, &[0, 1])], &proxies, &LossConfig::default()),
            Err(Error::NoProxyPairs("negative"))
        ));
        assert!(matches!(
            proxy_loss(&emb, &[ls(2, &[])], &proxies, &LossConfig::default()),
            Err(Error::NoProxyPairs("positive"))
        ));
    }

    #[test]
    fn sample_loss_examples() {
        let cfg = LossConfig::default();
        let emb = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.75f64.sqrt()]]).unwrap();
        assert_eq!(sample_loss(&emb, &[ls(4, &[0]), ls(4, &[1])], &cfg).unwrap(), 0.0);
        let l = sample_loss(&emb, &[ls(4, &[0, 1]), ls(4, &[2, 3])], &cfg).unwrap();
        assert_abs_diff_eq!(l, 0.4, epsilon = 1e-12);
        let emb = Matrix::from_rows(&[vec![1.0, 0.0], vec![-0.2, 0.96f64.sqrt()]]).unwrap();
        assert_eq!(sample_loss(&emb, &[ls(4, &[0, 1]), ls(4, &[2, 3])], &cfg).unwrap(), 0.0);
    }

    #[test]
    fn combined_weights_sample_term() {
        // proxy part 0.2, sample part 0.1
        let proxies = ProxySet::from_matrix(
            Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let cfg = LossConfig::default();
        let labels = [ls(3, &[0, 1]), ls(3, &[2])];
        let emb = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]).unwrap();
        let p = proxy_loss(&emb, &labels, &proxies, &cfg).unwrap();
        let c = combined_loss(&emb, &labels, &proxies, &cfg).unwrap();
        // one sample is single-label, so nothing is mined
        assert_abs_diff_eq!(c, p, epsilon = 1e-15);
        assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-12);

        let breakdown = LossBreakdown {
            proxy: 0.2,
            sample: 0.1,
            ..Default::default()
        };
        assert_abs_diff_eq!(breakdown.proxy + cfg.beta * breakdown.sample, 0.65, epsilon = 1e-12);
    }

    #[test]
    fn sample_only_does_not_require_proxy_pairs() {
        let proxies = ProxySet::random(2, 3, 1);
        let emb = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![1.0, 0.1, 0.0]]).unwrap();
        let cfg = LossConfig {
            terms: LossTerms::SampleOnly,
            ..Default::default()
        };
        let labels = [ls(2, &[0, 1]), ls(2, &[0, 1])];
        let (b, _) = loss_and_gradients(&emb, &labels, &proxies, &cfg, true).unwrap();
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn random_proxies_are_unit_and_seeded() {
        let p = ProxySet::random(5, 16, 9);
        for j in 0..5 {
            assert_abs_diff_eq!(norm(p.row(j)), 1.0, epsilon = 1e-12);
        }
        assert_eq!(p, ProxySet::random(5, 16, 9));
        assert_ne!(p, ProxySet::random(5, 16, 10));
    }
}
