//! Brute-force reference implementations shared by the integration and
//! acceptance tests. Each one is written directly from the definition,
//! without reusing library helpers beyond plain data types.
#![allow(dead_code)]

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use wpf_core::trace::{LabelSet, Trace};

/// Concatenate both packet lists (first trace first), stable-sort by
/// timestamp, cut to `input_dim` and shift so the first packet is at zero.
pub fn merge_oracle(a: &Trace, b: &Trace, offset: f64, input_dim: usize) -> Option<(Vec<i8>, Vec<f64>, Vec<usize>)> {
    let mut packets: Vec<(f64, i8)> = a
        .timestamps()
        .iter()
        .zip(a.directions())
        .map(|(t, d)| (*t, *d))
        .collect();
    packets.extend(b.timestamps().iter().zip(b.directions()).map(|(t, d)| (t + offset, *d)));
    if packets.is_empty() {
        return None;
    }
    packets.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    packets.truncate(input_dim);
    let first = packets[0].0;
    let mut labels: Vec<usize> = a.labels().indices().chain(b.labels().indices()).collect();
    labels.sort_unstable();
    labels.dedup();
    Some((
        packets.iter().map(|p| p.1).collect(),
        packets.iter().map(|p| p.0 - first).collect(),
        labels,
    ))
}

/// Random trace whose timestamps fall on a coarse grid so that ties between
/// the two inputs of a merge are common.
pub fn random_trace(rng: &mut ChaCha8Rng, width: usize, max_len: usize) -> Trace {
    let n = rng.gen_range(0..=max_len);
    let mut t = 0.0;
    let mut ts = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            t += f64::from(rng.gen_range(0..3u8)) * 0.25;
        }
        ts.push(t);
    }
    let dirs = (0..n).map(|_| if rng.gen_bool(0.5) { 1 } else { -1 }).collect();
    let k = rng.gen_range(1..=width.min(3));
    let labels: Vec<usize> = (0..k).map(|_| rng.gen_range(0..width)).collect();
    Trace::new(dirs, ts, LabelSet::from_indices(width, &labels)).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, width: usize, max_labels: usize) -> Vec<LabelSet> {
    (0..n)
        .map(|_| {
            let k = rng.gen_range(1..=max_labels.min(width));
            let ids: Vec<usize> = (0..k).map(|_| rng.gen_range(0..width)).collect();
            LabelSet::from_indices(width, &ids)
        })
        .collect()
}

/// Every `(i, j)`, `i < j`, where both samples carry more than one label and
/// no label index is shared.
pub fn irrelevant_pairs_oracle(labels: &[LabelSet]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let a: HashSet<usize> = labels[i].indices().collect();
            let b: HashSet<usize> = labels[j].indices().collect();
            if a.len() > 1 && b.len() > 1 && a.is_disjoint(&b) {
                out.push((i, j));
            }
        }
    }
    out
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

/// Sorts every candidate by `(distance, index)` and keeps the first `b`.
fn nearest_oracle(target: &[f64], rows: &[Vec<f64>], b: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = rows.iter().enumerate().map(|(i, r)| (i, 1.0 - cosine(target, r))).collect();
    all.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap().then(x.0.cmp(&y.0)));
    all.truncate(b);
    all
}

pub const DISTANCE_FLOOR: f64 = 1e-8;

pub fn proxy_scores_oracle(target: &[f64], proxies: &[Vec<f64>], b: usize) -> Vec<f64> {
    let mut s = vec![0.0; proxies.len()];
    for (j, d) in nearest_oracle(target, proxies, b) {
        s[j] = 1.0 / d.max(DISTANCE_FLOOR);
    }
    s
}

pub fn sample_scores_oracle(target: &[f64], refs: &[Vec<f64>], labels: &[LabelSet], classes: usize, b: usize) -> Vec<f64> {
    let mut s = vec![0.0; classes];
    for (i, d) in nearest_oracle(target, refs, b) {
        for (j, slot) in s.iter_mut().enumerate() {
            if labels[i].contains(j) {
                *slot += 1.0 / d.max(DISTANCE_FLOOR);
            }
        }
    }
    s
}

fn top(ranking: &[usize], k: usize) -> HashSet<usize> {
    ranking.iter().take(k).copied().collect()
}

pub fn recall_oracle(truth: &HashSet<usize>, ranking: &[usize], k: usize) -> f64 {
    truth.intersection(&top(ranking, k)).count() as f64 / truth.len() as f64
}

pub fn precision_oracle(truth: &HashSet<usize>, ranking: &[usize], t: usize) -> f64 {
    truth.intersection(&top(ranking, t)).count() as f64 / t as f64
}

pub fn ap_oracle(truth: &HashSet<usize>, ranking: &[usize], k: usize) -> f64 {
    let mut sum = 0.0;
    for t in 1..=k {
        sum += precision_oracle(truth, ranking, t);
    }
    sum / k.min(truth.len()) as f64
}

/// Central finite difference of `f` at every coordinate of `x`.
pub fn numeric_gradient(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let orig = x[k];
            x[k] = orig + h;
            let up = f(x);
            x[k] = orig - h;
            let down = f(x);
            x[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub mod checks {
    //! Randomised oracle comparisons. Each returns the number of instances
    //! checked, or a description of the first mismatch.

    use std::collections::HashSet;

    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use wpf_core::augment::{merge_traces, merge_traces_with_offset};
    use wpf_core::eval::{ap_at_k, precision_at_t, recall_at_k};
    use wpf_core::identify::{IdentificationIndex, IdentifyConfig};
    use wpf_core::loss::{
        combined_loss, loss_and_gradients, mine_irrelevant_pairs, proxy_loss, LossConfig, LossTerms, ProxySet,
    };
    use wpf_core::tensor::Matrix;
    use wpf_core::trace::{ClassCatalog, LabelSet};
    use wpf_core::Error;

    use super::*;

    pub fn merge(pairs: usize, seed: u64) -> Result<usize, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for case in 0..pairs {
            let width = rng.gen_range(1..6);
            let a = random_trace(&mut rng, width, 60);
            let b = random_trace(&mut rng, width, 60);
            let offset = if rng.gen_bool(0.5) { 0.0 } else { f64::from(rng.gen_range(0..8u8)) * 0.25 };
            let input_dim = rng.gen_range(1..150);
            let got = if offset == 0.0 {
                merge_traces(&a, &b, input_dim)
            } else {
                merge_traces_with_offset(&a, &b, offset, input_dim)
            };
            match (merge_oracle(&a, &b, offset, input_dim), got) {
                (None, Err(Error::NothingToMerge)) => {}
                (Some((dirs, ts, labels)), Ok(m)) => {
                    let same_ts = ts.len() == m.timestamps().len()
                        && ts.iter().zip(m.timestamps()).all(|(x, y)| x.to_bits() == y.to_bits());
                    if dirs != m.directions() || !same_ts || labels != m.labels().indices().collect::<Vec<_>>() {
                        return Err(format!("case {case}: merge differs from the stable-sort oracle"));
                    }
                }
                (o, g) => return Err(format!("case {case}: oracle {:?} vs merge {:?}", o.is_some(), g.map(|_| ()))),
            }
        }
        Ok(pairs)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// True when no cosine used by the loss sits within `gap` of the hinge.
    fn away_from_hinge(emb: &Matrix, proxies: &Matrix, margin: f64, gap: f64) -> bool {
        let rows = emb.to_rows();
        let prox = proxies.to_rows();
        let near = |c: f64| (c - margin).abs() < gap;
        !(rows.iter().any(|e| prox.iter().any(|p| near(cosine(e, p))))
            || rows.iter().enumerate().any(|(i, e)| rows[i + 1..].iter().any(|f| near(cosine(e, f)))))
    }

    /// Analytic gradients of the combined loss against central differences.
    /// Returns the worst relative error seen.
    pub fn gradients(instances: usize, seed: u64, tolerance: f64) -> Result<f64, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut done = 0;
        while done < instances {
            let n = rng.gen_range(2..=8);
            let dim = rng.gen_range(2..=16);
            let w = rng.gen_range(2..=5);
            let labels = random_labels(&mut rng, n, w, 3);
            let emb = random_matrix(&mut rng, n, dim);
            let prox = random_matrix(&mut rng, w, dim);
            let cfg = LossConfig {
                margin: rng.gen_range(0.0..0.5),
                beta: rng.gen_range(0.0..6.0),
                terms: LossTerms::Combined,
            };
            if !away_from_hinge(&emb, &prox, cfg.margin, 1e-4) {
                continue;
            }
            let proxies = ProxySet::from_matrix(prox.clone()).unwrap();
            let grads = match loss_and_gradients(&emb, &labels, &proxies, &cfg, true) {
                Ok((_, g)) => g.unwrap(),
                Err(Error::NoProxyPairs(_)) => continue,
                Err(e) => return Err(e.to_string()),
            };
            let h = 1e-6;
            let mut e = emb.as_slice().to_vec();
            let num_e = numeric_gradient(&mut e, h, |x| {
                let m = Matrix::from_vec(n, dim, x.to_vec()).unwrap();
                combined_loss(&m, &labels, &proxies, &cfg).unwrap()
            });
            let mut p = prox.as_slice().to_vec();
            let num_p = numeric_gradient(&mut p, h, |x| {
                let ps = ProxySet::from_matrix(Matrix::from_vec(w, dim, x.to_vec()).unwrap()).unwrap();
                combined_loss(&emb, &labels, &ps, &cfg).unwrap()
            });
            let err = relative_error(grads.embeddings.as_slice(), &num_e).max(relative_error(grads.proxies.as_slice(), &num_p));
            worst = worst.max(err);
            if err >= tolerance {
                return Err(format!("instance {done}: relative error {err:.3e}"));
            }
            done += 1;
        }
        Ok(worst)
    }

    /// `beta = 0` collapses the combined objective to the proxy loss.
    pub fn beta_zero(instances: usize, seed: u64) -> Result<usize, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut done = 0;
        while done < instances {
            let n = rng.gen_range(2..=16);
            let dim = rng.gen_range(2..=32);
            let w = rng.gen_range(2..=10);
            let labels = random_labels(&mut rng, n, w, 4);
            let emb = random_matrix(&mut rng, n, dim);
            let proxies = ProxySet::from_matrix(random_matrix(&mut rng, w, dim)).unwrap();
            let cfg = LossConfig {
                beta: 0.0,
                margin: rng.gen_range(0.0..0.5),
                terms: LossTerms::Combined,
            };
            let (c, p) = match (combined_loss(&emb, &labels, &proxies, &cfg), proxy_loss(&emb, &labels, &proxies, &cfg)) {
                (Ok(c), Ok(p)) => (c, p),
                (Err(Error::NoProxyPairs(_)), Err(Error::NoProxyPairs(_))) => continue,
                (c, p) => return Err(format!("instance {done}: {c:?} vs {p:?}")),
            };
            if (c - p).abs() > f64::EPSILON * p.abs().max(1.0) {
                return Err(format!("instance {done}: combined {c} != proxy {p}"));
            }
            done += 1;
        }
        Ok(done)
    }

    pub fn pair_mining(instances: usize, seed: u64) -> Result<usize, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for case in 0..instances {
            let n = rng.gen_range(0..=64);
            let w = rng.gen_range(1..=12);
            let labels = random_labels(&mut rng, n, w, 4);
            if mine_irrelevant_pairs(&labels) != irrelevant_pairs_oracle(&labels) {
                return Err(format!("case {case}: mined pairs differ from brute force"));
            }
        }
        Ok(instances)
    }

    pub fn knn(instances: usize, seed: u64) -> Result<usize, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for case in 0..instances {
            let w = rng.gen_range(1..=50);
            let n = rng.gen_range(1..=500);
            let dim = rng.gen_range(2..=12);
            let b = rng.gen_range(1..=60);
            let mut refs: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            // exact duplicates force distance ties
            for _ in 0..n / 10 {
                let src = refs.choose(&mut rng).unwrap().clone();
                let dst = rng.gen_range(0..n);
                refs[dst] = src;
            }
            let proxies: Vec<Vec<f64>> = (0..w).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let labels = random_labels(&mut rng, n, w, 3);
            let target: Vec<f64> = if rng.gen_bool(0.2) {
                refs[rng.gen_range(0..n)].clone()
            } else {
                (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            let index = IdentificationIndex::new(
                ClassCatalog::numbered(w, false),
                Some(ProxySet::from_matrix(Matrix::from_rows(&proxies).unwrap()).unwrap()),
                Matrix::from_rows(&refs).unwrap(),
                labels.clone(),
                IdentifyConfig {
                    neighbors: b,
                    ..Default::default()
                },
            )
            .map_err(|e| e.to_string())?;
            let ps = index.proxy_scores(&target).unwrap();
            let ss = index.sample_scores(&target).unwrap();
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            if bits(ps.as_slice()) != bits(&proxy_scores_oracle(&target, &proxies, b)) {
                return Err(format!("case {case}: proxy scores differ"));
            }
            if bits(ss.as_slice()) != bits(&sample_scores_oracle(&target, &refs, &labels, w, b)) {
                return Err(format!("case {case}: sample scores differ"));
            }
        }
        Ok(instances)
    }

    pub fn metrics(instances: usize, seed: u64) -> Result<usize, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for case in 0..instances {
            let w = rng.gen_range(1..=40);
            let mut ranking: Vec<usize> = (0..w).collect();
            ranking.shuffle(&mut rng);
            let k_truth = rng.gen_range(1..=w.min(6));
            let truth_ids: Vec<usize> = ranking.choose_multiple(&mut rng, k_truth).copied().collect();
            let truth = LabelSet::from_indices(w, &truth_ids);
            let set: HashSet<usize> = truth_ids.iter().copied().collect();
            let k = rng.gen_range(1..=w + 2);
            let ok = recall_at_k(&truth, &ranking, k).unwrap() == recall_oracle(&set, &ranking, k)
                && precision_at_t(&truth, &ranking, k) == precision_oracle(&set, &ranking, k)
                && ap_at_k(&truth, &ranking, k).unwrap() == ap_oracle(&set, &ranking, k);
            if !ok {
                return Err(format!("case {case}: metric mismatch at k={k}"));
            }
        }
        let a = LabelSet::from_indices(3, &[0]);
        let worked = ap_at_k(&a, &[1, 0, 2], 2).unwrap();
        if worked != 0.5 {
            return Err(format!("AP@2 with truth ranked second gave {worked}, expected 0.5"));
        }
        Ok(instances)
    }
}
