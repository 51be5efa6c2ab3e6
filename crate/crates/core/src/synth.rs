//! Synthetic webpage traces and multi-tab sessions.
//!
//! Every class owns a random template of alternating bursts. A trace replays
//! the template with a fraction of bursts flipped or resized and with jittered
//! timing. Sessions overlay pages whose start times are spaced by gaps drawn
//! from `gap_range`, so later tabs interleave with earlier ones.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::merge_traces_with_offset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Embedder, EvalReport, Protocol};
use crate::identify::{IdentificationIndex, IdentifyConfig};
use crate::tensor::Matrix;
use crate::trace::{to_model_input, ClassCatalog, Dataset, LabelSet, Split, Trace, INCOMING, OUTGOING};

/// Spacing of packets inside one burst, in seconds.
const PACKET_SPACING: f64 = 0.004;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub traces_per_class: usize,
    /// Bursts per page template.
    pub signature_length: usize,
    /// Probability that a burst is flipped or resized.
    pub noise_rate: f64,
    /// Largest burst in a template, in packets.
    pub burst_scale: usize,
    pub seed: u64,
    pub max_tabs: usize,
    /// Bounds of the gap between consecutive tab openings, in seconds.
    pub gap_range: (f64, f64),
    /// Number of multi-tab sessions to compose.
    pub sessions: usize,
    /// Mean pause between bursts of one page, in seconds.
    pub burst_interval: f64,
    /// Upper bound on a per-trace preamble of random-direction packets that
    /// shifts the signature (connection setup, redirects).
    pub max_preamble: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 20,
            traces_per_class: 50,
            signature_length: 24,
            noise_rate: 0.05,
            burst_scale: 8,
            seed: 0,
            max_tabs: 3,
            gap_range: (3.0, 10.0),
            sessions: 1000,
            burst_interval: 0.45,
            max_preamble: 16,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad(format!("noise rate {} outside [0, 1]", self.noise_rate));
        }
        if !(1..=5).contains(&self.max_tabs) {
            return bad(format!("max tabs {} outside 1..=5", self.max_tabs));
        }
        if self.signature_length == 0 || self.burst_scale == 0 || self.traces_per_class == 0 {
            return bad("signature length, burst scale and traces per class must be positive".into());
        }
        let (lo, hi) = self.gap_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("bad gap range ({lo}, {hi})"));
        }
        if !(self.burst_interval > 0.0 && self.burst_interval.is_finite()) {
            return bad("burst interval must be positive".into());
        }
        Ok(())
    }
}

fn class_rng(seed: u64, stream: u64, class: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(1 << 32).wrapping_add(class as u64));
    rng
}

/// Signed burst sizes; directions alternate, starting outgoing. Outgoing
/// bursts (requests) are short; incoming bursts (responses) are log-uniform
/// up to `burst_scale`, which gives each page a few characteristic sizes.
fn template(config: &SynthConfig, class: usize) -> Vec<i64> {
    let mut rng = class_rng(config.seed, 1, class);
    let max_out = (config.burst_scale / 4).max(1);
    let ln_max = (config.burst_scale as f64).ln();
    (0..config.signature_length)
        .map(|b| {
            if b % 2 == 0 {
                rng.gen_range(1..=max_out) as i64
            } else {
                -(rng.gen_range(0.0..=ln_max).exp().round().max(1.0) as i64)
            }
        })
        .collect()
}

fn render(bursts: &[i64], config: &SynthConfig, rng: &mut ChaCha8Rng, labels: LabelSet) -> Result<Trace> {
    let mut directions = Vec::new();
    let mut timestamps = Vec::new();
    let mut t = 0.0;
    for _ in 0..rng.gen_range(0..=config.max_preamble) {
        directions.push(if rng.gen_bool(0.5) { OUTGOING } else { INCOMING });
        timestamps.push(t);
        t += PACKET_SPACING * rng.gen_range(0.5..1.5);
    }
    for &burst in bursts {
        let dir = if burst > 0 { OUTGOING } else { INCOMING };
        for _ in 0..burst.unsigned_abs() {
            directions.push(dir);
            timestamps.push(t);
            t += PACKET_SPACING * rng.gen_range(0.5..1.5);
        }
        t += config.burst_interval * rng.gen_range(0.5..1.5);
    }
    Trace::new(directions, timestamps, labels)
}

fn perturb(template: &[i64], config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<i64> {
    template
        .iter()
        .map(|&b| {
            if rng.gen::<f64>() >= config.noise_rate {
                return b;
            }
            if rng.gen_bool(0.5) {
                -b
            } else {
                let scale = rng.gen_range(0.5..1.5);
                let size = ((b.abs() as f64) * scale).round().max(1.0) as i64;
                size * b.signum()
            }
        })
        .collect()
}

/// Single-tab traces, `traces_per_class` per class in class order.
pub fn generate_single_tab(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let catalog = ClassCatalog::numbered(config.n_classes, false);
    let width = catalog.width();
    let per_class: Vec<Vec<Trace>> = (0..config.n_classes)
        .into_par_iter()
        .map(|c| {
            let tpl = template(config, c);
            let mut rng = class_rng(config.seed, 2, c);
            (0..config.traces_per_class)
                .map(|_| {
                    let bursts = perturb(&tpl, config, &mut rng);
                    render(&bursts, config, &mut rng, LabelSet::from_indices(width, &[c]))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Dataset::new(per_class.into_iter().flatten().collect(), catalog, Split::Train)
}

/// Composes `config.sessions` multi-tab sessions from single-tab traces.
///
/// Tab counts are uniform on `1..=max_tabs` (capped by the class count) and
/// each session visits distinct classes. Traces of a class are drawn in a
/// shuffled cycle, so no trace is reused before all of its class's traces
/// have been used once.
pub fn generate_multi_tab(config: &SynthConfig, singles: &Dataset) -> Result<Dataset> {
    config.validate()?;
    if singles.is_empty() {
        return Err(Error::Config("no single-tab traces to compose".into()));
    }
    let width = singles.label_width();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); width];
    for (i, t) in singles.traces.iter().enumerate() {
        if let Some(c) = t.labels().indices().next() {
            by_class[c].push(i);
        }
    }
    let classes: Vec<usize> = (0..width).filter(|&c| !by_class[c].is_empty()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e55_1015);
    let mut cursor = vec![0usize; width];
    for c in &classes {
        by_class[*c].shuffle(&mut rng);
    }

    let max_tabs = config.max_tabs.min(classes.len());
    let (lo, hi) = config.gap_range;
    let mut plans: Vec<Vec<(usize, f64)>> = Vec::with_capacity(config.sessions);
    for _ in 0..config.sessions {
        let tabs = rng.gen_range(1..=max_tabs);
        let chosen: Vec<usize> = classes.choose_multiple(&mut rng, tabs).copied().collect();
        let mut offset = 0.0;
        let mut plan = Vec::with_capacity(tabs);
        for (k, c) in chosen.into_iter().enumerate() {
            if k > 0 {
                offset += if hi > lo { rng.gen_range(lo..hi) } else { lo };
            }
            let pool = &mut by_class[c];
            if cursor[c] == pool.len() {
                pool.shuffle(&mut rng);
                cursor[c] = 0;
            }
            plan.push((pool[cursor[c]], offset));
            cursor[c] += 1;
        }
        plans.push(plan);
    }

    let traces: Vec<Trace> = plans
        .par_iter()
        .map(|plan| {
            let mut session = singles.traces[plan[0].0].clone();
            for &(idx, offset) in &plan[1..] {
                session = merge_traces_with_offset(&session, &singles.traces[idx], offset, usize::MAX)?;
            }
            Ok(session)
        })
        .collect::<Result<_>>()?;
    Dataset::new(traces, singles.catalog.clone(), Split::Train)
}

/// Zero-padded direction vectors used as raw features.
#[derive(Clone, Copy, Debug)]
pub struct RawFeatures {
    pub input_dim: usize,
}

impl Embedder for RawFeatures {
    fn embed(&self, dataset: &Dataset) -> Result<Matrix> {
        let mut m = Matrix::zeros(dataset.len(), self.input_dim);
        for (i, t) in dataset.traces.iter().enumerate() {
            m.row_mut(i).copy_from_slice(to_model_input(t, self.input_dim).as_slice());
        }
        Ok(m)
    }
}

/// k-NN on raw direction vectors, scored with the sample rule only.
pub fn raw_feature_baseline(
    train: &Dataset,
    test: &Dataset,
    neighbors: usize,
    input_dim: usize,
    recall_ks: &[usize],
    ap_ks: &[usize],
) -> Result<EvalReport> {
    if train.catalog != test.catalog {
        return Err(Error::Catalog("train and test catalogs differ".into()));
    }
    let raw = RawFeatures { input_dim };
    let labels = train.traces.iter().map(|t| t.labels().clone()).collect();
    let config = IdentifyConfig {
        neighbors,
        score_weight: 1.0,
        ..Default::default()
    };
    let index = IdentificationIndex::new(train.catalog.clone(), None, raw.embed(train)?, labels, config)?;
    let echo = serde_json::json!({"baseline": "raw-features", "neighbors": neighbors, "input_dim": input_dim});
    evaluate(&index, &raw, test, recall_ks, ap_ks, Protocol::Closed, echo)
}
