//! Multi-tab trace augmentation.
//!
//! Two generators: merging two sessions into one time-ordered session whose
//! label set is the union of both, and swapping a small fraction of bursts
//! with their neighbours inside a single session.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{Dataset, Trace, DEFAULT_INPUT_DIM};

/// Default fraction of bursts exchanged per session.
pub const DEFAULT_EXCHANGE_RATIO: f64 = 0.05;

/// Maximal run of same-direction packets, `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Burst {
    pub start: usize,
    pub end: usize,
    pub direction: i8,
}

impl Burst {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MergePairing {
    /// Two distinct sessions drawn uniformly per merge.
    #[default]
    Random,
    /// Distinct unordered pairs sampled without replacement.
    ExhaustiveSampled,
}

impl std::str::FromStr for MergePairing {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "random" => Ok(MergePairing::Random),
            "exhaustive-sampled" => Ok(MergePairing::ExhaustiveSampled),
            other => Err(format!("unknown merge pairing {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub exchange_ratio: f64,
    pub rng_seed: u64,
    pub merge_pairing: MergePairing,
    /// Merged sessions are cut to this many packets.
    pub input_dim: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            exchange_ratio: DEFAULT_EXCHANGE_RATIO,
            rng_seed: 0,
            merge_pairing: MergePairing::Random,
            input_dim: DEFAULT_INPUT_DIM,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.exchange_ratio) {
            return Err(Error::Config(format!(
                "exchange ratio {} outside [0, 1]",
                self.exchange_ratio
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        Ok(())
    }
}

/// Merges two sessions packet by packet in time order, keeping at most
/// `input_dim` packets. Ties go to `a`. Once one side runs out the rest of the
/// other is appended.
pub fn merge_traces(a: &Trace, b: &Trace, input_dim: usize) -> Result<Trace> {
    merge_traces_with_offset(a, b, 0.0, input_dim)
}

/// Like [`merge_traces`], with `b` starting `offset` seconds after `a`.
pub fn merge_traces_with_offset(a: &Trace, b: &Trace, offset: f64, input_dim: usize) -> Result<Trace> {
    if a.is_empty() && b.is_empty() {
        return Err(Error::NothingToMerge);
    }
    let labels = a.labels().union(b.labels())?;
    let (da, ta) = (a.directions(), a.timestamps());
    let (db, tb) = (b.directions(), b.timestamps());

    let n = (da.len() + db.len()).min(input_dim);
    let mut directions = Vec::with_capacity(n);
    let mut timestamps = Vec::with_capacity(n);
    let (mut i, mut j) = (0, 0);
    while directions.len() < n {
        let take_a = j == db.len() || (i < da.len() && ta[i] <= tb[j] + offset);
        if take_a {
            directions.push(da[i]);
            timestamps.push(ta[i]);
            i += 1;
        } else {
            directions.push(db[j]);
            timestamps.push(tb[j] + offset);
            j += 1;
        }
    }
    if let Some(&first) = timestamps.first() {
        for t in &mut timestamps {
            *t -= first;
        }
    }
    Trace::new(directions, timestamps, labels)
}

pub fn extract_bursts(directions: &[i8]) -> Vec<Burst> {
    let mut bursts = Vec::new();
    let mut start = 0;
    for i in 1..=directions.len() {
        if i == directions.len() || directions[i] != directions[start] {
            bursts.push(Burst {
                start,
                end: i,
                direction: directions[start],
            });
            start = i;
        }
    }
    bursts
}

/// Number of bursts exchanged for a session with `num_bursts` bursts.
pub fn exchange_count(num_bursts: usize, exchange_ratio: f64) -> usize {
    // the small slack keeps products like 29 * 0.01 * 100 from flooring one short
    (num_bursts as f64 * exchange_ratio + 1e-9).floor() as usize
}

/// Swaps each selected burst with the burst that follows it.
///
/// Selections are applied in ascending order against the current burst list,
/// so a selected burst adjacent to another selected one may travel further
/// than one slot. The last burst swaps with its predecessor; a single-burst
/// sequence is returned unchanged.
pub fn exchange_selected_bursts(directions: &[i8], selected: &[usize]) -> Vec<i8> {
    let mut blocks: Vec<(i8, usize)> = extract_bursts(directions)
        .iter()
        .map(|b| (b.direction, b.len()))
        .collect();
    if blocks.len() < 2 {
        return directions.to_vec();
    }
    let mut order = selected.to_vec();
    order.sort_unstable();
    for s in order {
        if s >= blocks.len() {
            continue;
        }
        let partner = if s + 1 < blocks.len() { s + 1 } else { s - 1 };
        blocks.swap(s, partner);
    }
    blocks
        .into_iter()
        .flat_map(|(d, n)| std::iter::repeat(d).take(n))
        .collect()
}

/// Exchanges `floor(bursts * exchange_ratio)` randomly chosen bursts with their
/// successors. Timestamps and labels are left as they are.
pub fn exchange_bursts<R: Rng + ?Sized>(trace: &Trace, exchange_ratio: f64, rng: &mut R) -> Result<Trace> {
    let bursts = extract_bursts(trace.directions());
    let count = exchange_count(bursts.len(), exchange_ratio).min(bursts.len());
    if count == 0 || bursts.len() < 2 {
        return Ok(trace.clone());
    }
    let selected = index::sample(rng, bursts.len(), count).into_vec();
    let directions = exchange_selected_bursts(trace.directions(), &selected);
    trace.clone().with_directions(directions)
}

/// Returns the original sessions followed by `n_merged` merged and
/// `n_exchanged` burst-exchanged sessions. Output depends only on the inputs
/// and `config.rng_seed`.
pub fn augment_dataset(
    dataset: &Dataset,
    config: &AugmentationConfig,
    n_merged: usize,
    n_exchanged: usize,
) -> Result<Dataset> {
    config.validate()?;
    let n = dataset.len();
    if n_merged > 0 && n < 2 {
        return Err(Error::Config(format!(
            "merging needs at least 2 traces, dataset has {n}"
        )));
    }
    if n_exchanged > 0 && n == 0 {
        return Err(Error::Config("cannot exchange bursts in an empty dataset".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut traces = dataset.traces.clone();
    traces.reserve(n_merged + n_exchanged);

    for (i, j) in merge_pairs(n, n_merged, config.merge_pairing, &mut rng) {
        let (a, b) = (&dataset.traces[i], &dataset.traces[j]);
        if a.is_empty() && b.is_empty() {
            continue;
        }
        traces.push(merge_traces(a, b, config.input_dim)?);
    }
    for _ in 0..n_exchanged {
        let i = rng.gen_range(0..n);
        let mut trace_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        traces.push(exchange_bursts(&dataset.traces[i], config.exchange_ratio, &mut trace_rng)?);
    }
    Dataset::new(traces, dataset.catalog.clone(), dataset.split)
}

fn merge_pairs(n: usize, count: usize, pairing: MergePairing, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    if count == 0 {
        return Vec::new();
    }
    match pairing {
        MergePairing::Random => (0..count)
            .map(|_| {
                let i = rng.gen_range(0..n);
                let mut j = rng.gen_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                (i, j)
            })
            .collect(),
        MergePairing::ExhaustiveSampled => {
            let total = n * (n - 1) / 2;
            let mut out = Vec::with_capacity(count);
            while out.len() < count {
                let take = (count - out.len()).min(total);
                out.extend(
                    index::sample(rng, total, take)
                        .into_iter()
                        .map(|p| unrank_pair(p, n)),
                );
            }
            out
        }
    }
}

/// Maps `p` in `[0, n(n-1)/2)` to the p-th pair `(i, j)`, `i < j`, in
/// row-major order.
fn unrank_pair(mut p: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = n - 1 - i;
        if p < row {
            return (i, i + 1 + p);
        }
        p -= row;
        i += 1;
    }
}
