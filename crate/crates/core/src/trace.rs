//! Trace and dataset model, plus the on-disk dataset formats.
//!
//! A dataset directory holds a `manifest.json` (class catalog, split tag,
//! record file name) next to a newline-delimited JSON record file. Each
//! record is one browsing session:
//!
//! ```text
//! {"directions":[1,-1],"timestamps":[0.0,0.4],"labels":["pageA"]}
//! ```
//!
//! Directions are +1 for outgoing and -1 for incoming packets; timestamps are
//! seconds relative to the first packet.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OUTGOING: i8 = 1;
pub const INCOMING: i8 = -1;

/// Default model input length.
pub const DEFAULT_INPUT_DIM: usize = 10_000;
/// Sessions with fewer packets are treated as failed page loads.
pub const DEFAULT_MIN_PACKETS: usize = 1_000;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "traces.ndjson";
pub const CSV_INDEX_FILE: &str = "index.csv";
const FORMAT_VERSION: u32 = 1;

/// Multi-hot label vector over the class catalog.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelSet {
    bits: Vec<bool>,
}

impl LabelSet {
    pub fn empty(width: usize) -> Self {
        Self {
            bits: vec![false; width],
        }
    }

    /// Panics if an index is out of range.
    pub fn from_indices(width: usize, indices: &[usize]) -> Self {
        let mut set = Self::empty(width);
        for &j in indices {
            set.insert(j);
        }
        set
    }

    pub fn width(&self) -> usize {
        self.bits.len()
    }

    pub fn insert(&mut self, class: usize) {
        self.bits[class] = true;
    }

    pub fn contains(&self, class: usize) -> bool {
        self.bits.get(class).copied().unwrap_or(false)
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(j, b)| b.then_some(j))
    }

    pub fn as_bits(&self) -> &[bool] {
        &self.bits
    }

    /// Inner product of the two multi-hot vectors.
    pub fn dot(&self, other: &LabelSet) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    pub fn union(&self, other: &LabelSet) -> Result<LabelSet> {
        if self.width() != other.width() {
            return Err(Error::Shape {
                expected: format!("label width {}", self.width()),
                got: format!("label width {}", other.width()),
            });
        }
        Ok(LabelSet {
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| *a || *b)
                .collect(),
        })
    }
}

impl fmt::Debug for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.indices()).finish()
    }
}

/// One browsing session: packet directions, packet times and the set of
/// webpages that were loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    directions: Vec<i8>,
    timestamps: Vec<f64>,
    labels: LabelSet,
}

impl Trace {
    pub fn new(directions: Vec<i8>, timestamps: Vec<f64>, labels: LabelSet) -> Result<Self> {
        check_sequences(&directions, &timestamps)?;
        Ok(Self {
            directions,
            timestamps,
            labels,
        })
    }

    pub fn directions(&self) -> &[i8] {
        &self.directions
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn with_labels(mut self, labels: LabelSet) -> Self {
        self.labels = labels;
        self
    }

    pub fn with_directions(mut self, directions: Vec<i8>) -> Result<Self> {
        check_sequences(&directions, &self.timestamps)?;
        self.directions = directions;
        Ok(self)
    }

    pub fn into_parts(self) -> (Vec<i8>, Vec<f64>, LabelSet) {
        (self.directions, self.timestamps, self.labels)
    }
}

fn check_sequences(directions: &[i8], timestamps: &[f64]) -> Result<()> {
    if directions.len() != timestamps.len() {
        return Err(Error::Invariant(format!(
            "{} directions but {} timestamps",
            directions.len(),
            timestamps.len()
        )));
    }
    if let Some(pos) = directions.iter().position(|d| *d != OUTGOING && *d != INCOMING) {
        return Err(Error::Invariant(format!(
            "direction {} at packet {pos} is not +1/-1",
            directions[pos]
        )));
    }
    if let Some(first) = timestamps.first() {
        if *first != 0.0 {
            return Err(Error::Invariant(format!(
                "first timestamp is {first}, expected 0 (times are relative to the first packet)"
            )));
        }
    }
    if timestamps.iter().any(|t| !t.is_finite()) {
        return Err(Error::Invariant("non-finite timestamp".into()));
    }
    if timestamps.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Invariant("timestamps not monotone".into()));
    }
    Ok(())
}

/// Ordered class identifiers. The optional unmonitored sentinel, when present,
/// occupies the last label index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    unmonitored: Option<String>,
}

impl ClassCatalog {
    pub fn new(classes: Vec<String>, unmonitored: Option<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for id in classes.iter().chain(unmonitored.iter()) {
            if !seen.insert(id.as_str()) {
                return Err(Error::Catalog(format!("duplicate class id {id:?}")));
            }
        }
        Ok(Self {
            classes,
            unmonitored,
        })
    }

    /// Catalog of `n` monitored classes named `page000`, `page001`, ...
    pub fn numbered(n: usize, unmonitored: bool) -> Self {
        let classes = (0..n).map(|j| format!("page{j:03}")).collect();
        Self {
            classes,
            unmonitored: unmonitored.then(|| "unmonitored".to_string()),
        }
    }

    /// Label vector width: monitored classes plus the sentinel if any.
    pub fn width(&self) -> usize {
        self.classes.len() + usize::from(self.unmonitored.is_some())
    }

    pub fn monitored_count(&self) -> usize {
        self.classes.len()
    }

    pub fn sentinel_index(&self) -> Option<usize> {
        self.unmonitored.as_ref().map(|_| self.classes.len())
    }

    pub fn unmonitored(&self) -> Option<&str> {
        self.unmonitored.as_deref()
    }

    pub fn monitored(&self) -> &[String] {
        &self.classes
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.classes
            .iter()
            .position(|c| c == id)
            .or_else(|| match &self.unmonitored {
                Some(u) if u == id => self.sentinel_index(),
                _ => None,
            })
    }

    pub fn name(&self, class: usize) -> Option<&str> {
        self.classes
            .get(class)
            .map(String::as_str)
            .or_else(|| match self.sentinel_index() {
                Some(s) if s == class => self.unmonitored.as_deref(),
                _ => None,
            })
    }

    pub fn ids(&self, labels: &LabelSet) -> Vec<String> {
        labels
            .indices()
            .filter_map(|j| self.name(j).map(str::to_string))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub traces: Vec<Trace>,
    pub catalog: ClassCatalog,
    pub split: Split,
}

impl Dataset {
    pub fn new(traces: Vec<Trace>, catalog: ClassCatalog, split: Split) -> Result<Self> {
        let width = catalog.width();
        for (i, t) in traces.iter().enumerate() {
            if t.labels().width() != width {
                return Err(Error::Shape {
                    expected: format!("label width {width}"),
                    got: format!("label width {} at trace {i}", t.labels().width()),
                });
            }
        }
        Ok(Self {
            traces,
            catalog,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn label_width(&self) -> usize {
        self.catalog.width()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        Dataset {
            traces: indices.iter().map(|&i| self.traces[i].clone()).collect(),
            catalog: self.catalog.clone(),
            split,
        }
    }

    /// Shuffled train/validation/test split with the given ratios.
    ///
    /// With `group_by_combination`, all sessions sharing a label set land in
    /// the same part so that no webpage combination leaks across splits.
    pub fn split_by_ratio(
        &self,
        ratios: [usize; 3],
        seed: u64,
        group_by_combination: bool,
    ) -> Result<(Dataset, Dataset, Dataset)> {
        let total: usize = ratios.iter().sum();
        if total == 0 {
            return Err(Error::Config("split ratios sum to zero".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut groups: Vec<Vec<usize>> = if group_by_combination {
            let mut by_labels: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
            for (i, t) in self.traces.iter().enumerate() {
                by_labels
                    .entry(t.labels().indices().collect())
                    .or_default()
                    .push(i);
            }
            by_labels.into_values().collect()
        } else {
            (0..self.len()).map(|i| vec![i]).collect()
        };
        groups.shuffle(&mut rng);

        let n = groups.len();
        let n_train = n * ratios[0] / total;
        let n_val = n * ratios[1] / total;
        let flatten = |gs: &[Vec<usize>]| -> Vec<usize> {
            let mut v: Vec<usize> = gs.iter().flatten().copied().collect();
            v.sort_unstable();
            v
        };
        let train = flatten(&groups[..n_train]);
        let val = flatten(&groups[n_train..n_train + n_val]);
        let test = flatten(&groups[n_train + n_val..]);
        Ok((
            self.subset(&train, Split::Train),
            self.subset(&val, Split::Validation),
            self.subset(&test, Split::Test),
        ))
    }
}

/// Fixed-length encoder input: the direction sequence zero-padded or truncated.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput(Vec<f64>);

impl ModelInput {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub fn to_model_input(trace: &Trace, input_dim: usize) -> ModelInput {
    let mut v = vec![0.0; input_dim];
    for (slot, d) in v.iter_mut().zip(trace.directions()) {
        *slot = f64::from(*d);
    }
    ModelInput(v)
}

/// Drops sessions with fewer than `min_packets` packets, keeping order.
pub fn filter_short(dataset: &Dataset, min_packets: usize) -> Dataset {
    let traces: Vec<Trace> = dataset
        .traces
        .iter()
        .filter(|t| t.len() >= min_packets)
        .cloned()
        .collect();
    if traces.is_empty() && !dataset.is_empty() {
        log::warn!(
            "all {} traces are shorter than {min_packets} packets; dataset is now empty",
            dataset.len()
        );
    }
    Dataset {
        traces,
        catalog: dataset.catalog.clone(),
        split: dataset.split,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    Ndjson,
    CsvDir,
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ndjson" => Ok(DatasetFormat::Ndjson),
            "csv-dir" => Ok(DatasetFormat::CsvDir),
            other => Err(format!("unknown dataset format {other:?} (ndjson, csv-dir)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    split: Split,
    #[serde(flatten)]
    catalog: ClassCatalog,
    #[serde(default = "default_records")]
    records: String,
    #[serde(default)]
    count: usize,
}

fn default_records() -> String {
    RECORDS_FILE.to_string()
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    #[serde(alias = "dirs")]
    directions: Vec<i64>,
    #[serde(alias = "ts")]
    timestamps: Vec<f64>,
    labels: Vec<String>,
}

/// A record dropped during loading because it broke a trace invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct LoadReport {
    pub dataset: Dataset,
    pub rejected: Vec<Rejection>,
}

/// Loads a dataset from a directory (manifest + records) or a bare record file.
///
/// For a bare file, a sibling `manifest.json` supplies the catalog when
/// present; otherwise the catalog is inferred from label ids in order of first
/// appearance.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<LoadReport> {
    match format {
        DatasetFormat::Ndjson => load_ndjson(path),
        DatasetFormat::CsvDir => load_csv_dir(path),
    }
}

fn read_manifest(path: &Path) -> Result<Option<Manifest>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Catalog(format!(
            "unsupported manifest version {}",
            manifest.format_version
        )));
    }
    // re-run the uniqueness check
    let catalog = ClassCatalog::new(manifest.catalog.classes.clone(), manifest.catalog.unmonitored.clone())?;
    Ok(Some(Manifest { catalog, ..manifest }))
}

fn load_ndjson(path: &Path) -> Result<LoadReport> {
    let (records_path, manifest) = if path.is_dir() {
        let manifest = read_manifest(&path.join(MANIFEST_FILE))?.ok_or_else(|| {
            Error::Catalog(format!("{} has no {MANIFEST_FILE}", path.display()))
        })?;
        (path.join(&manifest.records), Some(manifest))
    } else {
        let sidecar = path
            .parent()
            .map(|p| p.join(MANIFEST_FILE))
            .unwrap_or_else(|| PathBuf::from(MANIFEST_FILE));
        (path.to_path_buf(), read_manifest(&sidecar)?)
    };

    let file = File::open(&records_path).map_err(|e| Error::io(&records_path, e))?;
    let mut raw = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&records_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: records_path.clone(),
            line: i + 1,
            message: format!("column {}: {e}", e.column()),
        })?;
        raw.push((i + 1, record));
    }

    let (catalog, split) = match manifest {
        Some(m) => (m.catalog, m.split),
        None => (infer_catalog(raw.iter().map(|(_, r)| &r.labels))?, Split::Train),
    };
    assemble(raw, catalog, split)
}

fn infer_catalog<'a>(labels: impl Iterator<Item = &'a Vec<String>>) -> Result<ClassCatalog> {
    let mut seen = HashSet::new();
    let mut classes = Vec::new();
    for ids in labels {
        for id in ids {
            if seen.insert(id.clone()) {
                classes.push(id.clone());
            }
        }
    }
    ClassCatalog::new(classes, None)
}

fn assemble(raw: Vec<(usize, Record)>, catalog: ClassCatalog, split: Split) -> Result<LoadReport> {
    let width = catalog.width();
    let mut traces = Vec::with_capacity(raw.len());
    let mut rejected = Vec::new();
    for (line, record) in raw {
        let mut labels = LabelSet::empty(width);
        for id in &record.labels {
            let j = catalog
                .index_of(id)
                .ok_or_else(|| Error::UnknownLabel { id: id.clone() })?;
            labels.insert(j);
        }
        if labels.is_empty() {
            rejected.push(Rejection {
                line,
                reason: "record has no labels".into(),
            });
            continue;
        }
        let directions = match record
            .directions
            .iter()
            .map(|d| i8::try_from(*d).map_err(|_| *d))
            .collect::<std::result::Result<Vec<i8>, i64>>()
        {
            Ok(d) => d,
            Err(bad) => {
                rejected.push(Rejection {
                    line,
                    reason: format!("direction {bad} is not +1/-1"),
                });
                continue;
            }
        };
        match Trace::new(directions, record.timestamps, labels) {
            Ok(t) => traces.push(t),
            Err(Error::Invariant(reason)) => rejected.push(Rejection { line, reason }),
            Err(e) => return Err(e),
        }
    }
    for r in &rejected {
        log::warn!("rejected record at line {}: {}", r.line, r.reason);
    }
    Ok(LoadReport {
        dataset: Dataset::new(traces, catalog, split)?,
        rejected,
    })
}

/// CSV directory layout: `index.csv` with `file,labels` columns (labels
/// separated by `;`), and one headerless `timestamp,direction` file per trace.
/// An optional `manifest.json` fixes the catalog and split.
fn load_csv_dir(dir: &Path) -> Result<LoadReport> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let index_path = dir.join(CSV_INDEX_FILE);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&index_path)
        .map_err(|e| csv_parse_error(&index_path, e))?;

    let mut raw = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_parse_error(&index_path, e))?;
        let line = i + 2;
        let (Some(file), Some(labels)) = (row.get(0), row.get(1)) else {
            return Err(Error::Parse {
                path: index_path.clone(),
                line,
                message: "expected columns file,labels".into(),
            });
        };
        let labels: Vec<String> = labels
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        let trace_path = dir.join(file);
        let (directions, timestamps) = read_csv_trace(&trace_path)?;
        raw.push((
            line,
            Record {
                directions,
                timestamps,
                labels,
            },
        ));
    }

    let (catalog, split) = match manifest {
        Some(m) => (m.catalog, m.split),
        None => (infer_catalog(raw.iter().map(|(_, r)| &r.labels))?, Split::Train),
    };
    assemble(raw, catalog, split)
}

fn csv_parse_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

fn read_csv_trace(path: &Path) -> Result<(Vec<i64>, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_path(path)
        .map_err(|e| csv_parse_error(path, e))?;
    let mut directions = Vec::new();
    let mut timestamps = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_parse_error(path, e))?;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let t: f64 = row
            .get(0)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("timestamp: {e}")))?;
        let d: i64 = row
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("direction: {e}")))?;
        timestamps.push(t);
        directions.push(d);
    }
    Ok((directions, timestamps))
}

/// Writes `manifest.json` and `traces.ndjson` into `dir`, creating it if needed.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        split: dataset.split,
        catalog: dataset.catalog.clone(),
        records: RECORDS_FILE.to_string(),
        count: dataset.len(),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(&manifest_path, e))?;

    let records_path = dir.join(RECORDS_FILE);
    let file = File::create(&records_path).map_err(|e| Error::io(&records_path, e))?;
    let mut out = BufWriter::new(file);
    for t in &dataset.traces {
        let record = Record {
            directions: t.directions().iter().map(|d| i64::from(*d)).collect(),
            timestamps: t.timestamps().to_vec(),
            labels: dataset.catalog.ids(t.labels()),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n").map_err(|e| Error::io(&records_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&records_path, e))?;
    Ok(())
}

/// Re-expresses every label of `dataset` against `target`'s catalog.
///
/// Ids missing from `target` are an error unless `open_world` is set and
/// `target` has an unmonitored sentinel, in which case they map to it.
pub fn remap_labels(dataset: &Dataset, target: &ClassCatalog, open_world: bool) -> Result<Dataset> {
    let mut cache: HashMap<usize, usize> = HashMap::new();
    for j in 0..dataset.catalog.width() {
        let id = dataset.catalog.name(j).unwrap_or_default();
        let mapped = match target.index_of(id) {
            Some(t) => t,
            None if open_world => target.sentinel_index().ok_or_else(|| {
                Error::Catalog("open-world remapping needs an unmonitored sentinel".into())
            })?,
            None => return Err(Error::UnknownLabel { id: id.to_string() }),
        };
        cache.insert(j, mapped);
    }
    let traces = dataset
        .traces
        .iter()
        .map(|t| {
            let mut labels = LabelSet::empty(target.width());
            for j in t.labels().indices() {
                labels.insert(cache[&j]);
            }
            t.clone().with_labels(labels)
        })
        .collect();
    Dataset::new(traces, target.clone(), dataset.split)
}
