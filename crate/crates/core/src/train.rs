//! Joint optimisation of encoder weights and class proxies.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_dataset, AugmentationConfig};
use crate::checkpoint::Container;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_embedded, Embedder, Protocol};
use crate::identify::{IdentificationIndex, IdentifyConfig};
use crate::loss::{loss_and_gradients, LossConfig, ProxySet};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::Matrix;
use crate::trace::{to_model_input, ClassCatalog, Dataset, LabelSet};

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const LOG_FILE: &str = "log.ndjson";
pub const CONFIG_ECHO_FILE: &str = "config-echo";
pub const PROXY_TENSOR: &str = "proxies";
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
const SELECTION_K: usize = 5;
const EMBED_CHUNK: usize = 512;

/// Regenerates augmented sessions from the original training set every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub config: AugmentationConfig,
    pub merged: usize,
    pub exchanged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    /// Identification settings used for checkpoint selection.
    pub selection: IdentifyConfig,
    /// `None` trains on the dataset as given.
    pub per_epoch_augmentation: Option<AugmentPlan>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: DEFAULT_LEARNING_RATE,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            early_stop_patience: 0,
            selection: IdentifyConfig::default(),
            per_epoch_augmentation: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size {} < 2; pair mining needs two samples", self.batch_size)));
        }
        // zero is allowed so that a frozen run can be checked against its initial state
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        self.selection.validate()
    }
}

/// Encoder plus proxies for one class catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub proxies: ProxySet,
    pub catalog: ClassCatalog,
}

impl Model {
    pub fn new(config: EncoderConfig, catalog: ClassCatalog, seed: u64) -> Result<Self> {
        let encoder = Encoder::new(config, seed)?;
        let proxies = ProxySet::random(catalog.width(), encoder.config().embed_dim, seed ^ 0x9e37_79b9_7f4a_7c15);
        Ok(Self {
            encoder,
            proxies,
            catalog,
        })
    }

    fn inputs(&self, traces: &[crate::trace::Trace]) -> Result<Matrix> {
        let d = self.encoder.config().input_dim;
        let mut m = Matrix::zeros(traces.len(), d);
        for (i, t) in traces.iter().enumerate() {
            m.row_mut(i).copy_from_slice(to_model_input(t, d).as_slice());
        }
        Ok(m)
    }

    /// Reference index over `references`, embedded with this model.
    pub fn build_index(&self, references: &Dataset, config: IdentifyConfig) -> Result<IdentificationIndex> {
        if references.catalog != self.catalog {
            return Err(Error::Catalog("reference catalog differs from the model's".into()));
        }
        let labels = references.traces.iter().map(|t| t.labels().clone()).collect();
        IdentificationIndex::new(self.catalog.clone(), Some(self.proxies.clone()), self.embed(references)?, labels, config)
    }

    pub fn save(&self, path: &Path, echo: serde_json::Value) -> Result<()> {
        let header = serde_json::json!({
            "encoder": self.encoder.config(),
            "catalog": self.catalog,
            "echo": echo,
        });
        let mut c = Container::new("model", header);
        for p in self.encoder.params().iter().chain(self.encoder.buffers()) {
            c.push(p.name.clone(), p.shape.clone(), p.value.clone());
        }
        c.push(PROXY_TENSOR, vec![self.proxies.classes(), self.proxies.dim()], self.proxies.matrix().as_slice().to_vec());
        c.save(path)
    }

    /// Loads a model and returns it with the stored configuration echo.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let c = Container::load(path)?;
        if c.kind != "model" {
            return Err(Error::Checkpoint(format!("{} holds a {:?}, not a model", path.display(), c.kind)));
        }
        let config: EncoderConfig = serde_json::from_value(c.config["encoder"].clone())?;
        let catalog: ClassCatalog = serde_json::from_value(c.config["catalog"].clone())?;
        let mut encoder = Encoder::new(config, 0)?;
        encoder.load_tensors(|name| c.get(name).map(|t| (t.shape.as_slice(), t.values.as_slice())))?;
        let p = c.require(PROXY_TENSOR)?;
        if p.shape.len() != 2 || p.shape[0] != catalog.width() {
            return Err(Error::Checkpoint(format!("proxy tensor shape {:?} does not match the catalog", p.shape)));
        }
        let proxies = ProxySet::from_matrix(Matrix::from_vec(p.shape[0], p.shape[1], p.values.clone())?)?;
        Ok((
            Self {
                encoder,
                proxies,
                catalog,
            },
            c.config["echo"].clone(),
        ))
    }
}

impl Embedder for Model {
    fn embed(&self, dataset: &Dataset) -> Result<Matrix> {
        let dim = self.encoder.config().embed_dim;
        let mut out = Vec::with_capacity(dataset.len() * dim);
        for chunk in dataset.traces.chunks(EMBED_CHUNK) {
            out.extend(self.encoder.encode_matrix(&self.inputs(chunk)?)?.into_vec());
        }
        Matrix::from_vec(dataset.len(), dim, out)
    }
}

/// One embedding per trace, in dataset order.
pub fn embed_dataset(model: &Model, dataset: &Dataset) -> Result<Vec<(Vec<f64>, LabelSet)>> {
    let m = model.embed(dataset)?;
    Ok(m.iter_rows()
        .zip(&dataset.traces)
        .map(|(row, t)| (row.to_vec(), t.labels().clone()))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub proxy_loss: f64,
    pub sample_loss: f64,
    pub total_loss: f64,
    pub batches: usize,
    pub skipped_batches: usize,
    pub validation_recall_at_5: Option<f64>,
    pub mean_proxy_similarity: f64,
    pub best: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Objective on the training set, inference mode, before any update.
    pub initial_loss: f64,
    /// Same measurement for the selected model.
    pub final_loss: f64,
}

impl TrainingLog {
    pub fn to_ndjson(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        let summary = serde_json::json!({
            "summary": true,
            "best_epoch": self.best_epoch,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
        });
        s.push_str(&serde_json::to_string(&summary)?);
        s.push('\n');
        Ok(s)
    }
}

fn batch_labels(dataset: &Dataset, idx: &[usize]) -> Vec<LabelSet> {
    idx.iter().map(|&i| dataset.traces[i].labels().clone()).collect()
}

/// Mean objective over fixed-order batches in inference mode. Batches
/// without proxy pairs are left out.
pub fn dataset_loss(model: &Model, dataset: &Dataset, loss: &LossConfig, batch_size: usize) -> Result<f64> {
    let emb = model.embed(dataset)?;
    let labels: Vec<LabelSet> = dataset.traces.iter().map(|t| t.labels().clone()).collect();
    let mut total = 0.0;
    let mut used = 0usize;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(batch_size.max(2)) {
        if chunk.len() < 2 {
            continue;
        }
        let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| emb.row(i).to_vec()).collect();
        let batch = Matrix::from_rows(&rows)?;
        match loss_and_gradients(&batch, &labels[chunk[0]..chunk[0] + chunk.len()], &model.proxies, loss, false) {
            Ok((b, _)) => {
                total += b.total;
                used += 1;
            }
            Err(Error::NoProxyPairs(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(if used == 0 { 0.0 } else { total / used as f64 })
}

fn validation_recall(model: &Model, train: &Dataset, val: &Dataset, config: &IdentifyConfig) -> Result<f64> {
    let index = model.build_index(train, config.clone())?;
    let labels: Vec<LabelSet> = val.traces.iter().map(|t| t.labels().clone()).collect();
    let report = evaluate_embedded(
        &index,
        &model.embed(val)?,
        &labels,
        &[SELECTION_K],
        &[],
        Protocol::Closed,
        serde_json::Value::Null,
    )?;
    Ok(report.recall[0].value)
}

/// Trains a fresh model. The returned model is the epoch with the best
/// validation Recall@5, or the last epoch when `val` is empty.
pub fn train(
    train_set: &Dataset,
    val: &Dataset,
    encoder_cfg: &EncoderConfig,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<(Model, TrainingLog)> {
    let model = Model::new(encoder_cfg.clone(), train_set.catalog.clone(), cfg.seed)?;
    train_from(model, train_set, val, loss_cfg, cfg)
}

/// Like [`train`], starting from an existing model.
pub fn train_from(
    mut model: Model,
    train_set: &Dataset,
    val: &Dataset,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<(Model, TrainingLog)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if train_set.catalog != model.catalog || (!val.is_empty() && val.catalog != model.catalog) {
        return Err(Error::Catalog("training, validation and model catalogs must match".into()));
    }
    if train_set.len() < 2 {
        return Err(Error::Config(format!("training set has {} traces; need at least 2", train_set.len())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sizes: Vec<usize> = model.encoder.params().iter().map(|p| p.value.len()).collect();
    sizes.push(model.proxies.as_mut_slice().len());
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &sizes);

    let mut log = TrainingLog {
        initial_loss: dataset_loss(&model, train_set, loss_cfg, cfg.batch_size)?,
        ..Default::default()
    };
    let mut best: Option<(f64, Model)> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let regenerated;
        let data = match &cfg.per_epoch_augmentation {
            Some(plan) => {
                let aug = AugmentationConfig {
                    rng_seed: plan.config.rng_seed.wrapping_add(epoch as u64),
                    ..plan.config.clone()
                };
                regenerated = augment_dataset(train_set, &aug, plan.merged, plan.exchanged)?;
                &regenerated
            }
            None => train_set,
        };

        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut proxy_sum, mut sample_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let (mut batches, mut skipped) = (0usize, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let traces: Vec<_> = idx.iter().map(|&i| data.traces[i].clone()).collect();
            let x = model.inputs(&traces)?;
            let labels = batch_labels(data, idx);
            let (emb, tape) = model.encoder.forward_train(&x, &mut rng)?;
            let (breakdown, grads) = match loss_and_gradients(&emb, &labels, &model.proxies, loss_cfg, true) {
                Ok(v) => v,
                Err(Error::NoProxyPairs(why)) => {
                    log::warn!("epoch {epoch}: skipping batch without {why} proxy pairs");
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let grads = grads.expect("gradients requested");
            let enc_grads = model.encoder.backward(&tape, &grads.embeddings)?;
            let mut grad_refs: Vec<&[f64]> = enc_grads.iter().map(Vec::as_slice).collect();
            grad_refs.push(grads.proxies.as_slice());
            let Model { encoder, proxies, .. } = &mut model;
            let params = encoder
                .params_mut()
                .iter_mut()
                .map(|p| p.value.as_mut_slice())
                .chain(std::iter::once(proxies.as_mut_slice()));
            optimizer.step(params, &grad_refs);

            proxy_sum += breakdown.proxy;
            sample_sum += breakdown.sample;
            total_sum += breakdown.total;
            batches += 1;
        }
        let mean = |s: f64| if batches == 0 { 0.0 } else { s / batches as f64 };

        let recall = if val.is_empty() {
            None
        } else {
            Some(validation_recall(&model, train_set, val, &cfg.selection)?)
        };
        let improved = match (recall, &best) {
            (None, _) => true,
            (Some(_), None) => true,
            (Some(r), Some((b, _))) => r > *b,
        };
        if improved {
            best = Some((recall.unwrap_or(f64::NEG_INFINITY), model.clone()));
            log.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
        }
        let record = EpochRecord {
            epoch,
            proxy_loss: mean(proxy_sum),
            sample_loss: mean(sample_sum),
            total_loss: mean(total_sum),
            batches,
            skipped_batches: skipped,
            validation_recall_at_5: recall,
            mean_proxy_similarity: model.proxies.mean_pairwise_similarity(),
            best: improved,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (proxy {:.5}, sample {:.5}), skipped {skipped}, val R@5 {:?}",
            record.total_loss,
            record.proxy_loss,
            record.sample_loss,
            recall
        );
        log.epochs.push(record);
        if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }

    let model = best.map(|(_, m)| m).unwrap_or(model);
    log.final_loss = dataset_loss(&model, train_set, loss_cfg, cfg.batch_size)?;
    Ok((model, log))
}

/// Writes `best.ckpt`, `log.ndjson` and `config-echo` into `dir`.
pub fn save_run(dir: &Path, model: &Model, log: &TrainingLog, echo: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.save(&dir.join(CHECKPOINT_FILE), echo.clone())?;
    let log_path = dir.join(LOG_FILE);
    fs::write(&log_path, log.to_ndjson()?).map_err(|e| Error::io(&log_path, e))?;
    let echo_path = dir.join(CONFIG_ECHO_FILE);
    let mut f = fs::File::create(&echo_path).map_err(|e| Error::io(&echo_path, e))?;
    writeln!(f, "{}", serde_json::to_string_pretty(echo)?).map_err(|e| Error::io(&echo_path, e))?;
    Ok(())
}
