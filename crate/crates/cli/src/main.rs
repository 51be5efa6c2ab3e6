//! `wpf`: synthesise, ingest, augment, train, predict, evaluate and ablate.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
//! Relative `--run` directories are resolved against `$WPF_RUN_ROOT` when set.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use wpf_core::augment::{augment_dataset, AugmentationConfig, MergePairing};
use wpf_core::encoder::{Activation, EncoderConfig};
use wpf_core::eval::{evaluate, EvalReport, Protocol};
use wpf_core::identify::{IdentificationIndex, IdentifyConfig};
use wpf_core::loss::{LossConfig, LossTerms};
use wpf_core::optim::OptimizerKind;
use wpf_core::synth::{generate_multi_tab, generate_single_tab, raw_feature_baseline, SynthConfig};
use wpf_core::trace::{filter_short, load_dataset, remap_labels, save_dataset, to_model_input, Dataset, DatasetFormat};
use wpf_core::train::{self, save_run, AugmentPlan, Model, TrainConfig, CHECKPOINT_FILE};
use wpf_core::Error;

const RUN_ROOT_ENV: &str = "WPF_RUN_ROOT";
const INDEX_FILE: &str = "index.snap";

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match &e {
            Error::Config(_) => Failure::Usage(msg),
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => Failure::Data(msg),
            _ if e.is_data_error() => Failure::Data(msg),
            _ => Failure::Runtime(msg),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "wpf", version, about = "Multi-tab webpage fingerprinting toolkit")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-tab dataset.
    Synth(SynthArgs),
    /// Load traces, drop short ones and write them in the canonical format.
    Ingest(IngestArgs),
    /// Add merged and burst-exchanged sessions to a dataset.
    Augment(AugmentArgs),
    /// Train the encoder and proxies; writes a run directory.
    Train(Box<TrainArgs>),
    /// Identify the webpages in each trace of a dataset.
    Predict(PredictArgs),
    /// Score a trained run on a test set.
    Evaluate(EvaluateArgs),
    /// Run the raw / no-augmentation / proxy-only / sample-only / full grid.
    Ablate(Box<AblateArgs>),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 3)]
    max_tabs: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 1000)]
    sessions: usize,
    #[arg(long, default_value_t = 24)]
    signature_length: usize,
    #[arg(long, default_value_t = 8)]
    burst_scale: usize,
    #[arg(long, default_value_t = 16)]
    max_preamble: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write train/, val/ and test/ parts split with these ratios.
    #[arg(long, value_delimiter = ',')]
    split: Option<Vec<usize>>,
    #[arg(long)]
    group_by_combination: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    /// ndjson or csv-dir.
    #[arg(long, default_value = "ndjson")]
    format: DatasetFormat,
    #[arg(long, default_value_t = wpf_core::trace::DEFAULT_MIN_PACKETS)]
    min_packets: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct AugmentFlags {
    /// Input dimension d_i; merged sessions are cut to this length.
    #[arg(long, default_value_t = 10000)]
    input_dim: usize,
    /// Exchanging ratio m_e (fraction of bursts swapped).
    #[arg(long, default_value_t = 0.05)]
    exchange_ratio: f64,
    /// random or exhaustive-sampled.
    #[arg(long, default_value = "random")]
    pairing: MergePairing,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    merged: usize,
    #[arg(long, default_value_t = 0)]
    exchanged: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    flags: AugmentFlags,
}

/// Identification settings shared by train, predict and evaluate.
#[derive(Args, Debug, Clone)]
struct IdentifyFlags {
    /// Neighbor number b (proxies and samples retrieved).
    #[arg(long = "b", default_value_t = 40)]
    neighbors: usize,
    /// Score weight theta on the sample-based score.
    #[arg(long, default_value_t = 2.0)]
    theta: f64,
    /// Threshold tau on max-normalised scores.
    #[arg(long, default_value_t = 0.3)]
    tau: f64,
}

impl IdentifyFlags {
    fn config(&self) -> IdentifyConfig {
        IdentifyConfig {
            neighbors: self.neighbors,
            score_weight: self.theta,
            threshold: self.tau,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct ModelFlags {
    /// Network size: df (full) or tiny; explicit dimensions override it.
    #[arg(long, default_value = "df")]
    preset: String,
    /// Transformed dimension d_o.
    #[arg(long, default_value_t = 512)]
    embed_dim: usize,
    /// Margin for negative proxy pairs and irrelevant sample pairs.
    #[arg(long, default_value_t = 0.1)]
    margin: f64,
    /// Loss weight beta on the sample-based loss.
    #[arg(long, default_value_t = 4.5)]
    beta: f64,
    /// combined, proxy-only or sample-only.
    #[arg(long, default_value = "combined")]
    loss: LossTerms,
    /// df, elu or relu.
    #[arg(long, default_value = "df")]
    activation: Activation,
    #[arg(long)]
    no_batch_norm: bool,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// adam or sgd.
    #[arg(long, default_value = "adam")]
    optimizer: OptimizerKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Epochs without validation improvement before stopping (0 = off).
    #[arg(long, default_value_t = 0)]
    patience: usize,
    /// Merged sessions added to the training set before training.
    #[arg(long, default_value_t = 0)]
    augment_merged: usize,
    /// Burst-exchanged sessions added to the training set before training.
    #[arg(long, default_value_t = 0)]
    augment_exchanged: usize,
    /// Regenerate augmented sessions every epoch instead of once.
    #[arg(long)]
    per_epoch_augmentation: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Run directory (relative paths resolve under $WPF_RUN_ROOT).
    #[arg(long)]
    run: PathBuf,
    /// Build the identification index from this dataset instead of the
    /// (possibly augmented) training set.
    #[arg(long)]
    reference_data: Option<PathBuf>,
    #[command(flatten)]
    augment: AugmentFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    identify: IdentifyFlags,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Map classes unknown to the run onto the unmonitored class.
    #[arg(long)]
    open_world: bool,
    /// Output file (NDJSON); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    identify: IdentifyFlags,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "5,10,15,20,25,30")]
    recall_k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    ap_k: Vec<usize>,
    /// closed or open.
    #[arg(long, default_value = "closed")]
    protocol: Protocol,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// text or json.
    #[arg(long, default_value = "json")]
    format: String,
    #[command(flatten)]
    identify: IdentifyFlags,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "5")]
    recall_k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "5")]
    ap_k: Vec<usize>,
    #[command(flatten)]
    augment: AugmentFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    identify: IdentifyFlags,
}

fn run_dir(path: &Path) -> PathBuf {
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn load(path: &Path) -> CliResult<Dataset> {
    let report = load_dataset(path, DatasetFormat::Ndjson)?;
    for r in &report.rejected {
        log::warn!("{}: rejected record on line {}: {}", path.display(), r.line, r.reason);
    }
    Ok(report.dataset)
}

fn write_output(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(p, text).map_err(|e| Failure::from(Error::io(p, e)))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn encoder_config(flags: &ModelFlags, input_dim: usize) -> CliResult<EncoderConfig> {
    let base = match flags.preset.as_str() {
        "df" => EncoderConfig::df(),
        "tiny" => EncoderConfig::tiny(),
        other => return Err(Failure::Usage(format!("unknown preset {other:?} (df, tiny)"))),
    };
    Ok(EncoderConfig {
        input_dim,
        embed_dim: flags.embed_dim,
        activation: flags.activation,
        batch_norm: !flags.no_batch_norm,
        dropout: flags.dropout,
        ..base
    })
}

fn loss_config(flags: &ModelFlags) -> LossConfig {
    LossConfig {
        margin: flags.margin,
        beta: flags.beta,
        terms: flags.loss,
    }
}

fn augmentation_config(flags: &AugmentFlags, seed: u64) -> AugmentationConfig {
    AugmentationConfig {
        exchange_ratio: flags.exchange_ratio,
        rng_seed: seed,
        merge_pairing: flags.pairing,
        input_dim: flags.input_dim,
    }
}

fn train_config(flags: &ModelFlags, augment: &AugmentFlags, identify: &IdentifyFlags) -> TrainConfig {
    TrainConfig {
        epochs: flags.epochs,
        batch_size: flags.batch_size,
        learning_rate: flags.lr,
        optimizer: flags.optimizer,
        seed: flags.seed,
        early_stop_patience: flags.patience,
        selection: identify.config(),
        per_epoch_augmentation: flags.per_epoch_augmentation.then(|| AugmentPlan {
            config: augmentation_config(augment, flags.seed),
            merged: flags.augment_merged,
            exchanged: flags.augment_exchanged,
        }),
    }
}

fn synth(args: SynthArgs) -> CliResult<()> {
    let cfg = SynthConfig {
        n_classes: args.classes,
        traces_per_class: args.per_class,
        signature_length: args.signature_length,
        noise_rate: args.noise,
        burst_scale: args.burst_scale,
        seed: args.seed,
        max_tabs: args.max_tabs,
        sessions: args.sessions,
        max_preamble: args.max_preamble,
        ..Default::default()
    };
    let sessions = generate_multi_tab(&cfg, &generate_single_tab(&cfg)?)?;
    save_dataset(&sessions, &args.out)?;
    if let Some(r) = &args.split {
        if r.len() != 3 {
            return Err(Failure::Usage(format!("--split takes three ratios like 8,1,1, got {r:?}")));
        }
        let (tr, va, te) = sessions.split_by_ratio([r[0], r[1], r[2]], args.seed, args.group_by_combination)?;
        save_dataset(&tr, &args.out.join("train"))?;
        save_dataset(&va, &args.out.join("val"))?;
        save_dataset(&te, &args.out.join("test"))?;
    }
    let echo = json!({"synth": cfg, "split": args.split, "group_by_combination": args.group_by_combination});
    write_output(Some(&args.out.join("config-echo")), &format!("{}\n", serde_json::to_string_pretty(&echo)?))?;
    eprintln!("wrote {} sessions to {}", sessions.len(), args.out.display());
    Ok(())
}

fn ingest(args: IngestArgs) -> CliResult<()> {
    let report = load_dataset(&args.input, args.format)?;
    for r in &report.rejected {
        log::warn!("rejected record on line {}: {}", r.line, r.reason);
    }
    let kept = filter_short(&report.dataset, args.min_packets);
    save_dataset(&kept, &args.out)?;
    eprintln!(
        "kept {} of {} traces ({} rejected, {} shorter than {})",
        kept.len(),
        report.dataset.len() + report.rejected.len(),
        report.rejected.len(),
        report.dataset.len() - kept.len(),
        args.min_packets
    );
    Ok(())
}

fn augment(args: AugmentArgs) -> CliResult<()> {
    let ds = load(&args.input)?;
    let cfg = augmentation_config(&args.flags, args.seed);
    let out = augment_dataset(&ds, &cfg, args.merged, args.exchanged)?;
    save_dataset(&out, &args.out)?;
    eprintln!("wrote {} sessions ({} original) to {}", out.len(), ds.len(), args.out.display());
    Ok(())
}

/// Trains one model and returns it with its index and configuration echo.
fn fit(
    train_set: &Dataset,
    val: &Dataset,
    references: Option<&Dataset>,
    augment: &AugmentFlags,
    model: &ModelFlags,
    identify: &IdentifyFlags,
) -> CliResult<(Model, train::TrainingLog, IdentificationIndex, Value)> {
    let enc = encoder_config(model, augment.input_dim)?;
    let loss = loss_config(model);
    let tc = train_config(model, augment, identify);
    let aug_cfg = augmentation_config(augment, model.seed);
    let fixed_augmentation = !model.per_epoch_augmentation && (model.augment_merged > 0 || model.augment_exchanged > 0);
    let augmented;
    let train_set = if fixed_augmentation {
        augmented = augment_dataset(train_set, &aug_cfg, model.augment_merged, model.augment_exchanged)?;
        &augmented
    } else {
        train_set
    };
    let (m, log) = train::train(train_set, val, &enc, &loss, &tc)?;
    let index = m.build_index(references.unwrap_or(train_set), identify.config())?;
    let echo = json!({
        "encoder": enc,
        "loss": loss,
        "train": tc,
        "augmentation": {
            "config": aug_cfg,
            "merged": model.augment_merged,
            "exchanged": model.augment_exchanged,
            "per_epoch": model.per_epoch_augmentation,
        },
        "identify": identify.config(),
        "train_sessions": train_set.len(),
        "validation_sessions": val.len(),
    });
    Ok((m, log, index, echo))
}

fn empty_like(ds: &Dataset) -> Dataset {
    ds.subset(&[], wpf_core::trace::Split::Validation)
}

fn train_cmd(args: TrainArgs) -> CliResult<()> {
    let train_set = load(&args.train)?;
    let val = match &args.val {
        Some(p) => load(p)?,
        None => empty_like(&train_set),
    };
    let references = args.reference_data.as_deref().map(load).transpose()?;
    let dir = run_dir(&args.run);
    let (model, log, index, echo) = fit(&train_set, &val, references.as_ref(), &args.augment, &args.model, &args.identify)?;
    save_run(&dir, &model, &log, &echo)?;
    index.save(&dir.join(INDEX_FILE), echo)?;
    eprintln!(
        "trained {} epochs (best {:?}); run written to {}",
        log.epochs.len(),
        log.best_epoch,
        dir.display()
    );
    Ok(())
}

fn load_run(run: &Path, identify: &IdentifyFlags) -> CliResult<(Model, IdentificationIndex, Value)> {
    let dir = run_dir(run);
    let ckpt = dir.join(CHECKPOINT_FILE);
    if !ckpt.exists() {
        return Err(Failure::Data(format!(
            "missing checkpoint {}; run `wpf train --run {}` first",
            ckpt.display(),
            run.display()
        )));
    }
    let index_path = dir.join(INDEX_FILE);
    if !index_path.exists() {
        return Err(Failure::Data(format!("missing index snapshot {}", index_path.display())));
    }
    let (model, echo) = Model::load(&ckpt)?;
    let index = IdentificationIndex::load(&index_path)?.with_config(identify.config())?;
    if index.catalog() != &model.catalog {
        return Err(Failure::Data("checkpoint and index snapshot have different catalogs".into()));
    }
    Ok((model, index, echo))
}

fn predict(args: PredictArgs) -> CliResult<()> {
    let (model, index, _) = load_run(&args.run, &args.identify)?;
    let ds = load(&args.input)?;
    let ds = if ds.catalog == model.catalog {
        ds
    } else {
        remap_labels(&ds, &model.catalog, args.open_world)?
    };
    let d = model.encoder.config().input_dim;
    let inputs: Vec<_> = ds.traces.iter().map(|t| to_model_input(t, d)).collect();
    let emb = model.encoder.encode(&inputs)?;
    let mut out = String::new();
    for (i, row) in emb.iter_rows().enumerate() {
        let decision = index.combine_and_decide(row)?;
        let names = |classes: &[usize]| -> Vec<String> {
            classes.iter().filter_map(|&c| model.catalog.name(c).map(str::to_owned)).collect()
        };
        let top: Vec<usize> = decision.ranking.iter().take(args.identify.neighbors.min(10)).copied().collect();
        let record = json!({
            "trace": i,
            "predicted": names(&decision.predicted),
            "ranking": names(&top),
            "scores": top.iter().map(|&c| decision.combined.as_slice()[c]).collect::<Vec<_>>(),
            "truth": model.catalog.ids(ds.traces[i].labels()),
        });
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    write_output(args.out.as_deref(), &out)
}

fn render(report: &EvalReport, format: &str) -> CliResult<String> {
    match format {
        "json" => Ok(format!("{}\n", serde_json::to_string_pretty(report)?)),
        "text" => Ok(report.to_text()),
        other => Err(Failure::Usage(format!("unknown report format {other:?} (text, json)"))),
    }
}

fn evaluate_cmd(args: EvaluateArgs) -> CliResult<()> {
    // reject a bad format before doing any work
    if !matches!(args.format.as_str(), "json" | "text") {
        return Err(Failure::Usage(format!("unknown report format {:?} (text, json)", args.format)));
    }
    let (model, index, echo) = load_run(&args.run, &args.identify)?;
    let test = load(&args.test)?;
    let config = json!({
        "run": echo,
        "evaluation": {
            "identify": args.identify.config(),
            "recall_k": args.recall_k,
            "ap_k": args.ap_k,
            "protocol": args.protocol,
            "test_sessions": test.len(),
        },
    });
    let report = evaluate(&index, &model, &test, &args.recall_k, &args.ap_k, args.protocol, config)?;
    write_output(args.out.as_deref(), &render(&report, &args.format)?)
}

fn ablate(args: AblateArgs) -> CliResult<()> {
    let train_set = load(&args.train)?;
    let test = load(&args.test)?;
    let val = match &args.val {
        Some(p) => load(p)?,
        None => empty_like(&train_set),
    };
    let dir = run_dir(&args.run);
    let wants_augmentation = args.model.augment_merged > 0 || args.model.augment_exchanged > 0;
    if !wants_augmentation {
        log::warn!("no --augment-merged/--augment-exchanged given; augmented rows equal the unaugmented one");
    }
    let raw = raw_feature_baseline(
        &train_set,
        &test,
        args.identify.neighbors,
        args.augment.input_dim,
        &args.recall_k,
        &args.ap_k,
    )?;
    let mut rows = vec![("identification-only".to_string(), raw)];
    let variants = [
        ("no-augmentation-combined", false, LossTerms::Combined),
        ("augmentation-proxy-only", true, LossTerms::ProxyOnly),
        ("augmentation-sample-only", true, LossTerms::SampleOnly),
        ("augmentation-combined", true, LossTerms::Combined),
    ];
    for (name, augmented, terms) in variants {
        let mut model = args.model.clone();
        model.loss = terms;
        if !augmented {
            model.augment_merged = 0;
            model.augment_exchanged = 0;
            model.per_epoch_augmentation = false;
        }
        log::info!("ablation row {name}");
        let (m, log, index, echo) = fit(&train_set, &val, None, &args.augment, &model, &args.identify)?;
        save_run(&dir.join(name), &m, &log, &echo)?;
        let report = evaluate(&index, &m, &test, &args.recall_k, &args.ap_k, Protocol::Closed, echo)?;
        rows.push((name.to_string(), report));
    }

    let mut text = String::from("row");
    for k in &args.recall_k {
        text.push_str(&format!("\tRecall@{k}"));
    }
    for k in &args.ap_k {
        text.push_str(&format!("\tAP@{k}"));
    }
    text.push('\n');
    for (name, r) in &rows {
        text.push_str(name);
        for m in r.recall.iter().chain(&r.ap) {
            text.push_str(&format!("\t{:.4}", m.value));
        }
        text.push('\n');
    }
    let records: Vec<Value> = rows.iter().map(|(n, r)| json!({"row": n, "report": r})).collect();
    write_output(Some(&dir.join("ablation.json")), &format!("{}\n", serde_json::to_string_pretty(&records)?))?;
    write_output(Some(&dir.join("ablation.tsv")), &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Ingest(a) => ingest(a),
        Command::Augment(a) => augment(a),
        Command::Train(a) => train_cmd(*a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Ablate(a) => ablate(*a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
