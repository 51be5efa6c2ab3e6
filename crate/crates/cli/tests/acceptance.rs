//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero if any fail.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::checks;
use wpf_core::augment::{augment_dataset, AugmentationConfig};
use wpf_core::encoder::EncoderConfig;
use wpf_core::eval::{evaluate, Protocol};
use wpf_core::loss::{LossConfig, LossTerms};
use wpf_core::synth::{generate_multi_tab, generate_single_tab, raw_feature_baseline, SynthConfig};
use wpf_core::trace::Dataset;
use wpf_core::train::{embed_dataset, train, Model, TrainConfig};

// Oracle criteria: instance counts and time limits.
const MERGE_PAIRS: usize = 1000;
const MERGE_LIMIT: Duration = Duration::from_secs(10);
const GRADIENT_INSTANCES: usize = 50;
const GRADIENT_TOLERANCE: f64 = 1e-4;
const GRADIENT_LIMIT: Duration = Duration::from_secs(60);
const BETA_ZERO_INSTANCES: usize = 100;
const MINING_INSTANCES: usize = 200;
const KNN_INSTANCES: usize = 200;
const METRIC_INSTANCES: usize = 1000;

// Synthetic experiment. Frozen after a calibration run; see README.
const SYNTH_SEED: u64 = 7;
const SPLIT_SEED: u64 = 1;
const TRAIN_SEED: u64 = 1;
const INPUT_DIM: usize = 512;
const AUGMENT_EACH: usize = 600;
const EPOCHS: usize = 25;
const LEARNING_RATE: f64 = 3e-3;

const MAX_PROXY_SIMILARITY: f64 = 0.9;
const COLLAPSE_LIMIT: Duration = Duration::from_secs(600);
const MIN_RECALL_AT_5: f64 = 0.80;
const MIN_GAIN_OVER_RAW: f64 = 0.20;
const PIPELINE_LIMIT: Duration = Duration::from_secs(900);
// "sample-only is about as good as raw features": within a quarter of the gain
// the full pipeline must show over raw.
const SAMPLE_ONLY_RAW_TOLERANCE: f64 = 0.05;

struct Outcome {
    pass: bool,
    detail: String,
}

fn verdict(n: usize, name: &str, outcome: Outcome) -> bool {
    println!("{} criterion {n} {name}: {}", if outcome.pass { "PASS" } else { "FAIL" }, outcome.detail);
    outcome.pass
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t0 = Instant::now();
    let out = f();
    (out, t0.elapsed())
}

fn oracle(res: Result<String, String>, elapsed: Duration, limit: Option<Duration>) -> Outcome {
    match res {
        Ok(detail) => {
            let in_time = limit.map_or(true, |l| elapsed <= l);
            Outcome {
                pass: in_time,
                detail: format!("{detail}, {:.2}s{}", elapsed.as_secs_f64(), if in_time { "" } else { " (too slow)" }),
            }
        }
        Err(e) => Outcome { pass: false, detail: e },
    }
}

fn synth_config() -> SynthConfig {
    SynthConfig {
        n_classes: 20,
        traces_per_class: 300,
        signature_length: 16,
        burst_scale: 32,
        noise_rate: 0.05,
        max_tabs: 3,
        sessions: 3000,
        max_preamble: 64,
        seed: SYNTH_SEED,
        ..Default::default()
    }
}

fn encoder() -> EncoderConfig {
    EncoderConfig {
        input_dim: INPUT_DIM,
        embed_dim: 32,
        channels: [8, 16, 16, 32],
        ..EncoderConfig::tiny()
    }
}

struct Experiment {
    train: Dataset,
    augmented: Dataset,
    val: Dataset,
    test: Dataset,
    prep: Duration,
}

fn prepare() -> Result<Experiment, String> {
    let t0 = Instant::now();
    let cfg = synth_config();
    let singles = generate_single_tab(&cfg).map_err(|e| e.to_string())?;
    let sessions = generate_multi_tab(&cfg, &singles).map_err(|e| e.to_string())?;
    let (train, val, test) = sessions.split_by_ratio([8, 1, 1], SPLIT_SEED, false).map_err(|e| e.to_string())?;
    let aug = AugmentationConfig { input_dim: INPUT_DIM, rng_seed: 3, ..Default::default() };
    let augmented = augment_dataset(&train, &aug, AUGMENT_EACH, AUGMENT_EACH).map_err(|e| e.to_string())?;
    Ok(Experiment { train, augmented, val, test, prep: t0.elapsed() })
}

struct Trained {
    model: Model,
    recall_at_5: f64,
    train_time: Duration,
    eval_time: Duration,
}

fn run_variant(exp: &Experiment, terms: LossTerms) -> Result<Trained, String> {
    let loss = LossConfig { terms, ..Default::default() };
    let tc = TrainConfig { epochs: EPOCHS, batch_size: 32, learning_rate: LEARNING_RATE, seed: TRAIN_SEED, ..Default::default() };
    let (trained, train_time) = timed(|| train(&exp.augmented, &exp.val, &encoder(), &loss, &tc));
    let (model, _) = trained.map_err(|e| e.to_string())?;
    let (report, eval_time) = timed(|| {
        let index = model.build_index(&exp.augmented, Default::default())?;
        evaluate(&index, &model, &exp.test, &[5], &[5], Protocol::Closed, serde_json::Value::Null)
    });
    let report = report.map_err(|e| e.to_string())?;
    let recall_at_5 = report.recall_at(5).ok_or("missing Recall@5")?;
    Ok(Trained { model, recall_at_5, train_time, eval_time })
}

fn collapse_guard(exp: &Experiment, combined: &Trained) -> Result<Outcome, String> {
    let p = combined.model.proxies.matrix();
    let rows: Vec<&[f64]> = (0..p.rows()).map(|i| p.row(i)).collect();
    let mut proxy_sim = 0.0;
    let mut count = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            proxy_sim += common::cosine(rows[i], rows[j]);
            count += 1;
        }
    }
    proxy_sim /= count as f64;

    let emb = embed_dataset(&combined.model, &exp.test).map_err(|e| e.to_string())?;
    let (mut same, mut n_same, mut disjoint, mut n_disjoint) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            let (a, la) = &emb[i];
            let (b, lb) = &emb[j];
            if la == lb {
                same += common::cosine(a, b);
                n_same += 1;
            } else if la.dot(lb) == 0 {
                disjoint += common::cosine(a, b);
                n_disjoint += 1;
            }
        }
    }
    if n_same == 0 || n_disjoint == 0 {
        return Err("test split has no same-label or no disjoint pairs".into());
    }
    let (same, disjoint) = (same / n_same as f64, disjoint / n_disjoint as f64);
    let in_time = combined.train_time <= COLLAPSE_LIMIT;
    Ok(Outcome {
        pass: proxy_sim < MAX_PROXY_SIMILARITY && same > disjoint && in_time,
        detail: format!(
            "proxy cosine {proxy_sim:.3} (< {MAX_PROXY_SIMILARITY}), same-label {same:.3} vs disjoint {disjoint:.3}, training {:.0}s",
            combined.train_time.as_secs_f64()
        ),
    })
}

fn wpf(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_wpf"))
        .args(args)
        .current_dir(cwd)
        .env_remove("WPF_RUN_ROOT")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("wpf {} failed: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn cli_run(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let steps: [&[&str]; 4] = [
        &["synth", "--classes", "6", "--per-class", "10", "--sessions", "120", "--seed", "5", "--split", "8,1,1", "--out", "data"],
        &[
            "train", "--train", "data/train", "--val", "data/val", "--run", "run", "--preset", "tiny", "--input-dim", "256",
            "--embed-dim", "8", "--epochs", "3", "--batch-size", "16", "--augment-merged", "20", "--augment-exchanged", "20",
            "--seed", "9",
        ],
        &["evaluate", "--run", "run", "--test", "data/test", "--out", "report.json"],
        &["ablate", "--train", "data/train", "--val", "data/val", "--test", "data/test", "--run", "ablation", "--preset", "tiny",
          "--input-dim", "256", "--embed-dim", "8", "--epochs", "2", "--batch-size", "16", "--augment-merged", "20",
          "--augment-exchanged", "20", "--seed", "9"],
    ];
    for args in steps {
        wpf(args, dir)?;
    }
    ["report.json", "run/log.ndjson", "run/best.ckpt", "run/index.snap", "ablation/ablation.json", "ablation/ablation.tsv"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).map(|b| (f.to_string(), b)).map_err(|e| format!("{f}: {e}")))
        .collect()
}

fn determinism() -> Result<Outcome, String> {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = cli_run(a.path())?;
    let second = cli_run(b.path())?;
    let differing: Vec<&str> = first.iter().zip(&second).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    Ok(Outcome {
        pass: differing.is_empty(),
        detail: if differing.is_empty() {
            format!("{} artefacts byte-identical across two runs", first.len())
        } else {
            format!("differs: {}", differing.join(", "))
        },
    })
}

fn failed(e: String) -> Outcome {
    Outcome { pass: false, detail: e }
}

fn main() {
    let mut all = true;

    let (r, t) = timed(|| checks::merge(MERGE_PAIRS, 101).map(|n| format!("{n} pairs exact")));
    all &= verdict(1, "merge oracle", oracle(r, t, Some(MERGE_LIMIT)));
    let (r, t) = timed(|| {
        checks::gradients(GRADIENT_INSTANCES, 102, GRADIENT_TOLERANCE)
            .map(|w| format!("{GRADIENT_INSTANCES} instances, worst relative error {w:.2e}"))
    });
    all &= verdict(2, "loss gradients", oracle(r, t, Some(GRADIENT_LIMIT)));
    let (r, t) = timed(|| checks::beta_zero(BETA_ZERO_INSTANCES, 103).map(|n| format!("{n} instances")));
    all &= verdict(3, "beta zero reduces to proxy loss", oracle(r, t, None));
    let (r, t) = timed(|| checks::pair_mining(MINING_INSTANCES, 104).map(|n| format!("{n} label matrices exact")));
    all &= verdict(4, "pair mining oracle", oracle(r, t, None));
    let (r, t) = timed(|| checks::knn(KNN_INSTANCES, 105).map(|n| format!("{n} instances exact")));
    all &= verdict(5, "k-NN oracle", oracle(r, t, None));
    let (r, t) = timed(|| checks::metrics(METRIC_INSTANCES, 106).map(|n| format!("{n} pairs exact, worked example ok")));
    all &= verdict(6, "metric oracle", oracle(r, t, None));

    let experiment = prepare();
    let combined = experiment.as_ref().map_err(Clone::clone).and_then(|e| run_variant(e, LossTerms::Combined));
    let raw = experiment.as_ref().map_err(Clone::clone).and_then(|e| {
        raw_feature_baseline(&e.train, &e.test, 40, INPUT_DIM, &[5], &[])
            .map_err(|x| x.to_string())
            .and_then(|r| r.recall_at(5).ok_or_else(|| "missing Recall@5".to_string()))
    });

    let c7 = match (&experiment, &combined) {
        (Ok(e), Ok(c)) => collapse_guard(e, c).unwrap_or_else(failed),
        (Err(e), _) | (_, Err(e)) => failed(e.clone()),
    };
    all &= verdict(7, "class-collapse guard", c7);

    let c8 = match (&experiment, &combined, &raw) {
        (Ok(e), Ok(c), Ok(raw)) => {
            let total = e.prep + c.train_time + c.eval_time;
            Outcome {
                pass: c.recall_at_5 >= MIN_RECALL_AT_5 && c.recall_at_5 - raw >= MIN_GAIN_OVER_RAW && total < PIPELINE_LIMIT,
                detail: format!(
                    "Recall@5 {:.3} (>= {MIN_RECALL_AT_5}), raw {raw:.3}, gain {:.3} (>= {MIN_GAIN_OVER_RAW}), {:.0}s",
                    c.recall_at_5,
                    c.recall_at_5 - raw,
                    total.as_secs_f64()
                ),
            }
        }
        (Err(x), _, _) | (_, Err(x), _) | (_, _, Err(x)) => failed(x.clone()),
    };
    all &= verdict(8, "end-to-end separability", c8);

    let c9 = match (&experiment, &combined, &raw) {
        (Ok(e), Ok(c), Ok(raw)) => {
            match (run_variant(e, LossTerms::ProxyOnly), run_variant(e, LossTerms::SampleOnly)) {
                (Ok(p), Ok(s)) => {
                    let (c, p, s) = (c.recall_at_5, p.recall_at_5, s.recall_at_5);
                    let close = (s - raw).abs() <= SAMPLE_ONLY_RAW_TOLERANCE;
                    Outcome {
                        pass: c > p && p > s && close,
                        detail: format!(
                            "Recall@5 combined {c:.3} > proxy-only {p:.3} > sample-only {s:.3}: {}; |sample-only - raw {raw:.3}| = {:.3} (<= {SAMPLE_ONLY_RAW_TOLERANCE}): {}",
                            c > p && p > s,
                            (s - raw).abs(),
                            close
                        ),
                    }
                }
                (Err(x), _) | (_, Err(x)) => failed(x),
            }
        }
        (Err(x), _, _) | (_, Err(x), _) | (_, _, Err(x)) => failed(x.clone()),
    };
    all &= verdict(9, "ablation ordering", c9);

    all &= verdict(10, "determinism", determinism().unwrap_or_else(failed));

    if !all {
        std::process::exit(1);
    }
}
