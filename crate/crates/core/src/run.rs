//! End-to-end runs driven by a [`RunConfig`]. Every run writes only inside
//! its output directory and starts by writing a `config.toml` snapshot.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{load_dataset, make_synth_benchmark, save_dataset, GzslDataset, SynthBenchConfig};
use crate::diagnostics::{gradient_report, LossCheck};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_gzsl, export_features, synthesize_features, sweep_synth_count, write_sweep_csv, Component, EvalOptions,
    GzslMetrics, LabeledFeatures, SweepRow,
};
use crate::gradcheck::GRAD_CHECK_TOLERANCE;
use crate::rng::Seeds;
use crate::training::{train, Checkpoint, History, Selected, TrainEvent, TrainOutcome, TrainSession, Trainer, Variant};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
const BEST_INFO: &str = "best.json";
const HISTORY_JSON: &str = "history.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn write_snapshot(cfg: &RunConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_text(&dir.join(CONFIG_SNAPSHOT), &cfg.to_toml()?)
}

/// The configured dataset: a manifest on disk, or the synthetic benchmark.
pub fn load_run_dataset(cfg: &RunConfig) -> Result<GzslDataset> {
    let ds = match &cfg.data.manifest {
        Some(path) => load_dataset(path)?,
        None => make_synth_benchmark(&cfg.synth)?,
    };
    if cfg.data.standardize {
        ds.standardized()
    } else {
        Ok(ds)
    }
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub seed: u64,
    pub best_epoch: usize,
    pub validation_score: Option<f64>,
    pub component: Component,
    pub n_per_class: usize,
    pub test: GzslMetrics,
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct BestInfo {
    epoch: usize,
    score: Option<f64>,
}

/// Test-split evaluation options for a variant: the variant's own component
/// unless it is the full generator pipeline.
fn eval_options(cfg: &RunConfig, variant: Variant) -> EvalOptions {
    EvalOptions {
        component: variant.eval_component(),
        ..cfg.eval.clone()
    }
}

fn restore_session(cfg: &RunConfig, variant: Variant, ds: &GzslDataset, dir: &Path) -> Result<Option<TrainSession>> {
    let last_path = dir.join(LAST_CHECKPOINT);
    if !last_path.exists() {
        return Ok(None);
    }
    let ckpt = Checkpoint::load(&last_path)?;
    ckpt.check_compatible(ds)?;
    if ckpt.plan != cfg.plan_for(variant) || *ckpt.config() != cfg.gdan_config(ds.feat_dim(), ds.attr_dim())? {
        return Err(Error::Config(format!(
            "{} holds a run with a different configuration",
            dir.display()
        )));
    }
    let mut history: History = match dir.join(HISTORY_JSON) {
        p if p.exists() => read_json(&p)?,
        _ => History::default(),
    };
    history.truncate_to(&ckpt);
    let best = match (dir.join(BEST_CHECKPOINT), dir.join(BEST_INFO)) {
        (c, i) if c.exists() && i.exists() => {
            let info: BestInfo = read_json(&i)?;
            Some(Selected {
                checkpoint: Checkpoint::load(&c)?,
                epoch: info.epoch,
                score: info.score,
            })
        }
        _ => None,
    };
    log::info!("resuming {variant} from epoch {} in {}", ckpt.epoch, dir.display());
    Ok(Some(TrainSession {
        trainer: Trainer::from_checkpoint(&ckpt)?,
        history,
        best,
    }))
}

fn persist(dir: &Path, event: &TrainEvent<'_>) -> Result<()> {
    match event {
        TrainEvent::Pretrained { checkpoint, history } => {
            write_json(&dir.join(HISTORY_JSON), history)?;
            checkpoint.save(&dir.join(LAST_CHECKPOINT))
        }
        TrainEvent::Scored {
            checkpoint,
            history,
            best,
            is_best,
        } => {
            if *is_best {
                best.checkpoint.save(&dir.join(BEST_CHECKPOINT))?;
                write_json(
                    &dir.join(BEST_INFO),
                    &BestInfo {
                        epoch: best.epoch,
                        score: best.score,
                    },
                )?;
            }
            write_json(&dir.join(HISTORY_JSON), history)?;
            // Written last: a run resumes from whatever `last.ckpt` says.
            checkpoint.save(&dir.join(LAST_CHECKPOINT))
        }
    }
}

/// Trains `variant` into `dir` and evaluates the selected checkpoint on the
/// test split. With `resume`, continues from `dir/last.ckpt` when present.
/// `hook` runs after each event has been persisted; an error from it stops
/// training, which is how interruption is simulated in tests.
pub fn train_variant(
    cfg: &RunConfig,
    ds: &GzslDataset,
    variant: Variant,
    dir: &Path,
    resume: bool,
    hook: &mut dyn FnMut(&TrainEvent<'_>) -> Result<()>,
) -> Result<(TrainReport, TrainOutcome)> {
    let cfg = RunConfig {
        train: crate::config::TrainSection {
            variant,
            ..cfg.train.clone()
        },
        output_dir: dir.to_path_buf(),
        ..cfg.clone()
    };
    write_snapshot(&cfg, dir)?;
    let session = match resume {
        true => restore_session(&cfg, variant, ds, dir)?,
        false => None,
    };
    let session = match session {
        Some(s) => s,
        None => TrainSession::fresh(Trainer::new(cfg.gdan_config(ds.feat_dim(), ds.attr_dim())?, cfg.plan())?),
    };
    let result = train(session, ds, &mut |event| {
        persist(dir, &event)?;
        hook(&event)
    });
    let outcome = match result {
        Err(Error::Diverged {
            epoch,
            step,
            detail,
            last_good,
        }) => {
            if let Some(ckpt) = &last_good {
                ckpt.save(&dir.join("last_good.ckpt"))?;
            }
            return Err(Error::Diverged {
                epoch,
                step,
                detail,
                last_good,
            });
        }
        other => other?,
    };
    outcome.best.checkpoint.save(&dir.join(BEST_CHECKPOINT))?;
    outcome.last.save(&dir.join(LAST_CHECKPOINT))?;
    outcome.history.write_steps_csv(&dir.join("history.csv"))?;
    outcome.history.write_pretrain_csv(&dir.join("pretrain.csv"))?;
    write_json(&dir.join(HISTORY_JSON), &outcome.history)?;

    let opts = eval_options(&cfg, variant);
    let mut rng = Seeds::new(cfg.seed).stream("eval");
    let test = evaluate_gzsl(&outcome.best.checkpoint.model, ds, &opts, cfg.train.merge_train_val, &mut rng)?;
    let report = TrainReport {
        variant,
        seed: cfg.seed,
        best_epoch: outcome.best.epoch,
        validation_score: outcome.best.score,
        component: opts.component,
        n_per_class: opts.n_per_class,
        test,
        config: cfg.snapshot()?,
    };
    write_json(&dir.join(METRICS_FILE), &report)?;
    log::info!(
        "{variant}: U {:.4} S {:.4} H {:.4} (best epoch {})",
        report.test.acc_unseen,
        report.test.acc_seen,
        report.test.harmonic,
        report.best_epoch
    );
    Ok((report, outcome))
}

/// The `train` command: the configured variant into `output_dir`.
pub fn run_train(cfg: &RunConfig, resume: bool) -> Result<TrainReport> {
    let ds = load_run_dataset(cfg)?;
    let (report, _) = train_variant(cfg, &ds, cfg.train.variant, &cfg.output_dir, resume, &mut |_| Ok(()))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub component: Component,
    pub n_per_class: usize,
    pub metrics: GzslMetrics,
}

/// The `eval` command: test-split metrics of a saved checkpoint.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, component: Option<Component>) -> Result<EvalReport> {
    let ds = load_run_dataset(cfg)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.check_compatible(&ds)?;
    write_snapshot(cfg, &cfg.output_dir)?;
    let opts = EvalOptions {
        component: component.unwrap_or(cfg.eval.component),
        ..cfg.eval.clone()
    };
    let mut rng = Seeds::new(cfg.seed).stream("eval");
    let metrics = evaluate_gzsl(&ckpt.model, &ds, &opts, ckpt.plan.merge_train_val, &mut rng)?;
    let report = EvalReport {
        seed: cfg.seed,
        component: opts.component,
        n_per_class: opts.n_per_class,
        metrics,
    };
    write_json(&cfg.output_dir.join("eval_metrics.json"), &report)?;
    Ok(report)
}

/// One row of the component analysis table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: String,
    pub variant: Variant,
    pub component: Component,
    #[serde(rename = "U")]
    pub acc_unseen: f64,
    #[serde(rename = "S")]
    pub acc_seen: f64,
    #[serde(rename = "H")]
    pub harmonic: f64,
}

/// Table rows in publication order: (label, trained variant, readout).
pub const ABLATION_ROWS: [(&str, Variant, Component); 8] = [
    ("CVAE", Variant::CvaeOnly, Component::Generator),
    ("Discriminator", Variant::DiscriminatorOnly, Component::Discriminator),
    ("Regressor", Variant::RegressorOnly, Component::Regressor),
    ("Discriminator-GDAN", Variant::FullGdan, Component::Discriminator),
    ("Regressor-GDAN", Variant::FullGdan, Component::Regressor),
    ("GDAN w/o Disc", Variant::GdanNoDisc, Component::Generator),
    ("GDAN w/o Reg", Variant::GdanNoReg, Component::Generator),
    ("GDAN", Variant::FullGdan, Component::Generator),
];

/// Trains a variant into `dir` unless a finished report for the same
/// configuration is already there.
fn trained_variant(cfg: &RunConfig, ds: &GzslDataset, variant: Variant, dir: &Path) -> Result<TrainReport> {
    let metrics = dir.join(METRICS_FILE);
    if metrics.exists() {
        let report: TrainReport = read_json(&metrics)?;
        let expected = RunConfig {
            train: crate::config::TrainSection {
                variant,
                ..cfg.train.clone()
            },
            ..cfg.clone()
        }
        .snapshot()?;
        if report.config == expected {
            log::info!("{variant}: reusing finished run in {}", dir.display());
            return Ok(report);
        }
    }
    Ok(train_variant(cfg, ds, variant, dir, true, &mut |_| Ok(()))?.0)
}

/// The `ablate` command: trains all six variants under `output_dir/<variant>`
/// and writes `ablation.csv`. Finished variants are reused and unfinished ones
/// resume from their last checkpoint.
pub fn run_ablation(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let ds = load_run_dataset(cfg)?;
    write_snapshot(cfg, &cfg.output_dir)?;
    let mut reports = Vec::new();
    for variant in Variant::ALL {
        let dir = cfg.output_dir.join(variant.name());
        reports.push((variant, trained_variant(cfg, &ds, variant, &dir)?));
    }
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for (label, variant, component) in ABLATION_ROWS {
        let (_, report) = reports.iter().find(|(v, _)| *v == variant).expect("every variant trained");
        let metrics = if report.component == component {
            report.test.clone()
        } else {
            let ckpt = Checkpoint::load(&cfg.output_dir.join(variant.name()).join(BEST_CHECKPOINT))?;
            let opts = EvalOptions {
                component,
                ..cfg.eval.clone()
            };
            let mut rng = Seeds::new(cfg.seed).stream("eval");
            evaluate_gzsl(&ckpt.model, &ds, &opts, cfg.train.merge_train_val, &mut rng)?
        };
        rows.push(AblationRow {
            row: label.to_string(),
            variant,
            component,
            acc_unseen: metrics.acc_unseen,
            acc_seen: metrics.acc_seen,
            harmonic: metrics.harmonic,
        });
    }
    let path = cfg.output_dir.join("ablation.csv");
    let tmp = path.with_extension("tmp");
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// The `sweep` command: unseen-feature count sweep for a saved checkpoint.
pub fn run_sweep(cfg: &RunConfig, checkpoint: &Path, counts: &[usize]) -> Result<Vec<SweepRow>> {
    let ds = load_run_dataset(cfg)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.check_compatible(&ds)?;
    write_snapshot(cfg, &cfg.output_dir)?;
    let rows = sweep_synth_count(
        &ckpt.model,
        &ds,
        counts,
        ckpt.plan.merge_train_val,
        &Seeds::new(cfg.seed).stream("sweep"),
    )?;
    write_sweep_csv(&cfg.output_dir.join("sweep.csv"), &rows)?;
    Ok(rows)
}

/// The `export` command: real unseen test features next to `n_per_class`
/// synthetic features per unseen class. Returns the CSV path.
pub fn run_export(cfg: &RunConfig, checkpoint: &Path, n_per_class: usize) -> Result<PathBuf> {
    let ds = load_run_dataset(cfg)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.check_compatible(&ds)?;
    write_snapshot(cfg, &cfg.output_dir)?;
    let (features, labels) = ds.rows(&ds.splits.test_unseen_idx)?;
    let real = LabeledFeatures { features, labels };
    let mut rng = Seeds::new(cfg.seed).stream("export");
    let synth = synthesize_features(&ckpt.model, &ds.splits.unseen_classes, &ds.attributes, n_per_class, &mut rng)?;
    let path = cfg.output_dir.join("features.csv");
    export_features(&real, &synth, &path)?;
    Ok(path)
}

/// Benchmark settings for `gen-data --seed s`: attribute map seeded with `s`,
/// samples with `s + 1`. Seed 1 reproduces the reference benchmark.
pub fn synth_config_for_seed(base: &SynthBenchConfig, seed: u64) -> SynthBenchConfig {
    SynthBenchConfig {
        attr_map_seed: seed,
        sample_seed: seed.wrapping_add(1),
        ..base.clone()
    }
}

/// The `gen-data` command: writes the synthetic benchmark under
/// `output_dir/data` and returns the manifest path.
pub fn run_gen_data(cfg: &RunConfig, seed: Option<u64>) -> Result<PathBuf> {
    let synth = match seed {
        Some(s) => synth_config_for_seed(&cfg.synth, s),
        None => cfg.synth.clone(),
    };
    let snapshot = RunConfig {
        synth: synth.clone(),
        ..cfg.clone()
    };
    write_snapshot(&snapshot, &cfg.output_dir)?;
    let ds = make_synth_benchmark(&synth)?;
    let dir = cfg.output_dir.join("data");
    create_dir(&dir)?;
    save_dataset(&ds, &dir)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckSummary {
    pub seeds: u64,
    pub tolerance: f64,
    pub passed: bool,
    pub losses: Vec<LossCheck>,
}

/// The `gradcheck` command: worst relative error per loss over seeds
/// `0..seeds`, written to `gradcheck.json`.
pub fn run_gradcheck(cfg: &RunConfig, seeds: u64) -> Result<GradCheckSummary> {
    write_snapshot(cfg, &cfg.output_dir)?;
    let losses = gradient_report(0..seeds)?;
    let summary = GradCheckSummary {
        seeds,
        tolerance: GRAD_CHECK_TOLERANCE,
        passed: losses.iter().all(|c| c.max_rel_error < GRAD_CHECK_TOLERANCE),
        losses,
    };
    write_json(&cfg.output_dir.join("gradcheck.json"), &summary)?;
    Ok(summary)
}
