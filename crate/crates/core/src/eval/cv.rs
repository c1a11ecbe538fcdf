use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{alignment_report, confusion, macro_f1, top1, topk_accuracy, unsupported_classes, PairMode};
use crate::config::RunConfig;
use crate::data::{make_windows, prepare, Normalizer, Prepared, SubjectRecording, Window};
use crate::error::{Error, Result};
use crate::model::Ablations;
use crate::numerics::ParamStore;
use crate::train::{predict, train, Predictions, TrainOutcome};
use crate::video::LEVELS;

/// Subject-grouped folds: every subject lands in exactly one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<u32>>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn new(subjects: &[u32], k: usize, seed: u64) -> Result<Self> {
        let mut ids = subjects.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if k < 2 || ids.len() < k {
            return Err(Error::config("eval.folds", format!("{k} folds need at least {k} subjects, found {}", ids.len())));
        }
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut folds = vec![Vec::new(); k];
        for (i, id) in ids.into_iter().enumerate() {
            folds[i % k].push(id);
        }
        folds.iter_mut().for_each(|f| f.sort_unstable());
        Ok(FoldPlan { folds, seed })
    }

    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    pub fn fold_of(&self, subject: u32) -> Option<usize> {
        self.folds.iter().position(|f| f.contains(&subject))
    }

    /// Sample indices per fold, given the subject of each sample.
    pub fn sample_folds(&self, sample_subjects: &[u32]) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.len()];
        for (i, s) in sample_subjects.iter().enumerate() {
            if let Some(f) = self.fold_of(*s) {
                out[f].push(i);
            }
        }
        out
    }

    /// Training and validation subjects for test fold `i`. Validation
    /// subjects come from the following folds.
    pub fn split(&self, i: usize, validation: usize) -> (Vec<u32>, Vec<u32>) {
        let k = self.len();
        let pool: Vec<u32> = (1..k).flat_map(|o| self.folds[(i + o) % k].iter().copied()).collect();
        let v = validation.min(pool.len().saturating_sub(1));
        let val = pool[..v].to_vec();
        let mut tr = pool[v..].to_vec();
        tr.sort_unstable();
        (tr, val)
    }
}

/// Scores of one evaluated set of windows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub top1: f64,
    pub top3: f64,
    pub macro_f1: f64,
    /// Classes absent from the evaluated labels, left out of macro F1.
    pub unsupported_classes: Vec<usize>,
    pub cosine: f64,
    pub align_mse: f64,
    pub shuffled_cosine: f64,
    pub shuffled_mse: f64,
    /// Accuracy of the linear probe on sensor embeddings.
    pub probe_top1: f64,
    pub probe_macro_f1: f64,
    pub confusion: Vec<Vec<u64>>,
    pub probe_confusion: Vec<Vec<u64>>,
}

impl Metrics {
    pub fn from_predictions(p: &Predictions) -> Result<Self> {
        let preds: Vec<usize> = p.video_logits.iter().map(|r| top1(r)).collect();
        let probe: Vec<usize> = p.probe_logits.iter().map(|r| top1(r)).collect();
        let conf = confusion(&preds, &p.labels, LEVELS)?;
        let probe_conf = confusion(&probe, &p.labels, LEVELS)?;
        let paired = alignment_report(&p.z_v, &p.z_p, PairMode::Paired)?;
        let shuffled = alignment_report(&p.z_v, &p.z_p, PairMode::Shuffled)?;
        Ok(Metrics {
            samples: p.labels.len(),
            top1: topk_accuracy(&p.video_logits, &p.labels, 1)?,
            top3: topk_accuracy(&p.video_logits, &p.labels, 3)?,
            macro_f1: macro_f1(&conf),
            unsupported_classes: unsupported_classes(&conf),
            cosine: paired.cosine,
            align_mse: paired.mse,
            shuffled_cosine: shuffled.cosine,
            shuffled_mse: shuffled.mse,
            probe_top1: topk_accuracy(&p.probe_logits, &p.labels, 1)?,
            probe_macro_f1: macro_f1(&probe_conf),
            confusion: conf,
            probe_confusion: probe_conf,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_subjects: Vec<u32>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub metrics: Metrics,
}

/// Cross-validated scores of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ablations: Vec<String>,
    pub folds: Vec<FoldResult>,
    /// Mean and standard deviation of each scalar across folds.
    pub summary: BTreeMap<String, MeanStd>,
    /// Scores over the pooled held-out predictions of all folds.
    pub pooled: Metrics,
}

impl MetricsReport {
    pub fn top1(&self) -> f64 {
        self.pooled.top1
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("metrics.json");
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        write_confusion_csv(&self.pooled.confusion, &dir.join("confusion.csv"))
    }
}

pub fn write_confusion_csv(m: &[Vec<u64>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let header: Vec<String> = std::iter::once("true\\pred".to_string()).chain((0..m.len()).map(|c| c.to_string())).collect();
    w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
    for (i, row) in m.iter().enumerate() {
        w.write_record(std::iter::once(i.to_string()).chain(row.iter().map(u64::to_string))).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Windows of the given subjects, each subject z-scored with statistics of
/// its own recording.
pub fn windows_for(prepared: &[Prepared], subjects: &[u32], cfg: &RunConfig) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for p in prepared.iter().filter(|p| subjects.contains(&p.subject_id)) {
        let norm = Normalizer::fit(&[p])?;
        let mut w = make_windows(p, cfg.model.window, cfg.stride, cfg.model.video.segments)?;
        w.iter_mut().for_each(|w| norm.apply(w));
        out.extend(w);
    }
    Ok(out)
}

fn shuffle_labels(windows: &mut [Window], seed: u64) {
    let mut labels: Vec<u8> = windows.iter().map(|w| w.label).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    windows.iter_mut().zip(labels).for_each(|(w, l)| w.label = l);
}

/// Everything a fold needs to train and to be scored.
pub struct FoldData {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
    pub test_subjects: Vec<u32>,
}

pub fn fold_data(prepared: &[Prepared], plan: &FoldPlan, fold: usize, cfg: &RunConfig) -> Result<FoldData> {
    let (tr, va) = plan.split(fold, cfg.train.validation_subjects);
    let mut train = windows_for(prepared, &tr, cfg)?;
    let mut val = windows_for(prepared, &va, cfg)?;
    let test = windows_for(prepared, &plan.folds[fold], cfg)?;
    if cfg.shuffle_labels {
        shuffle_labels(&mut train, cfg.train.seed ^ fold as u64);
        shuffle_labels(&mut val, cfg.train.seed ^ fold as u64 ^ 0xa5a5);
    }
    if test.is_empty() || train.is_empty() {
        return Err(Error::Data(format!("fold {fold} has no training or test windows")));
    }
    Ok(FoldData { train, val, test, test_subjects: plan.folds[fold].clone() })
}

pub struct FoldModel {
    pub result: FoldResult,
    pub store: ParamStore<f32>,
    pub predictions: Predictions,
}

pub fn run_fold(prepared: &[Prepared], plan: &FoldPlan, fold: usize, cfg: &RunConfig) -> Result<FoldModel> {
    let data = fold_data(prepared, plan, fold, cfg)?;
    let mut tc = cfg.train.clone();
    tc.seed = cfg.train.seed.wrapping_add(fold as u64);
    let outcome = train(&cfg.model, &tc, &data.train, &data.val, None)?;
    if let Some(msg) = outcome.diverged {
        return Err(Error::Numeric { location: format!("fold {fold}: {msg}") });
    }
    let predictions = predict(&outcome.store, &cfg.model, &data.test, 64)?;
    let metrics = Metrics::from_predictions(&predictions)?;
    Ok(FoldModel {
        result: FoldResult { fold, test_subjects: data.test_subjects, best_epoch: outcome.best_epoch, epochs_run: outcome.history.len(), metrics },
        store: outcome.store,
        predictions,
    })
}

fn summarise(folds: &[FoldResult]) -> BTreeMap<String, MeanStd> {
    type Get = fn(&Metrics) -> f64;
    let fields: [(&str, Get); 8] = [
        ("top1", |m| m.top1),
        ("top3", |m| m.top3),
        ("macro_f1", |m| m.macro_f1),
        ("cosine", |m| m.cosine),
        ("align_mse", |m| m.align_mse),
        ("shuffled_cosine", |m| m.shuffled_cosine),
        ("probe_top1", |m| m.probe_top1),
        ("probe_macro_f1", |m| m.probe_macro_f1),
    ];
    fields.iter().map(|(k, f)| (k.to_string(), MeanStd::of(&folds.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>()))).collect()
}

fn merge(preds: Vec<Predictions>) -> Predictions {
    let mut all = Predictions::default();
    for p in preds {
        all.video_logits.extend(p.video_logits);
        all.probe_logits.extend(p.probe_logits);
        all.z_v.extend(p.z_v);
        all.z_p.extend(p.z_p);
        all.labels.extend(p.labels);
        all.subjects.extend(p.subjects);
    }
    all
}

/// Subject-grouped k-fold cross-validation. Folds run on up to
/// `cfg.parallel_folds` threads; results are ordered by fold index.
pub fn run_cv(dataset: &[SubjectRecording], cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let prepared = dataset.iter().map(prepare).collect::<Result<Vec<_>>>()?;
    let ids: Vec<u32> = prepared.iter().map(|p| p.subject_id).collect();
    let plan = FoldPlan::new(&ids, cfg.folds, cfg.fold_seed)?;
    for p in &prepared {
        if p.seconds() < cfg.model.window {
            return Err(Error::Data(format!("window of {} s exceeds the {} s recording of subject {}", cfg.model.window, p.seconds(), p.subject_id)));
        }
    }
    let threads = cfg.parallel_folds.min(plan.len()).max(1);
    let results: Vec<Result<FoldModel>> = if threads == 1 {
        (0..plan.len()).map(|f| run_fold(&prepared, &plan, f, cfg)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::config("eval.parallel_folds", e.to_string()))?;
        pool.install(|| {
            use rayon::prelude::*;
            (0..plan.len()).into_par_iter().map(|f| run_fold(&prepared, &plan, f, cfg)).collect()
        })
    };
    let mut folds = Vec::new();
    let mut preds = Vec::new();
    for r in results {
        let m = r?;
        folds.push(m.result);
        preds.push(m.predictions);
    }
    let pooled = Metrics::from_predictions(&merge(preds))?;
    Ok(MetricsReport { ablations: names(cfg.model.ablations), summary: summarise(&folds), folds, pooled })
}

fn names(a: Ablations) -> Vec<String> {
    a.names().into_iter().map(str::to_string).collect()
}

/// Prepared recordings and their windows, every subject included.
pub fn dataset_windows(dataset: &[SubjectRecording], cfg: &RunConfig) -> Result<Vec<Window>> {
    let prepared = dataset.iter().map(prepare).collect::<Result<Vec<_>>>()?;
    let ids: Vec<u32> = prepared.iter().map(|p| p.subject_id).collect();
    windows_for(&prepared, &ids, cfg)
}

/// Scores of a stored model on `windows`, as a report with no folds.
pub fn evaluate(store: &ParamStore<f32>, cfg: &RunConfig, windows: &[Window]) -> Result<MetricsReport> {
    let pooled = Metrics::from_predictions(&predict(store, &cfg.model, windows, 64)?)?;
    Ok(MetricsReport { ablations: names(cfg.model.ablations), folds: Vec::new(), summary: BTreeMap::new(), pooled })
}

pub struct Fit {
    pub outcome: TrainOutcome,
    /// In-sample scores over every window; absent when training diverged.
    pub report: Option<MetricsReport>,
}

/// Trains one model on the whole dataset. The highest-numbered
/// `validation_subjects` subjects drive early stopping.
pub fn fit(dataset: &[SubjectRecording], cfg: &RunConfig, log: Option<&mut dyn Write>) -> Result<Fit> {
    cfg.validate()?;
    let prepared = dataset.iter().map(prepare).collect::<Result<Vec<_>>>()?;
    let mut ids: Vec<u32> = prepared.iter().map(|p| p.subject_id).collect();
    ids.sort_unstable();
    let held = if ids.len() > cfg.train.validation_subjects { cfg.train.validation_subjects } else { 0 };
    let (tr, va) = ids.split_at(ids.len() - held);
    let mut train_w = windows_for(&prepared, tr, cfg)?;
    let mut val_w = windows_for(&prepared, va, cfg)?;
    if cfg.shuffle_labels {
        shuffle_labels(&mut train_w, cfg.train.seed);
        shuffle_labels(&mut val_w, cfg.train.seed ^ 0xa5a5);
    }
    let outcome = train(&cfg.model, &cfg.train, &train_w, &val_w, log)?;
    let report = match outcome.diverged {
        Some(_) => None,
        None => {
            train_w.extend(val_w);
            Some(evaluate(&outcome.store, cfg, &train_w)?)
        }
    };
    Ok(Fit { outcome, report })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub window: usize,
    /// Difference window `2k + 1`.
    pub kernel: usize,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

/// Config for one grid cell, or the reason the cell cannot run.
pub fn sweep_cell_config(base: &RunConfig, window: usize, kernel: usize) -> Result<RunConfig> {
    if kernel % 2 == 0 {
        return Err(Error::config("sweep.kernel", format!("difference window {kernel} must be odd")));
    }
    if kernel > window {
        return Err(Error::config("sweep.kernel", format!("difference window {kernel} exceeds the window of {window} steps")));
    }
    let mut cfg = base.clone();
    cfg.model.window = window;
    cfg.model.dae.k = (kernel - 1) / 2;
    cfg.validate()?;
    Ok(cfg)
}

/// One cross-validation per (window, kernel) cell; a failing cell is
/// recorded and the rest of the grid still runs.
pub fn sweep(dataset: &[SubjectRecording], windows: &[usize], kernels: &[usize], base: &RunConfig) -> Result<Vec<SweepCell>> {
    if windows.is_empty() || kernels.is_empty() {
        return Err(Error::config("sweep", "window and kernel grids must be non-empty"));
    }
    let mut cells = Vec::with_capacity(windows.len() * kernels.len());
    for &window in windows {
        for &kernel in kernels {
            let outcome = sweep_cell_config(base, window, kernel).and_then(|cfg| run_cv(dataset, &cfg));
            let (report, error) = match outcome {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            cells.push(SweepCell { window, kernel, report, error });
        }
    }
    Ok(cells)
}

/// `window,kernel,top1,top3,macro_f1`; failed cells leave the scores empty.
pub fn write_sweep_csv(cells: &[SweepCell], out: &mut dyn Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::io("sweep csv", e.into());
    w.write_record(["window", "kernel", "top1", "top3", "macro_f1"]).map_err(err)?;
    for c in cells {
        let scores = match &c.report {
            Some(r) => [r.pooled.top1, r.pooled.top3, r.pooled.macro_f1].map(|v| format!("{v:.4}")),
            None => [String::new(), String::new(), String::new()],
        };
        w.write_record([c.window.to_string(), c.kernel.to_string(), scores[0].clone(), scores[1].clone(), scores[2].clone()]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("sweep csv", e))
}
