//! The train / eval / predict / gradcheck / inspect workflows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;
use ynet_core::data::{
    index_dataset, preprocess, BatchConfig, BatchIter, DatasetIndex, Decoder, Split,
};
use ynet_core::gradcheck::{self, Corruption, GradcheckReport};
use ynet_core::layers::{softmax_cross_entropy, Mode};
use ynet_core::metrics::{
    compute_report, write_confusion_csv, write_embeddings, write_history_csv, write_report_csv, write_scores_csv,
    ConfusionMatrix, HistoryRow, MetricsReport, Prediction,
};
use ynet_core::model::{load_resume, save_resume, ArchConfig, Attention, Checkpoint, YNetModel};
use ynet_core::optim::Adam;
use ynet_core::rng::stream_key;
use ynet_core::{Error, Rng, Tensor};

use crate::config::RunConfig;
use crate::decode::ImageDecoder;
use crate::error::CliError;

const INIT_STREAM: u64 = 0x696e_6974;
const DROPOUT_STREAM: u64 = 0x6472_6f70;

pub const HISTORY_FILE: &str = "history.csv";
pub const BEST_CHECKPOINT: &str = "best.ync";
pub const FINAL_CHECKPOINT: &str = "final.ync";
pub const RESUME_FILE: &str = "resume.ynr";
pub const MANIFEST_FILE: &str = "manifest.json";

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

/// Writes JSON through a temporary sibling and renames it into place.
fn write_json_atomically(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let tmp = path.with_extension("json.tmp");
    let body = serde_json::to_string_pretty(value).expect("manifest serializes");
    fs::write(&tmp, body + "\n").map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn attention_for(cfg: &RunConfig) -> Attention {
    if cfg.fusam_bypass {
        Attention::Constant(1.0)
    } else {
        Attention::Learned
    }
}

/// Indexes the dataset and checks the class count against the config.
pub fn load_index(cfg: &RunConfig) -> Result<DatasetIndex, CliError> {
    let index = index_dataset(cfg.data_root()?, cfg.split_seed)?;
    if let Some(k) = cfg.num_classes {
        if k != index.num_classes() {
            return Err(CliError::Config(format!(
                "num_classes is {k} but the dataset has {} classes",
                index.num_classes()
            )));
        }
    }
    Ok(index)
}

/// Result of running the model over one split in eval mode.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub split: Split,
    pub loss: f64,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<Prediction>,
    /// `N x 2*C4` pooled features, when collected.
    pub embeddings: Option<Tensor>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        100.0 * self.confusion.trace() as f64 / self.confusion.total().max(1) as f64
    }
}

pub fn evaluate(
    model: &YNetModel,
    index: &DatasetIndex,
    decoder: &dyn Decoder,
    split: Split,
    batch_size: usize,
    collect_embeddings: bool,
) -> Result<Evaluation, CliError> {
    let config = BatchConfig {
        batch_size,
        image_size: model.arch().input_size,
        seed: 0,
        shuffle: false,
        augment: None,
    };
    let mut confusion = ConfusionMatrix::new(index.classes.clone());
    let mut predictions = Vec::new();
    let mut embeddings = Vec::new();
    let mut loss_sum = 0.0;
    let mut rng = Rng::new(0, 0);
    for batch in BatchIter::new(index, decoder, split, 0, config)? {
        let batch = batch?;
        let trace = model.forward(&batch.images, Mode::Eval, &mut rng)?;
        let (loss, _) = softmax_cross_entropy(&trace.logits, &batch.labels)?;
        loss_sum += loss * batch.indices.len() as f64;
        let k = index.num_classes();
        for ((row, &i), label) in trace.probs.data().chunks(k).zip(&batch.indices).zip(batch.label_indices()) {
            let predicted = argmax(row);
            confusion.accumulate(label, predicted)?;
            predictions.push(Prediction {
                sample_id: index.samples[i].id_hex(),
                label,
                predicted,
                probs: row.to_vec(),
            });
        }
        if collect_embeddings {
            embeddings.push(trace.embedding);
        }
    }
    let n = predictions.len();
    let embeddings = if collect_embeddings {
        let width = embeddings[0].shape()[1];
        let data: Vec<f64> = embeddings.into_iter().flat_map(Tensor::into_data).collect();
        Some(Tensor::new(vec![n, width], data)?)
    } else {
        None
    };
    Ok(Evaluation {
        split,
        loss: loss_sum / n as f64,
        confusion,
        predictions,
        embeddings,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Progress {
    next_epoch: usize,
    seed: u64,
    history: Vec<HistoryRow>,
    best_epoch: Option<usize>,
    best_test_acc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassCount {
    pub name: String,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetFingerprint {
    pub root: PathBuf,
    pub total: usize,
    pub classes: Vec<ClassCount>,
}

impl DatasetFingerprint {
    pub fn of(index: &DatasetIndex) -> Self {
        Self {
            root: index.root.clone(),
            total: index.samples.len(),
            classes: index
                .classes
                .iter()
                .zip(index.class_counts())
                .map(|(name, (train, test))| ClassCount {
                    name: name.clone(),
                    train,
                    test,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FinalMetrics {
    pub split: Split,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub loss: f64,
}

impl FinalMetrics {
    fn new(eval: &Evaluation, report: &MetricsReport) -> Self {
        Self {
            split: eval.split,
            accuracy: report.accuracy,
            macro_precision: report.macro_precision,
            macro_recall: report.macro_recall,
            macro_f1: report.macro_f1,
            loss: eval.loss,
        }
    }
}

/// Everything needed to rerun a training job.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub artifact_version: &'static str,
    pub command: &'static str,
    pub config: RunConfig,
    pub hyperparameters: serde_json::Value,
    pub seed: u64,
    pub arch: ArchConfig,
    pub attention: Attention,
    pub dataset: DatasetFingerprint,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub resumed_from: Option<PathBuf>,
    pub best_epoch: Option<usize>,
    pub best_test_acc: f64,
    pub final_metrics: FinalMetrics,
    pub artifacts: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub history: Vec<HistoryRow>,
    pub best_epoch: Option<usize>,
    pub best_test_acc: f64,
    pub final_report: MetricsReport,
}

/// Trains `cfg.repeat` independent runs (seeds `seed`, `seed + 1`, ...).
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<Vec<TrainOutcome>, CliError> {
    if cfg.repeat == 1 {
        return Ok(vec![train_once(cfg, &cfg.out_dir, cfg.seed, resume)?]);
    }
    if resume.is_some() {
        return Err(CliError::Config("--resume applies to a single run, not to --repeat".into()));
    }
    let mut outcomes = Vec::new();
    for r in 0..cfg.repeat {
        let dir = cfg.out_dir.join(format!("repeat_{r}"));
        outcomes.push(train_once(cfg, &dir, cfg.seed + r as u64, None)?);
    }
    write_repeat_summary(&cfg.out_dir.join("repeats.csv"), &outcomes)?;
    Ok(outcomes)
}

fn write_repeat_summary(path: &Path, outcomes: &[TrainOutcome]) -> Result<(), CliError> {
    let mut s = String::from("repeat,seed,best_epoch,best_test_acc,final_test_acc,final_macro_f1\n");
    for (r, o) in outcomes.iter().enumerate() {
        let best = o.best_epoch.map(|e| e.to_string()).unwrap_or_default();
        writeln!(
            s,
            "{r},{},{best},{},{},{}",
            o.seed, o.best_test_acc, o.final_report.accuracy, o.final_report.macro_f1
        )
        .expect("write to string");
    }
    let accs: Vec<f64> = outcomes.iter().map(|o| o.final_report.accuracy).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (accs.len() - 1).max(1) as f64;
    println!("final test accuracy over {} repeats: {mean:.2} +/- {:.2}", accs.len(), var.sqrt());
    fs::write(path, s).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn train_once(cfg: &RunConfig, out_dir: &Path, seed: u64, resume: Option<&Path>) -> Result<TrainOutcome, CliError> {
    let started = now_unix();
    let decoder = ImageDecoder;
    let index = load_index(cfg)?;
    let arch = cfg.arch(index.num_classes());
    let schedule = cfg.schedule()?;
    create_dir(out_dir)?;
    index.write_split_manifest(out_dir.join("split.csv"))?;

    let (mut model, mut adam, mut progress) = match resume {
        Some(path) => {
            let state = load_resume(path, cfg.lr)?;
            if state.model.arch() != &arch {
                return Err(Error::ArchitectureMismatch(format!(
                    "resume file {} was written for a different architecture",
                    path.display()
                ))
                .into());
            }
            if state.class_names != index.classes {
                return Err(Error::ArchitectureMismatch("resume file was written for different classes".into()).into());
            }
            let progress: Progress = serde_json::from_value(state.meta)
                .map_err(|e| Error::Format(format!("{}: bad progress record: {e}", path.display())))?;
            if progress.seed != seed {
                return Err(CliError::Config(format!(
                    "resume file was written with seed {}, config has {seed}",
                    progress.seed
                )));
            }
            if state.model.attention != attention_for(cfg) {
                return Err(CliError::Config("fusam_bypass differs from the resumed run".into()));
            }
            (state.model, state.adam, progress)
        }
        None => {
            let mut model = YNetModel::new(arch.clone(), &mut Rng::new(seed, INIT_STREAM))?;
            model.attention = attention_for(cfg);
            let progress = Progress {
                next_epoch: 0,
                seed,
                history: Vec::new(),
                best_epoch: None,
                best_test_acc: f64::NEG_INFINITY,
            };
            (model, Adam::new(cfg.lr), progress)
        }
    };

    let history_path = out_dir.join(HISTORY_FILE);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let resume_path = out_dir.join(RESUME_FILE);
    let batch_config = BatchConfig {
        batch_size: cfg.batch_size,
        image_size: arch.input_size,
        seed,
        shuffle: true,
        augment: cfg.augment_policy(),
    };
    for epoch in progress.next_epoch..cfg.epochs {
        let lr = schedule.lr_at(epoch as f64)?;
        adam.lr = lr;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let batches = BatchIter::new(&index, &decoder, Split::Train, epoch, batch_config.clone())?;
        for (b, batch) in batches.enumerate() {
            let batch = batch?;
            let mut rng = Rng::new(seed, stream_key(&[DROPOUT_STREAM, epoch as u64, b as u64]));
            let step = model.train_step(&mut adam, &batch.images, &batch.labels, &mut rng);
            let out = match step {
                Err(Error::NonFinite(what)) => {
                    let paths: Vec<&str> = batch.indices.iter().map(|&i| index.samples[i].path.as_str()).collect();
                    return Err(Error::NonFinite(format!(
                        "{what} at epoch {epoch}, batch {b}; samples: {}",
                        paths.join(", ")
                    ))
                    .into());
                }
                other => other?,
            };
            let k = index.num_classes();
            correct += out
                .probs
                .data()
                .chunks(k)
                .zip(batch.label_indices())
                .filter(|(row, l)| argmax(row) == *l)
                .count();
            loss_sum += out.loss * batch.indices.len() as f64;
            seen += batch.indices.len();
        }
        let test = evaluate(&model, &index, &decoder, Split::Test, cfg.batch_size, false)?;
        let row = HistoryRow {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: 100.0 * correct as f64 / seen as f64,
            test_loss: test.loss,
            test_acc: test.accuracy(),
            lr,
        };
        println!(
            "epoch {:>3}/{} lr {:.3e} train loss {:.4} acc {:.2} | test loss {:.4} acc {:.2}",
            epoch + 1,
            cfg.epochs,
            lr,
            row.train_loss,
            row.train_acc,
            row.test_loss,
            row.test_acc
        );
        if row.test_acc > progress.best_test_acc {
            progress.best_test_acc = row.test_acc;
            progress.best_epoch = Some(epoch);
            model.save_checkpoint(&best_path, &index.classes)?;
        }
        progress.history.push(row);
        progress.next_epoch = epoch + 1;
        write_history_csv(&history_path, &progress.history)?;
        let meta = serde_json::to_value(&progress).expect("progress serializes");
        save_resume(&resume_path, &model, &index.classes, &adam, &meta)?;
    }

    let final_path = cfg.checkpoint.clone().unwrap_or_else(|| out_dir.join(FINAL_CHECKPOINT));
    model.save_checkpoint(&final_path, &index.classes)?;
    let eval = evaluate(&model, &index, &decoder, Split::Test, cfg.batch_size, false)?;
    let report = compute_report(&eval.confusion)?;
    write_report_csv(out_dir.join("report.csv"), &report)?;
    write_confusion_csv(out_dir.join("confusion.csv"), &eval.confusion)?;

    let artifacts = BTreeMap::from([
        ("history".to_string(), history_path),
        ("best_checkpoint".to_string(), best_path),
        ("final_checkpoint".to_string(), final_path),
        ("resume".to_string(), resume_path),
        ("report".to_string(), out_dir.join("report.csv")),
        ("confusion".to_string(), out_dir.join("confusion.csv")),
        ("split".to_string(), out_dir.join("split.csv")),
    ]);
    let manifest = RunManifest {
        artifact_version: env!("CARGO_PKG_VERSION"),
        command: "train",
        config: cfg.clone(),
        hyperparameters: cfg.hyperparameters(),
        seed,
        arch,
        attention: model.attention,
        dataset: DatasetFingerprint::of(&index),
        started_unix: started,
        finished_unix: now_unix(),
        resumed_from: resume.map(Path::to_path_buf),
        best_epoch: progress.best_epoch,
        best_test_acc: progress.best_test_acc,
        final_metrics: FinalMetrics::new(&eval, &report),
        artifacts,
    };
    write_json_atomically(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(TrainOutcome {
        out_dir: out_dir.to_path_buf(),
        seed,
        history: progress.history,
        best_epoch: progress.best_epoch,
        best_test_acc: progress.best_test_acc,
        final_report: report,
    })
}

fn require_checkpoint(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Config("no checkpoint: pass --checkpoint PATH".into()))
}

/// Loads the checkpoint named in the config, requiring its classes to match
/// the dataset's.
fn load_for_dataset(cfg: &RunConfig, index: &DatasetIndex) -> Result<Checkpoint, CliError> {
    let path = require_checkpoint(cfg)?;
    let ckpt = Checkpoint::load(path)?;
    let k = ckpt.model.arch().num_classes;
    if k != index.num_classes() || (!ckpt.class_names.is_empty() && ckpt.class_names != index.classes) {
        return Err(Error::ArchitectureMismatch(format!(
            "checkpoint {} has {k} classes {:?}, dataset has {} classes {:?}",
            path.display(),
            ckpt.class_names,
            index.num_classes(),
            index.classes
        ))
        .into());
    }
    Ok(ckpt)
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub out_dir: PathBuf,
    pub report: MetricsReport,
    pub evaluation: Evaluation,
}

/// Scores a checkpoint on one split and writes report, confusion, scores
/// and embeddings into `out_dir/eval_<split>`.
pub fn eval(cfg: &RunConfig) -> Result<EvalOutcome, CliError> {
    let index = load_index(cfg)?;
    let mut ckpt = load_for_dataset(cfg, &index)?;
    if cfg.fusam_bypass {
        ckpt.model.attention = Attention::Constant(1.0);
    }
    let evaluation = evaluate(&ckpt.model, &index, &ImageDecoder, cfg.split, cfg.batch_size, true)?;
    let report = compute_report(&evaluation.confusion)?;
    let dir = cfg.out_dir.join(format!("eval_{}", cfg.split));
    create_dir(&dir)?;
    write_report_csv(dir.join("report.csv"), &report)?;
    write_confusion_csv(dir.join("confusion.csv"), &evaluation.confusion)?;
    write_scores_csv(dir.join("scores.csv"), &index.classes, &evaluation.predictions)?;
    write_embeddings(
        dir.join("embeddings.ytf"),
        dir.join("embeddings.csv"),
        evaluation.embeddings.as_ref().expect("collected"),
        &evaluation.predictions,
    )?;
    let summary = json!({
        "split": cfg.split,
        "checkpoint": require_checkpoint(cfg)?,
        "samples": report.total,
        "loss": evaluation.loss,
        "accuracy": report.accuracy,
        "macro_precision": report.macro_precision,
        "macro_recall": report.macro_recall,
        "macro_f1": report.macro_f1,
        "classes": report.classes,
    });
    write_json_atomically(&dir.join("summary.json"), &summary)?;
    println!(
        "split={} samples {} loss {:.4} accuracy {:.2} precision {:.2} recall {:.2} f1 {:.2}",
        cfg.split, report.total, evaluation.loss, report.accuracy, report.macro_precision, report.macro_recall, report.macro_f1
    );
    Ok(EvalOutcome {
        out_dir: dir,
        report,
        evaluation,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrediction {
    pub path: PathBuf,
    pub class: String,
    pub probability: f64,
    pub probs: Vec<f64>,
}

/// Top-1 class per image, in input order.
pub fn predict(cfg: &RunConfig, images: &[PathBuf], probs_csv: Option<&Path>) -> Result<Vec<ImagePrediction>, CliError> {
    if images.is_empty() {
        return Err(CliError::Config("no images given".into()));
    }
    let ckpt = Checkpoint::load(require_checkpoint(cfg)?)?;
    let size = ckpt.model.arch().input_size;
    let k = ckpt.model.arch().num_classes;
    let names: Vec<String> = if ckpt.class_names.len() == k {
        ckpt.class_names.clone()
    } else {
        (0..k).map(|i| format!("class_{i}")).collect()
    };
    let mut out = Vec::new();
    for chunk in images.chunks(cfg.batch_size) {
        let tensors = chunk
            .iter()
            .map(|p| preprocess(&ImageDecoder.decode(p)?, size))
            .collect::<ynet_core::Result<Vec<_>>>()?;
        let probs = ckpt.model.predict(&Tensor::stack(&tensors)?)?;
        for (path, row) in chunk.iter().zip(probs.data().chunks(k)) {
            let best = argmax(row);
            out.push(ImagePrediction {
                path: path.clone(),
                class: names[best].clone(),
                probability: row[best],
                probs: row.to_vec(),
            });
        }
    }
    println!("path,class,probability");
    for p in &out {
        println!("{},{},{:.6}", p.path.display(), p.class, p.probability);
    }
    if let Some(path) = probs_csv {
        let mut s = format!("path,{}\n", names.join(","));
        for p in &out {
            let row: Vec<String> = p.probs.iter().map(f64::to_string).collect();
            writeln!(s, "{},{}", p.path.display(), row.join(",")).expect("write to string");
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))?;
    }
    Ok(out)
}

/// Runs every layer check and the whole-model check on the tiny network.
pub fn gradcheck(seed: u64, corruption: Corruption) -> Result<GradcheckReport, CliError> {
    let report = gradcheck::run_all(seed, corruption)?;
    print!("{}", report.render());
    if report.passed() {
        Ok(report)
    } else {
        Err(CliError::Gradcheck(report.failures().iter().map(|g| g.name.clone()).collect()))
    }
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join(" x ")
}

/// Shape trace, per-layer parameter counts and totals.
pub fn inspect_text(model: &YNetModel, class_names: &[String]) -> String {
    let a = model.arch();
    let mut s = String::new();
    let attention = match model.attention {
        Attention::Learned => "learned".to_string(),
        Attention::Constant(c) => format!("constant {c}"),
    };
    writeln!(
        s,
        "input {0}x{0}x{1}, branch kernels {2}x{2} / {3}x{3}, channels {4:?}, attention {attention}",
        a.input_size, a.in_channels, a.kernel_sizes[0], a.kernel_sizes[1], a.channels
    )
    .unwrap();
    if !class_names.is_empty() {
        writeln!(s, "classes ({}): {}", class_names.len(), class_names.join(", ")).unwrap();
    }
    writeln!(s, "\n{:<22} output (batch 1)", "layer").unwrap();
    for (name, shape) in model.shape_trace(1) {
        writeln!(s, "{name:<22} {}", dims(&shape)).unwrap();
    }
    writeln!(s, "\n{:<28} {:<18} {:>10} {:>8}", "parameters", "shape", "trainable", "buffers").unwrap();
    for c in model.parameter_counts() {
        writeln!(s, "{:<28} {:<18} {:>10} {:>8}", c.name, c.shape, c.trainable, c.buffers).unwrap();
    }
    let buffers: usize = model.parameter_counts().iter().map(|c| c.buffers).sum();
    writeln!(s, "\ntotal trainable parameters: {}", model.total_trainable()).unwrap();
    writeln!(s, "total batchnorm buffers: {buffers}").unwrap();
    writeln!(
        s,
        "head: {}→{}→{}→{}",
        a.fused_width(),
        a.head_widths[0],
        a.head_widths[1],
        a.num_classes
    )
    .unwrap();
    s
}

/// Describes a checkpoint, or a freshly initialised model when no
/// checkpoint is configured.
pub fn inspect(cfg: &RunConfig) -> Result<String, CliError> {
    let (model, names) = match &cfg.checkpoint {
        Some(path) => {
            let c = Checkpoint::load(path)?;
            (c.model, c.class_names)
        }
        None => {
            let mut m = YNetModel::new(cfg.arch(cfg.num_classes.unwrap_or(30)), &mut Rng::new(cfg.seed, INIT_STREAM))?;
            m.attention = attention_for(cfg);
            (m, Vec::new())
        }
    };
    let text = inspect_text(&model, &names);
    print!("{text}");
    Ok(text)
}
