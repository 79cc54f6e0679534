use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xplain_core::ensemble::{PosteriorMatrix, Prediction};
use xplain_core::explain::{self, ExplainError, LrpBounds, Method, SaliencyMap};
use xplain_core::io::{self, DatasetFile, RunConfig, Split};
use xplain_core::metrics::{confusion, roc_auc_ovr, stratified_holdout, MetricsReport};
use xplain_core::preprocess::{dataset_stats, preprocess_pipeline, GrayImage};
use xplain_core::selection::{rank_by_keys, spectral_stats};
use xplain_core::tensor::Tensor4;
use xplain_core::training::{train_with_snapshots, write_log_csv, LabeledData, Snapshot};
use xplain_core::Network;

use crate::{read_file, runtime, validation, write_file, CliError, Subcommand};

pub const DATASET_FILE: &str = "dataset.dcxd";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const SELECTION_FILE: &str = "selection.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const EXPLAIN_DIR: &str = "explain";

pub fn run_stage(stage: Subcommand, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    match stage {
        Subcommand::Preprocess => preprocess(cfg, out),
        Subcommand::Train => train(cfg, out),
        Subcommand::Select => select(cfg, out),
        Subcommand::Ensemble => ensemble(cfg, out),
        Subcommand::Evaluate => evaluate(out),
        Subcommand::Explain => explain_images(cfg, out),
    }
}

fn require(path: PathBuf, stage: &str) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(validation(format!("{} not found; run `{stage}` first", path.display())))
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value).map(|s| s + "\n").map_err(runtime)
}

pub fn load_gray_png(path: &Path) -> Result<GrayImage, CliError> {
    let img = image::open(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?.to_luma8();
    let (w, h) = img.dimensions();
    GrayImage::from_levels(h as usize, w as usize, img.into_raw()).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct PreprocessSummary<'a> {
    labels: &'a [String],
    train: usize,
    test: usize,
    mean: f64,
    std: f64,
    side: usize,
    stages: Vec<&'static str>,
}

fn preprocess(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let manifest = io::load_manifest(&cfg.manifest).map_err(validation)?;
    let root = cfg.manifest.parent().unwrap_or(Path::new("."));
    let labels = manifest.label_ids();

    let is_test: Vec<bool> = if manifest.has_splits() {
        manifest
            .rows
            .iter()
            .map(|r| r.split.map(|s| s == Split::Test).ok_or_else(|| validation(format!("{}: missing split", r.path))))
            .collect::<Result<_, _>>()?
    } else {
        let (_, held) = stratified_holdout(&labels, cfg.test_fraction, cfg.split_seed);
        let mut flags = vec![false; labels.len()];
        held.iter().for_each(|&i| flags[i] = true);
        flags
    };
    if is_test.iter().all(|&t| t) {
        return Err(validation("manifest leaves no training images"));
    }

    let images: Vec<GrayImage> =
        manifest.rows.iter().map(|r| load_gray_png(&root.join(&r.path))).collect::<Result<_, _>>()?;

    let mut pre = cfg.preprocess.clone();
    if cfg.auto_stats {
        let plain = pre.without_standardize();
        let train: Vec<Tensor4> = images
            .iter()
            .zip(&is_test)
            .filter(|(_, &t)| !t)
            .map(|(img, _)| preprocess_pipeline(img, &plain))
            .collect::<Result<_, _>>()
            .map_err(runtime)?;
        let (mean, std) = dataset_stats(&train);
        if std.is_nan() || std <= 0.0 {
            return Err(runtime("training images have zero variance after preprocessing"));
        }
        pre.mean = mean;
        pre.std = std;
    }
    let tensors: Vec<Tensor4> =
        images.iter().map(|img| preprocess_pipeline(img, &pre)).collect::<Result<_, _>>().map_err(runtime)?;
    let tensors = Tensor4::stack(&tensors.iter().collect::<Vec<_>>()).map_err(runtime)?;

    let dataset = DatasetFile {
        labels: manifest.labels.clone(),
        paths: manifest.rows.iter().map(|r| r.path.clone()).collect(),
        targets: labels,
        is_test,
        mean: pre.mean,
        std: pre.std,
        tensors,
    };
    io::save_dataset(&dataset, &out.join(DATASET_FILE)).map_err(runtime)?;
    let summary = PreprocessSummary {
        labels: &dataset.labels,
        train: dataset.indices(false).len(),
        test: dataset.indices(true).len(),
        mean: pre.mean,
        std: pre.std,
        side: pre.side,
        stages: pre.stages.iter().map(|s| s.name()).collect(),
    };
    write_file(&out.join("preprocess.json"), to_json(&summary)?)
}

fn load_dataset(out: &Path) -> Result<DatasetFile, CliError> {
    io::load_dataset(&require(out.join(DATASET_FILE), "preprocess")?).map_err(runtime)
}

fn labeled(ds: &DatasetFile, test: bool) -> Result<(Vec<usize>, LabeledData), CliError> {
    let idx = ds.indices(test);
    let data = LabeledData::new(ds.tensors.gather(&idx), idx.iter().map(|&i| ds.targets[i]).collect()).map_err(runtime)?;
    Ok((idx, data))
}

fn train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ds = load_dataset(out)?;
    if ds.tensors.shape() != cfg.input_shape() {
        return Err(validation(format!(
            "dataset samples are {}, configuration expects {}; rerun `preprocess`",
            ds.tensors.shape(),
            cfg.input_shape()
        )));
    }
    let net = Network::new(cfg.input_shape(), cfg.layers.clone(), cfg.init_seed).map_err(validation)?;
    if net.classes() != ds.labels.len() {
        return Err(validation(format!("model scores {} classes, dataset has {}", net.classes(), ds.labels.len())));
    }
    let (_, data) = labeled(&ds, false)?;
    let run = train_with_snapshots(&net, &data, &cfg.train).map_err(runtime)?;

    let dir = out.join(SNAPSHOT_DIR);
    if dir.exists() {
        for entry in std::fs::read_dir(&dir).map_err(runtime)? {
            let path = entry.map_err(runtime)?.path();
            if path.extension().is_some_and(|e| e == "dcxs") {
                std::fs::remove_file(&path).map_err(runtime)?;
            }
        }
    }
    std::fs::create_dir_all(&dir).map_err(runtime)?;
    for s in &run.snapshots {
        io::save_snapshot(s, &dir.join(format!("snapshot_{:03}.dcxs", s.cycle))).map_err(runtime)?;
    }
    let mut log = Vec::new();
    write_log_csv(&run.log, &mut log).map_err(runtime)?;
    write_file(&out.join("train_log.csv"), log)
}

fn list_snapshots(out: &Path) -> Result<Vec<String>, CliError> {
    let dir = require(out.join(SNAPSHOT_DIR), "train")?;
    let mut files: Vec<String> = std::fs::read_dir(&dir)
        .map_err(runtime)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".dcxs"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(validation(format!("no snapshots in {}; run `train` first", dir.display())));
    }
    Ok(files)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SnapshotSummary {
    pub file: String,
    pub cycle: usize,
    pub epoch: usize,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub log_norm: Option<f64>,
    pub weighted_alpha: Option<f64>,
    pub layers: Vec<LayerSummary>,
}

/// Spectral fit of one analyzed weight matrix; fit fields are absent when the
/// spectrum is too short to fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub shape: (usize, usize),
    pub alpha: Option<f64>,
    pub xmin: Option<f64>,
    pub ks: Option<f64>,
    pub lambda_max: f64,
    pub weighted_alpha: Option<f64>,
    pub log_frob: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectionFile {
    pub min_dim: usize,
    /// Every snapshot index, best first.
    pub ranking: Vec<usize>,
    /// Files of the top-k snapshots, best first.
    pub selected: Vec<String>,
    pub snapshots: Vec<SnapshotSummary>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn select(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let files = list_snapshots(out)?;
    if cfg.top_k > files.len() {
        return Err(validation(format!("top_k = {} but only {} snapshots exist", cfg.top_k, files.len())));
    }
    let mut summaries = Vec::with_capacity(files.len());
    let mut keys = Vec::with_capacity(files.len());
    for f in &files {
        let s = io::load_snapshot(&out.join(SNAPSHOT_DIR).join(f)).map_err(runtime)?;
        let stats = spectral_stats(&s.network, cfg.min_dim).map_err(runtime)?;
        keys.push((stats.log_norm, stats.weighted_alpha));
        summaries.push(SnapshotSummary {
            file: f.clone(),
            cycle: s.cycle,
            epoch: s.epoch,
            val_loss: finite(s.val_loss),
            val_acc: finite(s.val_acc),
            log_norm: finite(stats.log_norm),
            weighted_alpha: finite(stats.weighted_alpha),
            layers: stats
                .layers
                .iter()
                .map(|l| LayerSummary {
                    layer: l.layer,
                    shape: l.shape,
                    alpha: l.fit.map(|f| f.alpha),
                    xmin: l.fit.map(|f| f.xmin),
                    ks: l.fit.map(|f| f.ks),
                    lambda_max: l.lambda_max,
                    weighted_alpha: l.weighted_alpha,
                    log_frob: l.log_frob,
                })
                .collect(),
        });
    }
    let ranking = rank_by_keys(&keys, files.len(), cfg.alpha_preference).map_err(runtime)?;
    let selected = ranking[..cfg.top_k].iter().map(|&i| files[i].clone()).collect();
    let sel = SelectionFile { min_dim: cfg.min_dim, ranking, selected, snapshots: summaries };
    write_file(&out.join(SELECTION_FILE), to_json(&sel)?)
}

fn load_selected(out: &Path) -> Result<Vec<Snapshot>, CliError> {
    let text = read_file(&require(out.join(SELECTION_FILE), "select")?)?;
    let sel: SelectionFile = serde_json::from_slice(&text).map_err(|e| validation(format!("{SELECTION_FILE}: {e}")))?;
    if sel.selected.is_empty() {
        return Err(validation(format!("{SELECTION_FILE} selects no snapshots")));
    }
    sel.selected.iter().map(|f| io::load_snapshot(&out.join(SNAPSHOT_DIR).join(f)).map_err(runtime)).collect()
}

/// Posteriors of every member for every sample: `[member][sample * K + k]`.
fn member_posteriors(members: &[Snapshot], inputs: &Tensor4) -> Result<Vec<Vec<f32>>, CliError> {
    members
        .iter()
        .map(|m| {
            if m.network.input_shape() != inputs.shape() {
                return Err(validation("snapshot input shape does not match the dataset; rerun `train`"));
            }
            m.network.predict(inputs).map_err(runtime)
        })
        .collect()
}

fn combine(cfg: &RunConfig, posts: &[Vec<f32>], sample: usize, classes: usize) -> Result<Prediction, CliError> {
    let rows: Vec<&[f32]> = posts.iter().map(|p| &p[sample * classes..(sample + 1) * classes]).collect();
    let matrix = PosteriorMatrix::from_f32_rows(&rows).map_err(runtime)?;
    Ok(cfg.ensemble.combine(&matrix))
}

fn test_split(ds: &DatasetFile) -> Result<(Vec<usize>, LabeledData), CliError> {
    let (idx, data) = labeled(ds, true)?;
    if idx.is_empty() {
        return Err(validation("the dataset has no test images"));
    }
    Ok((idx, data))
}

fn ensemble(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ds = load_dataset(out)?;
    let members = load_selected(out)?;
    let (idx, test) = test_split(&ds)?;
    let k = ds.labels.len();
    let posts = member_posteriors(&members, &test.inputs)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["path".to_string(), "label".to_string(), "predicted".to_string()];
    header.extend(ds.labels.iter().map(|l| format!("p_{l}")));
    w.write_record(&header).map_err(runtime)?;
    for (s, &i) in idx.iter().enumerate() {
        let pred = combine(cfg, &posts, s, k)?;
        let mut rec = vec![ds.paths[i].clone(), ds.labels[ds.targets[i]].clone(), ds.labels[pred.class].clone()];
        rec.extend(pred.distribution.iter().map(|p| p.to_string()));
        w.write_record(&rec).map_err(runtime)?;
    }
    write_file(&out.join(PREDICTIONS_FILE), w.into_inner().map_err(runtime)?)
}

#[derive(Serialize)]
struct ClassAuc {
    label: String,
    auc: Option<f64>,
}

#[derive(Serialize)]
struct Evaluation {
    metrics: MetricsReport,
    roc: Vec<ClassAuc>,
}

pub fn file_safe(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn evaluate(out: &Path) -> Result<(), CliError> {
    let path = require(out.join(PREDICTIONS_FILE), "ensemble")?;
    let bad = |m: String| validation(format!("{}: {m}", path.display()));
    let bytes = read_file(&path)?;
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let labels: Vec<String> = header.iter().skip(3).map(|h| h.strip_prefix("p_").unwrap_or(h).to_string()).collect();
    if header.len() < 5 || header.iter().take(3).ne(["path", "label", "predicted"]) {
        return Err(bad("unexpected header".into()));
    }
    let id = |name: &str| labels.iter().position(|l| l == name).ok_or_else(|| bad(format!("unknown label `{name}`")));
    let (mut truth, mut preds, mut scores) = (Vec::new(), Vec::new(), vec![Vec::new(); labels.len()]);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        truth.push(id(&rec[1])?);
        preds.push(id(&rec[2])?);
        for (k, s) in scores.iter_mut().enumerate() {
            s.push(rec[3 + k].parse::<f64>().map_err(|e| bad(e.to_string()))?);
        }
    }
    let cm = confusion(&preds, &truth, labels.len()).map_err(runtime)?;
    let metrics = MetricsReport::from_confusion(&cm, &labels);
    let mut roc = Vec::new();
    for (k, label) in labels.iter().enumerate() {
        let positive: Vec<bool> = truth.iter().map(|&t| t == k).collect();
        match roc_auc_ovr(&scores[k], &positive) {
            Ok(curve) => {
                write_file(&out.join(format!("roc_{}.csv", file_safe(label))), curve.to_csv())?;
                roc.push(ClassAuc { label: label.clone(), auc: Some(curve.auc) });
            }
            Err(e) => {
                eprintln!("xray-xplain evaluate: no ROC for {label}: {e}");
                roc.push(ClassAuc { label: label.clone(), auc: None });
            }
        }
    }
    write_file(&out.join("metrics.txt"), metrics.to_table())?;
    write_file(&out.join("metrics.json"), to_json(&Evaluation { metrics, roc })?)
}

#[derive(Serialize)]
struct ExplainRecord<'a> {
    path: &'a str,
    label: &'a str,
    predicted: &'a str,
    probability: f64,
    distribution: &'a [f64],
    method: &'static str,
    layer: usize,
    peak: (usize, usize),
    report: String,
}

fn explain_err(e: ExplainError) -> CliError {
    match e {
        ExplainError::ArchitectureUnsupported(_) | ExplainError::LayerNotConv(_) => validation(e),
        _ => runtime(e),
    }
}

/// Undoes standardization of the first channel for display.
fn display_image(x: &Tensor4, mean: f64, std: f64) -> Result<GrayImage, CliError> {
    let s = x.shape();
    let plane = &x.as_slice()[..s.h * s.w];
    let unit = plane.iter().map(|&v| ((f64::from(v) * std + mean).clamp(0.0, 1.0)) as f32).collect();
    GrayImage::from_unit(s.h, s.w, unit).map_err(runtime)
}

pub fn image_stem(path: &str) -> String {
    let p = Path::new(path);
    let stem = p.with_extension("");
    file_safe(&stem.to_string_lossy().replace(['/', '\\'], "_"))
}

fn explain_images(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ds = load_dataset(out)?;
    let members = load_selected(out)?;
    let (mut idx, mut test) = test_split(&ds)?;
    if let Some(limit) = cfg.explain.max_images {
        idx.truncate(limit);
        test = test.subset(&(0..idx.len()).collect::<Vec<_>>());
    }
    let k = ds.labels.len();
    let posts = member_posteriors(&members, &test.inputs)?;
    let net = &members[0].network;
    let method = cfg.explain.method;
    let layer = match (method, cfg.explain.layer) {
        (Method::Lrp, _) => 0,
        (_, Some(l)) => l,
        (_, None) => explain::last_conv_layer(net).ok_or_else(|| validation("the model has no conv layer to explain"))?,
    };
    let bounds = LrpBounds::Uniform { low: -ds.mean / ds.std, high: (1.0 - ds.mean) / ds.std };
    let dir = out.join(EXPLAIN_DIR);
    std::fs::create_dir_all(&dir).map_err(runtime)?;

    for (s, &i) in idx.iter().enumerate() {
        let pred = combine(cfg, &posts, s, k)?;
        let x = test.inputs.select(s);
        let map: SaliencyMap = match method {
            Method::Cam => explain::cam(net, &x, pred.class),
            Method::GradCam => explain::grad_cam(net, &x, pred.class, layer),
            Method::GradCamPp => explain::grad_cam_pp(net, &x, pred.class, layer),
            Method::Lrp => explain::lrp(net, &x, pred.class, &bounds).map(|r| r.to_saliency()),
        }
        .map_err(explain_err)?;
        let shape = x.shape();
        let map = if (map.height, map.width) == (shape.h, shape.w) {
            map
        } else {
            explain::upsample_normalize(&map, shape.h, shape.w).map_err(explain_err)?
        };
        let base = display_image(&x, ds.mean, ds.std)?;
        let overlay = explain::render_overlay(&base, &map, cfg.explain.beta).map_err(explain_err)?;
        let stem = image_stem(&ds.paths[i]);
        let png = image::RgbImage::from_raw(overlay.width as u32, overlay.height as u32, overlay.data)
            .ok_or_else(|| runtime("overlay buffer has the wrong size"))?;
        png.save(dir.join(format!("{stem}.png"))).map_err(runtime)?;
        let record = ExplainRecord {
            path: &ds.paths[i],
            label: &ds.labels[ds.targets[i]],
            predicted: &ds.labels[pred.class],
            probability: pred.probability(),
            distribution: &pred.distribution,
            method: method.name(),
            layer,
            peak: map.peak(),
            report: explain::explain_report(&pred, method.name(), &map, &ds.labels),
        };
        write_file(&dir.join(format!("{stem}.json")), to_json(&record)?)?;
    }
    Ok(())
}
