//! Experiment files, run directories and the paired ablation recipes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::dataset::{scan_image_folder, synthetic_tile_dataset, DatasetManifest, LabelRule, Magnification};
use crate::eval::{
    embed_dataset, heads_from_archive, knn_classify, knn_runtime_profile, linear_probe, pca_rgb_map,
    random_subset_baseline, retrieval_recall, teacher_impact, throughput_benchmark, upscale, EmbedMode,
    EmbeddingSet, LinearProbeConfig, ThroughputConfig,
};
use crate::heads::{nesting_levels, TeacherDim};
use crate::model::{BackboneConfig, VisionTransformer};
use crate::report::{line_chart_png, line_chart_svg, Series};
use crate::rng::derive_seed;
use crate::teacher::{Teacher, TeacherRegistry, TeacherSpec};
use crate::trainer::{load_backbone, run_training, RunPaths, StepRecord, TrainConfig, TrainOutcome, TrainState};
use crate::{Error, Result};

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "PATHRYOSHKA_OUTPUT_DIR";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const RUN_INFO: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticData {
    pub seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub size: u32,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 4,
            per_class: 32,
            size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FolderData {
    pub root: PathBuf,
    pub magnification: String,
    /// Label tiles by their parent folder.
    #[serde(default)]
    pub labels_from_folders: bool,
}

/// Exactly one of `manifest`, `synthetic` or `folder`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folder: Option<FolderData>,
}

impl DataSource {
    fn validate(&self, what: &str) -> Result<()> {
        let n = self.manifest.is_some() as u8 + self.synthetic.is_some() as u8 + self.folder.is_some() as u8;
        if n != 1 {
            return Err(Error::config(format!("{what}: set exactly one of manifest, synthetic, folder")));
        }
        Ok(())
    }

    pub fn load(&self) -> Result<DatasetManifest> {
        if let Some(p) = &self.manifest {
            DatasetManifest::read(p)
        } else if let Some(s) = &self.synthetic {
            synthetic_tile_dataset(s.seed, s.classes, s.per_class, s.size)
        } else if let Some(f) = &self.folder {
            let mag: Magnification = f.magnification.parse()?;
            let rule = f.labels_from_folders.then_some(LabelRule::ParentFolder);
            scan_image_folder(&f.root, mag, rule.as_ref())
        } else {
            Err(Error::config("no data source"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub train: DataSource,
    /// Labeled data for evaluation; defaults to the training data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<DataSource>,
    /// Every n-th tile per class goes to the evaluation test split.
    #[serde(default = "default_test_every")]
    pub test_every: usize,
}

fn default_test_every() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<BackboneConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTask {
    Knn,
    Subset,
    Linear,
    Retrieval,
    Pca,
    Runtime,
    Impact,
    Bench,
}

impl EvalTask {
    pub const ALL: [EvalTask; 8] = [
        EvalTask::Knn,
        EvalTask::Subset,
        EvalTask::Linear,
        EvalTask::Retrieval,
        EvalTask::Pca,
        EvalTask::Runtime,
        EvalTask::Impact,
        EvalTask::Bench,
    ];
}

impl std::str::FromStr for EvalTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::config(format!("unknown eval task `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeSection {
    pub n: usize,
    /// Empty: the evaluation dims.
    pub dims: Vec<usize>,
    pub repeats: usize,
}

impl Default for RuntimeSection {
    fn default() -> Self {
        Self {
            n: 10_000,
            dims: vec![768, 384, 192, 96, 48, 24, 12],
            repeats: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub tasks: Vec<EvalTask>,
    /// Prefix widths; empty means the student's nesting levels.
    pub dims: Vec<usize>,
    pub k: usize,
    pub recall_k: Vec<usize>,
    pub subset_runs: usize,
    pub batch_size: usize,
    pub pca_images: usize,
    pub pca_upscale: u32,
    pub probe: LinearProbeConfig,
    pub runtime: RuntimeSection,
    pub throughput: ThroughputConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tasks: vec![EvalTask::Knn],
            dims: Vec::new(),
            k: 10,
            recall_k: vec![5],
            subset_runs: 5,
            batch_size: 32,
            pca_images: 1,
            pca_upscale: 14,
            probe: LinearProbeConfig::default(),
            runtime: RuntimeSection::default(),
            throughput: ThroughputConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub teachers: Vec<TeacherSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Parses TOML, applies `key.path=value` overrides, then validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            Error::config(format!("`{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; [`OUTPUT_DIR_ENV`] replaces the output directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.train.validate("dataset.train")?;
        if let Some(e) = &self.dataset.eval {
            e.validate("dataset.eval")?;
        }
        if self.dataset.test_every < 2 {
            return Err(Error::config("dataset.test_every must be at least 2"));
        }
        let backbone = self.backbone()?;
        if self.teachers.is_empty() {
            return Err(Error::config("teachers: at least one teacher is required"));
        }
        for (i, t) in self.teachers.iter().enumerate() {
            t.validate().map_err(|e| Error::config(format!("teachers[{i}]: {e}")))?;
            if self.teachers[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::config(format!("teachers[{i}]: duplicate name `{}`", t.name)));
            }
        }
        self.train.validate()?;
        nesting_levels(backbone.width, self.train.levels_depth)?;
        if let Some(&m) = self.eval.dims.iter().find(|&&m| m == 0 || m > backbone.width) {
            return Err(Error::InvalidDim { dim: m, width: backbone.width });
        }
        if self.eval.k == 0 || self.eval.recall_k.contains(&0) {
            return Err(Error::config("eval: k values must be positive"));
        }
        Ok(())
    }

    pub fn backbone(&self) -> Result<BackboneConfig> {
        let b = match (&self.model.preset, &self.model.backbone) {
            (Some(p), None) => BackboneConfig::preset(p)?,
            (None, Some(b)) => b.clone(),
            _ => return Err(Error::config("model: set exactly one of preset, backbone")),
        };
        b.validate()?;
        Ok(b)
    }

    /// Evaluation widths: explicit dims, else the nesting levels.
    pub fn eval_dims(&self, width: usize) -> Result<Vec<usize>> {
        if self.eval.dims.is_empty() {
            Ok(nesting_levels(width, self.train.levels_depth)?.levels().to_vec())
        } else {
            Ok(self.eval.dims.clone())
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn teacher_dims(&self) -> Vec<TeacherDim> {
        self.teachers
            .iter()
            .map(|t| TeacherDim {
                name: t.name.clone(),
                dim: t.dim,
            })
            .collect()
    }

    /// Evaluation (train, test) split.
    pub fn eval_split(&self) -> Result<(DatasetManifest, DatasetManifest)> {
        let data = self.dataset.eval.as_ref().unwrap_or(&self.dataset.train).load()?;
        let (train, test) = data.split(self.dataset.test_every);
        if train.is_empty() || test.is_empty() {
            return Err(Error::EmptyDataset("evaluation split left a side empty".into()));
        }
        Ok((train, test))
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{spec}` is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key `{key}` is malformed")));
    }
    let mut slot = table
        .entry(parts[0].to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    for (depth, part) in parts.iter().enumerate().skip(1) {
        let here = parts[..depth].join(".");
        slot = match slot {
            toml::Value::Table(t) => t
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new())),
            toml::Value::Array(a) => {
                let i: usize = part
                    .parse()
                    .map_err(|_| Error::config(format!("override `{key}`: `{here}` is a list, `{part}` is not an index")))?;
                let len = a.len();
                a.get_mut(i)
                    .ok_or_else(|| Error::config(format!("override `{key}`: index {i} beyond {len} entries")))?
            }
            _ => return Err(Error::config(format!("override `{key}`: `{here}` is not a table"))),
        };
    }
    *slot = value;
    Ok(())
}

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub code_version: String,
    pub seed: u64,
    pub student_seed: u64,
    pub heads_seed: u64,
    pub teachers: Vec<TeacherRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub name: String,
    pub loader: String,
    pub param_checksum: String,
}

/// Writes the resolved config and run information into `dir`.
pub fn write_run_snapshot(cfg: &ExperimentConfig, dir: &Path, code_version: &str, teachers: &[Box<dyn Teacher>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut resolved = cfg.clone();
    resolved.output_dir = dir.to_path_buf();
    fs::write(dir.join(RESOLVED_CONFIG), resolved.to_toml()?)?;
    let info = RunInfo {
        code_version: code_version.to_string(),
        seed: cfg.train.seed,
        student_seed: derive_seed(cfg.train.seed, &[1]),
        heads_seed: derive_seed(cfg.train.seed, &[2]),
        teachers: teachers
            .iter()
            .map(|t| TeacherRecord {
                name: t.spec().name.clone(),
                loader: t.spec().loader.clone(),
                param_checksum: format!("{:016x}", t.param_checksum()),
            })
            .collect(),
    };
    fs::write(dir.join(RUN_INFO), serde_json::to_string_pretty(&info)?)?;
    Ok(())
}

/// Trains per `cfg` into `cfg.output_dir`, resuming from
/// `checkpoints/last.safetensors` when `resume` is set and it exists.
pub fn run_distill(
    cfg: &ExperimentConfig,
    registry: &TeacherRegistry,
    code_version: &str,
    resume: bool,
    on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    let backbone = cfg.backbone()?;
    let data = cfg.dataset.train.load()?;
    let teachers = registry.load_all(&cfg.teachers)?;
    let paths = RunPaths::new(&cfg.output_dir);
    write_run_snapshot(cfg, &paths.dir, code_version, &teachers)?;
    let state = if resume && paths.last().exists() {
        TrainState::load(&paths.last())?
    } else {
        TrainState::new(&backbone, &cfg.teacher_dims(), &cfg.train)?
    };
    run_training(&cfg.train, state, &data, &teachers, &paths, on_step)
}

/// One row of a paired ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
}

pub fn write_paired_csv(path: &Path, columns: [&str; 3], rows: &[PairedRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(columns).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.metric.clone(), fmt_num(r.a), fmt_num(r.b)]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

pub(crate) fn fmt_num(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Clone, Debug)]
pub struct CropAblation {
    pub crop: TrainOutcome,
    pub no_crop: TrainOutcome,
    pub rows: Vec<PairedRow>,
    pub csv: PathBuf,
}

fn knn_at(
    backbone: &VisionTransformer<f32>,
    split: &(DatasetManifest, DatasetManifest),
    k: usize,
    dims: &[usize],
    batch: usize,
) -> Result<Vec<f64>> {
    let tr = embed_dataset(backbone, &split.0, EmbedMode::Cls, batch, "ablation")?;
    let te = embed_dataset(backbone, &split.1, EmbedMode::Cls, batch, "ablation")?;
    let k = k.min(tr.len());
    dims.iter().map(|&m| knn_classify(&tr, &te, k, m)).collect()
}

/// Trains the same experiment with and without non-aligned crops into
/// `output_dir/{crop,no_crop}` and writes `crop_ablation.csv`.
pub fn run_crop_ablation(cfg: &ExperimentConfig, registry: &TeacherRegistry, code_version: &str) -> Result<CropAblation> {
    let mut arms = Vec::new();
    for (name, ablate) in [("crop", false), ("no_crop", true)] {
        let mut arm = cfg.clone();
        arm.output_dir = cfg.output_dir.join(name);
        arm.train.crop_ablation = ablate;
        arms.push(run_distill(&arm, registry, code_version, false, |_| {})?);
    }
    let split = cfg.eval_split()?;
    let width = cfg.backbone()?.width;
    let mut rows = Vec::new();
    let last = |o: &TrainOutcome| o.records.last().map(|r| r.loss.clone()).unwrap_or_default();
    let (lc, ln) = (last(&arms[0]), last(&arms[1]));
    rows.push(PairedRow { metric: "final_total".into(), a: lc.total, b: ln.total });
    rows.push(PairedRow { metric: "final_cls_aligned".into(), a: lc.cls_aligned, b: ln.cls_aligned });
    rows.push(PairedRow { metric: "final_cls_nonaligned".into(), a: lc.cls_nonaligned, b: ln.cls_nonaligned });
    rows.push(PairedRow { metric: "final_patch_aligned".into(), a: lc.patch_aligned, b: ln.patch_aligned });
    let max_nonaligned = |o: &TrainOutcome| o.records.iter().map(|r| r.loss.cls_nonaligned.abs()).fold(0.0, f64::max);
    rows.push(PairedRow {
        metric: "max_abs_cls_nonaligned".into(),
        a: max_nonaligned(&arms[0]),
        b: max_nonaligned(&arms[1]),
    });
    let accs: Vec<f64> = arms
        .iter()
        .map(|o| knn_at(&load_backbone(&Archive::load(&o.deploy)?)?, &split, cfg.eval.k, &[width], cfg.eval.batch_size).map(|v| v[0]))
        .collect::<Result<_>>()?;
    rows.push(PairedRow { metric: format!("knn_accuracy@{width}"), a: accs[0], b: accs[1] });
    fs::create_dir_all(&cfg.output_dir)?;
    let csv = cfg.output_dir.join("crop_ablation.csv");
    write_paired_csv(&csv, ["metric", "crop", "no_crop"], &rows)?;
    let no_crop = arms.pop().expect("two arms");
    let crop = arms.pop().expect("two arms");
    Ok(CropAblation { crop, no_crop, rows, csv })
}

#[derive(Clone, Debug)]
pub struct NestingAblation {
    pub dims: Vec<usize>,
    pub nested: Vec<f64>,
    pub single: Vec<f64>,
    pub csv: PathBuf,
}

impl NestingAblation {
    /// Accuracy lost from the full width to `m`, for (nested, single).
    pub fn drop_to(&self, m: usize) -> Option<(f64, f64)> {
        let i = self.dims.iter().position(|&d| d == m)?;
        Some((self.nested[0] - self.nested[i], self.single[0] - self.single[i]))
    }
}

/// Twin students, one with `train.levels_depth` nesting levels and one with
/// a single full-width level, trained identically into
/// `output_dir/{nested,single}`; k-NN accuracy at d, d/2, …, d/64 (as far
/// as the width allows) goes to `nesting_ablation.csv`.
pub fn run_nesting_ablation(cfg: &ExperimentConfig, registry: &TeacherRegistry, code_version: &str) -> Result<NestingAblation> {
    let width = cfg.backbone()?.width;
    let dims: Vec<usize> = (0..=6).map(|i| (i, width >> i)).take_while(|&(i, m)| m >= 1 && m << i == width).map(|(_, m)| m).collect();
    let split = cfg.eval_split()?;
    let mut accs = Vec::new();
    for (name, depth) in [("nested", cfg.train.levels_depth), ("single", 1)] {
        let mut arm = cfg.clone();
        arm.output_dir = cfg.output_dir.join(name);
        arm.train.levels_depth = depth;
        let out = run_distill(&arm, registry, code_version, false, |_| {})?;
        let backbone = load_backbone(&Archive::load(&out.deploy)?)?;
        accs.push(knn_at(&backbone, &split, cfg.eval.k, &dims, cfg.eval.batch_size)?);
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let csv = cfg.output_dir.join("nesting_ablation.csv");
    let rows: Vec<PairedRow> = dims
        .iter()
        .enumerate()
        .map(|(i, m)| PairedRow { metric: m.to_string(), a: accs[0][i], b: accs[1][i] })
        .collect();
    write_paired_csv(&csv, ["m", "nested", "single"], &rows)?;
    let single = accs.pop().expect("two arms");
    let nested = accs.pop().expect("two arms");
    Ok(NestingAblation { dims, nested, single, csv })
}

/// Files written by [`run_eval`].
#[derive(Clone, Debug, Default)]
pub struct EvalOutputs {
    pub files: Vec<PathBuf>,
    /// One JSON object per result, also written to `results.jsonl`.
    pub records: Vec<serde_json::Value>,
}

/// Runs the requested evaluation tasks on `checkpoint` and writes CSV,
/// JSON and PNG results into `out_dir`.
pub fn run_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    tasks: &[EvalTask],
    out_dir: &Path,
    registry: &TeacherRegistry,
) -> Result<EvalOutputs> {
    let archive = Archive::load(checkpoint)?;
    let backbone = load_backbone(&archive)?;
    let width = backbone.width();
    let dims = cfg.eval_dims(width)?;
    if let Some(&m) = dims.iter().find(|&&m| m > width) {
        return Err(Error::InvalidDim { dim: m, width });
    }
    fs::create_dir_all(out_dir)?;
    let mut out = EvalOutputs::default();
    let dataset = dataset_name(cfg);
    let needs_embeddings = tasks.iter().any(|t| matches!(t, EvalTask::Knn | EvalTask::Subset | EvalTask::Linear | EvalTask::Retrieval));
    let split = if needs_embeddings || tasks.iter().any(|t| matches!(t, EvalTask::Pca | EvalTask::Impact)) {
        Some(cfg.eval_split()?)
    } else {
        None
    };
    let emb = if needs_embeddings {
        let (tr, te) = split.as_ref().expect("split loaded");
        let b = cfg.eval.batch_size;
        Some((
            embed_dataset(&backbone, tr, EmbedMode::Cls, b, "student")?,
            embed_dataset(&backbone, te, EmbedMode::Cls, b, "student")?,
        ))
    } else {
        None
    };
    let header = |first: &str| -> Vec<String> { std::iter::once(first.to_string()).chain(dims.iter().map(|m| m.to_string())).collect() };

    let mut tasks = tasks.to_vec();
    tasks.sort();
    tasks.dedup();
    for task in tasks {
        match task {
            EvalTask::Knn => {
                let (tr, te) = emb.as_ref().expect("embeddings");
                let k = cfg.eval.k.min(tr.len());
                let accs = dims.iter().map(|&m| knn_classify(tr, te, k, m)).collect::<Result<Vec<_>>>()?;
                let path = out_dir.join("knn.csv");
                write_table(&path, &header("dataset"), &[row(&dataset, &accs)])?;
                out.files.push(path);
                let series = [Series {
                    name: format!("k-NN (k={k})"),
                    points: dims.iter().zip(&accs).map(|(&m, &a)| (m as f64, a)).collect(),
                }];
                let svg = out_dir.join("knn_vs_dim.svg");
                fs::write(&svg, line_chart_svg("k-NN accuracy vs. embedding width", "width", "accuracy", &series, true))?;
                let png = out_dir.join("knn_vs_dim.png");
                line_chart_png(&series, 640, 400, true)
                    .save(&png)
                    .map_err(|source| Error::Image { path: png.clone(), source })?;
                out.files.extend([svg, png]);
                for (&m, &a) in dims.iter().zip(&accs) {
                    out.records.push(serde_json::json!({"task": "knn", "dataset": dataset, "k": k, "dim": m, "accuracy": a}));
                }
            }
            EvalTask::Subset => {
                let (tr, te) = emb.as_ref().expect("embeddings");
                let k = cfg.eval.k.min(tr.len());
                let path = out_dir.join("subset.csv");
                let mut rows = Vec::new();
                for &m in &dims {
                    let r = random_subset_baseline(tr, te, k, m, cfg.eval.subset_runs, cfg.train.seed)?;
                    rows.push(vec![dataset.clone(), m.to_string(), fmt_num(r.mean), fmt_num(r.std), r.runs.to_string()]);
                    out.records.push(serde_json::json!({"task": "subset", "dataset": dataset, "dim": m, "result": r}));
                }
                write_table(&path, &["dataset", "dim", "mean", "std", "runs"].map(String::from), &rows)?;
                out.files.push(path);
            }
            EvalTask::Linear => {
                let (tr, te) = emb.as_ref().expect("embeddings");
                let path = out_dir.join("linear.csv");
                let mut rows = Vec::new();
                for &m in &dims {
                    let r = linear_probe(&tr.prefix(m)?, &te.prefix(m)?, &cfg.eval.probe)?;
                    rows.push(vec![dataset.clone(), m.to_string(), r.metric.clone(), fmt_num(r.mean), fmt_num(r.std), r.runs.to_string()]);
                    out.records.push(serde_json::json!({"task": "linear", "dataset": dataset, "dim": m, "result": r}));
                }
                write_table(&path, &["dataset", "dim", "metric", "mean", "std", "runs"].map(String::from), &rows)?;
                out.files.push(path);
            }
            EvalTask::Retrieval => {
                let (tr, te) = emb.as_ref().expect("embeddings");
                let all = concat_sets(tr, te)?;
                let path = out_dir.join("retrieval.csv");
                let mut rows = Vec::new();
                for &k in &cfg.eval.recall_k {
                    let k = k.min(all.len());
                    let rec = dims.iter().map(|&m| retrieval_recall(&all, &all, k, m)).collect::<Result<Vec<_>>>()?;
                    for (&m, &r) in dims.iter().zip(&rec) {
                        out.records.push(serde_json::json!({"task": "retrieval", "dataset": dataset, "k": k, "dim": m, "recall": r}));
                    }
                    rows.push(row(&format!("{dataset}@{k}"), &rec));
                }
                write_table(&path, &header("dataset"), &rows)?;
                out.files.push(path);
            }
            EvalTask::Pca => {
                let (_, te) = split.as_ref().expect("split loaded");
                let dir = out_dir.join("pca");
                fs::create_dir_all(&dir)?;
                for i in 0..cfg.eval.pca_images.min(te.len()) {
                    let one = te.subset(&[i]);
                    let e = embed_dataset(&backbone, &one, EmbedMode::Patch, 1, "student")?;
                    for &m in &dims {
                        let img = upscale(&pca_rgb_map(&e.vectors, width, m)?, cfg.eval.pca_upscale);
                        let p = dir.join(format!("tile{i:03}_m{m}.png"));
                        img.save(&p).map_err(|source| Error::Image { path: p.clone(), source })?;
                        out.records.push(serde_json::json!({"task": "pca", "tile": one.records[0].source_id, "dim": m, "file": p}));
                        out.files.push(p);
                    }
                }
            }
            EvalTask::Runtime => {
                let rt = &cfg.eval.runtime;
                let rdims = if rt.dims.is_empty() { dims.clone() } else { rt.dims.clone() };
                let rows = knn_runtime_profile(rt.n, &rdims, cfg.eval.k.min(rt.n), rt.repeats, cfg.train.seed)?;
                let path = out_dir.join("runtime.csv");
                let table: Vec<Vec<String>> = rows
                    .iter()
                    .map(|r| vec![r.dim.to_string(), fmt_num(r.mean_seconds), fmt_num(r.std_seconds), r.repeats.to_string()])
                    .collect();
                write_table(&path, &["dim", "mean_seconds", "std_seconds", "repeats"].map(String::from), &table)?;
                out.files.push(path);
                for r in rows {
                    out.records.push(serde_json::json!({"task": "runtime", "n": rt.n, "result": r}));
                }
            }
            EvalTask::Impact => {
                let heads = heads_from_archive(&archive)?;
                let student = VisionTransformer::<f32>::restore(&archive, "student")?;
                let teachers = registry.load_all(&cfg.teachers)?;
                let (_, te) = split.as_ref().expect("split loaded");
                let rows = teacher_impact(&student, &heads, &teachers, te, cfg.eval.batch_size)?;
                let path = out_dir.join("impact.csv");
                let table: Vec<Vec<String>> = rows
                    .iter()
                    .map(|r| {
                        vec![
                            r.teacher.clone(),
                            fmt_num(r.summary.mean),
                            fmt_num(r.summary.std),
                            fmt_num(r.features.mean),
                            fmt_num(r.features.std),
                        ]
                    })
                    .collect();
                write_table(
                    &path,
                    &["teacher", "summary_mean", "summary_std", "features_mean", "features_std"].map(String::from),
                    &table,
                )?;
                out.files.push(path);
                for r in rows {
                    out.records.push(serde_json::json!({"task": "impact", "result": r}));
                }
            }
            EvalTask::Bench => {
                let t = throughput_benchmark(&backbone, &cfg.eval.throughput)?;
                let path = out_dir.join("bench.csv");
                write_table(
                    &path,
                    &["model", "throughput", "mean", "std", "batch_size", "batches", "precision"].map(String::from),
                    &[vec![
                        "student".into(),
                        format!("{:.1} ± {:.1}", t.mean, t.std),
                        fmt_num(t.mean),
                        fmt_num(t.std),
                        t.batch_size.to_string(),
                        t.batches.to_string(),
                        serde_json::to_value(t.precision)?.as_str().unwrap_or("f32").to_string(),
                    ]],
                )?;
                let json = out_dir.join("bench.json");
                fs::write(&json, serde_json::to_string_pretty(&t)?)?;
                out.files.extend([path, json]);
                out.records.push(serde_json::json!({"task": "bench", "result": t}));
            }
        }
    }
    let jsonl = out_dir.join("results.jsonl");
    let mut text = String::new();
    for r in &out.records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(&jsonl, text)?;
    out.files.push(jsonl);
    Ok(out)
}

fn dataset_name(cfg: &ExperimentConfig) -> String {
    let src = cfg.dataset.eval.as_ref().unwrap_or(&cfg.dataset.train);
    if let Some(p) = &src.manifest {
        p.file_stem().map_or("manifest".into(), |s| s.to_string_lossy().into_owned())
    } else if let Some(f) = &src.folder {
        f.root.file_name().map_or("folder".into(), |s| s.to_string_lossy().into_owned())
    } else {
        "synthetic".into()
    }
}

fn row(name: &str, values: &[f64]) -> Vec<String> {
    std::iter::once(name.to_string()).chain(values.iter().map(|&v| fmt_num(v))).collect()
}

fn concat_sets(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<EmbeddingSet> {
    let labels = match (&a.labels, &b.labels) {
        (Some(x), Some(y)) => Some(x.iter().chain(y).copied().collect()),
        _ => None,
    };
    EmbeddingSet::new(
        [a.vectors.as_slice(), b.vectors.as_slice()].concat(),
        a.dim,
        labels,
        a.source_ids.iter().chain(&b.source_ids).cloned().collect(),
        a.model_id.clone(),
    )
}

pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
