//! Optimization loop: schedules, AdamW, EMA, checkpoints and export.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{make_views, VisualAugConfig};
use crate::checkpoint::Archive;
use crate::dataset::{sample_indices_by_proportion, DatasetManifest};
use crate::heads::{build_head_bank, nesting_levels, HeadBank, NestingLevels, TeacherDim};
use crate::image::Image;
use crate::loss::{total_loss_backward, LossReport, LossWeights, StudentTokens, TeacherTokens};
use crate::model::{build_student, ema_update, BackboneConfig, ForwardCache, TokenBatch, VisionTransformer};
use crate::nn::{Param, Parameters};
use crate::optim::{clip_grad_norm, cosine_schedule, AdamW, AdamWConfig};
use crate::rng::{derive_seed, stream};
use crate::teacher::{resample_patch_grid, Teacher};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    /// Accepted by the throughput benchmark, which runs it as f32.
    F16,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    /// Student views per step; each tile contributes an aligned and a
    /// non-aligned view, so `batch_size / 2` tiles are drawn.
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub levels_depth: usize,
    pub crop_ablation: bool,
    pub seed: u64,
    pub precision: Precision,
    pub grad_clip: f64,
    pub loss_weights: LossWeights,
    pub adamw: AdamWConfig,
    pub augment: VisualAugConfig,
    /// Write a checkpoint every this many steps (0: final only).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 300_000,
            batch_size: 1024,
            lr_start: 1e-4,
            lr_end: 1e-5,
            wd_start: 0.01,
            wd_end: 0.02,
            ema_start: 0.994,
            ema_end: 1.0,
            levels_depth: 5,
            crop_ablation: false,
            seed: 0,
            precision: Precision::F32,
            grad_clip: 3.0,
            loss_weights: LossWeights::default(),
            adamw: AdamWConfig::default(),
            augment: VisualAugConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("train.total_steps must be positive"));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::config("train.batch_size must be an even number ≥ 2"));
        }
        if !(0.0 < self.lr_end && self.lr_end <= self.lr_start) {
            return Err(Error::config("train: need 0 < lr_end ≤ lr_start"));
        }
        if !(0.0 <= self.ema_start && self.ema_start <= self.ema_end && self.ema_end <= 1.0) {
            return Err(Error::config("train: need 0 ≤ ema_start ≤ ema_end ≤ 1"));
        }
        if self.wd_start < 0.0 || self.wd_end < 0.0 {
            return Err(Error::config("train: weight decay must be non-negative"));
        }
        if self.levels_depth == 0 {
            return Err(Error::config("train.levels_depth must be at least 1"));
        }
        if self.precision != Precision::F32 {
            return Err(Error::config("train.precision: only f32 training is supported"));
        }
        self.augment.validate()
    }

    pub fn tiles_per_step(&self) -> usize {
        self.batch_size / 2
    }

    fn progress(&self, step: u64) -> (u64, u64) {
        (step, self.total_steps.saturating_sub(1).max(1))
    }

    /// Learning rate applied by the update at 0-based `step`; the first
    /// update uses the start value and the last the end value.
    pub fn lr_at(&self, step: u64) -> f64 {
        let (s, t) = self.progress(step);
        cosine_schedule(self.lr_start, self.lr_end, s, t)
    }

    pub fn wd_at(&self, step: u64) -> f64 {
        let (s, t) = self.progress(step);
        cosine_schedule(self.wd_start, self.wd_end, s, t)
    }

    pub fn ema_at(&self, step: u64) -> f64 {
        let (s, t) = self.progress(step);
        cosine_schedule(self.ema_start, self.ema_end, s, t)
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub student: VisionTransformer<f32>,
    pub ema: VisionTransformer<f32>,
    pub heads: HeadBank<f32>,
    /// Moments for student parameters followed by head parameters.
    pub optimizer: AdamW<f32>,
    pub seed: u64,
}

impl TrainState {
    pub fn new(backbone: &BackboneConfig, teachers: &[TeacherDim], config: &TrainConfig) -> Result<Self> {
        let levels = nesting_levels(backbone.width, config.levels_depth)?;
        Self::with_levels(backbone, teachers, &levels, config)
    }

    pub fn with_levels(
        backbone: &BackboneConfig,
        teachers: &[TeacherDim],
        levels: &NestingLevels,
        config: &TrainConfig,
    ) -> Result<Self> {
        let student = build_student(backbone, derive_seed(config.seed, &[1]))?;
        let heads = build_head_bank(backbone.width, teachers, levels, derive_seed(config.seed, &[2]))?;
        let sizes: Vec<usize> = student
            .params()
            .iter()
            .chain(heads.params().iter())
            .map(|(_, p)| p.len())
            .collect();
        Ok(Self {
            step: 0,
            ema: student.clone(),
            student,
            heads,
            optimizer: AdamW::new(config.adamw, &sizes),
            seed: config.seed,
        })
    }

    fn trainable(&mut self) -> Vec<&mut Param<f32>> {
        let mut v: Vec<&mut Param<f32>> = self.student.params_mut().into_iter().map(|(_, p)| p).collect();
        v.extend(self.heads.params_mut().into_iter().map(|(_, p)| p));
        v
    }

    fn trainable_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.student.params().into_iter().map(|(n, _)| format!("student/{n}")).collect();
        v.extend(self.heads.params().into_iter().map(|(n, _)| n));
        v
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.set_meta("kind", &"train")?;
        a.set_meta("step", &self.step)?;
        a.set_meta("seed", &self.seed)?;
        a.set_meta("adam_steps", &self.optimizer.steps)?;
        a.set_meta("adamw", &self.optimizer.config)?;
        a.set_meta("teachers", &self.heads.teachers)?;
        a.set_meta("levels", &self.heads.levels)?;
        self.student.store(&mut a, "student")?;
        self.ema.store(&mut a, "ema")?;
        a.insert_params("", &self.heads);
        let names = self.trainable_names();
        let shapes: Vec<Vec<usize>> = self
            .student
            .params()
            .iter()
            .chain(self.heads.params().iter())
            .map(|(_, p)| p.shape.clone())
            .collect();
        for (i, name) in names.iter().enumerate() {
            a.insert(format!("optim/m/{name}"), &shapes[i], self.optimizer.m[i].clone());
            a.insert(format!("optim/v/{name}"), &shapes[i], self.optimizer.v[i].clone());
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let kind: String = a.meta("kind")?;
        if kind != "train" {
            return Err(Error::Checkpoint(format!("expected a training checkpoint, found `{kind}`")));
        }
        let student = VisionTransformer::restore(a, "student")?;
        let ema = if a.has_prefix("ema") {
            VisionTransformer::restore(a, "ema")?
        } else {
            return Err(Error::MissingEma);
        };
        let teachers: Vec<TeacherDim> = a.meta("teachers")?;
        let levels: NestingLevels = a.meta("levels")?;
        let mut heads = build_head_bank(student.width(), &teachers, &levels, 0)?;
        a.load_params("", &mut heads)?;
        let mut state = Self {
            step: a.meta("step")?,
            student,
            ema,
            heads,
            optimizer: AdamW::new(a.meta("adamw")?, &[]),
            seed: a.meta("seed")?,
        };
        state.optimizer.steps = a.meta("adam_steps")?;
        for name in state.trainable_names() {
            state.optimizer.m.push(a.get(&format!("optim/m/{name}"))?.data.clone());
            state.optimizer.v.push(a.get(&format!("optim/v/{name}"))?.data.clone());
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Backbone-only archive for inference, optionally from the EMA shadow.
pub fn export_deployed(checkpoint: &Archive, use_ema: bool) -> Result<Archive> {
    let model = if use_ema {
        if !checkpoint.has_prefix("ema") {
            return Err(Error::MissingEma);
        }
        VisionTransformer::<f32>::restore(checkpoint, "ema")?
    } else if checkpoint.has_prefix("student") {
        VisionTransformer::<f32>::restore(checkpoint, "student")?
    } else {
        VisionTransformer::<f32>::restore(checkpoint, "backbone")?
    };
    let mut out = Archive::new();
    out.set_meta("kind", &"deploy")?;
    out.set_meta("source", &if use_ema { "ema" } else { "student" })?;
    if checkpoint.has_meta("step") {
        out.set_meta("step", &checkpoint.meta::<u64>("step")?)?;
    }
    model.store(&mut out, "backbone")?;
    Ok(out)
}

/// Loads a backbone from a deploy archive, or from the EMA shadow of a
/// training archive.
pub fn load_backbone(archive: &Archive) -> Result<VisionTransformer<f32>> {
    if archive.has_prefix("backbone") {
        VisionTransformer::restore(archive, "backbone")
    } else if archive.has_prefix("ema") {
        VisionTransformer::restore(archive, "ema")
    } else {
        Err(Error::Checkpoint("archive holds no backbone".into()))
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the update.
    pub step: u64,
    pub lr: f64,
    pub wd: f64,
    pub ema_decay: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

/// Loss inputs for one step: student and teacher outputs on both crops.
struct StepOutputs {
    student: TokenBatch<f32>,
    teachers: Vec<TokenBatch<f32>>,
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub state: TrainState,
    manifest: &'a DatasetManifest,
    teachers: &'a [Box<dyn Teacher>],
    cache: ForwardCache<f32>,
}

const TILES: u64 = 0x7113;
const VIEWS: u64 = 0x7153;

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainConfig,
        state: TrainState,
        manifest: &'a DatasetManifest,
        teachers: &'a [Box<dyn Teacher>],
    ) -> Result<Self> {
        config.validate()?;
        manifest.validate()?;
        if teachers.len() != state.heads.teachers.len()
            || teachers.iter().zip(&state.heads.teachers).any(|(t, d)| t.spec().name != d.name || t.spec().dim != d.dim)
        {
            return Err(Error::config("teachers do not match the head bank"));
        }
        Ok(Self {
            config,
            state,
            manifest,
            teachers,
            cache: ForwardCache::default(),
        })
    }

    /// Aligned and non-aligned views for the tiles of `step`, grouped per
    /// model: `views[model]` holds aligned views then non-aligned views.
    fn views(&self, step: u64) -> Result<Vec<Vec<Image>>> {
        let tiles = self.config.tiles_per_step();
        let idx = sample_indices_by_proportion(self.manifest, tiles, derive_seed(self.state.seed, &[TILES, step]))?;
        let models = 1 + self.teachers.len();
        let with_nonaligned = !self.config.crop_ablation;
        let mut aligned: Vec<Vec<Image>> = vec![Vec::with_capacity(tiles); models];
        let mut nonaligned: Vec<Vec<Image>> = vec![Vec::with_capacity(tiles); models];
        for (i, &ti) in idx.iter().enumerate() {
            let tile = self.manifest.records[ti].load()?;
            let mut rng = stream(self.state.seed, &[VIEWS, step, i as u64]);
            let vs = make_views(&tile, self.teachers.len(), &self.config.augment, with_nonaligned, &mut rng)?;
            for (m, v) in vs.aligned.into_iter().enumerate() {
                aligned[m].push(v);
            }
            for (m, v) in vs.nonaligned.into_iter().enumerate() {
                nonaligned[m].push(v);
            }
        }
        Ok(aligned
            .into_iter()
            .zip(nonaligned)
            .map(|(mut a, n)| {
                a.extend(n);
                a
            })
            .collect())
    }

    /// One optimizer update on student and heads, then the EMA update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let s = self.state.step;
        let views = self.views(s)?;
        let tiles = self.config.tiles_per_step();
        let with_nonaligned = !self.config.crop_ablation;

        let student = self.state.student.forward_train_into(&views[0], &mut self.cache)?;
        let teachers = self
            .teachers
            .iter()
            .zip(&views[1..])
            .map(|(t, v)| t.forward(v))
            .collect::<Result<Vec<_>>>()?;
        let out = StepOutputs { student, teachers };
        let (report, d_tokens) = self.loss_and_grads(&out, tiles, with_nonaligned)?;
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: s + 1,
                breakdown: serde_json::to_string(&report.breakdown)?,
            });
        }
        self.state.student.backward(&self.cache, &d_tokens)?;

        let (lr, wd, decay) = (self.config.lr_at(s), self.config.wd_at(s), self.config.ema_at(s));
        let clip = self.config.grad_clip;
        let mut opt = std::mem::replace(&mut self.state.optimizer, AdamW::new(self.config.adamw, &[]));
        let res = {
            let mut params = self.state.trainable();
            let n = clip_grad_norm(&mut params, clip);
            opt.step(&mut params, lr, wd).map(|_| n)
        };
        self.state.optimizer = opt;
        let grad_norm = res?;
        ema_update(&self.state.student, &mut self.state.ema, decay)?;
        self.state.student.zero_grad();
        self.state.heads.zero_grad();
        self.state.step += 1;
        Ok(StepRecord {
            step: s + 1,
            lr,
            wd,
            ema_decay: decay,
            grad_norm,
            loss: report,
        })
    }

    fn loss_and_grads(&mut self, out: &StepOutputs, tiles: usize, with_nonaligned: bool) -> Result<(LossReport, Vec<f32>)> {
        let st = &out.student;
        let d = st.dim;
        let g = st.grid;
        let np = st.num_patches();
        let cls_all = st.cls_matrix();
        let patches: Vec<f32> = (0..tiles).flat_map(|b| st.patches(b).iter().copied()).collect();

        let mut t_cls_a = Vec::new();
        let mut t_cls_n = Vec::new();
        let mut t_patch = Vec::new();
        for (t, tb) in self.teachers.iter().zip(&out.teachers) {
            let dt = t.spec().dim;
            if tb.dim != dt {
                return Err(Error::shape(format!("teacher `{}` emitted dim {}, declared {dt}", t.spec().name, tb.dim)));
            }
            let cls = tb.cls_matrix();
            t_cls_a.push(cls[..tiles * dt].to_vec());
            t_cls_n.push(cls[tiles * dt..].to_vec());
            let mut p = Vec::with_capacity(tiles * np * dt);
            for b in 0..tiles {
                p.extend(resample_patch_grid(tb.patches(b), tb.grid, dt, g)?);
            }
            t_patch.push(p);
        }
        let names: Vec<&str> = self.teachers.iter().map(|t| t.spec().name.as_str()).collect();
        let aligned_t: Vec<TeacherTokens<f32>> = names
            .iter()
            .enumerate()
            .map(|(i, n)| TeacherTokens {
                name: n,
                cls: &t_cls_a[i],
                patches: Some(&t_patch[i]),
            })
            .collect();
        let nonaligned_t: Vec<TeacherTokens<f32>> = names
            .iter()
            .enumerate()
            .map(|(i, n)| TeacherTokens {
                name: n,
                cls: &t_cls_n[i],
                patches: None,
            })
            .collect();
        let sa = StudentTokens {
            batch: tiles,
            cls: &cls_all[..tiles * d],
            patches: Some(&patches),
        };
        let sn = StudentTokens {
            batch: tiles,
            cls: &cls_all[tiles * d..],
            patches: None,
        };
        let nonaligned = with_nonaligned.then_some((&sn, nonaligned_t.as_slice()));
        let (report, grads) = total_loss_backward(
            &mut self.state.heads,
            (&sa, aligned_t.as_slice()),
            nonaligned,
            self.config.loss_weights,
        )?;

        let mut d_cls = grads.cls_aligned;
        d_cls.extend(grads.cls_nonaligned);
        let mut d_patches = grads.patches_aligned;
        if d_patches.is_empty() {
            d_patches = vec![0.0; tiles * np * d];
        }
        d_patches.resize(st.batch * np * d, 0.0);
        Ok((report, st.grad_from_parts(Some(&d_cls), Some(&d_patches))))
    }
}

/// Where a training run writes its outputs.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.dir.join("checkpoints").join(format!("step_{step:07}.safetensors"))
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("checkpoints").join("last.safetensors")
    }
    pub fn deploy(&self) -> PathBuf {
        self.dir.join("deploy_ema.safetensors")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub final_checkpoint: PathBuf,
    pub deploy: PathBuf,
    pub state: TrainState,
}

/// Runs (or resumes) training until `config.total_steps`, appending one
/// JSON line per step to the metrics log.
pub fn run_training(
    config: &TrainConfig,
    state: TrainState,
    manifest: &DatasetManifest,
    teachers: &[Box<dyn Teacher>],
    paths: &RunPaths,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    fs::create_dir_all(paths.dir.join("checkpoints"))?;
    let checksums: Vec<u64> = teachers.iter().map(|t| t.param_checksum()).collect();
    let mut log = BufWriter::new(if state.step == 0 {
        File::create(paths.metrics())?
    } else {
        truncate_log(&paths.metrics(), state.step)?;
        OpenOptions::new().append(true).create(true).open(paths.metrics())?
    });
    let mut trainer = Trainer::new(config.clone(), state, manifest, teachers)?;
    let mut records = Vec::new();
    while trainer.state.step < config.total_steps {
        let rec = trainer.step()?;
        serde_json::to_writer(&mut log, &rec)?;
        log.write_all(b"\n")?;
        log.flush()?;
        on_step(&rec);
        let step = trainer.state.step;
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step < config.total_steps {
            let a = trainer.state.to_archive()?;
            a.save(&paths.checkpoint(step))?;
            a.save(&paths.last())?;
        }
        records.push(rec);
    }
    if teachers.iter().map(|t| t.param_checksum()).ne(checksums) {
        return Err(Error::Checkpoint("teacher parameters changed during training".into()));
    }
    let archive = trainer.state.to_archive()?;
    let final_checkpoint = paths.checkpoint(trainer.state.step);
    archive.save(&final_checkpoint)?;
    archive.save(&paths.last())?;
    export_deployed(&archive, true)?.save(&paths.deploy())?;
    Ok(TrainOutcome {
        records,
        final_checkpoint,
        deploy: paths.deploy(),
        state: trainer.state,
    })
}

/// Drops metrics lines past `step` so a resumed run does not duplicate them.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let kept: Vec<&str> = text
        .lines()
        .filter(|l| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| v.get("step").and_then(|s| s.as_u64()))
                .is_some_and(|s| s <= step)
        })
        .collect();
    let mut out = kept.join("\n");
    if !out.is_empty() {
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a metrics log written by [`run_training`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
