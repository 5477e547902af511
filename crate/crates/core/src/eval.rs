//! Frozen-backbone evaluation: embeddings, probes, k-NN, retrieval, PCA
//! maps, runtime profiles, teacher agreement and throughput.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::time::Instant;

use image::RgbImage;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::dataset::DatasetManifest;
use crate::heads::{build_head_bank, HeadBank, HeadKind, NestingLevels, TeacherDim};
use crate::image::Image;
use crate::loss::cosine_loss;
use crate::model::VisionTransformer;
use crate::nn::gemm;
use crate::rng::{derive_seed, stream};
use crate::teacher::{resample_patch_grid, standardize_patch_tokens, StandardizationStats, Teacher};
use crate::trainer::Precision;
use crate::{Error, Result};

/// Side of the evaluation input after resize and center crop.
pub const EVAL_SIZE: usize = 224;
pub const WARMUP_BATCHES: usize = 10;
const QUERY_BLOCK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    Cls,
    Patch,
}

/// Row-major `[N, dim]` embeddings with optional class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Vec<f32>,
    pub labels: Option<Vec<usize>>,
    pub source_ids: Vec<String>,
    pub dim: usize,
    pub model_id: String,
    /// Set on sets produced by [`EmbeddingSet::prefix`].
    pub prefix_dim: Option<usize>,
}

impl EmbeddingSet {
    pub fn new(
        vectors: Vec<f32>,
        dim: usize,
        labels: Option<Vec<usize>>,
        source_ids: Vec<String>,
        model_id: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 || vectors.len() % dim != 0 {
            return Err(Error::shape(format!("{} values do not form rows of width {dim}", vectors.len())));
        }
        let n = vectors.len() / dim;
        if source_ids.len() != n || labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::shape(format!("{n} rows but mismatched labels or source ids")));
        }
        Ok(Self {
            vectors,
            labels,
            source_ids,
            dim,
            model_id: model_id.into(),
            prefix_dim: None,
        })
    }

    pub fn len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::MissingLabels(format!("embedding set `{}`", self.model_id)))
    }

    /// The first `m` columns.
    pub fn prefix(&self, m: usize) -> Result<EmbeddingSet> {
        check_dim(m, self.dim)?;
        let cols: Vec<usize> = (0..m).collect();
        let mut out = self.columns(&cols)?;
        out.prefix_dim = Some(m);
        Ok(out)
    }

    /// The given columns, in the given order.
    pub fn columns(&self, cols: &[usize]) -> Result<EmbeddingSet> {
        if let Some(&c) = cols.iter().find(|&&c| c >= self.dim) {
            return Err(Error::InvalidDim { dim: c + 1, width: self.dim });
        }
        if cols.is_empty() {
            return Err(Error::InvalidDim { dim: 0, width: self.dim });
        }
        let vectors = (0..self.len()).flat_map(|i| cols.iter().map(move |&c| (i, c))).map(|(i, c)| self.vectors[i * self.dim + c]).collect();
        Ok(EmbeddingSet {
            vectors,
            labels: self.labels.clone(),
            source_ids: self.source_ids.clone(),
            dim: cols.len(),
            model_id: self.model_id.clone(),
            prefix_dim: None,
        })
    }
}

fn check_dim(m: usize, width: usize) -> Result<()> {
    if m == 0 || m > width {
        return Err(Error::InvalidDim { dim: m, width });
    }
    Ok(())
}

/// Evaluation preprocessing: shorter side to 224, then center crop.
pub fn eval_image(tile: &Image) -> Image {
    tile.resize_center_crop(EVAL_SIZE)
}

/// Embeds every tile of `manifest`. In patch mode each tile contributes G²
/// rows sharing its label and source id.
pub fn embed_dataset(
    model: &VisionTransformer<f32>,
    manifest: &DatasetManifest,
    mode: EmbedMode,
    batch_size: usize,
    model_id: &str,
) -> Result<EmbeddingSet> {
    if manifest.is_empty() {
        return Err(Error::EmptyDataset("nothing to embed".into()));
    }
    let d = model.width();
    let tile_labels = manifest.label_indices();
    let (mut vectors, mut labels, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    let indices: Vec<usize> = (0..manifest.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let images = chunk
            .iter()
            .map(|&i| manifest.records[i].load().map(|t| eval_image(&t)))
            .collect::<Result<Vec<_>>>()?;
        let out = model.forward(&images)?;
        for (b, &i) in chunk.iter().enumerate() {
            let rows = match mode {
                EmbedMode::Cls => {
                    vectors.extend_from_slice(out.cls(b));
                    1
                }
                EmbedMode::Patch => {
                    vectors.extend_from_slice(out.patches(b));
                    out.num_patches()
                }
            };
            for _ in 0..rows {
                ids.push(manifest.records[i].source_id.clone());
                if let Some(l) = &tile_labels {
                    labels.push(l[i]);
                }
            }
        }
    }
    EmbeddingSet::new(vectors, d, tile_labels.map(|_| labels), ids, model_id)
}

/// Rows restricted to the first `m` columns and scaled to unit length
/// (zero rows stay zero).
fn unit_rows(set: &EmbeddingSet, m: usize) -> Result<Vec<f64>> {
    check_dim(m, set.dim)?;
    let mut out = Vec::with_capacity(set.len() * m);
    for i in 0..set.len() {
        let r = &set.row(i)[..m];
        let norm = r.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        out.extend(r.iter().map(|&v| if norm > 0.0 { v as f64 / norm } else { 0.0 }));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
struct Neighbor {
    index: usize,
    sim: f64,
}

/// Top-`k` gallery items per query by cosine on the first `m` columns.
/// `before(a, b)` breaks similarity ties; `keep(q, g)` filters candidates.
fn nearest(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    k: usize,
    m: usize,
    keep: &dyn Fn(usize, usize) -> bool,
    before: &dyn Fn(usize, usize) -> Ordering,
    mut visit: impl FnMut(usize, &[Neighbor]),
) -> Result<()> {
    if queries.dim != gallery.dim {
        return Err(Error::shape(format!("query width {} vs gallery width {}", queries.dim, gallery.dim)));
    }
    let q = unit_rows(queries, m)?;
    let g = unit_rows(gallery, m)?;
    let ng = gallery.len();
    let order = |a: &Neighbor, b: &Neighbor| b.sim.total_cmp(&a.sim).then_with(|| before(a.index, b.index));
    let mut sims = vec![0.0f64; QUERY_BLOCK.min(queries.len().max(1)) * ng];
    let mut top: Vec<Neighbor> = Vec::with_capacity(k + 1);
    for start in (0..queries.len()).step_by(QUERY_BLOCK) {
        let rows = QUERY_BLOCK.min(queries.len() - start);
        gemm(rows, ng, m, 1.0, &q[start * m..], m, false, &g, m, true, 0.0, &mut sims, ng);
        for r in 0..rows {
            let qi = start + r;
            top.clear();
            let mut floor = f64::NEG_INFINITY;
            for (gi, &sim) in sims[r * ng..(r + 1) * ng].iter().enumerate() {
                if sim < floor {
                    continue;
                }
                let cand = Neighbor { index: gi, sim };
                if top.len() == k && order(&cand, &top[k - 1]) != Ordering::Less {
                    continue;
                }
                if !keep(qi, gi) {
                    continue;
                }
                let pos = top.partition_point(|t| order(t, &cand) == Ordering::Less);
                top.insert(pos, cand);
                top.truncate(k);
                if top.len() == k {
                    floor = top[k - 1].sim;
                }
            }
            visit(qi, &top);
        }
    }
    Ok(())
}

/// Majority vote; ties go to the smaller summed cosine distance, then the
/// lower class index.
fn vote(neighbors: &[Neighbor], labels: &[usize]) -> usize {
    let mut tally: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for n in neighbors {
        let e = tally.entry(labels[n.index]).or_default();
        e.0 += 1;
        e.1 += 1.0 - n.sim;
    }
    let mut best: Option<(usize, usize, f64)> = None;
    for (&class, &(count, dist)) in &tally {
        let better = match best {
            None => true,
            Some((_, bc, bd)) => count > bc || (count == bc && dist < bd),
        };
        if better {
            best = Some((class, count, dist));
        }
    }
    best.map_or(0, |b| b.0)
}

/// k-NN predictions for every test row using the first `m` columns.
pub fn knn_predict(train: &EmbeddingSet, test: &EmbeddingSet, k: usize, m: usize) -> Result<Vec<usize>> {
    let labels = train.labels()?;
    if k == 0 || k > train.len() {
        return Err(Error::InvalidK { k, available: train.len() });
    }
    let mut pred = vec![0; test.len()];
    nearest(test, train, k, m, &|_, _| true, &|a, b| a.cmp(&b), |qi, nb| pred[qi] = vote(nb, labels))?;
    Ok(pred)
}

/// Cosine k-NN accuracy on the first `m` columns.
pub fn knn_classify(train: &EmbeddingSet, test: &EmbeddingSet, k: usize, m: usize) -> Result<f64> {
    let truth = test.labels()?;
    let pred = knn_predict(train, test, k, m)?;
    Ok(accuracy(&pred, truth))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Mean per-class recall over the classes present in `truth`.
pub fn balanced_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        let e = per.entry(t).or_default();
        e.1 += 1;
        if p == t {
            e.0 += 1;
        }
    }
    if per.is_empty() {
        return 0.0;
    }
    per.values().map(|&(hit, n)| hit as f64 / n as f64).sum::<f64>() / per.len() as f64
}

/// Mean and spread of repeated runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub metric: String,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub runs: usize,
    pub values: Vec<f64>,
}

impl ProbeResult {
    pub fn from_values(metric: impl Into<String>, values: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&values);
        Self {
            metric: metric.into(),
            mean,
            std,
            runs: values.len(),
            values,
        }
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// k-NN accuracy on `m` coordinates drawn uniformly without replacement,
/// one draw per run.
pub fn random_subset_baseline(
    train: &EmbeddingSet,
    test: &EmbeddingSet,
    k: usize,
    m: usize,
    runs: usize,
    seed: u64,
) -> Result<ProbeResult> {
    check_dim(m, train.dim)?;
    let mut values = Vec::with_capacity(runs);
    for r in 0..runs {
        let mut rng = stream(seed, &[r as u64]);
        let cols = rand::seq::index::sample(&mut rng, train.dim, m).into_vec();
        let (tr, te) = (train.columns(&cols)?, test.columns(&cols)?);
        values.push(knn_classify(&tr, &te, k, m)?);
    }
    Ok(ProbeResult::from_values(format!("knn_random_subset@{m}"), values))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// One run per seed; the seed drives minibatch order.
    pub seeds: Vec<u64>,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-2,
            batch_size: 256,
            weight_decay: 0.0,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// Softmax regression on frozen, train-standardized features. Binary tasks
/// report balanced accuracy, others plain accuracy.
pub fn linear_probe(train: &EmbeddingSet, test: &EmbeddingSet, cfg: &LinearProbeConfig) -> Result<ProbeResult> {
    let (ytr, yte) = (train.labels()?, test.labels()?);
    if train.dim != test.dim {
        return Err(Error::shape(format!("train width {} vs test width {}", train.dim, test.dim)));
    }
    let mut present: Vec<usize> = ytr.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::DegenerateLabels);
    }
    let classes = ytr.iter().chain(yte).max().map_or(0, |&c| c + 1);
    let binary = {
        let mut all: Vec<usize> = ytr.iter().chain(yte).copied().collect();
        all.sort_unstable();
        all.dedup();
        all.len() == 2
    };
    let d = train.dim;
    let stats = StandardizationStats::<f64>::from_tokens(&train.vectors.iter().map(|&v| v as f64).collect::<Vec<_>>(), d);
    let prep = |s: &EmbeddingSet| standardize_patch_tokens(&s.vectors.iter().map(|&v| v as f64).collect::<Vec<_>>(), &stats);
    let (xtr, xte) = (prep(train), prep(test));
    let mut values = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let (w, b) = fit_softmax(&xtr, ytr, d, classes, cfg, seed);
        let pred = predict_softmax(&xte, d, classes, &w, &b);
        values.push(if binary { balanced_accuracy(&pred, yte) } else { accuracy(&pred, yte) });
    }
    Ok(ProbeResult::from_values(if binary { "balanced_accuracy" } else { "accuracy" }, values))
}

fn fit_softmax(x: &[f64], y: &[usize], d: usize, c: usize, cfg: &LinearProbeConfig, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let n = y.len();
    let (mut w, mut b) = (vec![0.0; c * d], vec![0.0; c]);
    let (mut mw, mut vw, mut mb, mut vb) = (vec![0.0; c * d], vec![0.0; c * d], vec![0.0; c], vec![0.0; c]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let bs = cfg.batch_size.clamp(1, n.max(1));
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, &[0x11_4e_a7]);
    let mut t = 0i32;
    let (mut xb, mut logits, mut gw) = (vec![0.0; bs * d], vec![0.0; bs * c], vec![0.0; c * d]);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let rows = chunk.len();
            for (r, &i) in chunk.iter().enumerate() {
                xb[r * d..(r + 1) * d].copy_from_slice(&x[i * d..(i + 1) * d]);
            }
            gemm(rows, c, d, 1.0, &xb, d, false, &w, d, true, 0.0, &mut logits, c);
            let mut gb = vec![0.0; c];
            for (r, &i) in chunk.iter().enumerate() {
                let row = &mut logits[r * c..(r + 1) * c];
                row.iter_mut().zip(&b).for_each(|(l, bb)| *l += bb);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                row.iter_mut().for_each(|l| {
                    *l = (*l - mx).exp();
                    sum += *l;
                });
                for (j, l) in row.iter_mut().enumerate() {
                    *l = (*l / sum - if j == y[i] { 1.0 } else { 0.0 }) / rows as f64;
                    gb[j] += *l;
                }
            }
            gemm(c, d, rows, 1.0, &logits, c, true, &xb, d, false, 0.0, &mut gw, d);
            t += 1;
            let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            let adam = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], wd: f64| {
                for i in 0..p.len() {
                    let gi = g[i] + wd * p[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                    p[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            };
            adam(&mut w, &gw, &mut mw, &mut vw, cfg.weight_decay);
            adam(&mut b, &gb, &mut mb, &mut vb, 0.0);
        }
    }
    (w, b)
}

fn predict_softmax(x: &[f64], d: usize, c: usize, w: &[f64], b: &[f64]) -> Vec<usize> {
    let n = x.len() / d;
    let mut logits = vec![0.0; n * c];
    gemm(n, c, d, 1.0, x, d, false, w, d, true, 0.0, &mut logits, c);
    logits
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for j in 1..c {
                if row[j] + b[j] > row[best] + b[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Recall@K: fraction of queries whose `k` nearest gallery items (cosine on
/// the first `m` columns) include one with the query's label. Gallery items
/// sharing the query's source id are skipped.
pub fn retrieval_recall(queries: &EmbeddingSet, gallery: &EmbeddingSet, k: usize, m: usize) -> Result<f64> {
    let (ql, gl) = (queries.labels()?, gallery.labels()?);
    if k == 0 || k > gallery.len() {
        return Err(Error::InvalidK { k, available: gallery.len() });
    }
    if queries.is_empty() {
        return Ok(0.0);
    }
    let keep = |q: usize, g: usize| queries.source_ids[q] != gallery.source_ids[g];
    let before = |a: usize, b: usize| {
        gallery.source_ids[a]
            .cmp(&gallery.source_ids[b])
            .then_with(|| gl[a].cmp(&gl[b]))
            .then_with(|| a.cmp(&b))
    };
    let mut hits = 0usize;
    nearest(queries, gallery, k, m, &keep, &before, |qi, nb| {
        if nb.iter().any(|n| gl[n.index] == ql[qi]) {
            hits += 1;
        }
    })?;
    Ok(hits as f64 / queries.len() as f64)
}

/// First three principal components of the `[G², dim]` tokens (first `m`
/// columns) as a G×G RGB raster, each component min-max scaled to
/// `[0, 255]`. Components beyond the rank are filled with 128.
pub fn pca_rgb_map(tokens: &[f32], dim: usize, m: usize) -> Result<RgbImage> {
    check_dim(m, dim)?;
    if tokens.len() % dim != 0 {
        return Err(Error::shape(format!("{} values do not form rows of width {dim}", tokens.len())));
    }
    let n = tokens.len() / dim;
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n || n < 3 {
        return Err(Error::shape(format!("{n} tokens do not form a square grid of at least 3 cells")));
    }
    let x = DMatrix::<f64>::from_fn(n, m, |i, j| tokens[i * dim + j] as f64);
    let scale = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let mean = x.row_mean();
    let xc = DMatrix::from_fn(n, m, |i, j| x[(i, j)] - mean[j]);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);

    let mut comps: Vec<(f64, Vec<f64>)> = if m <= n {
        let eig = SymmetricEigen::new(xc.transpose() * &xc);
        (0..m).map(|c| (eig.eigenvalues[c], eig.eigenvectors.column(c).iter().copied().collect())).collect()
    } else {
        let eig = SymmetricEigen::new(&xc * xc.transpose());
        (0..n)
            .filter(|&c| eig.eigenvalues[c] > tol)
            .map(|c| {
                let lam = eig.eigenvalues[c];
                let v = xc.transpose() * eig.eigenvectors.column(c) / lam.sqrt();
                (lam, v.iter().copied().collect())
            })
            .collect()
    };
    comps.retain(|(lam, _)| *lam > tol);
    comps.sort_by(|a, b| b.0.total_cmp(&a.0));
    comps.truncate(3);

    let mut channels = vec![vec![128u8; n]; 3];
    for (c, (_, mut v)) in comps.into_iter().enumerate() {
        let lead = (0..v.len()).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let scores: Vec<f64> = (0..n).map(|i| (0..m).map(|j| xc[(i, j)] * v[j]).sum()).collect();
        let (lo, hi) = scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &s| (l.min(s), h.max(s)));
        if hi - lo > 0.0 {
            for (o, s) in channels[c].iter_mut().zip(&scores) {
                *o = (255.0 * (s - lo) / (hi - lo)).round() as u8;
            }
        }
    }
    Ok(RgbImage::from_fn(g as u32, g as u32, |x, y| {
        let i = y as usize * g + x as usize;
        image::Rgb([channels[0][i], channels[1][i], channels[2][i]])
    }))
}

/// Nearest-neighbor enlargement for export.
pub fn upscale(img: &RgbImage, factor: u32) -> RgbImage {
    let f = factor.max(1);
    RgbImage::from_fn(img.width() * f, img.height() * f, |x, y| *img.get_pixel(x / f, y / f))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    pub dim: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub repeats: usize,
}

/// Wall-clock of `knn_classify` (all `n` points queried against all `n`)
/// at each prefix width of one set of Gaussian embeddings.
pub fn knn_runtime_profile(n: usize, dims: &[usize], k: usize, repeats: usize, seed: u64) -> Result<Vec<RuntimeRow>> {
    let width = dims.iter().copied().max().ok_or_else(|| Error::config("no dims to profile"))?;
    let mut rng = stream(seed, &[0x7e57]);
    let vectors: Vec<f32> = (0..n * width).map(|_| StandardNormal.sample(&mut rng)).collect();
    let set = EmbeddingSet::new(vectors, width, Some((0..n).map(|i| i % 10).collect()), (0..n).map(|i| format!("r{i}")).collect(), "random")?;
    dims.iter()
        .map(|&m| {
            let times = (0..repeats.max(1))
                .map(|_| {
                    let t0 = Instant::now();
                    knn_classify(&set, &set, k, m).map(|_| t0.elapsed().as_secs_f64())
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean, std) = mean_std(&times);
            Ok(RuntimeRow {
                dim: m,
                mean_seconds: mean,
                std_seconds: std,
                repeats: times.len(),
            })
        })
        .collect()
}

/// Mean ± std of a per-image statistic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherImpact {
    pub teacher: String,
    /// Cosine between projected student CLS and teacher CLS, per image.
    pub summary: Stat,
    /// Mean tokenwise cosine between projected student patches and
    /// standardized teacher patches, per image.
    pub features: Stat,
}

/// Rebuilds the head bank stored in a training archive.
pub fn heads_from_archive(archive: &Archive) -> Result<HeadBank<f32>> {
    if !archive.has_prefix("head") || !archive.has_meta("teachers") {
        return Err(Error::MissingHeads);
    }
    let teachers: Vec<TeacherDim> = archive.meta("teachers")?;
    let levels: NestingLevels = archive.meta("levels")?;
    let mut bank = build_head_bank(levels.width(), &teachers, &levels, 0)?;
    archive.load_params("", &mut bank)?;
    Ok(bank)
}

/// Agreement of full-width head outputs with each teacher over `manifest`.
/// Teacher patch statistics are pooled over the whole dataset.
pub fn teacher_impact(
    backbone: &VisionTransformer<f32>,
    heads: &HeadBank<f32>,
    teachers: &[Box<dyn Teacher>],
    manifest: &DatasetManifest,
    batch_size: usize,
) -> Result<Vec<TeacherImpact>> {
    if manifest.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let d = backbone.width();
    let g = backbone.config.grid();
    let full = *heads.levels.levels().iter().max().ok_or(Error::MissingHeads)?;
    let mut student_cls = Vec::new();
    let mut student_patches = Vec::new();
    let mut teacher_cls: Vec<Vec<f32>> = vec![Vec::new(); teachers.len()];
    let mut teacher_patches: Vec<Vec<f32>> = vec![Vec::new(); teachers.len()];
    let indices: Vec<usize> = (0..manifest.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let images = chunk
            .iter()
            .map(|&i| manifest.records[i].load().map(|t| eval_image(&t)))
            .collect::<Result<Vec<_>>>()?;
        let s = backbone.forward(&images)?;
        student_cls.extend(s.cls_matrix());
        student_patches.extend(s.patch_matrix());
        for (ti, t) in teachers.iter().enumerate() {
            let tb = t.forward(&images)?;
            teacher_cls[ti].extend(tb.cls_matrix());
            for b in 0..images.len() {
                teacher_patches[ti].extend(resample_patch_grid(tb.patches(b), tb.grid, tb.dim, g)?);
            }
        }
    }
    let n = manifest.len();
    let tokens = g * g;
    let mut out = Vec::with_capacity(teachers.len());
    for (ti, t) in teachers.iter().enumerate() {
        let name = &t.spec().name;
        let dt = t.spec().dim;
        let cls_head = heads.head(name, HeadKind::Cls, full)?;
        let patch_head = heads.head(name, HeadKind::Patch, full)?;
        let proj_cls = cls_head.forward(&student_cls, d, n);
        let summary: Vec<f64> = (0..n)
            .map(|b| 1.0 - cosine_loss(&proj_cls[b * dt..(b + 1) * dt], &teacher_cls[ti][b * dt..(b + 1) * dt]) as f64)
            .collect();
        let target = standardize_patch_tokens(&teacher_patches[ti], &StandardizationStats::from_tokens(&teacher_patches[ti], dt));
        let features: Vec<f64> = (0..n)
            .map(|b| {
                let proj = patch_head.forward(&student_patches[b * tokens * d..(b + 1) * tokens * d], d, tokens);
                let tgt = &target[b * tokens * dt..(b + 1) * tokens * dt];
                (0..tokens)
                    .map(|p| 1.0 - cosine_loss(&proj[p * dt..(p + 1) * dt], &tgt[p * dt..(p + 1) * dt]) as f64)
                    .sum::<f64>()
                    / tokens as f64
            })
            .collect();
        out.push(TeacherImpact {
            teacher: name.clone(),
            summary: Stat::of(&summary),
            features: Stat::of(&features),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelCosine {
    pub teacher: String,
    pub level: usize,
    pub mean: f64,
}

/// Mean cosine between projected student CLS and teacher CLS for every
/// (teacher, level) head, on evaluation-preprocessed `images`.
pub fn projected_cls_cosine(
    backbone: &VisionTransformer<f32>,
    heads: &HeadBank<f32>,
    teachers: &[Box<dyn Teacher>],
    images: &[Image],
) -> Result<Vec<LevelCosine>> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("no held-out images".into()));
    }
    let d = backbone.width();
    let n = images.len();
    let cls = backbone.forward(images)?.cls_matrix();
    let mut out = Vec::new();
    for t in teachers {
        let name = &t.spec().name;
        let dt = t.spec().dim;
        let target = t.forward(images)?.cls_matrix();
        for &m in heads.levels.levels() {
            let proj = heads.head(name, HeadKind::Cls, m)?.forward(&cls, d, n);
            let mean = (0..n)
                .map(|b| 1.0 - cosine_loss(&proj[b * dt..(b + 1) * dt], &target[b * dt..(b + 1) * dt]) as f64)
                .sum::<f64>()
                / n as f64;
            out.push(LevelCosine {
                teacher: name.clone(),
                level: m,
                mean,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThroughputConfig {
    pub batch_size: usize,
    pub batches: usize,
    pub warmup: usize,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for ThroughputConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            batches: 500,
            warmup: WARMUP_BATCHES,
            precision: Precision::F16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    /// Images per second, mean over timed batches.
    pub mean: f64,
    pub std: f64,
    pub batches: usize,
    pub batch_size: usize,
    pub requested: Precision,
    /// Precision actually executed.
    pub precision: Precision,
}

/// Forward-pass throughput on random 224 px inputs; warmup batches are
/// excluded. Half precision runs as f32.
pub fn throughput_benchmark(model: &VisionTransformer<f32>, cfg: &ThroughputConfig) -> Result<Throughput> {
    if cfg.batch_size == 0 || cfg.batches == 0 {
        return Err(Error::config("throughput needs a positive batch size and batch count"));
    }
    if cfg.precision == Precision::F16 {
        log::warn!("half precision unavailable on this backend; measuring f32");
    }
    let size = model.config.image_size;
    let mut rng = stream(derive_seed(cfg.seed, &[0x7b]), &[]);
    let images: Vec<Image> = (0..cfg.batch_size)
        .map(|_| {
            let mut img = Image::new(size, size);
            img.data.iter_mut().for_each(|v| *v = rand::Rng::random::<f32>(&mut rng));
            img
        })
        .collect();
    for _ in 0..cfg.warmup {
        model.forward(&images)?;
    }
    let mut rates = Vec::with_capacity(cfg.batches);
    for _ in 0..cfg.batches {
        let t0 = Instant::now();
        model.forward(&images)?;
        rates.push(cfg.batch_size as f64 / t0.elapsed().as_secs_f64().max(1e-12));
    }
    let (mean, std) = mean_std(&rates);
    Ok(Throughput {
        mean,
        std,
        batches: cfg.batches,
        batch_size: cfg.batch_size,
        requested: cfg.precision,
        precision: Precision::F32,
    })
}
