//! Fixtures and independent checks shared by the integration targets.
#![allow(dead_code)]

use std::collections::BTreeMap;

use pathryoshka::eval::EmbeddingSet;
use pathryoshka::heads::{build_head_bank, nesting_levels, project_cls, project_patches, HeadBank, TeacherDim};
use pathryoshka::loss::{total_loss, total_loss_backward, LossWeights, StudentTokens, TeacherTokens};
use pathryoshka::nn::Parameters;
use pathryoshka::rng::stream;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, &[0x6a]);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub fn teachers(dims: &[usize]) -> Vec<TeacherDim> {
    dims.iter()
        .enumerate()
        .map(|(i, &dim)| TeacherDim { name: format!("t{i}"), dim })
        .collect()
}

pub fn bank(width: usize, depth: usize, dims: &[usize], seed: u64) -> HeadBank<f64> {
    build_head_bank(width, &teachers(dims), &nesting_levels(width, depth).unwrap(), seed).unwrap()
}

/// Counts heads whose output changed when input components beyond their
/// prefix were perturbed `trials` times; 0 means the contract holds.
pub fn prefix_violations(bank: &HeadBank<f64>, rows: usize, trials: usize, seed: u64) -> usize {
    let d = bank.width;
    let mut rng = stream(seed, &[0x9f]);
    let mut bad = 0;
    for t in &bank.teachers {
        for &m in bank.levels.levels() {
            let x = gaussian(rows * d, rng.random());
            let base_cls = project_cls(bank, &x[..d], &t.name, m).unwrap();
            let base_patch = project_patches(bank, &x, &t.name, m).unwrap();
            for _ in 0..trials {
                let mut y = x.clone();
                for r in 0..rows {
                    for v in &mut y[r * d + m..(r + 1) * d] {
                        *v += rng.random_range(-100.0..100.0);
                    }
                }
                let cls = project_cls(bank, &y[..d], &t.name, m).unwrap();
                let patch = project_patches(bank, &y, &t.name, m).unwrap();
                let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits());
                if !same(&cls, &base_cls) || !same(&patch, &base_patch) {
                    bad += 1;
                }
            }
        }
    }
    bad
}

/// Inputs of a small two-crop loss evaluation in f64.
pub struct LossFixture {
    pub bank: HeadBank<f64>,
    pub batch: usize,
    pub tokens: usize,
    pub cls_a: Vec<f64>,
    pub cls_n: Vec<f64>,
    pub patches: Vec<f64>,
    pub t_cls_a: Vec<Vec<f64>>,
    pub t_cls_n: Vec<Vec<f64>>,
    pub t_patches: Vec<Vec<f64>>,
}

impl LossFixture {
    pub fn new(width: usize, depth: usize, dims: &[usize], batch: usize, tokens: usize, seed: u64) -> Self {
        let bank = bank(width, depth, dims, seed);
        let g = |n: usize, k: u64| gaussian(n, seed.wrapping_mul(1000) + k);
        Self {
            cls_a: g(batch * width, 1),
            cls_n: g(batch * width, 2),
            patches: g(batch * tokens * width, 3),
            t_cls_a: dims.iter().enumerate().map(|(i, &dt)| g(batch * dt, 10 + i as u64)).collect(),
            t_cls_n: dims.iter().enumerate().map(|(i, &dt)| g(batch * dt, 20 + i as u64)).collect(),
            t_patches: dims
                .iter()
                .enumerate()
                .map(|(i, &dt)| g(batch * tokens * dt, 30 + i as u64).iter().enumerate().map(|(k, v)| 3.0 * v + (k % dt) as f64).collect())
                .collect(),
            bank,
            batch,
            tokens,
        }
    }

    fn names(&self) -> Vec<String> {
        self.bank.teachers.iter().map(|t| t.name.clone()).collect()
    }

    /// `(total loss, head grads by param, grads w.r.t. [cls_a, cls_n, patches])`.
    pub fn eval(&self, with_grads: bool) -> (f64, Vec<Vec<f64>>, [Vec<f64>; 3]) {
        let names = self.names();
        let sa = StudentTokens { batch: self.batch, cls: &self.cls_a, patches: Some(&self.patches) };
        let sn = StudentTokens { batch: self.batch, cls: &self.cls_n, patches: None };
        let ta: Vec<TeacherTokens<f64>> = names
            .iter()
            .enumerate()
            .map(|(i, n)| TeacherTokens { name: n, cls: &self.t_cls_a[i], patches: Some(&self.t_patches[i]) })
            .collect();
        let tn: Vec<TeacherTokens<f64>> = names
            .iter()
            .enumerate()
            .map(|(i, n)| TeacherTokens { name: n, cls: &self.t_cls_n[i], patches: None })
            .collect();
        if !with_grads {
            let r = total_loss(&self.bank, (&sa, &ta), Some((&sn, &tn)), LossWeights::default()).unwrap();
            return (r.total, Vec::new(), Default::default());
        }
        let mut bank = self.bank.clone();
        bank.zero_grad();
        let (r, g) = total_loss_backward(&mut bank, (&sa, &ta), Some((&sn, &tn)), LossWeights::default()).unwrap();
        let heads = bank.params().iter().map(|(_, p)| p.grad.clone()).collect();
        (r.total, heads, [g.cls_aligned, g.cls_nonaligned, g.patches_aligned])
    }
}

/// Central finite differences against analytic gradients on `slices`
/// random coordinates, half over head parameters and half over student
/// tokens. Returns the largest relative error.
pub fn loss_grad_check(fx: &mut LossFixture, slices: usize, seed: u64) -> f64 {
    let h = 1e-6;
    let (_, head_grads, token_grads) = fx.eval(true);
    let mut rng = stream(seed, &[0x67]);
    let mut worst: f64 = 0.0;
    let rel = |fd: f64, g: f64| (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
    for s in 0..slices {
        let (fd, g) = if s % 2 == 0 {
            let pi = rng.random_range(0..head_grads.len());
            let k = rng.random_range(0..head_grads[pi].len());
            let bump = |fx: &mut LossFixture, dv: f64| {
                fx.bank.params_mut()[pi].1.value[k] += dv;
            };
            bump(fx, h);
            let lp = fx.eval(false).0;
            bump(fx, -2.0 * h);
            let lm = fx.eval(false).0;
            bump(fx, h);
            ((lp - lm) / (2.0 * h), head_grads[pi][k])
        } else {
            let which = rng.random_range(0..3usize);
            let k = rng.random_range(0..token_grads[which].len());
            token_mut(fx, which)[k] += h;
            let lp = fx.eval(false).0;
            token_mut(fx, which)[k] -= 2.0 * h;
            let lm = fx.eval(false).0;
            token_mut(fx, which)[k] += h;
            ((lp - lm) / (2.0 * h), token_grads[which][k])
        };
        worst = worst.max(rel(fd, g));
    }
    worst
}

fn token_mut(fx: &mut LossFixture, which: usize) -> &mut Vec<f64> {
    match which {
        0 => &mut fx.cls_a,
        1 => &mut fx.cls_n,
        _ => &mut fx.patches,
    }
}

/// Per-channel mean and population std, computed column by column.
pub fn column_moments(x: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / dim;
    let mean: Vec<f64> = (0..dim).map(|j| (0..rows).map(|r| x[r * dim + j]).sum::<f64>() / rows as f64).collect();
    let std = (0..dim)
        .map(|j| ((0..rows).map(|r| (x[r * dim + j] - mean[j]).powi(2)).sum::<f64>() / rows as f64).sqrt())
        .collect();
    (mean, std)
}

pub fn set(rows: &[Vec<f32>], labels: &[usize]) -> EmbeddingSet {
    let dim = rows[0].len();
    EmbeddingSet::new(
        rows.concat(),
        dim,
        Some(labels.to_vec()),
        (0..rows.len()).map(|i| format!("s{i}")).collect(),
        "fixture",
    )
    .unwrap()
}

pub fn gaussian_rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f32>> {
    let mut rng = stream(seed, &[]);
    (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
}

pub fn oracle_cos(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] as f64 * b[i] as f64;
        na += a[i] as f64 * a[i] as f64;
        nb += b[i] as f64 * b[i] as f64;
    }
    let den = na.sqrt() * nb.sqrt();
    if den > 0.0 {
        dot / den
    } else {
        0.0
    }
}

pub fn oracle_knn(train: &[Vec<f32>], ytr: &[usize], test: &[Vec<f32>], k: usize, m: usize) -> Vec<usize> {
    test.iter()
        .map(|q| {
            let mut all: Vec<(f64, usize)> = train.iter().enumerate().map(|(i, t)| (oracle_cos(&q[..m], &t[..m]), i)).collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut votes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
            for &(s, i) in &all[..k] {
                let e = votes.entry(ytr[i]).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += 1.0 - s;
            }
            let mut v: Vec<(usize, usize, f64)> = votes.into_iter().map(|(c, (n, d))| (c, n, d)).collect();
            v.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.partial_cmp(&b.2).unwrap()).then(a.0.cmp(&b.0)));
            v[0].0
        })
        .collect()
}

pub fn oracle_recall(q: &[Vec<f32>], ql: &[usize], qid: &[String], g: &[Vec<f32>], gl: &[usize], gid: &[String], k: usize, m: usize) -> f64 {
    let mut hits = 0;
    for (qi, qv) in q.iter().enumerate() {
        let mut all: Vec<(f64, usize)> = g
            .iter()
            .enumerate()
            .filter(|(gi, _)| gid[*gi] != qid[qi])
            .map(|(gi, gv)| (oracle_cos(&qv[..m], &gv[..m]), gi))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(gid[a.1].cmp(&gid[b.1])).then(a.1.cmp(&b.1)));
        if all.iter().take(k).any(|&(_, gi)| gl[gi] == ql[qi]) {
            hits += 1;
        }
    }
    hits as f64 / q.len() as f64
}

pub fn clustered(seed: u64, n: usize, d: usize, classes: usize, spread: f32) -> (Vec<Vec<f32>>, Vec<usize>) {
    let centers = gaussian_rows(seed ^ 0xc, classes, d);
    let noise = gaussian_rows(seed, n, d);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let rows = noise
        .iter()
        .zip(&labels)
        .map(|(r, &c)| r.iter().zip(&centers[c]).map(|(e, m)| m + spread * e).collect())
        .collect();
    (rows, labels)
}
