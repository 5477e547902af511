//! Multi-teacher, multi-level distillation objective.
//!
//! Per (teacher, level) the CLS term is the batch mean of `1 − cos` between
//! the projected student CLS and the teacher CLS; the patch term is the
//! mean squared error over batch, tokens and channels between projected
//! student patches and batch-standardized teacher patches. Terms are summed
//! over teachers and levels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::heads::{HeadBank, HeadCache, HeadKind};
use crate::nn::Scalar;
use crate::teacher::standardize_batch;
use crate::{Error, Result};

pub const COSINE_EPS: f64 = 1e-8;

/// `1 − ⟨a,b⟩ / max(‖a‖‖b‖, eps)`.
pub fn cosine_loss<T: Scalar>(a: &[T], b: &[T]) -> T {
    cosine_loss_grad(a, b).0
}

/// Loss and its gradient with respect to `a`.
pub fn cosine_loss_grad<T: Scalar>(a: &[T], b: &[T]) -> (T, Vec<T>) {
    let (mut dot, mut na2, mut nb2) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.f64(), y.f64());
        dot += x * y;
        na2 += x * x;
        nb2 += y * y;
    }
    let (na, nb) = (na2.sqrt(), nb2.sqrt());
    let denom = na * nb;
    let grad = if denom > COSINE_EPS {
        let cos = dot / denom;
        a.iter()
            .zip(b)
            .map(|(&x, &y)| T::lit(-(y.f64() / denom - cos * x.f64() / na2)))
            .collect()
    } else {
        b.iter().map(|&y| T::lit(-y.f64() / COSINE_EPS)).collect()
    };
    (T::lit(1.0 - dot / denom.max(COSINE_EPS)), grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub patch: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.0, patch: 1.0 }
    }
}

/// Student tokens of one crop: CLS rows `[batch, d]` and, for the aligned
/// crop, patch rows `[batch · tokens, d]`.
#[derive(Clone, Copy, Debug)]
pub struct StudentTokens<'a, T> {
    pub batch: usize,
    pub cls: &'a [T],
    pub patches: Option<&'a [T]>,
}

/// Teacher targets of one crop, already resampled to the student grid.
#[derive(Clone, Copy, Debug)]
pub struct TeacherTokens<'a, T> {
    pub name: &'a str,
    pub cls: &'a [T],
    pub patches: Option<&'a [T]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub cls_aligned: f64,
    pub cls_nonaligned: f64,
    pub patch_aligned: f64,
    /// Unweighted terms keyed `"{component}/{teacher}/{level}"`.
    pub breakdown: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.breakdown.values().all(|v| v.is_finite())
    }
}

/// Gradients with respect to the student tokens that entered the loss.
#[derive(Clone, Debug, Default)]
pub struct StudentGrads<T> {
    pub cls_aligned: Vec<T>,
    pub patches_aligned: Vec<T>,
    pub cls_nonaligned: Vec<T>,
}

#[derive(Clone, Copy, PartialEq)]
enum Part {
    ClsAligned,
    ClsNonaligned,
    Patch,
}

struct Term<T> {
    head: usize,
    part: Part,
    rows: usize,
    cache: HeadCache<T>,
    dy: Vec<T>,
}

fn check_teachers<T: Scalar>(bank: &HeadBank<T>, teachers: &[TeacherTokens<'_, T>]) -> Result<Vec<usize>> {
    let idx = teachers.iter().map(|t| bank.teacher_index(t.name)).collect::<Result<Vec<_>>>()?;
    for t in &bank.teachers {
        if !teachers.iter().any(|x| x.name == t.name) {
            return Err(Error::Key(format!("missing outputs for teacher `{}`", t.name)));
        }
    }
    Ok(idx)
}

fn cls_terms<T: Scalar>(
    bank: &HeadBank<T>,
    student: &StudentTokens<'_, T>,
    teachers: &[TeacherTokens<'_, T>],
    part: Part,
    scale: f64,
    report: &mut BTreeMap<String, f64>,
    terms: &mut Vec<Term<T>>,
) -> Result<f64> {
    let idx = check_teachers(bank, teachers)?;
    let (b, d) = (student.batch, bank.width);
    if student.cls.len() != b * d {
        return Err(Error::shape(format!("student CLS has {} values, expected {}", student.cls.len(), b * d)));
    }
    let label = if part == Part::ClsAligned { "cls_aligned" } else { "cls_nonaligned" };
    let mut sum = 0.0;
    for (t, &ti) in teachers.iter().zip(&idx) {
        let dt = bank.teachers[ti].dim;
        if t.cls.len() != b * dt {
            return Err(Error::shape(format!("teacher `{}` CLS has {} values, expected {}", t.name, t.cls.len(), b * dt)));
        }
        for &m in bank.levels.levels() {
            let hi = bank.index(ti, HeadKind::Cls, m)?;
            let (y, cache) = bank.head_at(hi).forward_cached(student.cls, d, b);
            let mut dy = vec![T::zero(); b * dt];
            let mut term = 0.0;
            for r in 0..b {
                let (l, g) = cosine_loss_grad(&y[r * dt..(r + 1) * dt], &t.cls[r * dt..(r + 1) * dt]);
                term += l.f64();
                for (o, gv) in dy[r * dt..(r + 1) * dt].iter_mut().zip(g) {
                    *o = gv * T::lit(scale / b as f64);
                }
            }
            term /= b as f64;
            report.insert(format!("{label}/{}/{m}", t.name), term);
            sum += term;
            terms.push(Term {
                head: hi,
                part,
                rows: b,
                cache,
                dy,
            });
        }
    }
    Ok(sum)
}

fn patch_terms<T: Scalar>(
    bank: &HeadBank<T>,
    patches: &[T],
    teachers: &[TeacherTokens<'_, T>],
    scale: f64,
    report: &mut BTreeMap<String, f64>,
    terms: &mut Vec<Term<T>>,
) -> Result<f64> {
    let idx = check_teachers(bank, teachers)?;
    let d = bank.width;
    let rows = patches.len() / d;
    let mut sum = 0.0;
    for (t, &ti) in teachers.iter().zip(&idx) {
        let dt = bank.teachers[ti].dim;
        let raw = t
            .patches
            .ok_or_else(|| Error::Key(format!("missing patch outputs for teacher `{}`", t.name)))?;
        if raw.len() != rows * dt {
            return Err(Error::shape(format!(
                "teacher `{}` has {} patch values, student grid needs {}",
                t.name,
                raw.len(),
                rows * dt
            )));
        }
        let target = standardize_batch(raw, dt);
        let n = (rows * dt) as f64;
        for &m in bank.levels.levels() {
            let hi = bank.index(ti, HeadKind::Patch, m)?;
            let (y, cache) = bank.head_at(hi).forward_cached(patches, d, rows);
            let mut se = 0.0;
            let k = T::lit(2.0 * scale / n);
            let dy = y
                .iter()
                .zip(&target)
                .map(|(&p, &q)| {
                    let e = p - q;
                    se += e.f64() * e.f64();
                    e * k
                })
                .collect();
            let term = se / n;
            report.insert(format!("patch_aligned/{}/{m}", t.name), term);
            sum += term;
            terms.push(Term {
                head: hi,
                part: Part::Patch,
                rows,
                cache,
                dy,
            });
        }
    }
    Ok(sum)
}

/// Sum over teachers and levels of batch-mean cosine losses.
pub fn cls_loss<T: Scalar>(
    bank: &HeadBank<T>,
    student: &StudentTokens<'_, T>,
    teachers: &[TeacherTokens<'_, T>],
) -> Result<(f64, BTreeMap<String, f64>)> {
    let mut report = BTreeMap::new();
    let v = cls_terms(bank, student, teachers, Part::ClsAligned, 1.0, &mut report, &mut Vec::new())?;
    Ok((v, report))
}

/// Sum over teachers and levels of the standardized patch MSE.
pub fn patch_loss<T: Scalar>(
    bank: &HeadBank<T>,
    student: &StudentTokens<'_, T>,
    teachers: &[TeacherTokens<'_, T>],
) -> Result<(f64, BTreeMap<String, f64>)> {
    let patches = student
        .patches
        .ok_or_else(|| Error::Key("student patch tokens missing".into()))?;
    let mut report = BTreeMap::new();
    let v = patch_terms(bank, patches, teachers, 1.0, &mut report, &mut Vec::new())?;
    Ok((v, report))
}

/// The full objective. `nonaligned` is `None` when the non-aligned crop
/// is disabled, in which case its component is exactly zero.
pub fn total_loss<T: Scalar>(
    bank: &HeadBank<T>,
    aligned: (&StudentTokens<'_, T>, &[TeacherTokens<'_, T>]),
    nonaligned: Option<(&StudentTokens<'_, T>, &[TeacherTokens<'_, T>])>,
    weights: LossWeights,
) -> Result<LossReport> {
    Ok(evaluate(bank, aligned, nonaligned, weights)?.0)
}

/// Evaluates the objective, accumulates head gradients into `bank` and
/// returns gradients for the student tokens.
pub fn total_loss_backward<T: Scalar>(
    bank: &mut HeadBank<T>,
    aligned: (&StudentTokens<'_, T>, &[TeacherTokens<'_, T>]),
    nonaligned: Option<(&StudentTokens<'_, T>, &[TeacherTokens<'_, T>])>,
    weights: LossWeights,
) -> Result<(LossReport, StudentGrads<T>)> {
    let (report, terms) = evaluate(bank, aligned, nonaligned, weights)?;
    let d = bank.width;
    let (sa, na) = (aligned.0, nonaligned.map(|n| n.0));
    let mut grads = StudentGrads {
        cls_aligned: vec![T::zero(); sa.cls.len()],
        patches_aligned: vec![T::zero(); sa.patches.map_or(0, |p| p.len())],
        cls_nonaligned: vec![T::zero(); na.map_or(0, |n| n.cls.len())],
    };
    for term in terms {
        let (x, dx) = match term.part {
            Part::ClsAligned => (sa.cls, &mut grads.cls_aligned),
            Part::ClsNonaligned => (na.expect("non-aligned term").cls, &mut grads.cls_nonaligned),
            Part::Patch => (sa.patches.expect("patch term"), &mut grads.patches_aligned),
        };
        bank.head_at_mut(term.head)
            .backward(x, d, term.rows, &term.cache, &term.dy, Some(dx));
    }
    Ok((report, grads))
}

fn evaluate<T: Scalar>(
    bank: &HeadBank<T>,
    aligned: (&StudentTokens<'_, T>, &[TeacherTokens<'_, T>]),
    nonaligned: Option<(&StudentTokens<'_, T>, &[TeacherTokens<'_, T>])>,
    weights: LossWeights,
) -> Result<(LossReport, Vec<Term<T>>)> {
    let mut breakdown = BTreeMap::new();
    let mut terms = Vec::new();
    let cls_aligned = cls_terms(bank, aligned.0, aligned.1, Part::ClsAligned, weights.cls, &mut breakdown, &mut terms)?;
    let cls_nonaligned = match nonaligned {
        Some((s, t)) => cls_terms(bank, s, t, Part::ClsNonaligned, weights.cls, &mut breakdown, &mut terms)?,
        None => 0.0,
    };
    let patch_aligned = if weights.patch != 0.0 {
        let patches = aligned
            .0
            .patches
            .ok_or_else(|| Error::Key("student patch tokens missing".into()))?;
        patch_terms(bank, patches, aligned.1, weights.patch, &mut breakdown, &mut terms)?
    } else {
        0.0
    };
    let total = weights.cls * (cls_aligned + cls_nonaligned) + weights.patch * patch_aligned;
    Ok((
        LossReport {
            total,
            cls_aligned,
            cls_nonaligned,
            patch_aligned,
            breakdown,
        },
        terms,
    ))
}
