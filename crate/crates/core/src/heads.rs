//! Per-teacher, per-level projection heads over embedding prefixes.

use std::fmt;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::nn::{silu, silu_backward, Linear, Param, Parameters, Scalar};
use crate::rng::{derive_seed, Rng};
use crate::{Error, Result};

/// Strictly decreasing prefix widths, the first equal to the student width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NestingLevels(Vec<usize>);

impl NestingLevels {
    pub fn new(levels: Vec<usize>, width: usize) -> Result<Self> {
        if levels.first() != Some(&width) {
            return Err(Error::config(format!("largest nesting level must equal the width {width}, got {levels:?}")));
        }
        if levels.windows(2).any(|w| w[1] >= w[0]) || levels.iter().any(|&m| m == 0) {
            return Err(Error::config(format!("nesting levels {levels:?} must be strictly decreasing and positive")));
        }
        Ok(Self(levels))
    }

    pub fn levels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn width(&self) -> usize {
        self.0[0]
    }

    pub fn position(&self, m: usize) -> Option<usize> {
        self.0.iter().position(|&l| l == m)
    }
}

/// `[d, d/2, d/4, ...]` with `depth` entries.
pub fn nesting_levels(d: usize, depth: usize) -> Result<NestingLevels> {
    if depth == 0 || depth > 63 || d < (1usize << (depth - 1)) {
        return Err(Error::config(format!("width {d} cannot be halved into {depth} nesting levels")));
    }
    NestingLevels::new((0..depth).map(|i| d >> i).collect(), d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Cls,
    Patch,
}

impl HeadKind {
    pub const ALL: [HeadKind; 2] = [HeadKind::Cls, HeadKind::Patch];
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Cls => "cls",
            HeadKind::Patch => "patch",
        })
    }
}

/// Three affine layers `m → d_t → d_t → d_t` with SiLU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub fc3: Linear<T>,
}

/// Activations kept for [`ProjectionHead::backward`].
#[derive(Clone, Debug, Default)]
pub struct HeadCache<T> {
    pre1: Vec<T>,
    act1: Vec<T>,
    pre2: Vec<T>,
    act2: Vec<T>,
}

impl<T: Scalar> ProjectionHead<T> {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::fan_in_uniform(input, output, rng),
            fc2: Linear::fan_in_uniform(output, output, rng),
            fc3: Linear::fan_in_uniform(output, output, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.fc3.out_dim()
    }

    /// Projects `rows` inputs whose rows are `ldx` apart, reading only the
    /// first `input_dim` columns of each.
    pub fn forward(&self, x: &[T], ldx: usize, rows: usize) -> Vec<T> {
        self.forward_cached(x, ldx, rows).0
    }

    pub fn forward_cached(&self, x: &[T], ldx: usize, rows: usize) -> (Vec<T>, HeadCache<T>) {
        let o = self.output_dim();
        let mut c = HeadCache {
            pre1: vec![T::zero(); rows * o],
            act1: vec![T::zero(); rows * o],
            pre2: vec![T::zero(); rows * o],
            act2: vec![T::zero(); rows * o],
        };
        self.fc1.forward(x, ldx, rows, &mut c.pre1);
        silu(&c.pre1, &mut c.act1);
        self.fc2.forward(&c.act1, o, rows, &mut c.pre2);
        silu(&c.pre2, &mut c.act2);
        let mut y = vec![T::zero(); rows * o];
        self.fc3.forward(&c.act2, o, rows, &mut y);
        (y, c)
    }

    /// Accumulates parameter gradients and, when given, adds the input
    /// gradient into the first `input_dim` columns of `dx`.
    pub fn backward(&mut self, x: &[T], ldx: usize, rows: usize, cache: &HeadCache<T>, dy: &[T], dx: Option<&mut [T]>) {
        let o = self.output_dim();
        let mut d2 = vec![T::zero(); rows * o];
        self.fc3.backward(&cache.act2, o, rows, dy, Some((&mut d2, o)));
        silu_backward(&cache.pre2, &mut d2);
        let mut d1 = vec![T::zero(); rows * o];
        self.fc2.backward(&cache.act1, o, rows, &d2, Some((&mut d1, o)));
        silu_backward(&cache.pre1, &mut d1);
        self.fc1.backward(x, ldx, rows, &d1, dx.map(|d| (d, ldx)));
    }
}

impl<T: Scalar> Parameters<T> for ProjectionHead<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.fc1.visit_params(&format!("{prefix}/fc1"), f);
        self.fc2.visit_params(&format!("{prefix}/fc2"), f);
        self.fc3.visit_params(&format!("{prefix}/fc3"), f);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param<T>)) {
        self.fc1.visit_params_mut(&format!("{prefix}/fc1"), f);
        self.fc2.visit_params_mut(&format!("{prefix}/fc2"), f);
        self.fc3.visit_params_mut(&format!("{prefix}/fc3"), f);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherDim {
    pub name: String,
    pub dim: usize,
}

/// One head per (teacher, kind, level), stored teacher-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadBank<T> {
    pub width: usize,
    pub teachers: Vec<TeacherDim>,
    pub levels: NestingLevels,
    heads: Vec<ProjectionHead<T>>,
}

pub fn build_head_bank<T: Scalar>(
    d: usize,
    teachers: &[TeacherDim],
    levels: &NestingLevels,
    seed: u64,
) -> Result<HeadBank<T>> {
    if levels.width() != d {
        return Err(Error::config(format!(
            "largest nesting level {} differs from student width {d}",
            levels.width()
        )));
    }
    let mut heads = Vec::with_capacity(teachers.len() * 2 * levels.len());
    for (ti, t) in teachers.iter().enumerate() {
        if t.dim == 0 {
            return Err(Error::config(format!("teacher `{}` has dim 0", t.name)));
        }
        for (ki, _) in HeadKind::ALL.iter().enumerate() {
            for &m in levels.levels() {
                let mut rng = Rng::seed_from_u64(derive_seed(seed, &[ti as u64, ki as u64, m as u64]));
                heads.push(ProjectionHead::new(m, t.dim, &mut rng));
            }
        }
    }
    Ok(HeadBank {
        width: d,
        teachers: teachers.to_vec(),
        levels: levels.clone(),
        heads,
    })
}

impl<T: Scalar> HeadBank<T> {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn teacher_index(&self, teacher: &str) -> Result<usize> {
        self.teachers
            .iter()
            .position(|t| t.name == teacher)
            .ok_or_else(|| Error::Key(format!("no heads for teacher `{teacher}`")))
    }

    pub fn index(&self, teacher: usize, kind: HeadKind, m: usize) -> Result<usize> {
        let li = self
            .levels
            .position(m)
            .ok_or_else(|| Error::Key(format!("no nesting level {m} (levels {:?})", self.levels.levels())))?;
        if teacher >= self.teachers.len() {
            return Err(Error::Key(format!("teacher index {teacher} out of range")));
        }
        let ki = HeadKind::ALL.iter().position(|&k| k == kind).unwrap();
        Ok((teacher * 2 + ki) * self.levels.len() + li)
    }

    pub fn head(&self, teacher: &str, kind: HeadKind, m: usize) -> Result<&ProjectionHead<T>> {
        let i = self.index(self.teacher_index(teacher)?, kind, m)?;
        Ok(&self.heads[i])
    }

    pub fn head_at(&self, index: usize) -> &ProjectionHead<T> {
        &self.heads[index]
    }

    pub fn head_at_mut(&mut self, index: usize) -> &mut ProjectionHead<T> {
        &mut self.heads[index]
    }

    /// Same bank reduced to the named teachers, in the given order.
    pub fn select(&self, names: &[&str]) -> Result<HeadBank<T>> {
        let mut teachers = Vec::new();
        let mut heads = Vec::new();
        let per = 2 * self.levels.len();
        for n in names {
            let ti = self.teacher_index(n)?;
            teachers.push(self.teachers[ti].clone());
            heads.extend_from_slice(&self.heads[ti * per..(ti + 1) * per]);
        }
        Ok(HeadBank {
            width: self.width,
            teachers,
            levels: self.levels.clone(),
            heads,
        })
    }

    pub fn cast<U: Scalar>(&self) -> HeadBank<U> {
        HeadBank {
            width: self.width,
            teachers: self.teachers.clone(),
            levels: self.levels.clone(),
            heads: self
                .heads
                .iter()
                .map(|h| ProjectionHead {
                    fc1: h.fc1.cast(),
                    fc2: h.fc2.cast(),
                    fc3: h.fc3.cast(),
                })
                .collect(),
        }
    }
}

impl<T: Scalar> Parameters<T> for HeadBank<T> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        let per = 2 * self.levels.len();
        for (i, h) in self.heads.iter().enumerate() {
            let t = &self.teachers[i / per].name;
            let kind = HeadKind::ALL[(i % per) / self.levels.len()];
            let m = self.levels.levels()[i % self.levels.len()];
            let base = if prefix.is_empty() { "head".to_string() } else { format!("{prefix}/head") };
            h.visit_params(&format!("{base}/{t}/{kind}/{m}"), f);
        }
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param<T>)) {
        let per = 2 * self.levels.len();
        let nl = self.levels.len();
        let levels = self.levels.levels().to_vec();
        let names: Vec<String> = self.teachers.iter().map(|t| t.name.clone()).collect();
        for (i, h) in self.heads.iter_mut().enumerate() {
            let kind = HeadKind::ALL[(i % per) / nl];
            let base = if prefix.is_empty() { "head".to_string() } else { format!("{prefix}/head") };
            h.visit_params_mut(&format!("{base}/{}/{kind}/{}", names[i / per], levels[i % nl]), f);
        }
    }
}

/// Projects one CLS vector (length `d`) through head `(teacher, cls, m)`.
pub fn project_cls<T: Scalar>(bank: &HeadBank<T>, cls: &[T], teacher: &str, m: usize) -> Result<Vec<T>> {
    check_width(bank, cls.len(), 1)?;
    Ok(bank.head(teacher, HeadKind::Cls, m)?.forward(cls, bank.width, 1))
}

/// Projects `[tokens, d]` patch embeddings through head `(teacher, patch, m)`.
pub fn project_patches<T: Scalar>(bank: &HeadBank<T>, patches: &[T], teacher: &str, m: usize) -> Result<Vec<T>> {
    let rows = patches.len() / bank.width.max(1);
    check_width(bank, patches.len(), rows)?;
    Ok(bank.head(teacher, HeadKind::Patch, m)?.forward(patches, bank.width, rows))
}

fn check_width<T>(bank: &HeadBank<T>, len: usize, rows: usize) -> Result<()> {
    if rows == 0 || len != rows * bank.width {
        return Err(Error::shape(format!("{len} values are not rows of width {}", bank.width)));
    }
    Ok(())
}
