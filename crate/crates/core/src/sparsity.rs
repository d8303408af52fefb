//! N:M semi-structured magnitude pruning.
//!
//! `N` is the number of weights *pruned* from every consecutive group of `M` weights along the
//! reduction dimension, so `4:16` removes four of every sixteen. Tensors are treated as rows
//! (`shape[0]`) of `product(shape[1..])` weights; groups never straddle two rows. A trailing
//! partial group of `g < M` weights loses `floor(g * N / M)` of them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quant::RealTensor;

#[derive(Debug, Error, PartialEq)]
pub enum SparsityError {
    #[error("pruned count N={n} must be smaller than group size M={m}")]
    InvalidRatio { n: usize, m: usize },
    #[error("group size must be at least 1")]
    ZeroGroup,
    #[error("shape mismatch: tensor {tensor:?} vs mask {mask:?}")]
    ShapeMismatch { tensor: Vec<usize>, mask: Vec<usize> },
    #[error("mask has {got} entries, shape {shape:?} needs {want}")]
    MaskLength { shape: Vec<usize>, got: usize, want: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

/// Splits a shape into `(rows, row_len)` along the reduction dimension.
pub fn row_layout(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [rows, rest @ ..] => (*rows, rest.iter().product()),
    }
}

/// Keep-mask for an N:M pruned tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NMSparsePattern {
    n: usize,
    m: usize,
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl NMSparsePattern {
    /// Mask that keeps every weight.
    pub fn dense(shape: &[usize], m: usize) -> Self {
        let len = shape.iter().product();
        Self { n: 0, m: m.max(1), shape: shape.to_vec(), keep: vec![true; len] }
    }

    /// Rebuilds a pattern from a stored mask, e.g. one read back from a model file.
    pub fn from_mask(n: usize, m: usize, shape: Vec<usize>, keep: Vec<bool>) -> Result<Self, SparsityError> {
        validate_ratio(n, m)?;
        let want: usize = shape.iter().product();
        if keep.len() != want {
            return Err(SparsityError::MaskLength { shape, got: keep.len(), want });
        }
        Ok(Self { n, m, shape, keep })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, idx: usize) -> bool {
        self.keep[idx]
    }

    /// Fraction of masked-out entries.
    pub fn sparsity(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        let pruned = self.keep.iter().filter(|&&k| !k).count();
        pruned as f64 / self.keep.len() as f64
    }

    /// Index ranges of every group, row by row.
    pub fn groups(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        groups(&self.shape, self.m)
    }

    /// Number of entries this pattern's ratio prunes from a group of `g` entries.
    pub fn pruned_in_group(&self, g: usize) -> usize {
        g * self.n / self.m
    }
}

fn groups(shape: &[usize], m: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let (rows, row_len) = row_layout(shape);
    (0..rows).flat_map(move |r| {
        let base = r * row_len;
        (0..row_len)
            .step_by(m)
            .map(move |s| base + s..base + (s + m).min(row_len))
    })
}

fn validate_ratio(n: usize, m: usize) -> Result<(), SparsityError> {
    if m == 0 {
        return Err(SparsityError::ZeroGroup);
    }
    if n >= m {
        return Err(SparsityError::InvalidRatio { n, m });
    }
    Ok(())
}

/// Prunes the `N` smallest-magnitude weights of every group of `M`.
///
/// Ties are broken by pruning the lower index first.
pub fn nm_prune(w: &RealTensor, n: usize, m: usize) -> Result<NMSparsePattern, SparsityError> {
    validate_ratio(n, m)?;
    let all_kept = NMSparsePattern::dense(w.shape(), m);
    prune_into(w.values(), all_kept, n, |v| v.abs())
}

/// Shared group-wise pruning. Entries already pruned in `prior` stay pruned and count toward
/// the new per-group budget; the remainder is filled by ascending `score`.
fn prune_into<F>(values: &[f32], prior: NMSparsePattern, n: usize, score: F) -> Result<NMSparsePattern, SparsityError>
where
    F: Fn(f32) -> f32,
{
    let NMSparsePattern { m, shape, mut keep, .. } = prior;
    let mut order: Vec<usize> = Vec::with_capacity(m);
    for range in groups(&shape, m).collect::<Vec<_>>() {
        let g = range.len();
        let budget = g * n / m;
        order.clear();
        order.extend(range.clone());
        // already-pruned first, then ascending score, then index; sort_by is stable
        order.sort_by(|&a, &b| {
            keep[a]
                .cmp(&keep[b])
                .then_with(|| score(values[a]).total_cmp(&score(values[b])))
                .then_with(|| a.cmp(&b))
        });
        let already = range.clone().filter(|&i| !keep[i]).count();
        for &i in order.iter().take(budget.max(already)) {
            keep[i] = false;
        }
    }
    Ok(NMSparsePattern { n, m, shape, keep })
}

/// Zeroes masked-out positions.
pub fn apply_mask(w: &RealTensor, p: &NMSparsePattern) -> Result<RealTensor, SparsityError> {
    let mut out = w.clone();
    apply_mask_in_place(&mut out, p)?;
    Ok(out)
}

pub fn apply_mask_in_place(w: &mut RealTensor, p: &NMSparsePattern) -> Result<(), SparsityError> {
    if w.shape() != p.shape() {
        return Err(SparsityError::ShapeMismatch {
            tensor: w.shape().to_vec(),
            mask: p.shape().to_vec(),
        });
    }
    for (v, &k) in w.values_mut().iter_mut().zip(&p.keep) {
        if !k {
            *v = 0.0;
        }
    }
    Ok(())
}

pub fn sparsity_of(p: &NMSparsePattern) -> f64 {
    p.sparsity()
}

/// Iterative pruning schedule: every `interval` epochs the pruned fraction grows by `increment`
/// until it reaches `target`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSchedule {
    pub target: f64,
    pub interval: usize,
    pub increment: f64,
    pub group_size: usize,
}

impl PruneSchedule {
    pub fn none(group_size: usize) -> Self {
        Self { target: 0.0, interval: 1, increment: 0.0, group_size }
    }

    pub fn validate(&self) -> Result<(), SparsityError> {
        if self.group_size == 0 {
            return Err(SparsityError::ZeroGroup);
        }
        if !(0.0..1.0).contains(&self.target) {
            return Err(SparsityError::InvalidSchedule(format!("target {} outside [0, 1)", self.target)));
        }
        if self.interval == 0 {
            return Err(SparsityError::InvalidSchedule("interval must be at least 1 epoch".into()));
        }
        if self.target > 0.0 && !(self.increment > 0.0) {
            return Err(SparsityError::InvalidSchedule("increment must be positive".into()));
        }
        let n = self.target_pruned();
        if n >= self.group_size {
            return Err(SparsityError::InvalidSchedule(format!(
                "target {} prunes whole groups of {}",
                self.target, self.group_size
            )));
        }
        Ok(())
    }

    /// Per-group pruned count once the target is reached.
    pub fn target_pruned(&self) -> usize {
        (self.target * self.group_size as f64).round() as usize
    }

    /// Number of pruning steps taken by the end of `epoch`.
    pub fn steps_at(&self, epoch: usize) -> usize {
        epoch / self.interval
    }

    /// Number of steps needed to reach the target.
    pub fn total_steps(&self) -> usize {
        if self.target <= 0.0 {
            return 0;
        }
        (self.target / self.increment - 1e-9).ceil() as usize
    }

    /// Pruned fraction in effect after `epoch`.
    pub fn fraction_at(&self, epoch: usize) -> f64 {
        (self.steps_at(epoch) as f64 * self.increment).min(self.target)
    }

    /// Per-group pruned count after `epoch`; the fraction of `M` rounded to the nearest integer.
    pub fn pruned_per_group(&self, epoch: usize) -> usize {
        let f = self.fraction_at(epoch);
        let n = (f * self.group_size as f64).round() as usize;
        n.min(self.target_pruned())
    }

    /// First epoch at which the target sparsity is in effect.
    pub fn completion_epoch(&self) -> usize {
        self.total_steps() * self.interval
    }

    /// Advances `prior` to the pruned count scheduled for `epoch`, ranking by magnitude.
    pub fn step(&self, epoch: usize, w: &RealTensor, prior: &NMSparsePattern) -> Result<NMSparsePattern, SparsityError> {
        self.step_by(epoch, w, prior, |v| v.abs())
    }

    /// Like [`PruneSchedule::step`] but ranks weights by a caller-supplied score (for example
    /// the magnitude of their quantized codes).
    pub fn step_by<F>(&self, epoch: usize, w: &RealTensor, prior: &NMSparsePattern, score: F) -> Result<NMSparsePattern, SparsityError>
    where
        F: Fn(f32) -> f32,
    {
        if w.shape() != prior.shape() {
            return Err(SparsityError::ShapeMismatch {
                tensor: w.shape().to_vec(),
                mask: prior.shape().to_vec(),
            });
        }
        if prior.m() != self.group_size {
            return Err(SparsityError::InvalidSchedule(format!(
                "pattern group size {} differs from schedule group size {}",
                prior.m(),
                self.group_size
            )));
        }
        if epoch == 0 || !epoch.is_multiple_of(self.interval) {
            return Ok(prior.clone());
        }
        let n = self.pruned_per_group(epoch);
        if n <= prior.n() {
            return Ok(prior.clone());
        }
        validate_ratio(n, self.group_size)?;
        prune_into(w.values(), prior.clone(), n, score)
    }
}

pub fn schedule_step(
    s: &PruneSchedule,
    epoch: usize,
    w: &RealTensor,
    prior: &NMSparsePattern,
) -> Result<NMSparsePattern, SparsityError> {
    s.step(epoch, w, prior)
}
