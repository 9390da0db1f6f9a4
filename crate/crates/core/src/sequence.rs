//! Longitudinal volumes, the conditioning/missing/future index partition,
//! and masked input sequences.
//!
//! Frame indices are 1-based throughout.

use std::collections::VecDeque;
use std::fmt;

use crate::error::{Error, Result};
use crate::ndcore::{Rng, Tensor};

/// `L` frames of extents `W×H×D` plus a presence mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LongitudinalVolume {
    frames: Vec<Tensor>,
    present: Vec<bool>,
}

impl LongitudinalVolume {
    /// All frames present.
    pub fn new(frames: Vec<Tensor>) -> Result<Self> {
        let present = vec![true; frames.len()];
        Self::with_mask(frames, present)
    }

    /// Absent frames are replaced by exact zeros.
    pub fn with_mask(mut frames: Vec<Tensor>, present: Vec<bool>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::invalid("volume", format!("need L >= 2 frames, got {}", frames.len())));
        }
        if frames.len() != present.len() {
            return Err(Error::invalid("volume", "mask length differs from frame count"));
        }
        let extents = frames[0].shape().to_vec();
        if extents.len() != 3 {
            return Err(Error::invalid("volume", format!("frames must be 3D, got {extents:?}")));
        }
        for (i, (f, &p)) in frames.iter_mut().zip(&present).enumerate() {
            if f.shape() != extents.as_slice() {
                return Err(Error::shape("volume", &extents, f.shape()));
            }
            if !p {
                f.data_mut().fill(0.0);
            } else if f.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(
                    "volume",
                    format!("frame {} has values outside [0, 1]", i + 1),
                ));
            }
        }
        Ok(LongitudinalVolume { frames, present })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.frames[0].shape();
        [s[0], s[1], s[2]]
    }

    /// Frame at 1-based index `i`.
    pub fn frame(&self, i: usize) -> &Tensor {
        &self.frames[i - 1]
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    pub fn is_present(&self, i: usize) -> bool {
        self.present[i - 1]
    }

    /// Copy keeping only the frames at `keep` (1-based); the rest become absent.
    pub fn restricted_to(&self, keep: &[usize]) -> Result<Self> {
        let present = (1..=self.len()).map(|i| keep.contains(&i) && self.is_present(i)).collect();
        Self::with_mask(self.frames.clone(), present)
    }
}

/// Why an [`IndexPartition`] is invalid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PartitionViolation {
    OutOfRange { set: char, index: usize, len: usize },
    NotIncreasing { set: char },
    Overlap { index: usize },
    Uncovered { index: usize },
    FirstNotConditioning,
    FutureBeforeConditioning { future: usize, cond: usize },
    FutureBeforeMissing { future: usize, missing: usize },
}

impl fmt::Display for PartitionViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::OutOfRange { set, index, len } => {
                write!(f, "{set} contains {index}, outside 1..={len}")
            }
            Self::NotIncreasing { set } => write!(f, "{set} is not strictly increasing"),
            Self::Overlap { index } => write!(f, "index {index} appears in more than one set"),
            Self::Uncovered { index } => write!(f, "index {index} is in none of C, M, F"),
            Self::FirstNotConditioning => write!(f, "c₁ ≠ 1"),
            Self::FutureBeforeConditioning { future, cond } => {
                write!(f, "F not strictly after C (f={future} <= c={cond})")
            }
            Self::FutureBeforeMissing { future, missing } => {
                write!(f, "F not strictly after M (f={future} <= m={missing})")
            }
        }
    }
}

impl std::error::Error for PartitionViolation {}

/// Conditioning, missing and future frame indices (1-based, increasing).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexPartition {
    pub cond: Vec<usize>,
    pub missing: Vec<usize>,
    pub future: Vec<usize>,
}

impl IndexPartition {
    pub fn new(cond: Vec<usize>, missing: Vec<usize>, future: Vec<usize>) -> Self {
        IndexPartition {
            cond,
            missing,
            future,
        }
    }

    /// Only the first frame is observed.
    pub fn single(len: usize) -> Self {
        Self::new(vec![1], vec![], (2..=len).collect())
    }

    /// Everything but the last `k` frames is observed.
    pub fn full(len: usize, k: usize) -> Self {
        let split = len.saturating_sub(k).max(1);
        Self::new((1..=split).collect(), vec![], (split + 1..=len).collect())
    }

    pub fn len(&self) -> usize {
        self.cond.len() + self.missing.len() + self.future.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn targets(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.missing.iter().chain(&self.future).copied().collect();
        t.sort_unstable();
        t
    }

    pub fn validate(&self, len: usize) -> std::result::Result<(), PartitionViolation> {
        validate_partition(self, len)
    }
}

/// Accept iff the partition is exhaustive, disjoint, increasing, starts with a
/// conditioning frame, and places every future index after all others.
pub fn validate_partition(p: &IndexPartition, len: usize) -> std::result::Result<(), PartitionViolation> {
    let sets = [('C', &p.cond), ('M', &p.missing), ('F', &p.future)];
    for (name, s) in sets {
        if let Some(&index) = s.iter().find(|&&i| i == 0 || i > len) {
            return Err(PartitionViolation::OutOfRange { set: name, index, len });
        }
        if s.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PartitionViolation::NotIncreasing { set: name });
        }
    }
    let mut count = vec![0u8; len + 1];
    for (_, s) in sets {
        for &i in s.iter() {
            count[i] += 1;
        }
    }
    if let Some(index) = (1..=len).find(|&i| count[i] > 1) {
        return Err(PartitionViolation::Overlap { index });
    }
    if let Some(index) = (1..=len).find(|&i| count[i] == 0) {
        return Err(PartitionViolation::Uncovered { index });
    }
    if p.cond.first() != Some(&1) {
        return Err(PartitionViolation::FirstNotConditioning);
    }
    if let Some(&f) = p.future.first() {
        let c = *p.cond.last().expect("cond non-empty");
        if f <= c {
            return Err(PartitionViolation::FutureBeforeConditioning { future: f, cond: c });
        }
        if let Some(&m) = p.missing.last() {
            if f <= m {
                return Err(PartitionViolation::FutureBeforeMissing { future: f, missing: m });
            }
        }
    }
    Ok(())
}

/// The input sequence for predicting frame `upto`: positions `1..upto`,
/// conditioning frames consumed in order, zero volumes elsewhere.
pub fn build_masked_sequence(
    v: &LongitudinalVolume,
    p: &IndexPartition,
    upto: usize,
) -> Result<(Vec<Tensor>, Vec<bool>)> {
    if upto < 2 || upto > v.len() {
        return Err(Error::invalid(
            "build_masked_sequence",
            format!("target index {upto} outside 2..={}", v.len()),
        ));
    }
    validate_partition(p, v.len())?;
    let mut queue: VecDeque<usize> = p.cond.iter().copied().collect();
    let zero = Tensor::zeros(&v.extents());
    let mut seq = Vec::with_capacity(upto - 1);
    let mut mask = Vec::with_capacity(upto - 1);
    for k in 1..upto {
        if p.cond.contains(&k) {
            let c = queue.pop_front().expect("ordered conditioning queue");
            if !v.is_present(c) {
                return Err(Error::invalid(
                    "build_masked_sequence",
                    format!("conditioning frame {c} is absent"),
                ));
            }
            seq.push(v.frame(c).clone());
            mask.push(true);
        } else {
            seq.push(zero.clone());
            mask.push(false);
        }
    }
    Ok((seq, mask))
}

/// Uniform draw from `M ∪ F`.
pub fn sample_training_target(p: &IndexPartition, rng: &mut Rng) -> Result<usize> {
    let targets = p.targets();
    if targets.is_empty() {
        return Err(Error::invalid("sample_training_target", "M ∪ F is empty"));
    }
    Ok(targets[rng.below(targets.len())])
}

/// Random valid partition of `1..=len` for training.
///
/// `n_C ~ U{1..L−1}` with frame 1 always conditioning and the rest of `C`
/// uniform over `{2..L}`. The complement is split at a uniform pivot among
/// the positions that keep every future index after all of `C` and `M`.
pub fn random_partition(len: usize, rng: &mut Rng) -> Result<IndexPartition> {
    if len < 2 {
        return Err(Error::invalid("random_partition", "need L >= 2"));
    }
    let n_cond = 1 + rng.below(len - 1);
    let mut rest: Vec<usize> = (2..=len).collect();
    rng.shuffle(&mut rest);
    let mut cond: Vec<usize> = std::iter::once(1).chain(rest[..n_cond - 1].iter().copied()).collect();
    cond.sort_unstable();
    let mut others: Vec<usize> = rest[n_cond - 1..].to_vec();
    others.sort_unstable();
    let last_cond = *cond.last().unwrap();
    // indices of `others` that may become future
    let first_allowed = others.iter().position(|&i| i > last_cond).unwrap_or(others.len());
    let pivot = first_allowed + rng.below(others.len() - first_allowed + 1);
    let missing = others[..pivot].to_vec();
    let future = others[pivot..].to_vec();
    Ok(IndexPartition::new(cond, missing, future))
}
