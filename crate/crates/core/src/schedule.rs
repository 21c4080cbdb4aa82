//! Cosine mask-ratio schedule, training-time corruption, and inference
//! remask counts.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::ndmath::Rng;

/// Slack absorbed before taking a ceiling, so products that are integers
/// in exact arithmetic (e.g. `0.5 * 10`) do not round up.
const CEIL_SLACK: f64 = 1e-9;

pub const MASK_PROB: f64 = 0.8;
pub const RANDOM_PROB: f64 = 0.1;

/// Fraction of tokens masked at progress `tau`: `cos(π·tau/2)`.
///
/// Evaluated as `sin(π(1 - tau)/2)` so both endpoints are exact.
pub fn gamma(tau: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Domain(format!("schedule progress {tau} outside [0, 1]")));
    }
    Ok((FRAC_PI_2 * (1.0 - tau)).sin())
}

/// `⌈gamma(tau)·n⌉`.
pub fn mask_count(tau: f64, n: usize) -> Result<usize> {
    Ok(ceil_count(gamma(tau)?, n))
}

pub(crate) fn ceil_count(ratio: f64, n: usize) -> usize {
    let c = (ratio * n as f64 - CEIL_SLACK).ceil().max(0.0) as usize;
    c.min(n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleParams {
    pub iterations: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { iterations: 10 }
    }
}

impl ScheduleParams {
    pub fn new(iterations: usize) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::Config("iteration count L must be at least 1".into()));
        }
        Ok(Self { iterations })
    }

    /// Number of positions left masked after iteration `l` (1-based) out of
    /// `n_free` decodable positions.
    pub fn remask_count(&self, l: usize, n_free: usize) -> usize {
        let tau = l.min(self.iterations) as f64 / self.iterations as f64;
        ceil_count((FRAC_PI_2 * (1.0 - tau)).sin(), n_free)
    }

    /// Masked counts after iterations `1..=L`.
    pub fn trajectory(&self, n_free: usize) -> Vec<usize> {
        (1..=self.iterations).map(|l| self.remask_count(l, n_free)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskAction {
    MaskToken,
    RandomToken,
    Keep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// `(position, action)` in selection order; positions are distinct.
    pub entries: Vec<(usize, MaskAction)>,
}

impl MaskPlan {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(p, _)| p)
    }
}

/// Draws `tau ~ U(0,1)`, selects `mask_count(tau, n)` positions uniformly
/// without replacement and assigns each a replace-and-remask action.
pub fn draw_training_mask(n: usize, rng: &mut Rng) -> Result<(f64, MaskPlan)> {
    if n == 0 {
        return Err(Error::Length("cannot mask an empty row".into()));
    }
    let tau = rng.uniform();
    let count = mask_count(tau, n)?;
    let entries = rng
        .choose_distinct(n, count)
        .into_iter()
        .map(|p| {
            let u = rng.uniform();
            let action = if u < MASK_PROB {
                MaskAction::MaskToken
            } else if u < MASK_PROB + RANDOM_PROB {
                MaskAction::RandomToken
            } else {
                MaskAction::Keep
            };
            (p, action)
        })
        .collect();
    Ok((tau, MaskPlan { entries }))
}

/// A corrupted row and the positions the loss supervises.
#[derive(Clone, Debug, PartialEq)]
pub struct Corrupted {
    pub row: Vec<usize>,
    pub supervised: Vec<bool>,
}

/// Applies `plan` to a base-layer row. The mask id is `vocab_size`; random
/// replacements are uniform over `[0, vocab_size)`. Every planned position is
/// supervised, including `Keep` and `RandomToken` ones.
pub fn apply_mask(tokens: &[usize], plan: &MaskPlan, vocab_size: usize, mask_id: usize, rng: &mut Rng) -> Result<Corrupted> {
    if vocab_size < 2 {
        return Err(Error::Config(format!("vocabulary of {vocab_size} is too small to corrupt")));
    }
    if mask_id < vocab_size {
        return Err(Error::Config(format!("mask id {mask_id} collides with codebook range [0, {vocab_size})")));
    }
    let mut row = tokens.to_vec();
    let mut supervised = vec![false; tokens.len()];
    for &(p, action) in &plan.entries {
        if p >= row.len() {
            return Err(Error::Length(format!("mask position {p} outside row of {}", row.len())));
        }
        supervised[p] = true;
        match action {
            MaskAction::MaskToken => row[p] = mask_id,
            MaskAction::RandomToken => row[p] = rng.below(vocab_size),
            MaskAction::Keep => {}
        }
    }
    Ok(Corrupted { row, supervised })
}
