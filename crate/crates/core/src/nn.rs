//! Pre-norm transformer trunk and the conditioning scheme shared by the
//! masked and residual transformers.

use crate::error::{Error, Result};
use crate::ndmath::{Bound, ParamStore, Rng, Scalar, Tape, Var};

/// Standard deviation of embedding and output-head initialisation.
pub const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Maximum number of token positions, excluding the condition token.
    pub max_len: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 4,
            heads: 4,
            max_len: 64,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.max_len == 0 {
            return Err(Error::Config("transformer dims must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

/// Text condition: a corpus label or the unconditional null.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Condition {
    Label(usize),
    Null,
}

impl Condition {
    /// Row of the condition table; the null row is last.
    pub fn row(self, num_labels: usize) -> Result<usize> {
        match self {
            Condition::Label(id) if id < num_labels => Ok(id),
            Condition::Label(id) => Err(Error::UnknownClass(format!("label id {id} outside [0, {num_labels})"))),
            Condition::Null => Ok(num_labels),
        }
    }
}

/// Optimiser settings shared by both transformers.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub clip: f64,
    /// Final learning rate as a fraction of `lr`; 1 keeps it constant.
    pub lr_floor: f64,
    /// Probability of replacing a condition by the null condition.
    pub null_prob: f64,
    pub log_every: usize,
}

impl Default for TransformerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch: 32,
            lr: 2e-4,
            warmup: 2000,
            clip: 1.0,
            lr_floor: 1.0,
            null_prob: 0.1,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransformerStepLog {
    pub loss: f64,
    /// Top-1 accuracy over supervised positions.
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransformerTrainLog {
    pub steps: Vec<TransformerStepLog>,
    /// Mean loss per logged epoch.
    pub epoch_loss: Vec<f64>,
}

impl TransformerTrainLog {
    pub(crate) fn record(&mut self, entry: TransformerStepLog, every: usize) {
        self.steps.push(entry);
        let every = every.max(1);
        if self.steps.len() % every == 0 {
            let tail = &self.steps[self.steps.len() - every..];
            self.epoch_loss.push(tail.iter().map(|s| s.loss).sum::<f64>() / every as f64);
        }
    }
}

pub fn init_linear<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut Rng) {
    store.insert_normal(&format!("{name}.w"), &[fan_in, fan_out], std, rng);
    store.insert_zeros(&format!("{name}.b"), &[fan_out]);
}

fn init_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) {
    store.insert_ones(&format!("{name}.g"), &[width]);
    store.insert_zeros(&format!("{name}.b"), &[width]);
}

/// Adds the trunk parameters under `prefix`.
pub fn init_trunk<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: &TransformerConfig, rng: &mut Rng) {
    let h = cfg.hidden;
    let std = (1.0 / h as f64).sqrt();
    let proj_std = std / (2.0 * cfg.layers as f64).sqrt();
    for l in 0..cfg.layers {
        let p = format!("{prefix}.block{l}");
        init_norm(store, &format!("{p}.ln1"), h);
        for name in ["q", "k", "v"] {
            init_linear(store, &format!("{p}.{name}"), h, h, std, rng);
        }
        init_linear(store, &format!("{p}.o"), h, h, proj_std, rng);
        init_norm(store, &format!("{p}.ln2"), h);
        init_linear(store, &format!("{p}.fc"), h, 4 * h, std, rng);
        init_linear(store, &format!("{p}.proj"), 4 * h, h, proj_std / 2.0, rng);
    }
    init_norm(store, &format!("{prefix}.ln_f"), h);
}

/// Graph-building view of a bound parameter store.
pub struct Layers<'a, T> {
    pub store: &'a ParamStore<T>,
    pub bound: &'a Bound,
}

impl<T: Scalar> Layers<'_, T> {
    pub fn param(&self, name: &str) -> Result<Var> {
        Ok(self.bound.var(self.store.id(name)?))
    }

    pub fn linear(&self, tape: &mut Tape<T>, name: &str, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.param(&format!("{name}.w"))?)?;
        tape.add_bias(y, self.param(&format!("{name}.b"))?)
    }

    pub fn norm(&self, tape: &mut Tape<T>, name: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{name}.g"))?;
        let b = self.param(&format!("{name}.b"))?;
        tape.layernorm(x, g, b)
    }

    /// Bidirectional trunk over `x: [Σ segments, hidden]`. Keys whose
    /// `key_mask` entry is false are not attended to.
    pub fn trunk(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        cfg: &TransformerConfig,
        x: Var,
        segments: &[usize],
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let mut x = x;
        for l in 0..cfg.layers {
            let p = format!("{prefix}.block{l}");
            let h = self.norm(tape, &format!("{p}.ln1"), x)?;
            let q = self.linear(tape, &format!("{p}.q"), h)?;
            let k = self.linear(tape, &format!("{p}.k"), h)?;
            let v = self.linear(tape, &format!("{p}.v"), h)?;
            let a = tape.attention(q, k, v, cfg.heads, segments, key_mask)?;
            let a = self.linear(tape, &format!("{p}.o"), a)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, &format!("{p}.ln2"), x)?;
            let h = self.linear(tape, &format!("{p}.fc"), h)?;
            let h = tape.gelu(h)?;
            let h = self.linear(tape, &format!("{p}.proj"), h)?;
            x = tape.add(x, h)?;
        }
        self.norm(tape, &format!("{prefix}.ln_f"), x)
    }
}

/// Row order that places each sequence's condition row before its token
/// rows, given token rows `[Σ lens]` followed by condition rows `[B]`.
pub(crate) fn interleave_order(lens: &[usize]) -> Vec<usize> {
    let total: usize = lens.iter().sum();
    let mut order = Vec::with_capacity(total + lens.len());
    let mut offset = 0;
    for (b, &n) in lens.iter().enumerate() {
        order.push(total + b);
        order.extend(offset..offset + n);
        offset += n;
    }
    order
}

/// Indices of the token rows in the interleaved layout.
pub(crate) fn token_rows(lens: &[usize]) -> Vec<usize> {
    let mut rows = Vec::with_capacity(lens.iter().sum());
    let mut offset = 0;
    for &n in lens {
        rows.extend(offset + 1..offset + 1 + n);
        offset += n + 1;
    }
    rows
}

/// Position ids in the interleaved layout; the condition row takes 0.
pub(crate) fn positions(lens: &[usize]) -> Vec<usize> {
    lens.iter().flat_map(|&n| 0..=n).collect()
}

pub(crate) fn check_lengths(lens: &[usize], max_len: usize) -> Result<()> {
    if lens.is_empty() {
        return Err(Error::Length("empty batch".into()));
    }
    if let Some(&n) = lens.iter().find(|&&n| n == 0 || n > max_len) {
        return Err(Error::Length(format!("sequence of {n} tokens outside [1, {max_len}]")));
    }
    Ok(())
}

/// Index of the largest entry per row of a `[rows, k]` value, lowest on ties.
pub(crate) fn row_argmax<T: Scalar>(logits: &crate::ndmath::Tensor<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
        })
        .collect()
}
