//! Inference: confidence-ranked iterative decoding of the base layer,
//! classifier-free guidance, residual-layer prediction, and temporal
//! inpainting.
//!
//! Batched entry points give every element its own RNG, so a batch yields
//! the same result as running its elements one at a time.

use std::fmt::Write as _;

use crate::codec::{detokenize, tokenize, CodecParams, MotionSequence, TokenStack, DOWNSCALE};
use crate::error::{Error, Result};
use crate::mformer::MFormerParams;
use crate::ndmath::{argmax_categorical, sample_categorical, Rng, Scalar, Tensor};
use crate::nn::Condition;
use crate::rformer::RFormerParams;
use crate::schedule::ScheduleParams;

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub s_masked: f64,
    pub s_residual: f64,
    pub temperature: f64,
    /// Adds Gumbel noise scaled by `1 - l/L` to confidences.
    pub gumbel_anneal: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            s_masked: 4.0,
            s_residual: 5.0,
            temperature: 1.0,
            gumbel_anneal: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_masked >= 0.0 && self.s_residual >= 0.0) {
            return Err(Error::Config("guidance scales must be non-negative".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ResidualMode {
    #[default]
    Greedy,
    Sample,
}

/// `(1 + s)·cond − s·uncond`, elementwise, evaluated as
/// `cond + s·(cond − uncond)`.
pub fn cfg_logits<T: Scalar>(cond: &Tensor<T>, uncond: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
    if cond.shape() != uncond.shape() {
        return Err(Error::Dimension {
            op: "cfg_logits",
            left: cond.shape().to_vec(),
            right: uncond.shape().to_vec(),
        });
    }
    let s = T::of(s);
    cond.zip_map(uncond, "cfg_logits", |c, u| c + s * (c - u))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    /// Token ids; the mask id where undecided.
    pub row: Vec<usize>,
    /// Locked positions are never remasked.
    pub fixed: Vec<bool>,
    /// `+∞` at locked positions.
    pub confidence: Vec<f64>,
    pub iteration: usize,
    /// Number of positions unlocked at the start of decoding.
    pub n_free: usize,
}

impl DecodeState {
    pub fn empty(n: usize, mask_id: usize) -> Self {
        Self {
            row: vec![mask_id; n],
            fixed: vec![false; n],
            confidence: vec![f64::NEG_INFINITY; n],
            iteration: 0,
            n_free: n,
        }
    }

    /// Locks `tokens` everywhere except inside `ranges`, which start masked.
    pub fn with_locked(tokens: &[usize], ranges: &[(usize, usize)], mask_id: usize) -> Self {
        let mut s = Self {
            row: tokens.to_vec(),
            fixed: vec![true; tokens.len()],
            confidence: vec![f64::INFINITY; tokens.len()],
            iteration: 0,
            n_free: 0,
        };
        for &(a, b) in ranges {
            for p in a..b {
                s.row[p] = mask_id;
                s.fixed[p] = false;
                s.confidence[p] = f64::NEG_INFINITY;
                s.n_free += 1;
            }
        }
        s
    }

    pub fn masked(&self, mask_id: usize) -> usize {
        self.row.iter().filter(|&&t| t == mask_id).count()
    }

    pub fn locked(&self) -> usize {
        self.fixed.iter().filter(|&&f| f).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceLine {
    pub iter: usize,
    pub masked: usize,
    pub locked: usize,
    /// Mean confidence of the tokens sampled this iteration.
    pub mean_conf: f64,
    /// Row after remasking.
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeTrace {
    pub lines: Vec<TraceLine>,
}

impl DecodeTrace {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            writeln!(out, "iter={} masked={} locked={} mean_conf={:.6}", l.iter, l.masked, l.locked, l.mean_conf).unwrap();
        }
        out
    }

    pub fn masked_trajectory(&self) -> Vec<usize> {
        self.lines.iter().map(|l| l.masked).collect()
    }
}

/// Runs the `L`-iteration decode loop on every state in place.
pub fn decode_states<T: Scalar>(
    states: &mut [DecodeState],
    conds: &[Condition],
    params: &MFormerParams<T>,
    schedule: ScheduleParams,
    guidance: &GuidanceConfig,
    rngs: &mut [Rng],
) -> Result<Vec<DecodeTrace>> {
    guidance.validate()?;
    if states.len() != conds.len() || states.len() != rngs.len() {
        return Err(Error::Length("states, conditions and rngs differ in count".into()));
    }
    let mask = params.config.mask_id();
    let big_l = schedule.iterations;
    let mut traces = vec![DecodeTrace::default(); states.len()];
    for l in 1..=big_l {
        let active: Vec<usize> = (0..states.len()).filter(|&b| states[b].row.contains(&mask)).collect();
        let mut logits = Vec::new();
        if !active.is_empty() {
            let mut rows: Vec<&[usize]> = active.iter().map(|&b| states[b].row.as_slice()).collect();
            rows.extend(rows.clone());
            let mut cs: Vec<Condition> = active.iter().map(|&b| conds[b]).collect();
            cs.extend(std::iter::repeat(Condition::Null).take(active.len()));
            logits = params.logits(&rows, &cs)?;
        }
        let mut guided = vec![None; states.len()];
        for (i, &b) in active.iter().enumerate() {
            guided[b] = Some(cfg_logits(&logits[i], &logits[i + active.len()], guidance.s_masked)?);
        }
        for (b, state) in states.iter_mut().enumerate() {
            let rng = &mut rngs[b];
            state.iteration = l;
            let mut sampled = Vec::new();
            if let Some(g) = &guided[b] {
                for p in 0..state.row.len() {
                    if state.row[p] != mask {
                        continue;
                    }
                    let (tok, logp) = sample_categorical(g.row(p), guidance.temperature, rng)?;
                    let noise = if guidance.gumbel_anneal {
                        rng.gumbel() * (1.0 - l as f64 / big_l as f64)
                    } else {
                        0.0
                    };
                    state.row[p] = tok;
                    state.confidence[p] = logp + noise;
                    sampled.push(p);
                }
            }
            let mean_conf = if sampled.is_empty() {
                0.0
            } else {
                sampled.iter().map(|&p| state.confidence[p]).sum::<f64>() / sampled.len() as f64
            };
            let count = schedule.remask_count(l, state.n_free);
            let mut order = sampled.clone();
            order.sort_by(|&a, &b| state.confidence[a].total_cmp(&state.confidence[b]).then(a.cmp(&b)));
            for (rank, &p) in order.iter().enumerate() {
                if rank < count {
                    state.row[p] = mask;
                    state.confidence[p] = f64::NEG_INFINITY;
                } else {
                    state.fixed[p] = true;
                    state.confidence[p] = f64::INFINITY;
                }
            }
            traces[b].lines.push(TraceLine {
                iter: l,
                masked: state.masked(mask),
                locked: state.locked(),
                mean_conf,
                tokens: state.row.clone(),
            });
        }
    }
    Ok(traces)
}

/// Decodes a base row of `n` tokens from an all-masked start.
pub fn decode_base<T: Scalar>(
    n: usize,
    cond: Condition,
    params: &MFormerParams<T>,
    schedule: ScheduleParams,
    guidance: &GuidanceConfig,
    rng: &mut Rng,
) -> Result<(Vec<usize>, DecodeTrace)> {
    if n == 0 {
        return Err(Error::Length("cannot decode an empty row".into()));
    }
    let mut states = [DecodeState::empty(n, params.config.mask_id())];
    let trace = decode_states(&mut states, &[cond], params, schedule, guidance, std::slice::from_mut(rng))?;
    let [state] = states;
    Ok((state.row, trace.into_iter().next().unwrap()))
}

/// Predicts layers `1..=V` on top of each base row. Where `locked` is given
/// for a sample, positions marked true take the reference stack's tokens.
pub fn fill_residuals_batch<T: Scalar>(
    bases: &[Vec<usize>],
    conds: &[Condition],
    params: &RFormerParams<T>,
    guidance: &GuidanceConfig,
    mode: ResidualMode,
    locked: &[Option<(&TokenStack, &[bool])>],
    rngs: &mut [Rng],
) -> Result<Vec<TokenStack>> {
    guidance.validate()?;
    let b = bases.len();
    if conds.len() != b || rngs.len() != b || locked.len() != b {
        return Err(Error::Length("bases, conditions, locks and rngs differ in count".into()));
    }
    let mut stacks: Vec<Vec<Vec<usize>>> = bases.iter().map(|r| vec![r.clone()]).collect();
    for j in 1..=params.config.residual_layers() {
        let mut below: Vec<&[Vec<usize>]> = stacks.iter().map(|s| s.as_slice()).collect();
        below.extend(below.clone());
        let mut cs = conds.to_vec();
        cs.extend(std::iter::repeat(Condition::Null).take(b));
        let logits = params.logits(&below, j, &cs)?;
        for i in 0..b {
            let g = cfg_logits(&logits[i], &logits[i + b], guidance.s_residual)?;
            let mut row = Vec::with_capacity(g.rows());
            for p in 0..g.rows() {
                let (tok, _) = match mode {
                    ResidualMode::Greedy => argmax_categorical(g.row(p), guidance.temperature)?,
                    ResidualMode::Sample => sample_categorical(g.row(p), guidance.temperature, &mut rngs[i])?,
                };
                row.push(tok);
            }
            if let Some((reference, keep)) = locked[i] {
                for (p, t) in row.iter_mut().enumerate() {
                    if keep[p] {
                        *t = reference.rows[j][p];
                    }
                }
            }
            stacks[i].push(row);
        }
    }
    stacks.into_iter().map(TokenStack::new).collect()
}

pub fn fill_residuals<T: Scalar>(
    base: &[usize],
    cond: Condition,
    params: &RFormerParams<T>,
    guidance: &GuidanceConfig,
    mode: ResidualMode,
    rng: &mut Rng,
) -> Result<TokenStack> {
    let mut out = fill_residuals_batch(&[base.to_vec()], &[cond], params, guidance, mode, &[None], std::slice::from_mut(rng))?;
    Ok(out.pop().unwrap())
}

/// The three trained components.
#[derive(Clone, Copy)]
pub struct Models<'a, T> {
    pub codec: &'a CodecParams<T>,
    pub mformer: &'a MFormerParams<T>,
    pub rformer: &'a RFormerParams<T>,
}

impl<T: Scalar> Models<'_, T> {
    pub fn check(&self) -> Result<()> {
        let k = &self.codec.config.codebook_sizes;
        if self.mformer.config.codebook_size != k[0] || &self.rformer.config.codebook_sizes != k {
            return Err(Error::Config("transformer vocabularies do not match the codec codebooks".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Generated<T> {
    pub motion: MotionSequence<T>,
    pub tokens: TokenStack,
    pub trace: DecodeTrace,
}

/// Inference settings shared by generation and inpainting.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub schedule: ScheduleParams,
    pub guidance: GuidanceConfig,
    pub mode: ResidualMode,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleParams { iterations: 10 },
            guidance: GuidanceConfig::default(),
            mode: ResidualMode::Greedy,
        }
    }
}

fn token_len(frames: usize) -> Result<usize> {
    if frames == 0 {
        return Err(Error::Length("target length must be positive".into()));
    }
    Ok(frames.div_ceil(DOWNSCALE))
}

fn trimmed<T: Scalar>(motion: MotionSequence<T>, frames: usize) -> Result<MotionSequence<T>> {
    if motion.len() == frames {
        Ok(motion)
    } else {
        motion.slice(0, frames)
    }
}

/// Generates one motion of `frames` frames per condition.
pub fn generate_batch<T: Scalar>(
    conds: &[Condition],
    frames: usize,
    models: Models<'_, T>,
    inference: &InferenceConfig,
    rngs: &mut [Rng],
) -> Result<Vec<Generated<T>>> {
    models.check()?;
    let n = token_len(frames)?;
    let mask = models.mformer.config.mask_id();
    let mut states = vec![DecodeState::empty(n, mask); conds.len()];
    let traces = decode_states(&mut states, conds, models.mformer, inference.schedule, &inference.guidance, rngs)?;
    let bases: Vec<Vec<usize>> = states.into_iter().map(|s| s.row).collect();
    let locks = vec![None; conds.len()];
    let stacks = fill_residuals_batch(&bases, conds, models.rformer, &inference.guidance, inference.mode, &locks, rngs)?;
    stacks
        .into_iter()
        .zip(traces)
        .map(|(tokens, trace)| {
            let motion = trimmed(detokenize(&tokens, models.codec, tokens.num_layers())?, frames)?;
            Ok(Generated { motion, tokens, trace })
        })
        .collect()
}

pub fn generate<T: Scalar>(
    cond: Condition,
    frames: usize,
    models: Models<'_, T>,
    inference: &InferenceConfig,
    rng: &mut Rng,
) -> Result<Generated<T>> {
    let mut out = generate_batch(&[cond], frames, models, inference, std::slice::from_mut(rng))?;
    Ok(out.pop().unwrap())
}

/// A reference motion and the token ranges `[start, end)` to regenerate.
#[derive(Clone, Debug, PartialEq)]
pub struct InpaintSpec<T> {
    pub reference: MotionSequence<T>,
    pub ranges: Vec<(usize, usize)>,
}

impl<T: Scalar> InpaintSpec<T> {
    /// Sorted ranges checked against a row of `n` tokens.
    pub fn validated_ranges(&self, n: usize) -> Result<Vec<(usize, usize)>> {
        let mut ranges = self.ranges.clone();
        ranges.sort_unstable();
        for &(a, b) in &ranges {
            if a >= b || b > n {
                return Err(Error::Length(format!("edit range [{a}, {b}) outside a row of {n} tokens")));
            }
        }
        if ranges.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(Error::Length("edit ranges overlap".into()));
        }
        Ok(ranges)
    }
}

#[derive(Clone, Debug)]
pub struct Inpainted<T> {
    pub motion: MotionSequence<T>,
    pub tokens: TokenStack,
    pub reference_tokens: TokenStack,
    /// Codec reconstruction of the reference.
    pub reference_recon: MotionSequence<T>,
    pub trace: DecodeTrace,
}

/// Regenerates the edit ranges under `cond` while keeping every other token.
/// Frames outside the edit ranges are taken from the reference's codec
/// reconstruction.
pub fn inpaint<T: Scalar>(
    spec: &InpaintSpec<T>,
    cond: Condition,
    models: Models<'_, T>,
    inference: &InferenceConfig,
    rng: &mut Rng,
) -> Result<Inpainted<T>> {
    models.check()?;
    let frames = spec.reference.len();
    let reference_tokens = tokenize(&spec.reference, models.codec)?;
    let n = reference_tokens.len();
    let ranges = spec.validated_ranges(n)?;
    let layers = reference_tokens.num_layers();
    let reference_recon = trimmed(detokenize(&reference_tokens, models.codec, layers)?, frames)?;
    if ranges.is_empty() {
        return Ok(Inpainted {
            motion: reference_recon.clone(),
            tokens: reference_tokens.clone(),
            reference_tokens,
            reference_recon,
            trace: DecodeTrace::default(),
        });
    }

    let mask = models.mformer.config.mask_id();
    let mut states = [DecodeState::with_locked(reference_tokens.base(), &ranges, mask)];
    let keep: Vec<bool> = states[0].fixed.clone();
    let traces = decode_states(
        &mut states,
        &[cond],
        models.mformer,
        inference.schedule,
        &inference.guidance,
        std::slice::from_mut(rng),
    )?;
    let [state] = states;
    let tokens = fill_residuals_batch(
        &[state.row],
        &[cond],
        models.rformer,
        &inference.guidance,
        inference.mode,
        &[Some((&reference_tokens, keep.as_slice()))],
        std::slice::from_mut(rng),
    )?
    .pop()
    .unwrap();

    let decoded = detokenize(&tokens, models.codec, layers)?;
    let mut out = reference_recon.frames.clone();
    for &(a, b) in &ranges {
        for f in a * DOWNSCALE..(b * DOWNSCALE).min(frames) {
            out.row_mut(f).copy_from_slice(decoded.frame(f));
        }
    }
    Ok(Inpainted {
        motion: MotionSequence::new(out, spec.reference.fps)?,
        tokens,
        reference_tokens,
        reference_recon,
        trace: traces.into_iter().next().unwrap(),
    })
}
