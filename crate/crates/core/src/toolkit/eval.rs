//! Reconstruction and generation evaluation.

use serde::Serialize;

use crate::codec::{detokenize, tokenize, CodecParams, MotionSequence};
use crate::corpus::OracleClassifier;
use crate::engine::{generate_batch, InferenceConfig, Models};
use crate::error::{Error, Result};
use crate::ndmath::{Rng, Scalar};
use crate::nn::Condition;

use super::config::EvalConfig;

pub const THREADS_ENV: &str = "MOMASK_LAB_THREADS";

/// Worker count: `MOMASK_LAB_THREADS` if set, else available parallelism.
pub fn eval_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .max(1)
}

/// Maps `f` over contiguous chunks of `items` on up to `threads` workers;
/// output order follows input order.
pub fn par_chunks<I: Sync, O: Send>(
    items: &[I],
    threads: usize,
    f: impl Fn(&[I]) -> Result<Vec<O>> + Sync,
) -> Result<Vec<O>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let chunk = items.len().div_ceil(threads.max(1));
    if chunk >= items.len() {
        return f(items);
    }
    let parts: Vec<Result<Vec<O>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| f(c))).collect();
        handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerError {
    pub layers: usize,
    /// Mean over frames and joints of the L2 distance of 3-vectors.
    pub joint_l2: f64,
    /// Mean absolute error per feature.
    pub l1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CodebookUsage {
    pub layer: usize,
    pub used_fraction: f64,
    pub perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReconstructionReport {
    pub sequences: usize,
    pub per_layer: Vec<LayerError>,
    /// Fraction of sequences whose L1 error rises anywhere along the sweep.
    pub violation_fraction: f64,
    /// Per-sequence L1 error, indexed `[sequence][layers - 1]`.
    pub per_sequence_l1: Vec<Vec<f64>>,
    pub codebooks: Vec<CodebookUsage>,
}

fn joint_l2<T: Scalar>(a: &MotionSequence<T>, b: &MotionSequence<T>) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for f in 0..a.len() {
        for (x, y) in a.frame(f).chunks(3).zip(b.frame(f).chunks(3)) {
            total += x.iter().zip(y).map(|(p, q)| (p.to_acc() - q.to_acc()).powi(2)).sum::<f64>().sqrt();
            count += 1;
        }
    }
    total / count.max(1) as f64
}

fn l1<T: Scalar>(a: &MotionSequence<T>, b: &MotionSequence<T>) -> f64 {
    crate::codec::reconstruction_error(a, b)
}

/// Reconstruction error for every `layers_used` in `1..=V+1`.
pub fn eval_reconstruction<T: Scalar>(
    codec: &CodecParams<T>,
    motions: &[&MotionSequence<T>],
    threads: usize,
) -> Result<ReconstructionReport> {
    if motions.is_empty() {
        return Err(Error::Length("reconstruction eval needs at least one motion".into()));
    }
    let depth = codec.num_layers();
    let rows = par_chunks(motions, threads, |chunk| {
        chunk
            .iter()
            .map(|m| {
                let tokens = tokenize(m, codec)?;
                let mut errs = Vec::with_capacity(depth);
                for l in 1..=depth {
                    let r = detokenize(&tokens, codec, l)?.slice(0, m.len())?;
                    errs.push((joint_l2(m, &r), l1(m, &r)));
                }
                Ok((tokens, errs))
            })
            .collect()
    })?;
    let n = rows.len() as f64;
    let per_layer = (0..depth)
        .map(|l| LayerError {
            layers: l + 1,
            joint_l2: rows.iter().map(|(_, e)| e[l].0).sum::<f64>() / n,
            l1: rows.iter().map(|(_, e)| e[l].1).sum::<f64>() / n,
        })
        .collect();
    let per_sequence_l1: Vec<Vec<f64>> = rows.iter().map(|(_, e)| e.iter().map(|x| x.1).collect()).collect();
    let violations = per_sequence_l1.iter().filter(|e| e.windows(2).any(|w| w[1] > w[0])).count();
    let codebooks = (0..depth)
        .map(|v| {
            let size = codec.stack.layers[v].size();
            let mut hist = vec![0u64; size];
            for (tokens, _) in &rows {
                for &t in &tokens.rows[v] {
                    hist[t] += 1;
                }
            }
            let total = hist.iter().sum::<u64>().max(1) as f64;
            let entropy: f64 = hist.iter().filter(|&&c| c > 0).map(|&c| -(c as f64 / total) * (c as f64 / total).ln()).sum();
            CodebookUsage {
                layer: v,
                used_fraction: hist.iter().filter(|&&c| c > 0).count() as f64 / size as f64,
                perplexity: entropy.exp(),
            }
        })
        .collect();
    Ok(ReconstructionReport {
        sequences: rows.len(),
        per_layer,
        violation_fraction: violations as f64 / n,
        per_sequence_l1,
        codebooks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelAccuracy {
    pub label: String,
    pub full: f64,
    pub base: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub s_masked: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceSummary {
    /// Mean masked count after each iteration.
    pub mean_masked: Vec<f64>,
    /// Mean confidence of the tokens sampled in each iteration.
    pub mean_conf: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerationReport {
    pub iterations: usize,
    pub samples: usize,
    pub full_accuracy: f64,
    pub base_accuracy: f64,
    pub per_label: Vec<LabelAccuracy>,
    pub cfg_sweep: Vec<SweepPoint>,
    pub trace: TraceSummary,
}

struct Outcome {
    full: bool,
    base: bool,
    masked: Vec<usize>,
    conf: Vec<f64>,
}

fn run_generations<T: Scalar>(
    models: Models<'_, T>,
    oracle: &OracleClassifier,
    jobs: &[(usize, u64)],
    frames: usize,
    inference: &InferenceConfig,
    seed: u64,
    threads: usize,
) -> Result<Vec<Outcome>> {
    let root = Rng::named(seed, "eval-generation");
    par_chunks(jobs, threads, |chunk| {
        let conds: Vec<Condition> = chunk.iter().map(|&(l, _)| Condition::Label(l)).collect();
        let mut rngs: Vec<Rng> = chunk.iter().map(|&(_, i)| root.fork_indexed("sample", i)).collect();
        let gens = generate_batch(&conds, frames, models, inference, &mut rngs)?;
        gens.into_iter()
            .zip(chunk)
            .map(|(g, &(label, _))| {
                let base = detokenize(&g.tokens, models.codec, 1)?.slice(0, frames)?;
                Ok(Outcome {
                    full: oracle.predict(&g.motion.frames)? == label,
                    base: oracle.predict(&base.frames)? == label,
                    masked: g.trace.masked_trajectory(),
                    conf: g.trace.lines.iter().map(|l| l.mean_conf).collect(),
                })
            })
            .collect()
    })
}

/// Oracle accuracy on `samples_per_label` generations per label, full stack
/// against base layer only, plus a sweep over the masked guidance scale.
pub fn eval_generation<T: Scalar>(
    models: Models<'_, T>,
    oracle: &OracleClassifier,
    labels: &[&str],
    eval: &EvalConfig,
    inference: &InferenceConfig,
    seed: u64,
    threads: usize,
) -> Result<GenerationReport> {
    if labels.is_empty() || eval.samples_per_label == 0 {
        return Err(Error::Length("generation eval needs labels and samples".into()));
    }
    let per = eval.samples_per_label;
    let jobs: Vec<(usize, u64)> = (0..labels.len()).flat_map(|l| (0..per).map(move |i| (l, (l * per + i) as u64))).collect();
    let outcomes = run_generations(models, oracle, &jobs, eval.frames, inference, seed, threads)?;
    let rate = |xs: &mut dyn Iterator<Item = bool>| {
        let (hit, n) = xs.fold((0usize, 0usize), |(h, n), x| (h + x as usize, n + 1));
        hit as f64 / n.max(1) as f64
    };
    let per_label = labels
        .iter()
        .enumerate()
        .map(|(l, name)| {
            let slice = &outcomes[l * per..(l + 1) * per];
            LabelAccuracy {
                label: name.to_string(),
                full: rate(&mut slice.iter().map(|o| o.full)),
                base: rate(&mut slice.iter().map(|o| o.base)),
            }
        })
        .collect();
    let mut cfg_sweep = Vec::new();
    for &s in &eval.cfg_sweep {
        let mut inf = inference.clone();
        inf.guidance.s_masked = s;
        let out = run_generations(models, oracle, &jobs, eval.frames, &inf, seed, threads)?;
        cfg_sweep.push(SweepPoint {
            s_masked: s,
            accuracy: rate(&mut out.iter().map(|o| o.full)),
        });
    }
    let iters = inference.schedule.iterations;
    let n = outcomes.len() as f64;
    let trace = TraceSummary {
        mean_masked: (0..iters).map(|i| outcomes.iter().map(|o| o.masked[i] as f64).sum::<f64>() / n).collect(),
        mean_conf: (0..iters).map(|i| outcomes.iter().map(|o| o.conf[i]).sum::<f64>() / n).collect(),
    };
    Ok(GenerationReport {
        iterations: iters,
        samples: outcomes.len(),
        full_accuracy: rate(&mut outcomes.iter().map(|o| o.full)),
        base_accuracy: rate(&mut outcomes.iter().map(|o| o.base)),
        per_label,
        cfg_sweep,
        trace,
    })
}
