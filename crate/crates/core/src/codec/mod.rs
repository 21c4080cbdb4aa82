//! Motion RVQ-VAE: convolutional encoder/decoder around a residual
//! quantizer, plus its training loop.

mod motion;
pub mod network;

pub use motion::{MotionSequence, DEFAULT_FPS};

use crate::error::{Error, Result};
use crate::ndmath::{
    adam_step, clip_grad_norm, cosine_lr, Bound, AdamConfig, AdamState, ParamStore, Rng, Scalar, Tape, Tensor, Var,
};
use crate::rvq::{
    commitment_loss, draw_dropout_layers, ema_update, lookup_sum, residual_quantize, straight_through, EmaConfig, LayerBatch,
    RvqStack,
};

/// Temporal downscale factor between frames and tokens.
pub const DOWNSCALE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    pub pose_dim: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub resblocks: usize,
    /// One entry per quantization layer, base layer first.
    pub codebook_sizes: Vec<usize>,
    pub dropout_q: f64,
    pub beta: f64,
    pub ema: EmaConfig,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            pose_dim: crate::corpus::POSE_DIM,
            width: 128,
            latent_dim: 128,
            resblocks: 2,
            codebook_sizes: vec![128; 6],
            dropout_q: 0.2,
            beta: 0.25,
            ema: EmaConfig::default(),
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pose_dim == 0 || self.width == 0 || self.latent_dim == 0 {
            return Err(Error::Config("codec dims must be positive".into()));
        }
        if self.codebook_sizes.is_empty() || self.codebook_sizes.contains(&0) {
            return Err(Error::Config("codec needs at least one non-empty codebook".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_q) {
            return Err(Error::Config(format!("dropout q {} outside [0, 1]", self.dropout_q)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("commitment weight {} must be non-negative", self.beta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecTrainConfig {
    /// Training window length in frames; rounded down to a multiple of 4.
    pub window: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub warmup: usize,
    pub clip: f64,
    /// Final learning rate as a fraction of `lr`, reached by cosine decay.
    pub lr_floor: f64,
    /// Steps per logged epoch.
    pub log_every: usize,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            window: 32,
            batch: 16,
            steps: 2000,
            lr: 2e-3,
            warmup: 100,
            clip: 1.0,
            lr_floor: 0.05,
            log_every: 100,
        }
    }
}

/// Lower bound on per-channel scales so near-constant channels are not
/// amplified.
pub const MIN_FEATURE_SCALE: f64 = 0.1;

/// Per-channel standardisation applied before the encoder and undone after
/// the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNorm<T> {
    pub mean: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Scalar> FeatureNorm<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![T::zero(); dim],
            scale: vec![T::one(); dim],
        }
    }

    /// Channel means and standard deviations over every frame of `motions`.
    pub fn fit(motions: &[&MotionSequence<T>]) -> Self {
        let d = motions[0].dim();
        let mut sum = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        let mut count = 0.0;
        for m in motions {
            for i in 0..m.len() {
                for (j, v) in m.frame(i).iter().enumerate() {
                    let v = v.to_acc();
                    sum[j] += v;
                    sq[j] += v * v;
                }
                count += 1.0;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| T::of((q / count - m * m).max(0.0).sqrt().max(MIN_FEATURE_SCALE)))
            .collect();
        Self {
            mean: mean.into_iter().map(T::of).collect(),
            scale,
        }
    }

    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let inv: Vec<T> = self.scale.iter().map(|&s| T::one() / s).collect();
        let shift: Vec<T> = self.mean.iter().zip(&inv).map(|(&m, &i)| -m * i).collect();
        tape.channel_affine(x, &inv, &shift)
    }

    fn inverse(&self, tape: &mut Tape<T>, y: Var) -> Result<Var> {
        tape.channel_affine(y, &self.scale, &self.mean)
    }
}

#[derive(Clone, Debug)]
pub struct CodecParams<T> {
    pub config: CodecConfig,
    pub norm: FeatureNorm<T>,
    pub net: ParamStore<T>,
    pub stack: RvqStack<T>,
}

impl<T: Scalar> CodecParams<T> {
    pub fn init(config: &CodecConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let net = network::init_params(config, &mut rng.fork("codec.net"));
        let stack = RvqStack::new(
            &config.codebook_sizes,
            config.latent_dim,
            config.dropout_q,
            &mut rng.fork("codec.stack"),
        )?;
        Ok(Self {
            config: config.clone(),
            norm: FeatureNorm::identity(config.pose_dim),
            net,
            stack,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.stack.num_layers()
    }

    /// `[B, D, N]` frames to `[B, d, N/4]` latents on `tape`.
    pub fn encoder_graph(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let x = self.norm.forward(tape, x)?;
        network::encoder(tape, &self.net, bound, self.config.resblocks, x)
    }

    /// `[B, d, n]` latents to `[B, D, 4n]` frames on `tape`.
    pub fn decoder_graph(&self, tape: &mut Tape<T>, bound: &Bound, z: Var) -> Result<Var> {
        let y = network::decoder(tape, &self.net, bound, self.config.resblocks, z)?;
        self.norm.inverse(tape, y)
    }
}

/// `n × d` encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence<T> {
    pub vectors: Tensor<T>,
}

impl<T: Scalar> LatentSequence<T> {
    pub fn len(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `(V+1) × n` token ids, base layer first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStack {
    pub rows: Vec<Vec<usize>>,
}

impl TokenStack {
    pub fn new(rows: Vec<Vec<usize>>) -> Result<Self> {
        let n = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Length("token stack rows must be non-empty and equal length".into()));
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_layers(&self) -> usize {
        self.rows.len()
    }

    pub fn base(&self) -> &[usize] {
        &self.rows[0]
    }
}

/// `[N, D]` frames → `[1, D, N]`.
fn to_channels<T: Scalar>(frames: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = (frames.shape()[0], frames.shape()[1]);
    frames.transpose2()?.reshape(&[1, d, n])
}

/// `[1, C, N]` → `[N, C]`.
fn from_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, n) = (x.shape()[1], x.shape()[2]);
    x.reshape(&[c, n])?.transpose2()
}

fn check_motion<T: Scalar>(motion: &MotionSequence<T>, params: &CodecParams<T>) -> Result<()> {
    if motion.len() < DOWNSCALE {
        return Err(Error::Length(format!("motion of {} frames is shorter than {DOWNSCALE}", motion.len())));
    }
    if motion.dim() != params.config.pose_dim {
        return Err(Error::Dimension {
            op: "encode",
            left: vec![motion.len(), motion.dim()],
            right: vec![params.config.pose_dim],
        });
    }
    Ok(())
}

/// Runs the encoder; `motion.len()` must be a multiple of 4.
pub fn encode<T: Scalar>(motion: &MotionSequence<T>, params: &CodecParams<T>) -> Result<LatentSequence<T>> {
    check_motion(motion, params)?;
    if motion.len() % DOWNSCALE != 0 {
        return Err(Error::Length(format!(
            "motion of {} frames is not a multiple of {DOWNSCALE}; pad first",
            motion.len()
        )));
    }
    let mut tape = Tape::new();
    let bound = params.net.attach_frozen(&mut tape);
    let x = tape.constant(to_channels(&motion.frames)?);
    let z = params.encoder_graph(&mut tape, &bound, x)?;
    let vectors = from_channels(tape.value(z))?;
    vectors.check_finite("encode")?;
    Ok(LatentSequence { vectors })
}

/// Pads the tail, encodes, and quantizes with every layer active.
pub fn tokenize<T: Scalar>(motion: &MotionSequence<T>, params: &CodecParams<T>) -> Result<TokenStack> {
    check_motion(motion, params)?;
    let latents = encode(&motion.pad_to_multiple(DOWNSCALE), params)?;
    let q = residual_quantize(&latents.vectors, &params.stack, params.num_layers())?;
    TokenStack::new(q.token_rows)
}

/// Sums the first `layers_used` code rows and decodes `4n` frames.
pub fn detokenize<T: Scalar>(tokens: &TokenStack, params: &CodecParams<T>, layers_used: usize) -> Result<MotionSequence<T>> {
    if layers_used == 0 || layers_used > tokens.num_layers() || layers_used > params.num_layers() {
        return Err(Error::Config(format!(
            "layers_used {layers_used} outside [1, {}]",
            tokens.num_layers().min(params.num_layers())
        )));
    }
    let sum = lookup_sum(&tokens.rows, &params.stack, layers_used)?;
    decode_latents(&sum, params)
}

/// Decodes `[n, d]` latents to `[4n, D]` frames.
pub fn decode_latents<T: Scalar>(latents: &Tensor<T>, params: &CodecParams<T>) -> Result<MotionSequence<T>> {
    let mut tape = Tape::new();
    let bound = params.net.attach_frozen(&mut tape);
    let z = tape.constant(to_channels(latents)?);
    let y = params.decoder_graph(&mut tape, &bound, z)?;
    let frames = from_channels(tape.value(y))?;
    frames.check_finite("decode")?;
    MotionSequence::new(frames, DEFAULT_FPS)
}

/// Mean absolute per-feature error over the overlapping frames.
pub fn reconstruction_error<T: Scalar>(reference: &MotionSequence<T>, recon: &MotionSequence<T>) -> f64 {
    let n = reference.len().min(recon.len());
    let mut acc = 0.0;
    for i in 0..n {
        for (a, b) in reference.frame(i).iter().zip(recon.frame(i)) {
            acc += (a.to_acc() - b.to_acc()).abs();
        }
    }
    acc / (n * reference.dim()).max(1) as f64
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CodecStepLog {
    pub loss: f64,
    pub recon: f64,
    pub commit: f64,
    pub active_layers: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CodecTrainLog {
    pub steps: Vec<CodecStepLog>,
    /// Mean reconstruction L1 per logged epoch.
    pub epoch_recon: Vec<f64>,
}

struct Batch<T> {
    /// `[B, D, W]`.
    input: Tensor<T>,
    /// `[B, D, W]`, 1 on real frames, 0 on tail padding.
    weight: Tensor<T>,
    real: usize,
}

fn draw_batch<T: Scalar>(motions: &[&MotionSequence<T>], batch: usize, window: usize, rng: &mut Rng) -> Result<Batch<T>> {
    let d = motions[0].dim();
    let mut input = Vec::with_capacity(batch * d * window);
    let mut weight = Vec::with_capacity(batch * d * window);
    let mut real = 0;
    for _ in 0..batch {
        let m = motions[rng.below(motions.len())];
        let start = if m.len() > window { rng.below(m.len() - window + 1) } else { 0 };
        let avail = (m.len() - start).min(window);
        real += avail;
        for j in 0..d {
            for t in 0..window {
                let f = start + t.min(avail - 1);
                input.push(m.frame(f)[j]);
                weight.push(if t < avail { T::one() } else { T::zero() });
            }
        }
    }
    Ok(Batch {
        input: Tensor::new(vec![batch, d, window], input)?,
        weight: Tensor::new(vec![batch, d, window], weight)?,
        real: real * d,
    })
}

/// Forward pass of the full training objective on one batch.
pub struct CodecForward<T: Scalar> {
    pub loss: Var,
    pub recon: Var,
    pub commit: Var,
    pub latents: Tensor<T>,
    pub quant: crate::rvq::QuantizeResult<T>,
}

/// Builds `L1(m, m̂) + β·commit` for `input: [B, D, W]` with frame weights.
pub fn codec_objective<T: Scalar>(
    tape: &mut Tape<T>,
    params: &CodecParams<T>,
    bound: &Bound,
    input: Var,
    weight: &Tensor<T>,
    active_layers: usize,
    real: usize,
) -> Result<CodecForward<T>> {
    let cfg = &params.config;
    let shape = tape.value(input).shape().to_vec();
    let b = shape[0];
    let z = params.encoder_graph(tape, bound, input)?;
    let n = tape.value(z).shape()[2];
    let zt = tape.transpose_last2(z)?;
    let flat = tape.reshape(zt, &[b * n, cfg.latent_dim])?;
    let latents = tape.value(flat).clone();
    let quant = residual_quantize(&latents, &params.stack, active_layers)?;
    let commit = commitment_loss(tape, flat, &quant)?;
    let q = straight_through(tape, flat, &quant)?;
    let q = tape.reshape(q, &[b, n, cfg.latent_dim])?;
    let q = tape.transpose_last2(q)?;
    let y = params.decoder_graph(tape, bound, q)?;
    let diff = tape.sub(y, input)?;
    let diff = tape.abs(diff);
    let w = tape.constant(weight.clone());
    let diff = tape.mul(diff, w)?;
    let total = tape.sum(diff);
    let recon = tape.scale(total, 1.0 / real.max(1) as f64);
    let weighted = tape.scale(commit, cfg.beta);
    let loss = tape.add(recon, weighted)?;
    Ok(CodecForward {
        loss,
        recon,
        commit,
        latents,
        quant,
    })
}

/// Trains encoder/decoder by Adam and codebooks by EMA on `motions`.
pub fn train_rvqvae<T: Scalar>(
    motions: &[&MotionSequence<T>],
    config: &CodecConfig,
    train: &CodecTrainConfig,
    rng: &mut Rng,
) -> Result<(CodecParams<T>, CodecTrainLog)> {
    if motions.is_empty() {
        return Err(Error::Config("codec training needs a non-empty corpus".into()));
    }
    let window = train.window / DOWNSCALE * DOWNSCALE;
    if window == 0 || train.batch == 0 {
        return Err(Error::Config("codec window and batch must be positive".into()));
    }
    let mut params = CodecParams::init(config, rng)?;
    params.norm = FeatureNorm::fit(motions);
    let mut data_rng = rng.fork("codec.data");
    let mut drop_rng = rng.fork("codec.dropout");
    let mut ema_rng = rng.fork("codec.ema");
    let mut opt = AdamState::new(&params.net, AdamConfig::default());
    let mut log = CodecTrainLog::default();
    let mut epoch_acc = 0.0;
    let mut epoch_len = 0usize;
    for step in 0..train.steps {
        let batch = draw_batch(motions, train.batch, window, &mut data_rng)?;
        if !params.stack.is_initialized() {
            init_codebooks(&mut params, &batch.input, &mut ema_rng)?;
        }
        let active = draw_dropout_layers(&params.stack, &mut drop_rng);
        let mut tape = Tape::new();
        let bound = params.net.attach(&mut tape);
        let input = tape.constant(batch.input.clone());
        let fwd = codec_objective(&mut tape, &params, &bound, input, &batch.weight, active, batch.real)?;
        let loss = tape.value(fwd.loss).data()[0].to_acc();
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                what: "codec loss".into(),
            });
        }
        let recon = tape.value(fwd.recon).data()[0].to_acc();
        let commit = tape.value(fwd.commit).data()[0].to_acc();
        let grads = tape.backward(fwd.loss)?;
        let mut g = bound.gradients(&grads, &params.net);
        clip_grad_norm(&mut g, train.clip);
        let lr = cosine_lr(step + 1, train.lr, train.warmup, train.steps, train.lr_floor);
        adam_step(&mut params.net, &g, &mut opt, lr)?;

        let layer_batches: Vec<LayerBatch<'_, T>> = fwd
            .quant
            .token_rows
            .iter()
            .zip(&fwd.quant.residuals)
            .map(|(idx, r)| LayerBatch { residuals: r, indices: idx })
            .collect();
        ema_update(&mut params.stack, &layer_batches, config.ema, &mut ema_rng)?;

        log.steps.push(CodecStepLog {
            loss,
            recon,
            commit,
            active_layers: active,
        });
        epoch_acc += recon;
        epoch_len += 1;
        if epoch_len == train.log_every.max(1) || step + 1 == train.steps {
            log.epoch_recon.push(epoch_acc / epoch_len as f64);
            epoch_acc = 0.0;
            epoch_len = 0;
        }
    }
    Ok((params, log))
}

/// Seeds each codebook from the residuals of the first batch.
fn init_codebooks<T: Scalar>(params: &mut CodecParams<T>, input: &Tensor<T>, rng: &mut Rng) -> Result<()> {
    let mut tape = Tape::new();
    let bound = params.net.attach_frozen(&mut tape);
    let x = tape.constant(input.clone());
    let z = params.encoder_graph(&mut tape, &bound, x)?;
    let zt = tape.transpose_last2(z)?;
    let (b, n) = (input.shape()[0], tape.value(z).shape()[2]);
    let mut residual = tape.value(zt).reshape(&[b * n, params.config.latent_dim])?;
    for v in 0..params.stack.num_layers() {
        params.stack.layers[v].init_from(&residual, rng);
        let q = residual_quantize(&residual, &RvqStack {
            layers: vec![params.stack.layers[v].clone()],
            dropout_q: 0.0,
        }, 1)?;
        residual = q.residuals[1].clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> CodecConfig {
        CodecConfig {
            pose_dim: 6,
            width: 8,
            latent_dim: 4,
            resblocks: 1,
            codebook_sizes: vec![8, 8, 8],
            ..CodecConfig::default()
        }
    }

    fn wave(n: usize, d: usize, phase: f64) -> MotionSequence<f32> {
        let data = (0..n * d)
            .map(|i| ((i / d) as f32 * 0.3 + (i % d) as f32 + phase as f32).sin())
            .collect();
        MotionSequence::new(Tensor::new(vec![n, d], data).unwrap(), DEFAULT_FPS).unwrap()
    }

    #[test]
    fn encode_downscales_by_four() {
        let p = CodecParams::<f32>::init(&toy_config(), &mut Rng::new(0)).unwrap();
        for n in (4..=64).step_by(4) {
            assert_eq!(encode(&wave(n, 6, 0.0), &p).unwrap().len(), n / 4);
        }
        assert!(matches!(encode(&wave(3, 6, 0.0), &p), Err(Error::Length(_))));
        assert!(matches!(encode(&wave(6, 6, 0.0), &p), Err(Error::Length(_))));
    }

    #[test]
    fn zero_encoder_gives_zero_latents() {
        let mut p = CodecParams::<f32>::init(&toy_config(), &mut Rng::new(0)).unwrap();
        let names: Vec<String> = p.net.iter().map(|(n, _)| n.to_string()).filter(|n| n.starts_with("enc.")).collect();
        for n in names {
            p.net.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let z = encode(&wave(16, 6, 0.0), &p).unwrap();
        assert!(z.vectors.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn detokenize_upsamples_and_checks_ids() {
        let p = CodecParams::<f32>::init(&toy_config(), &mut Rng::new(0)).unwrap();
        let tokens = TokenStack::new(vec![vec![1, 2, 3, 4]; 3]).unwrap();
        assert_eq!(detokenize(&tokens, &p, 3).unwrap().len(), 16);
        let bad = TokenStack::new(vec![vec![1, 2, 3, 8]; 3]).unwrap();
        assert!(matches!(detokenize(&bad, &p, 1), Err(Error::Token(_))));
        assert!(detokenize(&tokens, &p, 0).is_err());
        assert!(detokenize(&tokens, &p, 4).is_err());
    }

    #[test]
    fn tokenize_pads_and_is_deterministic() {
        let p = CodecParams::<f32>::init(&toy_config(), &mut Rng::new(0)).unwrap();
        let m = wave(18, 6, 0.5);
        let a = tokenize(&m, &p).unwrap();
        assert_eq!(a, tokenize(&m.clone(), &p).unwrap());
        assert_eq!(a.len(), 5);
        assert_eq!(a.num_layers(), 3);
        assert_eq!(detokenize(&a, &p, 3).unwrap().len(), m.pad_to_multiple(4).len());
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let motions: Vec<_> = (0..8).map(|i| wave(24, 6, i as f64 * 0.7)).collect();
        let refs: Vec<_> = motions.iter().collect();
        let train = CodecTrainConfig {
            window: 16,
            batch: 4,
            steps: 150,
            lr: 3e-3,
            warmup: 10,
            log_every: 25,
            ..CodecTrainConfig::default()
        };
        let (_, log) = train_rvqvae(&refs, &toy_config(), &train, &mut Rng::new(3)).unwrap();
        let (_, again) = train_rvqvae(&refs, &toy_config(), &train, &mut Rng::new(3)).unwrap();
        assert_eq!(log, again);
        let first = log.epoch_recon[0];
        let last = *log.epoch_recon.last().unwrap();
        assert!(last < 0.5 * first, "{first} -> {last}");
    }
}
