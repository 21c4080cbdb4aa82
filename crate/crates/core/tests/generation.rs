use momask_lab::codec::{detokenize, tokenize, CodecParams, MotionSequence};
use momask_lab::corpus::build_corpus;
use momask_lab::engine::{generate, generate_batch, inpaint, InferenceConfig, InpaintSpec, Models};
use momask_lab::mformer::MFormerParams;
use momask_lab::ndmath::Rng;
use momask_lab::nn::Condition;
use momask_lab::rformer::RFormerParams;
use momask_lab::toolkit::RunConfig;

const SMALL: &str = "preset = toy
corpus.samples = 16
codec.width = 8
codec.latent_dim = 8
mformer.hidden = 16
mformer.heads = 2
mformer.layers = 1
rformer.hidden = 16
rformer.heads = 2
rformer.layers = 1
";

struct Fixture {
    config: RunConfig,
    codec: CodecParams<f32>,
    mformer: MFormerParams<f32>,
    rformer: RFormerParams<f32>,
    reference: MotionSequence<f32>,
}

impl Fixture {
    fn new() -> Self {
        let config = RunConfig::parse(SMALL).unwrap();
        let mut rng = Rng::new(11);
        let corpus = build_corpus::<f32>(&config.corpus).unwrap();
        Self {
            codec: CodecParams::init(&config.codec, &mut rng).unwrap(),
            mformer: MFormerParams::init(&config.mformer_config(), &mut rng).unwrap(),
            rformer: RFormerParams::init(&config.rformer_config(), &mut rng).unwrap(),
            reference: corpus.samples[0].motion.clone(),
            config,
        }
    }

    fn models(&self) -> Models<'_, f32> {
        Models {
            codec: &self.codec,
            mformer: &self.mformer,
            rformer: &self.rformer,
        }
    }
}

#[test]
fn generation_is_a_function_of_the_seed() {
    let f = Fixture::new();
    let a = generate(Condition::Label(2), 37, f.models(), &f.config.inference, &mut Rng::new(5)).unwrap();
    let b = generate(Condition::Label(2), 37, f.models(), &f.config.inference, &mut Rng::new(5)).unwrap();
    let c = generate(Condition::Label(2), 37, f.models(), &f.config.inference, &mut Rng::new(6)).unwrap();
    assert_eq!(a.motion.len(), 37);
    assert_eq!(a.tokens.len(), 10);
    assert_eq!(a.tokens.num_layers(), f.codec.num_layers());
    assert_eq!(a.motion, b.motion);
    assert_eq!(a.tokens, b.tokens);
    assert_ne!(a.tokens, c.tokens);
}

#[test]
fn batch_generation_matches_single_calls() {
    let f = Fixture::new();
    let conds = [Condition::Label(0), Condition::Null, Condition::Label(7)];
    let mut rngs: Vec<Rng> = (0..3).map(|i| Rng::new(20 + i)).collect();
    let batch = generate_batch(&conds, 24, f.models(), &f.config.inference, &mut rngs).unwrap();
    for (i, (g, c)) in batch.iter().zip(conds).enumerate() {
        let single = generate(c, 24, f.models(), &f.config.inference, &mut Rng::new(20 + i as u64)).unwrap();
        assert_eq!(g.tokens, single.tokens);
        assert_eq!(g.motion, single.motion);
    }
}

#[test]
fn generated_tokens_stay_in_each_codebook() {
    let f = Fixture::new();
    let g = generate(Condition::Label(1), 64, f.models(), &f.config.inference, &mut Rng::new(8)).unwrap();
    for (row, &k) in g.tokens.rows.iter().zip(&f.config.codec.codebook_sizes) {
        assert!(row.iter().all(|&t| t < k));
    }
    assert!(generate(Condition::Label(1), 0, f.models(), &f.config.inference, &mut Rng::new(8)).is_err());
    assert!(generate(Condition::Label(99), 8, f.models(), &f.config.inference, &mut Rng::new(8)).is_err());
}

#[test]
fn inpainting_without_ranges_returns_the_reconstruction() {
    let f = Fixture::new();
    let spec = InpaintSpec {
        reference: f.reference.clone(),
        ranges: vec![],
    };
    let out = inpaint(&spec, Condition::Label(3), f.models(), &f.config.inference, &mut Rng::new(1)).unwrap();
    let tokens = tokenize(&f.reference, &f.codec).unwrap();
    let recon = detokenize(&tokens, &f.codec, tokens.num_layers()).unwrap();
    assert_eq!(out.tokens, tokens);
    assert_eq!(out.reference_tokens, tokens);
    assert_eq!(out.motion.len(), f.reference.len());
    for i in 0..f.reference.len() {
        assert_eq!(out.motion.frame(i), recon.frame(i));
    }
}

#[test]
fn inpainting_keeps_every_token_outside_the_ranges() {
    let f = Fixture::new();
    let n = f.reference.len().div_ceil(4);
    let ranges = vec![(0, 2), (n - 3, n)];
    let spec = InpaintSpec {
        reference: f.reference.clone(),
        ranges: ranges.clone(),
    };
    let out = inpaint(&spec, Condition::Label(5), f.models(), &InferenceConfig::default(), &mut Rng::new(2)).unwrap();
    let tokens = tokenize(&f.reference, &f.codec).unwrap();
    for (got, want) in out.tokens.rows.iter().zip(&tokens.rows) {
        for p in 2..n - 3 {
            assert_eq!(got[p], want[p]);
        }
    }
    let recon = detokenize(&tokens, &f.codec, tokens.num_layers()).unwrap();
    for i in 8..4 * (n - 3) {
        assert_eq!(out.motion.frame(i), recon.frame(i));
    }
    let bad = InpaintSpec {
        reference: f.reference.clone(),
        ranges: vec![(1, n + 1)],
    };
    assert!(inpaint(&bad, Condition::Label(5), f.models(), &InferenceConfig::default(), &mut Rng::new(2)).is_err());
}
