//! Gradient checks shared by the gradient suite and the acceptance run.
//! Every case returns its worst relative error.

use momask_lab::codec::{codec_objective, CodecConfig, CodecParams, FeatureNorm, TokenStack};
use momask_lab::mformer::{mformer_loss, MFormerConfig, MFormerParams};
use momask_lab::ndmath::{Bound, ParamStore, Rng, Tape, Tensor, Var};
use momask_lab::nn::{Condition, TransformerConfig};
use momask_lab::rformer::{rformer_loss, RFormerConfig, RFormerParams};
use momask_lab::rvq::{commitment_loss, residual_quantize};

use super::{grad_check, probe, rand_tensor};

pub type Case = (String, f64);

fn inputs(shapes: &[&[usize]], seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = Rng::new(seed);
    shapes.iter().map(|s| rand_tensor(s, &mut rng)).collect()
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

pub fn elementwise() -> Vec<Case> {
    let x = inputs(&[&[3, 4], &[3, 4]], 1);
    vec![
        ("add".into(), grad_check(|t, v| { let y = t.add(v[0], v[1])?; probe(t, y, 9) }, &x)),
        ("sub".into(), grad_check(|t, v| { let y = t.sub(v[0], v[1])?; probe(t, y, 9) }, &x)),
        ("mul".into(), grad_check(|t, v| { let y = t.mul(v[0], v[1])?; probe(t, y, 9) }, &x)),
        ("scale".into(), grad_check(|t, v| { let y = t.scale(v[0], -1.7); probe(t, y, 9) }, &x)),
        ("square".into(), grad_check(|t, v| { let y = t.square(v[0]); probe(t, y, 9) }, &x)),
        ("abs".into(), grad_check(|t, v| { let y = t.abs(v[0]); probe(t, y, 9) }, &x)),
        ("relu".into(), grad_check(|t, v| { let y = t.relu(v[0]); probe(t, y, 9) }, &x)),
        ("gelu".into(), grad_check(|t, v| { let y = t.gelu(v[0])?; probe(t, y, 9) }, &x)),
        ("mean".into(), grad_check(|t, v| { let y = t.square(v[0]); Ok(t.mean(y)) }, &x)),
    ]
}

pub fn linear_algebra() -> Vec<Case> {
    let x = inputs(&[&[3, 4], &[4, 5], &[5]], 2);
    let y = inputs(&[&[2, 3, 4], &[6, 4]], 3);
    vec![
        ("matmul".into(), grad_check(|t, v| { let y = t.matmul(v[0], v[1])?; probe(t, y, 3) }, &x)),
        (
            "add_bias".into(),
            grad_check(|t, v| { let y = t.matmul(v[0], v[1])?; let y = t.add_bias(y, v[2])?; probe(t, y, 3) }, &x),
        ),
        ("matmul_nt".into(), grad_check(|t, v| { let y = t.matmul_nt(v[0], v[1])?; probe(t, y, 4) }, &y)),
    ]
}

pub fn normalisation() -> Vec<Case> {
    let x = inputs(&[&[4, 6], &[6], &[6]], 4);
    let c = inputs(&[&[2, 3, 5]], 12);
    vec![
        ("softmax".into(), grad_check(|t, v| { let y = t.softmax(v[0])?; probe(t, y, 5) }, &x)),
        ("layernorm".into(), grad_check(|t, v| { let y = t.layernorm(v[0], v[1], v[2])?; probe(t, y, 5) }, &x)),
        (
            "channel_affine".into(),
            grad_check(|t, v| { let y = t.channel_affine(v[0], &[0.5, -2.0, 1.5], &[0.1, 0.0, -0.3])?; probe(t, y, 13) }, &c),
        ),
    ]
}

pub fn structural() -> Vec<Case> {
    let x = inputs(&[&[5, 3], &[2, 3]], 5);
    let y = inputs(&[&[2, 3, 4]], 6);
    vec![
        ("gather".into(), grad_check(|t, v| { let y = t.gather_rows(v[0], &[4, 0, 0, 2])?; probe(t, y, 6) }, &x)),
        ("concat".into(), grad_check(|t, v| { let y = t.concat_rows(&[v[0], v[1], v[0]])?; probe(t, y, 6) }, &x)),
        (
            "transpose".into(),
            grad_check(|t, v| { let y = t.transpose_last2(v[0])?; let y = t.reshape(y, &[8, 3])?; probe(t, y, 7) }, &y),
        ),
        ("upsample".into(), grad_check(|t, v| { let y = t.upsample2(v[0]); probe(t, y, 7) }, &y)),
    ]
}

pub fn conv1d() -> Vec<Case> {
    [(1, 1, 3), (2, 1, 4), (1, 0, 1)]
        .into_iter()
        .map(|(stride, pad, k)| {
            let x = inputs(&[&[2, 3, 8], &[4, 3, k], &[4]], 7 + k as u64);
            let err = grad_check(move |t, v| { let y = t.conv1d(v[0], v[1], v[2], stride, pad)?; probe(t, y, 8) }, &x);
            (format!("conv1d s{stride} p{pad} k{k}"), err)
        })
        .collect()
}

pub fn attention() -> Vec<Case> {
    let x = inputs(&[&[7, 4], &[7, 4], &[7, 4]], 8);
    let mask = [true, true, false, true, true, true, true];
    vec![(
        "attention".into(),
        grad_check(|t, v| { let y = t.attention(v[0], v[1], v[2], 2, &[3, 4], Some(&mask))?; probe(t, y, 9) }, &x),
    )]
}

pub fn cross_entropy() -> Vec<Case> {
    let x = inputs(&[&[4, 5]], 9);
    let targets = [Some(1), None, Some(4), Some(0)];
    vec![("cross_entropy".into(), grad_check(|t, v| t.cross_entropy(v[0], &targets), &x))]
}

/// `x * sg[x]` against the derivative of `x * c` at `c = x`, and the
/// straight-through op against the probe weights it should pass back.
pub fn gradient_routing() -> Vec<Case> {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let s = tape.stop_gradient(x);
    let y = tape.mul(x, s).unwrap();
    let g = tape.backward(y).unwrap().get(x).unwrap().data()[0];
    let (c, h) = (3.0, 1e-3);
    let fd = ((3.0 + h) * c - (3.0 - h) * c) / (2.0 * h);

    let x = inputs(&[&[3, 2]], 10);
    let replaced = Tensor::from_f64(&[3, 2], &[1., 1., 0., 0., -1., 2.]).unwrap();
    let mut tape = Tape::<f64>::new();
    let v = tape.leaf(x[0].clone());
    let st = tape.straight_through(v, replaced.clone()).unwrap();
    let forward_ok = tape.value(st) == &replaced;
    let l = probe(&mut tape, st, 11).unwrap();
    let got = tape.backward(l).unwrap().get(v).unwrap().clone();
    let want = rand_tensor(&[3, 2], &mut Rng::new(11));
    let st_err = got.data().iter().zip(want.data()).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max);
    vec![
        ("stop_gradient".into(), rel(g, fd)),
        ("straight_through".into(), if forward_ok { st_err } else { f64::INFINITY }),
    ]
}

/// Elements sampled per parameter tensor.
const PER_TENSOR: usize = 6;

/// Central-difference step for whole-model losses.
const LOSS_FD_STEP: f64 = 1e-5;

/// Worst relative error between `analytic(store)` gradients and central
/// differences of `value(store)` over sampled elements of every slot.
fn store_check(
    store: &ParamStore<f64>,
    analytic: impl Fn(&ParamStore<f64>, &mut Tape<f64>, &Bound) -> Var,
    value: impl Fn(&ParamStore<f64>) -> f64,
) -> f64 {
    let mut tape = Tape::new();
    let bound = store.attach(&mut tape);
    let loss = analytic(store, &mut tape, &bound);
    let grads = bound.gradients(&tape.backward(loss).unwrap(), store);
    let mut rng = Rng::new(99);
    let mut worst = 0.0f64;
    for id in 0..store.len() {
        let n = store.by_id(id).len();
        let picks: Vec<usize> = if n <= PER_TENSOR { (0..n).collect() } else { rng.choose_distinct(n, PER_TENSOR) };
        for e in picks {
            let mut plus = store.clone();
            plus.by_id_mut(id).data_mut()[e] += LOSS_FD_STEP;
            let mut minus = store.clone();
            minus.by_id_mut(id).data_mut()[e] -= LOSS_FD_STEP;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * LOSS_FD_STEP);
            worst = worst.max(rel(grads[id].data()[e], numeric));
        }
    }
    worst
}

/// Codec objective against a surrogate that freezes the base-point code
/// assignment: `q(θ) = z(θ) + (Σb₀ − z₀)`.
pub fn codec_loss() -> Vec<Case> {
    let cfg = CodecConfig {
        pose_dim: 3,
        width: 4,
        latent_dim: 4,
        resblocks: 1,
        codebook_sizes: vec![5, 5, 5],
        ..CodecConfig::default()
    };
    let mut params = CodecParams::<f64>::init(&cfg, &mut Rng::new(20)).unwrap();
    params.norm = FeatureNorm {
        mean: vec![0.1, -0.2, 0.0],
        scale: vec![0.5, 1.0, 2.0],
    };
    let x = rand_tensor(&[2, 3, 8], &mut Rng::new(21));
    let weight = Tensor::<f64>::full(&[2, 3, 8], 1.0);
    let real = 2 * 8;
    let analytic = |store: &ParamStore<f64>, tape: &mut Tape<f64>, bound: &Bound| {
        let p = CodecParams { net: store.clone(), ..params.clone() };
        let input = tape.constant(x.clone());
        codec_objective(tape, &p, bound, input, &weight, 3, real).unwrap().loss
    };
    let frozen = {
        let mut tape = Tape::new();
        let bound = params.net.attach_frozen(&mut tape);
        let input = tape.constant(x.clone());
        let z = params.encoder_graph(&mut tape, &bound, input).unwrap();
        let zt = tape.transpose_last2(z).unwrap();
        let flat = tape.reshape(zt, &[2 * 2, 4]).unwrap();
        let z0 = tape.value(flat).clone();
        let quant = residual_quantize(&z0, &params.stack, 3).unwrap();
        let offset = quant.code_sum().zip_map(&z0, "offset", |b, z| b - z).unwrap();
        (quant, offset)
    };
    let surrogate = |store: &ParamStore<f64>| {
        let p = CodecParams { net: store.clone(), ..params.clone() };
        let mut tape = Tape::new();
        let bound = store.attach_frozen(&mut tape);
        let input = tape.constant(x.clone());
        let z = p.encoder_graph(&mut tape, &bound, input).unwrap();
        let zt = tape.transpose_last2(z).unwrap();
        let flat = tape.reshape(zt, &[4, 4]).unwrap();
        let commit = commitment_loss(&mut tape, flat, &frozen.0).unwrap();
        let off = tape.constant(frozen.1.clone());
        let q = tape.add(flat, off).unwrap();
        let q = tape.reshape(q, &[2, 2, 4]).unwrap();
        let q = tape.transpose_last2(q).unwrap();
        let y = p.decoder_graph(&mut tape, &bound, q).unwrap();
        let ybar = tape.value(y).clone();
        let l1: f64 = ybar.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / real as f64;
        l1 + p.config.beta * tape.value(commit).data()[0]
    };
    vec![("codec objective".into(), store_check(&params.net, analytic, surrogate))]
}

fn tiny_trunk() -> TransformerConfig {
    TransformerConfig {
        hidden: 8,
        layers: 1,
        heads: 2,
        max_len: 8,
    }
}

pub fn masked_loss() -> Vec<Case> {
    let cfg = MFormerConfig {
        codebook_size: 5,
        num_labels: 3,
        trunk: tiny_trunk(),
    };
    let params = MFormerParams::<f64>::init(&cfg, &mut Rng::new(30)).unwrap();
    let rows: Vec<Vec<usize>> = vec![vec![0, 4, 2, 2, 1], vec![3, 1, 0]];
    let conds = [Condition::Label(2), Condition::Label(0)];
    let build = |store: &ParamStore<f64>, tape: &mut Tape<f64>, bound: &Bound| {
        let p = MFormerParams { config: cfg.clone(), store: store.clone() };
        let r: Vec<&[usize]> = rows.iter().map(Vec::as_slice).collect();
        mformer_loss(tape, &p, bound, &r, &conds, 0.5, &mut Rng::new(31)).unwrap().unwrap().loss
    };
    let value = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let bound = store.attach_frozen(&mut tape);
        let l = build(store, &mut tape, &bound);
        tape.value(l).data()[0]
    };
    vec![("masked loss".into(), store_check(&params.store, build, value))]
}

/// Residual loss with the tied embedding and output tables.
pub fn residual_loss() -> Vec<Case> {
    let cfg = RFormerConfig {
        codebook_sizes: vec![4, 5, 3],
        num_labels: 2,
        trunk: tiny_trunk(),
    };
    let params = RFormerParams::<f64>::init(&cfg, &mut Rng::new(40)).unwrap();
    assert_eq!(params.store.aliases().len(), 2);
    let stacks = [
        TokenStack::new(vec![vec![0, 3, 1, 2], vec![4, 0, 2, 2], vec![1, 2, 0, 0]]).unwrap(),
        TokenStack::new(vec![vec![2, 2, 1], vec![1, 3, 0], vec![2, 1, 1]]).unwrap(),
    ];
    let conds = [Condition::Label(1), Condition::Null];
    [41, 42, 43]
        .into_iter()
        .map(|seed| {
            let build = |store: &ParamStore<f64>, tape: &mut Tape<f64>, bound: &Bound| {
                let p = RFormerParams { config: cfg.clone(), store: store.clone() };
                let s: Vec<&TokenStack> = stacks.iter().collect();
                rformer_loss(tape, &p, bound, &s, &conds, 0.0, &mut Rng::new(seed)).unwrap().loss
            };
            let value = |store: &ParamStore<f64>| {
                let mut tape = Tape::new();
                let bound = store.attach_frozen(&mut tape);
                let l = build(store, &mut tape, &bound);
                tape.value(l).data()[0]
            };
            (format!("residual loss seed {seed}"), store_check(&params.store, build, value))
        })
        .collect()
}

pub fn all() -> Vec<Case> {
    [
        elementwise(),
        linear_algebra(),
        normalisation(),
        structural(),
        conv1d(),
        attention(),
        cross_entropy(),
        gradient_routing(),
        codec_loss(),
        masked_loss(),
        residual_loss(),
    ]
    .concat()
}
