use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

#[test]
fn matmul_identity_and_hand_values() {
    let a = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
    assert_eq!(matmul(&Tensor::identity(3), &a).unwrap(), a);
    let m = t(&[2, 2], &[1., 2., 3., 4.]);
    let ones = t(&[2, 1], &[1., 1.]);
    assert_eq!(matmul(&m, &ones).unwrap().data(), &[3., 7.]);
    let z = matmul(&Tensor::<f64>::zeros(&[2, 3]), &t(&[3, 4], &[0.5; 12])).unwrap();
    assert_eq!(z, Tensor::zeros(&[2, 4]));
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let err = matmul(&Tensor::<f32>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
    match err {
        Error::Dimension { left, right, .. } => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn stop_gradient_forward_is_bitwise_identity() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::from_f64(&[3], &[0.1, -2.5, 1e-7]).unwrap());
    let s = tape.stop_gradient(x);
    let a: Vec<u32> = tape.value(x).data().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u32> = tape.value(s).data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
}

#[test]
fn stop_gradient_product_rule() {
    // d/dx (x * sg[x]) at x = 3 is 3
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let s = tape.stop_gradient(x);
    let y = tape.mul(x, s).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[3.0]);

    // fully stopped path yields zero gradient
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(t(&[2, 2], &[1., -1., 2., 0.5]));
    let s = tape.stop_gradient(a);
    let sq = tape.square(s);
    let l = tape.sum(sq);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get_or_zeros(a, &[2, 2]), Tensor::zeros(&[2, 2]));
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let s = softmax(&t(&[3], &[0., 0., 0.])).unwrap();
    for v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn layernorm_of_constant_is_zero() {
    let y = layernorm(&Tensor::<f32>::full(&[2, 5], 3.25)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn non_finite_inputs_are_rejected() {
    let bad = t(&[2], &[1.0, f64::NAN]);
    assert!(matches!(softmax(&bad), Err(Error::Numeric { .. })));
    assert!(matches!(layernorm(&bad), Err(Error::Numeric { .. })));
    assert!(matches!(gelu(&bad), Err(Error::Numeric { .. })));
}

#[test]
fn conv1d_stride_two_halves_length() {
    // out = floor((8 + 2*1 - 4) / 2) + 1 = 4
    let x = Tensor::<f32>::zeros(&[1, 3, 8]);
    let w = Tensor::zeros(&[5, 3, 4]);
    let b = Tensor::zeros(&[5]);
    let y = conv1d(&x, &w, &b, 2, 1).unwrap();
    assert_eq!(y.shape(), &[1, 5, 4]);
    for len in [4usize, 8, 12, 40] {
        assert_eq!(conv1d_out_len(len, 4, 2, 1), Some(len / 2));
        assert_eq!(conv1d_out_len(len, 3, 1, 1), Some(len));
    }
}

#[test]
fn conv1d_matches_direct_sum() {
    let mut rng = Rng::new(5);
    let x = Tensor::<f64>::from_f64(&[2, 2, 7], &(0..28).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap();
    let w = Tensor::<f64>::from_f64(&[3, 2, 3], &(0..18).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap();
    let b = t(&[3], &[0.1, -0.2, 0.3]);
    let y = conv1d(&x, &w, &b, 2, 1).unwrap();
    for bi in 0..2 {
        for co in 0..3 {
            for to in 0..y.shape()[2] {
                let mut s = b.data()[co];
                for ci in 0..2 {
                    for k in 0..3 {
                        let src = (to * 2 + k) as isize - 1;
                        if (0..7).contains(&src) {
                            s += w.get(&[co, ci, k]) * x.get(&[bi, ci, src as usize]);
                        }
                    }
                }
                assert!((y.get(&[bi, co, to]) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_masked_key_gets_no_weight() {
    let q = t(&[3, 2], &[1., 0., 0., 1., 1., 1.]);
    let k = q.clone();
    let v = t(&[3, 2], &[1., 2., 3., 4., 100., 100.]);
    let out = attention(&q, &k, &v, 1, &[3], Some(&[true, true, false])).unwrap();
    for r in 0..3 {
        assert!(out.row(r).iter().all(|&x| x < 5.0));
    }
    assert!(attention(&q, &k, &v, 3, &[3], None).is_err());
}

fn store_with(value: Tensor<f64>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert("w", value);
    s
}

#[test]
fn adam_zero_gradient_keeps_params_and_decays_moments() {
    let mut p = store_with(t(&[2], &[1.0, -1.0]));
    let mut st = AdamState::new(&p, AdamConfig::default());
    adam_step(&mut p, &[t(&[2], &[1.0, 1.0])], &mut st, 0.1).unwrap();
    let before = p.get("w").unwrap().clone();
    let m_before = st.first_moment(0).clone();
    adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st, 0.0).unwrap();
    assert_eq!(p.get("w").unwrap(), &before);
    for (a, b) in st.first_moment(0).data().iter().zip(m_before.data()) {
        assert!((a - 0.9 * b).abs() < 1e-15);
    }
}

#[test]
fn adam_first_step_is_lr_sized() {
    // m̂ = g, v̂ = g², so Δ = -lr * g / (|g| + ε)
    let mut p = store_with(t(&[1], &[0.0]));
    let mut st = AdamState::new(&p, AdamConfig::default());
    adam_step(&mut p, &[t(&[1], &[1.0])], &mut st, 0.1).unwrap();
    assert!((p.get("w").unwrap().data()[0] + 0.1).abs() < 1e-6);
}

#[test]
fn adam_constant_gradient_converges_to_lr_sign() {
    let mut p = store_with(t(&[2], &[0.0, 0.0]));
    let mut st = AdamState::new(&p, AdamConfig::default());
    let g = t(&[2], &[0.37, -4.0]);
    let mut prev = p.get("w").unwrap().clone();
    for _ in 0..500 {
        adam_step(&mut p, &[g.clone()], &mut st, 0.01).unwrap();
        let cur = p.get("w").unwrap().clone();
        let step: Vec<f64> = cur.data().iter().zip(prev.data()).map(|(a, b)| a - b).collect();
        assert!((step[0] + 0.01).abs() < 1e-6 && (step[1] - 0.01).abs() < 1e-6);
        prev = cur;
    }
}

#[test]
fn adam_rejects_non_finite_gradient_by_name() {
    let mut p = store_with(t(&[1], &[0.5]));
    let mut st = AdamState::new(&p, AdamConfig::default());
    let err = adam_step(&mut p, &[t(&[1], &[f64::INFINITY])], &mut st, 0.1).unwrap_err();
    assert!(err.to_string().contains("'w'"));
    assert_eq!(p.get("w").unwrap().data(), &[0.5]);
    assert_eq!(st.step, 0);
}

#[test]
fn warmup_schedule_midpoint() {
    assert!((warmup_lr(1000, 2e-4, 2000) - 1e-4).abs() < 1e-18);
    assert_eq!(warmup_lr(5000, 2e-4, 2000), 2e-4);
}

#[test]
fn categorical_near_deterministic_and_argmax_limit() {
    for seed in 0..50 {
        let mut rng = Rng::new(seed);
        let (i, lp) = sample_categorical(&[10.0f32, -10.0], 1.0, &mut rng).unwrap();
        assert_eq!(i, 0);
        assert!(lp > -1e-8);
        let (j, _) = sample_categorical(&[0.3f32, 0.9, 0.1], 1e-6, &mut rng).unwrap();
        assert_eq!(j, 1);
    }
}

#[test]
fn categorical_uniform_frequencies_within_three_sigma() {
    let k = 5;
    let draws = 100_000;
    let mut rng = Rng::new(11);
    let mut counts = vec![0usize; k];
    for _ in 0..draws {
        counts[sample_categorical(&[0.0f32; 5], 1.0, &mut rng).unwrap().0] += 1;
    }
    let p = 1.0 / k as f64;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "count {c}");
    }
}

#[test]
fn categorical_errors() {
    let mut rng = Rng::new(0);
    let ninf = [f32::NEG_INFINITY; 3];
    assert!(matches!(sample_categorical(&ninf, 1.0, &mut rng), Err(Error::Sampling(_))));
    assert!(sample_categorical(&[1.0f32], 0.0, &mut rng).is_err());
    let (i, lp) = sample_categorical(&[f32::NEG_INFINITY, 2.0], 1.0, &mut rng).unwrap();
    assert_eq!((i, lp), (1, 0.0));
}

#[test]
fn tied_parameter_names_share_a_slot() {
    let mut s = ParamStore::<f32>::new();
    s.insert_zeros("emb", &[4, 2]);
    s.tie("head", "emb").unwrap();
    s.get_mut("head").unwrap().data_mut()[0] = 7.0;
    assert_eq!(s.get("emb").unwrap().data()[0], 7.0);
    assert!(s.same_storage("emb", "head"));
    assert_eq!(s.len(), 1);
}
