//! Bidirectional masked transformer over base-layer tokens.

use crate::error::{Error, Result};
use crate::ndmath::{adam_step, clip_grad_norm, cosine_lr, AdamConfig, AdamState, Bound, ParamStore, Rng, Scalar, Tape, Tensor, Var};
use crate::nn::{
    check_lengths, init_linear, init_trunk, interleave_order, positions, row_argmax, token_rows, Condition, Layers,
    TransformerConfig, TransformerStepLog, TransformerTrainConfig, TransformerTrainLog, EMBED_STD,
};
use crate::schedule::{apply_mask, draw_training_mask};

#[derive(Clone, Debug, PartialEq)]
pub struct MFormerConfig {
    /// Base codebook size `K`.
    pub codebook_size: usize,
    pub num_labels: usize,
    pub trunk: TransformerConfig,
}

impl MFormerConfig {
    pub fn mask_id(&self) -> usize {
        self.codebook_size
    }

    pub fn pad_id(&self) -> usize {
        self.codebook_size + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        if self.codebook_size < 2 || self.num_labels == 0 {
            return Err(Error::Config("masked transformer needs K ≥ 2 and at least one label".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MFormerParams<T> {
    pub config: MFormerConfig,
    pub store: ParamStore<T>,
}

impl<T: Scalar> MFormerParams<T> {
    pub fn init(config: &MFormerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let h = config.trunk.hidden;
        let mut store = ParamStore::new();
        store.insert_normal("tok", &[config.codebook_size + 2, h], EMBED_STD, rng);
        store.insert_normal("pos", &[config.trunk.max_len + 1, h], EMBED_STD, rng);
        store.insert_normal("cond", &[config.num_labels + 1, h], EMBED_STD, rng);
        init_trunk(&mut store, "trunk", &config.trunk, rng);
        init_linear(&mut store, "head", h, config.codebook_size, EMBED_STD, rng);
        Ok(Self {
            config: config.clone(),
            store,
        })
    }

    /// Logits `[Σ n_b, K]` for every token position of every row.
    pub fn forward_graph(&self, tape: &mut Tape<T>, bound: &Bound, rows: &[&[usize]], conds: &[Condition]) -> Result<Var> {
        let cfg = &self.config;
        if rows.len() != conds.len() {
            return Err(Error::Length(format!("{} rows but {} conditions", rows.len(), conds.len())));
        }
        let lens: Vec<usize> = rows.iter().map(|r| r.len()).collect();
        check_lengths(&lens, cfg.trunk.max_len)?;
        let ids: Vec<usize> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        if let Some(&bad) = ids.iter().find(|&&t| t > cfg.pad_id()) {
            return Err(Error::Token(format!("id {bad} outside codebook, mask and pad ids")));
        }
        let cond_ids = conds.iter().map(|c| c.row(cfg.num_labels)).collect::<Result<Vec<_>>>()?;

        let net = Layers {
            store: &self.store,
            bound,
        };
        let tok = tape.gather_rows(net.param("tok")?, &ids)?;
        let cond = tape.gather_rows(net.param("cond")?, &cond_ids)?;
        let x = tape.concat_rows(&[tok, cond])?;
        let x = tape.gather_rows(x, &interleave_order(&lens))?;
        let pos = tape.gather_rows(net.param("pos")?, &positions(&lens))?;
        let x = tape.add(x, pos)?;

        let pad = cfg.pad_id();
        let key_mask: Option<Vec<bool>> = ids.contains(&pad).then(|| {
            rows.iter()
                .flat_map(|r| std::iter::once(true).chain(r.iter().map(move |&t| t != pad)))
                .collect()
        });
        let segments: Vec<usize> = lens.iter().map(|n| n + 1).collect();
        let h = net.trunk(tape, "trunk", &cfg.trunk, x, &segments, key_mask.as_deref())?;
        let h = tape.gather_rows(h, &token_rows(&lens))?;
        net.linear(tape, "head", h)
    }

    /// Inference logits, one `[n_b, K]` tensor per row.
    pub fn logits(&self, rows: &[&[usize]], conds: &[Condition]) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let bound = self.store.attach_frozen(&mut tape);
        let out = self.forward_graph(&mut tape, &bound, rows, conds)?;
        let value = tape.value(out);
        value.check_finite("masked transformer logits")?;
        let mut offset = 0;
        rows.iter()
            .map(|r| {
                let idx: Vec<usize> = (offset..offset + r.len()).collect();
                offset += r.len();
                value.gather_rows(&idx)
            })
            .collect()
    }
}

/// Training objective for one batch and what it supervised.
pub struct MaskedLoss {
    pub loss: Var,
    pub logits: Var,
    pub targets: Vec<Option<usize>>,
}

/// Corrupts each row with the cosine schedule, replaces conditions by null
/// with probability `null_prob`, and builds the cross-entropy over the
/// supervised positions. Returns `None` when nothing is supervised.
pub fn mformer_loss<T: Scalar>(
    tape: &mut Tape<T>,
    params: &MFormerParams<T>,
    bound: &Bound,
    rows: &[&[usize]],
    conds: &[Condition],
    null_prob: f64,
    rng: &mut Rng,
) -> Result<Option<MaskedLoss>> {
    if rows.is_empty() {
        return Err(Error::Length("empty batch".into()));
    }
    let cfg = &params.config;
    let mut inputs: Vec<Vec<usize>> = Vec::with_capacity(rows.len());
    let mut used_conds = Vec::with_capacity(rows.len());
    let mut targets = Vec::new();
    for (row, &cond) in rows.iter().zip(conds) {
        if let Some(&bad) = row.iter().find(|&&t| t >= cfg.codebook_size) {
            return Err(Error::Token(format!("training id {bad} outside codebook of {}", cfg.codebook_size)));
        }
        let mut corrupted = None;
        for _ in 0..2 {
            let (_, plan) = draw_training_mask(row.len(), rng)?;
            let c = apply_mask(row, &plan, cfg.codebook_size, cfg.mask_id(), rng)?;
            if c.supervised.iter().any(|&s| s) {
                corrupted = Some(c);
                break;
            }
        }
        let cond = if rng.uniform() < null_prob { Condition::Null } else { cond };
        let Some(c) = corrupted else { continue };
        targets.extend(row.iter().zip(&c.supervised).map(|(&t, &s)| s.then_some(t)));
        inputs.push(c.row);
        used_conds.push(cond);
    }
    if inputs.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
    let logits = params.forward_graph(tape, bound, &refs, &used_conds)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    Ok(Some(MaskedLoss { loss, logits, targets }))
}

pub(crate) fn supervised_accuracy<T: Scalar>(logits: &Tensor<T>, targets: &[Option<usize>]) -> f64 {
    let pred = row_argmax(logits);
    let (hit, total) = pred
        .iter()
        .zip(targets)
        .filter_map(|(p, t)| t.map(|t| (*p == t) as usize))
        .fold((0, 0), |(h, n), x| (h + x, n + 1));
    hit as f64 / total.max(1) as f64
}

/// Trains on `(base row, label)` pairs.
pub fn train_mformer<T: Scalar>(
    data: &[(Vec<usize>, usize)],
    config: &MFormerConfig,
    train: &TransformerTrainConfig,
    rng: &mut Rng,
) -> Result<(MFormerParams<T>, TransformerTrainLog)> {
    if data.is_empty() || train.batch == 0 {
        return Err(Error::Config("masked transformer training needs data and a positive batch".into()));
    }
    let mut params = MFormerParams::<T>::init(config, &mut rng.fork("mformer.init"))?;
    let mut data_rng = rng.fork("mformer.data");
    let mut mask_rng = rng.fork("mformer.mask");
    let mut opt = AdamState::new(&params.store, AdamConfig::default());
    let mut log = TransformerTrainLog::default();
    for step in 0..train.steps {
        let picks: Vec<usize> = (0..train.batch).map(|_| data_rng.below(data.len())).collect();
        let rows: Vec<&[usize]> = picks.iter().map(|&i| data[i].0.as_slice()).collect();
        let conds: Vec<Condition> = picks.iter().map(|&i| Condition::Label(data[i].1)).collect();
        let mut tape = Tape::new();
        let bound = params.store.attach(&mut tape);
        let Some(out) = mformer_loss(&mut tape, &params, &bound, &rows, &conds, train.null_prob, &mut mask_rng)? else {
            continue;
        };
        let loss = tape.value(out.loss).data()[0].to_acc();
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                what: "masked transformer loss".into(),
            });
        }
        let accuracy = supervised_accuracy(tape.value(out.logits), &out.targets);
        let grads = tape.backward(out.loss)?;
        let mut g = bound.gradients(&grads, &params.store);
        clip_grad_norm(&mut g, train.clip);
        let lr = cosine_lr(step + 1, train.lr, train.warmup, train.steps, train.lr_floor);
        adam_step(&mut params.store, &g, &mut opt, lr)?;
        log.record(TransformerStepLog { loss, accuracy }, train.log_every);
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(k: usize) -> MFormerConfig {
        MFormerConfig {
            codebook_size: k,
            num_labels: 3,
            trunk: TransformerConfig {
                hidden: 16,
                layers: 2,
                heads: 2,
                max_len: 16,
            },
        }
    }

    #[test]
    fn logits_shape_for_every_length() {
        let p = MFormerParams::<f32>::init(&config(8), &mut Rng::new(0)).unwrap();
        for n in 1..=16 {
            let row: Vec<usize> = (0..n).map(|i| i % 10).collect();
            let out = p.logits(&[&row], &[Condition::Label(1)]).unwrap();
            assert_eq!(out[0].shape(), &[n, 8]);
        }
        let long = vec![0; 17];
        assert!(matches!(p.logits(&[&long], &[Condition::Null]), Err(Error::Length(_))));
        assert!(matches!(p.logits(&[&[11]], &[Condition::Null]), Err(Error::Token(_))));
        assert!(matches!(p.logits(&[&[1]], &[Condition::Label(3)]), Err(Error::UnknownClass(_))));
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let p = MFormerParams::<f32>::init(&config(128), &mut Rng::new(0)).unwrap();
        let mut rng = Rng::new(1);
        let rows: Vec<Vec<usize>> = (0..16).map(|_| (0..12).map(|_| rng.below(128)).collect()).collect();
        let refs: Vec<&[usize]> = rows.iter().map(Vec::as_slice).collect();
        let conds = vec![Condition::Label(0); 16];
        let mut tape = Tape::new();
        let bound = p.store.attach_frozen(&mut tape);
        let out = mformer_loss(&mut tape, &p, &bound, &refs, &conds, 0.1, &mut rng).unwrap().unwrap();
        let loss = tape.value(out.loss).data()[0] as f64;
        assert!((loss - 128f64.ln()).abs() < 0.1, "{loss}");
    }

    #[test]
    fn positions_disabled_gives_permutation_equivariance() {
        let mut p = MFormerParams::<f64>::init(&config(8), &mut Rng::new(2)).unwrap();
        p.store.get_mut("pos").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let row = [1, 4, 6, 8, 2];
        let swapped = [1, 2, 6, 8, 4];
        let a = &p.logits(&[&row], &[Condition::Label(2)]).unwrap()[0];
        let b = &p.logits(&[&swapped], &[Condition::Label(2)]).unwrap()[0];
        for (i, j) in [(0, 0), (1, 4), (2, 2), (3, 3), (4, 1)] {
            for (x, y) in a.row(i).iter().zip(b.row(j)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn later_tokens_change_earlier_logits() {
        let p = MFormerParams::<f64>::init(&config(8), &mut Rng::new(3)).unwrap();
        let a = &p.logits(&[&[1, 2, 3, 4]], &[Condition::Null]).unwrap()[0];
        let b = &p.logits(&[&[1, 2, 3, 7]], &[Condition::Null]).unwrap()[0];
        assert!(a.row(0).iter().zip(b.row(0)).any(|(x, y)| x != y));
    }

    #[test]
    fn pad_positions_are_ignored() {
        let p = MFormerParams::<f64>::init(&config(8), &mut Rng::new(4)).unwrap();
        let pad = p.config.pad_id();
        let a = &p.logits(&[&[1, 2, pad]], &[Condition::Label(0)]).unwrap()[0];
        let mut q = p.clone();
        q.store.get_mut("tok").unwrap().row_mut(pad).iter_mut().for_each(|v| *v += 1.0);
        let b = &q.logits(&[&[1, 2, pad]], &[Condition::Label(0)]).unwrap()[0];
        for r in 0..2 {
            assert_eq!(a.row(r), b.row(r));
        }
    }

    #[test]
    fn null_condition_uses_last_row() {
        let p = MFormerParams::<f64>::init(&config(8), &mut Rng::new(5)).unwrap();
        let mut q = p.clone();
        q.store.get_mut("cond").unwrap().row_mut(3).iter_mut().for_each(|v| *v += 1.0);
        let row = [1, 2, 3];
        let (a, b) = (p.logits(&[&row], &[Condition::Null]).unwrap(), q.logits(&[&row], &[Condition::Null]).unwrap());
        assert_ne!(a, b);
        let (a, b) = (p.logits(&[&row], &[Condition::Label(0)]).unwrap(), q.logits(&[&row], &[Condition::Label(0)]).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn training_learns_label_dependent_rows() {
        let data: Vec<(Vec<usize>, usize)> = (0..30).map(|i| (vec![i % 3 * 2; 8], i % 3)).collect();
        let train = TransformerTrainConfig {
            steps: 150,
            batch: 8,
            lr: 3e-3,
            warmup: 10,
            log_every: 25,
            ..TransformerTrainConfig::default()
        };
        let (p, log) = train_mformer::<f32>(&data, &config(8), &train, &mut Rng::new(0)).unwrap();
        let (_, again) = train_mformer::<f32>(&data, &config(8), &train, &mut Rng::new(0)).unwrap();
        assert_eq!(log, again);
        assert!(*log.epoch_loss.last().unwrap() < 0.3 * log.epoch_loss[0]);
        let masked = vec![8; 8];
        for label in 0..3 {
            let l = &p.logits(&[&masked], &[Condition::Label(label)]).unwrap()[0];
            assert!(row_argmax(l).iter().all(|&t| t == label * 2));
        }
    }
}
