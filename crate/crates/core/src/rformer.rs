//! Residual transformer predicting layer-`j` tokens from the summed
//! embeddings of layers `0..j`.

use crate::codec::TokenStack;
use crate::error::{Error, Result};
use crate::mformer::supervised_accuracy;
use crate::ndmath::{adam_step, clip_grad_norm, cosine_lr, AdamConfig, AdamState, Bound, ParamStore, Rng, Scalar, Tape, Tensor, Var};
use crate::nn::{
    check_lengths, init_trunk, interleave_order, positions, token_rows, Condition, Layers, TransformerConfig,
    TransformerStepLog, TransformerTrainConfig, TransformerTrainLog, EMBED_STD,
};

#[derive(Clone, Debug, PartialEq)]
pub struct RFormerConfig {
    /// Codebook size per quantization layer, base layer first (`V+1`
    /// entries).
    pub codebook_sizes: Vec<usize>,
    pub num_labels: usize,
    pub trunk: TransformerConfig,
}

impl RFormerConfig {
    /// Number of residual layers `V`.
    pub fn residual_layers(&self) -> usize {
        self.codebook_sizes.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        if self.codebook_sizes.len() < 2 || self.codebook_sizes.contains(&0) || self.num_labels == 0 {
            return Err(Error::Config(
                "residual transformer needs at least two non-empty layers and one label".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RFormerParams<T> {
    pub config: RFormerConfig,
    pub store: ParamStore<T>,
}

/// Name of the head predicting layer `j`; it is an alias of the layer-`j`
/// embedding table.
pub fn head_name(j: usize) -> String {
    format!("head{j}.w")
}

pub fn embedding_name(v: usize) -> String {
    format!("emb{v}")
}

impl<T: Scalar> RFormerParams<T> {
    pub fn init(config: &RFormerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let h = config.trunk.hidden;
        let mut store = ParamStore::new();
        for (v, &k) in config.codebook_sizes.iter().enumerate() {
            store.insert_normal(&embedding_name(v), &[k, h], EMBED_STD, rng);
        }
        store.insert_normal("layer", &[config.residual_layers(), h], EMBED_STD, rng);
        store.insert_normal("pos", &[config.trunk.max_len + 1, h], EMBED_STD, rng);
        store.insert_normal("cond", &[config.num_labels + 1, h], EMBED_STD, rng);
        init_trunk(&mut store, "trunk", &config.trunk, rng);
        for j in 1..=config.residual_layers() {
            store.tie(&head_name(j), &embedding_name(j))?;
            store.insert_zeros(&format!("head{j}.b"), &[config.codebook_sizes[j]]);
        }
        Ok(Self {
            config: config.clone(),
            store,
        })
    }

    fn check_layer(&self, j: usize) -> Result<()> {
        let v = self.config.residual_layers();
        if j == 0 || j > v {
            return Err(Error::Config(format!("residual layer {j} outside [1, {v}]")));
        }
        Ok(())
    }

    /// Layer-`j` logits `[Σ n_b, K_j]`; `below[b]` holds exactly rows
    /// `0..j` of sample `b`.
    pub fn forward_graph(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        below: &[&[Vec<usize>]],
        j: usize,
        conds: &[Condition],
    ) -> Result<Var> {
        self.check_layer(j)?;
        let cfg = &self.config;
        if below.len() != conds.len() {
            return Err(Error::Length(format!("{} samples but {} conditions", below.len(), conds.len())));
        }
        if let Some(rows) = below.iter().find(|rows| rows.len() != j) {
            return Err(Error::Length(format!("layer {j} needs {j} rows below, got {}", rows.len())));
        }
        let lens: Vec<usize> = below.iter().map(|rows| rows[0].len()).collect();
        if below.iter().zip(&lens).any(|(rows, &n)| rows.iter().any(|r| r.len() != n)) {
            return Err(Error::Length("rows of one sample differ in length".into()));
        }
        check_lengths(&lens, cfg.trunk.max_len)?;
        let cond_ids = conds.iter().map(|c| c.row(cfg.num_labels)).collect::<Result<Vec<_>>>()?;

        let net = Layers {
            store: &self.store,
            bound,
        };
        let mut tok: Option<Var> = None;
        for v in 0..j {
            let ids: Vec<usize> = below.iter().flat_map(|rows| rows[v].iter().copied()).collect();
            if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.codebook_sizes[v]) {
                return Err(Error::Token(format!("id {bad} outside layer {v} codebook of {}", cfg.codebook_sizes[v])));
            }
            let e = tape.gather_rows(net.param(&embedding_name(v))?, &ids)?;
            tok = Some(match tok {
                Some(t) => tape.add(t, e)?,
                None => e,
            });
        }
        let tok = tok.expect("j ≥ 1");
        let cond = tape.gather_rows(net.param("cond")?, &cond_ids)?;
        let x = tape.concat_rows(&[tok, cond])?;
        let x = tape.gather_rows(x, &interleave_order(&lens))?;
        let pos = tape.gather_rows(net.param("pos")?, &positions(&lens))?;
        let x = tape.add(x, pos)?;
        let total = lens.iter().map(|n| n + 1).sum::<usize>();
        let layer = tape.gather_rows(net.param("layer")?, &vec![j - 1; total])?;
        let x = tape.add(x, layer)?;

        let segments: Vec<usize> = lens.iter().map(|n| n + 1).collect();
        let h = net.trunk(tape, "trunk", &cfg.trunk, x, &segments, None)?;
        let h = tape.gather_rows(h, &token_rows(&lens))?;
        let logits = tape.matmul_nt(h, net.param(&head_name(j))?)?;
        tape.add_bias(logits, net.param(&format!("head{j}.b"))?)
    }

    /// Inference logits for layer `j`, one `[n_b, K_j]` tensor per sample.
    pub fn logits(&self, below: &[&[Vec<usize>]], j: usize, conds: &[Condition]) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let bound = self.store.attach_frozen(&mut tape);
        let out = self.forward_graph(&mut tape, &bound, below, j, conds)?;
        let value = tape.value(out);
        value.check_finite("residual transformer logits")?;
        let mut offset = 0;
        below
            .iter()
            .map(|rows| {
                let n = rows[0].len();
                let idx: Vec<usize> = (offset..offset + n).collect();
                offset += n;
                value.gather_rows(&idx)
            })
            .collect()
    }
}

pub struct ResidualLoss {
    pub loss: Var,
    pub logits: Var,
    pub targets: Vec<Option<usize>>,
    pub layer: usize,
}

/// Draws one layer `j ∈ [1, V]` for the batch and builds the cross-entropy
/// of layer-`j` tokens at every position.
pub fn rformer_loss<T: Scalar>(
    tape: &mut Tape<T>,
    params: &RFormerParams<T>,
    bound: &Bound,
    stacks: &[&TokenStack],
    conds: &[Condition],
    null_prob: f64,
    rng: &mut Rng,
) -> Result<ResidualLoss> {
    let layers = params.config.codebook_sizes.len();
    if stacks.is_empty() {
        return Err(Error::Length("empty batch".into()));
    }
    if let Some(s) = stacks.iter().find(|s| s.num_layers() != layers) {
        return Err(Error::Length(format!("stack has {} layers, expected {layers}", s.num_layers())));
    }
    let j = 1 + rng.below(params.config.residual_layers());
    let conds: Vec<Condition> = conds
        .iter()
        .map(|&c| if rng.uniform() < null_prob { Condition::Null } else { c })
        .collect();
    let below: Vec<&[Vec<usize>]> = stacks.iter().map(|s| &s.rows[..j]).collect();
    let targets: Vec<Option<usize>> = stacks.iter().flat_map(|s| s.rows[j].iter().map(|&t| Some(t))).collect();
    let logits = params.forward_graph(tape, bound, &below, j, &conds)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    Ok(ResidualLoss {
        loss,
        logits,
        targets,
        layer: j,
    })
}

/// Trains on `(token stack, label)` pairs.
pub fn train_rformer<T: Scalar>(
    data: &[(TokenStack, usize)],
    config: &RFormerConfig,
    train: &TransformerTrainConfig,
    rng: &mut Rng,
) -> Result<(RFormerParams<T>, TransformerTrainLog)> {
    if data.is_empty() || train.batch == 0 {
        return Err(Error::Config("residual transformer training needs data and a positive batch".into()));
    }
    let mut params = RFormerParams::<T>::init(config, &mut rng.fork("rformer.init"))?;
    let mut data_rng = rng.fork("rformer.data");
    let mut loss_rng = rng.fork("rformer.layer");
    let mut opt = AdamState::new(&params.store, AdamConfig::default());
    let mut log = TransformerTrainLog::default();
    for step in 0..train.steps {
        let picks: Vec<usize> = (0..train.batch).map(|_| data_rng.below(data.len())).collect();
        let stacks: Vec<&TokenStack> = picks.iter().map(|&i| &data[i].0).collect();
        let conds: Vec<Condition> = picks.iter().map(|&i| Condition::Label(data[i].1)).collect();
        let mut tape = Tape::new();
        let bound = params.store.attach(&mut tape);
        let out = rformer_loss(&mut tape, &params, &bound, &stacks, &conds, train.null_prob, &mut loss_rng)?;
        let loss = tape.value(out.loss).data()[0].to_acc();
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                what: "residual transformer loss".into(),
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

    fn config(sizes: Vec<usize>) -> RFormerConfig {
        RFormerConfig {
            codebook_sizes: sizes,
            num_labels: 2,
            trunk: TransformerConfig {
                hidden: 16,
                layers: 1,
                heads: 2,
                max_len: 16,
            },
        }
    }

    #[test]
    fn heads_share_storage_with_embeddings() {
        let p = RFormerParams::<f32>::init(&config(vec![8, 6, 5]), &mut Rng::new(0)).unwrap();
        for j in 1..=2 {
            assert!(p.store.same_storage(&head_name(j), &embedding_name(j)));
        }
        assert!(p.store.get(&head_name(3)).is_err());
    }

    #[test]
    fn logits_width_follows_target_layer() {
        let p = RFormerParams::<f32>::init(&config(vec![8, 6, 5]), &mut Rng::new(0)).unwrap();
        let rows = vec![vec![1, 2, 3], vec![0, 5, 4]];
        assert_eq!(p.logits(&[&rows[..1]], 1, &[Condition::Null]).unwrap()[0].shape(), &[3, 6]);
        assert_eq!(p.logits(&[&rows[..2]], 2, &[Condition::Null]).unwrap()[0].shape(), &[3, 5]);
        assert!(p.logits(&[&rows[..1]], 2, &[Condition::Null]).is_err());
        assert!(p.logits(&[&rows[..2]], 3, &[Condition::Null]).is_err());
        assert!(p.logits(&[&rows[..1]], 0, &[Condition::Null]).is_err());
        let bad = vec![vec![1, 2, 3], vec![0, 6, 4]];
        assert!(matches!(p.logits(&[&bad[..2]], 2, &[Condition::Null]), Err(Error::Token(_))));
    }

    #[test]
    fn input_sum_is_order_free() {
        let mut p = RFormerParams::<f64>::init(&config(vec![6, 6, 6]), &mut Rng::new(1)).unwrap();
        let e0 = p.store.get("emb0").unwrap().clone();
        *p.store.get_mut("emb1").unwrap() = e0;
        let a = vec![vec![1, 2, 3], vec![4, 0, 5]];
        let b = vec![vec![4, 0, 5], vec![1, 2, 3]];
        let la = &p.logits(&[&a[..]], 2, &[Condition::Label(0)]).unwrap()[0];
        let lb = &p.logits(&[&b[..]], 2, &[Condition::Label(0)]).unwrap()[0];
        assert!(la.max_abs_diff(lb) < 1e-12);
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let p = RFormerParams::<f32>::init(&config(vec![128; 4]), &mut Rng::new(0)).unwrap();
        let mut rng = Rng::new(1);
        let stacks: Vec<TokenStack> = (0..8)
            .map(|_| TokenStack::new((0..4).map(|_| (0..10).map(|_| rng.below(128)).collect()).collect()).unwrap())
            .collect();
        let refs: Vec<&TokenStack> = stacks.iter().collect();
        let mut tape = Tape::new();
        let bound = p.store.attach_frozen(&mut tape);
        let out = rformer_loss(&mut tape, &p, &bound, &refs, &[Condition::Label(1); 8], 0.1, &mut rng).unwrap();
        let loss = tape.value(out.loss).data()[0] as f64;
        assert!((loss - 128f64.ln()).abs() < 0.1, "{loss}");
    }

    #[test]
    fn training_keeps_ties_and_reduces_loss() {
        let data: Vec<(TokenStack, usize)> = (0..20)
            .map(|i| {
                let base: Vec<usize> = (0..8).map(|p| (p + i) % 6).collect();
                let next: Vec<usize> = base.iter().map(|t| (t + 1) % 6).collect();
                let last: Vec<usize> = next.iter().map(|t| 5 - t).collect();
                (TokenStack::new(vec![base, next, last]).unwrap(), i % 2)
            })
            .collect();
        let train = TransformerTrainConfig {
            steps: 120,
            batch: 8,
            lr: 3e-3,
            warmup: 10,
            log_every: 20,
            ..TransformerTrainConfig::default()
        };
        let (p, log) = train_rformer::<f32>(&data, &config(vec![6; 3]), &train, &mut Rng::new(0)).unwrap();
        let (_, again) = train_rformer::<f32>(&data, &config(vec![6; 3]), &train, &mut Rng::new(0)).unwrap();
        assert_eq!(log, again);
        assert!(*log.epoch_loss.last().unwrap() < 0.7 * log.epoch_loss[0]);
        for j in 1..=2 {
            assert!(p.store.same_storage(&head_name(j), &embedding_name(j)));
            assert_eq!(p.store.get(&head_name(j)).unwrap(), p.store.get(&embedding_name(j)).unwrap());
        }
    }
}
