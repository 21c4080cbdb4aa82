//! Label classifier over motion summary statistics, used only to score
//! generated motions.

use super::{Corpus, Split};
use crate::error::{Error, Result};
use crate::ndmath::{adam_step, AdamConfig, AdamState, ParamStore, Rng, Scalar, Tape, Tensor};

/// Minimum held-out accuracy for a trained oracle to be usable.
pub const MIN_ORACLE_ACCURACY: f64 = 0.95;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 400,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// Floor on the standardisation scale of each summary feature.
pub const MIN_FEATURE_STD: f64 = 0.05;

/// Half-width of the moving average applied before feature extraction.
pub const SMOOTH_RADIUS: usize = 2;

/// Per smoothed feature channel: mean, standard deviation, mean absolute frame
/// difference, and range.
pub fn motion_features<T: Scalar>(frames: &Tensor<T>) -> Vec<f64> {
    let (n, d) = (frames.shape()[0], frames.shape()[1]);
    let mut out = Vec::with_capacity(4 * d);
    for j in 0..d {
        let raw: Vec<f64> = (0..n).map(|i| frames.row(i)[j].to_acc()).collect();
        let col: Vec<f64> = (0..n)
            .map(|i| {
                let (a, b) = (i.saturating_sub(SMOOTH_RADIUS), (i + SMOOTH_RADIUS + 1).min(n));
                raw[a..b].iter().sum::<f64>() / (b - a) as f64
            })
            .collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let diff = if n > 1 {
            col.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        out.extend([mean, var.sqrt(), diff, hi - lo]);
    }
    out
}

/// One-hidden-layer network on standardised summary features.
#[derive(Clone, Debug)]
pub struct OracleClassifier {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub params: ParamStore<f32>,
    pub num_labels: usize,
    /// Held-out accuracy measured at training time.
    pub held_out_accuracy: f64,
}

impl OracleClassifier {
    /// Fits on the train split and measures accuracy on the test split;
    /// fails when that accuracy is below [`MIN_ORACLE_ACCURACY`].
    pub fn train<T: Scalar>(corpus: &Corpus<T>, cfg: &ClassifierConfig) -> Result<Self> {
        let (xs, ys) = dataset(corpus, Split::Train);
        let mut clf = Self::fit(&xs, &ys, corpus.num_labels(), cfg)?;
        let (tx, ty) = dataset(corpus, Split::Test);
        clf.held_out_accuracy = clf.accuracy(&tx, &ty)?;
        if clf.held_out_accuracy < MIN_ORACLE_ACCURACY {
            return Err(Error::Config(format!(
                "oracle classifier reached only {:.3} held-out accuracy",
                clf.held_out_accuracy
            )));
        }
        Ok(clf)
    }

    /// Full-batch Adam on raw feature rows with integer labels.
    pub fn fit(features: &[Vec<f64>], labels: &[usize], num_labels: usize, cfg: &ClassifierConfig) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::Config("classifier needs matching non-empty features and labels".into()));
        }
        let f = features[0].len();
        let mut mean = vec![0.0; f];
        let mut std = vec![0.0; f];
        for x in features {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / features.len() as f64;
            }
        }
        for x in features {
            for ((s, v), m) in std.iter_mut().zip(x).zip(&mean) {
                *s += (v - m).powi(2) / features.len() as f64;
            }
        }
        let std: Vec<f64> = std.into_iter().map(|v| v.sqrt().max(MIN_FEATURE_STD)).collect();

        let mut rng = Rng::named(cfg.seed, "oracle");
        let mut params = ParamStore::new();
        params.insert_normal("w1", &[f, cfg.hidden], (1.0 / f as f64).sqrt(), &mut rng);
        params.insert_zeros("b1", &[cfg.hidden]);
        params.insert_normal("w2", &[cfg.hidden, num_labels], (1.0 / cfg.hidden as f64).sqrt(), &mut rng);
        params.insert_zeros("b2", &[num_labels]);
        let mut clf = Self {
            feature_mean: mean,
            feature_std: std,
            params,
            num_labels,
            held_out_accuracy: f64::NAN,
        };
        let x = clf.standardise(features)?;
        let targets: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
        let mut opt = AdamState::new(&clf.params, AdamConfig::default());
        for step in 0..cfg.steps {
            let mut tape = Tape::new();
            let bound = clf.params.attach(&mut tape);
            let xv = tape.constant(x.clone());
            let logits = clf.logits_on(&mut tape, &bound, xv)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            if !tape.value(loss).is_finite() {
                return Err(Error::Divergence {
                    step,
                    what: "oracle classifier loss".into(),
                });
            }
            let grads = tape.backward(loss)?;
            let g = bound.gradients(&grads, &clf.params);
            adam_step(&mut clf.params, &g, &mut opt, cfg.lr)?;
        }
        Ok(clf)
    }

    fn standardise(&self, features: &[Vec<f64>]) -> Result<Tensor<f32>> {
        let rows: Vec<Vec<f32>> = features
            .iter()
            .map(|x| {
                x.iter()
                    .zip(&self.feature_mean)
                    .zip(&self.feature_std)
                    .map(|((v, m), s)| ((v - m) / s) as f32)
                    .collect()
            })
            .collect();
        Tensor::from_rows(&rows)
    }

    fn logits_on(&self, tape: &mut Tape<f32>, bound: &crate::ndmath::Bound, x: crate::ndmath::Var) -> Result<crate::ndmath::Var> {
        let p = |name: &str| self.params.id(name).map(|id| bound.var(id));
        let h = tape.matmul(x, p("w1")?)?;
        let h = tape.add_bias(h, p("b1")?)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, p("w2")?)?;
        tape.add_bias(o, p("b2")?)
    }

    pub fn predict_features(&self, features: &[Vec<f64>]) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let bound = self.params.attach_frozen(&mut tape);
        let x = tape.constant(self.standardise(features)?);
        let logits = self.logits_on(&mut tape, &bound, x)?;
        let lv = tape.value(logits);
        Ok((0..lv.rows())
            .map(|r| {
                let row = lv.row(r);
                (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
            })
            .collect())
    }

    pub fn predict<T: Scalar>(&self, frames: &Tensor<T>) -> Result<usize> {
        Ok(self.predict_features(&[motion_features(frames)])?[0])
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let pred = self.predict_features(features)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64)
    }
}

/// Feature rows and labels of one split.
pub fn dataset<T: Scalar>(corpus: &Corpus<T>, split: Split) -> (Vec<Vec<f64>>, Vec<usize>) {
    corpus.split(split).map(|s| (motion_features(&s.motion.frames), s.label)).unzip()
}
