//! Flat `section.key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::codec::{CodecConfig, CodecTrainConfig};
use crate::corpus::{ClassifierConfig, CorpusManifest};
use crate::engine::{GuidanceConfig, InferenceConfig, ResidualMode};
use crate::error::{Error, Result};
use crate::mformer::MFormerConfig;
use crate::nn::{TransformerConfig, TransformerTrainConfig};
use crate::rformer::RFormerConfig;
use crate::schedule::ScheduleParams;

/// Evaluation sweep settings.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub samples_per_label: usize,
    pub frames: usize,
    pub cfg_sweep: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples_per_label: 25,
            frames: 64,
            cfg_sweep: vec![0.0, 2.0, 4.0, 6.0, 8.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusManifest,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub mformer: TransformerConfig,
    pub mformer_train: TransformerTrainConfig,
    pub rformer: TransformerConfig,
    pub rformer_train: TransformerTrainConfig,
    pub inference: InferenceConfig,
    pub oracle: ClassifierConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusManifest::default(),
            codec: CodecConfig::default(),
            codec_train: CodecTrainConfig::default(),
            mformer: TransformerConfig::default(),
            mformer_train: TransformerTrainConfig::default(),
            rformer: TransformerConfig::default(),
            rformer_train: TransformerTrainConfig::default(),
            inference: InferenceConfig::default(),
            oracle: ClassifierConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

enum Field<'a> {
    Usize(&'a mut usize),
    U64(&'a mut u64),
    U32(&'a mut u32),
    F64(&'a mut f64),
    Bool(&'a mut bool),
    Sizes(&'a mut Vec<usize>),
    Reals(&'a mut Vec<f64>),
    Words(&'a mut Vec<String>),
    Mode(&'a mut ResidualMode),
    Iterations(&'a mut ScheduleParams),
}

fn join<X: ToString>(xs: &[X]) -> String {
    xs.iter().map(X::to_string).collect::<Vec<_>>().join(",")
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value '{value}' for {key}"))
}

impl Field<'_> {
    fn render(&self) -> String {
        match self {
            Field::Usize(v) => v.to_string(),
            Field::U64(v) => v.to_string(),
            Field::U32(v) => v.to_string(),
            Field::F64(v) => format!("{v:?}"),
            Field::Bool(v) => v.to_string(),
            Field::Sizes(v) => join(v),
            Field::Reals(v) => v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(","),
            Field::Words(v) => v.join(","),
            Field::Mode(ResidualMode::Greedy) => "greedy".into(),
            Field::Mode(ResidualMode::Sample) => "sample".into(),
            Field::Iterations(s) => s.iterations.to_string(),
        }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let list = |v: &str| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect::<Vec<_>>();
        match self {
            Field::Usize(v) => **v = value.parse().map_err(|_| bad(key, value))?,
            Field::U64(v) => **v = value.parse().map_err(|_| bad(key, value))?,
            Field::U32(v) => **v = value.parse().map_err(|_| bad(key, value))?,
            Field::F64(v) => **v = value.parse().map_err(|_| bad(key, value))?,
            Field::Bool(v) => **v = value.parse().map_err(|_| bad(key, value))?,
            Field::Sizes(v) => **v = list(value).iter().map(|s| s.parse()).collect::<Result<_, _>>().map_err(|_| bad(key, value))?,
            Field::Reals(v) => **v = list(value).iter().map(|s| s.parse()).collect::<Result<_, _>>().map_err(|_| bad(key, value))?,
            Field::Words(v) => **v = list(value),
            Field::Mode(v) => {
                **v = match value {
                    "greedy" => ResidualMode::Greedy,
                    "sample" => ResidualMode::Sample,
                    _ => return Err(bad(key, value)),
                }
            }
            Field::Iterations(s) => s.iterations = value.parse().map_err(|_| bad(key, value))?,
        }
        Ok(())
    }
}

fn transformer_fields<'a>(
    section: &str,
    t: &'a mut TransformerConfig,
    tr: &'a mut TransformerTrainConfig,
) -> Vec<(String, Field<'a>)> {
    let k = |name: &str| format!("{section}.{name}");
    vec![
        (k("hidden"), Field::Usize(&mut t.hidden)),
        (k("layers"), Field::Usize(&mut t.layers)),
        (k("heads"), Field::Usize(&mut t.heads)),
        (k("max_len"), Field::Usize(&mut t.max_len)),
        (k("steps"), Field::Usize(&mut tr.steps)),
        (k("batch"), Field::Usize(&mut tr.batch)),
        (k("lr"), Field::F64(&mut tr.lr)),
        (k("warmup"), Field::Usize(&mut tr.warmup)),
        (k("clip"), Field::F64(&mut tr.clip)),
        (k("lr_floor"), Field::F64(&mut tr.lr_floor)),
        (k("null_prob"), Field::F64(&mut tr.null_prob)),
        (k("log_every"), Field::Usize(&mut tr.log_every)),
    ]
}

impl RunConfig {
    fn fields(&mut self) -> Vec<(String, Field<'_>)> {
        let s = |k: &str| k.to_string();
        let c = &mut self.corpus;
        let [train, test, val] = &mut c.split;
        let mut out = vec![
            (s("run.seed"), Field::U64(&mut self.seed)),
            (s("corpus.classes"), Field::Words(&mut c.classes)),
            (s("corpus.samples"), Field::Usize(&mut c.samples)),
            (s("corpus.min_frames"), Field::Usize(&mut c.min_frames)),
            (s("corpus.max_frames"), Field::Usize(&mut c.max_frames)),
            (s("corpus.fps"), Field::U32(&mut c.fps)),
            (s("corpus.noise"), Field::F64(&mut c.noise)),
            (s("corpus.style"), Field::F64(&mut c.style)),
            (s("corpus.train_fraction"), Field::F64(train)),
            (s("corpus.test_fraction"), Field::F64(test)),
            (s("corpus.val_fraction"), Field::F64(val)),
            (s("corpus.seed"), Field::U64(&mut c.seed)),
        ];
        let (m, t) = (&mut self.codec, &mut self.codec_train);
        out.extend([
            (s("codec.pose_dim"), Field::Usize(&mut m.pose_dim)),
            (s("codec.width"), Field::Usize(&mut m.width)),
            (s("codec.latent_dim"), Field::Usize(&mut m.latent_dim)),
            (s("codec.resblocks"), Field::Usize(&mut m.resblocks)),
            (s("codec.codebook_sizes"), Field::Sizes(&mut m.codebook_sizes)),
            (s("codec.dropout_q"), Field::F64(&mut m.dropout_q)),
            (s("codec.beta"), Field::F64(&mut m.beta)),
            (s("codec.ema_decay"), Field::F64(&mut m.ema.decay)),
            (s("codec.ema_reset_threshold"), Field::F64(&mut m.ema.reset_threshold)),
            (s("codec.window"), Field::Usize(&mut t.window)),
            (s("codec.batch"), Field::Usize(&mut t.batch)),
            (s("codec.steps"), Field::Usize(&mut t.steps)),
            (s("codec.lr"), Field::F64(&mut t.lr)),
            (s("codec.warmup"), Field::Usize(&mut t.warmup)),
            (s("codec.clip"), Field::F64(&mut t.clip)),
            (s("codec.lr_floor"), Field::F64(&mut t.lr_floor)),
            (s("codec.log_every"), Field::Usize(&mut t.log_every)),
        ]);
        out.extend(transformer_fields("mformer", &mut self.mformer, &mut self.mformer_train));
        out.extend(transformer_fields("rformer", &mut self.rformer, &mut self.rformer_train));
        let inf = &mut self.inference;
        let g: &mut GuidanceConfig = &mut inf.guidance;
        out.extend([
            (s("decode.iterations"), Field::Iterations(&mut inf.schedule)),
            (s("decode.s_masked"), Field::F64(&mut g.s_masked)),
            (s("decode.s_residual"), Field::F64(&mut g.s_residual)),
            (s("decode.temperature"), Field::F64(&mut g.temperature)),
            (s("decode.gumbel_anneal"), Field::Bool(&mut g.gumbel_anneal)),
            (s("decode.residual_mode"), Field::Mode(&mut inf.mode)),
            (s("oracle.hidden"), Field::Usize(&mut self.oracle.hidden)),
            (s("oracle.steps"), Field::Usize(&mut self.oracle.steps)),
            (s("oracle.lr"), Field::F64(&mut self.oracle.lr)),
            (s("oracle.seed"), Field::U64(&mut self.oracle.seed)),
            (s("eval.samples_per_label"), Field::Usize(&mut self.eval.samples_per_label)),
            (s("eval.frames"), Field::Usize(&mut self.eval.frames)),
            (s("eval.cfg_sweep"), Field::Reals(&mut self.eval.cfg_sweep)),
        ]);
        out
    }

    /// Every key in canonical order.
    pub fn keys() -> Vec<String> {
        Self::default().fields().into_iter().map(|(k, _)| k).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut fields = self.fields();
        let (_, field) = fields
            .iter_mut()
            .find(|(k, _)| k == key)
            .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
        field.set(key, value.trim())
    }

    pub fn get(&mut self, key: &str) -> Result<String> {
        self.fields()
            .into_iter()
            .find(|(k, _)| k == key)
            .map(|(_, f)| f.render())
            .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected 'section.key = value'", ln + 1)));
            };
            self.set(key.trim(), value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", ln + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Parses a config; a `preset = <name>` first line selects the base.
    pub fn parse(text: &str) -> Result<Self> {
        let mut body = text;
        let mut cfg = Self::default();
        if let Some(first) = text.lines().map(str::trim).find(|l| !l.is_empty() && !l.starts_with('#')) {
            if let Some((k, v)) = first.split_once('=') {
                if k.trim() == "preset" {
                    cfg = Self::preset(v.trim())?;
                    body = text.split_once(first).map(|(_, rest)| rest).unwrap_or("");
                }
            }
        }
        cfg.apply_text(body)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut copy = self.clone();
        let mut out = String::new();
        for (k, f) in copy.fields() {
            writeln!(out, "{k} = {}", f.render()).unwrap();
        }
        out
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self::default();
        match name {
            "desk" => {}
            "paper" => {
                c.codec.width = 512;
                c.codec.latent_dim = 512;
                c.codec.codebook_sizes = vec![512; 6];
                c.codec.dropout_q = 0.2;
                for t in [&mut c.mformer, &mut c.rformer] {
                    t.hidden = 384;
                    t.layers = 6;
                    t.heads = 6;
                }
                c.inference.schedule = ScheduleParams { iterations: 10 };
                c.inference.guidance.s_masked = 4.0;
                c.inference.guidance.s_residual = 5.0;
            }
            "toy" => {
                c.codec.width = 48;
                c.codec.latent_dim = 32;
                c.codec.codebook_sizes = vec![64, 32, 32, 32, 32, 32];
                c.codec_train.steps = 3000;
                c.codec_train.lr = 5e-3;
                for (t, tr) in [(&mut c.mformer, &mut c.mformer_train), (&mut c.rformer, &mut c.rformer_train)] {
                    t.hidden = 64;
                    t.layers = 2;
                    t.heads = 4;
                    t.max_len = 16;
                    tr.steps = 3000;
                    tr.batch = 16;
                    tr.lr = 2e-3;
                    tr.warmup = 100;
                    tr.lr_floor = 0.1;
                }
                c.mformer_train.steps = 6000;
                c.rformer_train.steps = 6000;
                c.inference.guidance.s_residual = 2.0;
            }
            other => return Err(Error::Config(format!("unknown preset '{other}' (desk, paper, toy)"))),
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        if self.codec.pose_dim != crate::corpus::POSE_DIM {
            return Err(Error::Config(format!(
                "codec.pose_dim {} differs from the corpus pose dimension {}",
                self.codec.pose_dim,
                crate::corpus::POSE_DIM
            )));
        }
        self.codec.validate()?;
        let ct = &self.codec_train;
        if ct.window == 0 || ct.window % crate::codec::DOWNSCALE != 0 || ct.batch == 0 || !(ct.lr > 0.0) {
            return Err(Error::Config("codec window must be a positive multiple of 4, batch and lr positive".into()));
        }
        if !(0.0..=1.0).contains(&ct.lr_floor) {
            return Err(Error::Config("codec.lr_floor must lie in [0, 1]".into()));
        }
        let tokens = self.corpus.max_frames.max(self.eval.frames).div_ceil(crate::codec::DOWNSCALE);
        for (name, t, tr) in [("mformer", &self.mformer, &self.mformer_train), ("rformer", &self.rformer, &self.rformer_train)] {
            t.validate()?;
            if t.max_len < tokens {
                return Err(Error::Config(format!("{name}.max_len {} below the {tokens} tokens of the longest motion", t.max_len)));
            }
            if tr.batch == 0 || !(tr.lr > 0.0) || !(0.0..=1.0).contains(&tr.null_prob) || !(0.0..=1.0).contains(&tr.lr_floor) {
                return Err(Error::Config(format!("{name} training settings out of range")));
            }
        }
        ScheduleParams::new(self.inference.schedule.iterations)?;
        self.inference.guidance.validate()?;
        if self.oracle.hidden == 0 || self.oracle.steps == 0 {
            return Err(Error::Config("oracle dims must be positive".into()));
        }
        if self.eval.samples_per_label == 0 || self.eval.frames == 0 {
            return Err(Error::Config("eval counts must be positive".into()));
        }
        Ok(())
    }

    pub fn mformer_config(&self) -> MFormerConfig {
        MFormerConfig {
            codebook_size: self.codec.codebook_sizes[0],
            num_labels: self.corpus.classes.len(),
            trunk: self.mformer.clone(),
        }
    }

    pub fn rformer_config(&self) -> RFormerConfig {
        RFormerConfig {
            codebook_sizes: self.codec.codebook_sizes.clone(),
            num_labels: self.corpus.classes.len(),
            trunk: self.rformer.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for p in ["desk", "paper", "toy"] {
            let c = RunConfig::preset(p).unwrap();
            c.validate().unwrap();
            assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        }
    }

    #[test]
    fn presets_and_overrides() {
        let c = RunConfig::parse("preset = toy\n# comment\ncodec.dropout_q = 0.0  # inline\n").unwrap();
        assert_eq!(c.codec.width, 48);
        assert_eq!(c.codec.codebook_sizes[0], 64);
        assert_eq!(c.inference.guidance.s_residual, 2.0);
        assert_eq!(c.codec.dropout_q, 0.0);
        let p = RunConfig::preset("paper").unwrap();
        assert_eq!(p.codec.codebook_sizes, vec![512; 6]);
        assert_eq!(p.inference.schedule.iterations, 10);
        assert_ne!(c.hash(), p.hash());
    }

    #[test]
    fn errors() {
        assert!(RunConfig::parse("nope.key = 1").is_err());
        assert!(RunConfig::parse("codec.width = wide").is_err());
        assert!(RunConfig::parse("codec.width 3").is_err());
        assert!(RunConfig::parse("codec.dropout_q = 1.5").is_err());
        assert!(RunConfig::parse("mformer.max_len = 4").is_err());
        assert!(RunConfig::parse("preset = huge").is_err());
        assert!(RunConfig::parse("decode.residual_mode = beam").is_err());
    }
}
