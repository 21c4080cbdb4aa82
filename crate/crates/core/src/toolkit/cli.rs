//! `momask-lab` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::codec::{tokenize, train_rvqvae, CodecParams, MotionSequence, TokenStack};
use crate::corpus::{build_corpus, Corpus, OracleClassifier, Split, MIN_ORACLE_ACCURACY};
use crate::engine::{generate, inpaint, InpaintSpec, Models};
use crate::error::{Error, Result};
use crate::mformer::{train_mformer, MFormerParams};
use crate::ndmath::Rng;
use crate::nn::Condition;
use crate::rformer::{train_rformer, RFormerParams};

use super::checkpoint::{
    codec_checkpoint, load_codec, load_mformer, load_rformer, mformer_checkpoint, rformer_checkpoint, CheckpointContainer,
};
use super::config::RunConfig;
use super::eval::{eval_generation, eval_reconstruction, eval_threads};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const RVQ_CKPT: &str = "rvq.ckpt";
pub const MASKED_CKPT: &str = "masked.ckpt";
pub const RESIDUAL_CKPT: &str = "residual.ckpt";

#[derive(Parser, Debug)]
#[command(name = "momask-lab", version, about = "Residual-quantized motion tokens and masked generation at desk scale")]
struct Cli {
    /// Flat `section.key = value` config; a first line `preset = desk|paper|toy` picks the base.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Inputs {
    /// Corpus directory; defaults to `<out>/corpus`, else built in memory.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Directory holding the checkpoints; defaults to `<out>`.
    #[arg(long)]
    models: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the synthetic corpus to `<out>/corpus`.
    GenCorpus,
    /// Trains the residual-quantized codec.
    TrainRvq(#[command(flatten)] Inputs),
    /// Trains the masked transformer on base tokens.
    TrainMasked(#[command(flatten)] Inputs),
    /// Trains the residual transformer on full token stacks.
    TrainResidual(#[command(flatten)] Inputs),
    /// Generates motions for a label.
    Generate {
        #[arg(long)]
        label: String,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Regenerates token ranges of a reference motion.
    Inpaint {
        #[arg(long)]
        reference: PathBuf,
        /// Token ranges `start..end`, comma separated, end exclusive.
        #[arg(long)]
        ranges: String,
        #[arg(long)]
        label: String,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Reconstruction error per number of quantizer layers on the test split.
    EvalRecon {
        /// Inclusive range `a..b` of layer counts.
        #[arg(long, default_value = "1..6")]
        layers: String,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Oracle accuracy of generated motions on every label.
    EvalGen {
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Prints the contents of a checkpoint.
    InspectCkpt { path: PathBuf },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::TrainRvq(_) => "train-rvq",
            Command::TrainMasked(_) => "train-masked",
            Command::TrainResidual(_) => "train-residual",
            Command::Generate { .. } => "generate",
            Command::Inpaint { .. } => "inpaint",
            Command::EvalRecon { .. } => "eval-recon",
            Command::EvalGen { .. } => "eval-gen",
            Command::InspectCkpt { .. } => "inspect-ckpt",
        }
    }
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
        }
    };
    match execute(&cli, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownClass(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serialisable report") + "\n"
}

struct Ctx<'a> {
    config: RunConfig,
    seed: u64,
    out: &'a Path,
    outputs: Vec<String>,
    seeds: Vec<(String, u64)>,
}

impl Ctx<'_> {
    fn emit(&mut self, rel: &str, body: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.out.join(rel);
        write(&path, body)?;
        self.outputs.push(rel.to_string());
        Ok(path)
    }

    fn stage_seed(&mut self, stage: &str) -> u64 {
        let s = super::stage_seed(self.seed, stage);
        self.seeds.push((stage.to_string(), s));
        s
    }

    fn corpus(&self, inputs: &Inputs) -> Result<Corpus<f32>> {
        let dir = inputs.corpus.clone().unwrap_or_else(|| self.out.join("corpus"));
        if inputs.corpus.is_some() || dir.join("captions.tsv").exists() {
            Corpus::load(&dir, &self.config.corpus)
        } else {
            build_corpus(&self.config.corpus)
        }
    }

    fn models_dir(&self, inputs: &Inputs) -> PathBuf {
        inputs.models.clone().unwrap_or_else(|| self.out.to_path_buf())
    }

    fn codec(&self, inputs: &Inputs) -> Result<CodecParams<f32>> {
        let (cfg, params) = load_codec(&CheckpointContainer::load(&self.models_dir(inputs).join(RVQ_CKPT))?)?;
        if cfg.codec != self.config.codec {
            return Err(Error::Config("codec section differs from the one the codec checkpoint was trained with".into()));
        }
        Ok(params)
    }

    fn transformers(&self, inputs: &Inputs) -> Result<(MFormerParams<f32>, RFormerParams<f32>)> {
        let dir = self.models_dir(inputs);
        let (_, m) = load_mformer(&CheckpointContainer::load(&dir.join(MASKED_CKPT))?)?;
        let (_, r) = load_rformer(&CheckpointContainer::load(&dir.join(RESIDUAL_CKPT))?)?;
        Ok((m, r))
    }

    fn label(&self, name: &str) -> Result<usize> {
        self.config
            .corpus
            .classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }
}

fn token_stacks(corpus: &Corpus<f32>, codec: &CodecParams<f32>) -> Result<Vec<(TokenStack, usize)>> {
    corpus.split(Split::Train).map(|s| Ok((tokenize(&s.motion, codec)?, s.label))).collect()
}

fn parse_span(text: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("expected 'start..end', got '{text}'"));
    let (a, b) = text.trim().split_once("..").ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn execute(cli: &Cli, argv: &[OsString]) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    config.validate()?;
    let mut ctx = Ctx {
        seed: config.seed,
        config,
        out: &cli.out,
        outputs: Vec::new(),
        seeds: Vec::new(),
    };
    let name = cli.command.name();
    match &cli.command {
        Command::GenCorpus => {
            let corpus = build_corpus::<f32>(&ctx.config.corpus)?;
            let dir = ctx.out.join("corpus");
            corpus.write(&dir)?;
            ctx.outputs.push("corpus".into());
            let manifest: String = ctx.config.to_text().lines().filter(|l| l.starts_with("corpus.")).map(|l| format!("{l}\n")).collect();
            ctx.emit("corpus/manifest.cfg", &manifest)?;
            print!("{manifest}");
            let [a, b, c] = corpus.splits.each_ref().map(Vec::len);
            println!("samples {} train {a} test {b} val {c}", corpus.samples.len());
        }
        Command::TrainRvq(inputs) => {
            let corpus = ctx.corpus(inputs)?;
            let motions: Vec<&MotionSequence<f32>> = corpus.split(Split::Train).map(|s| &s.motion).collect();
            let seed = ctx.stage_seed("train-rvq");
            let (params, log) = train_rvqvae(&motions, &ctx.config.codec, &ctx.config.codec_train, &mut Rng::new(seed))?;
            let path = ctx.out.join(RVQ_CKPT);
            write(&path, codec_checkpoint(&params, &ctx.config, seed).to_bytes())?;
            ctx.outputs.push(RVQ_CKPT.into());
            ctx.emit("train-rvq.log.json", pretty(&json!({ "epoch_recon": log.epoch_recon })))?;
            println!("codec trained: final epoch recon {:?}", log.epoch_recon.last());
        }
        Command::TrainMasked(inputs) => {
            let corpus = ctx.corpus(inputs)?;
            let codec = ctx.codec(inputs)?;
            let data: Vec<(Vec<usize>, usize)> =
                token_stacks(&corpus, &codec)?.into_iter().map(|(s, l)| (s.base().to_vec(), l)).collect();
            let seed = ctx.stage_seed("train-masked");
            let (params, log) =
                train_mformer::<f32>(&data, &ctx.config.mformer_config(), &ctx.config.mformer_train, &mut Rng::new(seed))?;
            write(&ctx.out.join(MASKED_CKPT), mformer_checkpoint(&params, &ctx.config, seed).to_bytes())?;
            ctx.outputs.push(MASKED_CKPT.into());
            ctx.emit("train-masked.log.json", pretty(&json!({ "epoch_loss": log.epoch_loss })))?;
            println!("masked transformer trained: final epoch loss {:?}", log.epoch_loss.last());
        }
        Command::TrainResidual(inputs) => {
            let corpus = ctx.corpus(inputs)?;
            let codec = ctx.codec(inputs)?;
            let data = token_stacks(&corpus, &codec)?;
            let seed = ctx.stage_seed("train-residual");
            let (params, log) =
                train_rformer::<f32>(&data, &ctx.config.rformer_config(), &ctx.config.rformer_train, &mut Rng::new(seed))?;
            write(&ctx.out.join(RESIDUAL_CKPT), rformer_checkpoint(&params, &ctx.config, seed).to_bytes())?;
            ctx.outputs.push(RESIDUAL_CKPT.into());
            ctx.emit("train-residual.log.json", pretty(&json!({ "epoch_loss": log.epoch_loss })))?;
            println!("residual transformer trained: final epoch loss {:?}", log.epoch_loss.last());
        }
        Command::Generate {
            label,
            frames,
            count,
            inputs,
        } => {
            let id = ctx.label(label)?;
            let codec = ctx.codec(inputs)?;
            let (m, r) = ctx.transformers(inputs)?;
            let models = Models {
                codec: &codec,
                mformer: &m,
                rformer: &r,
            };
            let root = Rng::new(ctx.stage_seed("generate"));
            let inference = ctx.config.inference.clone();
            for i in 0..*count {
                let g = generate(Condition::Label(id), *frames, models, &inference, &mut root.fork_indexed("sample", i as u64))?;
                let stem = format!("generate/{label}-{i:03}");
                let path = ctx.emit(&format!("{stem}.motion"), g.motion.to_text())?;
                ctx.emit(&format!("{stem}.trace"), g.trace.to_text())?;
                println!("{}", path.display());
            }
        }
        Command::Inpaint {
            reference,
            ranges,
            label,
            inputs,
        } => {
            let id = ctx.label(label)?;
            let spans = ranges.split(',').filter(|s| !s.trim().is_empty()).map(parse_span).collect::<Result<Vec<_>>>()?;
            let codec = ctx.codec(inputs)?;
            let (m, r) = ctx.transformers(inputs)?;
            let spec = InpaintSpec {
                reference: MotionSequence::load(reference)?,
                ranges: spans,
            };
            let models = Models {
                codec: &codec,
                mformer: &m,
                rformer: &r,
            };
            let mut rng = Rng::new(ctx.stage_seed("inpaint"));
            let out = inpaint(&spec, Condition::Label(id), models, &ctx.config.inference, &mut rng)?;
            let path = ctx.emit(&format!("inpaint/{label}.motion"), out.motion.to_text())?;
            ctx.emit(&format!("inpaint/{label}.trace"), out.trace.to_text())?;
            println!("{}", path.display());
        }
        Command::EvalRecon { layers, inputs } => {
            let (lo, hi) = parse_span(layers)?;
            let corpus = ctx.corpus(inputs)?;
            let codec = ctx.codec(inputs)?;
            if lo == 0 || lo > hi || hi > codec.num_layers() {
                return Err(Error::Config(format!("layers {lo}..{hi} outside 1..{}", codec.num_layers())));
            }
            let motions: Vec<&MotionSequence<f32>> = corpus.split(Split::Test).map(|s| &s.motion).collect();
            let mut report = eval_reconstruction(&codec, &motions, eval_threads())?;
            report.per_layer.retain(|l| (lo..=hi).contains(&l.layers));
            ctx.emit("eval-recon.json", pretty(&report))?;
            println!("layers  joint_l2  l1");
            for l in &report.per_layer {
                println!("{:>6}  {:.6}  {:.6}", l.layers, l.joint_l2, l.l1);
            }
            println!("violation fraction {:.4}", report.violation_fraction);
        }
        Command::EvalGen { samples, inputs } => {
            let corpus = ctx.corpus(inputs)?;
            let codec = ctx.codec(inputs)?;
            let (m, r) = ctx.transformers(inputs)?;
            let oracle = OracleClassifier::train(&corpus, &ctx.config.oracle)?;
            if oracle.held_out_accuracy < MIN_ORACLE_ACCURACY {
                eprintln!("warning: oracle held-out accuracy {:.3} below {MIN_ORACLE_ACCURACY}", oracle.held_out_accuracy);
            }
            let mut eval = ctx.config.eval.clone();
            if let Some(n) = samples {
                eval.samples_per_label = *n;
            }
            let seed = ctx.stage_seed("eval-gen");
            let labels: Vec<&str> = ctx.config.corpus.classes.iter().map(String::as_str).collect();
            let models = Models {
                codec: &codec,
                mformer: &m,
                rformer: &r,
            };
            let report = eval_generation(models, &oracle, &labels, &eval, &ctx.config.inference, seed, eval_threads())?;
            ctx.emit(
                "eval-gen.json",
                pretty(&json!({ "oracle_held_out_accuracy": oracle.held_out_accuracy, "report": report })),
            )?;
            println!("full {:.3} base {:.3}", report.full_accuracy, report.base_accuracy);
            for p in &report.cfg_sweep {
                println!("s_masked {:>4} accuracy {:.3}", p.s_masked, p.accuracy);
            }
        }
        Command::InspectCkpt { path } => {
            let c = CheckpointContainer::load(path)?;
            println!("format MMK1 version {}", super::checkpoint::VERSION);
            match c.run_config() {
                Ok(cfg) => println!("config hash {}", cfg.hash()),
                Err(e) => println!("config unreadable: {e}"),
            }
            for (n, s) in &c.seeds {
                println!("seed {n} = {s}");
            }
            let total: usize = c.arrays.iter().map(|a| a.data.len()).sum();
            println!("{} arrays, {total} values", c.arrays.len());
            for a in &c.arrays {
                println!("  {} {:?}", a.name, a.shape);
            }
            for (alias, target) in &c.ties {
                println!("  tie {alias} -> {target}");
            }
            return Ok(());
        }
    }
    let record = json!({
        "command": name,
        "argv": argv.iter().map(|a| a.to_string_lossy().into_owned()).collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "git_describe": git_describe(),
        "config_hash": ctx.config.hash(),
        "config": ctx.config.to_text(),
        "seed": ctx.seed,
        "stage_seeds": ctx.seeds.iter().map(|(k, v)| json!({ "stage": k, "seed": v })).collect::<Vec<_>>(),
        "outputs": ctx.outputs,
    });
    write(&ctx.out.join(format!("{name}.run.json")), pretty(&record))
}
