//! Deterministic synthetic motion-caption corpus.

pub mod classes;
mod oracle;

use std::fmt::Write as _;
use std::path::Path;

pub use classes::{default_classes, find_class, synth_motion, MotionClass, JOINTS, POSE_DIM, WALK_SPEED};
pub use oracle::{dataset, motion_features, MIN_ORACLE_ACCURACY, ClassifierConfig, OracleClassifier};

use crate::codec::MotionSequence;
use crate::error::{Error, Result};
use crate::ndmath::{Rng, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub classes: Vec<String>,
    pub samples: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub fps: u32,
    pub noise: f64,
    /// Scale of smooth per-sample joint deviations.
    pub style: f64,
    /// train / test / val fractions.
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for CorpusManifest {
    fn default() -> Self {
        Self {
            classes: default_classes().iter().map(|c| c.name.to_string()).collect(),
            samples: 2000,
            min_frames: 40,
            max_frames: 64,
            fps: 20,
            noise: 0.01,
            style: 0.05,
            split: [0.8, 0.15, 0.05],
            seed: 0,
        }
    }
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes.is_empty() {
            return bad("corpus needs at least one class".into());
        }
        let catalog = default_classes();
        for name in &self.classes {
            find_class(&catalog, name)?;
        }
        if self.samples == 0 {
            return bad("corpus.samples must be positive".into());
        }
        if self.min_frames < 4 || self.min_frames > self.max_frames {
            return bad(format!("frame range {}..={} is invalid (min 4)", self.min_frames, self.max_frames));
        }
        if self.fps == 0 || [self.noise, self.style].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("fps must be positive and noise, style non-negative".into());
        }
        if self.split.iter().any(|&r| r < 0.0) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split ratios {:?} must be non-negative and sum to 1", self.split));
        }
        Ok(())
    }

    pub fn resolved_classes(&self) -> Result<Vec<MotionClass>> {
        let catalog = default_classes();
        self.classes.iter().map(|n| find_class(&catalog, n).map(|(_, c)| c.clone())).collect()
    }

    /// Split sizes in train / test / val order; val absorbs rounding.
    pub fn split_sizes(&self) -> [usize; 3] {
        let train = (self.samples as f64 * self.split[0]).round() as usize;
        let test = ((self.samples as f64 * self.split[1]).round() as usize).min(self.samples - train);
        [train, test, self.samples - train - test]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub id: usize,
    pub label: usize,
    pub caption: String,
    pub motion: MotionSequence<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Val,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Val];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus<T> {
    pub manifest: CorpusManifest,
    pub classes: Vec<MotionClass>,
    pub samples: Vec<Sample<T>>,
    /// Sample ids per split, in train / test / val order.
    pub splits: [Vec<usize>; 3],
}

/// Generates the corpus described by `manifest`; a pure function of it.
pub fn build_corpus<T: Scalar>(manifest: &CorpusManifest) -> Result<Corpus<T>> {
    manifest.validate()?;
    let classes = manifest.resolved_classes()?;
    let root = Rng::named(manifest.seed, "corpus");
    let fps = manifest.fps as f64;
    let mut samples = Vec::with_capacity(manifest.samples);
    for id in 0..manifest.samples {
        let mut rng = root.fork_indexed("sample", id as u64);
        let label = id % classes.len();
        let class = &classes[label];
        let len = manifest.min_frames + rng.below(manifest.max_frames - manifest.min_frames + 1);
        let caption = class.templates[rng.below(class.templates.len())].to_string();
        let frames = synth_motion(class, len, fps, manifest.noise, manifest.style, &mut rng)?;
        samples.push(Sample {
            id,
            label,
            caption,
            motion: MotionSequence::new(frames, manifest.fps)?,
        });
    }
    let mut order: Vec<usize> = (0..manifest.samples).collect();
    root.fork("split").shuffle(&mut order);
    let [a, b, _] = manifest.split_sizes();
    let mut splits = [order[..a].to_vec(), order[a..a + b].to_vec(), order[a + b..].to_vec()];
    for s in &mut splits {
        s.sort_unstable();
    }
    Ok(Corpus {
        manifest: manifest.clone(),
        classes,
        samples,
        splits,
    })
}

impl<T: Scalar> Corpus<T> {
    pub fn split(&self, which: Split) -> impl Iterator<Item = &Sample<T>> {
        let ids = match which {
            Split::Train => &self.splits[0],
            Split::Test => &self.splits[1],
            Split::Val => &self.splits[2],
        };
        ids.iter().map(move |&i| &self.samples[i])
    }

    pub fn num_labels(&self) -> usize {
        self.classes.len()
    }

    pub fn label_id(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn label_name(&self, id: usize) -> &'static str {
        self.classes[id].name
    }

    /// Resolves a caption string through the template table.
    pub fn label_for_caption(&self, caption: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.templates.contains(&caption))
    }

    /// Sidecar lines `id<TAB>label_id<TAB>caption`.
    pub fn sidecar(&self) -> String {
        let mut s = String::new();
        for sample in &self.samples {
            let _ = writeln!(s, "{}\t{}\t{}", sample.id, sample.label, sample.caption);
        }
        s
    }

    /// Writes `motions/<id>.motion`, `captions.tsv`, `splits/*.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let motions = dir.join("motions");
        let splits = dir.join("splits");
        for d in [dir, motions.as_path(), splits.as_path()] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for sample in &self.samples {
            sample.motion.save(&motions.join(motion_file_name(sample.id)))?;
        }
        write_file(&dir.join("captions.tsv"), &self.sidecar())?;
        for (split, ids) in Split::ALL.iter().zip(&self.splits) {
            let body: String = ids.iter().map(|i| format!("{i}\n")).collect();
            write_file(&splits.join(format!("{}.txt", split.name())), &body)?;
        }
        Ok(())
    }

    /// Reads a corpus written by [`Corpus::write`] under `manifest`.
    pub fn load(dir: &Path, manifest: &CorpusManifest) -> Result<Self> {
        manifest.validate()?;
        let classes = manifest.resolved_classes()?;
        let sidecar = read_file(&dir.join("captions.tsv"))?;
        let mut samples = Vec::new();
        for (ln, line) in sidecar.lines().enumerate() {
            let mut parts = line.splitn(3, '\t');
            let (Some(id), Some(label), Some(caption)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse {
                    what: "captions.tsv".into(),
                    msg: format!("line {}: expected three tab-separated fields", ln + 1),
                });
            };
            let parse = |v: &str| {
                v.parse::<usize>().map_err(|_| Error::Parse {
                    what: "captions.tsv".into(),
                    msg: format!("line {}: bad integer '{v}'", ln + 1),
                })
            };
            let (id, label) = (parse(id)?, parse(label)?);
            if label >= classes.len() {
                return Err(Error::Parse {
                    what: "captions.tsv".into(),
                    msg: format!("line {}: label {label} outside {} classes", ln + 1, classes.len()),
                });
            }
            let motion = MotionSequence::load(&dir.join("motions").join(motion_file_name(id)))?;
            samples.push(Sample {
                id,
                label,
                caption: caption.to_string(),
                motion,
            });
        }
        let mut splits: [Vec<usize>; 3] = Default::default();
        for (split, slot) in Split::ALL.iter().zip(&mut splits) {
            let body = read_file(&dir.join("splits").join(format!("{}.txt", split.name())))?;
            for tok in body.split_whitespace() {
                let id: usize = tok.parse().map_err(|_| Error::Parse {
                    what: format!("{} split", split.name()),
                    msg: format!("bad id '{tok}'"),
                })?;
                if id >= samples.len() {
                    return Err(Error::Parse {
                        what: format!("{} split", split.name()),
                        msg: format!("id {id} has no sample"),
                    });
                }
                slot.push(id);
            }
        }
        Ok(Self {
            manifest: manifest.clone(),
            classes,
            samples,
            splits,
        })
    }
}

pub fn motion_file_name(id: usize) -> String {
    format!("{id:05}.motion")
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
