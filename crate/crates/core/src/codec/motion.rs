use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndmath::{Scalar, Tensor};

pub const DEFAULT_FPS: u32 = 20;

/// `N×D` pose-feature frames.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence<T> {
    pub frames: Tensor<T>,
    pub fps: u32,
}

impl<T: Scalar> MotionSequence<T> {
    pub fn new(frames: Tensor<T>, fps: u32) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(Error::Dimension {
                op: "motion",
                left: frames.shape().to_vec(),
                right: vec![2],
            });
        }
        frames.check_finite("motion frames")?;
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame(&self, i: usize) -> &[T] {
        self.frames.row(i)
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::Length(format!("frame range {start}..{end} outside 0..{}", self.len())));
        }
        let idx: Vec<usize> = (start..end).collect();
        Ok(Self {
            frames: self.frames.gather_rows(&idx)?,
            fps: self.fps,
        })
    }

    /// Repeats the last frame until the length is a multiple of `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize) -> Self {
        let n = self.len();
        let target = n.div_ceil(multiple) * multiple;
        if target == n {
            return self.clone();
        }
        let idx: Vec<usize> = (0..target).map(|i| i.min(n - 1)).collect();
        Self {
            frames: self.frames.gather_rows(&idx).expect("indices in range"),
            fps: self.fps,
        }
    }

    pub fn concat(parts: &[Self]) -> Result<Self> {
        let rows: Vec<Vec<T>> = parts
            .iter()
            .flat_map(|p| (0..p.len()).map(move |i| p.frame(i).to_vec()))
            .collect();
        Self::new(Tensor::from_rows(&rows)?, parts.first().map(|p| p.fps).unwrap_or(DEFAULT_FPS))
    }

    /// Text form: a `#momask-motion D=<d> fps=<fps>` header, then one frame
    /// per line with whitespace-separated values.
    pub fn to_text(&self) -> String {
        let mut s = format!("#momask-motion D={} fps={}\n", self.dim(), self.fps);
        for i in 0..self.len() {
            for (j, v) in self.frame(i).iter().enumerate() {
                if j > 0 {
                    s.push(' ');
                }
                let _ = write!(s, "{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let perr = |msg: String| Error::Parse {
            what: "motion file".into(),
            msg,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| perr("empty file".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("#momask-motion") {
            return Err(perr(format!("bad header '{header}'")));
        }
        let (mut dim, mut fps) = (None, None);
        for f in fields {
            match f.split_once('=') {
                Some(("D", v)) => dim = v.parse::<usize>().ok(),
                Some(("fps", v)) => fps = v.parse::<u32>().ok(),
                _ => return Err(perr(format!("unexpected header field '{f}'"))),
            }
        }
        let dim = dim.filter(|&d| d > 0).ok_or_else(|| perr("missing D".into()))?;
        let fps = fps.ok_or_else(|| perr("missing fps".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let before = data.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| perr(format!("line {}: bad number '{tok}'", ln + 2)))?;
                data.push(T::of(v));
            }
            if data.len() - before != dim {
                return Err(perr(format!("line {}: expected {dim} values, got {}", ln + 2, data.len() - before)));
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(perr("no frames".into()));
        }
        Self::new(Tensor::new(vec![rows, dim], data)?, fps)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
