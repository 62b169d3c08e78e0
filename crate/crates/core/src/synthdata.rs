//! Synthetic orthonormal-pattern data.
//!
//! A [`PatternSet`] holds `d` orthonormal vectors in `R^d`: two task patterns
//! `o1`, `o2` that determine the label, and `d - 2` irrelevant patterns drawn
//! per token from a configurable distribution. A [`Sample`] stores its tokens
//! as pattern indices; dense vectors are materialized on request.
//!
//! Sampling order for one sample: the task-token position is drawn first
//! (uniform over `0..n`), then one irrelevant pattern per remaining position
//! in increasing position order.

use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tokens::Tokens;

const ORTHO_RETRIES: usize = 16;
/// Default `c` in the per-pattern bound `prob <= c / d`.
pub const DEFAULT_PROB_BOUND: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternMode {
    StandardBasis,
    RandomOrthonormal,
}

impl PatternMode {
    fn tag(self) -> u32 {
        match self {
            PatternMode::StandardBasis => 0,
            PatternMode::RandomOrthonormal => 1,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(PatternMode::StandardBasis),
            1 => Some(PatternMode::RandomOrthonormal),
            _ => None,
        }
    }
}

/// Class label, `+1` for the `o1` class and `-1` for the `o2` class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Pos,
    Neg,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Pos => 1.0,
            Label::Neg => -1.0,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Label::Pos => 1,
            Label::Neg => -1,
        }
    }

    pub fn from_i8(v: i8) -> Option<Self> {
        match v {
            1 => Some(Label::Pos),
            -1 => Some(Label::Neg),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PatternSet {
    dim: usize,
    mode: PatternMode,
    seed: u64,
    /// Row `i` is pattern `i`.
    patterns: Array2<f64>,
    task1_index: usize,
    task2_index: usize,
    irrelevant: Vec<usize>,
    irrelevant_probs: Vec<f64>,
    sampler: WeightedIndex<f64>,
}

impl PatternSet {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> PatternMode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn patterns(&self) -> &Array2<f64> {
        &self.patterns
    }

    pub fn pattern(&self, i: usize) -> ArrayView1<'_, f64> {
        self.patterns.row(i)
    }

    pub fn task1_index(&self) -> usize {
        self.task1_index
    }

    pub fn task2_index(&self) -> usize {
        self.task2_index
    }

    /// Index of the task pattern for `label`.
    pub fn task_index(&self, label: Label) -> usize {
        match label {
            Label::Pos => self.task1_index,
            Label::Neg => self.task2_index,
        }
    }

    /// Indices of the `d - 2` irrelevant patterns, aligned with
    /// [`irrelevant_probs`](Self::irrelevant_probs).
    pub fn irrelevant_indices(&self) -> &[usize] {
        &self.irrelevant
    }

    pub fn irrelevant_probs(&self) -> &[f64] {
        &self.irrelevant_probs
    }

    pub fn is_standard_basis(&self) -> bool {
        self.mode == PatternMode::StandardBasis
    }

    /// Replaces the per-token distribution over irrelevant patterns.
    ///
    /// `probs` must have `d - 2` nonnegative entries summing to one, each at
    /// most `bound / d`.
    pub fn with_irrelevant_probs(mut self, probs: Vec<f64>, bound: f64) -> Result<Self> {
        if probs.len() != self.dim - 2 {
            return Err(Error::Config(format!(
                "expected {} irrelevant probabilities, got {}",
                self.dim - 2,
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config("probabilities must be finite and >= 0".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("probabilities sum to {total}, not 1")));
        }
        let cap = bound / self.dim as f64;
        if let Some(p) = probs.iter().find(|p| **p > cap + 1e-15) {
            return Err(Error::Config(format!(
                "probability {p} exceeds bound {bound}/d = {cap}"
            )));
        }
        self.sampler = WeightedIndex::new(&probs)
            .map_err(|e| Error::Config(format!("bad irrelevant distribution: {e}")))?;
        self.irrelevant_probs = probs;
        Ok(self)
    }

    /// Writes the `MOEP1` pattern file: magic, `d` (u32), mode tag (u32),
    /// seed (u64), then the `d x d` pattern matrix row-major as f64. All
    /// integers and floats little-endian. Task indices and the irrelevant
    /// distribution are not stored; loading restores the defaults.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = binio::create_file(path)?;
        let res: std::io::Result<()> = (|| {
            w.bytes(b"MOEP1")?;
            w.u32(self.dim as u32)?;
            w.u32(self.mode.tag())?;
            w.u64(self.seed)?;
            w.f64s(self.patterns.iter())?;
            Ok(())
        })();
        res.and_then(|_| w.finish().map(|_| ()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = binio::read_file(path)?;
        let mut r = Reader::new(&buf, path);
        r.magic(b"MOEP1")?;
        let d = r.u32()? as usize;
        let tag = r.u32()?;
        let mode = PatternMode::from_tag(tag).ok_or_else(|| r.fail(format!("unknown mode tag {tag}")))?;
        let seed = r.u64()?;
        if d < 4 {
            return Err(r.fail(format!("dimension {d} < 4")));
        }
        let data = r.f64s(d * d)?;
        r.expect_end()?;
        let patterns = Array2::from_shape_vec((d, d), data).expect("d*d entries");
        Ok(Self::from_parts(d, mode, seed, patterns))
    }

    fn from_parts(dim: usize, mode: PatternMode, seed: u64, patterns: Array2<f64>) -> Self {
        let irrelevant: Vec<usize> = (2..dim).collect();
        let irrelevant_probs = vec![1.0 / (dim - 2) as f64; dim - 2];
        let sampler = WeightedIndex::new(&irrelevant_probs).expect("uniform weights");
        PatternSet {
            dim,
            mode,
            seed,
            patterns,
            task1_index: 0,
            task2_index: 1,
            irrelevant,
            irrelevant_probs,
            sampler,
        }
    }

    fn draw_irrelevant(&self, rng: &mut Rng) -> u32 {
        self.irrelevant[self.sampler.sample(rng)] as u32
    }
}

/// Builds the orthonormal pattern dictionary. Pattern 0 is `o1`, pattern 1
/// is `o2`, the rest are irrelevant.
pub fn build_pattern_set(d: usize, mode: PatternMode, seed: u64) -> Result<PatternSet> {
    if d < 4 {
        return Err(Error::InvalidDimension(format!("d = {d}, need d >= 4")));
    }
    let patterns = match mode {
        PatternMode::StandardBasis => Array2::eye(d),
        PatternMode::RandomOrthonormal => random_orthonormal(d, seed)?,
    };
    Ok(PatternSet::from_parts(d, mode, seed, patterns))
}

/// Modified Gram-Schmidt with one re-orthogonalization pass over Gaussian
/// draws; a draw that collapses below `1e-8` after projection is replaced.
fn random_orthonormal(d: usize, seed: u64) -> Result<Array2<f64>> {
    let mut rng = rng::stream(seed, rng::streams::PATTERNS);
    let mut basis = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        let mut accepted = false;
        for _ in 0..ORTHO_RETRIES {
            let mut v: ndarray::Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let start = v.dot(&v).sqrt();
            for _pass in 0..2 {
                for prev in 0..i {
                    let p = basis.row(prev);
                    let c = p.dot(&v);
                    v.scaled_add(-c, &p);
                }
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-8 * start.max(1.0) {
                v /= norm;
                basis.row_mut(i).assign(&v);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::Generation(format!(
                "rank deficiency at pattern {i} after {ORTHO_RETRIES} draws"
            )));
        }
    }
    Ok(basis)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// Pattern index of each token.
    pub tokens: Vec<u32>,
    pub label: Label,
    pub task_position: usize,
}

impl Sample {
    pub fn n(&self) -> usize {
        self.tokens.len()
    }

    /// Tokens expressed in pattern coordinates.
    pub fn basis_tokens(&self, d: usize) -> Tokens<'_> {
        Tokens::basis(&self.tokens, d)
    }

    /// Dense `n x d` token matrix.
    pub fn dense_tokens(&self, ps: &PatternSet) -> Array2<f64> {
        let mut x = Array2::zeros((self.tokens.len(), ps.dim()));
        for (j, &id) in self.tokens.iter().enumerate() {
            x.row_mut(j).assign(&ps.pattern(id as usize));
        }
        x
    }
}

pub fn sample_input(ps: &PatternSet, n: usize, label: Label, rng: &mut Rng) -> Result<Sample> {
    if n == 0 || n > ps.dim() {
        return Err(Error::Config(format!(
            "token count n = {n} must satisfy 1 <= n <= d = {}",
            ps.dim()
        )));
    }
    let task_position = rng.random_range(0..n);
    let task = ps.task_index(label) as u32;
    let tokens = (0..n)
        .map(|j| if j == task_position { task } else { ps.draw_irrelevant(rng) })
        .collect();
    Ok(Sample {
        tokens,
        label,
        task_position,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d: usize,
    pub n: usize,
    pub samples: Vec<Sample>,
    /// Seed of the generating stream; `None` for datasets read from disk.
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn label_counts(&self) -> (usize, usize) {
        let pos = self.samples.iter().filter(|s| s.label == Label::Pos).count();
        (pos, self.samples.len() - pos)
    }

    /// Writes the `MOED1` file: magic, `d`, `n`, `count` (u32 each), then per
    /// sample the label (i8), task-token position (u32) and `n` pattern
    /// indices (u32). Little-endian throughout.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = binio::create_file(path)?;
        let res: std::io::Result<()> = (|| {
            w.bytes(b"MOED1")?;
            w.u32(self.d as u32)?;
            w.u32(self.n as u32)?;
            w.u32(self.samples.len() as u32)?;
            for s in &self.samples {
                w.i8(s.label.as_i8())?;
                w.u32(s.task_position as u32)?;
                for &t in &s.tokens {
                    w.u32(t)?;
                }
            }
            Ok(())
        })();
        res.and_then(|_| w.finish().map(|_| ()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = binio::read_file(path)?;
        let mut r = Reader::new(&buf, path);
        r.magic(b"MOED1")?;
        let d = r.u32()? as usize;
        let n = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for i in 0..count {
            let raw = r.i8()?;
            let label = Label::from_i8(raw).ok_or_else(|| r.fail(format!("sample {i}: label {raw}")))?;
            let task_position = r.u32()? as usize;
            if task_position >= n {
                return Err(r.fail(format!("sample {i}: task position {task_position} >= n")));
            }
            let mut tokens = Vec::with_capacity(n);
            for _ in 0..n {
                let t = r.u32()?;
                if t as usize >= d {
                    return Err(r.fail(format!("sample {i}: pattern index {t} >= d")));
                }
                tokens.push(t);
            }
            samples.push(Sample {
                tokens,
                label,
                task_position,
            });
        }
        r.expect_end()?;
        Ok(Dataset {
            d,
            n,
            samples,
            seed: None,
        })
    }
}

/// Draws `count` samples. Balanced mode alternates `+1, -1, ...`; otherwise
/// each label is a fair coin flip.
pub fn sample_dataset(
    ps: &PatternSet,
    n: usize,
    count: usize,
    balanced: bool,
    rng: &mut Rng,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Config("dataset count must be >= 1".into()));
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let label = if balanced {
            if i % 2 == 0 {
                Label::Pos
            } else {
                Label::Neg
            }
        } else if rng.random::<bool>() {
            Label::Pos
        } else {
            Label::Neg
        };
        samples.push(sample_input(ps, n, label, rng)?);
    }
    Ok(Dataset {
        d: ps.dim(),
        n,
        samples,
        seed: None,
    })
}

/// Convenience wrapper that seeds its own stream and records the seed.
pub fn generate_dataset(
    ps: &PatternSet,
    n: usize,
    count: usize,
    balanced: bool,
    seed: u64,
    stream_id: u64,
) -> Result<Dataset> {
    let mut rng = rng::stream(seed, stream_id);
    let mut ds = sample_dataset(ps, n, count, balanced, &mut rng)?;
    ds.seed = Some(seed);
    Ok(ds)
}
