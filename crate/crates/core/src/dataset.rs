//! Sparse datasets: LIBSVM text I/O, seeded train/test splits and synthetic
//! least-squares data with a prescribed second-moment spectrum.
//!
//! Indices are 1-based on the wire and 0-based in memory. Labels are kept as
//! raw floats; the loss is squared error, not classification.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparse feature vector with strictly increasing 0-based indices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseVec {
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseVec {
    /// Builds from `(index, value)` pairs, checking order and finiteness.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let mut out = SparseVec::default();
        for (idx, val) in pairs {
            if let Some(&last) = out.indices.last() {
                if idx <= last {
                    return Err(Error::InvalidArgument(format!(
                        "feature index {idx} not strictly increasing (previous {last})"
                    )));
                }
            }
            if !val.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite value at index {idx}")));
            }
            out.indices.push(idx);
            out.values.push(val);
        }
        Ok(out)
    }

    /// Dense vector to sparse, keeping every entry (zeros included).
    pub fn from_dense(values: &[f64]) -> Self {
        SparseVec { indices: (0..values.len()).collect(), values: values.to_vec() }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    /// One past the largest stored index (0 when empty).
    pub fn min_dim(&self) -> usize {
        self.indices.last().map_or(0, |&i| i + 1)
    }

    #[inline]
    pub fn dot(&self, w: &[f64]) -> f64 {
        self.indices.iter().zip(&self.values).map(|(&i, &v)| v * w[i]).sum()
    }

    /// `out += alpha * self`
    #[inline]
    pub fn axpy(&self, alpha: f64, out: &mut [f64]) {
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] += alpha * v;
        }
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        self.axpy(1.0, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: SparseVec,
    pub label: f64,
}

impl Sample {
    pub fn new(features: SparseVec, label: f64) -> Self {
        Sample { features, label }
    }

    /// Squared-error loss `0.5 (x^T w - y)^2`.
    #[inline]
    pub fn loss(&self, w: &[f64]) -> f64 {
        let r = self.features.dot(w) - self.label;
        0.5 * r * r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    dim: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    /// Validates that every feature index is below `dim`.
    pub fn new(name: impl Into<String>, dim: usize, samples: Vec<Sample>) -> Result<Self> {
        for (k, s) in samples.iter().enumerate() {
            if s.features.min_dim() > dim {
                return Err(Error::InvalidArgument(format!(
                    "sample {k} has feature index {} >= d = {dim}",
                    s.features.min_dim() - 1
                )));
            }
            if !s.label.is_finite() {
                return Err(Error::InvalidArgument(format!("sample {k} has non-finite label")));
            }
        }
        Ok(Dataset { name: name.into(), dim, samples })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> Result<&Sample> {
        self.samples.get(i).ok_or(Error::IndexOutOfRange { index: i, n: self.n() })
    }

    pub fn nnz(&self) -> usize {
        self.samples.iter().map(|s| s.features.nnz()).sum()
    }

    /// Copy of the dataset with sample `i` replaced (the neighbouring set `S^(i)`).
    pub fn with_replaced(&self, i: usize, replacement: Sample) -> Result<Dataset> {
        if i >= self.n() {
            return Err(Error::IndexOutOfRange { index: i, n: self.n() });
        }
        if replacement.features.min_dim() > self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: replacement.features.min_dim(),
            });
        }
        let mut samples = self.samples.clone();
        samples[i] = replacement;
        Ok(Dataset { name: self.name.clone(), dim: self.dim, samples })
    }

    /// Subset in the given index order.
    pub fn select(&self, name: impl Into<String>, idx: &[usize]) -> Dataset {
        Dataset {
            name: name.into(),
            dim: self.dim,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Mean squared-error loss over the samples (no regularization).
    pub fn mean_loss(&self, w: &[f64]) -> Result<f64> {
        if self.samples.is_empty() {
            return Err(Error::EmptyInput);
        }
        if w.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: w.len() });
        }
        let total: f64 = self.samples.iter().map(|s| s.loss(w)).sum();
        Ok(total / self.n() as f64)
    }
}

// ---------------------------------------------------------------------------
// LIBSVM text format

/// Parses LIBSVM text. `dim` overrides the inferred dimension (max index + 1);
/// an index beyond an explicit `dim` is an error.
pub fn parse_libsvm<R: BufRead>(reader: R, dim: Option<usize>) -> Result<Dataset> {
    let mut samples = Vec::new();
    let mut max_dim = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        let content = match line.find('#') {
            Some(pos) => &line[..pos],
            None => &line[..],
        };
        let mut tokens = content.split_whitespace();
        let Some(label_tok) = tokens.next() else {
            continue;
        };
        let label = parse_finite(label_tok)
            .ok_or_else(|| Error::Parse { line: lineno, msg: format!("bad label {label_tok:?}") })?;

        let mut indices = Vec::new();
        let mut values = Vec::new();
        for tok in tokens {
            let (idx_tok, val_tok) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("expected <index>:<value>, got {tok:?}"),
            })?;
            let idx: usize = idx_tok.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad feature index {idx_tok:?}"),
            })?;
            if idx < 1 {
                return Err(Error::Parse { line: lineno, msg: "feature index must be >= 1".into() });
            }
            if let Some(&prev) = indices.last() {
                if idx - 1 <= prev {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("feature index {idx} not strictly increasing"),
                    });
                }
            }
            if let Some(d) = dim {
                if idx > d {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("feature index {idx} exceeds dimension {d}"),
                    });
                }
            }
            let val = parse_finite(val_tok).ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("bad feature value {val_tok:?}"),
            })?;
            indices.push(idx - 1);
            values.push(val);
        }
        if let Some(&last) = indices.last() {
            max_dim = max_dim.max(last + 1);
        }
        samples.push(Sample { features: SparseVec { indices, values }, label });
    }

    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(Dataset { name: "libsvm".into(), dim: dim.unwrap_or(max_dim), samples })
}

fn parse_finite(tok: &str) -> Option<f64> {
    tok.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a LIBSVM file; the dataset is named after the file stem.
pub fn load_libsvm(path: impl AsRef<Path>, dim: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let mut ds = parse_libsvm(BufReader::new(file), dim)?;
    if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
        ds.name = stem.to_string();
    }
    Ok(ds)
}

/// Shortest round-trip decimal for every float, 1-based indices, `\n` endings.
pub fn serialize_libsvm(ds: &Dataset) -> String {
    let mut out = String::with_capacity(ds.nnz() * 12 + ds.n() * 4);
    for s in &ds.samples {
        write!(out, "{}", s.label).unwrap();
        for (i, v) in s.features.iter() {
            write!(out, " {}:{}", i + 1, v).unwrap();
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Train/test split

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_fraction: 0.8, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Seeded shuffle; the first `ceil(fraction * n)` (clamped to `[1, n-1]`)
/// indices go to train. Both halves keep the parent dimension.
pub fn split(ds: &Dataset, spec: SplitSpec) -> Result<Split> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let n = ds.n();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("split needs n >= 2, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    perm.shuffle(&mut rng);

    let n_train = ((spec.train_fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let test_indices = perm.split_off(n_train);
    let train_indices = perm;
    Ok(Split {
        train: ds.select(format!("{}-train", ds.name), &train_indices),
        test: ds.select(format!("{}-test", ds.name), &test_indices),
        train_indices,
        test_indices,
    })
}

// ---------------------------------------------------------------------------
// Synthetic least-squares data

/// Target spectrum of the population second-moment matrix `E[x x^T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpectrumSpec {
    /// `d` values evenly spaced from `max` down to `min`.
    Uniform { min: f64, max: f64 },
    /// `max * ratio^j`, `j = 0..d`.
    Geometric { max: f64, ratio: f64 },
    Explicit { values: Vec<f64> },
}

impl SpectrumSpec {
    pub fn eigenvalues(&self, d: usize) -> Result<Vec<f64>> {
        let vals = match self {
            SpectrumSpec::Uniform { min, max } => {
                if min > max {
                    return Err(Error::InvalidArgument(format!("uniform spectrum min {min} > max {max}")));
                }
                if d == 1 {
                    vec![*max]
                } else {
                    (0..d).map(|j| max - (max - min) * j as f64 / (d - 1) as f64).collect()
                }
            }
            SpectrumSpec::Geometric { max, ratio } => {
                if !(*ratio > 0.0 && *ratio <= 1.0) {
                    return Err(Error::InvalidArgument(format!("geometric ratio must lie in (0, 1], got {ratio}")));
                }
                (0..d).map(|j| max * ratio.powi(j as i32)).collect()
            }
            SpectrumSpec::Explicit { values } => {
                if values.len() != d {
                    return Err(Error::DimensionMismatch { expected: d, got: values.len() });
                }
                values.clone()
            }
        };
        if let Some(bad) = vals.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("spectrum value {bad} must be finite and >= 0")));
        }
        Ok(vals)
    }
}

/// A fixed synthetic distribution: `x = Q diag(sqrt(a)) g`, `y = x^T w* + noise`.
/// `Q` and `w*` depend only on `seed`; each `stream` gives independent draws
/// from the same distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub d: usize,
    pub spectrum: SpectrumSpec,
    pub noise_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticSource {
    spec: SyntheticSpec,
    /// `Q diag(sqrt(a))`
    mixing: DMatrix<f64>,
    w_star: Vec<f64>,
}

impl SyntheticSpec {
    pub fn source(&self) -> Result<SyntheticSource> {
        if self.d == 0 {
            return Err(Error::InvalidArgument("d must be >= 1".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        let d = self.d;
        let eig = self.spectrum.eigenvalues(d)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);

        let gauss = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
        let qr = gauss.qr();
        let r = qr.r();
        let mut q = qr.q();
        for j in 0..d {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let mut mixing = q;
        for (j, a) in eig.iter().enumerate() {
            mixing.column_mut(j).scale_mut(a.sqrt());
        }

        let mut w_star: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = w_star.iter().map(|v| v * v).sum::<f64>().sqrt();
        w_star.iter_mut().for_each(|v| *v /= norm);

        Ok(SyntheticSource { spec: self.clone(), mixing, w_star })
    }
}

impl SyntheticSource {
    pub fn w_star(&self) -> &[f64] {
        &self.w_star
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    /// `n` i.i.d. samples from stream `stream`.
    pub fn draw(&self, n: usize, stream: u64) -> Dataset {
        let d = self.spec.d;
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(stream.wrapping_add(1));
        let mut samples = Vec::with_capacity(n);
        let mut g = vec![0.0; d];
        for _ in 0..n {
            g.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            let x: Vec<f64> = (0..d)
                .map(|r| (0..d).map(|c| self.mixing[(r, c)] * g[c]).sum())
                .collect();
            let clean: f64 = x.iter().zip(&self.w_star).map(|(a, b)| a * b).sum();
            let eps: f64 = StandardNormal.sample(&mut rng);
            let label = clean + self.spec.noise_std * eps;
            samples.push(Sample { features: SparseVec::from_dense(&x), label });
        }
        Dataset { name: format!("synthetic-d{d}-s{}", self.spec.seed), dim: d, samples }
    }
}

/// `n` samples from a fresh synthetic distribution (stream 0).
pub fn synth_quadratic(
    d: usize,
    n: usize,
    spectrum: &SpectrumSpec,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    let spec = SyntheticSpec { d, spectrum: spectrum.clone(), noise_std, seed };
    Ok(spec.source()?.draw(n, 0))
}
