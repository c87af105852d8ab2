//! Datasets of labeled examples: loading, normalization, random projection,
//! permutation sampling and train/test splitting.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, Stream};

/// A feature vector with a label in {-1, +1}.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    x: Vec<f64>,
    y: f64,
}

impl Example {
    pub fn new(x: Vec<f64>, y: f64) -> Result<Self> {
        if y != 1.0 && y != -1.0 {
            return Err(Error::Labels(format!("label {y} is not -1 or +1")));
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::param("x", format!("non-finite feature value {v}")));
        }
        Ok(Example { x, y })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.x)
    }

    /// Same features, opposite label.
    pub fn flipped(&self) -> Example {
        Example {
            x: self.x.clone(),
            y: -self.y,
        }
    }

    /// Scales `x` down to the unit ball, leaving it unchanged when `‖x‖ ≤ 1`.
    pub fn normalized(&self) -> Example {
        let mut x = self.x.clone();
        let n = linalg::norm(&x);
        if n > 1.0 {
            linalg::scale(1.0 / n, &mut x);
            // Rounding can leave the norm a few ulps above one; shrink until it
            // is not, so that normalizing again is a no-op.
            while linalg::norm(&x) > 1.0 {
                linalg::scale(1.0 - f64::EPSILON, &mut x);
            }
        }
        Example { x, y: self.y }
    }
}

/// An ordered, non-empty sequence of examples sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    dim: usize,
    max_norm: f64,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::param("examples", "dataset must contain at least one example"))?;
        let dim = first.dim();
        if let Some((i, ex)) = examples.iter().enumerate().find(|(_, e)| e.dim() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                found: ex.dim(),
                context: Some(format!("example {i}")),
            });
        }
        Ok(Dataset::from_parts(examples, dim))
    }

    fn from_parts(examples: Vec<Example>, dim: usize) -> Self {
        let max_norm = examples.iter().map(Example::norm).fold(0.0, f64::max);
        Dataset { examples, dim, max_norm }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn get(&self, i: usize) -> &Example {
        &self.examples[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    /// Largest feature norm in the dataset (computed once at construction).
    pub fn max_norm(&self) -> f64 {
        self.max_norm
    }

    /// A neighboring dataset: row `i` replaced by `replacement`.
    pub fn with_replaced(&self, i: usize, replacement: Example) -> Result<Dataset> {
        if i >= self.len() {
            return Err(Error::param("index", format!("{i} out of range for m = {}", self.len())));
        }
        if replacement.dim() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: replacement.dim(),
                context: Some("replacement example".into()),
            });
        }
        let mut examples = self.examples.clone();
        examples[i] = replacement;
        Ok(Dataset::from_parts(examples, self.dim))
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(indices.iter().map(|&i| self.examples[i].clone()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Svmlight,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(DataFormat::Csv),
            "svmlight" | "libsvm" => Ok(DataFormat::Svmlight),
            other => Err(Error::param("format", format!("unknown data format `{other}`"))),
        }
    }
}

/// Reads a labeled dataset. `dim` fixes the feature dimension for svmlight
/// input; when `None` it is inferred as the largest index seen.
pub fn load_dataset(path: &Path, format: DataFormat, dim: Option<usize>) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    match format {
        DataFormat::Csv => parse_csv(&text, path),
        DataFormat::Svmlight => parse_svmlight(&text, dim, path),
    }
}

fn parse_error(path: &Path, line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message: message.into(),
    }
}

/// CSV without a header: label first, then features.
pub fn parse_csv(text: &str, path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dim = None;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let mut fields = record.iter();
        let label = fields.next().unwrap_or_default();
        labels.push(
            label
                .parse::<f64>()
                .map_err(|e| parse_error(path, line, 1, format!("bad label `{label}`: {e}")))?,
        );
        let x = fields
            .enumerate()
            .map(|(j, f)| {
                f.parse::<f64>()
                    .map_err(|e| parse_error(path, line, j + 2, format!("bad value `{f}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        match dim {
            None => dim = Some(x.len()),
            Some(d) if d != x.len() => {
                return Err(Error::Dimension {
                    expected: d,
                    found: x.len(),
                    context: Some(format!("{}: line {line}", path.display())),
                })
            }
            _ => {}
        }
        rows.push(x);
    }
    assemble(rows, &labels)
}

/// Writes `ds` in the layout read by [`parse_csv`], using the shortest
/// representation that parses back to the same `f64`.
pub fn write_csv<W: std::io::Write>(ds: &Dataset, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    for ex in ds.iter() {
        let mut rec = Vec::with_capacity(ex.dim() + 1);
        rec.push(ex.y().to_string());
        rec.extend(ex.x().iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// SVMLight / LIBSVM text: `label idx:val ...` with 1-based indices.
pub fn parse_svmlight(text: &str, dim: Option<usize>, path: &Path) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut sparse: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut max_index = 0;
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let content = raw.split('#').next().unwrap_or_default().trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label = tokens.next().unwrap_or_default();
        labels.push(
            label
                .parse::<f64>()
                .map_err(|e| parse_error(path, line, 1, format!("bad label `{label}`: {e}")))?,
        );
        let mut entries = Vec::new();
        for (j, tok) in tokens.enumerate() {
            let column = j + 2;
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| parse_error(path, line, column, format!("expected idx:val, got `{tok}`")))?;
            let idx: usize = idx
                .parse()
                .map_err(|e| parse_error(path, line, column, format!("bad index `{idx}`: {e}")))?;
            if idx == 0 {
                return Err(parse_error(path, line, column, "indices are 1-based"));
            }
            let val: f64 = val
                .parse()
                .map_err(|e| parse_error(path, line, column, format!("bad value `{val}`: {e}")))?;
            if let Some(d) = dim {
                if idx > d {
                    return Err(Error::Dimension {
                        expected: d,
                        found: idx,
                        context: Some(format!("{}: line {line}", path.display())),
                    });
                }
            }
            max_index = max_index.max(idx);
            entries.push((idx - 1, val));
        }
        sparse.push(entries);
    }
    let d = dim.unwrap_or(max_index);
    let rows = sparse
        .into_iter()
        .map(|entries| {
            let mut x = vec![0.0; d];
            for (i, v) in entries {
                x[i] = v;
            }
            x
        })
        .collect();
    assemble(rows, &labels)
}

fn assemble(rows: Vec<Vec<f64>>, raw_labels: &[f64]) -> Result<Dataset> {
    let labels = map_labels(raw_labels)?;
    let examples = rows
        .into_iter()
        .zip(labels)
        .map(|(x, y)| Example::new(x, y))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(examples)
}

/// Maps raw labels onto {-1, +1}. Labels already in that set are kept;
/// otherwise exactly two distinct values are required and the smaller maps to -1.
pub fn map_labels(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.iter().all(|&y| y == 1.0 || y == -1.0) {
        return Ok(raw.to_vec());
    }
    if let Some(y) = raw.iter().find(|y| !y.is_finite()) {
        return Err(Error::Labels(format!("non-finite label {y}")));
    }
    let distinct: BTreeSet<u64> = raw.iter().map(|y| ordered_bits(*y)).collect();
    if distinct.len() != 2 {
        return Err(Error::Labels(format!(
            "found {} distinct label values; binary data required",
            distinct.len()
        )));
    }
    let low = raw.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(raw.iter().map(|&y| if y == low { -1.0 } else { 1.0 }).collect())
}

fn ordered_bits(y: f64) -> u64 {
    // +0 and -0 compare equal as labels
    if y == 0.0 {
        0
    } else {
        y.to_bits()
    }
}

/// Replaces each `x` by `x / max(1, ‖x‖)`.
pub fn normalize(ds: &Dataset) -> Dataset {
    Dataset::from_parts(ds.examples.iter().map(Example::normalized).collect(), ds.dim)
}

/// Dense `d_target × d` Gaussian matrix with entry variance `1/d_target`, row-major.
pub fn projection_matrix(d: usize, d_target: usize, seed: u64) -> Result<Vec<f64>> {
    if d_target < 1 {
        return Err(Error::param("d_target", "must be at least 1"));
    }
    let normal = Normal::new(0.0, (1.0 / d_target as f64).sqrt())
        .map_err(|e| Error::param("d_target", e.to_string()))?;
    let mut rng = rng::seeded(seed, Stream::Projection);
    Ok((0..d * d_target).map(|_| normal.sample(&mut rng)).collect())
}

/// Projects every row through the same seeded Gaussian matrix, without renormalizing.
pub fn project_rows(ds: &Dataset, d_target: usize, seed: u64) -> Result<Dataset> {
    let d = ds.dim();
    let t = projection_matrix(d, d_target, seed)?;
    let examples = ds
        .iter()
        .map(|ex| Example {
            x: t.chunks_exact(d).map(|row| linalg::dot(row, ex.x())).collect(),
            y: ex.y(),
        })
        .collect();
    Ok(Dataset::from_parts(examples, d_target))
}

/// Random Gaussian projection to `d_target` dimensions followed by [`normalize`].
pub fn random_projection(ds: &Dataset, d_target: usize, seed: u64) -> Result<Dataset> {
    Ok(normalize(&project_rows(ds, d_target, seed)?))
}

/// A bijection on `0..m`, stored as the visiting order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    mapping: Vec<usize>,
    seed: u64,
}

impl Permutation {
    pub fn identity(m: usize) -> Self {
        Permutation {
            mapping: (0..m).collect(),
            seed: 0,
        }
    }

    /// Fisher–Yates shuffle driven by `rng`.
    pub fn from_rng<R: Rng + ?Sized>(m: usize, seed: u64, rng: &mut R) -> Result<Self> {
        if m == 0 {
            return Err(Error::param("m", "cannot permute an empty index set"));
        }
        let mut mapping: Vec<usize> = (0..m).collect();
        mapping.shuffle(rng);
        Ok(Permutation { mapping, seed })
    }

    pub fn from_mapping(mapping: Vec<usize>) -> Result<Self> {
        let mut sorted = mapping.clone();
        sorted.sort_unstable();
        if sorted.iter().enumerate().any(|(i, &v)| i != v) || mapping.is_empty() {
            return Err(Error::param("mapping", "not a bijection on 0..m"));
        }
        Ok(Permutation { mapping, seed: 0 })
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }
}

pub fn sample_permutation(m: usize, seed: u64) -> Result<Permutation> {
    let mut rng = rng::seeded(seed, Stream::Permutation);
    Permutation::from_rng(m, seed, &mut rng)
}

/// Seeded shuffle, then the first `⌈m(1−f)⌉` rows train and the rest test.
pub fn train_test_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::param("test_fraction", format!("{test_fraction} not in (0, 1)")));
    }
    let m = ds.len();
    let n_train = (m as f64 * (1.0 - test_fraction)).ceil() as usize;
    if n_train == 0 || n_train >= m {
        return Err(Error::param(
            "test_fraction",
            format!("split of m = {m} at {test_fraction} leaves an empty part"),
        ));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng::seeded(seed, Stream::Split));
    Ok((ds.subset(&order[..n_train])?, ds.subset(&order[n_train..])?))
}
