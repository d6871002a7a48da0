//! Datasets of variable-length feature sets: JSONL and FASTA-like readers,
//! padded batching, and a seeded synthetic motif generator.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{kmer_features, Alphabet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Multi(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Array2<f64>,
    pub label: Option<Label>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn class(&self) -> Option<usize> {
        match self.label {
            Some(Label::Class(c)) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TaskMode {
    #[default]
    Multiclass,
    Multilabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<FeatureSet>,
    pub num_classes: usize,
    pub mode: TaskMode,
    pub split: Option<Split>,
}

impl Dataset {
    pub fn new(samples: Vec<FeatureSet>, num_classes: usize, mode: TaskMode) -> Result<Self> {
        let ds = Self { samples, num_classes, mode, split: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (i, s) in self.samples.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::EmptySample { line: i + 1 });
            }
            if s.features.ncols() != d {
                return Err(Error::InconsistentDimension { line: i + 1, expected: d, found: s.features.ncols() });
            }
            let ok = match (&s.label, self.mode) {
                (None, _) => true,
                (Some(Label::Class(c)), TaskMode::Multiclass) => *c < self.num_classes,
                (Some(Label::Multi(ls)), TaskMode::Multilabel) => ls.iter().all(|&c| c < self.num_classes),
                _ => false,
            };
            if !ok {
                return Err(Error::InvalidParameter(format!(
                    "sample {i} has label {:?} outside {} classes ({:?})",
                    s.label, self.num_classes, self.mode
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Feature width `d` (0 for an empty dataset).
    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.ncols())
    }

    /// All feature rows stacked, in sample order.
    pub fn pooled_features(&self) -> Array2<f64> {
        let total: usize = self.samples.iter().map(FeatureSet::len).sum();
        let mut out = Array2::zeros((total, self.dim()));
        let mut row = 0;
        for s in &self.samples {
            out.slice_mut(s![row..row + s.len(), ..]).assign(&s.features);
            row += s.len();
        }
        out
    }

    pub fn classes(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.class().unwrap_or(0)).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    #[serde(default)]
    label: Option<Label>,
    features: Vec<Vec<f64>>,
}

/// Parses JSON-lines records `{"label": <int | [ints]>, "features": [[..], ..]}`.
///
/// `d` comes from the first record; the class count is the largest label + 1.
/// Integer labels make a multiclass dataset, array labels a multilabel one.
pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut samples = Vec::new();
    let mut d = None;
    let mut mode = None;
    let mut max_label = None::<usize>;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        if rec.features.is_empty() {
            return Err(Error::EmptySample { line: lineno });
        }
        let width = rec.features[0].len();
        let expected = *d.get_or_insert(width);
        if let Some(bad) = rec.features.iter().find(|r| r.len() != expected) {
            return Err(Error::InconsistentDimension { line: lineno, expected, found: bad.len() });
        }
        if expected == 0 {
            return Err(Error::EmptySample { line: lineno });
        }
        if let Some(label) = &rec.label {
            let this = match label {
                Label::Class(c) => {
                    max_label = max_label.max(Some(*c));
                    TaskMode::Multiclass
                }
                Label::Multi(ls) => {
                    max_label = max_label.max(ls.iter().copied().max());
                    TaskMode::Multilabel
                }
            };
            if *mode.get_or_insert(this) != this {
                return Err(Error::Parse { line: lineno, msg: "mixed integer and list labels".into() });
            }
        }
        let n = rec.features.len();
        let flat: Vec<f64> = rec.features.into_iter().flatten().collect();
        let features = Array2::from_shape_vec((n, expected), flat).expect("rows checked");
        samples.push(FeatureSet { features, label: rec.label });
    }
    Dataset::new(samples, max_label.map_or(0, |m| m + 1), mode.unwrap_or_default())
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_jsonl(BufReader::new(File::open(path)?))
}

pub fn write_jsonl_to<W: Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    for s in &dataset.samples {
        let rec = Record { label: s.label.clone(), features: s.features.outer_iter().map(|r| r.to_vec()).collect() };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_jsonl_to(dataset, BufWriter::new(File::create(path)?))
}

/// Parses `><label>` headers followed by sequence lines and turns each
/// sequence into k-mer features.
pub fn parse_sequences(text: &str, alphabet: &Alphabet, kmer_size: usize) -> Result<Dataset> {
    let mut records: Vec<(usize, usize, String)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(head) = line.strip_prefix('>') {
            let label = head
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::Parse { line: idx + 1, msg: format!("bad label {head:?}: {e}") })?;
            records.push((idx + 1, label, String::new()));
        } else {
            match records.last_mut() {
                Some(rec) => rec.2.push_str(line),
                None => return Err(Error::Parse { line: idx + 1, msg: "sequence before first header".into() }),
            }
        }
    }
    let mut samples = Vec::with_capacity(records.len());
    let mut max_label = 0;
    for (index, (_, label, seq)) in records.into_iter().enumerate() {
        let features = kmer_features(&seq, alphabet, kmer_size).map_err(|e| match e {
            Error::SequenceTooShort { len, kmer, .. } => Error::SequenceTooShort { index, len, kmer },
            other => other,
        })?;
        max_label = max_label.max(label);
        samples.push(FeatureSet { features, label: Some(Label::Class(label)) });
    }
    let classes = if samples.is_empty() { 0 } else { max_label + 1 };
    Dataset::new(samples, classes, TaskMode::Multiclass)
}

pub fn load_sequences(path: impl AsRef<Path>, alphabet_path: impl AsRef<Path>, kmer_size: usize) -> Result<Dataset> {
    let alphabet = Alphabet::parse(&std::fs::read_to_string(alphabet_path)?)?;
    parse_sequences(&std::fs::read_to_string(path)?, &alphabet, kmer_size)
}

/// Zero-padded `[B × n_max × d]` block with the valid length of each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub data: Array3<f64>,
    pub lengths: Vec<usize>,
    pub labels: Vec<Option<Label>>,
    /// Position of each sample in the source dataset.
    pub indices: Vec<usize>,
}

impl PaddedBatch {
    pub fn from_sets(sets: &[&FeatureSet], indices: Vec<usize>) -> Result<Self> {
        let Some(first) = sets.first() else {
            return Err(Error::EmptyDataset);
        };
        let d = first.features.ncols();
        let n_max = sets.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut data = Array3::zeros((sets.len(), n_max, d));
        for (b, s) in sets.iter().enumerate() {
            if s.features.ncols() != d {
                return Err(Error::DimensionMismatch("batch samples differ in width".into()));
            }
            data.slice_mut(s![b, ..s.len(), ..]).assign(&s.features);
        }
        Ok(Self {
            data,
            lengths: sets.iter().map(|s| s.len()).collect(),
            labels: sets.iter().map(|s| s.label.clone()).collect(),
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn n_max(&self) -> usize {
        self.data.dim().1
    }

    /// `mask[[b, i]] = 1` on valid rows, `0` on padding.
    pub fn mask(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), self.n_max()), |(b, i)| if i < self.lengths[b] { 1.0 } else { 0.0 })
    }

    pub fn trimmed(&self, b: usize) -> ArrayView2<'_, f64> {
        self.data.slice(s![b, ..self.lengths[b], ..])
    }
}

pub fn make_batches(dataset: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<PaddedBatch>> {
    if batch_size == 0 {
        return Err(Error::InvalidParameter("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|idx| {
            let sets: Vec<&FeatureSet> = idx.iter().map(|&i| &dataset.samples[i]).collect();
            PaddedBatch::from_sets(&sets, idx.to_vec())
        })
        .collect()
}

/// Parameters of the synthetic motif task.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub motifs_per_class: usize,
    pub motif_dim: usize,
    /// Inclusive range of motif occurrences per sample.
    pub motif_count_range: (usize, usize),
    /// Inclusive range of set lengths.
    pub set_length_range: (usize, usize),
    pub background_std: f64,
    pub motif_std: f64,
    /// Norm of every class motif.
    pub motif_radius: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            motifs_per_class: 3,
            motif_dim: 16,
            motif_count_range: (2, 5),
            set_length_range: (20, 100),
            background_std: 1.0,
            motif_std: 0.1,
            motif_radius: 5.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.classes == 0 {
            return bad("classes must be positive");
        }
        if self.motifs_per_class == 0 || self.motif_dim == 0 {
            return bad("motifs_per_class and motif_dim must be positive");
        }
        let (cmin, cmax) = self.motif_count_range;
        let (nmin, nmax) = self.set_length_range;
        if cmin == 0 || cmin > cmax {
            return bad("motif_count_range must satisfy 1 <= min <= max");
        }
        if nmin > nmax || nmin < cmax {
            return bad("set_length_range min must be >= motif count max and <= length max");
        }
        if !(self.background_std >= 0.0 && self.motif_std >= 0.0 && self.motif_radius > 0.0) {
            return bad("standard deviations must be nonnegative and radius positive");
        }
        Ok(())
    }
}

/// Generated splits plus the class motifs (`classes × motifs_per_class × d`).
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub motifs: Array3<f64>,
    /// For each sample of each split, the rows holding motif occurrences.
    pub motif_rows: [Vec<Vec<usize>>; 3],
}

pub fn generate_synthetic(spec: &SynthSpec, m_train: usize, m_val: usize, m_test: usize) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let d = spec.motif_dim;
    let mut motifs = Array3::zeros((spec.classes, spec.motifs_per_class, d));
    for c in 0..spec.classes {
        for m in 0..spec.motifs_per_class {
            let v: Vec<f64> = (0..d).map(|_| unit.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (j, x) in v.iter().enumerate() {
                motifs[[c, m, j]] = x / norm * spec.motif_radius;
            }
        }
    }
    let mut make = |m: usize, split: Split| -> Result<(Dataset, Vec<Vec<usize>>)> {
        let mut samples = Vec::with_capacity(m);
        let mut rows = Vec::with_capacity(m);
        for _ in 0..m {
            let c = rng.random_range(0..spec.classes);
            let n = rng.random_range(spec.set_length_range.0..=spec.set_length_range.1);
            let mut x = Array2::from_shape_fn((n, d), |_| spec.background_std * unit.sample(&mut rng));
            let count = rng.random_range(spec.motif_count_range.0..=spec.motif_count_range.1);
            let mut positions = sample(&mut rng, n, count).into_vec();
            positions.sort_unstable();
            for &pos in &positions {
                let which = rng.random_range(0..spec.motifs_per_class);
                for j in 0..d {
                    x[[pos, j]] = motifs[[c, which, j]] + spec.motif_std * unit.sample(&mut rng);
                }
            }
            samples.push(FeatureSet { features: x, label: Some(Label::Class(c)) });
            rows.push(positions);
        }
        Ok((Dataset::new(samples, spec.classes, TaskMode::Multiclass)?.with_split(split), rows))
    };
    let (train, r0) = make(m_train, Split::Train)?;
    let (val, r1) = make(m_val, Split::Val)?;
    let (test, r2) = make(m_test, Split::Test)?;
    Ok(SyntheticData { train, val, test, motifs, motif_rows: [r0, r1, r2] })
}
