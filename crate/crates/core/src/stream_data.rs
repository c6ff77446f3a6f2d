//! Embedding datasets, the EMBD container, synthetic clusters and the
//! class-incremental stream schedule.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, SeededRng};
use crate::scalar::Scalar;

pub const EMBD_MAGIC: &[u8; 4] = b"EMBD";
pub const EMBD_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub vector: Vec<T>,
    pub label: usize,
}

/// Labelled embeddings; immutable once validated.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset<T> {
    name: String,
    embed_dim: usize,
    n_classes: usize,
    examples: Vec<Example<T>>,
}

impl<T: Scalar> EmbeddingDataset<T> {
    pub fn new(
        name: impl Into<String>,
        embed_dim: usize,
        n_classes: usize,
        examples: Vec<Example<T>>,
    ) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::InvalidConfig("embed_dim must be positive".into()));
        }
        if n_classes == 0 {
            return Err(Error::InvalidConfig("n_classes must be positive".into()));
        }
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut seen = vec![false; n_classes];
        for (i, ex) in examples.iter().enumerate() {
            if ex.vector.len() != embed_dim {
                return Err(Error::DimensionMismatch {
                    expected: embed_dim,
                    found: ex.vector.len(),
                });
            }
            if ex.label >= n_classes {
                return Err(Error::LabelOutOfRange {
                    label: ex.label,
                    n_classes,
                });
            }
            if ex.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteRecord(i as u64));
            }
            seen[ex.label] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::MissingClass(missing));
        }
        Ok(Self {
            name: name.into(),
            embed_dim,
            n_classes,
            examples,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn examples(&self) -> &[Example<T>] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Example counts per label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }

    /// Indices of the examples whose label is in `classes`, in dataset order.
    pub fn indices_of(&self, classes: &[usize]) -> Vec<usize> {
        let mut member = vec![false; self.n_classes];
        for &c in classes {
            if c < self.n_classes {
                member[c] = true;
            }
        }
        (0..self.examples.len())
            .filter(|&i| member[self.examples[i].label])
            .collect()
    }
}

/// Serializes to EMBD bytes; values are narrowed to `f32`.
pub fn encode_embd<T: Scalar>(ds: &EmbeddingDataset<T>) -> Result<Vec<u8>> {
    if ds.examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = u32::try_from(ds.embed_dim)
        .map_err(|_| Error::InvalidConfig("embed_dim exceeds u32".into()))?;
    let classes = u32::try_from(ds.n_classes)
        .map_err(|_| Error::InvalidConfig("n_classes exceeds u32".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + ds.examples.len() * (4 + 4 * ds.embed_dim));
    out.extend_from_slice(EMBD_MAGIC);
    out.extend_from_slice(&EMBD_VERSION.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&classes.to_le_bytes());
    out.extend_from_slice(&(ds.examples.len() as u64).to_le_bytes());
    for ex in &ds.examples {
        out.extend_from_slice(&(ex.label as u32).to_le_bytes());
        for v in &ex.vector {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const W: usize>(&mut self) -> Result<[u8; W]> {
        let end = self.pos.checked_add(W).ok_or(Error::UnexpectedEnd)?;
        let chunk = self.bytes.get(self.pos..end).ok_or(Error::UnexpectedEnd)?;
        self.pos = end;
        Ok(chunk.try_into().expect("slice has length W"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.take::<8>().map(u64::from_le_bytes)
    }

    fn f32(&mut self) -> Result<f32> {
        self.take::<4>().map(f32::from_le_bytes)
    }
}

/// Parses EMBD bytes, widening the stored `f32` values.
pub fn decode_embd<T: Scalar>(bytes: &[u8], name: &str) -> Result<EmbeddingDataset<T>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if &cur.take::<4>()? != EMBD_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = cur.u32()?;
    if version != EMBD_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = cur.u32()? as usize;
    let n_classes = cur.u32()? as usize;
    let count = cur.u64()?;
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    if dim == 0 {
        return Err(Error::InvalidConfig("embed_dim must be positive".into()));
    }
    let record = 4 + 4 * dim as u64;
    let available = (bytes.len() - cur.pos) as u64;
    if count
        .checked_mul(record)
        .is_none_or(|need| need > available)
    {
        return Err(Error::UnexpectedEnd);
    }
    let mut examples = Vec::with_capacity(count as usize);
    for i in 0..count {
        let label = cur.u32()? as usize;
        if label >= n_classes {
            return Err(Error::LabelOutOfRange { label, n_classes });
        }
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            let v = cur.f32()?;
            if !v.is_finite() {
                return Err(Error::NonFiniteRecord(i));
            }
            vector.push(T::of(v as f64));
        }
        examples.push(Example { vector, label });
    }
    if cur.pos != bytes.len() {
        return Err(Error::TrailingData(count));
    }
    EmbeddingDataset::new(name, dim, n_classes, examples)
}

pub fn save_embeddings<T: Scalar>(ds: &EmbeddingDataset<T>, path: &Path) -> Result<()> {
    let bytes = encode_embd(ds)?;
    let mut file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::file(path, e))?;
    Ok(())
}

/// Loads an EMBD file, or a CSV file when the extension is `csv`.
pub fn load_embeddings<T: Scalar>(path: &Path) -> Result<EmbeddingDataset<T>> {
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset");
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        read_csv(bytes.as_slice(), name)
    } else {
        decode_embd(&bytes, name)
    }
}

/// CSV with header `label,f0,f1,...`; `K` is one past the largest label.
pub fn read_csv<T: Scalar, R: std::io::Read>(reader: R, name: &str) -> Result<EmbeddingDataset<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .clone();
    if headers.get(0).map(str::trim) != Some("label") || headers.len() < 2 {
        return Err(Error::Csv("header must be label,f0,f1,...".into()));
    }
    let dim = headers.len() - 1;
    let mut examples = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { len, .. } => Error::DimensionMismatch {
                expected: dim,
                found: (*len as usize).saturating_sub(1),
            },
            _ => Error::Csv(e.to_string()),
        })?;
        let label: usize = row[0]
            .trim()
            .parse()
            .map_err(|_| Error::Csv(format!("row {i}: bad label {:?}", &row[0])))?;
        let mut vector = Vec::with_capacity(dim);
        for field in row.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Csv(format!("row {i}: bad value {field:?}")))?;
            if !v.is_finite() {
                return Err(Error::NonFiniteRecord(i as u64));
            }
            vector.push(T::of(v));
        }
        examples.push(Example { vector, label });
    }
    let n_classes = examples
        .iter()
        .map(|e| e.label + 1)
        .max()
        .ok_or(Error::EmptyDataset)?;
    EmbeddingDataset::new(name, dim, n_classes, examples)
}

/// Isotropic Gaussian clusters around random centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub embed_dim: usize,
    pub per_class: usize,
    pub center_norm: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            embed_dim: 64,
            per_class: 600,
            center_norm: 1.0,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.n_classes == 0 || self.embed_dim == 0 || self.per_class == 0 {
            return bad("synthetic n_classes, embed_dim and per_class must be positive");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("synthetic noise_std must be finite and non-negative");
        }
        if !(self.center_norm > 0.0 && self.center_norm.is_finite()) {
            return bad("synthetic center_norm must be positive");
        }
        Ok(())
    }
}

/// Cluster centers and a sampler for fresh examples around them.
pub struct ClusterSampler<T> {
    spec: SyntheticSpec,
    centers: Vec<Vec<T>>,
    rng: SeededRng,
}

impl<T: Scalar> ClusterSampler<T> {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeededRng::new(spec.seed);
        let mut centers = Vec::with_capacity(spec.n_classes);
        for _ in 0..spec.n_classes {
            let raw: Vec<T> = (0..spec.embed_dim).map(|_| rng.standard_normal()).collect();
            let unit = l2_normalize(&raw)?;
            centers.push(unit.iter().map(|&v| v * T::of(spec.center_norm)).collect());
        }
        Ok(Self {
            spec: spec.clone(),
            centers,
            rng,
        })
    }

    pub fn centers(&self) -> &[Vec<T>] {
        &self.centers
    }

    /// `per_class` examples of every class, grouped by label.
    pub fn sample(&mut self, per_class: usize, name: &str) -> Result<EmbeddingDataset<T>> {
        let noise = T::of(self.spec.noise_std);
        let mut examples = Vec::with_capacity(per_class * self.spec.n_classes);
        for (label, center) in self.centers.iter().enumerate() {
            for _ in 0..per_class {
                let vector = center
                    .iter()
                    .map(|&c| c + noise * self.rng.standard_normal::<T>())
                    .collect();
                examples.push(Example { vector, label });
            }
        }
        EmbeddingDataset::new(name, self.spec.embed_dim, self.spec.n_classes, examples)
    }
}

pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<EmbeddingDataset<T>> {
    ClusterSampler::new(spec)?.sample(spec.per_class, "synthetic")
}

/// Training set as [`generate_synthetic`], then `test_per_class` held-out
/// examples per class around the same centers.
pub fn generate_synthetic_split<T: Scalar>(
    spec: &SyntheticSpec,
    test_per_class: usize,
) -> Result<(EmbeddingDataset<T>, EmbeddingDataset<T>)> {
    if test_per_class == 0 {
        return Err(Error::InvalidConfig(
            "test_per_class must be positive".into(),
        ));
    }
    let mut sampler = ClusterSampler::new(spec)?;
    let train = sampler.sample(spec.per_class, "synthetic-train")?;
    let test = sampler.sample(test_per_class, "synthetic-test")?;
    Ok((train, test))
}

/// Ordered class groups presented one after another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamPlan {
    pub splits: Vec<Vec<usize>>,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

impl StreamPlan {
    /// `n_splits` contiguous blocks of `order`; earlier blocks take the remainder.
    pub fn from_order(
        order: &[usize],
        n_splits: usize,
        batch_size: usize,
        shuffle_seed: u64,
    ) -> Result<Self> {
        if n_splits == 0 || n_splits > order.len() {
            return Err(Error::InvalidConfig(format!(
                "n_splits must lie in 1..={}, got {n_splits}",
                order.len()
            )));
        }
        let base = order.len() / n_splits;
        let extra = order.len() % n_splits;
        let mut splits = Vec::with_capacity(n_splits);
        let mut start = 0;
        for s in 0..n_splits {
            let len = base + usize::from(s < extra);
            splits.push(order[start..start + len].to_vec());
            start += len;
        }
        Ok(Self {
            splits,
            batch_size,
            shuffle_seed,
        })
    }

    /// Labels `0..n_classes` in ascending order.
    pub fn contiguous(
        n_classes: usize,
        n_splits: usize,
        batch_size: usize,
        shuffle_seed: u64,
    ) -> Result<Self> {
        let order: Vec<usize> = (0..n_classes).collect();
        Self::from_order(&order, n_splits, batch_size, shuffle_seed)
    }

    pub fn n_splits(&self) -> usize {
        self.splits.len()
    }

    pub fn validate<T: Scalar>(&self, ds: &EmbeddingDataset<T>) -> Result<()> {
        let mismatch = |msg: String| Err(Error::PlanMismatch(msg));
        if self.batch_size == 0 {
            return mismatch("batch_size must be positive".into());
        }
        if self.splits.is_empty() {
            return mismatch("no splits".into());
        }
        let mut owner = vec![None; ds.n_classes()];
        for (s, split) in self.splits.iter().enumerate() {
            if split.is_empty() {
                return mismatch(format!("split {s} is empty"));
            }
            for &c in split {
                if c >= ds.n_classes() {
                    return mismatch(format!(
                        "split {s} names class {c} but the dataset has {}",
                        ds.n_classes()
                    ));
                }
                if let Some(prev) = owner[c].replace(s) {
                    return mismatch(format!("class {c} appears in splits {prev} and {s}"));
                }
            }
        }
        for (c, &count) in ds.class_counts().iter().enumerate() {
            if count > 0 && owner[c].is_none() {
                return mismatch(format!("class {c} is in the dataset but in no split"));
            }
        }
        Ok(())
    }
}

/// One split's worth of the stream: batches of dataset indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub classes: Vec<usize>,
    pub batches: Vec<Vec<usize>>,
}

impl Experience {
    pub fn n_examples(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }
}

/// Single pass over `ds`: each split's examples shuffled and chunked.
pub fn make_stream<T: Scalar>(
    ds: &EmbeddingDataset<T>,
    plan: &StreamPlan,
) -> Result<Vec<Experience>> {
    plan.validate(ds)?;
    let mut rng = SeededRng::new(plan.shuffle_seed);
    Ok(plan
        .splits
        .iter()
        .map(|classes| {
            let mut idx = ds.indices_of(classes);
            rng.shuffle(&mut idx);
            Experience {
                classes: classes.clone(),
                batches: idx.chunks(plan.batch_size).map(<[usize]>::to_vec).collect(),
            }
        })
        .collect())
}
