//! GZSL datasets: representation, on-disk format, split validation,
//! negative sampling and the synthetic Gaussian-cluster benchmark.
//!
//! On disk a dataset is a JSON manifest naming four payload files, with paths
//! relative to the manifest:
//!
//! * `features`, `attributes`: binary matrices (`GDANMAT1`, `u64` rows,
//!   `u64` cols, row-major little-endian `f64`),
//! * `labels`: one class id per line,
//! * `splits`: JSON with the class lists and the four row-index lists.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MATRIX_MAGIC: &[u8; 8] = b"GDANMAT1";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_seen_idx: Vec<usize>,
    pub test_unseen_idx: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GzslDataset {
    pub name: String,
    /// `N × D`.
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// `C × A`; row `y` is the embedding of class `y`.
    pub attributes: Matrix,
    pub splits: Splits,
}

/// One broken dataset invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    RowCount { features: usize, labels: usize },
    NonFiniteFeatures,
    NonFiniteAttributes,
    MissingAttributeRow { class: usize, used_by: String },
    SeenUnseenOverlap { class: usize },
    DuplicateClass { class: usize, list: &'static str },
    IndexOutOfRange { row: usize, split: &'static str },
    DuplicateIndex { row: usize, split: &'static str },
    IndexOverlap { row: usize, first: &'static str, second: &'static str },
    WrongLabelSpace { row: usize, split: &'static str, label: usize, expected: &'static str },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RowCount { features, labels } => {
                write!(f, "row count: {features} feature rows but {labels} labels")
            }
            Violation::NonFiniteFeatures => write!(f, "finiteness: features contain NaN or Inf"),
            Violation::NonFiniteAttributes => write!(f, "finiteness: attributes contain NaN or Inf"),
            Violation::MissingAttributeRow { class, used_by } => {
                write!(f, "missing attribute row for class {class} (used by {used_by})")
            }
            Violation::SeenUnseenOverlap { class } => {
                write!(f, "disjointness: class {class} is both seen and unseen")
            }
            Violation::DuplicateClass { class, list } => write!(f, "class {class} listed twice in {list}"),
            Violation::IndexOutOfRange { row, split } => write!(f, "{split} index {row} is out of range"),
            Violation::DuplicateIndex { row, split } => write!(f, "{split} lists row {row} twice"),
            Violation::IndexOverlap { row, first, second } => {
                write!(f, "disjointness: row {row} is in both {first} and {second}")
            }
            Violation::WrongLabelSpace {
                row,
                split,
                label,
                expected,
            } => write!(f, "label space: {split} row {row} has class {label}, which is not {expected}"),
        }
    }
}

/// Every invariant breach of `ds`, without stopping at the first one.
pub fn validate_splits(ds: &GzslDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = ds.features.rows();
    let c = ds.attributes.rows();
    let sp = &ds.splits;

    if ds.labels.len() != n {
        out.push(Violation::RowCount {
            features: n,
            labels: ds.labels.len(),
        });
    }
    if !ds.features.is_finite() {
        out.push(Violation::NonFiniteFeatures);
    }
    if !ds.attributes.is_finite() {
        out.push(Violation::NonFiniteAttributes);
    }

    for (list, name) in [(&sp.seen_classes, "seen_classes"), (&sp.unseen_classes, "unseen_classes")] {
        let mut set = BTreeSet::new();
        for &class in list {
            if !set.insert(class) {
                out.push(Violation::DuplicateClass { class, list: name });
            }
            if class >= c {
                out.push(Violation::MissingAttributeRow {
                    class,
                    used_by: name.into(),
                });
            }
        }
    }
    let seen: BTreeSet<usize> = sp.seen_classes.iter().copied().collect();
    let unseen: BTreeSet<usize> = sp.unseen_classes.iter().copied().collect();
    for &class in seen.intersection(&unseen) {
        out.push(Violation::SeenUnseenOverlap { class });
    }

    let mut missing_reported = BTreeSet::new();
    for (row, &label) in ds.labels.iter().enumerate() {
        if label >= c && missing_reported.insert(label) {
            out.push(Violation::MissingAttributeRow {
                class: label,
                used_by: format!("label of row {row}"),
            });
        }
    }

    let lists: [(&Vec<usize>, &'static str, &BTreeSet<usize>, &'static str); 4] = [
        (&sp.train_idx, "train_idx", &seen, "seen"),
        (&sp.val_idx, "val_idx", &seen, "seen"),
        (&sp.test_seen_idx, "test_seen_idx", &seen, "seen"),
        (&sp.test_unseen_idx, "test_unseen_idx", &unseen, "unseen"),
    ];
    let mut owner: Vec<Option<&'static str>> = vec![None; n];
    for (idx, split, allowed, expected) in lists {
        let mut local = BTreeSet::new();
        for &row in idx {
            if row >= n {
                out.push(Violation::IndexOutOfRange { row, split });
                continue;
            }
            if !local.insert(row) {
                out.push(Violation::DuplicateIndex { row, split });
                continue;
            }
            match owner[row] {
                Some(first) => out.push(Violation::IndexOverlap {
                    row,
                    first,
                    second: split,
                }),
                None => owner[row] = Some(split),
            }
            if let Some(&label) = ds.labels.get(row) {
                if !allowed.contains(&label) {
                    out.push(Violation::WrongLabelSpace {
                        row,
                        split,
                        label,
                        expected,
                    });
                }
            }
        }
    }
    out
}

impl GzslDataset {
    /// Checks every invariant, failing with all violations listed.
    pub fn validate(&self) -> Result<()> {
        let v = validate_splits(self);
        if v.is_empty() {
            return Ok(());
        }
        let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
        Err(Error::Validation(format!("dataset {:?}: {}", self.name, msgs.join("; "))))
    }

    pub fn n_rows(&self) -> usize {
        self.features.rows()
    }

    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn attr_dim(&self) -> usize {
        self.attributes.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.attributes.rows()
    }

    /// Rows available for training: `train_idx`, plus `val_idx` when merged.
    pub fn training_idx(&self, merge_val: bool) -> Vec<usize> {
        let mut idx = self.splits.train_idx.clone();
        if merge_val {
            idx.extend_from_slice(&self.splits.val_idx);
        }
        idx
    }

    /// Seen classes with rows in `val_idx` but none in `train_idx`; they act
    /// as unseen classes during validation.
    pub fn val_unseen_classes(&self) -> Vec<usize> {
        let in_train: BTreeSet<usize> = self.splits.train_idx.iter().map(|&i| self.labels[i]).collect();
        let in_val: BTreeSet<usize> = self.splits.val_idx.iter().map(|&i| self.labels[i]).collect();
        in_val.difference(&in_train).copied().collect()
    }

    pub fn rows(&self, idx: &[usize]) -> Result<(Matrix, Vec<usize>)> {
        let feats = self.features.select_rows(idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((feats, labels))
    }

    /// Embedding rows for `classes`, in order.
    pub fn class_embeddings(&self, classes: &[usize]) -> Result<Matrix> {
        if let Some(&bad) = classes.iter().find(|&&c| c >= self.n_classes()) {
            return Err(Error::Validation(format!("missing attribute row for class {bad}")));
        }
        self.attributes.select_rows(classes)
    }

    /// Per-dimension standardization with statistics of the training rows
    /// (`train_idx ∪ val_idx`). Constant dimensions are only centered.
    pub fn standardized(&self) -> Result<GzslDataset> {
        let (train, _) = self.rows(&self.training_idx(true))?;
        let mean = train.column_means();
        let n = train.rows().max(1) as f64;
        let mut std = vec![0.0; train.cols()];
        for row in train.iter_rows() {
            for (s, (x, m)) in std.iter_mut().zip(row.iter().zip(&mean)) {
                *s += (x - m) * (x - m);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        let mut out = self.clone();
        for r in 0..out.features.rows() {
            for (j, x) in out.features.row_mut(r).iter_mut().enumerate() {
                *x = (*x - mean[j]) / std[j];
            }
        }
        Ok(out)
    }
}

/// `y⁻ ∈ seen \ {y}`, uniform over the eligible classes.
pub fn negative_sample<R: Rng + ?Sized>(y: usize, seen: &[usize], rng: &mut R) -> Result<usize> {
    let pos = seen
        .iter()
        .position(|&c| c == y)
        .ok_or_else(|| Error::Precondition(format!("class {y} is not a seen class")))?;
    if seen.len() < 2 {
        return Err(Error::Precondition(format!(
            "negative sampling needs at least 2 seen classes, got {}",
            seen.len()
        )));
    }
    let k = rng.random_range(0..seen.len() - 1);
    Ok(seen[if k >= pos { k + 1 } else { k }])
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        w.write_all(MATRIX_MAGIC)?;
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
        for x in m.as_slice() {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |detail: String| Error::Corrupt {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 24 || &bytes[..8] != MATRIX_MAGIC {
        return Err(corrupt("missing matrix header".into()));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| corrupt(format!("implausible shape {rows}×{cols}")))?;
    let body = &bytes[24..];
    if body.len() != expected {
        return Err(corrupt(format!(
            "{rows}×{cols} matrix needs {expected} payload bytes, found {}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        for l in labels {
            writeln!(w, "{l}")?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(t.parse().map_err(|_| Error::Corrupt {
            path: path.to_path_buf(),
            detail: format!("line {}: {t:?} is not a class id", n + 1),
        })?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub version: u32,
    pub features: PathBuf,
    pub labels: PathBuf,
    pub attributes: PathBuf,
    pub splits: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let mut text = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Loads and fully validates the dataset named by a manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<GzslDataset> {
    let manifest: Manifest = read_json(manifest_path)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Version {
            found: manifest.version,
            expected: MANIFEST_VERSION,
        });
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let ds = GzslDataset {
        name: manifest.name,
        features: read_matrix(&base.join(&manifest.features))?,
        labels: read_labels(&base.join(&manifest.labels))?,
        attributes: read_matrix(&base.join(&manifest.attributes))?,
        splits: read_json(&base.join(&manifest.splits))?,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `ds` into `dir` and returns the manifest path.
pub fn save_dataset(ds: &GzslDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        name: ds.name.clone(),
        version: MANIFEST_VERSION,
        features: "features.bin".into(),
        labels: "labels.txt".into(),
        attributes: "attributes.bin".into(),
        splits: "splits.json".into(),
    };
    write_matrix(&dir.join(&manifest.features), &ds.features)?;
    write_labels(&dir.join(&manifest.labels), &ds.labels)?;
    write_matrix(&dir.join(&manifest.attributes), &ds.attributes)?;
    let splits_path = dir.join(&manifest.splits);
    fs::write(&splits_path, serde_json::to_string_pretty(&ds.splits)?).map_err(|e| Error::io(&splits_path, e))?;
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Parameters of the synthetic benchmark.
///
/// Class ids are `0..n_seen` (seen) then `n_seen..n_seen + n_unseen`. Each
/// class gets `per_class` rows; for seen classes these are train/val rows,
/// for unseen classes test rows. The last `val_classes` seen classes have
/// all their rows in `val_idx`, so validation has classes never seen in
/// `train_idx`. Seen classes get `test_seen_per_class` extra test rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthBenchConfig {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub feat_dim: usize,
    pub attr_dim: usize,
    pub per_class: usize,
    pub cluster_sigma: f64,
    pub attr_map_seed: u64,
    pub sample_seed: u64,
    pub val_classes: usize,
    pub val_fraction: f64,
    pub test_seen_per_class: usize,
}

impl Default for SynthBenchConfig {
    fn default() -> Self {
        SynthBenchConfig {
            n_seen: 10,
            n_unseen: 5,
            feat_dim: 20,
            attr_dim: 8,
            per_class: 100,
            cluster_sigma: 0.3,
            attr_map_seed: 1,
            sample_seed: 2,
            val_classes: 2,
            val_fraction: 0.2,
            test_seen_per_class: 20,
        }
    }
}

impl SynthBenchConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.n_seen >= 2, "n_seen must be >= 2"),
            (self.n_unseen > 0, "n_unseen must be > 0"),
            (self.feat_dim > 0 && self.attr_dim > 0, "dims must be > 0"),
            (self.per_class > 0, "per_class must be > 0"),
            (self.cluster_sigma > 0.0 && self.cluster_sigma.is_finite(), "cluster_sigma must be > 0"),
            (self.val_classes < self.n_seen, "val_classes must leave at least one training class"),
            ((0.0..1.0).contains(&self.val_fraction), "val_fraction must be in [0, 1)"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Validation(format!("synthetic benchmark: {msg}")));
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_seen + self.n_unseen
    }
}

/// A generated benchmark together with its generating class means.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthBench {
    pub dataset: GzslDataset,
    /// `C × D`, row `y` is `μ_y = M·s_y`.
    pub class_means: Matrix,
}

impl SynthBench {
    pub fn generate(cfg: &SynthBenchConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, a, d) = (cfg.n_classes(), cfg.attr_dim, cfg.feat_dim);

        let mut attr_rng = ChaCha8Rng::seed_from_u64(cfg.attr_map_seed);
        let attributes = Matrix::from_fn(c, a, |_, _| StandardNormal.sample(&mut attr_rng));
        let map_dist = Normal::new(0.0, (1.0 / a as f64).sqrt()).expect("positive std");
        let map = Matrix::from_fn(d, a, |_, _| map_dist.sample(&mut attr_rng));
        let class_means = attributes.matmul_t(&map)?;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed);
        let noise = Normal::new(0.0, cfg.cluster_sigma).expect("positive sigma");
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut splits = Splits {
            seen_classes: (0..cfg.n_seen).collect(),
            unseen_classes: (cfg.n_seen..c).collect(),
            ..Splits::default()
        };
        let n_val = (cfg.val_fraction * cfg.per_class as f64).round() as usize;
        let first_val_class = cfg.n_seen - cfg.val_classes;
        for y in 0..c {
            let seen = y < cfg.n_seen;
            let count = cfg.per_class + if seen { cfg.test_seen_per_class } else { 0 };
            for k in 0..count {
                let row = labels.len();
                data.extend(class_means.row(y).iter().map(|&m| m + noise.sample(&mut rng)));
                labels.push(y);
                let list = if !seen {
                    &mut splits.test_unseen_idx
                } else if k >= cfg.per_class {
                    &mut splits.test_seen_idx
                } else if y >= first_val_class || k < n_val {
                    &mut splits.val_idx
                } else {
                    &mut splits.train_idx
                };
                list.push(row);
            }
        }
        let features = Matrix::from_vec(labels.len(), d, data)?;
        let dataset = GzslDataset {
            name: "synthetic".into(),
            features,
            labels,
            attributes,
            splits,
        };
        dataset.validate()?;
        Ok(SynthBench { dataset, class_means })
    }
}

pub fn make_synth_benchmark(cfg: &SynthBenchConfig) -> Result<GzslDataset> {
    Ok(SynthBench::generate(cfg)?.dataset)
}
