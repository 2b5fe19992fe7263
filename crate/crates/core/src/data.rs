//! Datasets with partial supervision: ingestion, synthetic generation,
//! partition sampling and validation splits.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::fmt_f64;

/// Feature matrix (one row per example) with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N × d_in`
    pub features: DMatrix<f64>,
    /// `labels[i]` is `None` for unlabeled rows.
    pub labels: Vec<Option<usize>>,
    /// Class count `C`; 0 when no row is labeled.
    pub n_classes: usize,
    /// Row indices into the dataset this one was derived from.
    pub ids: Vec<usize>,
}

impl Dataset {
    /// Build a dataset, taking `C = max label + 1`.
    pub fn new(features: DMatrix<f64>, labels: Vec<Option<usize>>) -> Result<Self> {
        let n_classes = labels.iter().flatten().max().map_or(0, |m| m + 1);
        Self::with_classes(features, labels, n_classes)
    }

    pub fn with_classes(
        features: DMatrix<f64>,
        labels: Vec<Option<usize>>,
        n_classes: usize,
    ) -> Result<Self> {
        if features.ncols() == 0 {
            return Err(Error::Format("dataset has no feature columns".into()));
        }
        if labels.len() != features.nrows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} rows",
                labels.len(),
                features.nrows()
            )));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&y| y >= n_classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if labels.iter().any(Option::is_some) && n_classes < 2 {
            return Err(Error::Config(
                "labeled data needs at least two classes".into(),
            ));
        }
        let ids = (0..features.nrows()).collect();
        Ok(Self {
            features,
            labels,
            n_classes,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_some()).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_none()).collect()
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.features.row(i).transpose()
    }

    /// Rows `rows` (in the given order); `ids` track back to this dataset's ids.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            ids: rows.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Keep at most `per_class` labels in each class, chosen uniformly under
    /// `seed`; the remaining labels are dropped (rows become unlabeled).
    pub fn retain_labels_per_class(&self, per_class: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for rows in self.rows_by_class() {
            let mut rows = rows;
            rows.shuffle(&mut rng);
            for &i in rows.iter().skip(per_class) {
                out.labels[i] = None;
            }
        }
        out
    }

    fn rows_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.n_classes];
        for (i, y) in self.labels.iter().enumerate() {
            if let Some(c) = *y {
                by_class[c].push(i);
            }
        }
        by_class
    }

    /// Write the dataset as CSV with columns `f0..f{d-1},label`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_csv_to(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).collect();
        writeln!(w, "{},label", header.join(","))?;
        for i in 0..self.len() {
            let mut line = String::new();
            for j in 0..self.dim() {
                line.push_str(&fmt_f64(self.features[(i, j)]));
                line.push(',');
            }
            if let Some(y) = self.labels[i] {
                line.push_str(&y.to_string());
            }
            writeln!(w, "{line}")?;
        }
        w.flush()
    }
}

/// Load a CSV file with a header row.
///
/// Every column other than `label_column` is a feature. Empty label cells mark
/// unlabeled rows. Labels that all parse as non-negative integers are used
/// directly; otherwise distinct label strings are numbered in order of first
/// appearance. A missing label column yields an unlabeled dataset.
pub fn load_csv(path: impl AsRef<Path>, label_column: Option<&str>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, label_column)
}

pub fn read_csv<R: Read>(reader: R, label_column: Option<&str>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Format(format!("cannot read header: {e}")))?
        .clone();
    let label_idx = label_column.and_then(|name| header.iter().position(|h| h == name));
    let feature_cols: Vec<usize> = (0..header.len()).filter(|&c| Some(c) != label_idx).collect();
    if feature_cols.is_empty() {
        return Err(Error::Format("no feature columns in header".into()));
    }

    let mut values = Vec::new();
    let mut raw_labels: Vec<Option<String>> = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::Format(format!("row {row}: {e}")))?;
        if record.len() != header.len() {
            return Err(Error::Format(format!(
                "row {row}: expected {} fields, found {}",
                header.len(),
                record.len()
            )));
        }
        for &c in &feature_cols {
            let cell = &record[c];
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: header[c].to_string(),
                value: cell.to_string(),
            })?;
            values.push(v);
        }
        raw_labels.push(label_idx.and_then(|c| {
            let cell = &record[c];
            (!cell.is_empty()).then(|| cell.to_string())
        }));
    }
    if raw_labels.is_empty() {
        return Err(Error::Format("no data rows".into()));
    }

    let labels = encode_labels(&raw_labels);
    let features = DMatrix::from_row_slice(raw_labels.len(), feature_cols.len(), &values);
    Dataset::new(features, labels)
}

fn encode_labels(raw: &[Option<String>]) -> Vec<Option<usize>> {
    let numeric: Option<Vec<Option<usize>>> = raw
        .iter()
        .map(|cell| match cell {
            None => Some(None),
            Some(s) => s.parse::<usize>().ok().map(Some),
        })
        .collect();
    if let Some(labels) = numeric {
        return labels;
    }
    let mut codes: HashMap<&str, usize> = HashMap::new();
    raw.iter()
        .map(|cell| {
            cell.as_deref().map(|s| {
                let next = codes.len();
                *codes.entry(s).or_insert(next)
            })
        })
        .collect()
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Read an IDX image/label file pair (MNIST layout).
pub fn parse_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let images = read(images_path.as_ref())?;
    let labels = read(labels_path.as_ref())?;
    parse_idx_bytes(&images, &labels)
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated {what} header")))
}

/// Pixels are scaled to `[0, 1]` by dividing by 255 and flattened row-major.
pub fn parse_idx_bytes(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    if be_u32(images, 0, "image")? != IDX_IMAGES_MAGIC {
        return Err(Error::Format("wrong magic for images".into()));
    }
    if be_u32(labels, 0, "label")? != IDX_LABELS_MAGIC {
        return Err(Error::Format("wrong magic for labels".into()));
    }
    let n = be_u32(images, 4, "image")? as usize;
    let rows = be_u32(images, 8, "image")? as usize;
    let cols = be_u32(images, 12, "image")? as usize;
    let n_labels = be_u32(labels, 4, "label")? as usize;
    if n != n_labels {
        return Err(Error::Format(format!(
            "count mismatch: {n} images but {n_labels} labels"
        )));
    }
    let d = rows * cols;
    let pixels = images
        .get(16..16 + n * d)
        .ok_or_else(|| Error::Format(format!("truncated image payload: expected {} bytes", n * d)))?;
    let ys = labels
        .get(8..8 + n)
        .ok_or_else(|| Error::Format(format!("truncated label payload: expected {n} bytes")))?;

    let values: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let features = DMatrix::from_row_slice(n, d, &values);
    Dataset::new(features, ys.iter().map(|&y| Some(usize::from(y))).collect())
}

/// Parameters of the Gaussian blob generator.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobConfig {
    pub n_classes: usize,
    pub per_class: usize,
    /// Dimensions carrying the class means.
    pub d_signal: usize,
    /// Class-independent nuisance dimensions.
    pub d_noise: usize,
    pub signal_sep: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            per_class: 200,
            d_signal: 5,
            d_noise: 45,
            signal_sep: 6.0,
            noise_sigma: 4.0,
            seed: 7,
        }
    }
}

impl BlobConfig {
    /// Class `c` sits at `±scale · sep · e_{c mod d_signal}`: the first
    /// `d_signal` classes use the positive axes, the next block the negative
    /// ones, and further blocks repeat with growing scale.
    pub fn class_mean(&self, c: usize) -> DVector<f64> {
        let mut mean = DVector::zeros(self.d_signal + self.d_noise);
        let axis = c % self.d_signal;
        let block = c / self.d_signal;
        let sign = if block.is_multiple_of(2) { 1.0 } else { -1.0 };
        let scale = (1 + block / 2) as f64;
        mean[axis] = sign * scale * self.signal_sep;
        mean
    }
}

/// Labeled Gaussian blobs, class-major row order, deterministic in `seed`.
pub fn make_blobs(cfg: &BlobConfig) -> Result<Dataset> {
    if cfg.n_classes == 0 || cfg.per_class == 0 || cfg.d_signal == 0 {
        return Err(Error::Config(
            "blobs need at least one class, one point per class and one signal dimension".into(),
        ));
    }
    let d = cfg.d_signal + cfg.d_noise;
    let n = cfg.n_classes * cfg.per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut values = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for c in 0..cfg.n_classes {
        let mean = cfg.class_mean(c);
        for _ in 0..cfg.per_class {
            for j in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                let sd = if j < cfg.d_signal { 1.0 } else { cfg.noise_sigma };
                values.push(mean[j] + sd * z);
            }
            labels.push(Some(c));
        }
    }
    let features = DMatrix::from_row_slice(n, d, &values);
    let n_classes = cfg.n_classes.max(2);
    Dataset::with_classes(features, labels, n_classes)
}

/// Node set for one round of graph construction: all labeled rows followed by
/// a uniform sample of unlabeled rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub labeled_idx: Vec<usize>,
    pub unlabeled_idx: Vec<usize>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.labeled_idx.len() + self.unlabeled_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dataset rows in node order (labeled first).
    pub fn nodes(&self) -> Vec<usize> {
        self.labeled_idx
            .iter()
            .chain(&self.unlabeled_idx)
            .copied()
            .collect()
    }
}

pub fn sample_partition(dataset: &Dataset, n_p: usize, seed: u64) -> Result<Partition> {
    let labeled_idx = dataset.labeled_indices();
    if labeled_idx.is_empty() {
        return Err(Error::Config("partition needs at least one labeled row".into()));
    }
    let unlabeled = dataset.unlabeled_indices();
    if n_p > unlabeled.len() {
        return Err(Error::Config(format!(
            "partition size {n_p} exceeds {} unlabeled rows",
            unlabeled.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unlabeled_idx: Vec<usize> = index::sample(&mut rng, unlabeled.len(), n_p)
        .into_iter()
        .map(|k| unlabeled[k])
        .collect();
    unlabeled_idx.sort_unstable();
    Ok(Partition {
        labeled_idx,
        unlabeled_idx,
    })
}

/// Stratified validation split over labeled rows.
///
/// Each class sends `⌈fraction · count⌉` of its labeled rows to validation,
/// always leaving at least one in training. Classes with fewer than two labeled
/// rows stay whole in training. Unlabeled rows always stay in training.
pub fn split_validation(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_val = vec![false; dataset.len()];
    for (c, mut rows) in dataset.rows_by_class().into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        if rows.len() < 2 {
            log::warn!("class {c} has {} labeled row(s); kept whole in train", rows.len());
            continue;
        }
        // the epsilon keeps exact products such as 0.15 * 20 from rounding up
        let take = ((fraction * rows.len() as f64) - 1e-9).ceil() as usize;
        let take = take.clamp(1, rows.len() - 1);
        rows.shuffle(&mut rng);
        for &i in &rows[..take] {
            in_val[i] = true;
        }
    }
    let (val_rows, train_rows): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| in_val[i]);
    Ok((dataset.subset(&train_rows), dataset.subset(&val_rows)))
}
