use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::bilevel::Batch;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetMeta {
    pub name: String,
    pub num_features: usize,
    pub num_classes: usize,
    /// Columns known to be independent of the label (synthetic data only).
    pub noise_features: Vec<usize>,
}

/// A labelled feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    meta: DatasetMeta,
}

/// Disjoint train / validation / test row indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn train_and_val(&self) -> Vec<usize> {
        self.train.iter().chain(&self.val).copied().collect()
    }
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, meta: DatasetMeta) -> Result<Self> {
        let (n, d) = features
            .dims2()
            .ok_or_else(|| Error::InvalidArgument("features must be a matrix".into()))?;
        if labels.len() != n || d != meta.num_features {
            return Err(Error::InvalidArgument(format!(
                "{n}x{d} features do not match {} labels and {} declared features",
                labels.len(),
                meta.num_features
            )));
        }
        if !features.all_finite() {
            return Err(Error::NonFinite(format!("dataset {}", meta.name)));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= meta.num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: meta.num_classes,
            });
        }
        Ok(Dataset { features, labels, meta })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn num_features(&self) -> usize {
        self.meta.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.meta.num_features;
        &self.features.data()[i * d..(i + 1) * d]
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let d = self.meta.num_features;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Batch {
            x: Tensor::matrix(indices.len(), d, data).expect("rows have the dataset width"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Shuffles row indices with `seed` and cuts them by the given train and
    /// validation fractions; the remainder is the test set.
    pub fn split(&self, seed: u64, train_fraction: f64, val_fraction: f64) -> Result<Splits> {
        if !(train_fraction > 0.0 && val_fraction >= 0.0 && train_fraction + val_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid split fractions {train_fraction} / {val_fraction}"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (train_fraction * self.len() as f64).round() as usize;
        let n_val = ((val_fraction * self.len() as f64).round() as usize).min(self.len() - n_train);
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Ok(Splits { train: idx, val, test })
    }

    /// Rescales every column to zero mean and unit variance using statistics
    /// of the `fit` rows. Constant columns are only centred.
    pub fn standardize(&mut self, fit: &[usize]) {
        let d = self.meta.num_features;
        if fit.is_empty() {
            return;
        }
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for &i in fit {
            for (m, x) in mean.iter_mut().zip(self.row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= fit.len() as f64);
        for &i in fit {
            for ((v, x), m) in var.iter_mut().zip(self.row(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|v| {
                let sd = (v / fit.len() as f64).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        for row in self.features.data_mut().chunks_mut(d) {
            for ((x, m), s) in row.iter_mut().zip(&mean).zip(&scale) {
                *x = (*x - m) * s;
            }
        }
    }
}

/// Reads rows of `d` numeric features followed by an integer label. A first
/// row with any non-numeric field is treated as a header. With `classes`
/// unset the class count is `max label + 1`.
pub fn load_csv(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    parse_csv(&text, path, &name, classes)
}

fn parse_csv(text: &str, path: &Path, name: &str, classes: Option<usize>) -> Result<Dataset> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut width: Option<usize> = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(k + 1, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let numeric: Vec<Option<f64>> = record.iter().map(|f| f.parse::<f64>().ok()).collect();
        if k == 0 && numeric.iter().any(Option::is_none) {
            continue;
        }
        if record.len() < 2 {
            return Err(parse_err(line, "need at least one feature and a label".into()));
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(parse_err(
                line,
                format!("expected {} values, found {}", expected, record.len()),
            ));
        }
        for (col, v) in numeric[..expected - 1].iter().enumerate() {
            match v {
                Some(x) if x.is_finite() => features.push(*x),
                _ => {
                    return Err(parse_err(
                        line,
                        format!("column {}: {:?} is not a finite number", col + 1, &record[col]),
                    ))
                }
            }
        }
        let raw = &record[expected - 1];
        let label: usize = raw
            .parse()
            .map_err(|_| parse_err(line, format!("label {raw:?} is not a non-negative integer")))?;
        if let Some(c) = classes {
            if label >= c {
                return Err(parse_err(line, Error::LabelOutOfRange { label, classes: c }.to_string()));
            }
        }
        labels.push(label);
    }
    let d = width.map_or(0, |w| w - 1);
    if labels.is_empty() {
        return Err(parse_err(0, "no data rows".into()));
    }
    let num_classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let meta = DatasetMeta {
        name: name.to_string(),
        num_features: d,
        num_classes,
        noise_features: Vec::new(),
    };
    Dataset::new(Tensor::matrix(labels.len(), d, features)?, labels, meta)
}

/// Gaussian class clusters in the informative columns followed by
/// label-independent standard normal columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n: usize,
    pub d_informative: usize,
    pub d_noise: usize,
    pub classes: usize,
    /// Standard deviation of the class centres; within-class noise is 1.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 2000,
            d_informative: 32,
            d_noise: 32,
            classes: 10,
            separation: 0.6,
            seed: 0,
        }
    }
}

pub fn gen_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    if config.n == 0 || config.d_informative == 0 || config.classes < 2 || !(config.separation > 0.0) {
        return Err(Error::InvalidArgument(format!("invalid synthetic data config {config:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let centres: Vec<Vec<f64>> = (0..config.classes)
        .map(|_| {
            (0..config.d_informative)
                .map(|_| config.separation * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let d = config.d_informative + config.d_noise;
    let mut features = Vec::with_capacity(config.n * d);
    let mut labels = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let y = i % config.classes;
        for c in &centres[y] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(c + z);
        }
        for _ in 0..config.d_noise {
            features.push(StandardNormal.sample(&mut rng));
        }
        labels.push(y);
    }
    let meta = DatasetMeta {
        name: "synthetic".into(),
        num_features: d,
        num_classes: config.classes,
        noise_features: (config.d_informative..d).collect(),
    };
    Dataset::new(Tensor::matrix(config.n, d, features)?, labels, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn three_rows() {
        let f = write_tmp("1,2,0\n3,4,1\n5,6,2\n");
        let ds = load_csv(f.path(), None).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_features(), 2);
        assert_eq!(ds.num_classes(), 3);
        assert_eq!(ds.row(1), &[3.0, 4.0]);
        assert_eq!(ds.labels(), &[0, 1, 2]);
    }

    #[test]
    fn short_row_reports_its_line() {
        let mut text = String::new();
        for r in 0..4 {
            let n = if r == 2 { 63 } else { 64 };
            let row: Vec<String> = (0..n).map(|i| i.to_string()).collect();
            text.push_str(&format!("{},{}\n", row.join(","), r % 2));
        }
        let f = write_tmp(&text);
        match load_csv(f.path(), None).unwrap_err() {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("expected 65"), "{msg}");
            }
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn header_is_skipped() {
        let f = write_tmp("a,b,label\n1,2,0\n3,4,1\n");
        let ds = load_csv(f.path(), None).unwrap();
        assert_eq!(ds.len(), 2);
        let f = write_tmp("1,2,0\nx,4,1\n");
        assert!(matches!(load_csv(f.path(), None), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn label_validation() {
        let f = write_tmp("1,2,0\n3,4,7\n");
        assert!(matches!(load_csv(f.path(), Some(5)), Err(Error::Parse { line: 2, .. })));
        let f = write_tmp("1,2,-1\n");
        assert!(load_csv(f.path(), None).is_err());
        let f = write_tmp("1,2,0.5\n");
        assert!(load_csv(f.path(), None).is_err());
        assert!(matches!(
            load_csv(Path::new("/nonexistent/data.csv"), None),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn bundled_digits_parse() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/digits.csv");
        let ds = load_csv(&path, Some(10)).unwrap();
        assert_eq!(ds.len(), 1797);
        assert_eq!(ds.num_features(), 64);
    }

    #[test]
    fn synthetic_is_reproducible_and_labels_noise() {
        let cfg = SyntheticConfig {
            n: 100,
            ..Default::default()
        };
        let a = gen_synthetic(&cfg).unwrap();
        let b = gen_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.meta().noise_features, (32..64).collect::<Vec<_>>());
        let clean = gen_synthetic(&SyntheticConfig { d_noise: 0, ..cfg }).unwrap();
        assert!(clean.meta().noise_features.is_empty());
        assert_eq!(clean.num_features(), 32);
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let ds = gen_synthetic(&SyntheticConfig {
            n: 101,
            ..Default::default()
        })
        .unwrap();
        let s = ds.split(3, 0.6, 0.2).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert_eq!(s.train.len(), 61);
        assert_eq!(s.val.len(), 20);
        assert_eq!(s, ds.split(3, 0.6, 0.2).unwrap());
        assert!(ds.split(3, 0.9, 0.2).is_err());
    }

    #[test]
    fn standardize_uses_fit_rows() {
        let meta = DatasetMeta {
            name: "t".into(),
            num_features: 2,
            num_classes: 2,
            noise_features: vec![],
        };
        let x = Tensor::matrix(3, 2, vec![1.0, 5.0, 3.0, 5.0, 100.0, 5.0]).unwrap();
        let mut ds = Dataset::new(x, vec![0, 1, 0], meta).unwrap();
        ds.standardize(&[0, 1]);
        assert_eq!(ds.row(0), &[-1.0, 0.0]);
        assert_eq!(ds.row(1), &[1.0, 0.0]);
    }
}
