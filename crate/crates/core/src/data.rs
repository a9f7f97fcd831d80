//! Datasets: CSV ingestion, hierarchy-aware Gaussian blobs, per-class
//! subsampling and epoch batching.
//!
//! Labels are 0-based class indices into `class_names`.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::hierarchy::ClassHierarchy;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    class_names: Vec<String>,
    split: Split,
    full_len: usize,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        class_names: Vec<String>,
        split: Split,
    ) -> Result<Self> {
        if features.shape().len() != 2 || features.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                features.shape(),
                &[labels.len(), 0],
            ));
        }
        if labels.is_empty() {
            return Err(Error::InvalidTensor("dataset has no samples".into()));
        }
        if !features.all_finite() {
            return Err(Error::InvalidTensor(
                "dataset features are not finite".into(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Label {
                label: bad,
                num_classes: class_names.len(),
            });
        }
        let full_len = labels.len();
        Ok(Self {
            features,
            labels,
            class_names,
            split,
            full_len,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Size of the dataset this one was subsampled from (its own size otherwise).
    pub fn full_len(&self) -> usize {
        self.full_len
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let features = self.features.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Dataset {
            features,
            labels,
            class_names: self.class_names.clone(),
            split: self.split,
            full_len: self.full_len,
        })
    }

    /// Exactly `k` samples per class, drawn without replacement. Selected
    /// rows keep their original relative order.
    pub fn subsample(&self, k: usize, seed: u64) -> Result<Dataset> {
        let counts = self.class_counts();
        let smallest = counts.iter().copied().min().unwrap_or(0);
        if k == 0 || k > smallest {
            return Err(Error::Config(format!(
                "cannot draw {k} samples per class; smallest class has {smallest}"
            )));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen: Vec<usize> = by_class
            .iter_mut()
            .flat_map(|idx| {
                idx.shuffle(&mut rng);
                idx[..k].to_vec()
            })
            .collect();
        chosen.sort_unstable();
        self.select(&chosen)
    }

    /// One epoch of mini-batches; see [`batch_indices`].
    pub fn batches(&self, batch_size: usize, epoch_seed: u64) -> Result<Vec<(Tensor, Vec<usize>)>> {
        batch_indices(self.len(), self.full_len, batch_size, epoch_seed)?
            .into_iter()
            .map(|idx| {
                let x = self.features.gather_rows(&idx)?;
                let y = idx.iter().map(|&i| self.labels[i]).collect();
                Ok((x, y))
            })
            .collect()
    }

    pub fn standardized(&self, s: &Standardizer) -> Result<Dataset> {
        Ok(Dataset {
            features: s.apply(&self.features)?,
            ..self.clone()
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for j in 0..self.dim() {
            out.push_str(&format!(",x{}", j + 1));
        }
        out.push('\n');
        for (row, &l) in self.features.rows().zip(&self.labels) {
            out.push_str(&self.class_names[l]);
            for v in row {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path, class_list: Option<&[String]>, split: Split) -> Result<Dataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, &path.display().to_string(), class_list, split)
    }

    /// Header row first; column `label` holds class names, the rest are features.
    pub fn parse_csv(
        text: &str,
        source: &str,
        class_list: Option<&[String]>,
        split: Split,
    ) -> Result<Dataset> {
        let format = |line: usize, message: String| Error::Format {
            path: source.to_string(),
            line,
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| format(1, e.to_string()))?
            .clone();
        if header.get(0) != Some("label") {
            return Err(format(1, "first column must be `label`".into()));
        }
        let dim = header.len() - 1;
        if dim == 0 {
            return Err(format(1, "no feature columns".into()));
        }
        let mut names: Vec<String> = class_list.map(<[String]>::to_vec).unwrap_or_default();
        let mut index: HashMap<String, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let line = row + 2;
            let record = record.map_err(|e| format(line, e.to_string()))?;
            if record.len() != dim + 1 {
                return Err(format(
                    line,
                    format!("expected {} fields, found {}", dim + 1, record.len()),
                ));
            }
            let name = &record[0];
            let label = match index.get(name) {
                Some(&i) => i,
                None if class_list.is_some() => {
                    return Err(format(line, format!("class `{name}` not in class list")))
                }
                None => {
                    names.push(name.to_string());
                    index.insert(name.to_string(), names.len() - 1);
                    names.len() - 1
                }
            };
            labels.push(label);
            for field in record.iter().skip(1) {
                let v: f64 = field
                    .parse()
                    .map_err(|_| format(line, format!("non-numeric feature `{field}`")))?;
                data.push(v);
            }
        }
        if labels.is_empty() {
            return Err(format(1, "no data rows".into()));
        }
        let features = Tensor::matrix(labels.len(), dim, data)?;
        Dataset::new(features, labels, names, split)
    }
}

/// Index lists for one epoch. The data is passed over `⌈full_len / n⌉`
/// times; each pass is an independent shuffle chunked into batches of at
/// most `batch_size`, so no batch spans two passes.
pub fn batch_indices(
    n: usize,
    full_len: usize,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut out = Vec::new();
    for _ in 0..repeats_per_epoch(n, full_len) {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        out.extend(perm.chunks(batch_size).map(<[usize]>::to_vec));
    }
    Ok(out)
}

pub fn repeats_per_epoch(n: usize, full_len: usize) -> usize {
    full_len.div_ceil(n.max(1)).max(1)
}

/// Per-feature mean and standard deviation, fitted on training data only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Self {
        let n = train.len() as f64;
        let dim = train.dim();
        let mut mean = vec![0.0; dim];
        for row in train.features.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for row in train.features.rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.last_dim() != self.mean.len() {
            return Err(Error::shape(
                "standardize",
                x.shape(),
                &[0, self.mean.len()],
            ));
        }
        let d = self.mean.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

/// Parameters of the Gaussian blob generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    /// Ignored when a hierarchy is supplied.
    #[serde(default)]
    pub n_classes: usize,
    pub dim: usize,
    /// Samples generated per class before the train/test split.
    pub samples_per_class: usize,
    pub spread: f64,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_separation() -> f64 {
    1.0
}

/// Gaussian clusters around class means `separation · Q · e_c`, where `Q`
/// has orthonormal columns and `e_c` is the class's semantic embedding (the
/// one-hot vector without a hierarchy). Mean distances are therefore
/// `separation · √(2(1 - s))`. Each class is split in half, train taking
/// the extra sample when odd.
pub fn make_blobs(
    spec: &BlobSpec,
    hierarchy: Option<&ClassHierarchy>,
) -> Result<(Dataset, Dataset)> {
    let embeddings = match hierarchy {
        Some(h) => EmbeddingMatrix::semantic(&h.semantic_similarity()?)?,
        None => EmbeddingMatrix::onehot(spec.n_classes)?,
    };
    let n = embeddings.num_classes();
    if spec.dim < n {
        return Err(Error::Config(format!(
            "blob dimension {} is smaller than the number of classes {n}",
            spec.dim
        )));
    }
    if spec.samples_per_class < 2 {
        return Err(Error::Config("need at least 2 samples per class".into()));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) || !(spec.separation > 0.0) {
        return Err(Error::Config(
            "spread must be >= 0 and separation > 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gauss = DMatrix::from_fn(spec.dim, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = gauss.qr().q();

    let means: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let e = embeddings.row(c);
            (0..spec.dim)
                .map(|r| spec.separation * (0..n).map(|j| q[(r, j)] * e[j]).sum::<f64>())
                .collect()
        })
        .collect();
    if let Some(h) = hierarchy {
        check_sibling_geometry(h, &means)?;
    }

    let n_train = spec.samples_per_class.div_ceil(2);
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for (c, mean) in means.iter().enumerate() {
        for i in 0..spec.samples_per_class {
            let target = if i < n_train { &mut train } else { &mut test };
            target.0.extend(
                mean.iter()
                    .map(|m| m + spec.spread * rng.sample::<f64, _>(StandardNormal)),
            );
            target.1.push(c);
        }
    }
    let names = embeddings.class_names().to_vec();
    let build = |(data, labels): (Vec<f64>, Vec<usize>), split| {
        let features = Tensor::matrix(labels.len(), spec.dim, data)?;
        Dataset::new(features, labels, names.clone(), split)
    };
    Ok((build(train, Split::Train)?, build(test, Split::Test)?))
}

/// Each class mean must be strictly closer to its siblings than to any
/// non-sibling.
fn check_sibling_geometry(h: &ClassHierarchy, means: &[Vec<f64>]) -> Result<()> {
    let classes = h.classes();
    let parents: Vec<Option<&str>> = classes
        .iter()
        .map(|c| h.parent_of(c))
        .collect::<Result<_>>()?;
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    for i in 0..classes.len() {
        let mut sib = f64::NEG_INFINITY;
        let mut other = f64::INFINITY;
        for j in (0..classes.len()).filter(|&j| j != i) {
            let d = dist(&means[i], &means[j]);
            if parents[i] == parents[j] {
                sib = sib.max(d);
            } else {
                other = other.min(d);
            }
        }
        if sib >= other - 1e-9 {
            return Err(Error::DegenerateHierarchy(format!(
                "class `{}` is not closer to its siblings ({sib}) than to other classes ({other})",
                classes[i]
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let x = Tensor::matrix(6, 1, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        Dataset::new(
            x,
            vec![0, 1, 0, 1, 0, 1],
            vec!["a".into(), "b".into()],
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn csv_examples() {
        let d =
            Dataset::parse_csv("label,f1,f2\ncat,1,2\ndog,3,4\n", "t", None, Split::Train).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.class_names(), ["cat", "dog"]);
        assert!(Dataset::parse_csv("", "t", None, Split::Train).is_err());
        assert!(Dataset::parse_csv("label,f1\n", "t", None, Split::Train).is_err());
        assert!(Dataset::parse_csv("label,f1\na,1,2\n", "t", None, Split::Train).is_err());
        assert!(Dataset::parse_csv("label,f1\na,x\n", "t", None, Split::Train).is_err());
        let list = vec!["dog".to_string(), "cat".to_string()];
        let d = Dataset::parse_csv("label,f1\ncat,1\n", "t", Some(&list), Split::Train).unwrap();
        assert_eq!(d.labels(), &[1]);
        assert!(Dataset::parse_csv("label,f1\nemu,1\n", "t", Some(&list), Split::Train).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let (train, _) = make_blobs(
            &BlobSpec {
                n_classes: 3,
                dim: 4,
                samples_per_class: 4,
                spread: 0.3,
                separation: 1.0,
                seed: 5,
            },
            None,
        )
        .unwrap();
        let back = Dataset::parse_csv(&train.to_csv(), "t", None, Split::Train).unwrap();
        assert_eq!(back, train);
    }

    #[test]
    fn subsample_examples() {
        let d = tiny();
        let full = d.subsample(3, 1).unwrap();
        assert_eq!(full.labels(), d.labels());
        let one = d.subsample(1, 1).unwrap();
        assert_eq!(one.len(), 2);
        assert_eq!(one.class_counts(), vec![1, 1]);
        assert_eq!(one.full_len(), 6);
        assert_eq!(d.subsample(2, 9).unwrap(), d.subsample(2, 9).unwrap());
        assert!(d.subsample(4, 1).is_err());
        assert!(d.subsample(0, 1).is_err());
    }

    #[test]
    fn batching_examples() {
        let d = tiny();
        let b = d.batches(10, 0).unwrap();
        assert_eq!(b.len(), 1);
        let mut labels = b[0].1.clone();
        labels.sort();
        assert_eq!(labels, vec![0, 0, 0, 1, 1, 1]);

        assert_eq!(repeats_per_epoch(3, 6), 2);
        assert_eq!(repeats_per_epoch(4, 6), 2);
        assert_eq!(repeats_per_epoch(6, 6), 1);
        let third = d.subsample(1, 3).unwrap();
        let passes = third.batches(100, 4).unwrap();
        assert_eq!(passes.len(), 3);
        for (_, y) in &passes {
            let mut y = y.clone();
            y.sort();
            assert_eq!(y, vec![0, 1]);
        }
    }

    #[test]
    fn blobs_zero_spread_sit_on_means() {
        let spec = BlobSpec {
            n_classes: 4,
            dim: 6,
            samples_per_class: 4,
            spread: 0.0,
            separation: 2.0,
            seed: 3,
        };
        let (train, test) = make_blobs(&spec, None).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 8);
        for c in 0..4 {
            let rows: Vec<&[f64]> = train
                .features()
                .rows()
                .zip(train.labels())
                .filter(|(_, &l)| l == c)
                .map(|(r, _)| r)
                .collect();
            assert!(rows.windows(2).all(|w| w[0] == w[1]));
            let norm: f64 = rows[0].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 2.0).abs() < 1e-12);
        }
        assert_eq!(make_blobs(&spec, None).unwrap(), (train, test));
    }

    #[test]
    fn blobs_follow_hierarchy() {
        let h = ClassHierarchy::parse("r\ta\nr\tb\na\ta1\na\ta2\nb\tb1\nb\tb2\n", None).unwrap();
        let spec = BlobSpec {
            n_classes: 0,
            dim: 5,
            samples_per_class: 2,
            spread: 0.0,
            separation: 1.0,
            seed: 0,
        };
        let (train, _) = make_blobs(&spec, Some(&h)).unwrap();
        assert_eq!(train.num_classes(), 4);
        let too_small = BlobSpec { dim: 3, ..spec };
        assert!(make_blobs(&too_small, Some(&h)).is_err());
    }

    #[test]
    fn standardizer_uses_train_statistics() {
        let d = tiny();
        let s = Standardizer::fit(&d);
        assert!((s.mean[0] - 2.5).abs() < 1e-15);
        let z = d.standardized(&s).unwrap();
        let m: f64 = z.features().data().iter().sum::<f64>() / 6.0;
        assert!(m.abs() < 1e-12);
    }
}
