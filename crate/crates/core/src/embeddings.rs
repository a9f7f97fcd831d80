//! Unit-norm class embeddings: one-hot rows, or semantic rows whose Gram
//! matrix reproduces a [`SimilarityMatrix`].

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::SimilarityMatrix;
use crate::tensor::Tensor;

/// Residuals of `1 - Σ previous²` down to this value are clamped to zero; below it
/// the similarity matrix is rejected as not positive semidefinite.
pub const PSD_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Onehot,
    Semantic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    class_names: Vec<String>,
    rows: Tensor,
    kind: EmbeddingKind,
}

impl EmbeddingMatrix {
    pub fn onehot(n: usize) -> Result<Self> {
        Self::onehot_named((1..=n).map(|i| format!("class{i}")).collect())
    }

    pub fn onehot_named(class_names: Vec<String>) -> Result<Self> {
        let n = class_names.len();
        if n < 2 {
            return Err(Error::Config(format!(
                "one-hot embeddings need n >= 2, got {n}"
            )));
        }
        Ok(Self {
            class_names,
            rows: Tensor::identity(n),
            kind: EmbeddingKind::Onehot,
        })
    }

    /// Cholesky-style construction: row `i` matches the dot products with the
    /// previous rows over the first `i` coordinates, then takes whatever norm is
    /// left on coordinate `i`.
    pub fn semantic(s: &SimilarityMatrix) -> Result<Self> {
        let n = s.len();
        if n == 0 {
            return Err(Error::Config("empty similarity matrix".into()));
        }
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                let partial: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
                let diag = l[j * n + j];
                if diag <= f64::EPSILON {
                    return Err(Error::NotPsd {
                        class: s.names()[j].clone(),
                        residual: diag * diag,
                    });
                }
                l[i * n + j] = (s.get(j, i) - partial) / diag;
            }
            let used: f64 = (0..i).map(|k| l[i * n + k] * l[i * n + k]).sum();
            let residual = s.get(i, i) - used;
            if residual < -PSD_TOLERANCE {
                return Err(Error::NotPsd {
                    class: s.names()[i].clone(),
                    residual,
                });
            }
            l[i * n + i] = residual.max(0.0).sqrt();
        }
        Ok(Self {
            class_names: s.names().to_vec(),
            rows: Tensor::matrix(n, n, l)?,
            kind: EmbeddingKind::Semantic,
        })
    }

    pub fn from_rows(class_names: Vec<String>, rows: Tensor, kind: EmbeddingKind) -> Result<Self> {
        if rows.shape().len() != 2 || rows.shape()[0] != class_names.len() {
            return Err(Error::shape(
                "embeddings",
                rows.shape(),
                &[class_names.len()],
            ));
        }
        Ok(Self {
            class_names,
            rows,
            kind,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.rows.last_dim()
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn matrix(&self) -> &Tensor {
        &self.rows
    }

    pub fn row(&self, class: usize) -> &[f64] {
        self.rows.row(class)
    }

    /// Stacks the embedding of each label into a `batch×d` target tensor.
    pub fn gather(&self, labels: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes()) {
            return Err(Error::Label {
                label: bad,
                num_classes: self.num_classes(),
            });
        }
        self.rows.gather_rows(labels)
    }

    /// `E·Eᵀ` as a flat row-major `n×n` buffer.
    pub fn gram(&self) -> Vec<f64> {
        let n = self.num_classes();
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                g[i * n + j] = self
                    .row(i)
                    .iter()
                    .zip(self.row(j))
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        g
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for k in 1..=self.dim() {
            let _ = write!(out, ",e{k}");
        }
        out.push('\n');
        for (i, name) in self.class_names.iter().enumerate() {
            out.push_str(name);
            for v in self.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the CSV written by [`EmbeddingMatrix::to_csv`]. Rows that are exactly the
    /// standard basis are tagged one-hot, anything else semantic.
    pub fn from_csv(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Format {
            path: source.to_string(),
            line,
            message,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let dim = header.split(',').count().saturating_sub(1);
        if dim == 0 {
            return Err(err(1, "header has no embedding columns".into()));
        }
        let mut names = Vec::new();
        let mut data = Vec::new();
        for (i, line) in lines {
            let mut fields = line.split(',');
            let name = fields.next().unwrap_or_default().trim().to_string();
            let values: Vec<f64> = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(i + 1, e.to_string()))?;
            if values.len() != dim {
                return Err(err(
                    i + 1,
                    format!("expected {dim} values, got {}", values.len()),
                ));
            }
            names.push(name);
            data.extend(values);
        }
        if names.is_empty() {
            return Err(err(2, "no embedding rows".into()));
        }
        let rows = Tensor::matrix(names.len(), dim, data)?;
        let onehot = dim == names.len() && rows == Tensor::identity(dim);
        let kind = if onehot {
            EmbeddingKind::Onehot
        } else {
            EmbeddingKind::Semantic
        };
        Self::from_rows(names, rows, kind)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EmbeddingReport {
    /// `max |E·Eᵀ - S|`
    pub max_gram_deviation: f64,
    /// `max |‖row‖ - 1|`
    pub max_norm_deviation: f64,
}

pub fn verify_embeddings(e: &EmbeddingMatrix, s: &SimilarityMatrix) -> Result<EmbeddingReport> {
    if e.num_classes() != s.len() {
        return Err(Error::shape(
            "verify_embeddings",
            &[e.num_classes()],
            &[s.len()],
        ));
    }
    let gram = e.gram();
    let max_gram_deviation = gram
        .iter()
        .zip(s.values())
        .map(|(g, v)| (g - v).abs())
        .fold(0.0, f64::max);
    let max_norm_deviation = (0..e.num_classes())
        .map(|i| (e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(EmbeddingReport {
        max_gram_deviation,
        max_norm_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::ClassHierarchy;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn onehot_rows_are_basis_vectors() {
        let e = EmbeddingMatrix::onehot(2).unwrap();
        assert_eq!(e.matrix().data(), &[1.0, 0.0, 0.0, 1.0]);
        let e3 = EmbeddingMatrix::onehot(3).unwrap();
        assert_eq!(e3.row(1), &[0.0, 1.0, 0.0]);
        assert!(EmbeddingMatrix::onehot(1).is_err());
        let report = verify_embeddings(&e3, &SimilarityMatrix::identity(names(3))).unwrap();
        assert_eq!(report.max_gram_deviation, 0.0);
        assert_eq!(report.max_norm_deviation, 0.0);
    }

    #[test]
    fn identity_similarity_gives_identity_embeddings() {
        let e = EmbeddingMatrix::semantic(&SimilarityMatrix::identity(names(5))).unwrap();
        assert_eq!(e.matrix(), &Tensor::identity(5));
    }

    #[test]
    fn two_by_two_cholesky() {
        let s = SimilarityMatrix::new(names(2), vec![1.0, 0.5, 0.5, 1.0]).unwrap();
        let e = EmbeddingMatrix::semantic(&s).unwrap();
        assert_eq!(e.row(0), &[1.0, 0.0]);
        assert_eq!(e.row(1)[0], 0.5);
        assert!((e.row(1)[1] - 0.75f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn three_class_tree_gram_matches() {
        let h = ClassHierarchy::parse("r\tA\nr\tB\nA\ta1\nA\ta2\nB\tb1", None).unwrap();
        let s = h.semantic_similarity().unwrap();
        let e = EmbeddingMatrix::semantic(&s).unwrap();
        let report = verify_embeddings(&e, &s).unwrap();
        assert!(report.max_gram_deviation <= 1e-12);
        assert!(report.max_norm_deviation <= 1e-12);
    }

    #[test]
    fn perturbed_row_deviation_is_first_order() {
        let s = SimilarityMatrix::new(names(2), vec![1.0, 0.5, 0.5, 1.0]).unwrap();
        let e = EmbeddingMatrix::semantic(&s).unwrap();
        let delta = 1e-6;
        let mut rows = e.matrix().clone();
        rows.data_mut()[0] += delta; // row 0 becomes [1 + δ, 0]
        let perturbed = EmbeddingMatrix::from_rows(s.names().to_vec(), rows, e.kind()).unwrap();
        let report = verify_embeddings(&perturbed, &s).unwrap();
        // ‖row0‖² = 1 + 2δ + δ², so the Gram diagonal moves by 2δ.
        assert!((report.max_gram_deviation - 2.0 * delta).abs() < 1e-11);
        assert!((report.max_norm_deviation - delta).abs() < 1e-15);
    }

    #[test]
    fn indefinite_matrix_is_rejected_with_class_name() {
        // Three vectors cannot be pairwise antipodal.
        let s = SimilarityMatrix::new(
            names(3),
            vec![1.0, -1.0, -1.0, -1.0, 1.0, -1.0, -1.0, -1.0, 1.0],
        )
        .unwrap();
        match EmbeddingMatrix::semantic(&s) {
            Err(Error::NotPsd { class, .. }) => assert_eq!(class, "c1"),
            other => panic!("expected NotPsd, got {other:?}"),
        }
    }

    #[test]
    fn tiny_negative_residual_is_clamped() {
        let off = 1.0 - 1e-10;
        let s = SimilarityMatrix::new(names(2), vec![1.0, off, off, 1.0]).unwrap();
        let e = EmbeddingMatrix::semantic(&s).unwrap();
        assert!(e.row(1)[1] >= 0.0);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let h = ClassHierarchy::parse("r\tA\nr\tB\nA\ta1\nA\ta2\nB\tb1", None).unwrap();
        let e = EmbeddingMatrix::semantic(&h.semantic_similarity().unwrap()).unwrap();
        let back = EmbeddingMatrix::from_csv(&e.to_csv(), "mem").unwrap();
        assert_eq!(back, e);
        let oh = EmbeddingMatrix::onehot(4).unwrap();
        assert_eq!(
            EmbeddingMatrix::from_csv(&oh.to_csv(), "mem")
                .unwrap()
                .kind(),
            EmbeddingKind::Onehot
        );
    }

    #[test]
    fn gather_rejects_bad_label() {
        let e = EmbeddingMatrix::onehot(3).unwrap();
        assert!(matches!(
            e.gather(&[0, 3]),
            Err(Error::Label { label: 3, .. })
        ));
    }
}
