//! Plaintext dense linear algebra: the local reference power iteration, the
//! planted-spectrum test matrices, and the on-disk matrix format.
//!
//! Everything here runs on unencrypted data. The protocol client uses these
//! routines for setup and verification; benchmarks use
//! [`local_power_iteration`] as the baseline the outsourced run is compared
//! against.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinalgError {
    #[error("dimension must be at least 1")]
    BadDimension,
    #[error("expected {expected} values, got {got}")]
    DataLength { expected: usize, got: usize },
    #[error("vector length {got} does not match dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector is zero (or numerically zero)")]
    ZeroVector,
    #[error("non-finite value encountered")]
    NonFinite,
    #[error("{0}")]
    BadParameter(String),
    #[error("matrix file, line {line}: {what}")]
    Parse { line: usize, what: String },
    #[error("matrix file: {0}")]
    Io(String),
}

/// A dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if dim == 0 {
            return Err(LinalgError::BadDimension);
        }
        if data.len() != dim * dim {
            return Err(LinalgError::DataLength {
                expected: dim * dim,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(DenseMatrix { dim, data })
    }

    pub fn identity(dim: usize) -> Result<Self, LinalgError> {
        let mut m = DenseMatrix::new(dim, vec![0.0; dim * dim])?;
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// `A · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if x.len() != self.dim {
            return Err(LinalgError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self
            .rows()
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Operator infinity norm: the maximum absolute row sum.
    pub fn inf_norm(&self) -> f64 {
        self.rows()
            .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Renders the text form: dimension on the first line, then one
    /// whitespace-separated row per line. Values print in shortest-roundtrip
    /// form, so parsing the output reproduces the matrix exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{}", self.dim).unwrap();
        for row in self.rows() {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                write!(out, "{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses the text form accepted by [`to_text`](Self::to_text): a
    /// dimension line followed by exactly that many rows of that many finite
    /// decimal reals. Blank lines and surrounding whitespace are tolerated.
    pub fn parse_text(s: &str) -> Result<Self, LinalgError> {
        let mut lines = s
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (line_no, dim_line) = lines.next().ok_or(LinalgError::Parse {
            line: 1,
            what: "empty file".into(),
        })?;
        let dim: usize = dim_line.parse().map_err(|_| LinalgError::Parse {
            line: line_no,
            what: format!("expected a dimension, found {dim_line:?}"),
        })?;
        if dim == 0 {
            return Err(LinalgError::Parse {
                line: line_no,
                what: "dimension must be at least 1".into(),
            });
        }
        let mut data = Vec::with_capacity(dim * dim);
        for _ in 0..dim {
            let (line_no, row) = lines.next().ok_or(LinalgError::Parse {
                line: line_no,
                what: format!("expected {dim} rows, file ended early"),
            })?;
            let entries: Vec<&str> = row.split_whitespace().collect();
            if entries.len() != dim {
                return Err(LinalgError::Parse {
                    line: line_no,
                    what: format!("expected {dim} entries, found {}", entries.len()),
                });
            }
            for e in entries {
                let v: f64 = e.parse().map_err(|_| LinalgError::Parse {
                    line: line_no,
                    what: format!("not a number: {e:?}"),
                })?;
                if !v.is_finite() {
                    return Err(LinalgError::Parse {
                        line: line_no,
                        what: format!("non-finite entry: {e:?}"),
                    });
                }
                data.push(v);
            }
        }
        if let Some((line_no, extra)) = lines.next() {
            return Err(LinalgError::Parse {
                line: line_no,
                what: format!("unexpected trailing content: {extra:?}"),
            });
        }
        DenseMatrix::new(dim, data)
    }

    pub fn read_text_file(path: &Path) -> Result<Self, LinalgError> {
        let s = std::fs::read_to_string(path).map_err(|e| LinalgError::Io(e.to_string()))?;
        Self::parse_text(&s)
    }

    pub fn write_text_file(&self, path: &Path) -> Result<(), LinalgError> {
        std::fs::write(path, self.to_text()).map_err(|e| LinalgError::Io(e.to_string()))
    }
}

/// The signed infinity norm: the entry of largest magnitude, with its sign,
/// and its index. Ties break to the lowest index, which makes normalization
/// deterministic. Errors on zero vectors and non-finite entries.
pub fn inf_norm_signed(x: &[f64]) -> Result<(f64, usize), LinalgError> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let mut best = 0usize;
    let mut best_abs = 0.0f64;
    for (i, v) in x.iter().enumerate() {
        if v.abs() > best_abs {
            best_abs = v.abs();
            best = i;
        }
    }
    if best_abs == 0.0 {
        return Err(LinalgError::ZeroVector);
    }
    Ok((x[best], best))
}

/// `max_i |a_i - b_i|`. Panics if lengths differ (caller bug).
pub fn inf_dist(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "inf_dist length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Result of a power-iteration run, local or outsourced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenResult {
    pub eigenvalue: f64,
    pub eigenvector: Vec<f64>,
    /// Matrix-vector products performed.
    pub iterations: usize,
    /// False when the iteration cap was reached before the tolerance.
    pub converged: bool,
}

/// Power iteration with signed infinity-norm normalization.
///
/// The iterate is normalized so its largest-magnitude entry is exactly +1;
/// the normalizer of the final step is the eigenvalue estimate. Stops when
/// consecutive normalized iterates differ by at most `eps` in the infinity
/// norm, or after `omega` iterations (reported via `converged: false`).
///
/// `x0` is normalized the same way before the first multiplication, so two
/// runs started from `x0` and from any positive multiple of it are
/// identical.
pub fn local_power_iteration(
    a: &DenseMatrix,
    x0: &[f64],
    eps: f64,
    omega: usize,
) -> Result<EigenResult, LinalgError> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(LinalgError::BadParameter(
            "convergence tolerance must be positive and finite".into(),
        ));
    }
    if omega == 0 {
        return Err(LinalgError::BadParameter(
            "iteration cap must be at least 1".into(),
        ));
    }
    let (s0, _) = inf_norm_signed(x0)?;
    let mut x: Vec<f64> = x0.iter().map(|v| v / s0).collect();
    if x.len() != a.dim() {
        return Err(LinalgError::DimensionMismatch {
            expected: a.dim(),
            got: x.len(),
        });
    }
    let mut eigenvalue = 0.0;
    for k in 0..omega {
        let v = a.matvec(&x)?;
        let (s, _) = inf_norm_signed(&v)?;
        eigenvalue = s;
        let x_next: Vec<f64> = v.iter().map(|vi| vi / s).collect();
        let step = inf_dist(&x, &x_next);
        x = x_next;
        if step <= eps {
            return Ok(EigenResult {
                eigenvalue,
                eigenvector: x,
                iterations: k + 1,
                converged: true,
            });
        }
    }
    Ok(EigenResult {
        eigenvalue,
        eigenvector: x,
        iterations: omega,
        converged: false,
    })
}

/// A symmetric matrix with a known dominant eigenpair, for tests and
/// benchmarks.
#[derive(Debug, Clone)]
pub struct PlantedMatrix {
    pub matrix: DenseMatrix,
    /// The dominant eigenvalue, `±dominance`.
    pub eigenvalue: f64,
    /// Its eigenvector, normalized by the signed infinity norm.
    pub eigenvector: Vec<f64>,
}

/// Builds a random symmetric matrix whose dominant eigenvalue has magnitude
/// `dominance` (random sign) while every other eigenvalue has magnitude at
/// most 1. The ratio therefore controls the power-iteration convergence
/// rate, which keeps test run times predictable.
pub fn make_test_matrix<R: Rng + ?Sized>(
    dim: usize,
    dominance: f64,
    rng: &mut R,
) -> Result<PlantedMatrix, LinalgError> {
    if dim == 0 {
        return Err(LinalgError::BadDimension);
    }
    if !dominance.is_finite() || dominance <= 1.0 {
        return Err(LinalgError::BadParameter(
            "dominance ratio must be finite and exceed 1".into(),
        ));
    }
    let sign = |rng: &mut R| if rng.gen::<bool>() { 1.0 } else { -1.0 };

    // Random orthonormal basis via modified Gram-Schmidt, two passes for
    // numerical orthogonality. Columns are stored as rows of `q`.
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(dim);
    let mut draws = 0;
    while q.len() < dim {
        draws += 1;
        if draws > 64 * dim {
            return Err(LinalgError::BadParameter(
                "could not draw an independent basis (broken RNG?)".into(),
            ));
        }
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..2 {
            for u in &q {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= proj * ui;
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // numerically dependent draw; try again
        }
        for vi in &mut v {
            *vi /= norm;
        }
        q.push(v);
    }

    let mut d = vec![0.0; dim];
    d[0] = dominance * sign(rng);
    if dim > 1 {
        d[1] = sign(rng);
    }
    for dk in d.iter_mut().skip(2) {
        *dk = rng.gen_range(-0.9..0.9);
    }

    // A = Q D Qᵀ; symmetrize to scrub rounding asymmetry.
    let mut data = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut sum = 0.0;
            for (dk, qk) in d.iter().zip(&q) {
                sum += dk * qk[i] * qk[j];
            }
            data[i * dim + j] = sum;
            data[j * dim + i] = sum;
        }
    }
    let matrix = DenseMatrix::new(dim, data)?;

    let (s, _) = inf_norm_signed(&q[0])?;
    let eigenvector: Vec<f64> = q[0].iter().map(|v| v / s).collect();
    Ok(PlantedMatrix {
        matrix,
        eigenvalue: d[0],
        eigenvector,
    })
}
