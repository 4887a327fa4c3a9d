use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Adds `1e-6 * trace / d` to the diagonal.
pub(crate) fn add_ridge(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    let tr = m.trace();
    let eps = if tr > 0.0 { 1e-6 * tr / d as f64 } else { 1e-6 };
    for i in 0..d {
        m[(i, i)] += eps;
    }
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.first().ok_or_else(|| Error::Dimension("no embeddings".into()))?.len();
    let mut m = DMatrix::zeros(rows.len(), d);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::Dimension(format!("embedding {i} has dim {}, expected {d}", r.len())));
        }
        m.row_mut(i).copy_from_slice(r);
    }
    Ok(m)
}

/// Per-class sums and counts plus the global mean.
pub(crate) struct ClassStats {
    pub mean: DVector<f64>,
    pub counts: Vec<usize>,
    pub class_means: Vec<DVector<f64>>,
}

pub(crate) fn class_stats(x: &DMatrix<f64>, labels: &[usize]) -> Result<ClassStats> {
    if labels.len() != x.nrows() {
        return Err(Error::Dimension(format!("{} labels for {} embeddings", labels.len(), x.nrows())));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let d = x.ncols();
    let mut sums = vec![DVector::zeros(d); k];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        sums[l] += x.row(i).transpose();
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::InsufficientPositives);
    }
    let mean = x.row_sum().transpose() / x.nrows() as f64;
    let class_means = sums.into_iter().zip(&counts).map(|(s, &c)| if c > 0 { s / c as f64 } else { s }).collect();
    Ok(ClassStats { mean, counts, class_means })
}

/// Linear discriminant projection. Rows of the projection are ordered by
/// decreasing between/within scatter ratio and scaled so the projected
/// within-class scatter is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Lda {
    mean: Vec<f64>,
    /// Row-major `out_dim x in_dim`.
    projection: Vec<f64>,
    eigenvalues: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
}

impl Lda {
    pub fn fit(embeddings: &[Vec<f64>], labels: &[usize], out_dim: usize) -> Result<Self> {
        let x = rows_to_matrix(embeddings)?;
        let d = x.ncols();
        if out_dim == 0 || out_dim > d {
            return Err(Error::Config(format!("LDA output dim {out_dim} must be in 1..={d}")));
        }
        let stats = class_stats(&x, labels)?;
        let n = x.nrows() as f64;
        let mut sw = DMatrix::zeros(d, d);
        for (i, &l) in labels.iter().enumerate() {
            let r = x.row(i).transpose() - &stats.class_means[l];
            sw += &r * r.transpose();
        }
        sw /= n;
        let mut sb = DMatrix::zeros(d, d);
        for (m, &c) in stats.class_means.iter().zip(&stats.counts) {
            if c > 0 {
                let r = m - &stats.mean;
                sb += (c as f64 / n) * &r * r.transpose();
            }
        }
        add_ridge(&mut sw);
        let chol = sw.cholesky().ok_or_else(|| Error::Config("within-class scatter not positive definite".into()))?;
        let l = chol.l();
        let linv = l.clone().try_inverse().ok_or_else(|| Error::Config("singular within-class scatter".into()))?;
        let mut m = &linv * sb * linv.transpose();
        m = (&m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(m);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let w = linv.transpose() * &eig.eigenvectors;
        let mut projection = Vec::with_capacity(out_dim * d);
        let mut eigenvalues = Vec::with_capacity(out_dim);
        for &k in order.iter().take(out_dim) {
            let mut col: Vec<f64> = w.column(k).iter().copied().collect();
            // Sign convention: largest-magnitude entry positive.
            let big = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            if big < 0.0 {
                col.iter_mut().for_each(|v| *v = -*v);
            }
            projection.extend(col);
            eigenvalues.push(eig.eigenvalues[k]);
        }
        Ok(Self { mean: stats.mean.iter().copied().collect(), projection, eigenvalues, in_dim: d, out_dim })
    }

    /// `eigenvalues` may be empty when the scatter ratios are not known.
    pub fn from_parts(mean: Vec<f64>, projection: Vec<f64>, eigenvalues: Vec<f64>, out_dim: usize) -> Result<Self> {
        let in_dim = mean.len();
        if in_dim == 0 || out_dim == 0 || projection.len() != in_dim * out_dim {
            return Err(Error::Format(format!("LDA projection has {} entries for {out_dim}x{in_dim}", projection.len())));
        }
        if !eigenvalues.is_empty() && eigenvalues.len() != out_dim {
            return Err(Error::Format(format!("{} LDA eigenvalues for {out_dim} directions", eigenvalues.len())));
        }
        Ok(Self { mean, projection, eigenvalues, in_dim, out_dim })
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::Dimension(format!("LDA input dim {} vs {}", x.len(), self.in_dim)));
        }
        let c: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        Ok(self.projection.chunks(self.in_dim).map(|row| super::dot(row, &c)).collect())
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    /// Scatter ratios of the kept directions (possibly empty after `from_parts`).
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }
}
