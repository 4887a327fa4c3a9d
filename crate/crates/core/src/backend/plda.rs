//! Two-covariance PLDA: `x = mu + s + e` with speaker factor
//! `s ~ N(0, B)` and residual `e ~ N(0, W)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::lda::{add_ridge, class_stats, rows_to_matrix, Lda};
use super::{length_normalize, mean_vector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    mean: DVector<f64>,
    between: DMatrix<f64>,
    within: DMatrix<f64>,
    // Scoring form: x1'Q x1 + x2'Q x2 + x1'P x2 + c.
    quad: DMatrix<f64>,
    cross: DMatrix<f64>,
    constant: f64,
}

fn square(d: usize, data: &[f64], what: &str) -> Result<DMatrix<f64>> {
    if data.len() != d * d {
        return Err(Error::Dimension(format!("{what}: {} entries for {d}x{d}", data.len())));
    }
    Ok(DMatrix::from_row_slice(d, d, data))
}

fn log_det_chol(m: &DMatrix<f64>, what: &str) -> Result<(f64, DMatrix<f64>)> {
    let chol = m.clone().cholesky().ok_or_else(|| Error::Config(format!("{what} is not positive definite")))?;
    let ld = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok((ld, chol.inverse()))
}

impl PldaModel {
    /// Builds a model from known parameters (row-major covariances).
    pub fn from_params(mean: Vec<f64>, between: &[f64], within: &[f64]) -> Result<Self> {
        let d = mean.len();
        let b = square(d, between, "between covariance")?;
        let w = square(d, within, "within covariance")?;
        Self::from_matrices(DVector::from_vec(mean), b, w)
    }

    fn from_matrices(mean: DVector<f64>, between: DMatrix<f64>, within: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Dimension("empty PLDA model".into()));
        }
        let sym = |m: &DMatrix<f64>| (m - m.transpose()).abs().max() <= 1e-9 * m.abs().max().max(1.0);
        if !sym(&between) || !sym(&within) {
            return Err(Error::Config("PLDA covariances must be symmetric".into()));
        }
        let min_eig = SymmetricEigen::new(between.clone()).eigenvalues.min();
        if min_eig < -1e-9 * between.abs().max().max(1e-300) {
            return Err(Error::Config("between-class covariance is not positive semi-definite".into()));
        }
        let total = &between + &within;
        let mut joint = DMatrix::zeros(2 * d, 2 * d);
        joint.view_mut((0, 0), (d, d)).copy_from(&total);
        joint.view_mut((d, d), (d, d)).copy_from(&total);
        joint.view_mut((0, d), (d, d)).copy_from(&between);
        joint.view_mut((d, 0), (d, d)).copy_from(&between);
        within.clone().cholesky().ok_or_else(|| Error::Config("within-class covariance is not positive definite".into()))?;
        let (ld_total, total_inv) = log_det_chol(&total, "total covariance")?;
        let (ld_joint, joint_inv) = log_det_chol(&joint, "same-speaker covariance")?;
        let a = joint_inv.view((0, 0), (d, d)).into_owned();
        let c = joint_inv.view((0, d), (d, d)).into_owned();
        let quad = 0.5 * (total_inv - a);
        let cross = -c;
        let constant = -0.5 * ld_joint + ld_total;
        Ok(Self { mean, between, within, quad, cross, constant })
    }

    /// EM fit of `mu`, `B` and `W`. Each iteration works in the basis that
    /// whitens `W` and diagonalizes `B`, so per-speaker posteriors are diagonal.
    pub fn fit(embeddings: &[Vec<f64>], labels: &[usize], iterations: usize) -> Result<Self> {
        let x = rows_to_matrix(embeddings)?;
        let stats = class_stats(&x, labels)?;
        if stats.counts.iter().filter(|&&c| c >= 2).count() < 2 {
            return Err(Error::InsufficientPositives);
        }
        let (n, d) = (x.nrows(), x.ncols());
        let mu = stats.mean.clone();
        let classes: Vec<usize> = (0..stats.counts.len()).filter(|&k| stats.counts[k] > 0).collect();
        let k_count = classes.len() as f64;
        // Centered data and class means.
        let mut xc = x.clone();
        for mut r in xc.row_iter_mut() {
            r -= mu.transpose();
        }
        let means: Vec<DVector<f64>> = stats.class_means.iter().map(|m| m - &mu).collect();
        let scatter = xc.transpose() * &xc;

        let mut w = DMatrix::zeros(d, d);
        for (i, &l) in labels.iter().enumerate() {
            let r = xc.row(i).transpose() - &means[l];
            w += &r * r.transpose();
        }
        w /= n as f64;
        add_ridge(&mut w);
        let mut b = DMatrix::zeros(d, d);
        for &k in &classes {
            b += &means[k] * means[k].transpose();
        }
        b /= k_count;
        add_ridge(&mut b);

        for _ in 0..iterations {
            let chol = w.clone().cholesky().ok_or_else(|| Error::Config("within-class covariance lost definiteness".into()))?;
            let l = chol.l();
            let linv = l.clone().try_inverse().ok_or_else(|| Error::Config("singular within-class covariance".into()))?;
            let m = &linv * &b * linv.transpose();
            let eig = SymmetricEigen::new((&m + m.transpose()) * 0.5);
            let lam: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
            // y = V'(x - mu), V = L^-T U; back-map with V^-T = L U.
            let v = linv.transpose() * &eig.eigenvectors;
            let back = &l * &eig.eigenvectors;
            let mut b_acc = DMatrix::zeros(d, d);
            let mut w_acc = v.transpose() * &scatter * &v;
            for &k in &classes {
                let nk = stats.counts[k] as f64;
                let ybar = v.transpose() * &means[k];
                let post_var = DVector::from_iterator(d, lam.iter().map(|&lv| lv / (1.0 + nk * lv)));
                let post_mean = DVector::from_iterator(d, ybar.iter().zip(&lam).map(|(y, &lv)| nk * lv / (1.0 + nk * lv) * y));
                let outer = &post_mean * post_mean.transpose();
                b_acc += &outer;
                w_acc += nk * &outer - nk * (&ybar * post_mean.transpose() + &post_mean * ybar.transpose());
                for i in 0..d {
                    b_acc[(i, i)] += post_var[i];
                    w_acc[(i, i)] += nk * post_var[i];
                }
            }
            b = &back * (b_acc / k_count) * back.transpose();
            w = &back * (w_acc / n as f64) * back.transpose();
            b = (&b + b.transpose()) * 0.5;
            w = (&w + w.transpose()) * 0.5;
            add_ridge(&mut w);
        }
        Self::from_matrices(mu, b, w)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.mean.iter().copied().collect()
    }

    /// Row-major between-speaker covariance.
    pub fn between(&self) -> Vec<f64> {
        self.between.transpose().iter().copied().collect()
    }

    /// Row-major within-speaker covariance.
    pub fn within(&self) -> Vec<f64> {
        self.within.transpose().iter().copied().collect()
    }

    /// `log p(x1, x2 | same speaker) - log p(x1, x2 | different speakers)`.
    pub fn score(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        let d = self.dim();
        if x1.len() != d || x2.len() != d {
            return Err(Error::Dimension(format!("PLDA dim {d} vs inputs {} and {}", x1.len(), x2.len())));
        }
        let a = DVector::from_column_slice(x1) - &self.mean;
        let b = DVector::from_column_slice(x2) - &self.mean;
        let s = a.dot(&(&self.quad * &a)) + b.dot(&(&self.quad * &b)) + a.dot(&(&self.cross * &b)) + self.constant;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PldaBackendOptions {
    /// LDA output dimension; `None` skips LDA.
    pub lda_dim: Option<usize>,
    pub length_norm: bool,
    pub em_iterations: usize,
}

impl Default for PldaBackendOptions {
    fn default() -> Self {
        Self { lda_dim: Some(200), length_norm: true, em_iterations: 10 }
    }
}

/// Centering, optional LDA, optional length normalization, then PLDA.
#[derive(Debug, Clone, PartialEq)]
pub struct PldaBackend {
    pub mean: Vec<f64>,
    pub lda: Option<Lda>,
    pub length_norm: bool,
    pub plda: PldaModel,
}

impl PldaBackend {
    pub fn fit(embeddings: &[Vec<f64>], labels: &[usize], opts: &PldaBackendOptions) -> Result<Self> {
        let mean = mean_vector(embeddings)?;
        let centered = super::center(embeddings, &mean)?;
        let lda = match opts.lda_dim {
            Some(k) => Some(Lda::fit(&centered, labels, k.min(mean.len()))?),
            None => None,
        };
        let mut partial = Self { mean, lda, length_norm: opts.length_norm, plda: PldaModel::from_params(vec![0.0], &[0.0], &[1.0])? };
        let reduced = embeddings.iter().map(|e| partial.transform(e)).collect::<Result<Vec<_>>>()?;
        partial.plda = PldaModel::fit(&reduced, labels, opts.em_iterations)?;
        Ok(partial)
    }

    /// The vector PLDA sees for an embedding.
    pub fn transform(&self, e: &[f64]) -> Result<Vec<f64>> {
        let mut v: Vec<f64> = super::center(&[e.to_vec()], &self.mean)?.remove(0);
        if let Some(l) = &self.lda {
            v = l.project(&v)?;
        }
        if self.length_norm {
            v = length_normalize(&v)?;
        }
        Ok(v)
    }

    pub fn score(&self, e1: &[f64], e2: &[f64]) -> Result<f64> {
        self.plda.score(&self.transform(e1)?, &self.transform(e2)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss2_logpdf(x: [f64; 2], s11: f64, s12: f64, s22: f64) -> f64 {
        let det = s11 * s22 - s12 * s12;
        let q = (s22 * x[0] * x[0] - 2.0 * s12 * x[0] * x[1] + s11 * x[1] * x[1]) / det;
        -0.5 * q - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln()
    }

    fn gauss1_logpdf(x: f64, s: f64) -> f64 {
        -0.5 * x * x / s - 0.5 * (2.0 * std::f64::consts::PI * s).ln()
    }

    #[test]
    fn one_dimensional_closed_form() {
        let (mu, b, w) = (0.3, 2.0, 0.5);
        let m = PldaModel::from_params(vec![mu], &[b], &[w]).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (x1, x2) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
            let (a, c) = (x1 - mu, x2 - mu);
            let want = gauss2_logpdf([a, c], b + w, b, b + w) - gauss1_logpdf(a, b + w) - gauss1_logpdf(c, b + w);
            assert!((m.score(&[x1], &[x2]).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_between_covariance_gives_flat_scores() {
        let m = PldaModel::from_params(vec![0.0, 0.0], &[1e-12, 0.0, 0.0, 1e-12], &[1.0, 0.2, 0.2, 1.5]).unwrap();
        let s1 = m.score(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        let s2 = m.score(&[1.0, 2.0], &[-3.0, 0.5]).unwrap();
        assert!((s1 - s2).abs() < 1e-10);
        assert!(s1.abs() < 1e-10);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(PldaModel::from_params(vec![0.0; 2], &[1.0, 0.5, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0]).is_err());
        assert!(PldaModel::from_params(vec![0.0; 2], &[-1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0]).is_err());
        assert!(PldaModel::from_params(vec![0.0; 2], &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0, 0.0, 1.0]).is_err());
        assert!(PldaModel::fit(&[vec![1.0], vec![2.0], vec![3.0]], &[0, 0, 1], 3).is_err());
    }

    fn sample(r: &mut ChaCha8Rng, spk: usize, per: usize, bstd: &[f64], wstd: &[f64]) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut e = Vec::new();
        let mut l = Vec::new();
        for s in 0..spk {
            let y: Vec<f64> = bstd.iter().map(|b| b * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut *r)).collect();
            for _ in 0..per {
                e.push(y.iter().zip(wstd).map(|(m, w)| 1.0 + m + w * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut *r)).collect());
                l.push(s);
            }
        }
        (e, l)
    }

    #[test]
    fn em_recovers_diagonal_parameters() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let (bstd, wstd) = ([2.0, 1.0, 0.5], [0.5, 1.0, 0.8]);
        let (e, l) = sample(&mut r, 400, 8, &bstd, &wstd);
        let m = PldaModel::fit(&e, &l, 20).unwrap();
        let (b, w) = (m.between(), m.within());
        for k in 0..3 {
            assert!((b[k * 3 + k] / (bstd[k] * bstd[k]) - 1.0).abs() < 0.2, "{b:?}");
            assert!((w[k * 3 + k] / (wstd[k] * wstd[k]) - 1.0).abs() < 0.1, "{w:?}");
        }
    }

    #[test]
    fn same_embedding_beats_other_speaker() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let (e, l) = sample(&mut r, 50, 6, &[3.0, 3.0, 3.0, 3.0], &[0.5; 4]);
        let m = PldaModel::fit(&e, &l, 10).unwrap();
        let mut wins = 0;
        let trials = 500;
        for _ in 0..trials {
            let i = r.random_range(0..e.len());
            let j = loop {
                let j = r.random_range(0..e.len());
                if l[j] != l[i] {
                    break j;
                }
            };
            if m.score(&e[i], &e[i]).unwrap() > m.score(&e[i], &e[j]).unwrap() {
                wins += 1;
            }
        }
        assert!(wins as f64 >= 0.9 * trials as f64, "{wins}");
    }

    #[test]
    fn backend_scores_unit_length_vectors() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let (e, l) = sample(&mut r, 30, 5, &[2.0; 6], &[0.7; 6]);
        let be = PldaBackend::fit(&e, &l, &PldaBackendOptions { lda_dim: Some(4), ..Default::default() }).unwrap();
        for x in &e {
            let t = be.transform(x).unwrap();
            assert_eq!(t.len(), 4);
            assert!((t.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let same = be.score(&e[0], &e[1]).unwrap();
        assert!(same.is_finite());
        let off = PldaBackend::fit(&e, &l, &PldaBackendOptions { lda_dim: None, length_norm: false, em_iterations: 3 }).unwrap();
        assert_eq!(off.transform(&e[0]).unwrap().len(), 6);
    }
}
