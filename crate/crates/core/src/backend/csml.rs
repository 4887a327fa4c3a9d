//! Cosine similarity metric learning: an upper-triangular transform trained
//! with a triplet loss over mined hard negatives.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{all_pair_trials, cosine_score};
use crate::error::{Error, Result};
use crate::metrics::compute_eer;

#[derive(Debug, Clone, PartialEq)]
pub struct CsmlTransform {
    dim: usize,
    /// Row-major `dim x dim`.
    a: Vec<f64>,
}

impl CsmlTransform {
    pub const DIAG_FLOOR: f64 = 1e-4;

    pub fn identity(dim: usize) -> Self {
        let mut a = vec![0.0; dim * dim];
        for i in 0..dim {
            a[i * dim + i] = 1.0;
        }
        Self { dim, a }
    }

    /// Checks that the strict lower triangle is zero and the diagonal positive.
    pub fn from_matrix(dim: usize, a: Vec<f64>) -> Result<Self> {
        if a.len() != dim * dim || dim == 0 {
            return Err(Error::Dimension(format!("{} entries for a {dim}x{dim} transform", a.len())));
        }
        for r in 0..dim {
            for c in 0..dim {
                let v = a[r * dim + c];
                if !v.is_finite() || (c < r && v != 0.0) || (c == r && v <= 0.0) {
                    return Err(Error::Format(format!("not a valid upper-triangular transform at ({r}, {c})")));
                }
            }
        }
        Ok(Self { dim, a })
    }

    /// Zeroes the strict lower triangle and floors the diagonal.
    fn project(dim: usize, mut a: Vec<f64>) -> Self {
        for r in 0..dim {
            for c in 0..r {
                a[r * dim + c] = 0.0;
            }
            let d = &mut a[r * dim + r];
            *d = d.max(Self::DIAG_FLOOR);
        }
        Self { dim, a }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.a
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::from_matrix(self.dim, self.a.iter().map(|v| v * c).collect())
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!("embedding dim {} vs transform {}", x.len(), self.dim)));
        }
        Ok((0..self.dim).map(|r| (r..self.dim).map(|c| self.a[r * self.dim + c] * x[c]).sum()).collect())
    }

    fn as_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.a)
    }
}

/// Cosine similarity after applying the transform to both embeddings.
pub fn csml_score(x1: &[f64], x2: &[f64], a: &CsmlTransform) -> Result<f64> {
    cosine_score(&a.apply(x1)?, &a.apply(x2)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Transformed embeddings `U = X A^T`, their unit-length rows and norms.
struct Transformed {
    x: DMatrix<f64>,
    unit: DMatrix<f64>,
    norms: Vec<f64>,
}

fn transform_all(a: &CsmlTransform, embeddings: &[Vec<f64>]) -> Result<Transformed> {
    let n = embeddings.len();
    let d = a.dim;
    if n == 0 {
        return Err(Error::NoTriplets);
    }
    let mut x = DMatrix::zeros(n, d);
    for (i, e) in embeddings.iter().enumerate() {
        if e.len() != d {
            return Err(Error::Dimension(format!("embedding {i} has dim {}, transform {d}", e.len())));
        }
        x.row_mut(i).copy_from_slice(e);
    }
    let mut unit = &x * a.as_dmatrix().transpose();
    let mut norms = Vec::with_capacity(n);
    for mut row in unit.row_iter_mut() {
        let nrm = row.norm();
        if nrm == 0.0 || !nrm.is_finite() {
            return Err(Error::DegenerateEmbedding);
        }
        row /= nrm;
        norms.push(nrm);
    }
    Ok(Transformed { x, unit, norms })
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn check_triplets(triplets: &[Triplet], n: usize) -> Result<()> {
    if triplets.is_empty() {
        return Err(Error::NoTriplets);
    }
    if let Some(t) = triplets.iter().find(|t| t.anchor.max(t.positive).max(t.negative) >= n) {
        return Err(Error::Dimension(format!("triplet {t:?} indexes past {n} embeddings")));
    }
    Ok(())
}

/// `sum log(1 + exp(-(s_ap - s_an)))` with CSML scores.
pub fn triplet_loss(a: &CsmlTransform, embeddings: &[Vec<f64>], triplets: &[Triplet]) -> Result<f64> {
    check_triplets(triplets, embeddings.len())?;
    let t = transform_all(a, embeddings)?;
    let s = |i: usize, j: usize| t.unit.row(i).dot(&t.unit.row(j));
    Ok(triplets.iter().map(|tr| softplus(-(s(tr.anchor, tr.positive) - s(tr.anchor, tr.negative)))).sum())
}

/// Triplet loss and its gradient with respect to `A` (row-major), with the
/// strict lower triangle masked to zero.
pub fn triplet_loss_grad(a: &CsmlTransform, embeddings: &[Vec<f64>], triplets: &[Triplet]) -> Result<(f64, Vec<f64>)> {
    check_triplets(triplets, embeddings.len())?;
    let t = transform_all(a, embeddings)?;
    let n = embeddings.len();
    let scores = &t.unit * t.unit.transpose();
    // dL/dS for every pair that appears.
    let mut ds = DMatrix::zeros(n, n);
    let mut loss = 0.0;
    for tr in triplets {
        let d = scores[(tr.anchor, tr.positive)] - scores[(tr.anchor, tr.negative)];
        loss += softplus(-d);
        // d/dd log(1 + e^-d) = -sigmoid(-d)
        let w = -1.0 / (1.0 + d.exp());
        ds[(tr.anchor, tr.positive)] += w;
        ds[(tr.anchor, tr.negative)] -= w;
    }
    let sym = &ds + ds.transpose();
    let g_unit = &sym * &t.unit;
    // Through row normalization: dL/du = (g - (g.u_hat) u_hat) / |u|.
    let mut g_u = g_unit;
    for i in 0..n {
        let proj = g_u.row(i).dot(&t.unit.row(i));
        let mut row = g_u.row_mut(i);
        row -= proj * t.unit.row(i);
        row /= t.norms[i];
    }
    // u_i = A x_i, so dL/dA = G_u^T X.
    let ga = g_u.transpose() * &t.x;
    let d = a.dim;
    let mut grad = vec![0.0; d * d];
    for r in 0..d {
        for c in r..d {
            grad[r * d + c] = ga[(r, c)];
        }
    }
    Ok((loss, grad))
}

/// For every embedding with a same-label partner, pairs each positive with
/// the `n_hard` highest-scoring impostors (ties by lower index).
pub fn mine_triplets(embeddings: &[Vec<f64>], labels: &[usize], a: &CsmlTransform, n_hard: usize) -> Result<Vec<Triplet>> {
    if labels.len() != embeddings.len() {
        return Err(Error::Dimension(format!("{} labels for {} embeddings", labels.len(), embeddings.len())));
    }
    let n = embeddings.len();
    let has_positive = (0..n).any(|i| (0..n).any(|j| j != i && labels[j] == labels[i]));
    if !has_positive {
        return Err(Error::InsufficientPositives);
    }
    let t = transform_all(a, embeddings)?;
    let scores = &t.unit * t.unit.transpose();
    let mut out = Vec::new();
    for anchor in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != anchor && labels[j] == labels[anchor]).collect();
        if positives.is_empty() {
            continue;
        }
        let mut negatives: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[anchor]).collect();
        negatives.sort_by(|&x, &y| scores[(anchor, y)].total_cmp(&scores[(anchor, x)]).then(x.cmp(&y)));
        negatives.truncate(n_hard);
        for &positive in &positives {
            out.extend(negatives.iter().map(|&negative| Triplet { anchor, positive, negative }));
        }
    }
    if out.is_empty() {
        return Err(Error::NoTriplets);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsmlOptions {
    pub epochs: usize,
    /// Gradient steps on each epoch's mined triplets.
    pub steps_per_epoch: usize,
    pub n_hard: usize,
    /// Random subset size when mining yields more triplets.
    pub max_triplets: Option<usize>,
    pub initial_step: f64,
    /// Sufficient-decrease constant of the backtracking search.
    pub armijo: f64,
    pub max_backtracks: usize,
    pub seed: u64,
}

impl Default for CsmlOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            steps_per_epoch: 10,
            n_hard: 1500,
            max_triplets: Some(200_000),
            initial_step: 1.0,
            armijo: 1e-4,
            max_backtracks: 40,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsmlTrace {
    /// Mean triplet loss at the end of each epoch.
    pub losses: Vec<f64>,
    /// Validation EER, starting with the identity transform.
    pub val_eer: Vec<f64>,
    /// 0 means the identity transform was kept.
    pub best_epoch: usize,
}

fn validation_eer(a: &CsmlTransform, embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let t = transform_all(a, embeddings)?;
    let (s, l) = all_pair_trials(embeddings.len(), labels, |i, j| Ok(t.unit.row(i).dot(&t.unit.row(j))))?;
    compute_eer(&s, &l)
}

fn cap_triplets(mut t: Vec<Triplet>, max: Option<usize>, seed: u64, epoch: usize) -> Vec<Triplet> {
    match max {
        Some(k) if t.len() > k => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut keep = rand::seq::index::sample(&mut rng, t.len(), k).into_vec();
            keep.sort_unstable();
            keep.into_iter().map(|i| t[i]).collect()
        }
        _ => {
            t.shrink_to_fit();
            t
        }
    }
}

/// Full-batch projected gradient descent on the mean triplet loss from the
/// identity, remining every epoch. With a validation set the transform with
/// the lowest validation EER is returned (the identity included).
pub fn train_csml(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    validation: Option<(&[Vec<f64>], &[usize])>,
    opts: &CsmlOptions,
) -> Result<(CsmlTransform, CsmlTrace)> {
    let dim = embeddings.first().ok_or(Error::InsufficientPositives)?.len();
    let mut a = CsmlTransform::identity(dim);
    let mut trace = CsmlTrace::default();
    let mut best = (f64::INFINITY, a.clone());
    if let Some((ve, vl)) = validation {
        let e = validation_eer(&a, ve, vl)?;
        trace.val_eer.push(e);
        best = (e, a.clone());
    }
    let mut step = opts.initial_step;
    for epoch in 1..=opts.epochs {
        let triplets = cap_triplets(mine_triplets(embeddings, labels, &a, opts.n_hard)?, opts.max_triplets, opts.seed, epoch);
        let scale = 1.0 / triplets.len() as f64;
        let mut loss = triplet_loss(&a, embeddings, &triplets)? * scale;
        for _ in 0..opts.steps_per_epoch {
            let (_, mut g) = triplet_loss_grad(&a, embeddings, &triplets)?;
            g.iter_mut().for_each(|v| *v *= scale);
            let mut accepted = false;
            for _ in 0..opts.max_backtracks {
                let cand = CsmlTransform::project(dim, a.a.iter().zip(&g).map(|(x, gv)| x - step * gv).collect());
                let decrease: f64 = a.a.iter().zip(&cand.a).zip(&g).map(|((x, y), gv)| gv * (x - y)).sum();
                let cand_loss = triplet_loss(&cand, embeddings, &triplets)? * scale;
                if decrease > 0.0 && cand_loss <= loss - opts.armijo * decrease {
                    a = cand;
                    loss = cand_loss;
                    accepted = true;
                    step *= 2.0;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        trace.losses.push(loss);
        log::debug!("csml epoch {epoch}: loss {loss:.6} over {} triplets", triplets.len());
        if let Some((ve, vl)) = validation {
            let e = validation_eer(&a, ve, vl)?;
            trace.val_eer.push(e);
            if e < best.0 {
                best = (e, a.clone());
                trace.best_epoch = epoch;
            }
        }
    }
    let out = if validation.is_some() { best.1 } else { a };
    Ok((out, trace))
}
