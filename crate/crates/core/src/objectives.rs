//! Classification objectives for extractor training: softmax cross-entropy
//! and the angular-margin softmax (A-softmax).
//!
//! A-softmax logits for sample `i` are `|x_i| cos(theta_ij)` for the
//! competing classes and `|x_i| psi(theta_iy)` for the target class, where
//! `theta` is measured against unit-normalized classifier columns and
//! `psi(theta) = (-1)^k cos(m theta) - 2k` on `[k pi/m, (k+1) pi/m]`.
//! Optional annealing replaces the target term by
//! `(psi + lambda cos theta) / (1 + lambda)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardRule, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarginConfig {
    pub margin: u32,
    pub lambda_start: f64,
    /// Multiplicative decay of lambda per training step.
    pub lambda_decay: f64,
    pub lambda_min: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self { margin: 2, lambda_start: 1000.0, lambda_decay: 0.99, lambda_min: 5.0 }
    }
}

impl MarginConfig {
    /// Margin `m` with no annealing (lambda fixed at 0).
    pub fn without_annealing(margin: u32) -> Self {
        Self { margin, lambda_start: 0.0, lambda_decay: 1.0, lambda_min: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.margin) {
            return Err(Error::Config(format!("margin must be in 1..=4, got {}", self.margin)));
        }
        if !(self.lambda_start >= 0.0 && self.lambda_min >= 0.0 && self.lambda_decay > 0.0) {
            return Err(Error::Config("annealing parameters must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lambda_at(&self, step: u64) -> f64 {
        let decayed = self.lambda_start * self.lambda_decay.powf(step as f64);
        decayed.max(self.lambda_min)
    }
}

/// Chebyshev `T_m(c) = cos(m acos c)` and its derivative `m U_{m-1}(c)`.
fn chebyshev(c: f64, m: u32) -> (f64, f64) {
    match m {
        1 => (c, 1.0),
        2 => (2.0 * c * c - 1.0, 4.0 * c),
        3 => (4.0 * c.powi(3) - 3.0 * c, 12.0 * c * c - 3.0),
        4 => (8.0 * c.powi(4) - 8.0 * c * c + 1.0, 32.0 * c.powi(3) - 16.0 * c),
        _ => unreachable!("margin validated to 1..=4"),
    }
}

/// Monotone extension of `cos(m theta)` on `[0, pi]`.
pub fn psi(theta: f64, m: u32) -> f64 {
    let k = ((m as f64 * theta / PI).floor() as i64).clamp(0, m as i64 - 1);
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    sign * (m as f64 * theta).cos() - 2.0 * k as f64
}

/// `psi(acos c)` and its derivative with respect to `c`.
fn psi_of_cos(c: f64, m: u32) -> (f64, f64) {
    let theta = c.clamp(-1.0, 1.0).acos();
    let k = ((m as f64 * theta / PI).floor() as i64).clamp(0, m as i64 - 1);
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    let (t, dt) = chebyshev(c, m);
    (sign * t - 2.0 * k as f64, sign * dt)
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Dimension(format!("{} labels for batch of {batch}", labels.len())));
    }
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::InvalidLabel { label, classes }),
        None => Ok(()),
    }
}

/// Row-wise softmax probabilities and the mean negative log-likelihood.
fn softmax_rows(logits: &[f64], classes: usize, labels: &[usize]) -> (f64, Vec<f64>) {
    let mut probs = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (i, (row, p)) in logits.chunks(classes).zip(probs.chunks_mut(classes)).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for (pj, v) in p.iter_mut().zip(row) {
            *pj = (v - lse).exp();
        }
        loss += lse - row[labels[i]];
    }
    (loss / labels.len() as f64, probs)
}

/// Mean cross-entropy of softmax over `logits: B x N`.
pub fn softmax_ce(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(labels, logits.rows(), logits.cols())?;
    Ok(softmax_rows(logits.data(), logits.cols(), labels).0)
}

struct SoftmaxCeRule {
    labels: Vec<usize>,
}

impl BackwardRule for SoftmaxCeRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, up: &[f64]) -> Vec<Vec<f64>> {
        let classes = inputs[0].cols();
        let (_, mut probs) = softmax_rows(inputs[0].data(), classes, &self.labels);
        let scale = up[0] / self.labels.len() as f64;
        for (i, row) in probs.chunks_mut(classes).enumerate() {
            row[self.labels[i]] -= 1.0;
            row.iter_mut().for_each(|v| *v *= scale);
        }
        vec![probs]
    }
}

/// Graph node for [`softmax_ce`].
pub fn softmax_ce_node(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let loss = softmax_ce(g.value(logits), labels)?;
    g.custom(&[logits], Tensor::scalar(loss), Box::new(SoftmaxCeRule { labels: labels.to_vec() }))
}

struct AngularEval {
    loss: f64,
    dx: Vec<f64>,
    dw: Vec<f64>,
}

/// A-softmax loss with gradients for `x: B x D` and raw (unnormalized)
/// classifier weights `w: D x N`.
fn angular_eval(x: &Tensor, w: &Tensor, labels: &[usize], m: u32, lambda: f64, with_grad: bool) -> Result<AngularEval> {
    let (batch, dim) = (x.rows(), x.cols());
    if w.shape().len() != 2 || w.rows() != dim {
        return Err(Error::Dimension(format!(
            "a-softmax: features {:?} vs weights {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let classes = w.cols();
    check_labels(labels, batch, classes)?;

    let wd = w.data();
    let col_norm: Vec<f64> = (0..classes)
        .map(|j| (0..dim).map(|d| wd[d * classes + j].powi(2)).sum::<f64>().sqrt())
        .collect();
    if col_norm.iter().any(|&n| n == 0.0) {
        return Err(Error::DegenerateEmbedding);
    }
    // unit columns, stored class-major for contiguous access
    let unit: Vec<f64> = (0..classes)
        .flat_map(|j| (0..dim).map(move |d| (j, d)))
        .map(|(j, d)| wd[d * classes + j] / col_norm[j])
        .collect();

    let mix = |v: f64, c: f64| (v + lambda * c) / (1.0 + lambda);
    let mut logits = vec![0.0; batch * classes];
    let mut target = Vec::with_capacity(batch);
    for i in 0..batch {
        let xi = x.row(i);
        let norm = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::DegenerateFeature(i));
        }
        for j in 0..classes {
            logits[i * classes + j] = xi.iter().zip(&unit[j * dim..(j + 1) * dim]).map(|(a, b)| a * b).sum();
        }
        let y = labels[i];
        let cos = (logits[i * classes + y] / norm).clamp(-1.0, 1.0);
        let (p, dp) = psi_of_cos(cos, m);
        logits[i * classes + y] = norm * mix(p, cos);
        target.push((norm, cos, mix(p, cos), mix(dp, 1.0)));
    }
    let (loss, probs) = softmax_rows(&logits, classes, labels);
    if !with_grad {
        return Ok(AngularEval { loss, dx: Vec::new(), dw: Vec::new() });
    }

    let mut dx = vec![0.0; batch * dim];
    let mut dunit = vec![0.0; classes * dim];
    for i in 0..batch {
        let xi = x.row(i);
        let y = labels[i];
        let (norm, cos, phi, dphi) = target[i];
        let dxi = &mut dx[i * dim..(i + 1) * dim];
        for j in 0..classes {
            let gij = (probs[i * classes + j] - if j == y { 1.0 } else { 0.0 }) / batch as f64;
            let uj = &unit[j * dim..(j + 1) * dim];
            let duj = &mut dunit[j * dim..(j + 1) * dim];
            if j == y {
                // d(norm * phi(cos)) / dx = phi xhat + phi' (u - cos xhat)
                for d in 0..dim {
                    let xhat = xi[d] / norm;
                    dxi[d] += gij * (phi * xhat + dphi * (uj[d] - cos * xhat));
                    duj[d] += gij * dphi * xi[d];
                }
            } else {
                for d in 0..dim {
                    dxi[d] += gij * uj[d];
                    duj[d] += gij * xi[d];
                }
            }
        }
    }
    // back through column normalization: dv = (du - u (u . du)) / |v|
    let mut dw = vec![0.0; dim * classes];
    for j in 0..classes {
        let uj = &unit[j * dim..(j + 1) * dim];
        let duj = &dunit[j * dim..(j + 1) * dim];
        let proj: f64 = uj.iter().zip(duj).map(|(a, b)| a * b).sum();
        for d in 0..dim {
            dw[d * classes + j] = (duj[d] - uj[d] * proj) / col_norm[j];
        }
    }
    Ok(AngularEval { loss, dx, dw })
}

/// Mean A-softmax loss for features `x: B x D`, classifier weights
/// `w: D x N` (columns normalized internally), margin `m` and annealing
/// weight `lambda` (0 disables annealing).
pub fn asoftmax_loss(x: &Tensor, w: &Tensor, labels: &[usize], m: u32, lambda: f64) -> Result<f64> {
    MarginConfig::without_annealing(m).validate()?;
    if !(lambda >= 0.0) {
        return Err(Error::Config("lambda must be non-negative".into()));
    }
    Ok(angular_eval(x, w, labels, m, lambda, false)?.loss)
}

struct AngularRule {
    labels: Vec<usize>,
    m: u32,
    lambda: f64,
}

impl BackwardRule for AngularRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, up: &[f64]) -> Vec<Vec<f64>> {
        let eval = angular_eval(inputs[0], inputs[1], &self.labels, self.m, self.lambda, true)
            .expect("inputs validated in forward");
        let scale = |v: Vec<f64>| v.into_iter().map(|g| g * up[0]).collect();
        vec![scale(eval.dx), scale(eval.dw)]
    }
}

/// Graph node for [`asoftmax_loss`]; gradients flow to both `x` and `w`.
pub fn asoftmax_node(g: &mut Graph, x: Var, w: Var, labels: &[usize], m: u32, lambda: f64) -> Result<Var> {
    let loss = asoftmax_loss(g.value(x), g.value(w), labels, m, lambda)?;
    let rule = AngularRule { labels: labels.to_vec(), m, lambda };
    g.custom(&[x, w], Tensor::scalar(loss), Box::new(rule))
}

/// Training objective of the classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Softmax,
    Asoftmax(MarginConfig),
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Softmax => Ok(()),
            Self::Asoftmax(m) => m.validate(),
        }
    }
}
