//! Scoring backends for fixed-length embeddings.
//!
//! Embeddings are plain `f64` vectors; speaker labels travel alongside as
//! class indices.

mod csml;
mod lda;
mod plda;

pub use csml::{csml_score, mine_triplets, train_csml, triplet_loss, triplet_loss_grad, CsmlOptions, CsmlTrace, CsmlTransform, Triplet};
pub use lda::Lda;
pub use plda::{PldaBackend, PldaBackendOptions, PldaModel};

use crate::error::{Error, Result};

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("embedding dims {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// Cosine of the angle between two embeddings.
pub fn cosine_score(x1: &[f64], x2: &[f64]) -> Result<f64> {
    check_dims(x1, x2)?;
    let (n1, n2) = (norm(x1), norm(x2));
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    Ok((dot(x1, x2) / (n1 * n2)).clamp(-1.0, 1.0))
}

/// Scales to unit length.
pub fn length_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(x.iter().map(|v| v / n).collect())
}

pub fn mean_vector(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = embeddings.first().ok_or_else(|| Error::Dimension("no embeddings".into()))?;
    let mut m = vec![0.0; first.len()];
    for e in embeddings {
        check_dims(e, &m)?;
        for (a, v) in m.iter_mut().zip(e) {
            *a += v;
        }
    }
    let n = embeddings.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    Ok(m)
}

/// Subtracts a development-set mean from every embedding.
pub fn center(embeddings: &[Vec<f64>], dev_mean: &[f64]) -> Result<Vec<Vec<f64>>> {
    embeddings
        .iter()
        .map(|e| {
            check_dims(e, dev_mean)?;
            Ok(e.iter().zip(dev_mean).map(|(a, b)| a - b).collect())
        })
        .collect()
}

/// Maps arbitrary labels to dense class indices in order of first appearance.
pub fn index_labels<T: Eq + std::hash::Hash + Clone>(labels: &[T]) -> (Vec<usize>, Vec<T>) {
    let mut names = Vec::new();
    let mut map = std::collections::HashMap::new();
    let idx = labels
        .iter()
        .map(|l| {
            *map.entry(l.clone()).or_insert_with(|| {
                names.push(l.clone());
                names.len() - 1
            })
        })
        .collect();
    (idx, names)
}

/// Scores and labels of every unordered pair, target when labels agree.
pub fn all_pair_trials<F>(n: usize, labels: &[usize], mut score: F) -> Result<(Vec<f64>, Vec<bool>)>
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    let mut s = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    let mut t = Vec::with_capacity(s.capacity());
    for i in 0..n {
        for j in i + 1..n {
            s.push(score(i, j)?);
            t.push(labels[i] == labels[j]);
        }
    }
    Ok((s, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let x = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((cosine_score(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_score(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!((cosine_score(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(cosine_score(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::DegenerateEmbedding)));
        assert!(cosine_score(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn centering() {
        let e = vec![vec![1.0, 2.0], vec![3.0, -4.0], vec![-1.0, 0.5]];
        assert_eq!(center(&e, &[0.0, 0.0]).unwrap(), e);
        let m = mean_vector(&e).unwrap();
        let c = center(&e, &m).unwrap();
        let cm = mean_vector(&c).unwrap();
        assert!(cm.iter().all(|v| v.abs() < 1e-15));
        // Scores after centering equal a direct recomputation and differ from raw.
        let direct = {
            let a: Vec<f64> = e[0].iter().zip(&m).map(|(x, y)| x - y).collect();
            let b: Vec<f64> = e[1].iter().zip(&m).map(|(x, y)| x - y).collect();
            dot(&a, &b) / (norm(&a) * norm(&b))
        };
        assert!((cosine_score(&c[0], &c[1]).unwrap() - direct).abs() < 1e-15);
        assert!((cosine_score(&e[0], &e[1]).unwrap() - direct).abs() > 1e-3);
        assert!(center(&e, &[1.0]).is_err());
    }

    #[test]
    fn label_indexing() {
        let (idx, names) = index_labels(&["b", "a", "b", "c"]);
        assert_eq!(idx, vec![0, 1, 0, 2]);
        assert_eq!(names, vec!["b", "a", "c"]);
    }
}
