//! Trained scoring backends, their archive form and trial scoring.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::archive::{Archive, DType};
use super::config::{BackendConfig, BackendKind};
use super::data::EmbeddingSet;
use crate::backend::{center, cosine_score, csml_score, mean_vector, train_csml, CsmlTrace, CsmlTransform, Lda, PldaBackend, PldaModel};
use crate::error::{Error, Result};
use crate::metrics::{ScoredTrial, Trial};

#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    /// Cosine similarity, optionally after subtracting a mean.
    Cosine { mean: Option<Vec<f64>> },
    Csml { mean: Option<Vec<f64>>, transform: CsmlTransform },
    Plda(PldaBackend),
}

fn centered(mean: &Option<Vec<f64>>, x: &[f64]) -> Result<Vec<f64>> {
    match mean {
        Some(m) => Ok(center(&[x.to_vec()], m)?.remove(0)),
        None => Ok(x.to_vec()),
    }
}

fn push_vec(a: &mut Archive, name: &str, v: &[f64]) -> Result<()> {
    a.push(name, DType::F64, vec![v.len()], v.to_vec())
}

fn square(a: &Archive, name: &str) -> Result<(usize, Vec<f64>)> {
    let t = a.get(name)?;
    match t.shape[..] {
        [r, c] if r == c => Ok((r, t.data.clone())),
        _ => Err(Error::Format(format!("{name} must be a square matrix"))),
    }
}

impl Scorer {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Cosine { .. } => "cosine",
            Self::Csml { .. } => "csml",
            Self::Plda(_) => "plda",
        }
    }

    pub fn score(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        match self {
            Self::Cosine { mean } => cosine_score(&centered(mean, x1)?, &centered(mean, x2)?),
            Self::Csml { mean, transform } => csml_score(&centered(mean, x1)?, &centered(mean, x2)?, transform),
            Self::Plda(p) => p.score(x1, x2),
        }
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new("backend");
        a.meta.insert("scorer".into(), self.name().into());
        match self {
            Self::Cosine { mean } | Self::Csml { mean, .. } => {
                if let Some(m) = mean {
                    push_vec(&mut a, "mean", m)?;
                }
                if let Self::Csml { transform, .. } = self {
                    let d = transform.dim();
                    a.push("csml", DType::F64, vec![d, d], transform.matrix().to_vec())?;
                }
            }
            Self::Plda(p) => {
                push_vec(&mut a, "mean", &p.mean)?;
                a.meta.insert("length_norm".into(), p.length_norm.to_string());
                if let Some(l) = &p.lda {
                    push_vec(&mut a, "lda.mean", l.mean())?;
                    a.push("lda.projection", DType::F64, vec![l.out_dim(), l.in_dim()], l.projection().to_vec())?;
                    push_vec(&mut a, "lda.eigenvalues", l.eigenvalues())?;
                }
                let d = p.plda.dim();
                push_vec(&mut a, "plda.mean", &p.plda.mean())?;
                a.push("plda.between", DType::F64, vec![d, d], p.plda.between())?;
                a.push("plda.within", DType::F64, vec![d, d], p.plda.within())?;
            }
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind("backend")?;
        let mean = a.get("mean").ok().map(|t| t.data.clone());
        match a.meta_value("scorer")? {
            "cosine" => Ok(Self::Cosine { mean }),
            "csml" => {
                let (d, m) = square(a, "csml")?;
                Ok(Self::Csml { mean, transform: CsmlTransform::from_matrix(d, m)? })
            }
            "plda" => {
                let lda = match a.get("lda.projection") {
                    Ok(p) => Some(Lda::from_parts(a.get("lda.mean")?.data.clone(), p.data.clone(), a.get("lda.eigenvalues")?.data.clone(), p.shape[0])?),
                    Err(_) => None,
                };
                let (_, between) = square(a, "plda.between")?;
                let (_, within) = square(a, "plda.within")?;
                let plda = PldaModel::from_params(a.get("plda.mean")?.data.clone(), &between, &within)?;
                let mean = mean.ok_or_else(|| Error::Format("PLDA backend without mean".into()))?;
                Ok(Self::Plda(PldaBackend { mean, lda, length_norm: a.meta_parse("length_norm")?, plda }))
            }
            other => Err(Error::Format(format!("unknown scorer {other:?}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}

/// Splits speaker indices into (train, validation) by a seeded shuffle.
fn split_speakers(n_spk: usize, fraction: f64, seed: u64) -> (Vec<bool>, usize) {
    let k = (fraction * n_spk as f64).round() as usize;
    let mut order: Vec<usize> = (0..n_spk).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut held = vec![false; n_spk];
    order.iter().take(k).for_each(|&s| held[s] = true);
    (held, k)
}

/// Fits the backend selected in `cfg` on labeled training embeddings. The
/// CSML trace is returned for the CSML backend.
pub fn train_backend(cfg: &BackendConfig, train: &EmbeddingSet) -> Result<(Scorer, Option<CsmlTrace>)> {
    let vectors = train.vectors();
    let mean = if cfg.center { Some(mean_vector(&vectors)?) } else { None };
    match cfg.kind {
        BackendKind::Cosine => Ok((Scorer::Cosine { mean }, None)),
        BackendKind::Csml => {
            let (labels, names) = train.labels()?;
            let xs = match &mean {
                Some(m) => center(&vectors, m)?,
                None => vectors,
            };
            let (held, k) = split_speakers(names.len(), cfg.csml_validation_fraction, cfg.csml.seed);
            let (transform, trace) = if k >= 2 && names.len() - k >= 2 {
                let (mut tx, mut tl, mut vx, mut vl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
                for (x, &l) in xs.into_iter().zip(&labels) {
                    if held[l] {
                        vx.push(x);
                        vl.push(l);
                    } else {
                        tx.push(x);
                        tl.push(l);
                    }
                }
                train_csml(&tx, &tl, Some((&vx, &vl)), &cfg.csml)?
            } else {
                train_csml(&xs, &labels, None, &cfg.csml)?
            };
            Ok((Scorer::Csml { mean, transform }, Some(trace)))
        }
        BackendKind::LdaPlda => {
            let (labels, _) = train.labels()?;
            Ok((Scorer::Plda(PldaBackend::fit(&vectors, &labels, &cfg.plda)?), None))
        }
    }
}

/// Scores every trial in order; both sides must be present in `embeddings`.
pub fn score_trials(scorer: &Scorer, embeddings: &EmbeddingSet, trials: &[Trial]) -> Result<Vec<ScoredTrial>> {
    let index = embeddings.index();
    let lookup = |id: &str| -> Result<&[f64]> {
        index.get(id).map(|&i| embeddings.items[i].vector.as_slice()).ok_or_else(|| Error::Format(format!("no embedding for {id}")))
    };
    trials
        .par_iter()
        .map(|t| Ok(ScoredTrial { trial: t.clone(), score: scorer.score(lookup(&t.enroll)?, lookup(&t.test)?)? }))
        .collect()
}
