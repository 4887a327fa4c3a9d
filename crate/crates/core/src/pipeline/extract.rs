//! Full-utterance embedding extraction.

use rayon::prelude::*;

use super::archive::round_f32;
use super::data::{EmbeddingItem, EmbeddingSet, FeatureSet};
use crate::backend::{all_pair_trials, cosine_score};
use crate::error::{Error, Result};
use crate::metrics::compute_eer;
use crate::models::ExtractorModel;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedUtterance {
    pub id: String,
    pub frames: usize,
    pub needed: usize,
}

/// One embedding per utterance, in input order, rounded to `f32` like the
/// embedding archive. Utterances shorter than the receptive field are
/// skipped and reported.
pub fn extract_embeddings(model: &ExtractorModel, set: &FeatureSet) -> Result<(EmbeddingSet, Vec<SkippedUtterance>)> {
    let needed = model.min_frames();
    let out: Vec<std::result::Result<EmbeddingItem, SkippedUtterance>> = set
        .utterances
        .par_iter()
        .map(|u| {
            if u.features.frames() < needed {
                return Ok(Err(SkippedUtterance { id: u.id.clone(), frames: u.features.frames(), needed }));
            }
            let v = model.forward_embed(&u.features)?;
            Ok(Ok(EmbeddingItem { id: u.id.clone(), speaker: u.speaker.clone(), vector: v.into_iter().map(round_f32).collect() }))
        })
        .collect::<Result<_>>()?;
    let mut items = Vec::with_capacity(out.len());
    let mut skipped = Vec::new();
    for r in out {
        match r {
            Ok(e) => items.push(e),
            Err(s) => {
                log::warn!("skipping {}: {} frames, receptive field needs {}", s.id, s.frames, s.needed);
                skipped.push(s);
            }
        }
    }
    Ok((EmbeddingSet { items }, skipped))
}

/// One `id frames needed` line per skipped utterance.
pub fn write_skip_manifest(skipped: &[SkippedUtterance]) -> String {
    skipped.iter().map(|s| format!("{} {} {}\n", s.id, s.frames, s.needed)).collect()
}

/// EER of cosine scoring over every pair of labeled embeddings.
pub fn cosine_eer(set: &EmbeddingSet) -> Result<f64> {
    let labeled: Vec<&EmbeddingItem> = set.items.iter().filter(|e| e.speaker.is_some()).collect();
    if labeled.len() < 2 {
        return Err(Error::DegenerateTrials("fewer than two labeled embeddings".into()));
    }
    let names: Vec<&str> = labeled.iter().map(|e| e.speaker.as_deref().expect("labeled")).collect();
    let (labels, _) = crate::backend::index_labels(&names);
    let (s, t) = all_pair_trials(labeled.len(), &labels, |i, j| cosine_score(&labeled[i].vector, &labeled[j].vector))?;
    compute_eer(&s, &t)
}
