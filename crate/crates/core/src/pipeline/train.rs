//! Minibatch SGD training of an extractor on labeled features.
//!
//! Each step draws its batch from a generator seeded by `(seed, step)`, so a
//! run resumed from a checkpoint replays exactly the steps an uninterrupted
//! run would have taken. Per-segment gradients are computed in parallel and
//! summed in batch order, which keeps results independent of the thread
//! count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::data::{sample_slice, segment_frames, FeatureSet};
use super::extract::{cosine_eer, extract_embeddings};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::models::ExtractorModel;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    /// 1-based index of the completed epoch.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub mean_loss: f64,
    pub val_eer: Option<f64>,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Lowest validation EER, or the last state without validation data.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step.wrapping_add(1));
    r
}

/// Batch of `(segment, label)` pairs for one step; all segments share one
/// duration drawn uniformly from `len_range` and capped by the shortest pick.
fn draw_batch(pool: &[(&FeatureMatrix, usize)], batch: usize, len_range: (usize, usize), rng: &mut ChaCha8Rng) -> Result<Vec<(FeatureMatrix, usize)>> {
    let picks: Vec<usize> = (0..batch).map(|_| rng.random_range(0..pool.len())).collect();
    let shortest = picks.iter().map(|&i| pool[i].0.frames()).min().expect("non-empty batch");
    let len = rng.random_range(len_range.0..=len_range.1).min(shortest);
    picks.iter().map(|&i| Ok((sample_slice(pool[i].0, len, rng)?, pool[i].1))).collect()
}

fn batch_gradient(model: &ExtractorModel, cfg: &ExperimentConfig, batch: &[(FeatureMatrix, usize)], step: u64) -> Result<(f64, Vec<Vec<f64>>)> {
    let per: Vec<(f64, Vec<Vec<f64>>)> = batch
        .par_iter()
        .map(|(seg, label)| {
            let mut g = Graph::new();
            let p = model.params().bind(&mut g, true);
            let e = model.embed_graph(&mut g, &p, &[seg])?;
            let loss = model.loss_graph(&mut g, &p, e, &[*label], &cfg.loss, step)?;
            g.backward(loss)?;
            Ok((g.value(loss).data()[0], model.params().gradients(&g, &p)))
        })
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
    for (l, gs) in per {
        loss += l;
        for (acc, g) in grads.iter_mut().zip(gs) {
            acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
        }
    }
    grads.iter_mut().flatten().for_each(|v| *v /= n);
    Ok((loss / n, grads))
}

fn clip(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|v| *v *= s);
    }
}

/// Trains (or continues training) an extractor for `cfg.train.epochs`
/// epochs in total. Unlabeled utterances are ignored; utterances shorter
/// than the minimum segment are left out of sampling.
pub fn train_extractor(cfg: &ExperimentConfig, train: &FeatureSet, validation: Option<&FeatureSet>, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    let speakers = train.speakers();
    if speakers.len() < 2 {
        return Err(Error::Config(format!("training needs at least 2 labeled speakers, found {}", speakers.len())));
    }
    let first = &train.utterances.iter().find(|u| u.speaker.is_some()).expect("labeled utterance").features;
    let (in_dim, shift) = (first.dim(), first.frame_shift_ms());
    let hash = cfg.training_hash();

    let mut state = match resume {
        Some(c) => {
            if c.config_hash != hash {
                return Err(Error::Config("checkpoint was trained with different model, loss or training settings".into()));
            }
            if c.speakers != speakers {
                return Err(Error::Config("checkpoint speaker list differs from the training set".into()));
            }
            c
        }
        None => {
            let spec = cfg.model.build_spec(speakers.len(), in_dim)?;
            Checkpoint { model: ExtractorModel::new(spec, tc.seed)?, speakers: speakers.clone(), loss: cfg.loss, step: 0, epoch: 0, config_hash: hash, val_eer: None }
        }
    };

    let (lo, hi) = segment_frames(tc.segment_seconds, shift)?;
    let min_len = lo.max(state.model.min_frames());
    let len_range = (min_len, hi.max(min_len));
    let mut pool = Vec::new();
    let mut longest = 0;
    for u in &train.utterances {
        let Some(s) = &u.speaker else { continue };
        if u.features.dim() != in_dim {
            return Err(Error::Dimension(format!("utterance {} has dim {}, expected {in_dim}", u.id, u.features.dim())));
        }
        longest = longest.max(u.features.frames());
        if u.features.frames() >= min_len {
            pool.push((&u.features, speakers.binary_search(s).expect("known speaker")));
        }
    }
    if pool.is_empty() {
        return Err(Error::UtteranceTooShort { needed: min_len, got: longest });
    }
    let steps = tc.steps_per_epoch.unwrap_or(pool.len() / tc.batch_size).max(1);

    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::new();
    while state.epoch < tc.epochs {
        let lr = tc.learning_rate_at(state.epoch);
        let mut total = 0.0;
        for _ in 0..steps {
            let mut rng = step_rng(tc.seed, state.step);
            let batch = draw_batch(&pool, tc.batch_size, len_range, &mut rng)?;
            let (loss, mut grads) = batch_gradient(&state.model, cfg, &batch, state.step).map_err(|e| match e {
                Error::InvalidSignal(_) => Error::Diverged { step: state.step, loss: f64::NAN },
                e => e,
            })?;
            if !loss.is_finite() || grads.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { step: state.step, loss });
            }
            if let Some(c) = tc.clip_norm {
                clip(&mut grads, c);
            }
            state.model.params_mut().sgd_step(&grads, lr, tc.momentum)?;
            state.step += 1;
            total += loss;
        }
        state.epoch += 1;
        state.val_eer = match validation {
            Some(v) => Some(cosine_eer(&extract_embeddings(&state.model, v)?.0)?),
            None => None,
        };
        let entry = EpochLog { epoch: state.epoch, step: state.step, mean_loss: total / steps as f64, val_eer: state.val_eer, learning_rate: lr };
        log::info!("epoch {} step {} loss {:.5} val_eer {:?}", entry.epoch, entry.step, entry.mean_loss, entry.val_eer);
        log.push(entry);
        let better = match (&best, state.val_eer) {
            (None, _) | (Some(_), None) => true,
            (Some(b), Some(e)) => e < b.val_eer.unwrap_or(f64::INFINITY),
        };
        if better {
            best = Some(state.clone());
        }
    }
    Ok(TrainOutcome { best: best.unwrap_or_else(|| state.clone()), last: state, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::MaxPoolWidths;
    use crate::objectives::LossKind;
    use crate::pipeline::config::ModelConfig;
    use crate::pipeline::synth::{generate_synthetic_corpus, SyntheticCorpusSpec};

    fn tiny() -> (ExperimentConfig, FeatureSet) {
        let mut cfg = ExperimentConfig::default();
        cfg.model = ModelConfig::Maxpool { widths: MaxPoolWidths { frame: 8, top: 16, segment: 8, embedding: 6 } };
        cfg.loss = LossKind::Softmax;
        cfg.train.batch_size = 4;
        cfg.train.epochs = 2;
        cfg.train.steps_per_epoch = Some(3);
        cfg.train.segment_seconds = (0.4, 0.6);
        cfg.train.learning_rate = 0.01;
        cfg.train.clip_norm = Some(5.0);
        let corpus = SyntheticCorpusSpec { n_speakers: 2, utterances_per_speaker: 10, utterance_seconds: (0.8, 1.0), dim: 5, separation: 2.0, ..Default::default() };
        (cfg, generate_synthetic_corpus(&corpus).unwrap())
    }

    fn full_loss(model: &ExtractorModel, cfg: &ExperimentConfig, data: &FeatureSet) -> f64 {
        let speakers = data.speakers();
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let segs: Vec<&FeatureMatrix> = data.utterances.iter().map(|u| &u.features).collect();
        let labels: Vec<usize> = data.utterances.iter().map(|u| speakers.binary_search(u.speaker.as_ref().unwrap()).unwrap()).collect();
        let e = model.embed_graph(&mut g, &p, &segs).unwrap();
        let l = model.loss_graph(&mut g, &p, e, &labels, &cfg.loss, 0).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn short_run_reduces_training_loss() {
        let (cfg, data) = tiny();
        let out = train_extractor(&cfg, &data, None, None).unwrap();
        let init = ExtractorModel::new(out.last.model.spec().clone(), cfg.train.seed).unwrap();
        let (before, after) = (full_loss(&init, &cfg, &data), full_loss(&out.last.model, &cfg, &data));
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut cfg, data) = tiny();
        cfg.train.learning_rate = 0.0;
        let out = train_extractor(&cfg, &data, None, None).unwrap();
        let init = ExtractorModel::new(out.last.model.spec().clone(), cfg.train.seed).unwrap();
        let values = |m: &ExtractorModel| m.params().iter().map(|p| p.value.clone()).collect::<Vec<_>>();
        assert_eq!(values(&out.last.model), values(&init));
        assert_eq!(out.last.step, 6);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (mut cfg, data) = tiny();
        cfg.train.epochs = 3;
        let full = train_extractor(&cfg, &data, None, None).unwrap();
        let mut short = cfg.clone();
        short.train.epochs = 1;
        let half = train_extractor(&short, &data, None, None).unwrap();
        let bytes = half.last.to_archive().unwrap().to_bytes();
        let reloaded = Checkpoint::from_archive(&crate::pipeline::Archive::from_bytes(&bytes).unwrap()).unwrap();
        let resumed = train_extractor(&cfg, &data, None, Some(reloaded)).unwrap();
        assert_eq!(resumed.last, full.last);
        assert_eq!(resumed.log[..], full.log[1..]);
    }

    #[test]
    fn resume_rejects_changed_settings() {
        let (cfg, data) = tiny();
        let out = train_extractor(&cfg, &data, None, None).unwrap();
        let mut other = cfg.clone();
        other.train.seed = 1;
        assert!(matches!(train_extractor(&other, &data, None, Some(out.last)), Err(Error::Config(_))));
    }

    #[test]
    fn too_short_utterances_reported() {
        let (mut cfg, data) = tiny();
        cfg.train.segment_seconds = (5.0, 6.0);
        assert!(matches!(train_extractor(&cfg, &data, None, None), Err(Error::UtteranceTooShort { needed: 500, .. })));
    }

    #[test]
    fn divergence_aborts() {
        let (mut cfg, data) = tiny();
        cfg.train.learning_rate = 1e200;
        cfg.train.clip_norm = None;
        cfg.train.epochs = 3;
        assert!(matches!(train_extractor(&cfg, &data, None, None), Err(Error::Diverged { .. })));
    }

    #[test]
    fn validation_selects_best_epoch() {
        let (mut cfg, data) = tiny();
        cfg.train.epochs = 3;
        let out = train_extractor(&cfg, &data, Some(&data), None).unwrap();
        let eers: Vec<f64> = out.log.iter().map(|l| l.val_eer.unwrap()).collect();
        let min = eers.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(out.best.val_eer, Some(min));
        assert_eq!(out.best.epoch, 1 + eers.iter().position(|&e| e == min).unwrap());
    }
}
