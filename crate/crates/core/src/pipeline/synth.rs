//! Synthetic labeled feature corpora.
//!
//! Every speaker shares one set of mixture component means. A speaker moves
//! all components by a personal offset plus a per-component offset, both
//! scaled by `separation`. An utterance walks through components in runs of
//! geometric length, adds an utterance-level channel offset and per-frame
//! noise. All randomness derives from `seed` and the global speaker and
//! utterance indices, so a held-out corpus with a different `first_speaker`
//! shares the same component means.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::archive::round_f32;
use super::data::{FeatureSet, Utterance};
use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusSpec {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Utterance duration drawn uniformly from this range, in seconds.
    pub utterance_seconds: (f64, f64),
    pub dim: usize,
    pub n_components: usize,
    /// Spread of the shared component means.
    pub component_scale: f64,
    /// Scale of the speaker-specific offsets; 0 makes all speakers identical.
    pub separation: f64,
    pub channel_scale: f64,
    pub noise_scale: f64,
    /// Mean run length in frames before switching component.
    pub mean_run_frames: f64,
    pub frame_shift_ms: f64,
    /// Global index of the first speaker, for disjoint held-out sets.
    pub first_speaker: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            n_speakers: 32,
            utterances_per_speaker: 10,
            utterance_seconds: (4.0, 6.0),
            dim: 23,
            n_components: 8,
            component_scale: 1.0,
            separation: 0.5,
            channel_scale: 0.3,
            noise_scale: 1.0,
            mean_run_frames: 8.0,
            frame_shift_ms: 10.0,
            first_speaker: 0,
            seed: 0,
        }
    }
}

fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(a.wrapping_mul(1 << 32) ^ b);
    r
}

fn normal_vec<R: Rng>(r: &mut R, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, r)).collect()
}

pub fn speaker_name(global: usize) -> String {
    format!("spk{global:04}")
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.utterance_seconds;
        let ok = self.n_speakers >= 2
            && self.utterances_per_speaker >= 1
            && self.dim >= 1
            && self.n_components >= 1
            && lo > 0.0
            && hi >= lo
            && self.frame_shift_ms > 0.0
            && self.mean_run_frames >= 1.0
            && [self.component_scale, self.separation, self.channel_scale, self.noise_scale].iter().all(|v| v.is_finite() && *v >= 0.0);
        if !ok {
            return Err(Error::Config(format!("invalid synthetic corpus spec {self:?}")));
        }
        Ok(())
    }

    /// Component means of speaker `global`.
    fn speaker_means(&self, components: &[Vec<f64>], global: usize) -> Vec<Vec<f64>> {
        let mut r = stream(self.seed, 1 + global as u64, 0);
        let shared = normal_vec(&mut r, self.dim, self.separation);
        components
            .iter()
            .map(|c| {
                let own = normal_vec(&mut r, self.dim, 0.5 * self.separation);
                c.iter().zip(&shared).zip(&own).map(|((a, b), o)| a + b + o).collect()
            })
            .collect()
    }

    fn utterance(&self, means: &[Vec<f64>], global: usize, u: usize) -> Result<FeatureMatrix> {
        let mut r = stream(self.seed, 1 + global as u64, 1 + u as u64);
        let (lo, hi) = self.utterance_seconds;
        let secs = if hi > lo { r.random_range(lo..=hi) } else { lo };
        let frames = ((secs * 1000.0 / self.frame_shift_ms).round() as usize).max(1);
        let channel = normal_vec(&mut r, self.dim, self.channel_scale);
        let switch = 1.0 / self.mean_run_frames;
        let mut k = r.random_range(0..means.len());
        let mut values = Vec::with_capacity(frames * self.dim);
        for _ in 0..frames {
            if r.random_bool(switch) {
                k = r.random_range(0..means.len());
            }
            let noise = normal_vec(&mut r, self.dim, self.noise_scale);
            values.extend(means[k].iter().zip(&channel).zip(&noise).map(|((m, c), n)| round_f32(m + c + n)));
        }
        FeatureMatrix::new(values, frames, self.dim, self.frame_shift_ms)
    }
}

/// Builds the corpus; utterance ids are `spkNNNN_uMMM`.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<FeatureSet> {
    spec.validate()?;
    let mut world = stream(spec.seed, 0, 0);
    let components: Vec<Vec<f64>> = (0..spec.n_components).map(|_| normal_vec(&mut world, spec.dim, spec.component_scale)).collect();
    let mut utterances = Vec::with_capacity(spec.n_speakers * spec.utterances_per_speaker);
    for s in 0..spec.n_speakers {
        let global = spec.first_speaker + s;
        let means = spec.speaker_means(&components, global);
        let name = speaker_name(global);
        for u in 0..spec.utterances_per_speaker {
            utterances.push(Utterance {
                id: format!("{name}_u{u:03}"),
                speaker: Some(name.clone()),
                features: spec.utterance(&means, global, u)?,
            });
        }
    }
    Ok(FeatureSet { utterances })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{all_pair_trials, cosine_score};
    use crate::metrics::compute_eer;

    fn mean_eer(spec: &SyntheticCorpusSpec) -> f64 {
        let set = generate_synthetic_corpus(spec).unwrap();
        let means: Vec<Vec<f64>> = set
            .utterances
            .iter()
            .map(|u| (0..u.features.dim()).map(|d| u.features.column(d).iter().sum::<f64>() / u.features.frames() as f64).collect())
            .collect();
        let labels: Vec<usize> = (0..set.len()).map(|i| i / spec.utterances_per_speaker).collect();
        let (s, l) = all_pair_trials(set.len(), &labels, |i, j| cosine_score(&means[i], &means[j])).unwrap();
        compute_eer(&s, &l).unwrap()
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SyntheticCorpusSpec { n_speakers: 3, utterances_per_speaker: 2, ..Default::default() };
        let a = generate_synthetic_corpus(&spec).unwrap().to_archive().unwrap().to_bytes();
        let b = generate_synthetic_corpus(&spec).unwrap().to_archive().unwrap().to_bytes();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&SyntheticCorpusSpec { seed: 1, ..spec }).unwrap().to_archive().unwrap().to_bytes();
        assert_ne!(a, c);
    }

    #[test]
    fn held_out_speakers_differ_but_share_world() {
        let base = SyntheticCorpusSpec { n_speakers: 2, utterances_per_speaker: 1, ..Default::default() };
        let a = generate_synthetic_corpus(&base).unwrap();
        let b = generate_synthetic_corpus(&SyntheticCorpusSpec { first_speaker: 1, ..base.clone() }).unwrap();
        // Speaker 1 of the first set is speaker 0 of the second.
        assert_eq!(a.utterances[1], b.utterances[0]);
        assert_eq!(b.speakers(), vec!["spk0001".to_string(), "spk0002".to_string()]);
    }

    #[test]
    fn values_are_f32_exact_and_lengths_in_range() {
        let spec = SyntheticCorpusSpec { n_speakers: 2, utterances_per_speaker: 3, ..Default::default() };
        for u in generate_synthetic_corpus(&spec).unwrap().utterances {
            assert!(u.features.values().iter().all(|&v| v == round_f32(v)));
            assert!((400..=600).contains(&u.features.frames()));
        }
    }

    #[test]
    fn zero_separation_is_chance() {
        let spec = SyntheticCorpusSpec { n_speakers: 8, utterances_per_speaker: 6, separation: 0.0, utterance_seconds: (1.0, 1.0), ..Default::default() };
        let e = mean_eer(&spec);
        assert!((e - 0.5).abs() < 0.1, "{e}");
    }

    #[test]
    fn huge_separation_is_trivial() {
        let spec = SyntheticCorpusSpec { n_speakers: 2, utterances_per_speaker: 10, separation: 50.0, utterance_seconds: (1.0, 1.0), ..Default::default() };
        assert!(mean_eer(&spec) < 1e-9);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate_synthetic_corpus(&SyntheticCorpusSpec { n_speakers: 1, ..Default::default() }).is_err());
        assert!(generate_synthetic_corpus(&SyntheticCorpusSpec { separation: -1.0, ..Default::default() }).is_err());
    }
}
