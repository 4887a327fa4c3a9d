//! Labeled feature and embedding collections and their archive forms.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use super::archive::{round_f32, Archive, DType};
use crate::error::{Error, Result};
use crate::frontend::{extract_features, read_wav, FeatureMatrix, FrontendConfig};
use crate::metrics::Trial;

const SPEAKER_PREFIX: &str = "spk:";

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: Option<String>,
    pub features: FeatureMatrix,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureSet {
    pub utterances: Vec<Utterance>,
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.chars().any(char::is_whitespace) {
        return Err(Error::Format(format!("utterance id {id:?} must be non-empty without whitespace")));
    }
    Ok(())
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Distinct speakers in sorted order.
    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.utterances.iter().filter_map(|u| u.speaker.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    /// Stored as `f32`; values are expected to be `f32`-representable for a
    /// lossless round trip.
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new("features");
        for u in &self.utterances {
            check_id(&u.id)?;
            if let Some(s) = &u.speaker {
                a.meta.insert(format!("{SPEAKER_PREFIX}{}", u.id), s.clone());
            }
            a.meta.insert(format!("shift:{}", u.id), u.features.frame_shift_ms().to_string());
            a.push(u.id.clone(), DType::F32, vec![u.features.frames(), u.features.dim()], u.features.values().to_vec())?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind("features")?;
        let mut utterances = Vec::with_capacity(a.tensors.len());
        for t in &a.tensors {
            let [frames, dim] = t.shape[..] else {
                return Err(Error::Format(format!("feature tensor {} is not 2-D", t.name)));
            };
            let shift: f64 = a.meta_parse(&format!("shift:{}", t.name))?;
            utterances.push(Utterance {
                id: t.name.clone(),
                speaker: a.meta.get(&format!("{SPEAKER_PREFIX}{}", t.name)).cloned(),
                features: FeatureMatrix::new(t.data.clone(), frames, dim, shift)?,
            });
        }
        Ok(Self { utterances })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingItem {
    pub id: String,
    pub speaker: Option<String>,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingSet {
    pub items: Vec<EmbeddingItem>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingItem> {
        self.items.iter().find(|e| e.id == id)
    }

    /// Id -> index lookup.
    pub fn index(&self) -> std::collections::HashMap<&str, usize> {
        self.items.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect()
    }

    pub fn vectors(&self) -> Vec<Vec<f64>> {
        self.items.iter().map(|e| e.vector.clone()).collect()
    }

    /// Dense speaker indices (sorted speaker order); errors on unlabeled items.
    pub fn labels(&self) -> Result<(Vec<usize>, Vec<String>)> {
        let mut names: Vec<String> = Vec::new();
        for e in &self.items {
            let s = e.speaker.clone().ok_or_else(|| Error::Format(format!("embedding {} has no speaker label", e.id)))?;
            names.push(s);
        }
        let mut uniq = names.clone();
        uniq.sort();
        uniq.dedup();
        let idx = names.iter().map(|n| uniq.binary_search(n).expect("present")).collect();
        Ok((idx, uniq))
    }

    /// Every unordered pair of labeled items, in item order.
    pub fn all_pairs(&self) -> Vec<Trial> {
        let labeled: Vec<&EmbeddingItem> = self.items.iter().filter(|e| e.speaker.is_some()).collect();
        let mut out = Vec::new();
        for (i, a) in labeled.iter().enumerate() {
            for b in &labeled[i + 1..] {
                out.push(Trial { enroll: a.id.clone(), test: b.id.clone(), target: a.speaker == b.speaker });
            }
        }
        out
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new("embeddings");
        for e in &self.items {
            check_id(&e.id)?;
            if let Some(s) = &e.speaker {
                a.meta.insert(format!("{SPEAKER_PREFIX}{}", e.id), s.clone());
            }
            a.push(e.id.clone(), DType::F32, vec![e.vector.len()], e.vector.clone())?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind("embeddings")?;
        let items = a
            .tensors
            .iter()
            .map(|t| EmbeddingItem {
                id: t.name.clone(),
                speaker: a.meta.get(&format!("{SPEAKER_PREFIX}{}", t.name)).cloned(),
                vector: t.data.clone(),
            })
            .collect();
        Ok(Self { items })
    }
}

/// Reads a list of `id path [speaker]` lines (relative paths resolve against
/// `base`) and runs the frontend on every WAV file.
pub fn features_from_wav_list(text: &str, base: &Path, cfg: &FrontendConfig) -> Result<FeatureSet> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => continue,
            [id, path] => entries.push((id.to_string(), base.join(path), None)),
            [id, path, spk] => entries.push((id.to_string(), base.join(path), Some(spk.to_string()))),
            _ => return Err(Error::Parse { line: i + 1, msg: format!("expected `id path [speaker]`, got {} fields", toks.len()) }),
        }
    }
    let utterances = entries
        .into_par_iter()
        .map(|(id, path, speaker)| {
            let f = extract_features(&read_wav(&path)?, cfg)?;
            Ok(Utterance { id, speaker, features: round_features(&f) })
        })
        .collect::<Result<_>>()?;
    Ok(FeatureSet { utterances })
}

/// Rounds every value to `f32` precision, matching what files store.
pub fn round_features(f: &FeatureMatrix) -> FeatureMatrix {
    FeatureMatrix::new(f.values().iter().map(|&v| round_f32(v)).collect(), f.frames(), f.dim(), f.frame_shift_ms())
        .expect("same shape")
}

/// Segment length range in frames for a range in seconds.
pub fn segment_frames(range_s: (f64, f64), frame_shift_ms: f64) -> Result<(usize, usize)> {
    let (lo, hi) = range_s;
    if !(lo > 0.0 && hi >= lo && frame_shift_ms > 0.0) {
        return Err(Error::Config(format!("invalid segment range {range_s:?}")));
    }
    let to_frames = |s: f64| (s * 1000.0 / frame_shift_ms).round() as usize;
    Ok((to_frames(lo).max(1), to_frames(hi).max(1)))
}

/// Contiguous slice of `len` frames at a uniform position.
pub fn sample_slice<R: Rng>(f: &FeatureMatrix, len: usize, rng: &mut R) -> Result<FeatureMatrix> {
    if f.frames() < len {
        return Err(Error::UtteranceTooShort { needed: len, got: f.frames() });
    }
    let start = rng.random_range(0..=f.frames() - len);
    f.slice(start, len)
}

/// Random contiguous segment whose duration is uniform over the range
/// (capped at the utterance length) and whose position is uniform.
pub fn sample_segment<R: Rng>(f: &FeatureMatrix, range_s: (f64, f64), rng: &mut R) -> Result<FeatureMatrix> {
    let (lo, hi) = segment_frames(range_s, f.frame_shift_ms())?;
    if f.frames() < lo {
        return Err(Error::UtteranceTooShort { needed: lo, got: f.frames() });
    }
    let len = rng.random_range(lo..=hi.min(f.frames()));
    sample_slice(f, len, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feats(frames: usize) -> FeatureMatrix {
        FeatureMatrix::new((0..frames * 2).map(|v| v as f64).collect(), frames, 2, 10.0).unwrap()
    }

    #[test]
    fn exact_range_returns_whole_utterance() {
        let f = feats(300);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_segment(&f, (3.0, 3.0), &mut r).unwrap(), f);
        assert!(matches!(sample_segment(&feats(299), (3.0, 3.0), &mut r), Err(Error::UtteranceTooShort { .. })));
    }

    #[test]
    fn same_seed_same_slices() {
        let f = feats(1000);
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_segment(&f, (1.0, 5.0), &mut r).unwrap().row(0)[0]).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn durations_are_uniform() {
        // 10 bins over 100..=199 frames; chi-square with 9 dof, 0.999 quantile 27.88.
        let f = feats(400);
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let mut bins = [0usize; 10];
        let n = 10_000;
        for _ in 0..n {
            let s = sample_segment(&f, (1.0, 1.99), &mut r).unwrap();
            bins[(s.frames() - 100) / 10] += 1;
        }
        let e = n as f64 / 10.0;
        let chi2: f64 = bins.iter().map(|&b| (b as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 27.88, "{chi2} {bins:?}");
    }

    #[test]
    fn slices_are_contiguous() {
        let f = feats(50);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let s = sample_slice(&f, 7, &mut r).unwrap();
            let start = s.row(0)[0] as usize / 2;
            assert_eq!(s, f.slice(start, 7).unwrap());
        }
    }

    #[test]
    fn wav_list_runs_frontend() {
        let dir = tempfile::tempdir().unwrap();
        let spec = hound::WavSpec { channels: 1, sample_rate: 8000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(dir.path().join("a.wav"), spec).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for i in 0..8000 {
            let v = 3000.0 * (i as f64 * 0.05).sin() + r.random_range(-500.0..500.0);
            w.write_sample(v as i16).unwrap();
        }
        w.finalize().unwrap();
        let cfg = FrontendConfig::default();
        let set = features_from_wav_list("a1 a.wav spkA\n\nb1 a.wav\n", dir.path(), &cfg).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.utterances[0].speaker.as_deref(), Some("spkA"));
        assert_eq!(set.utterances[1].speaker, None);
        let direct = round_features(&extract_features(&read_wav(dir.path().join("a.wav")).unwrap(), &cfg).unwrap());
        assert_eq!(set.utterances[0].features, direct);
        assert!(matches!(features_from_wav_list("x", dir.path(), &cfg), Err(Error::Parse { line: 1, .. })));
        assert!(features_from_wav_list("x missing.wav", dir.path(), &cfg).is_err());
    }

    #[test]
    fn archive_round_trips() {
        let set = FeatureSet {
            utterances: vec![
                Utterance { id: "a1".into(), speaker: Some("a".into()), features: feats(5) },
                Utterance { id: "x".into(), speaker: None, features: feats(3) },
            ],
        };
        let arc = set.to_archive().unwrap();
        let back = FeatureSet::from_archive(&Archive::from_bytes(&arc.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.to_archive().unwrap().to_bytes(), arc.to_bytes());
        let bad = FeatureSet { utterances: vec![Utterance { id: "a b".into(), speaker: None, features: feats(1) }] };
        assert!(bad.to_archive().is_err());

        let emb = EmbeddingSet {
            items: vec![
                EmbeddingItem { id: "u1".into(), speaker: Some("s2".into()), vector: vec![0.5, -0.25] },
                EmbeddingItem { id: "u2".into(), speaker: Some("s1".into()), vector: vec![1.0, 2.0] },
            ],
        };
        let back = EmbeddingSet::from_archive(&emb.to_archive().unwrap()).unwrap();
        assert_eq!(back, emb);
        assert_eq!(back.labels().unwrap(), (vec![1, 0], vec!["s1".to_string(), "s2".to_string()]));
        assert!(FeatureSet::from_archive(&emb.to_archive().unwrap()).is_err());
        assert_eq!(emb.all_pairs(), vec![Trial { enroll: "u1".into(), test: "u2".into(), target: false }]);
    }
}
