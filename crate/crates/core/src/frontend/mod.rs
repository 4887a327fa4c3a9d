//! Acoustic frontend: MFCC extraction, energy-based VAD and sliding-window
//! cepstral mean normalization.
//!
//! The default chain used for extractor input is
//! `compute_mfcc -> energy_vad (on raw c0) -> sliding_cmn -> select voiced frames`.

mod mfcc;
mod wav;

pub use mfcc::{compute_mfcc, mel_filterbank_energies, MelFilterbank};
pub use wav::read_wav;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono audio signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidSignal("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidSignal(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub preemphasis: f64,
    pub n_mel_filters: usize,
    pub n_cepstra: usize,
    pub cmn_window_s: f64,
    /// Added to the utterance-mean log energy to form the VAD threshold.
    pub vad_energy_offset: f64,
    pub low_freq_hz: f64,
    /// Upper filterbank edge; `None` means Nyquist.
    pub high_freq_hz: Option<f64>,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            preemphasis: 0.97,
            n_mel_filters: 23,
            n_cepstra: 23,
            cmn_window_s: 3.0,
            vad_energy_offset: 0.0,
            low_freq_hz: 20.0,
            high_freq_hz: None,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_shift_ms > 0.0 && self.frame_length_ms > self.frame_shift_ms) {
            return Err(Error::Config(
                "need frame_length_ms > frame_shift_ms > 0".into(),
            ));
        }
        if self.n_cepstra == 0 || self.n_cepstra > self.n_mel_filters {
            return Err(Error::Config("need 0 < n_cepstra <= n_mel_filters".into()));
        }
        if !(self.cmn_window_s > 0.0) {
            return Err(Error::Config("cmn_window_s must be positive".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return Err(Error::Config("preemphasis must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn frame_length(&self, sample_rate: u32) -> usize {
        (self.frame_length_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn frame_shift(&self, sample_rate: u32) -> usize {
        (self.frame_shift_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    /// Sliding CMN window in frames (at least one).
    pub fn cmn_window_frames(&self) -> usize {
        ((self.cmn_window_s * 1000.0 / self.frame_shift_ms).round() as usize).max(1)
    }
}

/// Frames-by-dimension feature matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Vec<f64>,
    frames: usize,
    dim: usize,
    frame_shift_ms: f64,
}

impl FeatureMatrix {
    pub fn new(values: Vec<f64>, frames: usize, dim: usize, frame_shift_ms: f64) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Dimension(format!(
                "feature matrix must be non-empty, got {frames}x{dim}"
            )));
        }
        if values.len() != frames * dim {
            return Err(Error::Dimension(format!(
                "{} values do not fill {frames}x{dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSignal("non-finite feature value".into()));
        }
        Ok(Self { values, frames, dim, frame_shift_ms })
    }

    pub fn from_rows(rows: &[Vec<f64>], frame_shift_ms: f64) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Dimension("ragged feature rows".into()));
        }
        Self::new(rows.concat(), rows.len(), dim, frame_shift_ms)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_shift_ms(&self) -> f64 {
        self.frame_shift_ms
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn get(&self, t: usize, d: usize) -> f64 {
        self.values[t * self.dim + d]
    }

    pub fn column(&self, d: usize) -> Vec<f64> {
        (0..self.frames).map(|t| self.get(t, d)).collect()
    }

    /// Duration covered by the frames, in seconds (frames x shift).
    pub fn seconds(&self) -> f64 {
        self.frames as f64 * self.frame_shift_ms / 1000.0
    }

    /// Contiguous frame slice `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::Dimension(format!(
                "slice [{start}, {}) outside {} frames",
                start + len,
                self.frames
            )));
        }
        Ok(Self {
            values: self.values[start * self.dim..(start + len) * self.dim].to_vec(),
            frames: len,
            dim: self.dim,
            frame_shift_ms: self.frame_shift_ms,
        })
    }

    /// Keeps the frames whose mask entry is true.
    pub fn select(&self, mask: &[bool]) -> Result<Self> {
        if mask.len() != self.frames {
            return Err(Error::Dimension(format!(
                "mask length {} != {} frames",
                mask.len(),
                self.frames
            )));
        }
        let mut values = Vec::with_capacity(self.values.len());
        for (t, _) in mask.iter().enumerate().filter(|(_, &keep)| keep) {
            values.extend_from_slice(self.row(t));
        }
        let frames = values.len() / self.dim;
        Self::new(values, frames, self.dim, self.frame_shift_ms)
    }

    /// Concatenates `other` after `self` along time.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if other.dim != self.dim {
            return Err(Error::Dimension("feature dims differ".into()));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Self::new(values, self.frames + other.frames, self.dim, self.frame_shift_ms)
    }
}

/// Frame mask: a frame is speech iff its log energy (column 0) exceeds the
/// utterance mean plus `vad_energy_offset`. The loudest frame is always kept.
pub fn energy_vad(f: &FeatureMatrix, cfg: &FrontendConfig) -> Vec<bool> {
    let energy = f.column(0);
    let mean = energy.iter().sum::<f64>() / energy.len() as f64;
    let threshold = mean + cfg.vad_energy_offset;
    let mut mask: Vec<bool> = energy.iter().map(|&e| e > threshold).collect();
    if !mask.iter().any(|&m| m) {
        let mut loudest = 0;
        for (t, &e) in energy.iter().enumerate() {
            if e > energy[loudest] {
                loudest = t;
            }
        }
        mask[loudest] = true;
    }
    mask
}

/// Subtracts, per dimension, the mean of a centered window of
/// `cfg.cmn_window_frames()` frames, truncated at the utterance edges.
pub fn sliding_cmn(f: &FeatureMatrix, cfg: &FrontendConfig) -> FeatureMatrix {
    let (t_len, dim) = (f.frames(), f.dim());
    let window = cfg.cmn_window_frames();
    let back = window / 2;
    let ahead = window - back;

    let mut prefix = vec![0.0; (t_len + 1) * dim];
    for t in 0..t_len {
        for d in 0..dim {
            prefix[(t + 1) * dim + d] = prefix[t * dim + d] + f.get(t, d);
        }
    }
    let mut values = Vec::with_capacity(t_len * dim);
    for t in 0..t_len {
        let lo = t.saturating_sub(back);
        let hi = (t + ahead).min(t_len);
        let n = (hi - lo) as f64;
        for d in 0..dim {
            let mean = (prefix[hi * dim + d] - prefix[lo * dim + d]) / n;
            values.push(f.get(t, d) - mean);
        }
    }
    FeatureMatrix { values, frames: t_len, dim, frame_shift_ms: f.frame_shift_ms }
}

/// Full extractor input chain: MFCC, VAD decided on raw log energy, sliding
/// CMN, then voiced-frame selection.
pub fn extract_features(w: &Waveform, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    let raw = compute_mfcc(w, cfg)?;
    let mask = energy_vad(&raw, cfg);
    sliding_cmn(&raw, cfg).select(&mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn energies(e: &[f64]) -> FeatureMatrix {
        let rows: Vec<Vec<f64>> = e.iter().map(|&v| vec![v, 1.0]).collect();
        FeatureMatrix::from_rows(&rows, 10.0).unwrap()
    }

    #[test]
    fn vad_separates_at_mean() {
        let cfg = FrontendConfig::default();
        assert_eq!(energy_vad(&energies(&[0.0, 0.0, 10.0, 10.0]), &cfg), vec![false, false, true, true]);
    }

    #[test]
    fn vad_constant_energy() {
        let mut cfg = FrontendConfig::default();
        let f = energies(&[3.0; 5]);
        // nothing exceeds the mean: only the loudest (first) frame survives
        assert_eq!(energy_vad(&f, &cfg), vec![true, false, false, false, false]);
        cfg.vad_energy_offset = -0.5;
        assert!(energy_vad(&f, &cfg).iter().all(|&m| m));
    }

    #[test]
    fn vad_matches_direct_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..50 {
            let e: Vec<f64> = (0..(5 + trial)).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut cfg = FrontendConfig::default();
            cfg.vad_energy_offset = rng.random_range(-1.0..1.0);
            let mask = energy_vad(&energies(&e), &cfg);
            let thr = e.iter().sum::<f64>() / e.len() as f64 + cfg.vad_energy_offset;
            let mut expected: Vec<bool> = e.iter().map(|&v| v > thr).collect();
            if !expected.contains(&true) {
                let best = e.iter().cloned().fold(f64::MIN, f64::max);
                expected[e.iter().position(|&v| v == best).unwrap()] = true;
            }
            assert_eq!(mask, expected);
        }
    }

    #[test]
    fn vad_ignores_other_columns() {
        let cfg = FrontendConfig::default();
        let a = FeatureMatrix::from_rows(&[vec![1.0, 5.0], vec![3.0, -2.0]], 10.0).unwrap();
        let b = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 9.0]], 10.0).unwrap();
        assert_eq!(energy_vad(&a, &cfg), energy_vad(&b, &cfg));
    }

    #[test]
    fn cmn_constant_is_zero() {
        let cfg = FrontendConfig::default();
        let f = FeatureMatrix::new(vec![2.5; 40 * 3], 40, 3, 10.0).unwrap();
        assert!(sliding_cmn(&f, &cfg).values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cmn_short_utterance_is_global_mean() {
        let cfg = FrontendConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<f64> = (0..50 * 4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let f = FeatureMatrix::new(vals, 50, 4, 10.0).unwrap();
        let out = sliding_cmn(&f, &cfg);
        for d in 0..4 {
            let m: f64 = out.column(d).iter().sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-12);
        }
        let twice = sliding_cmn(&out, &cfg);
        for (a, b) in out.values().iter().zip(twice.values()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn cmn_ramp_matches_direct_window() {
        let cfg = FrontendConfig::default();
        let t_len = 1000;
        let vals: Vec<f64> = (0..t_len).flat_map(|t| [t as f64 * 0.01, (t as f64 * 0.05).sin()]).collect();
        let f = FeatureMatrix::new(vals, t_len, 2, 10.0).unwrap();
        let out = sliding_cmn(&f, &cfg);
        let w = cfg.cmn_window_frames();
        assert_eq!(w, 300);
        for t in 0..t_len {
            let lo = t as isize - (w / 2) as isize;
            let hi = lo + w as isize;
            for d in 0..2 {
                let mut sum = 0.0;
                let mut n = 0.0;
                for s in lo..hi {
                    if s >= 0 && (s as usize) < t_len {
                        sum += f.get(s as usize, d);
                        n += 1.0;
                    }
                }
                assert!((out.get(t, d) - (f.get(t, d) - sum / n)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn select_and_slice() {
        let f = FeatureMatrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]], 10.0).unwrap();
        assert_eq!(f.select(&[true, false, true]).unwrap().values(), &[1.0, 3.0]);
        assert_eq!(f.slice(1, 2).unwrap().values(), &[2.0, 3.0]);
        assert!(f.slice(2, 2).is_err());
        assert!(f.select(&[false, false, false]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = FrontendConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.n_cepstra = 30;
        assert!(cfg.validate().is_err());
        let mut cfg = FrontendConfig::default();
        cfg.frame_shift_ms = 30.0;
        assert!(cfg.validate().is_err());
    }
}
