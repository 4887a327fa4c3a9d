use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{FeatureMatrix, FrontendConfig, Waveform};
use crate::error::{Error, Result};

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, applied to a magnitude spectrum
/// of `n_fft / 2 + 1` bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Vec<Vec<f64>>,
    edges_hz: Vec<f64>,
    n_fft: usize,
    sample_rate: u32,
}

impl MelFilterbank {
    pub fn new(n_filters: usize, n_fft: usize, sample_rate: u32, low_hz: f64, high_hz: f64) -> Result<Self> {
        if !(low_hz >= 0.0 && high_hz > low_hz && high_hz <= sample_rate as f64 / 2.0 + 1e-9) {
            return Err(Error::Config(format!(
                "filterbank range [{low_hz}, {high_hz}] Hz invalid for rate {sample_rate}"
            )));
        }
        let (lo, hi) = (hz_to_mel(low_hz), hz_to_mel(high_hz));
        let edges_hz: Vec<f64> = (0..n_filters + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_filters + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let weights = (0..n_filters)
            .map(|m| {
                let (left, center, right) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
                (0..n_bins)
                    .map(|b| {
                        let f = b as f64 * bin_hz;
                        if f > left && f <= center {
                            (f - left) / (center - left)
                        } else if f > center && f < right {
                            (right - f) / (right - center)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self { weights, edges_hz, n_fft, sample_rate })
    }

    pub fn n_filters(&self) -> usize {
        self.weights.len()
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// `(left, center, right)` edge frequencies of filter `m` in Hz.
    pub fn band(&self, m: usize) -> (f64, f64, f64) {
        (self.edges_hz[m], self.edges_hz[m + 1], self.edges_hz[m + 2])
    }

    pub fn weights(&self, m: usize) -> &[f64] {
        &self.weights[m]
    }

    pub fn apply(&self, magnitude: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(magnitude).map(|(a, b)| a * b).sum())
            .collect()
    }
}

struct Framer {
    frame_len: usize,
    shift: usize,
    n_frames: usize,
    n_fft: usize,
    window: Vec<f64>,
}

impl Framer {
    fn new(w: &Waveform, cfg: &FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let frame_len = cfg.frame_length(w.sample_rate());
        let shift = cfg.frame_shift(w.sample_rate());
        if frame_len < 2 || shift == 0 {
            return Err(Error::Config("frame too short at this sample rate".into()));
        }
        if w.len() < frame_len {
            return Err(Error::InputTooShort(format!(
                "{} samples, one frame needs {frame_len}",
                w.len()
            )));
        }
        let n_frames = (w.len() - frame_len) / shift + 1;
        let window = (0..frame_len)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (frame_len - 1) as f64).cos())
            .collect();
        Ok(Self { frame_len, shift, n_frames, n_fft: frame_len.next_power_of_two(), window })
    }
}

/// Mel filterbank energies (before the log) for every frame, `T x n_mel`.
pub fn mel_filterbank_energies(w: &Waveform, cfg: &FrontendConfig) -> Result<(Vec<Vec<f64>>, MelFilterbank)> {
    let framer = Framer::new(w, cfg)?;
    let high = cfg.high_freq_hz.unwrap_or(w.sample_rate() as f64 / 2.0);
    let bank = MelFilterbank::new(cfg.n_mel_filters, framer.n_fft, w.sample_rate(), cfg.low_freq_hz, high)?;

    let x = w.samples();
    let mut emphasized = Vec::with_capacity(x.len());
    emphasized.push(x[0]);
    emphasized.extend(x.windows(2).map(|p| p[1] - cfg.preemphasis * p[0]));

    let fft = FftPlanner::<f64>::new().plan_fft_forward(framer.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); framer.n_fft];
    let mut magnitude = vec![0.0; framer.n_fft / 2 + 1];
    let mut out = Vec::with_capacity(framer.n_frames);
    for t in 0..framer.n_frames {
        let start = t * framer.shift;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < framer.frame_len {
                Complex::new(emphasized[start + i] * framer.window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (m, c) in magnitude.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        out.push(bank.apply(&magnitude));
    }
    Ok((out, bank))
}

/// MFCCs: pre-emphasis, Hamming window, magnitude spectrum, mel filterbank,
/// floored log, orthonormal DCT-II. Coefficient 0 is kept as the energy proxy.
pub fn compute_mfcc(w: &Waveform, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    let (energies, bank) = mel_filterbank_energies(w, cfg)?;
    let n_mel = bank.n_filters();
    let dct: Vec<Vec<f64>> = (0..cfg.n_cepstra)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n_mel as f64).sqrt() } else { (2.0 / n_mel as f64).sqrt() };
            (0..n_mel)
                .map(|j| scale * (PI * k as f64 * (j as f64 + 0.5) / n_mel as f64).cos())
                .collect()
        })
        .collect();
    let frames = energies.len();
    let mut values = Vec::with_capacity(frames * cfg.n_cepstra);
    for e in &energies {
        let log_e: Vec<f64> = e.iter().map(|v| v.max(cfg.log_floor).ln()).collect();
        values.extend(dct.iter().map(|row| row.iter().zip(&log_e).map(|(a, b)| a * b).sum::<f64>()));
    }
    FeatureMatrix::new(values, frames, cfg.n_cepstra, cfg.frame_shift_ms)
}
