//! MFCC extraction.
//!
//! Pipeline, in order:
//!
//! 1. pre-emphasis `y[t] = x[t] - a * x[t-1]`
//! 2. framing into fixed-length windows; a trailing partial frame is dropped
//! 3. periodic Hann window
//! 4. magnitude FFT (size = next power of two >= frame length)
//! 5. mel filterbank energies (Slaney scale, area-normalized triangles)
//! 6. natural log with an absolute floor
//! 7. orthonormal DCT-II, keeping the leading coefficients
//!
//! The default configuration produces 39 static coefficients per frame from
//! 50 ms frames hopped by 12.5 ms; [`CoeffMode::WithDeltas`] instead keeps
//! 13 and appends first and second differences.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::{AudioClip, AudioError, Result};

/// Number of static coefficients the delta mode differentiates.
const DELTA_BASE_SPLIT: usize = 3;

/// How the per-frame coefficient vector is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoeffMode {
    /// `num_coeffs` leading DCT coefficients.
    Static,
    /// `num_coeffs / 3` leading DCT coefficients plus their first and
    /// second temporal derivatives.
    WithDeltas,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfccConfig {
    /// Frame length in seconds.
    pub frame_length_s: f64,
    /// Hop between frame starts in seconds.
    pub frame_shift_s: f64,
    /// Number of triangular mel filters.
    pub num_filters: usize,
    /// Width of the per-frame coefficient vector.
    pub num_coeffs: usize,
    pub coeff_mode: CoeffMode,
    /// Pre-emphasis factor in `[0, 1)`.
    pub pre_emphasis: f64,
    /// Absolute floor applied to mel energies before the log.
    pub log_floor: f64,
    /// Per-coefficient z-normalization over the utterance.
    pub normalize: bool,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            frame_length_s: 0.05,
            frame_shift_s: 0.0125,
            num_filters: 128,
            num_coeffs: 39,
            coeff_mode: CoeffMode::Static,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
            normalize: false,
        }
    }
}

impl MfccConfig {
    /// Leading DCT coefficients actually computed, before any deltas.
    pub fn base_coeffs(&self) -> usize {
        match self.coeff_mode {
            CoeffMode::Static => self.num_coeffs,
            CoeffMode::WithDeltas => self.num_coeffs / DELTA_BASE_SPLIT,
        }
    }

    fn validate(&self, sample_rate: u32) -> Result<(usize, usize)> {
        if sample_rate == 0 {
            return Err(AudioError::Frontend("zero sample rate".into()));
        }
        if self.frame_length_s <= 0.0 || self.frame_shift_s <= 0.0 {
            return Err(AudioError::Frontend(
                "frame length and shift must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            return Err(AudioError::Frontend(format!(
                "pre-emphasis must be in [0, 1), got {}",
                self.pre_emphasis
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(AudioError::Frontend("log floor must be positive".into()));
        }
        if self.num_coeffs == 0 {
            return Err(AudioError::Frontend("zero coefficients requested".into()));
        }
        if self.coeff_mode == CoeffMode::WithDeltas && self.num_coeffs % DELTA_BASE_SPLIT != 0 {
            return Err(AudioError::Frontend(format!(
                "delta mode needs a coefficient count divisible by {DELTA_BASE_SPLIT}, got {}",
                self.num_coeffs
            )));
        }
        if self.base_coeffs() > self.num_filters {
            return Err(AudioError::Frontend(format!(
                "{} DCT coefficients exceed {} mel filters",
                self.base_coeffs(),
                self.num_filters
            )));
        }
        let frame_len = (self.frame_length_s * sample_rate as f64).round() as usize;
        let hop = (self.frame_shift_s * sample_rate as f64).round() as usize;
        if frame_len == 0 || hop == 0 {
            return Err(AudioError::Frontend(
                "frame geometry collapses to zero samples at this rate".into(),
            ));
        }
        Ok((frame_len, hop))
    }
}

/// A `[num_frames x num_coeffs]` row-major feature matrix plus the frame
/// geometry it was extracted with.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccFeatures {
    pub num_frames: usize,
    pub num_coeffs: usize,
    pub data: Vec<f64>,
    pub sample_rate: u32,
    /// Frame length in samples.
    pub frame_length: usize,
    /// Hop between frames in samples.
    pub frame_shift: usize,
}

impl MfccFeatures {
    pub fn row(&self, frame: usize) -> &[f64] {
        &self.data[frame * self.num_coeffs..(frame + 1) * self.num_coeffs]
    }
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
fn hz_to_mel(f: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    if f < min_log_hz {
        f / f_sp
    } else {
        min_log_hz / f_sp + (f / min_log_hz).ln() / (6.4f64.ln() / 27.0)
    }
}

fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_mel = 1000.0 / f_sp;
    if m < min_log_mel {
        m * f_sp
    } else {
        1000.0 * ((m - min_log_mel) * (6.4f64.ln() / 27.0)).exp()
    }
}

/// Edge frequencies `(lo, center, hi)` in Hz of each triangular filter for
/// a bank spanning 0 to Nyquist.
pub fn filter_bands(sample_rate: u32, num_filters: usize) -> Vec<(f64, f64, f64)> {
    let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
    let edge = |i: usize| mel_to_hz(mel_max * i as f64 / (num_filters + 1) as f64);
    (0..num_filters)
        .map(|m| (edge(m), edge(m + 1), edge(m + 2)))
        .collect()
}

/// Dense `[num_filters x (n_fft/2 + 1)]` filterbank matrix with Slaney
/// area normalization (each triangle scaled by 2 / bandwidth).
fn mel_filterbank(sample_rate: u32, n_fft: usize, num_filters: usize) -> Vec<Vec<f64>> {
    let bins = n_fft / 2 + 1;
    let bin_hz: Vec<f64> = (0..bins)
        .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
        .collect();
    filter_bands(sample_rate, num_filters)
        .into_iter()
        .map(|(lo, center, hi)| {
            let norm = 2.0 / (hi - lo);
            bin_hz
                .iter()
                .map(|&f| {
                    let w = if f <= lo || f >= hi {
                        0.0
                    } else if f <= center {
                        (f - lo) / (center - lo)
                    } else {
                        (hi - f) / (hi - center)
                    };
                    w * norm
                })
                .collect()
        })
        .collect()
}

fn periodic_hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos()))
        .collect()
}

/// Runs the pipeline up to the mel energies (before log and DCT), returning
/// a `[frames x num_filters]` matrix. Exposed for inspection and testing.
pub fn compute_mel_energies(clip: &AudioClip, cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    let (frame_len, hop) = cfg.validate(clip.sample_rate)?;
    if clip.samples.len() < frame_len {
        return Err(AudioError::Frontend(format!(
            "clip of {} samples is shorter than one {frame_len}-sample frame",
            clip.samples.len()
        )));
    }

    let mut emphasized = clip.samples.clone();
    for i in (1..emphasized.len()).rev() {
        emphasized[i] -= cfg.pre_emphasis * emphasized[i - 1];
    }

    let num_frames = (clip.samples.len() - frame_len) / hop + 1;
    let n_fft = frame_len.next_power_of_two();
    let window = periodic_hann(frame_len);
    let bank = mel_filterbank(clip.sample_rate, n_fft, cfg.num_filters);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let bins = n_fft / 2 + 1;

    let mut energies = Vec::with_capacity(num_frames);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..num_frames {
        let start = t * hop;
        for i in 0..n_fft {
            let v = if i < frame_len {
                emphasized[start + i] * window[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        let mags: Vec<f64> = buf[..bins].iter().map(|c| c.norm()).collect();
        let frame: Vec<f64> = bank
            .iter()
            .map(|filt| filt.iter().zip(&mags).map(|(w, m)| w * m).sum())
            .collect();
        energies.push(frame);
    }
    Ok(energies)
}

/// Orthonormal DCT-II basis, `keep` rows over `m` points.
fn dct_basis(keep: usize, m: usize) -> Vec<Vec<f64>> {
    (0..keep)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / m as f64).sqrt()
            } else {
                (2.0 / m as f64).sqrt()
            };
            (0..m)
                .map(|j| {
                    scale
                        * (std::f64::consts::PI * k as f64 * (2.0 * j as f64 + 1.0)
                            / (2.0 * m as f64))
                            .cos()
                })
                .collect()
        })
        .collect()
}

/// Two-tap regression deltas with edge replication.
fn deltas(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t_max = rows.len();
    let denom = 2.0 * (1.0 + 4.0); // 2 * sum(n^2) for n in 1..=2
    let at = |t: isize| -> &Vec<f64> { &rows[t.clamp(0, t_max as isize - 1) as usize] };
    (0..t_max as isize)
        .map(|t| {
            (0..rows[0].len())
                .map(|c| {
                    (1..=2isize)
                        .map(|n| n as f64 * (at(t + n)[c] - at(t - n)[c]))
                        .sum::<f64>()
                        / denom
                })
                .collect()
        })
        .collect()
}

/// Extracts the MFCC matrix for one clip.
pub fn compute_mfcc(clip: &AudioClip, cfg: &MfccConfig) -> Result<MfccFeatures> {
    let (frame_len, hop) = cfg.validate(clip.sample_rate)?;
    let energies = compute_mel_energies(clip, cfg)?;
    let basis = dct_basis(cfg.base_coeffs(), cfg.num_filters);

    let statics: Vec<Vec<f64>> = energies
        .iter()
        .map(|frame| {
            let logged: Vec<f64> = frame.iter().map(|&e| e.max(cfg.log_floor).ln()).collect();
            basis
                .iter()
                .map(|row| row.iter().zip(&logged).map(|(b, l)| b * l).sum())
                .collect()
        })
        .collect();

    let mut rows: Vec<Vec<f64>> = match cfg.coeff_mode {
        CoeffMode::Static => statics,
        CoeffMode::WithDeltas => {
            let d1 = deltas(&statics);
            let d2 = deltas(&d1);
            statics
                .into_iter()
                .zip(d1)
                .zip(d2)
                .map(|((mut s, d1), d2)| {
                    s.extend(d1);
                    s.extend(d2);
                    s
                })
                .collect()
        }
    };

    if cfg.normalize {
        let n = rows.len() as f64;
        for c in 0..cfg.num_coeffs {
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
            // A constant coefficient is centered but not rescaled.
            let scale = if var > 1e-24 { var.sqrt().recip() } else { 1.0 };
            for r in rows.iter_mut() {
                r[c] = (r[c] - mean) * scale;
            }
        }
    }

    let num_frames = rows.len();
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(MfccFeatures {
        num_frames,
        num_coeffs: cfg.num_coeffs,
        data,
        sample_rate: clip.sample_rate,
        frame_length: frame_len,
        frame_shift: hop,
    })
}

/// Fits a feature matrix to exactly `target_frames` rows: longer inputs are
/// truncated, shorter ones zero-padded at the end.
pub fn pad_or_truncate(features: &MfccFeatures, target_frames: usize) -> MfccFeatures {
    let c = features.num_coeffs;
    let mut data = Vec::with_capacity(target_frames * c);
    let keep = features.num_frames.min(target_frames);
    data.extend_from_slice(&features.data[..keep * c]);
    data.resize(target_frames * c, 0.0);
    MfccFeatures {
        num_frames: target_frames,
        num_coeffs: c,
        data,
        sample_rate: features.sample_rate,
        frame_length: features.frame_length,
        frame_shift: features.frame_shift,
    }
}
