//! Acoustic frontend: waveforms to normalized log-mel feature sequences,
//! with time masking for training-time augmentation.

pub mod mel;
pub mod wav;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::config::FrontendConfig;
use crate::error::{Error, Result};

/// One utterance of audio in [-1, 1].
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Waveform> {
        if sample_rate == 0 {
            return Err(Error::data("waveform sample_rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::data("waveform is empty"));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Time-major log-mel features for one utterance.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    /// `[T, num_mel_bins]`.
    pub frames: Array2<f64>,
    /// Frames per second.
    pub frame_rate: f64,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.frames.ncols()
    }
}

/// Log-mel extraction. The frame count is floor((len - window)/hop) + 1
/// (no padding); each value is ln(mel_energy + log_floor).
pub fn compute_log_mel(w: &Waveform, cfg: &FrontendConfig) -> Result<FeatureSequence> {
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::data(format!(
            "waveform is {} Hz, frontend expects {} Hz",
            w.sample_rate, cfg.sample_rate
        )));
    }
    let win = cfg.window_len();
    let hop = cfg.hop_len();
    if w.samples.len() < win {
        return Err(Error::data(format!(
            "utterance too short: {} samples < one {win}-sample window",
            w.samples.len()
        )));
    }
    if w.samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("waveform contains non-finite samples"));
    }
    let n_fft = win.next_power_of_two();
    let window = mel::hann(win);
    let spec = mel::power_spectrogram(&w.samples, &window, hop, n_fft);
    let fb = mel::mel_filterbank(
        cfg.num_mel_bins,
        n_fft,
        cfg.sample_rate as f64,
        cfg.fmin_hz,
        cfg.fmax_hz,
    );
    let mut frames = spec.dot(&fb.t());
    frames.mapv_inplace(|v| (v + cfg.log_floor).ln());
    Ok(FeatureSequence {
        frames,
        frame_rate: cfg.frame_rate(),
    })
}

/// Per-bin normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

const STD_FLOOR: f64 = 1e-8;

impl FeatureStats {
    /// Accumulate over a corpus of feature sequences.
    pub fn compute<'a>(feats: impl IntoIterator<Item = &'a FeatureSequence>) -> Result<FeatureStats> {
        let mut sum: Option<Array1<f64>> = None;
        let mut sumsq: Option<Array1<f64>> = None;
        let mut count = 0usize;
        for f in feats {
            let bins = f.num_bins();
            let sum = sum.get_or_insert_with(|| Array1::zeros(bins));
            let sumsq = sumsq.get_or_insert_with(|| Array1::zeros(bins));
            if sum.len() != bins {
                return Err(Error::data("inconsistent mel bin counts across corpus"));
            }
            for row in f.frames.rows() {
                for (b, &v) in row.iter().enumerate() {
                    sum[b] += v;
                    sumsq[b] += v * v;
                }
            }
            count += f.num_frames();
        }
        let (sum, sumsq) = match (sum, sumsq) {
            (Some(a), Some(b)) if count > 0 => (a, b),
            _ => return Err(Error::data("cannot compute stats from an empty corpus")),
        };
        let n = count as f64;
        let mean = sum.mapv(|v| v / n);
        let std = ndarray::Zip::from(&sumsq)
            .and(&mean)
            .map_collect(|&sq, &m| ((sq / n - m * m).max(0.0)).sqrt().max(STD_FLOOR));
        Ok(FeatureStats { mean, std })
    }

    /// From one utterance (fallback when corpus stats are absent).
    pub fn from_single(f: &FeatureSequence) -> Result<FeatureStats> {
        FeatureStats::compute(std::iter::once(f))
    }

    /// Text format: one `mean<TAB>std` line per mel bin.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (m, s) in self.mean.iter().zip(self.std.iter()) {
            text.push_str(&format!("{m:.17e}\t{s:.17e}\n"));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<FeatureStats> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split('\t');
            let m: f64 = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::data(format!("{path:?}:{}: bad stats line", i + 1)))?;
            let s: f64 = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::data(format!("{path:?}:{}: bad stats line", i + 1)))?;
            mean.push(m);
            std.push(s);
        }
        if mean.is_empty() {
            return Err(Error::data(format!("{path:?} holds no stats")));
        }
        Ok(FeatureStats {
            mean: Array1::from(mean),
            std: Array1::from(std),
        })
    }
}

/// (value - mean) / std per bin.
pub fn normalize(f: &FeatureSequence, stats: &FeatureStats) -> Result<FeatureSequence> {
    if stats.mean.len() != f.num_bins() {
        return Err(Error::data(format!(
            "stats cover {} bins, features have {}",
            stats.mean.len(),
            f.num_bins()
        )));
    }
    let mut frames = f.frames.clone();
    for mut row in frames.rows_mut() {
        for (b, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.mean[b]) / stats.std[b];
        }
    }
    Ok(FeatureSequence {
        frames,
        frame_rate: f.frame_rate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskFill {
    Zero,
    /// Per-utterance, per-bin mean.
    Mean,
}

impl MaskFill {
    pub fn parse(s: &str) -> Result<MaskFill> {
        match s {
            "zero" => Ok(MaskFill::Zero),
            "mean" => Ok(MaskFill::Mean),
            other => Err(Error::config(format!("unknown mask fill {other:?}"))),
        }
    }
}

/// Time-masking policy (the SpecAugment mode used here).
#[derive(Debug, Clone)]
pub struct SpecAugmentPolicy {
    pub num_time_masks: usize,
    pub max_mask_width: usize,
    pub fill: MaskFill,
    pub seed: u64,
}

/// Overwrite `num_time_masks` contiguous frame spans, each of width drawn
/// uniformly from [0, max_mask_width], with the fill value. Masks are
/// clipped at the sequence end; unmasked cells are untouched.
pub fn apply_time_masks(f: &FeatureSequence, policy: &SpecAugmentPolicy) -> FeatureSequence {
    let t_len = f.num_frames();
    let bins = f.num_bins();
    let mut frames = f.frames.clone();
    if policy.num_time_masks == 0 || t_len == 0 {
        return FeatureSequence {
            frames,
            frame_rate: f.frame_rate,
        };
    }
    let fill_row: Array1<f64> = match policy.fill {
        MaskFill::Zero => Array1::zeros(bins),
        MaskFill::Mean => {
            let mut m = Array1::zeros(bins);
            for row in f.frames.rows() {
                m += &row;
            }
            m / t_len as f64
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    for _ in 0..policy.num_time_masks {
        let width = rng.gen_range(0..=policy.max_mask_width);
        let start = rng.gen_range(0..t_len);
        let end = (start + width).min(t_len);
        for t in start..end {
            frames.row_mut(t).assign(&fill_row);
        }
    }
    FeatureSequence {
        frames,
        frame_rate: f.frame_rate,
    }
}
